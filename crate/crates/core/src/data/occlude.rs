//! Occluder synthesis and application at controlled coverage.
//!
//! Four occluder families: constant white patches, i.i.d. uniform noise,
//! procedural textures (stripes/checker), and rendered object silhouettes
//! from a shape set disjoint from the dataset classes. Coverage is measured
//! over the full image and hits the requested target within +-0.02.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::shapes::{occluder_mask, OCCLUDER_SHAPES};
use super::{quantize, DataError, LabeledImage, SampleId};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum OccluderKind {
    White,
    Noise,
    Texture,
    Object,
}

pub const ALL_OCCLUDERS: [OccluderKind; 4] = [
    OccluderKind::White,
    OccluderKind::Noise,
    OccluderKind::Texture,
    OccluderKind::Object,
];

impl OccluderKind {
    /// Short tag used in table columns: w, n, t, o.
    pub fn tag(&self) -> &'static str {
        match self {
            OccluderKind::White => "w",
            OccluderKind::Noise => "n",
            OccluderKind::Texture => "t",
            OccluderKind::Object => "o",
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            OccluderKind::White => "white",
            OccluderKind::Noise => "noise",
            OccluderKind::Texture => "texture",
            OccluderKind::Object => "object",
        }
    }

    pub fn parse(s: &str) -> Result<OccluderKind, DataError> {
        match s {
            "w" | "white" => Ok(OccluderKind::White),
            "n" | "noise" => Ok(OccluderKind::Noise),
            "t" | "texture" => Ok(OccluderKind::Texture),
            "o" | "object" => Ok(OccluderKind::Object),
            other => Err(DataError::UnknownOccluder(other.to_string())),
        }
    }

    /// Expected fraction of the patch bounding box the mask fills; sizing hint.
    fn fill_ratio(&self) -> f64 {
        match self {
            OccluderKind::Object => 0.45,
            _ => 1.0,
        }
    }

    fn min_side(&self) -> usize {
        match self {
            OccluderKind::Object => 4,
            _ => 1,
        }
    }
}

/// Coverage bands: L0 = 0, L1 = (0.20, 0.40], L2 = (0.40, 0.60],
/// L3 = (0.60, 0.80]. The gaps (0, 0.20] and (0.80, 1.0] are reported under
/// the nearest band (L1 / L3 respectively).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum OcclusionLevel {
    L0,
    L1,
    L2,
    L3,
}

pub const OCCLUDED_LEVELS: [OcclusionLevel; 3] =
    [OcclusionLevel::L1, OcclusionLevel::L2, OcclusionLevel::L3];

impl OcclusionLevel {
    pub fn name(&self) -> &'static str {
        match self {
            OcclusionLevel::L0 => "L0",
            OcclusionLevel::L1 => "L1",
            OcclusionLevel::L2 => "L2",
            OcclusionLevel::L3 => "L3",
        }
    }

    pub fn parse(s: &str) -> Option<OcclusionLevel> {
        match s {
            "L0" => Some(OcclusionLevel::L0),
            "L1" => Some(OcclusionLevel::L1),
            "L2" => Some(OcclusionLevel::L2),
            "L3" => Some(OcclusionLevel::L3),
            _ => None,
        }
    }

    /// Coverage band (low, high] for sampling targets within the level.
    pub fn band(&self) -> (f64, f64) {
        match self {
            OcclusionLevel::L0 => (0.0, 0.0),
            OcclusionLevel::L1 => (0.20, 0.40),
            OcclusionLevel::L2 => (0.40, 0.60),
            OcclusionLevel::L3 => (0.60, 0.80),
        }
    }
}

pub fn classify_level(coverage: f64) -> OcclusionLevel {
    assert!((0.0..=1.0).contains(&coverage), "coverage {coverage} outside [0,1]");
    if coverage == 0.0 {
        OcclusionLevel::L0
    } else if coverage <= 0.40 {
        OcclusionLevel::L1
    } else if coverage <= 0.60 {
        OcclusionLevel::L2
    } else {
        OcclusionLevel::L3
    }
}

/// A rendered occluder patch: pixel values plus the silhouette mask saying
/// which pixels of the bounding box actually occlude.
pub struct OccluderPatch {
    pub pixels: Vec<f64>,
    pub mask: Vec<bool>,
    pub h: usize,
    pub w: usize,
}

pub fn make_occluder(
    kind: OccluderKind,
    h: usize,
    w: usize,
    rng: &mut ChaCha8Rng,
) -> Result<OccluderPatch, DataError> {
    if h == 0 || w == 0 {
        return Err(DataError::BadPatchSize { h, w, size: 0 });
    }
    let n = h * w;
    let (pixels, mask) = match kind {
        OccluderKind::White => (vec![1.0; n], vec![true; n]),
        OccluderKind::Noise => {
            let pixels = (0..n).map(|_| quantize(rng.gen_range(0.0..1.0))).collect();
            (pixels, vec![true; n])
        }
        OccluderKind::Texture => {
            let period = rng.gen_range(2usize..=6);
            let phase = rng.gen_range(0..period);
            let a = quantize(rng.gen_range(0.0..0.35));
            let b = quantize(rng.gen_range(0.6..1.0));
            let orientation = rng.gen_range(0u8..4);
            let mut pixels = vec![0.0; n];
            for y in 0..h {
                for x in 0..w {
                    let c = match orientation {
                        0 => x,                 // vertical stripes
                        1 => y,                 // horizontal stripes
                        2 => x + y,             // diagonal stripes
                        _ => (x / period + y / period) * period, // checker
                    };
                    let on = ((c + phase) / period) % 2 == 0;
                    pixels[y * w + x] = if on { a } else { b };
                }
            }
            (pixels, vec![true; n])
        }
        OccluderKind::Object => {
            let shape = OCCLUDER_SHAPES[rng.gen_range(0..OCCLUDER_SHAPES.len())];
            let mask = occluder_mask(shape, h, w);
            let fill = quantize(rng.gen_range(0.2..0.9));
            let pixels = mask.iter().map(|m| if *m { fill } else { 0.0 }).collect();
            (pixels, mask)
        }
    };
    Ok(OccluderPatch { pixels, mask, h, w })
}

/// An image with one or more occluder patches stamped onto it.
pub struct OccludedImage {
    pub pixels: Tensor,
    pub source: SampleId,
    pub label: usize,
    /// True where an occluder covers the parent image.
    pub mask: Vec<bool>,
    /// Exactly `mean(mask)`.
    pub coverage: f64,
    pub occluder: OccluderKind,
}

impl OccludedImage {
    pub fn level(&self) -> OcclusionLevel {
        classify_level(self.coverage)
    }

    pub fn is_occluded(&self) -> bool {
        self.coverage > 0.0
    }
}

/// Stamp occluder patches at random positions until the covered fraction of
/// the full image is within +-0.02 of `target`. Patches may overlap each
/// other and the image border (clipped). Target 0 returns an untouched copy.
pub fn apply_occlusion(
    image: &LabeledImage,
    target: f64,
    kind: OccluderKind,
    rng: &mut ChaCha8Rng,
) -> Result<OccludedImage, DataError> {
    if !(0.0..=0.9).contains(&target) {
        return Err(DataError::CoverageOutOfRange(target));
    }
    let shape = image.pixels.shape();
    let (h, w) = (shape[1], shape[2]);
    let total = h * w;
    let mut pixels = image.pixels.to_vec();
    let mut mask = vec![false; total];

    if target == 0.0 {
        return Ok(OccludedImage {
            pixels: Tensor::new(pixels, shape),
            source: image.sample_id,
            label: image.class_label,
            mask,
            coverage: 0.0,
            occluder: kind,
        });
    }

    let target_px = (target * total as f64).round() as i64;
    // Absolute pixel slack that keeps |coverage - target| <= 0.02 after the
    // rounding of target_px itself.
    let tol_px = ((0.02 * total as f64).floor() as i64 - 1).max(0);
    let mut covered: i64 = 0;
    let mut side_cap = h.min(w);

    for _attempt in 0..10_000 {
        if (covered - target_px).abs() <= tol_px {
            break;
        }
        let deficit = (target_px - covered).max(1) as f64;
        let side = ((deficit / kind.fill_ratio()).sqrt().ceil() as usize)
            .clamp(kind.min_side(), side_cap);
        let patch = make_occluder(kind, side, side, rng)?;
        // Top-left corner; at least a quarter of the patch stays in-frame.
        let ty = rng.gen_range(-(side as i64) / 2..=(h as i64 - (side as i64 + 1) / 2));
        let tx = rng.gen_range(-(side as i64) / 2..=(w as i64 - (side as i64 + 1) / 2));

        // Count the newly covered pixels before committing.
        let mut new_px = 0i64;
        for py in 0..side {
            for px in 0..side {
                if !patch.mask[py * side + px] {
                    continue;
                }
                let y = ty + py as i64;
                let x = tx + px as i64;
                if y >= 0 && x >= 0 && (y as usize) < h && (x as usize) < w {
                    if !mask[y as usize * w + x as usize] {
                        new_px += 1;
                    }
                }
            }
        }
        if covered + new_px > target_px + tol_px {
            // Overshoot: shrink future patches and retry.
            side_cap = (side.saturating_sub(1)).max(kind.min_side());
            continue;
        }
        for py in 0..side {
            for px in 0..side {
                if !patch.mask[py * side + px] {
                    continue;
                }
                let y = ty + py as i64;
                let x = tx + px as i64;
                if y >= 0 && x >= 0 && (y as usize) < h && (x as usize) < w {
                    let idx = y as usize * w + x as usize;
                    pixels[idx] = patch.pixels[py * side + px];
                    mask[idx] = true;
                }
            }
        }
        covered += new_px;
    }

    let coverage = covered as f64 / total as f64;
    if (coverage - target).abs() > 0.02 {
        return Err(DataError::CoverageUnreachable {
            target,
            reached: coverage,
        });
    }
    Ok(OccludedImage {
        pixels: Tensor::new(pixels, shape),
        source: image.sample_id,
        label: image.class_label,
        mask,
        coverage,
        occluder: kind,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::DatasetManifest;
    use rand::SeedableRng;

    fn sample_image() -> LabeledImage {
        let m = DatasetManifest::generate(4, 10, 32, 7).unwrap();
        m.render(&m.records[0])
    }

    #[test]
    fn white_patch_is_all_ones() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let p = make_occluder(OccluderKind::White, 4, 4, &mut rng).unwrap();
        assert_eq!(p.pixels, vec![1.0; 16]);
        assert!(p.mask.iter().all(|m| *m));
    }

    #[test]
    fn noise_patch_is_reproducible_with_uniform_mean() {
        let p1 = make_occluder(OccluderKind::Noise, 8, 8, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let p2 = make_occluder(OccluderKind::Noise, 8, 8, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        assert_eq!(p1.pixels, p2.pixels);
        let mean: f64 = p1.pixels.iter().sum::<f64>() / 64.0;
        assert!((0.4..=0.6).contains(&mean), "mean {mean}");
    }

    #[test]
    fn object_mask_is_connected_and_smaller_than_bbox() {
        use crate::data::shapes::mask_is_connected;
        for seed in 0..8 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let p = make_occluder(OccluderKind::Object, 16, 16, &mut rng).unwrap();
            let count = p.mask.iter().filter(|m| **m).count();
            assert!(count > 0 && count < 256);
            assert!(mask_is_connected(&p.mask, 16, 16));
        }
    }

    #[test]
    fn texture_patch_has_two_intensities() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let p = make_occluder(OccluderKind::Texture, 8, 8, &mut rng).unwrap();
        let mut distinct: Vec<u64> = p.pixels.iter().map(|v| v.to_bits()).collect();
        distinct.sort_unstable();
        distinct.dedup();
        assert_eq!(distinct.len(), 2);
    }

    #[test]
    fn zero_target_returns_untouched_copy() {
        let img = sample_image();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let occ = apply_occlusion(&img, 0.0, OccluderKind::White, &mut rng).unwrap();
        assert_eq!(occ.pixels.to_vec(), img.pixels.to_vec());
        assert_eq!(occ.coverage, 0.0);
        assert_eq!(occ.level(), OcclusionLevel::L0);
    }

    #[test]
    fn coverage_lands_within_tolerance_and_mask_is_honest() {
        let img = sample_image();
        for (seed, (target, kind)) in [
            (0.30, OccluderKind::White),
            (0.70, OccluderKind::Object),
            (0.10, OccluderKind::Noise),
            (0.90, OccluderKind::Texture),
            (0.55, OccluderKind::Object),
        ]
        .into_iter()
        .enumerate()
        {
            let mut rng = ChaCha8Rng::seed_from_u64(seed as u64);
            let occ = apply_occlusion(&img, target, kind, &mut rng).unwrap();
            assert!(
                (occ.coverage - target).abs() <= 0.02,
                "target {target} reached {} for {kind:?}",
                occ.coverage
            );
            // coverage equals mean(mask) exactly
            let mean = occ.mask.iter().filter(|m| **m).count() as f64 / occ.mask.len() as f64;
            assert_eq!(occ.coverage, mean);
            // unmasked pixels bit-identical to parent
            let parent = img.pixels.to_vec();
            for (i, (pv, ov)) in parent.iter().zip(occ.pixels.to_vec()).enumerate() {
                if !occ.mask[i] {
                    assert_eq!(pv.to_bits(), ov.to_bits(), "pixel {i} changed outside mask");
                }
            }
        }
    }

    #[test]
    fn level_bands_on_boundary_probes() {
        assert_eq!(classify_level(0.0), OcclusionLevel::L0);
        assert_eq!(classify_level(0.20), OcclusionLevel::L1);
        assert_eq!(classify_level(0.40), OcclusionLevel::L1);
        assert_eq!(classify_level(0.50), OcclusionLevel::L2);
        assert_eq!(classify_level(0.60), OcclusionLevel::L2);
        assert_eq!(classify_level(0.65), OcclusionLevel::L3);
        assert_eq!(classify_level(0.80), OcclusionLevel::L3);
        // Extension bands outside the canonical taxonomy.
        assert_eq!(classify_level(0.10), OcclusionLevel::L1);
        assert_eq!(classify_level(0.90), OcclusionLevel::L3);
    }

    #[test]
    fn rejects_out_of_range_target() {
        let img = sample_image();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert!(apply_occlusion(&img, 0.95, OccluderKind::White, &mut rng).is_err());
        assert!(apply_occlusion(&img, -0.1, OccluderKind::White, &mut rng).is_err());
    }

    #[test]
    fn unknown_occluder_tag_is_rejected() {
        assert!(OccluderKind::parse("blob").is_err());
        assert_eq!(OccluderKind::parse("o").unwrap(), OccluderKind::Object);
        assert_eq!(OccluderKind::parse("white").unwrap(), OccluderKind::White);
    }
}
