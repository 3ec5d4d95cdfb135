//! Synthetic labeled shape corpus plus controlled occlusion synthesis.
//!
//! Everything here is a pure function of the manifest and its seed:
//! regenerating any image, occluder, or frozen test set reproduces it
//! byte for byte.

pub mod occlude;
pub mod shapes;
pub mod stream;

use std::fmt;
use std::io::Write as _;
use std::path::Path;

use rand::Rng;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::rng::{derive_seed, stream_rng, Stream};
use crate::tensor::Tensor;
use shapes::{class_mask, ClassShape, CLASS_SHAPES};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("need at least 2 classes, got {0}")]
    TooFewClasses(usize),
    #[error("at most {max} shape classes available, got {requested}")]
    TooManyClasses { requested: usize, max: usize },
    #[error("per_class must be at least 10, got {0} (too small to train)")]
    TooFewSamples(usize),
    #[error("image_size must be at least 32, got {0}")]
    ImageTooSmall(usize),
    #[error("unknown occluder type tag `{0}`")]
    UnknownOccluder(String),
    #[error("target coverage {0} outside [0.0, 0.9]")]
    CoverageOutOfRange(f64),
    #[error("could not reach coverage {target} (stuck at {reached})")]
    CoverageUnreachable { target: f64, reached: f64 },
    #[error("occluder patch {h}x{w} invalid for image {size}x{size}")]
    BadPatchSize { h: usize, w: usize, size: usize },
    #[error("manifest is empty")]
    EmptyManifest,
    #[error("batch size must be at least 2, got {0}")]
    BatchTooSmall(usize),
    #[error("manifest parse error at line {line}: {message}")]
    ManifestParse { line: usize, message: String },
    #[error("manifest checksum mismatch: stored {stored}, computed {computed}")]
    ChecksumMismatch { stored: String, computed: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Identifies sample `m` of class `n`, stable across regeneration.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct SampleId {
    pub class: u32,
    pub index: u32,
}

impl fmt::Display for SampleId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "c{}s{}", self.class, self.index)
    }
}

impl SampleId {
    pub fn parse(s: &str) -> Option<SampleId> {
        let rest = s.strip_prefix('c')?;
        let (class, index) = rest.split_once('s')?;
        Some(SampleId {
            class: class.parse().ok()?,
            index: index.parse().ok()?,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SplitTag {
    Train,
    Test,
}

impl SplitTag {
    fn as_str(&self) -> &'static str {
        match self {
            SplitTag::Train => "train",
            SplitTag::Test => "test",
        }
    }
}

/// A grayscale image with its class label. Pixels live in [0,1], quantized
/// to the 8-bit grid so graymap persistence is lossless.
pub struct LabeledImage {
    pub pixels: Tensor,
    pub class_label: usize,
    pub sample_id: SampleId,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ManifestRecord {
    pub id: SampleId,
    pub label: usize,
    pub split: SplitTag,
    pub seed: u64,
}

/// Everything needed to regenerate the corpus deterministically.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetManifest {
    pub name: String,
    pub seed: u64,
    pub num_classes: usize,
    pub per_class: usize,
    pub image_size: usize,
    pub class_names: Vec<String>,
    pub records: Vec<ManifestRecord>,
}

impl DatasetManifest {
    /// Build the manifest for `num_classes` shape classes with `per_class`
    /// training samples each plus a 20% test split (`per_class / 5` extra
    /// samples per class).
    pub fn generate(
        num_classes: usize,
        per_class: usize,
        image_size: usize,
        seed: u64,
    ) -> Result<DatasetManifest, DataError> {
        if num_classes < 2 {
            return Err(DataError::TooFewClasses(num_classes));
        }
        if num_classes > CLASS_SHAPES.len() {
            return Err(DataError::TooManyClasses {
                requested: num_classes,
                max: CLASS_SHAPES.len(),
            });
        }
        if per_class < 10 {
            return Err(DataError::TooFewSamples(per_class));
        }
        if image_size < 32 {
            return Err(DataError::ImageTooSmall(image_size));
        }
        let test_per_class = per_class / 5;
        let mut records = Vec::with_capacity(num_classes * (per_class + test_per_class));
        for class in 0..num_classes {
            for index in 0..per_class + test_per_class {
                let split = if index < per_class {
                    SplitTag::Train
                } else {
                    SplitTag::Test
                };
                records.push(ManifestRecord {
                    id: SampleId {
                        class: class as u32,
                        index: index as u32,
                    },
                    label: class,
                    split,
                    seed: derive_seed(seed, Stream::DatasetImage, class as u64, index as u64),
                });
            }
        }
        Ok(DatasetManifest {
            name: "synthetic-shapes".to_string(),
            seed,
            num_classes,
            per_class,
            image_size,
            class_names: CLASS_SHAPES[..num_classes].iter().map(|s| s.name().to_string()).collect(),
            records,
        })
    }

    /// Render one sample. Pure function of the record's stored seed.
    pub fn render(&self, record: &ManifestRecord) -> LabeledImage {
        let size = self.image_size;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(record.seed);
        let shape: ClassShape = CLASS_SHAPES[record.label];

        let base: f64 = rng.gen_range(0.02..0.12);
        let noise_amp: f64 = rng.gen_range(0.04..0.08);
        let cx = size as f64 * rng.gen_range(0.42..0.58);
        let cy = size as f64 * rng.gen_range(0.42..0.58);
        let r = size as f64 * rng.gen_range(0.30..0.44);
        let fill: f64 = rng.gen_range(0.70..0.95);

        let mask = class_mask(shape, size, cx, cy, r);
        let mut pixels = vec![0.0f64; size * size];
        for (p, m) in pixels.iter_mut().zip(&mask) {
            let n: f64 = rng.gen_range(0.0..noise_amp);
            *p = if *m { fill - n } else { base + n };
        }
        // A few distractor dots in the background.
        let dots = rng.gen_range(2..5);
        for _ in 0..dots {
            let dx = rng.gen_range(0..size);
            let dy = rng.gen_range(0..size);
            let intensity: f64 = rng.gen_range(0.25..0.45);
            for (oy, ox) in [(0i64, 0i64), (0, 1), (1, 0), (1, 1)] {
                let yy = dy as i64 + oy;
                let xx = dx as i64 + ox;
                if yy >= 0 && xx >= 0 && (yy as usize) < size && (xx as usize) < size {
                    let idx = yy as usize * size + xx as usize;
                    if !mask[idx] {
                        pixels[idx] = intensity;
                    }
                }
            }
        }
        for p in pixels.iter_mut() {
            *p = quantize(*p);
        }
        LabeledImage {
            pixels: Tensor::new(pixels, &[1, size, size]),
            class_label: record.label,
            sample_id: record.id,
        }
    }

    pub fn train_records(&self) -> impl Iterator<Item = &ManifestRecord> {
        self.records.iter().filter(|r| r.split == SplitTag::Train)
    }

    pub fn test_records(&self) -> impl Iterator<Item = &ManifestRecord> {
        self.records.iter().filter(|r| r.split == SplitTag::Test)
    }

    /// Serialize to the line-delimited manifest format, checksum included.
    pub fn to_text(&self) -> String {
        let mut body = String::new();
        body.push_str("# shapes-dataset manifest v1\n");
        body.push_str(&format!("name {}\n", self.name));
        body.push_str(&format!("seed {}\n", self.seed));
        body.push_str(&format!("num_classes {}\n", self.num_classes));
        body.push_str(&format!("per_class {}\n", self.per_class));
        body.push_str(&format!("image_size {}\n", self.image_size));
        body.push_str(&format!("classes {}\n", self.class_names.join(" ")));
        body.push_str("# id label split seed\n");
        for r in &self.records {
            body.push_str(&format!("{} {} {} {}\n", r.id, r.label, r.split.as_str(), r.seed));
        }
        let checksum = hex_sha256(body.as_bytes());
        format!("{body}checksum {checksum}\n")
    }

    pub fn from_text(text: &str) -> Result<DatasetManifest, DataError> {
        let mut name = None;
        let mut seed = None;
        let mut num_classes = None;
        let mut per_class = None;
        let mut image_size = None;
        let mut class_names = Vec::new();
        let mut records = Vec::new();
        let mut stored_checksum = None;
        let mut body_end = 0usize;

        for (lineno, line) in text.lines().enumerate() {
            let parse_err = |message: String| DataError::ManifestParse {
                line: lineno + 1,
                message,
            };
            if line.starts_with('#') || line.trim().is_empty() {
                body_end += line.len() + 1;
                continue;
            }
            let mut parts = line.split_whitespace();
            let key = parts.next().ok_or_else(|| parse_err("empty line".into()))?;
            match key {
                "name" => name = Some(parts.next().unwrap_or("").to_string()),
                "seed" => {
                    seed = Some(parse_field(parts.next(), "seed", lineno)?);
                }
                "num_classes" => num_classes = Some(parse_field(parts.next(), "num_classes", lineno)?),
                "per_class" => per_class = Some(parse_field(parts.next(), "per_class", lineno)?),
                "image_size" => image_size = Some(parse_field(parts.next(), "image_size", lineno)?),
                "classes" => class_names = parts.map(|s| s.to_string()).collect(),
                "checksum" => {
                    stored_checksum = Some(parts.next().unwrap_or("").to_string());
                    continue; // checksum line itself is excluded from the digest
                }
                id_str => {
                    let id = SampleId::parse(id_str)
                        .ok_or_else(|| parse_err(format!("bad sample id `{id_str}`")))?;
                    let label: usize = parse_field(parts.next(), "label", lineno)?;
                    let split = match parts.next() {
                        Some("train") => SplitTag::Train,
                        Some("test") => SplitTag::Test,
                        other => return Err(parse_err(format!("bad split tag {other:?}"))),
                    };
                    let rec_seed: u64 = parse_field(parts.next(), "record seed", lineno)?;
                    records.push(ManifestRecord {
                        id,
                        label,
                        split,
                        seed: rec_seed,
                    });
                }
            }
            body_end += line.len() + 1;
        }

        let stored = stored_checksum.ok_or(DataError::ManifestParse {
            line: 0,
            message: "missing checksum line".into(),
        })?;
        let computed = hex_sha256(text[..body_end].as_bytes());
        if stored != computed {
            return Err(DataError::ChecksumMismatch { stored, computed });
        }

        let missing = |field: &str| DataError::ManifestParse {
            line: 0,
            message: format!("missing header field `{field}`"),
        };
        Ok(DatasetManifest {
            name: name.ok_or_else(|| missing("name"))?,
            seed: seed.ok_or_else(|| missing("seed"))?,
            num_classes: num_classes.ok_or_else(|| missing("num_classes"))?,
            per_class: per_class.ok_or_else(|| missing("per_class"))?,
            image_size: image_size.ok_or_else(|| missing("image_size"))?,
            class_names,
            records,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), DataError> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(self.to_text().as_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<DatasetManifest, DataError> {
        let text = std::fs::read_to_string(path)?;
        DatasetManifest::from_text(&text)
    }

    /// Digest over the serialized manifest; used for provenance stamps.
    pub fn content_hash(&self) -> String {
        hex_sha256(self.to_text().as_bytes())
    }

    /// Deterministic validation subset of the training split (used for
    /// best-epoch selection and early stopping), as record indices.
    pub fn validation_indices(&self, fraction: f64) -> Vec<usize> {
        let train_idx: Vec<usize> = self
            .records
            .iter()
            .enumerate()
            .filter(|(_, r)| r.split == SplitTag::Train)
            .map(|(i, _)| i)
            .collect();
        let mut shuffled = train_idx;
        let mut rng = stream_rng(self.seed, Stream::ValidationSplit, 0, 0);
        use rand::seq::SliceRandom;
        shuffled.shuffle(&mut rng);
        let n = ((shuffled.len() as f64) * fraction).round() as usize;
        let mut val: Vec<usize> = shuffled.into_iter().take(n.max(1)).collect();
        val.sort_unstable();
        val
    }
}

use rand::SeedableRng as _;

pub(crate) fn parse_field<T: std::str::FromStr>(
    value: Option<&str>,
    field: &str,
    lineno: usize,
) -> Result<T, DataError> {
    value
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| DataError::ManifestParse {
            line: lineno + 1,
            message: format!("bad or missing {field}"),
        })
}

pub fn hex_sha256(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

/// Snap to the 8-bit grid (and into [0,1]) so graymap persistence is exact.
pub fn quantize(v: f64) -> f64 {
    (v.clamp(0.0, 1.0) * 255.0).round() / 255.0
}

/// Binary "P5" portable graymap encoding of a single-channel image.
pub fn to_pgm(image: &Tensor) -> Vec<u8> {
    let shape = image.shape();
    assert_eq!(shape.len(), 3, "expected [1,H,W]");
    let (h, w) = (shape[1], shape[2]);
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    for v in image.data().iter() {
        out.push((v.clamp(0.0, 1.0) * 255.0).round() as u8);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn generate_splits_arithmetic() {
        let m = DatasetManifest::generate(4, 500, 32, 7).unwrap();
        assert_eq!(m.train_records().count(), 2000);
        assert_eq!(m.test_records().count(), 400);
    }

    #[test]
    fn generation_is_deterministic_and_byte_identical() {
        let m1 = DatasetManifest::generate(4, 10, 32, 7).unwrap();
        let m2 = DatasetManifest::generate(4, 10, 32, 7).unwrap();
        assert_eq!(m1, m2);
        let r = &m1.records[5];
        let a = m1.render(r);
        let b = m2.render(r);
        assert_eq!(to_pgm(&a.pixels), to_pgm(&b.pixels));
        // Quantization makes the f64 buffers bit-identical too.
        assert_eq!(a.pixels.to_vec(), b.pixels.to_vec());
    }

    #[test]
    fn pixels_stay_in_unit_range() {
        let m = DatasetManifest::generate(8, 10, 32, 3).unwrap();
        for rec in m.records.iter().step_by(7) {
            let img = m.render(rec);
            assert!(img.pixels.data().iter().all(|v| (0.0..=1.0).contains(v)));
            assert!(img.class_label < m.num_classes);
        }
    }

    #[test]
    fn rejects_degenerate_requests() {
        assert!(matches!(
            DatasetManifest::generate(1, 100, 32, 0),
            Err(DataError::TooFewClasses(1))
        ));
        assert!(matches!(
            DatasetManifest::generate(4, 9, 32, 0),
            Err(DataError::TooFewSamples(9))
        ));
        assert!(matches!(
            DatasetManifest::generate(4, 100, 16, 0),
            Err(DataError::ImageTooSmall(16))
        ));
    }

    #[test]
    fn manifest_round_trips_with_checksum() {
        let m = DatasetManifest::generate(3, 12, 32, 11).unwrap();
        let text = m.to_text();
        let back = DatasetManifest::from_text(&text).unwrap();
        assert_eq!(m, back);
    }

    #[test]
    fn corrupted_manifest_fails_checksum() {
        let m = DatasetManifest::generate(3, 12, 32, 11).unwrap();
        let text = m.to_text().replace("c0s3 0 train", "c0s3 1 train");
        match DatasetManifest::from_text(&text) {
            Err(DataError::ChecksumMismatch { .. }) => {}
            other => panic!("expected checksum failure, got {other:?}"),
        }
    }

    #[test]
    fn validation_indices_are_stable_and_from_train_split() {
        let m = DatasetManifest::generate(4, 20, 32, 5).unwrap();
        let v1 = m.validation_indices(0.1);
        let v2 = m.validation_indices(0.1);
        assert_eq!(v1, v2);
        assert_eq!(v1.len(), 8); // 10% of 80 train
        for idx in &v1 {
            assert_eq!(m.records[*idx].split, SplitTag::Train);
        }
    }
}
