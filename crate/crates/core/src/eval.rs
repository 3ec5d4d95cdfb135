//! Evaluation over frozen test cells, the results-table structure, and the
//! latent clustering metric.

use crate::ae::LearnAutoencoder;
use crate::backbone::{argmax, ClassifierHead, FeatureExtractor, FeatureNormalizer};
use crate::data::occlude::{OccluderKind, OcclusionLevel, OCCLUDED_LEVELS};
use crate::data::stream::{materialize, FrozenSuite};
use crate::data::{DatasetManifest, SplitTag};
use crate::error::ModelError;
use crate::tensor::Tensor;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TableMeta {
    pub seed: u64,
    pub manifest_hash: String,
    pub config_hash: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TableRow {
    pub name: String,
    /// Accuracy fraction per column, aligned with `ResultsTable::columns`.
    pub cells: Vec<f64>,
    /// Arithmetic mean over all cells (including L0).
    pub mean: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ResultsTable {
    /// Cell names: "L0", then "<type>-<level>" in level-major order.
    pub columns: Vec<String>,
    pub rows: Vec<TableRow>,
    pub meta: TableMeta,
}

impl ResultsTable {
    pub fn cell(&self, row: &str, column: &str) -> Option<f64> {
        let col = self.columns.iter().position(|c| c == column)?;
        self.rows.iter().find(|r| r.name == row).map(|r| r.cells[col])
    }

    pub fn row(&self, name: &str) -> Option<&TableRow> {
        self.rows.iter().find(|r| r.name == name)
    }

    /// True when every stored mean equals the recomputed mean of its cells.
    pub fn means_consistent(&self) -> bool {
        self.rows.iter().all(|r| {
            let recomputed = r.cells.iter().sum::<f64>() / r.cells.len() as f64;
            recomputed == r.mean
        })
    }

    /// Mean accuracy of a row over the named columns.
    pub fn row_mean_over(&self, row: &str, columns: &[String]) -> Option<f64> {
        let r = self.row(row)?;
        let mut acc = 0.0;
        for c in columns {
            let idx = self.columns.iter().position(|x| x == c)?;
            acc += r.cells[idx];
        }
        Some(acc / columns.len() as f64)
    }
}

/// Column names for a set of occluder types: L0 plus type-level cells in
/// level-major order (all types at L1, then L2, then L3).
pub fn column_names(types: &[OccluderKind]) -> Vec<String> {
    let mut cols = vec!["L0".to_string()];
    for level in OCCLUDED_LEVELS {
        for kind in types {
            cols.push(format!("{}-{}", kind.tag(), level.name()));
        }
    }
    cols
}

/// A named pipeline variant to evaluate: the bare backbone, or the backbone
/// with the autoencoder spliced in front of the head.
pub enum Variant<'a> {
    Baseline,
    Proposed {
        ae: &'a LearnAutoencoder,
        normalizer: &'a FeatureNormalizer,
    },
}

impl<'a> Variant<'a> {
    fn name(&self) -> &'static str {
        match self {
            Variant::Baseline => "baseline",
            Variant::Proposed { .. } => "proposed",
        }
    }
}

/// Evaluate one or more pipeline variants over the frozen test cells,
/// extracting backbone features once per image and reusing them across
/// variants. Deterministic.
pub fn evaluate_rows(
    extractor: &FeatureExtractor,
    head: &ClassifierHead,
    variants: &[Variant<'_>],
    manifest: &DatasetManifest,
    suite: &FrozenSuite,
    types: &[OccluderKind],
    meta: TableMeta,
) -> Result<ResultsTable, ModelError> {
    let columns = column_names(types);
    let mut cells: Vec<Vec<f64>> = vec![Vec::with_capacity(columns.len()); variants.len()];

    // L0: the clean test split.
    let clean_images: Vec<(Tensor, usize)> = manifest
        .records
        .iter()
        .filter(|r| r.split == SplitTag::Test)
        .map(|r| {
            let img = manifest.render(r);
            (img.pixels, r.label)
        })
        .collect();
    let accs = variant_accuracies(extractor, head, variants, &clean_images)?;
    for (row, acc) in cells.iter_mut().zip(accs) {
        row.push(acc);
    }

    for level in OCCLUDED_LEVELS {
        for kind in types {
            let set = suite.get(*kind, level).ok_or_else(|| {
                ModelError::Checkpoint(format!(
                    "frozen suite is missing cell {}-{}",
                    kind.tag(),
                    level.name()
                ))
            })?;
            let images: Vec<(Tensor, usize)> = materialize(manifest, set)?
                .into_iter()
                .map(|occ| (occ.pixels, occ.label))
                .collect();
            let accs = variant_accuracies(extractor, head, variants, &images)?;
            for (row, acc) in cells.iter_mut().zip(accs) {
                row.push(acc);
            }
        }
    }

    let rows = variants
        .iter()
        .zip(cells)
        .map(|(v, cells)| {
            let mean = cells.iter().sum::<f64>() / cells.len() as f64;
            TableRow {
                name: v.name().to_string(),
                cells,
                mean,
            }
        })
        .collect();
    Ok(ResultsTable {
        columns,
        rows,
        meta,
    })
}

/// Accuracy of each variant over one image set, sharing extracted features.
fn variant_accuracies(
    extractor: &FeatureExtractor,
    head: &ClassifierHead,
    variants: &[Variant<'_>],
    images: &[(Tensor, usize)],
) -> Result<Vec<f64>, ModelError> {
    let mut correct = vec![0usize; variants.len()];
    for (pixels, label) in images {
        let raw = extractor.forward(pixels)?;
        for (v, hits) in variants.iter().zip(correct.iter_mut()) {
            let logits = match v {
                Variant::Baseline => head.forward(&raw)?,
                Variant::Proposed { ae, normalizer } => {
                    let normalized = normalizer.normalize_values(&raw)?;
                    let z = ae.encode_values(&normalized)?;
                    let recon = ae.decode_values(&z)?;
                    head.forward(&normalizer.denormalize_values(&recon)?)?
                }
            };
            if argmax(&logits.data()) == *label {
                *hits += 1;
            }
        }
    }
    Ok(correct
        .iter()
        .map(|c| *c as f64 / images.len().max(1) as f64)
        .collect())
}

/// Evaluate a single pipeline (baseline when `ae` is absent) over the suite.
pub fn evaluate_pipeline(
    extractor: &FeatureExtractor,
    head: &ClassifierHead,
    ae: Option<(&LearnAutoencoder, &FeatureNormalizer)>,
    manifest: &DatasetManifest,
    suite: &FrozenSuite,
    types: &[OccluderKind],
    meta: TableMeta,
) -> Result<ResultsTable, ModelError> {
    let variants = match ae {
        None => vec![Variant::Baseline],
        Some((ae, normalizer)) => vec![Variant::Proposed { ae, normalizer }],
    };
    evaluate_rows(extractor, head, &variants, manifest, suite, types, meta)
}

/// Flattened raw-scale features of one frozen cell under a variant, with
/// labels; input to the clustering metric.
pub fn cell_features(
    extractor: &FeatureExtractor,
    variant: &Variant<'_>,
    manifest: &DatasetManifest,
    suite: &FrozenSuite,
    kind: OccluderKind,
    level: OcclusionLevel,
) -> Result<(Vec<Vec<f64>>, Vec<usize>), ModelError> {
    let set = suite.get(kind, level).ok_or_else(|| {
        ModelError::Checkpoint(format!("missing frozen cell {}-{}", kind.tag(), level.name()))
    })?;
    let mut features = Vec::with_capacity(set.entries.len());
    let mut labels = Vec::with_capacity(set.entries.len());
    for occ in materialize(manifest, set)? {
        let raw = extractor.forward(&occ.pixels)?;
        let vector = match variant {
            Variant::Baseline => raw.to_vec(),
            Variant::Proposed { ae, normalizer } => {
                let normalized = normalizer.normalize_values(&raw)?;
                let z = ae.encode_values(&normalized)?;
                let recon = ae.decode_values(&z)?;
                normalizer.denormalize_values(&recon)?.to_vec()
            }
        };
        features.push(vector);
        labels.push(occ.label);
    }
    Ok((features, labels))
}

#[derive(Clone, Debug)]
pub struct SilhouetteReport {
    pub mean: f64,
    pub per_class: Vec<(usize, f64)>,
    pub excluded_singletons: usize,
}

/// Mean silhouette score with Euclidean distance on flattened vectors.
/// Classes with a single sample are excluded with a warning.
pub fn silhouette(features: &[Vec<f64>], labels: &[usize]) -> Result<SilhouetteReport, ModelError> {
    assert_eq!(features.len(), labels.len());
    let mut counts: std::collections::BTreeMap<usize, usize> = std::collections::BTreeMap::new();
    for l in labels {
        *counts.entry(*l).or_insert(0) += 1;
    }
    let excluded: Vec<usize> = counts
        .iter()
        .filter(|(_, c)| **c < 2)
        .map(|(l, _)| *l)
        .collect();
    for class in &excluded {
        log::warn!("silhouette: class {class} has a single sample; excluded");
    }
    let keep: Vec<usize> = (0..features.len())
        .filter(|i| !excluded.contains(&labels[*i]))
        .collect();
    let classes: Vec<usize> = counts
        .keys()
        .copied()
        .filter(|c| !excluded.contains(c))
        .collect();
    if classes.len() < 2 {
        return Err(ModelError::TooFewForMetric {
            what: "classes with >= 2 samples",
            needed: 2,
            got: classes.len(),
        });
    }

    // Pairwise Euclidean distances over the kept samples.
    let n = keep.len();
    let mut dist = vec![0.0f64; n * n];
    for a in 0..n {
        for b in (a + 1)..n {
            let d = euclidean(&features[keep[a]], &features[keep[b]]);
            dist[a * n + b] = d;
            dist[b * n + a] = d;
        }
    }

    let kept_labels: Vec<usize> = keep.iter().map(|i| labels[*i]).collect();
    let mut class_sums: std::collections::BTreeMap<usize, (f64, usize)> = Default::default();
    let mut scores = vec![0.0f64; n];
    for i in 0..n {
        let own = kept_labels[i];
        let mut within_sum = 0.0;
        let mut within_count = 0usize;
        let mut other: std::collections::BTreeMap<usize, (f64, usize)> = Default::default();
        for j in 0..n {
            if i == j {
                continue;
            }
            let d = dist[i * n + j];
            if kept_labels[j] == own {
                within_sum += d;
                within_count += 1;
            } else {
                let e = other.entry(kept_labels[j]).or_insert((0.0, 0));
                e.0 += d;
                e.1 += 1;
            }
        }
        let a = within_sum / within_count as f64;
        let b = other
            .values()
            .map(|(s, c)| s / *c as f64)
            .fold(f64::INFINITY, f64::min);
        let s = if a.max(b) > 0.0 { (b - a) / a.max(b) } else { 0.0 };
        scores[i] = s;
        let e = class_sums.entry(own).or_insert((0.0, 0));
        e.0 += s;
        e.1 += 1;
    }

    Ok(SilhouetteReport {
        mean: scores.iter().sum::<f64>() / n as f64,
        per_class: class_sums
            .into_iter()
            .map(|(class, (sum, count))| (class, sum / count as f64))
            .collect(),
        excluded_singletons: excluded.len(),
    })
}

fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn silhouette_of_two_tight_clusters_is_one() {
        let features = vec![
            vec![0.0, 0.0],
            vec![0.0, 0.0],
            vec![10.0, 10.0],
            vec![10.0, 10.0],
        ];
        let labels = vec![0, 0, 1, 1];
        let report = silhouette(&features, &labels).unwrap();
        assert_eq!(report.mean, 1.0);
        assert_eq!(report.per_class.len(), 2);
    }

    #[test]
    fn silhouette_matches_brute_force_oracle_on_small_case() {
        // 3 points, 2 classes; hand-computed silhouette values.
        // p0=(0,0) c0, p1=(1,0) c0, p2=(4,0) c1 — but c1 is a singleton, so
        // use 4 points instead: p2=(4,0) c1, p3=(5,0) c1.
        let features = vec![
            vec![0.0, 0.0],
            vec![1.0, 0.0],
            vec![4.0, 0.0],
            vec![5.0, 0.0],
        ];
        let labels = vec![0, 0, 1, 1];
        let report = silhouette(&features, &labels).unwrap();
        // p0: a=1, b=(4+5)/2=4.5 -> (4.5-1)/4.5
        // p1: a=1, b=(3+4)/2=3.5 -> (3.5-1)/3.5
        // p2: a=1, b=(4+3)/2=3.5 -> (3.5-1)/3.5
        // p3: a=1, b=(5+4)/2=4.5 -> (4.5-1)/4.5
        let expect = (2.0 * (3.5 / 4.5) + 2.0 * (2.5 / 3.5)) / 4.0;
        assert!((report.mean - expect).abs() < 1e-12, "{} vs {expect}", report.mean);
    }

    #[test]
    fn shuffled_labels_score_near_zero() {
        use rand::seq::SliceRandom;
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let features: Vec<Vec<f64>> = (0..300)
            .map(|_| (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .collect();
        let mut labels: Vec<usize> = (0..300).map(|i| i % 3).collect();
        labels.shuffle(&mut rng);
        let report = silhouette(&features, &labels).unwrap();
        assert!(report.mean.abs() < 0.1, "null silhouette {}", report.mean);
    }

    #[test]
    fn singleton_classes_are_excluded() {
        let features = vec![
            vec![0.0], vec![0.1], vec![5.0], vec![5.1], vec![99.0],
        ];
        let labels = vec![0, 0, 1, 1, 2];
        let report = silhouette(&features, &labels).unwrap();
        assert_eq!(report.excluded_singletons, 1);
        assert_eq!(report.per_class.len(), 2);
    }

    #[test]
    fn too_few_classes_is_rejected() {
        let features = vec![vec![0.0], vec![1.0]];
        let labels = vec![0, 0];
        assert!(matches!(
            silhouette(&features, &labels),
            Err(ModelError::TooFewForMetric { .. })
        ));
    }

    #[test]
    fn mean_consistency_helper() {
        let t = ResultsTable {
            columns: vec!["L0".into(), "w-L1".into()],
            rows: vec![TableRow {
                name: "baseline".into(),
                cells: vec![1.0, 0.5],
                mean: 0.75,
            }],
            meta: TableMeta::default(),
        };
        assert!(t.means_consistent());
        assert_eq!(t.cell("baseline", "w-L1"), Some(0.5));
    }
}
