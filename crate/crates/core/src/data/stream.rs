//! On-the-fly occluded training batches and frozen evaluation sets.

use std::collections::HashMap;
use std::io::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::occlude::{
    apply_occlusion, OccludedImage, OccluderKind, OcclusionLevel, ALL_OCCLUDERS, OCCLUDED_LEVELS,
};
use super::{hex_sha256, DataError, DatasetManifest, LabeledImage, SampleId};
use crate::rng::{derive_seed, Stream};
use rand::SeedableRng as _;

/// How training-time occlusions are drawn.
#[derive(Clone, Debug)]
pub struct OcclusionPolicy {
    pub types: Vec<OccluderKind>,
    /// Coverage drawn uniformly from this closed range.
    pub coverage_range: (f64, f64),
    /// Fraction of samples passed through unoccluded.
    pub clean_fraction: f64,
}

impl Default for OcclusionPolicy {
    fn default() -> Self {
        OcclusionPolicy {
            types: ALL_OCCLUDERS.to_vec(),
            coverage_range: (0.10, 0.90),
            clean_fraction: 0.25,
        }
    }
}

impl OcclusionPolicy {
    /// Drop one occluder type from the draw (held-out-type training).
    pub fn without(mut self, heldout: OccluderKind) -> OcclusionPolicy {
        self.types.retain(|t| *t != heldout);
        self
    }
}

/// A clean/occluded pair with its label; the occluded side may equal the
/// clean side (coverage 0) for clean-pass samples.
pub struct TrainSample {
    pub record_idx: usize,
    pub clean: LabeledImage,
    pub occluded: OccludedImage,
    pub label: usize,
}

pub type Batch = Vec<TrainSample>;

/// Draws per-epoch shuffled batches of clean/occluded pairs, deterministic in
/// (manifest, seed, epoch). Keeps an audit count of occluder types drawn.
pub struct BatchStream<'a> {
    manifest: &'a DatasetManifest,
    policy: OcclusionPolicy,
    batch_size: usize,
    seed: u64,
    /// Indices into `manifest.records` this stream draws from.
    pool: Vec<usize>,
    type_counts: HashMap<OccluderKind, u64>,
    clean_passes: u64,
}

impl<'a> BatchStream<'a> {
    pub fn new(
        manifest: &'a DatasetManifest,
        pool: Vec<usize>,
        policy: OcclusionPolicy,
        batch_size: usize,
        seed: u64,
    ) -> Result<BatchStream<'a>, DataError> {
        if manifest.records.is_empty() || pool.is_empty() {
            return Err(DataError::EmptyManifest);
        }
        if batch_size < 2 {
            return Err(DataError::BatchTooSmall(batch_size));
        }
        Ok(BatchStream {
            manifest,
            policy,
            batch_size,
            seed,
            pool,
            type_counts: HashMap::new(),
            clean_passes: 0,
        })
    }

    /// All full batches for one epoch (a trailing partial batch is dropped).
    pub fn epoch(&mut self, epoch: u64) -> Result<Vec<Batch>, DataError> {
        let mut order = self.pool.clone();
        let mut shuffle_rng =
            ChaCha8Rng::seed_from_u64(derive_seed(self.seed, Stream::LearnShuffle, epoch, 0));
        order.shuffle(&mut shuffle_rng);

        let mut batches = Vec::new();
        let mut current: Batch = Vec::with_capacity(self.batch_size);
        for record_idx in order {
            let sample = self.draw_sample(record_idx, epoch)?;
            current.push(sample);
            if current.len() == self.batch_size {
                batches.push(std::mem::take(&mut current));
            }
        }
        Ok(batches)
    }

    fn draw_sample(&mut self, record_idx: usize, epoch: u64) -> Result<TrainSample, DataError> {
        let record = &self.manifest.records[record_idx];
        let clean = self.manifest.render(record);
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(
            self.seed ^ record.seed,
            Stream::LearnOcclusion,
            epoch,
            record_idx as u64,
        ));
        let clean_pass = rng.gen_range(0.0..1.0) < self.policy.clean_fraction;
        let occluded = if clean_pass {
            self.clean_passes += 1;
            apply_occlusion(&clean, 0.0, self.policy.types[0], &mut rng)?
        } else {
            let kind = self.policy.types[rng.gen_range(0..self.policy.types.len())];
            let coverage = rng.gen_range(self.policy.coverage_range.0..=self.policy.coverage_range.1);
            *self.type_counts.entry(kind).or_insert(0) += 1;
            apply_occlusion(&clean, coverage, kind, &mut rng)?
        };
        Ok(TrainSample {
            record_idx,
            clean,
            occluded,
            label: record.label,
        })
    }

    /// How many occluded samples of each type this stream has produced.
    pub fn type_counts(&self) -> &HashMap<OccluderKind, u64> {
        &self.type_counts
    }

    pub fn clean_passes(&self) -> u64 {
        self.clean_passes
    }
}

/// One frozen occlusion assignment: which test record, at what coverage
/// target, with which stamping seed.
#[derive(Clone, Debug, PartialEq)]
pub struct FrozenEntry {
    pub record_idx: usize,
    pub sample: SampleId,
    pub coverage: f64,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FrozenTestSet {
    pub kind: OccluderKind,
    pub level: OcclusionLevel,
    pub entries: Vec<FrozenEntry>,
}

/// All (type, level) test cells for a manifest.
#[derive(Clone, Debug, PartialEq)]
pub struct FrozenSuite {
    pub seed: u64,
    pub sets: Vec<FrozenTestSet>,
}

/// Build one frozen set per (type, level) cell: every test image occluded
/// once at a coverage drawn uniformly within that level's band.
pub fn freeze_test_sets(
    manifest: &DatasetManifest,
    types: &[OccluderKind],
    seed: u64,
) -> Result<FrozenSuite, DataError> {
    let test_idx: Vec<usize> = manifest
        .records
        .iter()
        .enumerate()
        .filter(|(_, r)| r.split == super::SplitTag::Test)
        .map(|(i, _)| i)
        .collect();
    if test_idx.is_empty() {
        return Err(DataError::EmptyManifest);
    }
    let mut sets = Vec::with_capacity(types.len() * OCCLUDED_LEVELS.len());
    for (t_i, kind) in types.iter().enumerate() {
        for (l_i, level) in OCCLUDED_LEVELS.iter().enumerate() {
            let (lo, hi) = level.band();
            let mut entries = Vec::with_capacity(test_idx.len());
            for (n, record_idx) in test_idx.iter().enumerate() {
                let cell = (t_i * OCCLUDED_LEVELS.len() + l_i) as u64;
                let entry_seed = derive_seed(seed, Stream::FrozenSets, cell, n as u64);
                let mut rng = ChaCha8Rng::seed_from_u64(entry_seed);
                // Keep the achieved coverage (+-0.02) inside the band.
                let coverage = rng.gen_range((lo + 0.02)..(hi - 0.02));
                entries.push(FrozenEntry {
                    record_idx: *record_idx,
                    sample: manifest.records[*record_idx].id,
                    coverage,
                    seed: entry_seed,
                });
            }
            sets.push(FrozenTestSet {
                kind: *kind,
                level: *level,
                entries,
            });
        }
    }
    Ok(FrozenSuite { seed, sets })
}

impl FrozenSuite {
    pub fn get(&self, kind: OccluderKind, level: OcclusionLevel) -> Option<&FrozenTestSet> {
        self.sets.iter().find(|s| s.kind == kind && s.level == level)
    }

    pub fn to_text(&self) -> String {
        let mut body = String::new();
        body.push_str("# frozen-test-sets v1\n");
        body.push_str(&format!("seed {}\n", self.seed));
        body.push_str("# type level sample record_idx coverage seed\n");
        for set in &self.sets {
            for e in &set.entries {
                body.push_str(&format!(
                    "{} {} {} {} {} {}\n",
                    set.kind.tag(),
                    set.level.name(),
                    e.sample,
                    e.record_idx,
                    e.coverage,
                    e.seed
                ));
            }
        }
        let checksum = hex_sha256(body.as_bytes());
        format!("{body}checksum {checksum}\n")
    }

    pub fn from_text(text: &str) -> Result<FrozenSuite, DataError> {
        let mut seed = None;
        let mut sets: Vec<FrozenTestSet> = Vec::new();
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
                "seed" => {
                    seed = Some(super::parse_field(parts.next(), "seed", lineno)?);
                }
                "checksum" => {
                    stored_checksum = Some(parts.next().unwrap_or("").to_string());
                    continue;
                }
                tag => {
                    let kind = OccluderKind::parse(tag)?;
                    let level = parts
                        .next()
                        .and_then(OcclusionLevel::parse)
                        .ok_or_else(|| parse_err("bad level".into()))?;
                    let sample = parts
                        .next()
                        .and_then(SampleId::parse)
                        .ok_or_else(|| parse_err("bad sample id".into()))?;
                    let record_idx: usize = super::parse_field(parts.next(), "record_idx", lineno)?;
                    let coverage: f64 = super::parse_field(parts.next(), "coverage", lineno)?;
                    let entry_seed: u64 = super::parse_field(parts.next(), "seed", lineno)?;
                    let entry = FrozenEntry {
                        record_idx,
                        sample,
                        coverage,
                        seed: entry_seed,
                    };
                    match sets.last_mut() {
                        Some(set) if set.kind == kind && set.level == level => {
                            set.entries.push(entry)
                        }
                        _ => sets.push(FrozenTestSet {
                            kind,
                            level,
                            entries: vec![entry],
                        }),
                    }
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
        Ok(FrozenSuite {
            seed: seed.ok_or(DataError::ManifestParse {
                line: 0,
                message: "missing seed".into(),
            })?,
            sets,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), DataError> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(self.to_text().as_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<FrozenSuite, DataError> {
        FrozenSuite::from_text(&std::fs::read_to_string(path)?)
    }
}

/// Render the occluded images of one frozen set.
pub fn materialize(
    manifest: &DatasetManifest,
    set: &FrozenTestSet,
) -> Result<Vec<OccludedImage>, DataError> {
    set.entries
        .iter()
        .map(|e| {
            let clean = manifest.render(&manifest.records[e.record_idx]);
            let mut rng = ChaCha8Rng::seed_from_u64(e.seed.wrapping_add(1));
            apply_occlusion(&clean, e.coverage, set.kind, &mut rng)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_manifest() -> DatasetManifest {
        DatasetManifest::generate(4, 25, 32, 7).unwrap()
    }

    #[test]
    fn batches_have_policy_bounds_and_fixed_size() {
        let m = small_manifest();
        let pool: Vec<usize> = m
            .records
            .iter()
            .enumerate()
            .filter(|(_, r)| r.split == super::super::SplitTag::Train)
            .map(|(i, _)| i)
            .collect();
        let mut stream = BatchStream::new(&m, pool, OcclusionPolicy::default(), 8, 3).unwrap();
        let batches = stream.epoch(0).unwrap();
        assert_eq!(batches.len(), 100 / 8);
        for batch in &batches {
            assert_eq!(batch.len(), 8);
            for s in batch {
                let c = s.occluded.coverage;
                assert!(c == 0.0 || (0.08..=0.92).contains(&c), "coverage {c}");
            }
        }
    }

    #[test]
    fn stream_is_deterministic_per_seed() {
        let m = small_manifest();
        let pool: Vec<usize> = (0..m.records.len()).collect();
        let run = || {
            let mut s = BatchStream::new(&m, pool.clone(), OcclusionPolicy::default(), 4, 9).unwrap();
            let batches = s.epoch(1).unwrap();
            batches
                .iter()
                .flat_map(|b| b.iter().map(|t| (t.record_idx, t.occluded.coverage)))
                .collect::<Vec<_>>()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn occluder_types_are_roughly_uniform() {
        let m = DatasetManifest::generate(4, 250, 32, 7).unwrap();
        let pool: Vec<usize> = (0..m.records.len()).collect();
        let mut stream = BatchStream::new(
            &m,
            pool,
            OcclusionPolicy {
                clean_fraction: 0.0,
                ..OcclusionPolicy::default()
            },
            10,
            13,
        )
        .unwrap();
        let _ = stream.epoch(0).unwrap();
        let total: u64 = stream.type_counts().values().sum();
        assert!(total >= 1000, "need at least 1000 draws, got {total}");
        for kind in ALL_OCCLUDERS {
            let f = *stream.type_counts().get(&kind).unwrap_or(&0) as f64 / total as f64;
            assert!((0.20..=0.30).contains(&f), "{kind:?} frequency {f}");
        }
    }

    #[test]
    fn heldout_type_never_appears() {
        let m = small_manifest();
        let pool: Vec<usize> = (0..m.records.len()).collect();
        let policy = OcclusionPolicy::default().without(OccluderKind::Object);
        let mut stream = BatchStream::new(&m, pool, policy, 4, 21).unwrap();
        let batches = stream.epoch(0).unwrap();
        for b in &batches {
            for s in b {
                if s.occluded.is_occluded() {
                    assert_ne!(s.occluded.occluder, OccluderKind::Object);
                }
            }
        }
        assert_eq!(*stream.type_counts().get(&OccluderKind::Object).unwrap_or(&0), 0);
    }

    #[test]
    fn rejects_empty_pool_and_tiny_batches() {
        let m = small_manifest();
        assert!(matches!(
            BatchStream::new(&m, vec![], OcclusionPolicy::default(), 4, 0),
            Err(DataError::EmptyManifest)
        ));
        assert!(matches!(
            BatchStream::new(&m, vec![0], OcclusionPolicy::default(), 1, 0),
            Err(DataError::BatchTooSmall(1))
        ));
    }

    #[test]
    fn frozen_sets_cover_the_grid_and_round_trip() {
        let m = small_manifest();
        let suite = freeze_test_sets(&m, &ALL_OCCLUDERS, 7).unwrap();
        assert_eq!(suite.sets.len(), 12); // 4 types x 3 levels
        for set in &suite.sets {
            assert_eq!(set.entries.len(), m.test_records().count());
            let (lo, hi) = set.level.band();
            for e in &set.entries {
                assert!(e.coverage > lo && e.coverage < hi);
            }
        }
        let text = suite.to_text();
        let back = FrozenSuite::from_text(&text).unwrap();
        assert_eq!(suite, back);
        // Regeneration from the persisted description is byte-identical.
        assert_eq!(text, back.to_text());
    }

    #[test]
    fn materialized_sets_are_reproducible() {
        let m = small_manifest();
        let suite = freeze_test_sets(&m, &[OccluderKind::Object], 7).unwrap();
        let set = suite.get(OccluderKind::Object, OcclusionLevel::L3).unwrap();
        let a = materialize(&m, set).unwrap();
        let b = materialize(&m, set).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.pixels.to_vec(), y.pixels.to_vec());
            assert_eq!(x.coverage, y.coverage);
        }
    }
}
