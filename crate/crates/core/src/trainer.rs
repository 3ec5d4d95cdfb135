//! Training loop for the reconstruction autoencoder over a frozen backbone,
//! with early stopping on held-out validation accuracy.

use std::collections::HashMap;
use std::time::Instant;

use rand::Rng;

use crate::ae::LearnAutoencoder;
use crate::backbone::{argmax, ClassifierHead, FeatureExtractor, FeatureMap, FeatureNormalizer};
use crate::data::stream::{BatchStream, OcclusionPolicy};
use crate::data::{occlude::apply_occlusion, DatasetManifest, SplitTag};
use crate::error::ModelError;
use crate::loss::{loss_total, BatchItem, LossWeights};
use crate::nn::Adam;
use crate::rng::{stream_rng, Stream};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub seed: u64,
    pub weights: LossWeights,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-4,
            // Desk-scale default; 128 degenerates pair sampling on small
            // corpora but remains available through the config.
            batch_size: 32,
            max_epochs: 40,
            patience: 5,
            seed: 7,
            weights: LossWeights::default(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct EpochStats {
    pub epoch: usize,
    pub total: f64,
    pub rec: f64,
    pub intra: f64,
    pub inter: f64,
    pub cls: f64,
    pub val_clean_accuracy: f64,
    pub val_occluded_accuracy: f64,
    pub wall_secs: f64,
}

#[derive(Clone, Debug, Default)]
pub struct TrainingHistory {
    pub epochs: Vec<EpochStats>,
    pub best_epoch: usize,
    pub best_metric: f64,
    /// Occluded samples drawn per occluder type over the whole run.
    pub type_counts: Vec<(String, u64)>,
}

/// Train the autoencoder against frozen extractor/head with adaptive moment
/// estimation. Early-stops when the validation metric (mean of clean and
/// occluded accuracy) fails to improve for `patience` epochs; the best-epoch
/// parameters are restored before returning.
pub fn train_learn(
    ae: &LearnAutoencoder,
    extractor: &FeatureExtractor,
    head: &ClassifierHead,
    normalizer: &FeatureNormalizer,
    manifest: &DatasetManifest,
    policy: OcclusionPolicy,
    config: &TrainConfig,
) -> Result<TrainingHistory, ModelError> {
    let frozen = extractor
        .params()
        .iter()
        .chain(head.params().iter())
        .all(|p| !p.requires_grad_flag());
    if !frozen {
        return Err(ModelError::UnfrozenBackbone);
    }
    config.weights.validate()?;

    let val_set = manifest.validation_indices(0.1);
    let train_pool: Vec<usize> = manifest
        .records
        .iter()
        .enumerate()
        .filter(|(i, r)| r.split == SplitTag::Train && !val_set.contains(i))
        .map(|(i, _)| i)
        .collect();

    // The extractor is frozen, so clean features are constants: cache their
    // normalized values once.
    let mut clean_cache: HashMap<usize, Vec<f64>> = HashMap::new();
    for idx in train_pool.iter().chain(val_set.iter()) {
        let image = manifest.render(&manifest.records[*idx]);
        let fm = extractor.forward(&image.pixels)?;
        clean_cache.insert(*idx, normalizer.normalize_values(&fm)?.to_vec());
    }

    // Fixed occluded validation set, one occlusion per record.
    let mut val_occluded: Vec<(Vec<f64>, usize)> = Vec::with_capacity(val_set.len());
    for (i, idx) in val_set.iter().enumerate() {
        let record = &manifest.records[*idx];
        let image = manifest.render(record);
        let kind = policy.types[i % policy.types.len()];
        let mut rng = stream_rng(config.seed, Stream::ValidationOcclusion, *idx as u64, 0);
        let coverage = rng.gen_range(policy.coverage_range.0..=policy.coverage_range.1);
        let occ = apply_occlusion(&image, coverage, kind, &mut rng)?;
        let fm = extractor.forward(&occ.pixels)?;
        val_occluded.push((normalizer.normalize_values(&fm)?.to_vec(), record.label));
    }
    let val_clean: Vec<(Vec<f64>, usize)> = val_set
        .iter()
        .map(|idx| (clean_cache[idx].clone(), manifest.records[*idx].label))
        .collect();

    let feature_shape = ae.feature_shape;
    let params = ae.params();
    let mut opt = Adam::new(params.clone(), config.learning_rate);
    let mut best_params: Vec<Vec<f64>> = params.iter().map(|p| p.to_vec()).collect();
    let mut history = TrainingHistory {
        best_metric: f64::NEG_INFINITY,
        ..Default::default()
    };

    let mut stream = BatchStream::new(manifest, train_pool, policy, config.batch_size, config.seed)?;
    for epoch in 0..config.max_epochs {
        let started = Instant::now();
        let batches = stream.epoch(epoch as u64)?;
        let mut sums = [0.0f64; 5];
        let mut steps = 0usize;
        for (batch_no, batch) in batches.iter().enumerate() {
            let mut items = Vec::with_capacity(batch.len());
            for sample in batch {
                let clean_values =
                    Tensor::new(clean_cache[&sample.record_idx].clone(), &feature_shape);
                let occ_fm = extractor.forward(&sample.occluded.pixels)?;
                let occ_values = normalizer.normalize_values(&occ_fm)?;
                items.push(BatchItem {
                    clean: FeatureMap {
                        values: clean_values,
                        normalized: true,
                        source: sample.clean.sample_id,
                        is_occluded: false,
                    },
                    occluded: FeatureMap {
                        values: occ_values,
                        normalized: true,
                        source: sample.occluded.source,
                        is_occluded: sample.occluded.is_occluded(),
                    },
                    label: sample.label,
                });
            }
            let mut pair_rng =
                stream_rng(config.seed, Stream::PairSampling, epoch as u64, batch_no as u64);
            opt.zero_grad();
            let (total, breakdown) =
                loss_total(&items, ae, head, normalizer, &config.weights, &mut pair_rng)?;
            if !breakdown.total.is_finite() {
                return Err(ModelError::NonFiniteLoss {
                    epoch,
                    batch: batch_no,
                });
            }
            total.backward()?;
            opt.step();
            sums[0] += breakdown.total;
            sums[1] += breakdown.rec;
            sums[2] += breakdown.intra;
            sums[3] += breakdown.inter;
            sums[4] += breakdown.cls;
            steps += 1;
        }
        let n = steps.max(1) as f64;

        let val_clean_accuracy = pipeline_accuracy(ae, head, normalizer, &feature_shape, &val_clean)?;
        let val_occluded_accuracy =
            pipeline_accuracy(ae, head, normalizer, &feature_shape, &val_occluded)?;
        let metric = 0.5 * (val_clean_accuracy + val_occluded_accuracy);

        history.epochs.push(EpochStats {
            epoch,
            total: sums[0] / n,
            rec: sums[1] / n,
            intra: sums[2] / n,
            inter: sums[3] / n,
            cls: sums[4] / n,
            val_clean_accuracy,
            val_occluded_accuracy,
            wall_secs: started.elapsed().as_secs_f64(),
        });

        if metric > history.best_metric {
            history.best_metric = metric;
            history.best_epoch = epoch;
            for (snap, p) in best_params.iter_mut().zip(&params) {
                snap.copy_from_slice(&p.data());
            }
        } else if epoch - history.best_epoch >= config.patience {
            break;
        }
    }

    for (p, snap) in params.iter().zip(&best_params) {
        p.set_data(snap);
    }
    history.type_counts = stream
        .type_counts()
        .iter()
        .map(|(k, v)| (k.name().to_string(), *v))
        .collect();
    history.type_counts.sort();
    Ok(history)
}

/// Accuracy of extractor-features -> AE -> denormalize -> head on cached
/// normalized feature values.
fn pipeline_accuracy(
    ae: &LearnAutoencoder,
    head: &ClassifierHead,
    normalizer: &FeatureNormalizer,
    feature_shape: &[usize; 3],
    samples: &[(Vec<f64>, usize)],
) -> Result<f64, ModelError> {
    if samples.is_empty() {
        return Ok(0.0);
    }
    let mut correct = 0usize;
    for (values, label) in samples {
        let f = Tensor::new(values.clone(), feature_shape);
        let z = ae.encode_values(&f)?;
        let recon = ae.decode_values(&z)?;
        let logits = head.forward(&normalizer.denormalize_values(&recon)?)?;
        if argmax(&logits.data()) == *label {
            correct += 1;
        }
    }
    Ok(correct as f64 / samples.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::{fit_normalizer, BackboneModel};

    fn tiny_setup() -> (DatasetManifest, BackboneModel, FeatureNormalizer, LearnAutoencoder) {
        let manifest = DatasetManifest::generate(2, 20, 32, 3).unwrap();
        let model = BackboneModel::build(2, 32, 3);
        let normalizer = fit_normalizer(&model.extractor, &manifest).unwrap();
        model.freeze();
        let ae = LearnAutoencoder::build(model.extractor.feature_shape, 3).unwrap();
        (manifest, model, normalizer, ae)
    }

    #[test]
    fn rejects_unfrozen_backbone() {
        let (manifest, model, normalizer, ae) = tiny_setup();
        model.unfreeze();
        let config = TrainConfig {
            max_epochs: 1,
            ..Default::default()
        };
        let err = train_learn(
            &ae,
            &model.extractor,
            &model.head,
            &normalizer,
            &manifest,
            OcclusionPolicy::default(),
            &config,
        );
        assert!(matches!(err, Err(ModelError::UnfrozenBackbone)));
    }

    #[test]
    fn zero_learning_rate_leaves_ae_unchanged() {
        let (manifest, model, normalizer, ae) = tiny_setup();
        let before: Vec<Vec<f64>> = ae.params().iter().map(|p| p.to_vec()).collect();
        let config = TrainConfig {
            learning_rate: 0.0,
            max_epochs: 1,
            batch_size: 8,
            seed: 3,
            ..Default::default()
        };
        train_learn(
            &ae,
            &model.extractor,
            &model.head,
            &normalizer,
            &manifest,
            OcclusionPolicy::default(),
            &config,
        )
        .unwrap();
        for (b, p) in before.iter().zip(ae.params()) {
            assert_eq!(*b, p.to_vec());
        }
    }

    #[test]
    fn flat_metric_stops_within_patience() {
        // Zero learning rate keeps the metric flat, so training must stop
        // after best_epoch + patience epochs.
        let (manifest, model, normalizer, ae) = tiny_setup();
        let config = TrainConfig {
            learning_rate: 0.0,
            max_epochs: 30,
            patience: 3,
            batch_size: 8,
            seed: 3,
            ..Default::default()
        };
        let history = train_learn(
            &ae,
            &model.extractor,
            &model.head,
            &normalizer,
            &manifest,
            OcclusionPolicy::default(),
            &config,
        )
        .unwrap();
        assert!(history.epochs.len() <= 1 + history.best_epoch + 3);
        assert_eq!(history.best_epoch, 0);
    }

    #[test]
    fn training_reduces_total_loss_and_keeps_backbone_hash() {
        let (manifest, model, normalizer, ae) = tiny_setup();
        let hash_before = model.param_hash().unwrap();
        let config = TrainConfig {
            learning_rate: 1e-3,
            max_epochs: 3,
            patience: 5,
            batch_size: 8,
            seed: 3,
            ..Default::default()
        };
        let history = train_learn(
            &ae,
            &model.extractor,
            &model.head,
            &normalizer,
            &manifest,
            OcclusionPolicy::default(),
            &config,
        )
        .unwrap();
        assert_eq!(model.param_hash().unwrap(), hash_before);
        let first = &history.epochs.first().unwrap().total;
        let last = &history.epochs.last().unwrap().total;
        assert!(last < first, "loss should drop: {first} -> {last}");
        // Head grad buffers remain empty after training (frozen contract).
        for p in model.head.params() {
            assert!(p.grad().is_none());
        }
        // Per-term losses are all non-negative.
        for e in &history.epochs {
            assert!(e.rec >= 0.0 && e.intra >= 0.0 && e.inter >= 0.0 && e.cls >= 0.0);
        }
    }
}
