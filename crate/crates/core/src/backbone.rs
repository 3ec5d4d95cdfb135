//! Desk-scale CNN classifier, splittable into a frozen feature extractor and
//! classifier head. Four conv blocks (3x3 conv, ReLU, 2x2 max pool) with
//! channel widths 16/32/64/64, then a single fully connected layer.

use crate::checkpoint::Checkpoint;
use crate::data::{DatasetManifest, LabeledImage, SampleId, SplitTag};
use crate::error::ModelError;
use crate::nn::{Conv2dLayer, LinearLayer, Sgd};
use crate::rng::{stream_rng, Stream};
use crate::tensor::{Tensor, TensorError};

pub const BLOCK_CHANNELS: [usize; 4] = [16, 32, 64, 64];

/// Output of the final conv block for one image.
pub struct FeatureMap {
    pub values: Tensor,
    pub normalized: bool,
    pub source: SampleId,
    pub is_occluded: bool,
}

/// The convolutional trunk; owns handles onto the shared block parameters.
pub struct FeatureExtractor {
    pub blocks: Vec<Conv2dLayer>,
    pub feature_shape: [usize; 3],
}

/// The fully connected classifier operating on flattened feature maps.
pub struct ClassifierHead {
    pub fc: LinearLayer,
    pub num_classes: usize,
}

pub struct BackboneModel {
    pub extractor: FeatureExtractor,
    pub head: ClassifierHead,
    pub image_size: usize,
}

impl FeatureExtractor {
    pub fn forward(&self, pixels: &Tensor) -> Result<Tensor, TensorError> {
        let mut x = pixels.clone();
        for block in &self.blocks {
            let conv = block.forward(&x)?;
            let (pooled, _) = conv.relu().max_pool2d(2, 2)?;
            x = pooled;
        }
        Ok(x)
    }

    /// Extract the feature map of an image, optionally normalized into
    /// [-1, 1]. Raw backbone features are non-negative (post-ReLU).
    pub fn extract(
        &self,
        image: &LabeledImage,
        is_occluded: bool,
        normalizer: Option<&FeatureNormalizer>,
    ) -> Result<FeatureMap, TensorError> {
        let raw = self.forward(&image.pixels)?;
        match normalizer {
            Some(n) => Ok(FeatureMap {
                values: n.normalize_values(&raw)?,
                normalized: true,
                source: image.sample_id,
                is_occluded,
            }),
            None => Ok(FeatureMap {
                values: raw,
                normalized: false,
                source: image.sample_id,
                is_occluded,
            }),
        }
    }

    pub fn params(&self) -> Vec<Tensor> {
        self.blocks.iter().flat_map(|b| b.params()).collect()
    }
}

impl ClassifierHead {
    /// Logits from a raw-scale (denormalized) feature map.
    pub fn forward(&self, features: &Tensor) -> Result<Tensor, TensorError> {
        let flat = features.reshape(&[features.numel()])?;
        self.fc.forward(&flat)
    }

    pub fn params(&self) -> Vec<Tensor> {
        self.fc.params()
    }
}

impl BackboneModel {
    /// Deterministic build from a seed. For a 32x32 input the feature map is
    /// 64x2x2 and the head maps 256 -> num_classes.
    pub fn build(num_classes: usize, image_size: usize, seed: u64) -> BackboneModel {
        let mut rng = stream_rng(seed, Stream::BackboneInit, 0, 0);
        let mut blocks = Vec::with_capacity(BLOCK_CHANNELS.len());
        let mut in_ch = 1;
        let mut spatial = image_size;
        for out_ch in BLOCK_CHANNELS {
            blocks.push(Conv2dLayer::new(&mut rng, in_ch, out_ch, 3, 1, 1));
            in_ch = out_ch;
            spatial /= 2;
        }
        let feature_shape = [BLOCK_CHANNELS[3], spatial, spatial];
        let flat = feature_shape.iter().product::<usize>();
        let fc = LinearLayer::new(&mut rng, flat, num_classes);
        BackboneModel {
            extractor: FeatureExtractor {
                blocks,
                feature_shape,
            },
            head: ClassifierHead {
                fc,
                num_classes,
            },
            image_size,
        }
    }

    pub fn forward(&self, pixels: &Tensor) -> Result<Tensor, TensorError> {
        let features = self.extractor.forward(pixels)?;
        self.head.forward(&features)
    }

    pub fn params(&self) -> Vec<Tensor> {
        let mut p = self.extractor.params();
        p.extend(self.head.params());
        p
    }

    /// Split into extractor and head handles sharing the same parameter
    /// tensors; composing them reproduces the unsplit logits bit-exactly.
    pub fn split(&self) -> (&FeatureExtractor, &ClassifierHead) {
        (&self.extractor, &self.head)
    }

    /// Inhibit parameter updates. Gradients still flow through frozen
    /// parameters to upstream tensors; the grad buffers simply stay empty.
    /// Idempotent.
    pub fn freeze(&self) {
        for p in self.params() {
            p.set_requires_grad(false);
            p.zero_grad();
        }
    }

    pub fn unfreeze(&self) {
        for p in self.params() {
            p.set_requires_grad(true);
        }
    }

    pub fn is_frozen(&self) -> bool {
        self.params().iter().all(|p| !p.requires_grad_flag())
    }

    /// Content hash over all parameters; freeze-invariance audits.
    pub fn param_hash(&self) -> Result<String, TensorError> {
        self.to_checkpoint(None)?.content_hash()
    }

    pub fn to_checkpoint(
        &self,
        normalizer: Option<&FeatureNormalizer>,
    ) -> Result<Checkpoint, TensorError> {
        let mut ckpt = Checkpoint::new();
        ckpt.set_meta("kind", "backbone");
        ckpt.set_meta("image_size", self.image_size);
        ckpt.set_meta("num_classes", self.head.num_classes);
        ckpt.set_meta(
            "feature_shape",
            format!(
                "{}x{}x{}",
                self.extractor.feature_shape[0],
                self.extractor.feature_shape[1],
                self.extractor.feature_shape[2]
            ),
        );
        let frozen = self.is_frozen();
        for (i, block) in self.extractor.blocks.iter().enumerate() {
            ckpt.push(&format!("block{i}.kernels"), "extractor", frozen, block.kernels.detach());
            ckpt.push(&format!("block{i}.bias"), "extractor", frozen, block.bias.detach());
        }
        ckpt.push("head.weights", "head", frozen, self.head.fc.weights.detach());
        ckpt.push("head.bias", "head", frozen, self.head.fc.bias.detach());
        if let Some(n) = normalizer {
            ckpt.push(
                "normalizer.scale",
                "normalizer",
                true,
                Tensor::new(n.scale.clone(), &[n.scale.len()]),
            );
        }
        Ok(ckpt)
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<(BackboneModel, Option<FeatureNormalizer>), ModelError> {
        let missing = |what: &str| ModelError::Checkpoint(format!("missing {what}"));
        let image_size: usize = ckpt
            .meta("image_size")
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| missing("image_size"))?;
        let num_classes: usize = ckpt
            .meta("num_classes")
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| missing("num_classes"))?;
        let model = BackboneModel::build(num_classes, image_size, 0);
        let mut frozen = false;
        for (i, block) in model.extractor.blocks.iter().enumerate() {
            let k = ckpt
                .get(&format!("block{i}.kernels"))
                .ok_or_else(|| missing("block kernels"))?;
            let b = ckpt
                .get(&format!("block{i}.bias"))
                .ok_or_else(|| missing("block bias"))?;
            check_shape(&k.tensor, block.kernels.shape())?;
            check_shape(&b.tensor, block.bias.shape())?;
            block.kernels.set_data(&k.tensor.data());
            block.bias.set_data(&b.tensor.data());
            frozen = k.frozen;
        }
        let w = ckpt.get("head.weights").ok_or_else(|| missing("head.weights"))?;
        let b = ckpt.get("head.bias").ok_or_else(|| missing("head.bias"))?;
        check_shape(&w.tensor, model.head.fc.weights.shape())?;
        check_shape(&b.tensor, model.head.fc.bias.shape())?;
        model.head.fc.weights.set_data(&w.tensor.data());
        model.head.fc.bias.set_data(&b.tensor.data());
        if frozen && w.frozen {
            model.freeze();
        }
        let normalizer = ckpt.get("normalizer.scale").map(|e| FeatureNormalizer {
            scale: e.tensor.to_vec(),
        });
        Ok((model, normalizer))
    }
}

fn check_shape(t: &Tensor, expected: &[usize]) -> Result<(), ModelError> {
    if t.shape() != expected {
        return Err(ModelError::FeatureShapeMismatch {
            expected: expected.to_vec(),
            got: t.shape().to_vec(),
        });
    }
    Ok(())
}

/// Per-channel scale mapping raw backbone features into [-1, 1] (values past
/// the 99.5th percentile are clamped) and back.
pub struct FeatureNormalizer {
    pub scale: Vec<f64>,
}

impl FeatureNormalizer {
    /// clamp(f / scale) into [-1,1]; differentiable where not clamped.
    pub fn normalize_values(&self, raw: &Tensor) -> Result<Tensor, TensorError> {
        let inv: Vec<f64> = self.scale.iter().map(|s| 1.0 / s).collect();
        Ok(raw.channel_scale(&inv)?.hard_tanh())
    }

    /// f_tilde * scale, back onto the raw feature scale the head was trained on.
    pub fn denormalize_values(&self, normalized: &Tensor) -> Result<Tensor, TensorError> {
        normalized.channel_scale(&self.scale)
    }
}

/// Per-channel scale = 99.5th percentile (nearest-rank) of |activation| over
/// the clean training split, floored at 1e-6.
pub fn fit_normalizer(
    extractor: &FeatureExtractor,
    manifest: &DatasetManifest,
) -> Result<FeatureNormalizer, ModelError> {
    let channels = extractor.feature_shape[0];
    let hw = extractor.feature_shape[1] * extractor.feature_shape[2];
    let mut per_channel: Vec<Vec<f64>> = vec![Vec::new(); channels];
    for record in manifest.train_records() {
        let image = manifest.render(record);
        let fm = extractor.forward(&image.pixels)?;
        let data = fm.data();
        for c in 0..channels {
            per_channel[c].extend(data[c * hw..(c + 1) * hw].iter().map(|v| v.abs()));
        }
    }
    let scale = per_channel
        .into_iter()
        .map(|mut vals| {
            vals.sort_by(|a, b| a.partial_cmp(b).expect("finite activations"));
            let n = vals.len();
            let rank = ((0.995 * n as f64).ceil() as usize).clamp(1, n);
            vals[rank - 1].max(1e-6)
        })
        .collect();
    Ok(FeatureNormalizer { scale })
}

pub struct FinetuneEpoch {
    pub train_loss: f64,
    pub val_accuracy: f64,
}

pub struct FinetuneHistory {
    pub epochs: Vec<FinetuneEpoch>,
    pub best_epoch: usize,
    pub best_val_accuracy: f64,
}

/// Cross-entropy finetuning with SGD + momentum 0.9 on clean images only.
/// The best-epoch parameters (by held-out validation accuracy) are retained.
pub fn finetune(
    model: &BackboneModel,
    manifest: &DatasetManifest,
    epochs: usize,
    learning_rate: f64,
    batch_size: usize,
    seed: u64,
) -> Result<FinetuneHistory, ModelError> {
    finetune_with_momentum(model, manifest, epochs, learning_rate, 0.9, batch_size, seed)
}

pub fn finetune_with_momentum(
    model: &BackboneModel,
    manifest: &DatasetManifest,
    epochs: usize,
    learning_rate: f64,
    momentum: f64,
    batch_size: usize,
    seed: u64,
) -> Result<FinetuneHistory, ModelError> {
    let val_set: Vec<usize> = manifest.validation_indices(0.1);
    let train_idx: Vec<usize> = manifest
        .records
        .iter()
        .enumerate()
        .filter(|(i, r)| r.split == SplitTag::Train && !val_set.contains(i))
        .map(|(i, _)| i)
        .collect();

    let params = model.params();
    let mut opt = Sgd::new(params.clone(), learning_rate, 0.9);
    let mut history = FinetuneHistory {
        epochs: Vec::with_capacity(epochs),
        best_epoch: 0,
        best_val_accuracy: f64::NEG_INFINITY,
    };
    let mut best_params: Vec<Vec<f64>> = params.iter().map(|p| p.to_vec()).collect();

    for epoch in 0..epochs {
        let mut order = train_idx.clone();
        {
            use rand::seq::SliceRandom;
            let mut rng = stream_rng(seed, Stream::FinetuneShuffle, epoch as u64, 0);
            order.shuffle(&mut rng);
        }
        let mut epoch_loss = 0.0;
        let mut steps = 0usize;
        for (batch_no, chunk) in order.chunks(batch_size).enumerate() {
            if chunk.len() < 2 {
                continue;
            }
            opt.zero_grad();
            let mut total: Option<Tensor> = None;
            for idx in chunk {
                let image = manifest.render(&manifest.records[*idx]);
                let logits = model.forward(&image.pixels)?;
                let loss = logits.softmax_cross_entropy(image.class_label)?;
                total = Some(match total {
                    Some(t) => t.add(&loss),
                    None => loss,
                });
            }
            let loss = total.expect("non-empty chunk").scale(1.0 / chunk.len() as f64);
            let loss_value = loss.item();
            if !loss_value.is_finite() {
                return Err(ModelError::NonFiniteLoss {
                    epoch,
                    batch: batch_no,
                });
            }
            loss.backward()?;
            opt.step();
            epoch_loss += loss_value;
            steps += 1;
        }

        let val_accuracy = accuracy_on(model, manifest, &val_set)?;
        history.epochs.push(FinetuneEpoch {
            train_loss: epoch_loss / steps.max(1) as f64,
            val_accuracy,
        });
        if val_accuracy > history.best_val_accuracy {
            history.best_val_accuracy = val_accuracy;
            history.best_epoch = epoch;
            for (snap, p) in best_params.iter_mut().zip(&params) {
                snap.copy_from_slice(&p.data());
            }
        }
    }
    for (p, snap) in params.iter().zip(&best_params) {
        p.set_data(snap);
    }
    Ok(history)
}

/// Fraction of listed records the model classifies correctly.
pub fn accuracy_on(
    model: &BackboneModel,
    manifest: &DatasetManifest,
    indices: &[usize],
) -> Result<f64, ModelError> {
    if indices.is_empty() {
        return Ok(0.0);
    }
    let mut correct = 0usize;
    for idx in indices {
        let record = &manifest.records[*idx];
        let image = manifest.render(record);
        let logits = model.forward(&image.pixels)?;
        if argmax(&logits.data()) == record.label {
            correct += 1;
        }
    }
    Ok(correct as f64 / indices.len() as f64)
}

pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    best
}
