//! The feature-reconstruction autoencoder inserted between the frozen
//! extractor and classifier head.
//!
//! Encoder: three 3x3 conv layers with output channels 64, 64, 32; ReLU and
//! 2x2 max pooling follow the first two layers, the third leads straight to
//! the latent code. The decoder mirrors the stack with transposed convs
//! (pooling stages mirrored by stride-2 transposed convs) and clamps its
//! output to [-1, +1] with hard tanh, so it operates on normalized features.

use crate::backbone::FeatureMap;
use crate::checkpoint::Checkpoint;
use crate::data::SampleId;
use crate::error::ModelError;
use crate::nn::{Conv2dLayer, TransposedConv2dLayer};
use crate::rng::{stream_rng, Stream};
use crate::tensor::{Tensor, TensorError};

pub const ENCODER_CHANNELS: [usize; 3] = [64, 64, 32];

/// The AE bottleneck for one sample.
pub struct LatentCode {
    pub values: Tensor,
    pub source: SampleId,
    pub is_occluded: bool,
}

impl LatentCode {
    /// Flattened view for latent-space distances.
    pub fn flat(&self) -> Result<Tensor, TensorError> {
        self.values.reshape(&[self.values.numel()])
    }
}

pub struct LearnAutoencoder {
    pub feature_shape: [usize; 3],
    pub latent_shape: [usize; 3],
    /// Whether a pooling stage follows encoder layers 1 and 2.
    pub pool_stages: [bool; 2],
    enc: [Conv2dLayer; 3],
    /// Mirrors of the encoder convs, in decode order (undo enc3 first).
    dec: [TransposedConv2dLayer; 3],
    /// Stride-2 mirrors of the pooling stages, in decode order
    /// (`up[0]` undoes `pool_stages[1]`, `up[1]` undoes `pool_stages[0]`).
    up: [Option<TransposedConv2dLayer>; 2],
}

/// A pooling stage halves even spatial dims exactly; odd dims cannot be
/// mirrored by the stride-2 transposed conv and disable the stage.
fn poolable(h: usize, w: usize) -> bool {
    h >= 2 && w >= 2 && h % 2 == 0 && w % 2 == 0
}

impl LearnAutoencoder {
    pub fn build(feature_shape: [usize; 3], seed: u64) -> Result<LearnAutoencoder, ModelError> {
        let [c, h, w] = feature_shape;
        if c == 0 || h == 0 || w == 0 {
            return Err(ModelError::FeatureShapeMismatch {
                expected: vec![1, 1, 1],
                got: feature_shape.to_vec(),
            });
        }
        let mut rng = stream_rng(seed, Stream::AutoencoderInit, 0, 0);
        let enc = [
            Conv2dLayer::new(&mut rng, c, ENCODER_CHANNELS[0], 3, 1, 1),
            Conv2dLayer::new(&mut rng, ENCODER_CHANNELS[0], ENCODER_CHANNELS[1], 3, 1, 1),
            Conv2dLayer::new(&mut rng, ENCODER_CHANNELS[1], ENCODER_CHANNELS[2], 3, 1, 1),
        ];
        let (mut hh, mut ww) = (h, w);
        let pool1 = poolable(hh, ww);
        if pool1 {
            hh /= 2;
            ww /= 2;
        }
        let pool2 = poolable(hh, ww);
        if pool2 {
            hh /= 2;
            ww /= 2;
        }
        if !(pool1 && pool2) {
            log::warn!(
                "feature map {c}x{h}x{w}: reduced to {} pooling stage(s)",
                pool1 as usize + pool2 as usize
            );
        }
        let dec = [
            TransposedConv2dLayer::new(&mut rng, ENCODER_CHANNELS[2], ENCODER_CHANNELS[1], 3, 1, 1),
            TransposedConv2dLayer::new(&mut rng, ENCODER_CHANNELS[1], ENCODER_CHANNELS[0], 3, 1, 1),
            TransposedConv2dLayer::new(&mut rng, ENCODER_CHANNELS[0], c, 3, 1, 1),
        ];
        let up = [
            pool2.then(|| {
                TransposedConv2dLayer::new(&mut rng, ENCODER_CHANNELS[1], ENCODER_CHANNELS[1], 2, 2, 0)
            }),
            pool1.then(|| {
                TransposedConv2dLayer::new(&mut rng, ENCODER_CHANNELS[0], ENCODER_CHANNELS[0], 2, 2, 0)
            }),
        ];
        let ae = LearnAutoencoder {
            feature_shape,
            latent_shape: [ENCODER_CHANNELS[2], hh, ww],
            pool_stages: [pool1, pool2],
            enc,
            dec,
            up,
        };
        log::info!("autoencoder built: {} parameters", ae.param_count());
        Ok(ae)
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|p| p.numel()).sum()
    }

    pub fn params(&self) -> Vec<Tensor> {
        let mut out = Vec::new();
        for layer in &self.enc {
            out.extend(layer.params());
        }
        for layer in &self.dec {
            out.extend(layer.params());
        }
        for layer in self.up.iter().flatten() {
            out.extend(layer.params());
        }
        out
    }

    pub fn encode(&self, f: &FeatureMap) -> Result<LatentCode, ModelError> {
        if !f.normalized {
            return Err(ModelError::NotNormalized);
        }
        let values = self.encode_values(&f.values)?;
        Ok(LatentCode {
            values,
            source: f.source,
            is_occluded: f.is_occluded,
        })
    }

    pub fn encode_values(&self, values: &Tensor) -> Result<Tensor, ModelError> {
        if values.shape() != self.feature_shape {
            return Err(ModelError::FeatureShapeMismatch {
                expected: self.feature_shape.to_vec(),
                got: values.shape().to_vec(),
            });
        }
        let mut x = self.enc[0].forward(values)?.relu();
        if self.pool_stages[0] {
            x = x.max_pool2d(2, 2)?.0;
        }
        x = self.enc[1].forward(&x)?.relu();
        if self.pool_stages[1] {
            x = x.max_pool2d(2, 2)?.0;
        }
        Ok(self.enc[2].forward(&x)?)
    }

    /// Reconstruct a normalized feature map from a latent code. Output values
    /// are clamped to [-1, +1].
    pub fn decode(&self, z: &LatentCode) -> Result<Tensor, ModelError> {
        self.decode_values(&z.values)
    }

    pub fn decode_values(&self, values: &Tensor) -> Result<Tensor, ModelError> {
        if values.shape() != self.latent_shape {
            return Err(ModelError::FeatureShapeMismatch {
                expected: self.latent_shape.to_vec(),
                got: values.shape().to_vec(),
            });
        }
        let mut x = self.dec[0].forward(values)?.relu();
        if let Some(up2) = &self.up[0] {
            x = up2.forward(&x)?;
        }
        x = self.dec[1].forward(&x)?.relu();
        if let Some(up1) = &self.up[1] {
            x = up1.forward(&x)?;
        }
        Ok(self.dec[2].forward(&x)?.hard_tanh())
    }

    /// encode + decode in one go, tracking provenance flags.
    pub fn reconstruct(&self, f: &FeatureMap) -> Result<(LatentCode, Tensor), ModelError> {
        let z = self.encode(f)?;
        let recon = self.decode(&z)?;
        Ok((z, recon))
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint, TensorError> {
        let mut ckpt = Checkpoint::new();
        ckpt.set_meta("kind", "autoencoder");
        ckpt.set_meta(
            "feature_shape",
            format!(
                "{}x{}x{}",
                self.feature_shape[0], self.feature_shape[1], self.feature_shape[2]
            ),
        );
        ckpt.set_meta(
            "channels",
            format!(
                "{},{},{}",
                ENCODER_CHANNELS[0], ENCODER_CHANNELS[1], ENCODER_CHANNELS[2]
            ),
        );
        ckpt.set_meta(
            "pool_stages",
            format!("{},{}", self.pool_stages[0] as u8, self.pool_stages[1] as u8),
        );
        for (i, layer) in self.enc.iter().enumerate() {
            ckpt.push(&format!("enc{i}.kernels"), "encoder", false, layer.kernels.detach());
            ckpt.push(&format!("enc{i}.bias"), "encoder", false, layer.bias.detach());
        }
        for (i, layer) in self.dec.iter().enumerate() {
            ckpt.push(&format!("dec{i}.kernels"), "decoder", false, layer.kernels.detach());
            ckpt.push(&format!("dec{i}.bias"), "decoder", false, layer.bias.detach());
        }
        for (i, layer) in self.up.iter().enumerate() {
            if let Some(layer) = layer {
                ckpt.push(&format!("up{i}.kernels"), "decoder", false, layer.kernels.detach());
                ckpt.push(&format!("up{i}.bias"), "decoder", false, layer.bias.detach());
            }
        }
        Ok(ckpt)
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<LearnAutoencoder, ModelError> {
        let missing = |what: String| ModelError::Checkpoint(format!("missing {what}"));
        let shape_str = ckpt
            .meta("feature_shape")
            .ok_or_else(|| missing("feature_shape".into()))?;
        let dims: Vec<usize> = shape_str.split('x').filter_map(|p| p.parse().ok()).collect();
        if dims.len() != 3 {
            return Err(ModelError::Checkpoint(format!("bad feature_shape `{shape_str}`")));
        }
        let ae = LearnAutoencoder::build([dims[0], dims[1], dims[2]], 0)?;
        let load = |name: String, target: &Tensor| -> Result<(), ModelError> {
            let entry = ckpt.get(&name).ok_or_else(|| missing(name.clone()))?;
            if entry.tensor.shape() != target.shape() {
                return Err(ModelError::FeatureShapeMismatch {
                    expected: target.shape().to_vec(),
                    got: entry.tensor.shape().to_vec(),
                });
            }
            target.set_data(&entry.tensor.data());
            Ok(())
        };
        for (i, layer) in ae.enc.iter().enumerate() {
            load(format!("enc{i}.kernels"), &layer.kernels)?;
            load(format!("enc{i}.bias"), &layer.bias)?;
        }
        for (i, layer) in ae.dec.iter().enumerate() {
            load(format!("dec{i}.kernels"), &layer.kernels)?;
            load(format!("dec{i}.bias"), &layer.bias)?;
        }
        for (i, layer) in ae.up.iter().enumerate() {
            if let Some(layer) = layer {
                load(format!("up{i}.kernels"), &layer.kernels)?;
                load(format!("up{i}.bias"), &layer.bias)?;
            }
        }
        Ok(ae)
    }

    /// Copy parameter values from another identically shaped autoencoder.
    pub fn copy_params_from(&self, other: &LearnAutoencoder) {
        for (dst, src) in self.params().iter().zip(other.params()) {
            dst.set_data(&src.data());
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn normalized_map(values: Tensor) -> FeatureMap {
        FeatureMap {
            values,
            normalized: true,
            source: SampleId { class: 0, index: 0 },
            is_occluded: false,
        }
    }

    #[test]
    fn shapes_for_8x8_features() {
        let ae = LearnAutoencoder::build([64, 8, 8], 7).unwrap();
        assert_eq!(ae.latent_shape, [32, 2, 2]);
        assert_eq!(ae.pool_stages, [true, true]);
        let f = normalized_map(Tensor::full(&[64, 8, 8], 0.3));
        let (z, recon) = ae.reconstruct(&f).unwrap();
        assert_eq!(z.values.shape(), &[32, 2, 2]);
        assert_eq!(recon.shape(), &[64, 8, 8]);
    }

    #[test]
    fn shapes_for_2x2_features_reduce_pooling() {
        let ae = LearnAutoencoder::build([64, 2, 2], 7).unwrap();
        assert_eq!(ae.pool_stages, [true, false]);
        assert_eq!(ae.latent_shape, [32, 1, 1]);
        let f = normalized_map(Tensor::full(&[64, 2, 2], -0.2));
        let (z, recon) = ae.reconstruct(&f).unwrap();
        assert_eq!(z.values.shape(), &[32, 1, 1]);
        assert_eq!(recon.shape(), &[64, 2, 2]);
    }

    #[test]
    fn build_is_deterministic() {
        let a = LearnAutoencoder::build([64, 4, 4], 3).unwrap();
        let b = LearnAutoencoder::build([64, 4, 4], 3).unwrap();
        for (pa, pb) in a.params().iter().zip(b.params()) {
            assert_eq!(pa.to_vec(), pb.to_vec());
        }
    }

    #[test]
    fn decode_output_stays_in_range() {
        use rand::{Rng, SeedableRng};
        let ae = LearnAutoencoder::build([8, 4, 4], 5).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        for _ in 0..5 {
            let latent: Vec<f64> = (0..ae.latent_shape.iter().product::<usize>())
                .map(|_| rng.gen_range(-30.0..30.0))
                .collect();
            let out = ae
                .decode_values(&Tensor::new(latent, &ae.latent_shape.clone()))
                .unwrap();
            assert!(out.data().iter().all(|v| (-1.0..=1.0).contains(v)));
            assert!(out.all_finite());
        }
    }

    #[test]
    fn zero_latent_decodes_finite_in_range() {
        let ae = LearnAutoencoder::build([8, 4, 4], 5).unwrap();
        let out = ae.decode_values(&Tensor::zeros(&ae.latent_shape.clone())).unwrap();
        assert!(out.all_finite());
        assert!(out.data().iter().all(|v| (-1.0..=1.0).contains(v)));
    }

    #[test]
    fn rejects_unnormalized_input_and_bad_shapes() {
        let ae = LearnAutoencoder::build([8, 4, 4], 5).unwrap();
        let raw = FeatureMap {
            values: Tensor::zeros(&[8, 4, 4]),
            normalized: false,
            source: SampleId { class: 0, index: 0 },
            is_occluded: false,
        };
        assert!(matches!(ae.encode(&raw), Err(ModelError::NotNormalized)));
        let wrong = normalized_map(Tensor::zeros(&[8, 5, 5]));
        assert!(matches!(
            ae.encode(&wrong),
            Err(ModelError::FeatureShapeMismatch { .. })
        ));
        assert!(ae.decode_values(&Tensor::zeros(&[32, 9, 9])).is_err());
        assert!(LearnAutoencoder::build([0, 4, 4], 1).is_err());
    }

    #[test]
    fn encode_is_deterministic_per_input() {
        let ae = LearnAutoencoder::build([8, 4, 4], 2).unwrap();
        let f = normalized_map(Tensor::full(&[8, 4, 4], 0.4));
        let a = ae.encode(&f).unwrap().values.to_vec();
        let b = ae.encode(&f).unwrap().values.to_vec();
        assert_eq!(a, b);
    }

    #[test]
    fn checkpoint_round_trip() {
        let ae = LearnAutoencoder::build([64, 4, 4], 11).unwrap();
        let bytes = ae.to_checkpoint().unwrap().to_bytes().unwrap();
        let back =
            LearnAutoencoder::from_checkpoint(&Checkpoint::from_bytes(&bytes).unwrap()).unwrap();
        let f = normalized_map(Tensor::full(&[64, 4, 4], 0.25));
        let a = ae.reconstruct(&f).unwrap().1.to_vec();
        let b = back.reconstruct(&f).unwrap().1.to_vec();
        assert_eq!(a, b);
    }

    #[test]
    fn gradients_flow_through_encode_and_decode() {
        use crate::tensor::grad_check_sampled;
        use rand::{Rng, SeedableRng};
        let ae = LearnAutoencoder::build([4, 4, 4], 13).unwrap();
        // Random input: constant maps create max-pool ties, where finite
        // differences are meaningless.
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let x = Tensor::new((0..64).map(|_| rng.gen_range(-0.9..0.9)).collect(), &[4, 4, 4]);
        let err = grad_check_sampled(
            |p| {
                let z = ae.encode_values(&p[0]).unwrap();
                ae.decode_values(&z).unwrap().mul(&ae.decode_values(&z).unwrap()).sum()
            },
            &[x],
            1e-5,
            24,
            7,
        );
        assert!(err < 1e-4, "max relative error {err}");
    }
}
