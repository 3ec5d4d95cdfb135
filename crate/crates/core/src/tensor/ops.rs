//! Forward operations. Each one computes its output eagerly and records the
//! backward rule on the result tensor.
//!
//! Convolution uses cross-correlation semantics (no kernel flip). Elementwise
//! binary ops panic on shape mismatch (programming error); the structured ops
//! named in their contracts return `Result` with diagnostics.

use super::{Rule, Tensor, TensorError};

impl Tensor {
    pub fn add(&self, other: &Tensor) -> Tensor {
        binary_elementwise("add", self, other, |a, b| a + b, Rule::Add)
    }

    pub fn sub(&self, other: &Tensor) -> Tensor {
        binary_elementwise("sub", self, other, |a, b| a - b, Rule::Sub)
    }

    pub fn mul(&self, other: &Tensor) -> Tensor {
        binary_elementwise("mul", self, other, |a, b| a * b, Rule::Mul)
    }

    pub fn scale(&self, c: f64) -> Tensor {
        let data = self.data().iter().map(|v| v * c).collect();
        Tensor::from_op(data, &self.inner.shape.clone(), vec![self.clone()], Rule::Scale(c))
    }

    /// Sum of all elements, as a rank-0 scalar.
    pub fn sum(&self) -> Tensor {
        let s: f64 = self.data().iter().sum();
        Tensor::from_op(vec![s], &[], vec![self.clone()], Rule::Sum)
    }

    /// Mean of all elements, as a rank-0 scalar.
    pub fn mean(&self) -> Tensor {
        let n = self.numel().max(1) as f64;
        let s: f64 = self.data().iter().sum();
        Tensor::from_op(vec![s / n], &[], vec![self.clone()], Rule::Mean)
    }

    /// Elementwise max(0, x). The subgradient at 0 is 0.
    pub fn relu(&self) -> Tensor {
        let data = self.data().iter().map(|v| v.max(0.0)).collect();
        Tensor::from_op(data, &self.inner.shape.clone(), vec![self.clone()], Rule::Relu)
    }

    /// Elementwise clamp to [-1, +1]. Gradient is 1 strictly inside the
    /// interval and 0 at and beyond the boundaries.
    pub fn hard_tanh(&self) -> Tensor {
        let data = self.data().iter().map(|v| v.clamp(-1.0, 1.0)).collect();
        Tensor::from_op(data, &self.inner.shape.clone(), vec![self.clone()], Rule::HardTanh)
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor, TensorError> {
        let to_len: usize = shape.iter().product();
        if to_len != self.numel() {
            return Err(TensorError::BadReshape {
                from: self.shape().to_vec(),
                from_len: self.numel(),
                to: shape.to_vec(),
                to_len,
            });
        }
        Ok(Tensor::from_op(self.to_vec(), shape, vec![self.clone()], Rule::Reshape))
    }

    /// `weights[D,N] . self[N] + bias[D]`.
    pub fn linear(&self, weights: &Tensor, bias: &Tensor) -> Result<Tensor, TensorError> {
        if self.shape().len() != 1 {
            return Err(TensorError::BadRank {
                op: "linear",
                expected: 1,
                shape: self.shape().to_vec(),
            });
        }
        let n = self.shape()[0];
        let (d, wn) = match weights.shape() {
            [d, wn] => (*d, *wn),
            _ => {
                return Err(TensorError::BadRank {
                    op: "linear",
                    expected: 2,
                    shape: weights.shape().to_vec(),
                })
            }
        };
        if wn != n || bias.shape() != [d] {
            return Err(TensorError::ShapeMismatch {
                op: "linear",
                left: weights.shape().to_vec(),
                right: self.shape().to_vec(),
            });
        }
        let x = self.data();
        let w = weights.data();
        let b = bias.data();
        let mut out = vec![0.0; d];
        for (row, o) in out.iter_mut().enumerate() {
            let wrow = &w[row * n..(row + 1) * n];
            let mut acc = 0.0;
            for (wi, xi) in wrow.iter().zip(x.iter()) {
                acc += wi * xi;
            }
            *o = acc + b[row];
        }
        drop((x, w, b));
        Ok(Tensor::from_op(
            out,
            &[d],
            vec![self.clone(), weights.clone(), bias.clone()],
            Rule::Linear,
        ))
    }

    /// 2-D cross-correlation over a `[C_in,H,W]` input with `[C_out,C_in,k,k]`
    /// kernels. Output is `[C_out, (H+2p-k)/s+1, (W+2p-k)/s+1]`.
    pub fn conv2d(
        &self,
        kernels: &Tensor,
        bias: &Tensor,
        stride: usize,
        padding: usize,
    ) -> Result<Tensor, TensorError> {
        let (ci, h, w) = expect_chw("conv2d", self)?;
        let (co, kci, k) = expect_kernel4("conv2d", kernels)?;
        if kci != ci {
            return Err(TensorError::ShapeMismatch {
                op: "conv2d",
                left: self.shape().to_vec(),
                right: kernels.shape().to_vec(),
            });
        }
        if bias.shape() != [co] {
            return Err(TensorError::ShapeMismatch {
                op: "conv2d",
                left: kernels.shape().to_vec(),
                right: bias.shape().to_vec(),
            });
        }
        if stride == 0 {
            return Err(TensorError::ZeroStride { op: "conv2d" });
        }
        let (ph, pw) = (h + 2 * padding, w + 2 * padding);
        if k > ph || k > pw {
            return Err(TensorError::KernelTooLarge {
                op: "conv2d",
                k,
                h: ph,
                w: pw,
            });
        }
        let ho = (ph - k) / stride + 1;
        let wo = (pw - k) / stride + 1;

        let padded = pad_chw(&self.data(), ci, h, w, padding);
        let kd = kernels.data();
        let bd = bias.data();
        let mut out = vec![0.0; co * ho * wo];
        conv_forward(&padded, ci, ph, pw, &kd, co, k, stride, &bd, &mut out, ho, wo);
        drop((kd, bd));
        Ok(Tensor::from_op(
            out,
            &[co, ho, wo],
            vec![self.clone(), kernels.clone(), bias.clone()],
            Rule::Conv2d { stride, padding },
        ))
    }

    /// Transposed 2-D convolution (the adjoint of [`Tensor::conv2d`] with
    /// respect to its input). Kernels are `[C_in,C_out,k,k]`; output is
    /// `[C_out, (H-1)s - 2p + k, (W-1)s - 2p + k]`.
    pub fn transposed_conv2d(
        &self,
        kernels: &Tensor,
        bias: &Tensor,
        stride: usize,
        padding: usize,
    ) -> Result<Tensor, TensorError> {
        let (ci, h, w) = expect_chw("transposed_conv2d", self)?;
        let (kci, co, k) = expect_kernel4("transposed_conv2d", kernels)?;
        if kci != ci {
            return Err(TensorError::ShapeMismatch {
                op: "transposed_conv2d",
                left: self.shape().to_vec(),
                right: kernels.shape().to_vec(),
            });
        }
        if bias.shape() != [co] {
            return Err(TensorError::ShapeMismatch {
                op: "transposed_conv2d",
                left: kernels.shape().to_vec(),
                right: bias.shape().to_vec(),
            });
        }
        if stride == 0 {
            return Err(TensorError::ZeroStride { op: "transposed_conv2d" });
        }
        // Full (unpadded) scatter extent, cropped by `padding` on each side.
        let fh = (h - 1) * stride + k;
        let fw = (w - 1) * stride + k;
        if fh < 2 * padding + 1 || fw < 2 * padding + 1 {
            return Err(TensorError::KernelTooLarge {
                op: "transposed_conv2d",
                k,
                h: fh,
                w: fw,
            });
        }
        let ho = fh - 2 * padding;
        let wo = fw - 2 * padding;

        let xd = self.data();
        let kd = kernels.data();
        let bd = bias.data();
        let mut full = vec![0.0; co * fh * fw];
        tconv_scatter(&xd, ci, h, w, &kd, co, k, stride, &mut full, fh, fw);
        let mut out = vec![0.0; co * ho * wo];
        for oc in 0..co {
            for y in 0..ho {
                let src = &full[oc * fh * fw + (y + padding) * fw + padding..][..wo];
                let dst = &mut out[oc * ho * wo + y * wo..][..wo];
                let b = bd[oc];
                for (d, s) in dst.iter_mut().zip(src) {
                    *d = s + b;
                }
            }
        }
        drop((xd, kd, bd));
        Ok(Tensor::from_op(
            out,
            &[co, ho, wo],
            vec![self.clone(), kernels.clone(), bias.clone()],
            Rule::TransposedConv2d { stride, padding },
        ))
    }

    /// Max pooling over `[C,H,W]`; returns the pooled tensor plus the flat
    /// input index of each window maximum (the backward route).
    pub fn max_pool2d(&self, k: usize, stride: usize) -> Result<(Tensor, Vec<usize>), TensorError> {
        let (c, h, w) = expect_chw("max_pool2d", self)?;
        if stride == 0 {
            return Err(TensorError::ZeroStride { op: "max_pool2d" });
        }
        if k == 0 || k > h || k > w {
            return Err(TensorError::KernelTooLarge {
                op: "max_pool2d",
                k,
                h,
                w,
            });
        }
        let ho = (h - k) / stride + 1;
        let wo = (w - k) / stride + 1;
        let x = self.data();
        let mut out = vec![0.0; c * ho * wo];
        let mut argmax = vec![0usize; c * ho * wo];
        for ch in 0..c {
            let base = ch * h * w;
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut best = f64::NEG_INFINITY;
                    let mut best_idx = 0;
                    for ky in 0..k {
                        let row = base + (oy * stride + ky) * w + ox * stride;
                        for kx in 0..k {
                            let v = x[row + kx];
                            if v > best {
                                best = v;
                                best_idx = row + kx;
                            }
                        }
                    }
                    let o = ch * ho * wo + oy * wo + ox;
                    out[o] = best;
                    argmax[o] = best_idx;
                }
            }
        }
        drop(x);
        let t = Tensor::from_op(
            out,
            &[c, ho, wo],
            vec![self.clone()],
            Rule::MaxPool2d {
                argmax: argmax.clone(),
            },
        );
        Ok((t, argmax))
    }

    /// `-log softmax(logits)[label]` with max-subtraction stabilization.
    pub fn softmax_cross_entropy(&self, label: usize) -> Result<Tensor, TensorError> {
        if self.shape().len() != 1 {
            return Err(TensorError::BadRank {
                op: "softmax_cross_entropy",
                expected: 1,
                shape: self.shape().to_vec(),
            });
        }
        let d = self.shape()[0];
        if label >= d {
            return Err(TensorError::LabelOutOfRange { label, classes: d });
        }
        let x = self.data();
        let max = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = x.iter().map(|v| (v - max).exp()).collect();
        let z: f64 = exps.iter().sum();
        let probs: Vec<f64> = exps.iter().map(|e| e / z).collect();
        let loss = z.ln() - (x[label] - max);
        drop(x);
        Ok(Tensor::from_op(
            vec![loss],
            &[],
            vec![self.clone()],
            Rule::SoftmaxCrossEntropy { label, probs },
        ))
    }

    /// Multiply channel `c` of a `[C,H,W]` tensor by the constant `scales[c]`.
    pub fn channel_scale(&self, scales: &[f64]) -> Result<Tensor, TensorError> {
        let (c, h, w) = expect_chw("channel_scale", self)?;
        if scales.len() != c {
            return Err(TensorError::ShapeMismatch {
                op: "channel_scale",
                left: self.shape().to_vec(),
                right: vec![scales.len()],
            });
        }
        let x = self.data();
        let mut out = vec![0.0; c * h * w];
        for ch in 0..c {
            let s = scales[ch];
            let src = &x[ch * h * w..(ch + 1) * h * w];
            let dst = &mut out[ch * h * w..(ch + 1) * h * w];
            for (d, v) in dst.iter_mut().zip(src) {
                *d = v * s;
            }
        }
        drop(x);
        Ok(Tensor::from_op(
            out,
            &[c, h, w],
            vec![self.clone()],
            Rule::ChannelScale {
                scales: scales.to_vec(),
            },
        ))
    }
}

fn binary_elementwise(
    op: &'static str,
    a: &Tensor,
    b: &Tensor,
    f: impl Fn(f64, f64) -> f64,
    rule: Rule,
) -> Tensor {
    assert_eq!(
        a.shape(),
        b.shape(),
        "{op}: shape mismatch between {:?} and {:?}",
        a.shape(),
        b.shape()
    );
    let data = a.data().iter().zip(b.data().iter()).map(|(x, y)| f(*x, *y)).collect();
    Tensor::from_op(data, &a.shape().to_vec(), vec![a.clone(), b.clone()], rule)
}

fn expect_chw(op: &'static str, t: &Tensor) -> Result<(usize, usize, usize), TensorError> {
    match t.shape() {
        [c, h, w] => Ok((*c, *h, *w)),
        other => Err(TensorError::BadRank {
            op,
            expected: 3,
            shape: other.to_vec(),
        }),
    }
}

fn expect_kernel4(op: &'static str, t: &Tensor) -> Result<(usize, usize, usize), TensorError> {
    match t.shape() {
        [a, b, kh, kw] if kh == kw => Ok((*a, *b, *kh)),
        other => Err(TensorError::BadRank {
            op,
            expected: 4,
            shape: other.to_vec(),
        }),
    }
}

pub(crate) fn pad_chw(x: &[f64], c: usize, h: usize, w: usize, p: usize) -> Vec<f64> {
    if p == 0 {
        return x.to_vec();
    }
    let (ph, pw) = (h + 2 * p, w + 2 * p);
    let mut out = vec![0.0; c * ph * pw];
    for ch in 0..c {
        for y in 0..h {
            let src = &x[ch * h * w + y * w..][..w];
            let dst = &mut out[ch * ph * pw + (y + p) * pw + p..][..w];
            dst.copy_from_slice(src);
        }
    }
    out
}

/// out[oc,oy,ox] = bias[oc] + sum_{ic,ky,kx} pin[ic, oy*s+ky, ox*s+kx] * w[oc,ic,ky,kx]
///
/// The 3x3/stride-1 case (every conv in the models) takes a fused row pass
/// that applies all three kernel taps per row visit. The per-element
/// accumulation order matches the generic path exactly, so both produce
/// bit-identical outputs.
pub(crate) fn conv_forward(
    pin: &[f64],
    ci: usize,
    ph: usize,
    pw: usize,
    kw: &[f64],
    co: usize,
    k: usize,
    stride: usize,
    bias: &[f64],
    out: &mut [f64],
    ho: usize,
    wo: usize,
) {
    // Small outputs with many channels: flatten each receptive field into a
    // contiguous patch and take plain dot products per output channel.
    if k == 3 && stride == 1 && ho * wo <= 64 {
        let patch_len = ci * 9;
        let mut patch = vec![0.0f64; patch_len];
        for oc in 0..co {
            out[oc * ho * wo..(oc + 1) * ho * wo].fill(bias[oc]);
        }
        for oy in 0..ho {
            for ox in 0..wo {
                for ic in 0..ci {
                    let pin_c = &pin[ic * ph * pw..];
                    for ky in 0..3 {
                        let src = &pin_c[(oy + ky) * pw + ox..][..3];
                        patch[ic * 9 + ky * 3..ic * 9 + ky * 3 + 3].copy_from_slice(src);
                    }
                }
                let pos = oy * wo + ox;
                for oc in 0..co {
                    let wrow = &kw[oc * patch_len..(oc + 1) * patch_len];
                    let mut acc = 0.0;
                    for (wv, pv) in wrow.iter().zip(&patch) {
                        acc += wv * pv;
                    }
                    out[oc * ho * wo + pos] += acc;
                }
            }
        }
        return;
    }
    for oc in 0..co {
        let out_c = &mut out[oc * ho * wo..(oc + 1) * ho * wo];
        out_c.fill(bias[oc]);
        for ic in 0..ci {
            let pin_c = &pin[ic * ph * pw..(ic + 1) * ph * pw];
            let kbase = (oc * ci + ic) * k * k;
            if k == 3 && stride == 1 {
                for ky in 0..3 {
                    let (w0, w1, w2) = (kw[kbase + ky * 3], kw[kbase + ky * 3 + 1], kw[kbase + ky * 3 + 2]);
                    for oy in 0..ho {
                        let row = &pin_c[(oy + ky) * pw..][..wo + 2];
                        let dst = &mut out_c[oy * wo..][..wo];
                        for (x, d) in dst.iter_mut().enumerate() {
                            *d += w0 * row[x];
                            *d += w1 * row[x + 1];
                            *d += w2 * row[x + 2];
                        }
                    }
                }
                continue;
            }
            for ky in 0..k {
                for kx in 0..k {
                    let wv = kw[kbase + ky * k + kx];
                    if stride == 1 {
                        for oy in 0..ho {
                            let src = &pin_c[(oy + ky) * pw + kx..][..wo];
                            let dst = &mut out_c[oy * wo..][..wo];
                            for (d, s) in dst.iter_mut().zip(src) {
                                *d += wv * s;
                            }
                        }
                    } else {
                        for oy in 0..ho {
                            let row = (oy * stride + ky) * pw + kx;
                            let dst = &mut out_c[oy * wo..][..wo];
                            for (ox, d) in dst.iter_mut().enumerate() {
                                *d += wv * pin_c[row + ox * stride];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// full[oc, y*s+ky, x*s+kx] += x[ic,y,x] * w[ic,oc,ky,kx]
pub(crate) fn tconv_scatter(
    x: &[f64],
    ci: usize,
    h: usize,
    w: usize,
    kw: &[f64],
    co: usize,
    k: usize,
    stride: usize,
    full: &mut [f64],
    fh: usize,
    fw: usize,
) {
    // Small latent-side maps: accumulate each input position's full stamp
    // (all output channels) contiguously, then scatter it once.
    if k == 3 && stride == 1 && h * w <= 64 {
        let patch_len = co * 9;
        let mut stamp = vec![0.0f64; patch_len];
        for y in 0..h {
            for x_pos in 0..w {
                let pos = y * w + x_pos;
                stamp.fill(0.0);
                for ic in 0..ci {
                    let xv = x[ic * h * w + pos];
                    let wrow = &kw[ic * patch_len..(ic + 1) * patch_len];
                    for (s, wv) in stamp.iter_mut().zip(wrow) {
                        *s += xv * wv;
                    }
                }
                for oc in 0..co {
                    let full_c = &mut full[oc * fh * fw..(oc + 1) * fh * fw];
                    for ky in 0..3 {
                        let dst = &mut full_c[(y + ky) * fw + x_pos..][..3];
                        let src = &stamp[oc * 9 + ky * 3..oc * 9 + ky * 3 + 3];
                        for (d, s) in dst.iter_mut().zip(src) {
                            *d += s;
                        }
                    }
                }
            }
        }
        return;
    }
    for ic in 0..ci {
        let x_c = &x[ic * h * w..(ic + 1) * h * w];
        for oc in 0..co {
            let full_c = &mut full[oc * fh * fw..(oc + 1) * fh * fw];
            let kbase = (ic * co + oc) * k * k;
            for ky in 0..k {
                for kx in 0..k {
                    let wv = kw[kbase + ky * k + kx];
                    if stride == 1 {
                        for y in 0..h {
                            let src = &x_c[y * w..][..w];
                            let dst = &mut full_c[(y + ky) * fw + kx..][..w];
                            for (d, s) in dst.iter_mut().zip(src) {
                                *d += wv * s;
                            }
                        }
                    } else {
                        for y in 0..h {
                            let src = &x_c[y * w..][..w];
                            let row = (y * stride + ky) * fw + kx;
                            for (xi, s) in src.iter().enumerate() {
                                full_c[row + xi * stride] += wv * s;
                            }
                        }
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::super::Tensor;

    #[test]
    fn conv2d_sum_of_ones() {
        // 1x3x3 ones, single 1x1x3x3 kernel of ones, bias 0 -> 1x1x1 output of 9
        let x = Tensor::full(&[1, 3, 3], 1.0);
        let k = Tensor::full(&[1, 1, 3, 3], 1.0);
        let b = Tensor::zeros(&[1]);
        let y = x.conv2d(&k, &b, 1, 0).unwrap();
        assert_eq!(y.shape(), &[1, 1, 1]);
        assert_eq!(y.item(), 9.0);
    }

    #[test]
    fn conv2d_identity_kernel() {
        let x = Tensor::new((0..9).map(|v| v as f64).collect(), &[1, 3, 3]);
        let k = Tensor::full(&[1, 1, 1, 1], 1.0);
        let b = Tensor::zeros(&[1]);
        let y = x.conv2d(&k, &b, 1, 0).unwrap();
        assert_eq!(y.to_vec(), x.to_vec());
    }

    #[test]
    fn conv2d_rejects_channel_mismatch() {
        let x = Tensor::zeros(&[2, 4, 4]);
        let k = Tensor::zeros(&[1, 3, 3, 3]);
        let b = Tensor::zeros(&[1]);
        let err = x.conv2d(&k, &b, 1, 0).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 4, 4]") && msg.contains("[1, 3, 3, 3]"), "{msg}");
    }

    #[test]
    fn transposed_conv2d_stamps_kernel() {
        // 1x1x1 input of value 1, 1x1x2x2 kernel of ones -> 1x2x2 of ones
        let x = Tensor::full(&[1, 1, 1], 1.0);
        let k = Tensor::full(&[1, 1, 2, 2], 1.0);
        let b = Tensor::zeros(&[1]);
        let y = x.transposed_conv2d(&k, &b, 1, 0).unwrap();
        assert_eq!(y.shape(), &[1, 2, 2]);
        assert_eq!(y.to_vec(), vec![1.0; 4]);
    }

    #[test]
    fn transposed_conv2d_stride2_block_placement() {
        // 1x2x2 input, 2x2 kernel, stride 2 -> non-overlapping block placement
        let x = Tensor::new(vec![1.0, 2.0, 3.0, 4.0], &[1, 2, 2]);
        let k = Tensor::new(vec![1.0, 10.0, 100.0, 1000.0], &[1, 1, 2, 2]);
        let b = Tensor::zeros(&[1]);
        let y = x.transposed_conv2d(&k, &b, 2, 0).unwrap();
        assert_eq!(y.shape(), &[1, 4, 4]);
        // Each input value stamps value*kernel into its own 2x2 block.
        let expect = vec![
            1.0, 10.0, 2.0, 20.0, //
            100.0, 1000.0, 200.0, 2000.0, //
            3.0, 30.0, 4.0, 40.0, //
            300.0, 3000.0, 400.0, 4000.0,
        ];
        assert_eq!(y.to_vec(), expect);
    }

    #[test]
    fn max_pool_constant_and_enumerated() {
        let c = Tensor::full(&[1, 4, 4], 3.5);
        let (y, _) = c.max_pool2d(2, 2).unwrap();
        assert!(y.to_vec().iter().all(|v| *v == 3.5));

        let x = Tensor::new(vec![1.0, 2.0, 3.0, 4.0], &[1, 2, 2]);
        let (y, idx) = x.max_pool2d(2, 2).unwrap();
        assert_eq!(y.to_vec(), vec![4.0]);
        assert_eq!(idx, vec![3]);
    }

    #[test]
    fn max_pool_rejects_oversized_window() {
        let x = Tensor::zeros(&[1, 2, 2]);
        assert!(x.max_pool2d(3, 1).is_err());
    }

    #[test]
    fn relu_and_hard_tanh_values() {
        let x = Tensor::new(vec![-1.0, 0.0, 2.0], &[3]);
        assert_eq!(x.relu().to_vec(), vec![0.0, 0.0, 2.0]);
        let y = Tensor::new(vec![-3.0, 0.5, 3.0], &[3]);
        assert_eq!(y.hard_tanh().to_vec(), vec![-1.0, 0.5, 1.0]);
        let z = Tensor::new(vec![-0.9, 0.3, 1.0], &[3]);
        assert_eq!(z.hard_tanh().to_vec(), vec![-0.9, 0.3, 1.0]);
    }

    #[test]
    fn linear_identity_and_zero_weight() {
        let x = Tensor::new(vec![1.0, -2.0, 3.0], &[3]);
        let eye = Tensor::new(
            vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0],
            &[3, 3],
        );
        let zero_b = Tensor::zeros(&[3]);
        assert_eq!(x.linear(&eye, &zero_b).unwrap().to_vec(), x.to_vec());

        let zero_w = Tensor::zeros(&[2, 3]);
        let b = Tensor::new(vec![5.0, -1.0], &[2]);
        assert_eq!(x.linear(&zero_w, &b).unwrap().to_vec(), vec![5.0, -1.0]);
    }

    #[test]
    fn linear_rejects_dimension_mismatch() {
        let x = Tensor::zeros(&[3]);
        let w = Tensor::zeros(&[2, 4]);
        let b = Tensor::zeros(&[2]);
        let msg = x.linear(&w, &b).unwrap_err().to_string();
        assert!(msg.contains("[2, 4]") && msg.contains("[3]"), "{msg}");
    }

    #[test]
    fn cross_entropy_uniform_and_stabilized() {
        let logits = Tensor::zeros(&[4]);
        let loss = logits.softmax_cross_entropy(1).unwrap();
        assert!((loss.item() - 4.0f64.ln()).abs() < 1e-12);

        let big = Tensor::new(vec![1000.0, 0.0], &[2]);
        let loss = big.softmax_cross_entropy(0).unwrap();
        assert!(loss.item().is_finite());
        assert!(loss.item() < 1e-12);
    }

    #[test]
    fn cross_entropy_rejects_bad_label() {
        let logits = Tensor::zeros(&[4]);
        assert!(logits.softmax_cross_entropy(4).is_err());
    }

    #[test]
    fn conv2d_matches_quadruple_loop_reference() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let (ci, h, w, co, k, p) = (2usize, 5usize, 5usize, 3usize, 3usize, 1usize);
        let x: Vec<f64> = (0..ci * h * w).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let kw: Vec<f64> = (0..co * ci * k * k).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let b: Vec<f64> = (0..co).map(|_| rng.gen_range(-1.0..1.0)).collect();

        let y = Tensor::new(x.clone(), &[ci, h, w])
            .conv2d(&Tensor::new(kw.clone(), &[co, ci, k, k]), &Tensor::new(b.clone(), &[co]), 1, p)
            .unwrap();

        // Direct reference convolution, one multiply at a time.
        let (ho, wo) = (h + 2 * p - k + 1, w + 2 * p - k + 1);
        let mut expect = vec![0.0; co * ho * wo];
        for oc in 0..co {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = b[oc];
                    for ic in 0..ci {
                        for ky in 0..k {
                            for kx in 0..k {
                                let iy = (oy + ky) as isize - p as isize;
                                let ix = (ox + kx) as isize - p as isize;
                                if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                                    acc += x[ic * h * w + iy as usize * w + ix as usize]
                                        * kw[((oc * ci + ic) * k + ky) * k + kx];
                                }
                            }
                        }
                    }
                    expect[oc * ho * wo + oy * wo + ox] = acc;
                }
            }
        }
        for (a, e) in y.to_vec().iter().zip(&expect) {
            assert!((a - e).abs() < 1e-12, "{a} vs {e}");
        }
    }

    #[test]
    fn max_pool_matches_windowed_oracle() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let (c, h, w) = (3usize, 8usize, 8usize);
        let x: Vec<f64> = (0..c * h * w).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let (y, _) = Tensor::new(x.clone(), &[c, h, w]).max_pool2d(2, 2).unwrap();
        let yv = y.to_vec();
        for ch in 0..c {
            for oy in 0..4 {
                for ox in 0..4 {
                    let mut m = f64::NEG_INFINITY;
                    for ky in 0..2 {
                        for kx in 0..2 {
                            m = m.max(x[ch * 64 + (2 * oy + ky) * 8 + 2 * ox + kx]);
                        }
                    }
                    assert_eq!(yv[ch * 16 + oy * 4 + ox], m);
                }
            }
        }
    }

    #[test]
    fn linear_matches_dot_product_oracle() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let x: Vec<f64> = (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let w: Vec<f64> = (0..12).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let b: Vec<f64> = (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let y = Tensor::new(x.clone(), &[4])
            .linear(&Tensor::new(w.clone(), &[3, 4]), &Tensor::new(b.clone(), &[3]))
            .unwrap();
        for d in 0..3 {
            let mut acc = b[d];
            for n in 0..4 {
                acc += w[d * 4 + n] * x[n];
            }
            assert!((y.to_vec()[d] - acc).abs() < 1e-12);
        }
    }
}
