//! Reverse-mode differentiation: linearize the graph reachable from a scalar
//! loss into a topologically ordered record, then replay it backwards once.

use std::collections::{HashMap, HashSet};

use super::ops::pad_chw;
use super::{Rule, Tensor, TensorError};

/// The executed operations behind a loss value, ordered so that every
/// operation's inputs appear before the operation itself. One backward
/// traversal visits each operation exactly once.
pub struct ComputationRecord {
    steps: Vec<Tensor>,
}

impl ComputationRecord {
    /// Collect the tracked subgraph below `root` in topological order.
    /// Untracked branches (nothing below them requires gradients) are pruned.
    pub fn build(root: &Tensor) -> ComputationRecord {
        let mut steps = Vec::new();
        if !root.tracked() {
            return ComputationRecord { steps };
        }
        let mut visited: HashSet<u64> = HashSet::new();
        // Iterative post-order: batch losses chain thousands of adds, so no recursion.
        let mut stack: Vec<(Tensor, usize)> = vec![(root.clone(), 0)];
        visited.insert(root.id());
        while let Some((node, child)) = stack.last_mut() {
            let parents: Option<&Vec<Tensor>> = node.inner.op.as_ref().map(|r| &r.parents);
            let next = parents.and_then(|ps| {
                while *child < ps.len() {
                    let p = &ps[*child];
                    *child += 1;
                    if p.tracked() && !visited.contains(&p.id()) {
                        return Some(p.clone());
                    }
                }
                None
            });
            match next {
                Some(p) => {
                    visited.insert(p.id());
                    stack.push((p, 0));
                }
                None => {
                    let (node, _) = stack.pop().expect("stack non-empty");
                    steps.push(node);
                }
            }
        }
        ComputationRecord { steps }
    }

    /// Nodes in topological order (inputs before consumers).
    pub fn steps(&self) -> &[Tensor] {
        &self.steps
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }
}

pub(super) fn backward(loss: &Tensor) -> Result<(), TensorError> {
    if loss.numel() != 1 {
        return Err(TensorError::NonScalarLoss {
            shape: loss.shape().to_vec(),
        });
    }
    let record = ComputationRecord::build(loss);
    if record.is_empty() {
        // Nothing requires gradients anywhere below the loss.
        return Ok(());
    }
    let mut grads: HashMap<u64, Vec<f64>> = HashMap::new();
    grads.insert(loss.id(), vec![1.0]);

    for node in record.steps().iter().rev() {
        let Some(g) = grads.remove(&node.id()) else {
            continue;
        };
        if node.requires_grad_flag() {
            node.accumulate_grad(&g);
        }
        let Some(op) = node.inner.op.as_ref() else {
            continue;
        };
        // One scratch buffer per parent slot; duplicated parents (e.g. x*x)
        // merge when the slots are folded into the gradient map below.
        let mut slots: Vec<Option<Vec<f64>>> = op
            .parents
            .iter()
            .map(|p| p.tracked().then(|| vec![0.0; p.numel()]))
            .collect();
        apply_rule(&op.rule, &g, &op.parents, &mut slots);
        for (parent, slot) in op.parents.iter().zip(slots.into_iter()) {
            let Some(contribution) = slot else { continue };
            match grads.get_mut(&parent.id()) {
                Some(acc) => {
                    for (a, c) in acc.iter_mut().zip(&contribution) {
                        *a += c;
                    }
                }
                None => {
                    grads.insert(parent.id(), contribution);
                }
            }
        }
    }
    Ok(())
}

fn apply_rule(rule: &Rule, g: &[f64], parents: &[Tensor], slots: &mut [Option<Vec<f64>>]) {
    match rule {
        Rule::Add => {
            for slot in slots.iter_mut() {
                if let Some(s) = slot {
                    add_into(s, g, 1.0);
                }
            }
        }
        Rule::Sub => {
            if let Some(s) = &mut slots[0] {
                add_into(s, g, 1.0);
            }
            if let Some(s) = &mut slots[1] {
                add_into(s, g, -1.0);
            }
        }
        Rule::Mul => {
            if let Some(s) = &mut slots[0] {
                let b = parents[1].data();
                for ((si, gi), bi) in s.iter_mut().zip(g).zip(b.iter()) {
                    *si += gi * bi;
                }
            }
            if let Some(s) = &mut slots[1] {
                let a = parents[0].data();
                for ((si, gi), ai) in s.iter_mut().zip(g).zip(a.iter()) {
                    *si += gi * ai;
                }
            }
        }
        Rule::Scale(c) => {
            if let Some(s) = &mut slots[0] {
                add_into(s, g, *c);
            }
        }
        Rule::Sum => {
            if let Some(s) = &mut slots[0] {
                for si in s.iter_mut() {
                    *si += g[0];
                }
            }
        }
        Rule::Mean => {
            if let Some(s) = &mut slots[0] {
                let n = s.len().max(1) as f64;
                let gv = g[0] / n;
                for si in s.iter_mut() {
                    *si += gv;
                }
            }
        }
        Rule::Reshape => {
            if let Some(s) = &mut slots[0] {
                add_into(s, g, 1.0);
            }
        }
        Rule::Relu => {
            if let Some(s) = &mut slots[0] {
                let x = parents[0].data();
                for ((si, gi), xi) in s.iter_mut().zip(g).zip(x.iter()) {
                    if *xi > 0.0 {
                        *si += gi;
                    }
                }
            }
        }
        Rule::HardTanh => {
            if let Some(s) = &mut slots[0] {
                let x = parents[0].data();
                for ((si, gi), xi) in s.iter_mut().zip(g).zip(x.iter()) {
                    if *xi > -1.0 && *xi < 1.0 {
                        *si += gi;
                    }
                }
            }
        }
        Rule::Linear => {
            let n = parents[0].numel();
            let d = parents[2].numel();
            if let Some(s) = &mut slots[0] {
                let w = parents[1].data();
                for row in 0..d {
                    let gv = g[row];
                    let wrow = &w[row * n..(row + 1) * n];
                    for (si, wi) in s.iter_mut().zip(wrow) {
                        *si += gv * wi;
                    }
                }
            }
            if let Some(s) = &mut slots[1] {
                let x = parents[0].data();
                for row in 0..d {
                    let gv = g[row];
                    let srow = &mut s[row * n..(row + 1) * n];
                    for (si, xi) in srow.iter_mut().zip(x.iter()) {
                        *si += gv * xi;
                    }
                }
            }
            if let Some(s) = &mut slots[2] {
                add_into(s, g, 1.0);
            }
        }
        Rule::Conv2d { stride, padding } => {
            conv2d_backward(g, parents, slots, *stride, *padding);
        }
        Rule::TransposedConv2d { stride, padding } => {
            tconv2d_backward(g, parents, slots, *stride, *padding);
        }
        Rule::MaxPool2d { argmax } => {
            if let Some(s) = &mut slots[0] {
                for (gi, idx) in g.iter().zip(argmax) {
                    s[*idx] += gi;
                }
            }
        }
        Rule::SoftmaxCrossEntropy { label, probs } => {
            if let Some(s) = &mut slots[0] {
                let gv = g[0];
                for (i, (si, pi)) in s.iter_mut().zip(probs).enumerate() {
                    let onehot = if i == *label { 1.0 } else { 0.0 };
                    *si += gv * (pi - onehot);
                }
            }
        }
        Rule::ChannelScale { scales } => {
            if let Some(s) = &mut slots[0] {
                let hw = s.len() / scales.len();
                for (c, sc) in scales.iter().enumerate() {
                    let seg = &mut s[c * hw..(c + 1) * hw];
                    let gseg = &g[c * hw..(c + 1) * hw];
                    for (si, gi) in seg.iter_mut().zip(gseg) {
                        *si += gi * sc;
                    }
                }
            }
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64], scale: f64) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += scale * s;
    }
}

fn conv2d_backward(
    g: &[f64],
    parents: &[Tensor],
    slots: &mut [Option<Vec<f64>>],
    stride: usize,
    padding: usize,
) {
    let (ci, h, w) = dims3(&parents[0]);
    let kshape = parents[1].shape();
    let (co, k) = (kshape[0], kshape[2]);
    let (ph, pw) = (h + 2 * padding, w + 2 * padding);
    let ho = (ph - k) / stride + 1;
    let wo = (pw - k) / stride + 1;

    if slots[2].is_some() {
        let s = slots[2].as_mut().expect("checked");
        for oc in 0..co {
            s[oc] += g[oc * ho * wo..(oc + 1) * ho * wo].iter().sum::<f64>();
        }
    }

    let need_input = slots[0].is_some();
    let need_weights = slots[1].is_some();
    if !need_input && !need_weights {
        return;
    }
    let padded = pad_chw(&parents[0].data(), ci, h, w, padding);

    // Small spatial outputs with many channels are loop-overhead bound in the
    // per-tap form; flatten each receptive field into one contiguous patch and
    // run long rank-1 updates instead.
    let small = k == 3 && stride == 1 && ho * wo <= 64;
    if small {
        let patch_len = ci * 9;
        let mut patch = vec![0.0f64; patch_len];
        let mut dpad = if need_input {
            vec![0.0f64; ci * ph * pw]
        } else {
            Vec::new()
        };
        for oy in 0..ho {
            for ox in 0..wo {
                let pos = oy * wo + ox;
                if need_weights {
                    for ic in 0..ci {
                        let pin_c = &padded[ic * ph * pw..];
                        for ky in 0..3 {
                            let src = &pin_c[(oy + ky) * pw + ox..][..3];
                            patch[ic * 9 + ky * 3..ic * 9 + ky * 3 + 3].copy_from_slice(src);
                        }
                    }
                    let s = slots[1].as_mut().expect("checked");
                    for oc in 0..co {
                        let gv = g[oc * ho * wo + pos];
                        let dst = &mut s[oc * patch_len..(oc + 1) * patch_len];
                        for (d, p) in dst.iter_mut().zip(&patch) {
                            *d += gv * p;
                        }
                    }
                }
                if need_input {
                    // v = sum_oc g[oc,pos] * w[oc,:], then scatter v onto the pad.
                    patch.fill(0.0);
                    let kd = parents[1].data();
                    for oc in 0..co {
                        let gv = g[oc * ho * wo + pos];
                        let wrow = &kd[oc * patch_len..(oc + 1) * patch_len];
                        for (p, wv) in patch.iter_mut().zip(wrow) {
                            *p += gv * wv;
                        }
                    }
                    for ic in 0..ci {
                        let dpin_c = &mut dpad[ic * ph * pw..(ic + 1) * ph * pw];
                        for ky in 0..3 {
                            let dst = &mut dpin_c[(oy + ky) * pw + ox..][..3];
                            let src = &patch[ic * 9 + ky * 3..ic * 9 + ky * 3 + 3];
                            for (d, v) in dst.iter_mut().zip(src) {
                                *d += v;
                            }
                        }
                    }
                }
            }
        }
        if need_input {
            let s = slots[0].as_mut().expect("checked");
            for ic in 0..ci {
                for y in 0..h {
                    let src = &dpad[ic * ph * pw + (y + padding) * pw + padding..][..w];
                    let dst = &mut s[ic * h * w + y * w..][..w];
                    for (d, v) in dst.iter_mut().zip(src) {
                        *d += v;
                    }
                }
            }
        }
        return;
    }

    if need_weights {
        let s = slots[1].as_mut().expect("checked");
        for oc in 0..co {
            let g_c = &g[oc * ho * wo..(oc + 1) * ho * wo];
            for ic in 0..ci {
                let pin_c = &padded[ic * ph * pw..(ic + 1) * ph * pw];
                let kbase = (oc * ci + ic) * k * k;
                for ky in 0..k {
                    for kx in 0..k {
                        let mut acc = 0.0;
                        for oy in 0..ho {
                            let grow = &g_c[oy * wo..][..wo];
                            if stride == 1 {
                                let prow = &pin_c[(oy + ky) * pw + kx..][..wo];
                                for (gi, pi) in grow.iter().zip(prow) {
                                    acc += gi * pi;
                                }
                            } else {
                                let row = (oy * stride + ky) * pw + kx;
                                for (ox, gi) in grow.iter().enumerate() {
                                    acc += gi * pin_c[row + ox * stride];
                                }
                            }
                        }
                        s[kbase + ky * k + kx] += acc;
                    }
                }
            }
        }
    }

    if need_input {
        let kd = parents[1].data();
        let mut dpad = vec![0.0; ci * ph * pw];
        for oc in 0..co {
            let g_c = &g[oc * ho * wo..(oc + 1) * ho * wo];
            for ic in 0..ci {
                let dpin_c = &mut dpad[ic * ph * pw..(ic + 1) * ph * pw];
                let kbase = (oc * ci + ic) * k * k;
                for ky in 0..k {
                    for kx in 0..k {
                        let wv = kd[kbase + ky * k + kx];
                        if stride == 1 {
                            for oy in 0..ho {
                                let grow = &g_c[oy * wo..][..wo];
                                let drow = &mut dpin_c[(oy + ky) * pw + kx..][..wo];
                                for (di, gi) in drow.iter_mut().zip(grow) {
                                    *di += wv * gi;
                                }
                            }
                        } else {
                            for oy in 0..ho {
                                let grow = &g_c[oy * wo..][..wo];
                                let row = (oy * stride + ky) * pw + kx;
                                for (ox, gi) in grow.iter().enumerate() {
                                    dpin_c[row + ox * stride] += wv * gi;
                                }
                            }
                        }
                    }
                }
            }
        }
        let s = slots[0].as_mut().expect("checked");
        for ic in 0..ci {
            for y in 0..h {
                let src = &dpad[ic * ph * pw + (y + padding) * pw + padding..][..w];
                let dst = &mut s[ic * h * w + y * w..][..w];
                for (d, v) in dst.iter_mut().zip(src) {
                    *d += v;
                }
            }
        }
    }
}

fn tconv2d_backward(
    g: &[f64],
    parents: &[Tensor],
    slots: &mut [Option<Vec<f64>>],
    stride: usize,
    padding: usize,
) {
    let (ci, h, w) = dims3(&parents[0]);
    let kshape = parents[1].shape();
    let (co, k) = (kshape[1], kshape[2]);
    let fh = (h - 1) * stride + k;
    let fw = (w - 1) * stride + k;
    let ho = fh - 2 * padding;
    let wo = fw - 2 * padding;

    if let Some(s) = slots[2].as_mut() {
        for oc in 0..co {
            s[oc] += g[oc * ho * wo..(oc + 1) * ho * wo].iter().sum::<f64>();
        }
    }

    let need_input = slots[0].is_some();
    let need_weights = slots[1].is_some();
    if !need_input && !need_weights {
        return;
    }
    // Re-embed the output gradient into the uncropped scatter extent.
    let mut gfull = vec![0.0; co * fh * fw];
    for oc in 0..co {
        for y in 0..ho {
            let src = &g[oc * ho * wo + y * wo..][..wo];
            let dst = &mut gfull[oc * fh * fw + (y + padding) * fw + padding..][..wo];
            dst.copy_from_slice(src);
        }
    }

    // Small latent-side maps: gather each input position's receptive field of
    // the output gradient into one contiguous patch, then run long updates.
    let small = k == 3 && stride == 1 && h * w <= 64;
    if small {
        let patch_len = co * 9;
        let mut gpatch = vec![0.0f64; patch_len];
        let x = parents[0].data();
        let kd = parents[1].data();
        for y in 0..h {
            for x_pos in 0..w {
                let pos = y * w + x_pos;
                for oc in 0..co {
                    let g_c = &gfull[oc * fh * fw..];
                    for ky in 0..3 {
                        let src = &g_c[(y + ky) * fw + x_pos..][..3];
                        gpatch[oc * 9 + ky * 3..oc * 9 + ky * 3 + 3].copy_from_slice(src);
                    }
                }
                if let Some(s) = slots[1].as_mut() {
                    // d_w[ic,:] += in[ic,pos] * gpatch
                    for ic in 0..ci {
                        let xv = x[ic * h * w + pos];
                        let dst = &mut s[ic * patch_len..(ic + 1) * patch_len];
                        for (d, gp) in dst.iter_mut().zip(&gpatch) {
                            *d += xv * gp;
                        }
                    }
                }
                if let Some(s) = slots[0].as_mut() {
                    // d_in[ic,pos] += dot(w[ic,:], gpatch)
                    for ic in 0..ci {
                        let wrow = &kd[ic * patch_len..(ic + 1) * patch_len];
                        let mut acc = 0.0;
                        for (wv, gp) in wrow.iter().zip(&gpatch) {
                            acc += wv * gp;
                        }
                        s[ic * h * w + pos] += acc;
                    }
                }
            }
        }
        return;
    }

    if need_weights {
        // d_w[ic,oc,ky,kx] = sum_{y,x} in[ic,y,x] * gfull[oc, y*s+ky, x*s+kx]
        let x = parents[0].data();
        let s = slots[1].as_mut().expect("checked");
        for ic in 0..ci {
            let x_c = &x[ic * h * w..(ic + 1) * h * w];
            for oc in 0..co {
                let g_c = &gfull[oc * fh * fw..(oc + 1) * fh * fw];
                let kbase = (ic * co + oc) * k * k;
                for ky in 0..k {
                    for kx in 0..k {
                        let mut acc = 0.0;
                        for y in 0..h {
                            let xrow = &x_c[y * w..][..w];
                            let row = (y * stride + ky) * fw + kx;
                            if stride == 1 {
                                let grow = &g_c[row..][..w];
                                for (xi, gi) in xrow.iter().zip(grow) {
                                    acc += xi * gi;
                                }
                            } else {
                                for (xi_idx, xi) in xrow.iter().enumerate() {
                                    acc += xi * g_c[row + xi_idx * stride];
                                }
                            }
                        }
                        s[kbase + ky * k + kx] += acc;
                    }
                }
            }
        }
    }

    if need_input {
        // d_in[ic,y,x] = sum_{oc,ky,kx} w[ic,oc,ky,kx] * gfull[oc, y*s+ky, x*s+kx]
        let kd = parents[1].data();
        let s = slots[0].as_mut().expect("checked");
        for ic in 0..ci {
            let s_c = &mut s[ic * h * w..(ic + 1) * h * w];
            for oc in 0..co {
                let g_c = &gfull[oc * fh * fw..(oc + 1) * fh * fw];
                let kbase = (ic * co + oc) * k * k;
                for ky in 0..k {
                    for kx in 0..k {
                        let wv = kd[kbase + ky * k + kx];
                        for y in 0..h {
                            let srow = &mut s_c[y * w..][..w];
                            let row = (y * stride + ky) * fw + kx;
                            if stride == 1 {
                                let grow = &g_c[row..][..w];
                                for (si, gi) in srow.iter_mut().zip(grow) {
                                    *si += wv * gi;
                                }
                            } else {
                                for (xi_idx, si) in srow.iter_mut().enumerate() {
                                    *si += wv * g_c[row + xi_idx * stride];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

fn dims3(t: &Tensor) -> (usize, usize, usize) {
    let s = t.shape();
    (s[0], s[1], s[2])
}

/// Gradient of conv2d with respect to its input, exposed for adjointness
/// checks: returns d/d_input of `<conv2d(input, kernels), cotangent>`.
pub fn conv2d_input_gradient(
    cotangent: &Tensor,
    kernels: &Tensor,
    input_shape: &[usize],
    stride: usize,
    padding: usize,
) -> Vec<f64> {
    let input = Tensor::zeros(input_shape).requires_grad(true);
    let bias = Tensor::zeros(&[kernels.shape()[0]]);
    let out = input
        .conv2d(kernels, &bias, stride, padding)
        .expect("conforming shapes");
    let loss = out.mul(cotangent).sum();
    loss.backward().expect("scalar loss");
    input.grad().expect("input requires grad")
}
