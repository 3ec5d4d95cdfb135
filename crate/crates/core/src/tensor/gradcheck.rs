//! Central-finite-difference verification of analytic gradients.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::Tensor;

/// Compare the analytic gradient of `f` at `point` against central finite
/// differences, over every element of every point tensor. Returns the maximum
/// relative error `|analytic - numeric| / max(|analytic|, |numeric|, 1e-8)`.
///
/// `f` must map the point tensors to a scalar. `epsilon` should lie in
/// `[1e-7, 1e-3]`; 1e-5 is a good default for f64.
pub fn grad_check<F>(f: F, point: &[Tensor], epsilon: f64) -> f64
where
    F: Fn(&[Tensor]) -> Tensor,
{
    grad_check_sampled(f, point, epsilon, usize::MAX, 0)
}

/// [`grad_check`] restricted to at most `max_per_tensor` randomly chosen
/// elements of each point tensor (chosen deterministically from `seed`).
/// Large convolution kernels make exhaustive differencing prohibitively
/// slow; sampling keeps the check honest and fast.
pub fn grad_check_sampled<F>(
    f: F,
    point: &[Tensor],
    epsilon: f64,
    max_per_tensor: usize,
    seed: u64,
) -> f64
where
    F: Fn(&[Tensor]) -> Tensor,
{
    debug_assert!((1e-7..=1e-3).contains(&epsilon), "epsilon {epsilon} out of range");
    for t in point {
        t.set_requires_grad(true);
        t.zero_grad();
    }
    let loss = f(point);
    assert_eq!(loss.numel(), 1, "grad_check requires a scalar-valued function");
    loss.backward().expect("scalar loss");
    let analytic: Vec<Vec<f64>> = point
        .iter()
        .map(|t| t.grad().unwrap_or_else(|| vec![0.0; t.numel()]))
        .collect();

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut max_rel = 0.0f64;
    for (t, grads) in point.iter().zip(&analytic) {
        let n = t.numel();
        let mut indices: Vec<usize> = (0..n).collect();
        if n > max_per_tensor {
            indices.shuffle(&mut rng);
            indices.truncate(max_per_tensor);
        }
        for idx in indices {
            let original = t.data()[idx];
            let eval = |v: f64| -> f64 {
                t.update_data(|d| d[idx] = v);
                let out = f(point).item();
                out
            };
            let plus = eval(original + epsilon);
            let minus = eval(original - epsilon);
            t.update_data(|d| d[idx] = original);
            let numeric = (plus - minus) / (2.0 * epsilon);
            let a = grads[idx];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
            if rel > max_rel {
                max_rel = rel;
            }
        }
        t.zero_grad();
    }
    max_rel
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn randn(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
        let n: usize = shape.iter().product();
        Tensor::new((0..n).map(|_| rng.gen_range(lo..hi)).collect(), shape)
    }

    #[test]
    fn linear_layer_loss_checks_out() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = randn(&mut rng, &[4], -1.0, 1.0);
        let w = randn(&mut rng, &[3, 4], -1.0, 1.0);
        let b = randn(&mut rng, &[3], -1.0, 1.0);
        let err = grad_check(
            |p| p[0].linear(&p[1], &p[2]).unwrap().mul(&p[0].linear(&p[1], &p[2]).unwrap()).sum(),
            &[x, w, b],
            1e-5,
        );
        assert!(err < 1e-6, "max relative error {err}");
    }

    #[test]
    fn conv_relu_sum_checks_out() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = randn(&mut rng, &[2, 5, 5], -1.0, 1.0);
        let w = randn(&mut rng, &[3, 2, 3, 3], -1.0, 1.0);
        let b = randn(&mut rng, &[3], -0.5, 0.5);
        let err = grad_check(
            |p| p[0].conv2d(&p[1], &p[2], 1, 1).unwrap().relu().sum(),
            &[x, w, b],
            1e-5,
        );
        assert!(err < 1e-5, "max relative error {err}");
    }

    #[test]
    fn hard_tanh_away_from_kinks_checks_out() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        // Keep inputs away from the +-1 kinks.
        let vals: Vec<f64> = (0..16)
            .map(|_| {
                let v: f64 = rng.gen_range(-0.8..0.8);
                if v.abs() > 0.05 { v } else { v + 0.1 }
            })
            .collect();
        let x = Tensor::new(vals, &[16]);
        let err = grad_check(|p| p[0].hard_tanh().mul(&p[0].hard_tanh()).sum(), &[x], 1e-5);
        assert!(err < 1e-6, "max relative error {err}");
    }

    #[test]
    fn softmax_cross_entropy_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let logits = randn(&mut rng, &[5], -2.0, 2.0);
        let err = grad_check(|p| p[0].softmax_cross_entropy(2).unwrap(), &[logits], 1e-5);
        assert!(err < 1e-6, "max relative error {err}");
    }

    #[test]
    fn sampled_check_covers_subset() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = randn(&mut rng, &[10, 10], -1.0, 1.0);
        let err = grad_check_sampled(|p| p[0].mul(&p[0]).sum(), &[x], 1e-5, 7, 42);
        assert!(err < 1e-8, "max relative error {err}");
    }
}
