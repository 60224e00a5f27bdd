//! Finite-difference gradient verification.
//!
//! The oracle never touches the backward pass: it re-runs the forward
//! computation at perturbed inputs and forms central differences. Analytic
//! gradients from the tape are compared against those differences through a
//! random linear probe of the op output, which exercises the full Jacobian
//! without materializing it. Checks run in `f64` where central differences
//! with h = 1e-5 are accurate to roughly 1e-10 on O(1) values.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::tensor::{ops, Graph, Tensor};

/// Builds the op under test from freshly created input tensors. Inputs are
/// handed over in the order of the `inputs` slice passed to [`max_rel_err`].
pub type Builder = dyn Fn(&Graph<f64>, &[Tensor<f64>]) -> Result<Tensor<f64>>;

const FD_STEP: f64 = 1e-5;

/// Probe objective: sum(out * r) for a fixed random r. Forward-only.
fn probe_value(builder: &Builder, inputs: &[(Vec<usize>, Vec<f64>)], r: &[f64]) -> Result<f64> {
    let g = Graph::<f64>::inference();
    let tensors: Vec<Tensor<f64>> = inputs
        .iter()
        .map(|(shape, data)| Tensor::new(shape, data.clone()))
        .collect::<Result<_>>()?;
    let out = builder(&g, &tensors)?;
    Ok(out.with_data(|d| d.iter().zip(r).map(|(a, b)| a * b).sum()))
}

/// Maximum relative error between tape gradients and central differences,
/// taken over every element of every input. `seed` fixes the probe weights.
pub fn max_rel_err(
    builder: &Builder,
    inputs: &[(Vec<usize>, Vec<f64>)],
    seed: u64,
) -> Result<f64> {
    // Analytic pass: leaves with requires_grad, probe loss, backward.
    let g = Graph::<f64>::recording();
    let tensors: Vec<Tensor<f64>> = inputs
        .iter()
        .map(|(shape, data)| Tensor::leaf(shape, data.clone()))
        .collect::<Result<_>>()?;
    let out = builder(&g, &tensors)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r: Vec<f64> = (0..out.numel()).map(|_| rng.random_range(-1.0..1.0)).collect();
    let r_t = Tensor::new(&out.shape(), r.clone())?;
    let probed = ops::mul(&g, &out, &r_t)?;
    let loss = ops::sum_all(&g, &probed)?;
    g.backward(&loss)?;
    let analytic: Vec<Vec<f64>> = tensors
        .iter()
        .map(|t| t.grad().unwrap_or_else(|| vec![0.0; t.numel()]))
        .collect();

    // Numeric pass: central differences on a mutable copy of the inputs.
    let mut worst = 0.0f64;
    let mut work: Vec<(Vec<usize>, Vec<f64>)> = inputs.to_vec();
    for ti in 0..work.len() {
        for ei in 0..work[ti].1.len() {
            let orig = work[ti].1[ei];
            work[ti].1[ei] = orig + FD_STEP;
            let plus = probe_value(builder, &work, &r)?;
            work[ti].1[ei] = orig - FD_STEP;
            let minus = probe_value(builder, &work, &r)?;
            work[ti].1[ei] = orig;
            let fd = (plus - minus) / (2.0 * FD_STEP);
            let an = analytic[ti][ei];
            let denom = an.abs().max(fd.abs()).max(1e-2);
            worst = worst.max((an - fd).abs() / denom);
        }
    }
    Ok(worst)
}

/// Uniform random data in (-1, 1) scaled by `scale`, deterministic per seed.
pub fn random_data(shape: &[usize], scale: f64, rng: &mut ChaCha8Rng) -> (Vec<usize>, Vec<f64>) {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-1.0..1.0) * scale).collect();
    (shape.to_vec(), data)
}

/// Like [`random_data`] but bounded away from zero, for kinked ops (relu,
/// min, max) and positive-domain ops (ln) where finite differences straddle
/// a non-smooth point.
pub fn random_data_off_kink(
    shape: &[usize],
    scale: f64,
    min_abs: f64,
    rng: &mut ChaCha8Rng,
) -> (Vec<usize>, Vec<f64>) {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let sign = if rng.random_range(0.0..1.0) < 0.5 { -1.0 } else { 1.0 };
            sign * rng.random_range(min_abs..scale)
        })
        .collect();
    (shape.to_vec(), data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_gradcheck_smoke() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let a = random_data(&[3, 4], 1.0, &mut rng);
        let b = random_data(&[4, 2], 1.0, &mut rng);
        let err = max_rel_err(
            &|g, t| ops::matmul(g, &t[0], &t[1]),
            &[a, b],
            1,
        )
        .unwrap();
        assert!(err < 1e-4, "max rel err {err}");
    }

    #[test]
    fn layer_norm_gradcheck_smoke() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = random_data(&[2, 6], 1.0, &mut rng);
        let gain = random_data(&[6], 1.0, &mut rng);
        let bias = random_data(&[6], 1.0, &mut rng);
        let err = max_rel_err(
            &|g, t| ops::layer_norm(g, &t[0], &t[1], &t[2], 1e-5),
            &[x, gain, bias],
            2,
        )
        .unwrap();
        assert!(err < 1e-4, "max rel err {err}");
    }
}
