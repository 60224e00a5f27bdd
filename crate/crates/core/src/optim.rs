//! AdamW with decoupled weight decay and per-group learning rates.
//!
//! The optimizer owns an explicit list of parameter groups. Stepping
//! requires a gradient on every non-frozen listed path (a missing gradient
//! is a contract violation); frozen paths are left bitwise untouched even if
//! a gradient is present. Gradients of all listed paths are cleared after
//! the update.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::store::ParameterStore;
use crate::tensor::Scalar;

#[derive(Clone, Debug)]
pub struct ParamGroup {
    pub paths: Vec<String>,
    pub lr: f64,
}

#[derive(Clone, Copy, Debug)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.0 }
    }
}

pub struct AdamW<F: Scalar> {
    cfg: AdamWConfig,
    groups: Vec<ParamGroup>,
    step_count: u64,
    m: BTreeMap<String, Vec<F>>,
    v: BTreeMap<String, Vec<F>>,
}

impl<F: Scalar> AdamW<F> {
    pub fn new(cfg: AdamWConfig, groups: Vec<ParamGroup>) -> Self {
        AdamW { cfg, groups, step_count: 0, m: BTreeMap::new(), v: BTreeMap::new() }
    }

    /// Single group over every currently trainable path of the store.
    pub fn for_trainable(cfg: AdamWConfig, store: &ParameterStore<F>, lr: f64) -> Self {
        Self::new(cfg, vec![ParamGroup { paths: store.trainable_paths(), lr }])
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    /// One optimizer step. Update order is the listed group/path order, so
    /// repeated runs are bitwise deterministic.
    pub fn step(&mut self, store: &ParameterStore<F>) -> Result<()> {
        self.step_count += 1;
        let t = self.step_count as i32;
        let b1 = F::of_f64(self.cfg.beta1);
        let b2 = F::of_f64(self.cfg.beta2);
        let eps = F::of_f64(self.cfg.eps);
        let bias1 = F::one() - b1.powi(t);
        let bias2 = F::one() - b2.powi(t);
        for group in &self.groups {
            let lr = F::of_f64(group.lr);
            let wd = F::of_f64(self.cfg.weight_decay);
            for path in &group.paths {
                let tensor = store.get(path)?;
                if store.is_frozen(path) {
                    // Zero gradient application; parameter stays bitwise intact.
                    tensor.zero_grad();
                    continue;
                }
                let grad = tensor.grad().ok_or_else(|| {
                    Error::Contract(format!("missing gradient for non-frozen parameter {path}"))
                })?;
                let n = tensor.numel();
                if grad.len() != n {
                    return Err(Error::shape(
                        "adamw_step",
                        format!("parameter {path} has {n} values, gradient has {}", grad.len()),
                    ));
                }
                let m = self.m.entry(path.clone()).or_insert_with(|| vec![F::zero(); n]);
                let v = self.v.entry(path.clone()).or_insert_with(|| vec![F::zero(); n]);
                debug_assert_eq!(m.len(), n);
                let mut data = tensor.data();
                for i in 0..n {
                    let g = grad[i];
                    m[i] = b1 * m[i] + (F::one() - b1) * g;
                    v[i] = b2 * v[i] + (F::one() - b2) * g * g;
                    let m_hat = m[i] / bias1;
                    let v_hat = v[i] / bias2;
                    // Decoupled weight decay, then the Adam update.
                    data[i] = data[i] - lr * wd * data[i] - lr * m_hat / (v_hat.sqrt() + eps);
                }
                tensor.set_data(data)?;
                tensor.zero_grad();
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn store_with(path: &str, data: Vec<f64>) -> ParameterStore<f64> {
        let mut s = ParameterStore::new();
        s.insert(path, Tensor::leaf(&[data.len()], data).unwrap()).unwrap();
        s
    }

    #[test]
    fn first_step_matches_hand_recurrence() {
        // g=1, lr=0.1, betas (0.9, 0.999), eps 1e-8, wd 0, w=0:
        // m_hat=1, v_hat=1, w -> -0.1 * 1/(1+1e-8).
        let s = store_with("w", vec![0.0]);
        s.get("w").unwrap().accumulate_grad(&[1.0]);
        let mut opt = AdamW::new(
            AdamWConfig { weight_decay: 0.0, ..Default::default() },
            vec![ParamGroup { paths: vec!["w".into()], lr: 0.1 }],
        );
        opt.step(&s).unwrap();
        let w = s.get("w").unwrap().data()[0];
        assert!((w - (-0.1 / (1.0 + 1e-8))).abs() < 1e-12, "w = {w}");
        assert_eq!(opt.step_count(), 1);
        assert!(s.get("w").unwrap().grad().is_none(), "gradient must be cleared");
    }

    #[test]
    fn decoupled_weight_decay_shrinks_weights_without_gradients_entering_moments() {
        // With g = 0 the Adam term is 0, so the update is pure decay.
        let s = store_with("w", vec![2.0]);
        s.get("w").unwrap().accumulate_grad(&[0.0]);
        let mut opt = AdamW::new(
            AdamWConfig { weight_decay: 0.5, ..Default::default() },
            vec![ParamGroup { paths: vec!["w".into()], lr: 0.1 }],
        );
        opt.step(&s).unwrap();
        let w = s.get("w").unwrap().data()[0];
        assert!((w - (2.0 - 0.1 * 0.5 * 2.0)).abs() < 1e-12, "w = {w}");
    }

    #[test]
    fn frozen_parameter_with_gradient_stays_bitwise_unchanged() {
        let mut s = store_with("w", vec![1.5]);
        let before = s.get("w").unwrap().bits();
        s.get("w").unwrap().accumulate_grad(&[123.0]);
        s.freeze("w").unwrap();
        // Freezing clears grads; re-inject one to prove the step ignores it.
        s.get("w").unwrap().set_requires_grad(true);
        s.get("w").unwrap().accumulate_grad(&[123.0]);
        let mut opt = AdamW::new(
            AdamWConfig::default(),
            vec![ParamGroup { paths: vec!["w".into()], lr: 0.1 }],
        );
        opt.step(&s).unwrap();
        assert_eq!(s.get("w").unwrap().bits(), before);
    }

    #[test]
    fn missing_gradient_on_non_frozen_path_is_contract_error() {
        let s = store_with("w", vec![0.0]);
        let mut opt = AdamW::new(
            AdamWConfig::default(),
            vec![ParamGroup { paths: vec!["w".into()], lr: 0.1 }],
        );
        assert!(matches!(opt.step(&s), Err(Error::Contract(_))));
    }

    #[test]
    fn step_counter_increases_by_one_per_step() {
        let s = store_with("w", vec![0.0]);
        let mut opt = AdamW::new(
            AdamWConfig::default(),
            vec![ParamGroup { paths: vec!["w".into()], lr: 0.1 }],
        );
        for expected in 1..=5 {
            s.get("w").unwrap().accumulate_grad(&[1.0]);
            opt.step(&s).unwrap();
            assert_eq!(opt.step_count(), expected);
        }
    }

    #[test]
    fn two_groups_use_their_own_learning_rates() {
        let mut s = ParameterStore::<f64>::new();
        s.insert("a", Tensor::leaf(&[1], vec![0.0]).unwrap()).unwrap();
        s.insert("b", Tensor::leaf(&[1], vec![0.0]).unwrap()).unwrap();
        s.get("a").unwrap().accumulate_grad(&[1.0]);
        s.get("b").unwrap().accumulate_grad(&[1.0]);
        let mut opt = AdamW::new(
            AdamWConfig::default(),
            vec![
                ParamGroup { paths: vec!["a".into()], lr: 0.1 },
                ParamGroup { paths: vec!["b".into()], lr: 0.01 },
            ],
        );
        opt.step(&s).unwrap();
        let a = s.get("a").unwrap().data()[0];
        let b = s.get("b").unwrap().data()[0];
        assert!((a / b - 10.0).abs() < 1e-9, "lr ratio should carry through: {a} vs {b}");
    }
}
