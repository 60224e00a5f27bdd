//! Low-rank adaptation of stored linear weights.
//!
//! An adapter on a weight `W` of shape [din, dout] adds two trainable
//! factors `A` [din, r] and `B` [r, dout] under `lora.<target>.A` and
//! `lora.<target>.B`. The adapted product is `x W + scale * (x A) B`.
//! `B` starts at zero, so freshly attached adapters leave the forward
//! pass numerically identical to the frozen base.

use crate::store::ParameterStore;
use crate::tensor::{ops, Graph, Scalar, Tensor};
use crate::{Error, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeSet;

#[derive(Debug, Clone)]
pub struct LoraSpec {
    pub rank: usize,
    pub scale: f64,
    pub targets: BTreeSet<String>,
}

impl LoraSpec {
    pub fn adapts(&self, weight_path: &str) -> bool {
        self.rank > 0 && self.targets.contains(weight_path)
    }
}

/// Every attention projection and MLP weight of every encoder and decoder
/// layer, the standard adaptation surface for this architecture.
pub fn default_targets(enc_layers: usize, dec_layers: usize) -> Vec<String> {
    targets_for(enc_layers, dec_layers, true, true)
}

/// Adaptation surface restricted to attention and/or MLP projections.
pub fn targets_for(enc_layers: usize, dec_layers: usize, attn: bool, mlp: bool) -> Vec<String> {
    let mut out = Vec::new();
    for i in 0..enc_layers {
        if attn {
            for w in ["wq", "wk", "wv", "wo"] {
                out.push(format!("enc.{i}.attn.{w}"));
            }
        }
        if mlp {
            for w in ["w1", "w2"] {
                out.push(format!("enc.{i}.mlp.{w}"));
            }
        }
    }
    for i in 0..dec_layers {
        if attn {
            for block in ["self", "cross"] {
                for w in ["wq", "wk", "wv", "wo"] {
                    out.push(format!("dec.{i}.{block}.{w}"));
                }
            }
        }
        if mlp {
            for w in ["w1", "w2"] {
                out.push(format!("dec.{i}.mlp.{w}"));
            }
        }
    }
    out
}

/// Creates adapter parameters for `targets` on `store`. `A` is uniform in
/// +-1/sqrt(r) and `B` is zero. Rank 0 is the no-adaptation ablation: the
/// spec is returned with no parameters created.
pub fn attach<F: Scalar>(
    store: &mut ParameterStore<F>,
    targets: &[String],
    rank: usize,
    scale: f64,
    seed: u64,
) -> Result<LoraSpec> {
    if rank == 0 {
        return Ok(LoraSpec {
            rank,
            scale,
            targets: BTreeSet::new(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let bound = 1.0 / (rank as f64).sqrt();
    for target in targets {
        let base = store.get(target)?;
        let shape = base.shape();
        if shape.len() != 2 {
            return Err(Error::Contract(format!(
                "lora target {target} has shape {shape:?}, expected a matrix"
            )));
        }
        let a_path = format!("lora.{target}.A");
        let b_path = format!("lora.{target}.B");
        if store.contains(&a_path) || store.contains(&b_path) {
            return Err(Error::Contract(format!(
                "lora adapter already attached at {target}"
            )));
        }
        let a_data: Vec<F> = (0..shape[0] * rank)
            .map(|_| F::of_f64(rng.random_range(-bound..bound)))
            .collect();
        store.insert(&a_path, Tensor::leaf(&[shape[0], rank], a_data)?)?;
        store.add_zeros(&b_path, &[rank, shape[1]])?;
    }
    Ok(LoraSpec {
        rank,
        scale,
        targets: targets.iter().cloned().collect(),
    })
}

/// Linear layer with an optional adapter: `x W + b (+ scale (x A) B)`.
pub fn apply_linear<F: Scalar>(
    g: &Graph<F>,
    store: &ParameterStore<F>,
    weight_path: &str,
    bias_path: &str,
    x: &Tensor<F>,
    lora: Option<&LoraSpec>,
) -> Result<Tensor<F>> {
    let w = store.get(weight_path)?;
    let b = store.get(bias_path)?;
    let y = ops::affine(g, x, &w, &b)?;
    match lora {
        Some(spec) if spec.adapts(weight_path) => {
            let a = store.get(&format!("lora.{weight_path}.A"))?;
            let bb = store.get(&format!("lora.{weight_path}.B"))?;
            let xa = ops::matmul(g, x, &a)?;
            let xab = ops::matmul(g, &xa, &bb)?;
            let scaled = ops::mul_scalar(g, &xab, spec.scale)?;
            ops::add(g, &y, &scaled)
        }
        _ => Ok(y),
    }
}

/// Flips trainability of every adapter parameter belonging to `spec`.
pub fn set_trainable<F: Scalar>(
    store: &mut ParameterStore<F>,
    spec: &LoraSpec,
    trainable: bool,
) -> Result<()> {
    for target in &spec.targets {
        for suffix in ["A", "B"] {
            let path = format!("lora.{target}.{suffix}");
            if trainable {
                store.unfreeze(&path)?;
            } else {
                store.freeze(&path)?;
            }
        }
    }
    Ok(())
}

/// Total adapter parameter count: sum of r * (din + dout) over targets.
pub fn adapter_param_count<F: Scalar>(store: &ParameterStore<F>) -> usize {
    store
        .paths()
        .iter()
        .filter(|p| p.starts_with("lora."))
        .map(|p| store.get(p).map(|t| t.numel()).unwrap_or(0))
        .sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store_with_base() -> ParameterStore<f64> {
        let mut store = ParameterStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        store.add_linear_weight("enc.0.attn.wq", 8, 8, &mut rng).unwrap();
        store.add_zeros("enc.0.attn.bq", &[8]).unwrap();
        store.add_linear_weight("enc.0.mlp.w1", 8, 16, &mut rng).unwrap();
        store.add_zeros("enc.0.mlp.b1", &[16]).unwrap();
        store
    }

    #[test]
    fn fresh_adapters_are_identity() {
        let mut store = store_with_base();
        let targets = vec!["enc.0.attn.wq".to_string(), "enc.0.mlp.w1".to_string()];
        let spec = attach(&mut store, &targets, 4, 4.0, 9).unwrap();
        let g = Graph::<f64>::inference();
        let x = Tensor::from_f64(
            &[3, 8],
            &(0..24).map(|i| (i as f64) * 0.17 - 2.0).collect::<Vec<_>>(),
        )
        .unwrap();
        let plain = apply_linear(&g, &store, "enc.0.attn.wq", "enc.0.attn.bq", &x, None).unwrap();
        let adapted =
            apply_linear(&g, &store, "enc.0.attn.wq", "enc.0.attn.bq", &x, Some(&spec)).unwrap();
        assert_eq!(plain.data(), adapted.data());
    }

    #[test]
    fn adapter_form_matches_merged_weights() {
        let mut store = store_with_base();
        let targets = vec!["enc.0.attn.wq".to_string()];
        let spec = attach(&mut store, &targets, 2, 8.0, 5).unwrap();
        // Give B nonzero values so the adapter actually acts.
        let b = store.get("lora.enc.0.attn.wq.B").unwrap();
        let bd: Vec<f64> = (0..b.numel()).map(|i| 0.03 * (i as f64) - 0.2).collect();
        b.set_data(bd.clone()).unwrap();

        let g = Graph::<f64>::inference();
        let x = Tensor::from_f64(
            &[2, 8],
            &(0..16).map(|i| (i as f64) * 0.21 - 1.5).collect::<Vec<_>>(),
        )
        .unwrap();
        let adapted =
            apply_linear(&g, &store, "enc.0.attn.wq", "enc.0.attn.bq", &x, Some(&spec)).unwrap();

        // Merge scale * A B into the base weight by hand.
        let w = store.get("enc.0.attn.wq").unwrap().data();
        let a = store.get("lora.enc.0.attn.wq.A").unwrap().data();
        let scale = spec.scale;
        let mut merged = w.clone();
        for i in 0..8 {
            for j in 0..8 {
                let mut acc = 0.0;
                for r in 0..2 {
                    acc += a[i * 2 + r] * bd[r * 8 + j];
                }
                merged[i * 8 + j] += scale * acc;
            }
        }
        let mut merged_store = ParameterStore::<f64>::new();
        merged_store
            .insert("w", Tensor::from_f64(&[8, 8], &merged).unwrap())
            .unwrap();
        merged_store.add_zeros("b", &[8]).unwrap();
        let reference = apply_linear(&g, &merged_store, "w", "b", &x, None).unwrap();
        for (a, b) in adapted.data().iter().zip(reference.data()) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn double_attach_is_rejected() {
        let mut store = store_with_base();
        let targets = vec!["enc.0.attn.wq".to_string()];
        attach(&mut store, &targets, 2, 2.0, 1).unwrap();
        assert!(matches!(
            attach(&mut store, &targets, 2, 2.0, 1),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn rank_zero_attaches_nothing() {
        let mut store = store_with_base();
        let targets = vec!["enc.0.attn.wq".to_string()];
        let spec = attach(&mut store, &targets, 0, 4.0, 1).unwrap();
        assert_eq!(adapter_param_count(&store), 0);
        assert!(!spec.adapts("enc.0.attn.wq"));
        assert!(spec.targets.is_empty());
    }

    #[test]
    fn param_count_formula() {
        let mut store = store_with_base();
        let targets = vec!["enc.0.attn.wq".to_string(), "enc.0.mlp.w1".to_string()];
        attach(&mut store, &targets, 4, 4.0, 2).unwrap();
        // wq is [8, 8] and w1 is [8, 16]: 4*(8+8) + 4*(8+16).
        assert_eq!(adapter_param_count(&store), 4 * 16 + 4 * 24);
    }

    #[test]
    fn default_targets_cover_all_layers() {
        let t = default_targets(2, 2);
        assert_eq!(t.len(), 2 * 6 + 2 * 10);
        assert!(t.contains(&"enc.1.mlp.w2".to_string()));
        assert!(t.contains(&"dec.0.cross.wv".to_string()));
        assert!(t.contains(&"dec.1.self.wo".to_string()));
    }

    #[test]
    fn restricted_targets_pick_one_group() {
        let attn = targets_for(2, 2, true, false);
        assert_eq!(attn.len(), 2 * 4 + 2 * 8);
        assert!(attn.iter().all(|t| !t.contains(".mlp.")));
        let mlp = targets_for(2, 2, false, true);
        assert_eq!(mlp.len(), 2 * 2 + 2 * 2);
        assert!(mlp.iter().all(|t| t.contains(".mlp.")));
    }

    #[test]
    fn trainability_toggles() {
        let mut store = store_with_base();
        let targets = vec!["enc.0.attn.wq".to_string()];
        let spec = attach(&mut store, &targets, 2, 2.0, 1).unwrap();
        set_trainable(&mut store, &spec, false).unwrap();
        assert!(store.is_frozen("lora.enc.0.attn.wq.A"));
        set_trainable(&mut store, &spec, true).unwrap();
        assert!(!store.is_frozen("lora.enc.0.attn.wq.B"));
    }
}
