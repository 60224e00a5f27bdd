//! Miniature two-stage query-based detector components.
//!
//! A small patch backbone turns the image into a grid of tokens, an encoder
//! refines them, per-token stage-one heads score and localize coarse
//! proposals anchored at their grid cells, the top-K tokens by
//! classification confidence become decoder queries, and the decoder
//! refines each selected anchor in logit space: the stage-two box is
//! `sigmoid(anchor_logit + delta)`.
//!
//! Residual branches (attention output and MLP second projections, box-head
//! second projections) start at zero, so a freshly initialized model is an
//! identity transformer whose stage-one boxes equal the grid prior exactly.

use crate::boxes::BoxCwh;
use crate::lora::{apply_linear, LoraSpec};
use crate::scene::Image;
use crate::store::ParameterStore;
use crate::tensor::{ops, Graph, Scalar, Tensor};
use crate::{Error, Result};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub const LN_EPS: f64 = 1e-5;

/// Classification head bias prior: sigmoid(bias) = 0.01, the usual focal
/// initialization keeping early negatives cheap.
pub const CLASS_PRIOR_LOGIT: f64 = -4.59511985013459;

/// Width and height prior of stage-one anchors as a fraction of the image.
pub const ANCHOR_WH: f64 = 0.2;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DetectorConfig {
    /// Token width.
    pub d: usize,
    pub heads: usize,
    pub enc_layers: usize,
    pub dec_layers: usize,
    /// Queries selected for the second stage.
    pub k: usize,
    pub image_size: usize,
    /// Total backbone downsampling; two halvings, so it must be even.
    pub stride: usize,
    pub mlp_hidden: usize,
    /// Base classification head width.
    pub num_classes: usize,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        DetectorConfig::desk()
    }
}

impl DetectorConfig {
    pub fn desk() -> Self {
        DetectorConfig {
            d: 64,
            heads: 4,
            enc_layers: 2,
            dec_layers: 2,
            k: 16,
            image_size: 64,
            stride: 8,
            mlp_hidden: 128,
            num_classes: 8,
        }
    }

    /// Tokens per side of the final grid.
    pub fn grid(&self) -> usize {
        self.image_size / self.stride
    }

    pub fn num_tokens(&self) -> usize {
        self.grid() * self.grid()
    }

    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.d % self.heads != 0 {
            return Err(Error::Config(format!(
                "heads {} must divide token width {}",
                self.heads, self.d
            )));
        }
        if self.d % 2 != 0 || self.d < 4 {
            return Err(Error::Config(format!("token width {} must be even and >= 4", self.d)));
        }
        if self.stride < 4 || self.stride % 2 != 0 || self.image_size % self.stride != 0 {
            return Err(Error::Config(format!(
                "stride {} must be even, >= 4, and divide image size {}",
                self.stride, self.image_size
            )));
        }
        if self.k == 0 || self.k > self.num_tokens() {
            return Err(Error::Config(format!(
                "k {} must lie in [1, {}]",
                self.k,
                self.num_tokens()
            )));
        }
        if self.enc_layers == 0 || self.dec_layers == 0 {
            return Err(Error::Config("layer counts must be positive".into()));
        }
        if self.mlp_hidden == 0 || self.num_classes == 0 {
            return Err(Error::Config("mlp_hidden and num_classes must be positive".into()));
        }
        Ok(())
    }
}

fn init_ln<F: Scalar>(store: &mut ParameterStore<F>, prefix: &str, d: usize) -> Result<()> {
    store.add_full(format!("{prefix}.g"), &[d], 1.0)?;
    store.add_zeros(format!("{prefix}.b"), &[d])
}

fn init_attn<F: Scalar>(
    store: &mut ParameterStore<F>,
    prefix: &str,
    d: usize,
    rng: &mut ChaCha8Rng,
) -> Result<()> {
    store.add_linear_weight(format!("{prefix}.wq"), d, d, rng)?;
    store.add_linear_weight(format!("{prefix}.wk"), d, d, rng)?;
    store.add_linear_weight(format!("{prefix}.wv"), d, d, rng)?;
    // Zero output projection keeps the residual branch silent at init.
    store.add_zeros(format!("{prefix}.wo"), &[d, d])?;
    for b in ["bq", "bk", "bv", "bo"] {
        store.add_zeros(format!("{prefix}.{b}"), &[d])?;
    }
    Ok(())
}

fn init_mlp<F: Scalar>(
    store: &mut ParameterStore<F>,
    prefix: &str,
    d: usize,
    hidden: usize,
    rng: &mut ChaCha8Rng,
) -> Result<()> {
    store.add_linear_weight(format!("{prefix}.w1"), d, hidden, rng)?;
    store.add_zeros(format!("{prefix}.b1"), &[hidden])?;
    store.add_zeros(format!("{prefix}.w2"), &[hidden, d])?;
    store.add_zeros(format!("{prefix}.b2"), &[d])
}

fn init_box_head<F: Scalar>(
    store: &mut ParameterStore<F>,
    prefix: &str,
    d: usize,
    rng: &mut ChaCha8Rng,
) -> Result<()> {
    store.add_linear_weight(format!("{prefix}.w1"), d, d, rng)?;
    store.add_zeros(format!("{prefix}.b1"), &[d])?;
    // Zero second layer: initial box logits reduce to the grid prior.
    store.add_zeros(format!("{prefix}.w2"), &[d, 4])?;
    store.add_zeros(format!("{prefix}.b2"), &[4])
}

pub(crate) fn init_class_head<F: Scalar>(
    store: &mut ParameterStore<F>,
    prefix: &str,
    d: usize,
    classes: usize,
    rng: &mut ChaCha8Rng,
) -> Result<()> {
    store.add_linear_weight(format!("{prefix}.w"), d, classes, rng)?;
    store.add_full(format!("{prefix}.b"), &[classes], CLASS_PRIOR_LOGIT)
}

/// Creates every parameter of the single-path detector: backbone, encoder,
/// decoder, box heads g1/g2, and classification heads f1/f2.
pub fn init_params<F: Scalar>(
    store: &mut ParameterStore<F>,
    cfg: &DetectorConfig,
    seed: u64,
) -> Result<()> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = cfg.d;
    let h1 = d / 2;
    let p1 = cfg.stride / 2;
    store.add_linear_weight("backbone.b1.w", 3 * p1 * p1, h1, &mut rng)?;
    store.add_zeros("backbone.b1.b", &[h1])?;
    store.add_linear_weight("backbone.b2.w", 4 * h1, d, &mut rng)?;
    store.add_zeros("backbone.b2.b", &[d])?;
    store.add_linear_weight("backbone.pos", cfg.num_tokens(), d, &mut rng)?;
    for i in 0..cfg.enc_layers {
        init_ln(store, &format!("enc.{i}.ln1"), d)?;
        init_attn(store, &format!("enc.{i}.attn"), d, &mut rng)?;
        init_ln(store, &format!("enc.{i}.ln2"), d)?;
        init_mlp(store, &format!("enc.{i}.mlp"), d, cfg.mlp_hidden, &mut rng)?;
    }
    init_ln(store, "enc.final", d)?;
    for i in 0..cfg.dec_layers {
        init_ln(store, &format!("dec.{i}.ln1"), d)?;
        init_attn(store, &format!("dec.{i}.self"), d, &mut rng)?;
        init_ln(store, &format!("dec.{i}.ln2"), d)?;
        init_attn(store, &format!("dec.{i}.cross"), d, &mut rng)?;
        init_ln(store, &format!("dec.{i}.ln3"), d)?;
        init_mlp(store, &format!("dec.{i}.mlp"), d, cfg.mlp_hidden, &mut rng)?;
    }
    init_ln(store, "dec.final", d)?;
    init_box_head(store, "g1", d, &mut rng)?;
    init_box_head(store, "g2", d, &mut rng)?;
    init_class_head(store, "f1", d, cfg.num_classes, &mut rng)?;
    init_class_head(store, "f2", d, cfg.num_classes, &mut rng)?;
    Ok(())
}

/// Anchor logits per token: cell-center positions and the fixed size prior,
/// all in sigmoid space.
pub fn grid_prior(cfg: &DetectorConfig) -> Vec<f64> {
    let grid = cfg.grid();
    let logit = |p: f64| (p / (1.0 - p)).ln();
    let wh = logit(ANCHOR_WH);
    let mut out = Vec::with_capacity(cfg.num_tokens() * 4);
    for gy in 0..grid {
        for gx in 0..grid {
            out.push(logit((gx as f64 + 0.5) / grid as f64));
            out.push(logit((gy as f64 + 0.5) / grid as f64));
            out.push(wh);
            out.push(wh);
        }
    }
    out
}

pub fn grid_prior_tensor<F: Scalar>(cfg: &DetectorConfig) -> Result<Tensor<F>> {
    Tensor::from_f64(&[cfg.num_tokens(), 4], &grid_prior(cfg))
}

/// Flattens the image into first-stage patch rows: one row per patch of
/// side `stride / 2`, interleaved RGB in row-major pixel order.
pub fn image_tokens<F: Scalar>(cfg: &DetectorConfig, img: &Image) -> Result<Tensor<F>> {
    if img.size != cfg.image_size {
        return Err(Error::Contract(format!(
            "image size {} does not match configured {}",
            img.size, cfg.image_size
        )));
    }
    let p1 = cfg.stride / 2;
    let g1 = cfg.image_size / p1;
    let mut data = Vec::with_capacity(g1 * g1 * 3 * p1 * p1);
    for cy in 0..g1 {
        for cx in 0..g1 {
            for py in 0..p1 {
                for px in 0..p1 {
                    let p = img.pixel(cx * p1 + px, cy * p1 + py);
                    data.push(F::of_f64(p[0] as f64));
                    data.push(F::of_f64(p[1] as f64));
                    data.push(F::of_f64(p[2] as f64));
                }
            }
        }
    }
    Tensor::new(&[g1 * g1, 3 * p1 * p1], data)
}

/// Two patchify-project-relu blocks followed by the learned position
/// embedding; produces the [tokens x d] grid the encoder consumes.
pub fn backbone_forward<F: Scalar>(
    g: &Graph<F>,
    store: &ParameterStore<F>,
    cfg: &DetectorConfig,
    img: &Image,
) -> Result<Tensor<F>> {
    let x0 = image_tokens(cfg, img)?;
    let w1 = store.get("backbone.b1.w")?;
    let b1 = store.get("backbone.b1.b")?;
    let t1 = ops::relu(g, &ops::affine(g, &x0, &w1, &b1)?)?;
    // Gather each 2x2 neighborhood of the fine grid into one coarse token.
    let grid = cfg.grid();
    let fine = grid * 2;
    let mut idx = [const { Vec::new() }; 4];
    for gy in 0..grid {
        for gx in 0..grid {
            idx[0].push((2 * gy) * fine + 2 * gx);
            idx[1].push((2 * gy) * fine + 2 * gx + 1);
            idx[2].push((2 * gy + 1) * fine + 2 * gx);
            idx[3].push((2 * gy + 1) * fine + 2 * gx + 1);
        }
    }
    let parts = [
        ops::select_rows(g, &t1, &idx[0])?,
        ops::select_rows(g, &t1, &idx[1])?,
        ops::select_rows(g, &t1, &idx[2])?,
        ops::select_rows(g, &t1, &idx[3])?,
    ];
    let gathered = ops::concat_cols(g, &[&parts[0], &parts[1], &parts[2], &parts[3]])?;
    let w2 = store.get("backbone.b2.w")?;
    let b2 = store.get("backbone.b2.b")?;
    let t2 = ops::relu(g, &ops::affine(g, &gathered, &w2, &b2)?)?;
    let pos = store.get("backbone.pos")?;
    ops::add(g, &t2, &pos)
}

fn ln<F: Scalar>(
    g: &Graph<F>,
    store: &ParameterStore<F>,
    prefix: &str,
    x: &Tensor<F>,
) -> Result<Tensor<F>> {
    let gain = store.get(&format!("{prefix}.g"))?;
    let bias = store.get(&format!("{prefix}.b"))?;
    ops::layer_norm(g, x, &gain, &bias, LN_EPS)
}

/// Pre-LN attention block. With `memory` absent this is self-attention;
/// with it, queries come from the normalized input and keys/values from the
/// memory.
fn attn_block<F: Scalar>(
    g: &Graph<F>,
    store: &ParameterStore<F>,
    cfg: &DetectorConfig,
    x: &Tensor<F>,
    memory: Option<&Tensor<F>>,
    ln_prefix: &str,
    attn_prefix: &str,
    lora: Option<&LoraSpec>,
) -> Result<Tensor<F>> {
    let h = ln(g, store, ln_prefix, x)?;
    let kv = memory.unwrap_or(&h);
    let q = apply_linear(
        g,
        store,
        &format!("{attn_prefix}.wq"),
        &format!("{attn_prefix}.bq"),
        &h,
        lora,
    )?;
    let k = apply_linear(
        g,
        store,
        &format!("{attn_prefix}.wk"),
        &format!("{attn_prefix}.bk"),
        kv,
        lora,
    )?;
    let v = apply_linear(
        g,
        store,
        &format!("{attn_prefix}.wv"),
        &format!("{attn_prefix}.bv"),
        kv,
        lora,
    )?;
    let a = ops::attention_core(g, &q, &k, &v, cfg.heads)?;
    let o = apply_linear(
        g,
        store,
        &format!("{attn_prefix}.wo"),
        &format!("{attn_prefix}.bo"),
        &a,
        lora,
    )?;
    ops::add(g, x, &o)
}

fn mlp_block<F: Scalar>(
    g: &Graph<F>,
    store: &ParameterStore<F>,
    x: &Tensor<F>,
    ln_prefix: &str,
    mlp_prefix: &str,
    lora: Option<&LoraSpec>,
) -> Result<Tensor<F>> {
    let h = ln(g, store, ln_prefix, x)?;
    let m = ops::relu(
        g,
        &apply_linear(
            g,
            store,
            &format!("{mlp_prefix}.w1"),
            &format!("{mlp_prefix}.b1"),
            &h,
            lora,
        )?,
    )?;
    let o = apply_linear(
        g,
        store,
        &format!("{mlp_prefix}.w2"),
        &format!("{mlp_prefix}.b2"),
        &m,
        lora,
    )?;
    ops::add(g, x, &o)
}

/// Encoder stack plus the final normalization.
pub fn encoder_forward<F: Scalar>(
    g: &Graph<F>,
    store: &ParameterStore<F>,
    cfg: &DetectorConfig,
    tokens: &Tensor<F>,
    lora: Option<&LoraSpec>,
) -> Result<Tensor<F>> {
    let mut x = tokens.clone();
    for i in 0..cfg.enc_layers {
        x = attn_block(
            g,
            store,
            cfg,
            &x,
            None,
            &format!("enc.{i}.ln1"),
            &format!("enc.{i}.attn"),
            lora,
        )?;
        x = mlp_block(g, store, &x, &format!("enc.{i}.ln2"), &format!("enc.{i}.mlp"), lora)?;
    }
    ln(g, store, "enc.final", &x)
}

/// Decoder stack over selected queries attending to encoder memory.
pub fn decoder_forward<F: Scalar>(
    g: &Graph<F>,
    store: &ParameterStore<F>,
    cfg: &DetectorConfig,
    queries: &Tensor<F>,
    memory: &Tensor<F>,
    lora: Option<&LoraSpec>,
) -> Result<Tensor<F>> {
    let mut x = queries.clone();
    for i in 0..cfg.dec_layers {
        x = attn_block(
            g,
            store,
            cfg,
            &x,
            None,
            &format!("dec.{i}.ln1"),
            &format!("dec.{i}.self"),
            lora,
        )?;
        x = attn_block(
            g,
            store,
            cfg,
            &x,
            Some(memory),
            &format!("dec.{i}.ln2"),
            &format!("dec.{i}.cross"),
            lora,
        )?;
        x = mlp_block(g, store, &x, &format!("dec.{i}.ln3"), &format!("dec.{i}.mlp"), lora)?;
    }
    ln(g, store, "dec.final", &x)
}

/// Two-layer box head producing 4 logits per row.
pub fn box_head<F: Scalar>(
    g: &Graph<F>,
    store: &ParameterStore<F>,
    prefix: &str,
    x: &Tensor<F>,
) -> Result<Tensor<F>> {
    let h = ops::relu(
        g,
        &apply_linear(g, store, &format!("{prefix}.w1"), &format!("{prefix}.b1"), x, None)?,
    )?;
    apply_linear(g, store, &format!("{prefix}.w2"), &format!("{prefix}.b2"), &h, None)
}

/// Linear classification head; heads never carry adapters.
pub fn class_head<F: Scalar>(
    g: &Graph<F>,
    store: &ParameterStore<F>,
    prefix: &str,
    x: &Tensor<F>,
) -> Result<Tensor<F>> {
    apply_linear(g, store, &format!("{prefix}.w"), &format!("{prefix}.b"), x, None)
}

/// Rows of the score matrix ranked by their maximum class logit, descending,
/// ties broken toward the lower row index; the first `k` are returned in
/// rank order. Pure index computation, never recorded on the tape.
pub fn select_topk<F: Scalar>(scores: &Tensor<F>, k: usize) -> Result<Vec<usize>> {
    let shape = scores.shape();
    if shape.len() != 2 {
        return Err(Error::shape(
            "select_topk",
            format!("scores shape {shape:?}, expected a matrix"),
        ));
    }
    let (n, c) = (shape[0], shape[1]);
    if k > n {
        return Err(Error::Contract(format!("select_topk: k {k} exceeds {n} rows")));
    }
    let row_max: Vec<f64> = scores.with_data(|d| {
        (0..n)
            .map(|i| {
                d[i * c..(i + 1) * c]
                    .iter()
                    .map(|v| v.as_f64())
                    .fold(f64::NEG_INFINITY, f64::max)
            })
            .collect()
    });
    let mut idx: Vec<usize> = (0..n).collect();
    idx.sort_by(|&a, &b| {
        row_max[b]
            .partial_cmp(&row_max[a])
            .unwrap_or(core::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    idx.truncate(k);
    Ok(idx)
}

/// Sigmoid-space decoding of an [n x 4] logit tensor into center-form boxes.
pub fn boxes_from_logits<F: Scalar>(logits: &Tensor<F>) -> Result<Vec<BoxCwh>> {
    let shape = logits.shape();
    if shape.len() != 2 || shape[1] != 4 {
        return Err(Error::shape(
            "boxes_from_logits",
            format!("shape {shape:?}, expected [n, 4]"),
        ));
    }
    let sig = |v: f64| {
        if v >= 0.0 {
            1.0 / (1.0 + (-v).exp())
        } else {
            let e = v.exp();
            e / (1.0 + e)
        }
    };
    Ok(logits.with_data(|d| {
        (0..shape[0])
            .map(|i| {
                BoxCwh::new(
                    sig(d[i * 4].as_f64()),
                    sig(d[i * 4 + 1].as_f64()),
                    sig(d[i * 4 + 2].as_f64()),
                    sig(d[i * 4 + 3].as_f64()),
                )
            })
            .collect()
    }))
}

/// Re-randomizes the zero-initialized residual weights; tests use this to
/// exercise a model whose blocks actually transform their input.
#[cfg(test)]
pub(crate) fn randomize_residual_weights<F: Scalar>(
    store: &ParameterStore<F>,
    seed: u64,
) -> Result<()> {
    use rand::Rng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for path in store.paths() {
        let zeroed = path.ends_with(".wo") || path.ends_with(".mlp.w2") || path.ends_with("1.w2")
            || path.ends_with("2.w2");
        if !zeroed {
            continue;
        }
        let t = store.get(&path)?;
        let shape = t.shape();
        let bound = 1.0 / (shape[0] as f64).sqrt();
        let data: Vec<F> = (0..t.numel())
            .map(|_| F::of_f64(rng.random_range(-bound..bound)))
            .collect();
        t.set_data(data)?;
    }
    Ok(())
}
