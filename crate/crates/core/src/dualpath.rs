//! Dual-route detection model.
//!
//! After pretraining, the detector splits into two routes over the shared
//! backbone. The localization route is the pretrained encoder, decoder, and
//! box heads, permanently frozen. The classification route runs the same
//! stacks with low-rank adapters plus its own growable class heads
//! (`f1_cls`, `f2_cls`). Query selection follows the classification route's
//! stage-one scores; boxes always come from the frozen route. Stage-two
//! fusion pairs each adapted class score with the frozen refined box.

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::boxes::BoxCwh;
use crate::detector::{
    backbone_forward, box_head, boxes_from_logits, class_head, decoder_forward, encoder_forward,
    grid_prior_tensor, select_topk, DetectorConfig, CLASS_PRIOR_LOGIT,
};
use crate::lora::{self, LoraSpec};
use crate::scene::Image;
use crate::store::ParameterStore;
use crate::tensor::{ops, Graph, Scalar, Tensor};
use crate::{Error, Result};

pub const MODEL_SPEC_FILE: &str = "model.json";
pub const MODEL_FORMAT_VERSION: u32 = 1;

/// Sidecar metadata persisted next to the parameter checkpoint.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub format_version: u32,
    pub detector: DetectorConfig,
    pub lora_rank: usize,
    pub lora_scale: f64,
    /// Weight paths carrying adapters, sorted.
    pub lora_targets: Vec<String>,
    /// Localization decoder also runs through the adapters.
    pub loc_path_uses_lora: bool,
    /// Head column to global class id.
    pub class_slots: Vec<u16>,
    pub num_base_classes: usize,
    pub dual: bool,
}

/// Differentiable outputs of one forward pass. Stage-one tensors are the
/// rows of the selected queries; `boxes*` are the same logits decoded for
/// matching and evaluation.
pub struct ForwardOut<F: Scalar> {
    pub selected: Vec<usize>,
    pub cls1: Tensor<F>,
    pub cls2: Tensor<F>,
    pub box1_logits: Tensor<F>,
    pub box2_logits: Tensor<F>,
    pub boxes1: Vec<BoxCwh>,
    pub boxes2: Vec<BoxCwh>,
    /// Encoder features of the selected queries (classification route).
    pub enc_sel: Tensor<F>,
    /// Decoder output features (classification route).
    pub dec_out: Tensor<F>,
}

/// One decoded stage-two detection.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RawDetection {
    pub class: u16,
    pub score: f64,
    pub bbox: BoxCwh,
}

pub struct Model<F: Scalar> {
    pub store: ParameterStore<F>,
    pub cfg: DetectorConfig,
    pub lora: LoraSpec,
    /// Route the localization decoder through the adapters too. Off by
    /// default; turning it on forfeits the frozen-box guarantee.
    pub loc_lora: bool,
    pub class_slots: Vec<u16>,
    pub num_base_classes: usize,
    pub dual: bool,
}

fn empty_lora() -> LoraSpec {
    LoraSpec { rank: 0, scale: 0.0, targets: BTreeSet::new() }
}

fn deep_copy<F: Scalar>(t: &Tensor<F>) -> Result<Tensor<F>> {
    Tensor::leaf(&t.shape(), t.data())
}

impl<F: Scalar> Model<F> {
    /// Fresh single-route detector for pretraining. Head columns map to
    /// global classes identically.
    pub fn new_pretrain(cfg: DetectorConfig, seed: u64) -> Result<Self> {
        let mut store = ParameterStore::new();
        crate::detector::init_params(&mut store, &cfg, seed)?;
        let class_slots = (0..cfg.num_classes as u16).collect();
        let num_base_classes = cfg.num_classes;
        Ok(Model {
            store,
            cfg,
            lora: empty_lora(),
            loc_lora: false,
            class_slots,
            num_base_classes,
            dual: false,
        })
    }

    /// Rebuilds a model from a raw parameter snapshot and its spec; used to
    /// give each worker thread an independent copy.
    pub fn from_raw_spec(raw: &crate::store::RawStore<F>, spec: &ModelSpec) -> Result<Self> {
        let store = ParameterStore::from_raw(raw)?;
        let lora = if spec.dual && spec.lora_rank > 0 {
            LoraSpec {
                rank: spec.lora_rank,
                scale: spec.lora_scale,
                targets: spec.lora_targets.iter().cloned().collect(),
            }
        } else {
            empty_lora()
        };
        Ok(Model {
            store,
            cfg: spec.detector.clone(),
            lora,
            loc_lora: spec.loc_path_uses_lora,
            class_slots: spec.class_slots.clone(),
            num_base_classes: spec.num_base_classes,
            dual: spec.dual,
        })
    }

    /// Current classification head width.
    pub fn head_width(&self) -> usize {
        self.class_slots.len()
    }

    /// Head column of a global class id, if this model knows it.
    pub fn slot_of(&self, class: u16) -> Option<usize> {
        self.class_slots.iter().position(|&c| c == class)
    }

    /// Splits a pretrained single-route model into the dual arrangement:
    /// clones the class heads into trainable `f1_cls`/`f2_cls`, attaches
    /// adapters on `targets`, and freezes every original parameter.
    pub fn into_incremental(
        &mut self,
        rank: usize,
        scale: f64,
        targets: &[String],
        seed: u64,
    ) -> Result<()> {
        if self.dual {
            return Err(Error::Contract("model is already dual-route".into()));
        }
        for (src, dst) in [("f1", "f1_cls"), ("f2", "f2_cls")] {
            for suffix in ["w", "b"] {
                let t = self.store.get(&format!("{src}.{suffix}"))?;
                self.store.insert(format!("{dst}.{suffix}"), deep_copy(&t)?)?;
            }
        }
        self.lora = lora::attach(&mut self.store, targets, rank, scale, seed)?;
        for path in self.store.paths() {
            if !path.starts_with("lora.") && !path.starts_with("f1_cls.") && !path.starts_with("f2_cls.") {
                self.store.freeze(&path)?;
            }
        }
        self.dual = true;
        Ok(())
    }

    /// Widens the classification-route heads for newly arrived classes. New
    /// weight columns use the usual fan-in bound; new biases start at the
    /// focal prior.
    pub fn grow_head(&mut self, new_classes: &[u16], seed: u64) -> Result<()> {
        if !self.dual {
            return Err(Error::Contract("grow_head requires a dual-route model".into()));
        }
        for &c in new_classes {
            if self.class_slots.contains(&c) {
                return Err(Error::Contract(format!("class {c} already has a head column")));
            }
        }
        let extra = new_classes.len();
        if extra == 0 {
            return Ok(());
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let bound = 1.0 / (self.cfg.d as f64).sqrt();
        for head in ["f1_cls", "f2_cls"] {
            let w = self.store.get(&format!("{head}.w"))?;
            let shape = w.shape();
            let (d, c) = (shape[0], shape[1]);
            let mut data = Vec::with_capacity(d * (c + extra));
            w.with_data(|old| {
                for r in 0..d {
                    data.extend_from_slice(&old[r * c..(r + 1) * c]);
                    for _ in 0..extra {
                        data.push(F::of_f64(rng.random_range(-bound..bound)));
                    }
                }
            });
            self.store.replace(&format!("{head}.w"), Tensor::leaf(&[d, c + extra], data)?)?;
            let b = self.store.get(&format!("{head}.b"))?;
            let mut bias = b.data();
            bias.extend((0..extra).map(|_| F::of_f64(CLASS_PRIOR_LOGIT)));
            self.store.replace(&format!("{head}.b"), Tensor::leaf(&[c + extra], bias)?)?;
        }
        self.class_slots.extend_from_slice(new_classes);
        Ok(())
    }

    /// Forward pass on the active arrangement: classification-route scores
    /// with localization-route boxes when dual, the plain single route
    /// otherwise.
    pub fn forward(&self, g: &Graph<F>, img: &Image) -> Result<ForwardOut<F>> {
        if self.dual {
            self.forward_dual(g, img)
        } else {
            self.forward_base(g, img)
        }
    }

    /// The pretrained route exactly as frozen: base heads, no adapters.
    /// On a dual model this is the invariance probe.
    pub fn forward_frozen(&self, g: &Graph<F>, img: &Image) -> Result<ForwardOut<F>> {
        self.forward_base(g, img)
    }

    fn forward_base(&self, g: &Graph<F>, img: &Image) -> Result<ForwardOut<F>> {
        let tokens = backbone_forward(g, &self.store, &self.cfg, img)?;
        let enc = encoder_forward(g, &self.store, &self.cfg, &tokens, None)?;
        let s1_all = class_head(g, &self.store, "f1", &enc)?;
        let sel = select_topk(&s1_all, self.cfg.k)?;
        let anchors_all = ops::add(
            g,
            &box_head(g, &self.store, "g1", &enc)?,
            &grid_prior_tensor(&self.cfg)?,
        )?;
        let box1_logits = ops::select_rows(g, &anchors_all, &sel)?;
        let queries = ops::select_rows(g, &enc, &sel)?;
        let dec = decoder_forward(g, &self.store, &self.cfg, &queries, &enc, None)?;
        let cls1 = ops::select_rows(g, &s1_all, &sel)?;
        let cls2 = class_head(g, &self.store, "f2", &dec)?;
        let delta = box_head(g, &self.store, "g2", &dec)?;
        let box2_logits = ops::add(g, &box1_logits.detach(), &delta)?;
        let boxes1 = boxes_from_logits(&box1_logits)?;
        let boxes2 = boxes_from_logits(&box2_logits)?;
        let enc_sel = queries;
        Ok(ForwardOut {
            selected: sel,
            cls1,
            cls2,
            box1_logits,
            box2_logits,
            boxes1,
            boxes2,
            enc_sel,
            dec_out: dec,
        })
    }

    fn forward_dual(&self, g: &Graph<F>, img: &Image) -> Result<ForwardOut<F>> {
        let tokens = backbone_forward(g, &self.store, &self.cfg, img)?;
        let enc_loc = encoder_forward(g, &self.store, &self.cfg, &tokens, None)?;
        let enc_cls = encoder_forward(g, &self.store, &self.cfg, &tokens, Some(&self.lora))?;
        let s1_all = class_head(g, &self.store, "f1_cls", &enc_cls)?;
        let sel = select_topk(&s1_all, self.cfg.k)?;
        let anchors_all = ops::add(
            g,
            &box_head(g, &self.store, "g1", &enc_loc)?,
            &grid_prior_tensor(&self.cfg)?,
        )?;
        let box1_logits = ops::select_rows(g, &anchors_all, &sel)?;
        let queries_loc = ops::select_rows(g, &enc_loc, &sel)?;
        let queries_cls = ops::select_rows(g, &enc_cls, &sel)?;
        // The optional adapted localization decoder is an ablation switch;
        // the frozen-box guarantee only holds with it off.
        let loc_adapters = if self.loc_lora { Some(&self.lora) } else { None };
        let dec_loc =
            decoder_forward(g, &self.store, &self.cfg, &queries_loc, &enc_loc, loc_adapters)?;
        let dec_cls =
            decoder_forward(g, &self.store, &self.cfg, &queries_cls, &enc_cls, Some(&self.lora))?;
        let cls1 = ops::select_rows(g, &s1_all, &sel)?;
        let cls2 = class_head(g, &self.store, "f2_cls", &dec_cls)?;
        let delta = box_head(g, &self.store, "g2", &dec_loc)?;
        let box2_logits = ops::add(g, &box1_logits.detach(), &delta)?;
        let boxes1 = boxes_from_logits(&box1_logits)?;
        let boxes2 = boxes_from_logits(&box2_logits)?;
        Ok(ForwardOut {
            selected: sel,
            cls1,
            cls2,
            box1_logits,
            box2_logits,
            boxes1,
            boxes2,
            enc_sel: queries_cls,
            dec_out: dec_cls,
        })
    }

    /// Stage-two detections of a forward pass, globally ranked. The head
    /// width comes from the output itself: the frozen route keeps the
    /// original base-class head while the active route may have grown, and
    /// the leading slots always map the base classes in order.
    pub fn detect(&self, out: &ForwardOut<F>) -> Result<Vec<RawDetection>> {
        let shape = out.cls2.shape();
        if shape.len() != 2 || shape[1] > self.class_slots.len() {
            return Err(Error::Contract(format!(
                "detect: logits shape {shape:?} incompatible with {} class slots",
                self.class_slots.len()
            )));
        }
        let width = shape[1];
        let logits: Vec<f64> = out.cls2.with_data(|d| d.iter().map(|v| v.as_f64()).collect());
        rank_detections(&logits, width, &out.boxes2, &self.class_slots[..width])
    }

    pub fn spec(&self) -> ModelSpec {
        ModelSpec {
            format_version: MODEL_FORMAT_VERSION,
            detector: self.cfg.clone(),
            lora_rank: self.lora.rank,
            lora_scale: self.lora.scale,
            lora_targets: self.lora.targets.iter().cloned().collect(),
            loc_path_uses_lora: self.loc_lora,
            class_slots: self.class_slots.clone(),
            num_base_classes: self.num_base_classes,
            dual: self.dual,
        }
    }
}

/// One detection per query: its best class column (ties toward the lower
/// column), scored by that logit's sigmoid, ranked by score with ties toward
/// the lower query index.
pub fn rank_detections(
    cls_logits: &[f64],
    width: usize,
    boxes: &[BoxCwh],
    class_slots: &[u16],
) -> Result<Vec<RawDetection>> {
    if width == 0 || cls_logits.len() != boxes.len() * width || class_slots.len() != width {
        return Err(Error::Contract(format!(
            "rank_detections: {} logits, {} boxes, width {}, {} slots",
            cls_logits.len(),
            boxes.len(),
            width,
            class_slots.len()
        )));
    }
    let mut dets: Vec<(usize, RawDetection)> = boxes
        .iter()
        .enumerate()
        .map(|(q, &bbox)| {
            let row = &cls_logits[q * width..(q + 1) * width];
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            let det = RawDetection {
                class: class_slots[best],
                score: ops::sigmoid_val(row[best]),
                bbox,
            };
            (q, det)
        })
        .collect();
    dets.sort_by(|a, b| {
        b.1.score
            .partial_cmp(&a.1.score)
            .unwrap_or(core::cmp::Ordering::Equal)
            .then(a.0.cmp(&b.0))
    });
    Ok(dets.into_iter().map(|(_, d)| d).collect())
}

impl Model<f32> {
    /// Writes the parameter checkpoint plus the `model.json` sidecar.
    pub fn save(&self, dir: &Path) -> Result<()> {
        self.store.save(dir)?;
        let json = serde_json::to_string_pretty(&self.spec())
            .map_err(|e| Error::Checkpoint(format!("model spec serialization failed: {e}")))?;
        fs::write(dir.join(MODEL_SPEC_FILE), json)?;
        Ok(())
    }

    /// Loads a model directory, validating the sidecar against the stored
    /// parameters and reapplying the dual-route freeze policy.
    pub fn load(dir: &Path) -> Result<Model<f32>> {
        let spec_path = dir.join(MODEL_SPEC_FILE);
        let text = fs::read_to_string(&spec_path)
            .map_err(|e| Error::Checkpoint(format!("cannot read {}: {e}", spec_path.display())))?;
        let spec: ModelSpec = serde_json::from_str(&text)
            .map_err(|e| Error::Checkpoint(format!("malformed model spec: {e}")))?;
        if spec.format_version != MODEL_FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported model format version {}",
                spec.format_version
            )));
        }
        spec.detector.validate()?;
        if spec.num_base_classes != spec.detector.num_classes {
            return Err(Error::Checkpoint(format!(
                "base class count {} disagrees with detector head width {}",
                spec.num_base_classes, spec.detector.num_classes
            )));
        }
        let mut store = ParameterStore::<f32>::load(dir)?;
        let expect_width = |store: &ParameterStore<f32>, path: &str, width: usize| -> Result<()> {
            let shape = store.get(path)?.shape();
            if shape != vec![spec.detector.d, width] {
                return Err(Error::Checkpoint(format!(
                    "parameter {path} has shape {shape:?}, expected [{}, {width}]",
                    spec.detector.d
                )));
            }
            Ok(())
        };
        expect_width(&store, "f1.w", spec.num_base_classes)?;
        expect_width(&store, "f2.w", spec.num_base_classes)?;
        let lora_spec;
        if spec.dual {
            if spec.class_slots.len() < spec.num_base_classes {
                return Err(Error::Checkpoint(format!(
                    "{} class slots cannot cover {} base classes",
                    spec.class_slots.len(),
                    spec.num_base_classes
                )));
            }
            expect_width(&store, "f1_cls.w", spec.class_slots.len())?;
            expect_width(&store, "f2_cls.w", spec.class_slots.len())?;
            if spec.lora_rank > 0 {
                if spec.lora_targets.is_empty() {
                    return Err(Error::Checkpoint(
                        "dual model declares adapters but lists no targets".into(),
                    ));
                }
                for t in &spec.lora_targets {
                    for suffix in ["A", "B"] {
                        let path = format!("lora.{t}.{suffix}");
                        if !store.contains(&path) {
                            return Err(Error::Checkpoint(format!(
                                "dual model is missing adapter parameter {path}"
                            )));
                        }
                    }
                }
            }
            for path in store.paths() {
                if !path.starts_with("lora.")
                    && !path.starts_with("f1_cls.")
                    && !path.starts_with("f2_cls.")
                {
                    store.freeze(&path)?;
                }
            }
            lora_spec = LoraSpec {
                rank: spec.lora_rank,
                scale: spec.lora_scale,
                targets: if spec.lora_rank > 0 {
                    spec.lora_targets.iter().cloned().collect()
                } else {
                    BTreeSet::new()
                },
            };
        } else {
            if spec.class_slots.len() != spec.num_base_classes {
                return Err(Error::Checkpoint(format!(
                    "single-route model has {} slots for {} base classes",
                    spec.class_slots.len(),
                    spec.num_base_classes
                )));
            }
            lora_spec = empty_lora();
        }
        Ok(Model {
            store,
            cfg: spec.detector,
            lora: lora_spec,
            loc_lora: spec.loc_path_uses_lora,
            class_slots: spec.class_slots,
            num_base_classes: spec.num_base_classes,
            dual: spec.dual,
        })
    }
}
