//! Run configuration: TOML sections with full defaults, dotted-path
//! command-line overrides, and a resolved dump for reproducibility.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::detector::DetectorConfig;
use crate::scene::{Domain, TaskSchedule};
use crate::{Error, Result};

/// Adapter module groups that may receive low-rank injections.
pub const LORA_TARGET_GROUPS: [&str; 2] = ["attn", "mlp"];

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LoraConfig {
    pub rank: usize,
    /// Direct multiplier on the low-rank product BA.
    pub scale: f64,
    /// Module groups to adapt, any subset of ["attn", "mlp"].
    pub targets: Vec<String>,
    /// Literal-equation variant: route the localization decoder through the
    /// adapters too. Off by default; turning it on forfeits the frozen-box
    /// guarantee during the first task.
    pub loc_path_uses_lora: bool,
}

impl Default for LoraConfig {
    fn default() -> Self {
        LoraConfig {
            rank: 4,
            scale: 1.0,
            targets: LORA_TARGET_GROUPS.iter().map(|s| s.to_string()).collect(),
            loc_path_uses_lora: false,
        }
    }
}

impl LoraConfig {
    /// (adapt attention projections, adapt MLP projections).
    pub fn target_groups(&self) -> (bool, bool) {
        let has = |name: &str| self.targets.iter().any(|t| t == name);
        (has("attn"), has("mlp"))
    }
}

/// Probability form of the replay cross-entropy term.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReplayLossForm {
    /// Per-class sigmoids renormalized across the head.
    SigmoidRenorm,
    /// Softmax over the full head.
    Softmax,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub pretrain_epochs: usize,
    pub epochs_per_task: usize,
    pub batch_size: usize,
    /// Learning rate for everything outside the adapters.
    pub lr_head: f64,
    /// Learning rate for adapter parameters.
    pub lr_lora: f64,
    pub weight_decay: f64,
    pub lambda_replay: f64,
    pub replay_loss_form: ReplayLossForm,
    /// Supervise old-class logits as background on unmatched queries.
    pub negatives_on_old_classes: bool,
    pub seed: u64,
    /// Worker threads for per-image passes; 0 uses the machine parallelism.
    pub threads: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            pretrain_epochs: 30,
            epochs_per_task: 20,
            batch_size: 8,
            lr_head: 1e-3,
            lr_lora: 1e-4,
            weight_decay: 1e-4,
            lambda_replay: 30.0,
            replay_loss_form: ReplayLossForm::SigmoidRenorm,
            negatives_on_old_classes: true,
            seed: 0,
            threads: 0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleConfig {
    /// Dash-separated group sizes over the non-base classes, e.g. "4-4".
    /// A single-group schedule may be given as a bare integer or an array
    /// of sizes.
    #[serde(deserialize_with = "increments_value")]
    pub increments: String,
    /// Non-zero: shuffle the order of the incremental classes before
    /// partitioning them into task groups.
    pub class_order_seed: u64,
}

fn increments_value<'de, D>(de: D) -> std::result::Result<String, D::Error>
where
    D: serde::Deserializer<'de>,
{
    struct V;
    impl<'de> serde::de::Visitor<'de> for V {
        type Value = String;
        fn expecting(&self, f: &mut std::fmt::Formatter) -> std::fmt::Result {
            f.write_str("a schedule string, integer, or array of sizes")
        }
        fn visit_str<E: serde::de::Error>(self, v: &str) -> std::result::Result<String, E> {
            Ok(v.to_string())
        }
        fn visit_i64<E: serde::de::Error>(self, v: i64) -> std::result::Result<String, E> {
            Ok(v.to_string())
        }
        fn visit_u64<E: serde::de::Error>(self, v: u64) -> std::result::Result<String, E> {
            Ok(v.to_string())
        }
        fn visit_seq<A: serde::de::SeqAccess<'de>>(
            self,
            mut seq: A,
        ) -> std::result::Result<String, A::Error> {
            let mut parts: Vec<String> = Vec::new();
            while let Some(v) = seq.next_element::<i64>()? {
                parts.push(v.to_string());
            }
            Ok(parts.join("-"))
        }
    }
    de.deserialize_any(V)
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        ScheduleConfig { increments: "4-4".to_string(), class_order_seed: 0 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub pretrain_images: usize,
    pub task_images: usize,
    pub eval_images: usize,
    /// Style of the incremental-task imagery.
    pub domain: Domain,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            pretrain_images: 600,
            task_images: 300,
            eval_images: 150,
            domain: Domain::InDomain,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Detections counted per image by the class-agnostic recall.
    pub top_per_image: usize,
    /// Detections below this score are dropped before evaluation.
    pub score_threshold: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig { top_per_image: 16, score_threshold: 0.0 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: DetectorConfig,
    pub lora: LoraConfig,
    pub train: TrainConfig,
    pub schedule: ScheduleConfig,
    pub data: DataConfig,
    pub eval: EvalConfig,
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text)
            .map_err(|e| Error::Config(format!("config parse error: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    /// Builds the configuration from an optional file plus `a.b.c=value`
    /// overrides, most specific last.
    pub fn from_parts(file: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut table: toml::Table = match file {
            Some(path) => {
                let text = std::fs::read_to_string(path)
                    .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
                toml::from_str(&text)
                    .map_err(|e| Error::Config(format!("config parse error: {e}")))?
            }
            None => toml::Table::new(),
        };
        for item in overrides {
            let (path, raw) = item
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override {item:?} is not key=value")))?;
            set_dotted(&mut table, path.trim(), parse_override_value(raw.trim()))?;
        }
        let cfg: RunConfig = table
            .try_into()
            .map_err(|e| Error::Config(format!("config error: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Full configuration with every default filled in, as TOML.
    pub fn resolved_toml(&self) -> Result<String> {
        toml::to_string_pretty(self)
            .map_err(|e| Error::Config(format!("config serialization failed: {e}")))
    }

    pub fn schedule(&self) -> Result<TaskSchedule> {
        TaskSchedule::parse_seeded(&self.schedule.increments, self.schedule.class_order_seed)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.model.num_classes != crate::scene::NUM_BASE_CLASSES {
            return Err(Error::Config(format!(
                "detector head width {} must match the {} base classes",
                self.model.num_classes,
                crate::scene::NUM_BASE_CLASSES
            )));
        }
        if self.lora.rank > self.model.d {
            return Err(Error::Config(format!(
                "lora rank {} exceeds token width {}",
                self.lora.rank, self.model.d
            )));
        }
        if self.lora.rank > 0 && self.lora.scale <= 0.0 {
            return Err(Error::Config(format!("lora scale {} must be positive", self.lora.scale)));
        }
        for t in &self.lora.targets {
            if !LORA_TARGET_GROUPS.contains(&t.as_str()) {
                return Err(Error::Config(format!(
                    "unknown lora target {t:?}; expected one of {LORA_TARGET_GROUPS:?}"
                )));
            }
        }
        if self.lora.rank > 0 && self.lora.targets.is_empty() {
            return Err(Error::Config("lora rank > 0 with no adapter targets".into()));
        }
        let t = &self.train;
        if t.pretrain_epochs == 0 || t.epochs_per_task == 0 || t.batch_size == 0 {
            return Err(Error::Config("epoch and batch counts must be positive".into()));
        }
        for (name, lr) in [("lr_head", t.lr_head), ("lr_lora", t.lr_lora)] {
            if !(lr > 0.0 && lr.is_finite()) {
                return Err(Error::Config(format!("{name} {lr} must be positive")));
            }
        }
        if !(t.weight_decay >= 0.0 && t.weight_decay.is_finite()) {
            return Err(Error::Config(format!("weight decay {} must be non-negative", t.weight_decay)));
        }
        if !(t.lambda_replay >= 0.0 && t.lambda_replay.is_finite()) {
            return Err(Error::Config(format!(
                "replay weight {} must be non-negative",
                t.lambda_replay
            )));
        }
        self.schedule()?;
        let d = &self.data;
        if d.pretrain_images < 10 || d.task_images < 10 {
            return Err(Error::Config(
                "pretrain_images and task_images must be at least 10 to split".into(),
            ));
        }
        if d.eval_images == 0 {
            return Err(Error::Config("eval_images must be positive".into()));
        }
        if self.eval.top_per_image == 0 {
            return Err(Error::Config("eval.top_per_image must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.eval.score_threshold) {
            return Err(Error::Config(format!(
                "eval.score_threshold {} outside [0, 1)",
                self.eval.score_threshold
            )));
        }
        Ok(())
    }
}

/// Parses an override value with TOML literal syntax, falling back to a
/// bare string ("cross_domain" needs no quoting on the command line).
fn parse_override_value(raw: &str) -> toml::Value {
    let doc = format!("v = {raw}");
    match toml::from_str::<toml::Table>(&doc) {
        Ok(mut t) => t.remove("v").unwrap(),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

fn set_dotted(table: &mut toml::Table, path: &str, value: toml::Value) -> Result<()> {
    let mut parts = path.split('.').peekable();
    let mut current = table;
    loop {
        let part = parts
            .next()
            .filter(|p| !p.is_empty())
            .ok_or_else(|| Error::Config(format!("bad override path {path:?}")))?;
        if parts.peek().is_none() {
            current.insert(part.to_string(), value);
            return Ok(());
        }
        let entry = current
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        current = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("override path {path:?} crosses a non-table")))?;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate_and_round_trip() {
        let cfg = RunConfig::default();
        cfg.validate().unwrap();
        let dumped = cfg.resolved_toml().unwrap();
        let back = RunConfig::from_toml_str(&dumped).unwrap();
        assert_eq!(back.model, cfg.model);
        assert_eq!(back.train.lr_head, cfg.train.lr_head);
        assert_eq!(back.train.replay_loss_form, ReplayLossForm::SigmoidRenorm);
        assert_eq!(back.schedule.increments, "4-4");
        assert_eq!(back.lora.target_groups(), (true, true));
    }

    #[test]
    fn partial_file_fills_remaining_defaults() {
        let cfg =
            RunConfig::from_toml_str("[train]\nlr_head = 0.01\n[schedule]\nincrements = \"4-2-2\"\n")
                .unwrap();
        assert_eq!(cfg.train.lr_head, 0.01);
        assert_eq!(cfg.train.batch_size, TrainConfig::default().batch_size);
        assert_eq!(cfg.schedule().unwrap().groups.len(), 3);
        assert_eq!(cfg.model.d, 64);
    }

    #[test]
    fn unknown_field_is_config_error() {
        assert!(matches!(
            RunConfig::from_toml_str("[train]\nlerning_rate = 0.1\n"),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            RunConfig::from_toml_str("[trian]\nlr_head = 0.1\n"),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn invalid_values_are_config_errors() {
        assert!(matches!(
            RunConfig::from_toml_str("[train]\nlr_head = 0.0\n"),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            RunConfig::from_toml_str("[schedule]\nincrements = \"4-5\"\n"),
            Err(Error::Schedule(_))
        ));
        assert!(matches!(
            RunConfig::from_toml_str("[model]\nheads = 5\n"),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            RunConfig::from_toml_str("[model]\nnum_classes = 4\n"),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            RunConfig::from_toml_str("[lora]\nrank = 128\n"),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            RunConfig::from_toml_str("[lora]\ntargets = [\"attn\", \"conv\"]\n"),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            RunConfig::from_toml_str("[lora]\ntargets = []\n"),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            RunConfig::from_toml_str("[train]\nreplay_loss_form = \"slapdash\"\n"),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            RunConfig::from_toml_str("[eval]\nscore_threshold = 1.5\n"),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn overrides_apply_on_top_of_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        std::fs::write(&path, "[train]\nlr_head = 0.01\nseed = 7\n").unwrap();
        let cfg = RunConfig::from_parts(
            Some(&path),
            &[
                "train.lr_head=0.5".to_string(),
                "data.domain=cross_domain".to_string(),
                "schedule.increments=8".to_string(),
                "train.replay_loss_form=softmax".to_string(),
            ],
        )
        .unwrap();
        assert_eq!(cfg.train.lr_head, 0.5);
        assert_eq!(cfg.train.seed, 7);
        assert_eq!(cfg.data.domain, Domain::CrossDomain);
        assert_eq!(cfg.train.replay_loss_form, ReplayLossForm::Softmax);
        assert_eq!(cfg.schedule().unwrap().groups, vec![vec![8, 9, 10, 11, 12, 13, 14, 15]]);
    }

    #[test]
    fn increments_accept_array_form_and_order_seed_permutes() {
        let cfg = RunConfig::from_toml_str("[schedule]\nincrements = [4, 2, 2]\n").unwrap();
        assert_eq!(cfg.schedule.increments, "4-2-2");
        let base = cfg.schedule().unwrap();

        let seeded =
            RunConfig::from_toml_str("[schedule]\nincrements = [4, 2, 2]\nclass_order_seed = 9\n")
                .unwrap()
                .schedule()
                .unwrap();
        let sizes: Vec<usize> = seeded.groups.iter().map(|g| g.len()).collect();
        assert_eq!(sizes, vec![4, 2, 2]);
        let mut all: Vec<u16> = seeded.groups.iter().flatten().copied().collect();
        all.sort_unstable();
        assert_eq!(all, (8..16).collect::<Vec<u16>>());
        assert_ne!(seeded.groups, base.groups, "seed 9 must permute the class order");
        // Same seed, same order.
        let again =
            RunConfig::from_toml_str("[schedule]\nincrements = [4, 2, 2]\nclass_order_seed = 9\n")
                .unwrap()
                .schedule()
                .unwrap();
        assert_eq!(seeded.groups, again.groups);
    }

    #[test]
    fn override_without_file_and_bad_paths() {
        let cfg = RunConfig::from_parts(None, &["train.batch_size=4".to_string()]).unwrap();
        assert_eq!(cfg.train.batch_size, 4);
        assert!(matches!(
            RunConfig::from_parts(None, &["train.batch_size".to_string()]),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            RunConfig::from_parts(None, &["train.lr.x=1".to_string()]),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            RunConfig::from_parts(None, &["train.mystery=1".to_string()]),
            Err(Error::Config(_))
        ));
    }
}
