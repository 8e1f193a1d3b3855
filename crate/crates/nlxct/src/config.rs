//! Run configuration: UTF-8 `key = value` lines, `#` comments, dotted keys.
//! Unknown keys are rejected so typos fail loudly.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::PathBuf;

use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    GenerateData,
    Pretrain,
    Finetune,
    Continual,
    Eval,
}

impl Stage {
    pub fn as_str(&self) -> &'static str {
        match self {
            Stage::GenerateData => "generate-data",
            Stage::Pretrain => "pretrain",
            Stage::Finetune => "finetune",
            Stage::Continual => "continual",
            Stage::Eval => "eval",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "generate-data" => Ok(Stage::GenerateData),
            "pretrain" => Ok(Stage::Pretrain),
            "finetune" => Ok(Stage::Finetune),
            "continual" => Ok(Stage::Continual),
            "eval" => Ok(Stage::Eval),
            other => Err(Error::config(format!("unknown stage `{other}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OptimName {
    DeepMomentum,
    Momentum,
    AdamW,
}

impl OptimName {
    pub fn as_str(&self) -> &'static str {
        match self {
            OptimName::DeepMomentum => "deep_momentum",
            OptimName::Momentum => "momentum",
            OptimName::AdamW => "adamw",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Replay {
    Full,
    None,
}

impl Replay {
    pub fn as_str(&self) -> &'static str {
        match self {
            Replay::Full => "full",
            Replay::None => "none",
        }
    }
}

#[derive(Clone, Debug)]
pub struct DataConfig {
    pub dir: PathBuf,
    pub image_size: usize,
    pub n_orders: usize,
    pub slices_per_order: usize,
    pub cell_pitch: f64,
    pub noise: f64,
    pub drift_max: f64,
    pub unlabeled_orders: usize,
    pub unlabeled_drift_max: f64,
    pub continual_batches: usize,
    pub continual_orders_per_batch: usize,
    pub continual_drift_start: f64,
    pub continual_drift_end: f64,
}

#[derive(Clone, Copy, Debug)]
pub struct OptimConfig {
    pub name: OptimName,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub mu: f64,
    pub rho: f64,
    pub gamma: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

#[derive(Clone, Copy, Debug)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub mask_ratio: f64,
    pub mask_patch: usize,
    pub patience: usize,
    pub class_weighting: bool,
}

#[derive(Clone, Copy, Debug)]
pub struct ContinualConfig {
    pub n_batches: usize,
    pub replay: Replay,
    pub backbone_lr_mult: f64,
    pub head_lr_mult: f64,
    pub epochs_per_batch: usize,
    pub learning_rate: f64,
}

/// Fully resolved run configuration for one pipeline stage.
#[derive(Clone, Debug)]
pub struct RunConfig {
    pub stage: Stage,
    pub seed: u64,
    pub init_checkpoint: Option<PathBuf>,
    pub data: DataConfig,
    pub model: EncoderConfig,
    pub optim: OptimConfig,
    pub train: TrainConfig,
    pub continual: ContinualConfig,
}

struct Raw {
    map: BTreeMap<String, String>,
    used: std::cell::RefCell<std::collections::BTreeSet<String>>,
}

impl Raw {
    fn parse(text: &str) -> Result<Self> {
        let mut map = BTreeMap::new();
        for (ln, line) in text.lines().enumerate() {
            let line = match line.find('#') {
                Some(p) => &line[..p],
                None => line,
            };
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(Error::config(format!(
                    "line {}: expected `key = value`, got `{line}`",
                    ln + 1
                )));
            };
            let key = key.trim().to_string();
            let value = value.trim().to_string();
            if key.is_empty() {
                return Err(Error::config(format!("line {}: empty key", ln + 1)));
            }
            if map.insert(key.clone(), value).is_some() {
                return Err(Error::config(format!("line {}: duplicate key `{key}`", ln + 1)));
            }
        }
        Ok(Raw { map, used: Default::default() })
    }

    fn get(&self, key: &str) -> Option<&str> {
        self.used.borrow_mut().insert(key.to_string());
        self.map.get(key).map(String::as_str)
    }

    fn str_or(&self, key: &str, default: &str) -> String {
        self.get(key).map_or_else(|| default.to_string(), str::to_string)
    }

    fn f64_or(&self, key: &str, default: f64) -> Result<f64> {
        match self.get(key) {
            None => Ok(default),
            Some(v) => v
                .parse()
                .map_err(|_| Error::config(format!("{key}: `{v}` is not a number"))),
        }
    }

    fn usize_or(&self, key: &str, default: usize) -> Result<usize> {
        match self.get(key) {
            None => Ok(default),
            Some(v) => v
                .parse()
                .map_err(|_| Error::config(format!("{key}: `{v}` is not a count"))),
        }
    }

    fn u64_or(&self, key: &str, default: u64) -> Result<u64> {
        match self.get(key) {
            None => Ok(default),
            Some(v) => v
                .parse()
                .map_err(|_| Error::config(format!("{key}: `{v}` is not an integer"))),
        }
    }

    fn bool_or(&self, key: &str, default: bool) -> Result<bool> {
        match self.get(key) {
            None => Ok(default),
            Some("true") => Ok(true),
            Some("false") => Ok(false),
            Some(v) => Err(Error::config(format!("{key}: `{v}` is not true/false"))),
        }
    }

    fn usize4_or(&self, key: &str, default: [usize; 4]) -> Result<[usize; 4]> {
        match self.get(key) {
            None => Ok(default),
            Some(v) => {
                let parts: Vec<&str> = v.split(',').map(str::trim).collect();
                if parts.len() != 4 {
                    return Err(Error::config(format!("{key}: need 4 comma-separated values")));
                }
                let mut out = [0usize; 4];
                for (i, p) in parts.iter().enumerate() {
                    out[i] = p
                        .parse()
                        .map_err(|_| Error::config(format!("{key}: `{p}` is not a count")))?;
                }
                Ok(out)
            }
        }
    }

    fn reject_unknown(&self) -> Result<()> {
        let used = self.used.borrow();
        let unknown: Vec<&String> = self.map.keys().filter(|k| !used.contains(*k)).collect();
        if unknown.is_empty() {
            Ok(())
        } else {
            Err(Error::config(format!(
                "unknown configuration keys: {}",
                unknown
                    .iter()
                    .map(|s| s.as_str())
                    .collect::<Vec<_>>()
                    .join(", ")
            )))
        }
    }
}

impl RunConfig {
    /// Parse a config file body for `stage`. `seed_override` comes from the
    /// command line and wins over the file.
    pub fn from_text(text: &str, stage: Stage, seed_override: Option<u64>) -> Result<RunConfig> {
        let raw = Raw::parse(text)?;

        if let Some(s) = raw.get("stage") {
            let file_stage = Stage::parse(s)?;
            if file_stage != stage {
                return Err(Error::config(format!(
                    "config declares stage `{}` but the subcommand is `{}`",
                    file_stage.as_str(),
                    stage.as_str()
                )));
            }
        }
        let seed = match seed_override {
            Some(s) => {
                let _ = raw.get("seed");
                s
            }
            None => raw.u64_or("seed", 0)?,
        };
        let init_checkpoint = raw.get("init_checkpoint").map(PathBuf::from);

        let data = DataConfig {
            dir: PathBuf::from(raw.str_or("data.dir", "data")),
            image_size: raw.usize_or("data.image_size", 64)?,
            n_orders: raw.usize_or("data.n_orders", 40)?,
            slices_per_order: raw.usize_or("data.slices_per_order", 50)?,
            cell_pitch: raw.f64_or("data.cell_pitch", 10.0)?,
            noise: raw.f64_or("data.noise", 0.03)?,
            drift_max: raw.f64_or("data.drift_max", 0.5)?,
            unlabeled_orders: raw.usize_or("data.unlabeled_orders", 160)?,
            unlabeled_drift_max: raw.f64_or("data.unlabeled_drift_max", 0.8)?,
            continual_batches: raw.usize_or("data.continual_batches", 4)?,
            continual_orders_per_batch: raw.usize_or("data.continual_orders_per_batch", 4)?,
            continual_drift_start: raw.f64_or("data.continual_drift_start", 0.5)?,
            continual_drift_end: raw.f64_or("data.continual_drift_end", 1.1)?,
        };

        let defaults = EncoderConfig::default();
        let model = EncoderConfig {
            image_size: raw.usize_or("model.image_size", data.image_size)?,
            in_channels: raw.usize_or("model.in_channels", 1)?,
            stage_channels: raw.usize4_or("model.stage_channels", defaults.stage_channels)?,
            stage_depths: raw.usize4_or("model.stage_depths", defaults.stage_depths)?,
            patch_stride: raw.usize4_or("model.patch_stride", defaults.patch_stride)?,
            num_classes: raw.usize_or("model.num_classes", defaults.num_classes)?,
            d_state: raw.usize_or("model.d_state", defaults.d_state)?,
            nl_enabled: raw.bool_or("model.nl_enabled", true)?,
            alpha: raw.f64_or("model.alpha", defaults.alpha)?,
            lambda: raw.f64_or("model.lambda", defaults.lambda)?,
            token_gate: raw.bool_or("model.token_gate", false)?,
        };
        model.validate()?;

        let default_optim = match stage {
            Stage::Pretrain => OptimName::AdamW,
            _ => OptimName::DeepMomentum,
        };
        let optim_name = match raw.get("optim.name") {
            None => default_optim,
            Some("deep_momentum") => OptimName::DeepMomentum,
            Some("momentum") => OptimName::Momentum,
            Some("adamw") => OptimName::AdamW,
            Some(v) => return Err(Error::config(format!("optim.name: unknown optimizer `{v}`"))),
        };
        // desk-scale defaults; the full-production values belong in configs
        let (default_lr, default_wd) = match stage {
            Stage::Pretrain => (1e-3, 0.005),
            _ => (2e-2, 1e-4),
        };
        let optim = OptimConfig {
            name: optim_name,
            learning_rate: raw.f64_or("optim.learning_rate", default_lr)?,
            weight_decay: raw.f64_or("optim.weight_decay", default_wd)?,
            mu: raw.f64_or("optim.mu", 0.9)?,
            rho: raw.f64_or("optim.rho", 0.99)?,
            gamma: raw.f64_or("optim.gamma", 0.1)?,
            beta1: raw.f64_or("optim.beta1", 0.9)?,
            beta2: raw.f64_or("optim.beta2", 0.999)?,
            eps: raw.f64_or("optim.eps", 1e-8)?,
        };
        if optim.learning_rate <= 0.0 {
            return Err(Error::config("optim.learning_rate must be positive"));
        }

        let default_epochs = match stage {
            Stage::Pretrain => 20,
            _ => 30,
        };
        let train = TrainConfig {
            batch_size: raw.usize_or("train.batch_size", 32)?,
            epochs: raw.usize_or("train.epochs", default_epochs)?,
            mask_ratio: raw.f64_or("train.mask_ratio", 0.6)?,
            mask_patch: raw.usize_or("train.mask_patch", 8)?,
            patience: raw.usize_or("train.patience", 10)?,
            class_weighting: raw.bool_or("train.class_weighting", false)?,
        };
        if train.batch_size == 0 || train.epochs == 0 {
            return Err(Error::config("train.batch_size and train.epochs must be positive"));
        }
        if !(0.0..=1.0).contains(&train.mask_ratio) {
            return Err(Error::config(format!(
                "train.mask_ratio {} outside [0,1]",
                train.mask_ratio
            )));
        }

        let replay = match raw.get("continual.replay") {
            None => Replay::Full,
            Some("full") => Replay::Full,
            Some("none") => Replay::None,
            Some(v) => return Err(Error::config(format!("continual.replay: `{v}`"))),
        };
        let continual = ContinualConfig {
            n_batches: raw.usize_or("continual.n_batches", 4)?,
            replay,
            backbone_lr_mult: raw.f64_or("continual.backbone_lr_mult", 0.1)?,
            head_lr_mult: raw.f64_or("continual.head_lr_mult", 20.0)?,
            epochs_per_batch: raw.usize_or("continual.epochs_per_batch", 15)?,
            learning_rate: raw.f64_or("continual.learning_rate", 2e-3)?,
        };

        raw.reject_unknown()?;

        let cfg = RunConfig {
            stage,
            seed,
            init_checkpoint,
            data,
            model,
            optim,
            train,
            continual,
        };
        cfg.validate_stage()?;
        Ok(cfg)
    }

    fn validate_stage(&self) -> Result<()> {
        match self.stage {
            Stage::Continual | Stage::Eval => {
                if self.init_checkpoint.is_none() {
                    return Err(Error::config(format!(
                        "stage `{}` requires init_checkpoint",
                        self.stage.as_str()
                    )));
                }
            }
            _ => {}
        }
        if self.stage == Stage::Continual && self.continual.n_batches < 2 {
            return Err(Error::config("continual.n_batches must be at least 2"));
        }
        Ok(())
    }

    /// Canonical echo of every resolved value, one sorted `key = value`
    /// line each.
    pub fn resolved_text(&self) -> String {
        let mut pairs: Vec<(String, String)> = vec![
            ("stage".into(), self.stage.as_str().into()),
            ("seed".into(), self.seed.to_string()),
            (
                "init_checkpoint".into(),
                self.init_checkpoint
                    .as_ref()
                    .map_or_else(|| "-".into(), |p| p.display().to_string()),
            ),
            ("data.dir".into(), self.data.dir.display().to_string()),
            ("data.image_size".into(), self.data.image_size.to_string()),
            ("data.n_orders".into(), self.data.n_orders.to_string()),
            ("data.slices_per_order".into(), self.data.slices_per_order.to_string()),
            ("data.cell_pitch".into(), format!("{}", self.data.cell_pitch)),
            ("data.noise".into(), format!("{}", self.data.noise)),
            ("data.drift_max".into(), format!("{}", self.data.drift_max)),
            ("data.unlabeled_orders".into(), self.data.unlabeled_orders.to_string()),
            (
                "data.unlabeled_drift_max".into(),
                format!("{}", self.data.unlabeled_drift_max),
            ),
            ("data.continual_batches".into(), self.data.continual_batches.to_string()),
            (
                "data.continual_orders_per_batch".into(),
                self.data.continual_orders_per_batch.to_string(),
            ),
            (
                "data.continual_drift_start".into(),
                format!("{}", self.data.continual_drift_start),
            ),
            (
                "data.continual_drift_end".into(),
                format!("{}", self.data.continual_drift_end),
            ),
            ("model.image_size".into(), self.model.image_size.to_string()),
            ("model.in_channels".into(), self.model.in_channels.to_string()),
            (
                "model.stage_channels".into(),
                self.model.stage_channels.map(|v| v.to_string()).join(","),
            ),
            (
                "model.stage_depths".into(),
                self.model.stage_depths.map(|v| v.to_string()).join(","),
            ),
            (
                "model.patch_stride".into(),
                self.model.patch_stride.map(|v| v.to_string()).join(","),
            ),
            ("model.num_classes".into(), self.model.num_classes.to_string()),
            ("model.d_state".into(), self.model.d_state.to_string()),
            ("model.nl_enabled".into(), self.model.nl_enabled.to_string()),
            ("model.alpha".into(), format!("{}", self.model.alpha)),
            ("model.lambda".into(), format!("{}", self.model.lambda)),
            ("model.token_gate".into(), self.model.token_gate.to_string()),
            ("optim.name".into(), self.optim.name.as_str().into()),
            ("optim.learning_rate".into(), format!("{}", self.optim.learning_rate)),
            ("optim.weight_decay".into(), format!("{}", self.optim.weight_decay)),
            ("optim.mu".into(), format!("{}", self.optim.mu)),
            ("optim.rho".into(), format!("{}", self.optim.rho)),
            ("optim.gamma".into(), format!("{}", self.optim.gamma)),
            ("optim.beta1".into(), format!("{}", self.optim.beta1)),
            ("optim.beta2".into(), format!("{}", self.optim.beta2)),
            ("optim.eps".into(), format!("{}", self.optim.eps)),
            ("train.batch_size".into(), self.train.batch_size.to_string()),
            ("train.epochs".into(), self.train.epochs.to_string()),
            ("train.mask_ratio".into(), format!("{}", self.train.mask_ratio)),
            ("train.mask_patch".into(), self.train.mask_patch.to_string()),
            ("train.patience".into(), self.train.patience.to_string()),
            ("train.class_weighting".into(), self.train.class_weighting.to_string()),
            ("continual.n_batches".into(), self.continual.n_batches.to_string()),
            ("continual.replay".into(), self.continual.replay.as_str().into()),
            (
                "continual.backbone_lr_mult".into(),
                format!("{}", self.continual.backbone_lr_mult),
            ),
            ("continual.head_lr_mult".into(), format!("{}", self.continual.head_lr_mult)),
            (
                "continual.epochs_per_batch".into(),
                self.continual.epochs_per_batch.to_string(),
            ),
            (
                "continual.learning_rate".into(),
                format!("{}", self.continual.learning_rate),
            ),
        ];
        pairs.sort();
        let mut out = String::new();
        for (k, v) in pairs {
            let _ = writeln!(out, "{k} = {v}");
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_defaults_and_comments() {
        let text = "# a comment\nseed = 7\ndata.dir = /tmp/x  # trailing comment\n";
        let cfg = RunConfig::from_text(text, Stage::Finetune, None).unwrap();
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.data.dir, PathBuf::from("/tmp/x"));
        assert_eq!(cfg.train.batch_size, 32);
        assert_eq!(cfg.train.epochs, 30);
        assert_eq!(cfg.continual.epochs_per_batch, 15);
        assert_eq!(cfg.continual.backbone_lr_mult, 0.1);
        assert_eq!(cfg.continual.head_lr_mult, 20.0);
        assert_eq!(cfg.train.mask_ratio, 0.6);
    }

    #[test]
    fn unknown_keys_rejected() {
        let err = RunConfig::from_text("optim.gama = 0.2\n", Stage::Finetune, None);
        assert!(matches!(err, Err(Error::Config(_))));
        let msg = format!("{}", err.unwrap_err());
        assert!(msg.contains("optim.gama"));
    }

    #[test]
    fn seed_override_wins() {
        let cfg = RunConfig::from_text("seed = 7\n", Stage::Pretrain, Some(99)).unwrap();
        assert_eq!(cfg.seed, 99);
    }

    #[test]
    fn stage_mismatch_rejected() {
        let err = RunConfig::from_text("stage = eval\n", Stage::Pretrain, None);
        assert!(err.is_err());
    }

    #[test]
    fn stage_requirements_enforced() {
        assert!(RunConfig::from_text("", Stage::Eval, None).is_err());
        assert!(RunConfig::from_text("init_checkpoint = m.nlck\n", Stage::Eval, None).is_ok());
        assert!(RunConfig::from_text("", Stage::Continual, None).is_err());
    }

    #[test]
    fn numeric_range_validation() {
        assert!(RunConfig::from_text("train.mask_ratio = 1.5\n", Stage::Pretrain, None).is_err());
        assert!(RunConfig::from_text("model.lambda = -0.2\n", Stage::Pretrain, None).is_err());
        assert!(RunConfig::from_text("optim.learning_rate = 0\n", Stage::Pretrain, None).is_err());
        assert!(RunConfig::from_text("model.image_size = 60\n", Stage::Pretrain, None).is_err());
    }

    #[test]
    fn resolved_text_is_sorted_and_complete() {
        let cfg = RunConfig::from_text("seed = 3\n", Stage::Pretrain, None).unwrap();
        let text = cfg.resolved_text();
        let keys: Vec<&str> = text.lines().map(|l| l.split(" = ").next().unwrap()).collect();
        let mut sorted = keys.clone();
        sorted.sort();
        assert_eq!(keys, sorted);
        assert!(text.contains("optim.name = adamw"));
        assert!(text.contains("train.epochs = 20"));
        // round-trips through the parser
        let again = RunConfig::from_text(
            &text.replace("init_checkpoint = -\n", ""),
            Stage::Pretrain,
            None,
        )
        .unwrap();
        assert_eq!(again.seed, 3);
    }

    #[test]
    fn duplicate_keys_rejected() {
        assert!(RunConfig::from_text("seed = 1\nseed = 2\n", Stage::Pretrain, None).is_err());
    }
}
