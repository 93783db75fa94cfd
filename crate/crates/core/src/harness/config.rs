use super::HarnessError;
use crate::dataset::Split;
use crate::nn::Activation;
use crate::objectives::LossWeights;
use crate::person::{PoseKind, PoseMode};
use crate::tryon::TryonConfig;
use serde::{Deserialize, Serialize};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

/// Everything that defines one training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub dataset: PathBuf,
    pub split: Split,
    /// Split scored by `evaluate` (and by the grid after each cell trains).
    pub eval_split: Split,
    pub pose_mode: PoseKind,
    pub attention: bool,
    pub activation: Activation,
    pub flow: bool,
    pub epochs: usize,
    pub accumulated_batch: usize,
    pub micro_batch: usize,
    pub lr: f64,
    pub decay_start_epoch: usize,
    pub mixed_precision: bool,
    pub seed: u64,
    pub loss_weights: LossWeights,
    pub out_dir: PathBuf,
    pub base_width: usize,
    pub depth: usize,
    /// Keypoint disc radius; derived from the frame height when absent.
    pub heatmap_radius: Option<usize>,
    /// Stop after this many optimizer steps (whole run).
    pub max_steps: Option<usize>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            dataset: PathBuf::from("data"),
            split: Split::Train,
            eval_split: Split::Test,
            pose_mode: PoseKind::Coco,
            attention: false,
            activation: Activation::Relu,
            flow: false,
            epochs: 10,
            accumulated_batch: 64,
            micro_batch: 8,
            lr: 1e-4,
            decay_start_epoch: 5,
            mixed_precision: true,
            seed: 0,
            loss_weights: LossWeights::default(),
            out_dir: PathBuf::from("runs/default"),
            base_width: 32,
            depth: 4,
            heatmap_radius: None,
            max_steps: None,
        }
    }
}

/// Keys accepted by [`ExperimentConfig::set`], in file order.
pub const CONFIG_KEYS: [&str; 22] = [
    "dataset",
    "split",
    "eval_split",
    "pose_mode",
    "attention",
    "activation",
    "flow",
    "epochs",
    "accumulated_batch",
    "micro_batch",
    "lr",
    "decay_start_epoch",
    "mixed_precision",
    "seed",
    "w_l1",
    "w_mask",
    "w_vgg",
    "lambda_f",
    "out_dir",
    "base_width",
    "depth",
    "heatmap_radius",
];

fn parse<V: std::str::FromStr>(key: &str, value: &str) -> Result<V, HarnessError>
where
    V::Err: std::fmt::Display,
{
    value.parse().map_err(|e| HarnessError::Config(format!("{key} = {value}: {e}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool, HarnessError> {
    match value.to_ascii_lowercase().as_str() {
        "true" | "on" | "yes" | "1" => Ok(true),
        "false" | "off" | "no" | "0" => Ok(false),
        _ => Err(HarnessError::Config(format!("{key} = {value}: expected a boolean"))),
    }
}

impl ExperimentConfig {
    /// Settings tuned for a given frame height: 64-pixel frames use the small network.
    pub fn for_height(height: usize) -> Self {
        let mut cfg = Self::default();
        if height >= 192 {
            cfg.base_width = 64;
            cfg.depth = 6;
            cfg.micro_batch = 4;
        }
        cfg
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<(), HarnessError> {
        let v = value.trim();
        match key.trim() {
            "dataset" => self.dataset = PathBuf::from(v),
            "split" => self.split = parse(key, v)?,
            "eval_split" => self.eval_split = parse(key, v)?,
            "pose_mode" => self.pose_mode = parse(key, v)?,
            "attention" => self.attention = parse_bool(key, v)?,
            "activation" => self.activation = parse(key, v)?,
            "flow" => self.flow = parse_bool(key, v)?,
            "epochs" => self.epochs = parse(key, v)?,
            "accumulated_batch" => self.accumulated_batch = parse(key, v)?,
            "micro_batch" => self.micro_batch = parse(key, v)?,
            "lr" => self.lr = parse(key, v)?,
            "decay_start_epoch" => self.decay_start_epoch = parse(key, v)?,
            "mixed_precision" => self.mixed_precision = parse_bool(key, v)?,
            "seed" => self.seed = parse(key, v)?,
            "w_l1" => self.loss_weights.w_l1 = parse(key, v)?,
            "w_mask" => self.loss_weights.w_mask = parse(key, v)?,
            "w_vgg" => self.loss_weights.w_vgg = parse(key, v)?,
            "lambda_f" => self.loss_weights.lambda_f = parse(key, v)?,
            "out_dir" => self.out_dir = PathBuf::from(v),
            "base_width" => self.base_width = parse(key, v)?,
            "depth" => self.depth = parse(key, v)?,
            "heatmap_radius" => {
                self.heatmap_radius = if v == "auto" { None } else { Some(parse(key, v)?) };
            }
            "max_steps" => {
                self.max_steps = if v == "none" { None } else { Some(parse(key, v)?) };
            }
            other => return Err(HarnessError::Config(format!("unknown config key `{other}`"))),
        }
        Ok(())
    }

    /// Current value of a key, in the same syntax `set` accepts.
    pub fn get(&self, key: &str) -> Option<String> {
        Some(match key {
            "dataset" => self.dataset.display().to_string(),
            "split" => self.split.to_string(),
            "eval_split" => self.eval_split.to_string(),
            "pose_mode" => self.pose_mode.to_string(),
            "attention" => self.attention.to_string(),
            "activation" => self.activation.to_string(),
            "flow" => self.flow.to_string(),
            "epochs" => self.epochs.to_string(),
            "accumulated_batch" => self.accumulated_batch.to_string(),
            "micro_batch" => self.micro_batch.to_string(),
            "lr" => format!("{:?}", self.lr),
            "decay_start_epoch" => self.decay_start_epoch.to_string(),
            "mixed_precision" => self.mixed_precision.to_string(),
            "seed" => self.seed.to_string(),
            "w_l1" => format!("{:?}", self.loss_weights.w_l1),
            "w_mask" => format!("{:?}", self.loss_weights.w_mask),
            "w_vgg" => format!("{:?}", self.loss_weights.w_vgg),
            "lambda_f" => format!("{:?}", self.loss_weights.lambda_f),
            "out_dir" => self.out_dir.display().to_string(),
            "base_width" => self.base_width.to_string(),
            "depth" => self.depth.to_string(),
            "heatmap_radius" => self.heatmap_radius.map_or("auto".into(), |r| r.to_string()),
            "max_steps" => self.max_steps.map_or("none".into(), |r| r.to_string()),
            _ => return None,
        })
    }

    /// Apply `key = value` lines on top of `self`. Blank lines and `#` comments are ignored.
    pub fn apply_text(&mut self, text: &str) -> Result<(), HarnessError> {
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| HarnessError::Config(format!("line {}: expected key = value", n + 1)))?;
            self.set(k, v)?;
        }
        Ok(())
    }

    pub fn from_text(text: &str) -> Result<Self, HarnessError> {
        let mut cfg = Self::default();
        cfg.apply_text(text)?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self, HarnessError> {
        let text = std::fs::read_to_string(path).map_err(|source| HarnessError::io(path, source))?;
        Self::from_text(&text)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for key in CONFIG_KEYS.iter().chain(["max_steps"].iter()) {
            writeln!(s, "{key} = {}", self.get(key).unwrap()).unwrap();
        }
        s
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        let bad = |m: String| Err(HarnessError::Config(m));
        if self.epochs == 0 {
            return bad("epochs must be at least 1".into());
        }
        if self.micro_batch == 0 || self.accumulated_batch == 0 {
            return bad("batch sizes must be positive".into());
        }
        if !self.accumulated_batch.is_multiple_of(self.micro_batch) {
            return bad(format!(
                "accumulated_batch {} is not divisible by micro_batch {}",
                self.accumulated_batch, self.micro_batch
            ));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return bad(format!("lr {} must be positive", self.lr));
        }
        if self.heatmap_radius == Some(0) {
            return bad("heatmap_radius must be at least 1".into());
        }
        self.loss_weights.validate().map_err(|e| HarnessError::Config(e.to_string()))?;
        self.tryon_config().validate()?;
        Ok(())
    }

    pub fn tryon_config(&self) -> TryonConfig {
        TryonConfig::for_pose(self.pose_mode, self.base_width, self.depth, self.attention, self.activation, self.seed)
    }

    pub fn pose_mode_for(&self, height: usize) -> PoseMode {
        let mut mode = PoseMode::for_height(self.pose_mode, height);
        if let Some(r) = self.heatmap_radius {
            mode.heatmap_radius = r;
        }
        mode
    }
}

/// Learning rate for an epoch: constant until `decay_start_epoch`, then linear to zero at `epochs`.
pub fn lr_schedule(epoch: usize, cfg: &ExperimentConfig) -> f64 {
    if epoch < cfg.decay_start_epoch || cfg.epochs <= cfg.decay_start_epoch {
        return cfg.lr;
    }
    let progress = (epoch - cfg.decay_start_epoch) as f64 / (cfg.epochs - cfg.decay_start_epoch) as f64;
    cfg.lr * (1.0 - progress).max(0.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_values() {
        let cfg = ExperimentConfig::default();
        assert_eq!(lr_schedule(0, &cfg), 1e-4);
        assert_eq!(lr_schedule(5, &cfg), 1e-4);
        assert!((lr_schedule(9, &cfg) - 2e-5).abs() < 1e-15);
        let lrs: Vec<f64> = (0..cfg.epochs).map(|e| lr_schedule(e, &cfg)).collect();
        assert!(lrs.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn text_round_trip() {
        let mut cfg = ExperimentConfig::default();
        cfg.set("activation", "gelu").unwrap();
        cfg.set("lambda_f", "2500").unwrap();
        cfg.set("heatmap_radius", "2").unwrap();
        cfg.set("max_steps", "7").unwrap();
        assert_eq!(ExperimentConfig::from_text(&cfg.to_text()).unwrap(), cfg);
    }

    #[test]
    fn bad_input_rejected() {
        assert!(ExperimentConfig::from_text("colour = red").is_err());
        assert!(ExperimentConfig::from_text("epochs").is_err());
        assert!(ExperimentConfig::from_text("activation = tanh").is_err());
        let cfg = ExperimentConfig::from_text("accumulated_batch = 10\nmicro_batch = 4 # comment").unwrap();
        assert!(cfg.validate().is_err());
    }
}
