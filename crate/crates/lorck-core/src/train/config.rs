//! Experiment configuration: flat `key = value` text with `#` comments.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::arch::{ConfigName, ConvLSTMSpec, NetworkConfig, TemporalConvSpec};
use crate::error::{Error, Result};
use crate::loss::{A1LossMode, ClassWeights};
use crate::optim::OptimKind;

/// Loss selection: the combined weighted-BCE + Dice loss, or one of the
/// kernel-generation composites.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LossMode {
    Combined,
    A1(A1LossMode),
}

impl LossMode {
    pub fn as_str(self) -> &'static str {
        match self {
            LossMode::Combined => "combined",
            LossMode::A1(A1LossMode::L1) => "L1",
            LossMode::A1(A1LossMode::L2) => "L2",
            LossMode::A1(A1LossMode::L3) => "L3",
        }
    }
}

impl std::str::FromStr for LossMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "combined" => Ok(LossMode::Combined),
            other => Ok(LossMode::A1(other.parse()?)),
        }
    }
}

/// Every tunable of an experiment run. Defaults are the full-scale training
/// schedule (lr 1e-3 decayed x0.1 every 15000 of 60000 iterations, batch 8,
/// 12-slice sequences).
#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub model: ConfigName,
    pub loss_mode: LossMode,
    pub weights: ClassWeights,
    pub optimizer: OptimKind,
    pub lr: f64,
    pub lr_decay_factor: f64,
    pub lr_decay_period: u64,
    pub iterations: u64,
    pub batch_size: usize,
    pub seq_len: usize,
    pub seed: u64,
    pub dataset: PathBuf,
    pub out_dir: PathBuf,
    pub width_multiplier: f64,
    pub kernel_scale: f64,
    pub eval_period: u64,
    pub mask_source: MaskSourceKind,
    pub hollow_mu: f64,
    /// 0 = band fan-in scaling.
    pub hollow_sigma: f64,
    pub bilstm_layers: usize,
    pub bilstm_kernel: usize,
    pub bilstm_hidden: usize,
    pub temporal_layers: usize,
    pub temporal_k1: usize,
    pub temporal_k23: usize,
    pub temporal_per_channel: bool,
    pub resume: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    // dataset generation (the `synth` subcommand)
    pub stacks: usize,
    pub train_stacks: usize,
    pub size: usize,
    pub difficulty: crate::synth::Difficulty,
    // kernel-scale study (the `kernel-study` subcommand)
    pub study_kernel_sizes: Vec<usize>,
    pub study_wall_width: f64,
    pub study_semi_axes: (f64, f64),
    pub study_noise_sigma: f64,
    // rendering
    pub render_stack: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            model: ConfigName::UNetDilated,
            loss_mode: LossMode::Combined,
            weights: ClassWeights::default(),
            optimizer: OptimKind::MaskedAdam,
            lr: 1e-3,
            lr_decay_factor: 0.1,
            lr_decay_period: 15_000,
            iterations: 60_000,
            batch_size: 8,
            seq_len: 12,
            seed: 0,
            dataset: PathBuf::from("data/phantom"),
            out_dir: PathBuf::from("runs/default"),
            width_multiplier: 1.0,
            kernel_scale: 1.0,
            eval_period: 0,
            mask_source: MaskSourceKind::Annulus,
            hollow_mu: 0.0,
            hollow_sigma: 0.0,
            bilstm_layers: 0,
            bilstm_kernel: 3,
            bilstm_hidden: 0,
            temporal_layers: 0,
            temporal_k1: 5,
            temporal_k23: 3,
            temporal_per_channel: false,
            resume: None,
            checkpoint: None,
            stacks: 24,
            train_stacks: 18,
            size: 64,
            difficulty: crate::synth::Difficulty::Easy,
            study_kernel_sizes: vec![3, 10, 20, 40],
            study_wall_width: 5.0,
            study_semi_axes: (15.0, 15.0),
            study_noise_sigma: 0.0,
            render_stack: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MaskSourceKind {
    /// Analytic annulus bands.
    Annulus,
    /// Resampled from a training-set outer-wall annotation.
    Annotation,
}

impl std::str::FromStr for MaskSourceKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "annulus" => Ok(MaskSourceKind::Annulus),
            "annotation" => Ok(MaskSourceKind::Annotation),
            other => Err(Error::Config(format!("unknown mask_source `{}`", other))),
        }
    }
}

const VALID_KEYS: &[&str] = &[
    "model",
    "loss_mode",
    "alpha",
    "class_weights",
    "positive_weights",
    "optimizer",
    "lr",
    "lr_decay_factor",
    "lr_decay_period",
    "iterations",
    "batch_size",
    "seq_len",
    "seed",
    "dataset",
    "out_dir",
    "width_multiplier",
    "kernel_scale",
    "eval_period",
    "mask_source",
    "hollow_mu",
    "hollow_sigma",
    "bilstm_layers",
    "bilstm_kernel",
    "bilstm_hidden",
    "temporal_layers",
    "temporal_k1",
    "temporal_k23",
    "temporal_per_channel",
    "resume",
    "checkpoint",
    "stacks",
    "train_stacks",
    "size",
    "difficulty",
    "study_kernel_sizes",
    "study_wall_width",
    "study_semi_axes",
    "study_noise_sigma",
    "render_stack",
];

fn parse_list_f64(v: &str) -> Result<Vec<f64>> {
    v.split(',')
        .map(|p| p.trim().parse::<f64>().map_err(|_| Error::Config(format!("bad number `{}`", p))))
        .collect()
}

fn parse_list_usize(v: &str) -> Result<Vec<usize>> {
    v.split(',')
        .map(|p| p.trim().parse::<usize>().map_err(|_| Error::Config(format!("bad integer `{}`", p))))
        .collect()
}

impl ExperimentConfig {
    /// Apply one `key = value` assignment.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let num = |v: &str| -> Result<f64> {
            v.parse::<f64>().map_err(|_| Error::Config(format!("bad number `{}` for {}", v, key)))
        };
        let int = |v: &str| -> Result<u64> {
            v.parse::<u64>().map_err(|_| Error::Config(format!("bad integer `{}` for {}", v, key)))
        };
        match key {
            "model" => {
                // A1 names may carry a loss suffix, e.g. `A1-1.1L2`
                if let Some(mode) = ["L1", "L2", "L3"].iter().find(|m| value.ends_with(*m)) {
                    let base = &value[..value.len() - 2];
                    if base.eq_ignore_ascii_case("A1-1.1") {
                        self.model = ConfigName::A1_1_1;
                        self.loss_mode = LossMode::A1(mode.parse()?);
                        return Ok(());
                    }
                }
                self.model = value.parse()?;
            }
            "loss_mode" => self.loss_mode = value.parse()?,
            "alpha" => self.weights.alpha = num(value)?,
            "class_weights" => self.weights.class_weights = parse_list_f64(value)?,
            "positive_weights" => self.weights.positive_weights = parse_list_f64(value)?,
            "optimizer" => self.optimizer = value.parse()?,
            "lr" => self.lr = num(value)?,
            "lr_decay_factor" => self.lr_decay_factor = num(value)?,
            "lr_decay_period" => self.lr_decay_period = int(value)?,
            "iterations" => self.iterations = int(value)?,
            "batch_size" => self.batch_size = int(value)? as usize,
            "seq_len" => self.seq_len = int(value)? as usize,
            "seed" => self.seed = int(value)?,
            "dataset" => self.dataset = PathBuf::from(value),
            "out_dir" => self.out_dir = PathBuf::from(value),
            "width_multiplier" => self.width_multiplier = num(value)?,
            "kernel_scale" => self.kernel_scale = num(value)?,
            "eval_period" => self.eval_period = int(value)?,
            "mask_source" => self.mask_source = value.parse()?,
            "hollow_mu" => self.hollow_mu = num(value)?,
            "hollow_sigma" => self.hollow_sigma = num(value)?,
            "bilstm_layers" => self.bilstm_layers = int(value)? as usize,
            "bilstm_kernel" => self.bilstm_kernel = int(value)? as usize,
            "bilstm_hidden" => self.bilstm_hidden = int(value)? as usize,
            "temporal_layers" => self.temporal_layers = int(value)? as usize,
            "temporal_k1" => self.temporal_k1 = int(value)? as usize,
            "temporal_k23" => self.temporal_k23 = int(value)? as usize,
            "temporal_per_channel" => {
                self.temporal_per_channel = matches!(value, "1" | "true" | "yes")
            }
            "resume" => {
                self.resume = if value.is_empty() { None } else { Some(PathBuf::from(value)) }
            }
            "checkpoint" => {
                self.checkpoint = if value.is_empty() { None } else { Some(PathBuf::from(value)) }
            }
            "stacks" => self.stacks = int(value)? as usize,
            "train_stacks" => self.train_stacks = int(value)? as usize,
            "size" => self.size = int(value)? as usize,
            "difficulty" => self.difficulty = value.parse()?,
            "study_kernel_sizes" => self.study_kernel_sizes = parse_list_usize(value)?,
            "study_wall_width" => self.study_wall_width = num(value)?,
            "study_semi_axes" => {
                let parts = parse_list_f64(value)?;
                self.study_semi_axes = match parts.as_slice() {
                    [a] => (*a, *a),
                    [a, b] => (*a, *b),
                    _ => return Err(Error::Config("study_semi_axes wants `a` or `a,b`".into())),
                };
            }
            "study_noise_sigma" => self.study_noise_sigma = num(value)?,
            "render_stack" => self.render_stack = int(value)? as usize,
            other => {
                return Err(Error::Config(format!(
                    "unknown key `{}`; valid keys: {}",
                    other,
                    VALID_KEYS.join(", ")
                )))
            }
        }
        Ok(())
    }

    /// Parse a config file body over the defaults.
    pub fn from_text(text: &str) -> Result<Self> {
        let mut config = ExperimentConfig::default();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected `key = value`, got `{}`", lineno + 1, line))
            })?;
            config.set(k.trim(), v.trim())?;
        }
        Ok(config)
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path.as_ref())
            .map_err(|e| Error::Config(format!("cannot read {}: {}", path.as_ref().display(), e)))?;
        Self::from_text(&text)
    }

    /// Apply `--set key=value` overrides.
    pub fn apply_overrides(&mut self, overrides: &[String]) -> Result<()> {
        for item in overrides {
            let (k, v) = item
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("--set wants key=value, got `{}`", item)))?;
            self.set(k.trim(), v.trim())?;
        }
        Ok(())
    }

    /// The fully resolved key = value text (stable ordering).
    pub fn resolved_text(&self) -> String {
        let mut kv: BTreeMap<&str, String> = BTreeMap::new();
        kv.insert("model", self.model.as_str().to_string());
        kv.insert("loss_mode", self.loss_mode.as_str().to_string());
        kv.insert("alpha", self.weights.alpha.to_string());
        kv.insert(
            "class_weights",
            self.weights.class_weights.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(","),
        );
        kv.insert(
            "positive_weights",
            self.weights.positive_weights.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(","),
        );
        kv.insert(
            "optimizer",
            match self.optimizer {
                OptimKind::MaskedAdam => "masked-adam".into(),
                OptimKind::MaskedSgd => "masked-sgd".into(),
            },
        );
        kv.insert("lr", self.lr.to_string());
        kv.insert("lr_decay_factor", self.lr_decay_factor.to_string());
        kv.insert("lr_decay_period", self.lr_decay_period.to_string());
        kv.insert("iterations", self.iterations.to_string());
        kv.insert("batch_size", self.batch_size.to_string());
        kv.insert("seq_len", self.seq_len.to_string());
        kv.insert("seed", self.seed.to_string());
        kv.insert("dataset", self.dataset.display().to_string());
        kv.insert("out_dir", self.out_dir.display().to_string());
        kv.insert("width_multiplier", self.width_multiplier.to_string());
        kv.insert("kernel_scale", self.kernel_scale.to_string());
        kv.insert("eval_period", self.eval_period.to_string());
        kv.insert(
            "mask_source",
            match self.mask_source {
                MaskSourceKind::Annulus => "annulus".into(),
                MaskSourceKind::Annotation => "annotation".into(),
            },
        );
        kv.insert("hollow_mu", self.hollow_mu.to_string());
        kv.insert("hollow_sigma", self.hollow_sigma.to_string());
        kv.insert("bilstm_layers", self.bilstm_layers.to_string());
        kv.insert("bilstm_kernel", self.bilstm_kernel.to_string());
        kv.insert("bilstm_hidden", self.bilstm_hidden.to_string());
        kv.insert("temporal_layers", self.temporal_layers.to_string());
        kv.insert("temporal_k1", self.temporal_k1.to_string());
        kv.insert("temporal_k23", self.temporal_k23.to_string());
        kv.insert("temporal_per_channel", (self.temporal_per_channel as u8).to_string());
        kv.insert("resume", self.resume.as_ref().map(|p| p.display().to_string()).unwrap_or_default());
        kv.insert(
            "checkpoint",
            self.checkpoint.as_ref().map(|p| p.display().to_string()).unwrap_or_default(),
        );
        kv.insert("stacks", self.stacks.to_string());
        kv.insert("train_stacks", self.train_stacks.to_string());
        kv.insert("size", self.size.to_string());
        kv.insert("difficulty", self.difficulty.name().to_string());
        kv.insert(
            "study_kernel_sizes",
            self.study_kernel_sizes.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(","),
        );
        kv.insert("study_wall_width", self.study_wall_width.to_string());
        kv.insert(
            "study_semi_axes",
            format!("{},{}", self.study_semi_axes.0, self.study_semi_axes.1),
        );
        kv.insert("study_noise_sigma", self.study_noise_sigma.to_string());
        kv.insert("render_stack", self.render_stack.to_string());
        let mut out = String::new();
        for (k, v) in kv {
            let _ = writeln!(out, "{} = {}", k, v);
        }
        out
    }

    /// Hash of the model-defining keys: everything that must match for a
    /// checkpoint to be resumable (schedule length, output paths and the
    /// resume/checkpoint pointers are excluded).
    pub fn model_hash(&self) -> u64 {
        let mut text = String::new();
        for line in self.resolved_text().lines() {
            let key = line.split('=').next().unwrap_or("").trim();
            if matches!(key, "iterations" | "resume" | "checkpoint" | "out_dir" | "eval_period" | "render_stack") {
                continue;
            }
            text.push_str(line);
            text.push('\n');
        }
        // FNV-1a
        let mut hash: u64 = 0xcbf29ce484222325;
        for b in text.bytes() {
            hash ^= b as u64;
            hash = hash.wrapping_mul(0x100000001b3);
        }
        hash
    }

    /// The architecture selection this experiment trains.
    pub fn network_config(&self) -> Result<NetworkConfig> {
        let mut cfg = NetworkConfig::named(self.model);
        cfg.width = self.width_multiplier;
        cfg.kernel_scale = self.kernel_scale;
        if self.temporal_layers > 0 {
            cfg.temporal = Some(TemporalConvSpec {
                kernel: (self.temporal_k1, self.temporal_k23, self.temporal_k23),
                layers: self.temporal_layers,
                per_channel: self.temporal_per_channel,
            });
        }
        if self.bilstm_layers > 0 {
            cfg.bilstm = Some(ConvLSTMSpec {
                hidden: if self.bilstm_hidden == 0 { None } else { Some(self.bilstm_hidden) },
                kernel: self.bilstm_kernel,
                layers: self.bilstm_layers,
            });
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Whether training consumes whole stacks (temporal context) rather than
    /// independent slices.
    pub fn stack_mode(&self) -> bool {
        self.temporal_layers > 0 || self.bilstm_layers > 0
    }

    /// Desk-scale preset: small widths and a short schedule so a full
    /// experiment fits in CPU minutes.
    pub fn desk_preset() -> Self {
        let mut cfg = ExperimentConfig::default();
        cfg.iterations = 2000;
        cfg.batch_size = 1;
        cfg.width_multiplier = 0.25;
        cfg.kernel_scale = 0.5;
        cfg.eval_period = 500;
        cfg.stacks = 24;
        cfg.train_stacks = 18;
        cfg.size = 64;
        cfg
    }
}

/// lr(eta) = base * factor^floor(eta / period), computed by iterated
/// multiplication so consecutive stages differ by exactly one multiply.
pub fn lr_at(base: f64, factor: f64, period: u64, iteration: u64) -> f64 {
    if period == 0 {
        return base;
    }
    let k = iteration / period;
    let mut lr = base;
    for _ in 0..k {
        lr *= factor;
    }
    lr
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_through_resolved_text() {
        let mut cfg = ExperimentConfig::desk_preset();
        cfg.set("model", "A2-2.1").unwrap();
        cfg.set("seed", "7").unwrap();
        let back = ExperimentConfig::from_text(&cfg.resolved_text()).unwrap();
        assert_eq!(cfg, back);
    }

    #[test]
    fn unknown_key_lists_valid_keys() {
        let mut cfg = ExperimentConfig::default();
        let err = cfg.set("learning_rate", "0.1").unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("unknown key") && msg.contains("lr") && msg.contains("model"));
    }

    #[test]
    fn a1_model_string_carries_loss_mode() {
        let mut cfg = ExperimentConfig::default();
        cfg.set("model", "A1-1.1L3").unwrap();
        assert_eq!(cfg.model, ConfigName::A1_1_1);
        assert_eq!(cfg.loss_mode, LossMode::A1(A1LossMode::L3));
    }

    #[test]
    fn schedule_boundaries() {
        assert_eq!(lr_at(1e-3, 0.1, 15_000, 0), 1e-3);
        assert_eq!(lr_at(1e-3, 0.1, 15_000, 14_999), 1e-3);
        assert_eq!(lr_at(1e-3, 0.1, 15_000, 15_000), 1e-3 * 0.1);
        assert_eq!(lr_at(1e-3, 0.1, 15_000, 30_000), 1e-3 * 0.1 * 0.1);
        assert!((lr_at(1e-3, 0.1, 15_000, 15_000) - 1e-4).abs() < 1e-15);
        assert!((lr_at(1e-3, 0.1, 15_000, 30_000) - 1e-5).abs() < 1e-16);
    }

    #[test]
    fn model_hash_ignores_schedule_length() {
        let mut a = ExperimentConfig::desk_preset();
        let mut b = a.clone();
        b.iterations = 123;
        b.resume = Some(PathBuf::from("somewhere.lorck"));
        assert_eq!(a.model_hash(), b.model_hash());
        b.seed = 99;
        assert_ne!(a.model_hash(), b.model_hash());
        a.seed = 99;
        assert_eq!(a.model_hash(), b.model_hash());
    }
}
