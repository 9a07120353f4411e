//! Run configuration and its `key = value` text form.

use std::collections::BTreeSet;
use std::path::PathBuf;

use bootvit_core::arch::{AgentVariant, ArchConfig, Downsample};
use bootvit_core::bootstrap::UpdateRule;
use bootvit_core::objectives::{AdaptMode, Decay, LossWeights};
use bootvit_core::optim::AdamW;

use crate::data::Flavor;
use crate::error::{config, HarnessError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Scheme {
    ScratchVit,
    ScratchAgent,
    Joint,
    Shared,
}

impl Scheme {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "scratch-vit" => Some(Self::ScratchVit),
            "scratch-agent" => Some(Self::ScratchAgent),
            "joint" => Some(Self::Joint),
            "shared" => Some(Self::Shared),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Self::ScratchVit => "scratch-vit",
            Self::ScratchAgent => "scratch-agent",
            Self::Joint => "joint",
            Self::Shared => "shared",
        }
    }

    pub fn has_vit(self) -> bool {
        self != Self::ScratchAgent
    }

    pub fn has_agent(self) -> bool {
        self != Self::ScratchVit
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub scheme: Scheme,
    pub arch_name: String,
    pub arch: ArchConfig,
    pub weights: LossWeights,
    pub optim: AdamW,
    pub rule: UpdateRule,
    pub epochs: usize,
    pub batch_size: usize,
    pub data_dir: PathBuf,
    pub flavor: Flavor,
    pub fraction: f64,
    /// Validation images used per evaluation; 0 means the whole test split.
    pub val_limit: usize,
    pub seed: u64,
    pub augment: bool,
    pub crop_scale_min: f64,
    pub flip_p: f64,
    pub out_dir: PathBuf,
    pub checkpoints: bool,
    /// Ablation toggles applied to this run, for the summary.
    pub ablation: String,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            scheme: Scheme::Joint,
            arch_name: "desk".into(),
            arch: ArchConfig::desk(),
            weights: LossWeights::default(),
            optim: AdamW::default(),
            rule: UpdateRule::AdamW,
            epochs: 30,
            batch_size: 64,
            data_dir: PathBuf::from("data/cifar-10-batches-bin"),
            flavor: Flavor::Cifar10,
            fraction: 0.1,
            val_limit: 0,
            seed: 0,
            augment: true,
            crop_scale_min: 0.7,
            flip_p: 0.5,
            out_dir: PathBuf::from("runs/default"),
            checkpoints: true,
            ablation: "none".into(),
        }
    }
}

fn num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| HarnessError::Config(format!("{key}: cannot parse {value:?}")))
}

fn flag(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "yes" | "1" | "on" => Ok(true),
        "false" | "no" | "0" | "off" => Ok(false),
        _ => config(format!("{key}: expected a boolean, got {value:?}")),
    }
}

fn choice<T>(key: &str, value: &str, parsed: Option<T>) -> Result<T> {
    parsed.ok_or_else(|| HarnessError::Config(format!("{key}: unknown value {value:?}")))
}

pub const KEYS: &[&str] = &[
    "scheme",
    "arch",
    "layers",
    "hidden",
    "heads",
    "patch",
    "image_size",
    "classes",
    "mlp_ratio",
    "agent",
    "downsample",
    "alpha",
    "beta",
    "temperature",
    "decay",
    "supervised_layers",
    "adapt",
    "kd_hard",
    "kd_soft",
    "detach_agent_feat",
    "lr",
    "beta1",
    "beta2",
    "eps",
    "weight_decay",
    "update_rule",
    "epochs",
    "batch_size",
    "data_dir",
    "flavor",
    "fraction",
    "val_limit",
    "seed",
    "augment",
    "crop_scale_min",
    "flip_p",
    "out_dir",
    "checkpoints",
    "ablation",
];

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key {
            "scheme" => self.scheme = choice(key, v, Scheme::parse(v))?,
            "arch" => {
                self.arch = choice(key, v, ArchConfig::preset(v))?;
                self.arch_name = v.to_string();
            }
            "layers" => self.arch.layers = num(key, v)?,
            "hidden" => self.arch.hidden = num(key, v)?,
            "heads" => self.arch.heads = num(key, v)?,
            "patch" => self.arch.patch = num(key, v)?,
            "image_size" => self.arch.image_size = num(key, v)?,
            "classes" => self.arch.classes = num(key, v)?,
            "mlp_ratio" => self.arch.mlp_ratio = num(key, v)?,
            "agent" => self.arch.agent_variant = choice(key, v, AgentVariant::parse(v))?,
            "downsample" => self.arch.downsample = choice(key, v, Downsample::parse(v))?,
            "alpha" => self.weights.alpha = num(key, v)?,
            "beta" => self.weights.beta = num(key, v)?,
            "temperature" => self.weights.temperature = num(key, v)?,
            "decay" => {
                self.weights.decay = match v {
                    "linear" => Decay::Linear,
                    "none" => Decay::None,
                    _ => return config(format!("decay: unknown value {v:?}")),
                }
            }
            "supervised_layers" => {
                self.weights.layers = match v {
                    "all" => None,
                    "" | "none" => Some(BTreeSet::new()),
                    list => Some(list.split(',').map(|s| num(key, s.trim())).collect::<Result<_>>()?),
                }
            }
            "adapt" => self.weights.adapt = choice(key, v, AdaptMode::parse(v))?,
            "kd_hard" => self.weights.kd_hard = num(key, v)?,
            "kd_soft" => self.weights.kd_soft = num(key, v)?,
            "detach_agent_feat" => self.weights.detach_agent_feat = flag(key, v)?,
            "lr" => self.optim.lr = num(key, v)?,
            "beta1" => self.optim.beta1 = num(key, v)?,
            "beta2" => self.optim.beta2 = num(key, v)?,
            "eps" => self.optim.eps = num(key, v)?,
            "weight_decay" => self.optim.weight_decay = num(key, v)?,
            "update_rule" => {
                self.rule = match v {
                    "adamw" => UpdateRule::AdamW,
                    "sgd" => UpdateRule::Sgd,
                    _ => return config(format!("update_rule: unknown value {v:?}")),
                }
            }
            "epochs" => self.epochs = num(key, v)?,
            "batch_size" => self.batch_size = num(key, v)?,
            "data_dir" => self.data_dir = PathBuf::from(v),
            "flavor" => self.flavor = choice(key, v, Flavor::parse(v))?,
            "fraction" => self.fraction = num(key, v)?,
            "val_limit" => self.val_limit = num(key, v)?,
            "seed" => self.seed = num(key, v)?,
            "augment" => self.augment = flag(key, v)?,
            "crop_scale_min" => self.crop_scale_min = num(key, v)?,
            "flip_p" => self.flip_p = num(key, v)?,
            "out_dir" => self.out_dir = PathBuf::from(v),
            "checkpoints" => self.checkpoints = flag(key, v)?,
            "ablation" => self.ablation = v.to_string(),
            _ => return config(format!("unknown key {key:?}")),
        }
        Ok(())
    }

    /// Applies pairs in order, presets first so that individual
    /// architecture keys refine them.
    pub fn apply(&mut self, pairs: &[(String, String)]) -> Result<()> {
        for (k, v) in pairs.iter().filter(|(k, _)| k == "arch") {
            self.set(k, v)?;
        }
        for (k, v) in pairs.iter().filter(|(k, _)| k != "arch") {
            self.set(k, v)?;
        }
        Ok(())
    }

    /// Every key with its current value, in [`KEYS`] order.
    pub fn pairs(&self) -> Vec<(String, String)> {
        let w = &self.weights;
        let layers = match &w.layers {
            None => "all".to_string(),
            Some(s) if s.is_empty() => "none".to_string(),
            Some(s) => s.iter().map(|l| l.to_string()).collect::<Vec<_>>().join(","),
        };
        let values = [
            self.scheme.as_str().to_string(),
            self.arch_name.clone(),
            self.arch.layers.to_string(),
            self.arch.hidden.to_string(),
            self.arch.heads.to_string(),
            self.arch.patch.to_string(),
            self.arch.image_size.to_string(),
            self.arch.classes.to_string(),
            self.arch.mlp_ratio.to_string(),
            self.arch.agent_variant.as_str().to_string(),
            self.arch.downsample.as_str().to_string(),
            w.alpha.to_string(),
            w.beta.to_string(),
            w.temperature.to_string(),
            match w.decay {
                Decay::Linear => "linear",
                Decay::None => "none",
            }
            .to_string(),
            layers,
            w.adapt.as_str().to_string(),
            w.kd_hard.to_string(),
            w.kd_soft.to_string(),
            w.detach_agent_feat.to_string(),
            self.optim.lr.to_string(),
            self.optim.beta1.to_string(),
            self.optim.beta2.to_string(),
            self.optim.eps.to_string(),
            self.optim.weight_decay.to_string(),
            match self.rule {
                UpdateRule::AdamW => "adamw",
                UpdateRule::Sgd => "sgd",
            }
            .to_string(),
            self.epochs.to_string(),
            self.batch_size.to_string(),
            self.data_dir.display().to_string(),
            self.flavor.as_str().to_string(),
            self.fraction.to_string(),
            self.val_limit.to_string(),
            self.seed.to_string(),
            self.augment.to_string(),
            self.crop_scale_min.to_string(),
            self.flip_p.to_string(),
            self.out_dir.display().to_string(),
            self.checkpoints.to_string(),
            self.ablation.clone(),
        ];
        KEYS.iter().zip(values).map(|(k, v)| (k.to_string(), v)).collect()
    }

    pub fn to_text(&self) -> String {
        self.pairs().iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    pub fn validate(&self) -> Result<()> {
        self.arch.validate()?;
        self.weights.validate(self.arch.layers)?;
        if !(self.fraction > 0.0 && self.fraction <= 1.0) {
            return config(format!("fraction {} outside (0, 1]", self.fraction));
        }
        if self.batch_size == 0 {
            return config("batch_size must be positive");
        }
        if !(0.0..=1.0).contains(&self.crop_scale_min) || !(0.0..=1.0).contains(&self.flip_p) {
            return config("crop_scale_min and flip_p must lie in [0, 1]");
        }
        if self.arch.channels != crate::data::CHANNELS {
            return config("CIFAR images have 3 channels");
        }
        if self.arch.classes < self.flavor.classes() {
            return config(format!("{} classes cannot hold {} labels", self.arch.classes, self.flavor.as_str()));
        }
        Ok(())
    }
}

/// Parses `key = value` lines; `#` starts a comment.
pub fn parse_kv(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return config(format!("line {}: expected key = value, got {raw:?}", i + 1));
        };
        let k = k.trim();
        if !KEYS.contains(&k) {
            return config(format!("line {}: unknown key {k:?}", i + 1));
        }
        out.push((k.to_string(), v.trim().to_string()));
    }
    Ok(out)
}

/// Defaults, then command-line pairs, then file pairs.
pub fn resolve(flags: &[(String, String)], file: Option<&str>) -> Result<RunConfig> {
    let mut cfg = RunConfig::default();
    cfg.apply(flags)?;
    if let Some(text) = file {
        cfg.apply(&parse_kv(text)?)?;
    }
    cfg.validate()?;
    Ok(cfg)
}
