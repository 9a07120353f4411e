//! Objective toggles for ablation runs.

use bootvit_core::objectives::{AdaptMode, Decay};

use crate::config::RunConfig;
use crate::error::{config, Result};

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Toggles {
    pub no_mutual: bool,
    pub no_feat: bool,
    pub no_decay: bool,
    pub avg_pool_adapt: bool,
    /// 1-based layers whose feature term is removed.
    pub drop_layers: Vec<usize>,
    /// Accept `no_feat` together with `no_mutual`, which leaves plain
    /// cross-entropy for both networks.
    pub allow_scratch: bool,
}

impl Toggles {
    pub fn label(&self) -> String {
        let mut parts = Vec::new();
        if self.no_feat {
            parts.push("no-feat".to_string());
        }
        if self.no_mutual {
            parts.push("no-mutual".to_string());
        }
        if self.no_decay {
            parts.push("no-decay".to_string());
        }
        if self.avg_pool_adapt {
            parts.push("adapt=avg-pool-2d".to_string());
        }
        for l in &self.drop_layers {
            parts.push(format!("drop-layer={l}"));
        }
        if parts.is_empty() {
            "none".into()
        } else {
            parts.join(";")
        }
    }
}

/// Rewrites the objective of `cfg` and records the toggles in it.
pub fn apply_toggles(cfg: &mut RunConfig, t: &Toggles) -> Result<()> {
    if !(cfg.scheme.has_vit() && cfg.scheme.has_agent()) && *t != Toggles::default() {
        return config(format!("ablation toggles need two networks; scheme is {}", cfg.scheme.as_str()));
    }
    if t.no_feat && t.no_mutual && !t.allow_scratch {
        return config("no-feat with no-mutual removes both loss terms; pass allow-scratch to train both nets on cross-entropy");
    }
    if t.no_feat && (t.no_decay || t.avg_pool_adapt || !t.drop_layers.is_empty()) {
        return config("no-feat contradicts toggles that modify the feature term");
    }
    let w = &mut cfg.weights;
    if t.no_feat {
        w.alpha = 0.0;
    }
    if t.no_mutual {
        w.beta = 0.0;
    }
    if t.no_decay {
        w.decay = Decay::None;
    }
    if t.avg_pool_adapt {
        w.adapt = AdaptMode::AvgPool2d;
    }
    if !t.drop_layers.is_empty() {
        let mut keep = w.supervised(cfg.arch.layers)?;
        for l in &t.drop_layers {
            let Some(pos) = keep.iter().position(|k| k == l) else {
                return config(format!("drop-layer {l} is not a supervised layer of a {}-layer network", cfg.arch.layers));
            };
            keep.remove(pos);
        }
        if keep.is_empty() {
            return config("drop-layer removes every supervised layer; use no-feat");
        }
        w.layers = Some(keep.into_iter().collect());
    }
    cfg.ablation = t.label();
    cfg.validate()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::Scheme;

    #[test]
    fn drop_layer_and_label() {
        let mut cfg = RunConfig::default();
        let t = Toggles {
            drop_layers: vec![2],
            no_decay: true,
            ..Toggles::default()
        };
        apply_toggles(&mut cfg, &t).unwrap();
        assert_eq!(cfg.weights.layers, Some([1, 3, 4].into_iter().collect()));
        assert_eq!(cfg.weights.feat_multiplier(0.8), 1.0);
        assert_eq!(cfg.ablation, "no-decay;drop-layer=2");
    }

    #[test]
    fn contradictions_rejected() {
        let both = Toggles {
            no_feat: true,
            no_mutual: true,
            ..Toggles::default()
        };
        assert!(apply_toggles(&mut RunConfig::default(), &both).is_err());
        let ok = Toggles {
            allow_scratch: true,
            ..both.clone()
        };
        apply_toggles(&mut RunConfig::default(), &ok).unwrap();
        let odd = Toggles {
            no_feat: true,
            drop_layers: vec![1],
            ..Toggles::default()
        };
        assert!(apply_toggles(&mut RunConfig::default(), &odd).is_err());
        let out = Toggles {
            drop_layers: vec![9],
            ..Toggles::default()
        };
        assert!(apply_toggles(&mut RunConfig::default(), &out).is_err());
        let mut scratch = RunConfig {
            scheme: Scheme::ScratchVit,
            ..RunConfig::default()
        };
        assert!(apply_toggles(&mut scratch, &Toggles { no_mutual: true, ..Toggles::default() }).is_err());
    }
}
