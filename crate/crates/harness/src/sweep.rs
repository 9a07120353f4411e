//! Grid runs over the loss hyperparameters.

use std::fmt::Write as _;

use crate::config::RunConfig;
use crate::error::{io_err, Result};
use crate::train::{train_on, Data};

#[derive(Clone, Debug, PartialEq)]
pub struct Grid {
    pub alpha: Vec<f64>,
    pub beta: Vec<f64>,
    pub temperature: Vec<f64>,
}

impl Grid {
    /// Every axis left empty takes the base configuration's value.
    pub fn points(&self, base: &RunConfig) -> Vec<(f64, f64, f64)> {
        let or = |v: &Vec<f64>, d: f64| if v.is_empty() { vec![d] } else { v.clone() };
        let w = &base.weights;
        let mut out = Vec::new();
        for a in or(&self.alpha, w.alpha) {
            for b in or(&self.beta, w.beta) {
                for t in or(&self.temperature, w.temperature) {
                    out.push((a, b, t));
                }
            }
        }
        out
    }
}

pub const SWEEP_HEADER: &str = "alpha,beta,temperature,final_val_top1_vit,best_val_top1_vit,final_val_top1_agent,best_val_top1_agent,run_dir";

/// One training run per grid point under `base.out_dir`, plus `sweep.csv`
/// there. Returns the CSV text.
pub fn sweep(base: &RunConfig, grid: &Grid, data: &Data) -> Result<String> {
    let mut csv = format!("{SWEEP_HEADER}\n");
    for (a, b, t) in grid.points(base) {
        let mut cfg = base.clone();
        cfg.weights.alpha = a;
        cfg.weights.beta = b;
        cfg.weights.temperature = t;
        cfg.out_dir = base.out_dir.join(format!("alpha{a}_beta{b}_T{t}"));
        let o = train_on(&cfg, data)?;
        let get = |k: &str| o.get(k).unwrap_or("-").to_string();
        let _ = writeln!(
            csv,
            "{a},{b},{t},{},{},{},{},{}",
            get("final_val_top1_vit"),
            get("best_val_top1_vit"),
            get("final_val_top1_agent"),
            get("best_val_top1_agent"),
            cfg.out_dir.display()
        );
    }
    let path = base.out_dir.join("sweep.csv");
    std::fs::create_dir_all(&base.out_dir).map_err(io_err(&base.out_dir))?;
    std::fs::write(&path, &csv).map_err(io_err(&path))?;
    Ok(csv)
}
