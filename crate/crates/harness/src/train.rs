//! The training loop shared by every scheme.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use bootvit_core::arch::{build_agent, build_vit, Agent, Vit};
use bootvit_core::bootstrap::{bootstrap_step, compute_gradient_pair, OptimState};
use bootvit_core::checkpoint;
use bootvit_core::objectives::LossBreakdown;
use bootvit_core::optim::cosine_lr;
use bootvit_core::params::{Binder, Group, ParamStore};
use bootvit_core::rng::SeedTree;
use bootvit_core::CoreError;
use bootvit_tensor::{Graph, Tensor, TensorError};
use rand::seq::SliceRandom;
use rand::Rng;

use crate::augment::{self, AugmentConfig, Params};
use crate::config::{RunConfig, Scheme};
use crate::data::{load_cifar, subsample, Dataset, Split, Standardizer, CHANNELS, PIXELS, SIDE};
use crate::error::{config, io_err, HarnessError, Result};
use crate::metrics::{TrainRecord, HEADER};

/// Training and validation images with the standardizer fitted on the
/// training subset.
pub struct Data {
    pub train: Dataset,
    pub val: Dataset,
    pub standardizer: Standardizer,
}

impl Data {
    pub fn new(train: Dataset, val: Dataset) -> Self {
        let standardizer = Standardizer::fit(&train);
        Self { train, val, standardizer }
    }
}

pub fn load_data(cfg: &RunConfig) -> Result<Data> {
    let full = load_cifar(&cfg.data_dir, cfg.flavor, Split::Train)?;
    let idx = subsample(&full.labels, full.classes, cfg.fraction, cfg.seed)?;
    let train = full.select(&idx);
    let mut val = load_cifar(&cfg.data_dir, cfg.flavor, Split::Test)?;
    if cfg.val_limit > 0 && cfg.val_limit < val.len() {
        val = val.select(&(0..cfg.val_limit).collect::<Vec<_>>());
    }
    Ok(Data::new(train, val))
}

pub struct Outcome {
    pub records: Vec<TrainRecord>,
    pub summary: Vec<(String, String)>,
    pub out_dir: PathBuf,
}

impl Outcome {
    pub fn get(&self, key: &str) -> Option<&str> {
        self.summary.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }
}

struct Models {
    store: ParamStore<f32>,
    vit: Option<Vit>,
    agent: Option<Agent>,
}

fn build(cfg: &RunConfig) -> Result<Models> {
    let seeds = SeedTree::new(cfg.seed);
    let mut store = ParamStore::new();
    let shared = cfg.scheme == Scheme::Shared;
    let vit = cfg.scheme.has_vit().then(|| build_vit(&cfg.arch, &mut store, &seeds, shared)).transpose()?;
    let agent = cfg.scheme.has_agent().then(|| build_agent(&cfg.arch, &mut store, &seeds, shared)).transpose()?;
    Ok(Models { store, vit, agent })
}

/// Trainable parameter counts by group for a configuration.
pub fn parameter_counts(cfg: &RunConfig) -> Result<BTreeMap<&'static str, usize>> {
    let m = build(cfg)?;
    let mut out = BTreeMap::new();
    out.insert("total", m.store.total());
    out.insert("vit", m.store.count(&[Group::Vit]));
    out.insert("agent", m.store.count(&[Group::Agent]));
    out.insert("shared", m.store.count(&[Group::Shared]));
    Ok(out)
}

/// `[batch, 3, size, size]` standardized images, augmented when `rng` is
/// given, resized to `size` either way.
fn make_batch<R: Rng>(
    data: &Dataset,
    idx: &[usize],
    std: &Standardizer,
    size: usize,
    aug: Option<(&AugmentConfig, &mut R)>,
) -> Result<(Tensor<f32>, Vec<usize>)> {
    let mut out = Vec::with_capacity(idx.len() * CHANNELS * size * size);
    let mut buf = vec![0f32; PIXELS];
    let mut aug = aug;
    for &i in idx {
        std.apply(data.image(i), &mut buf);
        let p = match aug.as_mut() {
            Some((cfg, rng)) => augment::sample(cfg, SIDE, SIDE, *rng),
            None => Params::identity(SIDE, SIDE),
        };
        if p == Params::identity(SIDE, SIDE) && size == SIDE {
            out.extend_from_slice(&buf);
        } else {
            out.extend(augment::apply(&buf, CHANNELS, SIDE, SIDE, &p, size, size));
        }
    }
    let labels = idx.iter().map(|&i| data.labels[i]).collect();
    Ok((Tensor::new(vec![idx.len(), CHANNELS, size, size], out)?, labels))
}

fn correct(logits: &Tensor<f32>, labels: &[usize]) -> usize {
    let k = logits.shape()[1];
    logits
        .data()
        .chunks(k)
        .zip(labels)
        .filter(|(row, &y)| {
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            best == y
        })
        .count()
}

/// Validation top-1 in percent for each present network.
fn evaluate(m: &Models, data: &Data, size: usize, batch: usize) -> Result<(Option<f64>, Option<f64>)> {
    let n = data.val.len();
    if n == 0 {
        return config("validation set is empty");
    }
    let (mut hv, mut ha) = (0usize, 0usize);
    let idx: Vec<usize> = (0..n).collect();
    for chunk in idx.chunks(batch) {
        let (x, y) = make_batch::<rand_chacha::ChaCha8Rng>(&data.val, chunk, &data.standardizer, size, None)?;
        let mut g = Graph::new();
        let xv = g.constant(x);
        let mut b = Binder::new(&m.store, false);
        if let Some(vit) = &m.vit {
            let t = vit.forward(&mut g, &mut b, xv, false)?;
            hv += correct(g.value(t.logits), &y);
        }
        if let Some(agent) = &m.agent {
            let t = agent.forward(&mut g, &mut b, xv)?;
            ha += correct(g.value(t.logits), &y);
        }
    }
    let pct = |h: usize| 100.0 * h as f64 / n as f64;
    Ok((m.vit.as_ref().map(|_| pct(hv)), m.agent.as_ref().map(|_| pct(ha))))
}

fn dump_breakdown(path: &Path, epoch: usize, step: usize, b: &LossBreakdown) -> Result<()> {
    let mut s = format!("epoch = {epoch}\nstep = {step}\n");
    for (k, v) in [
        ("total", b.total),
        ("feat_total", b.feat_total),
        ("mutual", b.mutual),
        ("ce_vit", b.ce_vit),
        ("ce_agent", b.ce_agent),
        ("feat_weight_multiplier", b.feat_weight_multiplier),
        ("effective_alpha", b.effective_alpha),
    ] {
        s.push_str(&format!("{k} = {v}\n"));
    }
    for (l, v) in &b.feat_per_layer {
        s.push_str(&format!("feat_layer_{l} = {v}\n"));
    }
    s.push_str(&format!("zero_norm_features = {}\nce_fallback = {}\n", b.zero_norm_features, b.ce_fallback));
    std::fs::write(path, s).map_err(io_err(path))
}

/// For a forward pass that failed before any loss value existed: the
/// error and the parameters holding non-finite entries.
fn dump_forward_failure(path: &Path, epoch: usize, step: usize, err: &TensorError, store: &ParamStore<f32>) -> Result<()> {
    let mut s = format!("epoch = {epoch}\nstep = {step}\nerror = {err}\n");
    for p in store.iter().filter(|p| !p.value.all_finite()) {
        s.push_str(&format!("nonfinite_param = {}\n", p.name));
    }
    std::fs::write(path, s).map_err(io_err(path))
}

#[derive(Default)]
struct EpochSums {
    seen: usize,
    feat_total: f64,
    mutual: f64,
    total: f64,
    ce_vit: f64,
    ce_agent: f64,
    hit_vit: usize,
    hit_agent: usize,
    zero_norms: usize,
    per_layer: BTreeMap<usize, f64>,
}

impl EpochSums {
    fn add(&mut self, b: &LossBreakdown, n: usize) {
        let w = n as f64;
        self.seen += n;
        self.feat_total += w * b.feat_total;
        self.mutual += w * b.mutual;
        self.total += w * b.total;
        self.ce_vit += w * b.ce_vit;
        self.ce_agent += w * b.ce_agent;
        self.zero_norms += b.zero_norm_features;
        for &(l, v) in &b.feat_per_layer {
            *self.per_layer.entry(l).or_insert(0.0) += w * v;
        }
    }
}

fn write_line(f: &mut File, path: &Path, line: &str) -> Result<()> {
    writeln!(f, "{line}").and_then(|_| f.flush()).map_err(io_err(path))
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_else(|| "-".into())
}

/// Trains on already loaded data and writes `config.txt`, `metrics.csv`,
/// `timings.csv`, `summary.txt` and checkpoints into the output directory.
pub fn train_on(cfg: &RunConfig, data: &Data) -> Result<Outcome> {
    cfg.validate()?;
    if data.train.is_empty() {
        return config("training set is empty");
    }
    if let Some(&bad) = data.train.labels.iter().chain(&data.val.labels).find(|&&l| l >= cfg.arch.classes) {
        return config(format!("label {bad} with {} classes", cfg.arch.classes));
    }
    let out = cfg.out_dir.clone();
    std::fs::create_dir_all(&out).map_err(io_err(&out))?;
    let cfg_path = out.join("config.txt");
    std::fs::write(&cfg_path, cfg.to_text()).map_err(io_err(&cfg_path))?;

    let mut m = build(cfg)?;
    let mut state = OptimState::<f32>::new(cfg.optim, cfg.rule);
    let seeds = SeedTree::new(cfg.seed);
    let size = cfg.arch.image_size;
    let aug_cfg = AugmentConfig {
        scale: (cfg.crop_scale_min, 1.0),
        flip_p: cfg.flip_p,
        ..AugmentConfig::default()
    };
    let per_epoch = data.train.len().div_ceil(cfg.batch_size);
    let total_steps = per_epoch * cfg.epochs;
    let both = m.vit.is_some() && m.agent.is_some();

    let metrics_path = out.join("metrics.csv");
    let mut metrics = File::create(&metrics_path).map_err(io_err(&metrics_path))?;
    write_line(&mut metrics, &metrics_path, HEADER)?;
    let timings_path = out.join("timings.csv");
    let mut timings = File::create(&timings_path).map_err(io_err(&timings_path))?;
    write_line(&mut timings, &timings_path, "epoch,seconds")?;

    let clock = Instant::now();
    let (v0, a0) = evaluate(&m, data, size, cfg.batch_size)?;
    let first = TrainRecord {
        lr: cosine_lr(0, total_steps, cfg.optim.lr),
        feat_weight_multiplier: cfg.weights.feat_multiplier(0.0),
        val_top1_vit: v0,
        val_top1_agent: a0,
        ..TrainRecord::default()
    };
    write_line(&mut metrics, &metrics_path, &first.to_row())?;
    write_line(&mut timings, &timings_path, &format!("0,{:.3}", clock.elapsed().as_secs_f64()))?;
    let mut records = vec![first];

    let primary = |r: &TrainRecord| if cfg.scheme.has_vit() { r.val_top1_vit } else { r.val_top1_agent };
    let mut best = primary(&records[0]).unwrap_or(f64::NEG_INFINITY);
    let mut best_epoch = (0usize, 0usize);
    let (mut best_v, mut best_a) = (v0, a0);
    let mut step = 0;
    let mut meta = BTreeMap::new();
    for (k, v) in cfg.pairs() {
        meta.insert(format!("cfg.{k}"), v);
    }

    for epoch in 1..=cfg.epochs {
        let clock = Instant::now();
        let t = (epoch - 1) as f64 / cfg.epochs as f64;
        let mut order: Vec<usize> = (0..data.train.len()).collect();
        order.shuffle(&mut seeds.child("shuffle").rng(&epoch.to_string()));
        let mut aug_rng = seeds.child("augment").rng(&epoch.to_string());
        let mut sums = EpochSums::default();
        let mut lr_t = cfg.optim.lr;
        for chunk in order.chunks(cfg.batch_size) {
            let aug = cfg.augment.then_some((&aug_cfg, &mut aug_rng));
            let (x, y) = make_batch(&data.train, chunk, &data.standardizer, size, aug)?;
            lr_t = cosine_lr(step, total_steps, cfg.optim.lr);
            let o = match compute_gradient_pair(&m.store, m.vit.as_ref(), m.agent.as_ref(), &x, &y, &cfg.weights, t) {
                Ok(o) => o,
                Err(CoreError::Tensor(e @ TensorError::Numeric { .. })) => {
                    let dump = out.join("nonfinite.txt");
                    dump_forward_failure(&dump, epoch, step, &e, &m.store)?;
                    return Err(HarnessError::NonFinite { epoch, step, dump });
                }
                Err(e) => return Err(e.into()),
            };
            if !o.breakdown.total.is_finite() {
                let dump = out.join("nonfinite.txt");
                dump_breakdown(&dump, epoch, step, &o.breakdown)?;
                return Err(HarnessError::NonFinite { epoch, step, dump });
            }
            bootstrap_step(&o.pair, &mut state, &mut m.store, lr_t)?;
            sums.add(&o.breakdown, chunk.len());
            if let Some(l) = &o.logits_vit {
                sums.hit_vit += correct(l, &y);
            }
            if let Some(l) = &o.logits_agent {
                sums.hit_agent += correct(l, &y);
            }
            step += 1;
        }
        let (val_v, val_a) = evaluate(&m, data, size, cfg.batch_size)?;
        let n = sums.seen as f64;
        let mean = |s: f64| s / n;
        let rec = TrainRecord {
            epoch,
            step,
            lr: lr_t,
            feat_weight_multiplier: cfg.weights.feat_multiplier(t),
            feat_total: both.then(|| mean(sums.feat_total)),
            mutual: both.then(|| mean(sums.mutual)),
            total: Some(mean(sums.total)),
            ce_vit: m.vit.as_ref().map(|_| mean(sums.ce_vit)),
            ce_agent: m.agent.as_ref().map(|_| mean(sums.ce_agent)),
            train_top1_vit: m.vit.as_ref().map(|_| 100.0 * sums.hit_vit as f64 / n),
            train_top1_agent: m.agent.as_ref().map(|_| 100.0 * sums.hit_agent as f64 / n),
            val_top1_vit: val_v,
            val_top1_agent: val_a,
            zero_norm_features: sums.zero_norms,
            feat_per_layer: sums.per_layer.iter().map(|(&l, &v)| (l, mean(v))).collect(),
        };
        write_line(&mut metrics, &metrics_path, &rec.to_row())?;
        if val_v > best_v {
            best_v = val_v;
            best_epoch.0 = epoch;
        }
        if val_a > best_a {
            best_a = val_a;
            best_epoch.1 = epoch;
        }
        if cfg.checkpoints {
            meta.insert("epoch".into(), epoch.to_string());
            meta.insert("step".into(), step.to_string());
            checkpoint::save(&out.join("last.ckpt"), &meta, &m.store, Some(&state))?;
            if primary(&rec).is_some_and(|p| p > best) {
                checkpoint::save(&out.join("best.ckpt"), &meta, &m.store, Some(&state))?;
            }
        }
        best = best.max(primary(&rec).unwrap_or(f64::NEG_INFINITY));
        records.push(rec);
        write_line(&mut timings, &timings_path, &format!("{epoch},{:.3}", clock.elapsed().as_secs_f64()))?;
    }

    let last = records.last().expect("initial row");
    let first_feat = records.get(1).and_then(|r| r.feat_total);
    let summary: Vec<(String, String)> = [
        ("scheme", cfg.scheme.as_str().to_string()),
        ("arch", cfg.arch_name.clone()),
        ("ablation", cfg.ablation.clone()),
        ("seed", cfg.seed.to_string()),
        ("epochs", cfg.epochs.to_string()),
        ("steps", step.to_string()),
        ("train_images", data.train.len().to_string()),
        ("val_images", data.val.len().to_string()),
        ("params_total", m.store.total().to_string()),
        ("params_vit", m.store.count(&[Group::Vit]).to_string()),
        ("params_agent", m.store.count(&[Group::Agent]).to_string()),
        ("params_shared", m.store.count(&[Group::Shared]).to_string()),
        ("final_val_top1_vit", fmt_opt(last.val_top1_vit)),
        ("best_val_top1_vit", fmt_opt(best_v)),
        ("best_epoch_vit", if m.vit.is_some() { best_epoch.0.to_string() } else { "-".into() }),
        ("final_val_top1_agent", fmt_opt(last.val_top1_agent)),
        ("best_val_top1_agent", fmt_opt(best_a)),
        ("best_epoch_agent", if m.agent.is_some() { best_epoch.1.to_string() } else { "-".into() }),
        ("first_feat_total", fmt_opt(first_feat)),
        ("final_feat_total", fmt_opt(last.feat_total)),
    ]
    .into_iter()
    .map(|(k, v)| (k.to_string(), v))
    .collect();
    let text: String = summary.iter().map(|(k, v)| format!("{k} = {v}\n")).collect();
    let path = out.join("summary.txt");
    std::fs::write(&path, text).map_err(io_err(&path))?;
    Ok(Outcome {
        records,
        summary,
        out_dir: out,
    })
}

pub fn train(cfg: &RunConfig) -> Result<Outcome> {
    let data = load_data(cfg)?;
    train_on(cfg, &data)
}
