//! CIFAR binary ingestion, stratified subsampling and batching.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{config, io_err, HarnessError, Result};

pub const SIDE: usize = 32;
pub const CHANNELS: usize = 3;
pub const PIXELS: usize = CHANNELS * SIDE * SIDE;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Flavor {
    Cifar10,
    Cifar100,
}

impl Flavor {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "cifar10" => Some(Self::Cifar10),
            "cifar100" => Some(Self::Cifar100),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Cifar10 => "cifar10",
            Self::Cifar100 => "cifar100",
        }
    }

    pub fn record_len(self) -> usize {
        match self {
            Self::Cifar10 => 1 + PIXELS,
            Self::Cifar100 => 2 + PIXELS,
        }
    }

    pub fn classes(self) -> usize {
        match self {
            Self::Cifar10 => 10,
            Self::Cifar100 => 100,
        }
    }

    pub fn files(self, split: Split) -> &'static [&'static str] {
        match (self, split) {
            (Self::Cifar10, Split::Train) => &["data_batch_1.bin", "data_batch_2.bin", "data_batch_3.bin", "data_batch_4.bin", "data_batch_5.bin"],
            (Self::Cifar10, Split::Test) => &["test_batch.bin"],
            (Self::Cifar100, Split::Train) => &["train.bin"],
            (Self::Cifar100, Split::Test) => &["test.bin"],
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

/// Raw images in CHW byte layout, one label each.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub pixels: Vec<u8>,
    pub labels: Vec<usize>,
    pub classes: usize,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image(&self, i: usize) -> &[u8] {
        &self.pixels[i * PIXELS..(i + 1) * PIXELS]
    }

    pub fn select(&self, indices: &[usize]) -> Dataset {
        let mut pixels = Vec::with_capacity(indices.len() * PIXELS);
        for &i in indices {
            pixels.extend_from_slice(self.image(i));
        }
        Dataset {
            pixels,
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            classes: self.classes,
        }
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut c = vec![0; self.classes];
        for &l in &self.labels {
            c[l] += 1;
        }
        c
    }
}

/// Parses one binary file. For CIFAR-100 the fine label is used.
pub fn parse_records(bytes: &[u8], flavor: Flavor, source: &str) -> Result<Dataset> {
    let rec = flavor.record_len();
    if !bytes.len().is_multiple_of(rec) {
        return Err(HarnessError::Format(format!(
            "{source}: {} bytes is not a whole number of {rec}-byte records (expected {} records, {} bytes)",
            bytes.len(),
            bytes.len() / rec,
            bytes.len() / rec * rec
        )));
    }
    let n = bytes.len() / rec;
    let mut pixels = Vec::with_capacity(n * PIXELS);
    let mut labels = Vec::with_capacity(n);
    let offset = rec - PIXELS;
    for (i, r) in bytes.chunks(rec).enumerate() {
        let label = r[offset - 1] as usize;
        if label >= flavor.classes() {
            return Err(HarnessError::Format(format!("{source}: record {i} has label {label}")));
        }
        labels.push(label);
        pixels.extend_from_slice(&r[offset..]);
    }
    Ok(Dataset {
        pixels,
        labels,
        classes: flavor.classes(),
    })
}

pub fn load_cifar(dir: &Path, flavor: Flavor, split: Split) -> Result<Dataset> {
    let mut out = Dataset {
        pixels: Vec::new(),
        labels: Vec::new(),
        classes: flavor.classes(),
    };
    for name in flavor.files(split) {
        let path = dir.join(name);
        let bytes = std::fs::read(&path).map_err(io_err(&path))?;
        let part = parse_records(&bytes, flavor, &path.display().to_string())?;
        out.pixels.extend(part.pixels);
        out.labels.extend(part.labels);
    }
    Ok(out)
}

/// Class-stratified sample of `round(fraction * count)` indices per class,
/// returned in ascending order.
pub fn subsample(labels: &[usize], classes: usize, fraction: f64, seed: u64) -> Result<Vec<usize>> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return config(format!("fraction {fraction} outside (0, 1]"));
    }
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); classes];
    for (i, &l) in labels.iter().enumerate() {
        by_class[l].push(i);
    }
    if fraction == 1.0 {
        return Ok((0..labels.len()).collect());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for (c, members) in by_class.iter_mut().enumerate() {
        if members.is_empty() {
            continue;
        }
        let take = (fraction * members.len() as f64).round() as usize;
        if take == 0 {
            return config(format!("fraction {fraction} leaves no sample of class {c} ({} available)", members.len()));
        }
        members.shuffle(&mut rng);
        out.extend_from_slice(&members[..take]);
    }
    out.sort_unstable();
    Ok(out)
}

/// Per-channel mean and standard deviation of pixels scaled to [0, 1].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Standardizer {
    pub mean: [f64; CHANNELS],
    pub std: [f64; CHANNELS],
}

impl Standardizer {
    pub fn fit(data: &Dataset) -> Self {
        let mut sum = [0.0f64; CHANNELS];
        let mut sq = [0.0f64; CHANNELS];
        let plane = SIDE * SIDE;
        for img in data.pixels.chunks(PIXELS) {
            for c in 0..CHANNELS {
                for &p in &img[c * plane..(c + 1) * plane] {
                    let v = p as f64 / 255.0;
                    sum[c] += v;
                    sq[c] += v * v;
                }
            }
        }
        let n = (data.len() * plane).max(1) as f64;
        let mean = sum.map(|s| s / n);
        let mut std = [0.0; CHANNELS];
        for c in 0..CHANNELS {
            let var = (sq[c] / n - mean[c] * mean[c]).max(0.0);
            std[c] = if var > 0.0 { var.sqrt() } else { 1.0 };
        }
        Self { mean, std }
    }

    /// CHW floats: scaled to [0, 1], then standardized per channel.
    pub fn apply(&self, img: &[u8], out: &mut [f32]) {
        let plane = SIDE * SIDE;
        for c in 0..CHANNELS {
            let (m, s) = (self.mean[c], self.std[c]);
            for (o, &p) in out[c * plane..(c + 1) * plane].iter_mut().zip(&img[c * plane..(c + 1) * plane]) {
                *o = ((p as f64 / 255.0 - m) / s) as f32;
            }
        }
    }
}

/// Encodes a dataset in the CIFAR-10 record layout.
pub fn encode_cifar10(data: &Dataset) -> Vec<u8> {
    let mut out = Vec::with_capacity(data.len() * Flavor::Cifar10.record_len());
    for i in 0..data.len() {
        out.push(data.labels[i] as u8);
        out.extend_from_slice(data.image(i));
    }
    out
}

/// Class-conditional synthetic images: each class has its own colour
/// offset and stripe orientation, plus pixel noise. Learnable but not
/// trivially separable at the first step.
pub fn synthetic(per_class: usize, classes: usize, seed: u64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut style = ChaCha8Rng::seed_from_u64(0x5eed);
    let palettes: Vec<[f64; CHANNELS]> = (0..classes).map(|_| [0; CHANNELS].map(|_| style.gen_range(0.25..0.75))).collect();
    let mut pixels = Vec::with_capacity(per_class * classes * PIXELS);
    let mut labels = Vec::with_capacity(per_class * classes);
    for i in 0..per_class * classes {
        let c = i % classes;
        let freq = 1.0 + (c % 4) as f64;
        let angle = std::f64::consts::PI * (c / 4) as f64 / 3.0;
        let phase: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
        for (ch, base) in palettes[c].iter().enumerate() {
            for y in 0..SIDE {
                for x in 0..SIDE {
                    let t = (x as f64 * angle.cos() + y as f64 * angle.sin()) * freq * std::f64::consts::TAU / SIDE as f64;
                    let stripe = 0.2 * (t + phase).sin() * if ch == 1 { -1.0 } else { 1.0 };
                    let v = base + stripe + rng.gen_range(-0.15..0.15);
                    pixels.push((v.clamp(0.0, 1.0) * 255.0).round() as u8);
                }
            }
        }
        labels.push(c);
    }
    Dataset { pixels, labels, classes }
}

/// Writes `train` and `test` as CIFAR-10 binary files into `dir`, the
/// training set split evenly over the five batch files.
pub fn write_cifar10_dir(dir: &Path, train: &Dataset, test: &Dataset) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    let files = Flavor::Cifar10.files(Split::Train);
    let per = train.len().div_ceil(files.len());
    for (k, name) in files.iter().enumerate() {
        let idx: Vec<usize> = (k * per..((k + 1) * per).min(train.len())).collect();
        let path = dir.join(name);
        std::fs::write(&path, encode_cifar10(&train.select(&idx))).map_err(io_err(&path))?;
    }
    let path = dir.join("test_batch.bin");
    std::fs::write(&path, encode_cifar10(test)).map_err(io_err(&path))?;
    Ok(())
}
