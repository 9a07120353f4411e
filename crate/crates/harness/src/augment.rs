//! Random resized crop and horizontal flip on CHW float images.

use rand::Rng;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AugmentConfig {
    pub scale: (f64, f64),
    pub ratio: (f64, f64),
    pub flip_p: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            scale: (0.7, 1.0),
            ratio: (0.75, 4.0 / 3.0),
            flip_p: 0.5,
        }
    }
}

/// Crop box `(top, left, height, width)` in source pixels and the flip bit.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Params {
    pub crop: (usize, usize, usize, usize),
    pub flip: bool,
}

impl Params {
    pub fn identity(h: usize, w: usize) -> Self {
        Self {
            crop: (0, 0, h, w),
            flip: false,
        }
    }
}

pub fn sample<R: Rng>(cfg: &AugmentConfig, h: usize, w: usize, rng: &mut R) -> Params {
    let area = (h * w) as f64;
    let (lr0, lr1) = (cfg.ratio.0.ln(), cfg.ratio.1.ln());
    let mut crop = None;
    for _ in 0..10 {
        let target = area * rng.gen_range(cfg.scale.0..=cfg.scale.1);
        let ratio = rng.gen_range(lr0..=lr1).exp();
        let cw = (target * ratio).sqrt().round() as usize;
        let ch = (target / ratio).sqrt().round() as usize;
        if cw > 0 && ch > 0 && cw <= w && ch <= h {
            let top = rng.gen_range(0..=h - ch);
            let left = rng.gen_range(0..=w - cw);
            crop = Some((top, left, ch, cw));
            break;
        }
    }
    let flip = rng.gen_bool(cfg.flip_p);
    Params {
        crop: crop.unwrap_or((0, 0, h, w)),
        flip,
    }
}

/// Bilinear resample of the crop to `out_h x out_w` (half-pixel centres,
/// edge clamped), then the optional mirror.
pub fn apply(img: &[f32], channels: usize, h: usize, w: usize, p: &Params, out_h: usize, out_w: usize) -> Vec<f32> {
    let (top, left, ch, cw) = p.crop;
    let mut out = vec![0f32; channels * out_h * out_w];
    let sy = ch as f64 / out_h as f64;
    let sx = cw as f64 / out_w as f64;
    let taps = |i: usize, s: f64, len: usize| {
        let pos = ((i as f64 + 0.5) * s - 0.5).clamp(0.0, (len - 1) as f64);
        let lo = pos.floor() as usize;
        let hi = (lo + 1).min(len - 1);
        (lo, hi, pos - lo as f64)
    };
    for y in 0..out_h {
        let (y0, y1, fy) = taps(y, sy, ch);
        for x in 0..out_w {
            let (x0, x1, fx) = taps(x, sx, cw);
            let dst_x = if p.flip { out_w - 1 - x } else { x };
            for c in 0..channels {
                let at = |yy: usize, xx: usize| img[c * h * w + (top + yy) * w + left + xx] as f64;
                let v = (1.0 - fy) * ((1.0 - fx) * at(y0, x0) + fx * at(y0, x1)) + fy * ((1.0 - fx) * at(y1, x0) + fx * at(y1, x1));
                out[c * out_h * out_w + y * out_w + dst_x] = v as f32;
            }
        }
    }
    out
}
