use std::collections::BTreeSet;

use bootvit_tensor::{Graph, Scalar, Var};

use crate::arch::LayerTrace;
use crate::error::{config, CoreError, Result};

pub const FEAT_EPS: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AdaptMode {
    /// Linear interpolation along the token axis, end points aligned.
    SeqInterp1d,
    /// Average pooling of the square token map.
    AvgPool2d,
}

impl AdaptMode {
    pub fn as_str(self) -> &'static str {
        match self {
            AdaptMode::SeqInterp1d => "seq-interp-1d",
            AdaptMode::AvgPool2d => "avg-pool-2d",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "seq-interp-1d" | "interp" => Some(AdaptMode::SeqInterp1d),
            "avg-pool-2d" | "ap-2d" | "AP-2D" => Some(AdaptMode::AvgPool2d),
            _ => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Decay {
    Linear,
    None,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
    pub temperature: f64,
    pub decay: Decay,
    /// 1-based supervised layers; `None` supervises every layer.
    pub layers: Option<BTreeSet<usize>>,
    pub adapt: AdaptMode,
    /// Weights of the hard-label and soft terms inside each distillation
    /// loss.
    pub kd_hard: f64,
    pub kd_soft: f64,
    /// Stops the feature loss from reaching the agent.
    pub detach_agent_feat: bool,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            beta: 10.0,
            temperature: 4.0,
            decay: Decay::Linear,
            layers: None,
            adapt: AdaptMode::SeqInterp1d,
            kd_hard: 1.0,
            kd_soft: 1.0,
            detach_agent_feat: false,
        }
    }
}

impl LossWeights {
    pub fn validate(&self, depth: usize) -> Result<()> {
        if self.alpha < 0.0 || self.beta < 0.0 || !self.alpha.is_finite() || !self.beta.is_finite() {
            return config(format!("alpha {} and beta {} must be finite and nonnegative", self.alpha, self.beta));
        }
        if self.temperature <= 0.0 || !self.temperature.is_finite() {
            return config(format!("temperature {} must be positive", self.temperature));
        }
        self.supervised(depth).map(|_| ())
    }

    /// 1-based supervised layer indices for a network of `depth` blocks.
    pub fn supervised(&self, depth: usize) -> Result<Vec<usize>> {
        match &self.layers {
            None => Ok((1..=depth).collect()),
            Some(set) => {
                if let Some(&bad) = set.iter().find(|&&l| l == 0 || l > depth) {
                    return config(format!("supervised layer {bad} outside 1..={depth}"));
                }
                Ok(set.iter().copied().collect())
            }
        }
    }

    /// Feature-loss multiplier at training progress `t`.
    pub fn feat_multiplier(&self, t: f64) -> f64 {
        match self.decay {
            Decay::Linear => (1.0 - t).clamp(0.0, 1.0),
            Decay::None => 1.0,
        }
    }
}

fn perfect_square(n: usize) -> Option<usize> {
    let r = (n as f64).sqrt().round() as usize;
    (r * r == n).then_some(r)
}

/// Resamples `[batch, n', d]` to `[batch, n, d]`.
pub fn adapt_feature<T: Scalar>(g: &mut Graph<T>, f: Var, n: usize, mode: AdaptMode) -> Result<Var> {
    let s = g.shape(f).to_vec();
    if s.len() != 3 {
        return config(format!("feature must be [batch, tokens, width], got {s:?}"));
    }
    if s[1] == n {
        return Ok(f);
    }
    match mode {
        AdaptMode::SeqInterp1d => Ok(g.interp_tokens(f, n)?),
        AdaptMode::AvgPool2d => {
            let (Some(src), Some(dst)) = (perfect_square(s[1]), perfect_square(n)) else {
                return config(format!("average pooling needs square token counts, got {} and {n}", s[1]));
            };
            if src % dst != 0 {
                return config(format!("{src}x{src} map cannot be average-pooled to {dst}x{dst}"));
            }
            let map = g.reshape(f, &[s[0], src, src, s[2]])?;
            let pooled = g.avg_pool2d(map, src / dst)?;
            Ok(g.reshape(pooled, &[s[0], n, s[2]])?)
        }
    }
}

/// Batch mean of `|| A/||A|| - V/||V|| ||^2` where `A` is the agent
/// feature adapted to the ViT token count and norms run over each
/// sample's whole feature. Also returns how many samples had a zero norm.
pub fn feat_loss_layer<T: Scalar>(g: &mut Graph<T>, f_a: Var, f_v: Var, mode: AdaptMode) -> Result<(Var, usize)> {
    let sv = g.shape(f_v).to_vec();
    let sa = g.shape(f_a).to_vec();
    if sv.len() != 3 || sa.len() != 3 || sa[0] != sv[0] || sa[2] != sv[2] {
        return config(format!("agent feature {sa:?} cannot be matched to {sv:?}"));
    }
    let a = adapt_feature(g, f_a, sv[1], mode)?;
    let width = sv[1] * sv[2];
    let a = g.reshape(a, &[sv[0], width])?;
    let v = g.reshape(f_v, &[sv[0], width])?;
    let zero_norms = [a, v]
        .iter()
        .map(|&x| {
            g.value(x)
                .data()
                .chunks(width.max(1))
                .filter(|row| row.iter().all(|&e| e == T::zero()))
                .count()
        })
        .sum();
    let eps = T::from_f64_lossy(FEAT_EPS);
    let a = g.l2_normalize_rows(a, eps)?;
    let v = g.l2_normalize_rows(v, eps)?;
    let diff = g.sub(a, v)?;
    let sq = g.mul(diff, diff)?;
    let total = g.sum(sq);
    let batch = T::from_usize(sv[0]).expect("batch");
    Ok((g.scale(total, T::one() / batch), zero_norms))
}

/// Per-layer feature terms over the supervised layers and their sum.
pub struct FeatLoss {
    pub total: Var,
    /// `(1-based layer, term)`.
    pub per_layer: Vec<(usize, Var)>,
    pub zero_norms: usize,
}

pub fn feat_loss_total<T: Scalar>(
    g: &mut Graph<T>,
    agent: &LayerTrace,
    vit: &LayerTrace,
    weights: &LossWeights,
) -> Result<FeatLoss> {
    let depth = vit.features.len();
    if agent.features.len() != depth {
        return config(format!("agent trace has {} layers, ViT trace {depth}", agent.features.len()));
    }
    let mut per_layer = Vec::new();
    let mut zero_norms = 0;
    let mut total: Option<Var> = None;
    for l in weights.supervised(depth)? {
        let mut fa = agent.features[l - 1];
        if weights.detach_agent_feat {
            fa = g.detach(fa);
        }
        let (term, z) = feat_loss_layer(g, fa, vit.features[l - 1], weights.adapt)?;
        zero_norms += z;
        per_layer.push((l, term));
        total = Some(match total {
            Some(t) => g.add(t, term)?,
            None => term,
        });
    }
    let total = match total {
        Some(t) => t,
        None => g.constant(bootvit_tensor::Tensor::scalar(T::zero())),
    };
    Ok(FeatLoss {
        total,
        per_layer,
        zero_norms,
    })
}

/// `hard * CE(student, y) + soft * T^2 * KL(softmax(teacher/T) || softmax(student/T))`,
/// both batch means. The teacher must carry no gradient.
pub fn kd_loss<T: Scalar>(
    g: &mut Graph<T>,
    student: Var,
    teacher: Var,
    labels: &[usize],
    temperature: f64,
    hard: f64,
    soft: f64,
) -> Result<Var> {
    if g.requires_grad(teacher) {
        return Err(CoreError::Contract("distillation teacher logits must be detached".into()));
    }
    if g.shape(student) != g.shape(teacher) {
        return config(format!("student {:?} vs teacher {:?}", g.shape(student), g.shape(teacher)));
    }
    let ce = g.cross_entropy(student, labels)?;
    let inv_t = T::from_f64_lossy(1.0 / temperature);
    let st = g.scale(student, inv_t);
    let tt = g.scale(teacher, inv_t);
    let log_ps = g.log_softmax(st)?;
    let log_pt = g.log_softmax(tt)?;
    let pt = g.softmax(tt)?;
    let gap = g.sub(log_pt, log_ps)?;
    let terms = g.mul(pt, gap)?;
    let kl = g.sum(terms);
    let batch = g.shape(student)[0].max(1) as f64;
    let kl = g.scale(kl, T::from_f64_lossy(soft * temperature * temperature / batch));
    let ce = g.scale(ce, T::from_f64_lossy(hard));
    Ok(g.add(ce, kl)?)
}

/// `KD(V <- detached A) + KD(A <- detached V)`.
pub fn mutual_loss<T: Scalar>(
    g: &mut Graph<T>,
    logits_v: Var,
    logits_a: Var,
    labels: &[usize],
    weights: &LossWeights,
) -> Result<Var> {
    let teacher_a = g.detach(logits_a);
    let teacher_v = g.detach(logits_v);
    mutual_loss_with_teachers(g, logits_v, logits_a, teacher_v, teacher_a, labels, weights)
}

/// [`mutual_loss`] with caller-supplied constant teacher logits.
pub fn mutual_loss_with_teachers<T: Scalar>(
    g: &mut Graph<T>,
    logits_v: Var,
    logits_a: Var,
    teacher_v: Var,
    teacher_a: Var,
    labels: &[usize],
    weights: &LossWeights,
) -> Result<Var> {
    let (t, h, s) = (weights.temperature, weights.kd_hard, weights.kd_soft);
    let to_v = kd_loss(g, logits_v, teacher_a, labels, t, h, s)?;
    let to_a = kd_loss(g, logits_a, teacher_v, labels, t, h, s)?;
    Ok(g.add(to_v, to_a)?)
}

/// Scalar values of one evaluation of the combined objective.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    /// `(1-based layer, value)`.
    pub feat_per_layer: Vec<(usize, f64)>,
    pub feat_total: f64,
    pub mutual: f64,
    pub total: f64,
    pub feat_weight_multiplier: f64,
    pub effective_alpha: f64,
    pub ce_vit: f64,
    pub ce_agent: f64,
    /// True when both coupling terms were disabled and plain cross-entropy
    /// trained the networks instead.
    pub ce_fallback: bool,
    pub zero_norm_features: usize,
}

pub struct Combined {
    pub total: Var,
    pub breakdown: LossBreakdown,
}

/// `alpha(t) * L_feat + beta * L_mutual` for a joint forward pass, where
/// `alpha(t)` follows the decay rule at progress `t` in `[0, 1]`. With
/// `alpha = beta = 0` each network gets its own cross-entropy instead.
pub fn combined_loss<T: Scalar>(
    g: &mut Graph<T>,
    vit: &LayerTrace,
    agent: &LayerTrace,
    labels: &[usize],
    weights: &LossWeights,
    t: f64,
) -> Result<Combined> {
    combined_loss_with_teachers(g, vit, agent, labels, weights, t, None)
}

/// [`combined_loss`] where the distillation teachers are given as constant
/// `(ViT, agent)` logits instead of detached copies of the live ones.
/// Differentiating with teachers frozen at their current value reproduces
/// the stop-gradient objective, which makes it checkable by finite
/// differences.
pub fn combined_loss_with_teachers<T: Scalar>(
    g: &mut Graph<T>,
    vit: &LayerTrace,
    agent: &LayerTrace,
    labels: &[usize],
    weights: &LossWeights,
    t: f64,
    teachers: Option<(Var, Var)>,
) -> Result<Combined> {
    if !(0.0..=1.0).contains(&t) {
        return config(format!("progress {t} outside [0, 1]"));
    }
    weights.validate(vit.features.len())?;
    let multiplier = weights.feat_multiplier(t);
    let effective_alpha = weights.alpha * multiplier;
    let ce_v = g.cross_entropy(vit.logits, labels)?;
    let ce_a = g.cross_entropy(agent.logits, labels)?;
    let mut b = LossBreakdown {
        feat_weight_multiplier: multiplier,
        effective_alpha,
        ce_vit: g.value(ce_v).item().to_f64().unwrap_or(f64::NAN),
        ce_agent: g.value(ce_a).item().to_f64().unwrap_or(f64::NAN),
        ..LossBreakdown::default()
    };
    let value = |g: &Graph<T>, v: Var| g.value(v).item().to_f64().unwrap_or(f64::NAN);
    if weights.alpha == 0.0 && weights.beta == 0.0 {
        let total = g.add(ce_v, ce_a)?;
        b.total = value(g, total);
        b.ce_fallback = true;
        return Ok(Combined { total, breakdown: b });
    }
    let feat = feat_loss_total(g, agent, vit, weights)?;
    let mutual = match teachers {
        Some((tv, ta)) => mutual_loss_with_teachers(g, vit.logits, agent.logits, tv, ta, labels, weights)?,
        None => mutual_loss(g, vit.logits, agent.logits, labels, weights)?,
    };
    b.feat_per_layer = feat.per_layer.iter().map(|&(l, v)| (l, value(g, v))).collect();
    b.feat_total = value(g, feat.total);
    b.mutual = value(g, mutual);
    b.zero_norm_features = feat.zero_norms;
    let f = g.scale(feat.total, T::from_f64_lossy(effective_alpha));
    let m = g.scale(mutual, T::from_f64_lossy(weights.beta));
    let total = g.add(f, m)?;
    b.total = value(g, total);
    Ok(Combined { total, breakdown: b })
}

#[cfg(test)]
mod tests {
    use super::*;
    use bootvit_tensor::Tensor;

    #[test]
    fn interp_example() {
        let mut g = Graph::<f64>::new();
        let f = g.constant(Tensor::new(vec![1, 2, 1], vec![0.0, 3.0]).unwrap());
        let y = adapt_feature(&mut g, f, 4, AdaptMode::SeqInterp1d).unwrap();
        assert_eq!(g.value(y).data(), &[0.0, 1.0, 2.0, 3.0]);
    }

    #[test]
    fn avg_pool_preconditions() {
        let mut g = Graph::<f64>::new();
        let f = g.constant(Tensor::zeros(&[1, 12, 2]));
        assert!(adapt_feature(&mut g, f, 4, AdaptMode::AvgPool2d).is_err());
        let f = g.constant(Tensor::zeros(&[1, 9, 2]));
        assert!(adapt_feature(&mut g, f, 4, AdaptMode::AvgPool2d).is_err());
    }

    #[test]
    fn multiplier_endpoints() {
        let w = LossWeights::default();
        assert_eq!(w.feat_multiplier(0.0), 1.0);
        assert_eq!(w.feat_multiplier(1.0), 0.0);
        let none = LossWeights {
            decay: Decay::None,
            ..w
        };
        assert_eq!(none.feat_multiplier(0.7), 1.0);
    }

    #[test]
    fn attached_teacher_rejected() {
        let mut g = Graph::<f64>::new();
        let s = g.param(Tensor::zeros(&[1, 3]));
        let t = g.param(Tensor::zeros(&[1, 3]));
        assert!(kd_loss(&mut g, s, t, &[0], 4.0, 1.0, 1.0).is_err());
    }
}
