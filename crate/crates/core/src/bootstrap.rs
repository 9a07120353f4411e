//! Joint optimization of a ViT and its agent.
//!
//! Each network binds the store through its own [`Binder`], so a shared
//! tensor enters the graph as two leaves. One reverse sweep of the
//! combined objective then yields both halves of every shared gradient:
//! the ViT-side leaf collects the gradient through the ViT with the agent
//! held fixed, the agent-side leaf the gradient through the agent with
//! the ViT held fixed.

use std::collections::BTreeMap;

use bootvit_tensor::{Gradients, Graph, Scalar, Tensor, Var};

use crate::arch::{Agent, Vit};
use crate::error::{CoreError, Result};
use crate::objectives::{combined_loss, LossBreakdown, LossWeights};
use crate::optim::{adamw_update, align, AdamW, Moments};
use crate::params::{Binder, Group, ParamStore};

/// Both halves of a shared gradient.
#[derive(Clone, Debug, PartialEq)]
pub struct SharedGrad<T> {
    pub vit: Option<Tensor<T>>,
    pub agent: Option<Tensor<T>>,
}

/// Gradients keyed by parameter id.
#[derive(Clone, Debug, PartialEq)]
pub struct GradientPair<T> {
    pub shared: BTreeMap<usize, SharedGrad<T>>,
    pub vit_private: BTreeMap<usize, Tensor<T>>,
    pub agent_private: BTreeMap<usize, Tensor<T>>,
}

impl<T: Scalar> Default for GradientPair<T> {
    fn default() -> Self {
        Self {
            shared: BTreeMap::new(),
            vit_private: BTreeMap::new(),
            agent_private: BTreeMap::new(),
        }
    }
}

impl<T: Scalar> GradientPair<T> {
    /// Sorts the leaf gradients of both binders into private and shared
    /// halves. Leaves that received no gradient count as zero.
    pub fn collect(
        store: &ParamStore<T>,
        grads: &Gradients<T>,
        vit: Option<&Binder<'_, T>>,
        agent: Option<&Binder<'_, T>>,
    ) -> Result<Self> {
        let mut pair = Self::default();
        for (side, binder) in [(Group::Vit, vit), (Group::Agent, agent)] {
            let Some(binder) = binder else { continue };
            for &(id, var) in binder.bound() {
                let p = store.by_id(id);
                let grad = grads.get_or_zeros(var, p.value.shape());
                match (p.group, side) {
                    (Group::Shared, Group::Vit) => pair.shared.entry(id).or_insert_with(SharedGrad::empty).vit = Some(grad),
                    (Group::Shared, _) => pair.shared.entry(id).or_insert_with(SharedGrad::empty).agent = Some(grad),
                    (Group::Vit, Group::Vit) => {
                        pair.vit_private.insert(id, grad);
                    }
                    (Group::Agent, Group::Agent) => {
                        pair.agent_private.insert(id, grad);
                    }
                    (group, side) => {
                        return Err(CoreError::Contract(format!(
                            "{} parameter {} bound by the {} network",
                            group.as_str(),
                            p.name,
                            side.as_str()
                        )))
                    }
                }
            }
        }
        Ok(pair)
    }

    pub fn is_complete(&self) -> bool {
        self.shared.values().all(|s| s.vit.is_some() && s.agent.is_some())
    }
}

impl<T> SharedGrad<T> {
    fn empty() -> Self {
        Self { vit: None, agent: None }
    }
}

/// Builds a graph with `build`, which receives the ViT-side and agent-side
/// binders and returns a scalar loss, then sweeps it once.
pub fn gradient_pair_with<T, F>(store: &ParamStore<T>, build: F) -> Result<(GradientPair<T>, f64)>
where
    T: Scalar,
    F: FnOnce(&mut Graph<T>, &mut Binder<'_, T>, &mut Binder<'_, T>) -> Result<Var>,
{
    let mut g = Graph::new();
    let mut vb = Binder::new(store, true);
    let mut ab = Binder::new(store, true);
    let loss = build(&mut g, &mut vb, &mut ab)?;
    let value = g.value(loss).item().to_f64().unwrap_or(f64::NAN);
    let grads = g.backward(loss)?;
    Ok((GradientPair::collect(store, &grads, Some(&vb), Some(&ab))?, value))
}

/// Gradients, loss terms and logits of one training step.
pub struct StepOutput<T> {
    pub pair: GradientPair<T>,
    pub breakdown: LossBreakdown,
    pub logits_vit: Option<Tensor<T>>,
    pub logits_agent: Option<Tensor<T>>,
}

/// Evaluates the training objective on one batch and returns its
/// gradient pair. With both networks the objective is the combined loss
/// at progress `t`; with one network it is that network's cross-entropy.
#[allow(clippy::too_many_arguments)]
pub fn compute_gradient_pair<T: Scalar>(
    store: &ParamStore<T>,
    vit: Option<&Vit>,
    agent: Option<&Agent>,
    images: &Tensor<T>,
    labels: &[usize],
    weights: &LossWeights,
    t: f64,
) -> Result<StepOutput<T>> {
    let mut g = Graph::new();
    let x = g.constant(images.clone());
    let mut vb = Binder::new(store, true);
    let mut ab = Binder::new(store, true);
    let tv = vit.map(|m| m.forward(&mut g, &mut vb, x, false)).transpose()?;
    let ta = agent.map(|m| m.forward(&mut g, &mut ab, x)).transpose()?;
    let value = |g: &Graph<T>, v: Var| g.value(v).item().to_f64().unwrap_or(f64::NAN);
    let (loss, breakdown) = match (&tv, &ta) {
        (Some(v), Some(a)) => {
            let c = combined_loss(&mut g, v, a, labels, weights, t)?;
            (c.total, c.breakdown)
        }
        (Some(v), None) => {
            let ce = g.cross_entropy(v.logits, labels)?;
            let ce_vit = value(&g, ce);
            (
                ce,
                LossBreakdown {
                    ce_vit,
                    total: ce_vit,
                    ..LossBreakdown::default()
                },
            )
        }
        (None, Some(a)) => {
            let ce = g.cross_entropy(a.logits, labels)?;
            let ce_agent = value(&g, ce);
            (
                ce,
                LossBreakdown {
                    ce_agent,
                    total: ce_agent,
                    ..LossBreakdown::default()
                },
            )
        }
        (None, None) => return Err(CoreError::Contract("no network to train".into())),
    };
    let grads = g.backward(loss)?;
    let pair = GradientPair::collect(store, &grads, vit.map(|_| &vb), agent.map(|_| &ab))?;
    Ok(StepOutput {
        pair,
        breakdown,
        logits_vit: tv.map(|t| g.value(t.logits).clone()),
        logits_agent: ta.map(|t| g.value(t.logits).clone()),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum UpdateRule {
    AdamW,
    /// `p -= lr * g`, no moments and no weight decay.
    Sgd,
}

/// Optimizer state for every parameter of a store, keyed by name.
#[derive(Clone, Debug)]
pub struct OptimState<T> {
    pub hyper: AdamW,
    pub rule: UpdateRule,
    pub moments: BTreeMap<String, Moments<T>>,
}

impl<T: Scalar> OptimState<T> {
    pub fn new(hyper: AdamW, rule: UpdateRule) -> Self {
        Self {
            hyper,
            rule,
            moments: BTreeMap::new(),
        }
    }

    fn update(&mut self, store: &mut ParamStore<T>, id: usize, grad: &Tensor<T>, lr_t: f64) -> Result<()> {
        let p = store.by_id_mut(id);
        match self.rule {
            UpdateRule::Sgd => {
                if p.value.shape() != grad.shape() {
                    return Err(CoreError::Contract(format!("gradient shape for {}", p.name)));
                }
                let lr = T::from_f64_lossy(lr_t);
                for (w, &g) in p.value.data_mut().iter_mut().zip(grad.data()) {
                    *w -= lr * g;
                }
                Ok(())
            }
            UpdateRule::AdamW => {
                let m = self
                    .moments
                    .entry(p.name.clone())
                    .or_insert_with(|| Moments::zeros(p.value.shape()));
                adamw_update(&self.hyper, m, &mut p.value, grad, lr_t)
            }
        }
    }
}

/// `(v + align(a | v)) / 2`, the effective gradient of a shared tensor.
pub fn effective_shared_gradient<T: Scalar>(vit: &Tensor<T>, agent: &Tensor<T>) -> Result<Tensor<T>> {
    let aligned = align(agent.data(), vit.data())?;
    let half = T::from_f64_lossy(0.5);
    let data = vit.data().iter().zip(aligned).map(|(&v, a)| half * (v + a)).collect();
    Ok(Tensor::new(vit.shape().to_vec(), data)?)
}

/// Applies one update: private tensors with their own gradients, shared
/// tensors with the effective gradient.
pub fn bootstrap_step<T: Scalar>(pair: &GradientPair<T>, state: &mut OptimState<T>, store: &mut ParamStore<T>, lr_t: f64) -> Result<()> {
    if !pair.is_complete() {
        let missing: Vec<&str> = pair
            .shared
            .iter()
            .filter(|(_, s)| s.vit.is_none() || s.agent.is_none())
            .map(|(&id, _)| store.by_id(id).name.as_str())
            .collect();
        return Err(CoreError::Contract(format!("shared gradients missing a half: {missing:?}")));
    }
    for (&id, g) in pair.vit_private.iter().chain(&pair.agent_private) {
        state.update(store, id, g, lr_t)?;
    }
    for (&id, s) in &pair.shared {
        let g = effective_shared_gradient(s.vit.as_ref().expect("complete"), s.agent.as_ref().expect("complete"))?;
        state.update(store, id, &g, lr_t)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toy_scalar_step() {
        let mut store = ParamStore::<f64>::new();
        let id = store.insert("s", Group::Shared, Tensor::scalar(1.0)).unwrap();
        let mut pair = GradientPair::default();
        pair.shared.insert(
            id,
            SharedGrad {
                vit: Some(Tensor::scalar(0.2)),
                agent: Some(Tensor::scalar(-0.1)),
            },
        );
        let mut st = OptimState::new(AdamW::default(), UpdateRule::Sgd);
        bootstrap_step(&pair, &mut st, &mut store, 0.1).unwrap();
        assert!((store.value("s").unwrap().item() - 0.99).abs() < 1e-15);
    }

    #[test]
    fn incomplete_pair_rejected() {
        let mut store = ParamStore::<f64>::new();
        let id = store.insert("s", Group::Shared, Tensor::scalar(1.0)).unwrap();
        let mut pair = GradientPair::default();
        pair.shared.insert(
            id,
            SharedGrad {
                vit: Some(Tensor::scalar(0.2)),
                agent: None,
            },
        );
        let mut st = OptimState::new(AdamW::default(), UpdateRule::Sgd);
        assert!(bootstrap_step(&pair, &mut st, &mut store, 0.1).is_err());
    }

    #[test]
    fn identical_halves_average_to_themselves() {
        let v = Tensor::from_fn(&[4], |i| i as f64 - 1.5);
        assert_eq!(effective_shared_gradient(&v, &v).unwrap(), v);
    }
}
