use std::collections::BTreeMap;

use bootvit_core::arch::{build_agent, build_vit, Agent, AgentVariant, ArchConfig, Downsample, Vit};
use bootvit_core::bootstrap::{bootstrap_step, compute_gradient_pair, gradient_pair_with, GradientPair, OptimState, UpdateRule};
use bootvit_core::checkpoint;
use bootvit_core::objectives::{combined_loss, LossWeights};
use bootvit_core::optim::{adamw_update, align, AdamW, Moments};
use bootvit_core::params::{Binder, Group, ParamStore};
use bootvit_core::rng::SeedTree;
use bootvit_tensor::{Graph, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]
    #[test]
    fn align_never_conflicts(src in prop::collection::vec(-10.0f64..10.0, 1..12), seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let reference: Vec<f64> = src.iter().map(|_| rng.gen_range(-10.0..10.0)).collect();
        let out = align(&src, &reference).unwrap();
        let scale = dot(&src, &src).sqrt() * dot(&reference, &reference).sqrt();
        prop_assert!(dot(&out, &reference) >= -1e-12 * scale.max(1.0));
        if dot(&src, &reference) >= 0.0 {
            prop_assert_eq!(&out, &src);
        } else {
            // projection only shrinks and is idempotent
            prop_assert!(dot(&out, &out) <= dot(&src, &src) + 1e-9);
            let again = align(&out, &reference).unwrap();
            for (x, y) in again.iter().zip(&out) {
                prop_assert!((x - y).abs() < 1e-9);
            }
        }
    }
}

#[test]
fn align_over_many_random_pairs() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut conflicts = 0;
    for _ in 0..1000 {
        let n = rng.gen_range(1..20);
        let a: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let b: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let out = align(&a, &b).unwrap();
        assert!(dot(&out, &b) >= -1e-12);
        if dot(&a, &b) < 0.0 {
            conflicts += 1;
            assert!(dot(&out, &b).abs() < 1e-12);
        }
    }
    assert!(conflicts > 300);
}

// Toy problem with one shared scalar s, a ViT scalar v and an agent scalar a:
// L = (s v - 1)^2 + (s a - 2)^2 + (s v - s a)^2
// The ViT-side copy of s appears in the first and third terms, the agent-side
// copy in the second and third.
fn toy_store(s: f64, v: f64, a: f64) -> ParamStore<f64> {
    let mut st = ParamStore::new();
    st.insert("shared.s", Group::Shared, Tensor::scalar(s)).unwrap();
    st.insert("vit.v", Group::Vit, Tensor::scalar(v)).unwrap();
    st.insert("agent.a", Group::Agent, Tensor::scalar(a)).unwrap();
    st
}

fn toy_pair(store: &ParamStore<f64>) -> (GradientPair<f64>, f64) {
    gradient_pair_with(store, |g, vb, ab| {
        let sv = vb.var(g, "shared.s")?;
        let v = vb.var(g, "vit.v")?;
        let sa = ab.var(g, "shared.s")?;
        let a = ab.var(g, "agent.a")?;
        let yv = g.mul(sv, v)?;
        let ya = g.mul(sa, a)?;
        let r1 = g.add_scalar(yv, -1.0);
        let r2 = g.add_scalar(ya, -2.0);
        let r3 = g.sub(yv, ya)?;
        let mut total = g.mul(r1, r1)?;
        for r in [r2, r3] {
            let sq = g.mul(r, r)?;
            total = g.add(total, sq)?;
        }
        Ok(total)
    })
    .unwrap()
}

fn toy_symbolic(s: f64, v: f64, a: f64) -> (f64, f64, f64, f64) {
    let d = s * v - s * a;
    let gs_v = 2.0 * (s * v - 1.0) * v + 2.0 * d * v;
    let gs_a = 2.0 * (s * a - 2.0) * a - 2.0 * d * a;
    let gv = 2.0 * (s * v - 1.0) * s + 2.0 * d * s;
    let ga = 2.0 * (s * a - 2.0) * s - 2.0 * d * s;
    (gs_v, gs_a, gv, ga)
}

#[test]
fn toy_gradients_match_symbolic() {
    for (s, v, a) in [(1.0, 0.5, -0.3), (0.2, -1.5, 2.0), (-0.7, 0.1, 0.1)] {
        let store = toy_store(s, v, a);
        let (pair, _) = toy_pair(&store);
        let (gs_v, gs_a, gv, ga) = toy_symbolic(s, v, a);
        let sid = store.id("shared.s").unwrap();
        let half = &pair.shared[&sid];
        assert!((half.vit.as_ref().unwrap().item() - gs_v).abs() < 1e-14);
        assert!((half.agent.as_ref().unwrap().item() - gs_a).abs() < 1e-14);
        assert!((pair.vit_private[&store.id("vit.v").unwrap()].item() - gv).abs() < 1e-14);
        assert!((pair.agent_private[&store.id("agent.a").unwrap()].item() - ga).abs() < 1e-14);
    }
}

#[test]
fn toy_sgd_trajectory_matches_hand_rollout() {
    let (mut s, mut v, mut a) = (0.9, 0.4, -0.6);
    let mut store = toy_store(s, v, a);
    let mut state = OptimState::new(AdamW::default(), UpdateRule::Sgd);
    let lr = 0.05;
    let mut conflicts = 0;
    for _ in 0..5 {
        let (gs_v, gs_a, gv, ga) = toy_symbolic(s, v, a);
        let aligned = if gs_a * gs_v < 0.0 {
            conflicts += 1;
            0.0
        } else {
            gs_a
        };
        s -= lr * 0.5 * (gs_v + aligned);
        v -= lr * gv;
        a -= lr * ga;
        let (pair, _) = toy_pair(&store);
        bootstrap_step(&pair, &mut state, &mut store, lr).unwrap();
        assert!((store.value("shared.s").unwrap().item() - s).abs() < 1e-12);
        assert!((store.value("vit.v").unwrap().item() - v).abs() < 1e-12);
        assert!((store.value("agent.a").unwrap().item() - a).abs() < 1e-12);
    }
    assert!(conflicts > 0, "trajectory should exercise the projection");
}

#[test]
fn split_halves_sum_to_tied_gradient() {
    // A single binder ties both networks to one leaf per tensor; its
    // gradient is the sum of the two halves.
    let store = toy_store(0.3, 1.1, -0.8);
    let (pair, _) = toy_pair(&store);
    let mut g = Graph::new();
    let mut b = Binder::new(&store, true);
    let s = b.var(&mut g, "shared.s").unwrap();
    let v = b.var(&mut g, "vit.v").unwrap();
    let a = b.var(&mut g, "agent.a").unwrap();
    let yv = g.mul(s, v).unwrap();
    let ya = g.mul(s, a).unwrap();
    let r1 = g.add_scalar(yv, -1.0);
    let r2 = g.add_scalar(ya, -2.0);
    let r3 = g.sub(yv, ya).unwrap();
    let t1 = g.mul(r1, r1).unwrap();
    let t2 = g.mul(r2, r2).unwrap();
    let t3 = g.mul(r3, r3).unwrap();
    let t = g.add(t1, t2).unwrap();
    let t = g.add(t, t3).unwrap();
    let tied = g.backward(t).unwrap().get(s).unwrap().item();
    let h = &pair.shared[&store.id("shared.s").unwrap()];
    assert!((h.vit.as_ref().unwrap().item() + h.agent.as_ref().unwrap().item() - tied).abs() < 1e-14);
}

#[test]
fn adamw_three_steps_match_oracle() {
    let hyper = AdamW {
        lr: 0.1,
        beta1: 0.8,
        beta2: 0.95,
        eps: 1e-6,
        weight_decay: 0.01,
    };
    let grads = [[0.5, -2.0], [0.1, 0.3], [-1.0, 0.0]];
    let mut p = Tensor::new(vec![2], vec![1.0f64, -0.5]).unwrap();
    let mut state = Moments::zeros(&[2]);
    let (mut w, mut m, mut v) = ([1.0f64, -0.5], [0.0f64; 2], [0.0f64; 2]);
    for (t, g) in grads.iter().enumerate() {
        let lr = 0.1 * (1.0 - t as f64 * 0.2);
        adamw_update(&hyper, &mut state, &mut p, &Tensor::new(vec![2], g.to_vec()).unwrap(), lr).unwrap();
        let k = (t + 1) as i32;
        for i in 0..2 {
            m[i] = 0.8 * m[i] + 0.2 * g[i];
            v[i] = 0.95 * v[i] + 0.05 * g[i] * g[i];
            let mh = m[i] / (1.0 - 0.8f64.powi(k));
            let vh = v[i] / (1.0 - 0.95f64.powi(k));
            w[i] -= lr * (mh / (vh.sqrt() + 1e-6) + 0.01 * w[i]);
        }
        assert_eq!(state.step, t as u64 + 1);
        for i in 0..2 {
            assert!((p.data()[i] - w[i]).abs() < 1e-15);
        }
    }
}

#[test]
fn without_shared_tensors_updates_are_independent() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut store = ParamStore::<f64>::new();
    let vid = store.insert("vit.w", Group::Vit, Tensor::from_fn(&[3], |_| rng.gen())).unwrap();
    let aid = store.insert("agent.w", Group::Agent, Tensor::from_fn(&[2], |_| rng.gen())).unwrap();
    let mut vp = store.value("vit.w").unwrap().clone();
    let mut ap = store.value("agent.w").unwrap().clone();
    let (mut vm, mut am) = (Moments::zeros(&[3]), Moments::zeros(&[2]));
    let hyper = AdamW::default();
    let mut state = OptimState::new(hyper, UpdateRule::AdamW);
    for _ in 0..4 {
        let gv = Tensor::from_fn(&[3], |_| rng.gen_range(-1.0..1.0));
        let ga = Tensor::from_fn(&[2], |_| rng.gen_range(-1.0..1.0));
        let mut pair = GradientPair::default();
        pair.vit_private.insert(vid, gv.clone());
        pair.agent_private.insert(aid, ga.clone());
        bootstrap_step(&pair, &mut state, &mut store, 1e-2).unwrap();
        adamw_update(&hyper, &mut vm, &mut vp, &gv, 1e-2).unwrap();
        adamw_update(&hyper, &mut am, &mut ap, &ga, 1e-2).unwrap();
    }
    assert_eq!(store.value("vit.w").unwrap(), &vp);
    assert_eq!(store.value("agent.w").unwrap(), &ap);
}

#[test]
fn objective_ignoring_agent_gives_zero_agent_halves() {
    let store = toy_store(0.5, 2.0, 3.0);
    let (pair, _) = gradient_pair_with(&store, |g, vb, ab| {
        let s = vb.var(g, "shared.s")?;
        let v = vb.var(g, "vit.v")?;
        ab.var(g, "shared.s")?;
        ab.var(g, "agent.a")?;
        Ok(g.mul(s, v)?)
    })
    .unwrap();
    assert!(pair.is_complete());
    let h = &pair.shared[&store.id("shared.s").unwrap()];
    assert_eq!(h.agent.as_ref().unwrap().item(), 0.0);
    assert_eq!(h.vit.as_ref().unwrap().item(), 2.0);
    assert_eq!(pair.agent_private[&store.id("agent.a").unwrap()].item(), 0.0);
}

fn tiny_cfg() -> ArchConfig {
    ArchConfig {
        layers: 2,
        hidden: 8,
        heads: 4,
        patch: 4,
        image_size: 8,
        channels: 3,
        classes: 3,
        mlp_ratio: 2,
        agent_variant: AgentVariant::Base,
        downsample: Downsample::AvgPool,
    }
}

struct Run {
    store: ParamStore<f64>,
    vit: Vit,
    agent: Agent,
    state: OptimState<f64>,
}

fn start(seed: u64, shared: bool) -> Run {
    let seeds = SeedTree::new(seed);
    let mut store = ParamStore::new();
    let vit = build_vit(&tiny_cfg(), &mut store, &seeds, shared).unwrap();
    let agent = build_agent(&tiny_cfg(), &mut store, &seeds, shared).unwrap();
    Run {
        store,
        vit,
        agent,
        state: OptimState::new(AdamW::default(), UpdateRule::AdamW),
    }
}

fn batch(step: usize) -> (Tensor<f64>, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(1000 + step as u64);
    let x = Tensor::from_fn(&[2, 3, 8, 8], |_| rng.gen_range(-1.0..1.0));
    (x, vec![rng.gen_range(0..3), rng.gen_range(0..3)])
}

fn advance(run: &mut Run, from: usize, to: usize, total: usize) -> Vec<f64> {
    let w = LossWeights::default();
    let mut losses = Vec::new();
    for step in from..to {
        let (x, y) = batch(step);
        let out = compute_gradient_pair(&run.store, Some(&run.vit), Some(&run.agent), &x, &y, &w, step as f64 / total as f64).unwrap();
        assert!(out.pair.is_complete());
        bootstrap_step(&out.pair, &mut run.state, &mut run.store, 1e-3).unwrap();
        losses.push(out.breakdown.total);
    }
    losses
}

fn snapshot(store: &ParamStore<f64>) -> BTreeMap<String, Vec<f64>> {
    store.iter().map(|p| (p.name.clone(), p.value.data().to_vec())).collect()
}

#[test]
fn training_replays_bit_for_bit() {
    let mut a = start(5, true);
    let mut b = start(5, true);
    let la = advance(&mut a, 0, 100, 100);
    let lb = advance(&mut b, 0, 100, 100);
    assert_eq!(la, lb);
    assert_eq!(snapshot(&a.store), snapshot(&b.store));
    assert!(la.iter().all(|l| l.is_finite()));
}

#[test]
fn resuming_from_checkpoint_matches_uninterrupted_run() {
    let mut straight = start(6, true);
    advance(&mut straight, 0, 10, 10);

    let mut first = start(6, true);
    advance(&mut first, 0, 5, 10);
    let mut meta = BTreeMap::new();
    meta.insert("step".to_string(), "5".to_string());
    let bytes = checkpoint::encode(&meta, &first.store, Some(&first.state)).unwrap();
    let back = checkpoint::decode::<f64>(&bytes).unwrap();
    let mut resumed = start(6, true);
    resumed.store = back.store;
    resumed.state = back.optim.unwrap();
    advance(&mut resumed, 5, 10, 10);
    assert_eq!(snapshot(&straight.store), snapshot(&resumed.store));
}

#[test]
fn shared_halves_match_tied_gradient_on_models() {
    let run = start(7, true);
    let (x, y) = batch(0);
    let w = LossWeights::default();
    let out = compute_gradient_pair(&run.store, Some(&run.vit), Some(&run.agent), &x, &y, &w, 0.2).unwrap();
    let mut g = Graph::new();
    let xv = g.constant(x);
    let mut b = Binder::new(&run.store, true);
    let tv = run.vit.forward(&mut g, &mut b, xv, false).unwrap();
    let ta = run.agent.forward(&mut g, &mut b, xv).unwrap();
    let c = combined_loss(&mut g, &tv, &ta, &y, &w, 0.2).unwrap();
    let grads = g.backward(c.total).unwrap();
    let mut checked = 0;
    for &(id, var) in b.bound() {
        if let Some(h) = out.pair.shared.get(&id) {
            let tied = grads.get(var).unwrap();
            let sum: Vec<f64> = h.vit.as_ref().unwrap().data().iter().zip(h.agent.as_ref().unwrap().data()).map(|(p, q)| p + q).collect();
            let diff = sum.iter().zip(tied.data()).map(|(p, q)| (p - q).abs()).fold(0.0, f64::max);
            assert!(diff < 1e-12, "{}: {diff}", run.store.by_id(id).name);
            checked += 1;
        }
    }
    assert_eq!(checked, run.store.iter().filter(|p| p.group == Group::Shared).count());
}

#[test]
fn single_network_step_uses_cross_entropy() {
    let run = start(8, false);
    let (x, y) = batch(1);
    let w = LossWeights::default();
    let out = compute_gradient_pair(&run.store, Some(&run.vit), None, &x, &y, &w, 0.0).unwrap();
    assert!(out.pair.agent_private.is_empty() && out.pair.shared.is_empty());
    assert_eq!(out.breakdown.total, out.breakdown.ce_vit);
    assert!(out.logits_agent.is_none());
    assert!(compute_gradient_pair::<f64>(&run.store, None, None, &x, &y, &w, 0.0).is_err());
}
