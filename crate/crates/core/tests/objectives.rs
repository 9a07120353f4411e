use std::collections::BTreeSet;

use bootvit_core::arch::LayerTrace;
use bootvit_core::objectives::{
    adapt_feature, combined_loss, combined_loss_with_teachers, feat_loss_layer, feat_loss_total, kd_loss, mutual_loss, AdaptMode, Decay, LossWeights,
};
use bootvit_core::CoreError;
use bootvit_tensor::gradcheck;
use bootvit_tensor::{Graph, Tensor, Var};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

fn feat_value(a: &Tensor<f64>, v: &Tensor<f64>, mode: AdaptMode) -> f64 {
    let mut g = Graph::new();
    let a = g.constant(a.clone());
    let v = g.constant(v.clone());
    let (l, _) = feat_loss_layer(&mut g, a, v, mode).unwrap();
    g.value(l).item()
}

fn normalized(x: &[f64]) -> Vec<f64> {
    let n = x.iter().map(|v| v * v).sum::<f64>().sqrt();
    x.iter().map(|v| v / (n + 1e-12)).collect()
}

// Straight-line evaluation: align-corners interpolation along tokens,
// per-sample normalization, squared distance, batch mean.
fn feat_oracle(a: &Tensor<f64>, v: &Tensor<f64>) -> f64 {
    let (b, na, d) = (a.shape()[0], a.shape()[1], a.shape()[2]);
    let nv = v.shape()[1];
    let mut total = 0.0;
    for s in 0..b {
        let mut ad = vec![0.0; nv * d];
        for i in 0..nv {
            let pos = if nv == 1 { 0.0 } else { i as f64 * (na - 1) as f64 / (nv - 1) as f64 };
            let lo = pos.floor() as usize;
            let hi = (lo + 1).min(na - 1);
            let w = pos - lo as f64;
            for c in 0..d {
                ad[i * d + c] = (1.0 - w) * a.at(&[s, lo, c]) + w * a.at(&[s, hi, c]);
            }
        }
        let vd: Vec<f64> = (0..nv * d).map(|k| v.at(&[s, k / d, k % d])).collect();
        let (an, vn) = (normalized(&ad), normalized(&vd));
        total += an.iter().zip(&vn).map(|(x, y)| (x - y) * (x - y)).sum::<f64>();
    }
    total / b as f64
}

#[test]
fn feat_loss_matches_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for (na, nv) in [(16, 16), (64, 16), (7, 16), (49, 16), (1, 4)] {
        let a = random(&[3, na, 5], &mut rng);
        let v = random(&[3, nv, 5], &mut rng);
        let got = feat_value(&a, &v, AdaptMode::SeqInterp1d);
        assert!((got - feat_oracle(&a, &v)).abs() < 1e-12, "{na}->{nv}");
    }
}

#[test]
fn feat_loss_reference_points() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let v = random(&[2, 4, 3], &mut rng);
    assert!(feat_value(&v, &v, AdaptMode::SeqInterp1d).abs() < 1e-14);
    let neg = v.map(|x| -x);
    assert!((feat_value(&neg, &v, AdaptMode::SeqInterp1d) - 4.0).abs() < 1e-10);
    // disjoint supports are orthogonal
    let a = Tensor::from_fn(&[1, 2, 2], |i| if i < 2 { 1.0 } else { 0.0 });
    let b = Tensor::from_fn(&[1, 2, 2], |i| if i >= 2 { 3.0 } else { 0.0 });
    assert!((feat_value(&a, &b, AdaptMode::SeqInterp1d) - 2.0).abs() < 1e-10);
}

#[test]
fn feat_loss_is_scale_invariant() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let a = random(&[2, 16, 4], &mut rng);
    let v = random(&[2, 4, 4], &mut rng);
    let base = feat_value(&a, &v, AdaptMode::SeqInterp1d);
    for c in [0.1, 0.5, 7.0, 1e4] {
        assert!((feat_value(&a.map(|x| c * x), &v, AdaptMode::SeqInterp1d) - base).abs() < 1e-10);
        assert!((feat_value(&a, &v.map(|x| c * x), AdaptMode::SeqInterp1d) - base).abs() < 1e-10);
    }
    // below that the eps in the normalizer shows up as O(eps / norm)
    let norm = a.data()[..64].iter().map(|x| x * x).sum::<f64>().sqrt();
    for c in [1e-3, 1e-2] {
        let dev = (feat_value(&a.map(|x| c * x), &v, AdaptMode::SeqInterp1d) - base).abs();
        assert!(dev < 8.0 * 1e-12 / (c * norm), "{c}: {dev:e}");
    }
}

#[test]
fn zero_feature_is_counted_and_finite() {
    let mut g = Graph::<f64>::new();
    let a = g.param(Tensor::zeros(&[2, 4, 3]));
    let v = g.constant(Tensor::from_fn(&[2, 4, 3], |i| i as f64));
    let (l, zeros) = feat_loss_layer(&mut g, a, v, AdaptMode::SeqInterp1d).unwrap();
    assert_eq!(zeros, 2);
    // zero sample normalizes to zero so the term is ||v_hat||^2 = 1 per sample
    assert!((g.value(l).item() - 1.0).abs() < 1e-12);
    let grads = g.backward(l).unwrap();
    assert!(grads.get(a).unwrap().all_finite());
}

#[test]
fn avg_pool_adapt_averages_blocks() {
    let mut g = Graph::<f64>::new();
    let f = g.constant(Tensor::from_fn(&[1, 16, 1], |i| i as f64));
    let y = adapt_feature(&mut g, f, 4, AdaptMode::AvgPool2d).unwrap();
    assert_eq!(g.value(y).data(), &[2.5, 4.5, 10.5, 12.5]);
}

#[test]
fn mismatched_widths_rejected() {
    let mut g = Graph::<f64>::new();
    let a = g.constant(Tensor::zeros(&[1, 4, 3]));
    let v = g.constant(Tensor::zeros(&[1, 4, 5]));
    assert!(feat_loss_layer(&mut g, a, v, AdaptMode::SeqInterp1d).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]
    #[test]
    fn feat_loss_within_bounds(seed in any::<u64>(), na in 1usize..20, nv in 1usize..20, d in 1usize..5) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = random(&[2, na, d], &mut rng);
        let v = random(&[2, nv, d], &mut rng);
        let l = feat_value(&a, &v, AdaptMode::SeqInterp1d);
        prop_assert!((-1e-12..=4.0 + 1e-12).contains(&l));
    }

    #[test]
    fn kl_part_is_nonnegative(seed in any::<u64>(), t in 0.5f64..8.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut g = Graph::<f64>::new();
        let s = g.param(random(&[3, 6], &mut rng).map(|x| 5.0 * x));
        let te = g.constant(random(&[3, 6], &mut rng).map(|x| 5.0 * x));
        let l = kd_loss(&mut g, s, te, &[0, 1, 2], t, 0.0, 1.0).unwrap();
        prop_assert!(g.value(l).item() >= -1e-12);
    }
}

fn trace(g: &mut Graph<f64>, feats: &[Tensor<f64>], logits: &Tensor<f64>) -> LayerTrace {
    LayerTrace {
        features: feats.iter().map(|f| g.param(f.clone())).collect(),
        logits: g.param(logits.clone()),
        attention: Vec::new(),
    }
}

struct Fixture {
    fv: Vec<Tensor<f64>>,
    fa: Vec<Tensor<f64>>,
    lv: Tensor<f64>,
    la: Tensor<f64>,
    labels: Vec<usize>,
}

fn fixture(seed: u64) -> Fixture {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Fixture {
        fv: (0..3).map(|_| random(&[2, 4, 3], &mut rng)).collect(),
        fa: [16, 4, 4].iter().map(|&n| random(&[2, n, 3], &mut rng)).collect(),
        lv: random(&[2, 5], &mut rng),
        la: random(&[2, 5], &mut rng),
        labels: vec![1, 4],
    }
}

#[test]
fn feat_total_is_sum_over_selected_layers() {
    let f = fixture(3);
    let singles: Vec<f64> = (0..3).map(|l| feat_value(&f.fa[l], &f.fv[l], AdaptMode::SeqInterp1d)).collect();
    for layers in [None, Some(vec![1]), Some(vec![1, 3]), Some(vec![2, 3])] {
        let w = LossWeights {
            layers: layers.clone().map(|v| v.into_iter().collect::<BTreeSet<_>>()),
            ..LossWeights::default()
        };
        let mut g = Graph::new();
        let tv = trace(&mut g, &f.fv, &f.lv);
        let ta = trace(&mut g, &f.fa, &f.la);
        let total = feat_loss_total(&mut g, &ta, &tv, &w).unwrap();
        let chosen = layers.unwrap_or(vec![1, 2, 3]);
        let want: f64 = chosen.iter().map(|&l| singles[l - 1]).sum();
        assert!((g.value(total.total).item() - want).abs() < 1e-12);
        let listed: Vec<usize> = total.per_layer.iter().map(|&(l, _)| l).collect();
        assert_eq!(listed, chosen);
    }
    let w = LossWeights {
        layers: Some([0].into_iter().collect()),
        ..LossWeights::default()
    };
    let mut g = Graph::new();
    let tv = trace(&mut g, &f.fv, &f.lv);
    let ta = trace(&mut g, &f.fa, &f.la);
    assert!(feat_loss_total(&mut g, &ta, &tv, &w).is_err());
}

fn softmax(x: &[f64]) -> Vec<f64> {
    let m = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = x.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

fn kd_oracle(s: &Tensor<f64>, t: &Tensor<f64>, labels: &[usize], temp: f64, hard: f64, soft: f64) -> f64 {
    let (b, k) = (s.shape()[0], s.shape()[1]);
    let mut ce = 0.0;
    let mut kl = 0.0;
    for i in 0..b {
        let row_s = &s.data()[i * k..(i + 1) * k];
        let row_t = &t.data()[i * k..(i + 1) * k];
        ce -= softmax(row_s)[labels[i]].ln();
        let ps = softmax(&row_s.iter().map(|v| v / temp).collect::<Vec<_>>());
        let pt = softmax(&row_t.iter().map(|v| v / temp).collect::<Vec<_>>());
        kl += pt.iter().zip(&ps).map(|(p, q)| p * (p / q).ln()).sum::<f64>();
    }
    hard * ce / b as f64 + soft * temp * temp * kl / b as f64
}

#[test]
fn kd_matches_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for (temp, hard, soft) in [(4.0, 1.0, 1.0), (1.0, 0.0, 1.0), (2.5, 0.3, 0.7)] {
        let s = random(&[4, 7], &mut rng).map(|x| 3.0 * x);
        let t = random(&[4, 7], &mut rng).map(|x| 3.0 * x);
        let labels = [0, 6, 3, 3];
        let mut g = Graph::new();
        let sv = g.param(s.clone());
        let tv = g.constant(t.clone());
        let l = kd_loss(&mut g, sv, tv, &labels, temp, hard, soft).unwrap();
        assert!((g.value(l).item() - kd_oracle(&s, &t, &labels, temp, hard, soft)).abs() < 1e-12);
    }
}

#[test]
fn kd_of_identical_logits_is_cross_entropy() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let s = random(&[3, 4], &mut rng);
    let mut g = Graph::new();
    let sv = g.param(s.clone());
    let tv = g.constant(s.clone());
    let ce = g.cross_entropy(sv, &[0, 1, 2]).unwrap();
    let l = kd_loss(&mut g, sv, tv, &[0, 1, 2], 4.0, 1.0, 1.0).unwrap();
    assert!((g.value(l).item() - g.value(ce).item()).abs() < 1e-12);
}

#[test]
fn kd_rejects_attached_teacher() {
    let mut g = Graph::<f64>::new();
    let s = g.param(Tensor::zeros(&[2, 3]));
    let t = g.param(Tensor::zeros(&[2, 3]));
    assert!(matches!(kd_loss(&mut g, s, t, &[0, 1], 4.0, 1.0, 1.0), Err(CoreError::Contract(_))));
}

#[test]
fn mutual_loss_is_symmetric() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let a = random(&[3, 5], &mut rng);
    let b = random(&[3, 5], &mut rng);
    let labels = [2, 0, 4];
    let w = LossWeights::default();
    let eval = |x: &Tensor<f64>, y: &Tensor<f64>| {
        let mut g = Graph::new();
        let xv = g.param(x.clone());
        let yv = g.param(y.clone());
        let l = mutual_loss(&mut g, xv, yv, &labels, &w).unwrap();
        g.value(l).item()
    };
    assert!((eval(&a, &b) - eval(&b, &a)).abs() < 1e-12);
}

#[test]
fn mutual_loss_gradient_sees_only_student_paths() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let a = random(&[3, 5], &mut rng);
    let b = random(&[3, 5], &mut rng);
    let labels = [1, 1, 3];
    let w = LossWeights::default();
    let mut g = Graph::new();
    let lv = g.param(a.clone());
    let la = g.param(b.clone());
    let l = mutual_loss(&mut g, lv, la, &labels, &w).unwrap();
    let grads = g.backward(l).unwrap();
    for (student, teacher, got) in [(&a, &b, grads.get(lv).unwrap()), (&b, &a, grads.get(la).unwrap())] {
        let mut h = Graph::new();
        let s = h.param(student.clone());
        let t = h.constant(teacher.clone());
        let kd = kd_loss(&mut h, s, t, &labels, w.temperature, w.kd_hard, w.kd_soft).unwrap();
        let want = h.backward(kd).unwrap();
        assert!(got.max_abs_diff(want.get(s).unwrap()) < 1e-14);
    }
}

fn combined_value(f: &Fixture, w: &LossWeights, t: f64) -> bootvit_core::objectives::LossBreakdown {
    let mut g = Graph::new();
    let tv = trace(&mut g, &f.fv, &f.lv);
    let ta = trace(&mut g, &f.fa, &f.la);
    combined_loss(&mut g, &tv, &ta, &f.labels, w, t).unwrap().breakdown
}

#[test]
fn combined_loss_at_start_and_end() {
    let f = fixture(8);
    let w = LossWeights::default();
    let start = combined_value(&f, &w, 0.0);
    assert_eq!(start.feat_weight_multiplier, 1.0);
    assert!((start.total - (start.feat_total + 10.0 * start.mutual)).abs() < 1e-12);
    let end = combined_value(&f, &w, 1.0);
    assert_eq!(end.effective_alpha, 0.0);
    assert!((end.total - 10.0 * end.mutual).abs() < 1e-12);
    let mid = combined_value(&f, &w, 0.25);
    assert!((mid.total - (0.75 * mid.feat_total + 10.0 * mid.mutual)).abs() < 1e-12);
    let flat = LossWeights {
        decay: Decay::None,
        ..w.clone()
    };
    let late = combined_value(&f, &flat, 0.9);
    assert!((late.total - (late.feat_total + 10.0 * late.mutual)).abs() < 1e-12);
    let mut g = Graph::new();
    let tv = trace(&mut g, &f.fv, &f.lv);
    let ta = trace(&mut g, &f.fa, &f.la);
    assert!(combined_loss(&mut g, &tv, &ta, &f.labels, &w, 1.5).is_err());
}

#[test]
fn zero_weights_fall_back_to_cross_entropy() {
    let f = fixture(9);
    let w = LossWeights {
        alpha: 0.0,
        beta: 0.0,
        ..LossWeights::default()
    };
    let b = combined_value(&f, &w, 0.3);
    assert!(b.ce_fallback);
    assert!((b.total - (b.ce_vit + b.ce_agent)).abs() < 1e-12);
}

#[test]
fn detached_agent_feature_gets_no_feature_gradient() {
    let f = fixture(10);
    let w = LossWeights {
        beta: 0.0,
        detach_agent_feat: true,
        ..LossWeights::default()
    };
    let mut g = Graph::new();
    let tv = trace(&mut g, &f.fv, &f.lv);
    let ta = trace(&mut g, &f.fa, &f.la);
    let c = combined_loss(&mut g, &tv, &ta, &f.labels, &w, 0.0).unwrap();
    let grads = g.backward(c.total).unwrap();
    assert!(ta.features.iter().all(|&v| grads.get(v).is_none_or(|t| t.norm() == 0.0)));
    assert!(tv.features.iter().any(|&v| grads.get(v).is_some_and(|t| t.norm() > 0.0)));
}

#[test]
fn combined_loss_feature_gradients_match_differences() {
    let f = fixture(11);
    let mut inputs = f.fv.clone();
    inputs.extend(f.fa.clone());
    let (lv, la, labels) = (f.lv.clone(), f.la.clone(), f.labels.clone());
    let build = move |g: &mut Graph<f64>, v: &[Var]| -> bootvit_tensor::Result<Var> {
        let tv = LayerTrace {
            features: v[0..3].to_vec(),
            logits: g.constant(lv.clone()),
            attention: Vec::new(),
        };
        let ta = LayerTrace {
            features: v[3..6].to_vec(),
            logits: g.constant(la.clone()),
            attention: Vec::new(),
        };
        Ok(combined_loss(g, &tv, &ta, &labels, &LossWeights::default(), 0.4).unwrap().total)
    };
    let err = gradcheck::check(&inputs, build, 1e-5).unwrap();
    assert!(err < 1e-7, "{err}");
}

#[test]
fn kd_student_gradient_matches_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for seed in 0..5 {
        let s = random(&[3, 6], &mut rng).map(|x| 2.0 * x);
        let t = random(&[3, 6], &mut rng).map(|x| 2.0 * x);
        let temp = 1.0 + seed as f64;
        let build = |g: &mut Graph<f64>, v: &[Var]| -> bootvit_tensor::Result<Var> {
            let te = g.constant(t.clone());
            Ok(kd_loss(g, v[0], te, &[5, 0, 2], temp, 1.0, 1.0).unwrap())
        };
        let err = gradcheck::check(&[s], build, 1e-5).unwrap();
        assert!(err < 1e-7, "{err}");
    }
}

#[test]
fn full_objective_gradients_match_differences_with_frozen_teachers() {
    for seed in 0..3 {
        let f = fixture(20 + seed);
        let mut inputs = f.fv.clone();
        inputs.extend(f.fa.clone());
        inputs.push(f.lv.clone());
        inputs.push(f.la.clone());
        let (lv, la, labels) = (f.lv.clone(), f.la.clone(), f.labels.clone());
        let build = move |g: &mut Graph<f64>, v: &[Var]| -> bootvit_tensor::Result<Var> {
            let tv = LayerTrace {
                features: v[0..3].to_vec(),
                logits: v[6],
                attention: Vec::new(),
            };
            let ta = LayerTrace {
                features: v[3..6].to_vec(),
                logits: v[7],
                attention: Vec::new(),
            };
            let teachers = (g.constant(lv.clone()), g.constant(la.clone()));
            let w = LossWeights::default();
            Ok(combined_loss_with_teachers(g, &tv, &ta, &labels, &w, 0.4, Some(teachers)).unwrap().total)
        };
        let err = gradcheck::check(&inputs, build, 1e-5).unwrap();
        assert!(err < 1e-7, "{err}");
    }
}

#[test]
fn frozen_teachers_agree_with_detached_gradient() {
    let f = fixture(30);
    let w = LossWeights::default();
    let grads_of = |frozen: bool| {
        let mut g = Graph::new();
        let tv = trace(&mut g, &f.fv, &f.lv);
        let ta = trace(&mut g, &f.fa, &f.la);
        let teachers = frozen.then(|| (g.constant(f.lv.clone()), g.constant(f.la.clone())));
        let c = combined_loss_with_teachers(&mut g, &tv, &ta, &f.labels, &w, 0.1, teachers).unwrap();
        let grads = g.backward(c.total).unwrap();
        [tv.logits, ta.logits, tv.features[0], ta.features[0]].map(|v| grads.get(v).unwrap().clone())
    };
    for (a, b) in grads_of(false).iter().zip(grads_of(true).iter()) {
        assert_eq!(a, b);
    }
}

