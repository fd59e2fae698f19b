//! Independent oracles and a finite-difference harness shared by the
//! integration tests. Everything here evaluates in `f64` straight from the
//! definitions and never calls into the autodiff engine's backward pass.

#![allow(dead_code)]

pub mod runs;
pub mod suite;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use vpl_core::nn::{Forward, ParamStore};
use vpl_core::{Tape, Tensor, Var};

pub const H: f64 = 1e-3;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn normal(rng: &mut impl Rng, shape: &[usize], scale: f32) -> Tensor {
    Tensor::from_fn(shape.to_vec(), |_| {
        let z: f64 = StandardNormal.sample(rng);
        z as f32 * scale
    })
}

/// Like [`normal`] but with every entry at least `gap` away from zero, for
/// ops with a kink at the origin.
pub fn normal_away_from_zero(rng: &mut impl Rng, shape: &[usize], gap: f32) -> Tensor {
    Tensor::from_fn(shape.to_vec(), |_| loop {
        let z: f64 = StandardNormal.sample(rng);
        if z.abs() as f32 > gap {
            break z as f32;
        }
    })
}

pub fn one_hot(labels: &[usize], classes: usize) -> Tensor {
    Tensor::from_fn(vec![labels.len(), classes], |i| {
        (labels[i / classes] == i % classes) as u8 as f32
    })
}

// ---- loss oracles -------------------------------------------------------

fn rows(t: &Tensor) -> Vec<Vec<f64>> {
    let s = t.shape();
    (0..s[0]).map(|i| t.row(i).iter().map(|&v| v as f64).collect()).collect()
}

fn dotf(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn logsumexp(v: &[f64]) -> f64 {
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

pub fn cross_entropy_oracle(logits: &Tensor, labels: &[usize]) -> f64 {
    let r = rows(logits);
    r.iter()
        .zip(labels)
        .map(|(z, &y)| logsumexp(z) - z[y])
        .sum::<f64>()
        / labels.len() as f64
}

/// Enumerate, for every anchor, its matched cross-branch partner plus the
/// `N` cross candidates and `N−1` same-branch candidates, and average the
/// negative log matched probabilities over both anchor directions.
pub fn contrastive_oracle(hc: &Tensor, ht: &Tensor, tau: f64) -> f64 {
    let (c, t) = (rows(hc), rows(ht));
    let n = c.len();
    let mut total = 0.0;
    for (anchors, partners) in [(&c, &t), (&t, &c)] {
        for i in 0..n {
            let mut candidates = Vec::with_capacity(2 * n - 1);
            for j in 0..n {
                candidates.push(dotf(&anchors[i], &partners[j]) / tau);
            }
            for k in (0..n).filter(|&k| k != i) {
                candidates.push(dotf(&anchors[i], &anchors[k]) / tau);
            }
            assert_eq!(candidates.len(), 2 * n - 1);
            total += candidates[i] - logsumexp(&candidates);
        }
    }
    -total / (2 * n) as f64
}

/// Probabilities of all `2N−1` candidates of every anchor, cnn anchors
/// first.
pub fn contrastive_candidate_probs(hc: &Tensor, ht: &Tensor, tau: f64) -> Vec<Vec<f64>> {
    let (c, t) = (rows(hc), rows(ht));
    let n = c.len();
    let mut out = Vec::new();
    for (anchors, partners) in [(&c, &t), (&t, &c)] {
        for i in 0..n {
            let mut s: Vec<f64> = (0..n).map(|j| dotf(&anchors[i], &partners[j]) / tau).collect();
            s.extend((0..n).filter(|&k| k != i).map(|k| dotf(&anchors[i], &anchors[k]) / tau));
            let lse = logsumexp(&s);
            out.push(s.iter().map(|v| (v - lse).exp()).collect());
        }
    }
    out
}

pub fn kl_oracle(zt: &Tensor, zc: &Tensor, rho: f64) -> f64 {
    let (t, c) = (rows(zt), rows(zc));
    let n = t.len();
    let mut total = 0.0;
    for (a, b) in t.iter().zip(&c) {
        let a: Vec<f64> = a.iter().map(|v| v / rho).collect();
        let b: Vec<f64> = b.iter().map(|v| v / rho).collect();
        let (la, lb) = (logsumexp(&a), logsumexp(&b));
        for (x, y) in a.iter().zip(&b) {
            let (lp, lq) = (x - la, y - lb);
            total += lp.exp() * (lp - lq);
        }
    }
    total / n as f64
}

pub fn matmul_oracle(a: &Tensor, b: &Tensor) -> Vec<f64> {
    let (m, k) = (a.shape()[0], a.shape()[1]);
    let n = b.shape()[1];
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[i * n + j] = (0..k).map(|p| a.data()[i * k + p] as f64 * b.data()[p * n + j] as f64).sum();
        }
    }
    out
}

// ---- finite differences -------------------------------------------------

/// Worst `|a − n| / max(1, |n|)` over the checked coordinates.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / n.abs().max(1.0))
        .fold(0.0, f64::max)
}

/// Coordinates to probe: all of them when there are few, otherwise a
/// random subset of `limit`.
pub fn coords(len: usize, limit: usize, rng: &mut impl Rng) -> Vec<usize> {
    if len <= limit {
        (0..len).collect()
    } else {
        rand::seq::index::sample(rng, len, limit).into_vec()
    }
}

/// Projection weights that turn an output into a scalar of order one.
pub fn projection(rng: &mut impl Rng, len: usize) -> Vec<f64> {
    let w: Vec<f64> = (0..len).map(|_| StandardNormal.sample(rng)).collect();
    let norm = w.iter().map(|v| v * v).sum::<f64>().sqrt();
    w.into_iter().map(|v| v / norm).collect()
}

fn project(t: &Tensor, w: &[f64]) -> f64 {
    t.data().iter().zip(w).map(|(&v, w)| v as f64 * w).sum()
}

/// Check `f(inputs)` against central differences with respect to every
/// input. The output is reduced to a scalar with fixed random weights
/// (scalar outputs are used as they are). Returns the worst relative
/// error over the inputs.
pub fn gradcheck(
    inputs: &[Tensor],
    f: impl Fn(&mut Tape, &[Var]) -> vpl_core::Result<Var>,
    probe: usize,
    rng: &mut impl Rng,
) -> f64 {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = f(&mut tape, &vars).expect("forward");
    let w = if tape.value(out).len() == 1 {
        vec![1.0]
    } else {
        projection(rng, tape.value(out).len())
    };
    let wt = tape.constant(Tensor::new(tape.shape(out).to_vec(), w.iter().map(|&v| v as f32).collect()).unwrap());
    let loss = tape.dot(out, wt).expect("dot");
    let grads = tape.backward(loss).expect("backward");

    let eval = |inputs: &[Tensor]| -> f64 {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
        let out = f(&mut tape, &vars).expect("forward");
        project(tape.value(out), &w)
    };
    let mut worst: f64 = 0.0;
    for (k, v) in vars.iter().enumerate() {
        let g = grads.wrt(&tape, *v);
        let idx = coords(inputs[k].len(), probe, rng);
        let mut analytic = Vec::new();
        let mut numeric = Vec::new();
        for &i in &idx {
            let mut plus = inputs.to_vec();
            plus[k].data_mut()[i] += H as f32;
            let mut minus = inputs.to_vec();
            minus[k].data_mut()[i] -= H as f32;
            let step = plus[k].data()[i] as f64 - minus[k].data()[i] as f64;
            numeric.push((eval(&plus) - eval(&minus)) / step);
            analytic.push(g.data()[i] as f64);
        }
        worst = worst.max(relative_error(&analytic, &numeric));
    }
    worst
}

/// Gradcheck of a parameterized module against every trainable entry of
/// `store` and the input batch.
///
/// With `kinked`, probes whose one-sided differences disagree are dropped:
/// the step crossed a ReLU boundary, where the derivative is one-sided.
/// The same holds when the central differences at `h` and `h/2` disagree.
/// Returns `None` when more than 30% of probes had to be dropped.
pub fn try_gradcheck_module(
    store: &ParamStore,
    input: &Tensor,
    train: bool,
    kinked: bool,
    f: impl Fn(&mut Forward<'_>, Var) -> vpl_core::Result<Var>,
    probe: usize,
    rng: &mut impl Rng,
) -> Option<f64> {
    let run = |store: &ParamStore, input: &Tensor, grad: bool| {
        let mut tape = Tape::new();
        let x = tape.leaf(input.clone(), grad);
        let binding = store.bind(&mut tape, grad);
        let mut fw = Forward::new(&mut tape, &binding, store, train);
        let out = f(&mut fw, x).expect("forward");
        (tape, binding, x, out)
    };
    let (mut tape, binding, x, out) = run(store, input, true);
    let w = projection(rng, tape.value(out).len());
    let wt = tape.constant(Tensor::new(tape.shape(out).to_vec(), w.iter().map(|&v| v as f32).collect()).unwrap());
    let loss = tape.dot(out, wt).expect("dot");
    let grads = tape.backward(loss).expect("backward");
    let eval = |store: &ParamStore, input: &Tensor| {
        let (tape, _, _, out) = run(store, input, false);
        project(tape.value(out), &w)
    };

    let base_loss = eval(store, input);
    let mut skipped = 0usize;
    let mut total = 0usize;
    // `at(δ)` is the loss with the probed coordinate moved by δ.
    let mut probe_one = |at: &dyn Fn(f32) -> f64, a: f64, analytic: &mut Vec<f64>, numeric: &mut Vec<f64>| {
        total += 1;
        let (plus, minus) = (at(H as f32), at(-H as f32));
        let central = (plus - minus) / (2.0 * H);
        if kinked {
            let (fwd, bwd) = ((plus - base_loss) / H, (base_loss - minus) / H);
            let half = (at(H as f32 / 2.0) - at(-H as f32 / 2.0)) / H;
            if (fwd - bwd).abs() > 1e-3 || (half - central).abs() > 5e-4 * central.abs().max(1.0) {
                skipped += 1;
                return;
            }
        }
        numeric.push(central);
        analytic.push(a);
    };

    let mut worst: f64 = 0.0;
    let names: Vec<String> = store.trainable().map(|(n, _)| n.to_string()).collect();
    for name in names {
        let g = grads.wrt(&tape, binding.var(&name).unwrap());
        let len = store.get(&name).unwrap().len();
        let (mut analytic, mut numeric) = (Vec::new(), Vec::new());
        for i in coords(len, probe, rng) {
            let at = |d: f32| {
                let mut s = store.clone();
                s.get_mut(&name).unwrap().data_mut()[i] += d;
                eval(&s, input)
            };
            probe_one(&at, g.data()[i] as f64, &mut analytic, &mut numeric);
        }
        worst = worst.max(relative_error(&analytic, &numeric));
    }
    let gx = grads.wrt(&tape, x);
    let (mut analytic, mut numeric) = (Vec::new(), Vec::new());
    for i in coords(input.len(), probe, rng) {
        let at = |d: f32| {
            let mut p = input.clone();
            p.data_mut()[i] += d;
            eval(store, &p)
        };
        probe_one(&at, gx.data()[i] as f64, &mut analytic, &mut numeric);
    }
    worst = worst.max(relative_error(&analytic, &numeric));
    (10 * skipped <= 3 * total).then_some(worst)
}

/// [`try_gradcheck_module`] on a smooth module.
pub fn gradcheck_module(
    store: &ParamStore,
    input: &Tensor,
    train: bool,
    f: impl Fn(&mut Forward<'_>, Var) -> vpl_core::Result<Var>,
    probe: usize,
    rng: &mut impl Rng,
) -> f64 {
    try_gradcheck_module(store, input, train, false, f, probe, rng).expect("smooth module")
}

// ---- loss-vs-oracle comparisons -------------------------------------------

fn engine_loss(a: &Tensor, b: &Tensor, f: impl Fn(&mut Tape, Var, Var) -> vpl_core::Result<Var>) -> f64 {
    let mut tape = Tape::new();
    let (va, vb) = (tape.constant(a.clone()), tape.constant(b.clone()));
    let l = f(&mut tape, va, vb).expect("loss");
    tape.value(l).data()[0] as f64
}

pub fn engine_contrastive(hc: &Tensor, ht: &Tensor, tau: f32) -> f64 {
    engine_loss(hc, ht, |t, a, b| vpl_core::plm::contrastive_loss(t, a, b, tau))
}

pub fn engine_kl(zt: &Tensor, zc: &Tensor, rho: f32) -> f64 {
    engine_loss(zt, zc, |t, a, b| vpl_core::plm::kl_loss(t, a, b, rho))
}

/// Worst `|engine − oracle|` of the contrastive and KL losses over
/// `instances` random draws with `N ≤ 8`, `d ≤ 16`, `C ≤ 10`.
pub fn loss_oracle_gaps(instances: usize, seed: u64) -> (f64, f64) {
    let mut r = rng(seed);
    let (mut cl, mut kl) = (0f64, 0f64);
    for _ in 0..instances {
        let n = r.random_range(1..=8);
        let d = r.random_range(1..=16);
        let c = r.random_range(2..=10);
        let tau = r.random_range(0.2f32..2.0);
        let rho = r.random_range(0.5f32..4.0);
        let scale = 1.0 / (d as f32).sqrt();
        let hc = normal(&mut r, &[n, d], scale);
        let ht = normal(&mut r, &[n, d], scale);
        cl = cl.max((engine_contrastive(&hc, &ht, tau) - contrastive_oracle(&hc, &ht, tau as f64)).abs());
        let zt = normal(&mut r, &[n, c], 2.0);
        let zc = normal(&mut r, &[n, c], 2.0);
        kl = kl.max((engine_kl(&zt, &zc, rho) - kl_oracle(&zt, &zc, rho as f64)).abs());
    }
    (cl, kl)
}

/// Worst gap to the closed forms: zero loss for a single pair and
/// `ln(2N−1)` when every embedding is the same vector.
pub fn closed_form_gaps(seed: u64) -> f64 {
    let mut r = rng(seed);
    let mut worst = 0f64;
    for n in 1..=8 {
        let d = r.random_range(1..=16);
        let tau = r.random_range(0.2f32..2.0);
        let v = normal(&mut r, &[1, d], 1.0 / (d as f32).sqrt());
        let same = Tensor::from_fn(vec![n, d], |i| v.data()[i % d]);
        let want = ((2 * n - 1) as f64).ln();
        worst = worst.max((engine_contrastive(&same, &same, tau) - want).abs());
        let a = normal(&mut r, &[1, d], 1.0);
        let b = normal(&mut r, &[1, d], 1.0);
        worst = worst.max(engine_contrastive(&a, &b, tau).abs());
    }
    worst
}
