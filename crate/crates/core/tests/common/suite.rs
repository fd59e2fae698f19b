//! Finite-difference checks of every differentiable op, layer, backbone and
//! loss. Each case draws a fresh random instance and reports the worst
//! relative error over its inputs.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use vpl_core::backbones::{BackboneKind, BackboneSpec, Branch, InputShape};
use vpl_core::nn::{BatchNorm2d, Conv2d, Init, LayerNorm, Linear, Mhsa, Mlp, ParamStore, PatchEmbed};
use vpl_core::plm::{contrastive_loss, cross_entropy, kl_loss};
use vpl_core::Tensor;

use super::{gradcheck, gradcheck_module, try_gradcheck_module, normal, normal_away_from_zero, one_hot};

pub type Case = (&'static str, fn(&mut ChaCha8Rng) -> f64);

const PROBE: usize = 12;

/// Rows with well separated entries so a `±h` nudge never changes the
/// argmax.
fn separated(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    let mut data = Vec::with_capacity(rows * cols);
    for _ in 0..rows {
        let mut ranks: Vec<usize> = (0..cols).collect();
        ranks.shuffle(rng);
        data.extend(ranks.iter().map(|&r| r as f32 * 0.1 + rng.random_range(-0.02..0.02)));
    }
    Tensor::new(vec![rows, cols], data).unwrap()
}

fn positive(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(0.5..2.0))
}

pub const OPS: &[Case] = &[
    ("add (broadcast)", |r| {
        let x = [normal(r, &[3, 4], 1.0), normal(r, &[4], 1.0)];
        gradcheck(&x, |t, v| t.add(v[0], v[1]), PROBE, r)
    }),
    ("sub (broadcast)", |r| {
        let x = [normal(r, &[2, 1, 3], 1.0), normal(r, &[4, 1], 1.0)];
        gradcheck(&x, |t, v| t.sub(v[0], v[1]), PROBE, r)
    }),
    ("mul (broadcast)", |r| {
        let x = [normal(r, &[2, 3, 4], 1.0), normal(r, &[3, 1], 1.0)];
        gradcheck(&x, |t, v| t.mul(v[0], v[1]), PROBE, r)
    }),
    ("scale", |r| {
        let f = r.random_range(-2.0..2.0);
        let x = [normal(r, &[5, 3], 1.0)];
        gradcheck(&x, |t, v| t.scale(v[0], f), PROBE, r)
    }),
    ("relu", |r| {
        let x = [normal_away_from_zero(r, &[4, 5], 0.01)];
        gradcheck(&x, |t, v| t.relu(v[0]), PROBE, r)
    }),
    ("gelu", |r| {
        let x = [normal(r, &[4, 5], 1.5)];
        gradcheck(&x, |t, v| t.gelu(v[0]), PROBE, r)
    }),
    ("exp", |r| {
        let x = [normal(r, &[3, 4], 1.0)];
        gradcheck(&x, |t, v| t.exp(v[0]), PROBE, r)
    }),
    ("log", |r| {
        let x = [positive(r, &[3, 4])];
        gradcheck(&x, |t, v| t.log(v[0]), PROBE, r)
    }),
    ("matmul", |r| {
        let x = [normal(r, &[3, 4], 1.0), normal(r, &[4, 5], 1.0)];
        gradcheck(&x, |t, v| t.matmul(v[0], v[1]), PROBE, r)
    }),
    ("matmul (shared rhs)", |r| {
        let x = [normal(r, &[2, 3, 4], 1.0), normal(r, &[4, 2], 1.0)];
        gradcheck(&x, |t, v| t.matmul(v[0], v[1]), PROBE, r)
    }),
    ("matmul (batched)", |r| {
        let x = [normal(r, &[2, 3, 4], 1.0), normal(r, &[2, 4, 3], 1.0)];
        gradcheck(&x, |t, v| t.matmul(v[0], v[1]), PROBE, r)
    }),
    ("conv2d", |r| {
        let stride = r.random_range(1..=2);
        let pad = r.random_range(0..=1);
        let x = [normal(r, &[2, 3, 5, 5], 1.0), normal(r, &[4, 3, 3, 3], 0.3), normal(r, &[4], 0.5)];
        gradcheck(&x, move |t, v| t.conv2d(v[0], v[1], Some(v[2]), stride, pad), PROBE, r)
    }),
    ("conv2d (no bias)", |r| {
        let x = [normal(r, &[2, 2, 4, 4], 1.0), normal(r, &[3, 2, 2, 2], 0.5)];
        gradcheck(&x, |t, v| t.conv2d(v[0], v[1], None, 2, 0), PROBE, r)
    }),
    ("sum", |r| {
        let x = [normal(r, &[3, 4], 1.0)];
        gradcheck(&x, |t, v| t.sum(v[0]), PROBE, r)
    }),
    ("mean", |r| {
        let x = [normal(r, &[3, 4], 1.0)];
        gradcheck(&x, |t, v| t.mean(v[0]), PROBE, r)
    }),
    ("sum_axis", |r| {
        let axis = r.random_range(0..3);
        let x = [normal(r, &[2, 3, 4], 1.0)];
        gradcheck(&x, move |t, v| t.sum_axis(v[0], axis), PROBE, r)
    }),
    ("mean_axis", |r| {
        let axis = r.random_range(0..3);
        let x = [normal(r, &[2, 3, 4], 1.0)];
        gradcheck(&x, move |t, v| t.mean_axis(v[0], axis), PROBE, r)
    }),
    ("max_axis", |r| {
        let x = [separated(r, 4, 5)];
        gradcheck(&x, |t, v| t.max_axis(v[0], 1), PROBE, r)
    }),
    ("softmax", |r| {
        let axis = r.random_range(0..2);
        let x = [normal(r, &[3, 5], 2.0)];
        gradcheck(&x, move |t, v| t.softmax(v[0], axis), PROBE, r)
    }),
    ("log_softmax", |r| {
        let axis = r.random_range(0..2);
        let x = [normal(r, &[3, 5], 2.0)];
        gradcheck(&x, move |t, v| t.log_softmax(v[0], axis), PROBE, r)
    }),
    ("layer_norm", |r| {
        let x = [normal(r, &[2, 3, 6], 1.0), normal(r, &[6], 1.0), normal(r, &[6], 1.0)];
        gradcheck(&x, |t, v| t.layer_norm(v[0], Some(v[1]), Some(v[2]), 1e-5), PROBE, r)
    }),
    ("layer_norm (no affine)", |r| {
        let x = [normal(r, &[4, 5], 1.0)];
        gradcheck(&x, |t, v| t.layer_norm(v[0], None, None, 1e-5), PROBE, r)
    }),
    ("batch_norm (batch stats)", |r| {
        let x = [normal(r, &[3, 4, 2, 2], 1.0), normal(r, &[4], 1.0), normal(r, &[4], 1.0)];
        gradcheck(&x, |t, v| Ok(t.batch_norm(v[0], v[1], v[2], None, 1e-5)?.0), PROBE, r)
    }),
    ("batch_norm (running stats)", |r| {
        let mean: Vec<f32> = (0..4).map(|_| r.random_range(-0.5..0.5)).collect();
        let var: Vec<f32> = (0..4).map(|_| r.random_range(0.5..2.0)).collect();
        let x = [normal(r, &[2, 4, 3], 1.0), normal(r, &[4], 1.0), normal(r, &[4], 1.0)];
        gradcheck(
            &x,
            move |t, v| Ok(t.batch_norm(v[0], v[1], v[2], Some((&mean, &var)), 1e-5)?.0),
            PROBE,
            r,
        )
    }),
    ("permute", |r| {
        let x = [normal(r, &[2, 3, 4], 1.0)];
        gradcheck(&x, |t, v| t.permute(v[0], &[2, 0, 1]), PROBE, r)
    }),
    ("transpose", |r| {
        let x = [normal(r, &[2, 3, 4], 1.0)];
        gradcheck(&x, |t, v| t.transpose(v[0]), PROBE, r)
    }),
    ("reshape", |r| {
        let x = [normal(r, &[2, 6], 1.0)];
        gradcheck(&x, |t, v| t.reshape(v[0], &[3, 4]), PROBE, r)
    }),
    ("expand", |r| {
        let x = [normal(r, &[1, 3, 1], 1.0)];
        gradcheck(&x, |t, v| t.expand(v[0], &[2, 3, 4]), PROBE, r)
    }),
    ("gather_rows (repeated)", |r| {
        let x = [normal(r, &[4, 3], 1.0)];
        gradcheck(&x, |t, v| t.gather_rows(v[0], &[2, 0, 2, 3]), PROBE, r)
    }),
    ("concat", |r| {
        let axis = r.random_range(0..2);
        let x = [normal(r, &[3, 3], 1.0), normal(r, &[3, 3], 1.0)];
        gradcheck(&x, move |t, v| t.concat(&[v[0], v[1]], axis), PROBE, r)
    }),
    ("dot", |r| {
        let x = [normal(r, &[3, 4], 1.0), normal(r, &[3, 4], 1.0)];
        gradcheck(&x, |t, v| t.dot(v[0], v[1]), PROBE, r)
    }),
];

fn store_of(init: impl FnOnce(&mut ParamStore, &mut ChaCha8Rng), r: &mut ChaCha8Rng) -> ParamStore {
    let mut s = ParamStore::new();
    init(&mut s, r);
    s
}

/// Randomize affine terms that start at 1/0 so their gradients are generic.
fn jitter(store: &mut ParamStore, r: &mut ChaCha8Rng) {
    let names: Vec<String> = store.trainable().map(|(n, _)| n.to_string()).collect();
    for n in names {
        for v in store.get_mut(&n).unwrap().data_mut() {
            *v += r.random_range(-0.3..0.3);
        }
    }
}

pub const LAYERS: &[Case] = &[
    ("Linear", |r| {
        let l = Linear::new("fc", 5, 3, Init::FanIn);
        let mut s = store_of(|s, r| l.init(s, r).unwrap(), r);
        jitter(&mut s, r);
        let x = normal(r, &[4, 5], 1.0);
        gradcheck_module(&s, &x, true, |f, x| l.forward(f, x), 8, r)
    }),
    ("Conv2d", |r| {
        let mut l = Conv2d::new("conv", 2, 3, 3, 1, 1);
        l.bias = true;
        let s = store_of(|s, r| l.init(s, r).unwrap(), r);
        let x = normal(r, &[2, 2, 4, 4], 1.0);
        gradcheck_module(&s, &x, true, |f, x| l.forward(f, x), 8, r)
    }),
    ("BatchNorm2d (train)", |r| {
        let l = BatchNorm2d::new("bn", 3);
        let mut s = store_of(|s, _| l.init(s).unwrap(), r);
        jitter(&mut s, r);
        let x = normal(r, &[3, 3, 2, 2], 1.0);
        gradcheck_module(&s, &x, true, |f, x| l.forward(f, x), 8, r)
    }),
    ("BatchNorm2d (eval)", |r| {
        let l = BatchNorm2d::new("bn", 3);
        let mut s = store_of(|s, _| l.init(s).unwrap(), r);
        jitter(&mut s, r);
        let x = normal(r, &[2, 3, 2, 2], 1.0);
        gradcheck_module(&s, &x, false, |f, x| l.forward(f, x), 8, r)
    }),
    ("LayerNorm", |r| {
        let l = LayerNorm::new("ln", 6);
        let mut s = store_of(|s, _| l.init(s).unwrap(), r);
        jitter(&mut s, r);
        let x = normal(r, &[2, 3, 6], 1.0);
        gradcheck_module(&s, &x, true, |f, x| l.forward(f, x), 8, r)
    }),
    ("Mlp", |r| {
        let l = Mlp::new("mlp", 4, 8, Init::FanIn);
        let mut s = store_of(|s, r| l.init(s, r).unwrap(), r);
        jitter(&mut s, r);
        let x = normal(r, &[2, 3, 4], 1.0);
        gradcheck_module(&s, &x, true, |f, x| l.forward(f, x), 8, r)
    }),
    ("Mhsa", |r| {
        let l = Mhsa::new("attn", 4, 2, Init::FanIn).unwrap();
        let mut s = store_of(|s, r| l.init(s, r).unwrap(), r);
        jitter(&mut s, r);
        let x = normal(r, &[2, 3, 4], 1.0);
        gradcheck_module(&s, &x, true, |f, x| l.forward(f, x), 8, r)
    }),
    ("PatchEmbed", |r| {
        let l = PatchEmbed::new("patch", 2, 5, 2, (4, 4)).unwrap();
        let mut s = store_of(|s, r| l.init(s, r).unwrap(), r);
        jitter(&mut s, r);
        let x = normal(r, &[2, 2, 4, 4], 1.0);
        gradcheck_module(&s, &x, true, |f, x| l.forward(f, x), 8, r)
    }),
];

/// Full branch on a 2-image batch, checked through its embedding and logits.
/// Instances with too many probes on a ReLU boundary are redrawn.
fn branch_case(spec: BackboneSpec, side: usize, bridge_to: Option<usize>, r: &mut ChaCha8Rng) -> f64 {
    let kinked = spec.kind == BackboneKind::Conv;
    let input = InputShape {
        channels: 2,
        height: side,
        width: side,
    };
    let branch = Branch::new(&spec, input, bridge_to).unwrap();
    for _ in 0..10 {
        let mut s = branch.build_store(r).unwrap();
        jitter(&mut s, r);
        let x = normal(r, &[2, 2, side, side], 1.0);
        let forward = |f: &mut vpl_core::nn::Forward<'_>, x| {
            let out = branch.forward(f, x)?;
            f.tape.concat(&[out.embedding, out.logits], 1)
        };
        if let Some(e) = try_gradcheck_module(&s, &x, true, kinked, forward, 6, r) {
            return e;
        }
    }
    panic!("no informative instance in 10 draws");
}

pub const BACKBONES: &[Case] = &[
    ("residual CNN branch (bridged)", |r| {
        let spec = BackboneSpec {
            kind: BackboneKind::Conv,
            depth: 2,
            width: 3,
            heads: None,
            patch: None,
            mlp_ratio: None,
            classes: 4,
        };
        branch_case(spec, 4, Some(8), r)
    }),
    ("transformer branch", |r| {
        let spec = BackboneSpec {
            kind: BackboneKind::Transformer,
            depth: 1,
            width: 8,
            heads: Some(2),
            patch: Some(4),
            mlp_ratio: Some(2),
            classes: 4,
        };
        branch_case(spec, 8, None, r)
    }),
];

pub const LOSSES: &[Case] = &[
    ("cross-entropy", |r| {
        let (n, c) = (r.random_range(1..6), r.random_range(2..8));
        let labels: Vec<usize> = (0..n).map(|_| r.random_range(0..c)).collect();
        let y = one_hot(&labels, c);
        let x = [normal(r, &[n, c], 2.0)];
        gradcheck(&x, move |t, v| cross_entropy(t, v[0], &y), PROBE, r)
    }),
    ("contrastive", |r| {
        let (n, d) = (r.random_range(2..6), r.random_range(2..6));
        let tau = r.random_range(0.5..2.0);
        let x = [normal(r, &[n, d], 0.5), normal(r, &[n, d], 0.5)];
        gradcheck(&x, move |t, v| contrastive_loss(t, v[0], v[1], tau), PROBE, r)
    }),
    ("kl", |r| {
        let (n, c) = (r.random_range(1..6), r.random_range(2..8));
        let rho = r.random_range(0.5..3.0);
        let x = [normal(r, &[n, c], 2.0), normal(r, &[n, c], 2.0)];
        gradcheck(&x, move |t, v| kl_loss(t, v[0], v[1], rho), PROBE, r)
    }),
];

/// Run `instances` random draws of every case; returns each case's worst
/// error.
pub fn run(cases: &[Case], instances: usize, seed: u64) -> Vec<(&'static str, f64)> {
    cases
        .iter()
        .enumerate()
        .map(|(k, (name, case))| {
            let mut r = super::rng(seed.wrapping_mul(1000).wrapping_add(k as u64));
            let worst = (0..instances).map(|_| case(&mut r)).fold(0.0, f64::max);
            (*name, worst)
        })
        .collect()
}
