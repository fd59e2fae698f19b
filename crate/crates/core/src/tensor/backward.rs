use super::kernels::{self, ConvGeom};
use super::tape::{gelu_grad, Op, Tape, Var};
use super::Tensor;
use crate::error::{Error, Result};

/// Gradients of a scalar loss with respect to every `requires_grad` leaf.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient for `v`, or `None` when `v` is unreachable from the loss.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient for `v`; exact zeros when `v` is unreachable from the loss.
    pub fn wrt(&self, tape: &Tape, v: Var) -> Tensor {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(tape.shape(v).to_vec()))
    }
}

struct Acc<'t> {
    tape: &'t Tape,
    grads: Vec<Option<Vec<f32>>>,
}

impl<'t> Acc<'t> {
    /// Run `f` on the gradient buffer of `v` if `v` wants a gradient.
    fn with(&mut self, v: Var, f: impl FnOnce(&mut [f32])) {
        let node = &self.tape.nodes[v.0];
        if !node.requires_grad {
            return;
        }
        let buf = self.grads[v.0].get_or_insert_with(|| vec![0.0; node.value.len()]);
        f(buf);
    }

    fn val(&self, v: Var) -> &'t [f32] {
        self.tape.nodes[v.0].value.data()
    }
}

fn scatter(buf: &mut [f32], map: &Option<Vec<usize>>, g: &[f32], mut f: impl FnMut(usize, f32) -> f32) {
    match map {
        None => buf.iter_mut().enumerate().for_each(|(i, b)| *b += f(i, g[i])),
        Some(m) => m.iter().enumerate().for_each(|(i, &j)| buf[j] += f(i, g[i])),
    }
}

fn at(map: &Option<Vec<usize>>, i: usize) -> usize {
    map.as_ref().map_or(i, |m| m[i])
}

impl Tape {
    /// Reverse sweep from a single-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.nodes.is_empty() {
            return Err(Error::contract("backward on an empty tape"));
        }
        if self.value(loss).len() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut acc = Acc {
            tape: self,
            grads: vec![None; self.nodes.len()],
        };
        if self.nodes[loss.0].requires_grad {
            acc.grads[loss.0] = Some(vec![1.0]);
        }
        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = acc.grads[id].take() else {
                continue;
            };
            apply(&mut acc, &node.op, &node.value, &g);
        }
        let grads = acc
            .grads
            .into_iter()
            .enumerate()
            .map(|(i, g)| {
                g.filter(|_| matches!(self.nodes[i].op, Op::Leaf))
                    .map(|g| Tensor::from_parts(self.nodes[i].value.shape().to_vec(), g))
            })
            .collect();
        Ok(Gradients { grads })
    }
}

fn apply(acc: &mut Acc<'_>, op: &Op, out: &Tensor, g: &[f32]) {
    let y = out.data();
    match op {
        Op::Leaf => {}
        Op::Add { a, b, map_a, map_b } => {
            acc.with(*a, |buf| scatter(buf, map_a, g, |_, gi| gi));
            acc.with(*b, |buf| scatter(buf, map_b, g, |_, gi| gi));
        }
        Op::Sub { a, b, map_a, map_b } => {
            acc.with(*a, |buf| scatter(buf, map_a, g, |_, gi| gi));
            acc.with(*b, |buf| scatter(buf, map_b, g, |_, gi| -gi));
        }
        Op::Mul { a, b, map_a, map_b } => {
            let va = acc.val(*a);
            let vb = acc.val(*b);
            acc.with(*a, |buf| scatter(buf, map_a, g, |i, gi| gi * vb[at(map_b, i)]));
            acc.with(*b, |buf| scatter(buf, map_b, g, |i, gi| gi * va[at(map_a, i)]));
        }
        Op::Scale { x, factor } => {
            acc.with(*x, |buf| buf.iter_mut().zip(g).for_each(|(b, gi)| *b += gi * factor));
        }
        Op::MatMul {
            a,
            b,
            batch,
            m,
            k,
            n,
            shared_rhs,
        } => {
            let (batch, m, k, n) = (*batch, *m, *k, *n);
            let va = acc.val(*a);
            let vb = acc.val(*b);
            if *shared_rhs {
                acc.with(*a, |buf| kernels::gemm(batch * m, n, k, g, false, vb, true, buf, true));
                acc.with(*b, |buf| kernels::gemm(k, batch * m, n, va, true, g, false, buf, true));
            } else {
                acc.with(*a, |buf| {
                    for i in 0..batch {
                        kernels::gemm(
                            m,
                            n,
                            k,
                            &g[i * m * n..(i + 1) * m * n],
                            false,
                            &vb[i * k * n..(i + 1) * k * n],
                            true,
                            &mut buf[i * m * k..(i + 1) * m * k],
                            true,
                        );
                    }
                });
                acc.with(*b, |buf| {
                    for i in 0..batch {
                        kernels::gemm(
                            k,
                            m,
                            n,
                            &va[i * m * k..(i + 1) * m * k],
                            true,
                            &g[i * m * n..(i + 1) * m * n],
                            false,
                            &mut buf[i * k * n..(i + 1) * k * n],
                            true,
                        );
                    }
                });
            }
        }
        Op::Conv2d {
            x,
            weight,
            bias,
            geom,
            out_channels,
        } => conv2d_backward(acc, *x, *weight, *bias, geom, *out_channels, g),
        Op::Relu(x) => {
            acc.with(*x, |buf| {
                for ((b, &gi), &yi) in buf.iter_mut().zip(g).zip(y) {
                    if yi > 0.0 {
                        *b += gi;
                    }
                }
            });
        }
        Op::Gelu(x) => {
            let vx = acc.val(*x);
            acc.with(*x, |buf| {
                for ((b, &gi), &xi) in buf.iter_mut().zip(g).zip(vx) {
                    *b += (gi as f64 * gelu_grad(xi as f64)) as f32;
                }
            });
        }
        Op::Exp(x) => {
            acc.with(*x, |buf| buf.iter_mut().zip(g).zip(y).for_each(|((b, gi), yi)| *b += gi * yi));
        }
        Op::Log(x) => {
            let vx = acc.val(*x);
            acc.with(*x, |buf| buf.iter_mut().zip(g).zip(vx).for_each(|((b, gi), xi)| *b += gi / xi));
        }
        Op::Sum(x) => acc.with(*x, |buf| buf.iter_mut().for_each(|b| *b += g[0])),
        Op::Mean(x) => acc.with(*x, |buf| {
            let s = (g[0] as f64 / buf.len() as f64) as f32;
            buf.iter_mut().for_each(|b| *b += s)
        }),
        Op::SumAxis {
            x,
            outer,
            len,
            inner,
            scale,
        } => acc.with(*x, |buf| {
            for o in 0..*outer {
                for l in 0..*len {
                    for i in 0..*inner {
                        buf[(o * len + l) * inner + i] += g[o * inner + i] * scale;
                    }
                }
            }
        }),
        Op::MaxAxis { x, argmax } => acc.with(*x, |buf| {
            for (&j, gi) in argmax.iter().zip(g) {
                buf[j] += gi;
            }
        }),
        Op::Softmax {
            x,
            outer,
            len,
            inner,
        } => acc.with(*x, |buf| {
            for o in 0..*outer {
                for i in 0..*inner {
                    let idx = |l: usize| (o * len + l) * inner + i;
                    let s: f64 = (0..*len).map(|l| g[idx(l)] as f64 * y[idx(l)] as f64).sum();
                    for l in 0..*len {
                        buf[idx(l)] += (y[idx(l)] as f64 * (g[idx(l)] as f64 - s)) as f32;
                    }
                }
            }
        }),
        Op::LogSoftmax {
            x,
            outer,
            len,
            inner,
        } => acc.with(*x, |buf| {
            for o in 0..*outer {
                for i in 0..*inner {
                    let idx = |l: usize| (o * len + l) * inner + i;
                    let s: f64 = (0..*len).map(|l| g[idx(l)] as f64).sum();
                    for l in 0..*len {
                        buf[idx(l)] += (g[idx(l)] as f64 - (y[idx(l)] as f64).exp() * s) as f32;
                    }
                }
            }
        }),
        Op::LayerNorm {
            x,
            gamma,
            beta,
            xhat,
            rstd,
        } => {
            let d = rstd.len();
            let d = xhat.len() / d;
            let gam = gamma.map(|p| acc.val(p));
            let dxhat: Vec<f32> = g
                .iter()
                .enumerate()
                .map(|(i, &gi)| gi * gam.as_ref().map_or(1.0, |v| v[i % d]))
                .collect();
            acc.with(*x, |buf| {
                for (r, &rs) in rstd.iter().enumerate() {
                    let span = r * d..(r + 1) * d;
                    norm_backward(&dxhat[span.clone()], &xhat[span.clone()], rs, &mut buf[span]);
                }
            });
            if let Some(p) = gamma {
                acc.with(*p, |buf| {
                    let mut sums = vec![0.0f64; d];
                    for (i, (&gi, &xh)) in g.iter().zip(xhat).enumerate() {
                        sums[i % d] += gi as f64 * xh as f64;
                    }
                    buf.iter_mut().zip(sums).for_each(|(b, s)| *b += s as f32);
                });
            }
            if let Some(p) = beta {
                acc.with(*p, |buf| {
                    let mut sums = vec![0.0f64; d];
                    for (i, &gi) in g.iter().enumerate() {
                        sums[i % d] += gi as f64;
                    }
                    buf.iter_mut().zip(sums).for_each(|(b, s)| *b += s as f32);
                });
            }
        }
        Op::BatchNorm {
            x,
            gamma,
            beta,
            xhat,
            rstd,
            batch_stats,
            channels,
            spatial,
        } => {
            let (c, sp) = (*channels, *spatial);
            let n = xhat.len() / (c * sp);
            let gam = acc.val(*gamma);
            acc.with(*x, |buf| {
                for ch in 0..c {
                    let rs = rstd[ch];
                    if *batch_stats {
                        // Gather the channel's elements, which are strided by sample.
                        let mut dxh = Vec::with_capacity(n * sp);
                        let mut xh = Vec::with_capacity(n * sp);
                        for ni in 0..n {
                            let base = (ni * c + ch) * sp;
                            dxh.extend(g[base..base + sp].iter().map(|gi| gi * gam[ch]));
                            xh.extend_from_slice(&xhat[base..base + sp]);
                        }
                        let mut dx = vec![0.0f32; n * sp];
                        norm_backward(&dxh, &xh, rs, &mut dx);
                        for ni in 0..n {
                            let base = (ni * c + ch) * sp;
                            for (b, d) in buf[base..base + sp].iter_mut().zip(&dx[ni * sp..(ni + 1) * sp]) {
                                *b += d;
                            }
                        }
                    } else {
                        for ni in 0..n {
                            let base = (ni * c + ch) * sp;
                            for i in base..base + sp {
                                buf[i] += g[i] * gam[ch] * rs;
                            }
                        }
                    }
                }
            });
            acc.with(*gamma, |buf| {
                for (ch, b) in buf.iter_mut().enumerate() {
                    let mut s = 0.0f64;
                    for ni in 0..n {
                        let base = (ni * c + ch) * sp;
                        for i in base..base + sp {
                            s += g[i] as f64 * xhat[i] as f64;
                        }
                    }
                    *b += s as f32;
                }
            });
            acc.with(*beta, |buf| {
                for (ch, b) in buf.iter_mut().enumerate() {
                    let mut s = 0.0f64;
                    for ni in 0..n {
                        let base = (ni * c + ch) * sp;
                        s += g[base..base + sp].iter().map(|&v| v as f64).sum::<f64>();
                    }
                    *b += s as f32;
                }
            });
        }
        Op::Gather { x, map } => acc.with(*x, |buf| {
            for (&j, gi) in map.iter().zip(g) {
                buf[j] += gi;
            }
        }),
        Op::Reshape(x) => acc.with(*x, |buf| buf.iter_mut().zip(g).for_each(|(b, gi)| *b += gi)),
        Op::Concat {
            xs,
            outer,
            inner,
            lens,
        } => {
            let total: usize = lens.iter().sum();
            let mut offset = 0;
            for (&x, &l) in xs.iter().zip(lens) {
                acc.with(x, |buf| {
                    for o in 0..*outer {
                        let src = &g[(o * total + offset) * inner..(o * total + offset + l) * inner];
                        for (b, s) in buf[o * l * inner..(o + 1) * l * inner].iter_mut().zip(src) {
                            *b += s;
                        }
                    }
                });
                offset += l;
            }
        }
        Op::Dot { a, b } => {
            let va = acc.val(*a);
            let vb = acc.val(*b);
            acc.with(*a, |buf| buf.iter_mut().zip(vb).for_each(|(o, v)| *o += g[0] * v));
            acc.with(*b, |buf| buf.iter_mut().zip(va).for_each(|(o, v)| *o += g[0] * v));
        }
    }
}

/// Gradient of `xhat = (x - mean(x)) * rstd` given `dxhat`, accumulated into `dx`.
fn norm_backward(dxhat: &[f32], xhat: &[f32], rstd: f32, dx: &mut [f32]) {
    let n = dxhat.len() as f64;
    let mean_d: f64 = dxhat.iter().map(|&v| v as f64).sum::<f64>() / n;
    let mean_dx: f64 = dxhat
        .iter()
        .zip(xhat)
        .map(|(&d, &x)| d as f64 * x as f64)
        .sum::<f64>()
        / n;
    for ((o, &d), &x) in dx.iter_mut().zip(dxhat).zip(xhat) {
        *o += (rstd as f64 * (d as f64 - mean_d - x as f64 * mean_dx)) as f32;
    }
}

fn conv2d_backward(
    acc: &mut Acc<'_>,
    x: Var,
    weight: Var,
    bias: Option<Var>,
    geom: &ConvGeom,
    o: usize,
    g: &[f32],
) {
    let plane = geom.oh * geom.ow;
    let total = geom.cols();
    // [N, O, plane] -> [O, N·plane]
    let mut gt = vec![0.0f32; o * total];
    for ni in 0..geom.n {
        for oi in 0..o {
            gt[(oi * geom.n + ni) * plane..(oi * geom.n + ni + 1) * plane]
                .copy_from_slice(&g[(ni * o + oi) * plane..(ni * o + oi + 1) * plane]);
        }
    }
    if let Some(b) = bias {
        acc.with(b, |buf| {
            for (oi, bv) in buf.iter_mut().enumerate() {
                *bv += gt[oi * total..(oi + 1) * total]
                    .iter()
                    .map(|&v| v as f64)
                    .sum::<f64>() as f32;
            }
        });
    }
    let needs_w = acc.tape.requires_grad(weight);
    let needs_x = acc.tape.requires_grad(x);
    if needs_w {
        let cols = kernels::im2col(acc.val(x), geom);
        acc.with(weight, |buf| {
            kernels::gemm(o, total, geom.patch(), &gt, false, &cols, true, buf, true)
        });
    }
    if needs_x {
        let w = acc.val(weight);
        let mut dcols = vec![0.0f32; geom.patch() * total];
        kernels::gemm(geom.patch(), o, total, w, true, &gt, false, &mut dcols, false);
        acc.with(x, |buf| kernels::col2im(&dcols, geom, buf));
    }
}
