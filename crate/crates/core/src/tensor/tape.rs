use super::kernels::{self, ConvGeom};
use super::{numel, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

pub(crate) struct Node {
    pub value: Tensor,
    pub op: Op,
    pub requires_grad: bool,
}

/// Recorded operation with whatever the backward rule needs besides the
/// input/output values already on the tape.
pub(crate) enum Op {
    Leaf,
    Add {
        a: Var,
        b: Var,
        map_a: Option<Vec<usize>>,
        map_b: Option<Vec<usize>>,
    },
    Sub {
        a: Var,
        b: Var,
        map_a: Option<Vec<usize>>,
        map_b: Option<Vec<usize>>,
    },
    Mul {
        a: Var,
        b: Var,
        map_a: Option<Vec<usize>>,
        map_b: Option<Vec<usize>>,
    },
    Scale {
        x: Var,
        factor: f32,
    },
    MatMul {
        a: Var,
        b: Var,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
        shared_rhs: bool,
    },
    Conv2d {
        x: Var,
        weight: Var,
        bias: Option<Var>,
        geom: ConvGeom,
        out_channels: usize,
    },
    Relu(Var),
    Gelu(Var),
    Exp(Var),
    Log(Var),
    Sum(Var),
    Mean(Var),
    SumAxis {
        x: Var,
        outer: usize,
        len: usize,
        inner: usize,
        scale: f32,
    },
    MaxAxis {
        x: Var,
        argmax: Vec<usize>,
    },
    Softmax {
        x: Var,
        outer: usize,
        len: usize,
        inner: usize,
    },
    LogSoftmax {
        x: Var,
        outer: usize,
        len: usize,
        inner: usize,
    },
    LayerNorm {
        x: Var,
        gamma: Option<Var>,
        beta: Option<Var>,
        xhat: Vec<f32>,
        rstd: Vec<f32>,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f32>,
        rstd: Vec<f32>,
        batch_stats: bool,
        channels: usize,
        spatial: usize,
    },
    Gather {
        x: Var,
        map: Vec<usize>,
    },
    Reshape(Var),
    Concat {
        xs: Vec<Var>,
        outer: usize,
        inner: usize,
        lens: Vec<usize>,
    },
    Dot {
        a: Var,
        b: Var,
    },
}

impl Op {
    pub fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::Add { a, b, .. } | Op::Sub { a, b, .. } | Op::Mul { a, b, .. } => vec![*a, *b],
            Op::MatMul { a, b, .. } | Op::Dot { a, b } => vec![*a, *b],
            Op::Scale { x, .. }
            | Op::Relu(x)
            | Op::Gelu(x)
            | Op::Exp(x)
            | Op::Log(x)
            | Op::Sum(x)
            | Op::Mean(x)
            | Op::SumAxis { x, .. }
            | Op::MaxAxis { x, .. }
            | Op::Softmax { x, .. }
            | Op::LogSoftmax { x, .. }
            | Op::Gather { x, .. }
            | Op::Reshape(x) => vec![*x],
            Op::Conv2d { x, weight, bias, .. } => {
                let mut v = vec![*x, *weight];
                v.extend(bias);
                v
            }
            Op::LayerNorm { x, gamma, beta, .. } => {
                let mut v = vec![*x];
                v.extend(gamma);
                v.extend(beta);
                v
            }
            Op::BatchNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            Op::Concat { xs, .. } => xs.clone(),
        }
    }
}

/// Per-channel statistics observed by a training-mode batch norm.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchNormStats {
    pub mean: Vec<f32>,
    /// Unbiased variance, the convention for running estimates.
    pub var: Vec<f32>,
}

/// Define-by-run recording of tensor operations.
///
/// Nodes are appended in evaluation order, so the node list is already a
/// topological order of the graph.
#[derive(Default)]
pub struct Tape {
    pub(crate) nodes: Vec<Node>,
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

pub(crate) fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

pub(crate) fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Record an input. Leaves with `requires_grad` receive gradients.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, name: &'static str, value: Tensor, op: Op) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NumericOverflow { op: name });
        }
        let requires_grad = op.inputs().iter().any(|v| self.nodes[v.0].requires_grad);
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Stop-gradient: same values, but a fresh leaf that does not connect back
    /// to `x`'s ancestors.
    pub fn detach(&mut self, x: Var) -> Var {
        let value = self.value(x).clone();
        self.leaf(value, false)
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f32, f32) -> f32,
    ) -> Result<(Tensor, Option<Vec<usize>>, Option<Vec<usize>>)> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        let out_shape =
            kernels::broadcast_shape(&sa, &sb).ok_or_else(|| Error::shape(name, &sa, &sb))?;
        let map_a = (sa != out_shape).then(|| kernels::broadcast_index(&sa, &out_shape));
        let map_b = (sb != out_shape).then(|| kernels::broadcast_index(&sb, &out_shape));
        let va = self.value(a).data();
        let vb = self.value(b).data();
        let n = numel(&out_shape);
        let data: Vec<f32> = match (&map_a, &map_b) {
            (None, None) => va.iter().zip(vb).map(|(&x, &y)| f(x, y)).collect(),
            (None, Some(mb)) => (0..n).map(|i| f(va[i], vb[mb[i]])).collect(),
            (Some(ma), None) => (0..n).map(|i| f(va[ma[i]], vb[i])).collect(),
            (Some(ma), Some(mb)) => (0..n).map(|i| f(va[ma[i]], vb[mb[i]])).collect(),
        };
        Ok((Tensor::from_parts(out_shape, data), map_a, map_b))
    }

    /// Elementwise sum with numpy-style broadcasting.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (value, map_a, map_b) = self.binary("add", a, b, |x, y| x + y)?;
        self.push("add", value, Op::Add { a, b, map_a, map_b })
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (value, map_a, map_b) = self.binary("subtract", a, b, |x, y| x - y)?;
        self.push("subtract", value, Op::Sub { a, b, map_a, map_b })
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (value, map_a, map_b) = self.binary("multiply", a, b, |x, y| x * y)?;
        self.push("multiply", value, Op::Mul { a, b, map_a, map_b })
    }

    pub fn scale(&mut self, x: Var, factor: f32) -> Result<Var> {
        let t = self.value(x);
        let value = Tensor::from_parts(
            t.shape().to_vec(),
            t.data().iter().map(|v| v * factor).collect(),
        );
        self.push("scale", value, Op::Scale { x, factor })
    }

    /// Matrix product over the last two axes.
    ///
    /// Accepts `[.., m, k] × [k, n]` (the right operand shared across leading
    /// axes) and `[B.., m, k] × [B.., k, n]` with identical leading axes.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        let err = || Error::shape("matmul", &sa, &sb);
        if sa.len() < 2 || sb.len() < 2 {
            return Err(err());
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (kb, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        if k != kb {
            return Err(err());
        }
        let shared_rhs = sb.len() == 2;
        if !shared_rhs && sa[..sa.len() - 2] != sb[..sb.len() - 2] {
            return Err(err());
        }
        let batch: usize = sa[..sa.len() - 2].iter().product();
        let mut out_shape = sa[..sa.len() - 2].to_vec();
        out_shape.extend([m, n]);
        let va = self.value(a).data();
        let vb = self.value(b).data();
        let mut out = vec![0.0f32; batch * m * n];
        if shared_rhs {
            kernels::gemm(batch * m, k, n, va, false, vb, false, &mut out, false);
        } else {
            for i in 0..batch {
                kernels::gemm(
                    m,
                    k,
                    n,
                    &va[i * m * k..(i + 1) * m * k],
                    false,
                    &vb[i * k * n..(i + 1) * k * n],
                    false,
                    &mut out[i * m * n..(i + 1) * m * n],
                    false,
                );
            }
        }
        let value = Tensor::from_parts(out_shape, out);
        self.push(
            "matmul",
            value,
            Op::MatMul {
                a,
                b,
                batch,
                m,
                k,
                n,
                shared_rhs,
            },
        )
    }

    /// 2-D cross-correlation: `x` is `N×C×H×W`, `weight` is `O×C×kh×kw`,
    /// optional `bias` is `[O]`.
    pub fn conv2d(
        &mut self,
        x: Var,
        weight: Var,
        bias: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let sw = self.shape(weight).to_vec();
        if sx.len() != 4 || sw.len() != 4 || sx[1] != sw[1] || stride == 0 {
            return Err(Error::shape("conv2d", &sx, &sw));
        }
        if let Some(b) = bias {
            if self.shape(b) != [sw[0]] {
                return Err(Error::shape("conv2d bias", self.shape(b), &sw[..1]));
            }
        }
        let (n, c, h, w) = (sx[0], sx[1], sx[2], sx[3]);
        let (o, kh, kw) = (sw[0], sw[2], sw[3]);
        if h + 2 * pad < kh || w + 2 * pad < kw {
            return Err(Error::shape("conv2d", &sx, &sw));
        }
        let geom = ConvGeom {
            n,
            c,
            h,
            w,
            kh,
            kw,
            stride,
            pad,
            oh: (h + 2 * pad - kh) / stride + 1,
            ow: (w + 2 * pad - kw) / stride + 1,
        };
        let cols = kernels::im2col(self.value(x).data(), &geom);
        let total = geom.cols();
        let mut y = vec![0.0f32; o * total];
        kernels::gemm(
            o,
            geom.patch(),
            total,
            self.value(weight).data(),
            false,
            &cols,
            false,
            &mut y,
            false,
        );
        // [O, N, oh·ow] -> [N, O, oh·ow]
        let plane = geom.oh * geom.ow;
        let mut out = vec![0.0f32; o * total];
        let bias_v = bias.map(|b| self.value(b).data().to_vec());
        for ni in 0..n {
            for oi in 0..o {
                let src = &y[(oi * n + ni) * plane..(oi * n + ni + 1) * plane];
                let dst = &mut out[(ni * o + oi) * plane..(ni * o + oi + 1) * plane];
                let shift = bias_v.as_ref().map_or(0.0, |b| b[oi]);
                for (d, s) in dst.iter_mut().zip(src) {
                    *d = s + shift;
                }
            }
        }
        let value = Tensor::from_parts(vec![n, o, geom.oh, geom.ow], out);
        self.push(
            "conv2d",
            value,
            Op::Conv2d {
                x,
                weight,
                bias,
                geom,
                out_channels: o,
            },
        )
    }

    fn unary(&mut self, name: &'static str, x: Var, f: impl Fn(f32) -> f32, op: Op) -> Result<Var> {
        let t = self.value(x);
        let value = Tensor::from_parts(t.shape().to_vec(), t.data().iter().map(|&v| f(v)).collect());
        self.push(name, value, op)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.unary("relu", x, |v| v.max(0.0), Op::Relu(x))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        self.unary("gelu", x, |v| gelu(v as f64) as f32, Op::Gelu(x))
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.unary("exp", x, f32::exp, Op::Exp(x))
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        self.unary("log", x, f32::ln, Op::Log(x))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s: f64 = self.value(x).data().iter().map(|&v| v as f64).sum();
        self.push("sum", Tensor::scalar(s as f32), Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let s: f64 = t.data().iter().map(|&v| v as f64).sum();
        let m = s / t.len() as f64;
        self.push("mean", Tensor::scalar(m as f32), Op::Mean(x))
    }

    fn check_axis(&self, op: &'static str, x: Var, axis: usize) -> Result<()> {
        if axis >= self.shape(x).len() {
            return Err(Error::contract(format!(
                "{op}: axis {axis} out of range for shape {:?}",
                self.shape(x)
            )));
        }
        Ok(())
    }

    fn reduce_axis(&mut self, name: &'static str, x: Var, axis: usize, mean: bool) -> Result<Var> {
        self.check_axis(name, x, axis)?;
        let shape = self.shape(x).to_vec();
        let (outer, len, inner) = split_axis(&shape, axis);
        let v = self.value(x).data();
        let scale = if mean { 1.0 / len as f64 } else { 1.0 };
        let mut out = Vec::with_capacity(outer * inner);
        for o in 0..outer {
            for i in 0..inner {
                let s: f64 = (0..len).map(|l| v[(o * len + l) * inner + i] as f64).sum();
                out.push((s * scale) as f32);
            }
        }
        let mut out_shape = shape.clone();
        out_shape.remove(axis);
        self.push(
            name,
            Tensor::from_parts(out_shape, out),
            Op::SumAxis {
                x,
                outer,
                len,
                inner,
                scale: scale as f32,
            },
        )
    }

    /// Sum over `axis`, removing it.
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.reduce_axis("sum_axis", x, axis, false)
    }

    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.reduce_axis("mean_axis", x, axis, true)
    }

    /// Maximum over `axis`, removing it. Gradient flows to the first argmax.
    pub fn max_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.check_axis("max_axis", x, axis)?;
        let shape = self.shape(x).to_vec();
        let (outer, len, inner) = split_axis(&shape, axis);
        let v = self.value(x).data();
        let mut out = Vec::with_capacity(outer * inner);
        let mut argmax = Vec::with_capacity(outer * inner);
        for o in 0..outer {
            for i in 0..inner {
                let mut best = (o * len) * inner + i;
                for l in 1..len {
                    let j = (o * len + l) * inner + i;
                    if v[j] > v[best] {
                        best = j;
                    }
                }
                out.push(v[best]);
                argmax.push(best);
            }
        }
        let mut out_shape = shape.clone();
        out_shape.remove(axis);
        self.push(
            "max_axis",
            Tensor::from_parts(out_shape, out),
            Op::MaxAxis { x, argmax },
        )
    }

    fn softmax_impl(&mut self, x: Var, axis: usize, log: bool) -> Result<Var> {
        let name = if log { "log_softmax" } else { "softmax" };
        self.check_axis(name, x, axis)?;
        let shape = self.shape(x).to_vec();
        let (outer, len, inner) = split_axis(&shape, axis);
        let v = self.value(x).data();
        let mut out = vec![0.0f32; v.len()];
        let mut row = vec![0.0f64; len];
        for o in 0..outer {
            for i in 0..inner {
                let at = |l: usize| (o * len + l) * inner + i;
                let max = (0..len).map(|l| v[at(l)]).fold(f32::NEG_INFINITY, f32::max) as f64;
                let mut z = 0.0f64;
                for (l, r) in row.iter_mut().enumerate() {
                    *r = v[at(l)] as f64 - max;
                    z += r.exp();
                }
                let log_z = z.ln();
                for (l, r) in row.iter().enumerate() {
                    out[at(l)] = if log { (r - log_z) as f32 } else { (r - log_z).exp() as f32 };
                }
            }
        }
        let value = Tensor::from_parts(shape, out);
        let op = if log {
            Op::LogSoftmax {
                x,
                outer,
                len,
                inner,
            }
        } else {
            Op::Softmax {
                x,
                outer,
                len,
                inner,
            }
        };
        self.push(name, value, op)
    }

    /// Max-shifted softmax along `axis`.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.softmax_impl(x, axis, false)
    }

    pub fn log_softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.softmax_impl(x, axis, true)
    }

    /// Normalize over the last axis, then apply the optional affine terms.
    pub fn layer_norm(
        &mut self,
        x: Var,
        gamma: Option<Var>,
        beta: Option<Var>,
        eps: f32,
    ) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let d = *shape.last().ok_or_else(|| Error::contract("layer_norm on a scalar"))?;
        for p in gamma.iter().chain(beta.iter()) {
            if self.shape(*p) != [d] {
                return Err(Error::shape("layer_norm", &shape, self.shape(*p)));
            }
        }
        let v = self.value(x).data();
        let rows = v.len() / d;
        let mut xhat = vec![0.0f32; v.len()];
        let mut rstd = vec![0.0f32; rows];
        for r in 0..rows {
            let row = &v[r * d..(r + 1) * d];
            let mean = row.iter().map(|&a| a as f64).sum::<f64>() / d as f64;
            let var = row.iter().map(|&a| (a as f64 - mean).powi(2)).sum::<f64>() / d as f64;
            let rs = 1.0 / (var + eps as f64).sqrt();
            rstd[r] = rs as f32;
            for (o, &a) in xhat[r * d..(r + 1) * d].iter_mut().zip(row) {
                *o = ((a as f64 - mean) * rs) as f32;
            }
        }
        let g = gamma.map(|g| self.value(g).data().to_vec());
        let b = beta.map(|b| self.value(b).data().to_vec());
        let out: Vec<f32> = xhat
            .iter()
            .enumerate()
            .map(|(i, &xh)| {
                let j = i % d;
                xh * g.as_ref().map_or(1.0, |g| g[j]) + b.as_ref().map_or(0.0, |b| b[j])
            })
            .collect();
        self.push(
            "layer_norm",
            Tensor::from_parts(shape, out),
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
        )
    }

    /// Per-channel normalization of `N×C×...` input.
    ///
    /// With `running = None` the batch statistics are used and returned so the
    /// caller can update its running estimates; otherwise the supplied
    /// `(mean, var)` are treated as constants.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running: Option<(&[f32], &[f32])>,
        eps: f32,
    ) -> Result<(Var, Option<BatchNormStats>)> {
        let shape = self.shape(x).to_vec();
        if shape.len() < 2 {
            return Err(Error::shape("batch_norm", &shape, self.shape(gamma)));
        }
        let (n, c) = (shape[0], shape[1]);
        let spatial: usize = shape[2..].iter().product();
        for p in [gamma, beta] {
            if self.shape(p) != [c] {
                return Err(Error::shape("batch_norm", &shape, self.shape(p)));
            }
        }
        if let Some((m, v)) = running {
            if m.len() != c || v.len() != c {
                return Err(Error::shape("batch_norm running stats", &shape, &[m.len(), v.len()]));
            }
        }
        let v = self.value(x).data();
        let count = (n * spatial) as f64;
        let mut mean = vec![0.0f64; c];
        let mut var = vec![0.0f64; c];
        let mut stats = None;
        match running {
            Some((rm, rv)) => {
                for ch in 0..c {
                    mean[ch] = rm[ch] as f64;
                    var[ch] = rv[ch] as f64;
                }
            }
            None => {
                for ni in 0..n {
                    for ch in 0..c {
                        let base = (ni * c + ch) * spatial;
                        mean[ch] += v[base..base + spatial].iter().map(|&a| a as f64).sum::<f64>();
                    }
                }
                mean.iter_mut().for_each(|m| *m /= count);
                for ni in 0..n {
                    for ch in 0..c {
                        let base = (ni * c + ch) * spatial;
                        var[ch] += v[base..base + spatial]
                            .iter()
                            .map(|&a| (a as f64 - mean[ch]).powi(2))
                            .sum::<f64>();
                    }
                }
                let unbiased: Vec<f32> = var
                    .iter()
                    .map(|s| (s / (count - 1.0).max(1.0)) as f32)
                    .collect();
                var.iter_mut().for_each(|s| *s /= count);
                stats = Some(BatchNormStats {
                    mean: mean.iter().map(|&m| m as f32).collect(),
                    var: unbiased,
                });
            }
        }
        let rstd: Vec<f32> = var.iter().map(|&s| (1.0 / (s + eps as f64).sqrt()) as f32).collect();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut xhat = vec![0.0f32; v.len()];
        let mut out = vec![0.0f32; v.len()];
        for ni in 0..n {
            for ch in 0..c {
                let base = (ni * c + ch) * spatial;
                for i in base..base + spatial {
                    let xh = ((v[i] as f64 - mean[ch]) * rstd[ch] as f64) as f32;
                    xhat[i] = xh;
                    out[i] = xh * g[ch] + b[ch];
                }
            }
        }
        let var_out = self.push(
            "batch_norm",
            Tensor::from_parts(shape, out),
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
                batch_stats: running.is_none(),
                channels: c,
                spatial,
            },
        )?;
        Ok((var_out, stats))
    }

    fn gather(&mut self, name: &'static str, x: Var, out_shape: Vec<usize>, map: Vec<usize>) -> Result<Var> {
        let v = self.value(x).data();
        let data = map.iter().map(|&i| v[i]).collect();
        self.push(name, Tensor::from_parts(out_shape, data), Op::Gather { x, map })
    }

    pub fn permute(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let mut seen = vec![false; shape.len()];
        if axes.len() != shape.len() || axes.iter().any(|&a| a >= shape.len() || std::mem::replace(&mut seen[a], true)) {
            return Err(Error::contract(format!(
                "permute: {axes:?} is not a permutation of the axes of {shape:?}"
            )));
        }
        let (out_shape, map) = kernels::permute_index(&shape, axes);
        self.gather("permute", x, out_shape, map)
    }

    /// Swap the last two axes.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let r = self.shape(x).len();
        if r < 2 {
            return Err(Error::contract("transpose needs at least two axes"));
        }
        let mut axes: Vec<usize> = (0..r).collect();
        axes.swap(r - 2, r - 1);
        self.permute(x, &axes)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape.to_vec())?;
        self.push("reshape", value, Op::Reshape(x))
    }

    /// Broadcast `x` to `shape`.
    pub fn expand(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        match kernels::broadcast_shape(&sx, shape) {
            Some(s) if s == shape => {}
            _ => return Err(Error::shape("expand", &sx, shape)),
        }
        let map = kernels::broadcast_index(&sx, shape);
        self.gather("expand", x, shape.to_vec(), map)
    }

    /// Select rows (entries of the first axis) by index.
    pub fn gather_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.is_empty() {
            return Err(Error::contract("gather_rows on a scalar"));
        }
        if let Some(&bad) = rows.iter().find(|&&r| r >= shape[0]) {
            return Err(Error::contract(format!(
                "gather_rows: row {bad} out of range for shape {shape:?}"
            )));
        }
        if rows.is_empty() {
            return Err(Error::contract("gather_rows: empty selection"));
        }
        let width = numel(&shape[1..]);
        let map = rows
            .iter()
            .flat_map(|&r| r * width..(r + 1) * width)
            .collect();
        let mut out_shape = shape;
        out_shape[0] = rows.len();
        self.gather("gather_rows", x, out_shape, map)
    }

    /// Join tensors along `axis`; all other extents must agree.
    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = xs
            .first()
            .ok_or_else(|| Error::contract("concat of nothing"))?;
        let base = self.shape(*first).to_vec();
        self.check_axis("concat", *first, axis)?;
        let mut lens = Vec::with_capacity(xs.len());
        for &x in xs {
            let s = self.shape(x);
            if s.len() != base.len()
                || s[..axis] != base[..axis]
                || s[axis + 1..] != base[axis + 1..]
            {
                return Err(Error::shape("concat", &base, s));
            }
            lens.push(s[axis]);
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let total: usize = lens.iter().sum();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (&x, &l) in xs.iter().zip(&lens) {
                let v = self.value(x).data();
                out.extend_from_slice(&v[o * l * inner..(o + 1) * l * inner]);
            }
        }
        let mut out_shape = base;
        out_shape[axis] = total;
        self.push(
            "concat",
            Tensor::from_parts(out_shape, out),
            Op::Concat {
                xs: xs.to_vec(),
                outer,
                inner,
                lens,
            },
        )
    }

    /// Inner product of two equally shaped tensors.
    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape("dot", self.shape(a), self.shape(b)));
        }
        let s: f64 = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x as f64 * y as f64)
            .sum();
        self.push("dot", Tensor::scalar(s as f32), Op::Dot { a, b })
    }
}
