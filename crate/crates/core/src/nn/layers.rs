use rand::Rng;

use super::{join, BufferUpdate, Forward, Init, ParamStore};
use crate::error::{Error, Result};
use crate::tensor::{Tensor, Var};

/// `y = x·W + b` over the last axis; `W` is stored `in×out`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub name: String,
    pub in_dim: usize,
    pub out_dim: usize,
    pub bias: bool,
    pub init: Init,
}

impl Linear {
    pub fn new(name: impl Into<String>, in_dim: usize, out_dim: usize, init: Init) -> Self {
        Linear {
            name: name.into(),
            in_dim,
            out_dim,
            bias: true,
            init,
        }
    }

    pub fn weight_name(&self) -> String {
        join(&self.name, "weight")
    }

    pub fn bias_name(&self) -> String {
        join(&self.name, "bias")
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut impl Rng) -> Result<()> {
        let w = self.init.sample(&[self.in_dim, self.out_dim], self.in_dim, rng);
        store.insert(self.weight_name(), w, true)?;
        if self.bias {
            store.insert(self.bias_name(), Tensor::zeros(vec![self.out_dim]), true)?;
        }
        Ok(())
    }

    pub fn forward(&self, f: &mut Forward<'_>, x: Var) -> Result<Var> {
        let shape = f.tape.shape(x).to_vec();
        if shape.last() != Some(&self.in_dim) {
            return Err(Error::shape("linear", &shape, &[self.in_dim, self.out_dim]));
        }
        let w = f.param(&self.weight_name())?;
        let y = f.tape.matmul(x, w)?;
        if self.bias {
            let b = f.param(&self.bias_name())?;
            f.tape.add(y, b)
        } else {
            Ok(y)
        }
    }
}

/// Square-kernel convolution over `N×C×H×W` input.
#[derive(Clone, Debug)]
pub struct Conv2d {
    pub name: String,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub bias: bool,
    pub init: Init,
}

impl Conv2d {
    pub fn new(
        name: impl Into<String>,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
    ) -> Self {
        Conv2d {
            name: name.into(),
            in_channels,
            out_channels,
            kernel,
            stride,
            pad,
            bias: false,
            init: Init::Kaiming,
        }
    }

    pub fn output_size(&self, size: usize) -> usize {
        (size + 2 * self.pad - self.kernel) / self.stride + 1
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut impl Rng) -> Result<()> {
        let fan_in = self.in_channels * self.kernel * self.kernel;
        let shape = [self.out_channels, self.in_channels, self.kernel, self.kernel];
        store.insert(join(&self.name, "weight"), self.init.sample(&shape, fan_in, rng), true)?;
        if self.bias {
            store.insert(join(&self.name, "bias"), Tensor::zeros(vec![self.out_channels]), true)?;
        }
        Ok(())
    }

    pub fn forward(&self, f: &mut Forward<'_>, x: Var) -> Result<Var> {
        let w = f.param(&join(&self.name, "weight"))?;
        let b = if self.bias {
            Some(f.param(&join(&self.name, "bias"))?)
        } else {
            None
        };
        f.tape.conv2d(x, w, b, self.stride, self.pad)
    }
}

/// Batch normalization over `N×C×...`: batch statistics while training,
/// running estimates otherwise.
#[derive(Clone, Debug)]
pub struct BatchNorm2d {
    pub name: String,
    pub channels: usize,
    pub momentum: f32,
    pub eps: f32,
}

impl BatchNorm2d {
    pub fn new(name: impl Into<String>, channels: usize) -> Self {
        BatchNorm2d {
            name: name.into(),
            channels,
            momentum: 0.1,
            eps: 1e-5,
        }
    }

    pub fn init(&self, store: &mut ParamStore) -> Result<()> {
        let c = self.channels;
        store.insert(join(&self.name, "weight"), Tensor::ones(vec![c]), true)?;
        store.insert(join(&self.name, "bias"), Tensor::zeros(vec![c]), true)?;
        store.insert(join(&self.name, "running_mean"), Tensor::zeros(vec![c]), false)?;
        store.insert(join(&self.name, "running_var"), Tensor::ones(vec![c]), false)?;
        Ok(())
    }

    pub fn forward(&self, f: &mut Forward<'_>, x: Var) -> Result<Var> {
        let gamma = f.param(&join(&self.name, "weight"))?;
        let beta = f.param(&join(&self.name, "bias"))?;
        let mean_name = join(&self.name, "running_mean");
        let var_name = join(&self.name, "running_var");
        let running_mean = f.buffer(&mean_name)?;
        let running_var = f.buffer(&var_name)?;
        if f.train {
            let (y, stats) = f.tape.batch_norm(x, gamma, beta, None, self.eps)?;
            let stats = stats.expect("batch statistics in training mode");
            let m = self.momentum;
            let blend = |old: &Tensor, new: &[f32]| {
                Tensor::from_fn(vec![self.channels], |i| (1.0 - m) * old.data()[i] + m * new[i])
            };
            f.updates.push(BufferUpdate {
                name: mean_name,
                value: blend(running_mean, &stats.mean),
            });
            f.updates.push(BufferUpdate {
                name: var_name,
                value: blend(running_var, &stats.var),
            });
            Ok(y)
        } else {
            let (y, _) = f.tape.batch_norm(
                x,
                gamma,
                beta,
                Some((running_mean.data(), running_var.data())),
                self.eps,
            )?;
            Ok(y)
        }
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub name: String,
    pub dim: usize,
    pub eps: f32,
}

impl LayerNorm {
    pub fn new(name: impl Into<String>, dim: usize) -> Self {
        LayerNorm {
            name: name.into(),
            dim,
            eps: 1e-5,
        }
    }

    pub fn init(&self, store: &mut ParamStore) -> Result<()> {
        store.insert(join(&self.name, "weight"), Tensor::ones(vec![self.dim]), true)?;
        store.insert(join(&self.name, "bias"), Tensor::zeros(vec![self.dim]), true)?;
        Ok(())
    }

    pub fn forward(&self, f: &mut Forward<'_>, x: Var) -> Result<Var> {
        let g = f.param(&join(&self.name, "weight"))?;
        let b = f.param(&join(&self.name, "bias"))?;
        f.tape.layer_norm(x, Some(g), Some(b), self.eps)
    }
}

/// Two-layer feed-forward block with GELU.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    pub fn new(name: &str, dim: usize, hidden: usize, init: Init) -> Self {
        Mlp {
            fc1: Linear::new(join(name, "fc1"), dim, hidden, init),
            fc2: Linear::new(join(name, "fc2"), hidden, dim, init),
        }
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut impl Rng) -> Result<()> {
        self.fc1.init(store, rng)?;
        self.fc2.init(store, rng)
    }

    pub fn forward(&self, f: &mut Forward<'_>, x: Var) -> Result<Var> {
        let h = self.fc1.forward(f, x)?;
        let h = f.tape.gelu(h)?;
        self.fc2.forward(f, h)
    }
}

/// Multi-head self-attention over `N×T×d` tokens with a fused QKV projection.
#[derive(Clone, Debug)]
pub struct Mhsa {
    pub dim: usize,
    pub heads: usize,
    pub qkv: Linear,
    pub proj: Linear,
}

impl Mhsa {
    pub fn new(name: &str, dim: usize, heads: usize, init: Init) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(Error::config(
                "heads",
                format!("{heads} heads do not divide width {dim}"),
            ));
        }
        Ok(Mhsa {
            dim,
            heads,
            qkv: Linear::new(join(name, "qkv"), dim, 3 * dim, init),
            proj: Linear::new(join(name, "proj"), dim, dim, init),
        })
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut impl Rng) -> Result<()> {
        self.qkv.init(store, rng)?;
        self.proj.init(store, rng)
    }

    pub fn forward(&self, f: &mut Forward<'_>, x: Var) -> Result<Var> {
        let shape = f.tape.shape(x).to_vec();
        if shape.len() != 3 || shape[2] != self.dim {
            return Err(Error::shape("mhsa", &shape, &[self.dim]));
        }
        let (n, t, d) = (shape[0], shape[1], shape[2]);
        let (h, dh) = (self.heads, d / self.heads);
        let qkv = self.qkv.forward(f, x)?;
        let qkv = f.tape.reshape(qkv, &[n, t, 3, h, dh])?;
        // -> [3, N, h, T, dh]
        let qkv = f.tape.permute(qkv, &[2, 0, 3, 1, 4])?;
        let mut parts = [qkv; 3];
        for (i, p) in parts.iter_mut().enumerate() {
            let sel = f.tape.gather_rows(qkv, &[i])?;
            *p = f.tape.reshape(sel, &[n * h, t, dh])?;
        }
        let [q, k, v] = parts;
        let kt = f.tape.transpose(k)?;
        let scores = f.tape.matmul(q, kt)?;
        let scores = f.tape.scale(scores, 1.0 / (dh as f32).sqrt())?;
        let attn = f.tape.softmax(scores, 2)?;
        let out = f.tape.matmul(attn, v)?;
        let out = f.tape.reshape(out, &[n, h, t, dh])?;
        let out = f.tape.permute(out, &[0, 2, 1, 3])?;
        let out = f.tape.reshape(out, &[n, t, d])?;
        self.proj.forward(f, out)
    }
}

/// Non-overlapping `p×p` patches projected to `dim`, returned as `N×T×dim`.
#[derive(Clone, Debug)]
pub struct PatchEmbed {
    pub conv: Conv2d,
    pub patch: usize,
    pub grid: (usize, usize),
}

impl PatchEmbed {
    pub fn new(
        name: &str,
        in_channels: usize,
        dim: usize,
        patch: usize,
        image: (usize, usize),
    ) -> Result<Self> {
        if patch == 0 || image.0 % patch != 0 || image.1 % patch != 0 {
            return Err(Error::config(
                "patch",
                format!(
                    "patch size {patch} does not divide image extent {}x{}",
                    image.0, image.1
                ),
            ));
        }
        let mut conv = Conv2d::new(join(name, "proj"), in_channels, dim, patch, patch, 0);
        conv.bias = true;
        conv.init = Init::TruncNormal { std: 0.02 };
        Ok(PatchEmbed {
            conv,
            patch,
            grid: (image.0 / patch, image.1 / patch),
        })
    }

    pub fn num_tokens(&self) -> usize {
        self.grid.0 * self.grid.1
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut impl Rng) -> Result<()> {
        self.conv.init(store, rng)
    }

    pub fn forward(&self, f: &mut Forward<'_>, images: Var) -> Result<Var> {
        let shape = f.tape.shape(images).to_vec();
        if shape.len() != 4
            || shape[1] != self.conv.in_channels
            || (shape[2], shape[3]) != (self.grid.0 * self.patch, self.grid.1 * self.patch)
        {
            return Err(Error::shape(
                "patch_embed",
                &shape,
                &[self.conv.in_channels, self.grid.0 * self.patch, self.grid.1 * self.patch],
            ));
        }
        let n = shape[0];
        let y = self.conv.forward(f, images)?;
        let y = f.tape.reshape(y, &[n, self.conv.out_channels, self.num_tokens()])?;
        f.tape.permute(y, &[0, 2, 1])
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::tensor::Tape;

    fn run<T>(
        store: &ParamStore,
        train: bool,
        body: impl FnOnce(&mut Forward<'_>) -> Result<T>,
    ) -> (T, Vec<BufferUpdate>) {
        let mut tape = Tape::new();
        let binding = store.bind(&mut tape, true);
        let mut f = Forward::new(&mut tape, &binding, store, train);
        let out = body(&mut f).unwrap();
        (out, f.updates)
    }

    #[test]
    fn uniform_attention_with_identity_values_averages_rows() {
        let (n, t, d) = (2, 5, 4);
        let mhsa = Mhsa::new("attn", d, 1, Init::Zeros).unwrap();
        let mut store = ParamStore::new();
        mhsa.init(&mut store, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        // q and k projections stay zero (uniform scores); v and proj are identity.
        let mut qkv = Tensor::zeros(vec![d, 3 * d]);
        let mut proj = Tensor::zeros(vec![d, d]);
        for i in 0..d {
            qkv.data_mut()[i * 3 * d + 2 * d + i] = 1.0;
            proj.data_mut()[i * d + i] = 1.0;
        }
        store.set("attn.qkv.weight", qkv).unwrap();
        store.set("attn.proj.weight", proj).unwrap();
        let input = Tensor::from_fn(vec![n, t, d], |i| ((i * 7919) % 13) as f32 - 6.0);
        let (out, _) = run(&store, false, |f| {
            let x = f.tape.constant(input.clone());
            let y = mhsa.forward(f, x)?;
            Ok(f.tape.value(y).clone())
        });
        for b in 0..n {
            for c in 0..d {
                let mean: f32 = (0..t).map(|r| input.data()[(b * t + r) * d + c]).sum::<f32>() / t as f32;
                for r in 0..t {
                    assert!((out.data()[(b * t + r) * d + c] - mean).abs() < 1e-5);
                }
            }
        }
    }

    #[test]
    fn layer_norm_standardizes_rows() {
        let ln = LayerNorm::new("ln", 16);
        let mut store = ParamStore::new();
        ln.init(&mut store).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let input = Init::TruncNormal { std: 3.0 }.sample(&[6, 16], 16, &mut rng);
        let (out, _) = run(&store, false, |f| {
            let x = f.tape.constant(input.clone());
            let y = ln.forward(f, x)?;
            Ok(f.tape.value(y).clone())
        });
        for r in 0..6 {
            let row = &out.data()[r * 16..(r + 1) * 16];
            let mean = row.iter().map(|&v| v as f64).sum::<f64>() / 16.0;
            let var = row.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / 16.0;
            assert!(mean.abs() < 1e-5, "mean {mean}");
            assert!((var - 1.0).abs() < 1e-4, "var {var}");
        }
    }

    #[test]
    fn patch_embed_token_count() {
        let pe = PatchEmbed::new("pe", 3, 8, 4, (32, 32)).unwrap();
        assert_eq!(pe.num_tokens(), 64);
        let mut store = ParamStore::new();
        pe.init(&mut store, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let (shape, _) = run(&store, false, |f| {
            let x = f.tape.constant(Tensor::zeros(vec![2, 3, 32, 32]));
            let y = pe.forward(f, x)?;
            Ok(f.tape.shape(y).to_vec())
        });
        assert_eq!(shape, vec![2, 64, 8]);
    }

    #[test]
    fn indivisible_patch_is_a_config_error() {
        let err = PatchEmbed::new("pe", 3, 8, 5, (32, 32)).unwrap_err();
        assert!(matches!(err, Error::Config { .. }));
    }

    #[test]
    fn batch_norm_tracks_running_stats_only_in_training() {
        let bn = BatchNorm2d::new("bn", 2);
        let mut store = ParamStore::new();
        bn.init(&mut store).unwrap();
        let input = Tensor::from_fn(vec![4, 2, 3, 3], |i| (i % 7) as f32);
        let (_, updates) = run(&store, true, |f| {
            let x = f.tape.constant(input.clone());
            bn.forward(f, x)
        });
        assert_eq!(updates.len(), 2);
        let (_, updates) = run(&store, false, |f| {
            let x = f.tape.constant(input.clone());
            bn.forward(f, x)
        });
        assert!(updates.is_empty());
    }

    #[test]
    fn linear_output_shape() {
        let lin = Linear::new("fc", 6, 3, Init::FanIn);
        let mut store = ParamStore::new();
        lin.init(&mut store, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        let (shape, _) = run(&store, false, |f| {
            let x = f.tape.constant(Tensor::zeros(vec![2, 4, 6]));
            let y = lin.forward(f, x)?;
            Ok(f.tape.shape(y).to_vec())
        });
        assert_eq!(shape, vec![2, 4, 3]);
    }
}
