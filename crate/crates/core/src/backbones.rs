//! The two classification branches as small, structure-preserving networks:
//! a residual CNN and a ViT-style transformer, plus the affine bridge that
//! matches embedding widths when they differ.

use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::{BatchNorm2d, Conv2d, Forward, Init, LayerNorm, Linear, Mhsa, Mlp, ParamStore, PatchEmbed};
use crate::tensor::Var;

const VIT_INIT: Init = Init::TruncNormal { std: 0.02 };

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BackboneKind {
    Conv,
    Transformer,
}

impl fmt::Display for BackboneKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            BackboneKind::Conv => "conv",
            BackboneKind::Transformer => "transformer",
        })
    }
}

impl FromStr for BackboneKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "conv" => Ok(BackboneKind::Conv),
            "transformer" => Ok(BackboneKind::Transformer),
            other => Err(format!("expected `conv` or `transformer`, got `{other}`")),
        }
    }
}

/// Architecture of one branch.
///
/// For `Conv`, `depth` is the number of residual stages and `width` the
/// channel count of the first stage (doubling per stage). For `Transformer`,
/// `depth` is the number of blocks and `width` the token dimension.
#[derive(Clone, Debug, PartialEq)]
pub struct BackboneSpec {
    pub kind: BackboneKind,
    pub depth: usize,
    pub width: usize,
    pub heads: Option<usize>,
    pub patch: Option<usize>,
    pub mlp_ratio: Option<usize>,
    pub classes: usize,
}

/// Image geometry fed to a backbone.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct InputShape {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl BackboneSpec {
    /// Four residual stages of widths 16/32/64/128.
    pub fn tiny_cnn(classes: usize) -> Self {
        BackboneSpec {
            kind: BackboneKind::Conv,
            depth: 4,
            width: 16,
            heads: None,
            patch: None,
            mlp_ratio: None,
            classes,
        }
    }

    /// Depth 4, width 128, 4 heads, patch 4.
    pub fn tiny_vit(classes: usize) -> Self {
        BackboneSpec {
            kind: BackboneKind::Transformer,
            depth: 4,
            width: 128,
            heads: Some(4),
            patch: Some(4),
            mlp_ratio: Some(4),
            classes,
        }
    }

    /// Width of the pre-classifier embedding.
    pub fn embed_dim(&self) -> usize {
        match self.kind {
            BackboneKind::Conv => self.width << (self.depth.saturating_sub(1)),
            BackboneKind::Transformer => self.width,
        }
    }

    pub fn validate(&self, prefix: &str, input: InputShape) -> Result<()> {
        let field = |name: &str| format!("{prefix}.{name}");
        if self.depth == 0 {
            return Err(Error::config(field("depth"), "must be at least 1"));
        }
        if self.width == 0 {
            return Err(Error::config(field("width"), "must be at least 1"));
        }
        if self.classes < 2 {
            return Err(Error::config(field("classes"), "need at least two classes"));
        }
        match self.kind {
            BackboneKind::Conv => {
                for (name, v) in [("heads", self.heads), ("patch", self.patch), ("mlp_ratio", self.mlp_ratio)] {
                    if v.is_some() {
                        return Err(Error::config(field(name), "only meaningful for kind = transformer"));
                    }
                }
                let down = 1usize << (self.depth - 1);
                if input.height % down != 0 || input.width % down != 0 {
                    return Err(Error::config(
                        field("depth"),
                        format!(
                            "{} stride-2 stages need image extents divisible by {down}, got {}x{}",
                            self.depth - 1,
                            input.height,
                            input.width
                        ),
                    ));
                }
            }
            BackboneKind::Transformer => {
                let heads = self
                    .heads
                    .ok_or_else(|| Error::config(field("heads"), "required for kind = transformer"))?;
                let patch = self
                    .patch
                    .ok_or_else(|| Error::config(field("patch"), "required for kind = transformer"))?;
                if heads == 0 || self.width % heads != 0 {
                    return Err(Error::config(
                        field("heads"),
                        format!("{heads} heads do not divide width {}", self.width),
                    ));
                }
                if patch == 0 || input.height % patch != 0 || input.width % patch != 0 {
                    return Err(Error::config(
                        field("patch"),
                        format!(
                            "patch size {patch} does not divide image extent {}x{}",
                            input.height, input.width
                        ),
                    ));
                }
                if self.mlp_ratio == Some(0) {
                    return Err(Error::config(field("mlp_ratio"), "must be at least 1"));
                }
            }
        }
        Ok(())
    }
}

/// Embeddings and logits of one branch for one batch.
#[derive(Clone, Copy, Debug)]
pub struct BranchOutput {
    /// Pre-classifier feature `N×d_own`.
    pub features: Var,
    /// Feature after the bridge (identical to `features` without one),
    /// width-matched with the partner branch.
    pub embedding: Var,
    pub logits: Var,
}

#[derive(Clone, Debug)]
struct ResidualBlock {
    conv1: Conv2d,
    bn1: BatchNorm2d,
    conv2: Conv2d,
    bn2: BatchNorm2d,
    shortcut: Option<(Conv2d, BatchNorm2d)>,
}

impl ResidualBlock {
    fn new(name: &str, cin: usize, cout: usize, stride: usize) -> Self {
        let shortcut = (stride != 1 || cin != cout).then(|| {
            (
                Conv2d::new(format!("{name}.shortcut.conv"), cin, cout, 1, stride, 0),
                BatchNorm2d::new(format!("{name}.shortcut.bn"), cout),
            )
        });
        ResidualBlock {
            conv1: Conv2d::new(format!("{name}.conv1"), cin, cout, 3, stride, 1),
            bn1: BatchNorm2d::new(format!("{name}.bn1"), cout),
            conv2: Conv2d::new(format!("{name}.conv2"), cout, cout, 3, 1, 1),
            bn2: BatchNorm2d::new(format!("{name}.bn2"), cout),
            shortcut,
        }
    }

    fn init(&self, store: &mut ParamStore, rng: &mut impl Rng) -> Result<()> {
        self.conv1.init(store, rng)?;
        self.bn1.init(store)?;
        self.conv2.init(store, rng)?;
        self.bn2.init(store)?;
        if let Some((conv, bn)) = &self.shortcut {
            conv.init(store, rng)?;
            bn.init(store)?;
        }
        Ok(())
    }

    fn forward(&self, f: &mut Forward<'_>, x: Var) -> Result<Var> {
        let h = self.conv1.forward(f, x)?;
        let h = self.bn1.forward(f, h)?;
        let h = f.tape.relu(h)?;
        let h = self.conv2.forward(f, h)?;
        let h = self.bn2.forward(f, h)?;
        let skip = match &self.shortcut {
            Some((conv, bn)) => {
                let s = conv.forward(f, x)?;
                bn.forward(f, s)?
            }
            None => x,
        };
        let y = f.tape.add(h, skip)?;
        f.tape.relu(y)
    }
}

/// Residual CNN: stem, one basic block per stage (stride 2 after the first),
/// global average pooling, linear classifier.
#[derive(Clone, Debug)]
pub struct TinyCnn {
    stem: Conv2d,
    stem_bn: BatchNorm2d,
    blocks: Vec<ResidualBlock>,
    pub embed_dim: usize,
    pub input: InputShape,
    pub head: Linear,
}

impl TinyCnn {
    pub fn new(spec: &BackboneSpec, input: InputShape) -> Result<Self> {
        spec.validate("branch", input)?;
        let w = spec.width;
        let mut blocks = Vec::with_capacity(spec.depth);
        let mut cin = w;
        for stage in 0..spec.depth {
            let cout = w << stage;
            let stride = if stage == 0 { 1 } else { 2 };
            blocks.push(ResidualBlock::new(&format!("stage{}", stage + 1), cin, cout, stride));
            cin = cout;
        }
        Ok(TinyCnn {
            stem: Conv2d::new("stem.conv", input.channels, w, 3, 1, 1),
            stem_bn: BatchNorm2d::new("stem.bn", w),
            blocks,
            embed_dim: cin,
            input,
            head: Linear::new("head", cin, spec.classes, Init::FanIn),
        })
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut impl Rng) -> Result<()> {
        self.stem.init(store, rng)?;
        self.stem_bn.init(store)?;
        for b in &self.blocks {
            b.init(store, rng)?;
        }
        self.head.init(store, rng)
    }

    /// Returns `(features, logits)`.
    pub fn forward(&self, f: &mut Forward<'_>, images: Var) -> Result<(Var, Var)> {
        check_input("tiny-cnn", f, images, self.input)?;
        let n = f.tape.shape(images)[0];
        let h = self.stem.forward(f, images)?;
        let h = self.stem_bn.forward(f, h)?;
        let mut h = f.tape.relu(h)?;
        for b in &self.blocks {
            h = b.forward(f, h)?;
        }
        let s = f.tape.shape(h).to_vec();
        let h = f.tape.reshape(h, &[n, s[1], s[2] * s[3]])?;
        let features = f.tape.mean_axis(h, 2)?;
        let logits = self.head.forward(f, features)?;
        Ok((features, logits))
    }
}

#[derive(Clone, Debug)]
struct TransformerBlock {
    ln1: LayerNorm,
    attn: Mhsa,
    ln2: LayerNorm,
    mlp: Mlp,
}

impl TransformerBlock {
    fn forward(&self, f: &mut Forward<'_>, x: Var) -> Result<Var> {
        let h = self.ln1.forward(f, x)?;
        let h = self.attn.forward(f, h)?;
        let x = f.tape.add(x, h)?;
        let h = self.ln2.forward(f, x)?;
        let h = self.mlp.forward(f, h)?;
        f.tape.add(x, h)
    }
}

/// Pre-norm vision transformer with a class token and learned positional
/// embeddings.
#[derive(Clone, Debug)]
pub struct TinyVit {
    patch: PatchEmbed,
    blocks: Vec<TransformerBlock>,
    norm: LayerNorm,
    pub embed_dim: usize,
    pub input: InputShape,
    pub head: Linear,
}

impl TinyVit {
    pub fn new(spec: &BackboneSpec, input: InputShape) -> Result<Self> {
        spec.validate("branch", input)?;
        let d = spec.width;
        let heads = spec.heads.expect("validated");
        let patch = PatchEmbed::new("patch_embed", input.channels, d, spec.patch.expect("validated"), (input.height, input.width))?;
        let hidden = d * spec.mlp_ratio.unwrap_or(4);
        let blocks = (0..spec.depth)
            .map(|i| {
                let name = format!("blocks.{i}");
                Ok(TransformerBlock {
                    ln1: LayerNorm::new(format!("{name}.ln1"), d),
                    attn: Mhsa::new(&format!("{name}.attn"), d, heads, VIT_INIT)?,
                    ln2: LayerNorm::new(format!("{name}.ln2"), d),
                    mlp: Mlp::new(&format!("{name}.mlp"), d, hidden, VIT_INIT),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(TinyVit {
            patch,
            blocks,
            norm: LayerNorm::new("norm", d),
            embed_dim: d,
            input,
            head: Linear::new("head", d, spec.classes, VIT_INIT),
        })
    }

    /// Patch tokens plus the class token.
    pub fn num_tokens(&self) -> usize {
        self.patch.num_tokens() + 1
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut impl Rng) -> Result<()> {
        let d = self.embed_dim;
        self.patch.init(store, rng)?;
        store.insert("cls_token", VIT_INIT.sample(&[1, 1, d], d, rng), true)?;
        store.insert("pos_embed", VIT_INIT.sample(&[1, self.num_tokens(), d], d, rng), true)?;
        for b in &self.blocks {
            b.ln1.init(store)?;
            b.attn.init(store, rng)?;
            b.ln2.init(store)?;
            b.mlp.init(store, rng)?;
        }
        self.norm.init(store)?;
        self.head.init(store, rng)
    }

    /// Returns `(features, logits)`; features are the normalized class token.
    pub fn forward(&self, f: &mut Forward<'_>, images: Var) -> Result<(Var, Var)> {
        check_input("tiny-vit", f, images, self.input)?;
        let n = f.tape.shape(images)[0];
        let d = self.embed_dim;
        let t = self.num_tokens();
        let tokens = self.patch.forward(f, images)?;
        let cls = f.param("cls_token")?;
        let cls = f.tape.expand(cls, &[n, 1, d])?;
        let x = f.tape.concat(&[cls, tokens], 1)?;
        let pos = f.param("pos_embed")?;
        let mut x = f.tape.add(x, pos)?;
        for b in &self.blocks {
            x = b.forward(f, x)?;
        }
        let x = self.norm.forward(f, x)?;
        let x = f.tape.reshape(x, &[n * t, d])?;
        let rows: Vec<usize> = (0..n).map(|i| i * t).collect();
        let features = f.tape.gather_rows(x, &rows)?;
        let logits = self.head.forward(f, features)?;
        Ok((features, logits))
    }
}

fn check_input(op: &'static str, f: &Forward<'_>, images: Var, input: InputShape) -> Result<()> {
    let s = f.tape.shape(images);
    if s.len() != 4 || s[1..] != [input.channels, input.height, input.width] {
        return Err(Error::shape(op, s, &[input.channels, input.height, input.width]));
    }
    Ok(())
}

#[derive(Clone, Debug)]
pub enum Network {
    Cnn(TinyCnn),
    Vit(TinyVit),
}

/// A complete branch: network, optional bridge, and the name of the backbone
/// family for reporting.
#[derive(Clone, Debug)]
pub struct Branch {
    pub spec: BackboneSpec,
    pub network: Network,
    pub bridge: Option<Linear>,
}

impl Branch {
    /// `bridge_to` is the partner's embedding width when this branch must
    /// project up to it; `None` (or an equal width) means no bridge.
    pub fn new(spec: &BackboneSpec, input: InputShape, bridge_to: Option<usize>) -> Result<Self> {
        let network = match spec.kind {
            BackboneKind::Conv => Network::Cnn(TinyCnn::new(spec, input)?),
            BackboneKind::Transformer => Network::Vit(TinyVit::new(spec, input)?),
        };
        let d = spec.embed_dim();
        let bridge = bridge_to
            .filter(|&t| t != d)
            .map(|t| Linear::new("bridge", d, t, Init::FanIn));
        Ok(Branch {
            spec: spec.clone(),
            network,
            bridge,
        })
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut impl Rng) -> Result<()> {
        match &self.network {
            Network::Cnn(n) => n.init(store, rng)?,
            Network::Vit(n) => n.init(store, rng)?,
        }
        if let Some(b) = &self.bridge {
            b.init(store, rng)?;
        }
        Ok(())
    }

    pub fn build_store(&self, rng: &mut impl Rng) -> Result<ParamStore> {
        let mut store = ParamStore::new();
        self.init(&mut store, rng)?;
        Ok(store)
    }

    /// Width of the (bridged) embedding used by the pair losses.
    pub fn pair_dim(&self) -> usize {
        self.bridge.as_ref().map_or(self.spec.embed_dim(), |b| b.out_dim)
    }

    pub fn forward(&self, f: &mut Forward<'_>, images: Var) -> Result<BranchOutput> {
        let (features, logits) = match &self.network {
            Network::Cnn(n) => n.forward(f, images)?,
            Network::Vit(n) => n.forward(f, images)?,
        };
        let embedding = match &self.bridge {
            Some(b) => b.forward(f, features)?,
            None => features,
        };
        Ok(BranchOutput {
            features,
            embedding,
            logits,
        })
    }
}

/// Build both branches, attaching a bridge to the narrower one.
pub fn build_pair(first: &BackboneSpec, second: &BackboneSpec, input: InputShape) -> Result<(Branch, Branch)> {
    let (d1, d2) = (first.embed_dim(), second.embed_dim());
    let a = Branch::new(first, input, (d1 < d2).then_some(d2))?;
    let b = Branch::new(second, input, (d2 < d1).then_some(d1))?;
    Ok((a, b))
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::tensor::{Tape, Tensor};

    const CIFAR: InputShape = InputShape {
        channels: 3,
        height: 32,
        width: 32,
    };

    fn forward_shapes(branch: &Branch, n: usize) -> (Vec<usize>, Vec<usize>) {
        let store = branch.build_store(&mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let mut tape = Tape::new();
        let binding = store.bind(&mut tape, false);
        let mut f = Forward::new(&mut tape, &binding, &store, true);
        let x = f.tape.constant(Tensor::full(vec![n, 3, 32, 32], 0.5));
        let out = branch.forward(&mut f, x).unwrap();
        (f.tape.shape(out.embedding).to_vec(), f.tape.shape(out.logits).to_vec())
    }

    #[test]
    fn default_cnn_shapes_and_size() {
        let b = Branch::new(&BackboneSpec::tiny_cnn(10), CIFAR, None).unwrap();
        assert_eq!(forward_shapes(&b, 8), (vec![8, 128], vec![8, 10]));
        let params = b.build_store(&mut ChaCha8Rng::seed_from_u64(0)).unwrap().num_trainable();
        assert!((100_000..=320_000).contains(&params), "{params}");
    }

    #[test]
    fn default_vit_shapes_and_size() {
        let spec = BackboneSpec::tiny_vit(10);
        let b = Branch::new(&spec, CIFAR, None).unwrap();
        let Network::Vit(vit) = &b.network else { unreachable!() };
        assert_eq!(vit.num_tokens(), 65);
        assert_eq!(forward_shapes(&b, 8), (vec![8, 128], vec![8, 10]));
        let params = b.build_store(&mut ChaCha8Rng::seed_from_u64(0)).unwrap().num_trainable();
        assert!((400_000..=1_000_000).contains(&params), "{params}");
    }

    #[test]
    fn bridge_goes_on_the_narrower_branch() {
        let mut cnn = BackboneSpec::tiny_cnn(10);
        cnn.depth = 3; // 64-wide embedding
        let (a, b) = build_pair(&cnn, &BackboneSpec::tiny_vit(10), CIFAR).unwrap();
        assert_eq!(a.bridge.as_ref().map(|l| (l.in_dim, l.out_dim)), Some((64, 128)));
        assert!(b.bridge.is_none());
        assert_eq!(a.pair_dim(), b.pair_dim());
    }

    #[test]
    fn equal_widths_need_no_bridge() {
        let (a, b) = build_pair(&BackboneSpec::tiny_cnn(10), &BackboneSpec::tiny_vit(10), CIFAR).unwrap();
        assert!(a.bridge.is_none() && b.bridge.is_none());
        let store = a.build_store(&mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert!(!store.iter().any(|(n, _)| n.starts_with("bridge")));
    }

    #[test]
    fn invalid_combinations_are_rejected() {
        let mut vit = BackboneSpec::tiny_vit(10);
        vit.patch = Some(5);
        assert!(matches!(vit.validate("trans", CIFAR), Err(Error::Config { field, .. }) if field == "trans.patch"));
        let mut vit = BackboneSpec::tiny_vit(10);
        vit.heads = Some(3);
        assert!(vit.validate("trans", CIFAR).is_err());
        let mut cnn = BackboneSpec::tiny_cnn(10);
        cnn.heads = Some(2);
        assert!(cnn.validate("cnn", CIFAR).is_err());
    }
}
