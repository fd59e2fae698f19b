//! Run configuration: a plain `key = value` file. Blank lines and lines
//! starting with `#` are ignored. Unknown or repeated keys are errors.
//!
//! The temperatures, stage percentages and learning rates have no defaults
//! and must always be stated.

use std::fmt::{self, Write as _};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use indexmap::IndexMap;

use crate::backbones::{BackboneKind, BackboneSpec};
use crate::data::{AugmentFlags, DatasetSpec, Source, SynthSpec};
use crate::error::{Error, Result};
use crate::optim::AdamWConfig;
use crate::plm::{PlmConfig, Routing};
use crate::schedule::StageSchedule;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Vpl,
    Independent,
    Distill,
    Dml,
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::Vpl => "vpl",
            Mode::Independent => "independent",
            Mode::Distill => "distill",
            Mode::Dml => "dml",
        })
    }
}

impl FromStr for Mode {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "vpl" => Ok(Mode::Vpl),
            "independent" => Ok(Mode::Independent),
            "distill" => Ok(Mode::Distill),
            "dml" => Ok(Mode::Dml),
            other => Err(format!(
                "expected `vpl`, `independent`, `distill` or `dml`, got `{other}`"
            )),
        }
    }
}

/// Position of a branch. The first is trained by the KL term, the second
/// by the contrastive term.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Role {
    Cnn,
    Trans,
}

impl Role {
    pub const BOTH: [Role; 2] = [Role::Cnn, Role::Trans];

    pub fn key(self) -> &'static str {
        match self {
            Role::Cnn => "cnn",
            Role::Trans => "trans",
        }
    }

    pub fn other(self) -> Role {
        match self {
            Role::Cnn => Role::Trans,
            Role::Trans => Role::Cnn,
        }
    }
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.key())
    }
}

impl FromStr for Role {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "cnn" => Ok(Role::Cnn),
            "trans" => Ok(Role::Trans),
            other => Err(format!("expected `cnn` or `trans`, got `{other}`")),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BranchConfig {
    pub backbone: BackboneSpec,
    /// Only meaningful in independent mode.
    pub enabled: bool,
    pub lr: f64,
    pub min_lr: f64,
    pub adamw: AdamWConfig,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EmaConfig {
    pub decay_max: f64,
    pub warmup: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DistillConfig {
    pub teacher: PathBuf,
    pub teacher_role: Role,
    /// Weight of the pair loss routed into the student.
    pub weight: f32,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub mode: Mode,
    pub seed: u64,
    pub epochs: usize,
    pub batch_size: usize,
    pub eval_batch_size: usize,
    pub prefetch: usize,
    pub cnn: BranchConfig,
    pub trans: BranchConfig,
    pub plm: PlmConfig,
    /// Stage percentages `(x, y)`; required in vpl mode.
    pub stages: Option<(u32, u32)>,
    pub ema: Option<EmaConfig>,
    pub distill: Option<DistillConfig>,
    pub data: DatasetSpec,
}

struct Entries {
    map: IndexMap<String, String>,
}

impl Entries {
    fn take(&mut self, key: &str) -> Option<String> {
        self.map.shift_remove(key)
    }

    fn required<T: FromStr>(&mut self, key: &str) -> Result<T>
    where
        T::Err: fmt::Display,
    {
        let raw = self
            .take(key)
            .ok_or_else(|| Error::config(key, "required but not set"))?;
        parse_value(key, &raw)
    }

    fn optional<T: FromStr>(&mut self, key: &str) -> Result<Option<T>>
    where
        T::Err: fmt::Display,
    {
        self.take(key).map(|raw| parse_value(key, &raw)).transpose()
    }

    fn or<T: FromStr>(&mut self, key: &str, default: T) -> Result<T>
    where
        T::Err: fmt::Display,
    {
        Ok(self.optional(key)?.unwrap_or(default))
    }

    fn list(&mut self, key: &str) -> Result<Option<Vec<f32>>> {
        self.take(key)
            .map(|raw| raw.split(',').map(|v| parse_value(key, v.trim())).collect())
            .transpose()
    }
}

fn parse_value<T: FromStr>(key: &str, raw: &str) -> Result<T>
where
    T::Err: fmt::Display,
{
    raw.parse()
        .map_err(|e: T::Err| Error::config(key, format!("cannot parse `{raw}`: {e}")))
}

struct Switch(bool);

impl FromStr for Switch {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "on" | "true" => Ok(Switch(true)),
            "off" | "false" => Ok(Switch(false)),
            other => Err(format!("expected `on` or `off`, got `{other}`")),
        }
    }
}

/// Split text into ordered `key = value` pairs.
pub fn parse_pairs(text: &str) -> Result<IndexMap<String, String>> {
    let mut map = IndexMap::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::config(format!("line {}", i + 1), format!("expected `key = value`, got `{line}`")))?;
        let (k, v) = (k.trim().to_string(), v.trim().to_string());
        if map.insert(k.clone(), v).is_some() {
            return Err(Error::config(k, "set more than once"));
        }
    }
    Ok(map)
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        Self::from_pairs(parse_pairs(text)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn from_pairs(map: IndexMap<String, String>) -> Result<Self> {
        let mut e = Entries { map };
        let mode: Mode = e.required("mode")?;
        let classes: usize = e.or("data.classes", 10)?;
        let cnn = branch(&mut e, Role::Cnn, classes)?;
        let trans = branch(&mut e, Role::Trans, classes)?;

        let plm = PlmConfig {
            tau: e.required("plm.tau")?,
            rho: e.required("plm.rho")?,
            routing: e.or("plm.routing", Routing::Restricted)?,
        };
        let stages = if mode == Mode::Vpl {
            Some((e.required("stage.x_percent")?, e.required("stage.y_percent")?))
        } else {
            match (e.optional("stage.x_percent")?, e.optional("stage.y_percent")?) {
                (Some(x), Some(y)) => Some((x, y)),
                (None, None) => None,
                _ => {
                    return Err(Error::config(
                        "stage.x_percent, stage.y_percent",
                        "set both or neither",
                    ))
                }
            }
        };
        let ema = if e.or("ema", Switch(false))?.0 {
            Some(EmaConfig {
                decay_max: e.or("ema.decay_max", 0.9995)?,
                warmup: e.or("ema.warmup", Switch(true))?.0,
            })
        } else {
            None
        };
        let distill = if mode == Mode::Distill {
            Some(DistillConfig {
                teacher: e.required::<String>("distill.teacher")?.into(),
                teacher_role: e.required("distill.teacher_role")?,
                weight: e.or("distill.weight", 1.0)?,
            })
        } else {
            None
        };

        let source: Source = e.required("data.source")?;
        let source = match source {
            Source::Synthetic(d) => Source::Synthetic(SynthSpec {
                train_samples: e.or("data.synthetic.train_samples", d.train_samples)?,
                eval_samples: e.or("data.synthetic.eval_samples", d.eval_samples)?,
                channels: e.or("data.synthetic.channels", d.channels)?,
                size: e.or("data.synthetic.size", d.size)?,
                noise: e.or("data.synthetic.noise", d.noise)?,
                shift: e.or("data.synthetic.shift", d.shift)?,
                smooth: e.or("data.synthetic.smooth", d.smooth)?,
                motif: e.or("data.synthetic.motif", d.motif)?,
            }),
            other => other,
        };
        let synthetic = matches!(source, Source::Synthetic(_));
        let mut data = DatasetSpec {
            source,
            root: e.optional::<String>("data.root")?.map(PathBuf::from),
            classes,
            augment: AugmentFlags {
                flip: e.or("data.flip", Switch(false))?.0,
                crop_pad: e.or("data.crop_pad", 0)?,
            },
            seed: e.or("data.seed", 0)?,
            mean: Vec::new(),
            std: Vec::new(),
            train_limit: e.optional("data.train_limit")?,
            eval_limit: e.optional("data.eval_limit")?,
        };
        let channels = data.input_shape().channels;
        data.mean = match e.list("data.mean")? {
            Some(v) => v,
            None if synthetic => vec![0.0; channels],
            None => return Err(Error::config("data.mean", "required for byte-valued sources")),
        };
        data.std = match e.list("data.std")? {
            Some(v) => v,
            None if synthetic => vec![1.0; channels],
            None => return Err(Error::config("data.std", "required for byte-valued sources")),
        };

        let config = RunConfig {
            mode,
            seed: e.or("seed", 0)?,
            epochs: e.required("epochs")?,
            batch_size: e.required("batch_size")?,
            eval_batch_size: e.or("eval.batch_size", 256)?,
            prefetch: e.or("loader.prefetch", 0)?,
            cnn,
            trans,
            plm,
            stages,
            ema,
            distill,
            data,
        };
        if let Some((key, _)) = e.map.first() {
            return Err(Error::config(key.clone(), "unknown key"));
        }
        config.validate()?;
        Ok(config)
    }

    pub fn branch(&self, role: Role) -> &BranchConfig {
        match role {
            Role::Cnn => &self.cnn,
            Role::Trans => &self.trans,
        }
    }

    pub fn branch_mut(&mut self, role: Role) -> &mut BranchConfig {
        match role {
            Role::Cnn => &mut self.cnn,
            Role::Trans => &mut self.trans,
        }
    }

    pub fn schedule(&self) -> Result<Option<StageSchedule>> {
        self.stages
            .map(|(x, y)| StageSchedule::new(x, y, self.epochs))
            .transpose()
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::config("epochs", "must be at least 1"));
        }
        if self.batch_size < 2 {
            return Err(Error::config("batch_size", "must be at least 2"));
        }
        if self.eval_batch_size == 0 {
            return Err(Error::config("eval.batch_size", "must be at least 1"));
        }
        self.plm.validate()?;
        self.schedule()?;
        self.data.validate()?;
        let input = self.data.input_shape();
        for role in Role::BOTH {
            let b = self.branch(role);
            b.backbone.validate(role.key(), input)?;
            if b.backbone.classes != self.data.classes {
                return Err(Error::config(
                    format!("{role}.classes"),
                    "must equal data.classes",
                ));
            }
            for (field, v) in [("lr", b.lr), ("min_lr", b.min_lr), ("weight_decay", b.adamw.weight_decay)] {
                if !(v >= 0.0 && v.is_finite()) {
                    return Err(Error::config(
                        format!("optim.{role}.{field}"),
                        format!("must be finite and non-negative, got {v}"),
                    ));
                }
            }
            if b.min_lr > b.lr {
                return Err(Error::config(
                    format!("optim.{role}.min_lr"),
                    "must not exceed the peak learning rate",
                ));
            }
            if !b.enabled && self.mode != Mode::Independent {
                return Err(Error::config(
                    format!("{role}.enabled"),
                    format!("branches can only be disabled in independent mode, not {}", self.mode),
                ));
            }
        }
        if !self.cnn.enabled && !self.trans.enabled {
            return Err(Error::config("cnn.enabled, trans.enabled", "at least one branch must be enabled"));
        }
        if let Some(ema) = self.ema {
            if !(0.0..=1.0).contains(&ema.decay_max) {
                return Err(Error::config("ema.decay_max", "must lie in [0, 1]"));
            }
        }
        if let Some(d) = &self.distill {
            if !(d.weight >= 0.0 && d.weight.is_finite()) {
                return Err(Error::config("distill.weight", "must be finite and non-negative"));
            }
        }
        Ok(())
    }

    /// Canonical text of every resolved setting; parses back to `self`.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let mut kv = |k: &str, v: &dyn fmt::Display| {
            let _ = writeln!(s, "{k} = {v}");
        };
        kv("mode", &self.mode);
        kv("seed", &self.seed);
        kv("epochs", &self.epochs);
        kv("batch_size", &self.batch_size);
        kv("eval.batch_size", &self.eval_batch_size);
        kv("loader.prefetch", &self.prefetch);
        for role in Role::BOTH {
            let b = self.branch(role);
            let bb = &b.backbone;
            kv(&format!("{role}.kind"), &bb.kind);
            kv(&format!("{role}.depth"), &bb.depth);
            kv(&format!("{role}.width"), &bb.width);
            if let Some(h) = bb.heads {
                kv(&format!("{role}.heads"), &h);
            }
            if let Some(p) = bb.patch {
                kv(&format!("{role}.patch"), &p);
            }
            if let Some(m) = bb.mlp_ratio {
                kv(&format!("{role}.mlp_ratio"), &m);
            }
            kv(&format!("{role}.enabled"), &b.enabled);
            kv(&format!("optim.{role}.lr"), &b.lr);
            kv(&format!("optim.{role}.min_lr"), &b.min_lr);
            kv(&format!("optim.{role}.weight_decay"), &b.adamw.weight_decay);
        }
        kv("plm.tau", &self.plm.tau);
        kv("plm.rho", &self.plm.rho);
        kv("plm.routing", &self.plm.routing);
        if let Some((x, y)) = self.stages {
            kv("stage.x_percent", &x);
            kv("stage.y_percent", &y);
        }
        match self.ema {
            Some(e) => {
                kv("ema", &"on");
                kv("ema.decay_max", &e.decay_max);
                kv("ema.warmup", &e.warmup);
            }
            None => kv("ema", &"off"),
        }
        if let Some(d) = &self.distill {
            kv("distill.teacher", &d.teacher.display());
            kv("distill.teacher_role", &d.teacher_role);
            kv("distill.weight", &d.weight);
        }
        let d = &self.data;
        kv("data.source", &d.source.name());
        if let Source::Synthetic(sy) = &d.source {
            kv("data.synthetic.train_samples", &sy.train_samples);
            kv("data.synthetic.eval_samples", &sy.eval_samples);
            kv("data.synthetic.channels", &sy.channels);
            kv("data.synthetic.size", &sy.size);
            kv("data.synthetic.noise", &sy.noise);
            kv("data.synthetic.shift", &sy.shift);
            kv("data.synthetic.smooth", &sy.smooth);
            kv("data.synthetic.motif", &sy.motif);
        }
        if let Some(r) = &d.root {
            kv("data.root", &r.display());
        }
        kv("data.classes", &d.classes);
        kv("data.seed", &d.seed);
        let join = |v: &[f32]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(", ");
        kv("data.mean", &join(&d.mean));
        kv("data.std", &join(&d.std));
        kv("data.flip", &d.augment.flip);
        kv("data.crop_pad", &d.augment.crop_pad);
        if let Some(n) = d.train_limit {
            kv("data.train_limit", &n);
        }
        if let Some(n) = d.eval_limit {
            kv("data.eval_limit", &n);
        }
        s
    }
}

fn branch(e: &mut Entries, role: Role, classes: usize) -> Result<BranchConfig> {
    let kind: BackboneKind = e.required(&format!("{role}.kind"))?;
    let preset = match kind {
        BackboneKind::Conv => BackboneSpec::tiny_cnn(classes),
        BackboneKind::Transformer => BackboneSpec::tiny_vit(classes),
    };
    let backbone = BackboneSpec {
        kind,
        depth: e.or(&format!("{role}.depth"), preset.depth)?,
        width: e.or(&format!("{role}.width"), preset.width)?,
        heads: e.optional(&format!("{role}.heads"))?.or(preset.heads),
        patch: e.optional(&format!("{role}.patch"))?.or(preset.patch),
        mlp_ratio: e.optional(&format!("{role}.mlp_ratio"))?.or(preset.mlp_ratio),
        classes,
    };
    let defaults = AdamWConfig::default();
    Ok(BranchConfig {
        backbone,
        enabled: e.or(&format!("{role}.enabled"), true)?,
        lr: e.required(&format!("optim.{role}.lr"))?,
        min_lr: e.or(&format!("optim.{role}.min_lr"), 0.0)?,
        adamw: AdamWConfig {
            weight_decay: e.or(&format!("optim.{role}.weight_decay"), defaults.weight_decay)?,
            ..defaults
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    const BASE: &str = "
        mode = vpl
        epochs = 10
        batch_size = 32
        cnn.kind = conv
        trans.kind = transformer
        optim.cnn.lr = 0.005
        optim.trans.lr = 0.002
        plm.tau = 0.1
        plm.rho = 1.0
        stage.x_percent = 20
        stage.y_percent = 20
        data.source = synthetic
    ";

    fn with(extra: &str) -> Result<RunConfig> {
        RunConfig::parse(&format!("{BASE}\n{extra}"))
    }

    #[test]
    fn echo_round_trips() {
        let c = with("ema = on\ndata.flip = on\ndata.train_limit = 50").unwrap();
        assert_eq!(RunConfig::parse(&c.to_text()).unwrap(), c);
    }

    #[test]
    fn key_knobs_have_no_defaults() {
        for key in ["plm.tau", "plm.rho", "stage.x_percent", "stage.y_percent", "optim.cnn.lr"] {
            let text: String = BASE.lines().filter(|l| !l.trim().starts_with(key)).collect::<Vec<_>>().join("\n");
            match RunConfig::parse(&text) {
                Err(Error::Config { field, .. }) => assert_eq!(field, key),
                other => panic!("{key}: {other:?}"),
            }
        }
    }

    #[test]
    fn field_level_errors() {
        let err = with("bogus = 1").unwrap_err();
        assert!(matches!(&err, Error::Config { field, .. } if field == "bogus"));
        let err = RunConfig::parse(&BASE.replace("x_percent = 20", "x_percent = 60").replace("y_percent = 20", "y_percent = 60"))
            .unwrap_err()
            .to_string();
        assert!(err.contains("x = 60") && err.contains("y = 60"), "{err}");
        let err = with("cnn.enabled = false").unwrap_err();
        assert!(matches!(&err, Error::Config { field, .. } if field == "cnn.enabled"));
        assert!(with("epochs = 3").is_err());
    }

    #[test]
    fn distill_needs_a_teacher() {
        let text = BASE.replace("mode = vpl", "mode = distill");
        let err = RunConfig::parse(&text).unwrap_err();
        assert!(matches!(&err, Error::Config { field, .. } if field == "distill.teacher"));
    }
}
