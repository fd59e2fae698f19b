//! Small run configurations for trainer-level tests.

use vpl_core::trainer::{parse_pairs, RunConfig};

/// A few seconds of training on 8×8 synthetic images.
pub const TINY: &str = "
mode = vpl
seed = 0
epochs = 5
batch_size = 16
cnn.kind = conv
cnn.depth = 2
cnn.width = 4
trans.kind = transformer
trans.depth = 1
trans.width = 16
trans.heads = 2
trans.patch = 4
trans.mlp_ratio = 2
optim.cnn.lr = 0.005
optim.trans.lr = 0.002
plm.tau = 0.5
plm.rho = 1.0
stage.x_percent = 20
stage.y_percent = 20
data.source = synthetic
data.classes = 4
data.synthetic.train_samples = 64
data.synthetic.eval_samples = 32
data.synthetic.channels = 3
data.synthetic.size = 8
data.synthetic.noise = 0.5
";

/// `base` with `key=value` overrides applied; `key=` removes a key.
pub fn config_with(base: &str, overrides: &[&str]) -> RunConfig {
    let mut pairs = parse_pairs(base).unwrap();
    for o in overrides {
        let (k, v) = o.split_once('=').unwrap();
        let (k, v) = (k.trim(), v.trim());
        if v.is_empty() {
            pairs.shift_remove(k);
        } else {
            pairs.insert(k.to_string(), v.to_string());
        }
    }
    RunConfig::from_pairs(pairs).unwrap()
}

pub fn tiny(overrides: &[&str]) -> RunConfig {
    config_with(TINY, overrides)
}
