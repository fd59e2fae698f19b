use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::{Dataset, Split};
use crate::backbones::InputShape;
use crate::error::{Error, Result};
use crate::rng::derive_seed;

/// Gaussian class prototypes observed through a random circular shift and
/// additive Gaussian noise. With `motif > 0` each prototype is a
/// `motif × motif` patch pasted at a uniformly random position (with
/// wrap-around) on an empty image, and `shift` is unused.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthSpec {
    pub train_samples: usize,
    pub eval_samples: usize,
    pub channels: usize,
    pub size: usize,
    /// Standard deviation of per-pixel noise.
    pub noise: f32,
    /// Maximum circular shift in pixels along each axis.
    pub shift: usize,
    /// Number of 3×3 box-blur passes applied to each prototype.
    pub smooth: usize,
    /// Side of a local class pattern; 0 for whole-image prototypes.
    pub motif: usize,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            train_samples: 1000,
            eval_samples: 1000,
            channels: 3,
            size: 32,
            noise: 1.0,
            shift: 0,
            smooth: 0,
            motif: 0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.train_samples == 0 || self.eval_samples == 0 {
            return Err(Error::config("data.synthetic.samples", "need at least one sample per split"));
        }
        if self.channels == 0 || self.size == 0 {
            return Err(Error::config("data.synthetic.size", "image extents must be positive"));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return Err(Error::config("data.synthetic.noise", "must be a finite non-negative value"));
        }
        if self.motif > self.size {
            return Err(Error::config("data.synthetic.motif", "must not exceed the image size"));
        }
        if self.shift >= self.size {
            return Err(Error::config("data.synthetic.shift", "must be smaller than the image size"));
        }
        Ok(())
    }
}

fn blur(img: &mut [f32], c: usize, s: usize) {
    let src = img.to_vec();
    for ch in 0..c {
        for y in 0..s {
            for x in 0..s {
                let mut acc = 0.0f32;
                for dy in [s - 1, 0, 1] {
                    for dx in [s - 1, 0, 1] {
                        acc += src[(ch * s + (y + dy) % s) * s + (x + dx) % s];
                    }
                }
                img[(ch * s + y) * s + x] = acc / 9.0;
            }
        }
    }
}

fn prototypes(spec: &SynthSpec, classes: usize, seed: u64) -> Vec<Vec<f32>> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[0x7072_6f74]));
    let side = if spec.motif > 0 { spec.motif } else { spec.size };
    let per = spec.channels * side * side;
    (0..classes)
        .map(|_| {
            let mut p: Vec<f32> = (0..per)
                .map(|_| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    z as f32
                })
                .collect();
            for _ in 0..spec.smooth {
                blur(&mut p, spec.channels, side);
            }
            // Unit per-pixel RMS regardless of smoothing.
            let rms = (p.iter().map(|&v| (v as f64).powi(2)).sum::<f64>() / per as f64).sqrt();
            p.iter_mut().for_each(|v| *v = (*v as f64 / rms) as f32);
            p
        })
        .collect()
}

/// Deterministic in `seed`: both splits share prototypes, samples differ.
/// Labels cycle through the classes, so every class gets
/// `samples / classes` examples (±1).
pub fn synth_generate(spec: &SynthSpec, classes: usize, seed: u64, split: Split) -> Result<Dataset> {
    spec.validate()?;
    let protos = prototypes(spec, classes, seed);
    let (n, tag) = match split {
        Split::Train => (spec.train_samples, 1),
        Split::Test => (spec.eval_samples, 2),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[0x7361_6d70, tag]));
    let (c, s) = (spec.channels, spec.size);
    let mut pixels = Vec::with_capacity(n * c * s * s);
    let mut labels = Vec::with_capacity(n);
    let span = 2 * spec.shift + 1;
    for i in 0..n {
        let label = i % classes;
        let proto = &protos[label];
        if spec.motif > 0 {
            let m = spec.motif;
            let (py, px) = (rng.random_range(0..s), rng.random_range(0..s));
            let mut img = vec![0.0f32; c * s * s];
            for ch in 0..c {
                for y in 0..m {
                    for x in 0..m {
                        img[(ch * s + (py + y) % s) * s + (px + x) % s] = proto[(ch * m + y) * m + x];
                    }
                }
            }
            if spec.noise > 0.0 {
                for v in &mut img {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    *v += spec.noise * z as f32;
                }
            }
            pixels.extend(img);
            labels.push(label);
            continue;
        }
        let (dy, dx) = if spec.shift > 0 {
            (rng.random_range(0..span), rng.random_range(0..span))
        } else {
            (spec.shift, spec.shift)
        };
        for ch in 0..c {
            for y in 0..s {
                for x in 0..s {
                    let sy = (y + s + spec.shift - dy) % s;
                    let sx = (x + s + spec.shift - dx) % s;
                    let mut v = proto[(ch * s + sy) * s + sx];
                    if spec.noise > 0.0 {
                        let z: f64 = StandardNormal.sample(&mut rng);
                        v += spec.noise * z as f32;
                    }
                    pixels.push(v);
                }
            }
        }
        labels.push(label);
    }
    Dataset::new(
        InputShape {
            channels: c,
            height: s,
            width: s,
        },
        classes,
        pixels,
        labels,
    )
}
