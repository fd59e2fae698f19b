use rand::Rng;

use super::Batch;
use crate::error::Result;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct AugmentFlags {
    /// Horizontal flip with probability one half.
    pub flip: bool,
    /// Zero-pad by this many pixels, then take a random crop of the
    /// original size. 0 disables cropping.
    pub crop_pad: usize,
}

impl AugmentFlags {
    pub fn is_identity(&self) -> bool {
        !self.flip && self.crop_pad == 0
    }
}

/// Mirror a `C×H×W` image left to right.
pub fn hflip(img: &[f32], c: usize, h: usize, w: usize) -> Vec<f32> {
    let mut out = Vec::with_capacity(img.len());
    for row in img[..c * h * w].chunks(w) {
        out.extend(row.iter().rev());
    }
    out
}

/// Window at offset `(oy, ox)` into the image zero-padded by `pad`;
/// `oy = ox = pad` is the identity.
pub fn crop(img: &[f32], c: usize, h: usize, w: usize, pad: usize, oy: usize, ox: usize) -> Vec<f32> {
    let mut out = vec![0.0; c * h * w];
    for ch in 0..c {
        for y in 0..h {
            let sy = (y + oy) as isize - pad as isize;
            if sy < 0 || sy >= h as isize {
                continue;
            }
            for x in 0..w {
                let sx = (x + ox) as isize - pad as isize;
                if sx < 0 || sx >= w as isize {
                    continue;
                }
                out[(ch * h + y) * w + x] = img[(ch * h + sy as usize) * w + sx as usize];
            }
        }
    }
    out
}

/// Per-sample random crop and flip. With both disabled the batch is
/// returned unchanged and `rng` is not touched.
pub fn augment(batch: Batch, flags: AugmentFlags, rng: &mut impl Rng) -> Result<Batch> {
    if flags.is_identity() {
        return Ok(batch);
    }
    let shape = batch.images.shape().to_vec();
    let (c, h, w) = (shape[1], shape[2], shape[3]);
    let per = c * h * w;
    let mut pixels = Vec::with_capacity(batch.images.len());
    for img in batch.images.data().chunks(per) {
        let mut out = if flags.crop_pad > 0 {
            let p = flags.crop_pad;
            let oy = rng.random_range(0..=2 * p);
            let ox = rng.random_range(0..=2 * p);
            crop(img, c, h, w, p, oy, ox)
        } else {
            img.to_vec()
        };
        if flags.flip && rng.random_bool(0.5) {
            out = hflip(&out, c, h, w);
        }
        pixels.extend(out);
    }
    Ok(Batch {
        images: Tensor::new(shape, pixels)?,
        labels: batch.labels,
        one_hot: batch.one_hot,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn image() -> Vec<f32> {
        (0..2 * 3 * 4).map(|v| v as f32).collect()
    }

    #[test]
    fn flip_twice_is_identity() {
        let img = image();
        let once = hflip(&img, 2, 3, 4);
        assert_ne!(once, img);
        assert_eq!(&once[..4], &[3.0, 2.0, 1.0, 0.0]);
        assert_eq!(hflip(&once, 2, 3, 4), img);
    }

    #[test]
    fn centered_crop_is_identity() {
        let img = image();
        assert_eq!(crop(&img, 2, 3, 4, 2, 2, 2), img);
        let shifted = crop(&img, 2, 3, 4, 1, 0, 0);
        assert_eq!(&shifted[..5], &[0.0, 0.0, 0.0, 0.0, 0.0]);
        assert_eq!(shifted[5], img[0]);
    }

    #[test]
    fn disabled_augmentation_leaves_batch_alone() {
        let images = Tensor::new(vec![1, 2, 3, 4], image()).unwrap();
        let batch = Batch::new(images, vec![1], 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let out = augment(batch.clone(), AugmentFlags::default(), &mut rng).unwrap();
        assert_eq!(out, batch);
    }
}
