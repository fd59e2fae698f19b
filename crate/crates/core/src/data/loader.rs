use std::sync::mpsc::{sync_channel, Receiver};
use std::sync::Arc;
use std::thread::{self, JoinHandle};

use rand::seq::SliceRandom;

use super::{augment, AugmentFlags, Batch, Dataset};
use crate::error::Result;
use crate::rng::stream;

const ORDER_TAG: u64 = 0x6f72_6465;
const AUGMENT_TAG: u64 = 0x6175_676d;

/// Permutation of `0..n` that depends only on `(seed, epoch)`.
pub fn epoch_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut stream(seed, &[ORDER_TAG, epoch as u64]));
    order
}

/// Batches of one epoch. Training iteration shuffles, augments and drops a
/// trailing partial batch; evaluation iteration keeps dataset order and
/// every example.
pub struct Batches<D> {
    dataset: D,
    order: Vec<usize>,
    batch_size: usize,
    augment: AugmentFlags,
    seed: u64,
    epoch: usize,
    next: usize,
    drop_last: bool,
}

impl<D: AsRef<Dataset>> Batches<D> {
    pub fn train(dataset: D, batch_size: usize, augment: AugmentFlags, seed: u64, epoch: usize) -> Self {
        let n = dataset.as_ref().len();
        Batches {
            order: epoch_order(n, seed, epoch),
            dataset,
            batch_size: batch_size.max(1),
            augment,
            seed,
            epoch,
            next: 0,
            drop_last: n >= batch_size,
        }
    }

    pub fn eval(dataset: D, batch_size: usize) -> Self {
        let n = dataset.as_ref().len();
        Batches {
            order: (0..n).collect(),
            dataset,
            batch_size: batch_size.max(1),
            augment: AugmentFlags::default(),
            seed: 0,
            epoch: 0,
            next: 0,
            drop_last: false,
        }
    }

    /// Number of batches this iterator yields in total.
    pub fn count_batches(&self) -> usize {
        let n = self.order.len();
        if self.drop_last {
            n / self.batch_size
        } else {
            n.div_ceil(self.batch_size)
        }
    }

    fn make(&self, index: usize) -> Result<Batch> {
        let start = index * self.batch_size;
        let end = (start + self.batch_size).min(self.order.len());
        let batch = self.dataset.as_ref().batch(&self.order[start..end])?;
        let mut rng = stream(self.seed, &[AUGMENT_TAG, self.epoch as u64, index as u64]);
        augment(batch, self.augment, &mut rng)
    }
}

impl<D: AsRef<Dataset>> Iterator for Batches<D> {
    type Item = Result<Batch>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.next >= self.count_batches() {
            return None;
        }
        let out = self.make(self.next);
        self.next += 1;
        Some(out)
    }
}

/// Assembles training batches on a worker thread, at most `depth` ahead.
/// Yields the same sequence as [`Batches::train`].
pub struct Prefetch {
    rx: Receiver<Result<Batch>>,
    worker: Option<JoinHandle<()>>,
}

impl Prefetch {
    pub fn spawn(
        dataset: Arc<Dataset>,
        batch_size: usize,
        augment: AugmentFlags,
        seed: u64,
        epoch: usize,
        depth: usize,
    ) -> Self {
        let (tx, rx) = sync_channel(depth.max(1));
        let worker = thread::spawn(move || {
            for batch in Batches::train(dataset, batch_size, augment, seed, epoch) {
                if tx.send(batch).is_err() {
                    break;
                }
            }
        });
        Prefetch {
            rx,
            worker: Some(worker),
        }
    }
}

impl Iterator for Prefetch {
    type Item = Result<Batch>;

    fn next(&mut self) -> Option<Self::Item> {
        self.rx.recv().ok()
    }
}

impl Drop for Prefetch {
    fn drop(&mut self) {
        // Unblock a worker waiting on a full channel before joining it.
        let (_, dead) = sync_channel(0);
        drop(std::mem::replace(&mut self.rx, dead));
        if let Some(w) = self.worker.take() {
            let _ = w.join();
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synth_generate, Split, SynthSpec};

    fn dataset() -> Arc<Dataset> {
        let spec = SynthSpec {
            train_samples: 37,
            eval_samples: 10,
            channels: 1,
            size: 4,
            ..Default::default()
        };
        Arc::new(synth_generate(&spec, 5, 1, Split::Train).unwrap())
    }

    #[test]
    fn order_is_a_seeded_permutation() {
        let a = epoch_order(50, 3, 2);
        let mut sorted = a.clone();
        sorted.sort();
        assert_eq!(sorted, (0..50).collect::<Vec<_>>());
        assert_eq!(a, epoch_order(50, 3, 2));
        assert_ne!(a, epoch_order(50, 3, 3));
    }

    #[test]
    fn train_drops_partial_eval_keeps_all() {
        let ds = dataset();
        let flags = AugmentFlags { flip: true, crop_pad: 1 };
        let train: Vec<_> = Batches::train(ds.clone(), 8, flags, 0, 0).map(|b| b.unwrap()).collect();
        assert_eq!(train.len(), 4);
        assert!(train.iter().all(|b| b.len() == 8));
        let eval: Vec<_> = Batches::eval(ds, 8).map(|b| b.unwrap()).collect();
        assert_eq!(eval.iter().map(Batch::len).sum::<usize>(), 37);
    }

    #[test]
    fn prefetch_matches_direct_iteration() {
        let ds = dataset();
        let flags = AugmentFlags { flip: true, crop_pad: 1 };
        let direct: Vec<_> = Batches::train(ds.clone(), 5, flags, 9, 4).map(|b| b.unwrap()).collect();
        let fetched: Vec<_> = Prefetch::spawn(ds.clone(), 5, flags, 9, 4, 2).map(|b| b.unwrap()).collect();
        assert_eq!(direct, fetched);
        let mut early = Prefetch::spawn(ds, 5, flags, 9, 4, 1);
        assert!(early.next().is_some());
        drop(early);
    }
}
