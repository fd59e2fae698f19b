use super::metrics::Accuracy;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Rank of the true class among a row of logits, ties broken toward the
/// lower class index (the order a stable sort would give).
pub fn label_rank(row: &[f32], label: usize) -> usize {
    let z = row[label];
    row.iter()
        .enumerate()
        .filter(|&(j, &v)| v > z || (v == z && j < label))
        .count()
}

/// Counts of top-1 and top-5 hits over an `N×C` logit matrix. With fewer
/// than five classes the second count uses all of them.
pub fn topk_hits(logits: &Tensor, labels: &[usize]) -> Result<(usize, usize)> {
    let s = logits.shape();
    if s.len() != 2 || s[0] != labels.len() {
        return Err(Error::contract(format!(
            "{} labels for logits of shape {s:?}",
            labels.len()
        )));
    }
    let k = 5.min(s[1]);
    let mut hits = (0, 0);
    for (i, &y) in labels.iter().enumerate() {
        let r = label_rank(logits.row(i), y);
        hits.0 += (r == 0) as usize;
        hits.1 += (r < k) as usize;
    }
    Ok(hits)
}

/// Accumulates hits over evaluation batches.
#[derive(Clone, Copy, Debug, Default)]
pub struct AccuracyMeter {
    top1: usize,
    top5: usize,
    n: usize,
}

impl AccuracyMeter {
    pub fn add(&mut self, logits: &Tensor, labels: &[usize]) -> Result<()> {
        let (a, b) = topk_hits(logits, labels)?;
        self.top1 += a;
        self.top5 += b;
        self.n += labels.len();
        Ok(())
    }

    pub fn accuracy(&self) -> Accuracy {
        let n = self.n.max(1) as f64;
        Accuracy {
            top1: self.top1 as f64 / n,
            top5: self.top5 as f64 / n,
        }
    }
}
