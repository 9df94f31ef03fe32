use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::exec::map_ordered;
use crate::model::pyramid_batch;
use crate::numerics::linalg::log_sum_exp;
use crate::numerics::Tensor;
use crate::vision::build_pyramid;

/// Samples per evaluation shard.
pub const EVAL_SHARD: usize = 64;

/// Top-1 and top-5 error, in percent.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TopK {
    pub top1: f64,
    pub top5: f64,
}

/// Number of rows of `logits` (`B×C`) whose label is not among the `k`
/// largest scores. Ties rank the lower class index first.
pub fn topk_misses(logits: &Tensor, labels: &[usize], k: usize) -> Result<usize> {
    let [b, c] = logits.shape() else {
        return Err(Error::shape(
            "topk_misses",
            format!("expected B×C scores, got rank {}", logits.rank()),
        ));
    };
    if *b != labels.len() {
        return Err(Error::dims("topk_misses", logits.shape(), &[labels.len()]));
    }
    let mut misses = 0;
    for (row, &label) in logits.data().chunks_exact(*c).zip(labels) {
        if label >= *c {
            return Err(Error::Index {
                what: "label",
                index: label,
                bound: *c,
            });
        }
        let target = row[label];
        let rank = row
            .iter()
            .enumerate()
            .filter(|&(j, &v)| v > target || (v == target && j < label))
            .count();
        if rank >= k {
            misses += 1;
        }
    }
    Ok(misses)
}

/// Top-1/top-5 error of a score matrix. With fewer than five classes the
/// top-5 error is over all classes, hence zero.
pub fn topk_error(logits: &Tensor, labels: &[usize]) -> Result<TopK> {
    let n = labels.len().max(1) as f64;
    Ok(TopK {
        top1: 100.0 * topk_misses(logits, labels, 1)? as f64 / n,
        top5: 100.0 * topk_misses(logits, labels, 5)? as f64 / n,
    })
}

/// One shard of normalized, batched pyramid levels.
#[derive(Clone, Debug)]
pub struct PreparedShard {
    pub levels: Vec<Tensor>,
    pub labels: Vec<usize>,
}

/// A dataset resized to a fixed pyramid once, for repeated evaluation.
#[derive(Clone, Debug)]
pub struct PreparedSet {
    scales: Vec<(usize, usize)>,
    shards: Vec<PreparedShard>,
    len: usize,
}

impl PreparedSet {
    pub fn new(ds: &Dataset, scales: &[(usize, usize)]) -> Result<Self> {
        let chunks: Vec<_> = ds.samples().chunks(EVAL_SHARD).collect();
        let shards = map_ordered(&chunks, |chunk| -> Result<PreparedShard> {
            let pyramids = chunk
                .iter()
                .map(|s| build_pyramid(&s.image, scales))
                .collect::<Result<Vec<_>>>()?;
            let refs: Vec<_> = pyramids.iter().collect();
            Ok(PreparedShard {
                levels: pyramid_batch(&refs)?,
                labels: chunk.iter().map(|s| s.label).collect(),
            })
        })
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            scales: scales.to_vec(),
            shards,
            len: ds.len(),
        })
    }

    pub fn scales(&self) -> &[(usize, usize)] {
        &self.scales
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn shards(&self) -> &[PreparedShard] {
        &self.shards
    }

    fn pick(&self, shard: &PreparedShard, levels: &[usize]) -> Result<Vec<Tensor>> {
        levels
            .iter()
            .map(|&l| {
                shard.levels.get(l).cloned().ok_or(Error::Index {
                    what: "pyramid level",
                    index: l,
                    bound: self.scales.len(),
                })
            })
            .collect()
    }

    /// Errors of `predict` applied to the chosen pyramid levels. Shards run
    /// in parallel; miss counts are summed, so the result is thread-count
    /// invariant.
    pub fn evaluate<F>(&self, levels: &[usize], predict: F) -> Result<TopK>
    where
        F: Fn(&[Tensor]) -> Result<Tensor> + Sync + Send,
    {
        let counts = map_ordered(&self.shards, |shard| -> Result<(usize, usize)> {
            let scores = predict(&self.pick(shard, levels)?)?;
            Ok((
                topk_misses(&scores, &shard.labels, 1)?,
                topk_misses(&scores, &shard.labels, 5)?,
            ))
        });
        let (mut m1, mut m5) = (0, 0);
        for c in counts {
            let (a, b) = c?;
            m1 += a;
            m5 += b;
        }
        let n = self.len.max(1) as f64;
        Ok(TopK {
            top1: 100.0 * m1 as f64 / n,
            top5: 100.0 * m5 as f64 / n,
        })
    }

    /// Mean cross-entropy of the logits produced by `predict`.
    pub fn mean_loss<F>(&self, levels: &[usize], predict: F) -> Result<f64>
    where
        F: Fn(&[Tensor]) -> Result<Tensor> + Sync + Send,
    {
        let sums = map_ordered(&self.shards, |shard| -> Result<f64> {
            let logits = predict(&self.pick(shard, levels)?)?;
            let c = logits.shape()[1];
            Ok(logits
                .data()
                .chunks_exact(c)
                .zip(&shard.labels)
                .map(|(row, &y)| log_sum_exp(row) - row[y])
                .sum())
        });
        let mut total = 0.0;
        for s in sums {
            total += s?;
        }
        Ok(total / self.len.max(1) as f64)
    }
}
