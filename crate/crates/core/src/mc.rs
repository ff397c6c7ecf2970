//! Replicate-indexed Monte Carlo plumbing.
//!
//! Replicate `i` always draws from stream `i` of a ChaCha generator keyed by
//! the run seed, and results are reduced in index order, so estimates do not
//! depend on how rayon schedules the work.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};

pub fn replicate_rng(seed: u64, replicate: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(replicate);
    rng
}

/// Derives an independent seed for a labelled sub-experiment.
pub fn derive_seed(seed: u64, tag: u64) -> u64 {
    splitmix64(seed ^ splitmix64(tag.wrapping_add(0x5851_f42d_4c95_7f2d)))
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Runs `f(0), ..., f(count - 1)` on the current rayon pool and returns the
/// results in index order.
pub fn par_map<T, F>(count: usize, f: F) -> Result<Vec<T>>
where
    T: Send,
    F: Fn(usize) -> Result<T> + Sync + Send,
{
    (0..count).into_par_iter().map(f).collect()
}

/// Sample mean of equal-length vectors and the covariance matrix of that mean.
#[derive(Debug, Clone)]
pub struct MeanEstimate {
    pub mean: DVector<f64>,
    /// `Cov(mean) = S / count` with `S` the unbiased sample covariance.
    pub mean_covariance: DMatrix<f64>,
    pub count: usize,
}

impl MeanEstimate {
    pub fn from_samples(samples: &[Vec<f64>]) -> Result<Self> {
        let count = samples.len();
        if count < 2 {
            return Err(Error::InvalidArgument(format!(
                "at least 2 samples are needed for a standard error, got {count}"
            )));
        }
        let d = samples[0].len();
        let mut mean = DVector::zeros(d);
        for s in samples {
            for (j, v) in s.iter().enumerate() {
                mean[j] += v;
            }
        }
        mean /= count as f64;
        let mut cov = DMatrix::zeros(d, d);
        let mut centered = DVector::zeros(d);
        for s in samples {
            for j in 0..d {
                centered[j] = s[j] - mean[j];
            }
            cov.ger(1.0, &centered, &centered, 1.0);
        }
        cov /= (count - 1) as f64 * count as f64;
        Ok(Self {
            mean,
            mean_covariance: cov,
            count,
        })
    }

    pub fn stderr(&self) -> DVector<f64> {
        self.mean_covariance.diagonal().map(|v| v.max(0.0).sqrt())
    }
}

/// Batch means of a serially correlated sequence, for a stderr that accounts
/// for the autocorrelation.
pub fn batch_means(series: &[Vec<f64>], batches: usize) -> Result<Vec<Vec<f64>>> {
    if batches < 2 || series.len() < batches {
        return Err(Error::InvalidArgument(format!(
            "cannot split {} terms into {batches} batches",
            series.len()
        )));
    }
    let d = series[0].len();
    let size = series.len() / batches;
    Ok((0..batches)
        .map(|b| {
            let chunk = &series[b * size..(b + 1) * size];
            let mut acc = vec![0.0; d];
            for s in chunk {
                for (a, v) in acc.iter_mut().zip(s) {
                    *a += v;
                }
            }
            acc.iter_mut().for_each(|a| *a /= size as f64);
            acc
        })
        .collect())
}
