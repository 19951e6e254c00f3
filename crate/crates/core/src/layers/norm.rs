//! Batch and group normalization with exact backward passes.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor4};

pub const BN_MOMENTUM: f64 = 0.1;
pub const NORM_EPS: f64 = 1e-5;

/// Per-depth affine transform shared by both norms.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct NormAffine<T> {
    pub gamma: Vec<T>,
    pub beta: Vec<T>,
}

impl<T: Scalar> NormAffine<T> {
    pub fn identity(depth: usize) -> Self {
        Self {
            gamma: vec![T::one(); depth],
            beta: vec![T::zero(); depth],
        }
    }

    pub fn zeros(depth: usize) -> Self {
        Self {
            gamma: vec![T::zero(); depth],
            beta: vec![T::zero(); depth],
        }
    }

    pub fn depth(&self) -> usize {
        self.gamma.len()
    }
}

/// Batch-norm running statistics (not trainable).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct RunningStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

impl<T: Scalar> RunningStats<T> {
    pub fn new(depth: usize) -> Self {
        Self {
            mean: vec![T::zero(); depth],
            var: vec![T::one(); depth],
        }
    }

    /// Exponential update `r <- (1 - m) r + m * batch` with the unbiased
    /// batch variance.
    pub fn update(&mut self, batch: &BatchStats<T>, momentum: T) {
        let keep = T::one() - momentum;
        for (r, &m) in self.mean.iter_mut().zip(&batch.mean) {
            *r = keep * *r + momentum * m;
        }
        for (r, &v) in self.var.iter_mut().zip(&batch.unbiased_var) {
            *r = keep * *r + momentum * v;
        }
    }
}

/// Statistics observed by a training-mode batch-norm forward.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    pub unbiased_var: Vec<T>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum NormKind {
    BatchTraining,
    BatchInference,
    Group { num_groups: usize },
}

#[derive(Debug, Clone)]
pub struct NormCache<T> {
    kind: NormKind,
    xhat: Tensor4<T>,
    inv_std: Vec<T>,
    gamma: Vec<T>,
    batch_stats: Option<BatchStats<T>>,
}

impl<T> NormCache<T> {
    pub fn batch_stats(&self) -> Option<&BatchStats<T>> {
        self.batch_stats.as_ref()
    }
}

#[derive(Debug, Clone)]
pub struct NormGrads<T> {
    pub input: Tensor4<T>,
    pub affine: NormAffine<T>,
}

impl NormKind {
    /// Index of the statistics group that element `(b, c, ., .)` belongs to.
    fn stat_index(self, b: usize, c: usize, depth: usize) -> usize {
        match self {
            NormKind::BatchTraining | NormKind::BatchInference => c,
            NormKind::Group { num_groups } => b * num_groups + c / (depth / num_groups),
        }
    }

    fn stat_count(self, batch: usize, depth: usize) -> usize {
        match self {
            NormKind::BatchTraining | NormKind::BatchInference => depth,
            NormKind::Group { num_groups } => batch * num_groups,
        }
    }
}

fn check_affine<T: Scalar>(x: &Tensor4<T>, affine: &NormAffine<T>) -> Result<()> {
    let d = x.shape()[1];
    if affine.gamma.len() != d || affine.beta.len() != d {
        return Err(Error::shape(format!(
            "norm affine of depth {} for input depth {d}",
            affine.gamma.len()
        )));
    }
    Ok(())
}

/// Per-statistics-group population mean and variance.
fn moments<T: Scalar>(x: &Tensor4<T>, kind: NormKind) -> (Vec<T>, Vec<T>, usize) {
    let [b, d, h, w] = x.shape();
    let n_stats = kind.stat_count(b, d);
    let plane = h * w;
    let mut sum = vec![T::zero(); n_stats];
    let mut count = vec![0usize; n_stats];
    for (block, chunk) in x.data().chunks_exact(plane.max(1)).enumerate() {
        let s = kind.stat_index(block / d, block % d, d);
        sum[s] += chunk.iter().copied().sum::<T>();
        count[s] += plane;
    }
    let n = count.first().copied().unwrap_or(0);
    let mean: Vec<T> = sum.iter().map(|&s| s / T::lit(n as f64)).collect();
    let mut sq = vec![T::zero(); n_stats];
    for (block, chunk) in x.data().chunks_exact(plane.max(1)).enumerate() {
        let s = kind.stat_index(block / d, block % d, d);
        let m = mean[s];
        sq[s] += chunk.iter().map(|&v| (v - m) * (v - m)).sum::<T>();
    }
    let var = sq.iter().map(|&s| s / T::lit(n as f64)).collect();
    (mean, var, n)
}

fn normalize<T: Scalar>(
    x: &Tensor4<T>,
    kind: NormKind,
    mean: &[T],
    inv_std: &[T],
    affine: &NormAffine<T>,
) -> (Tensor4<T>, Tensor4<T>) {
    let [_, d, h, w] = x.shape();
    let plane = (h * w).max(1);
    let mut xhat = x.clone();
    let mut y = x.clone();
    for (block, (xh, yo)) in xhat
        .data_mut()
        .chunks_exact_mut(plane)
        .zip(y.data_mut().chunks_exact_mut(plane))
        .enumerate()
    {
        let c = block % d;
        let s = kind.stat_index(block / d, c, d);
        for (a, o) in xh.iter_mut().zip(yo.iter_mut()) {
            *a = (*a - mean[s]) * inv_std[s];
            *o = affine.gamma[c] * *a + affine.beta[c];
        }
    }
    (y, xhat)
}

/// Batch normalization over (batch, height, width) per depth.
///
/// Training mode normalizes with batch statistics and reports them in the
/// cache (apply with [`RunningStats::update`]); inference mode uses
/// `running`.
pub fn batchnorm_forward<T: Scalar>(
    x: &Tensor4<T>,
    affine: &NormAffine<T>,
    running: &RunningStats<T>,
    training: bool,
    eps: T,
) -> Result<(Tensor4<T>, NormCache<T>)> {
    check_affine(x, affine)?;
    let d = x.shape()[1];
    if running.mean.len() != d || running.var.len() != d {
        return Err(Error::shape("running statistics depth mismatch"));
    }
    let (kind, mean, var, stats) = if training {
        let (mean, var, n) = moments(x, NormKind::BatchTraining);
        let correction = if n > 1 {
            T::lit(n as f64 / (n - 1) as f64)
        } else {
            T::one()
        };
        let stats = BatchStats {
            mean: mean.clone(),
            unbiased_var: var.iter().map(|&v| v * correction).collect(),
        };
        (NormKind::BatchTraining, mean, var, Some(stats))
    } else {
        (
            NormKind::BatchInference,
            running.mean.clone(),
            running.var.clone(),
            None,
        )
    };
    let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
    let (y, xhat) = normalize(x, kind, &mean, &inv_std, affine);
    Ok((
        y,
        NormCache {
            kind,
            xhat,
            inv_std,
            gamma: affine.gamma.clone(),
            batch_stats: stats,
        },
    ))
}

/// Group normalization: per sample, over each group of depths and the full
/// (height, width) plane.
pub fn groupnorm_forward<T: Scalar>(
    x: &Tensor4<T>,
    affine: &NormAffine<T>,
    num_groups: usize,
    eps: T,
) -> Result<(Tensor4<T>, NormCache<T>)> {
    check_affine(x, affine)?;
    let d = x.shape()[1];
    if num_groups == 0 || d % num_groups != 0 {
        return Err(Error::shape(format!(
            "depth {d} not divisible into {num_groups} groups"
        )));
    }
    let kind = NormKind::Group { num_groups };
    let (mean, var, _) = moments(x, kind);
    let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
    let (y, xhat) = normalize(x, kind, &mean, &inv_std, affine);
    Ok((
        y,
        NormCache {
            kind,
            xhat,
            inv_std,
            gamma: affine.gamma.clone(),
            batch_stats: None,
        },
    ))
}

pub fn norm_backward<T: Scalar>(cache: &NormCache<T>, grad_out: &Tensor4<T>) -> Result<NormGrads<T>> {
    let shape = cache.xhat.shape();
    grad_out.expect_shape(shape, "norm_backward grad_out")?;
    let [b, d, h, w] = shape;
    let plane = (h * w).max(1);
    let kind = cache.kind;
    let mut affine = NormAffine::zeros(d);
    let n_stats = kind.stat_count(b, d);
    let mut sum_dxhat = vec![T::zero(); n_stats];
    let mut sum_dxhat_xhat = vec![T::zero(); n_stats];
    let mut count = vec![0usize; n_stats];

    let blocks = || {
        cache
            .xhat
            .data()
            .chunks_exact(plane)
            .zip(grad_out.data().chunks_exact(plane))
            .enumerate()
    };
    for (block, (xh, g)) in blocks() {
        let c = block % d;
        let s = kind.stat_index(block / d, c, d);
        let mut dg = T::zero();
        let mut db = T::zero();
        for (&xv, &gv) in xh.iter().zip(g) {
            dg += gv * xv;
            db += gv;
        }
        affine.gamma[c] += dg;
        affine.beta[c] += db;
        sum_dxhat[s] += db * cache.gamma[c];
        sum_dxhat_xhat[s] += dg * cache.gamma[c];
        count[s] += h * w;
    }

    let mut gx = Tensor4::zeros(shape);
    for (block, dst) in gx.data_mut().chunks_exact_mut(plane).enumerate() {
        let c = block % d;
        let s = kind.stat_index(block / d, c, d);
        let gamma = cache.gamma[c];
        let inv = cache.inv_std[s];
        let off = block * plane;
        let xh = &cache.xhat.data()[off..off + plane];
        let g = &grad_out.data()[off..off + plane];
        match kind {
            NormKind::BatchInference => {
                for (o, &gv) in dst.iter_mut().zip(g) {
                    *o = gv * gamma * inv;
                }
            }
            NormKind::BatchTraining | NormKind::Group { .. } => {
                let n = T::lit(count[s] as f64);
                let m1 = sum_dxhat[s] / n;
                let m2 = sum_dxhat_xhat[s] / n;
                for ((o, &gv), &xv) in dst.iter_mut().zip(g).zip(xh) {
                    *o = inv * (gv * gamma - m1 - xv * m2);
                }
            }
        }
    }
    Ok(NormGrads { input: gx, affine })
}
