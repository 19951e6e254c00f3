//! Recording normalization, decision-window extraction and Euclidean
//! alignment (whitening each subject by the inverse square root of its mean
//! per-window covariance).

use std::collections::BTreeMap;
use std::fmt;

use log::warn;
use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const STD_FLOOR: f64 = 1e-8;
pub const EIGEN_FLOOR: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Left,
    Right,
}

impl Label {
    pub fn index(self) -> usize {
        match self {
            Label::Left => 0,
            Label::Right => 1,
        }
    }

    pub fn from_index(i: usize) -> Self {
        if i == 0 {
            Label::Left
        } else {
            Label::Right
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Label::Left => "left",
            Label::Right => "right",
        })
    }
}

/// One trial: `channels x n_samples` values stored channel-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Recording {
    pub subject_id: String,
    pub trial_id: String,
    pub fs: f32,
    pub channels: usize,
    pub samples: Vec<f32>,
    pub label: Label,
}

impl Recording {
    pub fn new(
        subject_id: impl Into<String>,
        trial_id: impl Into<String>,
        fs: f32,
        channels: usize,
        samples: Vec<f32>,
        label: Label,
    ) -> Result<Self> {
        if !(fs > 0.0) || channels == 0 || samples.is_empty() || samples.len() % channels != 0 {
            return Err(Error::Data(format!(
                "invalid recording: fs={fs}, channels={channels}, {} values",
                samples.len()
            )));
        }
        Ok(Self {
            subject_id: subject_id.into(),
            trial_id: trial_id.into(),
            fs,
            channels,
            samples,
            label,
        })
    }

    pub fn n_samples(&self) -> usize {
        self.samples.len() / self.channels
    }

    pub fn channel(&self, c: usize) -> &[f32] {
        let s = self.n_samples();
        &self.samples[c * s..(c + 1) * s]
    }
}

/// A labeled `channels x len` segment of a recording.
#[derive(Debug, Clone, PartialEq)]
pub struct DecisionWindow {
    pub data: Vec<f32>,
    pub channels: usize,
    pub len: usize,
    pub label: Label,
    pub subject_id: String,
    pub trial_id: String,
    pub start_sample: usize,
}

impl DecisionWindow {
    pub fn row(&self, c: usize) -> &[f32] {
        &self.data[c * self.len..(c + 1) * self.len]
    }

    /// Population covariance `X X^T / T`.
    pub fn covariance(&self) -> DMatrix<f64> {
        let x = DMatrix::from_fn(self.channels, self.len, |c, t| self.data[c * self.len + t] as f64);
        (&x * x.transpose()) / self.len as f64
    }
}

/// Per-channel standardization to zero mean and unit population std.
/// Constant channels map to zeros.
pub fn zscore_normalize(rec: &Recording) -> Result<Recording> {
    let s = rec.n_samples();
    if s < 2 {
        return Err(Error::Data(format!(
            "recording {}/{} has {s} samples; need at least 2",
            rec.subject_id, rec.trial_id
        )));
    }
    let mut out = rec.clone();
    for c in 0..rec.channels {
        let xs = rec.channel(c);
        let mean = xs.iter().map(|&v| v as f64).sum::<f64>() / s as f64;
        let var = xs.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / s as f64;
        let std = var.sqrt();
        if std < STD_FLOOR {
            warn!(
                "recording {}/{} channel {c} is constant; normalized to zeros",
                rec.subject_id, rec.trial_id
            );
        }
        let std = std.max(STD_FLOOR);
        for (dst, &v) in out.samples[c * s..(c + 1) * s].iter_mut().zip(xs) {
            *dst = ((v as f64 - mean) / std) as f32;
        }
    }
    Ok(out)
}

/// Windows starting at `0, stride, 2*stride, ...` that fit entirely in the
/// recording; the remainder is dropped.
pub fn make_windows(rec: &Recording, win_len: usize, stride: usize) -> Result<Vec<DecisionWindow>> {
    if win_len == 0 || stride == 0 {
        return Err(Error::config("window length and stride must be positive"));
    }
    let s = rec.n_samples();
    if win_len > s {
        warn!(
            "recording {}/{} has {s} samples, shorter than the {win_len}-sample window",
            rec.subject_id, rec.trial_id
        );
        return Ok(Vec::new());
    }
    let mut windows = Vec::with_capacity((s - win_len) / stride + 1);
    let mut start = 0;
    while start + win_len <= s {
        let mut data = Vec::with_capacity(rec.channels * win_len);
        for c in 0..rec.channels {
            data.extend_from_slice(&rec.channel(c)[start..start + win_len]);
        }
        windows.push(DecisionWindow {
            data,
            channels: rec.channels,
            len: win_len,
            label: rec.label,
            subject_id: rec.subject_id.clone(),
            trial_id: rec.trial_id.clone(),
            start_sample: start,
        });
        start += stride;
    }
    Ok(windows)
}

#[derive(Debug, Clone, PartialEq)]
pub struct AlignmentMatrix {
    pub scope_id: String,
    pub matrix: DMatrix<f64>,
    /// Eigenvalues of the mean covariance that hit the floor.
    pub floored: usize,
}

impl AlignmentMatrix {
    pub fn identity(scope_id: impl Into<String>, channels: usize) -> Self {
        Self {
            scope_id: scope_id.into(),
            matrix: DMatrix::identity(channels, channels),
            floored: 0,
        }
    }

    pub fn channels(&self) -> usize {
        self.matrix.nrows()
    }
}

/// Mean of per-window covariances.
pub fn mean_covariance(windows: &[&DecisionWindow]) -> Result<DMatrix<f64>> {
    let first = windows
        .first()
        .ok_or_else(|| Error::Data("alignment needs at least one window".into()))?;
    let c = first.channels;
    let mut acc = DMatrix::zeros(c, c);
    for w in windows {
        if w.channels != c {
            return Err(Error::shape(format!(
                "window with {} channels in a {c}-channel scope",
                w.channels
            )));
        }
        if w.data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Data(format!(
                "non-finite sample in window {}/{}@{}",
                w.subject_id, w.trial_id, w.start_sample
            )));
        }
        acc += w.covariance();
    }
    Ok(acc / windows.len() as f64)
}

/// `R^{-1/2}` of the mean per-window covariance via a symmetric
/// eigendecomposition.
pub fn compute_alignment(scope_id: &str, windows: &[&DecisionWindow]) -> Result<AlignmentMatrix> {
    let mean = mean_covariance(windows)?;
    let sym = (&mean + mean.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let mut floored = 0;
    let inv_sqrt = eig.eigenvalues.map(|l| {
        if l < EIGEN_FLOOR {
            floored += 1;
            1.0 / EIGEN_FLOOR.sqrt()
        } else {
            1.0 / l.sqrt()
        }
    });
    if floored > 0 {
        warn!("scope {scope_id}: mean covariance is rank deficient; {floored} eigenvalue(s) floored");
    }
    let v = &eig.eigenvectors;
    let m = v * DMatrix::from_diagonal(&inv_sqrt) * v.transpose();
    let matrix = (&m + m.transpose()) * 0.5;
    Ok(AlignmentMatrix {
        scope_id: scope_id.to_string(),
        matrix,
        floored,
    })
}

pub fn apply_alignment(window: &DecisionWindow, alignment: &AlignmentMatrix) -> Result<DecisionWindow> {
    let c = window.channels;
    if alignment.channels() != c {
        return Err(Error::shape(format!(
            "{}-channel alignment applied to a {c}-channel window",
            alignment.channels()
        )));
    }
    let t = window.len;
    let mut out = window.clone();
    for i in 0..c {
        let dst = &mut out.data[i * t..(i + 1) * t];
        let mut acc = vec![0.0f64; t];
        for k in 0..c {
            let m = alignment.matrix[(i, k)];
            if m == 0.0 {
                continue;
            }
            for (a, &x) in acc.iter_mut().zip(window.row(k)) {
                *a += m * x as f64;
            }
        }
        for (d, a) in dst.iter_mut().zip(acc) {
            *d = a as f32;
        }
    }
    Ok(out)
}

/// Aligns every subject's windows in place. Each subject's matrix is fit
/// on the windows selected by `fit`, or on all of that subject's windows
/// when none are selected (alignment needs no labels).
pub fn align_per_subject(
    windows: &mut [DecisionWindow],
    fit: impl Fn(usize) -> bool,
) -> Result<BTreeMap<String, AlignmentMatrix>> {
    let mut by_subject: BTreeMap<String, Vec<usize>> = BTreeMap::new();
    for (i, w) in windows.iter().enumerate() {
        by_subject.entry(w.subject_id.clone()).or_default().push(i);
    }
    let mut matrices = BTreeMap::new();
    for (subject, idx) in by_subject {
        let mut chosen: Vec<&DecisionWindow> = idx.iter().filter(|&&i| fit(i)).map(|&i| &windows[i]).collect();
        if chosen.is_empty() {
            chosen = idx.iter().map(|&i| &windows[i]).collect();
        }
        let m = compute_alignment(&subject, &chosen)?;
        for &i in &idx {
            windows[i] = apply_alignment(&windows[i], &m)?;
        }
        matrices.insert(subject, m);
    }
    Ok(matrices)
}
