//! Synthetic two-class recordings with a known answer.
//!
//! Each channel carries unit-variance autoregressive noise, part shared
//! across channels and part private. A left trial adds a sinusoid at
//! `fs/8` to the first half of the channels, a right trial one at
//! `3fs/16` to the second half. Every subject scales its channels by its
//! own random gains.

use std::f64::consts::TAU;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::manifest::{Manifest, TrialEntry};
use super::recording::write_recording;
use crate::error::{Error, Result};
use crate::preprocess::{Label, Recording};

const AR_COEF: f64 = 0.9;
const SHARED: f64 = 0.6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSpec {
    pub subjects: usize,
    pub trials_per_subject: usize,
    pub channels: usize,
    pub fs: f32,
    /// Seconds per trial.
    pub duration: f64,
    /// Signal-to-noise power ratio on carrying channels; may be infinite.
    pub snr: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            subjects: 4,
            trials_per_subject: 8,
            channels: 16,
            fs: 64.0,
            duration: 20.0,
            snr: 4.0,
            seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.channels < 2 || self.subjects == 0 || self.trials_per_subject == 0 {
            return Err(Error::config("synthetic data needs >= 2 channels, subjects and trials"));
        }
        if !(self.fs > 0.0) || !(self.duration > 0.0) || !(self.snr >= 0.0) {
            return Err(Error::config("fs and duration must be positive and snr non-negative"));
        }
        if (self.duration * self.fs as f64).round() < 2.0 {
            return Err(Error::config("trials must span at least two samples"));
        }
        Ok(())
    }

    fn amplitudes(&self) -> (f64, f64) {
        if self.snr.is_infinite() {
            (2f64.sqrt(), 0.0)
        } else {
            ((2.0 * self.snr / (1.0 + self.snr)).sqrt(), (1.0 / (1.0 + self.snr)).sqrt())
        }
    }
}

fn ar_noise(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    let innovation = (1.0 - AR_COEF * AR_COEF).sqrt();
    let mut x: f64 = rng.sample(StandardNormal);
    (0..n)
        .map(|_| {
            let e: f64 = rng.sample(StandardNormal);
            x = AR_COEF * x + innovation * e;
            x
        })
        .collect()
}

fn trial_label(k: usize) -> Label {
    Label::from_index(k % 2)
}

/// Generates every recording in memory, subject-major.
pub fn synth_recordings(spec: &SynthSpec) -> Result<Vec<Recording>> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let c = spec.channels;
    let s = (spec.duration * spec.fs as f64).round() as usize;
    let (sig_amp, noise_amp) = spec.amplitudes();
    let private = (1.0 - SHARED * SHARED).sqrt();
    let mut out = Vec::with_capacity(spec.subjects * spec.trials_per_subject);
    for subj in 0..spec.subjects {
        let gains: Vec<f64> = (0..c).map(|_| rng.random_range(0.5..2.0)).collect();
        for k in 0..spec.trials_per_subject {
            let label = trial_label(k);
            let (carriers, freq) = match label {
                Label::Left => (0..c / 2, spec.fs as f64 / 8.0),
                Label::Right => (c / 2..c, 3.0 * spec.fs as f64 / 16.0),
            };
            let phase = rng.random_range(0.0..TAU);
            let shared = ar_noise(&mut rng, s);
            let mut samples = Vec::with_capacity(c * s);
            for ch in 0..c {
                let own = ar_noise(&mut rng, s);
                let carries = carriers.contains(&ch);
                for t in 0..s {
                    let noise = SHARED * shared[t] + private * own[t];
                    let signal = if carries {
                        (TAU * freq * t as f64 / spec.fs as f64 + phase).sin()
                    } else {
                        0.0
                    };
                    samples.push((gains[ch] * (sig_amp * signal + noise_amp * noise)) as f32);
                }
            }
            out.push(Recording::new(
                format!("s{:02}", subj + 1),
                format!("t{:02}", k + 1),
                spec.fs,
                c,
                samples,
                label,
            )?);
        }
    }
    Ok(out)
}

/// Writes the recordings and a `manifest.toml` into `dir`; returns the
/// manifest path.
pub fn gen_synthetic(spec: &SynthSpec, dir: &Path) -> Result<PathBuf> {
    let recordings = synth_recordings(spec)?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut trials = Vec::with_capacity(recordings.len());
    for rec in &recordings {
        let file = format!("{}_{}.eegw", rec.subject_id, rec.trial_id);
        write_recording(rec, &dir.join(&file))?;
        trials.push(TrialEntry {
            subject: rec.subject_id.clone(),
            trial: rec.trial_id.clone(),
            path: PathBuf::from(file),
            label: rec.label,
        });
    }
    let manifest = Manifest {
        name: "synthetic".into(),
        fs: spec.fs,
        channels: spec.channels,
        trials,
        base_dir: dir.to_path_buf(),
    };
    let path = dir.join("manifest.toml");
    manifest.save(&path)?;
    Ok(path)
}
