//! Dataset manifest: which recording files exist, whose they are and which
//! side the listener attended.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::recording::{read_header, read_recording};
use crate::error::{Error, Result};
use crate::preprocess::{Label, Recording};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrialEntry {
    pub subject: String,
    pub trial: String,
    /// Relative paths are resolved against the manifest's directory.
    pub path: PathBuf,
    pub label: Label,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub name: String,
    pub fs: f32,
    pub channels: usize,
    pub trials: Vec<TrialEntry>,
    #[serde(skip)]
    pub base_dir: PathBuf,
}

impl Manifest {
    pub fn parse(text: &str, base_dir: &Path) -> Result<Self> {
        let mut m: Manifest = toml::from_str(text).map_err(|e| Error::config(format!("manifest: {e}")))?;
        m.base_dir = base_dir.to_path_buf();
        Ok(m)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::parse(&text, base).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = toml::to_string_pretty(self).map_err(|e| Error::Serde(e.to_string()))?;
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn resolve(&self, entry: &TrialEntry) -> PathBuf {
        if entry.path.is_absolute() {
            entry.path.clone()
        } else {
            self.base_dir.join(&entry.path)
        }
    }

    pub fn subjects(&self) -> Vec<String> {
        let set: BTreeSet<&str> = self.trials.iter().map(|t| t.subject.as_str()).collect();
        set.into_iter().map(String::from).collect()
    }

    /// Checks entries and every file header against the declared channel
    /// count and sample rate, without reading payloads.
    pub fn validate(&self) -> Result<()> {
        if !(self.fs > 0.0) || self.channels == 0 {
            return Err(Error::config(format!(
                "manifest {}: fs and channels must be positive",
                self.name
            )));
        }
        if self.trials.is_empty() {
            return Err(Error::config(format!("manifest {} lists no trials", self.name)));
        }
        let mut ids = BTreeSet::new();
        for t in &self.trials {
            if !ids.insert((&t.subject, &t.trial)) {
                return Err(Error::config(format!("duplicate trial {}/{}", t.subject, t.trial)));
            }
            let path = self.resolve(t);
            let h = read_header(&path)?;
            if h.channels != self.channels || h.fs != self.fs {
                return Err(Error::Data(format!(
                    "{}: header says {} channels at {} Hz, manifest says {} at {} Hz",
                    path.display(),
                    h.channels,
                    h.fs,
                    self.channels,
                    self.fs
                )));
            }
        }
        Ok(())
    }

    /// Validates, then reads every recording in manifest order.
    pub fn load_recordings(&self) -> Result<Vec<Recording>> {
        self.validate()?;
        self.trials
            .iter()
            .map(|t| read_recording(&self.resolve(t))?.into_recording(&t.subject, &t.trial, t.label))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::io::recording::write_recording;

    fn write(dir: &Path, name: &str, channels: usize, fs: f32) {
        let rec = Recording::new("s", "t", fs, channels, vec![0.5; channels * 20], Label::Left).unwrap();
        write_recording(&rec, &dir.join(name)).unwrap();
    }

    const TEXT: &str = r#"
name = "demo"
fs = 64.0
channels = 4

[[trials]]
subject = "s1"
trial = "t1"
path = "a.eegw"
label = "left"

[[trials]]
subject = "s2"
trial = "t1"
path = "b.eegw"
label = "right"
"#;

    #[test]
    fn loads_and_checks_headers() {
        let dir = tempfile::tempdir().unwrap();
        write(dir.path(), "a.eegw", 4, 64.0);
        write(dir.path(), "b.eegw", 4, 64.0);
        let path = dir.path().join("manifest.toml");
        fs::write(&path, TEXT).unwrap();
        let m = Manifest::load(&path).unwrap();
        assert_eq!(m.subjects(), vec!["s1", "s2"]);
        let recs = m.load_recordings().unwrap();
        assert_eq!(recs[1].label, Label::Right);
        assert_eq!(recs[0].n_samples(), 20);

        write(dir.path(), "b.eegw", 3, 64.0);
        assert!(matches!(m.validate(), Err(Error::Data(_))));
    }

    #[test]
    fn rejects_bad_labels_and_missing_files() {
        let dir = tempfile::tempdir().unwrap();
        let bad = TEXT.replace("\"right\"", "\"up\"");
        assert!(matches!(Manifest::parse(&bad, dir.path()), Err(Error::Config(_))));
        let m = Manifest::parse(TEXT, dir.path()).unwrap();
        assert!(matches!(m.validate(), Err(Error::Io { .. })));
    }
}
