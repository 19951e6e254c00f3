use std::collections::BTreeSet;
use std::fmt;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Protocol {
    SubjectDependent,
    Loso,
}

impl fmt::Display for Protocol {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Protocol::SubjectDependent => "subject_dependent",
            Protocol::Loso => "loso",
        })
    }
}

/// Window indices (into the caller's dataset) assigned to each role.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitPlan {
    pub mode: Protocol,
    pub fold_id: String,
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

impl SplitPlan {
    /// Verifies the three lists are disjoint and together cover exactly
    /// `population`.
    pub fn check(&self, population: &[usize]) -> Result<()> {
        let mut seen = BTreeSet::new();
        for &i in self.train.iter().chain(&self.val).chain(&self.test) {
            if !seen.insert(i) {
                return Err(Error::config(format!("fold {}: window {i} assigned twice", self.fold_id)));
            }
        }
        let expected: BTreeSet<usize> = population.iter().copied().collect();
        if seen != expected {
            return Err(Error::config(format!(
                "fold {}: plan covers {} windows, population has {}",
                self.fold_id,
                seen.len(),
                expected.len()
            )));
        }
        Ok(())
    }
}

/// 8:1:1 split of one subject's windows. Validation and test sizes are
/// floored, the remainder goes to training.
pub fn split_subject_dependent(indices: &[usize], seed: u64, fold_id: &str) -> Result<SplitPlan> {
    let n = indices.len();
    if n < 10 {
        return Err(Error::config(format!(
            "subject {fold_id} has {n} windows; an 8:1:1 split needs at least 10"
        )));
    }
    let mut order = indices.to_vec();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let k = n / 10;
    Ok(SplitPlan {
        mode: Protocol::SubjectDependent,
        fold_id: fold_id.to_string(),
        val: order[..k].to_vec(),
        test: order[k..2 * k].to_vec(),
        train: order[2 * k..].to_vec(),
    })
}

/// Leave-one-subject-out: all of `test_subject`'s windows are the test set,
/// and `floor(val_fraction * rest)` shuffled windows of the other subjects
/// are held out for early stopping. `subjects[i]` is window `i`'s subject.
pub fn split_loso<S: AsRef<str>>(
    subjects: &[S],
    test_subject: &str,
    seed: u64,
    val_fraction: f64,
) -> Result<SplitPlan> {
    if !(0.0..1.0).contains(&val_fraction) {
        return Err(Error::config(format!("val_fraction {val_fraction} outside [0, 1)")));
    }
    let distinct: BTreeSet<&str> = subjects.iter().map(|s| s.as_ref()).collect();
    if !distinct.contains(test_subject) {
        return Err(Error::config(format!("unknown subject {test_subject:?}")));
    }
    if distinct.len() < 2 {
        return Err(Error::config("leave-one-subject-out needs at least two subjects"));
    }
    let (test, mut rest): (Vec<usize>, Vec<usize>) =
        (0..subjects.len()).partition(|&i| subjects[i].as_ref() == test_subject);
    rest.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let k = (rest.len() as f64 * val_fraction).floor() as usize;
    let train = rest.split_off(k);
    Ok(SplitPlan {
        mode: Protocol::Loso,
        fold_id: test_subject.to_string(),
        train,
        val: rest,
        test,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn eight_one_one_sizes() {
        let idx: Vec<usize> = (0..100).collect();
        let p = split_subject_dependent(&idx, 1, "s").unwrap();
        assert_eq!((p.train.len(), p.val.len(), p.test.len()), (80, 10, 10));
        let idx: Vec<usize> = (0..101).collect();
        let p = split_subject_dependent(&idx, 1, "s").unwrap();
        assert_eq!((p.train.len(), p.val.len(), p.test.len()), (81, 10, 10));
        assert_eq!(p, split_subject_dependent(&idx, 1, "s").unwrap());
        assert!(split_subject_dependent(&idx[..9], 1, "s").is_err());
    }

    #[test]
    fn loso_edge_cases() {
        let subjects = ["a", "a", "b", "b", "b"];
        let p = split_loso(&subjects, "a", 0, 0.0).unwrap();
        assert!(p.val.is_empty());
        assert_eq!(p.test, vec![0, 1]);
        assert!(split_loso(&subjects, "z", 0, 0.1).is_err());
        assert!(split_loso(&["a", "a"], "a", 0, 0.1).is_err());
    }

    proptest! {
        #[test]
        fn plans_are_partitions(n in 10usize..300, seed in any::<u64>(), n_subj in 2usize..7, frac in 0.0f64..0.5) {
            let idx: Vec<usize> = (0..n).map(|i| i * 3 + 1).collect();
            let p = split_subject_dependent(&idx, seed, "s").unwrap();
            prop_assert!(p.check(&idx).is_ok());

            let subjects: Vec<String> = (0..n).map(|i| format!("s{}", (i * 7 + seed as usize) % n_subj)).collect();
            let all: Vec<usize> = (0..n).collect();
            for test in subjects.iter().collect::<BTreeSet<_>>() {
                let p = split_loso(&subjects, test, seed, frac).unwrap();
                prop_assert!(p.check(&all).is_ok());
                prop_assert!(p.test.iter().all(|&i| &subjects[i] == test));
                prop_assert!(p.train.iter().chain(&p.val).all(|&i| &subjects[i] != test));
            }
        }
    }
}
