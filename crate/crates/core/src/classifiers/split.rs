use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::ClassifierError;

/// Study-level partition. Both sides are sorted by id.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Split {
    pub train: Vec<String>,
    pub val: Vec<String>,
}

impl Split {
    pub fn is_partition_of(&self, ids: &[String]) -> bool {
        let t: BTreeSet<&String> = self.train.iter().collect();
        let v: BTreeSet<&String> = self.val.iter().collect();
        let all: BTreeSet<&String> = ids.iter().collect();
        t.is_disjoint(&v) && t.union(&v).copied().collect::<BTreeSet<_>>() == all
    }
}

/// Holds out `round(fraction·N/2)` studies of each class for validation.
pub fn split_by_study(studies: &[(String, bool)], val_fraction: f64, seed: u64) -> Result<Split, ClassifierError> {
    if !(val_fraction > 0.0 && val_fraction < 1.0) {
        return Err(ClassifierError::Argument(format!("validation fraction {val_fraction} outside (0, 1)")));
    }
    let unique: BTreeSet<&String> = studies.iter().map(|s| &s.0).collect();
    if unique.len() != studies.len() {
        return Err(ClassifierError::Argument("duplicate study ids".into()));
    }
    let per_class = (val_fraction * studies.len() as f64 / 2.0).round() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut train = Vec::new();
    let mut val = Vec::new();
    for label in [true, false] {
        let mut ids: Vec<String> = studies.iter().filter(|s| s.1 == label).map(|s| s.0.clone()).collect();
        ids.sort();
        if per_class == 0 || ids.len() <= per_class {
            return Err(ClassifierError::Data(format!(
                "{} {} studies cannot supply {} validation studies and keep one for training",
                ids.len(),
                if label { "positive" } else { "negative" },
                per_class.max(1)
            )));
        }
        ids.shuffle(&mut rng);
        val.extend(ids.drain(..per_class));
        train.extend(ids);
    }
    train.sort();
    val.sort();
    Ok(Split { train, val })
}
