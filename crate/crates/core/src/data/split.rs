//! Seeded train/val/test partitioning and the few/many target-count split.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Records with at most this many targets belong to the "few" split.
pub const FEW_MAX_TARGETS: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TargetSplit {
    Few,
    Many,
}

impl TargetSplit {
    pub fn of(targets: usize) -> Self {
        if targets <= FEW_MAX_TARGETS {
            TargetSplit::Few
        } else {
            TargetSplit::Many
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            TargetSplit::Few => "few",
            TargetSplit::Many => "many",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Partition<T> {
    pub train: Vec<T>,
    pub val: Vec<T>,
    pub test: Vec<T>,
}

/// Shuffles with `seed` and cuts off `val` then `test` items; the rest trains.
pub fn split_items<T>(mut items: Vec<T>, val: usize, test: usize, seed: u64) -> Result<Partition<T>> {
    if val + test > items.len() {
        return Err(Error::Contract(format!(
            "cannot take {val} val + {test} test items from {}",
            items.len()
        )));
    }
    items.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let test_items = items.split_off(items.len() - test);
    let val_items = items.split_off(items.len() - val);
    Ok(Partition {
        train: items,
        val: val_items,
        test: test_items,
    })
}
