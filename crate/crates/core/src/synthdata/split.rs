use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Disjoint seen/unseen partition of the category set.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CategorySplit {
    pub seen: BTreeSet<String>,
    pub unseen: BTreeSet<String>,
}

impl CategorySplit {
    pub fn all(&self) -> BTreeSet<String> {
        self.seen.union(&self.unseen).cloned().collect()
    }
}

pub fn split_categories(categories: &BTreeSet<String>, seed: u64, n_unseen: usize) -> Result<CategorySplit> {
    if n_unseen >= categories.len() {
        return Err(Error::Config(format!(
            "cannot hold out {n_unseen} of {} categories",
            categories.len()
        )));
    }
    let mut order: Vec<&String> = categories.iter().collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let unseen: BTreeSet<String> = order[..n_unseen].iter().map(|s| s.to_string()).collect();
    let seen = categories.difference(&unseen).cloned().collect();
    Ok(CategorySplit { seen, unseen })
}
