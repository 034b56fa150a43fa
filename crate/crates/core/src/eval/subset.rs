use std::collections::BTreeMap;

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::metrics::ErrorCategory;
use crate::error::{invalid, Error, Result};
use crate::pose::RegistrationLabel;

/// Equal numbers of cases per error category.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BalancedSubset {
    pub n_per_category: usize,
    pub by_category: BTreeMap<ErrorCategory, Vec<String>>,
}

impl BalancedSubset {
    /// All ids, TP first, then TN, FP, FN.
    pub fn ids(&self) -> Vec<String> {
        self.by_category.values().flatten().cloned().collect()
    }

    pub fn category_of(&self, id: &str) -> Option<ErrorCategory> {
        self.by_category
            .iter()
            .find(|(_, ids)| ids.iter().any(|i| i == id))
            .map(|(c, _)| *c)
    }
}

/// Samples `n_per_category` ids per category without replacement.
pub fn balanced_subset<R: Rng + ?Sized>(
    ids: &[String],
    predicted: &[RegistrationLabel],
    truth: &[RegistrationLabel],
    n_per_category: usize,
    rng: &mut R,
) -> Result<BalancedSubset> {
    if ids.len() != predicted.len() || ids.len() != truth.len() {
        return Err(invalid("ids, predictions and labels differ in length"));
    }
    let mut pools: BTreeMap<ErrorCategory, Vec<&String>> = ErrorCategory::ALL
        .iter()
        .map(|&c| (c, Vec::new()))
        .collect();
    for ((id, &p), &t) in ids.iter().zip(predicted).zip(truth) {
        pools
            .get_mut(&ErrorCategory::of(p, t))
            .expect("all categories")
            .push(id);
    }
    let mut by_category = BTreeMap::new();
    for (cat, pool) in pools {
        if pool.len() < n_per_category {
            return Err(Error::Shortage {
                category: cat.to_string(),
                requested: n_per_category,
                available: pool.len(),
            });
        }
        let picked = sample(rng, pool.len(), n_per_category)
            .into_iter()
            .map(|i| pool[i].clone())
            .collect();
        by_category.insert(cat, picked);
    }
    Ok(BalancedSubset {
        n_per_category,
        by_category,
    })
}
