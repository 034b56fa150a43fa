use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

/// One leave-one-subject-out fold.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fold {
    pub index: usize,
    pub train_specimens: Vec<String>,
    pub held_out_specimen: String,
}

/// One fold per specimen, in sorted specimen order.
pub fn loso_split(specimen_ids: &[String]) -> Result<Vec<Fold>> {
    let mut ids: Vec<String> = specimen_ids.to_vec();
    ids.sort();
    ids.dedup();
    if ids.len() < 2 {
        return Err(invalid(format!(
            "leave-one-subject-out needs at least 2 specimens, got {}",
            ids.len()
        )));
    }
    Ok(ids
        .iter()
        .enumerate()
        .map(|(index, held)| Fold {
            index,
            train_specimens: ids.iter().filter(|s| *s != held).cloned().collect(),
            held_out_specimen: held.clone(),
        })
        .collect())
}
