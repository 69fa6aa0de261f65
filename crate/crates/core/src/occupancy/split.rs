use std::collections::HashSet;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{arg_err, Result};
use crate::numerics::rng::seeded;

/// Train/validation clip ids. `train` is already cut to `fraction`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub train: Vec<usize>,
    pub validation: Vec<usize>,
    pub fraction: f64,
}

impl DatasetSplit {
    /// Attaches held-out ids; fails if they overlap the training ids.
    pub fn with_validation(mut self, validation: Vec<usize>) -> Result<Self> {
        let train: HashSet<_> = self.train.iter().collect();
        if let Some(id) = validation.iter().find(|id| train.contains(id)) {
            return arg_err(format!("clip {id} in both train and validation"));
        }
        self.validation = validation;
        Ok(self)
    }
}

/// Seeded shuffle followed by a prefix of `round(fraction * n)` ids (at
/// least one). Prefixes of one shuffle nest across fractions.
pub fn split_fraction(ids: &[usize], fraction: f64, seed: u64) -> Result<DatasetSplit> {
    if ids.is_empty() {
        return arg_err("empty id list");
    }
    if !(fraction > 0.0 && fraction <= 1.0) {
        return arg_err(format!("fraction {fraction} outside (0, 1]"));
    }
    let mut order = ids.to_vec();
    order.shuffle(&mut seeded(seed));
    let keep = ((fraction * ids.len() as f64).round() as usize).clamp(1, ids.len());
    order.truncate(keep);
    Ok(DatasetSplit {
        train: order,
        validation: Vec::new(),
        fraction,
    })
}
