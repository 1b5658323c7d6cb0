use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Teacher-to-student layer assignment, 1-based `(teacher, student)` pairs.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerMap {
    pairs: Vec<(usize, usize)>,
}

impl LayerMap {
    pub fn pairs(&self) -> &[(usize, usize)] {
        &self.pairs
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn teacher_layers(&self) -> usize {
        self.pairs.len()
    }

    pub fn student_layers(&self) -> usize {
        self.pairs.iter().map(|p| p.1).max().unwrap_or(0)
    }
}

/// Layers `1..=m` align one-to-one; teacher layers `m+1..=k` all map onto
/// student layer `m`.
pub fn build_layer_map(k: usize, m: usize) -> Result<LayerMap> {
    if m == 0 {
        return Err(Error::Config("student needs at least one layer".into()));
    }
    if k < m {
        return Err(Error::Config(format!(
            "teacher depth {k} is smaller than student depth {m}"
        )));
    }
    let pairs = (1..=k).map(|i| (i, i.min(m))).collect();
    Ok(LayerMap { pairs })
}
