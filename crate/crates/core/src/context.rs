//! Constant per-sequence inputs derived once from a padded batch row.

use crate::dataio::Row;

/// Index helpers and masks for one left-padded sequence of length `len`.
#[derive(Clone, Debug)]
pub struct RowContext {
    pub len: usize,
    pub valid: Vec<bool>,
    pub items: Vec<Option<usize>>,
    pub behaviors: Vec<Option<usize>>,
    pub categories: Vec<Option<usize>>,
    /// Index among the real tokens, so extra left padding leaves it unchanged.
    pub positions: Vec<Option<usize>>,
    pub timestamps: Vec<u64>,
    /// Intensity bit of each valid position's behavior.
    pub intensity: Vec<Option<u8>>,
}

impl RowContext {
    /// `intensity_bits[b]` is the stratum of behavior id `b`.
    pub fn new(row: &Row<'_>, intensity_bits: &[u8]) -> Self {
        let len = row.len();
        let pad = row.pad();
        let opt = |k: usize, v: usize| if row.valid[k] { Some(v) } else { None };
        RowContext {
            len,
            valid: row.valid.to_vec(),
            items: (0..len).map(|k| opt(k, row.items[k])).collect(),
            behaviors: (0..len).map(|k| opt(k, row.behaviors[k])).collect(),
            categories: (0..len).map(|k| opt(k, row.categories[k])).collect(),
            positions: (0..len).map(|k| if row.valid[k] { Some(k - pad) } else { None }).collect(),
            timestamps: row.timestamps.to_vec(),
            intensity: (0..len).map(|k| if row.valid[k] { Some(intensity_bits[row.behaviors[k]]) } else { None }).collect(),
        }
    }

    /// `allowed[i*len + j]` iff both positions are real and `j <= i`.
    pub fn causal(&self) -> Vec<bool> {
        let n = self.len;
        let mut out = vec![false; n * n];
        for i in 0..n {
            for j in 0..=i {
                out[i * n + j] = self.valid[i] && self.valid[j];
            }
        }
        out
    }

    pub fn last_valid(&self) -> Option<usize> {
        self.valid.iter().rposition(|v| *v)
    }
}

/// Converts a boolean mask into 0/1 multipliers.
pub(crate) fn indicator<T: crate::numerics::Real>(mask: &[bool]) -> Vec<T> {
    mask.iter().map(|&m| if m { T::one() } else { T::zero() }).collect()
}
