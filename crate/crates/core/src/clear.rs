//! Exact plaintext backend: slot vectors in the clear, with the same level
//! and scale bookkeeping as the encrypted backend. This is the oracle every
//! kernel is checked against.

#[derive(Debug, Clone, PartialEq)]
pub struct ClearBody {
    pub slots: Vec<f64>,
}

impl ClearBody {
    pub fn zero(n: usize) -> Self {
        ClearBody {
            slots: vec![0.0; n],
        }
    }

    pub fn add(&self, other: &ClearBody) -> ClearBody {
        ClearBody {
            slots: self
                .slots
                .iter()
                .zip(&other.slots)
                .map(|(a, b)| a + b)
                .collect(),
        }
    }

    pub fn sub(&self, other: &ClearBody) -> ClearBody {
        ClearBody {
            slots: self
                .slots
                .iter()
                .zip(&other.slots)
                .map(|(a, b)| a - b)
                .collect(),
        }
    }

    pub fn mul(&self, other: &ClearBody) -> ClearBody {
        ClearBody {
            slots: self
                .slots
                .iter()
                .zip(&other.slots)
                .map(|(a, b)| a * b)
                .collect(),
        }
    }

    /// Slotwise product; slots past the end of `other` read as zero.
    pub fn mul_slots(&self, other: &[f64]) -> ClearBody {
        ClearBody {
            slots: self
                .slots
                .iter()
                .enumerate()
                .map(|(i, a)| a * other.get(i).copied().unwrap_or(0.0))
                .collect(),
        }
    }

    /// Slotwise sum; slots past the end of `other` read as zero.
    pub fn add_slots(&self, other: &[f64]) -> ClearBody {
        ClearBody {
            slots: self
                .slots
                .iter()
                .enumerate()
                .map(|(i, a)| a + other.get(i).copied().unwrap_or(0.0))
                .collect(),
        }
    }

    /// Cyclic left shift by k (negative k shifts right).
    pub fn rotate(&self, k: i64) -> ClearBody {
        let n = self.slots.len() as i64;
        let k = k.rem_euclid(n) as usize;
        let mut slots = Vec::with_capacity(self.slots.len());
        slots.extend_from_slice(&self.slots[k..]);
        slots.extend_from_slice(&self.slots[..k]);
        ClearBody { slots }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rotate_left_and_right() {
        let b = ClearBody {
            slots: vec![1.0, 2.0, 3.0, 4.0],
        };
        assert_eq!(b.rotate(1).slots, vec![2.0, 3.0, 4.0, 1.0]);
        assert_eq!(b.rotate(-1).slots, vec![4.0, 1.0, 2.0, 3.0]);
        assert_eq!(b.rotate(0).slots, b.slots);
        assert_eq!(b.rotate(4).slots, b.slots);
    }
}
