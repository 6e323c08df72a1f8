//! Status-vector encoding of report labels and the Hamming ("hashing")
//! distance used as ground-truth semantic distance.
//!
//! Category `k` owns bits `4k..4k+4`, ordered Blank, Positive, Negative,
//! Uncertain; exactly one bit per block is set.

use alloc::format;
use alloc::vec::Vec;

use crate::error::{Error, Result};

pub const NUM_CATEGORIES: usize = 18;
pub const NUM_STATUSES: usize = 4;
pub const STATUS_BITS: usize = NUM_CATEGORIES * NUM_STATUSES;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
#[repr(u8)]
pub enum Status {
    Blank = 0,
    Positive = 1,
    Negative = 2,
    Uncertain = 3,
}

impl Status {
    pub fn from_index(i: u8) -> Option<Self> {
        match i {
            0 => Some(Status::Blank),
            1 => Some(Status::Positive),
            2 => Some(Status::Negative),
            3 => Some(Status::Uncertain),
            _ => None,
        }
    }
}

/// 72-bit one-hot-per-category status code, stored in the low bits of a `u128`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct StatusVector(u128);

impl StatusVector {
    pub fn bits(self) -> u128 {
        self.0
    }

    pub fn bit(self, k: usize) -> bool {
        k < STATUS_BITS && (self.0 >> k) & 1 == 1
    }

    /// Per-block argmax; the inverse of [`encode_status_vector`].
    pub fn decode(self) -> [u8; NUM_CATEGORIES] {
        let mut out = [0u8; NUM_CATEGORIES];
        for (k, o) in out.iter_mut().enumerate() {
            let block = (self.0 >> (NUM_STATUSES * k)) & 0xF;
            *o = block.trailing_zeros() as u8;
        }
        out
    }
}

/// Sets bit `4k + status_k` for every category.
pub fn encode_status_vector(statuses: &[u8]) -> Result<StatusVector> {
    if statuses.len() != NUM_CATEGORIES {
        return Err(Error::Validation(format!(
            "expected {NUM_CATEGORIES} category statuses, got {}",
            statuses.len()
        )));
    }
    let mut bits = 0u128;
    for (k, &s) in statuses.iter().enumerate() {
        if s as usize >= NUM_STATUSES {
            return Err(Error::Validation(format!(
                "category {k} has status {s}, expected 0..=3"
            )));
        }
        bits |= 1u128 << (NUM_STATUSES * k + s as usize);
    }
    Ok(StatusVector(bits))
}

/// Number of differing bit positions.
pub fn hamming_distance(u: StatusVector, v: StatusVector) -> u32 {
    (u.0 ^ v.0).count_ones()
}

/// Symmetric `B x B` matrix of pairwise Hamming distances.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct HammingMatrix {
    n: usize,
    values: Vec<u32>,
}

impl HammingMatrix {
    /// Wraps an arbitrary square matrix, checking symmetry and the zero diagonal.
    pub fn from_values(n: usize, values: Vec<u32>) -> Result<Self> {
        if n < 2 || values.len() != n * n {
            return Err(Error::Validation(format!(
                "distance matrix must be square with at least 2 rows (n = {n}, len = {})",
                values.len()
            )));
        }
        for i in 0..n {
            if values[i * n + i] != 0 {
                return Err(Error::Validation(format!("nonzero diagonal at row {i}")));
            }
            for j in 0..i {
                if values[i * n + j] != values[j * n + i] {
                    return Err(Error::Validation(format!("asymmetric at ({i}, {j})")));
                }
            }
        }
        Ok(Self { n, values })
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn get(&self, i: usize, j: usize) -> u32 {
        self.values[i * self.n + j]
    }

    pub fn row(&self, i: usize) -> &[u32] {
        &self.values[i * self.n..(i + 1) * self.n]
    }
}

pub fn hamming_matrix(batch: &[StatusVector]) -> Result<HammingMatrix> {
    let n = batch.len();
    if n < 2 {
        return Err(Error::Validation(format!(
            "hamming_matrix needs at least 2 vectors, got {n}"
        )));
    }
    let mut values = alloc::vec![0u32; n * n];
    for i in 0..n {
        for j in i + 1..n {
            let d = hamming_distance(batch[i], batch[j]);
            values[i * n + j] = d;
            values[j * n + i] = d;
        }
    }
    Ok(HammingMatrix { n, values })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn all_blank_sets_block_starts() {
        let v = encode_status_vector(&[0; NUM_CATEGORIES]).unwrap();
        for k in 0..STATUS_BITS {
            assert_eq!(v.bit(k), k % 4 == 0, "bit {k}");
        }
        assert_eq!(v.bits().count_ones(), 18);
    }

    #[test]
    fn first_category_positive() {
        let mut s = [0u8; NUM_CATEGORIES];
        s[0] = Status::Positive as u8;
        let v = encode_status_vector(&s).unwrap();
        assert!(v.bit(1));
        assert!(!v.bit(0));
        for k in 1..NUM_CATEGORIES {
            assert!(v.bit(4 * k));
        }
    }

    #[test]
    fn out_of_range_status_names_category() {
        let mut s = [0u8; NUM_CATEGORIES];
        s[7] = 4;
        match encode_status_vector(&s) {
            Err(Error::Validation(msg)) => assert!(msg.contains("category 7")),
            other => panic!("unexpected {other:?}"),
        }
        assert!(encode_status_vector(&[0; 17]).is_err());
    }

    #[test]
    fn five_category_difference_is_ten_bits() {
        let a = [0u8; NUM_CATEGORIES];
        let mut b = a;
        for k in [0, 3, 8, 12, 17] {
            b[k] = 2;
        }
        let (u, v) = (encode_status_vector(&a).unwrap(), encode_status_vector(&b).unwrap());
        // brute-force bit count
        let brute = (0..STATUS_BITS).filter(|&k| u.bit(k) != v.bit(k)).count();
        assert_eq!(brute, 10);
        assert_eq!(hamming_distance(u, v), 10);
        assert_eq!(hamming_distance(v, u), 10);
        assert_eq!(hamming_distance(u, u), 0);
    }

    #[test]
    fn matrix_needs_two_rows() {
        let v = encode_status_vector(&[0; NUM_CATEGORIES]).unwrap();
        assert!(hamming_matrix(&[v]).is_err());
        let m = hamming_matrix(&[v, v, v]).unwrap();
        assert!((0..3).all(|i| m.row(i).iter().all(|&d| d == 0)));
    }

    #[test]
    fn from_values_validates() {
        assert!(HammingMatrix::from_values(2, alloc::vec![0, 1, 2, 0]).is_err());
        assert!(HammingMatrix::from_values(2, alloc::vec![1, 1, 1, 0]).is_err());
        assert!(HammingMatrix::from_values(2, alloc::vec![0, 3, 3, 0]).is_ok());
    }
}
