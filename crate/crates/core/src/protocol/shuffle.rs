//! Per-query permutation of activation vectors.

use rand::seq::SliceRandom;
use rand::{CryptoRng, RngCore};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ShuffleError {
    #[error("a shuffled query is still outstanding")]
    Outstanding,
    #[error("reply without a pending permutation")]
    NoPending,
    #[error("reply has {got} entries, query had {expected}")]
    LengthMismatch { expected: usize, got: usize },
}

/// Holds at most one pending permutation. A permutation is drawn fresh for
/// every query and dropped once the reply is put back in order.
#[derive(Debug, Default, Clone)]
pub struct Shuffler {
    pending: Option<Vec<usize>>,
}

impl Shuffler {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn has_pending(&self) -> bool {
        self.pending.is_some()
    }

    pub fn pending(&self) -> Option<&[usize]> {
        self.pending.as_deref()
    }

    /// Output position `i` carries input `perm[i]`.
    pub fn shuffle_out<T, R: RngCore + CryptoRng>(&mut self, v: Vec<T>, rng: &mut R) -> Result<Vec<T>, ShuffleError> {
        if self.pending.is_some() {
            return Err(ShuffleError::Outstanding);
        }
        let mut perm: Vec<usize> = (0..v.len()).collect();
        perm.shuffle(rng);
        let mut slots: Vec<Option<T>> = v.into_iter().map(Some).collect();
        let out = perm.iter().map(|&i| slots[i].take().expect("permutation")).collect();
        self.pending = Some(perm);
        Ok(out)
    }

    pub fn unshuffle_in<T>(&mut self, v: Vec<T>) -> Result<Vec<T>, ShuffleError> {
        let perm = self.pending.as_ref().ok_or(ShuffleError::NoPending)?;
        if perm.len() != v.len() {
            return Err(ShuffleError::LengthMismatch {
                expected: perm.len(),
                got: v.len(),
            });
        }
        let perm = self.pending.take().expect("checked");
        let mut out: Vec<Option<T>> = (0..v.len()).map(|_| None).collect();
        for (item, &orig) in v.into_iter().zip(&perm) {
            out[orig] = Some(item);
        }
        Ok(out.into_iter().map(|x| x.expect("permutation")).collect())
    }
}
