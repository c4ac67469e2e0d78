//! Epoch-prefixed terms.
//!
//! Every split or merge that completes bumps the epoch, and the epoch sits in
//! the high 32 bits of the 64-bit term so that any era of a newer shard
//! outranks every term of the shard it came from.

use serde::{Deserialize, Serialize};
use std::fmt;

/// An `(epoch, term)` pair, ordered lexicographically.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct EpochTerm {
    pub epoch: u32,
    pub term: u32,
}

impl EpochTerm {
    pub const ZERO: EpochTerm = EpochTerm { epoch: 0, term: 0 };

    pub const fn new(epoch: u32, term: u32) -> Self {
        EpochTerm { epoch, term }
    }

    /// Packs the pair with the epoch in the high half.
    pub const fn pack(self) -> u64 {
        ((self.epoch as u64) << 32) | self.term as u64
    }

    pub const fn unpack(packed: u64) -> Self {
        EpochTerm { epoch: (packed >> 32) as u32, term: packed as u32 }
    }

    /// The next term within the same epoch.
    ///
    /// Panics if the term space of the epoch is exhausted; 2^32 elections in
    /// one epoch is not a state the protocol can reach in practice.
    pub fn next_term(self) -> Self {
        EpochTerm { epoch: self.epoch, term: self.term.checked_add(1).expect("term space exhausted") }
    }

    /// Term zero of the given epoch.
    pub const fn start_of(epoch: u32) -> Self {
        EpochTerm { epoch, term: 0 }
    }
}

pub fn pack_epoch_term(epoch: u32, term: u32) -> u64 {
    EpochTerm::new(epoch, term).pack()
}

pub fn unpack_epoch_term(packed: u64) -> (u32, u32) {
    let et = EpochTerm::unpack(packed);
    (et.epoch, et.term)
}

impl fmt::Display for EpochTerm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}.{}", self.epoch, self.term)
    }
}

impl From<u64> for EpochTerm {
    fn from(packed: u64) -> Self {
        EpochTerm::unpack(packed)
    }
}

impl From<EpochTerm> for u64 {
    fn from(et: EpochTerm) -> Self {
        et.pack()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn pack_places_epoch_high() {
        assert_eq!(pack_epoch_term(1, 5), 0x0000_0001_0000_0005);
        assert_eq!(pack_epoch_term(0, 0), 0);
        assert_eq!(unpack_epoch_term(0x0000_0001_0000_0005), (1, 5));
    }

    #[test]
    fn boundary_pairs_order_like_tuples() {
        let samples = [0u32, 1, 2, 0x7fff_ffff, 0x8000_0000, u32::MAX - 1, u32::MAX];
        for &e1 in &samples {
            for &t1 in &samples {
                for &e2 in &samples {
                    for &t2 in &samples {
                        let by_tuple = (e1, t1).cmp(&(e2, t2));
                        let by_pack = pack_epoch_term(e1, t1).cmp(&pack_epoch_term(e2, t2));
                        assert_eq!(by_tuple, by_pack, "({e1},{t1}) vs ({e2},{t2})");
                    }
                }
            }
        }
        assert!(pack_epoch_term(1, 0) > pack_epoch_term(0, u32::MAX));
    }

    proptest! {
        #[test]
        fn pack_roundtrip_and_order(e1: u32, t1: u32, e2: u32, t2: u32) {
            let a = EpochTerm::new(e1, t1);
            let b = EpochTerm::new(e2, t2);
            prop_assert_eq!(EpochTerm::unpack(a.pack()), a);
            prop_assert_eq!(a.cmp(&b), a.pack().cmp(&b.pack()));
            prop_assert_eq!(a.cmp(&b), (e1, t1).cmp(&(e2, t2)));
        }
    }
}
