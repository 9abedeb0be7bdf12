//! Splittable counter-based random keys.
//!
//! A [`RngKey`] is 128 bits of state that is never mutated. Randomness is
//! obtained by hashing `(key, counter)` with Philox-4x32-10, so a key can be
//! shipped to any thread or simulated core and produce the same stream there.
//!
//! Split semantics:
//! - `key.fold_in(i)` derives the `i`-th child key. Children of the same
//!   parent with distinct `i` are independent; `fold_in` is a pure function.
//! - `key.split()` is shorthand for `(key.fold_in(0), key.fold_in(1))`.
//! - `key.stream()` yields the sample stream of `key` itself. Sampling and
//!   folding use distinct Philox keys so a child key never coincides with a
//!   sample block of its parent.

use serde::{Deserialize, Serialize};

const PHILOX_M0: u32 = 0xD251_1F53;
const PHILOX_M1: u32 = 0xCD9E_8D57;
const PHILOX_W0: u32 = 0x9E37_79B9;
const PHILOX_W1: u32 = 0xBB67_AE85;

/// Domain tweak xored into the Philox key when deriving child keys.
const FOLD_TWEAK: [u32; 2] = [0x243F_6A88, 0x85A3_08D3];

#[inline(always)]
fn mulhilo(a: u32, b: u32) -> (u32, u32) {
    let p = u64::from(a) * u64::from(b);
    ((p >> 32) as u32, p as u32)
}

/// Philox-4x32 with 10 rounds.
pub fn philox4x32(counter: [u32; 4], key: [u32; 2]) -> [u32; 4] {
    let mut ctr = counter;
    let mut k = key;
    for round in 0..10 {
        if round > 0 {
            k[0] = k[0].wrapping_add(PHILOX_W0);
            k[1] = k[1].wrapping_add(PHILOX_W1);
        }
        let (hi0, lo0) = mulhilo(PHILOX_M0, ctr[0]);
        let (hi1, lo1) = mulhilo(PHILOX_M1, ctr[2]);
        ctr = [hi1 ^ ctr[1] ^ k[0], lo1, hi0 ^ ctr[3] ^ k[1], lo0];
    }
    ctr
}

/// 128-bit splittable key.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct RngKey([u32; 4]);

impl RngKey {
    pub fn from_seed(seed: u64) -> Self {
        RngKey(philox4x32(
            [seed as u32, (seed >> 32) as u32, 0, 0],
            FOLD_TWEAK,
        ))
    }

    pub fn from_words(words: [u32; 4]) -> Self {
        RngKey(words)
    }

    pub fn words(&self) -> [u32; 4] {
        self.0
    }

    /// Derive the child key with index `data`.
    pub fn fold_in(&self, data: u64) -> Self {
        let [w0, w1, w2, w3] = self.0;
        RngKey(philox4x32(
            [data as u32, (data >> 32) as u32, w2, w3],
            [w0 ^ FOLD_TWEAK[0], w1 ^ FOLD_TWEAK[1]],
        ))
    }

    pub fn split(&self) -> (Self, Self) {
        (self.fold_in(0), self.fold_in(1))
    }

    pub fn split_n(&self, n: usize) -> Vec<Self> {
        (0..n as u64).map(|i| self.fold_in(i)).collect()
    }

    /// Four random words for block `counter` of this key's stream.
    pub fn block(&self, counter: u64) -> [u32; 4] {
        let [w0, w1, w2, w3] = self.0;
        philox4x32([counter as u32, (counter >> 32) as u32, w2, w3], [w0, w1])
    }

    pub fn stream(&self) -> RngStream {
        RngStream {
            key: *self,
            counter: 0,
            buf: [0; 4],
            pos: 4,
        }
    }

    /// First uniform `f32` in `[0, 1)` of this key's stream.
    pub fn uniform(&self) -> f32 {
        bits_to_unit_f32(self.block(0)[0])
    }

    /// First integer in `[0, n)` of this key's stream.
    pub fn below(&self, n: u32) -> u32 {
        self.stream().below(n)
    }
}

#[inline]
fn bits_to_unit_f32(bits: u32) -> f32 {
    (bits >> 8) as f32 * (1.0 / (1u32 << 24) as f32)
}

/// Sequential view of a key's counter stream.
#[derive(Clone, Debug)]
pub struct RngStream {
    key: RngKey,
    counter: u64,
    buf: [u32; 4],
    pos: usize,
}

impl RngStream {
    pub fn next_u32(&mut self) -> u32 {
        if self.pos == 4 {
            self.buf = self.key.block(self.counter);
            self.counter += 1;
            self.pos = 0;
        }
        let v = self.buf[self.pos];
        self.pos += 1;
        v
    }

    pub fn next_u64(&mut self) -> u64 {
        let lo = u64::from(self.next_u32());
        let hi = u64::from(self.next_u32());
        (hi << 32) | lo
    }

    /// Uniform in `[0, 1)` with 24 bits of resolution.
    pub fn uniform(&mut self) -> f32 {
        bits_to_unit_f32(self.next_u32())
    }

    /// Unbiased integer in `[0, n)` by rejection.
    pub fn below(&mut self, n: u32) -> u32 {
        assert!(n > 0, "below(0)");
        let zone = u32::MAX - (u32::MAX - n + 1) % n;
        loop {
            let v = self.next_u32();
            if v <= zone {
                return v % n;
            }
        }
    }

    /// Standard normal via Box-Muller.
    pub fn normal(&mut self) -> f32 {
        let u1 = (self.next_u32() as f64 + 1.0) / (u32::MAX as f64 + 2.0);
        let u2 = self.next_u32() as f64 / (u32::MAX as f64 + 1.0);
        ((-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()) as f32
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    #[test]
    fn philox_known_answer() {
        // Random123 known-answer vectors for philox4x32-10.
        assert_eq!(
            philox4x32([0, 0, 0, 0], [0, 0]),
            [0x6627_e8d5, 0xe169_c58d, 0xbc57_ac4c, 0x9b00_dbd8]
        );
        assert_eq!(
            philox4x32([u32::MAX; 4], [u32::MAX; 2]),
            [0x408f_276d, 0x41c8_3b0e, 0xa20b_c7c6, 0x6d54_51fd]
        );
        assert_eq!(
            philox4x32(
                [0x243f_6a88, 0x85a3_08d3, 0x1319_8a2e, 0x0370_7344],
                [0xa409_3822, 0x299f_31d0]
            ),
            [0xd16c_fe09, 0x94fd_cceb, 0x5001_e420, 0x2412_6ea1]
        );
    }

    #[test]
    fn same_key_same_stream() {
        let k = RngKey::from_seed(7);
        let a: Vec<u32> = (0..16).scan(k.stream(), |s, _| Some(s.next_u32())).collect();
        let b: Vec<u32> = (0..16).scan(k.stream(), |s, _| Some(s.next_u32())).collect();
        assert_eq!(a, b);
    }

    #[test]
    fn children_are_distinct() {
        let k = RngKey::from_seed(1);
        let kids: HashSet<RngKey> = k.split_n(10_000).into_iter().collect();
        assert_eq!(kids.len(), 10_000);
        let (a, b) = k.split();
        assert_ne!(a, b);
        assert_ne!(a, k);
    }

    #[test]
    fn child_key_is_not_a_parent_sample_block() {
        let k = RngKey::from_seed(3);
        for i in 0..64 {
            assert_ne!(k.fold_in(i).words(), k.block(i));
        }
    }

    #[test]
    fn below_is_in_range_and_roughly_uniform() {
        let mut s = RngKey::from_seed(11).stream();
        let mut counts = [0usize; 5];
        for _ in 0..50_000 {
            counts[s.below(5) as usize] += 1;
        }
        for c in counts {
            assert!((c as f64 - 10_000.0).abs() < 500.0, "{counts:?}");
        }
    }

    #[test]
    fn uniform_in_unit_interval() {
        let mut s = RngKey::from_seed(5).stream();
        for _ in 0..10_000 {
            let u = s.uniform();
            assert!((0.0..1.0).contains(&u));
        }
    }
}
