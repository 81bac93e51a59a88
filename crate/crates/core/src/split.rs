//! Deterministic fit/eval partition keyed on a string id.
//!
//! A key lands in the fit partition when its seeded hash falls in the first
//! `fit_fraction` of the 64-bit range, so membership never depends on the
//! other keys or on their order.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

/// Share of keys in the fit partition.
pub const DEFAULT_FIT_FRACTION: f64 = 0.8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SplitPart {
    Fit,
    #[default]
    Eval,
    All,
}

impl FromStr for SplitPart {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fit" => Ok(SplitPart::Fit),
            "eval" => Ok(SplitPart::Eval),
            "all" => Ok(SplitPart::All),
            other => Err(Error::invalid(format!(
                "unknown split `{other}` (expected fit, eval or all)"
            ))),
        }
    }
}

impl fmt::Display for SplitPart {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SplitPart::Fit => "fit",
            SplitPart::Eval => "eval",
            SplitPart::All => "all",
        })
    }
}

/// FNV-1a over the seed bytes then the key, finished with the splitmix64
/// mixer so nearby keys spread over the whole range.
pub fn split_hash(seed: u64, key: &str) -> u64 {
    const OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
    const PRIME: u64 = 0x0000_0100_0000_01b3;
    let mut h = OFFSET;
    for &b in seed.to_le_bytes().iter().chain(key.as_bytes()) {
        h ^= u64::from(b);
        h = h.wrapping_mul(PRIME);
    }
    h ^= h >> 30;
    h = h.wrapping_mul(0xbf58_476d_1ce4_e5b9);
    h ^= h >> 27;
    h = h.wrapping_mul(0x94d0_49bb_1331_11eb);
    h ^ (h >> 31)
}

pub fn in_fit_partition(seed: u64, key: &str, fit_fraction: f64) -> bool {
    let cut = (fit_fraction.clamp(0.0, 1.0) * 2f64.powi(64)) as u128;
    u128::from(split_hash(seed, key)) < cut
}

/// Indices of `keys` that belong to `part`, in input order.
pub fn split_indices<S: AsRef<str>>(keys: &[S], seed: u64, part: SplitPart, fit_fraction: f64) -> Vec<usize> {
    keys.iter()
        .enumerate()
        .filter(|(_, k)| match part {
            SplitPart::All => true,
            SplitPart::Fit => in_fit_partition(seed, k.as_ref(), fit_fraction),
            SplitPart::Eval => !in_fit_partition(seed, k.as_ref(), fit_fraction),
        })
        .map(|(i, _)| i)
        .collect()
}
