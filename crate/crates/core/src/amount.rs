//! Fixed-point satoshi amounts.
//!
//! Proportional attribution splits integer satoshis into fractions. Values are
//! held as unsigned integers in units of 2^-52 satoshi so that sums are exact
//! and independent of the order events are merged in; conversion to `f64`
//! happens only when a table is written.

use std::fmt;
use std::iter::Sum;
use std::ops::{Add, AddAssign};

/// Fractional bits. With inputs bounded by the money supply (< 2^51 sat) the
/// smallest non-empty share is at least 2 units, so no transfer rounds to zero.
pub const FRAC_BITS: u32 = 52;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Amount(pub u128);

impl Amount {
    pub const ZERO: Amount = Amount(0);

    pub fn from_sats(sats: u64) -> Self {
        Amount(u128::from(sats) << FRAC_BITS)
    }

    /// `floor(part * value / whole)`, computed exactly.
    ///
    /// Panics if `whole` is zero.
    pub fn proportional(part: u64, whole: u64, value: u64) -> Self {
        assert!(whole > 0, "proportional share of an empty whole");
        let whole = u128::from(whole);
        let prod = u128::from(part) * u128::from(value);
        let quot = prod / whole;
        let rem = prod % whole;
        Amount((quot << FRAC_BITS) + ((rem << FRAC_BITS) / whole))
    }

    pub fn raw(self) -> u128 {
        self.0
    }

    pub fn is_zero(self) -> bool {
        self.0 == 0
    }

    pub fn to_f64(self) -> f64 {
        self.0 as f64 / (1u64 << FRAC_BITS) as f64
    }

    pub fn checked_add(self, other: Amount) -> Option<Amount> {
        self.0.checked_add(other.0).map(Amount)
    }
}

impl Add for Amount {
    type Output = Amount;

    fn add(self, rhs: Amount) -> Amount {
        Amount(self.0 + rhs.0)
    }
}

impl AddAssign for Amount {
    fn add_assign(&mut self, rhs: Amount) {
        self.0 += rhs.0;
    }
}

impl Sum for Amount {
    fn sum<I: Iterator<Item = Amount>>(iter: I) -> Amount {
        iter.fold(Amount::ZERO, Add::add)
    }
}

/// Satoshis as a decimal real, the form written to tables.
impl fmt::Display for Amount {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.to_f64())
    }
}
