//! Double-word accumulation.
//!
//! A sum kept as an unevaluated pair `hi + lo` carries about 106 bits, so
//! splitting the terms into blocks and merging the block sums in any
//! grouping rounds to the same `f64` except in vanishingly rare ties. All
//! partial sums that feed a collective are accumulated this way, which is
//! what makes the solver's iterates independent of the worker count.

use std::iter::Sum;
use std::ops::{AddAssign, Neg};

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct Dd {
    pub hi: f64,
    pub lo: f64,
}

#[inline]
fn two_sum(a: f64, b: f64) -> (f64, f64) {
    let s = a + b;
    let bb = s - a;
    (s, (a - (s - bb)) + (b - bb))
}

#[inline]
fn quick_two_sum(a: f64, b: f64) -> (f64, f64) {
    let s = a + b;
    (s, b - (s - a))
}

impl Dd {
    pub const ZERO: Dd = Dd { hi: 0.0, lo: 0.0 };

    pub fn new(x: f64) -> Self {
        Self { hi: x, lo: 0.0 }
    }

    #[inline]
    pub fn add(&mut self, x: f64) {
        let (s, e) = two_sum(self.hi, x);
        if !s.is_finite() {
            *self = Dd::new(s);
            return;
        }
        (self.hi, self.lo) = quick_two_sum(s, e + self.lo);
    }

    /// Adds another double-word value.
    #[inline]
    pub fn merge(&mut self, other: Dd) {
        let (s, e) = two_sum(self.hi, other.hi);
        if !s.is_finite() {
            *self = Dd::new(s);
            return;
        }
        let (t, f) = two_sum(self.lo, other.lo);
        let (s, e) = quick_two_sum(s, e + t);
        (self.hi, self.lo) = quick_two_sum(s, e + f);
    }

    #[inline]
    pub fn value(self) -> f64 {
        self.hi + self.lo
    }
}

impl Neg for Dd {
    type Output = Dd;

    fn neg(self) -> Dd {
        Dd {
            hi: -self.hi,
            lo: -self.lo,
        }
    }
}

impl AddAssign<f64> for Dd {
    fn add_assign(&mut self, x: f64) {
        self.add(x);
    }
}

impl AddAssign<Dd> for Dd {
    fn add_assign(&mut self, x: Dd) {
        self.merge(x);
    }
}

impl Sum<f64> for Dd {
    fn sum<I: Iterator<Item = f64>>(iter: I) -> Dd {
        let mut acc = Dd::ZERO;
        iter.for_each(|x| acc.add(x));
        acc
    }
}

impl Sum<Dd> for Dd {
    fn sum<I: Iterator<Item = Dd>>(iter: I) -> Dd {
        let mut acc = Dd::ZERO;
        iter.for_each(|x| acc.merge(x));
        acc
    }
}

/// `Σ a_i b_i` with each product rounded once.
pub fn dot(a: &[f64], b: &[f64]) -> Dd {
    debug_assert_eq!(a.len(), b.len());
    // independent lanes keep the dependency chains short
    let mut lanes = [Dd::ZERO; 4];
    let (ca, cb) = (a.chunks_exact(4), b.chunks_exact(4));
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for l in 0..4 {
            lanes[l].add(x[l] * y[l]);
        }
    }
    for (x, y) in ra.iter().zip(rb) {
        lanes[0].add(x * y);
    }
    lanes.into_iter().sum()
}
