//! Plaintext user-defined skyline: dominance, region filtering and the
//! block-nested-loop algorithm. This is the ground truth every encrypted run
//! is checked against.

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Preference {
    Min,
    Max,
}

/// Range and preference on one user-selected dimension (0-based).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Constraint {
    pub dim: usize,
    pub lower: u64,
    pub upper: u64,
    pub pref: Preference,
}

/// A skyline query: the selected dimensions, each with a closed range and a
/// min/max preference.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PlainQuery {
    constraints: Vec<Constraint>,
}

impl PlainQuery {
    pub fn new(mut constraints: Vec<Constraint>) -> Result<Self> {
        if constraints.is_empty() {
            return Err(Error::InvalidQuery("no dimension selected".into()));
        }
        constraints.sort_by_key(|c| c.dim);
        for w in constraints.windows(2) {
            if w[0].dim == w[1].dim {
                return Err(Error::InvalidQuery(format!("dimension {} selected twice", w[0].dim)));
            }
        }
        for c in &constraints {
            if c.lower > c.upper {
                return Err(Error::InvalidQuery(format!(
                    "inverted range [{}, {}] on dimension {}",
                    c.lower, c.upper, c.dim
                )));
            }
        }
        Ok(PlainQuery { constraints })
    }

    pub fn constraints(&self) -> &[Constraint] {
        &self.constraints
    }

    pub fn k(&self) -> usize {
        self.constraints.len()
    }

    /// Checks the query against a table with `m` dimensions and the given
    /// public bounds.
    pub fn validate(&self, m: usize, lower: &[u64], upper: &[u64]) -> Result<()> {
        for c in &self.constraints {
            if c.dim >= m {
                return Err(Error::InvalidQuery(format!("dimension {} out of range 0..{m}", c.dim)));
            }
            if c.lower < lower[c.dim] || c.upper > upper[c.dim] {
                return Err(Error::InvalidQuery(format!(
                    "range [{}, {}] on dimension {} exceeds public bounds [{}, {}]",
                    c.lower, c.upper, c.dim, lower[c.dim], upper[c.dim]
                )));
            }
        }
        Ok(())
    }
}

/// `a` dominates `b`: at least as good on every selected dimension and
/// different on at least one.
pub fn dominates(a: &[u64], b: &[u64], q: &PlainQuery) -> bool {
    let mut differs = false;
    for c in q.constraints() {
        let (x, y) = (a[c.dim], b[c.dim]);
        let ok = match c.pref {
            Preference::Min => x <= y,
            Preference::Max => x >= y,
        };
        if !ok {
            return false;
        }
        differs |= x != y;
    }
    differs
}

pub fn in_region(t: &[u64], q: &PlainQuery) -> bool {
    q.constraints().iter().all(|c| (c.lower..=c.upper).contains(&t[c.dim]))
}

/// Block-nested-loop skyline over the in-region tuples. Returns the skyline
/// as a multiset (exact duplicates never dominate each other, so each copy
/// is kept), in window order.
pub fn bnl_skyline(db: &[Vec<u64>], q: &PlainQuery) -> Vec<Vec<u64>> {
    let mut window: Vec<&Vec<u64>> = Vec::new();
    'next: for p in db.iter().filter(|t| in_region(t, q)) {
        let mut i = 0;
        while i < window.len() {
            if dominates(window[i], p, q) {
                continue 'next;
            }
            if dominates(p, window[i], q) {
                window.remove(i);
            } else {
                i += 1;
            }
        }
        window.push(p);
    }
    window.into_iter().cloned().collect()
}

/// Quadratic reference: every in-region tuple no in-region tuple dominates.
pub fn naive_skyline(db: &[Vec<u64>], q: &PlainQuery) -> Vec<Vec<u64>> {
    let region: Vec<&Vec<u64>> = db.iter().filter(|t| in_region(t, q)).collect();
    region
        .iter()
        .filter(|p| !region.iter().any(|o| dominates(o, p, q)))
        .map(|p| (*p).clone())
        .collect()
}

/// Sorted copy, for multiset comparison.
pub fn canonical(mut tuples: Vec<Vec<u64>>) -> Vec<Vec<u64>> {
    tuples.sort();
    tuples
}
