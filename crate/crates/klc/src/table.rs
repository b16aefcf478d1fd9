//! Dense log-domain tables over sets of discrete variables.
//!
//! A [`Table`] stores `log f(x_scope)` for every joint assignment of its
//! scope, row-major with the last variable fastest. Scopes are kept sorted
//! by variable id so tables over the same scope are directly comparable.
//! Entries live in `[-inf, +big)`: `-inf` is an exact zero in probability
//! space and survives every operation exactly.

use crate::error::{Error, Result};
use crate::logsumexp::logsumexp;

#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    vars: Vec<usize>,
    cards: Vec<usize>,
    data: Vec<f64>,
}

impl Table {
    /// Build a table; `vars` must be strictly increasing and `data` row-major
    /// with the last variable fastest.
    pub fn new(vars: Vec<usize>, cards: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if vars.len() != cards.len() {
            return Err(Error::Shape(format!(
                "scope has {} variables but {} cardinalities",
                vars.len(),
                cards.len()
            )));
        }
        if vars.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Shape("scope variables must be strictly increasing".into()));
        }
        if cards.iter().any(|&c| c == 0) {
            return Err(Error::Shape("zero cardinality".into()));
        }
        let len: usize = cards.iter().product();
        if data.len() != len {
            return Err(Error::Shape(format!(
                "table has {} entries, scope implies {}",
                data.len(),
                len
            )));
        }
        if data.iter().any(|v| v.is_nan()) {
            return Err(Error::Domain("NaN table entry".into()));
        }
        Ok(Table { vars, cards, data })
    }

    /// Constant table (log value `value` everywhere).
    pub fn constant(vars: Vec<usize>, cards: Vec<usize>, value: f64) -> Result<Self> {
        let len: usize = cards.iter().product();
        Table::new(vars, cards, vec![value; len])
    }

    pub fn vars(&self) -> &[usize] {
        &self.vars
    }

    pub fn cards(&self) -> &[usize] {
        &self.cards
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    fn strides(&self) -> Vec<usize> {
        let mut s = vec![1usize; self.cards.len()];
        for i in (0..self.cards.len().saturating_sub(1)).rev() {
            s[i] = s[i + 1] * self.cards[i + 1];
        }
        s
    }

    /// Flat index of a joint assignment given as one digit per scope variable.
    pub fn flat_index(&self, digits: &[usize]) -> usize {
        debug_assert_eq!(digits.len(), self.vars.len());
        let mut idx = 0;
        let mut stride = 1;
        for i in (0..self.cards.len()).rev() {
            debug_assert!(digits[i] < self.cards[i]);
            idx += digits[i] * stride;
            stride *= self.cards[i];
        }
        idx
    }

    /// Digits of a flat index (inverse of [`Table::flat_index`]).
    pub fn digits(&self, mut idx: usize) -> Vec<usize> {
        let mut out = vec![0usize; self.cards.len()];
        for i in (0..self.cards.len()).rev() {
            out[i] = idx % self.cards[i];
            idx /= self.cards[i];
        }
        out
    }

    pub fn get(&self, digits: &[usize]) -> f64 {
        self.data[self.flat_index(digits)]
    }

    pub fn set(&mut self, digits: &[usize], value: f64) {
        let i = self.flat_index(digits);
        self.data[i] = value;
    }

    /// For each flat index of `self`, the flat index of the cell of the
    /// subset-scope table `other` it projects to.
    fn projection_strides(&self, other: &Table) -> Result<Vec<usize>> {
        let other_strides = other.strides();
        let mut per_var = vec![0usize; self.vars.len()];
        let mut found = 0;
        for (j, &v) in other.vars.iter().enumerate() {
            match self.vars.binary_search(&v) {
                Ok(i) => {
                    if self.cards[i] != other.cards[j] {
                        return Err(Error::Shape(format!(
                            "cardinality mismatch on variable {v}"
                        )));
                    }
                    per_var[i] = other_strides[j];
                    found += 1;
                }
                Err(_) => {
                    return Err(Error::Shape(format!(
                        "variable {v} not present in the larger scope"
                    )))
                }
            }
        }
        debug_assert_eq!(found, other.vars.len());
        Ok(per_var)
    }

    /// `self += other`, where `other`'s scope is a subset of `self`'s
    /// (broadcast over the missing variables).
    pub fn accumulate(&mut self, other: &Table) -> Result<()> {
        let proj = self.projection_strides(other)?;
        let mut digits = vec![0usize; self.vars.len()];
        let mut oidx = 0usize;
        for idx in 0..self.data.len() {
            self.data[idx] += other.data[oidx];
            if self.data[idx].is_nan() {
                // +inf plus -inf cannot arise: tables never store +inf
                self.data[idx] = f64::NEG_INFINITY;
            }
            // odometer increment
            for i in (0..digits.len()).rev() {
                digits[i] += 1;
                oidx += proj[i];
                if digits[i] < self.cards[i] {
                    break;
                }
                oidx -= proj[i] * self.cards[i];
                digits[i] = 0;
            }
        }
        Ok(())
    }

    /// `self -= other` with subset-scope broadcast; `other` must be finite.
    pub fn subtract(&mut self, other: &Table) -> Result<()> {
        debug_assert!(other.data.iter().all(|v| v.is_finite()));
        let proj = self.projection_strides(other)?;
        let mut digits = vec![0usize; self.vars.len()];
        let mut oidx = 0usize;
        for idx in 0..self.data.len() {
            self.data[idx] -= other.data[oidx];
            for i in (0..digits.len()).rev() {
                digits[i] += 1;
                oidx += proj[i];
                if digits[i] < self.cards[i] {
                    break;
                }
                oidx -= proj[i] * self.cards[i];
                digits[i] = 0;
            }
        }
        Ok(())
    }

    /// Broadcast this table onto a superset scope.
    pub fn lift_to(&self, vars: &[usize], cards: &[usize]) -> Result<Table> {
        let mut out = Table::constant(vars.to_vec(), cards.to_vec(), 0.0)?;
        out.accumulate(self)?;
        Ok(out)
    }

    /// Log-sum-exp marginalization onto `keep` (a subset of the scope,
    /// sorted). Summed-out `-inf` blocks stay exactly `-inf`.
    pub fn marginalize_lse(&self, keep: &[usize]) -> Result<Table> {
        let keep_cards: Vec<usize> = keep
            .iter()
            .map(|v| {
                self.vars
                    .binary_search(v)
                    .map(|i| self.cards[i])
                    .map_err(|_| Error::Shape(format!("variable {v} not in scope")))
            })
            .collect::<Result<_>>()?;
        let out_shell = Table::constant(keep.to_vec(), keep_cards.clone(), 0.0)?;
        let proj = self.projection_strides(&out_shell)?;
        let out_len = out_shell.len();
        // pass 1: per-output max
        let mut hi = vec![f64::NEG_INFINITY; out_len];
        let mut digits = vec![0usize; self.vars.len()];
        let mut oidx = 0usize;
        for idx in 0..self.data.len() {
            if self.data[idx] > hi[oidx] {
                hi[oidx] = self.data[idx];
            }
            for i in (0..digits.len()).rev() {
                digits[i] += 1;
                oidx += proj[i];
                if digits[i] < self.cards[i] {
                    break;
                }
                oidx -= proj[i] * self.cards[i];
                digits[i] = 0;
            }
        }
        // pass 2: shifted exponent sums
        let mut acc = vec![0.0f64; out_len];
        digits.iter_mut().for_each(|d| *d = 0);
        oidx = 0;
        for idx in 0..self.data.len() {
            if hi[oidx] != f64::NEG_INFINITY {
                acc[oidx] += (self.data[idx] - hi[oidx]).exp();
            }
            for i in (0..digits.len()).rev() {
                digits[i] += 1;
                oidx += proj[i];
                if digits[i] < self.cards[i] {
                    break;
                }
                oidx -= proj[i] * self.cards[i];
                digits[i] = 0;
            }
        }
        let data: Vec<f64> = hi
            .into_iter()
            .zip(acc)
            .map(|(h, a)| {
                if h == f64::NEG_INFINITY {
                    f64::NEG_INFINITY
                } else {
                    h + a.ln()
                }
            })
            .collect();
        Table::new(keep.to_vec(), keep_cards, data)
    }

    /// Log normalizer of the whole table.
    pub fn log_sum(&self) -> f64 {
        logsumexp(&self.data)
    }

    /// Normalize in place; returns the log normalizer (`-inf` if empty support).
    pub fn normalize(&mut self) -> f64 {
        let z = self.log_sum();
        if z != f64::NEG_INFINITY {
            for v in self.data.iter_mut() {
                *v -= z;
            }
        }
        z
    }

    /// Multiply every entry by a scalar (log-domain power).
    pub fn scale(&mut self, factor: f64) {
        for v in self.data.iter_mut() {
            if *v != f64::NEG_INFINITY {
                *v *= factor;
            } else if factor < 0.0 {
                // should never be requested: powers of exact zeros stay zeros
                debug_assert!(false, "negative power of an exact zero");
            }
        }
    }

    /// Flat index of the maximal entry; ties resolve to the lowest index,
    /// which is lexicographically smallest in the digit encoding.
    pub fn argmax(&self) -> usize {
        let mut best = 0usize;
        for (i, &v) in self.data.iter().enumerate() {
            if v > self.data[best] {
                best = i;
            }
        }
        best
    }
}
