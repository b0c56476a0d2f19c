//! Analytical cost model for differential checkpoint updates.
//!
//! All quantities are normalized per block. With `t_w` the time to write one
//! block, `t_h` the time to hash one block and `n_d` the dirty fraction:
//!
//! * cost `tau = (t_h - t_w) + n_d (t_w + t_h)`; negative means a net saving,
//! * break-even fraction `eta = (t_w - t_h) / (t_w + t_h)`,
//! * relative time difference `S = tau / t_w = rho - 1 + n_d (rho + 1)` with
//!   `rho = t_h / t_w`.
//!
//! Hashing is counted `N_t + N_d` times because digests of dirty blocks can
//! only be committed after the update succeeded.

use std::fmt;

use crate::scalar::Real;

#[derive(Debug, Clone, Copy, PartialEq, thiserror::Error)]
pub enum ModelError {
    #[error("{name} must be positive and finite, got {value}")]
    NonPositive { name: &'static str, value: f64 },
    #[error("{name} must be non-negative and finite, got {value}")]
    Negative { name: &'static str, value: f64 },
    #[error("dirty fraction {0} outside [0, 1]")]
    Fraction(f64),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CostModelParams<F> {
    /// Block size in bytes; informational.
    pub block_size: u64,
    t_w: F,
    t_h: F,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Verdict {
    Speedup,
    Overhead,
    AtThreshold,
}

impl fmt::Display for Verdict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Verdict::Speedup => "SPEEDUP",
            Verdict::Overhead => "OVERHEAD",
            Verdict::AtThreshold => "AT-THRESHOLD",
        })
    }
}

fn positive<F: Real>(name: &'static str, v: F) -> Result<F, ModelError> {
    if v > F::zero() && v.is_finite() {
        Ok(v)
    } else {
        Err(ModelError::NonPositive { name, value: v.to_f64().unwrap_or(f64::NAN) })
    }
}

fn non_negative<F: Real>(name: &'static str, v: F) -> Result<F, ModelError> {
    if v >= F::zero() && v.is_finite() {
        Ok(v)
    } else {
        Err(ModelError::Negative { name, value: v.to_f64().unwrap_or(f64::NAN) })
    }
}

fn fraction<F: Real>(v: F) -> Result<F, ModelError> {
    if v >= F::zero() && v <= F::one() {
        Ok(v)
    } else {
        Err(ModelError::Fraction(v.to_f64().unwrap_or(f64::NAN)))
    }
}

impl<F: Real> CostModelParams<F> {
    pub fn new(block_size: u64, t_w: F, t_h: F) -> Result<Self, ModelError> {
        Ok(CostModelParams {
            block_size,
            t_w: positive("t_w", t_w)?,
            t_h: positive("t_h", t_h)?,
        })
    }

    pub fn t_w(&self) -> F {
        self.t_w
    }

    pub fn t_h(&self) -> F {
        self.t_h
    }

    pub fn rho(&self) -> F {
        self.t_h / self.t_w
    }

    /// Normalized cost in seconds per block.
    pub fn tau(&self, n_d: F) -> Result<F, ModelError> {
        let n_d = fraction(n_d)?;
        Ok((self.t_h - self.t_w) + n_d * (self.t_w + self.t_h))
    }

    /// Dirty fraction at which `tau` crosses zero.
    pub fn eta(&self) -> F {
        (self.t_w - self.t_h) / (self.t_w + self.t_h)
    }

    /// Clean share that must be exceeded for a saving, `1 - eta`.
    pub fn clean_threshold(&self) -> F {
        F::one() - self.eta()
    }

    /// Relative time difference against a full checkpoint.
    pub fn speedup(&self, n_d: F) -> Result<F, ModelError> {
        let n_d = fraction(n_d)?;
        let rho = self.rho();
        Ok(rho - F::one() + n_d * (rho + F::one()))
    }

    /// Largest relative overhead, reached at `n_d = 1`.
    pub fn max_relative_overhead(&self) -> F {
        F::lit(2.0) * self.rho()
    }

    pub fn verdict(&self, n_d: F) -> Result<Verdict, ModelError> {
        let s = self.speedup(n_d)?;
        let eps = F::lit(1e-9);
        Ok(if s.abs() <= eps {
            Verdict::AtThreshold
        } else if s < F::zero() {
            Verdict::Speedup
        } else {
            Verdict::Overhead
        })
    }
}

/// Measured second-order terms.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CorrectionTerms<F> {
    /// Reduction of the per-block write time when only the dirty share is
    /// written.
    pub write_relief: F,
    /// Mean write time of the extra boundary blocks.
    pub boundary_write_time: F,
    /// Mean hash time of the extra boundary blocks.
    pub boundary_hash_time: F,
}

impl<F: Real> CorrectionTerms<F> {
    pub fn zero() -> Self {
        CorrectionTerms {
            write_relief: F::zero(),
            boundary_write_time: F::zero(),
            boundary_hash_time: F::zero(),
        }
    }

    fn checked(self) -> Result<Self, ModelError> {
        non_negative("write_relief", self.write_relief)?;
        non_negative("boundary_write_time", self.boundary_write_time)?;
        non_negative("boundary_hash_time", self.boundary_hash_time)?;
        Ok(self)
    }
}

impl<F: Real> CostModelParams<F> {
    /// `tau' = tau - n_d * write_relief + n_d' * (boundary write + boundary hash)`
    /// where `n_d'` is the fraction of extra boundary blocks.
    pub fn corrected_tau(&self, corrections: &CorrectionTerms<F>, n_d: F, n_d_prime: F) -> Result<F, ModelError> {
        let c = corrections.checked()?;
        let tau = self.tau(n_d)?;
        let n_dp = fraction(n_d_prime)?;
        if c == CorrectionTerms::zero() {
            return Ok(tau);
        }
        Ok(tau - n_d * c.write_relief + n_dp * (c.boundary_write_time + c.boundary_hash_time))
    }
}
