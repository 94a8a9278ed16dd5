//! Frequency-adaptive per-class margins.

use std::f64::consts::FRAC_PI_2;

use crate::error::{Error, Result};
use crate::scalar::Real;

pub const DEFAULT_MARGIN_MIN: f64 = 0.2;
pub const DEFAULT_MARGIN_MAX: f64 = 0.5;
pub const DEFAULT_MARGIN_POWER: f64 = 0.25;

/// Power-law interpolation between `m_min` (most frequent class) and `m_max`
/// (rarest class):
///
/// `m_i = m_min + (m_max - m_min) · (n_i^-λ - n_max^-λ) / (n_min^-λ - n_max^-λ)`
///
/// When every count is equal each class gets `(m_min + m_max) / 2`.
pub fn adaptive_margins<T: Real>(class_counts: &[usize], m_min: T, m_max: T, power: T) -> Result<Vec<T>> {
    if !(T::zero() <= m_min && m_min <= m_max && m_max < T::lit(FRAC_PI_2)) {
        return Err(Error::Config(format!(
            "margin bounds must satisfy 0 <= {m_min} <= {m_max} < pi/2"
        )));
    }
    if !(power > T::zero()) {
        return Err(Error::Config(format!("margin power must be positive, got {power}")));
    }
    if class_counts.contains(&0) {
        return Err(Error::Config("class counts must be at least 1".into()));
    }
    let (Some(&lo), Some(&hi)) = (class_counts.iter().min(), class_counts.iter().max()) else {
        return Ok(Vec::new());
    };
    if lo == hi {
        let mid = (m_min + m_max) / T::lit(2.0);
        return Ok(vec![mid; class_counts.len()]);
    }
    let f = |n: usize| T::from_usize_lossy(n).powf(-power);
    let (f_rare, f_common) = (f(lo), f(hi));
    Ok(class_counts
        .iter()
        .map(|&n| m_min + (m_max - m_min) * (f(n) - f_common) / (f_rare - f_common))
        .collect())
}
