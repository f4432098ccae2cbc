//! Closed-form two-task min-norm weighting.
//!
//! For task gradients `g_r`, `g_i` taken at the shared representation, the
//! weight minimizing `|alpha g_r + (1 - alpha) g_i|^2` over `[0, 1]` is
//! `clip(((g_i - g_r) . g_i) / |g_r - g_i|^2, 0, 1)`.

use crate::error::{Error, Result};

/// Squared-distance threshold below which the two gradients count as equal.
pub const TIE_EPS: f64 = 1e-12;

pub fn mgda_alpha(g_r: &[f32], g_i: &[f32]) -> Result<f32> {
    if g_r.len() != g_i.len() {
        return Err(Error::Shape(format!(
            "task gradients have {} and {} entries",
            g_r.len(),
            g_i.len()
        )));
    }
    let mut num = 0f64;
    let mut den = 0f64;
    for (&r, &i) in g_r.iter().zip(g_i) {
        let (r, i) = (r as f64, i as f64);
        num += (i - r) * i;
        den += (r - i) * (r - i);
    }
    if !(num.is_finite() && den.is_finite()) {
        return Err(Error::NonFinite("task gradients".into()));
    }
    if den < TIE_EPS {
        return Ok(0.5);
    }
    Ok((num / den).clamp(0.0, 1.0) as f32)
}

/// `alpha * loss_r + (1 - alpha) * loss_i`.
pub fn joint_loss(loss_r: f32, loss_i: f32, alpha: f32) -> f32 {
    alpha * loss_r + (1.0 - alpha) * loss_i
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reference_pairs() {
        assert_eq!(mgda_alpha(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.5);
        assert!((mgda_alpha(&[1.0, 0.0], &[0.0, 2.0]).unwrap() - 0.8).abs() < 1e-7);
        assert_eq!(mgda_alpha(&[3.0, -1.0], &[0.0, 0.0]).unwrap(), 0.0);
        assert!((mgda_alpha(&[2.0, 0.0], &[-1.0, 0.0]).unwrap() - 1.0 / 3.0).abs() < 1e-7);
        assert!(mgda_alpha(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn joint_loss_endpoints() {
        assert_eq!(joint_loss(0.7, 1.9, 1.0), 0.7);
        assert_eq!(joint_loss(0.7, 1.9, 0.0), 1.9);
        assert_eq!(joint_loss(1.0, 2.0, 0.5), 1.5);
    }
}
