use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::rng::Rng;

/// Fan-in of a weight shape: `C * kh * kw` for `[K, C, kh, kw]`, `in` for `[out, in]`.
pub fn fan_in(shape: &[usize]) -> Result<usize> {
    let fan: usize = shape.iter().skip(1).product();
    if shape.len() < 2 || fan == 0 {
        return Err(Error::InvalidArgument(format!(
            "cannot compute fan-in of shape {shape:?}"
        )));
    }
    Ok(fan)
}

/// I.i.d. normal samples with mean 0 and standard deviation `sqrt(2 / fan_in)`.
pub fn he_normal(shape: &[usize], rng: &mut Rng) -> Result<Tensor> {
    let std = (2.0 / fan_in(shape)? as f64).sqrt();
    let n = shape.iter().product();
    let data = (0..n).map(|_| (rng.normal() * std) as f32).collect();
    Tensor::new(shape, data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fan_in_of_conv_and_linear() {
        assert_eq!(fan_in(&[32, 64, 3, 3]).unwrap(), 576);
        assert_eq!(fan_in(&[4, 128]).unwrap(), 128);
        assert!(fan_in(&[4]).is_err());
        assert!(fan_in(&[4, 0, 3, 3]).is_err());
    }

    #[test]
    fn moments_match_target() {
        // 1,000,000 samples of a [K, 64, 3, 3] weight, target std sqrt(2/576)
        let target = (2.0f64 / 576.0).sqrt();
        assert!((target - 0.058926).abs() < 1e-6);
        let t = he_normal(&[1737, 64, 3, 3], &mut Rng::seeded(42)).unwrap();
        let n = t.len() as f64;
        assert!(n >= 1e6);
        let mean = t.data().iter().map(|&v| v as f64).sum::<f64>() / n;
        let var = t
            .data()
            .iter()
            .map(|&v| (v as f64 - mean).powi(2))
            .sum::<f64>()
            / n;
        assert!((var.sqrt() / target - 1.0).abs() < 0.01);
        assert!(
            mean.abs() < 3.0 * target / 1000.0,
            "mean {mean} target {target} n {n}"
        );
    }
}
