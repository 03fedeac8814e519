use super::Tensor;
use crate::error::{Error, Result};

/// Central-difference gradient of a scalar function, one coordinate at a time.
///
/// Used as the independent oracle for every autodiff gradient in the crate.
pub fn finite_diff_grad<F>(mut f: F, x: &Tensor, h: f64) -> Result<Tensor>
where
    F: FnMut(&Tensor) -> Result<f64>,
{
    if !(h > 0.0 && h.is_finite()) {
        return Err(Error::invalid(format!("finite difference step must be positive, got {h}")));
    }
    let mut grad = vec![0.0; x.len()];
    let mut probe = x.clone();
    for (i, g) in grad.iter_mut().enumerate() {
        let orig = x.data()[i];
        probe.data_mut()[i] = orig + h;
        let fp = f(&probe)?;
        probe.data_mut()[i] = orig - h;
        let fm = f(&probe)?;
        probe.data_mut()[i] = orig;
        if !fp.is_finite() || !fm.is_finite() {
            return Err(Error::NonFinite { op: "finite_diff_grad" });
        }
        *g = (fp - fm) / (2.0 * h);
    }
    Tensor::new(x.shape(), grad)
}

/// Relative error `|a - b| / max(|a|, |b|)` over flattened tensors, with a floor on the denominator.
pub fn relative_error(a: &Tensor, b: &Tensor) -> f64 {
    let num = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt();
    let den = a.l2_norm().max(b.l2_norm()).max(1e-12);
    num / den
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_at_three() {
        let x = Tensor::scalar(3.0).unwrap();
        let g = finite_diff_grad(|t| Ok(t.data()[0].powi(2)), &x, 1e-5).unwrap();
        assert!((g.data()[0] - 6.0).abs() < 1e-8);
    }

    #[test]
    fn sum_of_cubes() {
        let x = Tensor::vector(vec![1.0, 2.0]).unwrap();
        let g = finite_diff_grad(|t| Ok(t.data().iter().map(|v| v.powi(3)).sum()), &x, 1e-5).unwrap();
        assert!((g.data()[0] - 3.0).abs() < 1e-6);
        assert!((g.data()[1] - 12.0).abs() < 1e-6);
    }

    #[test]
    fn non_finite_evaluation_is_an_error() {
        let x = Tensor::vector(vec![0.0]).unwrap();
        let r = finite_diff_grad(|t| Ok(1.0 / t.data()[0].abs().min(0.0)), &x, 1e-5);
        assert!(r.is_err());
    }
}
