use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor4};

/// Mean squared error and its gradient `2 (pred - target) / N`.
pub fn mse_loss<T: Real>(prediction: &Tensor4<T>, target: &Tensor4<T>) -> Result<(T, Tensor4<T>)> {
    if prediction.shape() != target.shape() {
        return Err(Error::Shape(format!(
            "mse: prediction {:?} vs target {:?}",
            prediction.shape(),
            target.shape()
        )));
    }
    let n = prediction.data().len();
    if n == 0 {
        return Ok((T::zero(), prediction.clone()));
    }
    let inv_n = T::one() / T::from_usize(n).expect("length fits");
    let two = T::one() + T::one();
    let mut grad = Vec::with_capacity(n);
    let mut sum = T::zero();
    for (&p, &t) in prediction.data().iter().zip(target.data()) {
        let d = p - t;
        sum += d * d;
        grad.push(two * d * inv_n);
    }
    let grad = Tensor4::from_vec(prediction.shape(), grad)?;
    Ok((sum * inv_n, grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::finite_diff_check;

    #[test]
    fn equal_inputs_zero_loss() {
        let a = Tensor4::filled([1, 1, 2, 2], 0.3f64);
        assert_eq!(mse_loss(&a, &a).unwrap().0, 0.0);
    }

    #[test]
    fn direct_formula() {
        let p = Tensor4::from_vec([1, 1, 1, 2], vec![1.0f64, 1.0]).unwrap();
        let t = Tensor4::zeros([1, 1, 1, 2]);
        let (l, g) = mse_loss(&p, &t).unwrap();
        assert_eq!(l, 1.0);
        assert_eq!(g.data(), &[1.0, 1.0]);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let p: Vec<f64> = (0..12).map(|i| (i as f64 * 0.7).sin()).collect();
        let t = Tensor4::from_vec([1, 3, 2, 2], (0..12).map(|i| (i as f64 * 1.3).cos()).collect()).unwrap();
        let pt = Tensor4::from_vec([1, 3, 2, 2], p.clone()).unwrap();
        let (_, g) = mse_loss(&pt, &t).unwrap();
        let err = finite_diff_check(
            |x: &[f64]| {
                mse_loss(&Tensor4::from_vec([1, 3, 2, 2], x.to_vec()).unwrap(), &t)
                    .unwrap()
                    .0
            },
            &p,
            g.data(),
            1e-5,
        );
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn rejects_shape_mismatch() {
        let a = Tensor4::<f64>::zeros([1, 1, 2, 2]);
        let b = Tensor4::<f64>::zeros([1, 1, 2, 3]);
        assert!(mse_loss(&a, &b).is_err());
    }
}
