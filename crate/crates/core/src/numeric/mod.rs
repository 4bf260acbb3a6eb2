//! Dense tensors, a reverse-mode differentiation tape and the Adam optimizer.

mod adam;
mod kernels;
mod scalar;
mod tape;
mod tensor;

pub use adam::AdamState;
pub use kernels::ConvGeom;
pub use scalar::Scalar;
pub use tape::{Tape, Var, LOG_CLAMP};
pub use tensor::Tensor;

use crate::error::{Error, Result};

/// Numerically stable softmax of a single logit vector.
pub fn softmax<S: Scalar>(logits: &[S]) -> Result<Vec<S>> {
    if logits.len() < 2 {
        return Err(Error::invalid("softmax", "need at least 2 classes"));
    }
    if logits.iter().any(|v| v.is_nan()) {
        return Err(Error::NonFinite { op: "softmax" });
    }
    let mut tape = Tape::new();
    let x = tape.input(vec![logits.len()], logits.to_vec(), false)?;
    let y = tape.softmax(x)?;
    Ok(tape.value(y).to_vec())
}

pub fn mse_loss<S: Scalar>(pred: &Tensor<S>, target: &Tensor<S>) -> Result<S> {
    let mut tape = Tape::new();
    let (p, t) = (tape.constant(pred), tape.constant(target));
    let l = tape.mse(p, t)?;
    Ok(tape.value(l)[0])
}

pub fn cross_entropy_loss<S: Scalar>(probs: &[S], label: usize) -> Result<S> {
    let mut tape = Tape::new();
    let p = tape.input(vec![1, probs.len()], probs.to_vec(), false)?;
    let l = tape.cross_entropy(p, &[label])?;
    Ok(tape.value(l)[0])
}

/// Central finite differences `(f(x + eps e_i) - f(x - eps e_i)) / 2 eps`.
pub fn finite_diff_gradient<S, F>(mut f: F, x: &Tensor<S>, eps: S) -> Result<Tensor<S>>
where
    S: Scalar,
    F: FnMut(&Tensor<S>) -> Result<S>,
{
    if !(eps > S::zero()) {
        return Err(Error::invalid("finite_diff_gradient", "eps must be positive"));
    }
    let mut probe = x.clone();
    let mut grad = Vec::with_capacity(x.numel());
    for i in 0..x.numel() {
        let orig = x.data()[i];
        probe.data_mut()[i] = orig + eps;
        let up = f(&probe)?;
        probe.data_mut()[i] = orig - eps;
        let down = f(&probe)?;
        probe.data_mut()[i] = orig;
        grad.push((up - down) / (eps + eps));
    }
    Tensor::new(x.shape().to_vec(), grad)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: Vec<usize>, v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape, v).unwrap()
    }

    #[test]
    fn matmul_example() {
        let mut tape = Tape::new();
        let a = tape.leaf(&t(vec![2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let b = tape.leaf(&t(vec![2, 2], &[5.0, 6.0, 7.0, 8.0]));
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(c), &[19.0, 22.0, 43.0, 50.0]);
    }

    #[test]
    fn matmul_shape_error_names_op() {
        let mut tape = Tape::new();
        let a = tape.leaf(&t(vec![2, 3], &[0.0; 6]));
        let b = tape.leaf(&t(vec![2, 2], &[0.0; 4]));
        let msg = tape.matmul(a, b).unwrap_err().to_string();
        assert!(msg.contains("matmul") && msg.contains("[2, 3]"), "{msg}");
    }

    #[test]
    fn relu_example() {
        let mut tape = Tape::new();
        let x = tape.leaf(&t(vec![3], &[-1.0, 0.0, 2.0]));
        let y = tape.relu(x).unwrap();
        assert_eq!(tape.value(y), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn conv_of_ones() {
        let mut tape = Tape::new();
        let x = tape.leaf(&t(vec![1, 1, 3, 3], &[1.0; 9]));
        let w = tape.leaf(&t(vec![1, 1, 2, 2], &[1.0; 4]));
        let b = tape.leaf(&t(vec![1], &[0.0]));
        let y = tape.conv2d(x, w, b, 1, 0).unwrap();
        assert_eq!(tape.shape(y), &[1, 1, 2, 2]);
        assert_eq!(tape.value(y), &[4.0; 4]);
    }

    #[test]
    fn backward_sum_of_squares() {
        let mut tape = Tape::new();
        let x = tape.leaf(&t(vec![3], &[1.0, 2.0, 3.0]).with_grad());
        let sq = tape.mul(x, x).unwrap();
        let l = tape.sum(sq).unwrap();
        tape.backward(l).unwrap();
        assert_eq!(tape.grad(x), vec![2.0, 4.0, 6.0]);
    }

    #[test]
    fn backward_mse_against_zero() {
        let mut tape = Tape::new();
        let x = tape.leaf(&t(vec![1], &[2.0]).with_grad());
        let z = tape.leaf(&t(vec![1], &[0.0]));
        let l = tape.mse(x, z).unwrap();
        assert_eq!(tape.value(l), &[4.0]);
        tape.backward(l).unwrap();
        assert_eq!(tape.grad(x), vec![4.0]);
    }

    #[test]
    fn backward_twice_is_an_error() {
        let mut tape = Tape::new();
        let x = tape.leaf(&t(vec![1], &[2.0]).with_grad());
        let l = tape.sum(x).unwrap();
        tape.backward(l).unwrap();
        assert!(matches!(tape.backward(l), Err(Error::BackwardTwice)));
        tape.reset_grads();
        tape.backward(l).unwrap();
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut tape = Tape::new();
        let x = tape.leaf(&t(vec![2], &[2.0, 1.0]).with_grad());
        assert!(matches!(tape.backward(x), Err(Error::NonScalarLoss(_))));
    }

    #[test]
    fn detached_leaf_gets_zero_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(&t(vec![2], &[2.0, 1.0]).with_grad());
        let c = tape.leaf(&t(vec![2], &[3.0, 4.0]));
        let y = tape.mul(x, c).unwrap();
        let l = tape.sum(y).unwrap();
        tape.backward(l).unwrap();
        assert_eq!(tape.grad(c), vec![0.0, 0.0]);
        assert_eq!(tape.grad(x), vec![3.0, 4.0]);
    }

    #[test]
    fn softmax_examples() {
        assert_eq!(softmax::<f64>(&[0.0, 0.0]).unwrap(), vec![0.5, 0.5]);
        let third = softmax::<f64>(&[1.0, 1.0, 1.0]).unwrap();
        for p in third {
            assert!((p - 1.0 / 3.0).abs() < 1e-15);
        }
        let big = softmax::<f64>(&[1000.0, 0.0]).unwrap();
        assert!((big[0] - 1.0).abs() < 1e-12 && big[1].abs() < 1e-12);
        assert!(softmax::<f64>(&[f64::NAN, 0.0]).is_err());
    }

    #[test]
    fn mse_examples() {
        let a = t(vec![2], &[1.0, 0.0]);
        let b = t(vec![2], &[0.0, 1.0]);
        assert_eq!(mse_loss(&a, &a).unwrap(), 0.0);
        assert_eq!(mse_loss(&a, &b).unwrap(), 1.0);
        assert_eq!(mse_loss(&t(vec![1], &[0.5]), &t(vec![1], &[0.0])).unwrap(), 0.25);
        assert!(mse_loss(&a, &t(vec![1], &[0.0])).is_err());
    }

    #[test]
    fn cross_entropy_examples() {
        assert_eq!(cross_entropy_loss::<f64>(&[1.0, 0.0], 0).unwrap(), 0.0);
        assert!((cross_entropy_loss::<f64>(&[0.5, 0.5], 1).unwrap() - 0.693147).abs() < 1e-6);
        assert!((cross_entropy_loss::<f64>(&[0.25, 0.75], 0).unwrap() - 1.386294).abs() < 1e-6);
        assert!(cross_entropy_loss::<f64>(&[0.5, 0.5], 2).is_err());
        // Clamped: a zero probability costs -ln(1e-12), not infinity.
        assert!((cross_entropy_loss::<f64>(&[1.0, 0.0], 1).unwrap() - 27.631021).abs() < 1e-5);
    }

    #[test]
    fn finite_differences_examples() {
        let x = t(vec![4], &[0.3, -1.0, 2.0, 5.0]);
        let g = finite_diff_gradient(|v| Ok(v.data().iter().sum()), &x, 1e-5).unwrap();
        for v in g.data() {
            assert!((v - 1.0).abs() < 1e-9);
        }
        let g = finite_diff_gradient(|v| Ok(v.data()[0] * v.data()[0]), &t(vec![1], &[3.0]), 1e-5).unwrap();
        assert!((g.data()[0] - 6.0).abs() < 1e-8);
    }
}
