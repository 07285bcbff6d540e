//! Finite-difference verification of tape gradients.

use super::tape::{NodeId, Tape};
use super::tensor::Tensor;
use super::AutodiffError;

/// Compares the tape gradient of a scalar-valued function against central
/// finite differences with step `h`.
///
/// Returns the maximum over coordinates of
/// `|analytic - numeric| / max(1, |analytic|)`, or infinity on any numeric
/// fault during evaluation.
pub fn gradcheck<F>(f: F, x: &Tensor, h: f64) -> f64
where
    F: Fn(&mut Tape, NodeId) -> Result<NodeId, AutodiffError>,
{
    let eval = |point: &Tensor| -> Result<f64, AutodiffError> {
        let mut tape = Tape::new();
        let xid = tape.input(point.clone());
        let out = f(&mut tape, xid)?;
        let v = tape.value(out);
        if !v.is_scalar() {
            return Err(AutodiffError::NonScalarOutput(v.shape().to_vec()));
        }
        Ok(v.item())
    };

    let analytic = {
        let mut tape = Tape::new();
        let xid = tape.input(x.clone());
        let out = match f(&mut tape, xid) {
            Ok(o) => o,
            Err(_) => return f64::INFINITY,
        };
        let grads = match tape.backward(out) {
            Ok(g) => g,
            Err(_) => return f64::INFINITY,
        };
        match grads.get(xid) {
            Some(g) => g.clone(),
            // Output independent of x: zero gradient everywhere.
            None => Tensor::zeros(x.shape().to_vec()),
        }
    };

    let mut max_err: f64 = 0.0;
    for i in 0..x.len() {
        let mut plus = x.clone();
        plus.values_mut()[i] += h;
        let mut minus = x.clone();
        minus.values_mut()[i] -= h;
        let (fp, fm) = match (eval(&plus), eval(&minus)) {
            (Ok(a), Ok(b)) => (a, b),
            _ => return f64::INFINITY,
        };
        let numeric = (fp - fm) / (2.0 * h);
        let a = analytic.values()[i];
        let err = (a - numeric).abs() / a.abs().max(1.0);
        max_err = max_err.max(err);
    }
    max_err
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{RngExt, SeedableRng};

    fn random_vec(rng: &mut impl rand::Rng, n: usize) -> Tensor {
        // Keep coordinates away from activation kinks so central
        // differences stay valid.
        Tensor::vector(
            (0..n)
                .map(|_| loop {
                    let v: f64 = rng.random_range(-1.0..1.0);
                    if v.abs() > 1e-3 {
                        break v;
                    }
                })
                .collect(),
        )
    }

    #[test]
    fn elu_sum_gradcheck() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let x = random_vec(&mut rng, 8);
        let err = gradcheck(
            |tape, x| {
                let e = tape.elu(x, 1.0)?;
                tape.sum(e)
            },
            &x,
            1e-5,
        );
        assert!(err < 1e-6, "elu gradcheck error {err}");
    }

    #[test]
    fn constant_function_has_zero_gradient() {
        let x = Tensor::vector(vec![0.4, -0.2]);
        let err = gradcheck(
            |tape, _x| {
                let c = tape.constant(Tensor::scalar(5.0));
                tape.scale(c, 1.0)
            },
            &x,
            1e-5,
        );
        assert_eq!(err, 0.0);
    }

    #[test]
    fn linear_function_gradient_is_weight() {
        let w = Tensor::vector(vec![2.0, -3.0, 0.5]);
        let x = Tensor::vector(vec![0.1, 0.2, 0.3]);
        let mut tape = Tape::new();
        let xid = tape.input(x.clone());
        let wid = tape.constant(w.clone());
        let y = tape.dot(xid, wid).unwrap();
        let grads = tape.backward(y).unwrap();
        assert_eq!(grads.wrt(xid).unwrap().values(), w.values());
    }

    #[test]
    fn l2_normalize_then_dot_gradcheck() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let x = random_vec(&mut rng, 6);
        let w: Vec<f64> = (0..6).map(|_| rng.random_range(-1.0..1.0)).collect();
        let err = gradcheck(
            move |tape, x| {
                let n = tape.l2_normalize(x)?;
                let w = tape.constant(Tensor::vector(w.clone()));
                tape.dot(n, w)
            },
            &x,
            1e-5,
        );
        assert!(err < 1e-5, "l2_normalize+dot gradcheck error {err}");
    }
}
