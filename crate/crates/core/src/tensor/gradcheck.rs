//! Central-difference verification of analytic gradients. Meaningful in
//! double precision only; single precision drowns the comparison in rounding.

use super::{invalid, Scalar, Tensor, TensorError};

/// Step size giving the best truncation/rounding trade-off for f64.
pub const DEFAULT_FD_EPS: f64 = 1e-5;

/// Compare the analytic gradient of `f` at `x` against central differences.
///
/// Returns the maximum over coordinates of
/// `|analytic − numeric| / max(|analytic|, |numeric|, 1e-4)`. The 1e-4 floor
/// makes near-zero coordinates an absolute comparison: with order-one
/// function values, central differences carry rounding noise around
/// `machine_eps·|f|/eps ≈ 1e-10`, so ratios against anything smaller than
/// 1e-4 would report noise, not gradient error. Key-projection biases are the
/// canonical case: softmax is exactly invariant to them, the true gradient is
/// zero, and the numeric probe still returns ±1e-10.
pub fn finite_diff_check<T, F>(f: F, x: &Tensor<T>, eps: f64) -> Result<f64, TensorError>
where
    T: Scalar,
    F: Fn(&Tensor<T>) -> Result<Tensor<T>, TensorError>,
{
    finite_diff_check_multi(|xs| f(&xs[0]), &[x.clone()], eps)
}

/// Multi-input variant of [`finite_diff_check`]; the error is maximized over
/// every coordinate of every input.
pub fn finite_diff_check_multi<T, F>(
    f: F,
    inputs: &[Tensor<T>],
    eps: f64,
) -> Result<f64, TensorError>
where
    T: Scalar,
    F: Fn(&[Tensor<T>]) -> Result<Tensor<T>, TensorError>,
{
    if inputs.is_empty() {
        return Err(invalid("finite_diff_check", "no inputs"));
    }
    let vars: Vec<Tensor<T>> = inputs
        .iter()
        .map(|x| Tensor::param(x.shape().to_vec(), x.data().to_vec()))
        .collect::<Result<_, _>>()?;
    let loss = f(&vars)?;
    if loss.numel() != 1 {
        return Err(TensorError::NotScalar(loss.shape().to_vec()));
    }
    loss.backward()?;

    let step = T::from_f64(eps);
    let mut max_rel = 0.0f64;
    for (vi, var) in vars.iter().enumerate() {
        let analytic = var
            .grad()
            .unwrap_or_else(|| vec![T::zero(); var.numel()]);
        let base = var.data().to_vec();
        for i in 0..base.len() {
            let eval = |value: T| -> Result<f64, TensorError> {
                let mut data = base.clone();
                data[i] = value;
                let probe = Tensor::from_vec(var.shape().to_vec(), data)?;
                let mut args: Vec<Tensor<T>> = vars.clone();
                args[vi] = probe;
                Ok(f(&args)?.item().as_f64())
            };
            let fp = eval(base[i] + step)?;
            let fm = eval(base[i] - step)?;
            let numeric = (fp - fm) / (2.0 * eps);
            let a = analytic[i].as_f64();
            let denom = a.abs().max(numeric.abs()).max(1e-4);
            let rel = (a - numeric).abs() / denom;
            if rel > max_rel {
                max_rel = rel;
            }
        }
    }
    Ok(max_rel)
}

#[cfg(test)]
mod tests {
    use super::super::{concat_last, embedding_lookup};
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn randn(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
        let n = shape.iter().product();
        let data: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        Tensor::from_vec(shape.to_vec(), data).unwrap()
    }

    #[test]
    fn linear_function_is_exact() {
        let x = Tensor::from_vec(vec![4], vec![0.3, -1.2, 0.9, 2.0]).unwrap();
        let w = Tensor::from_vec(vec![4], vec![2.0, -0.5, 1.5, 0.25]).unwrap();
        let err = finite_diff_check(|x| Ok(x.mul(&w)?.sum_all()), &x, DEFAULT_FD_EPS).unwrap();
        assert!(err < 1e-9, "relative error {err}");
    }

    #[test]
    fn softmax_on_random_vector() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = randn(&mut rng, &[4]);
        let w = randn(&mut rng, &[4]);
        let err = finite_diff_check(
            |x| Ok(x.softmax_lastdim()?.mul(&w)?.sum_all()),
            &x,
            DEFAULT_FD_EPS,
        )
        .unwrap();
        assert!(err < 1e-6, "relative error {err}");
    }

    #[test]
    fn reused_tensor_sums_both_paths() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = randn(&mut rng, &[3, 3]);
        let err = finite_diff_check(
            |x| Ok(x.matmul(x)?.add(x)?.sum_all()),
            &x,
            DEFAULT_FD_EPS,
        )
        .unwrap();
        assert!(err < 1e-6, "relative error {err}");
    }

    #[test]
    fn multi_input_covers_every_argument() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let a = randn(&mut rng, &[2, 3]);
        let b = randn(&mut rng, &[2, 1]);
        let err = finite_diff_check_multi(
            |args| Ok(concat_last(&[args[0].clone(), args[1].clone()])?.tanh().sum_all()),
            &[a, b],
            DEFAULT_FD_EPS,
        )
        .unwrap();
        assert!(err < 1e-6, "relative error {err}");
    }

    #[test]
    fn embedding_table_gradient_checks() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let table = randn(&mut rng, &[5, 3]);
        let err = finite_diff_check(
            |t| Ok(embedding_lookup(t, &[1, 4, 1])?.sigmoid().sum_all()),
            &table,
            DEFAULT_FD_EPS,
        )
        .unwrap();
        assert!(err < 1e-6, "relative error {err}");
    }
}
