//! Finite-difference verification harness for the tape.

use crate::error::{Error, Result};
use crate::tensor::tape::{Tape, Var};
use crate::tensor::Tensor;

fn check_step(h: f64) -> Result<()> {
    if !(1e-7..=1e-3).contains(&h) {
        return Err(Error::Parameter(format!("grad_check step {h} outside [1e-7, 1e-3]")));
    }
    Ok(())
}

/// Compares the tape gradient of a scalar function against central finite
/// differences at `point`. Returns the maximum relative error with
/// denominator `max(|analytic|, |numeric|, 1e-8)`.
///
/// The function must be smooth at `point` (kinks inside `[x-h, x+h]`
/// invalidate the comparison).
pub fn grad_check<F>(f: F, point: &Tensor, h: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let wrap = |tape: &mut Tape, vars: &[Var]| f(tape, vars[0]);
    grad_check_params(wrap, std::slice::from_ref(point), h)
}

/// Multi-input variant of [`grad_check`]: perturbs every element of every
/// input tensor and returns the worst relative error across all of them.
pub fn grad_check_params<F>(f: F, points: &[Tensor], h: f64) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    check_step(h)?;

    let eval = |tensors: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = tensors
            .iter()
            .map(|t| tape.leaf_from_parts(t.shape().to_vec(), t.data().to_vec(), true))
            .collect();
        let out = f(&mut tape, &vars)?;
        if tape.value(out).len() != 1 {
            return Err(Error::Contract("grad_check requires a scalar-valued function".into()));
        }
        Ok(tape.value(out)[0])
    };

    // Analytic gradients in one backward sweep.
    let mut tape = Tape::new();
    let vars: Vec<Var> = points
        .iter()
        .map(|t| tape.leaf_from_parts(t.shape().to_vec(), t.data().to_vec(), true))
        .collect();
    let out = f(&mut tape, &vars)?;
    if tape.value(out).len() != 1 {
        return Err(Error::Contract("grad_check requires a scalar-valued function".into()));
    }
    tape.backward(out)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(points)
        .map(|(&v, p)| tape.grad(v).map_or_else(|| vec![0.0; p.numel()], <[f64]>::to_vec))
        .collect();

    let mut worst = 0.0f64;
    let mut work: Vec<Tensor> = points.to_vec();
    for (pi, point) in points.iter().enumerate() {
        for i in 0..point.numel() {
            let orig = point.data()[i];
            work[pi].data_mut()[i] = orig + h;
            let fp = eval(&work)?;
            work[pi].data_mut()[i] = orig - h;
            let fm = eval(&work)?;
            work[pi].data_mut()[i] = orig;
            let numeric = (fp - fm) / (2.0 * h);
            let a = analytic[pi][i];
            let denom = a.abs().max(numeric.abs()).max(1e-8);
            worst = worst.max((a - numeric).abs() / denom);
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::tape::LossKind;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: Vec<usize>) -> Tensor {
        let n: usize = shape.iter().product();
        let data: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        Tensor::new(shape, data).unwrap()
    }

    #[test]
    fn sum_of_squares_is_exact_to_polynomial_precision() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let p = rand_tensor(&mut rng, vec![6]);
        let err = grad_check(
            |tape, x| {
                let sq = tape.mul(x, x)?;
                Ok(tape.sum(sq))
            },
            &p,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-8, "sum of squares rel err {err}");
    }

    #[test]
    fn step_size_outside_contract_is_rejected() {
        let p = Tensor::filled(vec![2], 1.0);
        let r = grad_check(|tape, x| Ok(tape.sum(x)), &p, 1e-2);
        assert!(matches!(r, Err(Error::Parameter(_))));
    }

    #[test]
    fn primitives_pass_finite_difference_check() {
        // 100 random points spread over the differentiable primitives.
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut checked = 0;
        while checked < 100 {
            let kind = checked % 5;
            let err = match kind {
                0 => {
                    let x = rand_tensor(&mut rng, vec![2, 2, 4, 4]);
                    let w = rand_tensor(&mut rng, vec![3, 2, 3, 3]);
                    grad_check_params(
                        |tape, vars| {
                            let y = tape.conv2d(vars[0], vars[1], 1, 1)?;
                            Ok(tape.sum(y))
                        },
                        &[x, w],
                        1e-5,
                    )
                    .unwrap()
                }
                1 => {
                    let x = rand_tensor(&mut rng, vec![3, 4]);
                    let w = rand_tensor(&mut rng, vec![2, 4]);
                    let b = rand_tensor(&mut rng, vec![2]);
                    grad_check_params(
                        |tape, vars| {
                            let y = tape.dense(vars[0], vars[1], vars[2])?;
                            let sq = tape.mul(y, y)?;
                            Ok(tape.sum(sq))
                        },
                        &[x, w, b],
                        1e-5,
                    )
                    .unwrap()
                }
                2 => {
                    // keep a margin from the relu kink so f stays smooth in [x-h, x+h]
                    let mut x = rand_tensor(&mut rng, vec![8]);
                    for v in x.data_mut() {
                        if v.abs() < 1e-3 {
                            *v += 2e-3_f64.copysign(*v + 1e-12);
                        }
                    }
                    grad_check(
                        |tape, x| {
                            let y = tape.relu(x);
                            let sq = tape.mul(y, y)?;
                            Ok(tape.sum(sq))
                        },
                        &x,
                        1e-6,
                    )
                    .unwrap()
                }
                3 => {
                    let x = rand_tensor(&mut rng, vec![8]);
                    grad_check(
                        |tape, x| {
                            let y = tape.gelu(x);
                            Ok(tape.sum(y))
                        },
                        &x,
                        1e-5,
                    )
                    .unwrap()
                }
                _ => {
                    let x = rand_tensor(&mut rng, vec![2, 3, 4, 4]);
                    let mut rng2 = ChaCha8Rng::seed_from_u64(100 + checked as u64);
                    let target = rand_tensor(&mut rng2, vec![2, 3 * 2 * 2]);
                    grad_check(
                        |tape, x| {
                            let p = tape.mean_pool2(x)?;
                            let f = tape.flatten(p);
                            tape.loss(f, &target, LossKind::Mse)
                        },
                        &x,
                        1e-5,
                    )
                    .unwrap()
                }
            };
            assert!(err < 1e-5, "primitive kind {kind} rel err {err}");
            checked += 1;
        }
    }

    #[test]
    fn cross_entropy_gradient_checks() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let logits = rand_tensor(&mut rng, vec![4, 3]);
        let targets = Tensor::new(vec![4], vec![0.0, 2.0, 1.0, 2.0]).unwrap();
        let err = grad_check(
            |tape, x| tape.loss(x, &targets, LossKind::CrossEntropy),
            &logits,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-8, "cross entropy rel err {err}");
    }
}
