//! Central finite-difference checks of analytic gradients (64-bit only).

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Which coordinates of each input get perturbed.
#[derive(Debug, Clone, Copy)]
pub enum Coverage {
    All,
    /// At most this many coordinates per input, drawn with the given seed.
    Sample { per_input: usize, seed: u64 },
}

/// Max over coordinates of `|analytic - numeric| / max(1, |analytic|, |numeric|)`.
pub fn grad_check<F>(f: F, x: &Tensor<f64>, eps: f64) -> Result<f64>
where
    F: for<'g> Fn(&'g Graph<f64>, Var<'g, f64>) -> Result<Var<'g, f64>>,
{
    grad_check_inputs(|g, xs| f(g, xs[0]), std::slice::from_ref(x), eps, Coverage::All)
}

/// [`grad_check`] over a scalar function of several inputs.
pub fn grad_check_inputs<F>(f: F, inputs: &[Tensor<f64>], eps: f64, coverage: Coverage) -> Result<f64>
where
    F: for<'g> Fn(&'g Graph<f64>, &[Var<'g, f64>]) -> Result<Var<'g, f64>>,
{
    let eval = |values: &[Tensor<f64>]| -> Result<f64> {
        let g = Graph::new();
        let vars: Vec<_> = values.iter().map(|v| g.constant(v.clone())).collect();
        let out = f(&g, &vars)?;
        scalar_of(&out)
    };

    let g = Graph::new();
    let vars: Vec<_> = inputs.iter().map(|v| g.param(v.clone())).collect();
    let out = f(&g, &vars)?;
    scalar_of(&out)?;
    let grads = g.backward(out)?;

    let mut worst = 0.0f64;
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    for (idx, var) in vars.iter().enumerate() {
        let analytic = match grads.get(*var) {
            Some(t) => t.clone(),
            None => Tensor::zeros(inputs[idx].shape()),
        };
        let n = inputs[idx].numel();
        let coords: Vec<usize> = match coverage {
            Coverage::All => (0..n).collect(),
            Coverage::Sample { per_input, seed } if per_input < n => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(idx as u64));
                let mut c = sample(&mut rng, n, per_input).into_vec();
                c.sort_unstable();
                c
            }
            Coverage::Sample { .. } => (0..n).collect(),
        };
        for c in coords {
            let orig = work[idx].data()[c];
            work[idx].data_mut()[c] = orig + eps;
            let plus = eval(&work)?;
            work[idx].data_mut()[c] = orig - eps;
            let minus = eval(&work)?;
            work[idx].data_mut()[c] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            let a = analytic.data()[c];
            let err = (a - numeric).abs() / 1f64.max(a.abs()).max(numeric.abs());
            worst = worst.max(err);
        }
    }
    Ok(worst)
}

fn scalar_of(v: &Var<'_, f64>) -> Result<f64> {
    let val = v.value();
    if val.numel() != 1 {
        return Err(Error::Shape(format!("grad_check needs a scalar function, got shape {:?}", val.shape())));
    }
    Ok(val.item())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_distr::{Distribution, StandardNormal};

    fn random(shape: &[usize], seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| StandardNormal.sample(&mut rng)).collect()).unwrap()
    }

    #[test]
    fn sum_is_exact() {
        let x = random(&[3, 4], 1);
        let err = grad_check(|_, x| Ok(x.sum()), &x, 1e-5).unwrap();
        assert!(err < 1e-9, "{err}");
    }

    #[test]
    fn matmul_gradient() {
        let inputs = [random(&[3, 4], 2), random(&[4, 2], 3)];
        let err = grad_check_inputs(|_, v| Ok(v[0].matmul(&v[1])?.sum()), &inputs, 1e-5, Coverage::All).unwrap();
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn conv2d_gradient() {
        let inputs = [random(&[2, 3, 5, 5], 4), random(&[4, 3, 3, 3], 5)];
        for &(stride, pad) in &[(1, 0), (1, 1), (2, 1)] {
            let err = grad_check_inputs(
                |g, v| {
                    let y = v[0].conv2d(&v[1], stride, pad)?;
                    // weight the output so the gradient is not uniform
                    let w = g.constant(random(&y.shape(), 6));
                    Ok(y.mul(&w)?.sum())
                },
                &inputs,
                1e-5,
                Coverage::All,
            )
            .unwrap();
            assert!(err < 1e-5, "stride {stride} pad {pad}: {err}");
        }
    }

    #[test]
    fn elementwise_and_reduction_gradients() {
        let inputs = [random(&[3, 4], 7), random(&[3, 4], 8), random(&[4], 9)];
        let err = grad_check_inputs(
            |g, v| {
                let a = v[0].mul(&v[1])?.sub(&v[0].scale(0.3))?.add(&v[1].relu())?;
                let a = a.add_channel_bias(&v[2])?;
                let w = g.constant(random(&[3], 10));
                a.sum_axis(1)?.mul(&w)?.sum().add(&a.mean())
            },
            &inputs,
            1e-5,
            Coverage::All,
        )
        .unwrap();
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn softmax_family_gradients() {
        let z = random(&[3, 5], 11);
        for &t in &[1.0, 4.0] {
            let err = grad_check(
                |g, z| {
                    let w = g.constant(random(&[3, 5], 12));
                    let a = z.softmax(t)?.mul(&w)?.sum();
                    let b = z.log_softmax(t)?.mul(&w)?.sum();
                    a.add(&b)
                },
                &z,
                1e-5,
            )
            .unwrap();
            assert!(err < 1e-4, "T={t}: {err}");
        }
    }

    #[test]
    fn norm_and_pool_gradients() {
        let x = random(&[2, 3, 4, 4], 13);
        let err = grad_check(
            |g, x| {
                let p = x.avg_pool2d(2, 2)?.reshape(&[2, 12])?;
                let n = p.row_l2_normalize()?;
                let w = g.constant(random(&[2, 12], 14));
                let r = x.global_avg_pool()?.row_norm()?.sum();
                n.mul(&w)?.sum().add(&r)?.add(&p.transpose()?.matmul(&n)?.sum())
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "{err}");
    }
}
