//! Central finite-difference gradient checker.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, Var};
use crate::error::{numeric_err, Result};
use crate::tensor::Tensor;

pub const DEFAULT_STEP: f64 = 1e-4;

/// Which entries of each input to probe.
#[derive(Clone, Copy, Debug)]
pub enum Coverage {
    All,
    /// At most this many entries per input, chosen by a seeded sampler.
    Sample { per_input: usize, seed: u64 },
}

/// Max over checked entries of `|analytic − central| / max(1, |central|)`.
/// Detached values are held at their unperturbed values while differencing.
pub fn grad_check<F>(f: F, inputs: &[Tensor], step: f64) -> Result<f64>
where
    F: FnMut(&mut Graph, &[Var]) -> Result<Var>,
{
    grad_check_with(f, inputs, step, Coverage::All)
}

pub fn grad_check_with<F>(mut f: F, inputs: &[Tensor], step: f64, coverage: Coverage) -> Result<f64>
where
    F: FnMut(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    if !g.scalar_value(out).is_finite() {
        return Err(numeric_err!("objective is not finite"));
    }
    let frozen = g.detached_values().to_vec();
    let grads = g.backward(out)?;
    let analytic: Vec<Tensor> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| grads.get(v).unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect();

    let mut eval = |perturbed: &[Tensor]| -> Result<f64> {
        let mut g = Graph::replaying(frozen.clone());
        let vars: Vec<Var> = perturbed.iter().map(|t| g.constant(t.clone())).collect();
        let out = f(&mut g, &vars)?;
        let v = g.scalar_value(out);
        if v.is_finite() {
            Ok(v)
        } else {
            Err(numeric_err!("objective is not finite at a perturbed point"))
        }
    };

    let mut rng = match coverage {
        Coverage::Sample { seed, .. } => ChaCha8Rng::seed_from_u64(seed),
        Coverage::All => ChaCha8Rng::seed_from_u64(0),
    };
    let mut worst = 0.0f64;
    let mut work: Vec<Tensor> = inputs.to_vec();
    for (k, input) in inputs.iter().enumerate() {
        let n = input.numel();
        let entries: Vec<usize> = match coverage {
            Coverage::Sample { per_input, .. } if per_input < n => {
                let mut e = sample(&mut rng, n, per_input).into_vec();
                e.sort_unstable();
                e
            }
            _ => (0..n).collect(),
        };
        for e in entries {
            let orig = input.data()[e];
            work[k].data_mut()[e] = orig + step;
            let plus = eval(&work)?;
            work[k].data_mut()[e] = orig - step;
            let minus = eval(&work)?;
            work[k].data_mut()[e] = orig;
            let central = (plus - minus) / (2.0 * step);
            let err = (analytic[k].data()[e] - central).abs() / central.abs().max(1.0);
            worst = worst.max(err);
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_of_squares() {
        let x = Tensor::from_fn(&[3, 2], |i| i as f64 * 0.7 - 1.3);
        let err = grad_check(
            |g, v| {
                let s = g.square(v[0])?;
                g.sum_all(s)
            },
            &[x],
            DEFAULT_STEP,
        )
        .unwrap();
        assert!(err < 1e-8, "{err}");
    }

    #[test]
    fn detached_values_stay_fixed() {
        let x = Tensor::from_fn(&[1, 3], |i| i as f64 + 0.5);
        let err = grad_check(
            |g, v| {
                let d = g.detach(v[0]);
                let p = g.mul(v[0], d)?;
                g.sum_all(p)
            },
            &[x],
            DEFAULT_STEP,
        )
        .unwrap();
        assert!(err < 1e-8, "{err}");
    }

    #[test]
    fn non_finite_objective_is_reported() {
        let x = Tensor::scalar(-1.0);
        let r = grad_check(|g, v| g.log(v[0]), &[x], DEFAULT_STEP);
        assert!(r.is_err());
    }
}
