//! Finite-difference gradient checking.
//!
//! The checker rebuilds the forward graph from scratch for every probe, so it
//! is independent of the backward implementation it validates. All checks run
//! in `f64`: with a central-difference step of 1e-4 the truncation error sits
//! around 1e-8 for the smooth operators used here, far below the pass
//! threshold.

use super::Tensor;
use crate::{Error, Result};

/// Central finite differences of a scalar function at `x` with step `h`.
pub fn central_diff_grad(f: &mut dyn FnMut(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = probe[i];
            probe[i] = orig + h;
            let fp = f(&probe);
            probe[i] = orig - h;
            let fm = f(&probe);
            probe[i] = orig;
            (fp - fm) / (2.0 * h)
        })
        .collect()
}

/// Largest elementwise relative error between two gradients, with an absolute
/// floor so that near-zero pairs compare on absolute terms.
pub fn max_rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| (a - n).abs() / a.abs().max(n.abs()).max(1e-6))
        .fold(0.0, f64::max)
}

/// Gradient check harness: compares reverse-mode gradients of a scalar-valued
/// graph against central differences, input by input.
pub struct GradCheck {
    /// Central-difference step.
    pub step: f64,
    /// Maximum allowed relative error.
    pub tol: f64,
}

impl Default for GradCheck {
    fn default() -> Self {
        GradCheck { step: 1e-4, tol: 1e-4 }
    }
}

impl GradCheck {
    /// Run the check. `inputs` supplies (shape, values) for each differentiable
    /// leaf; `build` assembles the scalar output from freshly created leaves on
    /// every call. Returns the worst relative error on success.
    pub fn run(
        &self,
        inputs: &[(Vec<usize>, Vec<f64>)],
        build: &dyn Fn(&[Tensor<f64>]) -> Tensor<f64>,
    ) -> Result<f64> {
        let leaves: Vec<Tensor<f64>> =
            inputs.iter().map(|(s, d)| Tensor::param(s, d.clone())).collect();
        let out = build(&leaves);
        if out.numel() != 1 {
            return Err(Error::Shape(format!(
                "gradient check output must be scalar, got {:?}",
                out.shape()
            )));
        }
        out.backward()?;

        let mut worst = 0.0f64;
        for (j, (_, base)) in inputs.iter().enumerate() {
            let analytic = leaves[j].grad().expect("leaf gradient");
            let mut eval = |probe: &[f64]| -> f64 {
                let fresh: Vec<Tensor<f64>> = inputs
                    .iter()
                    .enumerate()
                    .map(|(jj, (s, d))| {
                        let data = if jj == j { probe.to_vec() } else { d.clone() };
                        Tensor::param(s, data)
                    })
                    .collect();
                build(&fresh).item()
            };
            let numeric = central_diff_grad(&mut eval, base, self.step);
            for (i, (&a, &n)) in analytic.iter().zip(&numeric).enumerate() {
                let rel = (a - n).abs() / a.abs().max(n.abs()).max(1e-6);
                if rel > worst {
                    worst = rel;
                }
                if rel > self.tol {
                    return Err(Error::Numeric(format!(
                        "gradient mismatch at input {j} element {i}: analytic {a:.9e}, numeric {n:.9e}, rel {rel:.3e}"
                    )));
                }
            }
        }
        Ok(worst)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::ops;

    #[test]
    fn quadratic_gradient_matches() {
        let check = GradCheck::default();
        let worst = check
            .run(&[(vec![4], vec![0.5, -1.25, 2.0, 0.1])], &|leaves| {
                ops::mul(&leaves[0], &leaves[0]).unwrap().sum()
            })
            .unwrap();
        assert!(worst < 1e-6, "worst {worst}");
    }

    #[test]
    fn detects_wrong_gradient() {
        // f(x) = x * round(x) with round() treated as a constant by backward.
        // At x = 0.5 the probes straddle the rounding jump, so the numeric
        // gradient disagrees wildly and the check must fail.
        let check = GradCheck { step: 1e-4, tol: 1e-4 };
        let r = check.run(&[(vec![1], vec![0.5])], &|leaves| {
            let rounded: Vec<f64> = leaves[0].data().iter().map(|v| v.round()).collect();
            let c = Tensor::constant(&[1], rounded);
            ops::mul(&leaves[0], &c).unwrap().sum()
        });
        assert!(r.is_err(), "graph with a hidden discontinuity must fail the check");
    }
}
