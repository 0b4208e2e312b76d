//! Training losses: class-weighted binary cross-entropy for volumes and
//! silhouettes, masked cosine distance for normal maps, and the weighted
//! combination. Targets are treated as ground-truth constants; gradients
//! flow only into predictions.

use crate::autodiff::{add, scale, Real, Tensor};
use crate::{Error, Result};

/// Loss weighting used by the combined objective.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub lambda_fs: f64,
    pub lambda_ss: f64,
    pub lambda_n: f64,
    pub gamma: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { lambda_fs: 0.1, lambda_ss: 0.1, lambda_n: 0.01, gamma: 0.7 }
    }
}

const CLAMP_EPS: f64 = 1e-7;
const NORMAL_EXCLUDE_EPS: f64 = 1e-6;

/// Class-weighted BCE with natural log, normalized by total element count.
/// Predictions are clamped to [eps, 1-eps]; the clamp is part of the
/// function, so saturated elements get zero gradient.
pub fn loss_bce<S: Real>(
    pred: &Tensor<S>,
    target: &Tensor<S>,
    w_pos: f64,
    w_neg: f64,
) -> Result<Tensor<S>> {
    if pred.shape() != target.shape() {
        return Err(Error::Shape(format!(
            "prediction {:?} and target {:?} shapes differ",
            pred.shape(),
            target.shape()
        )));
    }
    let n = pred.numel();
    if n == 0 {
        return Err(Error::Shape("cannot average a loss over zero elements".into()));
    }
    let pd: Vec<f64> = pred.data().iter().map(|v| (*v).to_f64()).collect();
    let td: Vec<f64> = target.data().iter().map(|v| (*v).to_f64()).collect();
    let mut acc = 0.0f64;
    for i in 0..n {
        let p = pd[i].clamp(CLAMP_EPS, 1.0 - CLAMP_EPS);
        acc += w_pos * td[i] * p.ln() + w_neg * (1.0 - td[i]) * (1.0 - p).ln();
    }
    let val = S::from_f64(-acc / n as f64);
    let pp = pred.clone();
    Ok(Tensor::from_op(
        vec![1],
        vec![val],
        vec![pred.clone()],
        Box::new(move |g, _| {
            pp.add_grad(|dp| {
                let go = g[0].to_f64();
                for i in 0..n {
                    if pd[i] <= CLAMP_EPS || pd[i] >= 1.0 - CLAMP_EPS {
                        continue;
                    }
                    let d = -(w_pos * td[i] / pd[i] - w_neg * (1.0 - td[i]) / (1.0 - pd[i]))
                        / n as f64;
                    dp[i] += S::from_f64(go * d);
                }
            });
        }),
    ))
}

/// Occupancy loss: positive voxels weighted by gamma, negative by 1-gamma.
pub fn loss_volume<S: Real>(
    pred: &Tensor<S>,
    target: &Tensor<S>,
    gamma: f64,
) -> Result<Tensor<S>> {
    if !(0.0 < gamma && gamma < 1.0) {
        return Err(Error::Config(format!("gamma must lie in (0,1), got {gamma}")));
    }
    loss_bce(pred, target, gamma, 1.0 - gamma)
}

/// Silhouette re-projection loss: plain BCE over pixels.
pub fn loss_silhouette<S: Real>(pred: &Tensor<S>, target: &Tensor<S>) -> Result<Tensor<S>> {
    loss_bce(pred, target, 1.0, 1.0)
}

/// Mean cosine distance over pixels where both normals are nonzero.
/// All pixels excluded yields 0 (with a warning): no usable signal.
pub fn loss_normal<S: Real>(pred: &Tensor<S>, target: &Tensor<S>) -> Result<Tensor<S>> {
    let s = pred.shape();
    if s != target.shape() || s.len() != 4 || s[1] != 3 {
        return Err(Error::Shape(format!(
            "normal loss needs matching [N,3,H,W] maps, got {:?} and {:?}",
            s,
            target.shape()
        )));
    }
    let (n, h, w) = (s[0], s[2], s[3]);
    let plane = h * w;
    let pd: Vec<f64> = pred.data().iter().map(|v| (*v).to_f64()).collect();
    let td: Vec<f64> = target.data().iter().map(|v| (*v).to_f64()).collect();
    let vec_at = move |d: &[f64], ni: usize, p: usize| {
        [
            d[(ni * 3) * plane + p],
            d[(ni * 3 + 1) * plane + p],
            d[(ni * 3 + 2) * plane + p],
        ]
    };
    let mut acc = 0.0f64;
    let mut count = 0usize;
    for ni in 0..n {
        for p in 0..plane {
            let a = vec_at(&pd, ni, p);
            let b = vec_at(&td, ni, p);
            let na = (a[0] * a[0] + a[1] * a[1] + a[2] * a[2]).sqrt();
            let nb = (b[0] * b[0] + b[1] * b[1] + b[2] * b[2]).sqrt();
            if na <= NORMAL_EXCLUDE_EPS || nb <= NORMAL_EXCLUDE_EPS {
                continue;
            }
            let dot = a[0] * b[0] + a[1] * b[1] + a[2] * b[2];
            acc += 1.0 - dot / (na * nb);
            count += 1;
        }
    }
    if count == 0 {
        log::warn!("normal loss: every pixel excluded (zero normals); returning 0");
        return Ok(Tensor::constant(&[1], vec![S::zero()]));
    }
    let val = S::from_f64(acc / count as f64);
    let pp = pred.clone();
    Ok(Tensor::from_op(
        vec![1],
        vec![val],
        vec![pred.clone()],
        Box::new(move |g, _| {
            pp.add_grad(|dp| {
                let go = g[0].to_f64() / count as f64;
                for ni in 0..n {
                    for p in 0..plane {
                        let a = vec_at(&pd, ni, p);
                        let b = vec_at(&td, ni, p);
                        let na = (a[0] * a[0] + a[1] * a[1] + a[2] * a[2]).sqrt();
                        let nb = (b[0] * b[0] + b[1] * b[1] + b[2] * b[2]).sqrt();
                        if na <= NORMAL_EXCLUDE_EPS || nb <= NORMAL_EXCLUDE_EPS {
                            continue;
                        }
                        let dot = a[0] * b[0] + a[1] * b[1] + a[2] * b[2];
                        for ch in 0..3 {
                            // d(1 - cos)/da = -(b/(|a||b|) - dot*a/(|a|^3 |b|))
                            let d = -(b[ch] / (na * nb) - dot * a[ch] / (na * na * na * nb));
                            dp[(ni * 3 + ch) * plane + p] += S::from_f64(go * d);
                        }
                    }
                }
            });
        }),
    ))
}

/// Weighted sum of the four components. Every component must be a finite
/// scalar; the offending component is named otherwise.
pub fn loss_combined<S: Real>(
    l_volume: &Tensor<S>,
    l_front: &Tensor<S>,
    l_side: &Tensor<S>,
    l_normal: &Tensor<S>,
    weights: &LossWeights,
) -> Result<Tensor<S>> {
    for (name, t) in [
        ("volume", l_volume),
        ("front silhouette", l_front),
        ("side silhouette", l_side),
        ("normal", l_normal),
    ] {
        if t.numel() != 1 {
            return Err(Error::Shape(format!("{name} loss is not a scalar")));
        }
        if !t.item().to_f64().is_finite() {
            return Err(Error::Numeric(format!(
                "{name} loss is not finite: {}",
                t.item()
            )));
        }
    }
    let mut total = l_volume.clone();
    total = add(&total, &scale(l_front, weights.lambda_fs))?;
    total = add(&total, &scale(l_side, weights.lambda_ss))?;
    total = add(&total, &scale(l_normal, weights.lambda_n))?;
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{mul, GradCheck};
    use proptest::prelude::*;

    #[test]
    fn volume_loss_hand_value() {
        let pred = Tensor::<f64>::full(&[2, 3, 4], 0.5);
        let target = Tensor::full(&[2, 3, 4], 1.0);
        let l = loss_volume(&pred, &target, 0.7).unwrap().item();
        assert!((l - 0.7 * 2.0f64.ln()).abs() < 1e-12, "{l}");
    }

    #[test]
    fn perfect_prediction_sits_on_the_clamp_floor() {
        let data = vec![0.0, 1.0, 1.0, 0.0, 1.0, 0.0];
        let pred = Tensor::<f64>::constant(&[6], data.clone());
        let target = Tensor::constant(&[6], data);
        let l = loss_volume(&pred, &target, 0.7).unwrap().item();
        assert!(l >= 0.0 && l <= 2e-7, "{l}");
    }

    #[test]
    fn gamma_half_is_standard_bce_halved() {
        let pred_data = vec![0.3, 0.8, 0.55, 0.2, 0.9, 0.45];
        let target_data = vec![0.0, 1.0, 1.0, 0.0, 1.0, 0.0];
        let pred = Tensor::<f64>::constant(&[6], pred_data.clone());
        let target = Tensor::constant(&[6], target_data.clone());
        let l = loss_volume(&pred, &target, 0.5).unwrap().item();
        let oracle: f64 = pred_data
            .iter()
            .zip(&target_data)
            .map(|(p, t)| -(t * p.ln() + (1.0 - t) * (1.0 - p).ln()))
            .sum::<f64>()
            / 6.0;
        assert!((l - oracle * 0.5).abs() < 1e-12);
    }

    #[test]
    fn silhouette_hand_value_and_shape_check() {
        let pred = Tensor::<f64>::full(&[4, 5], 0.5);
        let target = Tensor::zeros(&[4, 5]);
        let l = loss_silhouette(&pred, &target).unwrap().item();
        assert!((l - 2.0f64.ln()).abs() < 1e-12);
        let bad = Tensor::<f64>::zeros(&[4, 4]);
        assert!(loss_silhouette(&pred, &bad).is_err());
    }

    #[test]
    fn bce_gradient_matches_finite_differences() {
        let pred: Vec<f64> = vec![0.31, 0.72, 0.5, 0.88, 0.12, 0.66];
        let target = Tensor::constant(&[6], vec![1.0, 0.0, 1.0, 1.0, 0.0, 0.0]);
        GradCheck::default()
            .run(&[(vec![6], pred)], &|l| {
                loss_volume(&l[0], &target, 0.7).unwrap()
            })
            .unwrap();
    }

    #[test]
    fn positive_errors_outweigh_negative_at_high_gamma() {
        // Same prediction 0.5: the false-negative voxel (target 1) must get
        // a larger-magnitude gradient than the false-positive (target 0).
        let pred = Tensor::<f64>::param(&[2], vec![0.5, 0.5]);
        let target = Tensor::constant(&[2], vec![1.0, 0.0]);
        loss_volume(&pred, &target, 0.7).unwrap().backward().unwrap();
        let g = pred.grad().unwrap();
        assert!(g[0].abs() > g[1].abs());
        assert!(g[0] < 0.0 && g[1] > 0.0);
    }

    #[test]
    fn normal_loss_hits_the_three_reference_angles() {
        let h = 2;
        let w = 2;
        let n = 4.0;
        let _ = n;
        let base = vec![
            1.0, 1.0, 1.0, 1.0, // x
            0.0, 0.0, 0.0, 0.0, // y
            0.0, 0.0, 0.0, 0.0, // z
        ];
        let pred = Tensor::<f64>::constant(&[1, 3, h, w], base.clone());
        let same = Tensor::constant(&[1, 3, h, w], base.clone());
        assert!(loss_normal(&pred, &same).unwrap().item().abs() < 1e-12);

        let mut ortho = vec![0.0; 12];
        ortho[4..8].fill(1.0); // y axis
        let ortho = Tensor::constant(&[1, 3, h, w], ortho);
        assert!((loss_normal(&pred, &ortho).unwrap().item() - 1.0).abs() < 1e-12);

        let opposite = Tensor::constant(&[1, 3, h, w], base.iter().map(|v| -v).collect());
        assert!((loss_normal(&pred, &opposite).unwrap().item() - 2.0).abs() < 1e-12);
    }

    #[test]
    fn normal_loss_excludes_zero_vectors_from_the_mean() {
        // Two pixels agree (distance 0), one disagrees fully (distance 2),
        // one is background on the target side: mean over 3 = 2/3.
        let pred = Tensor::<f64>::constant(
            &[1, 3, 1, 4],
            vec![1.0, 1.0, 1.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0],
        );
        let target = Tensor::constant(
            &[1, 3, 1, 4],
            vec![1.0, 1.0, -1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0],
        );
        let l = loss_normal(&pred, &target).unwrap().item();
        assert!((l - 2.0 / 3.0).abs() < 1e-12, "{l}");

        let zeros = Tensor::<f64>::zeros(&[1, 3, 1, 4]);
        assert_eq!(loss_normal(&pred, &zeros).unwrap().item(), 0.0);
    }

    #[test]
    fn normal_gradient_matches_finite_differences() {
        let pred = vec![0.6, -0.3, 0.8, 0.2, 0.4, -0.9, -0.5, 0.7, 0.1, 0.3, -0.6, 0.5];
        let target = Tensor::constant(
            &[1, 3, 2, 2],
            vec![0.0, 1.0, 0.5, -0.2, 1.0, 0.0, 0.5, 0.9, 0.0, 0.0, 0.7, 0.4],
        );
        GradCheck::default()
            .run(&[(vec![1, 3, 2, 2], pred)], &|l| {
                loss_normal(&l[0], &target).unwrap()
            })
            .unwrap();
    }

    #[test]
    fn combined_matches_hand_weighting() {
        let one = Tensor::<f64>::scalar(1.0);
        let l = loss_combined(&one, &one, &one, &one, &LossWeights::default())
            .unwrap()
            .item();
        assert!((l - 1.21).abs() < 1e-12);

        let zero = Tensor::<f64>::scalar(0.0);
        let l0 = loss_combined(&zero, &zero, &zero, &zero, &LossWeights::default())
            .unwrap()
            .item();
        assert_eq!(l0, 0.0);
    }

    #[test]
    fn combined_rejects_non_finite_components_by_name() {
        let one = Tensor::<f64>::scalar(1.0);
        let bad = Tensor::<f64>::scalar(f64::NAN);
        let err = match loss_combined(&one, &one, &bad, &one, &LossWeights::default()) {
            Err(e) => e,
            Ok(_) => panic!("non-finite component must be rejected"),
        };
        assert!(err.to_string().contains("side silhouette"), "{err}");
        assert!(matches!(err, Error::Numeric(_)));
    }

    #[test]
    fn zero_normal_weight_gates_gradients_out() {
        let p = Tensor::<f64>::param(&[], vec![0.4]);
        let ln = mul(&p, &Tensor::scalar(1.0)).unwrap();
        let zero = Tensor::<f64>::scalar(0.0);
        let weights = LossWeights { lambda_n: 0.0, ..Default::default() };
        loss_combined(&zero, &zero, &zero, &ln, &weights)
            .unwrap()
            .backward()
            .unwrap();
        assert_eq!(p.grad().unwrap(), vec![0.0]);
    }

    proptest! {
        #[test]
        fn bce_is_bounded_by_the_clamp(values in proptest::collection::vec((0.0f64..=1.0, 0u8..=1), 1..40)) {
            let pred = Tensor::<f64>::constant(&[values.len()], values.iter().map(|(p, _)| *p).collect());
            let target = Tensor::constant(&[values.len()], values.iter().map(|(_, t)| *t as f64).collect());
            let l = loss_volume(&pred, &target, 0.7).unwrap().item();
            prop_assert!(l >= 0.0);
            prop_assert!(l <= -(CLAMP_EPS.ln()));
        }

        #[test]
        fn normal_distance_stays_in_zero_two(vecs in proptest::collection::vec((-1.0f64..1.0, -1.0f64..1.0, -1.0f64..1.0, -1.0f64..1.0, -1.0f64..1.0, -1.0f64..1.0), 1..20)) {
            let n = vecs.len();
            let mut p = vec![0.0; 3 * n];
            let mut t = vec![0.0; 3 * n];
            for (i, v) in vecs.iter().enumerate() {
                p[i] = v.0; p[n + i] = v.1; p[2 * n + i] = v.2;
                t[i] = v.3; t[n + i] = v.4; t[2 * n + i] = v.5;
            }
            let pred = Tensor::<f64>::constant(&[1, 3, 1, n], p);
            let target = Tensor::constant(&[1, 3, 1, n], t);
            let l = loss_normal(&pred, &target).unwrap().item();
            prop_assert!((0.0..=2.0 + 1e-9).contains(&l));
        }
    }
}
