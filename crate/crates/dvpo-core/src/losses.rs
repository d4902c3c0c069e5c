//! Critic loss components and their weighted composite.
//!
//! Seven distribution-shape components ride on top of plain quantile Huber
//! regression: a risk-weighted variant, squared tail-sum gaps for the lower
//! and upper tails, a one-sided mean-shift hinge, one-sided tail-variance
//! hinges, a tail-curvature hinge, and a cross-head consistency penalty.
//! Every operation returns the exact analytic gradient with respect to the
//! predicted quantiles; hinges and sort ties make the losses piecewise
//! smooth, and the gradient convention at a hinge boundary is "inactive"
//! (zero), so finite-difference checks must stay away from kinks.

use serde::Serialize;

use crate::critic::ensemble_quantiles;
use crate::error::{Error, Result};
use crate::quantile::{QuantileGrid, QuantileVector, TailSpec};

/// Coefficients of the composite critic objective. The quantile regression
/// term always has weight 1; everything else scales by its `w_*` field.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub w_risk: f64,
    pub w_cvar: f64,
    pub w_gain: f64,
    pub w_shift: f64,
    pub w_shape: f64,
    pub w_curv: f64,
    pub w_consist: f64,
    /// Risk-aversion exponent of the per-quantile weighting; 0 disables it.
    pub risk_gamma: f64,
    pub huber_delta: f64,
    pub tails: TailSpec,
}

impl LossWeights {
    /// Default coefficients used by the shipped configs.
    pub fn defaults(tails: TailSpec) -> Self {
        LossWeights {
            w_risk: 0.3,
            w_cvar: 0.5,
            w_gain: 0.3,
            w_shift: 0.2,
            w_shape: 0.1,
            w_curv: 0.2,
            w_consist: 0.1,
            risk_gamma: 1.0,
            huber_delta: 1.0,
            tails,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let weights = [
            ("losses.w_risk", self.w_risk),
            ("losses.w_cvar", self.w_cvar),
            ("losses.w_gain", self.w_gain),
            ("losses.w_shift", self.w_shift),
            ("losses.w_shape", self.w_shape),
            ("losses.w_curv", self.w_curv),
            ("losses.w_consist", self.w_consist),
            ("losses.risk_gamma", self.risk_gamma),
        ];
        for (path, w) in weights {
            if !(w >= 0.0 && w.is_finite()) {
                return Err(Error::config(path, "must be finite and nonnegative"));
            }
        }
        if !(self.huber_delta > 0.0 && self.huber_delta.is_finite()) {
            return Err(Error::config("losses.huber_delta", "must be positive"));
        }
        Ok(())
    }
}

/// Per-component losses plus the weighted total.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LossBreakdown {
    pub qr: f64,
    pub risk: f64,
    pub cvar: f64,
    pub gain: f64,
    pub shift: f64,
    pub shape: f64,
    pub curv: f64,
    pub consist: f64,
    pub total: f64,
}

pub fn huber(u: f64, delta: f64) -> f64 {
    if u.abs() <= delta {
        0.5 * u * u
    } else {
        delta * (u.abs() - 0.5 * delta)
    }
}

pub fn huber_grad(u: f64, delta: f64) -> f64 {
    if u.abs() <= delta {
        u
    } else {
        delta * u.signum()
    }
}

fn check_same_len(pred: &QuantileVector, target: &QuantileVector) -> Result<()> {
    if pred.len() != target.len() {
        return Err(Error::ShapeMismatch {
            what: "pred vs target quantiles",
            expected: target.len(),
            got: pred.len(),
        });
    }
    Ok(())
}

/// Quantile Huber regression of pred toward target. The residual u_j runs
/// target minus pred, so underprediction (u > 0) at level τ̂ is weighted τ̂
/// and overprediction 1−τ̂.
pub fn qr_loss(
    pred: &QuantileVector,
    target: &QuantileVector,
    grid: &QuantileGrid,
    delta: f64,
) -> Result<(f64, Vec<f64>)> {
    weighted_qr(pred, target, grid, delta, None)
}

/// Per-quantile risk weights (1 − τ̂ + 1/M)^risk_gamma, renormalized to mean
/// one over the grid. Monotone nonincreasing in τ̂; uniformly 1 when
/// risk_gamma is 0.
pub fn risk_weights(grid: &QuantileGrid, risk_gamma: f64) -> Vec<f64> {
    let m = grid.m() as f64;
    let mut w: Vec<f64> = grid
        .levels()
        .iter()
        .map(|tau| (1.0 - tau + 1.0 / m).powf(risk_gamma))
        .collect();
    let mean = w.iter().sum::<f64>() / m;
    for x in &mut w {
        *x /= mean;
    }
    w
}

/// Quantile Huber regression with extra emphasis on low quantile levels.
pub fn risk_loss(
    pred: &QuantileVector,
    target: &QuantileVector,
    grid: &QuantileGrid,
    delta: f64,
    risk_gamma: f64,
) -> Result<(f64, Vec<f64>)> {
    let rw = risk_weights(grid, risk_gamma);
    weighted_qr(pred, target, grid, delta, Some(&rw))
}

fn weighted_qr(
    pred: &QuantileVector,
    target: &QuantileVector,
    grid: &QuantileGrid,
    delta: f64,
    per_level: Option<&[f64]>,
) -> Result<(f64, Vec<f64>)> {
    check_same_len(pred, target)?;
    if pred.len() != grid.m() {
        return Err(Error::ShapeMismatch {
            what: "quantiles vs grid",
            expected: grid.m(),
            got: pred.len(),
        });
    }
    let m = grid.m() as f64;
    let mut loss = 0.0;
    let mut grad = vec![0.0; grid.m()];
    for j in 0..grid.m() {
        let u = target[j] - pred[j];
        let indicator = if u < 0.0 { 1.0 } else { 0.0 };
        let kappa = (grid.levels()[j] - indicator).abs();
        let w = per_level.map_or(1.0, |rw| rw[j]);
        loss += w * kappa * huber(u, delta);
        // u = target − pred, so du/dpred = −1.
        grad[j] = -w * kappa * huber_grad(u, delta) / m;
    }
    Ok((loss / m, grad))
}

/// Squared gap between the summed lower tails, in the order that sorts the
/// target; the same permutation indexes pred. Pins down the worst-case
/// region of the distribution.
pub fn cvar_loss(
    pred: &QuantileVector,
    target: &QuantileVector,
    tails: &TailSpec,
) -> Result<(f64, Vec<f64>)> {
    if !tails.lower_enabled() {
        return Err(Error::config("tails.alpha", "lower tail is empty"));
    }
    tail_sum_gap(pred, target, tails.lower_sorted_range(), tails.k_alpha())
}

/// Upper-tail mirror of [`cvar_loss`], pinning the high-value region.
pub fn gain_loss(
    pred: &QuantileVector,
    target: &QuantileVector,
    tails: &TailSpec,
) -> Result<(f64, Vec<f64>)> {
    if !tails.upper_enabled() {
        return Err(Error::config("tails.beta", "upper tail is empty"));
    }
    tail_sum_gap(pred, target, tails.upper_sorted_range(), tails.k_beta())
}

fn tail_sum_gap(
    pred: &QuantileVector,
    target: &QuantileVector,
    sorted_positions: std::ops::Range<usize>,
    k: usize,
) -> Result<(f64, Vec<f64>)> {
    check_same_len(pred, target)?;
    let perm = target.sort_permutation();
    let mut gap = 0.0;
    for p in sorted_positions.clone() {
        gap += target[perm[p]] - pred[perm[p]];
    }
    let kf = k as f64;
    let loss = gap * gap / kf;
    let mut grad = vec![0.0; pred.len()];
    for p in sorted_positions {
        grad[perm[p]] = -2.0 * gap / kf;
    }
    Ok((loss, grad))
}

/// Hinge on mean underestimation: positive only when the predicted mean sits
/// below the target mean.
pub fn shift_loss(pred: &QuantileVector, target: &QuantileVector) -> Result<(f64, Vec<f64>)> {
    check_same_len(pred, target)?;
    let gap = target.mean() - pred.mean();
    let m = pred.len() as f64;
    if gap > 0.0 {
        Ok((gap, vec![-1.0 / m; pred.len()]))
    } else {
        Ok((0.0, vec![0.0; pred.len()]))
    }
}

/// Positions of a tail within a vector's own sorted order.
fn own_tail_indices(q: &QuantileVector, range: std::ops::Range<usize>) -> Vec<usize> {
    let perm = q.sort_permutation();
    range.map(|p| perm[p]).collect()
}

/// One-sided tail-variance hinges: the lower tail may not be wider than the
/// target's, the upper tail may not be narrower. Each side's variance is
/// taken over that vector's own sorted tail.
pub fn shape_loss(
    pred: &QuantileVector,
    target: &QuantileVector,
    tails: &TailSpec,
) -> Result<(f64, Vec<f64>)> {
    check_same_len(pred, target)?;
    let mut loss = 0.0;
    let mut grad = vec![0.0; pred.len()];
    if tails.lower_enabled() {
        let pred_idx = own_tail_indices(pred, tails.lower_sorted_range());
        let target_idx = own_tail_indices(target, tails.lower_sorted_range());
        let excess = pred.tail_variance(&pred_idx)? - target.tail_variance(&target_idx)?;
        if excess > 0.0 {
            loss += excess;
            add_variance_grad(pred, &pred_idx, 1.0, &mut grad);
        }
    }
    if tails.upper_enabled() {
        let pred_idx = own_tail_indices(pred, tails.upper_sorted_range());
        let target_idx = own_tail_indices(target, tails.upper_sorted_range());
        let deficit = target.tail_variance(&target_idx)? - pred.tail_variance(&pred_idx)?;
        if deficit > 0.0 {
            loss += deficit;
            add_variance_grad(pred, &pred_idx, -1.0, &mut grad);
        }
    }
    Ok((loss, grad))
}

/// Accumulate sign · dVar(pred; idx)/dpred into grad.
fn add_variance_grad(pred: &QuantileVector, idx: &[usize], sign: f64, grad: &mut [f64]) {
    let k = idx.len() as f64;
    let mean = idx.iter().map(|&i| pred[i]).sum::<f64>() / k;
    for &i in idx {
        grad[i] += sign * 2.0 * (pred[i] - mean) / k;
    }
}

/// Hinges on the mean second difference of the sorted quantile curve inside
/// each tail: convex curvature is penalized in the lower tail, concave in
/// the upper. Only interior sorted positions (both neighbors present) count;
/// a tail whose interior intersection is empty contributes zero.
pub fn curvature_loss(pred: &QuantileVector, tails: &TailSpec) -> Result<(f64, Vec<f64>)> {
    let m = pred.len();
    if m < 3 {
        return Err(Error::config(
            "quantile.m",
            "curvature needs at least 3 quantile points",
        ));
    }
    let perm = pred.sort_permutation();
    let sorted: Vec<f64> = perm.iter().map(|&i| pred[i]).collect();
    let interior = |p: usize| p >= 1 && p <= m - 2;
    let lower: Vec<usize> = tails.lower_sorted_range().filter(|&p| interior(p)).collect();
    let upper: Vec<usize> = tails.upper_sorted_range().filter(|&p| interior(p)).collect();

    let mean_second_diff = |set: &[usize]| -> f64 {
        set.iter()
            .map(|&p| sorted[p + 1] - 2.0 * sorted[p] + sorted[p - 1])
            .sum::<f64>()
            / set.len() as f64
    };
    // d E[Δ²]/d sorted[q], accumulated over the stencil of every set member.
    let stencil = |set: &[usize], sign: f64, d_sorted: &mut [f64]| {
        let k = set.len() as f64;
        for &p in set {
            d_sorted[p + 1] += sign / k;
            d_sorted[p] -= sign * 2.0 / k;
            d_sorted[p - 1] += sign / k;
        }
    };

    let mut loss = 0.0;
    let mut d_sorted = vec![0.0; m];
    if !lower.is_empty() {
        let e = mean_second_diff(&lower);
        if e > 0.0 {
            loss += e;
            stencil(&lower, 1.0, &mut d_sorted);
        }
    }
    if !upper.is_empty() {
        let e = mean_second_diff(&upper);
        if e < 0.0 {
            loss -= e;
            stencil(&upper, -1.0, &mut d_sorted);
        }
    }
    let mut grad = vec![0.0; m];
    for (p, &i) in perm.iter().enumerate() {
        grad[i] = d_sorted[p];
    }
    Ok((loss, grad))
}

/// Mean squared L2 distance over all unordered head pairs. Zero for a single
/// head.
pub fn consistency_loss(heads: &[QuantileVector]) -> Result<(f64, Vec<Vec<f64>>)> {
    let n = heads.len();
    if n == 0 {
        return Err(Error::Empty("consistency heads"));
    }
    let m = heads[0].len();
    for h in heads {
        if h.len() != m {
            return Err(Error::ShapeMismatch {
                what: "consistency head length",
                expected: m,
                got: h.len(),
            });
        }
    }
    if n == 1 {
        return Ok((0.0, vec![vec![0.0; m]]));
    }
    let n_pair = (n * (n - 1) / 2) as f64;
    let mut loss = 0.0;
    for i in 0..n {
        for j in i + 1..n {
            for q in 0..m {
                let d = heads[i][q] - heads[j][q];
                loss += d * d;
            }
        }
    }
    loss /= n_pair;
    // d/dθ_{i,q} = (2/N_pair) (N·θ_{i,q} − Σ_j θ_{j,q}).
    let col_sums: Vec<f64> = (0..m).map(|q| heads.iter().map(|h| h[q]).sum()).collect();
    let grads = heads
        .iter()
        .map(|h| {
            (0..m)
                .map(|q| 2.0 / n_pair * (n as f64 * h[q] - col_sums[q]))
                .collect()
        })
        .collect();
    Ok((loss, grads))
}

/// Full critic objective for one state: every distribution-shape component
/// evaluated on the ensemble average versus the target, plus the cross-head
/// consistency term, combined with unit weight on quantile regression.
/// Components whose tail is disabled contribute zero; the curvature term is
/// only evaluated when its weight is positive, so single-point grids work as
/// long as w_curv is 0.
///
/// Returns the breakdown and per-head gradients: each ensemble-level
/// gradient reaches a head scaled by 1/N, consistency directly.
pub fn composite_loss(
    heads: &[QuantileVector],
    target: &QuantileVector,
    weights: &LossWeights,
    grid: &QuantileGrid,
) -> Result<(LossBreakdown, Vec<Vec<f64>>)> {
    weights.validate()?;
    let ensemble = ensemble_quantiles(heads)?;
    check_same_len(&ensemble, target)?;
    let m = grid.m();
    let n = heads.len() as f64;

    let mut d_ens = vec![0.0; m];
    let mut weighted = |result: (f64, Vec<f64>), w: f64| -> f64 {
        for (acc, g) in d_ens.iter_mut().zip(&result.1) {
            *acc += w * g;
        }
        result.0
    };

    let qr = weighted(qr_loss(&ensemble, target, grid, weights.huber_delta)?, 1.0);
    let risk = if weights.w_risk > 0.0 {
        weighted(
            risk_loss(
                &ensemble,
                target,
                grid,
                weights.huber_delta,
                weights.risk_gamma,
            )?,
            weights.w_risk,
        )
    } else {
        0.0
    };
    let cvar = if weights.w_cvar > 0.0 && weights.tails.lower_enabled() {
        weighted(cvar_loss(&ensemble, target, &weights.tails)?, weights.w_cvar)
    } else {
        0.0
    };
    let gain = if weights.w_gain > 0.0 && weights.tails.upper_enabled() {
        weighted(gain_loss(&ensemble, target, &weights.tails)?, weights.w_gain)
    } else {
        0.0
    };
    let shift = if weights.w_shift > 0.0 {
        weighted(shift_loss(&ensemble, target)?, weights.w_shift)
    } else {
        0.0
    };
    let shape = if weights.w_shape > 0.0 {
        weighted(shape_loss(&ensemble, target, &weights.tails)?, weights.w_shape)
    } else {
        0.0
    };
    let curv = if weights.w_curv > 0.0 {
        weighted(curvature_loss(&ensemble, &weights.tails)?, weights.w_curv)
    } else {
        0.0
    };

    let (consist, consist_grads) = consistency_loss(heads)?;

    let total = qr
        + weights.w_risk * risk
        + weights.w_cvar * cvar
        + weights.w_gain * gain
        + weights.w_shift * shift
        + weights.w_shape * shape
        + weights.w_curv * curv
        + weights.w_consist * consist;

    let per_head: Vec<Vec<f64>> = consist_grads
        .into_iter()
        .map(|cg| {
            (0..m)
                .map(|j| d_ens[j] / n + weights.w_consist * cg[j])
                .collect()
        })
        .collect();

    Ok((
        LossBreakdown {
            qr,
            risk,
            cvar,
            gain,
            shift,
            shape,
            curv,
            consist,
            total,
        },
        per_head,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{central_diff, max_rel_err};
    use crate::rng::{Rng, Stream};

    fn qv(vals: &[f64]) -> QuantileVector {
        QuantileVector::new(vals.to_vec()).unwrap()
    }

    fn grid(m: usize) -> QuantileGrid {
        QuantileGrid::new(m).unwrap()
    }

    #[test]
    fn huber_hand_values() {
        assert_eq!(huber(0.0, 1.0), 0.0);
        assert_eq!(huber(2.0, 1.0), 1.5);
        // Both branches agree at the boundary.
        assert_eq!(huber(1.0, 1.0), 0.5);
        assert!((huber(1.0 + 1e-12, 1.0) - 0.5).abs() < 1e-11);
        assert_eq!(huber_grad(0.5, 1.0), 0.5);
        assert_eq!(huber_grad(-3.0, 1.0), -1.0);
    }

    #[test]
    fn qr_zero_when_pred_equals_target() {
        let g = grid(5);
        let q = qv(&[1.0, 2.0, 3.0, 4.0, 5.0]);
        let (loss, gradv) = qr_loss(&q, &q, &g, 1.0).unwrap();
        assert_eq!(loss, 0.0);
        assert!(gradv.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn qr_single_point_hand_case() {
        let g = grid(1);
        let (loss, _) = qr_loss(&qv(&[0.0]), &qv(&[1.0]), &g, 1.0).unwrap();
        assert_eq!(loss, 0.5);
    }

    #[test]
    fn qr_single_point_ignores_overprediction() {
        // At the top level τ̂ = 1 the overprediction weight |τ̂ − 1| is zero,
        // which is why a one-point grid cannot act as a symmetric critic.
        let g = grid(1);
        let (loss, gradv) = qr_loss(&qv(&[1.0]), &qv(&[0.0]), &g, 1.0).unwrap();
        assert_eq!(loss, 0.0);
        assert_eq!(gradv, vec![0.0]);
    }

    #[test]
    fn qr_matches_literal_formula_oracle() {
        let g = grid(8);
        let mut rng = Rng::substream(20, Stream::Init, &[]);
        for _ in 0..20 {
            let pred = qv(&(0..8).map(|_| rng.normal() * 2.0).collect::<Vec<_>>());
            let target = qv(&(0..8).map(|_| rng.normal() * 2.0).collect::<Vec<_>>());
            let (loss, _) = qr_loss(&pred, &target, &g, 1.0).unwrap();
            let mut oracle = 0.0;
            for j in 0..8 {
                let u = target[j] - pred[j];
                let ind = if u < 0.0 { 1.0 } else { 0.0 };
                oracle += (g.levels()[j] - ind).abs() * huber(u, 1.0);
            }
            oracle /= 8.0;
            assert!((loss - oracle).abs() < 1e-14);
        }
    }

    #[test]
    fn qr_gradient_matches_finite_differences() {
        let g = grid(4);
        // Residuals stay away from 0 and ±δ so no kink sits inside the
        // probe interval.
        let pred = qv(&[0.4, 1.9, -0.3, 2.5]);
        let target = qv(&[0.0, 1.0, 0.4, 0.7]);
        let base = pred.as_slice().to_vec();
        let f = |x: &[f64]| qr_loss(&qv(x), &target, &g, 1.0).unwrap().0;
        let numeric = central_diff(f, &base, 1e-6);
        let (_, analytic) = qr_loss(&pred, &target, &g, 1.0).unwrap();
        assert!(max_rel_err(&analytic, &numeric, 1.0) < 1e-8);
    }

    #[test]
    fn risk_weights_uniform_at_zero_gamma() {
        let w = risk_weights(&grid(16), 0.0);
        assert!(w.iter().all(|&x| x == 1.0));
    }

    #[test]
    fn risk_weights_favor_low_quantiles() {
        let g = grid(10);
        let w = risk_weights(&g, 2.0);
        // τ̂ = 0.1 is index 0, τ̂ = 0.9 is index 8.
        assert!(w[0] > w[8]);
        for pair in w.windows(2) {
            assert!(pair[0] >= pair[1]);
        }
    }

    #[test]
    fn risk_weights_mean_is_one() {
        let mut rng = Rng::substream(21, Stream::Init, &[]);
        for _ in 0..10 {
            let gamma = rng.uniform(0.0, 3.0);
            let w = risk_weights(&grid(200), gamma);
            let mean = w.iter().sum::<f64>() / 200.0;
            assert!((mean - 1.0).abs() < 1e-12, "gamma {gamma} mean {mean}");
        }
    }

    #[test]
    fn risk_loss_degenerates_to_qr_at_zero_gamma() {
        let g = grid(8);
        let mut rng = Rng::substream(22, Stream::Init, &[]);
        let pred = qv(&(0..8).map(|_| rng.normal()).collect::<Vec<_>>());
        let target = qv(&(0..8).map(|_| rng.normal()).collect::<Vec<_>>());
        let (qr, qr_grad) = qr_loss(&pred, &target, &g, 1.0).unwrap();
        let (risk, risk_grad) = risk_loss(&pred, &target, &g, 1.0, 0.0).unwrap();
        assert_eq!(qr, risk);
        assert_eq!(qr_grad, risk_grad);
    }

    #[test]
    fn risk_loss_matches_literal_formula_oracle() {
        let g = grid(8);
        let mut rng = Rng::substream(23, Stream::Init, &[]);
        let pred = qv(&(0..8).map(|_| rng.normal()).collect::<Vec<_>>());
        let target = qv(&(0..8).map(|_| rng.normal()).collect::<Vec<_>>());
        let (loss, _) = risk_loss(&pred, &target, &g, 1.0, 1.7).unwrap();
        let w = risk_weights(&g, 1.7);
        let mut oracle = 0.0;
        for j in 0..8 {
            let u = target[j] - pred[j];
            let ind = if u < 0.0 { 1.0 } else { 0.0 };
            oracle += w[j] * (g.levels()[j] - ind).abs() * huber(u, 1.0);
        }
        oracle /= 8.0;
        assert!((loss - oracle).abs() < 1e-14);
    }

    #[test]
    fn cvar_hand_case() {
        let tails = TailSpec::new(0.5, 0.25, 4).unwrap();
        let pred = qv(&[1.0, 2.0, 7.0, 9.0]);
        let target = qv(&[0.0, 1.0, 2.0, 3.0]);
        // Lower-tail sums: target 0+1, pred 1+2, gap −2, loss 4/2 = 2.
        let (loss, gradv) = cvar_loss(&pred, &target, &tails).unwrap();
        assert_eq!(loss, 2.0);
        assert_eq!(gradv, vec![2.0, 2.0, 0.0, 0.0]);
    }

    #[test]
    fn cvar_zero_on_equal_tail_sums() {
        let tails = TailSpec::new(0.5, 0.25, 4).unwrap();
        // Lower-tail values differ but sum to the same 1.0.
        let pred = qv(&[0.4, 0.6, 5.0, 6.0]);
        let target = qv(&[0.0, 1.0, 2.0, 3.0]);
        let (loss, gradv) = cvar_loss(&pred, &target, &tails).unwrap();
        assert_eq!(loss, 0.0);
        assert!(gradv.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn cvar_is_quadratic_in_the_gap() {
        let tails = TailSpec::new(0.5, 0.25, 4).unwrap();
        let pred = qv(&[1.0, 2.0, 7.0, 9.0]);
        let target = qv(&[0.0, 1.0, 2.0, 3.0]);
        let double = |q: &QuantileVector| qv(&q.as_slice().iter().map(|x| 2.0 * x).collect::<Vec<_>>());
        let (loss, _) = cvar_loss(&pred, &target, &tails).unwrap();
        let (loss2, _) = cvar_loss(&double(&pred), &double(&target), &tails).unwrap();
        assert_eq!(loss2, 4.0 * loss);
    }

    #[test]
    fn cvar_uses_target_sort_order_for_both_vectors() {
        let tails = TailSpec::new(0.5, 0.25, 4).unwrap();
        // Unsorted target: ascending order is positions 2, 0 for the lower
        // tail, so pred is read at indices 2 and 0.
        let target = qv(&[1.0, 3.0, 0.0, 2.0]);
        let pred = qv(&[10.0, 99.0, 20.0, 99.0]);
        let (loss, _) = cvar_loss(&pred, &target, &tails).unwrap();
        // Gap = (0 + 1) − (20 + 10) = −29.
        assert_eq!(loss, 29.0 * 29.0 / 2.0);
    }

    #[test]
    fn gain_zero_on_equal_upper_sums() {
        let tails = TailSpec::new(0.25, 0.5, 4).unwrap();
        let pred = qv(&[9.0, 9.0, 2.4, 2.6]);
        let target = qv(&[0.0, 1.0, 2.0, 3.0]);
        let (loss, gradv) = gain_loss(&pred, &target, &tails).unwrap();
        assert_eq!(loss, 0.0);
        assert!(gradv.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn gain_mirrors_cvar_under_negation() {
        let mut rng = Rng::substream(24, Stream::Init, &[]);
        let tails = TailSpec::new(0.25, 0.25, 8).unwrap();
        for _ in 0..20 {
            let pred = qv(&(0..8).map(|_| rng.normal()).collect::<Vec<_>>());
            let target = qv(&(0..8).map(|_| rng.normal()).collect::<Vec<_>>());
            let neg = |q: &QuantileVector| {
                qv(&q.as_slice().iter().map(|x| -x).collect::<Vec<_>>())
            };
            let (gain, _) = gain_loss(&pred, &target, &tails).unwrap();
            let (cvar, _) = cvar_loss(&neg(&pred), &neg(&target), &tails).unwrap();
            assert!((gain - cvar).abs() < 1e-12);
        }
    }

    #[test]
    fn gain_ignores_entries_outside_the_upper_tail() {
        let tails = TailSpec::new(0.25, 0.25, 4).unwrap();
        let target = qv(&[0.0, 1.0, 2.0, 3.0]);
        let pred = qv(&[5.0, 6.0, 7.0, 8.0]);
        let swapped = qv(&[6.0, 5.0, 7.0, 8.0]);
        let (a, _) = gain_loss(&pred, &target, &tails).unwrap();
        let (b, _) = gain_loss(&swapped, &target, &tails).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn shift_hinge_cases() {
        let over = qv(&[2.0, 2.0]);
        let under = qv(&[0.0, 0.0]);
        let target = qv(&[1.0, 1.0]);
        let (loss, gradv) = shift_loss(&over, &target).unwrap();
        assert_eq!(loss, 0.0);
        assert!(gradv.iter().all(|&x| x == 0.0));
        let (loss, gradv) = shift_loss(&under, &target).unwrap();
        assert_eq!(loss, 1.0);
        assert_eq!(gradv, vec![-0.5, -0.5]);
        let (loss, _) = shift_loss(&target, &target).unwrap();
        assert_eq!(loss, 0.0);
    }

    #[test]
    fn shape_zero_when_pred_equals_target() {
        let tails = TailSpec::new(0.25, 0.25, 8).unwrap();
        let q = qv(&[0.0, 1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0]);
        let (loss, gradv) = shape_loss(&q, &q, &tails).unwrap();
        assert_eq!(loss, 0.0);
        assert!(gradv.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn shape_inactive_when_pred_is_narrow_below_and_wide_above() {
        let tails = TailSpec::new(0.25, 0.25, 8).unwrap();
        // Pred lower tail tighter than target's, upper tail wider: both
        // hinges rest.
        let pred = qv(&[0.0, 0.1, 2.0, 3.0, 4.0, 5.0, 6.0, 9.0]);
        let target = qv(&[0.0, 1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0]);
        let (loss, gradv) = shape_loss(&pred, &target, &tails).unwrap();
        assert_eq!(loss, 0.0);
        assert!(gradv.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn shape_matches_variance_oracle() {
        let mut rng = Rng::substream(25, Stream::Init, &[]);
        let tails = TailSpec::new(0.25, 0.25, 8).unwrap();
        for _ in 0..20 {
            let pred = qv(&(0..8).map(|_| rng.normal()).collect::<Vec<_>>());
            let target = qv(&(0..8).map(|_| rng.normal()).collect::<Vec<_>>());
            let (loss, _) = shape_loss(&pred, &target, &tails).unwrap();
            let tail_var = |q: &QuantileVector, range: std::ops::Range<usize>| {
                let perm = q.sort_permutation();
                let vals: Vec<f64> = range.map(|p| q[perm[p]]).collect();
                let mean = vals.iter().sum::<f64>() / vals.len() as f64;
                vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64
            };
            let lower = (tail_var(&pred, 0..2) - tail_var(&target, 0..2)).max(0.0);
            let upper = (tail_var(&target, 6..8) - tail_var(&pred, 6..8)).max(0.0);
            assert!((loss - (lower + upper)).abs() < 1e-12);
        }
    }

    #[test]
    fn shape_gradient_matches_finite_differences() {
        let tails = TailSpec::new(0.25, 0.25, 8).unwrap();
        // Lower hinge strictly active (pred tail wider), upper strictly
        // active (pred tail narrower); sort gaps dwarf the probe step.
        let pred = qv(&[0.0, 1.0, 2.0, 3.0, 4.0, 5.0, 6.1, 6.4]);
        let target = qv(&[0.2, 0.5, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0]);
        let base = pred.as_slice().to_vec();
        let f = |x: &[f64]| shape_loss(&qv(x), &target, &tails).unwrap().0;
        let numeric = central_diff(f, &base, 1e-6);
        let (loss, analytic) = shape_loss(&pred, &target, &tails).unwrap();
        assert!(loss > 0.0);
        assert!(max_rel_err(&analytic, &numeric, 1.0) < 1e-8);
    }

    #[test]
    fn curvature_zero_on_affine_sequences() {
        let tails = TailSpec::new(0.25, 0.25, 8).unwrap();
        let q = qv(&(0..8).map(|j| 3.0 * j as f64 - 1.0).collect::<Vec<_>>());
        let (loss, gradv) = curvature_loss(&q, &tails).unwrap();
        assert_eq!(loss, 0.0);
        assert!(gradv.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn curvature_penalizes_convex_lower_tail() {
        let tails = TailSpec::new(0.5, 0.25, 8).unwrap();
        // θ_p = p² is strictly convex: every second difference is 2.
        let q = qv(&(0..8).map(|j| (j * j) as f64).collect::<Vec<_>>());
        let (loss, _) = curvature_loss(&q, &tails).unwrap();
        assert!(loss > 0.0);
        // Lower positions {0..4} ∩ interior = {1,2,3}, each Δ² = 2; the
        // upper hinge rests because convexity is fine up there.
        assert_eq!(loss, 2.0);
    }

    #[test]
    fn curvature_accepts_target_geometry() {
        let tails = TailSpec::new(0.375, 0.375, 8).unwrap();
        // Concave lower tail, convex upper tail: the shape the hinges want.
        let q = qv(&[0.0, 2.0, 3.0, 3.5, 4.0, 4.5, 5.5, 7.5]);
        let (loss, gradv) = curvature_loss(&q, &tails).unwrap();
        assert_eq!(loss, 0.0);
        assert!(gradv.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn curvature_gradient_matches_finite_differences() {
        let tails = TailSpec::new(0.25, 0.25, 8).unwrap();
        // Strictly convex lower tail and strictly concave upper tail keep
        // both hinges active with margin; values stay sorted under probing.
        let q = qv(&[0.0, 0.1, 0.4, 0.9, 1.6, 2.0, 2.2, 2.3]);
        let base = q.as_slice().to_vec();
        let f = |x: &[f64]| curvature_loss(&qv(x), &tails).unwrap().0;
        let numeric = central_diff(f, &base, 1e-6);
        let (loss, analytic) = curvature_loss(&q, &tails).unwrap();
        assert!(loss > 0.0);
        assert!(max_rel_err(&analytic, &numeric, 1.0) < 1e-8);
    }

    #[test]
    fn curvature_rejects_tiny_grids() {
        let tails = TailSpec::new(0.5, 0.5, 2).unwrap();
        let q = qv(&[0.0, 1.0]);
        assert!(matches!(
            curvature_loss(&q, &tails),
            Err(Error::InvalidConfig { .. })
        ));
    }

    #[test]
    fn consistency_zero_for_identical_heads() {
        let v = qv(&[1.0, 2.0, 3.0]);
        let (loss, grads) = consistency_loss(&[v.clone(), v.clone(), v]).unwrap();
        assert_eq!(loss, 0.0);
        assert!(grads.iter().flatten().all(|&x| x == 0.0));
    }

    #[test]
    fn consistency_hand_case() {
        let (loss, _) = consistency_loss(&[qv(&[0.0, 0.0]), qv(&[1.0, 1.0])]).unwrap();
        assert_eq!(loss, 2.0);
    }

    #[test]
    fn consistency_single_head_is_zero() {
        let (loss, grads) = consistency_loss(&[qv(&[5.0, -1.0])]).unwrap();
        assert_eq!(loss, 0.0);
        assert_eq!(grads, vec![vec![0.0, 0.0]]);
    }

    #[test]
    fn consistency_invariant_under_head_order() {
        let a = qv(&[0.3, 1.0]);
        let b = qv(&[-0.2, 0.4]);
        let c = qv(&[0.9, -0.1]);
        let (l1, _) = consistency_loss(&[a.clone(), b.clone(), c.clone()]).unwrap();
        let (l2, _) = consistency_loss(&[c, a, b]).unwrap();
        assert!((l1 - l2).abs() < 1e-15);
    }

    #[test]
    fn consistency_scales_quadratically_in_head_spread() {
        let base = [qv(&[1.5, 1.5]), qv(&[2.5, 0.5])];
        let spread = [qv(&[0.5, 2.5]), qv(&[3.5, -0.5])];
        // spread triples each head's offset from the common mean [2, 1].
        let (l1, _) = consistency_loss(&base).unwrap();
        let (l2, _) = consistency_loss(&spread).unwrap();
        assert_eq!(l2, 9.0 * l1);
    }

    #[test]
    fn consistency_gradient_matches_finite_differences() {
        let heads = [qv(&[0.3, 1.0]), qv(&[-0.2, 0.4]), qv(&[0.9, -0.1])];
        let base: Vec<f64> = heads.iter().flat_map(|h| h.as_slice().to_vec()).collect();
        let f = |x: &[f64]| {
            let hs: Vec<QuantileVector> = x.chunks(2).map(qv).collect();
            consistency_loss(&hs).unwrap().0
        };
        let numeric = central_diff(f, &base, 1e-6);
        let (_, grads) = consistency_loss(&heads).unwrap();
        let analytic: Vec<f64> = grads.into_iter().flatten().collect();
        assert!(max_rel_err(&analytic, &numeric, 1.0) < 1e-9);
    }

    fn default_weights_m8() -> LossWeights {
        LossWeights::defaults(TailSpec::new(0.25, 0.25, 8).unwrap())
    }

    #[test]
    fn composite_with_zero_weights_is_plain_qr() {
        let g = grid(8);
        let mut w = default_weights_m8();
        w.w_risk = 0.0;
        w.w_cvar = 0.0;
        w.w_gain = 0.0;
        w.w_shift = 0.0;
        w.w_shape = 0.0;
        w.w_curv = 0.0;
        w.w_consist = 0.0;
        let mut rng = Rng::substream(26, Stream::Init, &[]);
        let head = qv(&(0..8).map(|_| rng.normal()).collect::<Vec<_>>());
        let target = qv(&(0..8).map(|_| rng.normal()).collect::<Vec<_>>());
        let (breakdown, grads) = composite_loss(&[head.clone()], &target, &w, &g).unwrap();
        let (qr, qr_grad) = qr_loss(&head, &target, &g, w.huber_delta).unwrap();
        assert_eq!(breakdown.total, qr);
        assert_eq!(breakdown.qr, qr);
        assert_eq!(grads[0], qr_grad);
    }

    #[test]
    fn composite_total_is_the_weighted_component_sum() {
        let g = grid(8);
        let w = default_weights_m8();
        let h1 = qv(&[0.10, 0.45, 0.8, 1.40, 2.0, 2.60, 3.50, 4.50]);
        let h2 = qv(&[0.20, 0.55, 1.0, 1.50, 2.2, 2.80, 3.70, 4.70]);
        let target = qv(&[0.0, 0.3, 0.7, 1.2, 1.8, 2.5, 3.3, 4.2]);
        let (b, _) = composite_loss(&[h1.clone(), h2.clone()], &target, &w, &g).unwrap();
        let ens = ensemble_quantiles(&[h1.clone(), h2.clone()]).unwrap();
        assert_eq!(b.qr, qr_loss(&ens, &target, &g, 1.0).unwrap().0);
        assert_eq!(
            b.risk,
            risk_loss(&ens, &target, &g, 1.0, w.risk_gamma).unwrap().0
        );
        assert_eq!(b.cvar, cvar_loss(&ens, &target, &w.tails).unwrap().0);
        assert_eq!(b.gain, gain_loss(&ens, &target, &w.tails).unwrap().0);
        assert_eq!(b.shift, shift_loss(&ens, &target).unwrap().0);
        assert_eq!(b.shape, shape_loss(&ens, &target, &w.tails).unwrap().0);
        assert_eq!(b.curv, curvature_loss(&ens, &w.tails).unwrap().0);
        assert_eq!(b.consist, consistency_loss(&[h1, h2]).unwrap().0);
        let hand_sum = b.qr
            + 0.3 * b.risk
            + 0.5 * b.cvar
            + 0.3 * b.gain
            + 0.2 * b.shift
            + 0.1 * b.shape
            + 0.2 * b.curv
            + 0.1 * b.consist;
        assert!((b.total - hand_sum).abs() < 1e-12);
    }

    #[test]
    fn composite_gradient_matches_finite_differences() {
        let g = grid(8);
        let w = default_weights_m8();
        // Chosen so every kink source has margin: residuals clear of 0 and
        // ±δ, strict sort gaps, hinges strictly active or strictly inactive.
        let h1 = qv(&[0.10, 0.45, 0.8, 1.40, 2.0, 2.60, 3.50, 4.50]);
        let h2 = qv(&[0.20, 0.55, 1.0, 1.50, 2.2, 2.80, 3.70, 4.70]);
        let target = qv(&[0.0, 0.3, 0.7, 1.2, 1.8, 2.5, 3.3, 4.2]);
        let base: Vec<f64> = h1
            .as_slice()
            .iter()
            .chain(h2.as_slice())
            .copied()
            .collect();
        let f = |x: &[f64]| {
            let heads: Vec<QuantileVector> = x.chunks(8).map(qv).collect();
            composite_loss(&heads, &target, &w, &g).unwrap().0.total
        };
        let numeric = central_diff(f, &base, 1e-6);
        let (_, grads) = composite_loss(&[h1, h2], &target, &w, &g).unwrap();
        let analytic: Vec<f64> = grads.into_iter().flatten().collect();
        assert!(max_rel_err(&analytic, &numeric, 1.0) < 1e-6);
    }

    #[test]
    fn composite_skips_disabled_tails() {
        let g = grid(8);
        let mut w = LossWeights::defaults(TailSpec::new(0.0, 0.25, 8).unwrap());
        w.w_curv = 0.0;
        let h = qv(&[0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8]);
        let target = qv(&[1.0, 1.1, 1.2, 1.3, 1.4, 1.5, 1.6, 1.7]);
        let (b, _) = composite_loss(&[h], &target, &w, &g).unwrap();
        assert_eq!(b.cvar, 0.0);
        assert!(b.gain >= 0.0);
    }

    #[test]
    fn loss_weights_validation() {
        let tails = TailSpec::new(0.1, 0.1, 10).unwrap();
        let mut w = LossWeights::defaults(tails);
        assert!(w.validate().is_ok());
        w.w_cvar = -0.1;
        assert!(w.validate().is_err());
        w.w_cvar = 0.5;
        w.huber_delta = 0.0;
        assert!(w.validate().is_err());
    }
}
