//! Entropic optimal transport between two density maps on the same grid.
//!
//! The solver runs Sinkhorn iterations on log-potentials with reference
//! measure `μ ⊗ ν`:
//!
//! ```text
//! f_i = -ε log Σ_j ν_j exp((g_j - C_ij) / ε)
//! g_j = -ε log Σ_i μ_i exp((f_i - C_ij) / ε)
//! P_ij = μ_i ν_j exp((f_i + g_j - C_ij) / ε)
//! ```
//!
//! Every iteration ends on a `g` update, so column marginals are exact and
//! `⟨f, μ⟩ + ⟨g, ν⟩` equals the full entropic dual objective. The potential
//! `g` is the derivative of that objective with respect to `ν`, including
//! bins where `ν` is zero.

use serde::{Deserialize, Serialize};

use crate::density::DensityMap;
use crate::error::{validation, Result};

/// Sinkhorn solver settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SinkhornParams {
    pub eps: f64,
    pub max_iter: usize,
    /// Largest tolerated row-marginal violation.
    pub tol: f64,
}

impl Default for SinkhornParams {
    fn default() -> Self {
        Self {
            eps: 1e-2,
            max_iter: 500,
            tol: 1e-6,
        }
    }
}

impl SinkhornParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.eps.is_finite() && self.eps > 0.0) {
            return Err(validation!(
                "sinkhorn eps must be positive, got {}",
                self.eps
            ));
        }
        if !(self.tol.is_finite() && self.tol > 0.0) {
            return Err(validation!(
                "sinkhorn tol must be positive, got {}",
                self.tol
            ));
        }
        Ok(())
    }
}

/// Squared Euclidean distance between grid cells, scaled by `1 / (h² + w²)`.
#[derive(Debug, Clone, PartialEq)]
pub struct CostMatrix {
    grid_shape: (usize, usize),
    normalization: f64,
    cost: Vec<f64>,
}

impl CostMatrix {
    pub fn new(grid_shape: (usize, usize)) -> Result<Self> {
        let (h, w) = grid_shape;
        if h == 0 || w == 0 {
            return Err(validation!("cost grid needs positive shape, got {h}x{w}"));
        }
        let n = h * w;
        let normalization = 1.0 / ((h * h + w * w) as f64);
        let mut cost = vec![0.0; n * n];
        for i in 0..n {
            let (ri, ci) = ((i / w) as f64, (i % w) as f64);
            for j in 0..n {
                let (rj, cj) = ((j / w) as f64, (j % w) as f64);
                let d2 = (ri - rj).powi(2) + (ci - cj).powi(2);
                cost[i * n + j] = d2 * normalization;
            }
        }
        Ok(Self {
            grid_shape,
            normalization,
            cost,
        })
    }

    pub fn grid_shape(&self) -> (usize, usize) {
        self.grid_shape
    }

    /// Number of bins on each side.
    pub fn n(&self) -> usize {
        self.grid_shape.0 * self.grid_shape.1
    }

    /// Scale applied to squared cell distances.
    pub fn normalization(&self) -> f64 {
        self.normalization
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.cost[i * self.n() + j]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.cost
    }
}

/// Solution of one entropic transport problem.
#[derive(Debug, Clone, PartialEq)]
pub struct OtResult {
    /// Transport cost `⟨plan, C⟩` of the regularized plan.
    pub cost_value: f64,
    /// Entropic dual objective `⟨α, μ⟩ + ⟨β, ν⟩`.
    pub dual_value: f64,
    pub alpha: Vec<f64>,
    /// Centered so that it sums to zero.
    pub beta: Vec<f64>,
    /// Row-major `n x n` transport plan.
    pub plan: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    /// Largest marginal violation of `plan` over rows and columns.
    pub marginal_err: f64,
}

impl OtResult {
    /// `KL(plan ‖ μ ⊗ ν)`, the entropy term the dual value includes.
    pub fn relative_entropy(&self, mu: &[f64], nu: &[f64]) -> f64 {
        let n = mu.len();
        let mut kl = 0.0;
        for i in 0..n {
            for j in 0..n {
                let p = self.plan[i * n + j];
                if p > 0.0 {
                    kl += p * (p / (mu[i] * nu[j])).ln();
                }
            }
        }
        kl
    }
}

fn check_simplex(v: &[f64], n: usize, name: &str) -> Result<()> {
    if v.len() != n {
        return Err(validation!(
            "{name} has {} bins, cost matrix has {n}",
            v.len()
        ));
    }
    if let Some(x) = v.iter().find(|x| !(x.is_finite() && **x >= 0.0)) {
        return Err(validation!("{name} contains invalid mass {x}"));
    }
    let total: f64 = v.iter().sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(validation!("{name} sums to {total}, expected 1"));
    }
    Ok(())
}

/// `-ε log Σ_k exp(shift_k + logk_k)` where `logk` is one row of `-C/ε`.
#[inline]
fn soft_min(shift: &[f64], logk: &[f64], eps: f64) -> f64 {
    let mut top = f64::NEG_INFINITY;
    for (s, k) in shift.iter().zip(logk) {
        let t = s + k;
        if t > top {
            top = t;
        }
    }
    if top == f64::NEG_INFINITY {
        return f64::INFINITY;
    }
    let mut acc = 0.0;
    for (s, k) in shift.iter().zip(logk) {
        acc += (s + k - top).exp();
    }
    -eps * (top + acc.ln())
}

/// Log-domain Sinkhorn. Non-convergence is reported through `converged`.
pub fn sinkhorn(
    mu: &[f64],
    nu: &[f64],
    cost: &CostMatrix,
    params: &SinkhornParams,
) -> Result<OtResult> {
    params.validate()?;
    let n = cost.n();
    check_simplex(mu, n, "mu")?;
    check_simplex(nu, n, "nu")?;
    let eps = params.eps;

    let log_k: Vec<f64> = cost.as_slice().iter().map(|c| -c / eps).collect();
    let log_mu: Vec<f64> = mu.iter().map(|m| m.ln()).collect();
    let log_nu: Vec<f64> = nu.iter().map(|m| m.ln()).collect();

    let mut f = vec![0.0; n];
    let mut g = vec![0.0; n];
    let mut f_next = vec![0.0; n];
    let mut shift = vec![0.0; n];

    // The cost is symmetric, so row j of log_k doubles as column j.
    let update_g = |f: &[f64], g: &mut [f64], shift: &mut [f64]| {
        for i in 0..n {
            shift[i] = log_mu[i] + f[i] / eps;
        }
        for j in 0..n {
            g[j] = soft_min(shift, &log_k[j * n..(j + 1) * n], eps);
        }
    };
    update_g(&f, &mut g, &mut shift);

    let mut iterations = 0;
    let mut converged = false;
    loop {
        for j in 0..n {
            shift[j] = log_nu[j] + g[j] / eps;
        }
        let mut violation: f64 = 0.0;
        for i in 0..n {
            f_next[i] = soft_min(&shift, &log_k[i * n..(i + 1) * n], eps);
            if mu[i] > 0.0 {
                let row_mass = mu[i] * ((f[i] - f_next[i]) / eps).exp();
                violation = violation.max((row_mass - mu[i]).abs());
            }
        }
        if violation <= params.tol {
            converged = true;
            break;
        }
        if iterations >= params.max_iter {
            break;
        }
        std::mem::swap(&mut f, &mut f_next);
        update_g(&f, &mut g, &mut shift);
        iterations += 1;
    }

    let mut plan = vec![0.0; n * n];
    let mut cost_value = 0.0;
    for i in 0..n {
        if mu[i] == 0.0 {
            continue;
        }
        for j in 0..n {
            if nu[j] == 0.0 {
                continue;
            }
            let p = (log_mu[i] + log_nu[j] + (f[i] + g[j]) / eps + log_k[i * n + j]).exp();
            plan[i * n + j] = p;
            cost_value += p * cost.get(i, j);
        }
    }
    let mut marginal_err: f64 = 0.0;
    for i in 0..n {
        let row: f64 = plan[i * n..(i + 1) * n].iter().sum();
        let col: f64 = (0..n).map(|k| plan[k * n + i]).sum();
        marginal_err = marginal_err
            .max((row - mu[i]).abs())
            .max((col - nu[i]).abs());
    }

    let center = g.iter().sum::<f64>() / n as f64;
    for (a, b) in f.iter_mut().zip(g.iter_mut()) {
        *a += center;
        *b -= center;
    }
    let dual_value = dot_weighted(&f, mu) + dot_weighted(&g, nu);

    Ok(OtResult {
        cost_value,
        dual_value,
        alpha: f,
        beta: g,
        plan,
        iterations,
        converged,
        marginal_err,
    })
}

/// `Σ p_i w_i` skipping zero-weight bins, whose potentials may be unbounded.
fn dot_weighted(potential: &[f64], weight: &[f64]) -> f64 {
    potential
        .iter()
        .zip(weight)
        .filter(|(_, w)| **w > 0.0)
        .map(|(p, w)| p * w)
        .sum()
}

/// Loss value and its gradient with respect to the unnormalized prediction.
#[derive(Debug, Clone)]
pub struct OtLoss {
    pub loss: f64,
    pub grad: Vec<f64>,
    pub solve: OtResult,
}

/// Transport loss between mass-normalized `target` and `pred`.
///
/// The gradient applies the quotient rule through `pred / ‖pred‖₁` and
/// treats the potentials as constants.
pub fn ot_loss_and_grad(
    target: &DensityMap,
    pred: &DensityMap,
    cost: &CostMatrix,
    params: &SinkhornParams,
) -> Result<OtLoss> {
    if target.shape() != pred.shape() || target.shape() != cost.grid_shape() {
        return Err(validation!(
            "transport shapes disagree: target {:?}, prediction {:?}, cost grid {:?}",
            target.shape(),
            pred.shape(),
            cost.grid_shape()
        ));
    }
    let target_mass = target.mass();
    let pred_mass = pred.mass();
    if target_mass <= 0.0 || pred_mass <= 0.0 {
        return Err(validation!(
            "transport loss needs positive mass, got target {target_mass} and prediction {pred_mass}"
        ));
    }
    let mu: Vec<f64> = target.as_slice().iter().map(|v| v / target_mass).collect();
    let nu: Vec<f64> = pred.as_slice().iter().map(|v| v / pred_mass).collect();
    let solve = sinkhorn(&mu, &nu, cost, params)?;

    let loss = solve.dual_value;
    let paired: f64 = solve
        .beta
        .iter()
        .zip(pred.as_slice())
        .map(|(b, p)| b * p)
        .sum();
    let grad = solve
        .beta
        .iter()
        .map(|b| b / pred_mass - paired / (pred_mass * pred_mass))
        .collect();
    Ok(OtLoss { loss, grad, solve })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tight(eps: f64) -> SinkhornParams {
        SinkhornParams {
            eps,
            max_iter: 200_000,
            tol: 1e-12,
        }
    }

    #[test]
    fn one_by_two_cost() {
        let c = CostMatrix::new((1, 2)).unwrap();
        assert_eq!(c.as_slice(), &[0.0, 0.2, 0.2, 0.0]);
    }

    #[test]
    fn single_cell_cost() {
        let c = CostMatrix::new((1, 1)).unwrap();
        assert_eq!(c.as_slice(), &[0.0]);
    }

    #[test]
    fn two_by_two_diagonal_cost() {
        let c = CostMatrix::new((2, 2)).unwrap();
        assert_eq!(c.get(0, 3), 2.0 / 8.0);
        assert_eq!(c.get(1, 2), 2.0 / 8.0);
    }

    #[test]
    fn cost_matrix_structure() {
        let c = CostMatrix::new((3, 5)).unwrap();
        let n = c.n();
        for i in 0..n {
            assert_eq!(c.get(i, i), 0.0);
            for j in 0..n {
                assert_eq!(c.get(i, j), c.get(j, i));
                if i != j {
                    assert!(c.get(i, j) > 0.0 && c.get(i, j) <= 1.0);
                }
            }
        }
    }

    #[test]
    fn zero_shape_is_rejected() {
        assert!(CostMatrix::new((0, 3)).is_err());
    }

    #[test]
    fn identical_marginals_cost_nearly_nothing() {
        let c = CostMatrix::new((2, 3)).unwrap();
        let mu = [0.1, 0.2, 0.05, 0.3, 0.15, 0.2];
        let r = sinkhorn(&mu, &mu, &c, &tight(1e-3)).unwrap();
        assert!(r.converged);
        assert!(r.cost_value <= 1e-3, "{}", r.cost_value);
        assert!(r.cost_value <= 1e-3 * (6f64).ln());
        for i in 0..6 {
            assert!((r.plan[i * 6 + i] - mu[i]).abs() < 1e-3);
        }
    }

    #[test]
    fn only_feasible_plan_moves_everything() {
        let c = CostMatrix::new((1, 2)).unwrap();
        let r = sinkhorn(&[1.0, 0.0], &[0.0, 1.0], &c, &SinkhornParams::default()).unwrap();
        assert!((r.cost_value - 0.2).abs() < 1e-12);
        assert!((r.dual_value - 0.2).abs() < 1e-12);
        assert!(r.converged);
    }

    #[test]
    fn unnormalized_input_is_rejected() {
        let c = CostMatrix::new((1, 2)).unwrap();
        let err = sinkhorn(&[0.5, 0.4], &[0.5, 0.5], &c, &SinkhornParams::default());
        assert!(matches!(err, Err(crate::Error::Validation(_))));
        let err = sinkhorn(&[1.5, -0.5], &[0.5, 0.5], &c, &SinkhornParams::default());
        assert!(err.is_err());
    }

    #[test]
    fn exhausted_budget_reports_not_converged() {
        let c = CostMatrix::new((1, 8)).unwrap();
        let mu = [0.3, 0.0, 0.1, 0.0, 0.2, 0.1, 0.1, 0.2];
        let nu = [0.0, 0.2, 0.1, 0.3, 0.0, 0.1, 0.2, 0.1];
        let params = SinkhornParams {
            eps: 1e-3,
            max_iter: 2,
            tol: 1e-12,
        };
        let r = sinkhorn(&mu, &nu, &c, &params).unwrap();
        assert!(!r.converged);
        assert_eq!(r.iterations, 2);
        assert!(r.marginal_err > params.tol);
    }

    #[test]
    fn point_mass_shift_costs_squared_distance() {
        let c = CostMatrix::new((1, 8)).unwrap();
        for k in 1..8usize {
            // Closed form: the only plan moves unit mass k cells, cost k^2 / (1 + 64).
            let expected = (k * k) as f64 / 65.0;
            let mut y = vec![0.0; 8];
            let mut yh = vec![0.0; 8];
            y[0] = 1.0;
            yh[k] = 1.0;
            let y = DensityMap::from_vec(1, 8, 1, y).unwrap();
            let yh = DensityMap::from_vec(1, 8, 1, yh).unwrap();
            let out = ot_loss_and_grad(&y, &yh, &c, &SinkhornParams::default()).unwrap();
            assert!(
                (out.loss - expected).abs() <= 0.02 * expected,
                "k={k}: {}",
                out.loss
            );
        }
    }

    #[test]
    fn identical_maps_leave_only_the_entropic_floor() {
        let c = CostMatrix::new((3, 3)).unwrap();
        let eps = 1e-3;
        // The dual of identical marginals is ε·H(μ) for a diagonal plan.
        let y = DensityMap::from_vec(3, 3, 1, vec![1.0, 2.0, 0.5, 0.0, 3.0, 1.0, 0.2, 0.1, 1.2])
            .unwrap();
        let mass = y.mass();
        let entropy: f64 = y
            .as_slice()
            .iter()
            .filter(|v| **v > 0.0)
            .map(|v| -(v / mass) * (v / mass).ln())
            .sum();
        let out = ot_loss_and_grad(&y, &y, &c, &tight(eps)).unwrap();
        assert!(
            (out.loss - eps * entropy).abs() < 1e-9,
            "{} vs {}",
            out.loss,
            eps * entropy
        );
        assert!(out.loss <= eps * 9f64.ln());

        let peaked =
            DensityMap::from_vec(3, 3, 1, vec![0.0, 0.05, 0.0, 0.0, 0.9, 0.0, 0.0, 0.05, 0.0])
                .unwrap();
        let out = ot_loss_and_grad(&peaked, &peaked, &c, &tight(eps)).unwrap();
        assert!(out.loss <= 1e-3, "{}", out.loss);
    }

    #[test]
    fn zero_mass_is_rejected() {
        let c = CostMatrix::new((1, 2)).unwrap();
        let y = DensityMap::from_vec(1, 2, 1, vec![1.0, 0.0]).unwrap();
        let z = DensityMap::zeros(1, 2);
        assert!(ot_loss_and_grad(&y, &z, &c, &SinkhornParams::default()).is_err());
        assert!(ot_loss_and_grad(&z, &y, &c, &SinkhornParams::default()).is_err());
    }

    #[test]
    fn beta_is_centered() {
        let c = CostMatrix::new((2, 2)).unwrap();
        let r = sinkhorn(
            &[0.4, 0.1, 0.2, 0.3],
            &[0.1, 0.2, 0.3, 0.4],
            &c,
            &tight(1e-2),
        )
        .unwrap();
        assert!(r.beta.iter().sum::<f64>().abs() < 1e-12);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let c = CostMatrix::new((3, 3)).unwrap();
        let params = tight(1e-2);
        let y = DensityMap::from_vec(3, 3, 1, vec![0.3, 1.0, 0.0, 2.0, 0.7, 0.1, 0.0, 0.4, 1.5])
            .unwrap();
        let base = vec![0.8, 0.2, 0.6, 0.1, 1.1, 0.9, 0.5, 0.3, 0.05];
        let pred = DensityMap::from_vec(3, 3, 1, base.clone()).unwrap();
        let out = ot_loss_and_grad(&y, &pred, &c, &params).unwrap();
        let h = 1e-6;
        for k in 0..base.len() {
            let eval = |delta: f64| {
                let mut v = base.clone();
                v[k] += delta;
                let p = DensityMap::from_vec(3, 3, 1, v).unwrap();
                ot_loss_and_grad(&y, &p, &c, &params).unwrap().loss
            };
            let fd = (eval(h) - eval(-h)) / (2.0 * h);
            let an = out.grad[k];
            assert!(
                (fd - an).abs() <= 1e-3 * fd.abs().max(an.abs()) + 1e-8,
                "k={k}: fd={fd} an={an}"
            );
        }
    }

    mod props {
        use super::super::*;
        use proptest::prelude::*;

        fn simplex(n: usize) -> impl Strategy<Value = Vec<f64>> {
            prop::collection::vec(0.0f64..1.0, n).prop_filter_map("zero mass", |v| {
                let s: f64 = v.iter().sum();
                (s > 1e-3).then(|| v.iter().map(|x| x / s).collect())
            })
        }

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(64))]

            #[test]
            fn swap_symmetry(mu in simplex(6), nu in simplex(6)) {
                let c = CostMatrix::new((2, 3)).unwrap();
                let p = SinkhornParams { eps: 1e-2, max_iter: 100_000, tol: 1e-13 };
                let a = sinkhorn(&mu, &nu, &c, &p).unwrap();
                let b = sinkhorn(&nu, &mu, &c, &p).unwrap();
                prop_assert!((a.cost_value - b.cost_value).abs() <= 1e-9);
            }

            #[test]
            fn duality_relations(mu in simplex(6), nu in simplex(6)) {
                let c = CostMatrix::new((3, 2)).unwrap();
                let p = SinkhornParams { eps: 1e-2, max_iter: 100_000, tol: 1e-12 };
                let r = sinkhorn(&mu, &nu, &c, &p).unwrap();
                prop_assert!(r.converged);
                prop_assert!(r.marginal_err <= 1e-9);
                let primal = r.cost_value + p.eps * r.relative_entropy(&mu, &nu);
                prop_assert!(r.dual_value <= primal + 1e-9);
                prop_assert!((r.dual_value - primal).abs() <= 1e-8);
                for i in 0..6 {
                    if mu[i] == 0.0 { continue; }
                    let slack = p.eps * (1.0 / mu[i]).ln();
                    for j in 0..6 {
                        prop_assert!(r.alpha[i] + r.beta[j] <= c.get(i, j) + slack + 1e-10);
                    }
                }
            }

            #[test]
            fn target_scale_is_irrelevant(y in prop::collection::vec(0.05f64..1.0, 4),
                                          yh in prop::collection::vec(0.05f64..1.0, 4),
                                          scale in 0.1f64..50.0) {
                let c = CostMatrix::new((2, 2)).unwrap();
                let p = SinkhornParams { eps: 1e-2, max_iter: 100_000, tol: 1e-12 };
                let scaled: Vec<f64> = y.iter().map(|v| v * scale).collect();
                let y = DensityMap::from_vec(2, 2, 1, y).unwrap();
                let ys = DensityMap::from_vec(2, 2, 1, scaled).unwrap();
                let yh = DensityMap::from_vec(2, 2, 1, yh).unwrap();
                let a = ot_loss_and_grad(&y, &yh, &c, &p).unwrap().loss;
                let b = ot_loss_and_grad(&ys, &yh, &c, &p).unwrap().loss;
                prop_assert!((a - b).abs() <= 1e-9);
            }
        }
    }
}
