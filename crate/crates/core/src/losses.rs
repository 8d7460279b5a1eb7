//! Training objectives: count loss, self-distillation and their sum.
//!
//! For a batch of `B` images the count loss is
//! `l1 + η·ot + γ·reg`, each term averaged over the batch. Images whose
//! target or prediction has zero mass contribute nothing to `ot` and `reg`.
//! Distillation terms are mean squared differences against a frozen teacher,
//! weighted by `λ` in the total.

use serde::{Deserialize, Serialize};

use crate::density::DensityMap;
use crate::error::{validation, Result};
use crate::model::FeatureMap;
use crate::ot::{ot_loss_and_grad, CostMatrix, SinkhornParams};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    pub eta: f64,
    pub gamma: f64,
    #[serde(rename = "lambda")]
    pub lambda_: f64,
    pub distill_feature: bool,
    pub distill_output: bool,
    /// Ground-truth kernel width in input pixels.
    pub sigma: f64,
    pub ot: SinkhornParams,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            eta: 0.1,
            gamma: 0.01,
            lambda_: 0.5,
            distill_feature: true,
            distill_output: true,
            sigma: 2.0,
            ot: SinkhornParams::default(),
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("eta", self.eta),
            ("gamma", self.gamma),
            ("lambda", self.lambda_),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(validation!(
                    "{name} must be a non-negative finite weight, got {v}"
                ));
            }
        }
        if !(self.sigma.is_finite() && self.sigma > 0.0) {
            return Err(validation!("sigma must be positive, got {}", self.sigma));
        }
        self.ot.validate()
    }
}

/// Per-term values of one loss evaluation.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l1: f64,
    pub ot: f64,
    pub reg: f64,
    pub count: f64,
    pub distill_output: f64,
    pub distill_feature: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn is_finite(&self) -> bool {
        [
            self.l1,
            self.ot,
            self.reg,
            self.count,
            self.distill_output,
            self.distill_feature,
            self.total,
        ]
        .iter()
        .all(|v| v.is_finite())
    }
}

/// Solver statistics accumulated over a batch.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct OtStats {
    pub solves: usize,
    pub unconverged: usize,
    pub max_iterations: usize,
}

/// Mean absolute difference of counts.
pub fn l1_count_loss(pred_counts: &[f64], true_counts: &[f64]) -> Result<f64> {
    check_batch(pred_counts.len(), true_counts.len())?;
    let total: f64 = pred_counts
        .iter()
        .zip(true_counts)
        .map(|(p, t)| (p - t).abs())
        .sum();
    Ok(total / pred_counts.len() as f64)
}

/// Batch mean of the per-map mean squared cell difference.
pub fn pixel_l2_loss(pred: &[DensityMap], truth: &[DensityMap]) -> Result<f64> {
    check_batch(pred.len(), truth.len())?;
    let mut total = 0.0;
    for (p, t) in pred.iter().zip(truth) {
        check_shape(p.shape(), t.shape(), "density")?;
        total += mean_squared(p.as_slice(), t.as_slice());
    }
    Ok(total / pred.len() as f64)
}

/// Half the L1 distance between mass-normalized maps, averaged over the batch.
pub fn normalized_reg(truth: &[DensityMap], pred: &[DensityMap]) -> Result<f64> {
    check_batch(pred.len(), truth.len())?;
    let mut total = 0.0;
    for (t, p) in truth.iter().zip(pred) {
        check_shape(p.shape(), t.shape(), "density")?;
        let (tm, pm) = (t.mass(), p.mass());
        if tm <= 0.0 || pm <= 0.0 {
            return Err(validation!(
                "normalized regularizer needs positive masses, got {tm} and {pm}"
            ));
        }
        total += reg_term(t.as_slice(), tm, p.as_slice(), pm, None);
    }
    Ok(total / pred.len() as f64)
}

/// Teacher or student responses for a batch.
#[derive(Debug, Clone, Copy)]
pub struct ModelViews<'a> {
    pub output: &'a [DensityMap],
    pub features: &'a [FeatureMap],
}

/// Count loss terms without gradients.
pub fn count_loss(
    truth: &[DensityMap],
    pred: &[DensityMap],
    cfg: &LossConfig,
) -> Result<LossBreakdown> {
    let cost = cost_for(pred)?;
    Ok(count_loss_grad(truth, pred, cfg, &cost)?.breakdown)
}

/// Output-level and feature-level distillation terms, each zero when its
/// switch is off.
pub fn distill_loss(
    teacher: ModelViews<'_>,
    student: ModelViews<'_>,
    cfg: &LossConfig,
) -> Result<(f64, f64)> {
    let mut grads = DistillGrads::default();
    distill_terms(teacher, student, cfg, 1.0, &mut grads, false)
}

/// Count loss plus `λ`-weighted distillation; no teacher means no distillation.
pub fn bdf_loss(
    truth: &[DensityMap],
    teacher: Option<ModelViews<'_>>,
    student: ModelViews<'_>,
    cfg: &LossConfig,
) -> Result<LossBreakdown> {
    let cost = cost_for(student.output)?;
    Ok(bdf_loss_grad(truth, teacher, student, cfg, &cost)?.breakdown)
}

/// Loss value with gradients for every student output and feature map.
#[derive(Debug, Clone)]
pub struct LossGrad {
    pub breakdown: LossBreakdown,
    pub d_output: Vec<Vec<f64>>,
    /// Empty unless feature distillation was active.
    pub d_features: Vec<Vec<f64>>,
    pub ot_stats: OtStats,
}

/// Count loss with gradient with respect to each predicted map.
pub fn count_loss_grad(
    truth: &[DensityMap],
    pred: &[DensityMap],
    cfg: &LossConfig,
    cost: &CostMatrix,
) -> Result<LossGrad> {
    cfg.validate()?;
    check_batch(pred.len(), truth.len())?;
    let batch = pred.len() as f64;
    let mut out = LossBreakdown::default();
    let mut d_output = Vec::with_capacity(pred.len());
    let mut stats = OtStats::default();

    for (t, p) in truth.iter().zip(pred) {
        check_shape(p.shape(), t.shape(), "density")?;
        let (tm, pm) = (t.mass(), p.mass());
        let mut grad = vec![sign(pm - tm) / batch; p.len()];
        out.l1 += (pm - tm).abs();

        if tm > 0.0 && pm > 0.0 {
            let solved = ot_loss_and_grad(t, p, cost, &cfg.ot)?;
            out.ot += solved.loss;
            for (g, d) in grad.iter_mut().zip(&solved.grad) {
                *g += cfg.eta * d / batch;
            }
            stats.solves += 1;
            stats.max_iterations = stats.max_iterations.max(solved.solve.iterations);
            if !solved.solve.converged {
                stats.unconverged += 1;
            }

            let mut reg_grad = vec![0.0; p.len()];
            out.reg += reg_term(t.as_slice(), tm, p.as_slice(), pm, Some(&mut reg_grad));
            for (g, d) in grad.iter_mut().zip(&reg_grad) {
                *g += cfg.gamma * d / batch;
            }
        }
        d_output.push(grad);
    }
    out.l1 /= batch;
    out.ot /= batch;
    out.reg /= batch;
    out.count = out.l1 + cfg.eta * out.ot + cfg.gamma * out.reg;
    out.total = out.count;
    Ok(LossGrad {
        breakdown: out,
        d_output,
        d_features: Vec::new(),
        ot_stats: stats,
    })
}

/// Full objective with gradients for the student.
pub fn bdf_loss_grad(
    truth: &[DensityMap],
    teacher: Option<ModelViews<'_>>,
    student: ModelViews<'_>,
    cfg: &LossConfig,
    cost: &CostMatrix,
) -> Result<LossGrad> {
    let mut lg = count_loss_grad(truth, student.output, cfg, cost)?;
    let Some(teacher) = teacher else {
        return Ok(lg);
    };
    let mut grads = DistillGrads {
        output: std::mem::take(&mut lg.d_output),
        features: Vec::new(),
    };
    let (out_term, feat_term) =
        distill_terms(teacher, student, cfg, cfg.lambda_, &mut grads, true)?;
    lg.d_output = grads.output;
    lg.d_features = grads.features;
    let b = &mut lg.breakdown;
    b.distill_output = out_term;
    b.distill_feature = feat_term;
    b.total = b.count + cfg.lambda_ * (out_term + feat_term);
    Ok(lg)
}

#[derive(Default)]
struct DistillGrads {
    output: Vec<Vec<f64>>,
    features: Vec<Vec<f64>>,
}

fn distill_terms(
    teacher: ModelViews<'_>,
    student: ModelViews<'_>,
    cfg: &LossConfig,
    weight: f64,
    grads: &mut DistillGrads,
    want_grad: bool,
) -> Result<(f64, f64)> {
    let mut out_term = 0.0;
    if cfg.distill_output {
        check_batch(student.output.len(), teacher.output.len())?;
        let elems: usize = student.output.iter().map(|d| d.len()).sum();
        for (b, (s, t)) in student.output.iter().zip(teacher.output).enumerate() {
            check_shape(s.shape(), t.shape(), "teacher output")?;
            out_term += squared_sum(s.as_slice(), t.as_slice());
            if want_grad {
                accumulate_mse_grad(
                    &mut grads.output[b],
                    s.as_slice(),
                    t.as_slice(),
                    weight,
                    elems,
                );
            }
        }
        out_term /= elems as f64;
    }

    let mut feat_term = 0.0;
    if cfg.distill_feature {
        check_batch(student.features.len(), teacher.features.len())?;
        let elems: usize = student.features.iter().map(|f| f.len()).sum();
        if want_grad {
            grads.features = student
                .features
                .iter()
                .map(|f| vec![0.0; f.len()])
                .collect();
        }
        for (b, (s, t)) in student.features.iter().zip(teacher.features).enumerate() {
            check_shape(s.shape3(), t.shape3(), "teacher features")?;
            feat_term += squared_sum(s.as_slice(), t.as_slice());
            if want_grad {
                accumulate_mse_grad(
                    &mut grads.features[b],
                    s.as_slice(),
                    t.as_slice(),
                    weight,
                    elems,
                );
            }
        }
        feat_term /= elems as f64;
    }
    Ok((out_term, feat_term))
}

fn accumulate_mse_grad(
    grad: &mut [f64],
    student: &[f64],
    teacher: &[f64],
    weight: f64,
    elems: usize,
) {
    let scale = 2.0 * weight / elems as f64;
    for ((g, s), t) in grad.iter_mut().zip(student).zip(teacher) {
        *g += scale * (s - t);
    }
}

/// `½‖t/‖t‖ − p/‖p‖‖₁`, optionally writing its subgradient in `p`.
fn reg_term(t: &[f64], tm: f64, p: &[f64], pm: f64, grad: Option<&mut [f64]>) -> f64 {
    let mut value = 0.0;
    let mut signs = Vec::with_capacity(p.len());
    for (tv, pv) in t.iter().zip(p) {
        let diff = pv / pm - tv / tm;
        value += diff.abs();
        signs.push(sign(diff));
    }
    if let Some(grad) = grad {
        let weighted: f64 = signs.iter().zip(p).map(|(s, pv)| s * pv / pm).sum();
        for (g, s) in grad.iter_mut().zip(&signs) {
            *g = 0.5 * (s - weighted) / pm;
        }
    }
    0.5 * value
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn squared_sum(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn mean_squared(a: &[f64], b: &[f64]) -> f64 {
    squared_sum(a, b) / a.len() as f64
}

fn check_batch(a: usize, b: usize) -> Result<()> {
    if a == 0 {
        return Err(validation!("loss needs a non-empty batch"));
    }
    if a != b {
        return Err(validation!("batch sizes differ: {a} vs {b}"));
    }
    Ok(())
}

fn check_shape<S: PartialEq + std::fmt::Debug>(a: S, b: S, what: &str) -> Result<()> {
    if a != b {
        return Err(validation!("{what} shape mismatch: {a:?} vs {b:?}"));
    }
    Ok(())
}

fn cost_for(pred: &[DensityMap]) -> Result<CostMatrix> {
    let first = pred
        .first()
        .ok_or_else(|| validation!("loss needs a non-empty batch"))?;
    CostMatrix::new(first.shape())
}
