//! Group-fairness quantities: decision boundary covariance (DBC), the
//! per-task constraint built on it, its penalty, and disparate impact with
//! the 80%-rule.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Binary protected attribute of every example in one evaluation set.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ProtectedVector {
    s: Vec<u8>,
}

impl ProtectedVector {
    pub fn new(s: Vec<u8>) -> Result<Self> {
        if s.is_empty() {
            return Err(Error::domain("protected_vector", "empty set"));
        }
        if let Some(bad) = s.iter().find(|&&v| v > 1) {
            return Err(Error::domain("protected_vector", format!("attribute {bad} is not 0 or 1")));
        }
        Ok(ProtectedVector { s })
    }

    pub fn values(&self) -> &[u8] {
        &self.s
    }

    pub fn len(&self) -> usize {
        self.s.len()
    }

    pub fn is_empty(&self) -> bool {
        self.s.is_empty()
    }

    /// Group mean over this set.
    pub fn mean(&self) -> f64 {
        self.s.iter().map(|&v| f64::from(v)).sum::<f64>() / self.s.len() as f64
    }

    /// `s_i - mean(s)` per example.
    pub fn centered(&self) -> Vec<f64> {
        let m = self.mean();
        self.s.iter().map(|&v| f64::from(v) - m).collect()
    }

    /// Every attribute flipped.
    pub fn relabeled(&self) -> Self {
        ProtectedVector {
            s: self.s.iter().map(|&v| 1 - v).collect(),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PenaltyShape {
    /// `lambda * max(0, g)`.
    #[default]
    Hinge,
    /// `lambda * g`, rewarding slack when `g < 0`.
    Raw,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DistanceKind {
    /// Largest class probability.
    #[default]
    MaxProb,
    /// Largest minus second-largest log-probability.
    SignedMargin,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FairnessConfig {
    /// Multiplier on the constraint in the inner loss.
    pub lambda: f64,
    /// Relaxation `c` in `g = |dbc| - c`.
    pub relaxation: f64,
    pub penalty: PenaltyShape,
    pub distance: DistanceKind,
    /// When false the penalty is never built (plain MAML); reporting still
    /// uses `relaxation` and `distance`.
    pub enabled: bool,
}

impl Default for FairnessConfig {
    fn default() -> Self {
        FairnessConfig {
            lambda: 1.0,
            relaxation: 0.05,
            penalty: PenaltyShape::Hinge,
            distance: DistanceKind::MaxProb,
            enabled: true,
        }
    }
}

impl FairnessConfig {
    pub fn with_lambda(lambda: f64) -> Self {
        FairnessConfig {
            lambda,
            ..Self::default()
        }
    }

    pub fn disabled() -> Self {
        FairnessConfig {
            enabled: false,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::config("lambda", format!("must be finite and >= 0, got {}", self.lambda)));
        }
        if !(self.relaxation >= 0.0 && self.relaxation.is_finite()) {
            return Err(Error::config(
                "relaxation",
                format!("must be finite and >= 0, got {}", self.relaxation),
            ));
        }
        Ok(())
    }
}

fn check_rows_sum_to_one(probs: &Tensor) -> Result<()> {
    if probs.rank() != 2 || probs.cols() == 0 {
        return Err(Error::shape("decision_distance", format!("expected batch x N, got {:?}", probs.shape())));
    }
    for r in 0..probs.rows() {
        let row = probs.row(r);
        let total: f64 = row.iter().sum();
        if (total - 1.0).abs() > 1e-6 || row.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::domain("decision_distance", format!("row {r} is not a probability vector")));
        }
    }
    Ok(())
}

/// Mask that pushes each row's first maximal entry out of contention.
fn exclude_argmax(values: &Tensor) -> Result<Tensor> {
    let cols = values.cols();
    let mut mask = vec![0.0; values.numel()];
    for (r, c) in values.argmax_axis(1)?.into_iter().enumerate() {
        mask[r * cols + c] = -1e300;
    }
    Tensor::matrix(values.rows(), cols, mask)
}

/// Per-row decision distance from class probabilities (`batch x N`).
pub fn decision_distance<'t>(probs: Var<'t>, kind: DistanceKind) -> Result<Var<'t>> {
    let p = probs.value();
    check_rows_sum_to_one(&p)?;
    if p.cols() < 2 && kind == DistanceKind::SignedMargin {
        return Err(Error::shape("decision_distance", "signed margin needs at least two classes"));
    }
    match kind {
        DistanceKind::MaxProb => probs.max_over_axis(1),
        DistanceKind::SignedMargin => {
            let top = probs.max_over_axis(1)?;
            let mask = probs.tape().constant(exclude_argmax(&p)?);
            let second = probs.add(mask)?.max_over_axis(1)?;
            top.ln()?.sub(second.ln()?)
        }
    }
}

/// Per-row decision distance from row-wise log-probabilities. Same values
/// as [`decision_distance`] on `exp(log_probs)` but never takes a log of an
/// underflowed probability.
pub fn decision_distance_from_log_probs<'t>(log_probs: Var<'t>, kind: DistanceKind) -> Result<Var<'t>> {
    let lp = log_probs.value();
    check_rows_sum_to_one(&lp.map(f64::exp))?;
    match kind {
        DistanceKind::MaxProb => log_probs.max_over_axis(1)?.exp(),
        DistanceKind::SignedMargin => {
            if lp.cols() < 2 {
                return Err(Error::shape("decision_distance", "signed margin needs at least two classes"));
            }
            let top = log_probs.max_over_axis(1)?;
            let mask = log_probs.tape().constant(exclude_argmax(&lp)?);
            let second = log_probs.add(mask)?.max_over_axis(1)?;
            top.sub(second)
        }
    }
}

/// Decision boundary covariance `(1/h) sum_i (s_i - mean(s)) d_i`.
pub fn dbc<'t>(s: &ProtectedVector, d: Var<'t>) -> Result<Var<'t>> {
    let shape = d.shape();
    if shape != [s.len()] {
        return Err(Error::shape("dbc", format!("{} attributes for distances {shape:?}", s.len())));
    }
    let centered = d.tape().constant(Tensor::vector(s.centered()));
    centered.mul(d)?.sum()?.scale(1.0 / s.len() as f64)
}

/// Constraint `g = |dbc| - c`; feasible when `g <= 0`.
pub fn constraint_value<'t>(s: &ProtectedVector, d: Var<'t>, cfg: &FairnessConfig) -> Result<Var<'t>> {
    constraint_from_dbc(dbc(s, d)?, cfg)
}

pub fn constraint_from_dbc<'t>(dbc: Var<'t>, cfg: &FairnessConfig) -> Result<Var<'t>> {
    let c = dbc.tape().scalar(cfg.relaxation);
    dbc.abs()?.sub(c)
}

/// Penalty added to the task loss for constraint value `g`.
pub fn penalty<'t>(g: Var<'t>, cfg: &FairnessConfig) -> Result<Var<'t>> {
    cfg.validate()?;
    match cfg.penalty {
        PenaltyShape::Hinge => g.relu()?.scale(cfg.lambda),
        PenaltyShape::Raw => g.scale(cfg.lambda),
    }
}

/// Positive-decision rates per group and their 80%-rule ratio.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DisparateImpact {
    /// `P(positive | s = 1)`.
    pub protected_rate: f64,
    /// `P(positive | s = 0)`.
    pub unprotected_rate: f64,
    /// `min(p1 / p0, p0 / p1)`, in `[0, 1]`.
    pub ratio: f64,
    pub eighty_percent_pass: bool,
    /// A group had zero positive rate while the other did not.
    pub degenerate: bool,
}

/// 80%-rule ratio from the two group positive rates.
pub fn disparate_impact_from_rates(protected_rate: f64, unprotected_rate: f64) -> Result<DisparateImpact> {
    for r in [protected_rate, unprotected_rate] {
        if !(0.0..=1.0).contains(&r) {
            return Err(Error::domain("disparate_impact", format!("rate {r} outside [0, 1]")));
        }
    }
    if protected_rate == 0.0 && unprotected_rate == 0.0 {
        return Err(Error::domain("disparate_impact", "no positive decisions in either group"));
    }
    let degenerate = protected_rate == 0.0 || unprotected_rate == 0.0;
    let ratio = if degenerate {
        0.0
    } else {
        (protected_rate / unprotected_rate).min(unprotected_rate / protected_rate)
    };
    Ok(DisparateImpact {
        protected_rate,
        unprotected_rate,
        ratio,
        eighty_percent_pass: ratio >= 0.8,
        degenerate,
    })
}

/// Disparate impact of a set of positive/negative decisions.
pub fn disparate_impact(s: &ProtectedVector, positive: &[bool]) -> Result<DisparateImpact> {
    if positive.len() != s.len() {
        return Err(Error::shape(
            "disparate_impact",
            format!("{} decisions for {} attributes", positive.len(), s.len()),
        ));
    }
    let mut count = [0usize; 2];
    let mut pos = [0usize; 2];
    for (&g, &p) in s.values().iter().zip(positive) {
        count[g as usize] += 1;
        pos[g as usize] += usize::from(p);
    }
    if count[0] == 0 || count[1] == 0 {
        return Err(Error::domain("disparate_impact", "both groups must be non-empty"));
    }
    disparate_impact_from_rates(
        pos[1] as f64 / count[1] as f64,
        pos[0] as f64 / count[0] as f64,
    )
}

/// Threshold on the largest class probability for a "positive" decision.
pub const POSITIVE_THRESHOLD: f64 = 0.5;

/// Fairness of one model on one labelled set.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FairnessReport {
    pub dbc: f64,
    pub abs_dbc: f64,
    pub constraint_value: f64,
    /// `None` when a group is absent or nothing is predicted positive.
    pub disparate_impact: Option<DisparateImpact>,
    /// Number of positive decisions per group, `[s = 0, s = 1]`.
    pub positives: [usize; 2],
    /// Group sizes, `[s = 0, s = 1]`.
    pub counts: [usize; 2],
}

impl FairnessReport {
    /// Report for class probabilities `probs` (`batch x N`).
    pub fn from_probabilities(s: &ProtectedVector, probs: &Tensor, cfg: &FairnessConfig) -> Result<Self> {
        let tape = Tape::new();
        let p = tape.constant(probs.clone());
        let d = match cfg.distance {
            DistanceKind::MaxProb => decision_distance(p, cfg.distance)?,
            DistanceKind::SignedMargin => {
                decision_distance_from_log_probs(p.ln()?, cfg.distance)?
            }
        };
        Self::from_parts(s, probs, d, cfg)
    }

    /// Report for row-wise log-probabilities.
    pub fn from_log_probs(s: &ProtectedVector, log_probs: &Tensor, cfg: &FairnessConfig) -> Result<Self> {
        let tape = Tape::new();
        let d = decision_distance_from_log_probs(tape.constant(log_probs.clone()), cfg.distance)?;
        Self::from_parts(s, &log_probs.map(f64::exp), d, cfg)
    }

    fn from_parts(s: &ProtectedVector, probs: &Tensor, d: Var<'_>, cfg: &FairnessConfig) -> Result<Self> {
        let cov = dbc(s, d)?.item();
        let positive: Vec<bool> = probs
            .max_axis(1)?
            .data()
            .iter()
            .map(|&p| p >= POSITIVE_THRESHOLD)
            .collect();
        let mut counts = [0usize; 2];
        let mut positives = [0usize; 2];
        for (&g, &p) in s.values().iter().zip(&positive) {
            counts[g as usize] += 1;
            positives[g as usize] += usize::from(p);
        }
        Ok(FairnessReport {
            dbc: cov,
            abs_dbc: cov.abs(),
            constraint_value: cov.abs() - cfg.relaxation,
            disparate_impact: disparate_impact(s, &positive).ok(),
            positives,
            counts,
        })
    }
}

/// Pools positive counts over several reports into one disparate-impact
/// ratio. Falls back to 1.0 (no measurable disparity) when undefined.
pub fn pooled_disparate_impact<'a>(reports: impl IntoIterator<Item = &'a FairnessReport>) -> f64 {
    let mut counts = [0usize; 2];
    let mut positives = [0usize; 2];
    for r in reports {
        for g in 0..2 {
            counts[g] += r.counts[g];
            positives[g] += r.positives[g];
        }
    }
    if counts[0] == 0 || counts[1] == 0 {
        return 1.0;
    }
    disparate_impact_from_rates(
        positives[1] as f64 / counts[1] as f64,
        positives[0] as f64 / counts[0] as f64,
    )
    .map(|d| d.ratio)
    .unwrap_or(1.0)
}
