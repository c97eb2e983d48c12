//! Fairness-constrained meta-learners.
//!
//! `FairMaml` adapts a shared initialisation to each task with a few plain
//! gradient steps on the support-set Lagrangian
//! `cross_entropy + penalty(|dbc| - c)`, then updates the initialisation on
//! the sum of post-adaptation query losses, differentiating through the
//! inner steps. `FairProtonet` and `FairMatching` have no inner loop; their
//! DBC penalty is attached to the episode loss on the support set.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::episodes::{Episode, EpisodeSource, EpisodeSpec, LabeledSet};
use crate::error::{Error, Result};
use crate::fairness::{self, FairnessConfig, FairnessReport, ProtectedVector};
use crate::metrics::{MetricsRecord, Split};
use crate::nn::{self, AdamState, BoundParams, MlpSpec, ParamGrads, ParameterSet};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OuterOptimizer {
    #[default]
    Adam,
    /// Plain `phi - beta * grad`.
    Sgd,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetaConfig {
    pub inner_lr: f64,
    pub outer_lr: f64,
    pub inner_steps: usize,
    pub meta_batch: usize,
    pub iterations: usize,
    /// Treat adapted parameters as constants in the outer gradient.
    pub first_order: bool,
    pub eval_inner_steps: usize,
    pub outer_optimizer: OuterOptimizer,
    /// Also add the query-set fairness penalty to the meta objective.
    pub meta_fairness: bool,
    /// Process the episodes of a meta-batch on the rayon pool. Results are
    /// identical either way; reduction happens in episode order.
    pub parallel: bool,
}

impl Default for MetaConfig {
    fn default() -> Self {
        MetaConfig {
            inner_lr: 0.4,
            outer_lr: 0.001,
            inner_steps: 1,
            meta_batch: 4,
            iterations: 1000,
            first_order: false,
            eval_inner_steps: 3,
            outer_optimizer: OuterOptimizer::Adam,
            meta_fairness: false,
            parallel: true,
        }
    }
}

impl MetaConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.inner_lr > 0.0 && self.inner_lr.is_finite()) {
            return Err(Error::config("inner-lr", "must be positive"));
        }
        if !(self.outer_lr > 0.0 && self.outer_lr.is_finite()) {
            return Err(Error::config("outer-lr", "must be positive"));
        }
        if self.meta_batch == 0 {
            return Err(Error::config("meta-batch", "must be at least 1"));
        }
        if self.iterations == 0 {
            return Err(Error::config("iterations", "must be at least 1"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LearnerKind {
    #[default]
    #[serde(alias = "maml")]
    FairMaml,
    #[serde(alias = "protonet")]
    FairProtonet,
    #[serde(alias = "matching")]
    FairMatching,
}

/// Query-set scores of one adapted model on one episode.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub accuracy: f64,
    pub query_loss: f64,
    pub fairness: FairnessReport,
    pub support_fairness: FairnessReport,
}

impl EvalResult {
    fn from_log_probs(
        query: &LabeledSet,
        query_log_probs: &Tensor,
        query_loss: f64,
        support: &LabeledSet,
        support_log_probs: &Tensor,
        fair: &FairnessConfig,
    ) -> Result<Self> {
        if !query_log_probs.is_finite() || !support_log_probs.is_finite() || !query_loss.is_finite() {
            return Err(Error::NonFinite {
                what: "log-probabilities".into(),
                iteration: 0,
            });
        }
        let predicted = query_log_probs.argmax_axis(1)?;
        let hits = predicted.iter().zip(&query.labels).filter(|(p, y)| p == y).count();
        Ok(EvalResult {
            accuracy: hits as f64 / query.len() as f64,
            query_loss,
            fairness: FairnessReport::from_log_probs(&query.s, query_log_probs, fair)?,
            support_fairness: FairnessReport::from_log_probs(&support.s, support_log_probs, fair)?,
        })
    }
}

/// Fairness penalty for a set scored by row-wise log-probabilities.
fn fairness_term<'t>(log_probs: Var<'t>, s: &ProtectedVector, fair: &FairnessConfig) -> Result<Var<'t>> {
    let d = fairness::decision_distance_from_log_probs(log_probs, fair.distance)?;
    let g = fairness::constraint_value(s, d, fair)?;
    fairness::penalty(g, fair)
}

fn with_penalty<'t>(loss: Var<'t>, log_probs: Var<'t>, s: &ProtectedVector, fair: &FairnessConfig) -> Result<Var<'t>> {
    if !log_probs.value().is_finite() {
        // Iteration is filled in by the trainer.
        return Err(Error::NonFinite {
            what: "log-probabilities".into(),
            iteration: 0,
        });
    }
    if !fair.enabled {
        return Ok(loss);
    }
    loss.add(fairness_term(log_probs, s, fair)?)
}

/// Support-set Lagrangian: cross-entropy plus the DBC constraint penalty.
pub fn lagrangian_loss<'t>(params: &BoundParams<'t>, support: &LabeledSet, fair: &FairnessConfig) -> Result<Var<'t>> {
    let log_probs = nn::forward(params, &support.x)?.log_softmax()?;
    let ce = nn::nll(log_probs, &support.labels)?;
    with_penalty(ce, log_probs, &support.s, fair)
}

/// `steps` gradient steps of size `lr` on `loss`, starting from `params`.
///
/// With `create_graph` each step stays differentiable with respect to the
/// starting point; otherwise the gradients are constants and only the
/// identity path `phi_j = phi - const` remains.
pub fn adapt_with<'t, F>(
    params: &BoundParams<'t>,
    steps: usize,
    lr: f64,
    create_graph: bool,
    mut loss: F,
) -> Result<BoundParams<'t>>
where
    F: FnMut(&BoundParams<'t>) -> Result<Var<'t>>,
{
    let mut current = params.clone();
    for _ in 0..steps {
        let l = loss(&current)?;
        let tape = l.tape();
        let grads = tape.backward(l, create_graph)?;
        current = current.sgd_step(&grads, lr)?;
    }
    Ok(current)
}

/// Inner-loop adaptation with the configured number of steps.
pub fn inner_adapt<'t>(
    params: &BoundParams<'t>,
    support: &LabeledSet,
    meta: &MetaConfig,
    fair: &FairnessConfig,
) -> Result<BoundParams<'t>> {
    adapt_with(params, meta.inner_steps, meta.inner_lr, !meta.first_order, |p| {
        lagrangian_loss(p, support, fair)
    })
}

/// Meta-objective contribution of one episode and its gradient with respect
/// to the initialisation.
pub fn episode_meta_gradient(
    params: &ParameterSet,
    episode: &Episode,
    meta: &MetaConfig,
    fair: &FairnessConfig,
) -> Result<(ParamGrads, f64, EvalResult)> {
    let support = episode.support_set()?;
    let query = episode.query_set()?;
    let tape = Tape::new();
    let phi = params.bind(&tape);
    let adapted = inner_adapt(&phi, &support, meta, fair)?;
    let query_log_probs = nn::forward(&adapted, &query.x)?.log_softmax()?;
    let query_loss = nn::nll(query_log_probs, &query.labels)?;
    let objective = if meta.meta_fairness {
        with_penalty(query_loss, query_log_probs, &query.s, fair)?
    } else {
        query_loss
    };
    let grads = phi.grads(&tape.backward(objective, false)?);

    let support_log_probs = nn::forward(&adapted, &support.x)?.log_softmax()?.value();
    let eval = EvalResult::from_log_probs(
        &query,
        &query_log_probs.value(),
        query_loss.item(),
        &support,
        &support_log_probs,
        fair,
    )?;
    Ok((grads, objective.item(), eval))
}

fn per_episode<T, F>(episodes: &[Episode], parallel: bool, f: F) -> Result<Vec<T>>
where
    T: Send,
    F: Fn(&Episode) -> Result<T> + Sync,
{
    if parallel && episodes.len() > 1 {
        episodes.par_iter().map(&f).collect()
    } else {
        episodes.iter().map(f).collect()
    }
}

/// Outer gradient of the summed query objective over a meta-batch.
pub fn meta_gradient(
    params: &ParameterSet,
    episodes: &[Episode],
    meta: &MetaConfig,
    fair: &FairnessConfig,
) -> Result<(ParamGrads, f64, Vec<EvalResult>)> {
    if episodes.is_empty() {
        return Err(Error::config("meta-batch", "no episodes"));
    }
    let parts = per_episode(episodes, meta.parallel, |ep| episode_meta_gradient(params, ep, meta, fair))?;
    sum_in_order(parts)
}

fn sum_in_order(parts: Vec<(ParamGrads, f64, EvalResult)>) -> Result<(ParamGrads, f64, Vec<EvalResult>)> {
    let mut total = ParamGrads::new();
    let mut objective = 0.0;
    let mut evals = Vec::with_capacity(parts.len());
    for (g, o, e) in parts {
        total.accumulate(&g)?;
        objective += o;
        evals.push(e);
    }
    Ok((total, objective, evals))
}

fn outer_update(
    params: &ParameterSet,
    grads: &ParamGrads,
    adam: &AdamState,
    meta: &MetaConfig,
) -> Result<(ParameterSet, AdamState)> {
    match meta.outer_optimizer {
        OuterOptimizer::Adam => nn::adam_step(params, grads, adam, meta.outer_lr),
        OuterOptimizer::Sgd => Ok((nn::sgd_step(params, grads, meta.outer_lr)?, adam.clone())),
    }
}

/// One outer iteration of fair MAML on a meta-batch of episodes.
pub fn meta_step(
    params: &ParameterSet,
    episodes: &[Episode],
    meta: &MetaConfig,
    fair: &FairnessConfig,
    adam: &AdamState,
) -> Result<(ParameterSet, AdamState, Vec<EvalResult>)> {
    let (grads, _, evals) = meta_gradient(params, episodes, meta, fair)?;
    let (next, state) = outer_update(params, &grads, adam, meta)?;
    Ok((next, state, evals))
}

fn one_hot_columns(labels: &[usize], ways: usize) -> Tensor {
    let mut hot = vec![0.0; labels.len() * ways];
    for (i, &y) in labels.iter().enumerate() {
        hot[i * ways + y] = 1.0;
    }
    Tensor::from_parts(vec![labels.len(), ways], hot)
}

/// Per-class means of the embedded support rows (`ways x width`).
pub fn prototypes<'t>(support_embeddings: Var<'t>, labels: &[usize], ways: usize) -> Result<Var<'t>> {
    let mut counts = vec![0usize; ways];
    for &y in labels {
        if y >= ways {
            return Err(Error::domain("prototypes", format!("label {y} out of range for {ways} classes")));
        }
        counts[y] += 1;
    }
    if let Some(empty) = counts.iter().position(|&c| c == 0) {
        return Err(Error::InsufficientData(format!("class {empty} has no support examples")));
    }
    let mut weights = vec![0.0; ways * labels.len()];
    for (i, &y) in labels.iter().enumerate() {
        weights[y * labels.len() + i] = 1.0 / counts[y] as f64;
    }
    let w = support_embeddings
        .tape()
        .constant(Tensor::from_parts(vec![ways, labels.len()], weights));
    w.matmul(support_embeddings)
}

/// Negative squared Euclidean distances from each row of `points` to each
/// prototype (`rows x ways`).
pub fn neg_sq_distances<'t>(points: Var<'t>, protos: Var<'t>) -> Result<Var<'t>> {
    let rows = points.shape()[0];
    let ways = protos.shape()[0];
    let mut columns = Vec::with_capacity(ways);
    for n in 0..ways {
        let p = protos.slice_rows(n, n + 1)?;
        let diff = points.sub(p.reshape(&[p.shape()[1]])?.broadcast_axis(&points.shape(), 0)?)?;
        columns.push(diff.square()?.sum_axis(1)?.reshape(&[1, rows])?);
    }
    Var::concat(&columns)?.t()?.neg()
}

fn episode_ways(episode: &Episode) -> usize {
    episode.episode_labels.len()
}

/// Prototype head: log-probabilities for the query and the support rows.
pub fn protonet_log_probs<'t>(
    params: &BoundParams<'t>,
    support: &LabeledSet,
    query: &LabeledSet,
    ways: usize,
) -> Result<(Var<'t>, Var<'t>)> {
    let emb_support = nn::forward(params, &support.x)?;
    let emb_query = nn::forward(params, &query.x)?;
    let protos = prototypes(emb_support, &support.labels, ways)?;
    let query_lp = neg_sq_distances(emb_query, protos)?.log_softmax()?;
    let support_lp = neg_sq_distances(emb_support, protos)?.log_softmax()?;
    Ok((query_lp, support_lp))
}

/// Query cross-entropy under the prototype head plus the support DBC penalty.
pub fn protonet_episode_loss<'t>(params: &BoundParams<'t>, episode: &Episode, fair: &FairnessConfig) -> Result<Var<'t>> {
    let support = episode.support_set()?;
    let query = episode.query_set()?;
    let (query_lp, support_lp) = protonet_log_probs(params, &support, &query, episode_ways(episode))?;
    let loss = nn::nll(query_lp, &query.labels)?;
    with_penalty(loss, support_lp, &support.s, fair)
}

/// Cosine similarities are multiplied by this before the attention softmax.
pub const MATCHING_COSINE_SCALE: f64 = 1.0;

fn l2_normalize_rows(x: Var<'_>) -> Result<Var<'_>> {
    let shape = x.shape();
    let norms = x.square()?.sum_axis(1)?;
    if let Some(r) = norms.value().data().iter().position(|&n| n == 0.0) {
        return Err(Error::domain("matching", format!("embedding row {r} has zero norm")));
    }
    x.div(norms.sqrt()?.broadcast_axis(&shape, 1)?)
}

/// Attention-weighted class probabilities: softmax over `scale * cosine`
/// between each row of `points` and every support embedding, summed per
/// support class. Returns log-probabilities.
pub fn matching_log_probs<'t>(
    points: Var<'t>,
    support_embeddings: Var<'t>,
    support_labels: &[usize],
    ways: usize,
    scale: f64,
) -> Result<Var<'t>> {
    let q = l2_normalize_rows(points)?;
    let s = l2_normalize_rows(support_embeddings)?;
    let attention = q.matmul(s.t()?)?.scale(scale)?.log_softmax()?.exp()?;
    let hot = points.tape().constant(one_hot_columns(support_labels, ways));
    attention.matmul(hot)?.ln()
}

/// Simplified matching network (cosine attention, no context embeddings):
/// query cross-entropy plus the support DBC penalty.
pub fn matching_episode_loss<'t>(params: &BoundParams<'t>, episode: &Episode, fair: &FairnessConfig) -> Result<Var<'t>> {
    let support = episode.support_set()?;
    let query = episode.query_set()?;
    let (query_lp, support_lp) = matching_heads(params, &support, &query, episode_ways(episode))?;
    let loss = nn::nll(query_lp, &query.labels)?;
    with_penalty(loss, support_lp, &support.s, fair)
}

fn matching_heads<'t>(
    params: &BoundParams<'t>,
    support: &LabeledSet,
    query: &LabeledSet,
    ways: usize,
) -> Result<(Var<'t>, Var<'t>)> {
    let emb_support = nn::forward(params, &support.x)?;
    let emb_query = nn::forward(params, &query.x)?;
    let query_lp = matching_log_probs(emb_query, emb_support, &support.labels, ways, MATCHING_COSINE_SCALE)?;
    let support_lp = matching_log_probs(emb_support, emb_support, &support.labels, ways, MATCHING_COSINE_SCALE)?;
    Ok((query_lp, support_lp))
}

/// Gradient of one baseline episode loss plus its query scores.
fn baseline_episode_gradient(
    learner: LearnerKind,
    params: &ParameterSet,
    episode: &Episode,
    fair: &FairnessConfig,
) -> Result<(ParamGrads, f64, EvalResult)> {
    let support = episode.support_set()?;
    let query = episode.query_set()?;
    let tape = Tape::new();
    let phi = params.bind(&tape);
    let ways = episode_ways(episode);
    let (query_lp, support_lp) = match learner {
        LearnerKind::FairProtonet => protonet_log_probs(&phi, &support, &query, ways)?,
        LearnerKind::FairMatching => matching_heads(&phi, &support, &query, ways)?,
        LearnerKind::FairMaml => unreachable!("fair MAML has its own episode gradient"),
    };
    let query_loss = nn::nll(query_lp, &query.labels)?;
    let loss = with_penalty(query_loss, support_lp, &support.s, fair)?;
    let grads = phi.grads(&tape.backward(loss, false)?);
    let eval = EvalResult::from_log_probs(
        &query,
        &query_lp.value(),
        query_loss.item(),
        &support,
        &support_lp.value(),
        fair,
    )?;
    Ok((grads, loss.item(), eval))
}

/// Scores one episode: fair MAML adapts `eval_inner_steps` first (without
/// second-order bookkeeping), baselines score directly.
pub fn evaluate_episode(
    learner: LearnerKind,
    params: &ParameterSet,
    episode: &Episode,
    meta: &MetaConfig,
    fair: &FairnessConfig,
) -> Result<EvalResult> {
    let support = episode.support_set()?;
    let query = episode.query_set()?;
    let tape = Tape::new();
    let phi = params.bind(&tape);
    let ways = episode_ways(episode);
    let (query_lp, support_lp) = match learner {
        LearnerKind::FairMaml => {
            let adapted = adapt_with(&phi, meta.eval_inner_steps, meta.inner_lr, false, |p| {
                lagrangian_loss(p, &support, fair)
            })?;
            (
                nn::forward(&adapted, &query.x)?.log_softmax()?,
                nn::forward(&adapted, &support.x)?.log_softmax()?,
            )
        }
        LearnerKind::FairProtonet => protonet_log_probs(&phi, &support, &query, ways)?,
        LearnerKind::FairMatching => matching_heads(&phi, &support, &query, ways)?,
    };
    let query_loss = nn::nll(query_lp, &query.labels)?.item();
    EvalResult::from_log_probs(&query, &query_lp.value(), query_loss, &support, &support_lp.value(), fair)
}

/// Aggregate of [`EvalResult`]s over many episodes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub episodes: usize,
    pub accuracy_mean: f64,
    pub accuracy_std: f64,
    pub query_loss_mean: f64,
    pub dbc_mean: f64,
    pub dbc_abs_mean: f64,
    pub dbc_abs_std: f64,
    pub support_dbc_abs_mean: f64,
    /// Pooled over all query sets.
    pub disparate_impact: f64,
    /// Fraction of episodes whose query constraint value is positive.
    pub constraint_violation_rate: f64,
}

/// Mean and sample standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

impl EvalSummary {
    pub fn from_results(results: &[EvalResult]) -> Self {
        let col = |f: fn(&EvalResult) -> f64| results.iter().map(f).collect::<Vec<_>>();
        let (accuracy_mean, accuracy_std) = mean_std(&col(|r| r.accuracy));
        let (dbc_abs_mean, dbc_abs_std) = mean_std(&col(|r| r.fairness.abs_dbc));
        let violations = results.iter().filter(|r| r.fairness.constraint_value > 0.0).count();
        EvalSummary {
            episodes: results.len(),
            accuracy_mean,
            accuracy_std,
            query_loss_mean: mean_std(&col(|r| r.query_loss)).0,
            dbc_mean: mean_std(&col(|r| r.fairness.dbc)).0,
            dbc_abs_mean,
            dbc_abs_std,
            support_dbc_abs_mean: mean_std(&col(|r| r.support_fairness.abs_dbc)).0,
            disparate_impact: fairness::pooled_disparate_impact(results.iter().map(|r| &r.fairness)),
            constraint_violation_rate: violations as f64 / results.len().max(1) as f64,
        }
    }
}

/// Scores `params` on every episode and aggregates.
pub fn evaluate(
    learner: LearnerKind,
    params: &ParameterSet,
    episodes: &[Episode],
    meta: &MetaConfig,
    fair: &FairnessConfig,
) -> Result<(EvalSummary, Vec<EvalResult>)> {
    let results = per_episode(episodes, meta.parallel, |ep| evaluate_episode(learner, params, ep, meta, fair))?;
    Ok((EvalSummary::from_results(&results), results))
}

/// Draws `count` episodes with seeds taken from a stream seeded by `seed`.
pub fn sample_episodes(source: &dyn EpisodeSource, spec: &EpisodeSpec, count: usize, seed: u64) -> Result<Vec<Episode>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| source.sample_episode(spec, rng.random()))
        .collect()
}

/// Stateful outer loop: one [`Trainer::step`] per outer iteration.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub learner: LearnerKind,
    pub meta: MetaConfig,
    pub fair: FairnessConfig,
    pub spec: EpisodeSpec,
    params: ParameterSet,
    adam: AdamState,
    rng: ChaCha8Rng,
    iteration: usize,
}

impl Trainer {
    pub fn new(
        learner: LearnerKind,
        model: &MlpSpec,
        meta: MetaConfig,
        fair: FairnessConfig,
        spec: EpisodeSpec,
        seed: u64,
    ) -> Result<Self> {
        let params = nn::init_params(model, seed)?;
        Self::with_params(learner, params, meta, fair, spec, seed)
    }

    pub fn with_params(
        learner: LearnerKind,
        params: ParameterSet,
        meta: MetaConfig,
        fair: FairnessConfig,
        spec: EpisodeSpec,
        seed: u64,
    ) -> Result<Self> {
        meta.validate()?;
        fair.validate()?;
        spec.validate()?;
        Ok(Trainer {
            learner,
            meta,
            fair,
            spec,
            adam: AdamState::new(&params),
            params,
            rng: ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15),
            iteration: 0,
        })
    }

    pub fn params(&self) -> &ParameterSet {
        &self.params
    }

    pub fn into_params(self) -> ParameterSet {
        self.params
    }

    pub fn iteration(&self) -> usize {
        self.iteration
    }

    /// Samples a meta-batch, updates the parameters and returns the
    /// training record for this iteration.
    pub fn step(&mut self, source: &dyn EpisodeSource) -> Result<MetricsRecord> {
        let started = Instant::now();
        let seeds: Vec<u64> = (0..self.meta.meta_batch).map(|_| self.rng.random()).collect();
        let episodes = seeds
            .iter()
            .map(|&s| source.sample_episode(&self.spec, s))
            .collect::<Result<Vec<_>>>()?;

        let iteration = self.iteration;
        let tag = |e: Error| match e {
            Error::NonFinite { what, .. } => Error::NonFinite { what, iteration },
            other => other,
        };
        let (grads, objective, evals) = match self.learner {
            LearnerKind::FairMaml => meta_gradient(&self.params, &episodes, &self.meta, &self.fair).map_err(tag)?,
            learner => {
                let parts = per_episode(&episodes, self.meta.parallel, |ep| {
                    baseline_episode_gradient(learner, &self.params, ep, &self.fair)
                })
                .map_err(tag)?;
                sum_in_order(parts)?
            }
        };
        if !objective.is_finite() || !grads.is_finite() {
            return Err(Error::NonFinite {
                what: format!("meta objective ({objective})"),
                iteration: self.iteration,
            });
        }
        let (params, adam) = outer_update(&self.params, &grads, &self.adam, &self.meta)?;
        if !params.is_finite() {
            return Err(Error::NonFinite {
                what: "parameters".into(),
                iteration: self.iteration,
            });
        }
        self.params = params;
        self.adam = adam;
        let record = MetricsRecord::from_results(
            self.iteration,
            Split::Train,
            &evals,
            started.elapsed().as_secs_f64() * 1e3,
        );
        self.iteration += 1;
        Ok(record)
    }
}

/// Runs `meta.iterations` outer iterations from a fresh initialisation.
pub fn train(
    learner: LearnerKind,
    source: &dyn EpisodeSource,
    model: &MlpSpec,
    meta: &MetaConfig,
    fair: &FairnessConfig,
    spec: &EpisodeSpec,
    seed: u64,
) -> Result<(ParameterSet, Vec<MetricsRecord>)> {
    let mut trainer = Trainer::new(learner, model, *meta, *fair, *spec, seed)?;
    let history = (0..meta.iterations)
        .map(|_| trainer.step(source))
        .collect::<Result<Vec<_>>>()?;
    Ok((trainer.into_params(), history))
}
