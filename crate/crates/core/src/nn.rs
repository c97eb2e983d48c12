//! Parameter sets, the MLP classifier/embedding network, losses and optimizers.

use std::collections::{BTreeMap, HashSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{GradientMap, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Named, ordered model parameters. Immutable: updates return a new set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParameterSet {
    entries: Vec<(String, Tensor)>,
}

impl ParameterSet {
    pub fn new(entries: Vec<(String, Tensor)>) -> Result<Self> {
        let mut seen = HashSet::new();
        for (name, _) in &entries {
            if !seen.insert(name.as_str()) {
                return Err(Error::config(name.clone(), "duplicate parameter name"));
            }
        }
        Ok(ParameterSet { entries })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.entries
            .iter()
            .flat_map(|(_, t)| t.data().iter().copied())
            .collect()
    }

    /// Same structure, values taken from `flat` in `flatten` order.
    pub fn with_flat(&self, flat: &[f64]) -> Result<Self> {
        if flat.len() != self.num_scalars() {
            return Err(Error::shape(
                "with_flat",
                format!("{} values for {} parameters", flat.len(), self.num_scalars()),
            ));
        }
        let mut offset = 0;
        let entries = self
            .entries
            .iter()
            .map(|(n, t)| {
                let k = t.numel();
                let out = Tensor::from_parts(t.shape().to_vec(), flat[offset..offset + k].to_vec());
                offset += k;
                (n.clone(), out)
            })
            .collect();
        Ok(ParameterSet { entries })
    }

    /// Records every tensor on `tape` as a differentiable leaf.
    pub fn bind<'t>(&self, tape: &'t Tape) -> BoundParams<'t> {
        BoundParams {
            names: self.entries.iter().map(|(n, _)| n.clone()).collect(),
            vars: self.entries.iter().map(|(_, t)| tape.param(t.clone())).collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.entries.iter().all(|(_, t)| t.is_finite())
    }
}

/// Gradient values keyed by parameter name; missing names are zero.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamGrads {
    map: BTreeMap<String, Tensor>,
}

impl ParamGrads {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, grad: Tensor) {
        self.map.insert(name.into(), grad);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.map.get(name)
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.map.iter().map(|(n, t)| (n.as_str(), t))
    }

    /// Gradients laid out like `params`, split from a flat vector.
    pub fn from_flat(params: &ParameterSet, flat: &[f64]) -> Result<Self> {
        let shaped = params.with_flat(flat)?;
        Ok(ParamGrads {
            map: shaped.entries.into_iter().collect(),
        })
    }

    /// Flat vector in `params` order, zero-filled for missing names.
    pub fn flatten_like(&self, params: &ParameterSet) -> Vec<f64> {
        params
            .iter()
            .flat_map(|(n, t)| match self.map.get(n) {
                Some(g) => g.data().to_vec(),
                None => vec![0.0; t.numel()],
            })
            .collect()
    }

    /// Entrywise sum; accumulation order is the caller's iteration order.
    pub fn accumulate(&mut self, other: &ParamGrads) -> Result<()> {
        for (name, g) in &other.map {
            let next = match self.map.get(name) {
                Some(acc) => acc.zip_map(g, |a, b| a + b)?,
                None => g.clone(),
            };
            self.map.insert(name.clone(), next);
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.map.values().all(Tensor::is_finite)
    }
}

/// A [`ParameterSet`] living on a tape.
#[derive(Clone, Debug)]
pub struct BoundParams<'t> {
    names: Vec<String>,
    vars: Vec<Var<'t>>,
}

impl<'t> BoundParams<'t> {
    pub fn vars(&self) -> &[Var<'t>] {
        &self.vars
    }

    pub fn get(&self, name: &str) -> Option<Var<'t>> {
        self.names.iter().position(|n| n == name).map(|i| self.vars[i])
    }

    pub fn len(&self) -> usize {
        self.vars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vars.is_empty()
    }

    /// Current values as a detached parameter set.
    pub fn values(&self) -> ParameterSet {
        ParameterSet {
            entries: self
                .names
                .iter()
                .cloned()
                .zip(self.vars.iter().map(Var::value))
                .collect(),
        }
    }

    /// Gradient values for these variables.
    pub fn grads(&self, map: &GradientMap<'t>) -> ParamGrads {
        let mut out = ParamGrads::new();
        for (n, &v) in self.names.iter().zip(&self.vars) {
            out.insert(n.clone(), map.tensor(v));
        }
        out
    }

    /// `theta - lr * g` recorded on the tape, so later passes can
    /// differentiate through the update. Variables without an adjoint are
    /// passed through untouched.
    pub fn sgd_step(&self, grads: &GradientMap<'t>, lr: f64) -> Result<BoundParams<'t>> {
        check_lr(lr)?;
        let vars = self
            .vars
            .iter()
            .map(|&v| match grads.get(v) {
                Some(g) => v.sub(g.scale(lr)?),
                None => Ok(v),
            })
            .collect::<Result<_>>()?;
        Ok(BoundParams {
            names: self.names.clone(),
            vars,
        })
    }
}

fn check_lr(lr: f64) -> Result<()> {
    if lr > 0.0 && lr.is_finite() {
        Ok(())
    } else {
        Err(Error::config("learning_rate", format!("must be a positive finite number, got {lr}")))
    }
}

/// Dense ReLU network. The final layer is linear and has `num_classes`
/// outputs (class logits, or the embedding width for metric-based learners).
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpSpec {
    pub input_dim: usize,
    pub hidden_dims: Vec<usize>,
    pub num_classes: usize,
}

impl MlpSpec {
    pub fn new(input_dim: usize, hidden_dims: Vec<usize>, num_classes: usize) -> Result<Self> {
        let spec = MlpSpec {
            input_dim,
            hidden_dims,
            num_classes,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 {
            return Err(Error::config("input_dim", "must be positive"));
        }
        if self.hidden_dims.contains(&0) {
            return Err(Error::config("hidden_dims", "every hidden width must be positive"));
        }
        if self.num_classes < 2 {
            return Err(Error::config("num_classes", "must be at least 2"));
        }
        Ok(())
    }

    /// Layer widths from input to output.
    pub fn widths(&self) -> Vec<usize> {
        let mut w = vec![self.input_dim];
        w.extend(&self.hidden_dims);
        w.push(self.num_classes);
        w
    }
}

pub fn weight_name(layer: usize) -> String {
    format!("layer{layer}.weight")
}

pub fn bias_name(layer: usize) -> String {
    format!("layer{layer}.bias")
}

/// Uniform fan-based initialisation: weights in `±sqrt(6 / (fan_in + fan_out))`,
/// biases zero.
pub fn init_params(spec: &MlpSpec, seed: u64) -> Result<ParameterSet> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let widths = spec.widths();
    let mut entries = Vec::with_capacity(2 * (widths.len() - 1));
    for (layer, pair) in widths.windows(2).enumerate() {
        let (fan_in, fan_out) = (pair[0], pair[1]);
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let w: Vec<f64> = (0..fan_in * fan_out)
            .map(|_| rng.random_range(-bound..=bound))
            .collect();
        entries.push((weight_name(layer), Tensor::from_parts(vec![fan_in, fan_out], w)));
        entries.push((bias_name(layer), Tensor::zeros(&[fan_out])));
    }
    ParameterSet::new(entries)
}

/// Logits (`batch x outputs`) of the MLP encoded in `params` for the rows of `x`.
///
/// `x` holds explanatory features only; the protected attribute is never a
/// model input.
pub fn forward<'t>(params: &BoundParams<'t>, x: &Tensor) -> Result<Var<'t>> {
    let layers = params.len() / 2;
    if layers == 0 || !params.len().is_multiple_of(2) {
        return Err(Error::shape("forward", "parameters must be (weight, bias) pairs"));
    }
    let tape = params.vars[0].tape();
    let first = params.vars[0].shape();
    if x.rank() != 2 || x.shape()[1] != first[0] {
        return Err(Error::shape(
            "forward",
            format!("input {:?} does not match first layer {:?}", x.shape(), first),
        ));
    }
    let mut h = tape.constant(x.clone());
    for layer in 0..layers {
        let w = params.vars[2 * layer];
        let b = params.vars[2 * layer + 1];
        h = h.matmul(w)?.add_row(b)?;
        if layer + 1 < layers {
            h = h.relu()?;
        }
    }
    Ok(h)
}

fn one_hot(labels: &[usize], classes: usize) -> Result<Tensor> {
    let mut hot = vec![0.0; labels.len() * classes];
    for (i, &y) in labels.iter().enumerate() {
        if y >= classes {
            return Err(Error::domain(
                "cross_entropy",
                format!("label {y} out of range for {classes} classes"),
            ));
        }
        hot[i * classes + y] = 1.0;
    }
    Tensor::matrix(labels.len(), classes, hot)
}

/// Mean negative log-likelihood of `labels` under row-wise log-probabilities.
pub fn nll<'t>(log_probs: Var<'t>, labels: &[usize]) -> Result<Var<'t>> {
    let shape = log_probs.shape();
    if shape.len() != 2 || shape[0] != labels.len() || labels.is_empty() {
        return Err(Error::shape(
            "cross_entropy",
            format!("{} labels for log-probabilities {shape:?}", labels.len()),
        ));
    }
    let hot = log_probs.tape().constant(one_hot(labels, shape[1])?);
    log_probs.mul(hot)?.sum()?.scale(-1.0 / labels.len() as f64)
}

/// Mean softmax cross-entropy.
pub fn cross_entropy<'t>(logits: Var<'t>, labels: &[usize]) -> Result<Var<'t>> {
    nll(logits.log_softmax()?, labels)
}

/// One plain gradient step `theta - lr * g` on values. Missing gradients are zero.
pub fn sgd_step(params: &ParameterSet, grads: &ParamGrads, lr: f64) -> Result<ParameterSet> {
    check_lr(lr)?;
    let entries = params
        .entries
        .iter()
        .map(|(n, t)| {
            let next = match grads.get(n) {
                Some(g) => t.zip_map(g, |p, g| p - g * lr)?,
                None => t.clone(),
            };
            Ok((n.clone(), next))
        })
        .collect::<Result<_>>()?;
    Ok(ParameterSet { entries })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub t: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    /// Zero moments shaped like `params`, with the usual 0.9 / 0.999 / 1e-8.
    pub fn new(params: &ParameterSet) -> Self {
        let zeros: Vec<Tensor> = params.iter().map(|(_, t)| Tensor::zeros(t.shape())).collect();
        AdamState {
            m: zeros.clone(),
            v: zeros,
            t: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Bias-corrected Adam update.
pub fn adam_step(
    params: &ParameterSet,
    grads: &ParamGrads,
    state: &AdamState,
    lr: f64,
) -> Result<(ParameterSet, AdamState)> {
    check_lr(lr)?;
    if state.m.len() != params.len() || state.v.len() != params.len() {
        return Err(Error::shape("adam_step", "optimizer state does not match parameters"));
    }
    let t = state.t + 1;
    let (b1, b2, eps) = (state.beta1, state.beta2, state.eps);
    let c1 = 1.0 - b1.powi(t as i32);
    let c2 = 1.0 - b2.powi(t as i32);
    let mut entries = Vec::with_capacity(params.len());
    let mut ms = Vec::with_capacity(params.len());
    let mut vs = Vec::with_capacity(params.len());
    for (i, (name, theta)) in params.entries.iter().enumerate() {
        let zero;
        let g = match grads.get(name) {
            Some(g) => g,
            None => {
                zero = Tensor::zeros(theta.shape());
                &zero
            }
        };
        let m = state.m[i].zip_map(g, |m, g| b1 * m + (1.0 - b1) * g)?;
        let v = state.v[i].zip_map(g, |v, g| b2 * v + (1.0 - b2) * g * g)?;
        let step: Vec<f64> = m
            .data()
            .iter()
            .zip(v.data())
            .map(|(&m, &v)| lr * (m / c1) / ((v / c2).sqrt() + eps))
            .collect();
        let next = theta.zip_map(&Tensor::from_parts(theta.shape().to_vec(), step), |p, s| p - s)?;
        entries.push((name.clone(), next));
        ms.push(m);
        vs.push(v);
    }
    Ok((
        ParameterSet { entries },
        AdamState {
            m: ms,
            v: vs,
            t,
            beta1: b1,
            beta2: b2,
            eps,
        },
    ))
}
