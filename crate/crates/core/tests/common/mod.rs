#![allow(dead_code)]

use fairmeta::episodes::{generate_synthetic_family, EpisodeSpec, TaskFamily};
use fairmeta::nn::{ParamGrads, ParameterSet};
use fairmeta::Tensor;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// `|a - b| / max(|a|, |b|, 1e-9)` in the Euclidean norm. The floor keeps
/// two vectors that are both rounding noise around zero from comparing as
/// wildly different.
pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let diff: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    norm(&diff) / norm(a).max(norm(b)).max(1e-9)
}

pub fn grad_vec(g: &ParamGrads, params: &ParameterSet) -> Vec<f64> {
    g.flatten_like(params)
}

pub fn uniform_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(lo..hi)).collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

pub fn biased_family(seed: u64) -> TaskFamily {
    generate_synthetic_family(10, 8, 0.8, seed).unwrap()
}

pub fn two_way(shots: usize, query: usize) -> EpisodeSpec {
    EpisodeSpec::new(2, shots, query).unwrap()
}

/// Relative error between the library's second-order meta-gradient and
/// central finite differences of the composed objective
/// `phi -> query_loss(adapt_q(phi))`, on one small random instance.
pub fn meta_gradient_oracle_error(seed: u64, q: usize, fair: &fairmeta::FairnessConfig) -> f64 {
    use fairmeta::meta::{self, MetaConfig};
    use fairmeta::nn::{self, init_params, MlpSpec};
    use fairmeta::{EpisodeSource, Tape};

    let family = generate_synthetic_family(6, 4, 0.8, seed).unwrap();
    let episode = family.sample_episode(&EpisodeSpec::new(2, 3, 4).unwrap(), seed).unwrap();
    let spec = MlpSpec::new(4, vec![8], 2).unwrap();
    let params = init_params(&spec, seed).unwrap();
    assert!(params.num_scalars() <= 200);
    let cfg = MetaConfig {
        inner_lr: 0.1,
        inner_steps: q,
        meta_batch: 1,
        parallel: false,
        ..MetaConfig::default()
    };
    let (analytic, _, _) = meta::meta_gradient(&params, std::slice::from_ref(&episode), &cfg, fair).unwrap();

    let support = episode.support_set().unwrap();
    let query = episode.query_set().unwrap();
    let numeric = fairmeta::autodiff::finite_difference_gradient(
        |p| {
            let mut current = p.clone();
            for _ in 0..q {
                let tape = Tape::new();
                let bound = current.bind(&tape);
                let loss = meta::lagrangian_loss(&bound, &support, fair)?;
                let g = bound.grads(&tape.backward(loss, false)?);
                current = nn::sgd_step(&current, &g, cfg.inner_lr)?;
            }
            let tape = Tape::new();
            let logits = nn::forward(&current.bind(&tape), &query.x)?;
            Ok(nn::cross_entropy(logits, &query.labels)?.item())
        },
        &params,
        1e-5,
    )
    .unwrap();
    rel_err(&grad_vec(&analytic, &params), &grad_vec(&numeric, &params))
}
