//! Fair MAML next to prototypical and matching networks on held-out classes.

use fairmeta::episodes::{generate_synthetic_family, EpisodeSpec};
use fairmeta::fairness::FairnessConfig;
use fairmeta::meta::{self, LearnerKind, MetaConfig};
use fairmeta::nn::MlpSpec;
use fairmeta::EpisodeSource;

fn main() -> fairmeta::Result<()> {
    let family = generate_synthetic_family(24, 8, 0.8, 3)?;
    let ids = family.class_ids();
    let (train, held) = (family.restrict(&ids[..16]), family.restrict(&ids[16..]));
    let spec = EpisodeSpec::new(5, 1, 10)?;
    let episodes = meta::sample_episodes(&held, &spec, 200, 99)?;
    let fair = FairnessConfig::with_lambda(1.0);
    let cfg = MetaConfig { inner_lr: 0.05, iterations: 300, ..MetaConfig::default() };

    for learner in [LearnerKind::FairMaml, LearnerKind::FairProtonet, LearnerKind::FairMatching] {
        let outputs = if learner == LearnerKind::FairMaml { spec.ways } else { 16 };
        let model = MlpSpec::new(8, vec![64, 64], outputs)?;
        let (params, _) = meta::train(learner, &train, &model, &cfg, &fair, &spec, 5)?;
        let (summary, _) = meta::evaluate(learner, &params, &episodes, &cfg, &fair)?;
        println!(
            "{learner:?}: accuracy {:.4} +- {:.4}, |DBC| {:.4}, DI {:.3}",
            summary.accuracy_mean,
            summary.accuracy_std / (summary.episodes as f64).sqrt(),
            summary.dbc_abs_mean,
            summary.disparate_impact
        );
    }
    Ok(())
}
