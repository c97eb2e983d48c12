//! Sweeps the fairness multiplier and reports held-out accuracy against |DBC|.
//!
//! Each run trains fair MAML for 2000 outer iterations on a biased synthetic
//! family and scores it on classes it never saw during training. Pass a seed
//! as the first argument to vary the run.

use fairmeta::fairness::DistanceKind;
use fairmeta::harness::{self, Overrides};

fn main() -> fairmeta::Result<()> {
    let seed = std::env::args().nth(1).and_then(|a| a.parse().ok()).unwrap_or(0);
    let out = std::env::temp_dir().join("fairmeta-tradeoff");
    println!("{:>7} {:>9} {:>7} {:>6}", "lambda", "accuracy", "|DBC|", "DI");
    for lambda in [0.0, 1.0, 10.0] {
        let cli = Overrides {
            lambda: Some(lambda),
            relaxation: Some(0.2),
            distance: Some(DistanceKind::SignedMargin),
            inner_lr: Some(0.01),
            iterations: Some(2000),
            seed: Some(seed),
            deterministic: Some(true),
            out: Some(out.join(format!("lambda-{lambda}"))),
            ..Overrides::default()
        };
        let test = harness::run_experiment(&harness::parse_config(&cli, None)?)?.summary.test;
        println!(
            "{lambda:>7} {:>9.4} {:>7.4} {:>6.3}",
            test.accuracy_mean, test.dbc_abs_mean, test.disparate_impact
        );
    }
    Ok(())
}
