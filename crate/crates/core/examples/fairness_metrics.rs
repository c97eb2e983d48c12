//! Decision-boundary covariance and disparate impact on a toy hiring batch.

use fairmeta::fairness::{
    dbc, disparate_impact, disparate_impact_from_rates, DistanceKind, FairnessConfig, FairnessReport,
    ProtectedVector,
};
use fairmeta::{Tape, Tensor};

fn main() -> fairmeta::Result<()> {
    // Rates from a classifier that hires 25% of one group and 58.3% of the other.
    let di = disparate_impact_from_rates(0.25, 7.0 / 12.0)?;
    println!("ratio {:.4}, 80% rule satisfied: {}", di.ratio, di.eighty_percent_pass);

    // Eight candidates; the first four belong to the protected group.
    let s = ProtectedVector::new(vec![1, 1, 1, 1, 0, 0, 0, 0])?;
    let p_hire = [0.2, 0.4, 0.7, 0.3, 0.9, 0.6, 0.8, 0.4];
    let probs = Tensor::matrix(8, 2, p_hire.iter().flat_map(|&p| [1.0 - p, p]).collect())?;

    let cfg = FairnessConfig { distance: DistanceKind::SignedMargin, relaxation: 0.05, ..FairnessConfig::default() };
    let report = FairnessReport::from_probabilities(&s, &probs, &cfg)?;
    println!(
        "DBC {:+.4}, constraint |DBC| - c = {:+.4}, confident decisions (max prob >= 0.5) by group [s=0, s=1] = {:?}",
        report.dbc, report.constraint_value, report.positives
    );

    // The same covariance from the margins by hand: log-odds between the two classes.
    let tape = Tape::new();
    let margins = p_hire.iter().map(|p: &f64| (p.ln() - (1.0 - p).ln()).abs()).collect();
    println!("DBC from margins {:+.4}", dbc(&s, tape.constant(Tensor::vector(margins)))?.item());

    let hired: Vec<bool> = p_hire.iter().map(|&p| p > 0.5).collect();
    let direct = disparate_impact(&s, &hired)?;
    println!(
        "hire rate s=1 {:.2}, s=0 {:.2}, ratio {:.3}",
        direct.protected_rate, direct.unprotected_rate, direct.ratio
    );
    Ok(())
}
