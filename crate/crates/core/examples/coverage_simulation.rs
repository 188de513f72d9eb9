//! Monte-Carlo check of the coverage guarantee across risk levels and noise laws.
//!
//! Run with `cargo run --release --example coverage_simulation`.

use confdet::conformal::Penalty;
use confdet::synthlab::{coverage_experiment, ExperimentSpec, NoiseFamily, PerturbationLaw};

fn main() -> confdet::Result<()> {
    let laws = [
        ("gaussian", PerturbationLaw::default()),
        (
            "student-t(3)",
            PerturbationLaw {
                noise: NoiseFamily::StudentT { dof: 3.0 },
                ..PerturbationLaw::default()
            },
        ),
    ];
    println!(
        "{:<13} {:<15} {:>5} {:>7} {:>7} {:>7} {:>8}",
        "noise", "penalty", "alpha", "mean", "min", "max", "stretch"
    );
    for (name, law) in &laws {
        for penalty in [Penalty::Additive, Penalty::Multiplicative] {
            for alpha in [0.1, 0.2, 0.3] {
                let s = coverage_experiment(&ExperimentSpec {
                    law: law.clone(),
                    alpha,
                    penalty,
                    n_calib: 1000,
                    n_test: 1000,
                    n_trials: 50,
                    seed: 1,
                    min_iou: 0.1,
                })?;
                println!(
                    "{name:<13} {penalty:<15} {alpha:>5} {:>7.4} {:>7.4} {:>7.4} {:>8.4}",
                    s.mean_coverage, s.min_coverage, s.max_coverage, s.mean_stretch
                );
            }
        }
    }
    Ok(())
}
