//! Desk-scale sweep: trains tinycnn on synthetic shapes with and without the
//! gradient-alignment regularizer and reports accuracy, alignment and AD.
//!
//! `cargo run --release -p igrad --example pilot -- <hw> <epochs> <seeds> <lambda>...`

use std::time::Instant;

use igrad::data::{synthetic_shapes, ShapeKind};
use igrad::metrics::{faithfulness, ClassPolicy};
use igrad::nn::{build_model, ArchitectureSpec};
use igrad::saliency::CamMethod;
use igrad::train::{evaluate_accuracy, fit, gradient_alignment, FitOptions, TrainConfig};
use igrad::Execution;

fn main() -> igrad::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let hw: usize = args.first().map_or(16, |s| s.parse().unwrap());
    let epochs: usize = args.get(1).map_or(30, |s| s.parse().unwrap());
    let seeds: u64 = args.get(2).map_or(3, |s| s.parse().unwrap());
    let mut lambdas: Vec<f64> = args.iter().skip(3).map(|s| s.parse().unwrap()).collect();
    if lambdas.is_empty() {
        lambdas = vec![0.0, 0.01, 0.1];
    }
    let train = synthetic_shapes(2000, &ShapeKind::ALL, hw, 1)?;
    let test = synthetic_shapes(400, &ShapeKind::ALL, hw, 2)?.with_stats(train.stats.clone())?;
    let spec = ArchitectureSpec::tinycnn([3, hw, hw], 4);
    for seed in 0..seeds {
        for &lambda in &lambdas {
            let t0 = Instant::now();
            let mut model = build_model(&spec, seed)?;
            let cfg = TrainConfig { epochs, lambda, seed, ..TrainConfig::desk_default() };
            let log = fit(&mut model, &train, None, &cfg, &FitOptions::default())?;
            let acc = evaluate_accuracy(&model, &test, Execution::Parallel)?;
            let align = gradient_alignment(&model, &test, Execution::Parallel)?;
            let ad = faithfulness(&model, &test, CamMethod::GradCam, ClassPolicy::Predicted, Execution::Parallel)?.ad;
            println!(
                "seed {seed} lambda {lambda:<7} train_acc {:.4} test_acc {acc:.4} align {align:.4} ad {ad:.2} ({:.0}s)",
                log.last().unwrap().train_acc,
                t0.elapsed().as_secs_f64()
            );
        }
    }
    Ok(())
}
