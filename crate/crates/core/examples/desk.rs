//! Desk-scale forgetting comparison: FLCB against sequential fine-tuning.
use std::time::Instant;

use flcb::data_synth::{generate_domain, DomainSpec};
use flcb::lifelong::{DomainSource, LifelongRun, Mode, TrainSettings};
use flcb::losses::LossConfig;
use flcb::metrics::{mmae, nbwt, Measure};

fn main() -> flcb::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let epochs: usize = args.get(1).map_or(6, |s| s.parse().unwrap());
    let seeds: u64 = args.get(2).map_or(1, |s| s.parse().unwrap());
    let lr: f64 = args.get(3).map_or(1e-3, |s| s.parse().unwrap());
    let lambda: f64 = args.get(4).map_or(0.5, |s| s.parse().unwrap());
    let modes: Vec<Mode> = match args.get(5).map(String::as_str) {
        Some("flcb") => vec![Mode::Flcb],
        Some("sequential") => vec![Mode::Sequential],
        _ => vec![Mode::Flcb, Mode::Sequential],
    };
    let shared = std::env::var("SHARED").is_ok();
    let specs = if shared {
        [
            DomainSpec::poisson("sparse", 8.0, 1.5, 0.1, 11),
            DomainSpec::poisson("medium", 40.0, 1.5, 0.1, 12),
            DomainSpec::poisson("dense", 100.0, 1.5, 0.1, 13),
        ]
    } else {
        [
            DomainSpec::poisson("sparse", 8.0, 1.0, 0.05, 11),
            DomainSpec::poisson("medium", 40.0, 1.5, 0.15, 12),
            DomainSpec::poisson("dense", 100.0, 2.0, 0.3, 13),
        ]
    };
    let data: Vec<_> = specs
        .iter()
        .map(generate_domain)
        .collect::<Result<_, _>>()?;
    for &mode in &modes {
        for seed in 0..seeds {
            let t0 = Instant::now();
            let mut settings = TrainSettings {
                epochs_per_domain: epochs,
                seed,
                ..Default::default()
            };
            settings.optimizer.learning_rate = lr;
            let sources = data.iter().cloned().map(DomainSource::Loaded).collect();
            let cfg = LossConfig {
                lambda_: lambda,
                ..Default::default()
            };
            let mut run = LifelongRun::new(mode, cfg, settings, sources)?;
            run.run_to_end()?;
            for t in 1..=3 {
                let recs: Vec<_> = run.log.iter().filter(|r| r.step == t).collect();
                let n = recs.len() as f64;
                let avg = |f: fn(&flcb::lifelong::LossLogRecord) -> f64| {
                    recs.iter().map(|r| f(r)).sum::<f64>() / n
                };
                println!(
                    "  step {t}: l1 {:.3} ot {:.4} reg {:.4} out {:.5} feat {:.5}",
                    avg(|r| r.l1),
                    avg(|r| r.ot),
                    avg(|r| r.reg),
                    avg(|r| r.output_term),
                    avg(|r| r.feature_term)
                );
            }
            let e = &run.eval;
            println!(
                "{:?} seed {seed}: nbwt3 {:.3} mmae {:.2} rows {:?} ({:.1}s)",
                mode,
                nbwt(e, 3)?,
                mmae(&e.row_values(Measure::Mae, 3))?,
                e.mae
                    .iter()
                    .map(|r| r
                        .iter()
                        .flatten()
                        .map(|v| format!("{v:.1}"))
                        .collect::<Vec<_>>())
                    .collect::<Vec<_>>(),
                t0.elapsed().as_secs_f64()
            );
        }
    }
    Ok(())
}
