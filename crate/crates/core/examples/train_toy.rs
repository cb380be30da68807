//! Trains the full model on procedural face sprites and compares the linear
//! probe and equivariance of the trained detector against its initialisation.
//!
//! ```text
//! cargo run --release --example train_toy -- --epochs 8 --set train.cycle=false
//! ```

use std::path::PathBuf;
use std::time::Instant;

use candle_core::Device;
use clap::Parser;
use landmark_discovery::config::parse_config;
use landmark_discovery::data_io::{synthesize_toy_dataset, ToyConfig};
use landmark_discovery::pipeline::{equivariance_errors, median, probe_detector};
use landmark_discovery::training::{epoch_means, Trainer};
use landmark_discovery::warp::DeformRanges;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Parser)]
struct Args {
    #[arg(long, default_value = "configs/toy.conf")]
    config: PathBuf,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long, default_value_t = 2000)]
    count: usize,
    /// Sprites held out from training for the probe test split and warps.
    #[arg(long, default_value_t = 200)]
    held_out: usize,
    #[arg(long, default_value = "target/toy-run")]
    out: PathBuf,
    #[arg(long = "set")]
    overrides: Vec<String>,
    /// Also probe after every epoch.
    #[arg(long)]
    curve: bool,
}

fn main() -> landmark_discovery::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let args = Args::parse();
    let mut overrides = args.overrides.clone();
    if let Some(e) = args.epochs {
        overrides.push(format!("train.epochs={e}"));
    }
    let cfg = parse_config(Some(&args.config), &overrides)?;
    let data = synthesize_toy_dataset(&ToyConfig {
        count: args.count,
        ..ToyConfig::default()
    })?;
    let split = args.count - args.held_out;
    let train = data.subset(0..split, "train");
    let test = data.subset(split..args.count, "test");

    let mut trainer = Trainer::new(cfg.clone(), &Device::Cpu)?;
    let probe = |t: &Trainer| -> landmark_discovery::Result<(f64, f64)> {
        let det = t.model.detector();
        let nme = probe_detector(det, &train, &test, cfg.eval.ridge, cfg.eval.interocular)?.nme_percent;
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let eq = equivariance_errors(det, &test.images(), 200, &DeformRanges::default(), &mut rng)?;
        Ok((nme, median(&eq)))
    };
    let (nme0, eq0) = probe(&trainer)?;
    println!("initial detector: NME {nme0:.2}%  median equivariance {eq0:.2} px");

    let start = Instant::now();
    let summary = if args.curve {
        let total = cfg.train.epochs;
        let mut records = Vec::new();
        let mut last = None;
        for e in 1..=total {
            trainer.config.train.epochs = e;
            let s = trainer.run(&train, &args.out)?;
            records.extend(s.records.iter().copied());
            let (nme, eq) = probe(&trainer)?;
            println!(
                "after epoch {e}: NME {nme:.2}%  median equivariance {eq:.2} px  ({:.0} s)",
                start.elapsed().as_secs_f64()
            );
            last = Some(s);
        }
        let mut s = last.expect("at least one epoch");
        s.records = records;
        s
    } else {
        trainer.run(&train, &args.out)?
    };
    let secs = start.elapsed().as_secs_f64();
    let (nme1, eq1) = probe(&trainer)?;
    for (e, m) in epoch_means(&summary.records) {
        println!("epoch {e:>3}  mean loss {m:.5}");
    }
    println!("trained detector: NME {nme1:.2}%  median equivariance {eq1:.2} px");
    println!("NME ratio {:.3}, training took {secs:.0} s", nme1 / nme0);
    println!("checkpoint {}", summary.checkpoint.display());
    Ok(())
}
