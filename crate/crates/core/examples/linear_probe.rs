//! Linear-probe evaluation of a detector on toy sprites: fits the regressor
//! from discovered to annotated points, reports test NME and the
//! limited-supervision sweep.
//!
//! ```text
//! cargo run --release --example linear_probe -- --ckpt target/toy-run/model.safetensors
//! ```

use std::path::PathBuf;

use candle_core::{DType, Device};
use clap::Parser;
use landmark_discovery::config::parse_config;
use landmark_discovery::data_io::{synthesize_toy_dataset, ToyConfig};
use landmark_discovery::evaluation::{format_sweep_table, limited_supervision_sweep, probe_nme, Supervision};
use landmark_discovery::pipeline::probe_rows;
use landmark_discovery::training::{load_model, Trainer};

#[derive(Parser)]
struct Args {
    #[arg(long, default_value = "configs/toy.conf")]
    config: PathBuf,
    /// Trained checkpoint; the untrained initialisation is used without it.
    #[arg(long)]
    ckpt: Option<PathBuf>,
    #[arg(long, default_value_t = 2000)]
    count: usize,
    #[arg(long, default_value_t = 200)]
    held_out: usize,
}

fn main() -> landmark_discovery::Result<()> {
    let args = Args::parse();
    let cfg = parse_config(Some(&args.config), &[])?;
    let fresh;
    let loaded;
    let model = match &args.ckpt {
        Some(path) => {
            loaded = load_model(path, DType::F32, &Device::Cpu)?.0;
            &loaded
        }
        None => {
            fresh = Trainer::new(cfg.clone(), &Device::Cpu)?;
            &fresh.model
        }
    };
    let data = synthesize_toy_dataset(&ToyConfig {
        count: args.count,
        image_size: model.config().detector.in_size,
        ..ToyConfig::default()
    })?;
    let split = args.count - args.held_out;
    let train = probe_rows(model.detector(), &data.subset(0..split, "train"))?;
    let test = probe_rows(model.detector(), &data.subset(split..args.count, "test"))?;

    let io = cfg.eval.interocular;
    let full = probe_nme((&train.0, &train.1), (&test.0, &test.1), cfg.eval.ridge, io)?;
    println!("test NME with {} training images: {:.2}%", split, full.nme_percent);

    let ns: Vec<Supervision> = [1, 5, 10, 100, 500]
        .into_iter()
        .filter(|&n| n < split)
        .map(Supervision::Count)
        .chain([Supervision::All])
        .collect();
    let rows = limited_supervision_sweep((&train.0, &train.1), (&test.0, &test.1), &ns, &[0, 1, 2, 3, 4], cfg.eval.ridge, io)?;
    print!("{}", format_sweep_table(&rows));
    Ok(())
}
