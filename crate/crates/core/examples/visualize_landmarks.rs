//! Detects landmarks on held-out sprites and writes colour-coded overlays, one
//! colour per discovered landmark, so consistency across subjects is visible.
//!
//! ```text
//! cargo run --release --example visualize_landmarks -- --ckpt target/toy-run/model.safetensors
//! ```

use std::path::PathBuf;

use candle_core::{DType, Device};
use clap::Parser;
use landmark_discovery::data_io::{synthesize_toy_dataset, ToyConfig};
use landmark_discovery::training::load_model;
use landmark_discovery::visualize::write_overlays;

#[derive(Parser)]
struct Args {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long, default_value = "target/detections")]
    out: PathBuf,
    #[arg(long, default_value_t = 16)]
    count: usize,
}

fn main() -> landmark_discovery::Result<()> {
    let args = Args::parse();
    let (model, meta) = load_model(&args.ckpt, DType::F32, &Device::Cpu)?;
    println!("checkpoint after {} epochs / {} steps", meta.epoch, meta.step);
    let data = synthesize_toy_dataset(&ToyConfig {
        count: 2000,
        image_size: model.config().detector.in_size,
        ..ToyConfig::default()
    })?;
    let held_out = data.subset(2000 - args.count..2000, "test");
    let points = model.detector().detect_pixels(&held_out.images(), 32)?;
    for (s, p) in held_out.items.iter().zip(&points).take(4) {
        let coords: Vec<String> = p.iter().map(|q| format!("({:.1}, {:.1})", q[0], q[1])).collect();
        println!("{}: {}", s.id, coords.join(" "));
    }
    let items = held_out.items.iter().zip(&points).map(|(s, p)| (s.id.as_str(), &s.image, p.as_slice()));
    let written = write_overlays(&args.out, items, None)?;
    println!("wrote {} overlays to {}", written.len(), args.out.display());
    Ok(())
}
