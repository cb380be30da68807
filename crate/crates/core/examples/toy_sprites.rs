//! Renders a handful of procedural face sprites, writes them as a dataset
//! directory and saves ground-truth overlays next to it.
//!
//! ```text
//! cargo run --release --example toy_sprites -- --out target/sprites --count 12
//! ```

use std::path::PathBuf;

use clap::Parser;
use landmark_discovery::data_io::{synthesize_toy_dataset, write_dataset, ToyConfig};
use landmark_discovery::visualize::write_overlays;

#[derive(Parser)]
struct Args {
    #[arg(long, default_value = "target/sprites")]
    out: PathBuf,
    #[arg(long, default_value_t = 12)]
    count: usize,
    #[arg(long, default_value_t = 64)]
    size: usize,
    #[arg(long, default_value_t = 7)]
    seed: u64,
}

fn main() -> landmark_discovery::Result<()> {
    let args = Args::parse();
    let data = synthesize_toy_dataset(&ToyConfig {
        count: args.count,
        image_size: args.size,
        seed: args.seed,
        ..ToyConfig::default()
    })?;
    write_dataset(&args.out, &data)?;

    let names = ["left eye", "right eye", "nose tip", "mouth left", "mouth right"];
    for s in data.items.iter().take(3) {
        let pts = s.landmarks.as_ref().expect("sprites are annotated");
        let eyes = (pts[0][0] - pts[1][0]).hypot(pts[0][1] - pts[1][1]);
        println!("{} (inter-ocular {eyes:.1} px)", s.id);
        for (name, p) in names.iter().zip(pts) {
            println!("  {name:<12} x={:6.2} y={:6.2}", p[0], p[1]);
        }
    }

    let items: Vec<_> = data
        .items
        .iter()
        .map(|s| (s.id.as_str(), &s.image, s.landmarks.as_deref().unwrap_or(&[])))
        .collect();
    let written = write_overlays(&args.out.join("overlays"), items, None)?;
    println!("{} sprites and {} overlays under {}", data.len(), written.len(), args.out.display());
    Ok(())
}
