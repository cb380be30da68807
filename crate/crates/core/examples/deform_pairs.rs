//! Draws intra-subject training pairs: each sprite next to a random similarity
//! warp of itself, with the annotated points carried through the same warp.
//!
//! ```text
//! cargo run --release --example deform_pairs -- --out target/pairs
//! ```

use std::path::PathBuf;

use clap::Parser;
use landmark_discovery::data_io::{synthesize_sprite, ToyConfig};
use landmark_discovery::visualize::overlay;
use landmark_discovery::warp::{apply_warp_image, apply_warp_points, sample_deform, DeformRanges};
use landmark_discovery::Image;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Parser)]
struct Args {
    #[arg(long, default_value = "target/pairs")]
    out: PathBuf,
    #[arg(long, default_value_t = 6)]
    pairs: usize,
    #[arg(long, default_value_t = 15.0)]
    rot_max_deg: f64,
    #[arg(long, default_value_t = 0.1)]
    trans_max: f64,
}

fn side_by_side(a: &Image, b: &Image) -> Image {
    let (h, w, c) = (a.height(), a.width(), a.channels());
    let mut out = Image::zeros(h, 2 * w + 2, c);
    for r in 0..h {
        for col in 0..w {
            for k in 0..c {
                out.set(r, col, k, a.get(r, col, k));
                out.set(r, w + 2 + col, k, b.get(r, col, k));
            }
        }
    }
    out
}

fn main() -> landmark_discovery::Result<()> {
    let args = Args::parse();
    std::fs::create_dir_all(&args.out).map_err(|e| landmark_discovery::Error::io(&args.out, e))?;
    let ranges = DeformRanges {
        rot_max: args.rot_max_deg.to_radians(),
        trans_max: args.trans_max,
        ..DeformRanges::default()
    };
    let cfg = ToyConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for i in 0..args.pairs {
        let sprite = synthesize_sprite(&cfg, i);
        let pts = sprite.landmarks.expect("sprites are annotated");
        let d = sample_deform(&ranges, &mut rng)?;
        let warped = apply_warp_image(&sprite.image, &d)?;
        let moved = apply_warp_points(&pts, &d, sprite.image.width(), sprite.image.height());
        println!(
            "pair {i}: scale {:.3} rotation {:+.1} deg translation ({:+.3}, {:+.3}); left eye ({:.1}, {:.1}) -> ({:.1}, {:.1})",
            d.scale,
            d.rotation.to_degrees(),
            d.translation.0,
            d.translation.1,
            pts[0][0],
            pts[0][1],
            moved[0][0],
            moved[0][1]
        );
        let pair = side_by_side(&overlay(&sprite.image, &pts, 1.2), &overlay(&warped, &moved, 1.2));
        pair.save_png(&args.out.join(format!("pair_{i:02}.png")))?;
    }
    println!("wrote {} pairs to {}", args.pairs, args.out.display());
    Ok(())
}
