//! One pass of the inter/intra-subject generator: each sprite is redrawn with
//! another sprite's landmarks, then with its own warped copy's landmarks, in
//! both cycle directions. Prints the loss terms and saves the image chain.
//! With `--ckpt` the weights come from a training run.
//!
//! ```text
//! cargo run --release --example inter_intra_generation -- --ckpt target/toy-run/model.safetensors
//! ```

use std::path::PathBuf;

use candle_core::{DType, Device};
use clap::Parser;
use landmark_discovery::config::parse_config;
use landmark_discovery::data_io::{synthesize_toy_dataset, ToyConfig};
use landmark_discovery::generator::PathOptions;
use landmark_discovery::objectives::{total_loss, PerceptualNet};
use landmark_discovery::training::{build_training_batch, load_model, Trainer};
use landmark_discovery::Image;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Parser)]
struct Args {
    #[arg(long, default_value = "configs/toy.conf")]
    config: PathBuf,
    #[arg(long)]
    ckpt: Option<PathBuf>,
    #[arg(long, default_value = "target/generation")]
    out: PathBuf,
    #[arg(long, default_value_t = 4)]
    batch: usize,
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
    let size = model.config().detector.in_size;
    let data = synthesize_toy_dataset(&ToyConfig {
        count: args.batch,
        image_size: size,
        ..ToyConfig::default()
    })?;
    let idx: Vec<usize> = (0..args.batch).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let batch = build_training_batch(&data, &idx, &cfg.deform.to_ranges(), &mut rng)?;
    let (x, xp) = batch.tensors(DType::F32, &Device::Cpu)?;
    println!("auxiliary assignment {:?}", batch.aux_index);

    let out = model.cycle_forward_in_batch(&x, &xp, &batch.aux_index, None, PathOptions::default())?;
    let net = PerceptualNet::new(&cfg.loss.perceptual, DType::F32, &Device::Cpu)?;
    let (_, report) = total_loss(&out, &x, &xp, cfg.loss.mode, Some(&net))?;
    println!(
        "reconstruction fwd {:.5} bwd {:.5}  perceptual fwd {:.5} bwd {:.5}  total {:.5}",
        report.recon_fwd, report.recon_bwd, report.percep_fwd, report.percep_bwd, report.total
    );
    println!("{} images generated", model.generated_images());

    std::fs::create_dir_all(&args.out).map_err(|e| landmark_discovery::Error::io(&args.out, e))?;
    let fwd = &out.forward;
    let aux = Image::batch_from_tensor(fwd.aux_image.as_ref().expect("auxiliary stage is on"))?;
    let gen = Image::batch_from_tensor(&fwd.target_image)?;
    for (i, (a, g)) in aux.iter().zip(&gen).enumerate() {
        let chain = [&batch.x[i], &data.items[batch.aux_index[i]].image, a, &batch.x_prime[i], g];
        for (name, img) in ["x", "x_aux", "generated_aux", "x_prime", "generated_target"].iter().zip(chain) {
            img.save_png(&args.out.join(format!("{i:02}_{name}.png")))?;
        }
    }
    println!("image chains written to {}", args.out.display());
    Ok(())
}
