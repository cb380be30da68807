//! The `landmarks` command line.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use candle_core::{DType, Device};
use clap::{Args, Parser, Subcommand};

use crate::config::{parse_config, RunConfig};
use crate::data_io::{
    load_dataset_dir, load_image_dataset, read_landmarks, scan_image_dir, synthesize_toy_dataset, write_dataset,
    write_landmarks, Dataset, LandmarkTable, ToyConfig, MANIFEST_FILE,
};
use crate::error::{Error, Result};
use crate::evaluation::{
    compute_nme, default_ridge, fit_linear_regressor, format_sweep_table, limited_supervision_sweep, RegressorWeights,
    Supervision,
};
use crate::imaging::Image;
use crate::training::{load_model, Trainer};
use crate::visualize::write_overlays;

#[derive(Parser, Debug)]
#[command(name = "landmarks", version, about = "Unsupervised landmark discovery by conditional image generation")]
pub struct Cli {
    #[command(flatten)]
    pub common: Common,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct Common {
    /// Seed for every random choice the command makes.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Flat `key = value` configuration file.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Configuration override `key=value`; repeatable, applied after --config.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Render procedural face sprites with annotations.
    Toydata {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, visible_alias = "n", default_value_t = 2000)]
        count: usize,
        #[arg(long, default_value_t = 64)]
        size: usize,
    },
    /// Train detector, encoder and generator jointly.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Continue from a checkpoint written by an earlier run.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Write discovered landmarks for a directory of images.
    Detect {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        images: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fit the linear map from discovered to annotated landmarks.
    FitRegressor {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Inter-ocular normalised error of predictions, optionally through a regressor.
    Eval {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        #[arg(long)]
        regressor: Option<PathBuf>,
    },
    /// NME against the number of annotated training images.
    Sweep {
        #[arg(long)]
        pred_train: PathBuf,
        #[arg(long)]
        gt_train: PathBuf,
        #[arg(long)]
        pred_test: PathBuf,
        #[arg(long)]
        gt_test: PathBuf,
        /// Comma-separated counts; `all` uses every training row.
        #[arg(long, value_delimiter = ',', default_value = "1,5,10,100,500,all")]
        ns: Vec<String>,
        /// Number of random subsets per count.
        #[arg(long, default_value_t = 5)]
        seeds: usize,
    },
    /// Draw landmarks from a CSV onto their images.
    Visualize {
        #[arg(long)]
        pred: PathBuf,
        /// Root the CSV image ids are relative to.
        #[arg(long)]
        images: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        radius: Option<f64>,
    },
}

fn load_config(common: &Common) -> Result<RunConfig> {
    let mut overrides = common.overrides.clone();
    if let Some(seed) = common.seed {
        overrides.push(format!("train.seed={seed}"));
    }
    parse_config(common.config.as_deref(), &overrides)
}

/// Table rows in `pred` order for ids also present in `gt`.
fn aligned(pred: &LandmarkTable, gt: &LandmarkTable) -> Result<(Vec<Vec<f64>>, Vec<Vec<f64>>)> {
    let ids = pred.common_ids(gt);
    if ids.is_empty() {
        return Err(Error::Input("prediction and ground-truth files share no image ids".into()));
    }
    if ids.len() < pred.len() {
        log::warn!("{} predicted image(s) have no ground truth and are ignored", pred.len() - ids.len());
    }
    Ok((pred.rows_for(&ids)?, gt.rows_for(&ids)?))
}

fn images_dataset(dir: &Path, size: usize, cfg: &RunConfig) -> Result<Dataset> {
    if dir.join(MANIFEST_FILE).is_file() {
        return load_dataset_dir(dir, size, cfg.data.crop);
    }
    let listed = scan_image_dir(dir)?;
    if listed.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let manifest = std::env::temp_dir().join(format!("landmarks-manifest-{}.txt", std::process::id()));
    std::fs::write(&manifest, listed.join("\n")).map_err(|e| Error::io(&manifest, e))?;
    let ds = load_image_dataset(dir, &manifest, None, size, cfg.data.crop);
    let _ = std::fs::remove_file(&manifest);
    ds
}

pub fn execute(cli: Cli) -> Result<()> {
    let cfg = load_config(&cli.common)?;
    match cli.command {
        Command::Toydata { out, count, size } => {
            let toy = ToyConfig {
                count,
                image_size: size,
                seed: cli.common.seed.unwrap_or(ToyConfig::default().seed),
                ..ToyConfig::default()
            };
            let ds = synthesize_toy_dataset(&toy)?;
            write_dataset(&out, &ds)?;
            println!("wrote {} sprites to {}", ds.len(), out.display());
        }
        Command::Train { data, out, resume } => {
            let ds = load_dataset_dir(&data, cfg.model.detector.in_size, cfg.data.crop)?;
            print!("{}", cfg.to_text());
            let mut trainer = match resume {
                Some(ckpt) => Trainer::resume(cfg, &ckpt, &Device::Cpu)?,
                None => Trainer::new(cfg, &Device::Cpu)?,
            };
            let summary = trainer.run(&ds, &out)?;
            println!("checkpoint {}", summary.checkpoint.display());
            println!("metrics {}", summary.metrics.display());
        }
        Command::Detect { ckpt, images, out } => {
            let (model, meta) = load_model(&ckpt, DType::F32, &Device::Cpu)?;
            let ds = images_dataset(&images, meta.model.detector.in_size, &cfg)?;
            let det = model.detector();
            let pts = det.detect_pixels(&ds.images(), 64)?;
            let table = LandmarkTable {
                entries: ds
                    .items
                    .iter()
                    .zip(pts)
                    .map(|(s, p)| (s.id.clone(), p.into_iter().map(|q| s.frame.to_source(q)).collect()))
                    .collect(),
            };
            write_landmarks(&out, &table)?;
            println!("wrote landmarks for {} images to {}", table.len(), out.display());
        }
        Command::FitRegressor { pred, gt, out } => {
            let (p, g) = aligned(&read_landmarks(&pred)?, &read_landmarks(&gt)?)?;
            let k = p[0].len() / 2;
            let ridge = cfg.eval.ridge.unwrap_or_else(|| default_ridge(p.len(), k));
            let w = fit_linear_regressor(&p, &g, ridge)?;
            w.save(&out)?;
            println!("fitted {}x{} regressor on {} images (ridge {ridge})", 2 * w.k + 1, 2 * w.m, p.len());
        }
        Command::Eval { pred, gt, regressor } => {
            let (mut p, g) = aligned(&read_landmarks(&pred)?, &read_landmarks(&gt)?)?;
            if let Some(path) = regressor {
                p = RegressorWeights::load(&path)?.predict(&p)?;
            }
            let report = compute_nme(&p, &g, cfg.eval.interocular)?;
            println!("NME={:.4}%", report.nme_percent);
        }
        Command::Sweep {
            pred_train,
            gt_train,
            pred_test,
            gt_test,
            ns,
            seeds,
        } => {
            let (tp, tg) = aligned(&read_landmarks(&pred_train)?, &read_landmarks(&gt_train)?)?;
            let (ep, eg) = aligned(&read_landmarks(&pred_test)?, &read_landmarks(&gt_test)?)?;
            let ns: Vec<Supervision> = ns.iter().map(|s| s.parse()).collect::<Result<_>>()?;
            let base = cli.common.seed.unwrap_or(0);
            let seeds: Vec<u64> = (0..seeds as u64).map(|i| base + i).collect();
            let rows = limited_supervision_sweep((&tp, &tg), (&ep, &eg), &ns, &seeds, cfg.eval.ridge, cfg.eval.interocular)?;
            print!("{}", format_sweep_table(&rows));
        }
        Command::Visualize {
            pred,
            images,
            out,
            radius,
        } => {
            let table = read_landmarks(&pred)?;
            let loaded: Vec<(String, Image, Vec<[f64; 2]>)> = table
                .entries
                .into_iter()
                .map(|(id, pts)| Ok((Image::load(&images.join(&id))?, id, pts)))
                .map(|r: Result<_>| r.map(|(img, id, pts)| (id, img, pts)))
                .collect::<Result<_>>()?;
            let written = write_overlays(
                &out,
                loaded.iter().map(|(id, img, pts)| (id.as_str(), img, pts.as_slice())),
                radius,
            )?;
            println!("wrote {} overlays to {}", written.len(), out.display());
        }
    }
    Ok(())
}

/// Parses `args` and runs the command. Returns the process exit code:
/// 0 on success, 1 on a runtime error, 2 on a usage error.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}
