//! Flat `key = value` run configuration.
//!
//! Lines are `section.key = value`; `#` starts a comment. Every key has a
//! default, so an empty file is a valid configuration. Overrides given as
//! `key=value` strings are applied after the file, in order.

use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::data_io::Crop;
use crate::error::{Error, Result};
use crate::generator::ModelConfig;
use crate::objectives::{Backbone, FeatureLayer, LossMode, PerceptualConfig};
use crate::training::TrainConfig;
use crate::warp::DeformRanges;

/// Deformation family for intra-subject pairs, as written in config files.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DeformSettings {
    pub scale_min: f64,
    pub scale_max: f64,
    pub rot_max_deg: f64,
    /// Fraction of image size.
    pub trans_max: f64,
}

impl Default for DeformSettings {
    fn default() -> Self {
        let r = DeformRanges::default();
        Self {
            scale_min: r.scale_min,
            scale_max: r.scale_max,
            rot_max_deg: 15.0,
            trans_max: r.trans_max,
        }
    }
}

impl DeformSettings {
    pub fn to_ranges(&self) -> DeformRanges {
        DeformRanges {
            scale_min: self.scale_min,
            scale_max: self.scale_max,
            rot_max: self.rot_max_deg.to_radians(),
            trans_max: self.trans_max,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct LossConfig {
    pub mode: LossMode,
    pub perceptual: PerceptualConfig,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalConfig {
    /// `None` picks 0 or a tiny stabiliser depending on the number of rows.
    pub ridge: Option<f64>,
    pub interocular: (usize, usize),
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            ridge: None,
            interocular: (0, 1),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct DataConfig {
    pub crop: Option<Crop>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub deform: DeformSettings,
    pub loss: LossConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub data: DataConfig,
    /// File the values were read from, if any.
    pub source: Option<PathBuf>,
    /// Overrides applied after the file, as given.
    pub overrides: Vec<String>,
}

/// Every recognised key with a one-line description.
pub const KEYS: &[(&str, &str)] = &[
    ("model.k", "number of discovered landmarks K"),
    ("model.beta", "soft-argmax temperature"),
    ("model.sigma", "heatmap standard deviation in grid cells"),
    ("model.in_size", "input image side in pixels"),
    ("model.map_size", "score/heatmap side in grid cells"),
    ("model.feature_dim", "encoder feature channels D"),
    ("model.detector_width", "detector channel width"),
    ("model.hourglass_depth", "detector hourglass recursion depth"),
    ("model.encoder_width", "encoder channel width"),
    ("model.generator_width", "generator channel width"),
    ("model.residual_blocks", "generator residual blocks"),
    ("deform.scale_min", "smallest warp scale"),
    ("deform.scale_max", "largest warp scale"),
    ("deform.rot_max_deg", "warp rotation bound in degrees"),
    ("deform.trans_max", "warp translation bound as a fraction of image size"),
    ("loss.mode", "both | recon_only | perceptual_only"),
    ("loss.backbone", "pretrained16 | pretrained19 | random_fixed"),
    ("loss.layers", "comma-separated perceptual taps, e.g. relu1_2,relu2_2"),
    ("loss.backbone_weights", "safetensors file for a pretrained backbone (empty for none)"),
    ("train.batch_size", "images per batch"),
    ("train.lr", "initial Adam learning rate"),
    ("train.lr_decay", "learning-rate multiplier per decay step"),
    ("train.lr_step_epochs", "epochs between decay steps"),
    ("train.epochs", "epochs to train"),
    ("train.seed", "seed for initialisation, shuffling and warps"),
    ("train.aux", "use the inter-subject stage"),
    ("train.cycle", "also train the reverse path"),
    ("train.ckpt_every", "checkpoint period in epochs (0 = final only)"),
    ("train.adam_beta1", "Adam first-moment decay"),
    ("train.adam_beta2", "Adam second-moment decay"),
    ("train.adam_eps", "Adam epsilon"),
    ("cycle.fresh_aux", "draw a separate auxiliary assignment for the reverse path"),
    ("eval.ridge", "regressor ridge (empty = automatic)"),
    ("eval.interocular", "indices of the two eye points, e.g. 0,1"),
    ("data.crop", "source crop x,y,w,h before resizing (empty for none)"),
];

fn parse<T: FromStr>(key: &str, val: &str) -> Result<T>
where
    T::Err: Display,
{
    val.parse::<T>()
        .map_err(|e| Error::Config(format!("config key {key}: invalid value '{val}': {e}")))
}

fn parse_bool(key: &str, val: &str) -> Result<bool> {
    match val.to_ascii_lowercase().as_str() {
        "true" | "on" | "yes" | "1" => Ok(true),
        "false" | "off" | "no" | "0" => Ok(false),
        _ => Err(Error::Config(format!("config key {key}: expected true or false, got '{val}'"))),
    }
}

fn optional<T: FromStr>(key: &str, val: &str) -> Result<Option<T>>
where
    T::Err: Display,
{
    if val.is_empty() || val == "none" {
        Ok(None)
    } else {
        parse(key, val).map(Some)
    }
}

fn fmt_opt<T: Display>(v: &Option<T>) -> String {
    v.as_ref().map(ToString::to_string).unwrap_or_default()
}

impl RunConfig {
    /// Assigns one key. Unknown keys and unparsable values are errors naming the key.
    pub fn set(&mut self, key: &str, val: &str) -> Result<()> {
        let val = val.trim();
        let m = &mut self.model;
        let t = &mut self.train;
        match key {
            "model.k" => m.detector.num_landmarks = parse(key, val)?,
            "model.beta" => m.detector.beta = parse(key, val)?,
            "model.sigma" => m.detector.sigma = parse(key, val)?,
            "model.in_size" => m.detector.in_size = parse(key, val)?,
            "model.map_size" => m.detector.map_size = parse(key, val)?,
            "model.feature_dim" => m.feature_dim = parse(key, val)?,
            "model.detector_width" => m.detector_arch.width = parse(key, val)?,
            "model.hourglass_depth" => m.detector_arch.hourglass_depth = parse(key, val)?,
            "model.encoder_width" => m.encoder_width = parse(key, val)?,
            "model.generator_width" => m.generator_width = parse(key, val)?,
            "model.residual_blocks" => m.residual_blocks = parse(key, val)?,
            "deform.scale_min" => self.deform.scale_min = parse(key, val)?,
            "deform.scale_max" => self.deform.scale_max = parse(key, val)?,
            "deform.rot_max_deg" => self.deform.rot_max_deg = parse(key, val)?,
            "deform.trans_max" => self.deform.trans_max = parse(key, val)?,
            "loss.mode" => self.loss.mode = parse(key, val)?,
            "loss.backbone" => self.loss.perceptual.backbone = parse::<Backbone>(key, val)?,
            "loss.layers" => {
                self.loss.perceptual.layers = val
                    .split(',')
                    .map(|s| parse::<FeatureLayer>(key, s.trim()))
                    .collect::<Result<_>>()?
            }
            "loss.backbone_weights" => self.loss.perceptual.weights = optional::<PathBuf>(key, val)?,
            "train.batch_size" => t.batch_size = parse(key, val)?,
            "train.lr" => t.lr = parse(key, val)?,
            "train.lr_decay" => t.lr_decay = parse(key, val)?,
            "train.lr_step_epochs" => t.lr_step_epochs = parse(key, val)?,
            "train.epochs" => t.epochs = parse(key, val)?,
            "train.seed" => t.seed = parse(key, val)?,
            "train.aux" => t.aux = parse_bool(key, val)?,
            "train.cycle" => t.cycle = parse_bool(key, val)?,
            "train.ckpt_every" => t.ckpt_every = parse(key, val)?,
            "train.adam_beta1" => t.adam_beta1 = parse(key, val)?,
            "train.adam_beta2" => t.adam_beta2 = parse(key, val)?,
            "train.adam_eps" => t.adam_eps = parse(key, val)?,
            "cycle.fresh_aux" => t.fresh_aux = parse_bool(key, val)?,
            "eval.ridge" => self.eval.ridge = optional(key, val)?,
            "eval.interocular" => {
                let parts: Vec<usize> = val
                    .split(',')
                    .map(|s| parse(key, s.trim()))
                    .collect::<Result<_>>()?;
                match parts.as_slice() {
                    &[a, b] if a != b => self.eval.interocular = (a, b),
                    _ => {
                        return Err(Error::Config(format!(
                            "config key {key}: expected two distinct indices 'i,j', got '{val}'"
                        )))
                    }
                }
            }
            "data.crop" => self.data.crop = optional(key, val)?,
            _ => return Err(Error::Config(format!("unknown config key '{key}'"))),
        }
        Ok(())
    }

    /// Current value of every key, in [`KEYS`] order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let m = &self.model;
        let t = &self.train;
        let p = &self.loss.perceptual;
        let values = [
            m.detector.num_landmarks.to_string(),
            m.detector.beta.to_string(),
            m.detector.sigma.to_string(),
            m.detector.in_size.to_string(),
            m.detector.map_size.to_string(),
            m.feature_dim.to_string(),
            m.detector_arch.width.to_string(),
            m.detector_arch.hourglass_depth.to_string(),
            m.encoder_width.to_string(),
            m.generator_width.to_string(),
            m.residual_blocks.to_string(),
            self.deform.scale_min.to_string(),
            self.deform.scale_max.to_string(),
            self.deform.rot_max_deg.to_string(),
            self.deform.trans_max.to_string(),
            self.loss.mode.to_string(),
            p.backbone.to_string(),
            p.layers.iter().map(ToString::to_string).collect::<Vec<_>>().join(","),
            p.weights.as_ref().map(|w| w.display().to_string()).unwrap_or_default(),
            t.batch_size.to_string(),
            t.lr.to_string(),
            t.lr_decay.to_string(),
            t.lr_step_epochs.to_string(),
            t.epochs.to_string(),
            t.seed.to_string(),
            t.aux.to_string(),
            t.cycle.to_string(),
            t.ckpt_every.to_string(),
            t.adam_beta1.to_string(),
            t.adam_beta2.to_string(),
            t.adam_eps.to_string(),
            t.fresh_aux.to_string(),
            fmt_opt(&self.eval.ridge),
            format!("{},{}", self.eval.interocular.0, self.eval.interocular.1),
            self.data
                .crop
                .map(|c| format!("{},{},{},{}", c.x, c.y, c.width, c.height))
                .unwrap_or_default(),
        ];
        KEYS.iter().map(|(k, _)| *k).zip(values).collect()
    }

    /// Resolved configuration in the same format the parser reads.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        if let Some(src) = &self.source {
            out.push_str(&format!("# source: {}\n", src.display()));
        }
        for o in &self.overrides {
            out.push_str(&format!("# override: {o}\n"));
        }
        for (k, v) in self.entries() {
            out.push_str(&format!("{k} = {v}\n"));
        }
        out
    }

    pub fn parse_text(text: &str, origin: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        cfg.apply_text(text, origin)?;
        Ok(cfg)
    }

    fn apply_text(&mut self, text: &str, origin: &str) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| Error::Parse {
                path: PathBuf::from(origin),
                line: i as u64 + 1,
                msg: format!("expected 'key = value', got '{line}'"),
            })?;
            self.set(k.trim(), v)?;
        }
        Ok(())
    }

    pub fn apply_override(&mut self, kv: &str) -> Result<()> {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override '{kv}' must look like key=value")))?;
        self.set(k.trim(), v)?;
        self.overrides.push(kv.to_string());
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.deform.to_ranges().validate()?;
        self.train.validate()?;
        if let Some(r) = self.eval.ridge {
            if !(r >= 0.0 && r.is_finite()) {
                return Err(Error::Config(format!("config key eval.ridge: must be >= 0, got {r}")));
            }
        }
        Ok(())
    }
}

/// Reads `file` (if given), applies `overrides` in order and validates.
pub fn parse_config(file: Option<&Path>, overrides: &[String]) -> Result<RunConfig> {
    let mut cfg = RunConfig::default();
    if let Some(path) = file {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        cfg.apply_text(&text, &path.display().to_string())?;
        cfg.source = Some(path.to_path_buf());
    }
    for o in overrides {
        cfg.apply_override(o)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        let c = RunConfig::parse_text("", "empty").unwrap();
        assert_eq!(c.train.lr, 0.001);
        assert_eq!(c.train.batch_size, 32);
        assert_eq!(c.model.detector.beta, 10.0);
        assert_eq!(c.model.detector.sigma, 0.5);
        assert_eq!(c.train.lr_decay, 0.1);
        assert_eq!(c.train.lr_step_epochs, 30);
        assert_eq!(c, RunConfig::default());
    }

    #[test]
    fn override_beats_file() {
        let dir = tempfile::tempdir().unwrap();
        let f = dir.path().join("a.conf");
        std::fs::write(&f, "# comment\ntrain.lr = 0.5   # trailing\nmodel.k = 4\n").unwrap();
        let c = parse_config(Some(&f), &["train.lr=0.01".to_string()]).unwrap();
        assert_eq!(c.train.lr, 0.01);
        assert_eq!(c.model.detector.num_landmarks, 4);
        assert!(c.to_text().contains("# override: train.lr=0.01"));
    }

    #[test]
    fn errors_name_the_key() {
        let e = RunConfig::parse_text("loss.mode = bananas", "x").unwrap_err().to_string();
        assert!(e.contains("loss.mode") && e.contains("recon_only") && e.contains("perceptual_only"), "{e}");
        let e = RunConfig::parse_text("train.lr = fast", "x").unwrap_err().to_string();
        assert!(e.contains("train.lr"), "{e}");
        let e = RunConfig::parse_text("train.learning_rate = 1", "x").unwrap_err().to_string();
        assert!(e.contains("train.learning_rate"), "{e}");
        let e = RunConfig::parse_text("train.lr 1", "cfg.txt").unwrap_err();
        assert!(matches!(e, Error::Parse { line: 1, .. }));
    }

    #[test]
    fn echo_round_trips_every_key() {
        let mut c = RunConfig::default();
        for (k, v) in [
            ("model.k", "4"),
            ("deform.rot_max_deg", "7.5"),
            ("loss.layers", "input,relu2_2"),
            ("loss.backbone", "random_fixed"),
            ("loss.backbone_weights", "/tmp/vgg.safetensors"),
            ("eval.ridge", "0.001"),
            ("eval.interocular", "2,3"),
            ("data.crop", "1,2,30,40"),
            ("cycle.fresh_aux", "on"),
        ] {
            c.set(k, v).unwrap();
        }
        let back = RunConfig::parse_text(&c.to_text(), "echo").unwrap();
        assert_eq!(back, c);
        assert_eq!(c.entries().len(), KEYS.len());
    }
}
