//! Reconstruction and perceptual losses on both cycle directions.
//!
//! Both losses use mean reduction and the four terms are summed with unit
//! weights. The perceptual extractor is frozen: its weights are plain tensors,
//! never variables, so no gradient is ever accumulated for them.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use candle_core::{DType, Device, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::generator::CycleOutputs;
use crate::nn::Conv2d;
use crate::ops::avg_pool2x;

const RANDOM_PYRAMID_SEED: u64 = 0x5eed_0f_1a7e;
const RANDOM_PYRAMID_WIDTHS: [usize; 4] = [8, 16, 32, 32];
const IMAGENET_MEAN: [f64; 3] = [0.485, 0.456, 0.406];
const IMAGENET_STD: [f64; 3] = [0.229, 0.224, 0.225];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Backbone {
    Pretrained16,
    Pretrained19,
    RandomFixed,
}

impl FromStr for Backbone {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pretrained16" => Ok(Self::Pretrained16),
            "pretrained19" => Ok(Self::Pretrained19),
            "random_fixed" => Ok(Self::RandomFixed),
            other => Err(Error::Config(format!(
                "unknown backbone '{other}' (expected pretrained16, pretrained19 or random_fixed)"
            ))),
        }
    }
}

impl fmt::Display for Backbone {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Pretrained16 => "pretrained16",
            Self::Pretrained19 => "pretrained19",
            Self::RandomFixed => "random_fixed",
        })
    }
}

/// A tapped activation: `input` (the raw image) or `relu{block}_{index}`.
/// The random pyramid has one activation per block, so only the block
/// number matters there.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum FeatureLayer {
    Input,
    Relu { block: usize, index: usize },
}

impl FromStr for FeatureLayer {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        if s == "input" {
            return Ok(Self::Input);
        }
        let parsed = s.strip_prefix("relu").and_then(|rest| {
            let (b, i) = rest.split_once('_')?;
            Some((b.parse::<usize>().ok()?, i.parse::<usize>().ok()?))
        });
        match parsed {
            Some((block, index)) if (1..=5).contains(&block) && index >= 1 => Ok(Self::Relu { block, index }),
            _ => Err(Error::Config(format!(
                "unknown perceptual layer '{s}' (expected 'input' or 'relu<block>_<index>')"
            ))),
        }
    }
}

impl fmt::Display for FeatureLayer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Input => f.write_str("input"),
            Self::Relu { block, index } => write!(f, "relu{block}_{index}"),
        }
    }
}

pub fn default_layers() -> Vec<FeatureLayer> {
    ["relu1_2", "relu2_2", "relu3_3", "relu4_3"]
        .iter()
        .map(|s| s.parse().expect("valid layer name"))
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct PerceptualConfig {
    pub backbone: Backbone,
    pub layers: Vec<FeatureLayer>,
    /// safetensors file with torchvision-style `features.N.weight|bias` tensors.
    pub weights: Option<PathBuf>,
}

impl Default for PerceptualConfig {
    fn default() -> Self {
        Self {
            backbone: Backbone::Pretrained16,
            layers: default_layers(),
            weights: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum LossMode {
    #[default]
    Both,
    ReconOnly,
    PerceptualOnly,
}

impl FromStr for LossMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "both" => Ok(Self::Both),
            "recon_only" => Ok(Self::ReconOnly),
            "perceptual_only" => Ok(Self::PerceptualOnly),
            other => Err(Error::Config(format!(
                "unknown loss mode '{other}' (expected both, recon_only or perceptual_only)"
            ))),
        }
    }
}

impl fmt::Display for LossMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Both => "both",
            Self::ReconOnly => "recon_only",
            Self::PerceptualOnly => "perceptual_only",
        })
    }
}

impl LossMode {
    pub fn uses_recon(self) -> bool {
        !matches!(self, Self::PerceptualOnly)
    }
    pub fn uses_perceptual(self) -> bool {
        !matches!(self, Self::ReconOnly)
    }
}

enum Stage {
    Conv { conv: Conv2d, tap: bool },
    MaxPool,
    AvgPool,
}

/// Frozen feature extractor used by the perceptual loss.
pub struct PerceptualNet {
    backbone: Backbone,
    stages: Vec<Stage>,
    normalize: Option<(Tensor, Tensor)>,
    tap_input: bool,
    weights: Vec<Tensor>,
}

fn vgg_plan(backbone: Backbone) -> &'static [usize] {
    // convs per block
    match backbone {
        Backbone::Pretrained19 => &[2, 2, 4, 4, 4],
        _ => &[2, 2, 3, 3, 3],
    }
}

impl PerceptualNet {
    pub fn new(cfg: &PerceptualConfig, dtype: DType, device: &Device) -> Result<Self> {
        if cfg.layers.is_empty() {
            return Err(Error::Config("at least one perceptual layer must be selected".into()));
        }
        match cfg.backbone {
            Backbone::RandomFixed => Self::random_pyramid(&cfg.layers, dtype, device),
            Backbone::Pretrained16 | Backbone::Pretrained19 => {
                let path = cfg.weights.as_deref().ok_or_else(|| {
                    Error::Config(format!(
                        "backbone '{}' needs loss.backbone_weights (safetensors with 'features.N.weight' tensors); \
                         loss.backbone = random_fixed needs no download",
                        cfg.backbone
                    ))
                })?;
                Self::vgg(cfg.backbone, &cfg.layers, path, dtype, device)
            }
        }
    }

    /// Drops stages past the deepest tap and collects the frozen weights.
    fn finish(backbone: Backbone, mut stages: Vec<Stage>, tap_input: bool, normalize: Option<(Tensor, Tensor)>) -> Self {
        let last_needed = stages
            .iter()
            .rposition(|s| matches!(s, Stage::Conv { tap: true, .. }))
            .map_or(0, |i| i + 1);
        stages.truncate(last_needed);
        let weights = stages
            .iter()
            .filter_map(|s| match s {
                Stage::Conv { conv, .. } => Some([conv.weight.clone(), conv.bias.clone()]),
                _ => None,
            })
            .flatten()
            .collect();
        Self {
            backbone,
            stages,
            normalize,
            tap_input,
            weights,
        }
    }

    /// Four conv stages with fixed seeded weights; `relu<b>_<i>` taps stage `b`.
    fn random_pyramid(layers: &[FeatureLayer], dtype: DType, device: &Device) -> Result<Self> {
        for l in layers {
            if let FeatureLayer::Relu { block, .. } = l {
                if *block > RANDOM_PYRAMID_WIDTHS.len() {
                    return Err(Error::Config(format!("layer {l} does not exist in backbone random_fixed")));
                }
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(RANDOM_PYRAMID_SEED);
        let mut stages = Vec::new();
        let mut cin = 3;
        for (i, &cout) in RANDOM_PYRAMID_WIDTHS.iter().enumerate() {
            if i > 0 {
                stages.push(Stage::AvgPool);
            }
            let fan_in = (cin * 9) as f64;
            let normal = Normal::new(0.0, (2.0 / fan_in).sqrt()).expect("positive std");
            let w: Vec<f64> = (0..cout * cin * 9).map(|_| normal.sample(&mut rng)).collect();
            let weight = Tensor::from_vec(w, (cout, cin, 3, 3), device)?.to_dtype(dtype)?;
            let bias = Tensor::zeros(cout, dtype, device)?;
            let tap = layers
                .iter()
                .any(|l| matches!(l, FeatureLayer::Relu { block, .. } if *block == i + 1));
            stages.push(Stage::Conv {
                conv: Conv2d::from_tensors(weight, bias, 1),
                tap,
            });
            cin = cout;
        }
        let tap_input = layers.contains(&FeatureLayer::Input);
        Ok(Self::finish(Backbone::RandomFixed, stages, tap_input, None))
    }

    fn vgg(backbone: Backbone, layers: &[FeatureLayer], path: &Path, dtype: DType, device: &Device) -> Result<Self> {
        let plan = vgg_plan(backbone);
        for l in layers {
            if let FeatureLayer::Relu { block, index } = *l {
                if block > plan.len() || index > plan[block - 1] {
                    return Err(Error::Config(format!("layer {l} does not exist in backbone {backbone}")));
                }
            }
        }
        if !path.exists() {
            return Err(Error::Config(format!(
                "perceptual backbone weights not found at {}",
                path.display()
            )));
        }
        let tensors = candle_core::safetensors::load(path, device)?;
        let mut stages = Vec::new();
        let mut idx = 0;
        let mut cin = 3;
        for (b, &n_conv) in plan.iter().enumerate() {
            let cout = [64, 128, 256, 512, 512][b];
            for i in 0..n_conv {
                let get = |suffix: &str| -> Result<Tensor> {
                    let key = format!("features.{idx}.{suffix}");
                    tensors
                        .get(&key)
                        .ok_or_else(|| Error::Config(format!("{} is missing tensor {key}", path.display())))?
                        .to_dtype(dtype)
                        .map_err(Error::from)
                };
                let (weight, bias) = (get("weight")?, get("bias")?);
                if weight.dims() != [cout, cin, 3, 3] {
                    return Err(Error::Config(format!(
                        "features.{idx}.weight has shape {:?}, expected {:?}",
                        weight.dims(),
                        [cout, cin, 3, 3]
                    )));
                }
                let layer = FeatureLayer::Relu { block: b + 1, index: i + 1 };
                stages.push(Stage::Conv {
                    conv: Conv2d::from_tensors(weight, bias, 1),
                    tap: layers.contains(&layer),
                });
                idx += 2; // conv, relu
                cin = cout;
            }
            stages.push(Stage::MaxPool);
            idx += 1;
        }
        let mean = Tensor::from_vec(IMAGENET_MEAN.to_vec(), (1, 3, 1, 1), device)?.to_dtype(dtype)?;
        let std = Tensor::from_vec(IMAGENET_STD.to_vec(), (1, 3, 1, 1), device)?.to_dtype(dtype)?;
        let tap_input = layers.contains(&FeatureLayer::Input);
        Ok(Self::finish(backbone, stages, tap_input, Some((mean, std))))
    }

    pub fn backbone(&self) -> Backbone {
        self.backbone
    }

    /// Frozen weight tensors, in layer order.
    pub fn weights(&self) -> &[Tensor] {
        &self.weights
    }

    /// Activations at every selected layer.
    pub fn features(&self, x: &Tensor) -> Result<Vec<Tensor>> {
        let mut taps = Vec::new();
        if self.tap_input {
            taps.push(x.clone());
        }
        let mut h = match &self.normalize {
            Some((mean, std)) => x.broadcast_sub(mean)?.broadcast_div(std)?,
            None => x.clone(),
        };
        for st in &self.stages {
            h = match st {
                Stage::Conv { conv, tap } => {
                    let y = conv.forward(&h)?;
                    let y = match self.backbone {
                        Backbone::RandomFixed => crate::ops::silu(&y)?,
                        _ => y.relu()?,
                    };
                    if *tap {
                        taps.push(y.clone());
                    }
                    y
                }
                Stage::MaxPool => h.max_pool2d(2)?,
                Stage::AvgPool => avg_pool2x(&h)?,
            };
        }
        Ok(taps)
    }
}

fn check_same_shape(a: &Tensor, b: &Tensor) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::Input(format!(
            "loss inputs differ in shape: {:?} vs {:?}",
            a.dims(),
            b.dims()
        )));
    }
    Ok(())
}

/// Mean squared error over every pixel and channel.
pub fn reconstruction_loss(generated: &Tensor, target: &Tensor) -> Result<Tensor> {
    check_same_shape(generated, target)?;
    Ok((generated - target)?.sqr()?.mean_all()?)
}

/// Sum over selected layers of the mean squared feature difference.
pub fn perceptual_loss(generated: &Tensor, target: &Tensor, net: &PerceptualNet) -> Result<Tensor> {
    check_same_shape(generated, target)?;
    let b = generated.dim(0)?;
    let feats = net.features(&Tensor::cat(&[generated, &target.detach()], 0)?)?;
    let mut total: Option<Tensor> = None;
    for f in feats {
        let d = (f.narrow(0, 0, b)? - f.narrow(0, b, b)?)?.sqr()?.mean_all()?;
        total = Some(match total {
            Some(t) => (t + d)?,
            None => d,
        });
    }
    total.ok_or_else(|| Error::Config("perceptual extractor has no selected layers".into()))
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossReport {
    pub recon_fwd: f64,
    pub recon_bwd: f64,
    pub percep_fwd: f64,
    pub percep_bwd: f64,
    pub total: f64,
}

impl LossReport {
    pub fn components(&self) -> [f64; 4] {
        [self.recon_fwd, self.recon_bwd, self.percep_fwd, self.percep_bwd]
    }

    pub fn is_finite(&self) -> bool {
        self.components().iter().all(|v| v.is_finite()) && self.total.is_finite()
    }
}

fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

/// Sums reconstruction and perceptual terms over the forward path (target
/// `x_prime`) and backward path (target `x`). Disabled terms are reported as 0
/// and excluded from the returned differentiable total.
pub fn total_loss(
    outputs: &CycleOutputs,
    x: &Tensor,
    x_prime: &Tensor,
    mode: LossMode,
    net: Option<&PerceptualNet>,
) -> Result<(Tensor, LossReport)> {
    if mode.uses_perceptual() && net.is_none() {
        return Err(Error::Config(format!("loss mode {mode} needs a perceptual extractor")));
    }
    let mut terms: Vec<Tensor> = Vec::new();
    let mut report = LossReport::default();
    let dirs = [
        (Some(&outputs.forward), x_prime, true),
        (outputs.backward.as_ref(), x, false),
    ];
    for (out, target, fwd) in dirs {
        let Some(out) = out else { continue };
        if mode.uses_recon() {
            let l = reconstruction_loss(&out.target_image, target)?;
            let v = scalar(&l)?;
            if fwd {
                report.recon_fwd = v;
            } else {
                report.recon_bwd = v;
            }
            terms.push(l);
        }
        if let (true, Some(net)) = (mode.uses_perceptual(), net) {
            let l = perceptual_loss(&out.target_image, target, net)?;
            let v = scalar(&l)?;
            if fwd {
                report.percep_fwd = v;
            } else {
                report.percep_bwd = v;
            }
            terms.push(l);
        }
    }
    report.total = report.components().iter().sum();
    let total = terms
        .into_iter()
        .reduce(|a, b| (a + b).expect("scalar add"))
        .ok_or_else(|| Error::Config("no loss terms enabled".into()))?;
    Ok((total, report))
}
