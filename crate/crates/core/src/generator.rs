//! Shared encoder and heatmap-conditioned generator, composed into the
//! two-stage inter/intra-subject transform and its backward cycle.
//!
//! Stage one renders the source appearance under the auxiliary subject's
//! landmarks; stage two re-encodes that result and renders it under the
//! paired image's landmarks. One detector, one encoder and one generator are
//! used for every stage and both cycle directions.

use std::sync::atomic::{AtomicU64, Ordering};

use candle_core::{DType, Device, Tensor};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::detector::{DetectorArch, DetectorConfig, HeatmapStack, LandmarkDetector, LandmarkSet};
use crate::error::{Error, Result};
use crate::nn::{act, halvings, Conv2d, ParamStore, ResBlock};
use crate::ops::upsample2x;

/// Every architectural knob of the detector / encoder / generator triple.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub detector: DetectorConfig,
    pub detector_arch: DetectorArch,
    /// Channels of the encoder feature map.
    pub feature_dim: usize,
    pub encoder_width: usize,
    pub generator_width: usize,
    pub residual_blocks: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            detector: DetectorConfig::default(),
            detector_arch: DetectorArch {
                width: 64,
                hourglass_depth: 3,
            },
            feature_dim: 256,
            encoder_width: 128,
            generator_width: 256,
            residual_blocks: 6,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.detector.validate()?;
        halvings(self.detector.in_size, self.detector.map_size)?;
        if self.feature_dim == 0 || self.encoder_width < 2 || self.generator_width == 0 {
            return Err(Error::Config("feature_dim, encoder_width and generator_width must be positive".into()));
        }
        let ups = self.upsample_blocks();
        if self.generator_width >> ups == 0 {
            return Err(Error::Config(format!(
                "generator_width {} cannot be halved {ups} times",
                self.generator_width
            )));
        }
        Ok(())
    }

    pub fn upsample_blocks(&self) -> usize {
        halvings(self.detector.in_size, self.detector.map_size).unwrap_or(0)
    }
}

/// Encoder output, `B x D x H' x W'`.
#[derive(Debug, Clone)]
pub struct FeatureMap(pub Tensor);

/// Detector outputs for one batch of images.
#[derive(Debug, Clone)]
pub struct Detections {
    pub landmarks: LandmarkSet,
    pub heatmaps: HeatmapStack,
}

impl Detections {
    fn select(&self, index: &Tensor) -> Result<Self> {
        Ok(Self {
            landmarks: LandmarkSet(self.landmarks.0.index_select(index, 0)?),
            heatmaps: HeatmapStack(self.heatmaps.0.index_select(index, 0)?),
        })
    }

    fn narrow(&self, start: usize, len: usize) -> Result<Self> {
        Ok(Self {
            landmarks: LandmarkSet(self.landmarks.0.narrow(0, start, len)?),
            heatmaps: HeatmapStack(self.heatmaps.0.narrow(0, start, len)?),
        })
    }

    fn cat(parts: &[&Detections]) -> Result<Self> {
        let lm: Vec<&Tensor> = parts.iter().map(|d| &d.landmarks.0).collect();
        let hm: Vec<&Tensor> = parts.iter().map(|d| &d.heatmaps.0).collect();
        Ok(Self {
            landmarks: LandmarkSet(Tensor::cat(&lm, 0)?),
            heatmaps: HeatmapStack(Tensor::cat(&hm, 0)?),
        })
    }
}

/// Result of one generation direction.
#[derive(Debug, Clone)]
pub struct GenerationOutputs {
    /// Intermediate image under the auxiliary landmarks; `None` when the
    /// auxiliary stage is disabled.
    pub aux_image: Option<Tensor>,
    /// Final image under the target landmarks (unclamped).
    pub target_image: Tensor,
    pub source: Detections,
    pub target: Detections,
    pub aux: Option<Detections>,
}

impl GenerationOutputs {
    fn narrow(&self, start: usize, len: usize) -> Result<Self> {
        Ok(Self {
            aux_image: self.aux_image.as_ref().map(|t| t.narrow(0, start, len)).transpose()?,
            target_image: self.target_image.narrow(0, start, len)?,
            source: self.source.narrow(start, len)?,
            target: self.target.narrow(start, len)?,
            aux: self.aux.as_ref().map(|d| d.narrow(start, len)).transpose()?,
        })
    }
}

/// Forward path reconstructs `x_prime`; backward path (if enabled) reconstructs `x`.
#[derive(Debug, Clone)]
pub struct CycleOutputs {
    pub forward: GenerationOutputs,
    pub backward: Option<GenerationOutputs>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PathOptions {
    /// Route through the auxiliary subject first (off = single-stage baseline).
    pub aux_stage: bool,
    /// Also run the reversed direction.
    pub cycle: bool,
}

impl Default for PathOptions {
    fn default() -> Self {
        Self {
            aux_stage: true,
            cycle: true,
        }
    }
}

struct Encoder {
    downs: Vec<Conv2d>,
    out: Conv2d,
}

impl Encoder {
    fn new<R: Rng + ?Sized>(store: &mut ParamStore, cfg: &ModelConfig, rng: &mut R) -> Result<Self> {
        let n_down = cfg.upsample_blocks();
        let w = cfg.encoder_width;
        let mut downs = Vec::new();
        let mut cin = 3;
        for i in 0..n_down.max(1) {
            let cout = if i + 1 == n_down.max(1) { w } else { w / 2 };
            let stride = if n_down == 0 { 1 } else { 2 };
            downs.push(store.conv(&format!("encoder.down{i}"), cin, cout, 3, stride, rng)?);
            cin = cout;
        }
        let out = store.conv("encoder.out", w, cfg.feature_dim, 3, 1, rng)?;
        Ok(Self { downs, out })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut h = x.clone();
        for (i, conv) in self.downs.iter().enumerate() {
            if i > 0 {
                h = act(&h)?;
            }
            h = conv.forward(&h)?;
        }
        self.out.forward(&act(&h)?)
    }
}

struct Generator {
    entry: Conv2d,
    blocks: Vec<ResBlock>,
    ups: Vec<Conv2d>,
    out: Conv2d,
}

impl Generator {
    fn new<R: Rng + ?Sized>(store: &mut ParamStore, cfg: &ModelConfig, rng: &mut R) -> Result<Self> {
        let w = cfg.generator_width;
        let entry = store.conv(
            "generator.entry",
            cfg.feature_dim + cfg.detector.num_landmarks,
            w,
            3,
            1,
            rng,
        )?;
        let blocks = (0..cfg.residual_blocks)
            .map(|i| ResBlock::new(store, &format!("generator.res{i}"), w, rng))
            .collect::<Result<Vec<_>>>()?;
        let mut ups = Vec::new();
        let mut c = w;
        for i in 0..cfg.upsample_blocks() {
            ups.push(store.conv(&format!("generator.up{i}"), c, c / 2, 3, 1, rng)?);
            c /= 2;
        }
        let out = store.conv("generator.out", c, 3, 3, 1, rng)?;
        Ok(Self {
            entry,
            blocks,
            ups,
            out,
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut h = self.entry.forward(x)?;
        for b in &self.blocks {
            h = b.forward(&h)?;
        }
        for up in &self.ups {
            h = up.forward(&act(&upsample2x(&h)?)?)?;
        }
        self.out.forward(&act(&h)?)
    }
}

/// The complete trainable system: one detector, one encoder, one generator,
/// all registered in a single [`ParamStore`].
pub struct Model {
    config: ModelConfig,
    store: ParamStore,
    detector: LandmarkDetector,
    encoder: Encoder,
    generator: Generator,
    generated_images: AtomicU64,
}

impl Model {
    /// Builds a freshly initialised model; initialisation is a pure function of `rng`.
    pub fn new<R: Rng + ?Sized>(config: ModelConfig, dtype: DType, device: &Device, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new(dtype, device.clone());
        let detector = LandmarkDetector::new(&mut store, config.detector, config.detector_arch, rng)?;
        let encoder = Encoder::new(&mut store, &config, rng)?;
        let generator = Generator::new(&mut store, &config, rng)?;
        Ok(Self {
            config,
            store,
            detector,
            encoder,
            generator,
            generated_images: AtomicU64::new(0),
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn detector(&self) -> &LandmarkDetector {
        &self.detector
    }

    pub fn dtype(&self) -> DType {
        self.store.dtype()
    }

    pub fn device(&self) -> &Device {
        self.store.device()
    }

    /// Total images produced by the generator since construction.
    pub fn generated_images(&self) -> u64 {
        self.generated_images.load(Ordering::Relaxed)
    }

    fn check_images(&self, x: &Tensor, what: &str) -> Result<()> {
        let n = self.config.detector.in_size;
        let d = x.dims();
        if d.len() != 4 || d[1] != 3 || d[2] != n || d[3] != n {
            return Err(Error::Input(format!("{what} must be B x 3 x {n} x {n}, got {d:?}")));
        }
        Ok(())
    }

    pub fn detect(&self, x: &Tensor) -> Result<Detections> {
        let (landmarks, heatmaps) = self.detector.detect(x)?;
        Ok(Detections { landmarks, heatmaps })
    }

    pub fn encode(&self, x: &Tensor) -> Result<FeatureMap> {
        self.check_images(x, "encoder input")?;
        Ok(FeatureMap(self.encoder.forward(x)?))
    }

    pub fn generate(&self, features: &FeatureMap, heatmaps: &HeatmapStack) -> Result<Tensor> {
        let (b, d, h, w) = features.0.dims4()?;
        let (hb, k, hh, hw) = heatmaps.0.dims4()?;
        if b != hb || h != hh || w != hw {
            return Err(Error::Input(format!(
                "features {:?} and heatmaps {:?} disagree in batch or spatial size",
                features.0.dims(),
                heatmaps.0.dims()
            )));
        }
        if d != self.config.feature_dim || k != self.config.detector.num_landmarks {
            return Err(Error::Input(format!(
                "generator expects {} feature and {} heatmap channels, got {d} and {k}",
                self.config.feature_dim, self.config.detector.num_landmarks
            )));
        }
        let input = Tensor::cat(&[&features.0, &heatmaps.0.to_dtype(features.0.dtype())?], 1)?;
        self.generated_images.fetch_add(b as u64, Ordering::Relaxed);
        self.generator.forward(&input)
    }

    /// Runs the stage chain on `source` given precomputed conditioning.
    fn transform(
        &self,
        source: &Tensor,
        aux_heatmaps: Option<&HeatmapStack>,
        target_heatmaps: &HeatmapStack,
    ) -> Result<(Option<Tensor>, Tensor)> {
        match aux_heatmaps {
            Some(aux) => {
                let aux_image = self.generate(&self.encode(source)?, aux)?;
                let target = self.generate(&self.encode(&aux_image)?, target_heatmaps)?;
                Ok((Some(aux_image), target))
            }
            None => {
                let target = self.generate(&self.encode(source)?, target_heatmaps)?;
                Ok((None, target))
            }
        }
    }

    fn direction(
        &self,
        source_images: &Tensor,
        source: Detections,
        target: Detections,
        aux: Option<Detections>,
    ) -> Result<GenerationOutputs> {
        let (aux_image, target_image) =
            self.transform(source_images, aux.as_ref().map(|a| &a.heatmaps), &target.heatmaps)?;
        Ok(GenerationOutputs {
            aux_image,
            target_image,
            source,
            target,
            aux,
        })
    }

    /// Two-stage transform of `x` through the auxiliary subject's landmarks
    /// and then `x_prime`'s landmarks.
    pub fn inter_intra_forward(&self, x: &Tensor, x_prime: &Tensor, x_aux: &Tensor) -> Result<GenerationOutputs> {
        self.check_images(x, "x")?;
        for (t, what) in [(x_prime, "x_prime"), (x_aux, "x_aux")] {
            if t.dims() != x.dims() {
                return Err(Error::Input(format!("{what} shape {:?} differs from x {:?}", t.dims(), x.dims())));
            }
        }
        let b = x.dim(0)?;
        let det = self.detect(&Tensor::cat(&[x, x_prime, x_aux], 0)?)?;
        self.direction(x, det.narrow(0, b)?, det.narrow(b, b)?, Some(det.narrow(2 * b, b)?))
    }

    /// Single-stage transform of `x` under `x_prime`'s landmarks (no auxiliary subject).
    pub fn baseline_forward(&self, x: &Tensor, x_prime: &Tensor) -> Result<GenerationOutputs> {
        self.check_images(x, "x")?;
        if x_prime.dims() != x.dims() {
            return Err(Error::Input("x_prime shape differs from x".into()));
        }
        let b = x.dim(0)?;
        let det = self.detect(&Tensor::cat(&[x, x_prime], 0)?)?;
        self.direction(x, det.narrow(0, b)?, det.narrow(b, b)?, None)
    }

    /// Forward path towards `x_prime` and, if enabled, the reversed path
    /// towards `x`, both using the same auxiliary image.
    pub fn cycle_forward(&self, x: &Tensor, x_prime: &Tensor, x_aux: &Tensor, opts: PathOptions) -> Result<CycleOutputs> {
        self.check_images(x, "x")?;
        for (t, what) in [(x_prime, "x_prime"), (x_aux, "x_aux")] {
            if t.dims() != x.dims() {
                return Err(Error::Input(format!("{what} shape {:?} differs from x {:?}", t.dims(), x.dims())));
            }
        }
        let b = x.dim(0)?;
        let (det, aux) = if opts.aux_stage {
            let det = self.detect(&Tensor::cat(&[x, x_prime, x_aux], 0)?)?;
            let aux = det.narrow(2 * b, b)?;
            (det, Some(aux))
        } else {
            (self.detect(&Tensor::cat(&[x, x_prime], 0)?)?, None)
        };
        let det_x = det.narrow(0, b)?;
        let det_xp = det.narrow(b, b)?;
        self.run_cycle(x, x_prime, det_x, det_xp, aux.clone(), aux, opts)
    }

    /// Cycle where the auxiliary subjects are other members of the batch:
    /// `x_aux[i] = x[aux_index[i]]`. The backward path uses `backward_aux_index`
    /// when given, otherwise the same assignment as the forward path.
    pub fn cycle_forward_in_batch(
        &self,
        x: &Tensor,
        x_prime: &Tensor,
        aux_index: &[usize],
        backward_aux_index: Option<&[usize]>,
        opts: PathOptions,
    ) -> Result<CycleOutputs> {
        self.check_images(x, "x")?;
        if x_prime.dims() != x.dims() {
            return Err(Error::Input("x_prime shape differs from x".into()));
        }
        let b = x.dim(0)?;
        let det = self.detect(&Tensor::cat(&[x, x_prime], 0)?)?;
        let det_x = det.narrow(0, b)?;
        let det_xp = det.narrow(b, b)?;
        let (fwd_aux, bwd_aux) = if opts.aux_stage {
            let pick = |idx: &[usize]| -> Result<Detections> {
                if idx.len() != b || idx.iter().any(|&i| i >= b) {
                    return Err(Error::Input(format!("auxiliary index {idx:?} invalid for batch of {b}")));
                }
                let t = Tensor::from_vec(idx.iter().map(|&i| i as u32).collect::<Vec<_>>(), b, x.device())?;
                det_x.select(&t)
            };
            let f = pick(aux_index)?;
            let bw = match backward_aux_index {
                Some(idx) => pick(idx)?,
                None => f.clone(),
            };
            (Some(f), Some(bw))
        } else {
            (None, None)
        };
        self.run_cycle(x, x_prime, det_x, det_xp, fwd_aux, bwd_aux, opts)
    }

    #[allow(clippy::too_many_arguments)]
    fn run_cycle(
        &self,
        x: &Tensor,
        x_prime: &Tensor,
        det_x: Detections,
        det_xp: Detections,
        fwd_aux: Option<Detections>,
        bwd_aux: Option<Detections>,
        opts: PathOptions,
    ) -> Result<CycleOutputs> {
        if !opts.cycle {
            let forward = self.direction(x, det_x, det_xp, fwd_aux)?;
            return Ok(CycleOutputs { forward, backward: None });
        }
        // both directions share one batched pass: rows [0, b) go x -> x',
        // rows [b, 2b) go x' -> x
        let b = x.dim(0)?;
        let sources = Tensor::cat(&[x, x_prime], 0)?;
        let src_det = Detections::cat(&[&det_x, &det_xp])?;
        let tgt_det = Detections::cat(&[&det_xp, &det_x])?;
        let aux = match (fwd_aux, bwd_aux) {
            (Some(f), Some(bw)) => Some(Detections::cat(&[&f, &bw])?),
            _ => None,
        };
        let both = self.direction(&sources, src_det, tgt_det, aux)?;
        Ok(CycleOutputs {
            forward: both.narrow(0, b)?,
            backward: Some(both.narrow(b, b)?),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    pub(crate) fn micro_config() -> ModelConfig {
        ModelConfig {
            detector: DetectorConfig {
                num_landmarks: 2,
                beta: 10.0,
                sigma: 0.5,
                in_size: 16,
                map_size: 4,
            },
            detector_arch: DetectorArch {
                width: 4,
                hourglass_depth: 1,
            },
            feature_dim: 8,
            encoder_width: 4,
            generator_width: 8,
            residual_blocks: 1,
        }
    }

    fn batch(b: usize, n: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let v: Vec<f32> = (0..b * 3 * n * n).map(|_| rng.random()).collect();
        Tensor::from_vec(v, (b, 3, n, n), &Device::Cpu).unwrap()
    }

    fn model(cfg: ModelConfig) -> Model {
        Model::new(cfg, DType::F32, &Device::Cpu, &mut ChaCha8Rng::seed_from_u64(3)).unwrap()
    }

    fn max_abs_diff(a: &Tensor, b: &Tensor) -> f32 {
        (a - b).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f32>().unwrap()
    }

    #[test]
    fn paper_scale_encoder_and_generator_shapes() {
        let cfg = ModelConfig {
            detector_arch: DetectorArch { width: 4, hourglass_depth: 1 },
            encoder_width: 8,
            generator_width: 8,
            residual_blocks: 6,
            ..ModelConfig::default()
        };
        let m = model(cfg);
        let x = batch(1, 128, 1);
        let f = m.encode(&x).unwrap();
        assert_eq!(f.0.dims(), &[1, 256, 32, 32]);
        let det = m.detect(&x).unwrap();
        let img = m.generate(&f, &det.heatmaps).unwrap();
        assert_eq!(img.dims(), &[1, 3, 128, 128]);
    }

    #[test]
    fn encoder_is_pure_and_zero_output_layer_is_constant() {
        let m = model(micro_config());
        let x = batch(2, 16, 5);
        let a = m.encode(&x).unwrap().0;
        let b = m.encode(&x).unwrap().0;
        assert_eq!(max_abs_diff(&a, &b), 0.0);
        for (name, var) in m.params().vars() {
            if name == "encoder.out.weight" {
                var.set(&var.zeros_like().unwrap()).unwrap();
            }
            if name == "encoder.out.bias" {
                var.set(&var.ones_like().unwrap()).unwrap();
            }
        }
        let c = m.encode(&x).unwrap().0;
        assert!(c.flatten_all().unwrap().to_vec1::<f32>().unwrap().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn generator_rejects_mismatched_inputs() {
        let m = model(micro_config());
        let f = m.encode(&batch(1, 16, 0)).unwrap();
        let bad = HeatmapStack(Tensor::zeros((1, 2, 8, 8), DType::F32, &Device::Cpu).unwrap());
        assert!(matches!(m.generate(&f, &bad), Err(Error::Input(_))));
    }

    #[test]
    fn generator_depends_on_heatmaps() {
        let m = model(micro_config());
        let x = batch(1, 16, 2);
        let f = m.encode(&x).unwrap();
        let det = m.detect(&x).unwrap();
        let a = m.generate(&f, &det.heatmaps).unwrap();
        let b = m.generate(&f, &det.heatmaps).unwrap();
        assert_eq!(max_abs_diff(&a, &b), 0.0);
        let bumped = HeatmapStack((det.heatmaps.0.clone() + 0.5).unwrap());
        let c = m.generate(&f, &bumped).unwrap();
        assert!(max_abs_diff(&a, &c) > 0.0);
    }

    #[test]
    fn inter_intra_shapes_and_detector_gradients() {
        let m = Model::new(micro_config(), DType::F64, &Device::Cpu, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        let to64 = |t: Tensor| t.to_dtype(DType::F64).unwrap();
        let (x, xp, xa) = (to64(batch(2, 16, 1)), to64(batch(2, 16, 2)), to64(batch(2, 16, 3)));
        let out = m.inter_intra_forward(&x, &xp, &xa).unwrap();
        assert_eq!(out.target_image.dims(), x.dims());
        assert_eq!(out.aux_image.as_ref().unwrap().dims(), x.dims());

        // detector gradient through the auxiliary heatmaps only
        let g = out.aux_image.unwrap().sqr().unwrap().sum_all().unwrap().backward().unwrap();
        let head = m.detector().head().weight.clone();
        let n = g.get(&head).unwrap().sqr().unwrap().sum_all().unwrap().to_scalar::<f64>().unwrap();
        assert!(n > 0.0);

        // and through the target heatmaps, holding stage one fixed
        let out = m.inter_intra_forward(&x, &xp, &xa).unwrap();
        let ia = out.aux_image.unwrap().detach();
        let fixed = m.generate(&m.encode(&ia).unwrap(), &out.target.heatmaps).unwrap();
        let g = fixed.sqr().unwrap().sum_all().unwrap().backward().unwrap();
        let n = g.get(&head).unwrap().sqr().unwrap().sum_all().unwrap().to_scalar::<f64>().unwrap();
        assert!(n > 0.0);
    }

    #[test]
    fn identical_pair_makes_directions_coincide() {
        let m = model(micro_config());
        let x = batch(3, 16, 7);
        let out = m.cycle_forward_in_batch(&x, &x, &[1, 2, 0], None, PathOptions::default()).unwrap();
        let bwd = out.backward.unwrap();
        assert_eq!(max_abs_diff(&out.forward.target_image, &bwd.target_image), 0.0);
        assert_eq!(
            max_abs_diff(out.forward.aux_image.as_ref().unwrap(), bwd.aux_image.as_ref().unwrap()),
            0.0
        );
    }

    #[test]
    fn in_batch_auxiliary_matches_explicit_images() {
        let m = model(micro_config());
        let x = batch(3, 16, 8);
        let xp = batch(3, 16, 9);
        let idx = [2usize, 0, 1];
        let xa = x.index_select(&Tensor::new(&[2u32, 0, 1], &Device::Cpu).unwrap(), 0).unwrap();
        let a = m.cycle_forward(&x, &xp, &xa, PathOptions::default()).unwrap();
        let b = m.cycle_forward_in_batch(&x, &xp, &idx, None, PathOptions::default()).unwrap();
        assert!(max_abs_diff(&a.forward.target_image, &b.forward.target_image) < 1e-6);
        assert!(
            max_abs_diff(&a.backward.unwrap().target_image, &b.backward.unwrap().target_image) < 1e-6
        );
    }

    #[test]
    fn cycle_counts_and_cost() {
        let m = model(micro_config());
        let x = batch(2, 16, 1);
        let xp = batch(2, 16, 2);
        let before = m.generated_images();
        let full = m.cycle_forward_in_batch(&x, &xp, &[1, 0], None, PathOptions::default()).unwrap();
        let with_cycle = m.generated_images() - before;
        let images = [
            full.forward.aux_image.is_some(),
            true,
            full.backward.as_ref().unwrap().aux_image.is_some(),
            true,
        ];
        assert_eq!(images.iter().filter(|&&b| b).count(), 4);

        let before = m.generated_images();
        let opts = PathOptions { aux_stage: true, cycle: false };
        let one = m.cycle_forward_in_batch(&x, &xp, &[1, 0], None, opts).unwrap();
        assert!(one.backward.is_none());
        assert_eq!(2 * (m.generated_images() - before), with_cycle);
    }

    #[test]
    fn baseline_skips_auxiliary_stage() {
        let m = model(micro_config());
        let x = batch(2, 16, 1);
        let xp = batch(2, 16, 2);
        let opts = PathOptions { aux_stage: false, cycle: true };
        let out = m.cycle_forward_in_batch(&x, &xp, &[1, 0], None, opts).unwrap();
        assert!(out.forward.aux_image.is_none());
        let direct = m.baseline_forward(&x, &xp).unwrap();
        assert!(max_abs_diff(&direct.target_image, &out.forward.target_image) < 1e-6);
    }

    #[test]
    fn outputs_are_finite() {
        let m = model(micro_config());
        let out = m
            .cycle_forward_in_batch(&batch(2, 16, 3), &batch(2, 16, 4), &[1, 0], None, PathOptions::default())
            .unwrap();
        for t in [&out.forward.target_image, out.forward.aux_image.as_ref().unwrap(), &out.backward.unwrap().target_image] {
            assert!(t.flatten_all().unwrap().to_vec1::<f32>().unwrap().iter().all(|v| v.is_finite()));
        }
    }

    #[test]
    fn parameters_are_registered_once() {
        let m = model(micro_config());
        let mut names: Vec<&str> = m.params().vars().iter().map(|(n, _)| n.as_str()).collect();
        let n = names.len();
        names.sort();
        names.dedup();
        assert_eq!(names.len(), n);
        // every registered parameter is reached by a full cycle
        let out = m
            .cycle_forward_in_batch(&batch(2, 16, 3), &batch(2, 16, 4), &[1, 0], None, PathOptions::default())
            .unwrap();
        let loss = (out.forward.target_image.sqr().unwrap().sum_all().unwrap()
            + out.backward.unwrap().target_image.sqr().unwrap().sum_all().unwrap())
        .unwrap();
        let grads = loss.backward().unwrap();
        for (name, var) in m.params().vars() {
            assert!(grads.get(var.as_tensor()).is_some(), "{name} unused");
        }
    }
}
