//! Landmark detector: image -> K score maps -> K soft-argmax coordinates ->
//! K Gaussian heatmaps that condition the generator.
//!
//! Coordinates are `(row, col)` in score-map grid units. Multiplying by
//! `in_size / map_size` converts them to input-image pixels.

use candle_core::{DType, Device, Tensor, D};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::Image;
use crate::nn::{act, halvings, Conv2d, InstanceNorm, ParamStore, ResBlock};
use crate::ops::{avg_pool2x, upsample2x};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetectorConfig {
    pub num_landmarks: usize,
    /// Soft-argmax temperature.
    pub beta: f64,
    /// Heatmap standard deviation in grid cells.
    pub sigma: f64,
    pub in_size: usize,
    pub map_size: usize,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        Self {
            num_landmarks: 10,
            beta: 10.0,
            sigma: 0.5,
            in_size: 128,
            map_size: 32,
        }
    }
}

impl DetectorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_landmarks == 0 {
            return Err(Error::Config("number of landmarks must be at least 1".into()));
        }
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            return Err(Error::Config(format!("beta must be positive, got {}", self.beta)));
        }
        if !(self.sigma > 0.0 && self.sigma.is_finite()) {
            return Err(Error::Config(format!("sigma must be positive, got {}", self.sigma)));
        }
        if self.map_size == 0 || self.in_size % self.map_size != 0 {
            return Err(Error::Config(format!(
                "in_size {} must be divisible by map_size {}",
                self.in_size, self.map_size
            )));
        }
        Ok(())
    }

    /// Input pixels per grid cell.
    pub fn stride(&self) -> f64 {
        self.in_size as f64 / self.map_size as f64
    }
}

/// Raw detector scores, `B x K x H' x W'`.
#[derive(Debug, Clone)]
pub struct ScoreMaps(pub Tensor);

/// Soft-argmax coordinates, `B x K x 2` as `(row, col)` grid units.
#[derive(Debug, Clone)]
pub struct LandmarkSet(pub Tensor);

/// Rendered Gaussian bottleneck, `B x K x H' x W'`.
#[derive(Debug, Clone)]
pub struct HeatmapStack(pub Tensor);

impl LandmarkSet {
    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    /// Per image, per landmark `[row, col]` in grid units.
    pub fn to_grid_points(&self) -> Result<Vec<Vec<[f64; 2]>>> {
        let v = self.0.to_dtype(DType::F64)?.to_vec3::<f64>()?;
        Ok(v
            .into_iter()
            .map(|img| img.into_iter().map(|p| [p[0], p[1]]).collect())
            .collect())
    }

    /// Per image, per landmark `[x, y]` in input-image pixels.
    pub fn to_pixels(&self, stride: f64) -> Result<Vec<Vec<[f64; 2]>>> {
        Ok(self
            .to_grid_points()?
            .into_iter()
            .map(|img| img.into_iter().map(|[r, c]| [c * stride, r * stride]).collect())
            .collect())
    }
}

impl HeatmapStack {
    pub fn tensor(&self) -> &Tensor {
        &self.0
    }
}

fn grid_axes(h: usize, w: usize, dtype: DType, device: &Device) -> Result<(Tensor, Tensor)> {
    let rows: Vec<f64> = (0..h * w).map(|i| (i / w) as f64).collect();
    let cols: Vec<f64> = (0..h * w).map(|i| (i % w) as f64).collect();
    Ok((
        Tensor::from_vec(rows, h * w, device)?.to_dtype(dtype)?,
        Tensor::from_vec(cols, h * w, device)?.to_dtype(dtype)?,
    ))
}

fn ensure_finite(t: &Tensor, what: &str) -> Result<()> {
    let s = t.sum_all()?.to_dtype(DType::F64)?.to_scalar::<f64>()?;
    if s.is_finite() {
        Ok(())
    } else {
        Err(Error::Numeric(format!("{what} contains non-finite values")))
    }
}

/// Softmax-weighted mean of grid positions per channel, with the per-channel
/// maximum subtracted before exponentiation.
pub fn soft_argmax(maps: &ScoreMaps, beta: f64) -> Result<LandmarkSet> {
    if !(beta > 0.0 && beta.is_finite()) {
        return Err(Error::Config(format!("beta must be positive, got {beta}")));
    }
    let (b, k, h, w) = maps.0.dims4()?;
    ensure_finite(&maps.0, "score maps")?;
    let s = (maps.0.reshape((b, k, h * w))? * beta)?;
    let shift = s.max_keepdim(D::Minus1)?.detach();
    let e = s.broadcast_sub(&shift)?.exp()?;
    let z = e.sum_keepdim(D::Minus1)?;
    let p = e.broadcast_div(&z)?;
    let (rows, cols) = grid_axes(h, w, p.dtype(), p.device())?;
    let r = p.broadcast_mul(&rows)?.sum_keepdim(D::Minus1)?;
    let c = p.broadcast_mul(&cols)?.sum_keepdim(D::Minus1)?;
    // rounding in the normalisation can push a corner peak a few ulps past the hull
    let r = r.clamp(0.0, (h - 1) as f64)?;
    let c = c.clamp(0.0, (w - 1) as f64)?;
    Ok(LandmarkSet(Tensor::cat(&[r, c], D::Minus1)?))
}

/// `exp(-|u - u_k|^2 / (2 sigma^2))` on a `map_size x map_size` grid, unnormalised.
pub fn render_heatmaps(landmarks: &LandmarkSet, sigma: f64, map_size: usize) -> Result<HeatmapStack> {
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(Error::Config(format!("sigma must be positive, got {sigma}")));
    }
    let u = &landmarks.0;
    let (b, k, two) = u.dims3()?;
    if two != 2 {
        return Err(Error::Input(format!("landmarks must be B x K x 2, got {:?}", u.dims())));
    }
    let axis: Vec<f64> = (0..map_size).map(|i| i as f64).collect();
    let axis = Tensor::from_vec(axis, map_size, u.device())?.to_dtype(u.dtype())?;
    let ur = u.narrow(2, 0, 1)?.reshape((b, k, 1, 1))?;
    let uc = u.narrow(2, 1, 1)?.reshape((b, k, 1, 1))?;
    let dr = axis.reshape((1, 1, map_size, 1))?.broadcast_sub(&ur)?.sqr()?;
    let dc = axis.reshape((1, 1, 1, map_size))?.broadcast_sub(&uc)?.sqr()?;
    let d2 = dr.broadcast_add(&dc)?;
    Ok(HeatmapStack((d2 * (-0.5 / (sigma * sigma)))?.exp()?))
}

enum HourglassInner {
    Nested(Box<Hourglass>),
    Bottom(ResBlock),
}

/// One encoder-decoder hourglass with a residual skip at every scale.
struct Hourglass {
    skip: ResBlock,
    down: ResBlock,
    inner: HourglassInner,
    up: ResBlock,
}

impl Hourglass {
    fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, width: usize, depth: usize, rng: &mut R) -> Result<Self> {
        let skip = ResBlock::new(store, &format!("{name}.skip"), width, rng)?;
        let down = ResBlock::new(store, &format!("{name}.down"), width, rng)?;
        let inner = if depth > 1 {
            HourglassInner::Nested(Box::new(Hourglass::new(store, &format!("{name}.inner"), width, depth - 1, rng)?))
        } else {
            HourglassInner::Bottom(ResBlock::new(store, &format!("{name}.bottom"), width, rng)?)
        };
        let up = ResBlock::new(store, &format!("{name}.up"), width, rng)?;
        Ok(Self { skip, down, inner, up })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let skip = self.skip.forward(x)?;
        let low = self.down.forward(&avg_pool2x(x)?)?;
        let low = match &self.inner {
            HourglassInner::Nested(hg) => hg.forward(&low)?,
            HourglassInner::Bottom(rb) => rb.forward(&low)?,
        };
        let low = self.up.forward(&low)?;
        Ok((skip + upsample2x(&low)?)?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetectorArch {
    pub width: usize,
    pub hourglass_depth: usize,
}

/// The landmark detector network plus its soft-argmax / heatmap head.
pub struct LandmarkDetector {
    config: DetectorConfig,
    stem: Vec<Conv2d>,
    hourglass: Hourglass,
    head_norm: InstanceNorm,
    head: Conv2d,
}

impl LandmarkDetector {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        config: DetectorConfig,
        arch: DetectorArch,
        rng: &mut R,
    ) -> Result<Self> {
        config.validate()?;
        let n_down = halvings(config.in_size, config.map_size)?;
        if arch.width < 2 || arch.hourglass_depth == 0 {
            return Err(Error::Config("detector width >= 2 and hourglass depth >= 1 required".into()));
        }
        if config.map_size % (1 << arch.hourglass_depth) != 0 {
            return Err(Error::Config(format!(
                "map_size {} is not divisible by 2^{} (hourglass depth)",
                config.map_size, arch.hourglass_depth
            )));
        }
        let mut stem = Vec::with_capacity(n_down.max(1));
        let mut cin = 3;
        for i in 0..n_down.max(1) {
            let last = i + 1 == n_down.max(1);
            let cout = if last { arch.width } else { arch.width / 2 };
            let stride = if n_down == 0 { 1 } else { 2 };
            stem.push(store.conv(&format!("detector.stem{i}"), cin, cout, 3, stride, rng)?);
            cin = cout;
        }
        let hourglass = Hourglass::new(store, "detector.hg", arch.width, arch.hourglass_depth, rng)?;
        let head_norm = store.norm("detector.head_norm", arch.width)?;
        let head = store.conv("detector.head", arch.width, config.num_landmarks, 1, 1, rng)?;
        Ok(Self {
            config,
            stem,
            hourglass,
            head_norm,
            head,
        })
    }

    pub fn config(&self) -> &DetectorConfig {
        &self.config
    }

    pub fn head(&self) -> &Conv2d {
        &self.head
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        let dims = x.dims();
        let n = self.config.in_size;
        if dims.len() != 4 || dims[1] != 3 || dims[2] != n || dims[3] != n {
            return Err(Error::Input(format!(
                "detector expects B x 3 x {n} x {n} input, got {dims:?}"
            )));
        }
        Ok(())
    }

    pub fn extract_score_maps(&self, x: &Tensor) -> Result<ScoreMaps> {
        self.check_input(x)?;
        let mut h = x.clone();
        for (i, conv) in self.stem.iter().enumerate() {
            if i > 0 {
                h = act(&h)?;
            }
            h = conv.forward(&h)?;
        }
        let h = self.hourglass.forward(&h)?;
        Ok(ScoreMaps(self.head.forward(&act(&self.head_norm.forward(&h)?)?)?))
    }

    pub fn detect(&self, x: &Tensor) -> Result<(LandmarkSet, HeatmapStack)> {
        let maps = self.extract_score_maps(x)?;
        let landmarks = soft_argmax(&maps, self.config.beta)?;
        let heatmaps = render_heatmaps(&landmarks, self.config.sigma, self.config.map_size)?;
        Ok((landmarks, heatmaps))
    }

    /// Detects landmarks on images in chunks and returns `[x, y]` input pixels.
    pub fn detect_pixels(&self, images: &[&Image], chunk: usize) -> Result<Vec<Vec<[f64; 2]>>> {
        let dtype = self.head.weight.dtype();
        let device = self.head.weight.device().clone();
        let mut out = Vec::with_capacity(images.len());
        for part in images.chunks(chunk.max(1)) {
            let x = Image::batch_to_tensor(part, dtype, &device)?;
            let (lm, _) = self.detect(&x)?;
            out.extend(lm.to_pixels(self.config.stride())?);
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn maps_from(data: Vec<f64>, k: usize, h: usize, w: usize) -> ScoreMaps {
        ScoreMaps(Tensor::from_vec(data, (1, k, h, w), &Device::Cpu).unwrap())
    }

    fn coords(lm: &LandmarkSet) -> Vec<[f64; 2]> {
        lm.to_grid_points().unwrap().remove(0)
    }

    #[test]
    fn constant_map_gives_centroid() {
        let lm = soft_argmax(&maps_from(vec![0.3; 32 * 32], 1, 32, 32), 10.0).unwrap();
        let [r, c] = coords(&lm)[0];
        assert!((r - 15.5).abs() < 1e-12 && (c - 15.5).abs() < 1e-12);
    }

    #[test]
    fn single_peak_matches_direct_evaluation() {
        let mut data = vec![0.0; 32 * 32];
        data[5 * 32 + 7] = 10.0;
        let [r, c] = coords(&soft_argmax(&maps_from(data, 1, 32, 32), 10.0).unwrap())[0];
        // every other cell carries weight exp(-100) relative to the peak
        assert!((r - 5.0).abs() < 1e-6 && (c - 7.0).abs() < 1e-6, "({r}, {c})");
    }

    #[test]
    fn twin_peaks_average() {
        let mut data = vec![-1e6; 10 * 10];
        data[2 * 10 + 2] = 1.0;
        data[2 * 10 + 8] = 1.0;
        let [r, c] = coords(&soft_argmax(&maps_from(data, 1, 10, 10), 10.0).unwrap())[0];
        assert!((r - 2.0).abs() < 1e-12 && (c - 5.0).abs() < 1e-12);
    }

    #[test]
    fn huge_scores_do_not_overflow() {
        let mut data = vec![1e30; 8 * 8];
        data[9] = 1e30 + 1e15;
        let [r, c] = coords(&soft_argmax(&maps_from(data, 1, 8, 8), 10.0).unwrap())[0];
        assert!((r - 1.0).abs() < 1e-9 && (c - 1.0).abs() < 1e-9);
    }

    #[test]
    fn non_finite_scores_are_rejected() {
        let mut data = vec![0.0; 16];
        data[3] = f64::NAN;
        assert!(matches!(
            soft_argmax(&maps_from(data, 1, 4, 4), 10.0),
            Err(Error::Numeric(_))
        ));
    }

    #[test]
    fn heatmap_values_follow_gaussian() {
        let u = Tensor::from_vec(vec![4.0f64, 6.0], (1, 1, 2), &Device::Cpu).unwrap();
        let hm = render_heatmaps(&LandmarkSet(u), 0.5, 12).unwrap();
        let v = hm.0.squeeze(0).unwrap().squeeze(0).unwrap().to_vec2::<f64>().unwrap();
        assert_eq!(v[4][6], 1.0);
        assert!((v[5][6] - (-2f64).exp()).abs() < 1e-12);
        assert!((v[4][8] - (-8f64).exp()).abs() < 1e-12);
    }

    #[test]
    fn heatmaps_decrease_along_rays() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..50 {
            let (ur, uc) = (rng.random_range(0.0f64..15.0), rng.random_range(0.0f64..15.0));
            let u = Tensor::from_vec(vec![ur, uc], (1, 1, 2), &Device::Cpu).unwrap();
            let v = render_heatmaps(&LandmarkSet(u), 0.5, 16).unwrap().0;
            let v = v.squeeze(0).unwrap().squeeze(0).unwrap().to_vec2::<f64>().unwrap();
            let (gr, gc) = (ur.round() as isize, uc.round() as isize);
            for (dr, dc) in [(0, 1), (1, 0), (0, -1), (-1, 0), (1, 1), (-1, 1), (1, -1), (-1, -1)] {
                let mut prev = v[gr as usize][gc as usize];
                let (mut r, mut c) = (gr + dr, gc + dc);
                while (0..16).contains(&r) && (0..16).contains(&c) {
                    let cur = v[r as usize][c as usize];
                    assert!(cur <= prev && (0.0..=1.0).contains(&cur));
                    prev = cur;
                    r += dr;
                    c += dc;
                }
            }
        }
    }

    fn toy_detector(k: usize) -> (ParamStore, LandmarkDetector) {
        let mut store = ParamStore::new(DType::F32, Device::Cpu);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let cfg = DetectorConfig {
            num_landmarks: k,
            in_size: 32,
            map_size: 8,
            ..DetectorConfig::default()
        };
        let det = LandmarkDetector::new(&mut store, cfg, DetectorArch { width: 8, hourglass_depth: 2 }, &mut rng).unwrap();
        (store, det)
    }

    fn random_batch(b: usize, n: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data: Vec<f32> = (0..b * 3 * n * n).map(|_| rng.random()).collect();
        Tensor::from_vec(data, (b, 3, n, n), &Device::Cpu).unwrap()
    }

    #[test]
    fn score_map_shape_and_purity() {
        let (_, det) = toy_detector(3);
        let x = random_batch(2, 32, 4);
        let a = det.extract_score_maps(&x).unwrap().0;
        assert_eq!(a.dims(), &[2, 3, 8, 8]);
        let b = det.extract_score_maps(&x).unwrap().0;
        let diff = (a - b).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f32>().unwrap();
        assert_eq!(diff, 0.0);
    }

    #[test]
    fn paper_scale_shapes() {
        let mut store = ParamStore::new(DType::F32, Device::Cpu);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let det = LandmarkDetector::new(
            &mut store,
            DetectorConfig::default(),
            DetectorArch { width: 8, hourglass_depth: 3 },
            &mut rng,
        )
        .unwrap();
        let maps = det.extract_score_maps(&random_batch(1, 128, 1)).unwrap();
        assert_eq!(maps.0.dims(), &[1, 10, 32, 32]);
    }

    #[test]
    fn zero_head_weights_give_bias_maps() {
        let (store, det) = toy_detector(2);
        let (_, w) = store.vars().iter().find(|(n, _)| n == "detector.head.weight").unwrap();
        w.set(&w.zeros_like().unwrap()).unwrap();
        let (_, b) = store.vars().iter().find(|(n, _)| n == "detector.head.bias").unwrap();
        b.set(&Tensor::new(&[0.25f32, -1.5], &Device::Cpu).unwrap()).unwrap();
        let maps = det.extract_score_maps(&random_batch(1, 32, 9)).unwrap().0;
        let v = maps.squeeze(0).unwrap().flatten_from(1).unwrap().to_vec2::<f32>().unwrap();
        assert!(v[0].iter().all(|&x| x == 0.25));
        assert!(v[1].iter().all(|&x| x == -1.5));
    }

    #[test]
    fn wrong_input_shape_is_rejected() {
        let (_, det) = toy_detector(2);
        assert!(matches!(det.extract_score_maps(&random_batch(1, 16, 0)), Err(Error::Input(_))));
    }

    #[test]
    fn detect_outputs_respect_invariants() {
        let (_, det) = toy_detector(3);
        let x = random_batch(2, 32, 12);
        let (lm, hm) = det.detect(&x).unwrap();
        for img in lm.to_grid_points().unwrap() {
            for [r, c] in img {
                assert!((0.0..=7.0).contains(&r) && (0.0..=7.0).contains(&c));
            }
        }
        let v = hm.0.flatten_all().unwrap().to_vec1::<f32>().unwrap();
        assert!(v.iter().all(|&x| (0.0..=1.0).contains(&x)));

        // perturbing one corner pixel by 1e-7 barely moves the landmarks
        let mut data = x.flatten_all().unwrap().to_vec1::<f32>().unwrap();
        data[0] += 1e-7;
        let x2 = Tensor::from_vec(data, x.dims(), &Device::Cpu).unwrap();
        let (lm2, _) = det.detect(&x2).unwrap();
        let d = (lm.0 - lm2.0).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f32>().unwrap();
        assert!(d < 1e-3);
    }

    proptest! {
        #[test]
        fn soft_argmax_stays_in_hull(vals in proptest::collection::vec(-50.0f64..50.0, 36), beta in 0.01f64..100.0) {
            let [r, c] = coords(&soft_argmax(&maps_from(vals, 1, 6, 6), beta).unwrap())[0];
            prop_assert!((0.0..=5.0).contains(&r) && (0.0..=5.0).contains(&c));
        }
    }
}
