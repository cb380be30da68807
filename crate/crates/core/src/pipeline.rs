//! Detector-in-the-loop evaluation: landmark tables for a dataset, the linear
//! probe against annotations, and equivariance under random warps.

use rand::Rng;

use crate::data_io::{Dataset, LandmarkTable};
use crate::detector::LandmarkDetector;
use crate::error::{Error, Result};
use crate::evaluation::{probe_nme, EvalReport};
use crate::imaging::Image;
use crate::warp::{apply_warp_image, apply_warp_points, sample_deform, DeformRanges};

const CHUNK: usize = 64;

/// Discovered landmarks, in input pixels, for every item of `dataset`.
pub fn detect_dataset(detector: &LandmarkDetector, dataset: &Dataset) -> Result<LandmarkTable> {
    let points = detector.detect_pixels(&dataset.images(), CHUNK)?;
    Ok(LandmarkTable {
        entries: dataset.items.iter().map(|s| s.id.clone()).zip(points).collect(),
    })
}

/// Flattened prediction and annotation rows for the annotated items of `dataset`.
pub fn probe_rows(detector: &LandmarkDetector, dataset: &Dataset) -> Result<(Vec<Vec<f64>>, Vec<Vec<f64>>)> {
    let annotated: Vec<&crate::data_io::Sample> = dataset.items.iter().filter(|s| s.landmarks.is_some()).collect();
    if annotated.is_empty() {
        return Err(Error::Input(format!("split '{}' has no annotations", dataset.split)));
    }
    let images: Vec<&Image> = annotated.iter().map(|s| &s.image).collect();
    let pred = detector.detect_pixels(&images, CHUNK)?;
    let flat = |pts: &[[f64; 2]]| pts.iter().flat_map(|p| [p[0], p[1]]).collect::<Vec<f64>>();
    Ok((
        pred.iter().map(|p| flat(p)).collect(),
        annotated.iter().map(|s| flat(s.landmarks.as_deref().unwrap_or_default())).collect(),
    ))
}

/// Fits the probe on `train` and reports NME on `test`.
pub fn probe_detector(
    detector: &LandmarkDetector,
    train: &Dataset,
    test: &Dataset,
    ridge: Option<f64>,
    interocular: (usize, usize),
) -> Result<EvalReport> {
    let (tp, tg) = probe_rows(detector, train)?;
    let (ep, eg) = probe_rows(detector, test)?;
    probe_nme((&tp, &tg), (&ep, &eg), ridge, interocular)
}

/// For `n` random (image, warp) draws, the mean over landmarks of
/// `|T(detect(x)) - detect(T(x))|` in pixels.
pub fn equivariance_errors<R: Rng + ?Sized>(
    detector: &LandmarkDetector,
    images: &[&Image],
    n: usize,
    ranges: &DeformRanges,
    rng: &mut R,
) -> Result<Vec<f64>> {
    if images.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut sources = Vec::with_capacity(n);
    let mut warped = Vec::with_capacity(n);
    let mut params = Vec::with_capacity(n);
    for i in 0..n {
        let img = images[i % images.len()];
        let p = sample_deform(ranges, rng)?;
        warped.push(apply_warp_image(img, &p)?);
        sources.push(img);
        params.push(p);
    }
    let before = detector.detect_pixels(&sources, CHUNK)?;
    let after = detector.detect_pixels(&warped.iter().collect::<Vec<_>>(), CHUNK)?;
    Ok(before
        .iter()
        .zip(&after)
        .zip(&params)
        .zip(&sources)
        .map(|(((b, a), p), img)| {
            let moved = apply_warp_points(b, p, img.width(), img.height());
            moved.iter().zip(a).map(|(m, q)| (m[0] - q[0]).hypot(m[1] - q[1])).sum::<f64>() / b.len() as f64
        })
        .collect())
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    match v.len() {
        0 => f64::NAN,
        n if n % 2 == 1 => v[n / 2],
        n => (v[n / 2 - 1] + v[n / 2]) / 2.0,
    }
}
