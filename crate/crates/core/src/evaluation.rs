//! Linear probe from discovered landmarks to annotated ones, the inter-ocular
//! normalised error, and the limited-supervision sweep.

use std::path::Path;

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Ridge used when the caller does not pick one: none once the design can be
/// full rank, a tiny stabiliser below that.
pub fn default_ridge(n: usize, k: usize) -> f64 {
    if n >= 2 * k + 1 {
        0.0
    } else {
        1e-6
    }
}

/// `(2K+1) x 2M` map from `[x0, y0, ..., x_{K-1}, y_{K-1}, 1]` to annotated coordinates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegressorWeights {
    pub k: usize,
    pub m: usize,
    pub ridge: f64,
    /// Row-major, `2K+1` rows of `2M` entries.
    pub rows: Vec<Vec<f64>>,
}

impl RegressorWeights {
    pub fn matrix(&self) -> DMatrix<f64> {
        DMatrix::from_fn(2 * self.k + 1, 2 * self.m, |r, c| self.rows[r][c])
    }

    fn validate(&self) -> Result<()> {
        let shape_ok = self.rows.len() == 2 * self.k + 1 && self.rows.iter().all(|r| r.len() == 2 * self.m);
        if !shape_ok {
            return Err(Error::Input(format!(
                "regressor must be {}x{}",
                2 * self.k + 1,
                2 * self.m
            )));
        }
        if self.rows.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("regressor has non-finite entries".into()));
        }
        Ok(())
    }

    pub fn predict(&self, pred: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
        let x = design(pred, self.k)?;
        let y = x * self.matrix();
        Ok(to_rows(&y))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let w: Self = serde_json::from_str(&text)?;
        w.validate()?;
        Ok(w)
    }
}

fn to_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows()).map(|r| m.row(r).iter().copied().collect()).collect()
}

fn matrix(rows: &[Vec<f64>], cols: usize, what: &str) -> Result<DMatrix<f64>> {
    for (i, r) in rows.iter().enumerate() {
        if r.len() != cols {
            return Err(Error::Input(format!("{what} row {i} has {} values, expected {cols}", r.len())));
        }
        if r.iter().any(|v| !v.is_finite()) {
            return Err(Error::Input(format!("{what} row {i} contains a non-finite value")));
        }
    }
    Ok(DMatrix::from_fn(rows.len(), cols, |r, c| rows[r][c]))
}

fn design(pred: &[Vec<f64>], k: usize) -> Result<DMatrix<f64>> {
    let x = matrix(pred, 2 * k, "prediction")?;
    Ok(x.insert_column(2 * k, 1.0))
}

fn width(rows: &[Vec<f64>], what: &str) -> Result<usize> {
    let w = rows.first().map(Vec::len).ok_or(Error::EmptyDataset)?;
    if w == 0 || w % 2 != 0 {
        return Err(Error::Input(format!("{what} rows need an even, non-zero number of coordinates")));
    }
    Ok(w)
}

/// Closed-form ridge solution of `min ||[pred, 1] W - gt||^2 + ridge ||W||^2`
/// via the SVD of the design. With `ridge = 0` singular values below the
/// numerical rank cutoff are dropped, giving the minimum-norm least-squares
/// solution.
pub fn fit_linear_regressor(pred: &[Vec<f64>], gt: &[Vec<f64>], ridge: f64) -> Result<RegressorWeights> {
    if pred.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if pred.len() != gt.len() {
        return Err(Error::Input(format!("{} prediction rows but {} ground-truth rows", pred.len(), gt.len())));
    }
    if !(ridge >= 0.0 && ridge.is_finite()) {
        return Err(Error::Config(format!("ridge must be finite and >= 0, got {ridge}")));
    }
    let k = width(pred, "prediction")? / 2;
    let m = width(gt, "ground-truth")? / 2;
    let x = design(pred, k)?;
    let y = matrix(gt, 2 * m, "ground-truth")?;

    let svd = x.clone().svd(true, true);
    let (u, vt) = (svd.u.expect("u requested"), svd.v_t.expect("v_t requested"));
    let s = &svd.singular_values;
    let s_max = s.max();
    let cutoff = s_max * f64::EPSILON * x.nrows().max(x.ncols()) as f64;
    let rank = s.iter().filter(|&&v| v > cutoff).count();
    if ridge == 0.0 && rank < x.ncols() {
        log::info!(
            "design matrix has rank {rank} < {} columns; using the minimum-norm solution",
            x.ncols()
        );
    }
    let filter = DMatrix::from_diagonal(&s.map(|v| {
        if ridge > 0.0 {
            v / (v * v + ridge)
        } else if v > cutoff {
            1.0 / v
        } else {
            0.0
        }
    }));
    let w = vt.transpose() * filter * u.transpose() * y;
    let weights = RegressorWeights {
        k,
        m,
        ridge,
        rows: to_rows(&w),
    };
    weights.validate()?;
    Ok(weights)
}

/// Sum of squared training residuals.
pub fn training_residual(weights: &RegressorWeights, pred: &[Vec<f64>], gt: &[Vec<f64>]) -> Result<f64> {
    let fitted = weights.predict(pred)?;
    Ok(fitted
        .iter()
        .zip(gt)
        .flat_map(|(a, b)| a.iter().zip(b).map(|(x, y)| (x - y).powi(2)))
        .sum())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub nme_percent: f64,
    /// Normalised mean point error per image; `None` for excluded images.
    pub per_image: Vec<Option<f64>>,
    pub n_used: usize,
    /// Rows the regressor was fitted on, when known.
    pub n_train_used: Option<usize>,
}

/// Mean point-to-point error divided by the ground-truth distance between the
/// `interocular` points, averaged over images, in percent. Images whose
/// inter-ocular distance is zero are excluded with a warning.
pub fn compute_nme(pred: &[Vec<f64>], gt: &[Vec<f64>], interocular: (usize, usize)) -> Result<EvalReport> {
    if pred.len() != gt.len() {
        return Err(Error::Input(format!("{} predicted rows but {} ground-truth rows", pred.len(), gt.len())));
    }
    let w = width(gt, "ground-truth")?;
    let m = w / 2;
    if interocular.0 >= m || interocular.1 >= m {
        return Err(Error::Config(format!("inter-ocular pair {interocular:?} out of range for {m} points")));
    }
    matrix(pred, w, "prediction")?;
    matrix(gt, w, "ground-truth")?;
    let mut per_image = Vec::with_capacity(gt.len());
    let mut sum = 0.0;
    let mut used = 0;
    for (i, (p, g)) in pred.iter().zip(gt).enumerate() {
        let (l, r) = interocular;
        let iod = (g[2 * l] - g[2 * r]).hypot(g[2 * l + 1] - g[2 * r + 1]);
        if iod <= 0.0 {
            log::warn!("image {i} has zero inter-ocular distance; excluded from NME");
            per_image.push(None);
            continue;
        }
        let err = (0..m)
            .map(|j| (p[2 * j] - g[2 * j]).hypot(p[2 * j + 1] - g[2 * j + 1]))
            .sum::<f64>()
            / m as f64;
        per_image.push(Some(err / iod));
        sum += err / iod;
        used += 1;
    }
    if used == 0 {
        return Err(Error::Input("no image has a positive inter-ocular distance".into()));
    }
    Ok(EvalReport {
        nme_percent: 100.0 * sum / used as f64,
        per_image,
        n_used: used,
        n_train_used: None,
    })
}

/// Fits on the training rows and reports NME on the test rows.
pub fn probe_nme(
    train: (&[Vec<f64>], &[Vec<f64>]),
    test: (&[Vec<f64>], &[Vec<f64>]),
    ridge: Option<f64>,
    interocular: (usize, usize),
) -> Result<EvalReport> {
    let k = width(train.0, "prediction")? / 2;
    let w = fit_linear_regressor(train.0, train.1, ridge.unwrap_or_else(|| default_ridge(train.0.len(), k)))?;
    let mut report = compute_nme(&w.predict(test.0)?, test.1, interocular)?;
    report.n_train_used = Some(train.0.len());
    Ok(report)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Supervision {
    All,
    Count(usize),
}

impl std::fmt::Display for Supervision {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Supervision::All => f.write_str("all"),
            Supervision::Count(n) => write!(f, "{n}"),
        }
    }
}

impl std::str::FromStr for Supervision {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "all" => Ok(Supervision::All),
            t => t
                .parse::<usize>()
                .ok()
                .filter(|&n| n > 0)
                .map(Supervision::Count)
                .ok_or_else(|| Error::Config(format!("supervision count '{s}' must be a positive integer or 'all'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub n: Supervision,
    pub mean: f64,
    /// Sample standard deviation over seeds (0 for a single seed).
    pub std: f64,
    pub runs: Vec<f64>,
}

/// For each `n`, fits on `n` training rows drawn without replacement (one
/// draw per seed) and evaluates test NME.
pub fn limited_supervision_sweep(
    train: (&[Vec<f64>], &[Vec<f64>]),
    test: (&[Vec<f64>], &[Vec<f64>]),
    ns: &[Supervision],
    seeds: &[u64],
    ridge: Option<f64>,
    interocular: (usize, usize),
) -> Result<Vec<SweepRow>> {
    if seeds.is_empty() {
        return Err(Error::Config("sweep needs at least one seed".into()));
    }
    let available = train.0.len();
    let mut table = Vec::with_capacity(ns.len());
    for &n in ns {
        let count = match n {
            Supervision::All => available,
            Supervision::Count(c) if c <= available => c,
            Supervision::Count(c) => {
                return Err(Error::Config(format!("n = {c} exceeds the {available} training rows")))
            }
        };
        let mut runs = Vec::with_capacity(seeds.len());
        for &seed in seeds {
            let idx: Vec<usize> = if count == available {
                (0..available).collect()
            } else {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                rand::seq::index::sample(&mut rng, available, count).into_vec()
            };
            let p: Vec<Vec<f64>> = idx.iter().map(|&i| train.0[i].clone()).collect();
            let g: Vec<Vec<f64>> = idx.iter().map(|&i| train.1[i].clone()).collect();
            runs.push(probe_nme((&p, &g), test, ridge, interocular)?.nme_percent);
        }
        let mean = runs.iter().sum::<f64>() / runs.len() as f64;
        let std = if runs.len() > 1 {
            (runs.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / (runs.len() - 1) as f64).sqrt()
        } else {
            0.0
        };
        table.push(SweepRow { n, mean, std, runs });
    }
    Ok(table)
}

pub fn format_sweep_table(rows: &[SweepRow]) -> String {
    let mut out = String::from("n       NME (%)\n");
    for r in rows {
        out.push_str(&format!("{:<7} {:.2} ± {:.2}\n", r.n.to_string(), r.mean, r.std));
    }
    out
}
