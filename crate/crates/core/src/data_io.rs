//! Datasets: directory corpora described by a manifest, the procedural face
//! sprite generator, and the landmark CSV format
//! (`image_id,point_index,x_px,y_px`, one row per point).

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use image::imageops::FilterType;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::imaging::Image;
use crate::warp::Point;

pub const MANIFEST_FILE: &str = "manifest.txt";
pub const ANNOTATIONS_FILE: &str = "annotations.csv";
pub const IMAGES_DIR: &str = "images";
const CSV_HEADER: [&str; 4] = ["image_id", "point_index", "x_px", "y_px"];

/// Toy sprite landmark order; the first two are the eyes.
pub const TOY_LANDMARK_NAMES: [&str; 5] = ["left_eye", "right_eye", "nose_tip", "mouth_left", "mouth_right"];

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: String,
    pub image: Image,
    /// `[x, y]` pixels in the (possibly resized) image.
    pub landmarks: Option<Vec<Point>>,
    /// Map from `image` pixels back to the file's pixels.
    pub frame: Frame,
}

/// `source = loaded / scale + offset`, per axis.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Frame {
    pub scale: [f64; 2],
    pub offset: [f64; 2],
}

impl Frame {
    pub const IDENTITY: Frame = Frame {
        scale: [1.0, 1.0],
        offset: [0.0, 0.0],
    };

    pub fn to_source(&self, p: Point) -> Point {
        [p[0] / self.scale[0] + self.offset[0], p[1] / self.scale[1] + self.offset[1]]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub items: Vec<Sample>,
    pub split: String,
    /// Images that failed to decode and were left out.
    pub skipped: usize,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn images(&self) -> Vec<&Image> {
        self.items.iter().map(|s| &s.image).collect()
    }

    /// Ground-truth table for annotated items.
    pub fn landmark_table(&self) -> LandmarkTable {
        LandmarkTable {
            entries: self
                .items
                .iter()
                .filter_map(|s| s.landmarks.clone().map(|l| (s.id.clone(), l)))
                .collect(),
        }
    }

    pub fn subset(&self, range: std::ops::Range<usize>, split: &str) -> Dataset {
        Dataset {
            items: self.items[range].to_vec(),
            split: split.to_string(),
            skipped: 0,
        }
    }
}

/// Source-pixel crop box applied before resizing.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Crop {
    pub x: u32,
    pub y: u32,
    pub width: u32,
    pub height: u32,
}

impl std::str::FromStr for Crop {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let v: Vec<u32> = s
            .split(',')
            .map(|p| p.trim().parse::<u32>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| Error::Config(format!("crop '{s}' must be four integers x,y,w,h")))?;
        match v.as_slice() {
            &[x, y, width, height] if width > 0 && height > 0 => Ok(Crop { x, y, width, height }),
            _ => Err(Error::Config(format!("crop '{s}' must be four integers x,y,w,h with w,h > 0"))),
        }
    }
}

fn read_manifest(path: &Path) -> Result<Vec<String>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(str::to_string)
        .collect())
}

/// Loads the images listed in `manifest` (paths relative to `root`), resizes
/// them to `target_size` squared and rescales any annotations by the same
/// per-axis factors. Items keep manifest order.
pub fn load_image_dataset(
    root: &Path,
    manifest: &Path,
    annotations: Option<&Path>,
    target_size: usize,
    crop: Option<Crop>,
) -> Result<Dataset> {
    let entries = read_manifest(manifest)?;
    if entries.is_empty() {
        return Err(Error::EmptyDataset);
    }
    for rel in &entries {
        let p = root.join(rel);
        if !p.is_file() {
            return Err(Error::io(
                p,
                std::io::Error::new(std::io::ErrorKind::NotFound, "listed in manifest but missing"),
            ));
        }
    }
    let table = annotations.map(read_landmarks).transpose()?;
    let mut items = Vec::with_capacity(entries.len());
    let mut skipped = 0;
    for rel in entries {
        let path = root.join(&rel);
        let decoded = match image::open(&path) {
            Ok(img) => img.to_rgb8(),
            Err(e) => {
                log::warn!("skipping unreadable image {}: {e}", path.display());
                skipped += 1;
                continue;
            }
        };
        let (mut ox, mut oy) = (0.0, 0.0);
        let decoded = match crop {
            Some(c) => {
                if c.x + c.width > decoded.width() || c.y + c.height > decoded.height() {
                    return Err(Error::Input(format!(
                        "crop {c:?} exceeds {}x{} image {}",
                        decoded.width(),
                        decoded.height(),
                        path.display()
                    )));
                }
                ox = c.x as f64;
                oy = c.y as f64;
                image::imageops::crop_imm(&decoded, c.x, c.y, c.width, c.height).to_image()
            }
            None => decoded,
        };
        let (w, h) = decoded.dimensions();
        let sx = target_size as f64 / w as f64;
        let sy = target_size as f64 / h as f64;
        let resized = if w as usize == target_size && h as usize == target_size {
            decoded
        } else {
            image::imageops::resize(&decoded, target_size as u32, target_size as u32, FilterType::Triangle)
        };
        let landmarks = table.as_ref().and_then(|t| t.get(&rel)).map(|pts| {
            pts.iter()
                .map(|&[x, y]| [(x - ox) * sx, (y - oy) * sy])
                .collect::<Vec<_>>()
        });
        items.push(Sample {
            id: rel,
            image: Image::from_rgb8(&resized),
            landmarks,
            frame: Frame {
                scale: [sx, sy],
                offset: [ox, oy],
            },
        });
    }
    if skipped > 0 {
        log::warn!("{skipped} image(s) skipped while loading {}", manifest.display());
    }
    if items.is_empty() {
        return Err(Error::EmptyDataset);
    }
    Ok(Dataset {
        items,
        split: manifest
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default(),
        skipped,
    })
}

/// Loads `<dir>/manifest.txt` (plus `<dir>/annotations.csv` when present).
pub fn load_dataset_dir(dir: &Path, target_size: usize, crop: Option<Crop>) -> Result<Dataset> {
    let ann = dir.join(ANNOTATIONS_FILE);
    load_image_dataset(
        dir,
        &dir.join(MANIFEST_FILE),
        ann.is_file().then_some(ann.as_path()),
        target_size,
        crop,
    )
}

/// Writes `images/*.png`, `manifest.txt` and, for annotated items, `annotations.csv`.
pub fn write_dataset(dir: &Path, dataset: &Dataset) -> Result<()> {
    let img_dir = dir.join(IMAGES_DIR);
    fs::create_dir_all(&img_dir).map_err(|e| Error::io(&img_dir, e))?;
    let mut manifest = String::new();
    for s in &dataset.items {
        s.image.save_png(&dir.join(&s.id))?;
        manifest.push_str(&s.id);
        manifest.push('\n');
    }
    let mpath = dir.join(MANIFEST_FILE);
    fs::write(&mpath, manifest).map_err(|e| Error::io(&mpath, e))?;
    let table = dataset.landmark_table();
    if !table.is_empty() {
        write_landmarks(&dir.join(ANNOTATIONS_FILE), &table)?;
    }
    Ok(())
}

/// Per-image landmark lists in first-seen order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LandmarkTable {
    pub entries: Vec<(String, Vec<Point>)>,
}

impl LandmarkTable {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&Vec<Point>> {
        self.entries.iter().find(|(k, _)| k == id).map(|(_, v)| v)
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(k, _)| k.as_str())
    }

    /// Points per image; errors if images disagree.
    pub fn points_per_image(&self) -> Result<usize> {
        let mut n = None;
        for (id, pts) in &self.entries {
            match n {
                None => n = Some(pts.len()),
                Some(m) if m != pts.len() => {
                    return Err(Error::Input(format!("image {id} has {} points, others have {m}", pts.len())))
                }
                _ => {}
            }
        }
        Ok(n.unwrap_or(0))
    }

    /// Rows `[x0, y0, x1, y1, ...]` for each id in `ids`.
    pub fn rows_for(&self, ids: &[&str]) -> Result<Vec<Vec<f64>>> {
        let index: std::collections::HashMap<&str, &Vec<Point>> =
            self.entries.iter().map(|(k, v)| (k.as_str(), v)).collect();
        ids.iter()
            .map(|id| {
                index
                    .get(id)
                    .map(|pts| pts.iter().flat_map(|p| [p[0], p[1]]).collect())
                    .ok_or_else(|| Error::Input(format!("no landmarks for image {id}")))
            })
            .collect()
    }

    /// Ids present in both tables, in `self` order.
    pub fn common_ids<'a>(&'a self, other: &LandmarkTable) -> Vec<&'a str> {
        let theirs: std::collections::HashSet<&str> = other.ids().collect();
        self.ids().filter(|id| theirs.contains(id)).collect()
    }
}

pub fn read_landmarks(path: &Path) -> Result<LandmarkTable> {
    let parse_err = |line: u64, msg: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        msg,
    };
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| match e.into_kind() {
            csv::ErrorKind::Io(io) => Error::io(path, io),
            other => parse_err(0, format!("{other:?}")),
        })?;
    let mut order: Vec<String> = Vec::new();
    let mut points: BTreeMap<String, BTreeMap<usize, Point>> = BTreeMap::new();
    let mut saw_header = false;
    for rec in rdr.records() {
        let rec = rec.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line());
            parse_err(line, e.to_string())
        })?;
        let line = rec.position().map_or(0, |p| p.line());
        if !saw_header {
            let got: Vec<&str> = rec.iter().collect();
            if got != CSV_HEADER {
                return Err(parse_err(line, format!("expected header {}", CSV_HEADER.join(","))));
            }
            saw_header = true;
            continue;
        }
        if rec.len() != 4 {
            return Err(parse_err(line, format!("expected 4 fields, found {}", rec.len())));
        }
        let idx: usize = rec[1]
            .parse()
            .map_err(|_| parse_err(line, format!("invalid point_index '{}'", &rec[1])))?;
        let coord = |s: &str, what: &str| -> Result<f64> {
            s.parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| parse_err(line, format!("invalid {what} '{s}'")))
        };
        let p = [coord(&rec[2], "x_px")?, coord(&rec[3], "y_px")?];
        let id = rec[0].to_string();
        let slot = points.entry(id.clone()).or_insert_with(|| {
            order.push(id.clone());
            BTreeMap::new()
        });
        if slot.insert(idx, p).is_some() {
            return Err(parse_err(line, format!("duplicate point {idx} for image {id}")));
        }
    }
    let mut entries = Vec::with_capacity(order.len());
    for id in order {
        let pts = points.remove(&id).unwrap_or_default();
        if pts.keys().copied().ne(0..pts.len()) {
            return Err(parse_err(0, format!("image {id} has non-contiguous point indices")));
        }
        entries.push((id, pts.into_values().collect()));
    }
    Ok(LandmarkTable { entries })
}

pub fn write_landmarks(path: &Path, table: &LandmarkTable) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Input(format!("{other:?}")),
    })?;
    let io_err = |e: csv::Error| match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Input(format!("{other:?}")),
    };
    w.write_record(CSV_HEADER).map_err(io_err)?;
    for (id, pts) in &table.entries {
        for (i, p) in pts.iter().enumerate() {
            w.write_record([id.clone(), i.to_string(), p[0].to_string(), p[1].to_string()])
                .map_err(io_err)?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyConfig {
    pub count: usize,
    pub image_size: usize,
    pub seed: u64,
    /// Head centre jitter as a fraction of image size.
    pub center_jitter: f64,
    /// Head half-width range as fractions of image size.
    pub head_radius: (f64, f64),
    /// In-plane head rotation bound, radians.
    pub max_roll: f64,
    /// Horizontal feature shift (pseudo-yaw) bound as a fraction of head half-width.
    pub max_yaw_shift: f64,
    /// Number of background distractor shapes drawn per sprite (inclusive range).
    pub clutter: (usize, usize),
}

impl Default for ToyConfig {
    fn default() -> Self {
        Self {
            count: 2000,
            image_size: 64,
            seed: 7,
            center_jitter: 0.08,
            head_radius: (0.22, 0.3),
            max_roll: 20f64.to_radians(),
            max_yaw_shift: 0.12,
            clutter: (3, 6),
        }
    }
}

impl ToyConfig {
    pub fn validate(&self) -> Result<()> {
        if self.count == 0 {
            return Err(Error::Config("toy dataset count must be at least 1".into()));
        }
        if self.image_size < 32 {
            return Err(Error::Config(format!("toy image size must be >= 32, got {}", self.image_size)));
        }
        if !(0.0 < self.head_radius.0 && self.head_radius.0 <= self.head_radius.1 && self.head_radius.1 <= 0.3) {
            return Err(Error::Config("toy head radius range must lie in (0, 0.3]".into()));
        }
        if !(0.0..=0.1).contains(&self.center_jitter) || self.clutter.0 > self.clutter.1 {
            return Err(Error::Config("toy centre jitter must lie in [0, 0.1] and clutter range be ordered".into()));
        }
        Ok(())
    }
}

type Rgb = [f32; 3];

#[derive(Debug, Clone, Copy)]
enum Shape {
    /// Rotated ellipse: centre, semi-axes, angle.
    Ellipse { c: Point, a: f64, b: f64, angle: f64 },
    /// Segment with round caps.
    Capsule { p: Point, q: Point, r: f64 },
    Rect { min: Point, max: Point },
}

impl Shape {
    fn contains(&self, x: f64, y: f64) -> bool {
        match *self {
            Shape::Ellipse { c, a, b, angle } => {
                let (s, co) = angle.sin_cos();
                let (dx, dy) = (x - c[0], y - c[1]);
                let u = co * dx + s * dy;
                let v = -s * dx + co * dy;
                (u / a).powi(2) + (v / b).powi(2) <= 1.0
            }
            Shape::Capsule { p, q, r } => {
                let (vx, vy) = (q[0] - p[0], q[1] - p[1]);
                let len2 = vx * vx + vy * vy;
                let t = if len2 > 0.0 {
                    (((x - p[0]) * vx + (y - p[1]) * vy) / len2).clamp(0.0, 1.0)
                } else {
                    0.0
                };
                let (dx, dy) = (x - p[0] - t * vx, y - p[1] - t * vy);
                dx * dx + dy * dy <= r * r
            }
            Shape::Rect { min, max } => x >= min[0] && x <= max[0] && y >= min[1] && y <= max[1],
        }
    }

    fn bbox(&self) -> (Point, Point) {
        match *self {
            Shape::Ellipse { c, a, b, .. } => {
                let r = a.max(b);
                ([c[0] - r, c[1] - r], [c[0] + r, c[1] + r])
            }
            Shape::Capsule { p, q, r } => (
                [p[0].min(q[0]) - r, p[1].min(q[1]) - r],
                [p[0].max(q[0]) + r, p[1].max(q[1]) + r],
            ),
            Shape::Rect { min, max } => (min, max),
        }
    }
}

struct Layer {
    shape: Shape,
    color: Rgb,
}

/// Anti-aliased painter's-algorithm rasteriser with a 4x4 sub-pixel grid.
fn rasterize(size: usize, background: Rgb, layers: &[Layer]) -> Image {
    const SS: usize = 4;
    let mut img = Image::zeros(size, size, 3);
    let boxes: Vec<(Point, Point)> = layers.iter().map(|l| l.shape.bbox()).collect();
    for row in 0..size {
        for col in 0..size {
            let mut acc = [0f32; 3];
            // only layers whose bounding box touches this pixel can contribute
            let active: Vec<usize> = (0..layers.len())
                .filter(|&i| {
                    let (lo, hi) = boxes[i];
                    col as f64 + 0.5 >= lo[0] && col as f64 - 0.5 <= hi[0] && row as f64 + 0.5 >= lo[1] && row as f64 - 0.5 <= hi[1]
                })
                .collect();
            for sy in 0..SS {
                for sx in 0..SS {
                    let x = col as f64 - 0.5 + (sx as f64 + 0.5) / SS as f64;
                    let y = row as f64 - 0.5 + (sy as f64 + 0.5) / SS as f64;
                    let mut c = background;
                    for &i in &active {
                        if layers[i].shape.contains(x, y) {
                            c = layers[i].color;
                        }
                    }
                    for k in 0..3 {
                        acc[k] += c[k];
                    }
                }
            }
            for (k, v) in acc.iter().enumerate() {
                img.set(row, col, k, v / (SS * SS) as f32);
            }
        }
    }
    img
}

fn color<R: Rng>(rng: &mut R, lo: f32, hi: f32) -> Rgb {
    [rng.random_range(lo..hi), rng.random_range(lo..hi), rng.random_range(lo..hi)]
}

/// Draws sprite `index` of the dataset defined by `cfg`. Pure in `(cfg, index)`.
pub fn synthesize_sprite(cfg: &ToyConfig, index: usize) -> Sample {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(index as u64);
    let s = cfg.image_size as f64;
    let background = color(&mut rng, 0.15, 0.85);

    let mut layers = Vec::new();
    let n_clutter = rng.random_range(cfg.clutter.0..=cfg.clutter.1);
    for _ in 0..n_clutter {
        let c = [rng.random_range(0.0..s), rng.random_range(0.0..s)];
        let size = rng.random_range(0.04..0.14) * s;
        let shape = if rng.random_bool(0.5) {
            Shape::Rect {
                min: [c[0] - size, c[1] - size * rng.random_range(0.4..1.0)],
                max: [c[0] + size, c[1] + size * rng.random_range(0.4..1.0)],
            }
        } else {
            Shape::Ellipse {
                c,
                a: size,
                b: size * rng.random_range(0.5..1.0),
                angle: rng.random_range(0.0..std::f64::consts::PI),
            }
        };
        layers.push(Layer {
            shape,
            color: color(&mut rng, 0.0, 1.0),
        });
    }

    let center = [
        s / 2.0 + rng.random_range(-cfg.center_jitter..=cfg.center_jitter) * s,
        s / 2.0 + rng.random_range(-cfg.center_jitter..=cfg.center_jitter) * s,
    ];
    let a = rng.random_range(cfg.head_radius.0..=cfg.head_radius.1) * s;
    let b = a * rng.random_range(1.15..1.35);
    let roll = rng.random_range(-cfg.max_roll..=cfg.max_roll);
    let yaw = rng.random_range(-cfg.max_yaw_shift..=cfg.max_yaw_shift) * a;
    let (sin, cos) = roll.sin_cos();
    // face-local (u right, v down) -> image
    let place = |u: f64, v: f64| -> Point { [center[0] + cos * u - sin * v, center[1] + sin * u + cos * v] };

    let skin = [
        rng.random_range(0.55..0.95),
        rng.random_range(0.4..0.75),
        rng.random_range(0.3..0.6),
    ];
    layers.push(Layer {
        shape: Shape::Ellipse { c: center, a, b, angle: roll },
        color: skin,
    });
    // hair cap across the top of the head
    let hair_v = -b * rng.random_range(0.75..0.9);
    layers.push(Layer {
        shape: Shape::Ellipse {
            c: place(0.0, hair_v),
            a: a * 0.85,
            b: b * 0.3,
            angle: roll,
        },
        color: color(&mut rng, 0.0, 0.4),
    });

    let eye_u = a * rng.random_range(0.35..0.5);
    let eye_v = -b * rng.random_range(0.18..0.3);
    let eye_r = a * rng.random_range(0.1..0.14);
    let eye_color = color(&mut rng, 0.0, 0.25);
    let left_eye = place(-eye_u + yaw, eye_v);
    let right_eye = place(eye_u + yaw, eye_v);
    for c in [left_eye, right_eye] {
        layers.push(Layer {
            shape: Shape::Ellipse { c, a: eye_r, b: eye_r, angle: 0.0 },
            color: eye_color,
        });
    }

    let nose = place(1.4 * yaw, b * rng.random_range(0.05..0.15));
    let nose_r = a * rng.random_range(0.07..0.1);
    layers.push(Layer {
        shape: Shape::Ellipse { c: nose, a: nose_r, b: nose_r, angle: 0.0 },
        color: [skin[0] * 0.6, skin[1] * 0.45, skin[2] * 0.45],
    });

    let mouth_v = b * rng.random_range(0.4..0.5);
    let mouth_u = a * rng.random_range(0.3..0.45);
    let mouth_left = place(-mouth_u + yaw, mouth_v);
    let mouth_right = place(mouth_u + yaw, mouth_v);
    layers.push(Layer {
        shape: Shape::Capsule {
            p: mouth_left,
            q: mouth_right,
            r: a * 0.06,
        },
        color: [rng.random_range(0.6..0.9), 0.1, rng.random_range(0.1..0.3)],
    });

    Sample {
        id: format!("{IMAGES_DIR}/{index:06}.png"),
        image: rasterize(cfg.image_size, background, &layers),
        landmarks: Some(vec![left_eye, right_eye, nose, mouth_left, mouth_right]),
        frame: Frame::IDENTITY,
    }
}

pub fn synthesize_toy_dataset(cfg: &ToyConfig) -> Result<Dataset> {
    cfg.validate()?;
    Ok(Dataset {
        items: (0..cfg.count).map(|i| synthesize_sprite(cfg, i)).collect(),
        split: "toy".into(),
        skipped: 0,
    })
}

/// Lists `png`/`jpg`/`jpeg` files under `dir/images` (or `dir` itself) in name order,
/// as manifest-relative paths.
pub fn scan_image_dir(dir: &Path) -> Result<Vec<String>> {
    let base = if dir.join(IMAGES_DIR).is_dir() {
        dir.join(IMAGES_DIR)
    } else {
        dir.to_path_buf()
    };
    let mut out: Vec<PathBuf> = fs::read_dir(&base)
        .map_err(|e| Error::io(&base, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension()
                .and_then(|e| e.to_str())
                .is_some_and(|e| matches!(e.to_ascii_lowercase().as_str(), "png" | "jpg" | "jpeg"))
        })
        .collect();
    out.sort();
    Ok(out
        .into_iter()
        .map(|p| p.strip_prefix(dir).unwrap_or(&p).to_string_lossy().into_owned())
        .collect())
}
