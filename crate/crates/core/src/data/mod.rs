//! Synthetic shapes dataset and its on-disk layout.
//!
//! Class 0 is a striped background. Every other class `c` is drawn as one
//! shape kind, cycling rectangle, disc, 3-pixel-wide bar for `c = 1, 2, 3, …`,
//! in its own base colour. Geometry is rasterised with integer arithmetic
//! only, so the label map is exactly the painted shapes. Noise is added per
//! channel and the result is quantised to 8 bits, so a written dataset reads
//! back bit-for-bit.
//!
//! Sample `i` draws from the stream `Rng::derive(seed, "sample{i}")`, which
//! makes generation order-independent and parallel-safe.

mod pnm;

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{config, Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

pub use pnm::{decode_pgm, decode_ppm, encode_pgm, encode_ppm, read_labels, read_ppm, write_labels, write_ppm};

/// Width of the thin-bar class in pixels.
pub const BAR_WIDTH: usize = 3;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct SegSample {
    /// `[H, W, 3]`, values in `[0, 1]`.
    pub image: Tensor<f32>,
    /// Row-major class ids, `255` for ignored pixels.
    pub labels: Vec<u8>,
}

impl SegSample {
    pub fn height(&self) -> usize {
        self.image.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.image.shape()[1]
    }

    pub fn validate(&self, num_classes: usize) -> Result<()> {
        let s = self.image.shape();
        if s.len() != 3 || s[2] != 3 || self.labels.len() != s[0] * s[1] {
            return Err(Error::Data(format!(
                "image {s:?} and {} labels do not agree",
                self.labels.len()
            )));
        }
        if let Some(&bad) = self.labels.iter().find(|&&l| l != 255 && l as usize >= num_classes) {
            return Err(Error::Data(format!("label {bad} outside 0..{num_classes}")));
        }
        if self.image.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Data("image values outside [0, 1]".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ShapesSpec {
    pub image_size: usize,
    /// Background plus shape classes.
    pub num_classes: usize,
    pub shapes_min: usize,
    pub shapes_max: usize,
    /// Side range of rectangles and diameter range of discs.
    pub size_min: usize,
    pub size_max: usize,
    pub noise_std: f64,
    pub seed: u64,
}

impl Default for ShapesSpec {
    fn default() -> Self {
        Self {
            image_size: 64,
            num_classes: 4,
            shapes_min: 2,
            shapes_max: 5,
            size_min: 10,
            size_max: 28,
            noise_std: 0.08,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ShapeKind {
    Rectangle,
    Disc,
    Bar,
}

/// Shape drawn for class `c ≥ 1`.
pub fn shape_kind(class: u8) -> ShapeKind {
    match (class as usize + 2) % 3 {
        0 => ShapeKind::Rectangle,
        1 => ShapeKind::Disc,
        _ => ShapeKind::Bar,
    }
}

/// Base colour of a class.
pub fn class_color(class: u8) -> [f64; 3] {
    const FIXED: [[f64; 3]; 8] = [
        [0.45, 0.45, 0.45],
        [0.85, 0.25, 0.20],
        [0.20, 0.70, 0.30],
        [0.20, 0.35, 0.90],
        [0.90, 0.80, 0.20],
        [0.70, 0.25, 0.80],
        [0.15, 0.80, 0.80],
        [0.95, 0.55, 0.15],
    ];
    if let Some(c) = FIXED.get(class as usize) {
        return *c;
    }
    let mut r = Rng::derive(0, &format!("palette{class}"));
    [r.uniform(), r.uniform(), r.uniform()]
}

impl ShapesSpec {
    pub fn validate(&self) -> Result<()> {
        if self.image_size == 0 || !self.image_size.is_multiple_of(32) {
            return Err(config(format!("image_size {} must be a positive multiple of 32", self.image_size)));
        }
        if !(2..=255).contains(&self.num_classes) {
            return Err(config(format!("num_classes {} must be in 2..=255", self.num_classes)));
        }
        if self.shapes_min == 0 || self.shapes_min > self.shapes_max {
            return Err(config("need 1 ≤ shapes_min ≤ shapes_max"));
        }
        if self.size_min < BAR_WIDTH || self.size_min > self.size_max || self.size_max > self.image_size {
            return Err(config(format!(
                "need {BAR_WIDTH} ≤ size_min ≤ size_max ≤ image_size, got {}..{}",
                self.size_min, self.size_max
            )));
        }
        if !self.noise_std.is_finite() || self.noise_std < 0.0 {
            return Err(config("noise_std must be finite and non-negative"));
        }
        Ok(())
    }
}

fn range(r: &mut Rng, lo: usize, hi: usize) -> usize {
    r.range(lo as i64, hi as i64) as usize
}

/// Paints one shape of class `class` into `labels`.
fn draw_shape(labels: &mut [u8], n: usize, class: u8, spec: &ShapesSpec, r: &mut Rng) {
    let mut fill = |y0: usize, y1: usize, x0: usize, x1: usize, inside: &dyn Fn(usize, usize) -> bool| {
        for y in y0..y1 {
            for x in x0..x1 {
                if inside(y, x) {
                    labels[y * n + x] = class;
                }
            }
        }
    };
    match shape_kind(class) {
        ShapeKind::Rectangle => {
            let h = range(r, spec.size_min, spec.size_max);
            let w = range(r, spec.size_min, spec.size_max);
            let y = range(r, 0, n - h);
            let x = range(r, 0, n - w);
            fill(y, y + h, x, x + w, &|_, _| true);
        }
        ShapeKind::Disc => {
            let rad = range(r, spec.size_min, spec.size_max) / 2;
            let cy = range(r, rad, n - 1 - rad) as i64;
            let cx = range(r, rad, n - 1 - rad) as i64;
            let r2 = (rad * rad) as i64;
            let (y0, x0) = ((cy as usize) - rad, (cx as usize) - rad);
            fill(y0, y0 + 2 * rad + 1, x0, x0 + 2 * rad + 1, &|y, x| {
                let (dy, dx) = (y as i64 - cy, x as i64 - cx);
                dy * dy + dx * dx <= r2
            });
        }
        ShapeKind::Bar => {
            let len = range(r, n / 3, n - 4);
            let along = range(r, 0, n - len);
            let across = range(r, 0, n - BAR_WIDTH);
            if r.bernoulli(0.5) {
                fill(across, across + BAR_WIDTH, along, along + len, &|_, _| true);
            } else {
                fill(along, along + len, across, across + BAR_WIDTH, &|_, _| true);
            }
        }
    }
}

/// Generates sample `index` of the dataset described by `spec`.
pub fn generate_sample(spec: &ShapesSpec, index: usize) -> SegSample {
    let n = spec.image_size;
    let mut r = Rng::derive(spec.seed, &format!("sample{index}"));
    let count = range(&mut r, spec.shapes_min, spec.shapes_max);
    let mut classes: Vec<u8> = (0..count).map(|_| 1 + r.below(spec.num_classes as u64 - 1) as u8).collect();
    // Bars last so larger shapes cannot erase them.
    classes.sort_by_key(|&c| shape_kind(c) == ShapeKind::Bar);
    let mut labels = vec![0u8; n * n];
    for &c in &classes {
        draw_shape(&mut labels, n, c, spec, &mut r);
    }

    let period = range(&mut r, 4, 8);
    let diagonal = r.bernoulli(0.5);
    let mut data = Vec::with_capacity(n * n * 3);
    for y in 0..n {
        for x in 0..n {
            let c = labels[y * n + x];
            let base = class_color(c);
            let stripe = if c == 0 {
                let t = if diagonal { x + y } else { x };
                if (t / period).is_multiple_of(2) { 0.08 } else { -0.08 }
            } else {
                0.0
            };
            for ch in base {
                let v = (ch + stripe + spec.noise_std * r.normal()).clamp(0.0, 1.0);
                data.push(((v * 255.0).round() / 255.0) as f32);
            }
        }
    }
    SegSample {
        image: Tensor::new(vec![n, n, 3], data).expect("sizes agree"),
        labels,
    }
}

/// Samples `0..n` of the dataset.
pub fn generate_shapes(spec: &ShapesSpec, n: usize) -> Result<Vec<SegSample>> {
    spec.validate()?;
    if n == 0 {
        return Err(config("need at least one sample"));
    }
    let work = n * spec.image_size * spec.image_size * 16;
    Ok(crate::tensor::par::map_indices(n, work, |i| generate_sample(spec, i)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub spec: ShapesSpec,
    pub n: usize,
    pub format_version: u32,
}

pub fn image_path(dir: &Path, i: usize) -> std::path::PathBuf {
    dir.join(format!("img_{i:05}.ppm"))
}

pub fn label_path(dir: &Path, i: usize) -> std::path::PathBuf {
    dir.join(format!("lab_{i:05}.pgm"))
}

/// Writes `img_%05d.ppm`, `lab_%05d.pgm` and `manifest.json` into `dir`.
pub fn write_dataset(dir: &Path, spec: &ShapesSpec, samples: &[SegSample]) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    for (i, s) in samples.iter().enumerate() {
        write_ppm(&image_path(dir, i), &s.image)?;
        write_labels(&label_path(dir, i), &s.labels, s.height(), s.width())?;
    }
    let m = DatasetManifest {
        spec: spec.clone(),
        n: samples.len(),
        format_version: FORMAT_VERSION,
    };
    std::fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&m)?)?;
    Ok(())
}

pub fn read_dataset(dir: &Path) -> Result<(DatasetManifest, Vec<SegSample>)> {
    let m: DatasetManifest = serde_json::from_slice(&std::fs::read(dir.join("manifest.json"))?)?;
    if m.format_version != FORMAT_VERSION {
        return Err(Error::Data(format!("unsupported dataset format {}", m.format_version)));
    }
    let samples = (0..m.n)
        .map(|i| {
            let image = read_ppm(&image_path(dir, i))?;
            let (labels, h, w) = read_labels(&label_path(dir, i))?;
            if image.shape()[..2] != [h, w] {
                return Err(Error::Data(format!("sample {i}: image and label sizes differ")));
            }
            let s = SegSample { image, labels };
            s.validate(m.spec.num_classes)?;
            Ok(s)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((m, samples))
}
