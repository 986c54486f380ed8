//! Labelled datasets, synthetic generators and on-disk formats.

use std::io::{Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::real::Real;
use crate::tensor::Tensor;

pub const IMAGE_MAGIC: &[u8; 4] = b"ARIM";

#[derive(Debug, Error)]
pub enum DataError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error("format: {0}")]
    Format(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset<T> {
    features: Tensor<T>,
    labels: Vec<usize>,
    classes: usize,
}

impl<T: Real> Dataset<T> {
    /// `features` is `[N, ...]`; every label must be below `classes`.
    pub fn new(features: Tensor<T>, labels: Vec<usize>, classes: usize) -> Result<Self, DataError> {
        if features.shape().is_empty() || features.shape()[0] != labels.len() {
            return Err(DataError::Format(format!(
                "{} labels for features {:?}",
                labels.len(),
                features.shape()
            )));
        }
        if let Some(&l) = labels.iter().find(|&&l| l >= classes) {
            return Err(DataError::Format(format!("label {l} outside {classes} classes")));
        }
        Ok(Dataset {
            features,
            labels,
            classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn features(&self) -> &Tensor<T> {
        &self.features
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    /// Shape of one example.
    pub fn example_shape(&self) -> &[usize] {
        &self.features.shape()[1..]
    }

    pub fn batch(&self, rows: &[usize]) -> (Tensor<T>, Vec<usize>) {
        (
            self.features.gather_rows(rows),
            rows.iter().map(|&r| self.labels[r]).collect(),
        )
    }

    pub fn take(&self, n: usize) -> Self {
        let n = n.min(self.len());
        Dataset {
            features: self.features.slice_rows(0, n),
            labels: self.labels[..n].to_vec(),
            classes: self.classes,
        }
    }

    /// Feature columns followed by an integer `label` column, with a header.
    pub fn write_csv(&self, path: &Path) -> Result<(), DataError> {
        let row = self.example_shape().iter().product::<usize>();
        let mut w = csv::Writer::from_path(path)?;
        let mut header: Vec<String> = (0..row).map(|i| format!("x{i}")).collect();
        header.push("label".into());
        w.write_record(&header)?;
        for (i, &l) in self.labels.iter().enumerate() {
            let mut rec: Vec<String> = self.features.data()[i * row..(i + 1) * row]
                .iter()
                .map(|v| format!("{}", v.as_f64()))
                .collect();
            rec.push(l.to_string());
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }

    /// Reads the layout of [`Dataset::write_csv`]; the class count is `max label + 1`
    /// unless `classes` is given.
    pub fn read_csv(path: &Path, classes: Option<usize>) -> Result<Self, DataError> {
        let mut r = csv::Reader::from_path(path)?;
        let mut data = Vec::new();
        let mut labels = Vec::new();
        let mut width = None;
        for rec in r.records() {
            let rec = rec?;
            let n = rec.len();
            if n < 2 || *width.get_or_insert(n) != n {
                return Err(DataError::Format(format!("ragged csv row of {n} fields")));
            }
            for f in rec.iter().take(n - 1) {
                let v: f64 = f
                    .trim()
                    .parse()
                    .map_err(|_| DataError::Format(format!("bad feature {f:?}")))?;
                data.push(T::of(v));
            }
            let l = rec[n - 1].trim();
            labels.push(l.parse().map_err(|_| DataError::Format(format!("bad label {l:?}")))?);
        }
        let width = width.ok_or_else(|| DataError::Format("empty csv".into()))? - 1;
        let classes = classes.unwrap_or_else(|| labels.iter().max().map_or(0, |m| m + 1));
        Dataset::new(Tensor::from_vec(&[labels.len(), width], data), labels, classes)
    }
}

/// Two interleaved spirals in the plane, `n` points per class.
pub fn two_spirals<T: Real>(n: usize, turns: f64, noise: f64, seed: u64) -> Dataset<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let jitter = Normal::new(0.0, noise.max(0.0)).expect("finite noise");
    let mut data = Vec::with_capacity(4 * n);
    let mut labels = Vec::with_capacity(2 * n);
    for _ in 0..n {
        let t: f64 = rng.random::<f64>().sqrt();
        let angle = turns * std::f64::consts::TAU * t;
        let r = 0.2 + 2.8 * t;
        let (x, y) = (r * angle.cos(), r * angle.sin());
        for (class, sign) in [(0, 1.0), (1, -1.0)] {
            data.push(T::of(sign * x + jitter.sample(&mut rng)));
            data.push(T::of(sign * y + jitter.sample(&mut rng)));
            labels.push(class);
        }
    }
    Dataset::new(Tensor::from_vec(&[2 * n, 2], data), labels, 2).expect("consistent spirals")
}

const GLYPHS: [[&str; 7]; 10] = [
    [".###.", "#...#", "#..##", "#.#.#", "##..#", "#...#", ".###."],
    ["..#..", ".##..", "..#..", "..#..", "..#..", "..#..", ".###."],
    [".###.", "#...#", "....#", "...#.", "..#..", ".#...", "#####"],
    ["####.", "....#", "....#", ".###.", "....#", "....#", "####."],
    ["...#.", "..##.", ".#.#.", "#..#.", "#####", "...#.", "...#."],
    ["#####", "#....", "####.", "....#", "....#", "#...#", ".###."],
    ["..##.", ".#...", "#....", "####.", "#...#", "#...#", ".###."],
    ["#####", "....#", "...#.", "..#..", ".#...", ".#...", ".#..."],
    [".###.", "#...#", "#...#", ".###.", "#...#", "#...#", ".###."],
    [".###.", "#...#", "#...#", ".####", "....#", "...#.", ".##.."],
];

/// Noisy 5x7 digit glyphs at random offsets on a `side x side` canvas of `u8` pixels.
pub fn glyph_digits(count: usize, side: usize, seed: u64) -> (Vec<u8>, Vec<u8>) {
    assert!(side >= 7, "canvas must fit a 5x7 glyph");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pixels = vec![0u8; count * side * side];
    let mut labels = Vec::with_capacity(count);
    for (i, img) in pixels.chunks_mut(side * side).enumerate() {
        let digit = i % 10;
        labels.push(digit as u8);
        let ox = rng.random_range(0..=side - 5);
        let oy = rng.random_range(0..=side - 7);
        for (r, line) in GLYPHS[digit].iter().enumerate() {
            for (c, ch) in line.bytes().enumerate() {
                if ch == b'#' && rng.random::<f64>() > 0.1 {
                    img[(oy + r) * side + ox + c] = rng.random_range(160..=255);
                }
            }
        }
        for p in img.iter_mut() {
            if rng.random::<f64>() < 0.05 {
                *p = p.saturating_add(rng.random_range(0..96));
            }
        }
    }
    (pixels, labels)
}

/// `ARIM` container: magic, u32 count, u32 height, u32 width, pixels, labels.
pub fn write_images(path: &Path, h: usize, w: usize, pixels: &[u8], labels: &[u8]) -> Result<(), DataError> {
    if pixels.len() != labels.len() * h * w {
        return Err(DataError::Format("pixel count does not match labels".into()));
    }
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    f.write_all(IMAGE_MAGIC)?;
    for v in [labels.len(), h, w] {
        f.write_all(&(v as u32).to_le_bytes())?;
    }
    f.write_all(pixels)?;
    f.write_all(labels)?;
    f.flush()?;
    Ok(())
}

/// Loads an `ARIM` file as `[N, 1, H, W]` features scaled to `[0, 1]`.
pub fn read_images<T: Real>(path: &Path, classes: usize) -> Result<Dataset<T>, DataError> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    if bytes.len() < 16 || &bytes[..4] != IMAGE_MAGIC {
        return Err(DataError::Format("not an ARIM file".into()));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap()) as usize;
    let (n, h, w) = (word(0), word(1), word(2));
    let body = &bytes[16..];
    if body.len() != n * h * w + n {
        return Err(DataError::Format(format!(
            "ARIM body is {} bytes, expected {}",
            body.len(),
            n * h * w + n
        )));
    }
    let features = Tensor::from_vec(
        &[n, 1, h, w],
        body[..n * h * w].iter().map(|&p| T::of(p as f64 / 255.0)).collect(),
    );
    let labels = body[n * h * w..].iter().map(|&l| l as usize).collect();
    Dataset::new(features, labels, classes)
}
