//! Seeded synthetic classification sets and their CSV form.

use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetKind {
    /// Two Gaussian blobs in the plane.
    Blobs,
    /// Two interleaved spirals in the plane.
    Spirals,
    /// `size×size` single-channel images of a horizontal or vertical bar.
    Bars,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSpec {
    pub kind: DatasetKind,
    #[serde(default = "default_samples")]
    pub samples: usize,
    #[serde(default = "default_noise")]
    pub noise: f64,
    #[serde(default = "default_test_fraction")]
    pub test_fraction: f64,
    /// Image side for `bars`.
    #[serde(default = "default_size")]
    pub size: usize,
}

fn default_samples() -> usize {
    600
}
fn default_noise() -> f64 {
    0.5
}
fn default_test_fraction() -> f64 {
    0.25
}
fn default_size() -> usize {
    6
}

impl DatasetSpec {
    pub fn blobs(samples: usize) -> Self {
        Self { kind: DatasetKind::Blobs, samples, noise: default_noise(), test_fraction: default_test_fraction(), size: default_size() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.samples < 4 {
            return Err(Error::Config(format!("dataset needs at least 4 samples, got {}", self.samples)));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return Err(Error::Config(format!("noise {} must be non-negative", self.noise)));
        }
        if !(self.test_fraction > 0.0 && self.test_fraction < 1.0) {
            return Err(Error::Config(format!("test_fraction {} must lie in (0, 1)", self.test_fraction)));
        }
        if self.kind == DatasetKind::Bars && self.size < 2 {
            return Err(Error::Config("bars images need size >= 2".into()));
        }
        Ok(())
    }

    /// Per-sample input shape: `[features]` or `[C, H, W]`.
    pub fn input_shape(&self) -> Vec<usize> {
        match self.kind {
            DatasetKind::Blobs | DatasetKind::Spirals => vec![2],
            DatasetKind::Bars => vec![1, self.size, self.size],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub x: Vec<Vec<f64>>,
    pub y: Vec<usize>,
    pub classes: usize,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn features(&self) -> usize {
        self.x.first().map_or(0, Vec::len)
    }

    /// First `n_test` samples become the test split.
    pub fn split(&self, test_fraction: f64) -> (Dataset, Dataset) {
        let n_test = ((self.len() as f64 * test_fraction).round() as usize).clamp(1, self.len() - 1);
        let part = |r: std::ops::Range<usize>| Dataset { x: self.x[r.clone()].to_vec(), y: self.y[r].to_vec(), classes: self.classes };
        (part(n_test..self.len()), part(0..n_test))
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::new();
        for i in 0..self.features() {
            let _ = write!(s, "x{i},");
        }
        s.push_str("label\n");
        for (x, y) in self.x.iter().zip(&self.y) {
            for v in x {
                let _ = write!(s, "{v},");
            }
            let _ = writeln!(s, "{y}");
        }
        s
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| Error::Format("empty csv".into()))?;
        let cols = header.split(',').count();
        if cols < 2 || header.split(',').next_back() != Some("label") {
            return Err(Error::Format("csv header must end with `label`".into()));
        }
        let mut x = Vec::new();
        let mut y = Vec::new();
        for (n, line) in lines.enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != cols {
                return Err(Error::Format(format!("line {}: {} fields, expected {cols}", n + 2, fields.len())));
            }
            let parse = |f: &str| f.trim().parse::<f64>().map_err(|e| Error::Format(format!("line {}: {e}", n + 2)));
            x.push(fields[..cols - 1].iter().map(|f| parse(f)).collect::<Result<Vec<_>>>()?);
            y.push(fields[cols - 1].trim().parse::<usize>().map_err(|e| Error::Format(format!("line {}: {e}", n + 2)))?);
        }
        let classes = y.iter().max().map_or(0, |m| m + 1);
        Ok(Self { x, y, classes })
    }
}

/// Draws the dataset from its own stream of the master seed.
pub fn generate(spec: &DatasetSpec, seed: u64) -> Result<Dataset> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(0);
    let noise = Normal::new(0.0, spec.noise.max(f64::MIN_POSITIVE)).expect("valid normal");
    let mut x = Vec::with_capacity(spec.samples);
    let mut y = Vec::with_capacity(spec.samples);
    for _ in 0..spec.samples {
        let label = rng.random_range(0..2usize);
        let sample = match spec.kind {
            DatasetKind::Blobs => {
                let c = if label == 0 { -1.0 } else { 1.0 };
                vec![c + noise.sample(&mut rng), c + noise.sample(&mut rng)]
            }
            DatasetKind::Spirals => {
                let t: f64 = rng.random_range(0.25..1.0) * 3.0 * std::f64::consts::PI;
                let phase = label as f64 * std::f64::consts::PI;
                let r = t / (3.0 * std::f64::consts::PI) * 2.0;
                let jitter = 0.2 * spec.noise;
                vec![r * (t + phase).cos() + jitter * noise.sample(&mut rng), r * (t + phase).sin() + jitter * noise.sample(&mut rng)]
            }
            DatasetKind::Bars => {
                let n = spec.size;
                let at = rng.random_range(0..n);
                let mut img = vec![0.0; n * n];
                for (idx, px) in img.iter_mut().enumerate() {
                    let (r, c) = (idx / n, idx % n);
                    let on = if label == 0 { r == at } else { c == at };
                    *px = f64::from(u8::from(on)) + 0.3 * noise.sample(&mut rng);
                }
                img
            }
        };
        x.push(sample);
        y.push(label);
    }
    Ok(Dataset { x, y, classes: 2 })
}
