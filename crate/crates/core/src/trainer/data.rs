//! Procedural 16×16 grayscale datasets in [−1, 1].

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const IMAGE_SIZE: usize = 16;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum DatasetKind {
    /// One Gaussian bump at a random position and width.
    Blobs,
    /// One soft ring at a random position and radius.
    Rings,
    /// Disc, square or cross (labels 0, 1, 2, round-robin).
    Shapes3,
}

impl DatasetKind {
    pub const ALL: [Self; 3] = [Self::Blobs, Self::Rings, Self::Shapes3];

    pub fn name(self) -> &'static str {
        match self {
            Self::Blobs => "blobs",
            Self::Rings => "rings",
            Self::Shapes3 => "shapes3",
        }
    }

    pub fn classes(self) -> usize {
        match self {
            Self::Shapes3 => 3,
            _ => 0,
        }
    }
}

impl fmt::Display for DatasetKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for DatasetKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown dataset '{s}' (expected blobs, rings or shapes3)")))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub kind: DatasetKind,
    pub size: usize,
    /// Row-major `size × size` images.
    pub images: Vec<Vec<f64>>,
    pub labels: Option<Vec<usize>>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn classes(&self) -> usize {
        self.kind.classes()
    }
}

fn to_range(v: f64) -> f64 {
    (2.0 * v - 1.0).clamp(-1.0, 1.0)
}

fn blob<R: Rng>(rng: &mut R, s: usize) -> Vec<f64> {
    let cx = rng.gen_range(4.0..12.0);
    let cy = rng.gen_range(4.0..12.0);
    let sigma: f64 = rng.gen_range(1.5..3.0);
    pixels(s, |x, y| {
        let r2 = (x - cx).powi(2) + (y - cy).powi(2);
        (-r2 / (2.0 * sigma * sigma)).exp()
    })
}

fn ring<R: Rng>(rng: &mut R, s: usize) -> Vec<f64> {
    let cx = rng.gen_range(6.5..9.5);
    let cy = rng.gen_range(6.5..9.5);
    let r0 = rng.gen_range(3.0..6.0);
    pixels(s, |x, y| {
        let r = ((x - cx).powi(2) + (y - cy).powi(2)).sqrt();
        (-(r - r0).powi(2) / (2.0 * 0.8 * 0.8)).exp()
    })
}

/// Coverage with a one-pixel linear ramp at the edge; `dist` is negative inside.
fn soft(dist: f64) -> f64 {
    (0.5 - dist).clamp(0.0, 1.0)
}

fn shape<R: Rng>(rng: &mut R, s: usize, label: usize) -> Vec<f64> {
    let cx = rng.gen_range(6.0..10.0);
    let cy = rng.gen_range(6.0..10.0);
    match label {
        0 => {
            let r = rng.gen_range(2.5..4.5);
            pixels(s, |x, y| soft(((x - cx).powi(2) + (y - cy).powi(2)).sqrt() - r))
        }
        1 => {
            let h = rng.gen_range(2.0..4.0);
            pixels(s, |x, y| soft((x - cx).abs().max((y - cy).abs()) - h))
        }
        _ => {
            let arm = rng.gen_range(3.0..5.0);
            let half = rng.gen_range(0.75..1.25);
            pixels(s, |x, y| {
                let (dx, dy) = ((x - cx).abs(), (y - cy).abs());
                let horiz = (dx - arm).max(dy - half);
                let vert = (dy - arm).max(dx - half);
                soft(horiz.min(vert))
            })
        }
    }
}

fn pixels(s: usize, f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(s * s);
    for y in 0..s {
        for x in 0..s {
            out.push(to_range(f(x as f64 + 0.5, y as f64 + 0.5)));
        }
    }
    out
}

/// `n` images of `kind`, deterministic in `seed`.
pub fn gen_dataset(kind: DatasetKind, n: usize, seed: u64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s = IMAGE_SIZE;
    let mut images = Vec::with_capacity(n);
    let mut labels = Vec::new();
    for i in 0..n {
        let img = match kind {
            DatasetKind::Blobs => blob(&mut rng, s),
            DatasetKind::Rings => ring(&mut rng, s),
            DatasetKind::Shapes3 => {
                labels.push(i % 3);
                shape(&mut rng, s, i % 3)
            }
        };
        images.push(img);
    }
    Dataset {
        kind,
        size: s,
        images,
        labels: (kind == DatasetKind::Shapes3).then_some(labels),
    }
}

/// Mirror a row-major `size × size` image left to right.
pub fn hflip(img: &[f64], size: usize) -> Vec<f64> {
    img.chunks(size).flat_map(|row| row.iter().rev().copied()).collect()
}
