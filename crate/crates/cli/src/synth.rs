//! Labelled clouds sampled from analytic surfaces.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use slnet_core::geom::Labels;
use slnet_core::{Point, PointCloud};

use crate::error::{CliError, Result};

/// Tube radius of the torus relative to its ring radius of 1.
const TORUS_TUBE: f64 = 0.35;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Shape {
    Sphere,
    Cube,
    Cylinder,
    Torus,
    Cone,
}

impl Shape {
    pub const ALL: [Shape; 5] = [Shape::Sphere, Shape::Cube, Shape::Cylinder, Shape::Torus, Shape::Cone];

    pub fn name(self) -> &'static str {
        match self {
            Shape::Sphere => "sphere",
            Shape::Cube => "cube",
            Shape::Cylinder => "cylinder",
            Shape::Torus => "torus",
            Shape::Cone => "cone",
        }
    }

    /// One point drawn uniformly by area from the unit-sized surface.
    pub fn sample(self, rng: &mut impl Rng) -> Point<f64> {
        match self {
            Shape::Sphere => loop {
                let v: Point<f64> = std::array::from_fn(|_| StandardNormal.sample(rng));
                let r = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                if r > 1e-12 {
                    break v.map(|x| x / r);
                }
            },
            Shape::Cube => {
                let face = rng.random_range(0..6);
                let (u, w) = (rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
                let side = if face % 2 == 0 { 1.0 } else { -1.0 };
                match face / 2 {
                    0 => [side, u, w],
                    1 => [u, side, w],
                    _ => [u, w, side],
                }
            }
            Shape::Cylinder => {
                // Lateral area 4π against 2π for both caps.
                let theta = rng.random_range(0.0..2.0 * PI);
                if rng.random_range(0.0..3.0) < 2.0 {
                    [theta.cos(), theta.sin(), rng.random_range(-1.0..1.0)]
                } else {
                    let r = rng.random::<f64>().sqrt();
                    let z = if rng.random::<bool>() { 1.0 } else { -1.0 };
                    [r * theta.cos(), r * theta.sin(), z]
                }
            }
            Shape::Torus => loop {
                let (u, v) = (rng.random_range(0.0..2.0 * PI), rng.random_range(0.0..2.0 * PI));
                let weight = (1.0 + TORUS_TUBE * v.cos()) / (1.0 + TORUS_TUBE);
                if rng.random::<f64>() < weight {
                    let ring = 1.0 + TORUS_TUBE * v.cos();
                    break [ring * u.cos(), ring * u.sin(), TORUS_TUBE * v.sin()];
                }
            },
            Shape::Cone => {
                // Base radius 1, height 2: slant area π·√5 against π for the base.
                let theta = rng.random_range(0.0..2.0 * PI);
                let slant = 5f64.sqrt();
                if rng.random_range(0.0..slant + 1.0) < slant {
                    let r = rng.random::<f64>().sqrt();
                    [r * theta.cos(), r * theta.sin(), 1.0 - 2.0 * r]
                } else {
                    let r = rng.random::<f64>().sqrt();
                    [r * theta.cos(), r * theta.sin(), -1.0]
                }
            }
        }
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Shape {
    type Err = CliError;

    fn from_str(s: &str) -> Result<Self> {
        Shape::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| CliError::Usage(format!("unknown shape class `{s}`")))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthSpec {
    pub classes: Vec<Shape>,
    pub n_points: usize,
    pub per_class: usize,
    /// Standard deviation of the Gaussian jitter, in surface units.
    pub noise: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            classes: vec![Shape::Sphere, Shape::Cube, Shape::Cylinder, Shape::Torus],
            n_points: 256,
            per_class: 125,
            noise: 0.01,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthDataset {
    pub class_names: Vec<String>,
    pub train: Vec<PointCloud>,
    pub test: Vec<PointCloud>,
}

/// `n` jittered surface points of `shape`, before normalization.
pub fn sample_surface(shape: Shape, n: usize, noise: f64, rng: &mut impl Rng) -> Result<Vec<Point<f64>>> {
    let jitter = Normal::new(0.0, noise).map_err(|e| CliError::Usage(format!("noise {noise}: {e}")))?;
    Ok((0..n)
        .map(|_| shape.sample(rng).map(|v| v + jitter.sample(rng)))
        .collect())
}

/// Samples every class, normalizes each cloud to the unit sphere and
/// splits 80/20 after a seeded shuffle.
pub fn synth_generate(spec: &SynthSpec) -> Result<SynthDataset> {
    if spec.n_points < 64 {
        return Err(CliError::Usage(format!("n_points {} below 64", spec.n_points)));
    }
    if spec.classes.is_empty() || spec.per_class == 0 {
        return Err(CliError::Usage(
            "synthetic dataset needs classes and a per-class count".into(),
        ));
    }
    if !(spec.noise >= 0.0 && spec.noise.is_finite()) {
        return Err(CliError::Usage(format!("noise {} must be nonnegative", spec.noise)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut clouds = Vec::with_capacity(spec.classes.len() * spec.per_class);
    for (label, &shape) in spec.classes.iter().enumerate() {
        for _ in 0..spec.per_class {
            let pts = sample_surface(shape, spec.n_points, spec.noise, &mut rng)?;
            let cloud = PointCloud::new(pts.iter().map(|p| p.map(|v| v as f32)).collect())?
                .with_labels(Labels::Cloud(label))?
                .normalized();
            clouds.push(cloud);
        }
    }
    clouds.shuffle(&mut rng);
    let n_test = clouds.len() / 5;
    let test = clouds.split_off(clouds.len() - n_test);
    Ok(SynthDataset {
        class_names: spec.classes.iter().map(|s| s.name().to_string()).collect(),
        train: clouds,
        test,
    })
}
