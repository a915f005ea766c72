use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{DatasetTable, Item};
use crate::error::{Error, Result};

/// Gaussian class clusters with a controllable domain shift.
///
/// The first `dim - nuisance_dims` coordinates carry the class signal:
/// centres are `separation * N(0, I)` and samples add `noise * N(0, I)`.
/// The remaining nuisance coordinates hold `nuisance_scale * N(0, I)` and no
/// class information. A shift of magnitude `s` maps every sample through
/// `x -> R(theta) x + s * separation * u`, where `u` is a seeded unit vector
/// and `R` rotates by `theta = min(s, 1) * pi / 2` in the coordinate planes
/// that pair each signal axis with a nuisance axis (or with its neighbour
/// when there are no nuisance axes). Centres, samples and `u` depend only on
/// `seed`, so tables that differ only in `shift` hold the same underlying
/// draws.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShiftConfig {
    pub classes: usize,
    pub samples_per_class: usize,
    pub dim: usize,
    pub separation: f64,
    pub shift: f64,
    pub noise: f64,
    #[serde(default)]
    pub nuisance_dims: usize,
    #[serde(default)]
    pub nuisance_scale: f64,
    pub seed: u64,
}

impl Default for ShiftConfig {
    fn default() -> Self {
        ShiftConfig {
            classes: 20,
            samples_per_class: 30,
            dim: 16,
            separation: 10.0,
            shift: 0.0,
            noise: 0.1,
            nuisance_dims: 0,
            nuisance_scale: 0.0,
            seed: 0,
        }
    }
}

impl ShiftConfig {
    /// 40 classes in 16 dimensions, half of them nuisance coordinates at the
    /// scale of the class separation. Classes 0..20 serve as base classes and
    /// 20..40 as novel classes.
    pub fn benchmark() -> Self {
        ShiftConfig {
            classes: 40,
            samples_per_class: 30,
            dim: 16,
            separation: 10.0,
            shift: 0.0,
            noise: 0.1,
            nuisance_dims: 8,
            nuisance_scale: 10.0,
            seed: 3,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes == 0 || self.samples_per_class == 0 || self.dim == 0 {
            return Err(Error::Config("classes, samples per class and dimension must be positive".into()));
        }
        if !(self.separation > 0.0) {
            return Err(Error::Config("cluster separation must be positive".into()));
        }
        if !(self.shift >= 0.0) || !(self.noise >= 0.0) || !(self.nuisance_scale >= 0.0) {
            return Err(Error::Config("shift, noise and nuisance scale must be non-negative".into()));
        }
        if self.nuisance_dims >= self.dim {
            return Err(Error::Config("at least one coordinate must carry class signal".into()));
        }
        Ok(())
    }

    fn signal_dims(&self) -> usize {
        self.dim - self.nuisance_dims
    }

    /// Coordinate pairs rotated by the domain shift.
    fn rotation_planes(&self) -> Vec<(usize, usize)> {
        let s = self.signal_dims();
        if self.nuisance_dims > 0 {
            (0..s.min(self.nuisance_dims)).map(|i| (i, s + i)).collect()
        } else {
            (0..self.dim / 2).map(|i| (2 * i, 2 * i + 1)).collect()
        }
    }
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample(StandardNormal)
}

/// Generates the domain described by `cfg`; `shift = 0` is the source domain.
pub fn synth_task_domain(cfg: &ShiftConfig) -> Result<DatasetTable> {
    cfg.validate()?;
    let signal = cfg.signal_dims();

    let mut centre_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    centre_rng.set_stream(0);
    let centres: Vec<Vec<f64>> = (0..cfg.classes)
        .map(|_| (0..signal).map(|_| cfg.separation * normal(&mut centre_rng)).collect())
        .collect();

    let mut shift_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    shift_rng.set_stream(1);
    let mut direction: Vec<f64> = (0..cfg.dim).map(|_| normal(&mut shift_rng)).collect();
    let norm = direction.iter().map(|x| x * x).sum::<f64>().sqrt();
    for x in &mut direction {
        *x /= norm;
    }

    let theta = cfg.shift.min(1.0) * std::f64::consts::FRAC_PI_2;
    let (sin, cos) = theta.sin_cos();
    let planes = cfg.rotation_planes();
    let translation = cfg.shift * cfg.separation;

    let domain = format!("synth-shift{}", cfg.shift);
    let mut sample_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    sample_rng.set_stream(2);
    let mut items = Vec::with_capacity(cfg.classes * cfg.samples_per_class);
    for (label, centre) in centres.iter().enumerate() {
        for _ in 0..cfg.samples_per_class {
            let mut x: Vec<f64> = Vec::with_capacity(cfg.dim);
            for c in centre {
                x.push(c + cfg.noise * normal(&mut sample_rng));
            }
            for _ in signal..cfg.dim {
                x.push(cfg.nuisance_scale * normal(&mut sample_rng));
            }
            if cfg.shift > 0.0 {
                for &(a, b) in &planes {
                    let (xa, xb) = (x[a], x[b]);
                    x[a] = cos * xa - sin * xb;
                    x[b] = sin * xa + cos * xb;
                }
                for (v, u) in x.iter_mut().zip(&direction) {
                    *v += translation * u;
                }
            }
            items.push(Item {
                input: x,
                label,
                domain: domain.clone(),
            });
        }
    }
    let names = (0..cfg.classes).map(|c| c.to_string()).collect();
    DatasetTable::new(items, names, domain, vec![cfg.dim])
}
