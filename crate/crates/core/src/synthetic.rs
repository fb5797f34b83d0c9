//! Synthetic test volume with known ground truth: a bright sphere and a faint
//! one-voxel-thick sheet on a noisy background.
//!
//! A global threshold between background and sphere misses the sheet; an
//! adaptive threshold that drops on planar windows recovers it.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::volume::{Dtype, Position, Volume, VolumeError};

#[derive(Debug, thiserror::Error)]
pub enum PhantomError {
    #[error("phantom size must be at least 16, got {0}")]
    TooSmall(usize),
    #[error("noise sigma must be finite and nonnegative, got {0}")]
    InvalidNoise(f64),
    #[error(transparent)]
    Volume(#[from] VolumeError),
}

/// Ground-truth class of a voxel.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[repr(u8)]
pub enum Label {
    Background = 0,
    Blob = 1,
    Plane = 2,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhantomSpec {
    /// Edge length of the cube.
    pub size: usize,
    pub dtype: Dtype,
    pub background: f64,
    pub noise_sigma: f64,
    pub blob_value: u16,
    pub plane_value: u16,
    pub seed: u64,
}

impl PhantomSpec {
    /// 8-bit cube: background 50 with noise sigma 5, sphere 200, sheet 90.
    pub fn uint8(size: usize) -> Self {
        Self {
            size,
            dtype: Dtype::Uint8,
            background: 50.0,
            noise_sigma: 5.0,
            blob_value: 200,
            plane_value: 90,
            seed: 7,
        }
    }
}

#[derive(Debug)]
pub struct Phantom {
    pub spec: PhantomSpec,
    pub volume: Volume,
    /// One [`Label`] per voxel, raster order.
    pub labels: Vec<Label>,
    /// z-index of the sheet.
    pub plane_z: usize,
    /// Half-open x and y extent of the sheet.
    pub plane_extent: [std::ops::Range<usize>; 2],
}

impl Phantom {
    pub fn generate(spec: PhantomSpec) -> Result<Self, PhantomError> {
        let n = spec.size;
        if n < 16 {
            return Err(PhantomError::TooSmall(n));
        }
        let plane_z = 5 * n / 8;
        let extent = n / 4..3 * n / 4;
        let center = [n as f64 / 2.0, n as f64 / 2.0, n as f64 / 4.0];
        let radius = n as f64 / 8.0;

        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let noise = Normal::new(0.0, spec.noise_sigma)
            .map_err(|_| PhantomError::InvalidNoise(spec.noise_sigma))?;
        let top = spec.dtype.max_value() as f64;
        let mut values = Vec::with_capacity(n * n * n);
        let mut labels = Vec::with_capacity(n * n * n);
        for z in 0..n {
            for y in 0..n {
                for x in 0..n {
                    let d2 = [x, y, z]
                        .iter()
                        .zip(center)
                        .map(|(&p, c)| (p as f64 + 0.5 - c).powi(2))
                        .sum::<f64>();
                    let (label, value) = if d2 <= radius * radius {
                        (Label::Blob, spec.blob_value)
                    } else if z == plane_z && extent.contains(&x) && extent.contains(&y) {
                        (Label::Plane, spec.plane_value)
                    } else {
                        let v = spec.background + noise.sample(&mut rng);
                        (Label::Background, v.round().clamp(0.0, top) as u16)
                    };
                    labels.push(label);
                    values.push(value);
                }
            }
        }
        let volume = Volume::from_values([n; 3], spec.dtype, &values)?;
        Ok(Self {
            spec,
            volume,
            labels,
            plane_z,
            plane_extent: [extent.clone(), extent],
        })
    }

    pub fn label(&self, p: Position) -> Label {
        self.labels[self.volume.meta().index(p)]
    }

    /// `count` distinct sheet voxels on a regular grid spanning the whole
    /// sheet, rim and corners included.
    pub fn plane_seeds(&self, count: usize) -> Vec<Position> {
        let [xs, ys] = &self.plane_extent;
        let side = ((count as f64).sqrt().ceil() as usize).max(2);
        let at = |r: &std::ops::Range<usize>, i: usize| r.start + i * (r.len() - 1) / (side - 1);
        let mut seeds: Vec<Position> = (0..side)
            .flat_map(|j| (0..side).map(move |i| (i, j)))
            .map(|(i, j)| [at(xs, i), at(ys, j), self.plane_z])
            .take(count)
            .collect();
        seeds.sort_unstable();
        seeds.dedup();
        seeds
    }
}

/// Recall on the sheet and false-positive rate on the background of a binary
/// output (one byte per voxel, nonzero = foreground).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PhantomScore {
    pub plane_recall: f64,
    pub blob_recall: f64,
    pub background_fpr: f64,
}

pub fn score(labels: &[Label], output: &[u8]) -> PhantomScore {
    assert_eq!(labels.len(), output.len());
    let mut hits = [0u64; 3];
    let mut totals = [0u64; 3];
    for (&l, &o) in labels.iter().zip(output) {
        totals[l as usize] += 1;
        hits[l as usize] += (o != 0) as u64;
    }
    let ratio = |i: usize| hits[i] as f64 / totals[i].max(1) as f64;
    PhantomScore {
        plane_recall: ratio(Label::Plane as usize),
        blob_recall: ratio(Label::Blob as usize),
        background_fpr: ratio(Label::Background as usize),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layout() {
        let p = Phantom::generate(PhantomSpec::uint8(32)).unwrap();
        assert_eq!(p.plane_z, 20);
        assert_eq!(p.label([16, 16, 20]), Label::Plane);
        assert_eq!(p.volume.get([16, 16, 20]), 90);
        assert_eq!(p.label([16, 16, 8]), Label::Blob);
        assert_eq!(p.label([1, 1, 1]), Label::Background);
        let seeds = p.plane_seeds(25);
        assert_eq!(seeds.len(), 25);
        assert!(seeds.contains(&[8, 8, 20]) && seeds.contains(&[23, 23, 20]));
        for s in seeds {
            assert_eq!(p.label(s), Label::Plane);
            assert!(p.volume.meta().window_fits(s, 5));
        }
    }

    #[test]
    fn deterministic() {
        let a = Phantom::generate(PhantomSpec::uint8(16)).unwrap();
        let b = Phantom::generate(PhantomSpec::uint8(16)).unwrap();
        assert_eq!(a.volume.bytes(), b.volume.bytes());
    }
}
