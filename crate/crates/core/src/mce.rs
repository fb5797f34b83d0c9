//! Minimum cross entropy (Li–Lee) thresholds of local environments.
//!
//! For a split `t` of a histogram `h` into `g < t` and `g >= t`, the objective
//! is
//!
//! ```text
//! D(t) = sum_{g<t} g h(g) ln(g / mu0(t)) + sum_{g>=t} g h(g) ln(g / mu1(t))
//! ```
//!
//! with `mu0`, `mu1` the class means and `0 ln 0 = 0`. Every `t` between two
//! consecutive occupied gray values yields the same split, so the minimizer is
//! reported as the smallest such `t`: one bin past the last gray value of the
//! lower class.

use ndarray::Array1;
use thiserror::Error;

use crate::volume::{Environment, Position};

#[derive(Debug, Error, PartialEq)]
pub enum MceError {
    #[error("histogram is empty")]
    EmptyHistogram,
    #[error("histogram needs at least 2 bins and a positive bin width")]
    InvalidHistogram,
    #[error("environment {index} centered at {center:?} is incomplete (border voxel)")]
    IncompleteEnvironment { index: usize, center: Position },
    #[error("global threshold {theta_g} outside [0, {max_value}]")]
    GlobalThresholdOutOfRange { theta_g: f64, max_value: u32 },
    #[error("no environments given")]
    NoEnvironments,
}

/// Counts per bin; bin `i` represents gray value `offset + width * i`.
#[derive(Debug, Clone, PartialEq)]
pub struct Histogram {
    offset: f64,
    width: f64,
    counts: Vec<u64>,
}

impl Histogram {
    pub fn new(offset: f64, width: f64, counts: Vec<u64>) -> Result<Self, MceError> {
        if counts.len() < 2 || width.is_nan() || width <= 0.0 || !offset.is_finite() {
            return Err(MceError::InvalidHistogram);
        }
        Ok(Self {
            offset,
            width,
            counts,
        })
    }

    /// Exact unit-width histogram covering `[min, max]` of `values`.
    pub fn exact(values: &[u16]) -> Result<Self, MceError> {
        let (Some(&lo), Some(&hi)) = (values.iter().min(), values.iter().max()) else {
            return Err(MceError::EmptyHistogram);
        };
        let bins = (hi - lo) as usize + 1;
        let mut counts = vec![0u64; bins.max(2)];
        for &v in values {
            counts[(v - lo) as usize] += 1;
        }
        Self::new(lo as f64, 1.0, counts)
    }

    /// Full-range histogram with one bin per representable value `0..=W`.
    pub fn full_range(values: &[u16], max_value: u32) -> Result<Self, MceError> {
        let mut counts = vec![0u64; max_value as usize + 1];
        for &v in values {
            counts[v as usize] += 1;
        }
        Self::new(0.0, 1.0, counts)
    }

    pub fn bin_count(&self) -> usize {
        self.counts.len()
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    #[inline]
    pub fn value_of_bin(&self, bin: usize) -> f64 {
        self.offset + self.width * bin as f64
    }
}

/// Result of thresholding one histogram.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MceThreshold {
    /// Threshold in gray units: values `>= threshold` form the upper class.
    pub threshold: f64,
    /// Bin index of the threshold.
    pub bin: usize,
    /// True when no two-class split exists (a single occupied gray value).
    pub degenerate: bool,
}

#[inline]
fn class_term(mass: f64, count: f64) -> f64 {
    // mass * ln(mean); a class holding only gray 0 contributes nothing.
    if mass > 0.0 {
        mass * (mass / count).ln()
    } else {
        0.0
    }
}

/// Minimum cross entropy threshold of `h`.
///
/// Scans every split between occupied bins using prefix sums. Since
/// `sum g h(g) ln g` does not depend on the split, minimizing `D(t)` is the
/// same as maximizing `m0 ln mu0 + m1 ln mu1` with `m` the first moments.
pub fn mce_threshold(h: &Histogram) -> Result<MceThreshold, MceError> {
    let occupied: Vec<(usize, f64, f64)> = h
        .counts
        .iter()
        .enumerate()
        .filter(|(_, &c)| c > 0)
        .map(|(i, &c)| (i, h.value_of_bin(i), c as f64))
        .collect();
    let Some(&(first_bin, first_gray, _)) = occupied.first() else {
        return Err(MceError::EmptyHistogram);
    };
    if occupied.len() == 1 {
        return Ok(MceThreshold {
            threshold: first_gray,
            bin: first_bin,
            degenerate: true,
        });
    }
    let total_count: f64 = occupied.iter().map(|o| o.2).sum();
    let total_mass: f64 = occupied.iter().map(|o| o.1 * o.2).sum();

    let mut below_count = 0.0;
    let mut below_mass = 0.0;
    let mut best: Option<(f64, usize)> = None;
    for &(bin, gray, count) in &occupied[..occupied.len() - 1] {
        below_count += count;
        below_mass += gray * count;
        let score = class_term(below_mass, below_count)
            + class_term(total_mass - below_mass, total_count - below_count);
        if best.is_none_or(|(s, _)| score > s) {
            best = Some((score, bin + 1));
        }
    }
    let (_, bin) = best.expect("at least one split");
    Ok(MceThreshold {
        threshold: h.value_of_bin(bin),
        bin,
        degenerate: false,
    })
}

/// MCE threshold of the actual values of a complete environment.
pub fn environment_threshold(env: &Environment) -> Result<MceThreshold, MceError> {
    mce_threshold(&Histogram::exact(env.values())?)
}

/// Per-environment thresholds, rejecting border (incomplete) environments.
pub fn local_thresholds(envs: &[Environment]) -> Result<Vec<MceThreshold>, MceError> {
    if envs.is_empty() {
        return Err(MceError::NoEnvironments);
    }
    envs.iter()
        .enumerate()
        .map(|(index, env)| {
            if !env.is_complete() {
                return Err(MceError::IncompleteEnvironment {
                    index,
                    center: env.center(),
                });
            }
            environment_threshold(env)
        })
        .collect()
}

pub fn check_global_threshold(theta_g: f64, max_value: u32) -> Result<(), MceError> {
    if (0.0..=max_value as f64).contains(&theta_g) {
        Ok(())
    } else {
        Err(MceError::GlobalThresholdOutOfRange { theta_g, max_value })
    }
}

/// Training targets `theta*(U_j) - theta_g`.
pub fn build_targets(envs: &[Environment], theta_g: f64) -> Result<Array1<f64>, MceError> {
    let thresholds = local_thresholds(envs)?;
    check_global_threshold(theta_g, envs[0].max_value())?;
    Ok(targets_from_thresholds(&thresholds, theta_g))
}

pub fn targets_from_thresholds(thresholds: &[MceThreshold], theta_g: f64) -> Array1<f64> {
    thresholds.iter().map(|t| t.threshold - theta_g).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    /// The objective evaluated literally, split at bin `t`.
    fn naive_objective(h: &Histogram, t: usize) -> f64 {
        let mean = |range: std::ops::Range<usize>| {
            let (mut n, mut m) = (0.0, 0.0);
            for b in range {
                n += h.counts()[b] as f64;
                m += h.value_of_bin(b) * h.counts()[b] as f64;
            }
            m / n
        };
        let mu0 = mean(0..t);
        let mu1 = mean(t..h.bin_count());
        let mut d = 0.0;
        for b in 0..h.bin_count() {
            let g = h.value_of_bin(b);
            let c = h.counts()[b] as f64;
            if c == 0.0 || g == 0.0 {
                continue;
            }
            let mu = if b < t { mu0 } else { mu1 };
            d += g * c * (g / mu).ln();
        }
        d
    }

    fn brute_force(h: &Histogram) -> usize {
        let first = h.counts().iter().position(|&c| c > 0).unwrap();
        let last = h.counts().iter().rposition(|&c| c > 0).unwrap();
        let mut best = (f64::INFINITY, first);
        for t in first + 1..=last {
            let d = naive_objective(h, t);
            if d < best.0 {
                best = (d, t);
            }
        }
        best.1
    }

    #[test]
    fn two_spikes() {
        let mut counts = vec![0u64; 16];
        counts[2] = 10;
        counts[8] = 10;
        let h = Histogram::new(0.0, 1.0, counts).unwrap();
        let t = mce_threshold(&h).unwrap();
        assert!(t.threshold > 2.0 && t.threshold < 8.0);
        assert_eq!(t.bin, brute_force(&h));
        assert_eq!(t.threshold, 3.0);
    }

    #[test]
    fn single_value_is_its_own_threshold() {
        let h = Histogram::exact(&[5; 27]).unwrap();
        let t = mce_threshold(&h).unwrap();
        assert_eq!(t.threshold, 5.0);
        assert!(t.degenerate);
        let h = Histogram::full_range(&[5; 27], 255).unwrap();
        assert_eq!(mce_threshold(&h).unwrap().threshold, 5.0);
    }

    #[test]
    fn empty_and_invalid() {
        let h = Histogram::new(0.0, 1.0, vec![0; 4]).unwrap();
        assert_eq!(mce_threshold(&h), Err(MceError::EmptyHistogram));
        assert_eq!(Histogram::exact(&[]), Err(MceError::EmptyHistogram));
        assert_eq!(Histogram::new(0.0, 1.0, vec![1]), Err(MceError::InvalidHistogram));
        assert_eq!(Histogram::new(0.0, 0.0, vec![1, 1]), Err(MceError::InvalidHistogram));
    }

    #[test]
    fn zero_gray_values() {
        // Gray 0 carries no mass; the split must still separate it.
        let mut counts = vec![0u64; 10];
        counts[0] = 50;
        counts[9] = 5;
        let h = Histogram::new(0.0, 1.0, counts).unwrap();
        let t = mce_threshold(&h).unwrap();
        assert_eq!(t.bin, 1);
        assert_eq!(t.bin, brute_force(&h));
    }

    #[test]
    fn exact_histogram_offsets() {
        let values = [1000u16, 1000, 1001, 1400, 1402, 1402];
        let h = Histogram::exact(&values).unwrap();
        assert_eq!(h.value_of_bin(0), 1000.0);
        let t = mce_threshold(&h).unwrap();
        assert_eq!(t.threshold, 1002.0);
        let full = Histogram::full_range(&values, 65535).unwrap();
        assert_eq!(mce_threshold(&full).unwrap().threshold, 1002.0);
    }

    #[test]
    fn targets() {
        let env = |v: Vec<u16>| Environment::from_values(3, v, 65535).unwrap();
        let mut a = vec![1000u16; 27];
        a[..10].fill(1400);
        let theta = environment_threshold(&env(a.clone())).unwrap().threshold;
        let t = build_targets(&[env(a.clone())], theta).unwrap();
        assert_eq!(t.to_vec(), vec![0.0]);

        let mut b = vec![1190u16; 27];
        b[..13].fill(1200);
        b[0] = 1250;
        let theta_b = environment_threshold(&env(b.clone())).unwrap().threshold;
        let t = build_targets(&[env(b), env(a)], 1541.0).unwrap();
        assert_eq!(t.len(), 2);
        assert_eq!(t[0], theta_b - 1541.0);

        let mut c = vec![1199u16; 27];
        c[..9].fill(1300);
        let tc = environment_threshold(&env(c.clone())).unwrap();
        assert_eq!(tc.threshold, 1200.0);
        assert_eq!(build_targets(&[env(c)], 1541.0).unwrap()[0], -341.0);
    }

    #[test]
    fn targets_reject_border_and_bad_theta() {
        let border = Environment::empty(3, 255).unwrap();
        assert!(matches!(
            build_targets(&[border], 10.0),
            Err(MceError::IncompleteEnvironment { index: 0, .. })
        ));
        let ok = Environment::from_values(3, vec![4; 27], 255).unwrap();
        assert!(matches!(
            build_targets(&[ok], 300.0),
            Err(MceError::GlobalThresholdOutOfRange { .. })
        ));
        assert_eq!(build_targets(&[], 1.0), Err(MceError::NoEnvironments));
    }
}
