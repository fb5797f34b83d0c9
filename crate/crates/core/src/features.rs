//! Feature functions mapping a local environment to a small real vector.
//!
//! The default pair describes the local geometry through the eigenvalues
//! `l1 >= l2 >= l3 >= 0` of the gradient structure tensor of the window:
//!
//! * planarity `(l1 - l2) / l1`: one dominant gradient direction, as across a
//!   thin sheet;
//! * linearity `(l2 - l3) / l1`: two dominant directions, as around a thin
//!   tube or line.
//!
//! Both lie in `[0, 1]`. Two optional statistical features (normalized mean
//! and standard deviation) are registered but not selected by default.

use std::fmt;
use std::str::FromStr;

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::volume::{check_env_size, Environment};

#[derive(Debug, Error, PartialEq)]
pub enum FeatureError {
    #[error("unknown feature {0:?} (known: linearity, planarity, mean, stddev)")]
    UnknownFeature(String),
    #[error("feature list is empty")]
    NoFeatures,
    #[error("feature {0:?} selected twice")]
    Duplicate(FeatureKind),
    #[error("environment size {env} does not match configured size {config}")]
    SizeMismatch { env: usize, config: usize },
    #[error("no environments given")]
    Empty,
    #[error("invalid environment size {0}")]
    InvalidEnvSize(usize),
}

/// Registered features. Each yields one scalar.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FeatureKind {
    Linearity,
    Planarity,
    Mean,
    #[serde(rename = "stddev")]
    StdDev,
}

impl FeatureKind {
    pub const ALL: [FeatureKind; 4] = [
        FeatureKind::Linearity,
        FeatureKind::Planarity,
        FeatureKind::Mean,
        FeatureKind::StdDev,
    ];

    pub fn name(self) -> &'static str {
        match self {
            FeatureKind::Linearity => "linearity",
            FeatureKind::Planarity => "planarity",
            FeatureKind::Mean => "mean",
            FeatureKind::StdDev => "stddev",
        }
    }

    fn needs_tensor(self) -> bool {
        matches!(self, FeatureKind::Linearity | FeatureKind::Planarity)
    }
}

impl fmt::Display for FeatureKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for FeatureKind {
    type Err = FeatureError;

    fn from_str(s: &str) -> Result<Self, FeatureError> {
        FeatureKind::ALL
            .into_iter()
            .find(|k| k.name() == s.trim().to_ascii_lowercase())
            .ok_or_else(|| FeatureError::UnknownFeature(s.to_string()))
    }
}

/// Ordered feature selection plus the environment size it expects.
///
/// The order is part of the trained model: weight `i` belongs to feature `i`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureConfig {
    features: Vec<FeatureKind>,
    env_size: usize,
}

impl FeatureConfig {
    pub fn new(features: Vec<FeatureKind>, env_size: usize) -> Result<Self, FeatureError> {
        if features.is_empty() {
            return Err(FeatureError::NoFeatures);
        }
        for (i, f) in features.iter().enumerate() {
            if features[..i].contains(f) {
                return Err(FeatureError::Duplicate(*f));
            }
        }
        check_env_size(env_size).map_err(|_| FeatureError::InvalidEnvSize(env_size))?;
        Ok(Self { features, env_size })
    }

    /// Linearity and planarity, in that order.
    pub fn geometric(env_size: usize) -> Result<Self, FeatureError> {
        Self::new(vec![FeatureKind::Linearity, FeatureKind::Planarity], env_size)
    }

    /// Parses a comma-separated list such as `"linearity,planarity"`.
    pub fn parse(list: &str, env_size: usize) -> Result<Self, FeatureError> {
        let features = list
            .split(',')
            .filter(|s| !s.trim().is_empty())
            .map(str::parse)
            .collect::<Result<Vec<_>, _>>()?;
        Self::new(features, env_size)
    }

    pub fn features(&self) -> &[FeatureKind] {
        &self.features
    }

    pub fn names(&self) -> Vec<String> {
        self.features.iter().map(|f| f.name().to_string()).collect()
    }

    pub fn env_size(&self) -> usize {
        self.env_size
    }

    pub fn dim(&self) -> usize {
        self.features.len()
    }
}

/// Eigenvalues of the gradient structure tensor, descending.
pub fn structure_tensor_eigenvalues(env: &Environment) -> [f64; 3] {
    symmetric_eigenvalues(&structure_tensor(env))
}

/// Sum of gradient outer products over the window, as
/// `[xx, yy, zz, xy, xz, yz]`.
///
/// Gradients use central differences inside the window and one-sided
/// differences on its faces.
pub fn structure_tensor(env: &Environment) -> [f64; 6] {
    let k = env.size();
    let v = env.values();
    let idx = |x: usize, y: usize, z: usize| x + k * (y + k * z);
    let diff = |c: usize, step: usize, base: usize| -> f64 {
        // `base` is the index of the voxel, `step` the stride along the axis.
        if c == 0 {
            v[base + step] as f64 - v[base] as f64
        } else if c == k - 1 {
            v[base] as f64 - v[base - step] as f64
        } else {
            0.5 * (v[base + step] as f64 - v[base - step] as f64)
        }
    };
    let mut t = [0.0; 6];
    for z in 0..k {
        for y in 0..k {
            for x in 0..k {
                let i = idx(x, y, z);
                let gx = diff(x, 1, i);
                let gy = diff(y, k, i);
                let gz = diff(z, k * k, i);
                t[0] += gx * gx;
                t[1] += gy * gy;
                t[2] += gz * gz;
                t[3] += gx * gy;
                t[4] += gx * gz;
                t[5] += gy * gz;
            }
        }
    }
    t
}

/// Closed-form eigenvalues of a symmetric positive semidefinite 3x3 matrix
/// given as `[xx, yy, zz, xy, xz, yz]`, sorted descending and clamped at 0.
pub fn symmetric_eigenvalues(a: &[f64; 6]) -> [f64; 3] {
    let [a00, a11, a22, a01, a02, a12] = *a;
    let off = a01 * a01 + a02 * a02 + a12 * a12;
    let mut e = if off == 0.0 {
        [a00, a11, a22]
    } else {
        let q = (a00 + a11 + a22) / 3.0;
        let (b00, b11, b22) = (a00 - q, a11 - q, a22 - q);
        let p2 = b00 * b00 + b11 * b11 + b22 * b22 + 2.0 * off;
        let p = (p2 / 6.0).sqrt();
        if p == 0.0 {
            [q, q, q]
        } else {
            let det = b00 * (b11 * b22 - a12 * a12) - a01 * (a01 * b22 - a12 * a02)
                + a02 * (a01 * a12 - b11 * a02);
            let r = (det / (2.0 * p * p * p)).clamp(-1.0, 1.0);
            let phi = r.acos() / 3.0;
            let e1 = q + 2.0 * p * phi.cos();
            let e3 = q + 2.0 * p * (phi + 2.0 * std::f64::consts::FRAC_PI_3).cos();
            [e1, 3.0 * q - e1 - e3, e3]
        }
    };
    e.sort_by(|x, y| y.total_cmp(x));
    e.map(|x| x.max(0.0))
}

/// Shape measures derived from descending eigenvalues.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Shape {
    pub linearity: f64,
    pub planarity: f64,
}

/// `l1` below this fraction of `W^2 K^3` counts as a zero tensor.
pub const DEGENERATE_TENSOR_RATIO: f64 = 1e-12;

pub fn shape_measures(eig: [f64; 3], max_value: u32, env_size: usize) -> Shape {
    let [l1, l2, l3] = eig;
    let w = max_value as f64;
    let floor = DEGENERATE_TENSOR_RATIO * w * w * (env_size as f64).powi(3);
    if l1.is_nan() || l1 < floor || l1 == 0.0 {
        return Shape {
            linearity: 0.0,
            planarity: 0.0,
        };
    }
    Shape {
        linearity: ((l2 - l3) / l1).clamp(0.0, 1.0),
        planarity: ((l1 - l2) / l1).clamp(0.0, 1.0),
    }
}

fn moments(env: &Environment) -> (f64, f64) {
    let n = env.values().len() as f64;
    let mean = env.values().iter().map(|&v| v as f64).sum::<f64>() / n;
    let var = env
        .values()
        .iter()
        .map(|&v| {
            let d = v as f64 - mean;
            d * d
        })
        .sum::<f64>()
        / n;
    (mean, var.sqrt())
}

/// Writes the configured features of `env` into `out` (length `cfg.dim()`).
pub fn compute_features_into(
    env: &Environment,
    cfg: &FeatureConfig,
    out: &mut [f64],
) -> Result<(), FeatureError> {
    if env.size() != cfg.env_size {
        return Err(FeatureError::SizeMismatch {
            env: env.size(),
            config: cfg.env_size,
        });
    }
    assert_eq!(out.len(), cfg.dim(), "output buffer length");
    let shape = if cfg.features.iter().any(|f| f.needs_tensor()) {
        Some(shape_measures(
            structure_tensor_eigenvalues(env),
            env.max_value(),
            env.size(),
        ))
    } else {
        None
    };
    let stats = if cfg.features.iter().any(|f| !f.needs_tensor()) {
        Some(moments(env))
    } else {
        None
    };
    let w = env.max_value().max(1) as f64;
    for (slot, kind) in out.iter_mut().zip(&cfg.features) {
        *slot = match kind {
            FeatureKind::Linearity => shape.map_or(0.0, |s| s.linearity),
            FeatureKind::Planarity => shape.map_or(0.0, |s| s.planarity),
            FeatureKind::Mean => stats.map_or(0.0, |s| s.0 / w),
            FeatureKind::StdDev => stats.map_or(0.0, |s| s.1 / w),
        };
    }
    Ok(())
}

pub fn compute_features(env: &Environment, cfg: &FeatureConfig) -> Result<Vec<f64>, FeatureError> {
    let mut out = vec![0.0; cfg.dim()];
    compute_features_into(env, cfg, &mut out)?;
    Ok(out)
}

/// Stacks the feature vectors of `envs` into an `M x d` matrix.
pub fn build_feature_matrix(
    envs: &[Environment],
    cfg: &FeatureConfig,
) -> Result<Array2<f64>, FeatureError> {
    if envs.is_empty() {
        return Err(FeatureError::Empty);
    }
    let mut m = Array2::zeros((envs.len(), cfg.dim()));
    for (env, mut row) in envs.iter().zip(m.rows_mut()) {
        let slice = row.as_slice_mut().expect("rows of a standard layout array are contiguous");
        compute_features_into(env, cfg, slice)?;
    }
    Ok(m)
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::{Matrix3, SymmetricEigen};

    fn env_from(k: usize, f: impl Fn(usize, usize, usize) -> u16) -> Environment {
        let mut values = Vec::with_capacity(k * k * k);
        for z in 0..k {
            for y in 0..k {
                for x in 0..k {
                    values.push(f(x, y, z));
                }
            }
        }
        Environment::from_values(k, values, 255).unwrap()
    }

    fn dense_eigenvalues(t: &[f64; 6]) -> [f64; 3] {
        let m = Matrix3::new(t[0], t[3], t[4], t[3], t[1], t[5], t[4], t[5], t[2]);
        let mut e: Vec<f64> = SymmetricEigen::new(m).eigenvalues.iter().copied().collect();
        e.sort_by(|a, b| b.total_cmp(a));
        [e[0].max(0.0), e[1].max(0.0), e[2].max(0.0)]
    }

    #[test]
    fn constant_environment_is_degenerate() {
        let env = env_from(5, |_, _, _| 77);
        let cfg = FeatureConfig::geometric(5).unwrap();
        assert_eq!(compute_features(&env, &cfg).unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn incomplete_environment_is_zero() {
        let env = Environment::empty(3, 255).unwrap();
        let cfg = FeatureConfig::new(FeatureKind::ALL.to_vec(), 3).unwrap();
        assert_eq!(compute_features(&env, &cfg).unwrap(), vec![0.0; 4]);
    }

    #[test]
    fn plane_is_planar() {
        let env = env_from(7, |x, _, _| if x == 3 { 200 } else { 20 });
        let t = structure_tensor(&env);
        let eig = dense_eigenvalues(&t);
        let s = shape_measures(eig, 255, 7);
        assert!(s.planarity > s.linearity, "{s:?}");
        let cfg = FeatureConfig::geometric(7).unwrap();
        let f = compute_features(&env, &cfg).unwrap();
        assert!((f[0] - s.linearity).abs() < 1e-12 && (f[1] - s.planarity).abs() < 1e-12);
        assert!(f[1] > 0.99);
    }

    #[test]
    fn line_is_linear() {
        let env = env_from(7, |x, y, _| if x == 3 && y == 3 { 200 } else { 20 });
        let eig = dense_eigenvalues(&structure_tensor(&env));
        let s = shape_measures(eig, 255, 7);
        assert!(s.linearity > s.planarity, "{s:?}");
        let f = compute_features(&env, &FeatureConfig::geometric(7).unwrap()).unwrap();
        assert!(f[0] > f[1]);
    }

    #[test]
    fn closed_form_matches_dense_solver() {
        let mut state = 12345u64;
        let mut next = || {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((state >> 33) % 256) as u16
        };
        for _ in 0..200 {
            let values: Vec<u16> = (0..125).map(|_| next()).collect();
            let env = Environment::from_values(5, values, 255).unwrap();
            let t = structure_tensor(&env);
            let fast = symmetric_eigenvalues(&t);
            let dense = dense_eigenvalues(&t);
            for (a, b) in fast.iter().zip(dense.iter()) {
                assert!((a - b).abs() <= 1e-9 * dense[0], "{fast:?} vs {dense:?}");
            }
        }
    }

    #[test]
    fn eigenvalue_edge_cases() {
        assert_eq!(symmetric_eigenvalues(&[0.0; 6]), [0.0; 3]);
        assert_eq!(symmetric_eigenvalues(&[1.0, 3.0, 2.0, 0.0, 0.0, 0.0]), [3.0, 2.0, 1.0]);
        let e = symmetric_eigenvalues(&[2.0, 2.0, 2.0, 1.0, 1.0, 1.0]);
        assert!((e[0] - 4.0).abs() < 1e-12 && (e[1] - 1.0).abs() < 1e-12 && (e[2] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn statistical_features() {
        let env = env_from(3, |x, _, _| if x == 0 { 0 } else { 255 });
        let cfg = FeatureConfig::parse("mean, stddev", 3).unwrap();
        let f = compute_features(&env, &cfg).unwrap();
        assert!((f[0] - 2.0 / 3.0).abs() < 1e-12);
        assert!((f[1] - (2.0f64).sqrt() / 3.0).abs() < 1e-12);
    }

    #[test]
    fn config_validation() {
        assert_eq!(
            FeatureConfig::parse("linearity,curvature", 5),
            Err(FeatureError::UnknownFeature("curvature".into()))
        );
        assert_eq!(FeatureConfig::parse("", 5), Err(FeatureError::NoFeatures));
        assert_eq!(
            FeatureConfig::parse("mean,mean", 5),
            Err(FeatureError::Duplicate(FeatureKind::Mean))
        );
        assert_eq!(FeatureConfig::geometric(4), Err(FeatureError::InvalidEnvSize(4)));
        let env = env_from(3, |_, _, _| 1);
        assert_eq!(
            compute_features(&env, &FeatureConfig::geometric(5).unwrap()),
            Err(FeatureError::SizeMismatch { env: 3, config: 5 })
        );
    }

    #[test]
    fn feature_matrix_rows() {
        let cfg = FeatureConfig::geometric(5).unwrap();
        let a = env_from(5, |x, _, _| if x == 2 { 100 } else { 0 });
        let one = build_feature_matrix(std::slice::from_ref(&a), &cfg).unwrap();
        assert_eq!(one.shape(), &[1, 2]);
        assert_eq!(one.row(0).to_vec(), compute_features(&a, &cfg).unwrap());
        let two = build_feature_matrix(&[a.clone(), a], &cfg).unwrap();
        assert_eq!(two.row(0), two.row(1));
        assert_eq!(build_feature_matrix(&[], &cfg), Err(FeatureError::Empty));
        let many: Vec<_> = (0..54)
            .map(|i| env_from(5, move |x, y, z| ((x * 7 + y * 3 + z * i) % 200) as u16))
            .collect();
        assert_eq!(build_feature_matrix(&many, &cfg).unwrap().shape(), &[54, 2]);
    }
}
