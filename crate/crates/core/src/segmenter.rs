//! Seeds to model to binary volume.
//!
//! A voxel is foreground when its value is at least its local threshold.
//! Voxels whose window leaves the volume are always background.

use std::io::Write;
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::time::Instant;

use ndarray::Array1;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::features::{build_feature_matrix, FeatureConfig, FeatureError};
use crate::mce::{self, MceError};
use crate::model::{FaithModel, ModelError, MODEL_VERSION};
use crate::solver::{SolverError, SolverParams};
use crate::tuning::{self, CVReport, CvSettings, HyperGrid, TuningError};
use crate::volume::{
    check_env_size, slab_specs, Axis, Environment, Position, Slab, SliceGeometry, Volume,
    VolumeError, VolumeMeta, VoxelSource,
};

#[derive(Debug, Error)]
pub enum SegmentError {
    #[error("no seeds given")]
    NoSeeds,
    #[error("seed {0:?} given twice")]
    DuplicateSeed(Position),
    #[error("seed {position:?} outside volume of dims {dims:?}")]
    SeedOutOfBounds { position: Position, dims: [usize; 3] },
    #[error("seeds too close to the border for a {env_size}^3 window: {positions:?}")]
    BorderSeeds {
        env_size: usize,
        positions: Vec<Position>,
    },
    #[error("seed window size {seeds} differs from feature window size {features}")]
    EnvSizeMismatch { seeds: usize, features: usize },
    #[error("training needs at least 2 seeds for cross validation, got {0}")]
    TooFewSeeds(usize),
    #[error("segmentation cancelled")]
    Cancelled,
    #[error("worker count must be at least 1")]
    NoWorkers,
    #[error(transparent)]
    Volume(#[from] VolumeError),
    #[error(transparent)]
    Feature(#[from] FeatureError),
    #[error(transparent)]
    Mce(#[from] MceError),
    #[error(transparent)]
    Tuning(#[from] TuningError),
    #[error(transparent)]
    Solver(#[from] SolverError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("output: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, SegmentError>;

/// User-selected seed voxels and the window size used around them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedSet {
    pub positions: Vec<Position>,
    pub env_size: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub annotations: Option<Vec<String>>,
}

impl SeedSet {
    pub fn new(positions: Vec<Position>, env_size: usize) -> Self {
        Self {
            positions,
            env_size,
            annotations: None,
        }
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    /// Checks the seeds against `meta`. Returns `true` when the seed count
    /// exceeds one percent of the voxels, which is allowed but unusual.
    pub fn validate(&self, meta: &VolumeMeta) -> Result<bool> {
        check_env_size(self.env_size)?;
        if self.positions.is_empty() {
            return Err(SegmentError::NoSeeds);
        }
        let mut sorted = self.positions.clone();
        sorted.sort_unstable();
        if let Some(w) = sorted.windows(2).find(|w| w[0] == w[1]) {
            return Err(SegmentError::DuplicateSeed(w[0]));
        }
        if let Some(&position) = self.positions.iter().find(|p| !meta.contains(**p)) {
            return Err(SegmentError::SeedOutOfBounds {
                position,
                dims: meta.dims,
            });
        }
        let border = border_seeds(meta, &self.positions, self.env_size);
        if !border.is_empty() {
            return Err(SegmentError::BorderSeeds {
                env_size: self.env_size,
                positions: border,
            });
        }
        let crowded = self.positions.len() as u64 * 100 > meta.voxel_count();
        if crowded {
            log::warn!(
                "{} seeds for {} voxels; seeds are meant to be sparse",
                self.positions.len(),
                meta.voxel_count()
            );
        }
        Ok(crowded)
    }
}

/// Seeds whose `k`-window does not fit inside the volume.
pub fn border_seeds(meta: &VolumeMeta, positions: &[Position], k: usize) -> Vec<Position> {
    positions
        .iter()
        .filter(|p| !meta.window_fits(**p, k))
        .copied()
        .collect()
}

/// Everything needed to train from seeds.
#[derive(Debug, Clone)]
pub struct TrainingConfig {
    pub features: FeatureConfig,
    pub theta_g: f64,
    pub grid: HyperGrid,
    pub cv: CvSettings,
    pub solver: SolverParams,
}

impl TrainingConfig {
    pub fn new(features: FeatureConfig, theta_g: f64) -> Self {
        Self {
            features,
            theta_g,
            grid: HyperGrid::default(),
            cv: CvSettings::default(),
            solver: SolverParams::new(1.0, 0.5).expect("valid defaults"),
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainingOutcome {
    pub model: FaithModel,
    /// Absent when the targets are orthogonal to the features (zero weights).
    pub report: Option<CVReport>,
    /// Local MCE threshold at every seed.
    pub seed_thresholds: Vec<f64>,
    /// Feature vector of every seed.
    pub seed_features: Vec<Vec<f64>>,
}

/// Feature matrix, MCE targets, grid search and a final fit on all seeds.
pub fn train_from_seeds(
    volume: &Volume,
    seeds: &SeedSet,
    config: &TrainingConfig,
) -> Result<TrainingOutcome> {
    let meta = volume.meta();
    if seeds.env_size != config.features.env_size() {
        return Err(SegmentError::EnvSizeMismatch {
            seeds: seeds.env_size,
            features: config.features.env_size(),
        });
    }
    seeds.validate(meta)?;
    let max_value = meta.max_value();
    mce::check_global_threshold(config.theta_g, max_value)?;

    let envs = seeds
        .positions
        .iter()
        .map(|&p| volume.extract_environment(p, seeds.env_size))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    let features = build_feature_matrix(&envs, &config.features)?;
    let thresholds = mce::local_thresholds(&envs)?;
    let targets = mce::targets_from_thresholds(&thresholds, config.theta_g);

    let mut model = FaithModel::global(config.theta_g, max_value, &config.features);
    model.seed_count = seeds.len();
    let report = match tuning::lambda_max(features.view(), targets.view(), 0.5) {
        Err(TuningError::DegeneratePath) => {
            log::info!("targets carry no signal along the features; keeping zero weights");
            None
        }
        Err(e) => return Err(e.into()),
        Ok(_) => {
            if seeds.len() < 2 {
                return Err(SegmentError::TooFewSeeds(seeds.len()));
            }
            let fit = tuning::tune_and_fit(
                features.view(),
                targets.view(),
                config.theta_g,
                max_value as f64,
                &config.grid,
                &config.cv,
                &config.solver,
            )?;
            model.beta = fit.beta.to_vec();
            model.lambda = Some(fit.lambda);
            model.mu = Some(fit.mu);
            model.diagnostics = Some(fit.diagnostics);
            Some(fit.report)
        }
    };
    debug_assert_eq!(model.version, MODEL_VERSION);
    Ok(TrainingOutcome {
        model,
        report,
        seed_thresholds: thresholds.iter().map(|t| t.threshold).collect(),
        seed_features: features.rows().into_iter().map(|r| r.to_vec()).collect(),
    })
}

/// How each voxel's threshold is obtained.
#[derive(Debug, Clone, Copy)]
pub enum ThresholdRule<'a> {
    Adaptive(&'a FaithModel),
    /// One threshold everywhere, with the same border policy for `env_size`.
    Global { theta_g: f64, env_size: usize },
}

impl ThresholdRule<'_> {
    pub fn env_size(&self) -> usize {
        match self {
            ThresholdRule::Adaptive(m) => m.env_size,
            ThresholdRule::Global { env_size, .. } => *env_size,
        }
    }

    fn validate(&self, meta: &VolumeMeta) -> Result<()> {
        check_env_size(self.env_size())?;
        if let ThresholdRule::Adaptive(m) = self {
            m.validate()?;
            if m.max_value != meta.max_value() {
                log::warn!(
                    "model trained for W = {} applied to a volume with W = {}",
                    m.max_value,
                    meta.max_value()
                );
            }
        }
        Ok(())
    }
}

/// Per-voxel evaluation state, one per worker.
struct Evaluator<'a> {
    rule: ThresholdRule<'a>,
    cfg: Option<FeatureConfig>,
    env: Environment,
    scratch: Vec<f64>,
}

impl<'a> Evaluator<'a> {
    fn new(rule: ThresholdRule<'a>, max_value: u32) -> Result<Self> {
        let cfg = match rule {
            ThresholdRule::Adaptive(m) => Some(m.feature_config()?),
            ThresholdRule::Global { .. } => None,
        };
        let dim = cfg.as_ref().map_or(0, FeatureConfig::dim);
        Ok(Self {
            env: Environment::empty(rule.env_size(), max_value)?,
            rule,
            cfg,
            scratch: vec![0.0; dim],
        })
    }

    /// Threshold at `p`, or `None` for a border voxel.
    #[inline]
    fn threshold<S: VoxelSource + ?Sized>(&mut self, src: &S, p: Position) -> Option<f64> {
        match self.rule {
            ThresholdRule::Global { theta_g, env_size } => {
                src.meta().window_fits(p, env_size).then_some(theta_g)
            }
            ThresholdRule::Adaptive(model) => {
                self.env.fill_from(src, p);
                if !self.env.is_complete() {
                    return None;
                }
                let cfg = self.cfg.as_ref().expect("adaptive rule has a feature config");
                Some(
                    model
                        .threshold_with(cfg, &self.env, &mut self.scratch)
                        .expect("window size checked against the model"),
                )
            }
        }
    }
}

/// Counters gathered during segmentation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentStats {
    pub voxels: u64,
    pub voxels_set: u64,
    pub border_voxels: u64,
    /// Extremes of the computed thresholds over interior voxels.
    pub min_threshold: Option<f64>,
    pub max_threshold: Option<f64>,
    /// Interior voxels whose threshold fell outside `[0, W]`.
    pub out_of_range: u64,
    pub slabs: usize,
    /// Largest slab buffer held at once, per worker.
    pub peak_slab_bytes: usize,
    pub runtime_secs: f64,
}

impl SegmentStats {
    fn empty() -> Self {
        Self {
            voxels: 0,
            voxels_set: 0,
            border_voxels: 0,
            min_threshold: None,
            max_threshold: None,
            out_of_range: 0,
            slabs: 0,
            peak_slab_bytes: 0,
            runtime_secs: 0.0,
        }
    }

    fn merge(&mut self, other: &SegmentStats) {
        self.voxels += other.voxels;
        self.voxels_set += other.voxels_set;
        self.border_voxels += other.border_voxels;
        self.out_of_range += other.out_of_range;
        self.slabs += other.slabs;
        self.peak_slab_bytes = self.peak_slab_bytes.max(other.peak_slab_bytes);
        self.min_threshold = min_opt(self.min_threshold, other.min_threshold);
        self.max_threshold = match (self.max_threshold, other.max_threshold) {
            (Some(a), Some(b)) => Some(a.max(b)),
            (a, b) => a.or(b),
        };
    }

    #[inline]
    fn record(&mut self, threshold: f64, max_value: f64) {
        self.min_threshold = min_opt(self.min_threshold, Some(threshold));
        self.max_threshold = Some(self.max_threshold.map_or(threshold, |m| m.max(threshold)));
        if !(0.0..=max_value).contains(&threshold) {
            self.out_of_range += 1;
        }
    }
}

fn min_opt(a: Option<f64>, b: Option<f64>) -> Option<f64> {
    match (a, b) {
        (Some(a), Some(b)) => Some(a.min(b)),
        (a, b) => a.or(b),
    }
}

/// Progress and cancellation shared with a running segmentation.
#[derive(Debug, Default)]
pub struct SegmentControl {
    slices_done: AtomicUsize,
    total_slices: AtomicUsize,
    cancel: AtomicBool,
}

impl SegmentControl {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn cancel(&self) {
        self.cancel.store(true, Ordering::SeqCst);
    }

    pub fn is_cancelled(&self) -> bool {
        self.cancel.load(Ordering::SeqCst)
    }

    /// Fraction of owned slices written, in `[0, 1]`.
    pub fn progress(&self) -> f64 {
        let total = self.total_slices.load(Ordering::SeqCst);
        if total == 0 {
            return 0.0;
        }
        self.slices_done.load(Ordering::SeqCst) as f64 / total as f64
    }

    /// `(slices written, total slices)`.
    pub fn slices(&self) -> (usize, usize) {
        (
            self.slices_done.load(Ordering::SeqCst),
            self.total_slices.load(Ordering::SeqCst),
        )
    }

    fn start(&self, total: usize) {
        self.total_slices.store(total, Ordering::SeqCst);
        self.slices_done.store(0, Ordering::SeqCst);
    }

    fn advance(&self, slices: usize) {
        self.slices_done.fetch_add(slices, Ordering::SeqCst);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SegmentOptions {
    /// Owned z-slices per slab.
    pub slab_thickness: usize,
    pub workers: usize,
}

impl Default for SegmentOptions {
    fn default() -> Self {
        Self {
            slab_thickness: 16,
            workers: 1,
        }
    }
}

/// Segments one owned z-slice of `slab` into `out` (one byte per voxel).
fn segment_slice(
    slab: &Slab,
    z: usize,
    eval: &mut Evaluator,
    out: &mut [u8],
    stats: &mut SegmentStats,
) {
    let meta = *slab.meta();
    let max_value = meta.max_value() as f64;
    let [dx, dy, _] = meta.dims;
    for y in 0..dy {
        for x in 0..dx {
            let p = [x, y, z];
            let cell = &mut out[x + dx * y];
            match eval.threshold(slab, p) {
                None => {
                    *cell = 0;
                    stats.border_voxels += 1;
                }
                Some(theta) => {
                    stats.record(theta, max_value);
                    let on = slab.value(p) as f64 >= theta;
                    *cell = on as u8;
                    stats.voxels_set += on as u64;
                }
            }
        }
    }
    stats.voxels += (dx * dy) as u64;
}

/// Streams the binary segmentation of `volume` into `out`, slice by slice in
/// z order (x fastest), one `u8` in `{0, 1}` per voxel.
///
/// With one worker a single slab and a single output slice are resident at a
/// time. With more workers up to `workers` slabs are processed concurrently
/// and written in order.
pub fn segment_to_writer<W: Write>(
    volume: &Volume,
    rule: ThresholdRule,
    options: SegmentOptions,
    control: Option<&SegmentControl>,
    out: &mut W,
) -> Result<SegmentStats> {
    let started = Instant::now();
    let meta = *volume.meta();
    rule.validate(&meta)?;
    if options.workers == 0 {
        return Err(SegmentError::NoWorkers);
    }
    let specs = slab_specs(meta.dims[2], options.slab_thickness, rule.env_size())?;
    if let Some(c) = control {
        c.start(meta.dims[2]);
    }
    let cancelled = || control.is_some_and(SegmentControl::is_cancelled);
    let mut stats = SegmentStats::empty();

    if options.workers == 1 {
        let mut eval = Evaluator::new(rule, meta.max_value())?;
        let mut slice = vec![0u8; meta.slice_len()];
        for spec in specs {
            if cancelled() {
                return Err(SegmentError::Cancelled);
            }
            let slab = Slab::load(volume, spec);
            let mut local = SegmentStats::empty();
            local.slabs = 1;
            local.peak_slab_bytes = slab.resident_bytes();
            for z in slab.z_range() {
                segment_slice(&slab, z, &mut eval, &mut slice, &mut local);
                out.write_all(&slice)?;
                if let Some(c) = control {
                    c.advance(1);
                }
            }
            stats.merge(&local);
        }
    } else {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(options.workers)
            .build()
            .map_err(|e| std::io::Error::other(e.to_string()))?;
        let specs: Vec<_> = specs.collect();
        for batch in specs.chunks(options.workers) {
            if cancelled() {
                return Err(SegmentError::Cancelled);
            }
            let results: Vec<Result<(Vec<u8>, SegmentStats)>> = pool.install(|| {
                batch
                    .par_iter()
                    .map(|spec| {
                        let slab = Slab::load(volume, spec.clone());
                        let mut eval = Evaluator::new(rule, meta.max_value())?;
                        let mut local = SegmentStats::empty();
                        local.slabs = 1;
                        local.peak_slab_bytes = slab.resident_bytes();
                        let mut owned = vec![0u8; meta.slice_len() * spec.owned.len()];
                        for (z, chunk) in slab.z_range().zip(owned.chunks_mut(meta.slice_len())) {
                            segment_slice(&slab, z, &mut eval, chunk, &mut local);
                            if let Some(c) = control {
                                c.advance(1);
                            }
                        }
                        Ok((owned, local))
                    })
                    .collect()
            });
            for result in results {
                let (owned, local) = result?;
                out.write_all(&owned)?;
                stats.merge(&local);
            }
        }
    }
    out.flush()?;
    stats.runtime_secs = started.elapsed().as_secs_f64();
    Ok(stats)
}

/// Segments into an in-memory `uint8` volume.
pub fn segment(
    volume: &Volume,
    rule: ThresholdRule,
    options: SegmentOptions,
    control: Option<&SegmentControl>,
) -> Result<(Volume, SegmentStats)> {
    let mut bytes = Vec::with_capacity(volume.meta().voxel_count() as usize);
    let stats = segment_to_writer(volume, rule, options, control, &mut bytes)?;
    Ok((Volume::from_u8(volume.dims(), bytes)?, stats))
}

/// Segments `volume` into the raw + JSON pair at `path`, streaming the output.
pub fn segment_to_file(
    volume: &Volume,
    rule: ThresholdRule,
    options: SegmentOptions,
    control: Option<&SegmentControl>,
    path: &std::path::Path,
) -> Result<SegmentStats> {
    let (raw, _) = crate::volume::volume_paths(path);
    let file = std::fs::File::create(&raw)?;
    let mut writer = std::io::BufWriter::new(file);
    let stats = segment_to_writer(volume, rule, options, control, &mut writer)?;
    drop(writer);
    let meta = VolumeMeta::new(volume.dims(), crate::volume::Dtype::Uint8)?;
    crate::volume::write_meta(path, &meta)?;
    Ok(stats)
}

/// Decisions on one slice: the adaptive rule next to plain global
/// thresholding with the same border policy.
#[derive(Debug, Clone, PartialEq)]
pub struct SlicePreview {
    pub width: usize,
    pub height: usize,
    /// Per-pixel adaptive decision.
    pub adaptive: Vec<bool>,
    /// Per-pixel global decision.
    pub global: Vec<bool>,
    /// Per-pixel threshold; `NaN` on border pixels.
    pub thresholds: Vec<f64>,
}

impl SlicePreview {
    /// Pixels set by the adaptive rule only.
    pub fn adaptive_only(&self) -> usize {
        self.adaptive
            .iter()
            .zip(&self.global)
            .filter(|(a, g)| **a && !**g)
            .count()
    }
}

pub fn preview_slice(
    volume: &Volume,
    model: &FaithModel,
    axis: Axis,
    index: usize,
) -> Result<SlicePreview> {
    let meta = *volume.meta();
    let rule = ThresholdRule::Adaptive(model);
    rule.validate(&meta)?;
    let geom = SliceGeometry::new(&meta, axis, index)?;
    let mut eval = Evaluator::new(rule, meta.max_value())?;
    let n = geom.width * geom.height;
    let mut preview = SlicePreview {
        width: geom.width,
        height: geom.height,
        adaptive: Vec::with_capacity(n),
        global: Vec::with_capacity(n),
        thresholds: Vec::with_capacity(n),
    };
    for p in geom.positions() {
        let value = volume.get(p) as f64;
        match eval.threshold(volume, p) {
            Some(theta) => {
                preview.adaptive.push(value >= theta);
                preview.global.push(value >= model.theta_g);
                preview.thresholds.push(theta);
            }
            None => {
                preview.adaptive.push(false);
                preview.global.push(false);
                preview.thresholds.push(f64::NAN);
            }
        }
    }
    Ok(preview)
}

/// Predicted offsets `beta . F` for the training rows of a model.
pub fn predicted_offsets(model: &FaithModel, features: &[Vec<f64>]) -> Array1<f64> {
    features
        .iter()
        .map(|f| model.beta.iter().zip(f).map(|(b, x)| b * x).sum())
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::FeatureKind;
    use crate::volume::Dtype;

    fn noise_volume(dims: [usize; 3]) -> Volume {
        let n = dims.iter().product::<usize>();
        let values = (0..n).map(|i| ((i * 2654435761) >> 7) as u8).collect();
        Volume::from_u8(dims, values).unwrap()
    }

    #[test]
    fn seed_validation() {
        let meta = VolumeMeta::new([10, 10, 10], Dtype::Uint8).unwrap();
        assert!(matches!(
            SeedSet::new(vec![], 3).validate(&meta),
            Err(SegmentError::NoSeeds)
        ));
        assert!(matches!(
            SeedSet::new(vec![[5, 5, 5], [5, 5, 5]], 3).validate(&meta),
            Err(SegmentError::DuplicateSeed([5, 5, 5]))
        ));
        match SeedSet::new(vec![[5, 5, 5], [0, 5, 5], [5, 7, 5]], 7).validate(&meta) {
            Err(SegmentError::BorderSeeds { env_size: 7, positions }) => {
                assert_eq!(positions, vec![[0, 5, 5], [5, 7, 5]]);
            }
            other => panic!("{other:?}"),
        }
        assert!(matches!(
            SeedSet::new(vec![[10, 5, 5]], 3).validate(&meta),
            Err(SegmentError::SeedOutOfBounds { .. })
        ));
        assert!(!SeedSet::new(vec![[5, 5, 5]], 3).validate(&meta).unwrap());
        let crowded: Vec<_> = (1..9).flat_map(|x| (1..3).map(move |y| [x, y, 4])).collect();
        assert!(SeedSet::new(crowded, 3).validate(&meta).unwrap());
    }

    #[test]
    fn zero_model_equals_global_rule() {
        let v = noise_volume([12, 9, 11]);
        let cfg = FeatureConfig::geometric(3).unwrap();
        let model = FaithModel::global(128.0, 255, &cfg);
        let opts = SegmentOptions {
            slab_thickness: 4,
            workers: 1,
        };
        let (a, sa) = segment(&v, ThresholdRule::Adaptive(&model), opts, None).unwrap();
        let (b, sb) = segment(
            &v,
            ThresholdRule::Global {
                theta_g: 128.0,
                env_size: 3,
            },
            opts,
            None,
        )
        .unwrap();
        assert_eq!(a.bytes(), b.bytes());
        assert_eq!(sa.voxels_set, sb.voxels_set);
        assert_eq!(sa.border_voxels, (12 * 9 * 11 - 10 * 7 * 9) as u64);
        for z in 0..11 {
            for y in 0..9 {
                for x in 0..12 {
                    let interior = (1..11).contains(&x) && (1..8).contains(&y) && (1..10).contains(&z);
                    let expected = interior && v.get([x, y, z]) >= 128;
                    assert_eq!(a.get([x, y, z]) == 1, expected);
                }
            }
        }
    }

    #[test]
    fn slabs_and_workers_agree() {
        let v = noise_volume([9, 8, 13]);
        let cfg = FeatureConfig::new(vec![FeatureKind::Planarity, FeatureKind::Mean], 5).unwrap();
        let mut model = FaithModel::global(120.0, 255, &cfg);
        model.beta = vec![-40.0, 30.0];
        let reference = segment(
            &v,
            ThresholdRule::Adaptive(&model),
            SegmentOptions {
                slab_thickness: 13,
                workers: 1,
            },
            None,
        )
        .unwrap();
        for (slab_thickness, workers) in [(1, 1), (2, 3), (5, 2), (40, 4)] {
            let (out, stats) = segment(
                &v,
                ThresholdRule::Adaptive(&model),
                SegmentOptions {
                    slab_thickness,
                    workers,
                },
                None,
            )
            .unwrap();
            assert_eq!(out.bytes(), reference.0.bytes());
            assert_eq!(stats.voxels_set, reference.1.voxels_set);
            assert_eq!(stats.min_threshold, reference.1.min_threshold);
        }
    }

    #[test]
    fn cancel_and_progress() {
        let v = noise_volume([6, 6, 6]);
        let rule = ThresholdRule::Global {
            theta_g: 3.0,
            env_size: 3,
        };
        let control = SegmentControl::new();
        segment(&v, rule, SegmentOptions::default(), Some(&control)).unwrap();
        assert_eq!(control.progress(), 1.0);
        control.cancel();
        assert!(matches!(
            segment(&v, rule, SegmentOptions::default(), Some(&control)),
            Err(SegmentError::Cancelled)
        ));
    }

    #[test]
    fn zero_targets_give_zero_weights() {
        // Constant volume: every window threshold equals its single value.
        let v = Volume::from_u8([9, 9, 9], vec![77; 729]).unwrap();
        let seeds = SeedSet::new(vec![[4, 4, 4], [3, 4, 5]], 3);
        let config = TrainingConfig::new(FeatureConfig::geometric(3).unwrap(), 77.0);
        let out = train_from_seeds(&v, &seeds, &config).unwrap();
        assert!(out.model.is_zero());
        assert!(out.report.is_none());
        assert_eq!(out.seed_thresholds, vec![77.0, 77.0]);
    }

    #[test]
    fn env_size_mismatch() {
        let v = noise_volume([9, 9, 9]);
        let seeds = SeedSet::new(vec![[4, 4, 4]], 5);
        let config = TrainingConfig::new(FeatureConfig::geometric(3).unwrap(), 77.0);
        assert!(matches!(
            train_from_seeds(&v, &seeds, &config),
            Err(SegmentError::EnvSizeMismatch { seeds: 5, features: 3 })
        ));
    }
}
