//! Grid search over `(lambda, mu)` scored by K-fold cross validation.

use ndarray::{Array1, ArrayView1, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::solver::{self, Polytope, SolverError, SolverParams};

/// Mixing values searched for `mu`.
pub const DEFAULT_MUS: [f64; 7] = [0.25, 0.33, 0.42, 0.50, 0.58, 0.67, 0.75];
pub const DEFAULT_K_MAX: usize = 16;
pub const DEFAULT_EPS_PATH: f64 = 1e-3;
pub const DEFAULT_FOLDS: usize = 5;
pub const DEFAULT_FOLD_SEED: u64 = 0x5EED;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TuningError {
    #[error("features are orthogonal to the targets; every lambda gives zero weights")]
    DegeneratePath,
    #[error("invalid grid: {0}")]
    InvalidGrid(String),
    #[error("{folds}-fold cross validation needs at least {folds} rows, got {rows}")]
    TooFewRows { rows: usize, folds: usize },
    #[error("worker count must be at least 1")]
    NoWorkers,
    #[error("all {cells} grid cells failed; first error: {first}")]
    AllCellsFailed { cells: usize, first: String },
    #[error(transparent)]
    Solver(#[from] SolverError),
}

pub type Result<T> = std::result::Result<T, TuningError>;

/// The `mu` set plus the shape of each per-`mu` lambda path.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HyperGrid {
    pub mus: Vec<f64>,
    pub k_max: usize,
    pub eps_path: f64,
}

impl Default for HyperGrid {
    fn default() -> Self {
        Self {
            mus: DEFAULT_MUS.to_vec(),
            k_max: DEFAULT_K_MAX,
            eps_path: DEFAULT_EPS_PATH,
        }
    }
}

impl HyperGrid {
    pub fn new(mus: Vec<f64>, k_max: usize, eps_path: f64) -> Result<Self> {
        let grid = Self {
            mus,
            k_max,
            eps_path,
        };
        grid.validate()?;
        Ok(grid)
    }

    pub fn with_path(k_max: usize, eps_path: f64) -> Result<Self> {
        Self::new(DEFAULT_MUS.to_vec(), k_max, eps_path)
    }

    pub fn validate(&self) -> Result<()> {
        if self.mus.is_empty() {
            return Err(TuningError::InvalidGrid("no mu values".into()));
        }
        if let Some(mu) = self.mus.iter().find(|m| !(**m > 0.0 && **m < 1.0)) {
            return Err(TuningError::InvalidGrid(format!("mu {mu} outside (0, 1)")));
        }
        if self.k_max < 2 {
            return Err(TuningError::InvalidGrid("k_max must be at least 2".into()));
        }
        if !(self.eps_path > 0.0 && self.eps_path < 1.0) {
            return Err(TuningError::InvalidGrid(format!(
                "eps_path {} outside (0, 1)",
                self.eps_path
            )));
        }
        Ok(())
    }

    pub fn cell_count(&self) -> usize {
        self.k_max * self.mus.len()
    }
}

/// `|F^T T|_2 / mu`.
pub fn lambda_max(features: ArrayView2<f64>, targets: ArrayView1<f64>, mu: f64) -> Result<f64> {
    if features.nrows() != targets.len() {
        return Err(SolverError::ShapeMismatch(format!(
            "{} rows but {} targets",
            features.nrows(),
            targets.len()
        ))
        .into());
    }
    let corr = features.t().dot(&targets);
    let norm = corr.dot(&corr).sqrt();
    if norm == 0.0 {
        return Err(TuningError::DegeneratePath);
    }
    if !norm.is_finite() {
        return Err(SolverError::NonFinite("feature/target correlation").into());
    }
    Ok(norm / mu)
}

/// Geometric sequence of `k_max` values from `eps_path * lambda_max(mu)` up to
/// `lambda_max(mu)`; both endpoints are exact.
pub fn lambda_path(
    mu: f64,
    features: ArrayView2<f64>,
    targets: ArrayView1<f64>,
    k_max: usize,
    eps_path: f64,
) -> Result<Vec<f64>> {
    HyperGrid::new(vec![mu], k_max, eps_path)?;
    let top = lambda_max(features, targets, mu)?;
    let decades = (1.0 / eps_path).log10();
    let last = k_max - 1;
    Ok((0..k_max)
        .map(|k| match k {
            0 => eps_path * top,
            k if k == last => top,
            k => eps_path * top * 10f64.powf(k as f64 / last as f64 * decades),
        })
        .collect())
}

/// Score of one grid cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellScore {
    pub lambda: f64,
    pub mu: f64,
    /// Mean validation MSE; `None` if a fold failed to train.
    pub mean_score: Option<f64>,
    pub fold_scores: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CVReport {
    pub grid: HyperGrid,
    pub folds: usize,
    pub fold_seed: u64,
    /// Fold index of every training row.
    pub fold_of_row: Vec<usize>,
    /// Cells ordered by `mu` index, then by position on the lambda path.
    pub cells: Vec<CellScore>,
    pub chosen_cell: usize,
    pub lambda: f64,
    pub mu: f64,
    pub score: f64,
}

impl CVReport {
    pub fn chosen(&self) -> &CellScore {
        &self.cells[self.chosen_cell]
    }

    pub fn failed_cells(&self) -> usize {
        self.cells.iter().filter(|c| c.mean_score.is_none()).count()
    }
}

/// Cross-validation settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvSettings {
    /// Fold count; `None` means `min(5, M)`.
    pub folds: Option<usize>,
    pub seed: u64,
    pub workers: usize,
}

impl Default for CvSettings {
    fn default() -> Self {
        Self {
            folds: None,
            seed: DEFAULT_FOLD_SEED,
            workers: 1,
        }
    }
}

impl CvSettings {
    pub fn fold_count(&self, rows: usize) -> usize {
        self.folds.unwrap_or(DEFAULT_FOLDS.min(rows))
    }
}

/// Deterministic fold labels: a seeded shuffle of the rows dealt round robin.
pub fn assign_folds(rows: usize, folds: usize, seed: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..rows).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut fold_of_row = vec![0; rows];
    for (slot, &row) in order.iter().enumerate() {
        fold_of_row[row] = slot % folds;
    }
    fold_of_row
}

fn score_cell(
    features: ArrayView2<f64>,
    targets: ArrayView1<f64>,
    theta_g: f64,
    max_value: f64,
    fold_of_row: &[usize],
    folds: usize,
    params: &SolverParams,
) -> std::result::Result<Vec<f64>, SolverError> {
    (0..folds)
        .map(|fold| {
            let (train, test): (Vec<usize>, Vec<usize>) =
                (0..fold_of_row.len()).partition(|&r| fold_of_row[r] != fold);
            let f_train = features.select(Axis(0), &train);
            let t_train = targets.select(Axis(0), &train);
            let polytope = Polytope::from_features(f_train.view(), theta_g, max_value)?;
            let fit = solver::solve_constrained(f_train.view(), t_train.view(), &polytope, params)?;
            let predicted = features.select(Axis(0), &test).dot(&fit.beta);
            let err = predicted - targets.select(Axis(0), &test);
            Ok(err.dot(&err) / test.len() as f64)
        })
        .collect()
}

/// Index of the best cell: smallest mean score, ties to larger lambda, then
/// larger mu.
fn select_cell(cells: &[CellScore]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, cell) in cells.iter().enumerate() {
        let Some(score) = cell.mean_score else { continue };
        let better = match best {
            None => true,
            Some(b) => {
                let cur = &cells[b];
                let cur_score = cur.mean_score.expect("selected cells have scores");
                (score, -cell.lambda, -cell.mu)
                    .partial_cmp(&(cur_score, -cur.lambda, -cur.mu))
                    .is_some_and(|o| o.is_lt())
            }
        };
        if better {
            best = Some(i);
        }
    }
    best
}

/// Scores every grid cell by cross validation on a pool of `settings.workers`
/// threads and picks the best one.
pub fn grid_search(
    features: ArrayView2<f64>,
    targets: ArrayView1<f64>,
    theta_g: f64,
    max_value: f64,
    grid: &HyperGrid,
    settings: &CvSettings,
    base: &SolverParams,
) -> Result<CVReport> {
    grid.validate()?;
    if settings.workers == 0 {
        return Err(TuningError::NoWorkers);
    }
    let rows = features.nrows();
    let folds = settings.fold_count(rows);
    if folds < 2 || rows < folds {
        return Err(TuningError::TooFewRows {
            rows,
            folds: folds.max(2),
        });
    }
    let fold_of_row = assign_folds(rows, folds, settings.seed);

    let mut specs = Vec::with_capacity(grid.cell_count());
    for &mu in &grid.mus {
        for lambda in lambda_path(mu, features, targets, grid.k_max, grid.eps_path)? {
            specs.push((lambda, mu));
        }
    }

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(settings.workers)
        .build()
        .map_err(|e| TuningError::InvalidGrid(format!("thread pool: {e}")))?;
    let cells: Vec<CellScore> = pool.install(|| {
        specs
            .par_iter()
            .map(|&(lambda, mu)| {
                let outcome = base.with_regularization(lambda, mu).and_then(|p| {
                    score_cell(features, targets, theta_g, max_value, &fold_of_row, folds, &p)
                });
                match outcome {
                    Ok(fold_scores) => CellScore {
                        lambda,
                        mu,
                        mean_score: Some(fold_scores.iter().sum::<f64>() / folds as f64),
                        fold_scores,
                        error: None,
                    },
                    Err(e) => {
                        log::warn!("grid cell lambda={lambda:e} mu={mu} excluded: {e}");
                        CellScore {
                            lambda,
                            mu,
                            mean_score: None,
                            fold_scores: Vec::new(),
                            error: Some(e.to_string()),
                        }
                    }
                }
            })
            .collect()
    });

    let Some(chosen_cell) = select_cell(&cells) else {
        return Err(TuningError::AllCellsFailed {
            cells: cells.len(),
            first: cells
                .iter()
                .find_map(|c| c.error.clone())
                .unwrap_or_default(),
        });
    };
    let chosen = &cells[chosen_cell];
    Ok(CVReport {
        grid: grid.clone(),
        folds,
        fold_seed: settings.seed,
        fold_of_row,
        lambda: chosen.lambda,
        mu: chosen.mu,
        score: chosen.mean_score.expect("chosen cell has a score"),
        chosen_cell,
        cells,
    })
}

/// Result of tuning followed by a refit on all rows.
#[derive(Debug, Clone, PartialEq)]
pub struct TunedFit {
    pub beta: Array1<f64>,
    pub diagnostics: solver::Diagnostics,
    pub lambda: f64,
    pub mu: f64,
    pub report: CVReport,
}

/// Grid search, then retrain on every row at the chosen cell.
pub fn tune_and_fit(
    features: ArrayView2<f64>,
    targets: ArrayView1<f64>,
    theta_g: f64,
    max_value: f64,
    grid: &HyperGrid,
    settings: &CvSettings,
    base: &SolverParams,
) -> Result<TunedFit> {
    let report = grid_search(features, targets, theta_g, max_value, grid, settings, base)?;
    let params = base.with_regularization(report.lambda, report.mu)?;
    let fit = solver::solve_faith(features, targets, theta_g, max_value, &params)?;
    Ok(TunedFit {
        beta: fit.beta,
        diagnostics: fit.diagnostics,
        lambda: report.lambda,
        mu: report.mu,
        report,
    })
}
