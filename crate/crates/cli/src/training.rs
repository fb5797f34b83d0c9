//! Training parameters shared by the `train` command and `POST /train`.

use faith_core::tuning::{DEFAULT_EPS_PATH, DEFAULT_FOLD_SEED, DEFAULT_K_MAX};
use faith_core::{CvSettings, FeatureConfig, HyperGrid, TrainingConfig, TrainingOutcome};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainParams {
    pub theta_g: f64,
    /// Window edge length; defaults to the session's.
    #[serde(default, alias = "K", alias = "k")]
    pub env_size: Option<usize>,
    /// Feature names; defaults to linearity and planarity.
    #[serde(default)]
    pub features: Option<Vec<String>>,
    #[serde(default)]
    pub k_max: Option<usize>,
    #[serde(default)]
    pub eps_path: Option<f64>,
    #[serde(default)]
    pub folds: Option<usize>,
    #[serde(default)]
    pub fold_seed: Option<u64>,
    #[serde(default)]
    pub workers: Option<usize>,
}

impl TrainParams {
    pub fn new(theta_g: f64, env_size: usize) -> Self {
        Self {
            theta_g,
            env_size: Some(env_size),
            features: None,
            k_max: None,
            eps_path: None,
            folds: None,
            fold_seed: None,
            workers: None,
        }
    }

    /// Builds the core configuration, using `default_env` when no window size
    /// was given.
    pub fn config(&self, default_env: usize) -> Result<TrainingConfig, String> {
        let env = self.env_size.unwrap_or(default_env);
        let features = match &self.features {
            None => FeatureConfig::geometric(env),
            Some(names) => FeatureConfig::parse(&names.join(","), env),
        }
        .map_err(|e| e.to_string())?;
        let grid = HyperGrid::with_path(
            self.k_max.unwrap_or(DEFAULT_K_MAX),
            self.eps_path.unwrap_or(DEFAULT_EPS_PATH),
        )
        .map_err(|e| e.to_string())?;
        if self.folds == Some(0) || self.folds == Some(1) {
            return Err("cross validation needs at least 2 folds".into());
        }
        let workers = self.workers.unwrap_or(1);
        if workers == 0 {
            return Err("worker count must be at least 1".into());
        }
        let mut config = TrainingConfig::new(features, self.theta_g);
        config.grid = grid;
        config.cv = CvSettings {
            folds: self.folds,
            seed: self.fold_seed.unwrap_or(DEFAULT_FOLD_SEED),
            workers,
        };
        Ok(config)
    }
}

/// Human-readable summary of a training run: the chosen cell followed by the
/// full score table.
pub fn score_table(outcome: &TrainingOutcome) -> String {
    let model = &outcome.model;
    let names: Vec<&str> = model.features.iter().map(|f| f.name()).collect();
    let mut out = format!(
        "seeds: {}  K: {}  theta_g: {}\nfeatures: {}\nbeta: {:?}\n",
        model.seed_count,
        model.env_size,
        model.theta_g,
        names.join(", "),
        model.beta
    );
    let Some(report) = &outcome.report else {
        out.push_str("targets carry no signal along the features; weights are zero\n");
        return out;
    };
    out.push_str(&format!(
        "chosen: lambda = {:.6e}  mu = {:.2}  cv mse = {:.6e}  ({} folds, {} failed cells)\n",
        report.lambda,
        report.mu,
        report.score,
        report.folds,
        report.failed_cells()
    ));
    out.push_str(&format!("{:>6} {:>14} {:>14}\n", "mu", "lambda", "cv mse"));
    for (i, cell) in report.cells.iter().enumerate() {
        let score = cell
            .mean_score
            .map_or_else(|| "failed".to_string(), |s| format!("{s:.6e}"));
        let mark = if i == report.chosen_cell { " *" } else { "" };
        out.push_str(&format!(
            "{:>6.2} {:>14.6e} {:>14}{mark}\n",
            cell.mu, cell.lambda, score
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults() {
        let p: TrainParams = serde_json::from_str(r#"{"theta_g": 150, "K": 7}"#).unwrap();
        assert_eq!(p.env_size, Some(7));
        let cfg = p.config(5).unwrap();
        assert_eq!(cfg.features.env_size(), 7);
        assert_eq!(cfg.features.dim(), 2);
        assert_eq!(cfg.grid.cell_count(), 112);
        assert_eq!(cfg.cv.seed, DEFAULT_FOLD_SEED);

        let p: TrainParams = serde_json::from_str(r#"{"theta_g": 1}"#).unwrap();
        assert_eq!(p.config(5).unwrap().features.env_size(), 5);
    }

    #[test]
    fn rejects_bad_values() {
        let mut p = TrainParams::new(10.0, 4);
        assert!(p.config(5).is_err());
        p.env_size = Some(5);
        p.features = Some(vec!["curvature".into()]);
        assert!(p.config(5).is_err());
        p.features = Some(vec!["mean".into()]);
        p.k_max = Some(1);
        assert!(p.config(5).is_err());
        p.k_max = None;
        p.folds = Some(1);
        assert!(p.config(5).is_err());
    }
}
