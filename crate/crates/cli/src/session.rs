//! Single-volume interactive session: seeds, current model and jobs.

use std::collections::BTreeMap;
use std::hash::{BuildHasher, Hasher};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use faith_core::segmenter::{border_seeds, SegmentError};
use faith_core::volume::{check_env_size, Position};
use faith_core::{
    load_volume, segment_to_file, CVReport, FaithModel, SeedSet, SegmentControl, SegmentOptions,
    SegmentStats, ThresholdRule, TrainingConfig, TrainingOutcome, Volume, VolumeMeta,
};
use serde::{Deserialize, Serialize};

use crate::training::TrainParams;

pub const DEFAULT_ENV_SIZE: usize = 5;

/// Failure of a session operation, tagged with the HTTP status it maps to.
#[derive(Debug, thiserror::Error)]
pub enum ServiceError {
    #[error("{0}")]
    BadRequest(String),
    #[error("{0}")]
    NotFound(String),
    #[error("{0}")]
    Conflict(String),
    #[error("seeds too close to the border for a {env_size}^3 window: {positions:?}")]
    BorderSeeds {
        env_size: usize,
        positions: Vec<Position>,
    },
    #[error("{0}")]
    Internal(String),
}

impl ServiceError {
    pub fn status(&self) -> u16 {
        match self {
            ServiceError::BadRequest(_) => 400,
            ServiceError::NotFound(_) => 404,
            ServiceError::Conflict(_) => 409,
            ServiceError::BorderSeeds { .. } => 422,
            ServiceError::Internal(_) => 500,
        }
    }
}

impl From<SegmentError> for ServiceError {
    fn from(e: SegmentError) -> Self {
        use faith_core::volume::VolumeError;
        let msg = e.to_string();
        match e {
            SegmentError::BorderSeeds {
                env_size,
                positions,
            } => ServiceError::BorderSeeds {
                env_size,
                positions,
            },
            SegmentError::NoSeeds | SegmentError::TooFewSeeds(_) => ServiceError::Conflict(msg),
            SegmentError::Io(_)
            | SegmentError::Volume(VolumeError::Io { .. })
            | SegmentError::Solver(_)
            | SegmentError::Tuning(faith_core::tuning::TuningError::AllCellsFailed { .. })
            | SegmentError::Tuning(faith_core::tuning::TuningError::Solver(_)) => {
                ServiceError::Internal(msg)
            }
            _ => ServiceError::BadRequest(msg),
        }
    }
}

/// Serializable part of a session. A session can be rebuilt from it with
/// [`Session::restore`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionState {
    pub id: String,
    pub volume: PathBuf,
    pub meta: VolumeMeta,
    /// Window edge length the seeds are validated against.
    pub env_size: usize,
    pub seeds: Vec<Position>,
    pub model: Option<FaithModel>,
    /// Set when the seeds changed after the model was trained.
    pub model_stale: bool,
    pub report: Option<CVReport>,
    pub last_training: Option<TrainParams>,
}

fn new_session_id() -> String {
    let mut h = std::collections::hash_map::RandomState::new().build_hasher();
    h.write_u128(
        std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map_or(0, |d| d.as_nanos()),
    );
    format!("{:016x}", h.finish())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum JobStatus {
    Pending,
    Running,
    Done,
    Failed,
    Cancelled,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JobView {
    pub id: u64,
    pub status: JobStatus,
    /// Fraction of the work done; exactly 1.0 once the status is `done`.
    pub progress: f64,
    pub out_path: PathBuf,
    pub stats: Option<SegmentStats>,
    pub error: Option<String>,
}

#[derive(Debug)]
struct JobRecord {
    status: JobStatus,
    progress: f64,
    stats: Option<SegmentStats>,
    error: Option<String>,
}

/// A full-volume segmentation running in the background.
#[derive(Debug)]
pub struct Job {
    pub id: u64,
    pub out_path: PathBuf,
    pub options: SegmentOptions,
    pub control: SegmentControl,
    record: Mutex<JobRecord>,
}

impl Job {
    fn new(id: u64, out_path: PathBuf, options: SegmentOptions) -> Self {
        Self {
            id,
            out_path,
            options,
            control: SegmentControl::new(),
            record: Mutex::new(JobRecord {
                status: JobStatus::Pending,
                progress: 0.0,
                stats: None,
                error: None,
            }),
        }
    }

    pub fn view(&self) -> JobView {
        let mut r = self.record.lock().expect("job record lock");
        let (done, total) = self.control.slices();
        // The final step is writing the sidecar, so the slice fraction stays
        // below 1 until the job is done.
        let current = match r.status {
            JobStatus::Done => 1.0,
            _ if total == 0 => 0.0,
            _ => done as f64 / (total + 1) as f64,
        };
        r.progress = r.progress.max(current);
        JobView {
            id: self.id,
            status: r.status,
            progress: r.progress,
            out_path: self.out_path.clone(),
            stats: r.stats.clone(),
            error: r.error.clone(),
        }
    }

    pub fn status(&self) -> JobStatus {
        self.record.lock().expect("job record lock").status
    }

    /// Segments `volume` with `model` into the job's output. Blocks.
    pub fn run(&self, volume: &Volume, model: &FaithModel) {
        {
            let mut r = self.record.lock().expect("job record lock");
            if r.status != JobStatus::Pending {
                return;
            }
            r.status = JobStatus::Running;
        }
        let result = segment_to_file(
            volume,
            ThresholdRule::Adaptive(model),
            self.options,
            Some(&self.control),
            &self.out_path,
        );
        let mut r = self.record.lock().expect("job record lock");
        match result {
            Ok(stats) => {
                r.status = JobStatus::Done;
                r.progress = 1.0;
                r.stats = Some(stats);
            }
            Err(SegmentError::Cancelled) => r.status = JobStatus::Cancelled,
            Err(e) => {
                r.status = JobStatus::Failed;
                r.error = Some(e.to_string());
            }
        }
    }

    /// Requests cancellation; honoured at the next slab boundary.
    pub fn cancel(&self) {
        self.control.cancel();
        let mut r = self.record.lock().expect("job record lock");
        if r.status == JobStatus::Pending {
            r.status = JobStatus::Cancelled;
        }
    }
}

/// Inputs of a training run taken from the session, so training can proceed
/// without holding the session.
#[derive(Debug, Clone)]
pub struct TrainingJob {
    pub volume: Arc<Volume>,
    pub seeds: SeedSet,
    pub config: TrainingConfig,
    pub params: TrainParams,
    generation: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainResponse {
    pub model: FaithModel,
    pub report: Option<CVReport>,
    pub seed_thresholds: Vec<f64>,
    /// True when the seeds changed while training ran.
    pub stale: bool,
}

#[derive(Debug)]
pub struct Session {
    state: SessionState,
    volume: Arc<Volume>,
    /// Bumped on every seed edit.
    generation: u64,
    jobs: BTreeMap<u64, Arc<Job>>,
    next_job: u64,
    store: Option<PathBuf>,
}

impl Session {
    pub fn open(volume_path: &Path, env_size: usize) -> Result<Self, ServiceError> {
        check_env_size(env_size).map_err(|e| ServiceError::BadRequest(e.to_string()))?;
        let volume = load_volume(volume_path).map_err(|e| ServiceError::Internal(e.to_string()))?;
        Ok(Self::with_volume(volume_path.to_path_buf(), volume, env_size))
    }

    pub fn with_volume(path: PathBuf, volume: Volume, env_size: usize) -> Self {
        Self {
            state: SessionState {
                id: new_session_id(),
                volume: path,
                meta: *volume.meta(),
                env_size,
                seeds: Vec::new(),
                model: None,
                model_stale: false,
                report: None,
                last_training: None,
            },
            volume: Arc::new(volume),
            generation: 0,
            jobs: BTreeMap::new(),
            next_job: 1,
            store: None,
        }
    }

    /// Reopens the volume named in `state` and resumes with its seeds and model.
    pub fn restore(state: SessionState) -> Result<Self, ServiceError> {
        let volume = load_volume(&state.volume).map_err(|e| ServiceError::Internal(e.to_string()))?;
        if *volume.meta() != state.meta {
            return Err(ServiceError::Conflict(format!(
                "volume {} no longer matches the session ({:?} vs {:?})",
                state.volume.display(),
                volume.meta(),
                state.meta
            )));
        }
        let mut session = Self::with_volume(state.volume.clone(), volume, state.env_size);
        session.state = state;
        Ok(session)
    }

    pub fn load(path: &Path) -> Result<Self, ServiceError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ServiceError::Internal(format!("{}: {e}", path.display())))?;
        let state: SessionState = serde_json::from_str(&text)
            .map_err(|e| ServiceError::BadRequest(format!("{}: {e}", path.display())))?;
        Self::restore(state)
    }

    /// Writes the state to `path` after every change from now on.
    pub fn persist_to(&mut self, path: PathBuf) -> Result<(), ServiceError> {
        self.store = Some(path);
        self.save()
    }

    fn save(&self) -> Result<(), ServiceError> {
        let Some(path) = &self.store else {
            return Ok(());
        };
        let text = serde_json::to_string_pretty(&self.state).expect("session state serializes");
        std::fs::write(path, text)
            .map_err(|e| ServiceError::Internal(format!("{}: {e}", path.display())))
    }

    pub fn state(&self) -> &SessionState {
        &self.state
    }

    pub fn id(&self) -> &str {
        &self.state.id
    }

    pub fn volume(&self) -> &Arc<Volume> {
        &self.volume
    }

    pub fn meta(&self) -> &VolumeMeta {
        &self.state.meta
    }

    fn invalidate(&mut self) {
        self.generation += 1;
        if self.state.model.is_some() {
            self.state.model_stale = true;
        }
    }

    fn check_in_bounds(&self, positions: &[Position]) -> Result<(), ServiceError> {
        match positions.iter().find(|p| !self.state.meta.contains(**p)) {
            Some(p) => Err(ServiceError::BadRequest(format!(
                "position {p:?} outside volume of dims {:?}",
                self.state.meta.dims
            ))),
            None => Ok(()),
        }
    }

    /// Adds seeds whose `env_size` window lies inside the volume. Changing the
    /// window size re-checks the existing seeds too. Returns the number of new
    /// seeds.
    pub fn add_seeds(
        &mut self,
        positions: &[Position],
        env_size: Option<usize>,
    ) -> Result<usize, ServiceError> {
        let env = env_size.unwrap_or(self.state.env_size);
        check_env_size(env).map_err(|e| ServiceError::BadRequest(e.to_string()))?;
        self.check_in_bounds(positions)?;
        let mut all = self.state.seeds.clone();
        let mut added = 0;
        for p in positions {
            if !all.contains(p) {
                all.push(*p);
                added += 1;
            }
        }
        let border = border_seeds(&self.state.meta, &all, env);
        if !border.is_empty() {
            return Err(ServiceError::BorderSeeds {
                env_size: env,
                positions: border,
            });
        }
        let env_changed = env != self.state.env_size;
        if added > 0 || env_changed {
            self.state.seeds = all;
            self.state.env_size = env;
            self.invalidate();
            self.save()?;
        }
        Ok(added)
    }

    /// Removes the given seeds; returns how many were present.
    pub fn remove_seeds(&mut self, positions: &[Position]) -> Result<usize, ServiceError> {
        self.check_in_bounds(positions)?;
        let before = self.state.seeds.len();
        self.state.seeds.retain(|p| !positions.contains(p));
        let removed = before - self.state.seeds.len();
        if removed > 0 {
            self.invalidate();
            self.save()?;
        }
        Ok(removed)
    }

    pub fn clear_seeds(&mut self) -> Result<usize, ServiceError> {
        let removed = self.state.seeds.len();
        if removed > 0 {
            self.state.seeds.clear();
            self.invalidate();
            self.save()?;
        }
        Ok(removed)
    }

    /// Validates `params` against the current seeds and snapshots everything
    /// training needs.
    pub fn prepare_training(&self, params: &TrainParams) -> Result<TrainingJob, ServiceError> {
        if self.state.seeds.is_empty() {
            return Err(ServiceError::Conflict("no seeds to train on".into()));
        }
        let config = params
            .config(self.state.env_size)
            .map_err(ServiceError::BadRequest)?;
        let seeds = SeedSet::new(self.state.seeds.clone(), config.features.env_size());
        seeds.validate(&self.state.meta)?;
        Ok(TrainingJob {
            volume: Arc::clone(&self.volume),
            seeds,
            config,
            params: params.clone(),
            generation: self.generation,
        })
    }

    /// Stores a finished training run. The model is stale if the seeds were
    /// edited after [`Session::prepare_training`].
    pub fn commit_training(
        &mut self,
        job: &TrainingJob,
        outcome: TrainingOutcome,
    ) -> Result<TrainResponse, ServiceError> {
        let stale = job.generation != self.generation;
        if !stale {
            self.state.env_size = job.seeds.env_size;
        }
        self.state.model = Some(outcome.model.clone());
        self.state.report = outcome.report.clone();
        self.state.model_stale = stale;
        self.state.last_training = Some(job.params.clone());
        self.save()?;
        Ok(TrainResponse {
            model: outcome.model,
            report: outcome.report,
            seed_thresholds: outcome.seed_thresholds,
            stale,
        })
    }

    /// Trains synchronously on the current seeds.
    pub fn train(&mut self, params: &TrainParams) -> Result<TrainResponse, ServiceError> {
        let job = self.prepare_training(params)?;
        let outcome = faith_core::train_from_seeds(&job.volume, &job.seeds, &job.config)?;
        self.commit_training(&job, outcome)
    }

    /// The trained model, if it reflects the current seeds.
    pub fn current_model(&self) -> Result<&FaithModel, ServiceError> {
        match &self.state.model {
            None => Err(ServiceError::NotFound("no model has been trained".into())),
            Some(_) if self.state.model_stale => Err(ServiceError::NotFound(
                "model is stale: seeds changed since training".into(),
            )),
            Some(m) => Ok(m),
        }
    }

    /// Registers a segmentation job with the current model. The caller runs it.
    pub fn create_job(
        &mut self,
        out_path: PathBuf,
        options: SegmentOptions,
    ) -> Result<(Arc<Job>, FaithModel), ServiceError> {
        let model = self
            .current_model()
            .map_err(|e| ServiceError::Conflict(e.to_string()))?
            .clone();
        if options.slab_thickness == 0 || options.workers == 0 {
            return Err(ServiceError::BadRequest(
                "slab thickness and worker count must be at least 1".into(),
            ));
        }
        let id = self.next_job;
        self.next_job += 1;
        let job = Arc::new(Job::new(id, out_path, options));
        self.jobs.insert(id, Arc::clone(&job));
        Ok((job, model))
    }

    pub fn job(&self, id: u64) -> Result<Arc<Job>, ServiceError> {
        self.jobs
            .get(&id)
            .cloned()
            .ok_or_else(|| ServiceError::NotFound(format!("no job {id}")))
    }

    pub fn jobs(&self) -> impl Iterator<Item = &Arc<Job>> {
        self.jobs.values()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use faith_core::synthetic::{Phantom, PhantomSpec};

    fn phantom_session() -> (Session, Phantom) {
        let phantom = Phantom::generate(PhantomSpec::uint8(32)).unwrap();
        let volume = Volume::from_bytes(*phantom.volume.meta(), phantom.volume.bytes().to_vec())
            .unwrap();
        (
            Session::with_volume("phantom".into(), volume, DEFAULT_ENV_SIZE),
            phantom,
        )
    }

    #[test]
    fn seed_edits_mark_model_stale() {
        let (mut s, phantom) = phantom_session();
        let seeds = phantom.plane_seeds(9);
        assert_eq!(s.add_seeds(&seeds, None).unwrap(), 9);
        assert_eq!(s.add_seeds(&seeds[..2], None).unwrap(), 0);
        assert!(matches!(s.current_model(), Err(ServiceError::NotFound(_))));
        let resp = s.train(&TrainParams::new(150.0, 5)).unwrap();
        assert!(!resp.stale);
        assert_eq!(s.current_model().unwrap(), &resp.model);
        s.remove_seeds(&seeds[..1]).unwrap();
        assert!(s.state().model_stale);
        assert_eq!(s.current_model().unwrap_err().status(), 404);
        s.train(&TrainParams::new(150.0, 5)).unwrap();
        assert!(!s.state().model_stale);
    }

    #[test]
    fn rejects_border_and_out_of_bounds() {
        let (mut s, _) = phantom_session();
        let err = s.add_seeds(&[[16, 16, 16], [2, 16, 16]], Some(7)).unwrap_err();
        match err {
            ServiceError::BorderSeeds {
                env_size,
                positions,
            } => {
                assert_eq!(env_size, 7);
                assert_eq!(positions, vec![[2, 16, 16]]);
            }
            other => panic!("unexpected {other:?}"),
        }
        assert!(s.state().seeds.is_empty());
        assert_eq!(s.add_seeds(&[[16, 16, 32]], None).unwrap_err().status(), 400);
        assert_eq!(s.add_seeds(&[[16, 16, 16]], Some(4)).unwrap_err().status(), 400);

        s.add_seeds(&[[2, 16, 16]], Some(5)).unwrap();
        let err = s.add_seeds(&[], Some(7)).unwrap_err();
        assert_eq!(err.status(), 422);
        assert_eq!(s.state().env_size, 5);
        let err = s.train(&TrainParams::new(150.0, 7)).unwrap_err();
        assert_eq!(err.status(), 422);
    }

    #[test]
    fn training_without_seeds_conflicts() {
        let (s, _) = phantom_session();
        assert_eq!(
            s.prepare_training(&TrainParams::new(150.0, 5)).unwrap_err().status(),
            409
        );
    }

    #[test]
    fn edits_during_training_leave_model_stale() {
        let (mut s, phantom) = phantom_session();
        s.add_seeds(&phantom.plane_seeds(9), None).unwrap();
        let job = s.prepare_training(&TrainParams::new(150.0, 5)).unwrap();
        let outcome = faith_core::train_from_seeds(&job.volume, &job.seeds, &job.config).unwrap();
        s.add_seeds(&[[16, 16, 16]], None).unwrap();
        assert!(s.commit_training(&job, outcome).unwrap().stale);
        assert!(s.current_model().is_err());
    }

    #[test]
    fn state_round_trips_through_a_file() {
        let dir = tempfile::tempdir().unwrap();
        let phantom = Phantom::generate(PhantomSpec::uint8(24)).unwrap();
        let path = dir.path().join("vol");
        faith_core::volume::write_volume(&path, &phantom.volume).unwrap();
        let mut s = Session::open(&path, 5).unwrap();
        let store = dir.path().join("session.json");
        s.persist_to(store.clone()).unwrap();
        s.add_seeds(&phantom.plane_seeds(9), None).unwrap();
        s.train(&TrainParams::new(150.0, 5)).unwrap();
        let restored = Session::load(&store).unwrap();
        assert_eq!(restored.state(), s.state());
        assert!(restored.current_model().is_ok());
    }
}
