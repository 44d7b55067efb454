//! Staged training: point-map distillation on two views, then novel-view
//! and pose training with a growing number of views.

mod optim;
mod schedule;

use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::evalmetrics::{
    distill_metrics, evaluate_output, evaluate_scene, mean_rows, AggregateMetrics, EvalOptions, SceneRow,
};
use crate::gsplat::RenderConfig;
use crate::losses::{total_loss, ImageViews, LossContext, LossError, LossReport, LossWeights};
use crate::model::{Checkpoint, CheckpointError, Model, ModelConfig, ModelError, ModelOutput, Phase};
use crate::numerics::{ExecMode, ParamId, ParamStore, Tape};
use crate::nn::Binder;
use crate::scenegen::{generate_scene, max_clip_start, oracle_gaussians, sample_training_clip, SceneConfig, SceneError, SceneSample};

pub use optim::{AdamW, AdamWConfig};
pub use schedule::{IntervalRamp, LrPolicy, Stage, StageBudgets, TrainingSchedule};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("invalid schedule: {0}")]
    Schedule(String),
    #[error(transparent)]
    Scene(#[from] SceneError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("cannot resume: {0}")]
    Resume(String),
    #[error("non-finite {component} at step {step}; largest parameter norms: {}", fmt_norms(.norms))]
    NonFinite {
        step: usize,
        component: String,
        norms: Vec<(String, f64)>,
    },
}

fn fmt_norms(norms: &[(String, f64)]) -> String {
    norms.iter().map(|(n, v)| format!("{n}={v:.3e}")).collect::<Vec<_>>().join(", ")
}

/// Switches that remove one component of the full model or loss.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    NoModulation,
    NoCna,
    /// Camera tokens attend to every frame.
    FullCameraAttention,
    NoAlignLoss,
    /// Quaternion plus translation camera head.
    QuatTrans,
    NoIntrinsics,
}

impl Ablation {
    pub const ALL: [Ablation; 6] = [
        Ablation::NoModulation,
        Ablation::NoCna,
        Ablation::FullCameraAttention,
        Ablation::NoAlignLoss,
        Ablation::QuatTrans,
        Ablation::NoIntrinsics,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Ablation::NoModulation => "no_modulation",
            Ablation::NoCna => "no_cna",
            Ablation::FullCameraAttention => "full_camera_attention",
            Ablation::NoAlignLoss => "no_align_loss",
            Ablation::QuatTrans => "quat_trans",
            Ablation::NoIntrinsics => "no_intrinsics",
        }
    }

    pub fn apply(self, model: &mut ModelConfig, loss: &mut LossWeights) {
        match self {
            Ablation::NoModulation => model.flags.modulation = false,
            Ablation::NoCna => model.flags.cna = false,
            Ablation::FullCameraAttention => model.flags.causal_mask = false,
            Ablation::NoAlignLoss => loss.camera_align = false,
            Ablation::QuatTrans => model.flags.dq_param = false,
            Ablation::NoIntrinsics => model.flags.intrinsics = false,
        }
    }
}

impl std::str::FromStr for Ablation {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        Self::ALL.into_iter().find(|a| a.name() == s).ok_or_else(|| {
            let names: Vec<_> = Self::ALL.iter().map(|a| a.name()).collect();
            format!("unknown ablation `{s}`; valid: {}", names.join(", "))
        })
    }
}

/// Default curriculum settings, used when no explicit stages are given.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScheduleConfig {
    pub budgets: StageBudgets,
    pub lambda: f64,
    pub lr: LrPolicy,
    /// Explicit stages replace the default curriculum.
    pub stages: Option<Vec<Stage>>,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            budgets: StageBudgets::default(),
            lambda: 0.1,
            lr: LrPolicy::default(),
            stages: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub seed: u64,
    /// Fixed reduction order everywhere; required for bit-exact resume.
    pub deterministic: bool,
    /// Clips per optimizer step.
    pub batch: usize,
    /// Training scenes use seeds `train_seed_base..train_seed_base + train_scenes`.
    pub train_scenes: usize,
    pub train_seed_base: u64,
    pub val_seeds: Vec<u64>,
    /// Validate every this many steps and at stage ends; `0` only at stage
    /// ends.
    pub val_every: usize,
    /// Checkpoint every this many steps and at stage ends.
    pub checkpoint_every: usize,
    pub image_views: ImageViews,
    pub ablations: Vec<Ablation>,
    pub model: ModelConfig,
    pub scene: SceneConfig,
    pub schedule: ScheduleConfig,
    pub loss: LossWeights,
    pub optim: AdamWConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            deterministic: true,
            batch: 4,
            train_scenes: 8,
            train_seed_base: 0,
            val_seeds: vec![1000, 1001],
            val_every: 500,
            checkpoint_every: 1000,
            image_views: ImageViews::All,
            ablations: Vec::new(),
            model: ModelConfig::default(),
            scene: SceneConfig::default(),
            schedule: ScheduleConfig::default(),
            loss: LossWeights::default(),
            optim: AdamWConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn from_toml(text: &str) -> Result<Self, TrainError> {
        toml::from_str(text).map_err(|e| TrainError::Config(e.to_string()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Model and loss settings after ablations.
    pub fn effective(&self) -> (ModelConfig, LossWeights) {
        let (mut m, mut l) = (self.model.clone(), self.loss);
        for a in &self.ablations {
            a.apply(&mut m, &mut l);
        }
        (m, l)
    }

    pub fn schedule(&self) -> Result<TrainingSchedule, TrainError> {
        let s = match &self.schedule.stages {
            Some(stages) => TrainingSchedule { stages: stages.clone() },
            None => TrainingSchedule::default_for(
                self.model.max_views,
                self.schedule.budgets,
                self.schedule.lambda,
                self.schedule.lr,
            )?,
        };
        s.validate(self.model.max_views, Some(self.scene.trajectory_len))?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::Config(m));
        self.model.validate()?;
        self.scene.validate()?;
        if (self.scene.width, self.scene.height) != (self.model.width, self.model.height) {
            return bad(format!(
                "scenes are {}x{} but the model expects {}x{}",
                self.scene.width, self.scene.height, self.model.width, self.model.height
            ));
        }
        if self.batch == 0 || self.train_scenes == 0 {
            return bad("batch and train_scenes must be positive".into());
        }
        self.schedule()?;
        Ok(())
    }

    pub fn train_seeds(&self) -> Vec<u64> {
        (0..self.train_scenes as u64).map(|i| self.train_seed_base + i).collect()
    }

    pub fn exec_mode(&self) -> ExecMode {
        if self.deterministic {
            ExecMode::DETERMINISTIC
        } else {
            ExecMode::FAST
        }
    }

    pub fn render_config(&self) -> RenderConfig {
        RenderConfig {
            background: self.scene.background,
            ..RenderConfig::default()
        }
    }
}

/// Resumable position of the training loop.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    pub step: usize,
    pub rng_seed: String,
    pub rng_stream: u64,
    /// Decimal, since JSON numbers cannot hold a `u128`.
    pub rng_word_pos: String,
    pub best_psnr: Option<f64>,
    pub best_step: Option<usize>,
}

fn rng_state(rng: &ChaCha8Rng) -> (String, u64, String) {
    let seed: String = rng.get_seed().iter().map(|b| format!("{b:02x}")).collect();
    (seed, rng.get_stream(), rng.get_word_pos().to_string())
}

fn rng_restore(seed: &str, stream: u64, pos: &str) -> Result<ChaCha8Rng, TrainError> {
    let bad = || TrainError::Resume("corrupt RNG state".into());
    if seed.len() != 64 {
        return Err(bad());
    }
    let mut s = [0u8; 32];
    for (i, b) in s.iter_mut().enumerate() {
        *b = u8::from_str_radix(&seed[2 * i..2 * i + 2], 16).map_err(|_| bad())?;
    }
    let mut rng = ChaCha8Rng::from_seed(s);
    rng.set_stream(stream);
    rng.set_word_pos(pos.parse().map_err(|_| bad())?);
    Ok(rng)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub kind: String,
    pub step: usize,
    pub stage: usize,
    pub stage_name: String,
    pub views: usize,
    pub interval: usize,
    pub lr: f64,
    pub loss: f64,
    /// Batch-mean loss components.
    pub components: std::collections::BTreeMap<String, f64>,
    pub grad_norm: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DistillSummary {
    pub point_error: f64,
    pub point_error_frac: f64,
    pub confidence_auc: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ValidationSummary {
    pub kind: String,
    pub step: usize,
    pub phase: Phase,
    pub views: usize,
    pub interval: usize,
    pub scenes: Vec<u64>,
    pub nvs: Option<AggregateMetrics>,
    pub rows: Vec<SceneRow>,
    pub distill: Option<DistillSummary>,
}

/// Clips starting at frame 0 of each scene, for evaluation.
pub fn eval_clips(scenes: &[SceneSample], views: usize, interval: usize) -> Vec<SceneSample> {
    scenes.iter().map(|s| sample_training_clip(s, views, interval, 0)).collect()
}

/// Scores `predict` on the given clips without recording gradients.
pub fn validate_with(
    clips: &[SceneSample],
    phase: Phase,
    opts: &EvalOptions,
    mut predict: impl FnMut(&SceneSample, Phase) -> Result<ModelOutput, ModelError>,
) -> Result<ValidationSummary, ModelError> {
    let first = clips.first();
    let mut summary = ValidationSummary {
        kind: "val".into(),
        step: 0,
        phase,
        views: first.map_or(0, |c| c.frames.len()),
        interval: first.map_or(0, |c| c.frames.indices.get(1).map_or(0, |i| i - c.frames.indices[0])),
        scenes: clips.iter().map(|c| c.seed).collect(),
        nvs: None,
        rows: Vec::new(),
        distill: None,
    };
    match phase {
        Phase::Nvs => {
            for c in clips {
                summary.rows.push(evaluate_output(&predict(c, phase)?, c, opts));
            }
            summary.nvs = Some(mean_rows(&summary.rows));
        }
        Phase::Distill => {
            let mut d = DistillSummary::default();
            let mut aucs = Vec::new();
            for c in clips {
                let out = predict(c, phase)?;
                let m = distill_metrics(out.pointmap.as_ref().unwrap(), out.confidence.as_ref().unwrap(), c);
                d.point_error += m.point_error / clips.len() as f64;
                d.point_error_frac += m.point_error_frac / clips.len() as f64;
                aucs.extend(m.confidence_auc);
            }
            d.confidence_auc = (!aucs.is_empty()).then(|| aucs.iter().sum::<f64>() / aucs.len() as f64);
            summary.distill = Some(d);
        }
    }
    Ok(summary)
}

/// Model predictions scored on clips.
pub fn validate(model: &Model, store: &ParamStore, clips: &[SceneSample], phase: Phase, opts: &EvalOptions) -> Result<ValidationSummary, ModelError> {
    validate_with(clips, phase, opts, |c, ph| model.predict(store, &c.frames, ph))
}

/// Harness self-test: ground-truth-geometry splats and poses in place of
/// predictions.
pub fn validate_oracle(clips: &[SceneSample], footprint: f64, opts: &EvalOptions) -> ValidationSummary {
    validate_with(clips, Phase::Nvs, opts, |c, _| {
        Ok(ModelOutput {
            gaussians: oracle_gaussians(c, footprint, true),
            poses: c.poses.clone(),
            pointmap: None,
            confidence: None,
        })
    })
    .expect("oracle predictions are infallible")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub steps: usize,
    pub final_loss: f64,
    pub validations: Vec<ValidationSummary>,
    pub best_psnr: Option<f64>,
    pub checkpoints: Vec<PathBuf>,
}

pub struct Trainer {
    pub config: TrainConfig,
    pub schedule: TrainingSchedule,
    pub model: Model,
    pub store: ParamStore,
    pub optim: AdamW,
    pub state: TrainState,
    rng: ChaCha8Rng,
    loss_weights: LossWeights,
    scenes: Vec<SceneSample>,
    val_scenes: Vec<SceneSample>,
    out_dir: Option<PathBuf>,
    log: Option<BufWriter<File>>,
    pub records: Vec<StepRecord>,
    pub validations: Vec<ValidationSummary>,
    pub checkpoints: Vec<PathBuf>,
}

const DATA_STREAM: u64 = 1;

impl Trainer {
    /// Fresh run. With `out_dir`, writes `train_log.jsonl` and checkpoints
    /// there.
    pub fn new(config: TrainConfig, out_dir: Option<&Path>) -> Result<Self, TrainError> {
        config.validate()?;
        let schedule = config.schedule()?;
        let (model_cfg, loss_weights) = config.effective();
        let mut store = ParamStore::new();
        let model = Model::new(model_cfg, &mut store, &mut ChaCha8Rng::seed_from_u64(config.seed))?;
        let optim = AdamW::new(config.optim, &store);
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(DATA_STREAM);
        let (rng_seed, rng_stream, rng_word_pos) = rng_state(&rng);
        let scenes = config
            .train_seeds()
            .into_iter()
            .map(|s| generate_scene(s, &config.scene))
            .collect::<Result<Vec<_>, _>>()?;
        let val_scenes = config
            .val_seeds
            .iter()
            .map(|&s| generate_scene(s, &config.scene))
            .collect::<Result<Vec<_>, _>>()?;
        let mut t = Self {
            config,
            schedule,
            model,
            store,
            optim,
            state: TrainState {
                step: 0,
                rng_seed,
                rng_stream,
                rng_word_pos,
                best_psnr: None,
                best_step: None,
            },
            rng,
            loss_weights,
            scenes,
            val_scenes,
            out_dir: out_dir.map(Path::to_path_buf),
            log: None,
            records: Vec::new(),
            validations: Vec::new(),
            checkpoints: Vec::new(),
        };
        t.open_log(false)?;
        Ok(t)
    }

    /// Continues a run from a checkpoint written by [`Trainer::checkpoint`].
    /// The config must describe the same model.
    pub fn resume(config: TrainConfig, ckpt: &Checkpoint, out_dir: Option<&Path>) -> Result<Self, TrainError> {
        let mut t = Self::new(config, None)?;
        if ckpt.header.config != t.model.config {
            return Err(TrainError::Resume("checkpoint model config differs from the training config".into()));
        }
        let state: TrainState = serde_json::from_value(ckpt.header.extra["train_state"].clone())
            .map_err(|e| TrainError::Resume(format!("missing train state: {e}")))?;
        t.model.load_params(&mut t.store, ckpt)?;
        t.optim = AdamW::load(t.config.optim, &t.store, ckpt).map_err(TrainError::Resume)?;
        t.rng = rng_restore(&state.rng_seed, state.rng_stream, &state.rng_word_pos)?;
        t.state = state;
        t.out_dir = out_dir.map(Path::to_path_buf);
        t.open_log(true)?;
        Ok(t)
    }

    fn open_log(&mut self, append: bool) -> Result<(), TrainError> {
        let Some(dir) = &self.out_dir else { return Ok(()) };
        let io = |path: &Path| {
            let path = path.to_path_buf();
            move |source| TrainError::Io { path, source }
        };
        std::fs::create_dir_all(dir.join("checkpoints")).map_err(io(dir))?;
        let path = dir.join("train_log.jsonl");
        let f = OpenOptions::new()
            .create(true)
            .write(true)
            .append(append)
            .truncate(!append)
            .open(&path)
            .map_err(io(&path))?;
        self.log = Some(BufWriter::new(f));
        Ok(())
    }

    fn write_log(&mut self, line: &impl Serialize) -> Result<(), TrainError> {
        if let Some(log) = &mut self.log {
            let path = self.out_dir.clone().unwrap_or_default().join("train_log.jsonl");
            let io = |source| TrainError::Io { path: path.clone(), source };
            serde_json::to_writer(&mut *log, line).map_err(|e| io(e.into()))?;
            log.write_all(b"\n").map_err(io)?;
            log.flush().map_err(io)?;
        }
        Ok(())
    }

    pub fn is_done(&self) -> bool {
        self.state.step >= self.schedule.total_steps()
    }

    pub fn train_scenes(&self) -> &[SceneSample] {
        &self.scenes
    }

    pub fn val_scenes(&self) -> &[SceneSample] {
        &self.val_scenes
    }

    fn sample_clip(&mut self, views: usize, interval: usize) -> SceneSample {
        let i = self.rng.random_range(0..self.scenes.len());
        let scene = &self.scenes[i];
        let max = max_clip_start(scene.frames.len(), views, interval).expect("schedule fits the trajectory");
        let start = self.rng.random_range(0..=max);
        sample_training_clip(scene, views, interval, start)
    }

    fn non_finite(&self, step: usize, component: &str) -> TrainError {
        let mut norms = self.store.value_norms();
        norms.sort_by(|a, b| b.1.total_cmp(&a.1));
        norms.truncate(5);
        TrainError::NonFinite {
            step,
            component: component.to_string(),
            norms,
        }
    }

    /// One optimizer step over a batch of clips.
    pub fn step(&mut self) -> Result<StepRecord, TrainError> {
        let step = self.state.step;
        let (si, ss) = self
            .schedule
            .locate(step)
            .ok_or_else(|| TrainError::Schedule("training already finished".into()))?;
        let stage = self.schedule.stages[si].clone();
        let interval = stage.interval.at(ss);
        let lr = stage.lr.at(ss, stage.steps);
        let weights = LossWeights {
            camera: stage.lambda,
            ..self.loss_weights
        };
        let mut ctx = LossContext::for_scene(&self.config.scene, weights);
        ctx.views = self.config.image_views;
        let mode = self.config.exec_mode();

        self.store.zero_grads();
        let mut active: Vec<ParamId> = Vec::new();
        let mut reports: Vec<LossReport> = Vec::new();
        for _ in 0..self.config.batch {
            let clip = self.sample_clip(stage.views, interval);
            let tape = Tape::with_mode(mode);
            let p = Binder::new(&tape, &self.store);
            let out = self.model.forward(&p, &clip.frames, stage.phase);
            let (loss, report) = total_loss(&out, &clip, stage.phase, &ctx)?;
            if let Some((k, _)) = report.components.iter().find(|(_, v)| !v.is_finite()) {
                return Err(self.non_finite(step, k));
            }
            let grads = tape.backward(loss).map_err(|e| self.non_finite(step, &format!("gradient ({e})")))?;
            active.extend(grads.params().map(|(id, _)| id));
            self.store.accumulate(&grads);
            reports.push(report);
        }
        active.sort_unstable_by_key(|id| id.index());
        active.dedup();
        self.store.scale_grads(1.0 / self.config.batch as f64);
        let grad_norm = self.optim.step(&mut self.store, &active, lr);
        if !grad_norm.is_finite() {
            return Err(self.non_finite(step, "gradient norm"));
        }

        let n = reports.len() as f64;
        let mut components = std::collections::BTreeMap::new();
        for r in &reports {
            for (k, v) in &r.components {
                *components.entry(k.clone()).or_insert(0.0) += v / n;
            }
        }
        let record = StepRecord {
            kind: "step".into(),
            step,
            stage: si,
            stage_name: stage.name(),
            views: stage.views,
            interval,
            lr,
            loss: reports.iter().map(|r| r.total).sum::<f64>() / n,
            components,
            grad_norm,
        };
        self.state.step += 1;
        let (s, st, wp) = rng_state(&self.rng);
        (self.state.rng_seed, self.state.rng_stream, self.state.rng_word_pos) = (s, st, wp);
        self.write_log(&record)?;
        self.records.push(record.clone());

        let stage_end = ss + 1 == stage.steps;
        let done = self.state.step;
        let every = |k: usize| k > 0 && done % k == 0;
        if stage_end || every(self.config.val_every) {
            self.run_validation(&stage)?;
        }
        if stage_end || every(self.config.checkpoint_every) {
            self.save_checkpoint(&stage)?;
        }
        Ok(record)
    }

    fn run_validation(&mut self, stage: &Stage) -> Result<(), TrainError> {
        if self.val_scenes.is_empty() {
            return Ok(());
        }
        let clips = eval_clips(&self.val_scenes, stage.views, stage.interval.end);
        let opts = EvalOptions {
            render: self.config.render_config(),
            ..EvalOptions::default()
        };
        let mut v = validate(&self.model, &self.store, &clips, stage.phase, &opts)?;
        v.step = self.state.step;
        if let Some(m) = &v.nvs {
            if self.state.best_psnr.is_none_or(|b| m.target_psnr > b) {
                self.state.best_psnr = Some(m.target_psnr);
                self.state.best_step = Some(self.state.step);
            }
        }
        log::info!("validation at step {}: {}", v.step, serde_json::to_string(&v.nvs.as_ref().map(|m| m.target_psnr)).unwrap_or_default());
        self.write_log(&v)?;
        self.validations.push(v);
        Ok(())
    }

    /// Snapshot of parameters, optimizer moments and loop state.
    pub fn checkpoint(&self) -> Checkpoint {
        let phase = self
            .schedule
            .locate(self.state.step.saturating_sub(1))
            .map_or(Phase::Nvs, |(i, _)| self.schedule.stages[i].phase);
        let mut ck = Checkpoint::from_store(self.model.config.clone(), phase, self.config.seed, &self.store);
        self.optim.save(&self.store, &mut ck);
        let ablations: Vec<&str> = self.config.ablations.iter().map(|a| a.name()).collect();
        ck.header.extra = serde_json::json!({
            "train_state": self.state,
            "train_config": self.config,
            "ablations": ablations,
        });
        ck
    }

    fn save_checkpoint(&mut self, stage: &Stage) -> Result<(), TrainError> {
        let Some(dir) = self.out_dir.clone() else { return Ok(()) };
        let ck = self.checkpoint();
        let path = dir.join("checkpoints").join(format!("step_{:06}.ckpt", self.state.step));
        ck.save(&path)?;
        ck.save(&dir.join("last.ckpt"))?;
        if self.state.best_step == Some(self.state.step) {
            ck.save(&dir.join("best.ckpt"))?;
        }
        log::info!("checkpoint {} ({})", path.display(), stage.name());
        self.checkpoints.push(path);
        Ok(())
    }

    /// Runs until `step` (or the end of the schedule).
    pub fn run_until(&mut self, step: usize) -> Result<(), TrainError> {
        while self.state.step < step.min(self.schedule.total_steps()) {
            self.step()?;
        }
        Ok(())
    }

    pub fn run(&mut self) -> Result<TrainSummary, TrainError> {
        self.run_until(usize::MAX)?;
        Ok(self.summary())
    }

    pub fn summary(&self) -> TrainSummary {
        TrainSummary {
            steps: self.state.step,
            final_loss: self.records.last().map_or(f64::NAN, |r| r.loss),
            validations: self.validations.clone(),
            best_psnr: self.state.best_psnr,
            checkpoints: self.checkpoints.clone(),
        }
    }

    /// Scores the current model on training-scene clips.
    pub fn evaluate_train_scenes(&self, views: usize, interval: usize, opts: &EvalOptions) -> Result<Vec<SceneRow>, ModelError> {
        eval_clips(&self.scenes, views, interval)
            .iter()
            .map(|c| evaluate_scene(&self.model, &self.store, c, opts))
            .collect()
    }
}

/// Runs a whole schedule from `config`.
pub fn train(config: TrainConfig, out_dir: Option<&Path>) -> Result<TrainSummary, TrainError> {
    Trainer::new(config, out_dir)?.run()
}
