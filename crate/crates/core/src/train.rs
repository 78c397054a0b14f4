//! Run configuration, the training loop and the loss-ablation experiment.
//!
//! Training is fully deterministic for a given config: the data order, the
//! dropout masks and the parameter initialization all derive from
//! `schedule.seed`. Per-clip gradients are computed in parallel and summed in
//! batch order, so the thread count never changes the result.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{load_manifest, ClipSample, DatasetManifest};
use crate::error::{Error, IoContext, Result};
use crate::eval::{evaluate_truths, EvalConfig, EvalReport, GroundTruth, Prediction};
use crate::losses::{total_loss_with_grad, LocatorLossKind, LossBreakdown, LossConfig, Targets};
use crate::model::{save_checkpoint, EncoderKind, Meldae, ModelConfig, ParamGroup, ParamStore};
use crate::synth::{self, SynthConfig, MANIFEST_FILE};
use crate::tape::Mat;

pub const TRAINLOG_FILE: &str = "trainlog.csv";
pub const TRAINLOG_HEADER: &str =
    "epoch,total,l_me,l_state,l_loc,l_overlap,l_boundary,acc_me,acc_state,f1_speaking,f1_listening,f1_dr,seconds";
pub const BEST_CHECKPOINT: &str = "checkpoint_best.json";
pub const FINAL_CHECKPOINT: &str = "checkpoint_final.json";

/// Largest tolerated relative violation of the loss composition identities.
pub const COMPOSITION_TOLERANCE: f64 = 1e-6;

// ---------------------------------------------------------------------------
// Configuration

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// A single manifest, split into train and eval by `train_fraction`.
    pub manifest: Option<PathBuf>,
    /// Pre-split manifests; take precedence over `manifest`.
    pub train_manifest: Option<PathBuf>,
    pub eval_manifest: Option<PathBuf>,
    /// Generate a corpus into `<output_dir>/data` when no manifest is given.
    pub synth: Option<SynthConfig>,
    pub train_fraction: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            manifest: None,
            train_manifest: None,
            eval_manifest: None,
            synth: Some(SynthConfig::default()),
            train_fraction: 0.8,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Adamw,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub lr_backbone: f64,
    pub lr_new: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            kind: OptimizerKind::Adamw,
            lr_backbone: 1e-5,
            lr_new: 5e-6,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Global gradient-norm ceiling; absent means no clipping.
    pub grad_clip_norm: Option<f64>,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        ScheduleConfig { epochs: 30, batch_size: 8, seed: 42, grad_clip_norm: Some(1.0) }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub output_dir: PathBuf,
    pub model: ModelConfig,
    pub loss: LossConfig,
    pub data: DataConfig,
    pub optimizer: OptimizerConfig,
    pub schedule: ScheduleConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            output_dir: PathBuf::from("runs/default"),
            model: ModelConfig::default(),
            loss: LossConfig::default(),
            data: DataConfig::default(),
            optimizer: OptimizerConfig::default(),
            schedule: ScheduleConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).at(path)?;
        Self::from_toml_str(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string_pretty(self).expect("run config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.loss.validate()?;
        self.eval.validate()?;
        let o = &self.optimizer;
        if !(o.lr_backbone > 0.0 && o.lr_new > 0.0) {
            return Err(Error::Config("learning rates must be positive".into()));
        }
        if !(o.weight_decay >= 0.0)
            || !(0.0..1.0).contains(&o.beta1)
            || !(0.0..1.0).contains(&o.beta2)
            || !(o.eps > 0.0)
        {
            return Err(Error::Config("optimizer needs weight_decay ≥ 0, betas in [0, 1), eps > 0".into()));
        }
        let s = &self.schedule;
        if s.epochs == 0 || s.batch_size == 0 {
            return Err(Error::Config("epochs and batch_size must be at least 1".into()));
        }
        if let Some(c) = s.grad_clip_norm {
            if !(c > 0.0) {
                return Err(Error::Config(format!("grad_clip_norm must be positive, got {c}")));
            }
        }
        let d = &self.data;
        if d.train_manifest.is_some() != d.eval_manifest.is_some() {
            return Err(Error::Config("train_manifest and eval_manifest must be given together".into()));
        }
        if d.train_manifest.is_none() && d.manifest.is_none() {
            let Some(synth) = &d.synth else {
                return Err(Error::Config("no data source: give a manifest or a synth section".into()));
            };
            synth.validate()?;
            if self.model.encoder_kind == EncoderKind::PassthroughFeatures && synth.feature_dim != self.model.input_dim
            {
                return Err(Error::Config(format!(
                    "synthetic feature_dim {} does not match model input_dim {}",
                    synth.feature_dim, self.model.input_dim
                )));
            }
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Data

#[derive(Clone, Debug)]
pub struct PreparedData {
    pub train_manifest: DatasetManifest,
    pub eval_manifest: DatasetManifest,
    pub train: Vec<ClipSample>,
    pub eval: Vec<ClipSample>,
    pub split_warning: Option<String>,
}

/// Resolves the configured data source into loaded train and eval clips.
pub fn prepare_data(cfg: &RunConfig) -> Result<PreparedData> {
    let d = &cfg.data;
    let (train_manifest, eval_manifest, split_warning) = match (&d.train_manifest, &d.eval_manifest, &d.manifest) {
        (Some(t), Some(e), _) => (load_manifest(t)?, load_manifest(e)?, None),
        (_, _, Some(m)) => {
            let s = synth::split(&load_manifest(m)?, d.train_fraction, cfg.schedule.seed)?;
            (s.train, s.eval, s.warning)
        }
        _ => {
            let synth_cfg = d.synth.as_ref().ok_or_else(|| Error::Config("no data source".into()))?;
            let dir = cfg.output_dir.join("data");
            fs::create_dir_all(&dir).at(&dir)?;
            let manifest = synth::generate(synth_cfg, &dir)?;
            let s = synth::split(&manifest, d.train_fraction, cfg.schedule.seed)?;
            (s.train, s.eval, s.warning)
        }
    };
    if let Some(w) = &split_warning {
        log::warn!("{w}");
    }
    let train_ids: std::collections::HashSet<&str> = train_manifest.clips.iter().map(|c| c.clip_id.as_str()).collect();
    if let Some(dup) = eval_manifest.clips.iter().find(|c| train_ids.contains(c.clip_id.as_str())) {
        return Err(Error::Data(format!("clip `{}` is in both the train and eval sets", dup.clip_id)));
    }
    if train_manifest.is_empty() || eval_manifest.is_empty() {
        return Err(Error::Data("train and eval sets must both be non-empty".into()));
    }
    let train = train_manifest.load_clips()?;
    let eval = eval_manifest.load_clips()?;
    Ok(PreparedData { train_manifest, eval_manifest, train, eval, split_warning })
}

pub fn targets(clip: &ClipSample, loss: &LossConfig) -> Targets {
    Targets {
        has_me: clip.has_me,
        is_speaking: clip.state.is_speaking(),
        frame_mask: clip.frame_mask(),
        boundary_weights: clip.boundary_weights(loss.w_boundary),
    }
}

/// Inference (no dropout) over a set of clips.
pub fn predict(model: &Meldae, clips: &[ClipSample]) -> Result<Vec<Prediction>> {
    clips
        .par_iter()
        .map(|c| {
            let out = model.forward(c)?;
            Ok(Prediction { clip_id: c.clip_id.clone(), p_me: out.p_me, p_state: out.p_state, s_loc: out.s_loc })
        })
        .collect()
}

pub fn evaluate_model(model: &Meldae, clips: &[ClipSample], cfg: &EvalConfig) -> Result<EvalReport> {
    let preds = predict(model, clips)?;
    let truths: Vec<GroundTruth> = clips.iter().map(GroundTruth::from).collect();
    evaluate_truths(&preds, &truths, cfg)
}

// ---------------------------------------------------------------------------
// Optimizer

/// Parameter indices per optimizer group.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamGroups {
    pub backbone: Vec<usize>,
    pub new: Vec<usize>,
}

impl ParamGroups {
    /// Partitions the store and checks the partition is exhaustive and
    /// disjoint with both groups non-empty.
    pub fn of(store: &ParamStore) -> Result<Self> {
        let mut backbone = Vec::new();
        let mut new = Vec::new();
        for (i, p) in store.iter().enumerate() {
            match p.group {
                ParamGroup::Backbone => backbone.push(i),
                ParamGroup::New => new.push(i),
            }
        }
        let groups = ParamGroups { backbone, new };
        let mut seen = vec![0usize; store.len()];
        for &i in groups.backbone.iter().chain(&groups.new) {
            seen[i] += 1;
        }
        if seen.iter().any(|&c| c != 1) || groups.backbone.is_empty() || groups.new.is_empty() {
            return Err(Error::Invariant(
                "optimizer groups must partition every parameter into two non-empty sets".into(),
            ));
        }
        Ok(groups)
    }
}

/// Adam with decoupled weight decay and one learning rate per group.
#[derive(Clone, Debug)]
pub struct AdamW {
    cfg: OptimizerConfig,
    lrs: Vec<f64>,
    m: Vec<Mat>,
    v: Vec<Mat>,
    t: i32,
}

impl AdamW {
    pub fn new(cfg: &OptimizerConfig, store: &ParamStore) -> Result<Self> {
        let groups = ParamGroups::of(store)?;
        let mut lrs = vec![0.0; store.len()];
        for &i in &groups.backbone {
            lrs[i] = cfg.lr_backbone;
        }
        for &i in &groups.new {
            lrs[i] = cfg.lr_new;
        }
        let zeros: Vec<Mat> = store.iter().map(|p| Mat::zeros(p.value.dim())).collect();
        Ok(AdamW { cfg: cfg.clone(), lrs, m: zeros.clone(), v: zeros, t: 0 })
    }

    pub fn learning_rates(&self) -> &[f64] {
        &self.lrs
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &[Mat]) {
        self.t += 1;
        let (b1, b2, eps, wd) = (self.cfg.beta1, self.cfg.beta2, self.cfg.eps, self.cfg.weight_decay);
        let c1 = 1.0 - b1.powi(self.t);
        let c2 = 1.0 - b2.powi(self.t);
        for (i, p) in store.iter_mut().enumerate() {
            let lr = self.lrs[i];
            let g = &grads[i];
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            ndarray::Zip::from(&mut p.value).and(m).and(v).and(g).for_each(|w, m, v, &g| {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                let update = (*m / c1) / ((*v / c2).sqrt() + eps);
                *w -= lr * (update + wd * *w);
            });
        }
    }
}

pub fn global_norm(grads: &[Mat]) -> f64 {
    grads.iter().flat_map(|g| g.iter()).map(|x| x * x).sum::<f64>().sqrt()
}

/// Rescales `grads` so their global norm is at most `max_norm`; returns the
/// norm before clipping.
pub fn clip_grad_norm(grads: &mut [Mat], max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if norm > max_norm {
        let s = max_norm / norm;
        for g in grads.iter_mut() {
            g.mapv_inplace(|x| x * s);
        }
    }
    norm
}

// ---------------------------------------------------------------------------
// Logs

/// One optimizer step.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StepRecord {
    pub epoch: usize,
    pub batch: usize,
    /// Batch mean.
    pub loss: LossBreakdown,
    /// Worst composition-identity violation over the clips of the batch.
    pub composition_error: f64,
    pub grad_norm: f64,
    pub clipped_norm: f64,
}

/// One completed epoch: train-loss means and held-out metrics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainRecord {
    pub epoch: usize,
    pub loss: LossBreakdown,
    pub acc_me: f64,
    pub acc_state: f64,
    pub f1_speaking: f64,
    pub f1_listening: f64,
    pub f1_dr: f64,
    pub seconds: f64,
}

impl TrainRecord {
    pub fn csv_line(&self) -> String {
        let l = &self.loss;
        format!(
            "{},{},{},{},{},{},{},{},{},{},{},{},{}",
            self.epoch,
            l.total,
            l.l_me,
            l.l_state,
            l.l_loc,
            l.l_overlap,
            l.l_boundary,
            self.acc_me,
            self.acc_state,
            self.f1_speaking,
            self.f1_listening,
            self.f1_dr,
            self.seconds
        )
    }
}

/// Parses a `trainlog.csv` written by [`train`].
pub fn read_trainlog(path: &Path) -> Result<Vec<TrainRecord>> {
    let text = fs::read_to_string(path).at(path)?;
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h == TRAINLOG_HEADER => {}
        _ => return Err(Error::Schema(format!("{}: unexpected trainlog header", path.display()))),
    }
    lines
        .map(|(i, line)| {
            let bad = |msg: String| Error::Parse { path: path.to_path_buf(), line: i + 1, msg };
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 13 {
                return Err(bad(format!("expected 13 fields, found {}", f.len())));
            }
            let num = |k: usize| f[k].parse::<f64>().map_err(|e| bad(format!("field {k}: {e}")));
            Ok(TrainRecord {
                epoch: f[0].parse().map_err(|e| bad(format!("epoch: {e}")))?,
                loss: LossBreakdown {
                    total: num(1)?,
                    l_me: num(2)?,
                    l_state: num(3)?,
                    l_loc: num(4)?,
                    l_overlap: num(5)?,
                    l_boundary: num(6)?,
                },
                acc_me: num(7)?,
                acc_state: num(8)?,
                f1_speaking: num(9)?,
                f1_listening: num(10)?,
                f1_dr: num(11)?,
                seconds: num(12)?,
            })
        })
        .collect()
}

struct LogWriter {
    path: PathBuf,
    w: BufWriter<fs::File>,
}

impl LogWriter {
    fn create(path: PathBuf) -> Result<Self> {
        let file = fs::File::create(&path).at(&path)?;
        let mut w = BufWriter::new(file);
        writeln!(w, "{TRAINLOG_HEADER}").at(&path)?;
        w.flush().at(&path)?;
        Ok(LogWriter { path, w })
    }

    fn append(&mut self, rec: &TrainRecord) -> Result<()> {
        writeln!(self.w, "{}", rec.csv_line()).at(&self.path)?;
        self.w.flush().at(&self.path)
    }
}

// ---------------------------------------------------------------------------
// Training

pub struct TrainOutcome {
    /// Parameters after the last epoch.
    pub model: Meldae,
    /// Held-out metrics before the first update.
    pub initial_eval: EvalReport,
    pub log: Vec<TrainRecord>,
    pub steps: Vec<StepRecord>,
    /// Held-out report of the final model, ledger included.
    pub final_eval: EvalReport,
    pub best_epoch: usize,
    pub best_f1_dr: f64,
    pub output_dir: PathBuf,
}

impl TrainOutcome {
    pub fn trainlog_path(&self) -> PathBuf {
        self.output_dir.join(TRAINLOG_FILE)
    }

    pub fn best_checkpoint(&self) -> PathBuf {
        self.output_dir.join(BEST_CHECKPOINT)
    }

    pub fn final_checkpoint(&self) -> PathBuf {
        self.output_dir.join(FINAL_CHECKPOINT)
    }
}

/// Resolves the data and trains.
pub fn train(cfg: &RunConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    let data = prepare_data(cfg)?;
    train_on(cfg, &data)
}

fn dropout_rng(seed: u64, epoch: usize, position: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xd5a6_1f0e_7c3b_9a41);
    rng.set_stream(((epoch as u64) << 32) | position as u64);
    rng
}

/// Trains on already-loaded data, writing the log and checkpoints under
/// `cfg.output_dir`.
pub fn train_on(cfg: &RunConfig, data: &PreparedData) -> Result<TrainOutcome> {
    cfg.validate()?;
    let out = cfg.output_dir.clone();
    fs::create_dir_all(&out).at(&out)?;
    let seed = cfg.schedule.seed;
    let mut model = Meldae::new(cfg.model.clone(), seed)?;
    let mut opt = AdamW::new(&cfg.optimizer, model.params())?;
    let train_targets: Vec<Targets> = data.train.iter().map(|c| targets(c, &cfg.loss)).collect();

    let mut initial_eval = evaluate_model(&model, &data.eval, &cfg.eval)?;
    initial_eval.match_ledger.clear();
    log::info!("epoch 0: f1_dr {:.4}, acc_me {:.4}", initial_eval.f1_dr, initial_eval.acc_me);

    let mut writer = LogWriter::create(out.join(TRAINLOG_FILE))?;
    let mut log_records = Vec::with_capacity(cfg.schedule.epochs);
    let mut steps = Vec::new();
    let mut best = (0usize, f64::NEG_INFINITY);
    let mut order: Vec<usize> = (0..data.train.len()).collect();

    for epoch in 1..=cfg.schedule.epochs {
        let started = Instant::now();
        let mut shuffle_rng = ChaCha8Rng::seed_from_u64(seed);
        shuffle_rng.set_stream(epoch as u64);
        order.sort_unstable();
        order.shuffle(&mut shuffle_rng);

        let mut epoch_losses = Vec::with_capacity(order.len());
        for (batch, chunk) in order.chunks(cfg.schedule.batch_size).enumerate() {
            let offset = batch * cfg.schedule.batch_size;
            let per_clip: Vec<(LossBreakdown, Vec<Mat>)> = chunk
                .par_iter()
                .enumerate()
                .map(|(k, &i)| {
                    let mut rng = dropout_rng(seed, epoch, offset + k);
                    let trace = model.trace(&data.train[i].payload, Some(&mut rng))?;
                    let o = trace.output();
                    let (b, g) = total_loss_with_grad(o.p_me, o.p_state, &o.s_loc, &train_targets[i], &cfg.loss)?;
                    Ok((b, trace.backward(&g)))
                })
                .collect::<Result<_>>()?;

            if per_clip.iter().any(|(b, _)| !b.is_finite()) {
                let clips: Vec<String> = chunk.iter().map(|&i| data.train[i].clip_id.clone()).collect();
                log::error!("non-finite loss at epoch {epoch}, batch {batch}: {clips:?}");
                return Err(Error::NonFiniteLoss { epoch, batch, clips });
            }
            let composition_error = per_clip.iter().map(|(b, _)| b.composition_error(&cfg.loss)).fold(0.0f64, f64::max);
            if composition_error > COMPOSITION_TOLERANCE {
                return Err(Error::Invariant(format!(
                    "loss composition off by {composition_error:e} at epoch {epoch}, batch {batch}"
                )));
            }

            let n = per_clip.len() as f64;
            let mut grads: Vec<Mat> = model.params().iter().map(|p| Mat::zeros(p.value.dim())).collect();
            let mut batch_losses = Vec::with_capacity(per_clip.len());
            for (b, g) in per_clip {
                for (acc, gi) in grads.iter_mut().zip(&g) {
                    acc.scaled_add(1.0 / n, gi);
                }
                batch_losses.push(b);
            }
            let grad_norm = match cfg.schedule.grad_clip_norm {
                Some(c) => clip_grad_norm(&mut grads, c),
                None => global_norm(&grads),
            };
            let clipped_norm = global_norm(&grads);
            opt.step(model.params_mut(), &grads);

            steps.push(StepRecord {
                epoch,
                batch,
                loss: LossBreakdown::mean(&batch_losses),
                composition_error,
                grad_norm,
                clipped_norm,
            });
            epoch_losses.extend(batch_losses);
        }

        let report = evaluate_model(&model, &data.eval, &cfg.eval)?;
        let rec = TrainRecord {
            epoch,
            loss: LossBreakdown::mean(&epoch_losses),
            acc_me: report.acc_me,
            acc_state: report.acc_state,
            f1_speaking: report.f1_speaking,
            f1_listening: report.f1_listening,
            f1_dr: report.f1_dr,
            seconds: started.elapsed().as_secs_f64(),
        };
        writer.append(&rec)?;
        log::info!(
            "epoch {epoch}: loss {:.4}, f1_dr {:.4}, acc_me {:.4}, acc_state {:.4}",
            rec.loss.total,
            rec.f1_dr,
            rec.acc_me,
            rec.acc_state
        );
        if rec.f1_dr > best.1 {
            best = (epoch, rec.f1_dr);
            save_checkpoint(&model, &out.join(BEST_CHECKPOINT))?;
        }
        log_records.push(rec);
    }

    save_checkpoint(&model, &out.join(FINAL_CHECKPOINT))?;
    let final_eval = evaluate_model(&model, &data.eval, &cfg.eval)?;
    Ok(TrainOutcome {
        model,
        initial_eval,
        log: log_records,
        steps,
        final_eval,
        best_epoch: best.0,
        best_f1_dr: best.1,
        output_dir: out,
    })
}

// ---------------------------------------------------------------------------
// Loss ablation

/// First epoch whose f1_dr reaches `fraction` of the final value. A curve
/// that ends at zero never converges to anything and yields `None`.
pub fn epochs_to_fraction(f1_dr: &[f64], fraction: f64) -> Option<usize> {
    let last = *f1_dr.last()?;
    if last <= 0.0 {
        return None;
    }
    f1_dr.iter().position(|&v| v >= fraction * last).map(|i| i + 1)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AblationRun {
    pub kind: LocatorLossKind,
    pub initial_f1_dr: f64,
    pub log: Vec<TrainRecord>,
    pub final_f1_dr: f64,
    pub best_f1_dr: f64,
    pub epochs_to_90: Option<usize>,
}

impl AblationRun {
    pub fn curve(&self) -> Vec<f64> {
        self.log.iter().map(|r| r.f1_dr).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AblationOutcome {
    pub runs: Vec<AblationRun>,
    pub curves_path: PathBuf,
    pub table_path: PathBuf,
    pub plot_path: PathBuf,
}

impl AblationOutcome {
    pub fn run(&self, kind: LocatorLossKind) -> Option<&AblationRun> {
        self.runs.iter().find(|r| r.kind == kind)
    }
}

pub const ABLATION_CURVES: &str = "ablation_curves.csv";
pub const ABLATION_TABLE: &str = "ablation_final.csv";
pub const ABLATION_PLOT: &str = "ablation.svg";

/// One training run per locator loss kind on shared data, initialization
/// and seed. Each run writes to `<output_dir>/<kind>/`; the comparison
/// table, curves and plot go to `<output_dir>`.
pub fn ablate_losses(cfg: &RunConfig, kinds: &[LocatorLossKind]) -> Result<AblationOutcome> {
    cfg.validate()?;
    if kinds.is_empty() {
        return Err(Error::Config("no loss kinds to compare".into()));
    }
    let data = prepare_data(cfg)?;
    let mut runs = Vec::with_capacity(kinds.len());
    for &kind in kinds {
        log::info!("ablation run: {}", kind.name());
        let mut run_cfg = cfg.clone();
        run_cfg.loss.locator_loss_kind = kind;
        run_cfg.output_dir = cfg.output_dir.join(kind.name());
        let outcome = train_on(&run_cfg, &data)?;
        let curve: Vec<f64> = outcome.log.iter().map(|r| r.f1_dr).collect();
        runs.push(AblationRun {
            kind,
            initial_f1_dr: outcome.initial_eval.f1_dr,
            final_f1_dr: *curve.last().expect("at least one epoch"),
            best_f1_dr: outcome.best_f1_dr,
            epochs_to_90: epochs_to_fraction(&curve, 0.9),
            log: outcome.log,
        });
    }

    let dir = &cfg.output_dir;
    let curves_path = dir.join(ABLATION_CURVES);
    let table_path = dir.join(ABLATION_TABLE);
    let plot_path = dir.join(ABLATION_PLOT);

    let mut curves = format!("epoch,{}\n", runs.iter().map(|r| r.kind.name()).collect::<Vec<_>>().join(","));
    curves += &format!("0,{}\n", runs.iter().map(|r| r.initial_f1_dr.to_string()).collect::<Vec<_>>().join(","));
    for e in 0..cfg.schedule.epochs {
        curves +=
            &format!("{},{}\n", e + 1, runs.iter().map(|r| r.log[e].f1_dr.to_string()).collect::<Vec<_>>().join(","));
    }
    fs::write(&curves_path, curves).at(&curves_path)?;

    let mut table = String::from("kind,final_f1_dr,best_f1_dr,epochs_to_90\n");
    for r in &runs {
        let e90 = r.epochs_to_90.map(|e| e.to_string()).unwrap_or_default();
        table += &format!("{},{},{},{}\n", r.kind.name(), r.final_f1_dr, r.best_f1_dr, e90);
    }
    fs::write(&table_path, table).at(&table_path)?;

    let series: Vec<(String, Vec<f64>)> = runs
        .iter()
        .map(|r| {
            let mut ys = vec![r.initial_f1_dr];
            ys.extend(r.curve());
            (r.kind.name().to_string(), ys)
        })
        .collect();
    fs::write(&plot_path, svg_line_plot("eval f1_dr by epoch", "epoch", "f1_dr", &series)).at(&plot_path)?;

    Ok(AblationOutcome { runs, curves_path, table_path, plot_path })
}

const PALETTE: [&str; 6] = ["#d62728", "#1f77b4", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b"];

/// A minimal SVG line chart; x is the sample index, y is clamped to [0, 1].
pub fn svg_line_plot(title: &str, x_label: &str, y_label: &str, series: &[(String, Vec<f64>)]) -> String {
    let (w, h) = (640.0, 400.0);
    let (left, right, top, bottom) = (60.0, 130.0, 40.0, 50.0);
    let pw = w - left - right;
    let ph = h - top - bottom;
    let n = series.iter().map(|(_, ys)| ys.len()).max().unwrap_or(1).max(2);
    let x = |i: usize| left + pw * i as f64 / (n - 1) as f64;
    let y = |v: f64| top + ph * (1.0 - v.clamp(0.0, 1.0));

    let mut s = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" font-family=\"sans-serif\" font-size=\"12\">\n\
         <rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n\
         <text x=\"{}\" y=\"22\" text-anchor=\"middle\" font-size=\"14\">{title}</text>\n",
        left + pw / 2.0
    );
    for k in 0..=5 {
        let v = k as f64 / 5.0;
        let (x2, yv, tx) = (left + pw, y(v), left - 6.0);
        s += &format!(
            "<line x1=\"{left}\" x2=\"{x2}\" y1=\"{yv:.1}\" y2=\"{yv:.1}\" stroke=\"#ddd\"/>\
             <text x=\"{tx}\" y=\"{:.1}\" text-anchor=\"end\">{v:.1}</text>\n",
            yv + 4.0
        );
    }
    let step = ((n - 1) as f64 / 10.0).ceil().max(1.0) as usize;
    for i in (0..n).step_by(step) {
        s += &format!("<text x=\"{:.1}\" y=\"{}\" text-anchor=\"middle\">{i}</text>\n", x(i), top + ph + 18.0);
    }
    s += &format!(
        "<rect x=\"{left}\" y=\"{top}\" width=\"{pw}\" height=\"{ph}\" fill=\"none\" stroke=\"#333\"/>\n\
         <text x=\"{:.1}\" y=\"{}\" text-anchor=\"middle\">{x_label}</text>\n\
         <text x=\"16\" y=\"{:.1}\" text-anchor=\"middle\" transform=\"rotate(-90 16 {:.1})\">{y_label}</text>\n",
        left + pw / 2.0,
        h - 12.0,
        top + ph / 2.0,
        top + ph / 2.0
    );
    for (k, (name, ys)) in series.iter().enumerate() {
        let color = PALETTE[k % PALETTE.len()];
        let pts: Vec<String> = ys.iter().enumerate().map(|(i, &v)| format!("{:.1},{:.1}", x(i), y(v))).collect();
        s += &format!("<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"2\" points=\"{}\"/>\n", pts.join(" "));
        let ly = top + 16.0 + 18.0 * k as f64;
        s += &format!(
            "<line x1=\"{0}\" x2=\"{1}\" y1=\"{ly}\" y2=\"{ly}\" stroke=\"{color}\" stroke-width=\"2\"/>\
             <text x=\"{2}\" y=\"{3}\">{name}</text>\n",
            left + pw + 10.0,
            left + pw + 30.0,
            left + pw + 36.0,
            ly + 4.0
        );
    }
    s + "</svg>\n"
}

/// Writes the `manifest.jsonl` of a generated corpus under `dir` and returns
/// its path; a thin wrapper used by the command line.
pub fn generate_corpus(cfg: &SynthConfig, dir: &Path) -> Result<PathBuf> {
    fs::create_dir_all(dir).at(dir)?;
    synth::generate(cfg, dir)?;
    Ok(dir.join(MANIFEST_FILE))
}
