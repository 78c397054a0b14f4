use std::path::Path;

use meldae::data::{load_manifest, Payload};
use meldae::error::Error;
use meldae::losses::LocatorLossKind;
use meldae::model::{load_checkpoint, ParamGroup};
use meldae::synth::{SynthConfig, MANIFEST_FILE};
use meldae::train::{
    ablate_losses, evaluate_model, prepare_data, read_trainlog, train, AdamW, RunConfig, TRAINLOG_HEADER,
};

fn tiny(dir: &Path, n_clips: usize, epochs: usize) -> RunConfig {
    let mut cfg = RunConfig { output_dir: dir.to_path_buf(), ..Default::default() };
    cfg.data.synth = Some(SynthConfig { n_clips, frames: 24, me_probability: 0.5, seed: 3, ..Default::default() });
    cfg.schedule.epochs = epochs;
    cfg.schedule.batch_size = 4;
    cfg.optimizer.lr_backbone = 1e-3;
    cfg.optimizer.lr_new = 1e-3;
    cfg
}

#[test]
fn one_epoch_smoke_run() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(dir.path(), 8, 1);
    let out = train(&cfg).unwrap();
    assert_eq!(out.log.len(), 1);
    assert!(out.log[0].loss.is_finite());
    let m = load_checkpoint(&out.final_checkpoint(), Some(&cfg.model)).unwrap();
    assert_eq!(m.params(), out.model.params());
    assert!(out.best_checkpoint().exists());
    let text = std::fs::read_to_string(out.trainlog_path()).unwrap();
    assert_eq!(text.lines().next().unwrap(), TRAINLOG_HEADER);
    assert_eq!(read_trainlog(&out.trainlog_path()).unwrap(), out.log);
}

#[test]
fn identical_configs_give_identical_losses() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let ra = train(&tiny(a.path(), 16, 2)).unwrap();
    let rb = train(&tiny(b.path(), 16, 2)).unwrap();
    let losses =
        |r: &meldae::train::TrainOutcome| r.log.iter().map(|x| (x.loss, x.f1_dr, x.acc_me)).collect::<Vec<_>>();
    assert_eq!(losses(&ra), losses(&rb));
    assert_eq!(ra.steps, rb.steps);
    assert_eq!(ra.model.params(), rb.model.params());
}

#[test]
fn steps_respect_clipping_and_composition() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny(dir.path(), 16, 2);
    cfg.schedule.grad_clip_norm = Some(0.05);
    let out = train(&cfg).unwrap();
    assert_eq!(out.steps.len(), 2 * 13usize.div_ceil(4));
    for s in &out.steps {
        assert!(s.clipped_norm <= 0.05 + 1e-6);
        assert!(s.composition_error <= 1e-6);
    }
    assert!(out.steps.iter().any(|s| s.grad_norm > 0.05), "clipping never engaged");
}

#[test]
fn checkpoint_reload_reproduces_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(dir.path(), 16, 2);
    let out = train(&cfg).unwrap();
    let data = prepare_data(&cfg).unwrap();
    let reloaded = load_checkpoint(&out.final_checkpoint(), Some(&cfg.model)).unwrap();
    let report = evaluate_model(&reloaded, &data.eval, &cfg.eval).unwrap();
    assert_eq!(report, out.final_eval);
}

#[test]
fn optimizer_groups_get_their_rates() {
    let mut cfg = RunConfig::default();
    cfg.optimizer.lr_backbone = 0.25;
    cfg.optimizer.lr_new = 0.5;
    let m = meldae::model::Meldae::new(cfg.model.clone(), 0).unwrap();
    let opt = AdamW::new(&cfg.optimizer, m.params()).unwrap();
    for (p, lr) in m.params().iter().zip(opt.learning_rates()) {
        let want = if p.group == ParamGroup::Backbone { 0.25 } else { 0.5 };
        assert_eq!(*lr, want, "{}", p.name);
        assert_eq!(p.group == ParamGroup::Backbone, p.name.starts_with("encoder."));
    }
}

#[test]
fn singleton_ablation_matches_plain_training() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let cfg = tiny(a.path(), 16, 2);
    let plain = train(&cfg).unwrap();
    let abl = ablate_losses(&RunConfig { output_dir: b.path().to_path_buf(), ..cfg }, &[LocatorLossKind::Bal]).unwrap();
    assert_eq!(abl.runs.len(), 1);
    let curve: Vec<f64> = plain.log.iter().map(|r| r.f1_dr).collect();
    assert_eq!(abl.runs[0].curve(), curve);
    let losses: Vec<_> = plain.log.iter().map(|r| r.loss).collect();
    assert_eq!(abl.runs[0].log.iter().map(|r| r.loss).collect::<Vec<_>>(), losses);
    assert!(abl.plot_path.exists() && abl.table_path.exists() && abl.curves_path.exists());
}

#[test]
fn ablation_runs_share_initialization() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(dir.path(), 16, 1);
    let abl = ablate_losses(&cfg, &[LocatorLossKind::Bal, LocatorLossKind::Mse]).unwrap();
    assert_eq!(abl.runs[0].initial_f1_dr, abl.runs[1].initial_f1_dr);
    let table = std::fs::read_to_string(&abl.table_path).unwrap();
    assert_eq!(table.lines().count(), 3);
    let svg = std::fs::read_to_string(&abl.plot_path).unwrap();
    assert_eq!(svg.matches("<polyline").count(), 2);
}

#[test]
fn non_finite_input_aborts_with_batch_id() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(dir.path(), 8, 1);
    let data_dir = dir.path().join("src");
    let manifest = meldae::synth::generate(cfg.data.synth.as_ref().unwrap(), &data_dir).unwrap();
    let victim = &manifest.clips[0];
    let mut clip = manifest.load_clip(victim).unwrap();
    if let Payload::Features(x) = &mut clip.payload {
        x[[0, 0]] = f64::NAN;
    }
    clip.payload.write(&manifest.payload_path(victim)).unwrap();

    let mut cfg = cfg;
    cfg.data.manifest = Some(data_dir.join(MANIFEST_FILE));
    cfg.data.synth = None;
    cfg.data.train_fraction = 0.75;
    // Make sure the poisoned clip lands in the training split.
    let loaded = load_manifest(data_dir.join(MANIFEST_FILE)).unwrap();
    let split = meldae::synth::split(&loaded, 0.75, cfg.schedule.seed).unwrap();
    if !split.train.clips.iter().any(|c| c.clip_id == victim.clip_id) {
        cfg.data.train_manifest = Some(data_dir.join("train.jsonl"));
        cfg.data.eval_manifest = Some(data_dir.join("eval.jsonl"));
        loaded.with_clips(loaded.clips[..6].to_vec()).write(&data_dir.join("train.jsonl")).unwrap();
        loaded.with_clips(loaded.clips[6..].to_vec()).write(&data_dir.join("eval.jsonl")).unwrap();
    }
    match train(&cfg) {
        Err(Error::NonFiniteLoss { epoch, clips, .. }) => {
            assert_eq!(epoch, 1);
            assert!(clips.contains(&victim.clip_id));
        }
        Err(e) => panic!("unexpected error {e}"),
        Ok(_) => panic!("training on a NaN input succeeded"),
    }
}

#[test]
fn config_file_round_trip_and_field_names() {
    let cfg = RunConfig::default();
    let text = cfg.to_toml_string();
    for key in [
        "[model]",
        "[loss]",
        "[data]",
        "[optimizer]",
        "[schedule]",
        "[eval]",
        "lr_backbone",
        "grad_clip_norm",
        "locator_loss_kind",
    ] {
        assert!(text.contains(key), "missing {key}");
    }
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("run.toml");
    std::fs::write(&path, &text).unwrap();
    assert_eq!(RunConfig::load(&path).unwrap(), cfg);
}
