//! Deterministic synthetic spotting corpus.
//!
//! Each clip is a `T×D_in` feature array split into `n_regions` contiguous
//! groups of dimensions ("facial regions"). Content is layered:
//!
//! * baseline Gaussian noise on every feature;
//! * in speaking clips, a smooth high-amplitude oscillation (a sum of 2–4
//!   sinusoids plus jitter) shared by all regions with a per-dimension gain;
//! * in clips with a micro-expression, a triangular onset→apex→offset ramp
//!   of peak `me_amplitude` on a random subset of regions, using a fixed
//!   alternating-sign pattern over the region's dimensions.
//!
//! The annotated segment is exactly the ramp's support. Clip `i` is drawn
//! from its own ChaCha stream `(seed, i)`, so any clip can be regenerated in
//! isolation.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use ndarray::{Array2, Array4};
use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{ClipRecord, ClipSample, ConversationalState, DatasetManifest, Payload, PayloadKind, Span};
use crate::error::{Error, IoContext, Result};

pub const MANIFEST_FILE: &str = "manifest.jsonl";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub n_clips: usize,
    #[serde(rename = "T")]
    pub frames: usize,
    #[serde(rename = "D_in")]
    pub feature_dim: usize,
    pub n_regions: usize,
    pub me_probability: f64,
    pub me_duration_range: [usize; 2],
    pub me_amplitude: f64,
    pub speaking_fraction: f64,
    pub speech_noise_amplitude: f64,
    pub base_noise_std: f64,
    pub fps: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_clips: 400,
            frames: 64,
            feature_dim: 32,
            n_regions: 8,
            me_probability: 0.24,
            me_duration_range: [4, 10],
            me_amplitude: 0.5,
            speaking_fraction: 0.5,
            speech_noise_amplitude: 2.0,
            base_noise_std: 0.15,
            fps: 60.0,
            seed: 42,
        }
    }
}

impl SynthConfig {
    /// Reads a TOML file holding `SynthConfig` fields; missing fields take
    /// their defaults.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).at(path)?;
        let cfg: SynthConfig = toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(format!("synth: {m}")));
        let [dmin, dmax] = self.me_duration_range;
        if self.n_clips == 0 {
            return bad("n_clips must be >= 1".into());
        }
        if self.frames < 2 {
            return bad("T must be >= 2".into());
        }
        if self.n_regions == 0 || self.feature_dim == 0 || !self.feature_dim.is_multiple_of(self.n_regions) {
            return bad(format!(
                "D_in ({}) must be a positive multiple of n_regions ({})",
                self.feature_dim, self.n_regions
            ));
        }
        if !(1 <= dmin && dmin <= dmax && dmax < self.frames) {
            return bad(format!("me_duration_range {:?} must satisfy 1 <= min <= max < T", self.me_duration_range));
        }
        for (name, v) in [("me_probability", self.me_probability), ("speaking_fraction", self.speaking_fraction)] {
            if !(0.0..=1.0).contains(&v) {
                return bad(format!("{name} must lie in [0, 1]"));
            }
        }
        if !(self.me_amplitude > 0.0 && self.me_amplitude < self.speech_noise_amplitude) {
            return bad("me_amplitude must be positive and below speech_noise_amplitude".into());
        }
        if !(self.base_noise_std >= 0.0 && self.base_noise_std.is_finite()) {
            return bad("base_noise_std must be finite and nonnegative".into());
        }
        if !(self.fps > 0.0) {
            return bad("fps must be positive".into());
        }
        Ok(())
    }

    fn region_width(&self) -> usize {
        self.feature_dim / self.n_regions
    }
}

/// One generated clip with its additive components kept apart.
#[derive(Clone, Debug)]
pub struct SynthClip {
    pub clip_id: String,
    pub state: ConversationalState,
    pub segment: Option<Span>,
    pub me_regions: Vec<usize>,
    pub features: Array2<f64>,
    pub speech: Array2<f64>,
    pub micro_expression: Array2<f64>,
}

impl SynthClip {
    pub fn to_sample(&self, fps: f64) -> ClipSample {
        let spans: Vec<Span> = self.segment.into_iter().collect();
        ClipSample::new(self.clip_id.clone(), Payload::Features(self.features.clone()), fps, self.state, &spans)
            .expect("generated clips satisfy annotation invariants")
    }
}

pub fn clip_id(index: usize) -> String {
    format!("clip_{index:05}")
}

/// Triangular profile, positive on `onset..=offset` and peaking at `apex`.
pub fn triangular_ramp(frames: usize, span: Span, apex: usize, amplitude: f64) -> Vec<f64> {
    let mut out = vec![0.0; frames];
    let rise = (apex - span.onset + 1) as f64;
    let fall = (span.offset - apex + 1) as f64;
    for (t, v) in out.iter_mut().enumerate().take(span.offset + 1).skip(span.onset) {
        *v = amplitude
            * if t <= apex { (t - span.onset + 1) as f64 / rise } else { (span.offset - t + 1) as f64 / fall };
    }
    out
}

/// Generates clip `index` of the corpus described by `cfg`.
pub fn synthesize_clip(cfg: &SynthConfig, index: usize) -> SynthClip {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(index as u64);

    let (t_len, d) = (cfg.frames, cfg.feature_dim);
    let speaking = rng.gen_bool(cfg.speaking_fraction);
    let has_me = rng.gen_bool(cfg.me_probability);

    let noise = Normal::new(0.0, cfg.base_noise_std.max(f64::MIN_POSITIVE)).expect("valid std");
    let mut base = Array2::from_shape_fn((t_len, d), |_| noise.sample(&mut rng));
    if cfg.base_noise_std == 0.0 {
        base.fill(0.0);
    }

    let mut speech = Array2::zeros((t_len, d));
    if speaking {
        let n_sin = rng.gen_range(2..=4);
        let amp = cfg.speech_noise_amplitude / n_sin as f64;
        let waves: Vec<(f64, f64)> =
            (0..n_sin).map(|_| (rng.gen_range(0.03..0.15), rng.gen_range(0.0..2.0 * PI))).collect();
        let gains: Vec<f64> = (0..d).map(|_| rng.gen_range(0.75..1.25)).collect();
        let jitter = Normal::new(0.0, 0.05 * cfg.speech_noise_amplitude).expect("valid std");
        for t in 0..t_len {
            let w: f64 = waves.iter().map(|(f, ph)| amp * (2.0 * PI * f * t as f64 + ph).sin()).sum();
            for (j, g) in gains.iter().enumerate() {
                speech[[t, j]] = g * w + jitter.sample(&mut rng);
            }
        }
    }

    let mut me = Array2::zeros((t_len, d));
    let mut segment = None;
    let mut me_regions = Vec::new();
    if has_me {
        let [dmin, dmax] = cfg.me_duration_range;
        let dur = rng.gen_range(dmin..=dmax);
        let onset = rng.gen_range(0..=t_len - dur);
        let span = Span::new(onset, onset + dur - 1);
        let apex = rng.gen_range(span.onset..=span.offset);
        let k = rng.gen_range(1..=(cfg.n_regions / 2).max(1));
        me_regions = index::sample(&mut rng, cfg.n_regions, k).into_vec();
        me_regions.sort_unstable();
        let ramp = triangular_ramp(t_len, span, apex, cfg.me_amplitude);
        let w = cfg.region_width();
        for &r in &me_regions {
            for j in 0..w {
                let sign = if j % 2 == 0 { 1.0 } else { -1.0 };
                for t in span.onset..=span.offset {
                    me[[t, r * w + j]] = sign * ramp[t];
                }
            }
        }
        segment = Some(span);
    }

    let features = &base + &speech + &me;
    SynthClip {
        clip_id: clip_id(index),
        state: if speaking { ConversationalState::Speaking } else { ConversationalState::Listening },
        segment,
        me_regions,
        features,
        speech,
        micro_expression: me,
    }
}

/// All clips of the corpus, in index order, held in memory.
pub fn synthesize(cfg: &SynthConfig) -> Result<Vec<SynthClip>> {
    cfg.validate()?;
    Ok((0..cfg.n_clips).into_par_iter().map(|i| synthesize_clip(cfg, i)).collect())
}

/// Writes the corpus to `out_dir` (`manifest.jsonl` plus one `.npy` per clip)
/// and returns the manifest.
pub fn generate(cfg: &SynthConfig, out_dir: &Path) -> Result<DatasetManifest> {
    cfg.validate()?;
    fs::create_dir_all(out_dir).at(out_dir)?;
    let records = (0..cfg.n_clips)
        .into_par_iter()
        .map(|i| {
            let clip = synthesize_clip(cfg, i);
            let file = format!("{}.npy", clip.clip_id);
            Payload::Features(clip.features).write(&out_dir.join(&file))?;
            Ok(ClipRecord {
                clip_id: clip.clip_id,
                payload: file.into(),
                kind: PayloadKind::Features,
                fps: cfg.fps,
                has_me: clip.segment.is_some(),
                state: clip.state,
                segments: clip.segment.iter().map(|s| [s.onset, s.offset]).collect(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let manifest = DatasetManifest::new(out_dir, records);
    manifest.write(&out_dir.join(MANIFEST_FILE))?;
    Ok(manifest)
}

/// A tiny raw-frame clip (`T×1×size×size`): a Gaussian blob drifting across
/// the frame, plus (optionally) a brief localized brightening standing in
/// for a micro-expression. Used to exercise the patch-encoder path.
pub fn synthesize_frame_clip(seed: u64, frames: usize, size: usize, with_me: bool) -> ClipSample {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (x0, y0) = (rng.gen_range(0.0..size as f64), rng.gen_range(0.0..size as f64));
    let (vx, vy) = (rng.gen_range(-0.5..0.5), rng.gen_range(-0.5..0.5));
    let noise = Normal::new(0.0, 0.02).expect("valid std");
    let span = with_me.then(|| {
        let dur = (frames / 4).max(1);
        let onset = rng.gen_range(0..=frames - dur);
        Span::new(onset, onset + dur - 1)
    });
    let (bx, by) = (rng.gen_range(0..size / 2), rng.gen_range(0..size / 2));
    let mut video = Array4::zeros((frames, 1, size, size));
    for t in 0..frames {
        let (cx, cy) = (x0 + vx * t as f64, y0 + vy * t as f64);
        for i in 0..size {
            for j in 0..size {
                let r2 = (i as f64 - cy).powi(2) + (j as f64 - cx).powi(2);
                let mut v = (-r2 / 8.0).exp() + noise.sample(&mut rng);
                if let Some(s) = span {
                    if s.contains(t) && (by..by + 3).contains(&i) && (bx..bx + 3).contains(&j) {
                        v += 0.2;
                    }
                }
                video[[t, 0, i, j]] = v;
            }
        }
    }
    let spans: Vec<Span> = span.into_iter().collect();
    let state = if rng.gen_bool(0.5) { ConversationalState::Speaking } else { ConversationalState::Listening };
    ClipSample::new(format!("frames_{seed}"), Payload::Frames(video), 60.0, state, &spans)
        .expect("generated frame clip is valid")
}

#[derive(Clone, Debug)]
pub struct Split {
    pub train: DatasetManifest,
    pub eval: DatasetManifest,
    pub stratified: bool,
    /// Set when stratification was abandoned.
    pub warning: Option<String>,
}

/// Seeded train/eval partition, stratified by `(has_me, state)`.
///
/// The train side receives `round(N * train_fraction)` clips, apportioned
/// across strata by largest remainder, so every stratum is within one clip of
/// its proportional share. Strata with fewer than two clips cannot be
/// represented on both sides; in that case the split is unstratified and a
/// warning is recorded.
pub fn split(manifest: &DatasetManifest, train_fraction: f64, seed: u64) -> Result<Split> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::Config(format!("train_fraction must lie in (0, 1), got {train_fraction}")));
    }
    let n = manifest.len();
    let n_train = (n as f64 * train_fraction).round() as usize;
    if n_train == 0 || n_train == n {
        return Err(Error::Config(format!(
            "train_fraction {train_fraction} leaves one side of a {n}-clip split empty"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let mut strata: BTreeMap<(bool, ConversationalState), Vec<usize>> = BTreeMap::new();
    for (i, c) in manifest.clips.iter().enumerate() {
        strata.entry((c.has_me, c.state)).or_default().push(i);
    }

    let mut warning = None;
    let mut train_idx = Vec::with_capacity(n_train);
    if let Some((key, members)) = strata.iter().find(|(_, v)| v.len() < 2) {
        let msg = format!(
            "stratum (has_me={}, state={}) has {} clip(s); falling back to an unstratified split",
            key.0,
            key.1,
            members.len()
        );
        log::warn!("{msg}");
        warning = Some(msg);
        let mut all: Vec<usize> = (0..n).collect();
        all.shuffle(&mut rng);
        train_idx.extend_from_slice(&all[..n_train]);
    } else {
        let mut quotas: Vec<(usize, f64)> = strata
            .values()
            .map(|v| {
                let exact = v.len() as f64 * train_fraction;
                (exact.floor() as usize, exact - exact.floor())
            })
            .collect();
        let assigned: usize = quotas.iter().map(|q| q.0).sum();
        let mut order: Vec<usize> = (0..quotas.len()).collect();
        order.sort_by(|&a, &b| quotas[b].1.total_cmp(&quotas[a].1).then(a.cmp(&b)));
        for &k in order.iter().take(n_train.saturating_sub(assigned)) {
            quotas[k].0 += 1;
        }
        for (members, (quota, _)) in strata.values().zip(&quotas) {
            let mut m = members.clone();
            m.shuffle(&mut rng);
            train_idx.extend_from_slice(&m[..*quota]);
        }
    }

    train_idx.sort_unstable();
    let mut in_train = vec![false; n];
    for &i in &train_idx {
        in_train[i] = true;
    }
    let (mut train, mut eval) = (Vec::new(), Vec::new());
    for (i, c) in manifest.clips.iter().enumerate() {
        if in_train[i] {
            train.push(c.clone());
        } else {
            eval.push(c.clone());
        }
    }
    Ok(Split {
        train: manifest.with_clips(train),
        eval: manifest.with_clips(eval),
        stratified: warning.is_none(),
        warning,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(n: usize, p: f64) -> SynthConfig {
        SynthConfig { n_clips: n, me_probability: p, seed: 7, ..SynthConfig::default() }
    }

    #[test]
    fn probability_extremes() {
        let all = synthesize(&small(4, 1.0)).unwrap();
        assert!(all.iter().all(|c| c.segment.is_some()));
        let none = synthesize(&small(4, 0.0)).unwrap();
        assert!(none.iter().all(|c| c.segment.is_none() && c.micro_expression.iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn ramp_support_is_the_segment() {
        for clip in synthesize(&small(40, 1.0)).unwrap() {
            let s = clip.segment.unwrap();
            for t in 0..clip.features.nrows() {
                let active = clip.micro_expression.row(t).iter().any(|&v| v != 0.0);
                assert_eq!(active, s.contains(t), "{} frame {t}", clip.clip_id);
            }
        }
    }

    #[test]
    fn triangular_ramp_shape() {
        let r = triangular_ramp(8, Span::new(2, 5), 3, 1.0);
        assert_eq!(r, vec![0.0, 0.0, 0.5, 1.0, 2.0 / 3.0, 1.0 / 3.0, 0.0, 0.0]);
        let single = triangular_ramp(3, Span::new(1, 1), 1, 0.4);
        assert_eq!(single, vec![0.0, 0.4, 0.0]);
    }

    #[test]
    fn clips_regenerate_in_isolation() {
        let cfg = small(12, 0.5);
        let all = synthesize(&cfg).unwrap();
        let again = synthesize_clip(&cfg, 9);
        assert_eq!(all[9].features, again.features);
        assert_eq!(all[9].segment, again.segment);
    }

    #[test]
    fn config_invariants() {
        assert!(SynthConfig::default().validate().is_ok());
        let c = SynthConfig { me_amplitude: 3.0, ..SynthConfig::default() };
        assert!(matches!(c.validate(), Err(Error::Config(_))));
        let c = SynthConfig { me_duration_range: [5, 64], ..SynthConfig::default() };
        assert!(c.validate().is_err());
        let c = SynthConfig { me_duration_range: [0, 3], ..SynthConfig::default() };
        assert!(c.validate().is_err());
        let c = SynthConfig { feature_dim: 30, ..SynthConfig::default() };
        assert!(c.validate().is_err());
    }

    #[test]
    fn frame_clip_shape() {
        let c = synthesize_frame_clip(3, 8, 16, true);
        match &c.payload {
            Payload::Frames(a) => assert_eq!(a.shape(), &[8, 1, 16, 16]),
            _ => unreachable!(),
        }
        assert!(c.has_me);
    }

    #[test]
    fn split_rejects_bad_fraction() {
        let m = DatasetManifest::new(".", vec![]);
        assert!(matches!(split(&m, 1.0, 0), Err(Error::Config(_))));
        assert!(matches!(split(&m, 0.0, 0), Err(Error::Config(_))));
    }
}
