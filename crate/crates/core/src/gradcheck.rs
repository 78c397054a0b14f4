//! Finite-difference verification of analytic gradients.
//!
//! Each [`GradCase`] pairs a scalar function with its claimed gradient at a
//! point. The check compares the claim with central differences and reports
//! the norm-wise relative error `‖a − n‖∞ / max(‖a‖∞, ‖n‖∞, 1e-6)`. The
//! floor keeps round-off in near-flat cases (an all-negative mask under the
//! overlap losses has gradients around 1e-8) from reading as a failure.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::data::{boundary_weights, frame_mask, ClipSample, ConversationalState, Payload, Span};
use crate::losses::{self, LocatorLossKind, LossConfig, OutputGrads, Targets};
use crate::model::{EncoderKind, Meldae, ModelConfig};
use crate::synth::synthesize_frame_clip;
use crate::tape::Mat;

pub const DEFAULT_STEP: f64 = 1e-5;
pub const DEFAULT_TOLERANCE: f64 = 1e-4;
pub const SCALE_FLOOR: f64 = 1e-6;

/// Central differences of `f` at `x` with step `h`.
pub fn central_difference(f: impl Fn(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            probe[i] = x[i] + h;
            let plus = f(&probe);
            probe[i] = x[i] - h;
            let minus = f(&probe);
            probe[i] = x[i];
            (plus - minus) / (2.0 * h)
        })
        .collect()
}

pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    let inf = |v: &[f64]| v.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    let diff = analytic.iter().zip(numeric).fold(0.0f64, |m, (a, n)| m.max((a - n).abs()));
    if diff == 0.0 {
        return 0.0;
    }
    diff / inf(analytic).max(inf(numeric)).max(SCALE_FLOOR)
}

type ScalarFn = Box<dyn Fn(&[f64]) -> f64 + Send + Sync>;
type GradFn = Box<dyn Fn(&[f64]) -> Vec<f64> + Send + Sync>;

pub struct GradCase {
    pub value: ScalarFn,
    pub grad: GradFn,
    pub point: Vec<f64>,
}

impl GradCase {
    pub fn new(
        value: impl Fn(&[f64]) -> f64 + Send + Sync + 'static,
        grad: impl Fn(&[f64]) -> Vec<f64> + Send + Sync + 'static,
        point: Vec<f64>,
    ) -> Self {
        GradCase { value: Box::new(value), grad: Box::new(grad), point }
    }

    pub fn error(&self, h: f64) -> f64 {
        let analytic = (self.grad)(&self.point);
        let numeric = central_difference(&self.value, &self.point, h);
        relative_error(&analytic, &numeric)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradEntry {
    pub name: String,
    pub instances: usize,
    pub max_rel_error: f64,
    pub passed: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradReport {
    pub step: f64,
    pub tolerance: f64,
    pub entries: Vec<GradEntry>,
}

impl GradReport {
    pub fn passed(&self) -> bool {
        self.entries.iter().all(|e| e.passed)
    }

    pub fn entry(&self, name: &str) -> Option<&GradEntry> {
        self.entries.iter().find(|e| e.name == name)
    }
}

impl std::fmt::Display for GradReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        writeln!(f, "gradient check (h = {:e}, tolerance = {:e})", self.step, self.tolerance)?;
        for e in &self.entries {
            writeln!(
                f,
                "  {:<24} {:>4} instances  max rel err {:.3e}  {}",
                e.name,
                e.instances,
                e.max_rel_error,
                if e.passed { "ok" } else { "FAIL" }
            )?;
        }
        Ok(())
    }
}

pub fn run_cases(families: Vec<(String, Vec<GradCase>)>, h: f64, tolerance: f64) -> GradReport {
    let entries = families
        .into_iter()
        .map(|(name, cases)| {
            let max =
                cases.iter().map(|c| c.error(h)).fold(0.0f64, |m, e| if e.is_nan() { f64::INFINITY } else { m.max(e) });
            GradEntry { name, instances: cases.len(), max_rel_error: max, passed: max < tolerance }
        })
        .collect();
    GradReport { step: h, tolerance, entries }
}

#[derive(Clone, Debug)]
pub struct GradcheckConfig {
    pub instances: usize,
    /// Sequence lengths are drawn from `t_min..=t_max`; the first instance of
    /// every family uses `t_min`.
    pub t_min: usize,
    pub t_max: usize,
    pub step: f64,
    pub tolerance: f64,
    pub seed: u64,
    pub loss: LossConfig,
    pub include_model: bool,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        GradcheckConfig {
            instances: 100,
            t_min: 2,
            t_max: 64,
            step: DEFAULT_STEP,
            tolerance: DEFAULT_TOLERANCE,
            seed: 0,
            loss: LossConfig::default(),
            include_model: true,
        }
    }
}

/// A random localization instance: probabilities away from the clamp, a
/// mask built from random segments, and matching boundary weights.
struct Instance {
    p: Vec<f64>,
    y: Vec<f64>,
    w: Vec<f64>,
}

fn random_instance(rng: &mut ChaCha8Rng, t: usize, w_boundary: f64) -> Instance {
    let p = (0..t).map(|_| rng.gen_range(0.02..0.98)).collect();
    let mut spans = Vec::new();
    let mut cursor = 0;
    while cursor < t && rng.gen_bool(0.6) {
        let on = rng.gen_range(cursor..t);
        let off = rng.gen_range(on..t.min(on + 8));
        spans.push(Span::new(on, off));
        cursor = off + 2;
    }
    Instance { p, y: frame_mask(t, &spans), w: boundary_weights(t, &spans, w_boundary) }
}

/// The loss families: `focal`, `focal_tversky`, `boundary_weighted_bce`,
/// `bal`, `total`, and the five baseline locator losses.
pub fn loss_cases(cfg: &GradcheckConfig) -> Vec<(String, Vec<GradCase>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let lc = cfg.loss.clone();
    let mut lens: Vec<usize> = vec![cfg.t_min];
    lens.extend((1..cfg.instances).map(|_| rng.gen_range(cfg.t_min..=cfg.t_max)));
    let instances: Vec<Instance> = lens.iter().map(|&t| random_instance(&mut rng, t, lc.w_boundary)).collect();
    let mut families = Vec::new();

    let (alpha, gamma) = (lc.focal_alpha, lc.focal_gamma);
    families.push((
        "focal".to_string(),
        instances
            .iter()
            .map(|inst| {
                let y = inst.y.clone();
                let y2 = y.clone();
                GradCase::new(
                    move |p| losses::focal_loss_mean(p, &y, alpha, gamma).unwrap(),
                    move |p| {
                        let n = p.len() as f64;
                        p.iter()
                            .zip(&y2)
                            .map(|(&p, &y)| losses::focal_loss_with_grad(p, y, alpha, gamma).unwrap().1 / n)
                            .collect()
                    },
                    inst.p.clone(),
                )
            })
            .collect(),
    ));

    let tv = lc.tversky();
    families.push((
        "focal_tversky".to_string(),
        instances
            .iter()
            .map(|inst| {
                let (y, y2) = (inst.y.clone(), inst.y.clone());
                GradCase::new(
                    move |p| losses::focal_tversky(p, &y, &tv).unwrap(),
                    move |p| losses::focal_tversky_with_grad(p, &y2, &tv).unwrap().1,
                    inst.p.clone(),
                )
            })
            .collect(),
    ));

    families.push((
        "boundary_weighted_bce".to_string(),
        instances
            .iter()
            .map(|inst| {
                let (y, w) = (inst.y.clone(), inst.w.clone());
                let (y2, w2) = (y.clone(), w.clone());
                GradCase::new(
                    move |p| losses::boundary_weighted_bce(p, &y, &w).unwrap(),
                    move |p| losses::boundary_weighted_bce_with_grad(p, &y2, &w2).unwrap().1,
                    inst.p.clone(),
                )
            })
            .collect(),
    ));

    families.push((
        "bal".to_string(),
        instances
            .iter()
            .map(|inst| {
                let (y, w, c) = (inst.y.clone(), inst.w.clone(), lc.clone());
                let (y2, w2, c2) = (y.clone(), w.clone(), lc.clone());
                GradCase::new(
                    move |p| losses::bal(p, &y, &w, &c).unwrap().l_loc,
                    move |p| losses::bal_with_grad(p, &y2, &w2, &c2).unwrap().1,
                    inst.p.clone(),
                )
            })
            .collect(),
    ));

    families.push((
        "total".to_string(),
        instances
            .iter()
            .map(|inst| {
                let targets = Targets {
                    has_me: inst.y.contains(&1.0),
                    is_speaking: rng.gen_bool(0.5),
                    frame_mask: inst.y.clone(),
                    boundary_weights: inst.w.clone(),
                };
                let mut point = vec![rng.gen_range(0.02..0.98), rng.gen_range(0.02..0.98)];
                point.extend_from_slice(&inst.p);
                let (t2, c, c2) = (targets.clone(), lc.clone(), lc.clone());
                GradCase::new(
                    move |x| losses::total_loss(x[0], x[1], &x[2..], &targets, &c).unwrap().total,
                    move |x| {
                        let g = losses::total_loss_with_grad(x[0], x[1], &x[2..], &t2, &c2).unwrap().1;
                        let mut out = vec![g.p_me, g.p_state];
                        out.extend(g.s_loc);
                        out
                    },
                    point,
                )
            })
            .collect(),
    ));

    let smooth = lc.smooth;
    for kind in LocatorLossKind::ALL.into_iter().filter(|k| *k != LocatorLossKind::Bal) {
        families.push((
            kind.name().to_string(),
            instances
                .iter()
                .map(|inst| {
                    let (y, y2) = (inst.y.clone(), inst.y.clone());
                    GradCase::new(
                        move |p| losses::baseline_locator_loss(kind, p, &y, smooth).unwrap(),
                        move |p| losses::baseline_locator_loss_with_grad(kind, p, &y2, smooth).unwrap().1,
                        inst.p.clone(),
                    )
                })
                .collect(),
        ));
    }
    families
}

/// Gradient of the total loss with respect to every parameter of a tiny
/// network, for one clip.
fn model_case(model: Meldae, clip: ClipSample, loss: LossConfig) -> GradCase {
    let targets = Targets {
        has_me: clip.has_me,
        is_speaking: clip.state.is_speaking(),
        frame_mask: clip.frame_mask(),
        boundary_weights: clip.boundary_weights(loss.w_boundary),
    };
    let point: Vec<f64> = model.params().iter().flat_map(|p| p.value.iter().copied()).collect();
    let with_params = move |m: &Meldae, x: &[f64]| {
        let mut m = m.clone();
        let mut off = 0;
        for p in m.params_mut().iter_mut() {
            let n = p.value.len();
            p.value = Mat::from_shape_vec(p.value.dim(), x[off..off + n].to_vec()).expect("shape");
            off += n;
        }
        m
    };
    let (m1, m2) = (model.clone(), model);
    let (c1, c2) = (clip.clone(), clip);
    let (t1, t2) = (targets.clone(), targets);
    let (l1, l2) = (loss.clone(), loss);
    GradCase::new(
        move |x| {
            let out = with_params(&m1, x).forward(&c1).expect("forward");
            losses::total_loss(out.p_me, out.p_state, &out.s_loc, &t1, &l1).expect("loss").total
        },
        move |x| {
            let m = with_params(&m2, x);
            let trace = m.trace(&c2.payload, None).expect("forward");
            let out = trace.output();
            let (_, g): (_, OutputGrads) =
                losses::total_loss_with_grad(out.p_me, out.p_state, &out.s_loc, &t2, &l2).expect("loss");
            trace.backward(&g).iter().flat_map(|m| m.iter().copied().collect::<Vec<_>>()).collect()
        },
        point,
    )
}

pub fn tiny_model_config(kind: EncoderKind) -> ModelConfig {
    ModelConfig {
        encoder_kind: kind,
        dim: 4,
        regions: 2,
        queries: 2,
        recurrent_hidden: 3,
        attention_heads: 2,
        dropout: 0.0,
        input_dim: 4,
        frame_size: 4,
        patch_size: 2,
        region_grid: 2,
        ..ModelConfig::default()
    }
}

pub fn model_cases(cfg: &GradcheckConfig) -> Vec<(String, Vec<GradCase>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed);
    let passthrough = (0..3)
        .map(|i| {
            let t = [2, 5, 7][i];
            let x = Mat::from_shape_fn((t, 4), |_| rng.gen_range(-1.0..1.0));
            let spans = if t > 3 { vec![Span::new(1, 3)] } else { vec![] };
            let clip =
                ClipSample::new(format!("g{i}"), Payload::Features(x), 60.0, ConversationalState::Speaking, &spans)
                    .expect("valid clip");
            let model =
                Meldae::new(tiny_model_config(EncoderKind::PassthroughFeatures), cfg.seed + i as u64).expect("model");
            model_case(model, clip, cfg.loss.clone())
        })
        .collect();
    let frames = (0..2)
        .map(|i| {
            let clip = synthesize_frame_clip(cfg.seed + i as u64, 4, 4, true);
            let model = Meldae::new(tiny_model_config(EncoderKind::TinyPatchTransformer), cfg.seed + 10 + i as u64)
                .expect("model");
            model_case(model, clip, cfg.loss.clone())
        })
        .collect();
    vec![("model_passthrough".into(), passthrough), ("model_patch_transformer".into(), frames)]
}

/// Runs every loss family, plus the tiny-model families when requested.
pub fn run(cfg: &GradcheckConfig) -> GradReport {
    let mut families = loss_cases(cfg);
    if cfg.include_model {
        families.extend(model_cases(cfg));
    }
    run_cases(families, cfg.step, cfg.tolerance)
}
