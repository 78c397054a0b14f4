use meldae::data::{ClipSample, ConversationalState, Payload, Span};
use meldae::losses::{total_loss_with_grad, LossConfig, Targets};
use meldae::model::{attention_row_sums, Meldae, ModelConfig, ParamGroup, TemporalKind};
use meldae::synth::{synthesize_clip, synthesize_frame_clip, SynthConfig};
use ndarray::{Array2, Axis};

fn clip(t: usize, seed: u64) -> ClipSample {
    let cfg = SynthConfig { frames: t, me_duration_range: [1, 2], me_probability: 1.0, seed, ..Default::default() };
    synthesize_clip(&cfg, 0).to_sample(60.0)
}

fn targets(c: &ClipSample) -> Targets {
    Targets {
        has_me: c.has_me,
        is_speaking: c.state.is_speaking(),
        frame_mask: c.frame_mask(),
        boundary_weights: c.boundary_weights(5.0),
    }
}

#[test]
fn outputs_are_bounded_with_one_score_per_frame() {
    let m = Meldae::new(ModelConfig::default(), 1).unwrap();
    for t in [2, 17, 64] {
        let out = m.forward(&clip(t, t as u64)).unwrap();
        assert_eq!(out.s_loc.len(), t);
        assert!(out.is_valid());
        assert!(out.s_loc.iter().chain([&out.p_me, &out.p_state]).all(|v| *v > 0.0 && *v < 1.0));
    }
}

#[test]
fn frame_mode_forward_is_valid() {
    let cfg = ModelConfig { encoder_kind: meldae::model::EncoderKind::TinyPatchTransformer, ..Default::default() };
    let m = Meldae::new(cfg, 2).unwrap();
    let c = synthesize_frame_clip(3, 8, 16, true);
    let enc = m.encode(&c).unwrap();
    assert_eq!(enc.patch_sequence.dim(), (8, 16, 16));
    let out = m.forward(&c).unwrap();
    assert_eq!(out.s_loc.len(), 8);
    assert!(out.is_valid());
}

#[test]
fn forward_is_bit_identical_across_calls() {
    let m = Meldae::new(ModelConfig::default(), 3).unwrap();
    let c = clip(40, 3);
    assert_eq!(m.forward(&c).unwrap(), m.forward(&c).unwrap());
}

#[test]
fn attention_rows_are_distributions() {
    let m = Meldae::new(ModelConfig::default(), 4).unwrap();
    let c = clip(64, 4);
    let enh = m.enhance(&m.temporal_context(&m.encode(&c).unwrap()).unwrap()).unwrap();
    assert_eq!(enh.f_enhanced_tokens.dim(), (4, 16));
    assert_eq!(enh.f_enhanced_frames.dim(), (64, 16));
    assert_eq!(enh.fused.dim(), (64, 32));
    for w in enh.token_attention.iter().chain(&enh.frame_attention) {
        assert!(w.iter().all(|&x| x >= 0.0));
        for s in attention_row_sums(w) {
            assert!((s - 1.0).abs() < 1e-5);
        }
    }
    assert_eq!(enh.token_attention[0].ncols(), 64 * 8);
}

#[test]
fn last_frame_reaches_first_global_feature() {
    let m = Meldae::new(ModelConfig::default(), 5).unwrap();
    let enc = m.encode(&clip(12, 5)).unwrap();
    let base = m.temporal_context(&enc).unwrap();
    let h = 1e-4;

    let mut late = enc.clone();
    late.cls_sequence.row_mut(11).mapv_inplace(|v| v + h);
    let moved = m.temporal_context(&late).unwrap();
    let d0: f64 = (&moved.f_global.row(0) - &base.f_global.row(0)).mapv(f64::abs).sum();
    assert!(d0 > 0.0, "f_global[0] ignores the last frame");

    let mut early = enc.clone();
    early.cls_sequence.row_mut(0).mapv_inplace(|v| v + h);
    let moved = m.temporal_context(&early).unwrap();
    let d_last: f64 = (&moved.f_global.row(11) - &base.f_global.row(11)).mapv(f64::abs).sum();
    assert!(d_last > 0.0, "f_global[T-1] ignores the first frame");
}

#[test]
fn minimal_sequence_has_valid_context() {
    let m = Meldae::new(ModelConfig::default(), 6).unwrap();
    let b = m.temporal_context(&m.encode(&clip(2, 6)).unwrap()).unwrap();
    assert_eq!(b.f_global.dim(), (2, 16));
    assert!(b.f_global.iter().all(|v| v.is_finite()));
}

/// With one query token every frame attends to a single key, so each frame
/// row is `o(v(token))` regardless of the frame.
#[test]
fn single_query_degenerates_to_value_projection() {
    let cfg = ModelConfig { queries: 1, ..Default::default() };
    let m = Meldae::new(cfg, 7).unwrap();
    let enh = m.enhance(&m.temporal_context(&m.encode(&clip(20, 7)).unwrap()).unwrap()).unwrap();
    let p = |name: &str| m.params().find(name).unwrap().value.clone();
    let tok = enh.f_enhanced_tokens.clone();
    let v = tok.dot(&p("enhancer.frame_attn.v.w")) + p("enhancer.frame_attn.v.b");
    let expected = v.dot(&p("enhancer.frame_attn.o.w")) + p("enhancer.frame_attn.o.b");
    for row in enh.f_enhanced_frames.axis_iter(Axis(0)) {
        for (a, b) in row.iter().zip(expected.row(0)) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}

#[test]
fn permuting_frames_without_recurrence_keeps_p_me() {
    let cfg = ModelConfig { temporal: TemporalKind::Identity, ..Default::default() };
    let m = Meldae::new(cfg, 8).unwrap();
    let c = clip(16, 8);
    let Payload::Features(x) = &c.payload else { unreachable!() };
    let perm: Vec<usize> = (0..16).rev().collect();
    let xp = Array2::from_shape_fn(x.dim(), |(t, d)| x[[perm[t], d]]);
    let a = m.forward_payload(&c.payload).unwrap();
    let b = m.forward_payload(&Payload::Features(xp)).unwrap();
    assert!((a.p_me - b.p_me).abs() < 1e-12);
    assert!((a.p_state - b.p_state).abs() < 1e-12);
    for (t, &src) in perm.iter().enumerate() {
        assert!((a.s_loc[src] - b.s_loc[t]).abs() < 1e-12);
    }
}

#[test]
fn every_parameter_receives_gradient() {
    let m = Meldae::new(ModelConfig::default(), 9).unwrap();
    let mut acc: Vec<f64> = vec![0.0; m.params().len()];
    for seed in 0..4 {
        let c = clip(24, seed);
        let trace = m.trace(&c.payload, None).unwrap();
        let o = trace.output();
        let (_, g) = total_loss_with_grad(o.p_me, o.p_state, &o.s_loc, &targets(&c), &LossConfig::default()).unwrap();
        for (a, g) in acc.iter_mut().zip(trace.backward(&g)) {
            *a += g.mapv(f64::abs).sum();
        }
    }
    for (p, a) in m.params().iter().zip(&acc) {
        assert!(*a > 0.0, "no gradient reaches {}", p.name);
    }
    let groups: Vec<ParamGroup> = m.params().iter().map(|p| p.group).collect();
    assert!(groups.contains(&ParamGroup::Backbone) && groups.contains(&ParamGroup::New));
}

#[test]
fn default_model_is_desk_scale() {
    for kind in [meldae::model::EncoderKind::PassthroughFeatures, meldae::model::EncoderKind::TinyPatchTransformer] {
        let m = Meldae::new(ModelConfig { encoder_kind: kind, ..Default::default() }, 0).unwrap();
        assert!(m.num_parameters() < 2_000_000);
    }
}

#[test]
fn untrained_forward_on_planted_clip_is_valid() {
    let c = ClipSample::new(
        "x",
        Payload::Features(Array2::from_shape_fn((30, 32), |(t, d)| ((t * 7 + d) as f64).sin())),
        60.0,
        ConversationalState::Listening,
        &[Span::new(10, 15)],
    )
    .unwrap();
    let out = Meldae::new(ModelConfig::default(), 10).unwrap().forward(&c).unwrap();
    assert!(out.is_valid());
}
