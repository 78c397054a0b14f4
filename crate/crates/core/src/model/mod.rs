//! The spotting network: a per-frame encoder, a bidirectional LSTM over the
//! frame tokens, region pooling, a query-token cross-attention enhancer and
//! three sigmoid heads.
//!
//! ```text
//!  clip ──encode──▶ cls (T×D) ──Bi-LSTM──▶ f_global (T×D) ─────────────┐
//!             └───▶ patches (T×P×D) ──region pool──▶ f_regional (T×R×D) │
//!                                                        │              │
//!  query tokens (K×D) ──cross-attn(K=V=f_regional)──▶ tokens (K×D)      │
//!  f_global ──cross-attn(K=V=tokens)──▶ frames (T×D) ──concat──▶ fused (T×2D)
//!  fused ──mean over T──▶ p_me, p_state        fused[t] ──▶ s_loc[t]
//! ```
//!
//! The second cross-attention maps the `K` enhanced tokens back onto the frame
//! axis so the locator can score frame by frame.

mod checkpoint;
mod layers;

pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_VERSION};
pub use layers::{Bound, Linear, Lstm, MultiHeadAttention, Param, ParamGroup, ParamId, ParamStore};

use ndarray::{Array2, Array3, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{ClipSample, Payload};
use crate::error::{Error, Result};
use crate::losses::OutputGrads;
use crate::tape::{Mat, Tape, Var};
use layers::{AttentionOutput, Init, LayerNorm};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncoderKind {
    PassthroughFeatures,
    TinyPatchTransformer,
}

/// Temporal-context layer. `Identity` exists for probing the rest of the
/// network in isolation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TemporalKind {
    Bilstm,
    Identity,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub encoder_kind: EncoderKind,
    /// Embedding width.
    #[serde(rename = "D")]
    pub dim: usize,
    /// Regions per frame in passthrough mode.
    #[serde(rename = "R")]
    pub regions: usize,
    /// Number of learnable query tokens.
    #[serde(rename = "K")]
    pub queries: usize,
    pub recurrent_hidden: usize,
    pub attention_heads: usize,
    pub dropout: f64,
    /// Feature width expected in passthrough mode.
    #[serde(rename = "D_in")]
    pub input_dim: usize,
    pub temporal: TemporalKind,
    pub frame_channels: usize,
    /// Frames are `frame_size×frame_size`.
    pub frame_size: usize,
    pub patch_size: usize,
    /// Patch tokens are average-pooled onto a `region_grid×region_grid` grid
    /// when the patch grid is at least that large.
    pub region_grid: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            encoder_kind: EncoderKind::PassthroughFeatures,
            dim: 16,
            regions: 8,
            queries: 4,
            recurrent_hidden: 16,
            attention_heads: 2,
            dropout: 0.1,
            input_dim: 32,
            temporal: TemporalKind::Bilstm,
            frame_channels: 1,
            frame_size: 16,
            patch_size: 4,
            region_grid: 3,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(format!("model: {m}")));
        if self.dim == 0 || self.regions == 0 || self.queries == 0 || self.attention_heads == 0 {
            return bad("D, R, K and attention_heads must be >= 1".into());
        }
        if self.recurrent_hidden == 0 {
            return bad("recurrent_hidden must be >= 1".into());
        }
        if !self.dim.is_multiple_of(self.attention_heads) {
            return bad(format!("D ({}) must be divisible by attention_heads ({})", self.dim, self.attention_heads));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("dropout must lie in [0, 1)".into());
        }
        match self.encoder_kind {
            EncoderKind::PassthroughFeatures => {
                if self.input_dim == 0 || !self.input_dim.is_multiple_of(self.regions) {
                    return bad(format!(
                        "D_in ({}) must be a positive multiple of R ({})",
                        self.input_dim, self.regions
                    ));
                }
            }
            EncoderKind::TinyPatchTransformer => {
                if self.patch_size == 0 || self.frame_size == 0 || !self.frame_size.is_multiple_of(self.patch_size) {
                    return bad("frame_size must be a positive multiple of patch_size".into());
                }
                if self.frame_channels == 0 || self.region_grid == 0 {
                    return bad("frame_channels and region_grid must be >= 1".into());
                }
            }
        }
        Ok(())
    }

    /// Patch tokens per frame produced by the encoder.
    pub fn patches_per_frame(&self) -> usize {
        match self.encoder_kind {
            EncoderKind::PassthroughFeatures => self.regions,
            EncoderKind::TinyPatchTransformer => (self.frame_size / self.patch_size).pow(2),
        }
    }

    /// Regional tokens per frame after region pooling.
    pub fn regional_tokens(&self) -> usize {
        match self.encoder_kind {
            EncoderKind::PassthroughFeatures => self.regions,
            EncoderKind::TinyPatchTransformer => {
                let g = self.frame_size / self.patch_size;
                if g >= self.region_grid {
                    self.region_grid * self.region_grid
                } else {
                    g * g
                }
            }
        }
    }
}

/// Per-frame tokens from the encoder.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderOutput {
    /// `T×D`, one global token per frame.
    pub cls_sequence: Array2<f64>,
    /// `T×P×D` patch (region) tokens.
    pub patch_sequence: Array3<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FeatureBundle {
    /// `T×D` bidirectional temporal features.
    pub f_global: Array2<f64>,
    /// `T×R×D` region-pooled features.
    pub f_regional: Array3<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EnhancedFeatures {
    /// `K×D` learned queries.
    pub query_tokens: Array2<f64>,
    /// `K×D` queries after attending over all regional tokens.
    pub f_enhanced_tokens: Array2<f64>,
    /// `T×D` enhanced content projected onto frames.
    pub f_enhanced_frames: Array2<f64>,
    /// `T×2D`: `[f_enhanced_frames | f_global]`.
    pub fused: Array2<f64>,
    /// Per head, `K×(T·R)` weights of the query tokens over regional tokens
    /// (frame-major key order).
    pub token_attention: Vec<Array2<f64>>,
    /// Per head, `T×K` weights of frames over enhanced tokens.
    pub frame_attention: Vec<Array2<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelOutput {
    pub p_me: f64,
    pub p_state: f64,
    pub s_loc: Vec<f64>,
}

impl ModelOutput {
    /// Every value finite and inside `[0, 1]`.
    pub fn is_valid(&self) -> bool {
        std::iter::once(self.p_me)
            .chain(std::iter::once(self.p_state))
            .chain(self.s_loc.iter().copied())
            .all(|v| v.is_finite() && (0.0..=1.0).contains(&v))
    }
}

#[derive(Clone, Debug)]
struct PatchTransformer {
    embed: Linear,
    cls: ParamId,
    pos: ParamId,
    ln1: LayerNorm,
    attn: MultiHeadAttention,
    ln2: LayerNorm,
    mlp_in: Linear,
    mlp_out: Linear,
    ln_out: LayerNorm,
}

#[derive(Clone, Debug)]
enum Encoder {
    Passthrough { cls: Linear, regions: Vec<Linear> },
    Patch(PatchTransformer),
}

#[derive(Clone, Debug)]
struct BiLstm {
    forward: Lstm,
    backward: Lstm,
    out: Linear,
}

#[derive(Clone, Debug)]
struct Enhancer {
    queries: ParamId,
    token_attn: MultiHeadAttention,
    frame_attn: MultiHeadAttention,
}

#[derive(Clone, Debug)]
struct Heads {
    me: Linear,
    state: Linear,
    loc: Linear,
}

/// The network and its parameters.
#[derive(Clone, Debug)]
pub struct Meldae {
    cfg: ModelConfig,
    params: ParamStore,
    encoder: Encoder,
    temporal: Option<BiLstm>,
    enhancer: Enhancer,
    heads: Heads,
    pool: Option<Mat>,
}

/// Handles to the recorded forward pass of one clip.
pub struct Trace {
    pub tape: Tape,
    pub params: Bound,
    pub input: Var,
    pub cls: Var,
    /// `(T·P)×D`, frame-major.
    pub patches: Var,
    pub f_global: Var,
    /// `(T·R)×D`, frame-major.
    pub f_regional: Var,
    pub tokens: Var,
    pub frames: Var,
    pub fused: Var,
    pub token_attention: Vec<Var>,
    pub frame_attention: Vec<Var>,
    pub p_me: Var,
    pub p_state: Var,
    pub s_loc: Var,
}

impl Trace {
    pub fn value(&self, v: Var) -> &Mat {
        self.tape.value(v)
    }

    pub fn output(&self) -> ModelOutput {
        ModelOutput {
            p_me: self.value(self.p_me)[[0, 0]],
            p_state: self.value(self.p_state)[[0, 0]],
            s_loc: self.value(self.s_loc).column(0).to_vec(),
        }
    }

    /// Parameter gradients (aligned with the store) given gradients of the
    /// loss with respect to the three outputs.
    pub fn backward(&self, g: &OutputGrads) -> Vec<Mat> {
        let seeds = [
            (self.p_me, Array2::from_elem((1, 1), g.p_me)),
            (self.p_state, Array2::from_elem((1, 1), g.p_state)),
            (self.s_loc, Array2::from_shape_vec((g.s_loc.len(), 1), g.s_loc.clone()).expect("column")),
        ];
        let mut grads = self.tape.backward(&seeds);
        self.params
            .vars()
            .iter()
            .map(|&v| grads.take(v).unwrap_or_else(|| Mat::zeros(self.tape.value(v).dim())))
            .collect()
    }
}

impl Meldae {
    /// Freshly initialized network; initialization is a pure function of
    /// `(cfg, seed)`.
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::default();
        let d = cfg.dim;
        let mut init = Init { store: &mut params, rng: &mut rng, group: ParamGroup::Backbone, prefix: String::new() };

        let encoder = init.scoped("encoder", |i| match cfg.encoder_kind {
            EncoderKind::PassthroughFeatures => {
                let g = cfg.input_dim / cfg.regions;
                Encoder::Passthrough {
                    cls: Linear::new(i, "cls", cfg.input_dim, d),
                    regions: (0..cfg.regions).map(|r| Linear::new(i, &format!("region{r}"), g, d)).collect(),
                }
            }
            EncoderKind::TinyPatchTransformer => {
                let pdim = cfg.frame_channels * cfg.patch_size * cfg.patch_size;
                let n_patch = cfg.patches_per_frame();
                Encoder::Patch(PatchTransformer {
                    embed: Linear::new(i, "embed", pdim, d),
                    cls: i.normal("cls_token", 1, d, 0.02),
                    pos: i.normal("pos", n_patch + 1, d, 0.02),
                    ln1: LayerNorm::new(i, "ln1", d),
                    attn: MultiHeadAttention::new(i, "attn", d, cfg.attention_heads),
                    ln2: LayerNorm::new(i, "ln2", d),
                    mlp_in: Linear::new(i, "mlp_in", d, 2 * d),
                    mlp_out: Linear::new(i, "mlp_out", 2 * d, d),
                    ln_out: LayerNorm::new(i, "ln_out", d),
                })
            }
        });

        let (temporal, enhancer, heads) = init.with_group(ParamGroup::New, |i| {
            let temporal = match cfg.temporal {
                TemporalKind::Bilstm => Some(i.scoped("temporal", |i| BiLstm {
                    forward: Lstm::new(i, "fwd", d, cfg.recurrent_hidden),
                    backward: Lstm::new(i, "bwd", d, cfg.recurrent_hidden),
                    out: Linear::new(i, "out", 2 * cfg.recurrent_hidden, d),
                })),
                TemporalKind::Identity => None,
            };
            let enhancer = i.scoped("enhancer", |i| Enhancer {
                queries: i.normal("queries", cfg.queries, d, 0.02),
                token_attn: MultiHeadAttention::new(i, "token_attn", d, cfg.attention_heads),
                frame_attn: MultiHeadAttention::new(i, "frame_attn", d, cfg.attention_heads),
            });
            let heads = i.scoped("heads", |i| Heads {
                me: Linear::new(i, "me", 2 * d, 1),
                state: Linear::new(i, "state", 2 * d, 1),
                loc: Linear::new(i, "loc", 2 * d, 1),
            });
            (temporal, enhancer, heads)
        });

        let pool = match cfg.encoder_kind {
            EncoderKind::TinyPatchTransformer => {
                let g = cfg.frame_size / cfg.patch_size;
                (g >= cfg.region_grid).then(|| adaptive_pool_matrix(g, cfg.region_grid))
            }
            EncoderKind::PassthroughFeatures => None,
        };

        Ok(Meldae { cfg, params, encoder, temporal, enhancer, heads, pool })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn num_parameters(&self) -> usize {
        self.params.num_scalars()
    }

    /// Flattens a payload into the encoder's input matrix: `T×D_in` features,
    /// or `(T·P)×(C·p·p)` patches for frames.
    pub fn input_matrix(&self, payload: &Payload) -> Result<Mat> {
        match (self.cfg.encoder_kind, payload) {
            (EncoderKind::PassthroughFeatures, Payload::Features(x)) => {
                if x.ncols() != self.cfg.input_dim {
                    return Err(Error::Shape(format!(
                        "feature width {} does not match D_in {}",
                        x.ncols(),
                        self.cfg.input_dim
                    )));
                }
                Ok(x.clone())
            }
            (EncoderKind::TinyPatchTransformer, Payload::Frames(x)) => {
                let (t_len, c, h, w) = x.dim();
                let (fs, ps) = (self.cfg.frame_size, self.cfg.patch_size);
                if c != self.cfg.frame_channels || h != fs || w != fs {
                    return Err(Error::Shape(format!(
                        "frames are {c}×{h}×{w}, expected {}×{fs}×{fs}",
                        self.cfg.frame_channels
                    )));
                }
                let g = fs / ps;
                let pdim = c * ps * ps;
                let mut out = Mat::zeros((t_len * g * g, pdim));
                for t in 0..t_len {
                    for py in 0..g {
                        for px in 0..g {
                            let row = t * g * g + py * g + px;
                            let mut k = 0;
                            for ch in 0..c {
                                for dy in 0..ps {
                                    for dx in 0..ps {
                                        out[[row, k]] = x[[t, ch, py * ps + dy, px * ps + dx]];
                                        k += 1;
                                    }
                                }
                            }
                        }
                    }
                }
                Ok(out)
            }
            (kind, p) => Err(Error::Shape(format!("{} payload cannot feed a {kind:?} encoder", p.kind()))),
        }
    }

    fn encode_vars(&self, tape: &mut Tape, p: &Bound, input: Var, t_len: usize) -> (Var, Var) {
        match &self.encoder {
            Encoder::Passthrough { cls, regions } => {
                let cls_seq = cls.forward(tape, p, input);
                let g = self.cfg.input_dim / self.cfg.regions;
                let per_region: Vec<Var> = regions
                    .iter()
                    .enumerate()
                    .map(|(r, lin)| {
                        let xr = tape.slice_cols(input, r * g, g);
                        lin.forward(tape, p, xr)
                    })
                    .collect();
                let stacked = tape.concat_rows(&per_region);
                let n_r = regions.len();
                let perm = (0..t_len * n_r).map(|i| (i % n_r) * t_len + i / n_r).collect();
                (cls_seq, tape.permute_rows(stacked, perm))
            }
            Encoder::Patch(vit) => {
                let n_patch = self.cfg.patches_per_frame();
                let emb = vit.embed.forward(tape, p, input);
                let mut cls_rows = Vec::with_capacity(t_len);
                let mut patch_rows = Vec::with_capacity(t_len);
                for t in 0..t_len {
                    let e = tape.slice_rows(emb, t * n_patch, n_patch);
                    let x = tape.concat_rows(&[p.var(vit.cls), e]);
                    let x = tape.add(x, p.var(vit.pos));
                    let h = vit.ln1.forward(tape, p, x);
                    let a = vit.attn.forward(tape, p, h, h).out;
                    let x = tape.add(x, a);
                    let h = vit.ln2.forward(tape, p, x);
                    let h = vit.mlp_in.forward(tape, p, h);
                    let h = tape.relu(h);
                    let h = vit.mlp_out.forward(tape, p, h);
                    let x = tape.add(x, h);
                    let x = vit.ln_out.forward(tape, p, x);
                    cls_rows.push(tape.slice_rows(x, 0, 1));
                    patch_rows.push(tape.slice_rows(x, 1, n_patch));
                }
                (tape.concat_rows(&cls_rows), tape.concat_rows(&patch_rows))
            }
        }
    }

    fn temporal_vars(&self, tape: &mut Tape, p: &Bound, cls: Var, patches: Var, t_len: usize) -> (Var, Var) {
        let f_global = match &self.temporal {
            Some(bi) => {
                let hf = bi.forward.forward(tape, p, cls, false);
                let hb = bi.backward.forward(tape, p, cls, true);
                let h = tape.concat_cols(&[hf, hb]);
                bi.out.forward(tape, p, h)
            }
            None => cls,
        };
        let f_regional = match &self.pool {
            Some(pool) => {
                let n_patch = self.cfg.patches_per_frame();
                let pool = tape.constant(pool.clone());
                let pooled: Vec<Var> = (0..t_len)
                    .map(|t| {
                        let x = tape.slice_rows(patches, t * n_patch, n_patch);
                        tape.matmul(pool, x)
                    })
                    .collect();
                tape.concat_rows(&pooled)
            }
            None => patches,
        };
        (f_global, f_regional)
    }

    fn enhance_vars(
        &self,
        tape: &mut Tape,
        p: &Bound,
        f_global: Var,
        f_regional: Var,
    ) -> (AttentionOutput, AttentionOutput, Var) {
        let enh = &self.enhancer;
        let tokens = enh.token_attn.forward(tape, p, p.var(enh.queries), f_regional);
        let frames = enh.frame_attn.forward(tape, p, f_global, tokens.out);
        let fused = tape.concat_cols(&[frames.out, f_global]);
        (tokens, frames, fused)
    }

    fn heads_vars(&self, tape: &mut Tape, p: &Bound, fused: Var) -> (Var, Var, Var) {
        let pooled = tape.mean_rows(fused);
        let me = self.heads.me.forward(tape, p, pooled);
        let state = self.heads.state.forward(tape, p, pooled);
        let loc = self.heads.loc.forward(tape, p, fused);
        (tape.sigmoid(me), tape.sigmoid(state), tape.sigmoid(loc))
    }

    fn build(&self, input: Mat, t_len: usize, input_leaf: bool, dropout_rng: Option<&mut ChaCha8Rng>) -> Trace {
        let mut tape = Tape::new();
        let params = self.params.bind(&mut tape);
        let input = if input_leaf { tape.leaf(input) } else { tape.constant(input) };
        let (cls, patches) = self.encode_vars(&mut tape, &params, input, t_len);
        let (f_global, f_regional) = self.temporal_vars(&mut tape, &params, cls, patches, t_len);
        let (tokens, frames, fused) = self.enhance_vars(&mut tape, &params, f_global, f_regional);
        let head_in = match dropout_rng {
            Some(rng) if self.cfg.dropout > 0.0 => {
                let keep = 1.0 - self.cfg.dropout;
                let dim = tape.value(fused).dim();
                let mask = Mat::from_shape_fn(dim, |_| if rng.gen::<f64>() < keep { 1.0 / keep } else { 0.0 });
                let mask = tape.constant(mask);
                tape.mul(fused, mask)
            }
            _ => fused,
        };
        let (p_me, p_state, s_loc) = self.heads_vars(&mut tape, &params, head_in);
        Trace {
            tape,
            params,
            input,
            cls,
            patches,
            f_global,
            f_regional,
            tokens: tokens.out,
            frames: frames.out,
            fused,
            token_attention: tokens.weights,
            frame_attention: frames.weights,
            p_me,
            p_state,
            s_loc,
        }
    }

    /// Records a forward pass. Dropout is active iff `dropout_rng` is given.
    pub fn trace(&self, payload: &Payload, dropout_rng: Option<&mut ChaCha8Rng>) -> Result<Trace> {
        let input = self.input_matrix(payload)?;
        Ok(self.build(input, payload.num_frames(), false, dropout_rng))
    }

    /// Like [`trace`](Self::trace) with the input matrix recorded as a
    /// differentiable leaf, for sensitivity probes.
    pub fn trace_with_input_grad(&self, payload: &Payload) -> Result<Trace> {
        let input = self.input_matrix(payload)?;
        Ok(self.build(input, payload.num_frames(), true, None))
    }

    /// Inference (dropout disabled).
    pub fn forward(&self, clip: &ClipSample) -> Result<ModelOutput> {
        Ok(self.trace(&clip.payload, None)?.output())
    }

    pub fn forward_payload(&self, payload: &Payload) -> Result<ModelOutput> {
        Ok(self.trace(payload, None)?.output())
    }

    pub fn encode(&self, clip: &ClipSample) -> Result<EncoderOutput> {
        let t_len = clip.num_frames();
        let input = self.input_matrix(&clip.payload)?;
        let mut tape = Tape::new();
        let p = self.params.bind(&mut tape);
        let input = tape.constant(input);
        let (cls, patches) = self.encode_vars(&mut tape, &p, input, t_len);
        Ok(EncoderOutput { cls_sequence: tape.value(cls).clone(), patch_sequence: to_3d(tape.value(patches), t_len) })
    }

    pub fn temporal_context(&self, enc: &EncoderOutput) -> Result<FeatureBundle> {
        let (t_len, n_patch, d) = enc.patch_sequence.dim();
        if enc.cls_sequence.dim() != (t_len, self.cfg.dim)
            || n_patch != self.cfg.patches_per_frame()
            || d != self.cfg.dim
        {
            return Err(Error::Shape("encoder output does not match the model configuration".into()));
        }
        let mut tape = Tape::new();
        let p = self.params.bind(&mut tape);
        let cls = tape.constant(enc.cls_sequence.clone());
        let patches = tape.constant(to_2d(&enc.patch_sequence));
        let (g, r) = self.temporal_vars(&mut tape, &p, cls, patches, t_len);
        Ok(FeatureBundle { f_global: tape.value(g).clone(), f_regional: to_3d(tape.value(r), t_len) })
    }

    pub fn enhance(&self, bundle: &FeatureBundle) -> Result<EnhancedFeatures> {
        let (t_len, n_r, d) = bundle.f_regional.dim();
        if bundle.f_global.dim() != (t_len, self.cfg.dim) || d != self.cfg.dim || n_r == 0 {
            return Err(Error::Shape("feature bundle does not match the model configuration".into()));
        }
        let mut tape = Tape::new();
        let p = self.params.bind(&mut tape);
        let g = tape.constant(bundle.f_global.clone());
        let r = tape.constant(to_2d(&bundle.f_regional));
        let (tokens, frames, fused) = self.enhance_vars(&mut tape, &p, g, r);
        let vals = |vs: &[Var]| vs.iter().map(|v| tape.value(*v).clone()).collect();
        Ok(EnhancedFeatures {
            query_tokens: self.params.get(self.enhancer.queries).value.clone(),
            f_enhanced_tokens: tape.value(tokens.out).clone(),
            f_enhanced_frames: tape.value(frames.out).clone(),
            fused: tape.value(fused).clone(),
            token_attention: vals(&tokens.weights),
            frame_attention: vals(&frames.weights),
        })
    }

    pub fn heads(&self, enh: &EnhancedFeatures) -> Result<ModelOutput> {
        if enh.fused.ncols() != 2 * self.cfg.dim || enh.fused.nrows() == 0 {
            return Err(Error::Shape("fused features must be T×2D".into()));
        }
        let mut tape = Tape::new();
        let p = self.params.bind(&mut tape);
        let fused = tape.constant(enh.fused.clone());
        let (me, st, loc) = self.heads_vars(&mut tape, &p, fused);
        Ok(ModelOutput {
            p_me: tape.value(me)[[0, 0]],
            p_state: tape.value(st)[[0, 0]],
            s_loc: tape.value(loc).column(0).to_vec(),
        })
    }

    /// Copies parameter values from `other`, which must have the same layout.
    pub(crate) fn replace_params(&mut self, params: ParamStore) {
        debug_assert_eq!(params.len(), self.params.len());
        self.params = params;
    }
}

fn to_3d(m: &Mat, t_len: usize) -> Array3<f64> {
    let (rows, d) = m.dim();
    m.to_owned().into_shape_with_order((t_len, rows / t_len, d)).expect("frame-major layout")
}

fn to_2d(a: &Array3<f64>) -> Mat {
    let (t, r, d) = a.dim();
    a.as_standard_layout().to_owned().into_shape_with_order((t * r, d)).expect("contiguous")
}

/// `(r·r)×(g·g)` matrix averaging a `g×g` token grid into `r×r` cells with
/// adaptive (possibly overlapping) bounds.
fn adaptive_pool_matrix(g: usize, r: usize) -> Mat {
    let bounds = |i: usize| (i * g / r, ((i + 1) * g).div_ceil(r));
    let mut m = Mat::zeros((r * r, g * g));
    for ry in 0..r {
        let (y0, y1) = bounds(ry);
        for rx in 0..r {
            let (x0, x1) = bounds(rx);
            let n = ((y1 - y0) * (x1 - x0)) as f64;
            for y in y0..y1 {
                for x in x0..x1 {
                    m[[ry * r + rx, y * g + x]] = 1.0 / n;
                }
            }
        }
    }
    m
}

/// Sum of attention rows for a weight matrix; used by invariant checks.
pub fn attention_row_sums(weights: &Array2<f64>) -> Vec<f64> {
    weights.sum_axis(Axis(1)).to_vec()
}
