//! Two-branch generator: a video transformer and a dual-stream audio
//! transformer, coupled after every layer by frame-level cross-attention.
//! Both branches predict flow-matching velocities in their own latent space.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dualstream::{scg_gated_update, stream_positions, BiAca, DualStreamLatent, JointBlock, ScgGate};
use crate::error::{Error, LabResult, Result, TensorError};
use crate::graph::{Graph, Var};
use crate::nn::{timestep_embedding, Attention, FeedForward, Init, Linear, Norm, RopePositions};
use crate::params::{Bound, ParamStore};
use crate::rope::Rope;
use crate::tensor::Tensor;

/// Mask value for disallowed attention pairs.
const MASKED: f64 = -1e30;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub layers_video: usize,
    pub layers_audio: usize,
    pub dim: usize,
    pub heads: usize,
    /// Audio tokens per video frame.
    pub tokens_per_frame: usize,
    pub cond_dim: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            layers_video: 4,
            layers_audio: 3,
            dim: 32,
            heads: 4,
            tokens_per_frame: 2,
            cond_dim: 8,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> LabResult<()> {
        if self.dim == 0 || self.heads == 0 || !self.dim.is_multiple_of(self.heads) {
            return Err(Error::Config(format!("{} heads do not divide width {}", self.heads, self.dim)));
        }
        if !(self.dim / self.heads).is_multiple_of(2) {
            return Err(Error::Config("rotary embedding needs an even head width".into()));
        }
        if self.tokens_per_frame == 0 || self.cond_dim == 0 {
            return Err(Error::Config("tokens_per_frame and cond_dim must be positive".into()));
        }
        if self.layers_video == 0 && self.layers_audio == 0 {
            return Err(Error::Config("model needs at least one layer".into()));
        }
        Ok(())
    }
}

/// Which parts of the audio block are wired in.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AudioWiring {
    /// Separate speech and sfx streams; otherwise one mixed stream.
    pub dual_stream: bool,
    pub bi_aca: bool,
    pub scg: bool,
}

impl Default for AudioWiring {
    fn default() -> Self {
        Self {
            dual_stream: true,
            bi_aca: true,
            scg: true,
        }
    }
}

impl AudioWiring {
    pub fn streams(&self) -> usize {
        if self.dual_stream {
            2
        } else {
            1
        }
    }

    fn has_bi_aca(&self) -> bool {
        self.dual_stream && self.bi_aca
    }

    fn has_scg(&self) -> bool {
        self.has_bi_aca() && self.scg
    }
}

/// Noisy latents and flow times for one forward pass, as plain tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct BranchState {
    /// `[B, F, D]`
    pub video_latent: Tensor,
    /// One `[B, N, D]` tensor per audio stream.
    pub audio: Vec<Tensor>,
    /// Flow time per sample, `1` on the data side.
    pub t_v: Vec<f64>,
    pub t_a: Vec<f64>,
}

#[derive(Clone, Debug)]
struct VideoLayer {
    norm_attn: Norm,
    attn: Attention,
    norm_ffn: Norm,
    ffn: FeedForward,
}

#[derive(Clone, Debug)]
struct AudioLayer {
    bi_aca: Option<BiAca>,
    scg: Option<ScgGate>,
    joint: JointBlock,
}

/// Frame-level cross-attention between video frames and the audio tokens
/// they own.
#[derive(Clone, Debug)]
pub struct Fusion {
    pub norm_video: Norm,
    pub norm_audio: Norm,
    pub video_from_audio: Attention,
    pub audio_from_video: Attention,
}

impl Fusion {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, heads: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        Ok(Self {
            norm_video: Norm::new(store, &format!("{name}.norm_v"), dim),
            norm_audio: Norm::new(store, &format!("{name}.norm_a"), dim),
            video_from_audio: Attention::new(store, &format!("{name}.v_from_a"), dim, heads, rng)?,
            audio_from_video: Attention::new(store, &format!("{name}.a_from_v"), dim, heads, rng)?,
        })
    }

    /// Residual updates `(Δvideo, Δaudio)` for video `[B, F, D]` and audio `[B, N, D]`.
    pub fn deltas(&self, g: &mut Graph, p: &Bound, video: Var, audio: Var) -> Result<(Var, Var)> {
        let (f, n) = (g.shape(video)[1], g.shape(audio)[1]);
        if f == 0 || n % f != 0 {
            return Err(TensorError::InvalidShape {
                op: "bidirectional_fusion",
                shape: g.shape(audio).to_vec(),
                reason: format!("{n} audio tokens are not a multiple of {f} frames"),
            });
        }
        let (v_mask, a_mask) = frame_masks(f, n / f);
        let v_mask = g.constant(v_mask);
        let a_mask = g.constant(a_mask);
        let nv = self.norm_video.forward(g, p, video)?;
        let na = self.norm_audio.forward(g, p, audio)?;
        let dv = self.video_from_audio.forward(g, p, nv, na, None, Some(v_mask))?;
        let da = self.audio_from_video.forward(g, p, na, nv, None, Some(a_mask))?;
        Ok((dv, da))
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, video: Var, audio: Var) -> Result<(Var, Var)> {
        let (dv, da) = self.deltas(g, p, video, audio)?;
        Ok((g.add(video, dv)?, g.add(audio, da)?))
    }
}

/// Additive masks `[F, N]` (video queries) and `[N, F]` (audio queries):
/// frame `f` owns audio tokens `f·r .. (f+1)·r`.
pub fn frame_masks(frames: usize, r: usize) -> (Tensor, Tensor) {
    let n = frames * r;
    let video = Tensor::from_fn(&[frames, n], |i| if (i % n) / r == i / n { 0.0 } else { MASKED });
    let audio = Tensor::from_fn(&[n, frames], |i| if (i / frames) / r == i % frames { 0.0 } else { MASKED });
    (video, audio)
}

/// Frame-level bidirectional fusion with freshly initialised projections.
pub fn bidirectional_fusion(video_tokens: &Tensor, audio_tokens: &Tensor, heads: usize, seed: u64) -> Result<(Tensor, Tensor)> {
    let dim = *video_tokens.shape().last().unwrap_or(&0);
    let mut store = ParamStore::new();
    let fusion = Fusion::new(&mut store, "fusion", dim, heads, &mut ChaCha8Rng::seed_from_u64(seed))?;
    let mut g = Graph::new();
    let p = store.bind_frozen(&mut g);
    let v = g.constant(video_tokens.clone());
    let a = g.constant(audio_tokens.clone());
    let (v, a) = fusion.forward(&mut g, &p, v, a)?;
    Ok((g.value(v).clone(), g.value(a).clone()))
}

/// Graph handles produced by one forward pass.
#[derive(Clone, Debug)]
pub struct ForwardOutput {
    /// `[B, F, D]`
    pub video: Var,
    /// One velocity per audio stream, `[B, N, D]` each.
    pub audio: Vec<Var>,
    /// `(g_sp, g_sfx)` per audio layer, each `[B, 1, 1]`; empty without gating.
    pub gates: Vec<(Var, Var)>,
}

/// Plain-tensor velocities from [`FusionModel::predict`].
#[derive(Clone, Debug, PartialEq)]
pub struct Velocities {
    pub video: Tensor,
    pub audio: Vec<Tensor>,
    /// `[g_sp, g_sfx]` per layer, one row per sample.
    pub gates: Vec<Vec<[f64; 2]>>,
}

#[derive(Clone, Debug)]
pub struct FusionModel {
    pub config: ModelConfig,
    pub wiring: AudioWiring,
    pub store: ParamStore,
    video_in: Linear,
    video_time: Linear,
    audio_in: Linear,
    audio_time: Linear,
    audio_cond: Linear,
    video_layers: Vec<VideoLayer>,
    audio_layers: Vec<AudioLayer>,
    fusions: Vec<Fusion>,
    video_out_norm: Norm,
    video_out: Linear,
    audio_out_norm: Norm,
    audio_out: Linear,
    rope: Rope,
}

fn layer_err(layer: impl Into<String>) -> impl FnOnce(TensorError) -> Error {
    let layer = layer.into();
    move |source| Error::Layer { layer, source }
}

impl FusionModel {
    pub fn new(config: ModelConfig, wiring: AudioWiring, seed: u64) -> LabResult<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rng = &mut rng;
        let mut store = ParamStore::new();
        let s = &mut store;
        let (d, h) = (config.dim, config.heads);

        let video_in = Linear::new(s, "video.in", d, d, Init::Normal, rng);
        let video_time = Linear::new(s, "video.time", d, d, Init::Normal, rng);
        let audio_in = Linear::new(s, "audio.in", d, d, Init::Normal, rng);
        let audio_time = Linear::new(s, "audio.time", d, d, Init::Normal, rng);
        let audio_cond = Linear::new(s, "audio.cond", 2 * config.cond_dim, d, Init::Normal, rng);

        let mut video_layers = Vec::new();
        for i in 0..config.layers_video {
            let name = format!("video.layer{i}");
            video_layers.push(VideoLayer {
                norm_attn: Norm::new(s, &format!("{name}.norm_attn"), d),
                attn: Attention::new(s, &format!("{name}.attn"), d, h, rng)?,
                norm_ffn: Norm::new(s, &format!("{name}.norm_ffn"), d),
                ffn: FeedForward::new(s, &format!("{name}.ffn"), d, 2 * d, rng),
            });
        }
        let mut audio_layers = Vec::new();
        for i in 0..config.layers_audio {
            let name = format!("audio.layer{i}");
            let bi_aca = if wiring.has_bi_aca() {
                Some(BiAca::new(s, &format!("{name}.biaca"), d, h, rng)?)
            } else {
                None
            };
            let scg = wiring
                .has_scg()
                .then(|| ScgGate::new(s, &format!("{name}.scg"), config.cond_dim, rng));
            let joint = JointBlock::new(s, &format!("{name}.joint"), d, h, wiring.streams(), rng)?;
            audio_layers.push(AudioLayer { bi_aca, scg, joint });
        }
        let mut fusions = Vec::new();
        for i in 0..config.layers_video.max(config.layers_audio) {
            fusions.push(Fusion::new(s, &format!("fusion.stage{i}"), d, h, rng)?);
        }
        let video_out_norm = Norm::new(s, "video.out_norm", d);
        let video_out = Linear::new(s, "video.out", d, d, Init::Normal, rng);
        let audio_out_norm = Norm::new(s, "audio.out_norm", d);
        let audio_out = Linear::new(s, "audio.out", d, d, Init::Normal, rng);
        Ok(Self {
            rope: Rope::new(d / h, 10_000.0)?,
            config,
            wiring,
            store,
            video_in,
            video_time,
            audio_in,
            audio_time,
            audio_cond,
            video_layers,
            audio_layers,
            fusions,
            video_out_norm,
            video_out,
            audio_out_norm,
            audio_out,
        })
    }

    pub fn streams(&self) -> usize {
        self.wiring.streams()
    }

    pub fn gated(&self) -> bool {
        self.wiring.has_scg()
    }

    pub fn audio_layer_count(&self) -> usize {
        self.audio_layers.len()
    }

    /// Parameter count whose name starts with `prefix`.
    pub fn numel_with_prefix(&self, prefix: &str) -> usize {
        self.store
            .iter()
            .filter(|(_, n, _)| n.starts_with(prefix))
            .map(|(_, _, t)| t.numel())
            .sum()
    }

    fn check_inputs(&self, g: &Graph, video: Var, audio: &[Var], t_v: &[f64], t_a: &[f64], cond: Var) -> LabResult<()> {
        let vs = g.shape(video);
        let d = self.config.dim;
        if vs.len() != 3 || vs[2] != d {
            return Err(Error::Domain(format!("video latent shape {vs:?} does not end in width {d}")));
        }
        let (b, f) = (vs[0], vs[1]);
        if audio.len() != self.streams() {
            return Err(Error::Domain(format!(
                "expected {} audio streams, got {}",
                self.streams(),
                audio.len()
            )));
        }
        let n = f * self.config.tokens_per_frame;
        for &a in audio {
            if g.shape(a) != [b, n, d] {
                return Err(TensorError::Shape {
                    op: "audio latent",
                    lhs: vec![b, n, d],
                    rhs: g.shape(a).to_vec(),
                }
                .into());
            }
        }
        if g.shape(cond) != [b, 2 * self.config.cond_dim] {
            return Err(TensorError::Shape {
                op: "condition",
                lhs: vec![b, 2 * self.config.cond_dim],
                rhs: g.shape(cond).to_vec(),
            }
            .into());
        }
        if t_v.len() != b || t_a.len() != b {
            return Err(Error::Domain(format!("need {b} flow times per branch")));
        }
        Ok(())
    }

    fn time_embed(&self, g: &mut Graph, p: &Bound, proj: &Linear, t: &[f64]) -> Result<Var> {
        let e = g.constant(timestep_embedding(t, self.config.dim));
        let e = proj.forward(g, p, e)?;
        g.reshape(e, &[t.len(), 1, self.config.dim])
    }

    fn video_layer(&self, g: &mut Graph, p: &Bound, layer: &VideoLayer, x: Var) -> Result<Var> {
        let pos = stream_positions(g.shape(x)[1]);
        let n = layer.norm_attn.forward(g, p, x)?;
        let rope = RopePositions {
            rope: &self.rope,
            query: &pos,
            key: &pos,
        };
        let a = layer.attn.forward(g, p, n, n, Some(rope), None)?;
        let x = g.add(x, a)?;
        let n = layer.norm_ffn.forward(g, p, x)?;
        let f = layer.ffn.forward(g, p, n)?;
        g.add(x, f)
    }

    fn audio_layer(
        &self,
        g: &mut Graph,
        p: &Bound,
        layer: &AudioLayer,
        streams: &[Var],
        cond: Var,
        gates: &mut Vec<(Var, Var)>,
    ) -> Result<Vec<Var>> {
        let mut streams = streams.to_vec();
        if let Some(bi_aca) = &layer.bi_aca {
            let lat = DualStreamLatent::new(g, streams[0], streams[1])?;
            let (to_sp, to_sfx) = bi_aca.messages(g, p, lat)?;
            match &layer.scg {
                Some(scg) => {
                    let (g_sp, g_sfx) = scg.forward(g, p, cond)?;
                    gates.push((g_sp, g_sfx));
                    streams[0] = scg_gated_update(g, lat.h_sp, to_sp, g_sp)?;
                    streams[1] = scg_gated_update(g, lat.h_sfx, to_sfx, g_sfx)?;
                }
                None => {
                    streams[0] = g.add(lat.h_sp, to_sp)?;
                    streams[1] = g.add(lat.h_sfx, to_sfx)?;
                }
            }
        }
        layer.joint.forward_streams(g, p, &streams)
    }

    fn fuse(&self, g: &mut Graph, p: &Bound, stage: usize, video: Var, streams: &mut [Var]) -> Result<Var> {
        let mut mix = streams[0];
        for &s in &streams[1..] {
            mix = g.add(mix, s)?;
        }
        let (dv, da) = self.fusions[stage].deltas(g, p, video, mix)?;
        for s in streams.iter_mut() {
            *s = g.add(*s, da)?;
        }
        g.add(video, dv)
    }

    /// Joint forward over both branches.
    ///
    /// `t_v` and `t_a` are per-sample flow times; each is embedded only into
    /// its own branch. `cond` is `[B, 2·cond_dim]` holding `[c_s; c_a]`.
    #[allow(clippy::too_many_arguments)]
    pub fn forward(
        &self,
        g: &mut Graph,
        p: &Bound,
        video: Var,
        audio: &[Var],
        t_v: &[f64],
        t_a: &[f64],
        cond: Var,
    ) -> LabResult<ForwardOutput> {
        self.check_inputs(g, video, audio, t_v, t_a, cond)?;

        let mut x = self.video_in.forward(g, p, video).map_err(layer_err("video.in"))?;
        let te = self.time_embed(g, p, &self.video_time, t_v).map_err(layer_err("video.time"))?;
        x = g.add(x, te).map_err(layer_err("video.time"))?;

        let audio_bias = (|| {
            let te = self.time_embed(g, p, &self.audio_time, t_a)?;
            let ce = self.audio_cond.forward(g, p, cond)?;
            let ce = g.reshape(ce, &[t_a.len(), 1, self.config.dim])?;
            g.add(te, ce)
        })()
        .map_err(layer_err("audio.embed"))?;
        let mut streams = Vec::with_capacity(audio.len());
        for &a in audio {
            let h = self.audio_in.forward(g, p, a).map_err(layer_err("audio.in"))?;
            streams.push(g.add(h, audio_bias).map_err(layer_err("audio.embed"))?);
        }

        let mut gates = Vec::new();
        for stage in 0..self.fusions.len() {
            if let Some(layer) = self.video_layers.get(stage) {
                x = self.video_layer(g, p, layer, x).map_err(layer_err(format!("video.layer{stage}")))?;
            }
            if let Some(layer) = self.audio_layers.get(stage) {
                streams = self
                    .audio_layer(g, p, layer, &streams, cond, &mut gates)
                    .map_err(layer_err(format!("audio.layer{stage}")))?;
            }
            x = self
                .fuse(g, p, stage, x, &mut streams)
                .map_err(layer_err(format!("fusion.stage{stage}")))?;
        }

        let head = |g: &mut Graph, norm: &Norm, out: &Linear, h: Var| -> Result<Var> {
            let n = norm.forward(g, p, h)?;
            out.forward(g, p, n)
        };
        let video = head(g, &self.video_out_norm, &self.video_out, x).map_err(layer_err("video.out"))?;
        let mut audio_out = Vec::with_capacity(streams.len());
        for s in streams {
            audio_out.push(head(g, &self.audio_out_norm, &self.audio_out, s).map_err(layer_err("audio.out"))?);
        }
        Ok(ForwardOutput {
            video,
            audio: audio_out,
            gates,
        })
    }

    /// Velocities for the audio streams with the video latent held as fixed
    /// context at the same flow time.
    pub fn audio_branch_forward(
        &self,
        g: &mut Graph,
        p: &Bound,
        audio: &[Var],
        t_a: &[f64],
        cond: Var,
        video_ctx: Var,
    ) -> LabResult<Vec<Var>> {
        Ok(self.forward(g, p, video_ctx, audio, t_a, t_a, cond)?.audio)
    }

    /// Video velocity with the audio latents held as fixed context at the same
    /// flow time. Audio-side conditioning is zero.
    pub fn video_branch_forward(&self, g: &mut Graph, p: &Bound, video: Var, t_v: &[f64], audio_ctx: &[Var]) -> LabResult<Var> {
        let b = g.shape(video)[0];
        let cond = g.constant(Tensor::zeros(&[b, 2 * self.config.cond_dim]));
        Ok(self.forward(g, p, video, audio_ctx, t_v, t_v, cond)?.video)
    }

    /// Evaluate velocities without recording gradients for parameters.
    pub fn predict(&self, state: &BranchState, cond: &Tensor) -> LabResult<Velocities> {
        let mut g = Graph::new();
        let p = self.store.bind_frozen(&mut g);
        let video = g.constant(state.video_latent.clone());
        let audio: Vec<Var> = state.audio.iter().map(|a| g.constant(a.clone())).collect();
        let cond = g.constant(cond.clone());
        let out = self.forward(&mut g, &p, video, &audio, &state.t_v, &state.t_a, cond)?;
        let gates = out
            .gates
            .iter()
            .map(|&(sp, sfx)| g.value(sp).data().iter().zip(g.value(sfx).data()).map(|(&a, &b)| [a, b]).collect())
            .collect();
        Ok(Velocities {
            video: g.value(out.video).clone(),
            audio: out.audio.iter().map(|&a| g.value(a).clone()).collect(),
            gates,
        })
    }
}
