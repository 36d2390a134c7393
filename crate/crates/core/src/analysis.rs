//! Joint sampling, audio-video synchronisation scoring and gate statistics.

use std::collections::BTreeMap;
use std::io::Write;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::dualstream::ConditionPair;
use crate::error::{Error, LabResult, TensorError};
use crate::flowmatch::{cfg_velocity, euler_sample, sample_prior, DEFAULT_CFG_SCALE, DEFAULT_SAMPLE_STEPS};
use crate::model::{BranchState, FusionModel};
use crate::tensor::Tensor;
use crate::world::{find_peaks, onset_times, recover_motion, token_energy, Episode, EpisodeClass};

/// Onset matching window, in audio tokens.
pub const SYNC_WINDOW: usize = 8;
/// Generated onsets must exceed this fraction of the loudest sfx token.
pub const ONSET_FRACTION: f64 = 0.3;
pub const GATE_BUCKETS: usize = 10;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SampleOptions {
    pub steps: usize,
    pub cfg_scale: f64,
    /// Apply guidance to the video velocity as well as the audio.
    pub guide_video: bool,
    pub seed: u64,
}

impl Default for SampleOptions {
    fn default() -> Self {
        Self {
            steps: DEFAULT_SAMPLE_STEPS,
            cfg_scale: DEFAULT_CFG_SCALE,
            guide_video: true,
            seed: 0,
        }
    }
}

/// Gates seen at one sampler step: flow time and `[g_sp, g_sfx]` per layer.
#[derive(Clone, Debug, PartialEq)]
pub struct GateSample {
    pub t: f64,
    pub layers: Vec<[f64; 2]>,
}

/// One generated audio-video clip.
#[derive(Clone, Debug, PartialEq)]
pub struct GeneratedAv {
    /// `[F, dim]`
    pub video: Tensor,
    /// One `[N, dim]` tensor per audio stream.
    pub audio: Vec<Tensor>,
    /// Conditional-branch gates at every sampler step.
    pub gates: Vec<GateSample>,
}

impl GeneratedAv {
    /// The stream carrying sound effects: the sfx stream, or the mix.
    pub fn sfx(&self) -> &Tensor {
        self.audio.last().expect("at least one audio stream")
    }
}

fn pack(parts: &[&Tensor]) -> Tensor {
    let data: Vec<f64> = parts.iter().flat_map(|t| t.data().iter().copied()).collect();
    Tensor::new(vec![data.len()], data).expect("non-empty")
}

fn unpack(x: &Tensor, shapes: &[Vec<usize>]) -> Vec<Tensor> {
    let mut offset = 0;
    shapes
        .iter()
        .map(|s| {
            let len: usize = s.iter().product();
            let t = Tensor::new(s.clone(), x.data()[offset..offset + len].to_vec()).expect("sizes agree");
            offset += len;
            t
        })
        .collect()
}

/// Repeat a `[...]` tensor as a batch of `b` rows, `[b, ...]`.
fn repeat(t: &Tensor, b: usize) -> Tensor {
    let mut shape = vec![b];
    shape.extend_from_slice(t.shape());
    let data = t.data().repeat(b);
    Tensor::new(shape, data).expect("sizes agree")
}

/// Integrate both branches jointly from the prior with `opts.steps` Euler
/// steps at a shared flow time, applying classifier-free guidance against the
/// all-zero condition.
pub fn sample_av(model: &FusionModel, cond: &ConditionPair, frames: usize, opts: &SampleOptions) -> LabResult<GeneratedAv> {
    let cfg = &model.config;
    if cond.dim() != cfg.cond_dim {
        return Err(TensorError::Shape {
            op: "sample_av condition",
            lhs: vec![cfg.cond_dim],
            rhs: vec![cond.dim()],
        }
        .into());
    }
    let n = frames * cfg.tokens_per_frame;
    let mut shapes = vec![vec![frames, cfg.dim]];
    shapes.extend((0..model.streams()).map(|_| vec![n, cfg.dim]));
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let priors: Vec<Tensor> = shapes.iter().map(|s| sample_prior(s, &mut rng)).collect();
    let start = pack(&priors.iter().collect::<Vec<_>>());

    let guided = opts.cfg_scale != 1.0;
    let rows = if guided { 2 } else { 1 };
    let mut conds = vec![cond.clone()];
    if guided {
        conds.push(ConditionPair::null(cfg.cond_dim));
    }
    let cond_t = ConditionPair::stack_concat(&conds)?;
    let mut gates = Vec::with_capacity(opts.steps);

    let out = euler_sample(
        |x, t| {
            let parts = unpack(x, &shapes);
            let state = BranchState {
                video_latent: repeat(&parts[0], rows),
                audio: parts[1..].iter().map(|a| repeat(a, rows)).collect(),
                t_v: vec![t; rows],
                t_a: vec![t; rows],
            };
            let v = model.predict(&state, &cond_t)?;
            gates.push(GateSample {
                t,
                layers: v.gates.iter().map(|layer| layer[0]).collect(),
            });
            let mut velocities = Vec::with_capacity(shapes.len());
            let branches = std::iter::once((&v.video, opts.guide_video)).chain(v.audio.iter().map(|a| (a, true)));
            for (vel, guide) in branches {
                let cond_row = vel.index_outer(0);
                if guided && guide {
                    velocities.push(cfg_velocity(&cond_row, &vel.index_outer(1), opts.cfg_scale)?);
                } else {
                    velocities.push(cond_row);
                }
            }
            Ok(pack(&velocities.iter().collect::<Vec<_>>()))
        },
        &start,
        opts.steps,
    )?;
    let mut parts = unpack(&out, &shapes);
    let video = parts.remove(0);
    Ok(GeneratedAv {
        video,
        audio: parts,
        gates,
    })
}

/// Synchronisation score of one clip.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SyncEntry {
    pub episode: usize,
    /// Mean absolute onset-to-peak offset over matched pairs, in audio tokens;
    /// the window size when nothing matched.
    pub mean_abs_lag: f64,
    pub matched: usize,
    /// Unmatched motion peaks plus unmatched generated onsets.
    pub unmatched: usize,
}

/// Onsets of a generated sfx track, relative to its loudest token.
pub fn generated_onsets(sfx: &Tensor) -> Vec<usize> {
    let peak = token_energy(sfx).into_iter().fold(0.0, f64::max);
    if peak > 0.0 {
        onset_times(sfx, ONSET_FRACTION * peak)
    } else {
        Vec::new()
    }
}

/// Greedy nearest matching within `window`: the globally closest available
/// pair is matched first; ties go to the earlier peak, then the earlier onset.
pub fn match_onsets(peaks: &[usize], onsets: &[usize], window: usize) -> Vec<(usize, usize)> {
    let mut candidates: Vec<(usize, usize, usize)> = Vec::new();
    for (i, &p) in peaks.iter().enumerate() {
        for (j, &o) in onsets.iter().enumerate() {
            let lag = p.abs_diff(o);
            if lag <= window {
                candidates.push((lag, i, j));
            }
        }
    }
    candidates.sort_unstable();
    let (mut used_p, mut used_o) = (vec![false; peaks.len()], vec![false; onsets.len()]);
    let mut pairs = Vec::new();
    for (_, i, j) in candidates {
        if !used_p[i] && !used_o[j] {
            used_p[i] = true;
            used_o[j] = true;
            pairs.push((peaks[i], onsets[j]));
        }
    }
    pairs.sort_unstable();
    pairs
}

/// Score already-detected onsets against motion peaks.
pub fn desync_from_onsets(onsets: &[usize], motion_peaks: &[usize]) -> LabResult<SyncEntry> {
    if motion_peaks.is_empty() {
        return Err(Error::Domain("desync metric needs at least one motion peak".into()));
    }
    let pairs = match_onsets(motion_peaks, onsets, SYNC_WINDOW);
    let matched = pairs.len();
    let mean_abs_lag = if matched == 0 {
        SYNC_WINDOW as f64
    } else {
        pairs.iter().map(|&(p, o)| p.abs_diff(o) as f64).sum::<f64>() / matched as f64
    };
    Ok(SyncEntry {
        episode: 0,
        mean_abs_lag,
        matched,
        unmatched: motion_peaks.len() + onsets.len() - 2 * matched,
    })
}

/// Detect onsets in generated sfx and score them against motion peaks.
pub fn desync_metric(gen_sfx: &Tensor, motion_peaks: &[usize]) -> LabResult<SyncEntry> {
    desync_from_onsets(&generated_onsets(gen_sfx), motion_peaks)
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyncReport {
    pub entries: Vec<SyncEntry>,
}

impl SyncReport {
    pub fn mean(&self) -> f64 {
        self.entries.iter().map(|e| e.mean_abs_lag).sum::<f64>() / self.entries.len().max(1) as f64
    }

    pub fn median(&self) -> f64 {
        let mut lags: Vec<f64> = self.entries.iter().map(|e| e.mean_abs_lag).collect();
        if lags.is_empty() {
            return 0.0;
        }
        lags.sort_by(f64::total_cmp);
        let m = lags.len() / 2;
        if lags.len() % 2 == 1 {
            lags[m]
        } else {
            0.5 * (lags[m - 1] + lags[m])
        }
    }

    pub fn write_csv(&self, w: &mut impl Write) -> std::io::Result<()> {
        writeln!(w, "episode,mean_abs_lag,matched,unmatched")?;
        for e in &self.entries {
            writeln!(w, "{},{},{},{}", e.episode, e.mean_abs_lag, e.matched, e.unmatched)?;
        }
        Ok(())
    }
}

/// Score one generated clip: peaks of the motion recovered from its video
/// against onsets in its sfx. A clip whose video has no peak scores the full
/// window with every onset unmatched.
pub fn score_clip(gen: &GeneratedAv, tokens_per_frame: usize) -> SyncEntry {
    let peaks = find_peaks(&recover_motion(&gen.video, tokens_per_frame));
    let onsets = generated_onsets(gen.sfx());
    desync_from_onsets(&onsets, &peaks).unwrap_or(SyncEntry {
        episode: 0,
        mean_abs_lag: SYNC_WINDOW as f64,
        matched: 0,
        unmatched: onsets.len(),
    })
}

/// Generate one clip per episode condition and score its synchronisation.
/// Clip `i` uses sampler seed `opts.seed + i`.
pub fn evaluate_sync(model: &FusionModel, episodes: &[Episode], opts: &SampleOptions) -> LabResult<SyncReport> {
    let mut entries = Vec::with_capacity(episodes.len());
    for (i, ep) in episodes.iter().enumerate() {
        let o = SampleOptions {
            seed: opts.seed.wrapping_add(i as u64),
            ..*opts
        };
        let gen = sample_av(model, &ep.cond, ep.frames(), &o)?;
        entries.push(SyncEntry {
            episode: i,
            ..score_clip(&gen, model.config.tokens_per_frame)
        });
    }
    Ok(SyncReport { entries })
}

/// Decile of a flow time; `t = 1` is the data side.
pub fn gate_bucket(t: f64) -> usize {
    ((t * GATE_BUCKETS as f64).floor() as usize).min(GATE_BUCKETS - 1)
}

pub fn bucket_label(bucket: usize) -> String {
    format!("{:.1}-{:.1}", bucket as f64 / 10.0, (bucket + 1) as f64 / 10.0)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GateRow {
    pub layer: usize,
    pub bucket: usize,
    pub class: EpisodeClass,
    pub mean_g_sp: f64,
    pub mean_g_sfx: f64,
    /// Number of clips that visited this bucket.
    pub count: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GateReport {
    pub rows: Vec<GateRow>,
}

impl GateReport {
    /// Count-weighted mean `(g_sp, g_sfx)` of one class at one layer.
    pub fn layer_means(&self, layer: usize, class: EpisodeClass) -> Option<(f64, f64)> {
        let rows: Vec<&GateRow> = self.rows.iter().filter(|r| r.layer == layer && r.class == class).collect();
        let n: usize = rows.iter().map(|r| r.count).sum();
        (n > 0).then(|| {
            let sp = rows.iter().map(|r| r.mean_g_sp * r.count as f64).sum::<f64>() / n as f64;
            let sfx = rows.iter().map(|r| r.mean_g_sfx * r.count as f64).sum::<f64>() / n as f64;
            (sp, sfx)
        })
    }

    pub fn layers(&self) -> usize {
        self.rows.iter().map(|r| r.layer + 1).max().unwrap_or(0)
    }

    /// Columns: layer, t_bucket (flow-time decile, 1 = data side), class,
    /// mean_g_sp, mean_g_sfx, count.
    pub fn write_csv(&self, w: &mut impl Write) -> std::io::Result<()> {
        writeln!(w, "layer,t_bucket,class,mean_g_sp,mean_g_sfx,count")?;
        for r in &self.rows {
            writeln!(
                w,
                "{},{},{},{},{},{}",
                r.layer,
                bucket_label(r.bucket),
                r.class,
                r.mean_g_sp,
                r.mean_g_sfx,
                r.count
            )?;
        }
        Ok(())
    }
}

/// Collect the semantic gates seen while sampling each episode's condition,
/// averaged per clip within each (layer, flow-time decile) and then per class.
pub fn gate_analysis(model: &FusionModel, episodes: &[Episode], opts: &SampleOptions) -> LabResult<GateReport> {
    if !model.gated() {
        return Err(TensorError::Contract("gate analysis needs a model with semantic gating".into()).into());
    }
    // (layer, bucket, class) -> (sum sp, sum sfx, clips)
    let mut acc: BTreeMap<(usize, usize, EpisodeClass), (f64, f64, usize)> = BTreeMap::new();
    for (i, ep) in episodes.iter().enumerate() {
        let o = SampleOptions {
            seed: opts.seed.wrapping_add(i as u64),
            ..*opts
        };
        let gen = sample_av(model, &ep.cond, ep.frames(), &o)?;
        // Per clip: (layer, bucket) -> (sum sp, sum sfx, steps)
        let mut clip: BTreeMap<(usize, usize), (f64, f64, usize)> = BTreeMap::new();
        for s in &gen.gates {
            for (layer, g) in s.layers.iter().enumerate() {
                let e = clip.entry((layer, gate_bucket(s.t))).or_default();
                e.0 += g[0];
                e.1 += g[1];
                e.2 += 1;
            }
        }
        for ((layer, bucket), (sp, sfx, k)) in clip {
            let e = acc.entry((layer, bucket, ep.class)).or_default();
            e.0 += sp / k as f64;
            e.1 += sfx / k as f64;
            e.2 += 1;
        }
    }
    let rows = acc
        .into_iter()
        .map(|((layer, bucket, class), (sp, sfx, n))| GateRow {
            layer,
            bucket,
            class,
            mean_g_sp: sp / n as f64,
            mean_g_sfx: sfx / n as f64,
            count: n,
        })
        .collect();
    Ok(GateReport { rows })
}
