//! Training loop for the two-branch generator: dual flow-matching supervision
//! on the speech and sfx streams, direction-weighted video/audio objective,
//! curriculum-driven timestep sampling, metrics CSV and checkpoints.

use std::fmt::Write as _;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::dualstream::ConditionPair;
use crate::error::{Error, LabResult, Result, TensorError};
use crate::flowmatch::{self, cfm_loss, cfm_loss_graph, FlowSample};
use crate::forcing::{flow_time, sample_pair, CurriculumState, Phase, Schedule, TimestepPair};
use crate::forcing::{DEFAULT_DELTA_MAX, DEFAULT_LAMBDA, DEFAULT_RATIOS};
use crate::graph::{Graph, Var};
use crate::model::{AudioWiring, FusionModel, ModelConfig};
use crate::optim::Adam;
use crate::tensor::Tensor;
use crate::world::{Dataset, Episode, WorldSpec};

pub const METRICS_HEADER: &str = "step,phase,t_v,t_a,d,w_v,w_a,loss_v,loss_sp,loss_sfx,loss_total";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Ablation {
    #[serde(rename = "disable_HGHS")]
    pub disable_hghs: bool,
    #[serde(rename = "disable_BiACA")]
    pub disable_biaca: bool,
    #[serde(rename = "disable_SCG")]
    pub disable_scg: bool,
    #[serde(rename = "disable_CMFS")]
    pub disable_cmfs: bool,
    pub schedule: Schedule,
}

impl Default for Ablation {
    fn default() -> Self {
        Self {
            disable_hghs: false,
            disable_biaca: false,
            disable_scg: false,
            disable_cmfs: false,
            schedule: Schedule::ProgForcing,
        }
    }
}

impl Ablation {
    pub fn wiring(&self) -> AudioWiring {
        AudioWiring {
            dual_stream: !self.disable_hghs,
            bi_aca: !self.disable_biaca,
            scg: !self.disable_scg,
        }
    }

    /// Schedule actually used; disabling cross-modal forcing pins it to `SyncOnly`.
    pub fn effective_schedule(&self) -> Schedule {
        if self.disable_cmfs {
            Schedule::SyncOnly
        } else {
            self.schedule
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub total_steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub lambda: f64,
    pub delta_max: f64,
    pub ratios: [f64; 3],
    pub cfg_scale: f64,
    pub sample_steps: usize,
    pub seed: u64,
    pub ablation: Ablation,
    pub model: ModelConfig,
    /// Video frames per episode.
    pub frames: usize,
    /// Number of distinct training episodes batches are drawn from.
    pub pool_size: usize,
    /// Probability of replacing a sample's conditions with zeros.
    pub cond_drop: f64,
    pub freeze_video: bool,
    pub out_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            total_steps: 2000,
            batch_size: 8,
            learning_rate: 1e-3,
            lambda: DEFAULT_LAMBDA,
            delta_max: DEFAULT_DELTA_MAX,
            ratios: DEFAULT_RATIOS,
            cfg_scale: flowmatch::DEFAULT_CFG_SCALE,
            sample_steps: flowmatch::DEFAULT_SAMPLE_STEPS,
            seed: 0,
            ablation: Ablation::default(),
            model: ModelConfig::default(),
            frames: 16,
            pool_size: 96,
            cond_drop: 0.1,
            freeze_video: false,
            out_dir: PathBuf::from("runs/default"),
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> LabResult<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> LabResult<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serialises")
    }

    pub fn validate(&self) -> LabResult<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.total_steps == 0 || self.batch_size == 0 || self.sample_steps == 0 || self.pool_size == 0 {
            return fail("total_steps, batch_size, sample_steps and pool_size must be positive".into());
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return fail(format!("learning_rate {} must be positive", self.learning_rate));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return fail(format!("lambda {} must be non-negative", self.lambda));
        }
        if !(0.0..=1.0).contains(&self.delta_max) {
            return fail(format!("delta_max {} outside [0, 1]", self.delta_max));
        }
        if self.ratios.iter().any(|r| !(0.0..=1.0).contains(r)) || (self.ratios.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return fail(format!("ratios {:?} must lie in [0, 1] and sum to 1", self.ratios));
        }
        if !self.cfg_scale.is_finite() {
            return fail("cfg_scale must be finite".into());
        }
        if !(0.0..1.0).contains(&self.cond_drop) {
            return fail(format!("cond_drop {} outside [0, 1)", self.cond_drop));
        }
        self.model.validate()?;
        self.world_spec_checked()?;
        Ok(())
    }

    pub fn world_spec(&self) -> WorldSpec {
        WorldSpec {
            frames: self.frames,
            tokens_per_frame: self.model.tokens_per_frame,
            dim: self.model.dim,
            cond_dim: self.model.cond_dim,
        }
    }

    fn world_spec_checked(&self) -> LabResult<WorldSpec> {
        let spec = self.world_spec();
        crate::world::generate_episode_with(&spec, 0, crate::world::EpisodeClass::Balanced).map_err(|e| Error::Config(e.to_string()))?;
        Ok(spec)
    }

    /// Seed of the training episode pool.
    pub fn data_seed(&self) -> u64 {
        self.seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ 0xda7a
    }
}

/// One row of the metrics CSV.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepReport {
    pub step: usize,
    pub phase: Phase,
    pub t_v: f64,
    pub t_a: f64,
    pub d: u8,
    pub w_v: f64,
    pub w_a: f64,
    pub loss_v: f64,
    pub loss_sp: f64,
    pub loss_sfx: f64,
    pub loss_total: f64,
}

impl StepReport {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{},{}",
            self.step,
            self.phase.index(),
            self.t_v,
            self.t_a,
            self.d,
            self.w_v,
            self.w_a,
            self.loss_v,
            self.loss_sp,
            self.loss_sfx,
            self.loss_total
        )
    }
}

/// Independent flow-matching losses of the speech and sfx streams.
pub fn dual_audio_loss(v_sp_pred: &Tensor, v_sfx_pred: &Tensor, sp_sample: &FlowSample, sfx_sample: &FlowSample) -> Result<(f64, f64)> {
    if v_sp_pred.shape() != v_sfx_pred.shape() {
        return Err(TensorError::Shape {
            op: "dual_audio_loss",
            lhs: v_sp_pred.shape().to_vec(),
            rhs: v_sfx_pred.shape().to_vec(),
        });
    }
    Ok((cfm_loss(v_sp_pred, sp_sample)?, cfm_loss(v_sfx_pred, sfx_sample)?))
}

/// Stack per-episode tensors into a batch `[B, ...]`.
fn stack(items: impl Iterator<Item = Tensor>) -> Result<Tensor> {
    let items: Vec<Tensor> = items.collect();
    Tensor::stack(&items.iter().collect::<Vec<_>>())
}

/// Clean targets of the audio streams the model predicts.
pub fn audio_targets(model: &FusionModel, batch: &[&Episode]) -> Result<Vec<Tensor>> {
    if model.streams() == 2 {
        Ok(vec![
            stack(batch.iter().map(|e| e.speech.clone()))?,
            stack(batch.iter().map(|e| e.sfx.clone()))?,
        ])
    } else {
        Ok(vec![stack(batch.iter().map(|e| e.mixed_audio()))?])
    }
}

/// `[B, 2·cond_dim]` rows of `[c_s; c_a]`.
pub fn cond_batch(conds: &[&ConditionPair]) -> Result<Tensor> {
    ConditionPair::stack_concat(&conds.iter().map(|c| (*c).clone()).collect::<Vec<_>>())
}

/// Everything that defines one supervised evaluation of the model.
#[derive(Clone, Debug)]
pub struct StepInputs {
    pub pair: TimestepPair,
    pub video: FlowSample,
    pub audio: Vec<FlowSample>,
    pub cond: Tensor,
}

impl StepInputs {
    /// Noise both branches of `batch` at the noise levels in `pair`.
    pub fn draw<R: Rng + ?Sized>(
        model: &FusionModel,
        batch: &[&Episode],
        pair: TimestepPair,
        cond_drop: f64,
        rng: &mut R,
    ) -> LabResult<Self> {
        let x1_video = stack(batch.iter().map(|e| e.video.clone()))?;
        let x1_audio = audio_targets(model, batch)?;
        let x0_video = flowmatch::sample_prior(x1_video.shape(), rng);
        let video = flowmatch::interpolate(&x0_video, &x1_video, flow_time(pair.t_v))?;
        let mut audio = Vec::with_capacity(x1_audio.len());
        for x1 in &x1_audio {
            let x0 = flowmatch::sample_prior(x1.shape(), rng);
            audio.push(flowmatch::interpolate(&x0, x1, flow_time(pair.t_a))?);
        }
        let mut cond = cond_batch(&batch.iter().map(|e| &e.cond).collect::<Vec<_>>())?;
        let width = cond.shape()[1];
        for row in 0..batch.len() {
            if cond_drop > 0.0 && rng.random::<f64>() < cond_drop {
                cond.data_mut()[row * width..(row + 1) * width].fill(0.0);
            }
        }
        Ok(Self { pair, video, audio, cond })
    }
}

/// Per-branch losses and the direction-weighted total, as graph nodes.
pub struct LossNodes {
    pub loss_v: Var,
    pub audio: Vec<Var>,
    pub total: Var,
}

pub fn loss_graph(model: &FusionModel, g: &mut Graph, p: &crate::params::Bound, inputs: &StepInputs) -> LabResult<LossNodes> {
    let b = inputs.cond.shape()[0];
    let video = g.constant(inputs.video.x_t.clone());
    let audio: Vec<Var> = inputs.audio.iter().map(|s| g.constant(s.x_t.clone())).collect();
    let cond = g.constant(inputs.cond.clone());
    let t_v = vec![flow_time(inputs.pair.t_v); b];
    let t_a = vec![flow_time(inputs.pair.t_a); b];
    let out = model.forward(g, p, video, &audio, &t_v, &t_a, cond)?;
    let loss_v = cfm_loss_graph(g, out.video, &inputs.video.u_target)?;
    let mut audio_losses = Vec::with_capacity(audio.len());
    for (v, s) in out.audio.iter().zip(&inputs.audio) {
        audio_losses.push(cfm_loss_graph(g, *v, &s.u_target)?);
    }
    let mut audio_sum = audio_losses[0];
    for &l in &audio_losses[1..] {
        audio_sum = g.add(audio_sum, l)?;
    }
    let wv = g.scale(loss_v, inputs.pair.w_v)?;
    let wa = g.scale(audio_sum, inputs.pair.w_a)?;
    let total = g.add(wv, wa)?;
    Ok(LossNodes {
        loss_v,
        audio: audio_losses,
        total,
    })
}

/// Unweighted losses `(loss_v, loss_sp, loss_sfx)` without touching gradients.
pub fn evaluate_losses(model: &FusionModel, inputs: &StepInputs) -> LabResult<(f64, f64, f64)> {
    let mut g = Graph::new();
    let p = model.store.bind_frozen(&mut g);
    let nodes = loss_graph(model, &mut g, &p, inputs)?;
    let audio: Vec<f64> = nodes.audio.iter().map(|&l| g.value(l).item()).collect();
    Ok((g.value(nodes.loss_v).item(), audio[0], audio.get(1).copied().unwrap_or(0.0)))
}

/// Mean of `loss_v + loss_sp + loss_sfx` over a fixed probe: all `episodes`
/// at each synchronised noise level in `levels`, unit weights, prior noise
/// drawn from `seed`, no condition dropout.
pub fn probe_loss(model: &FusionModel, episodes: &[Episode], levels: &[f64], seed: u64) -> LabResult<f64> {
    if episodes.is_empty() || levels.is_empty() {
        return Err(Error::Domain("probe needs episodes and noise levels".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let batch: Vec<&Episode> = episodes.iter().collect();
    let mut total = 0.0;
    for &t in levels {
        let pair = TimestepPair {
            t_v: t,
            t_a: t,
            d: 0,
            w_v: 1.0,
            w_a: 1.0,
        };
        let inputs = StepInputs::draw(model, &batch, pair, 0.0, &mut rng)?;
        let (v, sp, sfx) = evaluate_losses(model, &inputs)?;
        total += v + sp + sfx;
    }
    Ok(total / levels.len() as f64)
}

/// Index of the first sample whose own forward pass yields a non-finite loss.
fn offending_sample(model: &FusionModel, inputs: &StepInputs) -> usize {
    let b = inputs.cond.shape()[0];
    for i in 0..b {
        let pick = |s: &FlowSample| FlowSample {
            x0: s.x0.index_outer(i).reshape_prefixed(),
            x1: s.x1.index_outer(i).reshape_prefixed(),
            t: s.t,
            x_t: s.x_t.index_outer(i).reshape_prefixed(),
            u_target: s.u_target.index_outer(i).reshape_prefixed(),
        };
        let single = StepInputs {
            pair: inputs.pair,
            video: pick(&inputs.video),
            audio: inputs.audio.iter().map(pick).collect(),
            cond: inputs.cond.index_outer(i).reshape_prefixed(),
        };
        match evaluate_losses(model, &single) {
            Ok((a, b, c)) if a.is_finite() && b.is_finite() && c.is_finite() => {}
            _ => return i,
        }
    }
    0
}

trait PrefixBatch {
    fn reshape_prefixed(self) -> Tensor;
}

impl PrefixBatch for Tensor {
    fn reshape_prefixed(self) -> Tensor {
        let mut shape = vec![1];
        shape.extend_from_slice(self.shape());
        self.reshape(&shape).expect("same element count")
    }
}

/// One optimisation step of the direction-weighted objective.
pub fn ti2av_step<R: Rng + ?Sized>(
    model: &mut FusionModel,
    batch: &[&Episode],
    state: &CurriculumState,
    optimizer: &mut Adam,
    rng: &mut R,
    config: &RunConfig,
) -> LabResult<StepReport> {
    let pair = sample_pair(state, config.lambda, rng);
    let inputs = StepInputs::draw(model, batch, pair, config.cond_drop, rng)?;

    let mut g = Graph::new();
    let p = model.store.bind(&mut g);
    let nodes = match loss_graph(model, &mut g, &p, &inputs) {
        Ok(n) => n,
        Err(Error::Layer {
            source: TensorError::NonFinite { .. },
            ..
        })
        | Err(Error::Tensor(TensorError::NonFinite { .. })) => {
            return Err(Error::NonFiniteLoss {
                step: state.step,
                sample: offending_sample(model, &inputs),
            })
        }
        Err(e) => return Err(e),
    };
    let loss_v = g.value(nodes.loss_v).item();
    let loss_sp = g.value(nodes.audio[0]).item();
    let loss_sfx = nodes.audio.get(1).map_or(0.0, |&l| g.value(l).item());
    if ![loss_v, loss_sp, loss_sfx].iter().all(|l| l.is_finite()) {
        return Err(Error::NonFiniteLoss {
            step: state.step,
            sample: offending_sample(model, &inputs),
        });
    }
    let grads = g.backward(nodes.total)?;
    let freeze_video = config.freeze_video;
    optimizer.step(&mut model.store, &p, &grads, |_, name| {
        !(freeze_video && name.starts_with("video."))
    });

    Ok(StepReport {
        step: state.step,
        phase: state.phase,
        t_v: pair.t_v,
        t_a: pair.t_a,
        d: pair.d,
        w_v: pair.w_v,
        w_a: pair.w_a,
        loss_v,
        loss_sp,
        loss_sfx,
        loss_total: pair.w_v * loss_v + pair.w_a * (loss_sp + loss_sfx),
    })
}

/// Stateful training driver: model, optimiser, episode pool and RNG.
pub struct Trainer {
    pub config: RunConfig,
    pub model: FusionModel,
    pub pool: Dataset,
    optimizer: Adam,
    rng: ChaCha8Rng,
    step: usize,
}

impl Trainer {
    pub fn new(config: RunConfig) -> LabResult<Self> {
        config.validate()?;
        let model = FusionModel::new(config.model.clone(), config.ablation.wiring(), config.seed)?;
        let pool = Dataset::generate(config.world_spec(), config.data_seed(), config.pool_size)?;
        let optimizer = Adam::new(&model.store, config.learning_rate);
        let rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x7e41_0000);
        Ok(Self {
            config,
            model,
            pool,
            optimizer,
            rng,
            step: 0,
        })
    }

    pub fn steps_done(&self) -> usize {
        self.step
    }

    pub fn is_done(&self) -> bool {
        self.step >= self.config.total_steps
    }

    /// Curriculum state the schedule prescribes for `step`.
    pub fn state_at(&self, step: usize) -> LabResult<CurriculumState> {
        let c = &self.config;
        c.ablation.effective_schedule().state(step, c.total_steps, c.ratios, c.delta_max)
    }

    pub fn step(&mut self) -> LabResult<StepReport> {
        let state = self.state_at(self.step)?;
        let n = self.pool.episodes.len();
        let idx: Vec<usize> = (0..self.config.batch_size).map(|_| self.rng.random_range(0..n)).collect();
        let batch: Vec<&Episode> = idx.iter().map(|&i| &self.pool.episodes[i]).collect();
        let report = ti2av_step(&mut self.model, &batch, &state, &mut self.optimizer, &mut self.rng, &self.config)?;
        self.step += 1;
        Ok(report)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            config_json: self.config.to_json(),
            tensors: self.model.store.iter().map(|(_, n, t)| (n.to_string(), t.clone())).collect(),
        }
    }
}

/// Rebuild a model from a checkpoint.
pub fn load_model(ck: &Checkpoint) -> LabResult<(RunConfig, FusionModel)> {
    let config: RunConfig = serde_json::from_str(&ck.config_json).map_err(|e| Error::Format(format!("checkpoint config: {e}")))?;
    let mut model = FusionModel::new(config.model.clone(), config.ablation.wiring(), config.seed)?;
    if ck.tensors.len() != model.store.len() {
        return Err(Error::Format(format!(
            "checkpoint has {} tensors, model expects {}",
            ck.tensors.len(),
            model.store.len()
        )));
    }
    for (name, t) in &ck.tensors {
        let id = model
            .store
            .id(name)
            .ok_or_else(|| Error::Format(format!("unknown parameter {name}")))?;
        model.store.set(id, t.clone()).map_err(|e| Error::Format(format!("{name}: {e}")))?;
    }
    Ok((config, model))
}

pub fn load_checkpoint(path: &Path) -> LabResult<(RunConfig, FusionModel)> {
    load_model(&Checkpoint::load(path)?)
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunArtifacts {
    pub checkpoint: PathBuf,
    pub metrics: PathBuf,
    /// Intermediate checkpoints in write order.
    pub checkpoints: Vec<PathBuf>,
}

fn ensure_writable(dir: &Path) -> LabResult<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let probe = dir.join(".write-probe");
    std::fs::write(&probe, b"").map_err(|e| Error::io(&probe, e))?;
    std::fs::remove_file(&probe).map_err(|e| Error::io(&probe, e))
}

/// Run a full training job, writing `metrics.csv`, periodic checkpoints and
/// `final.ckpt` under `config.out_dir`.
pub fn train(config: &RunConfig) -> LabResult<RunArtifacts> {
    train_with(config, |_| {})
}

/// [`train`] with a callback after every step.
pub fn train_with(config: &RunConfig, mut on_step: impl FnMut(&StepReport)) -> LabResult<RunArtifacts> {
    config.validate()?;
    let dir = config.out_dir.clone();
    ensure_writable(&dir)?;
    let mut trainer = Trainer::new(config.clone())?;
    let metrics = dir.join("metrics.csv");
    let file = std::fs::File::create(&metrics).map_err(|e| Error::io(&metrics, e))?;
    let mut csv = std::io::BufWriter::new(file);
    writeln!(csv, "{METRICS_HEADER}").map_err(|e| Error::io(&metrics, e))?;

    let every = (config.total_steps / 10).max(1);
    let mut checkpoints = Vec::new();
    let mut line = String::new();
    while !trainer.is_done() {
        let report = trainer.step()?;
        line.clear();
        let _ = writeln!(line, "{}", report.csv_row());
        csv.write_all(line.as_bytes()).map_err(|e| Error::io(&metrics, e))?;
        on_step(&report);
        let done = trainer.steps_done();
        if done % every == 0 && done < config.total_steps {
            let path = dir.join(format!("step_{done:06}.ckpt"));
            trainer.checkpoint().save(&path)?;
            checkpoints.push(path);
        }
    }
    csv.flush().map_err(|e| Error::io(&metrics, e))?;
    let checkpoint = dir.join("final.ckpt");
    trainer.checkpoint().save(&checkpoint)?;
    checkpoints.push(checkpoint.clone());
    Ok(RunArtifacts {
        checkpoint,
        metrics,
        checkpoints,
    })
}
