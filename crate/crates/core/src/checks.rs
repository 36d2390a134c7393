//! Gradient-check suite over every differentiable building block, from single
//! ops up to both branch forwards of a small model.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::dualstream::{scg_gated_update, BiAca, DualStreamLatent, JointBlock, ScgGate};
use crate::error::{Error, LabResult, Result, TensorError};
use crate::flowmatch::cfm_loss_graph;
use crate::gradcheck::{grad_check_many, GradCheckReport};
use crate::graph::{Graph, Var};
use crate::model::{AudioWiring, Fusion, FusionModel, ModelConfig};
use crate::nn::{Attention, FeedForward, Init, Linear, RopePositions};
use crate::params::{Bound, ParamId, ParamStore};
use crate::rope::Rope;
use crate::tensor::Tensor;

pub const GRAD_TOLERANCE: f64 = 1e-4;

#[derive(Clone, Debug)]
pub struct CheckResult {
    pub name: &'static str,
    pub report: GradCheckReport,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.report.max_rel_error <= GRAD_TOLERANCE
    }
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn random(shape: &[usize], seed: u64) -> Tensor {
    Tensor::uniform(shape, -1.0, 1.0, &mut rng(seed))
}

/// Overwrite every parameter with random values so zero-initialised
/// projections carry gradient too.
fn randomise(store: &mut ParamStore, seed: u64, std: f64) {
    let mut r = rng(seed);
    let ids: Vec<ParamId> = store.iter().map(|(id, _, _)| id).collect();
    for id in ids {
        let shape = store.get(id).shape().to_vec();
        store.set(id, Tensor::randn(&shape, std, &mut r)).expect("same shape");
    }
}

fn flatten_err(e: Error) -> TensorError {
    match e {
        Error::Tensor(t) | Error::Layer { source: t, .. } => t,
        other => TensorError::Evaluation(other.to_string()),
    }
}

type CaseFn = Box<dyn Fn(&mut Graph, &[Var]) -> Result<Var>>;

struct Case {
    name: &'static str,
    inputs: Vec<Tensor>,
    step: f64,
    /// Inputs whose elements are probed; all when `None`.
    probed: Option<Vec<bool>>,
    f: CaseFn,
}

fn case(name: &'static str, inputs: Vec<Tensor>, step: f64, f: CaseFn) -> Case {
    Case {
        name,
        inputs,
        step,
        probed: None,
        f,
    }
}

fn op_cases() -> Vec<Case> {
    vec![
        case(
            "op matmul",
            vec![random(&[2, 3, 4], 10), random(&[4, 5], 11)],
            1e-5,
            Box::new(|g, v| {
                let y = g.matmul(v[0], v[1])?;
                g.mean_square(y)
            }),
        ),
        case(
            "op add/mul broadcast",
            vec![random(&[2, 3, 4], 12), random(&[4], 13), random(&[2, 1, 1], 14)],
            1e-5,
            Box::new(|g, v| {
                let y = g.add(v[0], v[1])?;
                let y = g.mul(y, v[2])?;
                g.mean_square(y)
            }),
        ),
        case(
            "op scale/sigmoid/silu",
            vec![random(&[6], 15)],
            1e-5,
            Box::new(|g, v| {
                let y = g.scale(v[0], 2.5)?;
                let a = g.sigmoid(y)?;
                let b = g.silu(y)?;
                let y = g.mul(a, b)?;
                g.mean_square(y)
            }),
        ),
        case(
            "op softmax",
            vec![random(&[3, 5], 16), random(&[3, 5], 17)],
            1e-5,
            Box::new(|g, v| {
                let y = g.softmax(v[0])?;
                let y = g.mul(y, v[1])?;
                g.mean_square(y)
            }),
        ),
        case(
            "op layer_norm",
            vec![random(&[3, 6], 18), random(&[3, 6], 19)],
            1e-5,
            Box::new(|g, v| {
                let y = g.layer_norm(v[0], 1e-5)?;
                let y = g.mul(y, v[1])?;
                g.mean_square(y)
            }),
        ),
        case(
            "op concat/split/transpose/reshape",
            vec![random(&[2, 3, 2], 20), random(&[2, 1, 2], 21)],
            1e-5,
            Box::new(|g, v| {
                let y = g.concat(&[v[0], v[1]], 1)?;
                let y = g.transpose(y, &[2, 1, 0])?;
                let y = g.sigmoid(y)?;
                let parts = g.split(y, 0, &[1, 1])?;
                let y = g.mul(parts[0], parts[1])?;
                let y = g.reshape(y, &[8])?;
                g.mean_square(y)
            }),
        ),
    ]
}

fn param_case<F>(name: &'static str, store: ParamStore, extra: Vec<Tensor>, step: f64, f: F) -> Case
where
    F: Fn(&mut Graph, &Bound, &[Var]) -> Result<Var> + 'static,
{
    let n = store.len();
    let mut inputs = store.tensors().to_vec();
    inputs.extend(extra);
    case(
        name,
        inputs,
        step,
        Box::new(move |g, v| {
            let p = Bound::from_vars(v[..n].to_vec());
            f(g, &p, &v[n..])
        }),
    )
}

fn block_cases() -> Result<Vec<Case>> {
    let (d, h) = (8, 2);
    let mut cases = Vec::new();

    let mut store = ParamStore::new();
    let l1 = Linear::new(&mut store, "l1", 4, 6, Init::Normal, &mut rng(30));
    let l2 = Linear::new(&mut store, "l2", 6, 3, Init::Normal, &mut rng(31));
    cases.push(param_case(
        "two-layer perceptron",
        store,
        vec![random(&[5, 4], 32)],
        1e-5,
        move |g, p, x| {
            let y = l1.forward(g, p, x[0])?;
            let y = g.sigmoid(y)?;
            let y = l2.forward(g, p, y)?;
            g.mean_square(y)
        },
    ));

    let mut store = ParamStore::new();
    let attn = Attention::new(&mut store, "attn", d, h, &mut rng(33))?;
    let ffn = FeedForward::new(&mut store, "ffn", d, 2 * d, &mut rng(34));
    randomise(&mut store, 35, 0.4);
    let rope = Rope::new(d / h, 10_000.0)?;
    let extra = vec![random(&[2, 3, d], 36), random(&[2, 4, d], 37)];
    cases.push(param_case(
        "attention with rope + feed-forward",
        store,
        extra,
        1e-5,
        move |g, p, x| {
            let positions = RopePositions {
                rope: &rope,
                query: &[0, 1, 2],
                key: &[0, 1, 2, 3],
            };
            let y = attn.forward(g, p, x[0], x[1], Some(positions), None)?;
            let y = ffn.forward(g, p, y)?;
            g.mean_square(y)
        },
    ));

    let mut store = ParamStore::new();
    let bi = BiAca::new(&mut store, "biaca", d, h, &mut rng(38))?;
    randomise(&mut store, 39, 0.4);
    let extra = vec![random(&[2, 3, d], 40), random(&[2, 3, d], 41)];
    cases.push(param_case(
        "bi-directional audio cross-attention",
        store,
        extra,
        1e-5,
        move |g, p, x| {
            let out = bi.forward(g, p, DualStreamLatent::new(g, x[0], x[1])?)?;
            let y = g.concat(&[out.h_sp, out.h_sfx], 2)?;
            g.mean_square(y)
        },
    ));

    let mut store = ParamStore::new();
    let gate = ScgGate::new(&mut store, "scg", 3, &mut rng(42));
    randomise(&mut store, 43, 0.6);
    let extra = vec![random(&[2, 6], 44), random(&[2, 3, d], 45), random(&[2, 3, d], 46)];
    cases.push(param_case("semantic gate path", store, extra, 1e-5, move |g, p, x| {
        let (g_sp, g_sfx) = gate.forward(g, p, x[0])?;
        let a = scg_gated_update(g, x[1], x[2], g_sp)?;
        let b = scg_gated_update(g, x[2], x[1], g_sfx)?;
        let y = g.concat(&[a, b], 1)?;
        g.mean_square(y)
    }));

    let mut store = ParamStore::new();
    let joint = JointBlock::new(&mut store, "joint", d, h, 2, &mut rng(47))?;
    randomise(&mut store, 48, 0.4);
    let extra = vec![random(&[2, 3, d], 49), random(&[2, 3, d], 50)];
    cases.push(param_case("joint merge-split block", store, extra, 1e-5, move |g, p, x| {
        let out = joint.forward(g, p, DualStreamLatent::new(g, x[0], x[1])?)?;
        let y = g.concat(&[out.h_sp, out.h_sfx], 2)?;
        g.mean_square(y)
    }));

    let mut store = ParamStore::new();
    let fusion = Fusion::new(&mut store, "fusion", d, h, &mut rng(51))?;
    randomise(&mut store, 52, 0.4);
    let extra = vec![random(&[2, 3, d], 53), random(&[2, 6, d], 54)];
    cases.push(param_case("frame-level fusion", store, extra, 1e-5, move |g, p, x| {
        let (v, a) = fusion.forward(g, p, x[0], x[1])?;
        let y = g.concat(&[v, a], 1)?;
        g.mean_square(y)
    }));

    for audio in [true, false] {
        cases.push(branch_case(audio)?);
    }
    Ok(cases)
}

/// Full branch forward of a small model; only that branch's parameters and
/// the latents are probed.
fn branch_case(audio: bool) -> Result<Case> {
    let cfg = ModelConfig {
        layers_video: 2,
        layers_audio: 1,
        dim: 8,
        heads: 2,
        tokens_per_frame: 2,
        cond_dim: 2,
    };
    let mut model = FusionModel::new(cfg.clone(), AudioWiring::default(), 20).map_err(flatten_err)?;
    randomise(&mut model.store, 21, 0.4);
    let mut r = rng(22);
    let video = Tensor::randn(&[1, 2, 8], 1.0, &mut r);
    let streams = [Tensor::randn(&[1, 4, 8], 1.0, &mut r), Tensor::randn(&[1, 4, 8], 1.0, &mut r)];
    let cond = Tensor::randn(&[1, 4], 1.0, &mut r);
    let target_v = Tensor::randn(&[1, 2, 8], 1.0, &mut r);
    let target_a = Tensor::randn(&[1, 4, 8], 1.0, &mut r);
    let prefix = if audio { "audio." } else { "video." };
    let mut probed: Vec<bool> = model.store.iter().map(|(_, n, _)| n.starts_with(prefix)).collect();
    probed.extend([true; 3]);
    let n = model.store.len();
    let mut inputs = model.store.tensors().to_vec();
    inputs.push(video);
    inputs.extend(streams);
    let name = if audio { "audio branch forward" } else { "video branch forward" };
    Ok(Case {
        name,
        inputs,
        step: 1e-4,
        probed: Some(probed),
        f: Box::new(move |g, v| {
            let p = Bound::from_vars(v[..n].to_vec());
            let (video, audio_vars) = (v[n], &v[n + 1..]);
            if audio {
                let c = g.constant(cond.clone());
                let out = model
                    .audio_branch_forward(g, &p, audio_vars, &[0.35], c, video)
                    .map_err(flatten_err)?;
                let l1 = cfm_loss_graph(g, out[0], &target_a)?;
                let l2 = cfm_loss_graph(g, out[1], &target_a)?;
                g.add(l1, l2)
            } else {
                let out = model.video_branch_forward(g, &p, video, &[0.6], audio_vars).map_err(flatten_err)?;
                cfm_loss_graph(g, out, &target_v)
            }
        }),
    })
}

/// Run every check.
pub fn grad_check_suite() -> LabResult<Vec<CheckResult>> {
    let mut cases = op_cases();
    cases.extend(block_cases()?);
    let mut results = Vec::with_capacity(cases.len());
    for c in cases {
        let probed = c.probed.clone();
        let select = move |i: usize, _: usize| probed.as_ref().is_none_or(|p| p[i]);
        let report = grad_check_many(|g, v| (c.f)(g, v), &c.inputs, c.step, Some(&select))?;
        results.push(CheckResult { name: c.name, report });
    }
    Ok(results)
}
