//! Dual-stream audio block: speech and sound-effect latents exchange context
//! through bidirectional cross-attention, the exchange is throttled by
//! semantic gates predicted from pooled text conditions, and both streams are
//! then merged along the token axis for shared self-attention before being
//! split back apart.
//!
//! ```text
//! h̃_sp  = h_sp  + g_sp  · Attn(LN(h_sp),  LN(h_sfx))
//! h̃_sfx = h_sfx + g_sfx · Attn(LN(h_sfx), LN(h_sp))
//! joint = concat(h̃_sp, h̃_sfx) + modality bias   // [B, 2N, D]
//! joint = joint + SelfAttn(LN(joint))           // RoPE positions 0..N, 0..N
//! joint = joint + FFN(LN(joint))
//! h_sp, h_sfx = split(joint)
//! ```

use rand::Rng;

use crate::error::{Result, TensorError};
use crate::graph::{Graph, Var};
use crate::nn::{Attention, FeedForward, Init, Linear, Norm, RopePositions};
use crate::params::{Bound, ParamId, ParamStore};
use crate::rope::Rope;
use crate::tensor::Tensor;

pub use crate::rope::rope_apply;

/// Speech and sfx latents of identical shape `[B, N, D]`; token `i` of both
/// streams refers to the same instant.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DualStreamLatent {
    pub h_sp: Var,
    pub h_sfx: Var,
}

impl DualStreamLatent {
    pub fn new(g: &Graph, h_sp: Var, h_sfx: Var) -> Result<Self> {
        let (a, b) = (g.shape(h_sp), g.shape(h_sfx));
        if a != b || a.len() != 3 {
            return Err(TensorError::Shape {
                op: "dual-stream latent",
                lhs: a.to_vec(),
                rhs: b.to_vec(),
            });
        }
        Ok(Self { h_sp, h_sfx })
    }

    pub fn swapped(self) -> Self {
        Self {
            h_sp: self.h_sfx,
            h_sfx: self.h_sp,
        }
    }
}

/// Per-sample semantic gates, both strictly inside `(0, 1)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GateVector {
    pub g_sp: f64,
    pub g_sfx: f64,
}

/// Pooled transcription (`c_s`) and caption (`c_a`) vectors for one sample.
#[derive(Clone, Debug, PartialEq)]
pub struct ConditionPair {
    pub c_s: Tensor,
    pub c_a: Tensor,
}

impl ConditionPair {
    pub fn new(c_s: Tensor, c_a: Tensor) -> Result<Self> {
        if c_s.rank() != 1 || c_s.shape() != c_a.shape() {
            return Err(TensorError::Shape {
                op: "condition pair",
                lhs: c_s.shape().to_vec(),
                rhs: c_a.shape().to_vec(),
            });
        }
        if !c_s.all_finite() || !c_a.all_finite() {
            return Err(TensorError::NonFinite { op: "condition pair" });
        }
        Ok(Self { c_s, c_a })
    }

    /// All-zero condition, used as the unconditional input for guidance.
    pub fn null(dim: usize) -> Self {
        Self {
            c_s: Tensor::zeros(&[dim]),
            c_a: Tensor::zeros(&[dim]),
        }
    }

    pub fn dim(&self) -> usize {
        self.c_s.numel()
    }

    /// `[c_s; c_a]` for a batch, shape `[B, 2·D_c]`.
    pub fn stack_concat(conds: &[ConditionPair]) -> Result<Tensor> {
        let dim = conds.first().map(ConditionPair::dim).unwrap_or(0);
        let mut data = Vec::with_capacity(conds.len() * 2 * dim);
        for c in conds {
            if c.dim() != dim {
                return Err(TensorError::Shape {
                    op: "condition batch",
                    lhs: vec![dim],
                    rhs: vec![c.dim()],
                });
            }
            data.extend_from_slice(c.c_s.data());
            data.extend_from_slice(c.c_a.data());
        }
        Tensor::new(vec![conds.len(), 2 * dim], data)
    }
}

/// Rotary positions for a stream of `n` tokens.
pub fn stream_positions(n: usize) -> Vec<usize> {
    (0..n).collect()
}

/// Rotary positions for the merged sequence: both streams reuse `0..n`.
pub fn joint_positions(n: usize, streams: usize) -> Vec<usize> {
    (0..streams).flat_map(|_| 0..n).collect()
}

/// Pre-norm cross-attention: queries from one stream, keys/values from another.
#[derive(Clone, Debug)]
pub struct CrossAttention {
    pub norm_query: Norm,
    pub norm_context: Norm,
    pub attn: Attention,
}

impl CrossAttention {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, dim: usize, heads: usize, rng: &mut R) -> Result<Self> {
        Ok(Self {
            norm_query: Norm::new(store, &format!("{name}.norm_q"), dim),
            norm_context: Norm::new(store, &format!("{name}.norm_kv"), dim),
            attn: Attention::new(store, &format!("{name}.attn"), dim, heads, rng)?,
        })
    }

    /// `Attn(LN(query), LN(context))` without the residual.
    pub fn message(&self, g: &mut Graph, p: &Bound, query: Var, context: Var, rope: Option<&Rope>) -> Result<Var> {
        let q = self.norm_query.forward(g, p, query)?;
        let c = self.norm_context.forward(g, p, context)?;
        match rope {
            Some(rope) => {
                let pos = stream_positions(g.shape(query)[1]);
                let positions = RopePositions {
                    rope,
                    query: &pos,
                    key: &pos,
                };
                self.attn.forward(g, p, q, c, Some(positions), None)
            }
            None => self.attn.forward(g, p, q, c, None, None),
        }
    }
}

/// Bidirectional audio cross-attention with independent parameters per direction.
#[derive(Clone, Debug)]
pub struct BiAca {
    pub sp_from_sfx: CrossAttention,
    pub sfx_from_sp: CrossAttention,
    rope: Rope,
}

impl BiAca {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, dim: usize, heads: usize, rng: &mut R) -> Result<Self> {
        if heads == 0 || !dim.is_multiple_of(heads) {
            return Err(TensorError::Contract(format!("{heads} heads do not divide width {dim}")));
        }
        Ok(Self {
            sp_from_sfx: CrossAttention::new(store, &format!("{name}.sp_from_sfx"), dim, heads, rng)?,
            sfx_from_sp: CrossAttention::new(store, &format!("{name}.sfx_from_sp"), dim, heads, rng)?,
            rope: Rope::new(dim / heads, 10_000.0)?,
        })
    }

    /// Cross-stream messages `(to speech, to sfx)`, before gating and residual.
    pub fn messages(&self, g: &mut Graph, p: &Bound, lat: DualStreamLatent) -> Result<(Var, Var)> {
        let to_sp = self.sp_from_sfx.message(g, p, lat.h_sp, lat.h_sfx, Some(&self.rope))?;
        let to_sfx = self.sfx_from_sp.message(g, p, lat.h_sfx, lat.h_sp, Some(&self.rope))?;
        Ok((to_sp, to_sfx))
    }

    /// Ungated exchange: each stream plus its cross-attention message.
    pub fn forward(&self, g: &mut Graph, p: &Bound, lat: DualStreamLatent) -> Result<DualStreamLatent> {
        let (to_sp, to_sfx) = self.messages(g, p, lat)?;
        Ok(DualStreamLatent {
            h_sp: g.add(lat.h_sp, to_sp)?,
            h_sfx: g.add(lat.h_sfx, to_sfx)?,
        })
    }
}

/// Two-layer perceptron `[c_s; c_a] → (g_sp, g_sfx)` squashed by a sigmoid.
/// The output layer starts at zero, so untrained gates are exactly 0.5.
#[derive(Clone, Debug)]
pub struct ScgGate {
    pub hidden: Linear,
    pub out: Linear,
}

impl ScgGate {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, cond_dim: usize, rng: &mut R) -> Self {
        Self {
            hidden: Linear::new(store, &format!("{name}.hidden"), 2 * cond_dim, cond_dim, Init::Normal, rng),
            out: Linear::new(store, &format!("{name}.out"), cond_dim, 2, Init::Zero, rng),
        }
    }

    /// Gates for a batch of concatenated conditions `[B, 2·D_c]`, returned as
    /// `(g_sp, g_sfx)` each shaped `[B, 1, 1]` for broadcasting over tokens.
    pub fn forward(&self, g: &mut Graph, p: &Bound, cond: Var) -> Result<(Var, Var)> {
        let b = g.shape(cond)[0];
        let h = self.hidden.forward(g, p, cond)?;
        let h = g.silu(h)?;
        let logits = self.out.forward(g, p, h)?;
        let gates = g.sigmoid(logits)?;
        let parts = g.split(gates, 1, &[1, 1])?;
        let g_sp = g.reshape(parts[0], &[b, 1, 1])?;
        let g_sfx = g.reshape(parts[1], &[b, 1, 1])?;
        Ok((g_sp, g_sfx))
    }
}

/// Evaluate the semantic gates for a batch of conditions.
pub fn scg_gates(gate: &ScgGate, store: &ParamStore, conds: &[ConditionPair]) -> Result<Vec<GateVector>> {
    let mut g = Graph::new();
    let p = store.bind_frozen(&mut g);
    let c = g.constant(ConditionPair::stack_concat(conds)?);
    let (sp, sfx) = gate.forward(&mut g, &p, c)?;
    Ok(g.value(sp)
        .data()
        .iter()
        .zip(g.value(sfx).data())
        .map(|(&g_sp, &g_sfx)| GateVector { g_sp, g_sfx })
        .collect())
}

/// `h + gate · attn_out`, with `gate` broadcast over tokens and features.
pub fn scg_gated_update(g: &mut Graph, h: Var, attn_out: Var, gate: Var) -> Result<Var> {
    if g.shape(h) != g.shape(attn_out) {
        return Err(TensorError::Shape {
            op: "scg_gated_update",
            lhs: g.shape(h).to_vec(),
            rhs: g.shape(attn_out).to_vec(),
        });
    }
    if g.value(gate).data().iter().any(|v| !(0.0..=1.0).contains(v)) {
        return Err(TensorError::Contract("gate values must lie in [0, 1]".into()));
    }
    let scaled = g.mul(attn_out, gate)?;
    g.add(h, scaled)
}

/// Merge streams along the token axis.
pub fn concat_streams(g: &mut Graph, streams: &[Var]) -> Result<Var> {
    g.concat(streams, 1)
}

/// Split a merged `[B, S·N, D]` sequence back into `S` streams of `N` tokens.
pub fn split_streams(g: &mut Graph, joint: Var, streams: usize) -> Result<Vec<Var>> {
    let total = g.shape(joint)[1];
    if streams == 0 || !total.is_multiple_of(streams) {
        return Err(TensorError::InvalidShape {
            op: "split_streams",
            shape: g.shape(joint).to_vec(),
            reason: format!("{total} tokens cannot be split into {streams} streams"),
        });
    }
    g.split(joint, 1, &vec![total / streams; streams])
}

/// Interact-merge-split self-attention block over one or two streams.
#[derive(Clone, Debug)]
pub struct JointBlock {
    /// `[streams, D]`, present only when there is more than one stream.
    pub modality_bias: Option<ParamId>,
    pub norm_attn: Norm,
    pub attn: Attention,
    pub norm_ffn: Norm,
    pub ffn: FeedForward,
    pub streams: usize,
    rope: Rope,
}

impl JointBlock {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, dim: usize, heads: usize, streams: usize, rng: &mut R) -> Result<Self> {
        if heads == 0 || !dim.is_multiple_of(heads) {
            return Err(TensorError::Contract(format!("{heads} heads do not divide width {dim}")));
        }
        let modality_bias = (streams > 1).then(|| store.add(format!("{name}.modality_bias"), Tensor::randn(&[streams, dim], 0.02, rng)));
        Ok(Self {
            modality_bias,
            norm_attn: Norm::new(store, &format!("{name}.norm_attn"), dim),
            attn: Attention::new(store, &format!("{name}.attn"), dim, heads, rng)?,
            norm_ffn: Norm::new(store, &format!("{name}.norm_ffn"), dim),
            ffn: FeedForward::new(store, &format!("{name}.ffn"), dim, 2 * dim, rng),
            streams,
            rope: Rope::new(dim / heads, 10_000.0)?,
        })
    }

    pub fn forward_streams(&self, g: &mut Graph, p: &Bound, streams: &[Var]) -> Result<Vec<Var>> {
        if streams.len() != self.streams {
            return Err(TensorError::Contract(format!(
                "joint block built for {} streams, got {}",
                self.streams,
                streams.len()
            )));
        }
        let shape = g.shape(streams[0]).to_vec();
        let (b, n, d) = (shape[0], shape[1], shape[2]);
        let mut joint = concat_streams(g, streams)?;
        if let Some(bias) = self.modality_bias {
            let grouped = g.reshape(joint, &[b, self.streams, n, d])?;
            let bias = g.reshape(p[bias], &[self.streams, 1, d])?;
            let biased = g.add(grouped, bias)?;
            joint = g.reshape(biased, &[b, self.streams * n, d])?;
        }
        let positions = joint_positions(n, self.streams);
        let normed = self.norm_attn.forward(g, p, joint)?;
        let rope = RopePositions {
            rope: &self.rope,
            query: &positions,
            key: &positions,
        };
        let attn = self.attn.forward(g, p, normed, normed, Some(rope), None)?;
        let h = g.add(joint, attn)?;
        let normed = self.norm_ffn.forward(g, p, h)?;
        let ff = self.ffn.forward(g, p, normed)?;
        let h = g.add(h, ff)?;
        split_streams(g, h, self.streams)
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, lat: DualStreamLatent) -> Result<DualStreamLatent> {
        let out = self.forward_streams(g, p, &[lat.h_sp, lat.h_sfx])?;
        Ok(DualStreamLatent {
            h_sp: out[0],
            h_sfx: out[1],
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::grad_check_many;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    const D: usize = 8;
    const HEADS: usize = 2;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    /// Fill every parameter with random values so no path is trivially zero.
    fn randomise(store: &mut ParamStore, seed: u64) {
        let mut r = rng(seed);
        let ids: Vec<ParamId> = store.iter().map(|(id, _, _)| id).collect();
        for id in ids {
            let shape = store.get(id).shape().to_vec();
            store.set(id, Tensor::randn(&shape, 0.4, &mut r)).unwrap();
        }
    }

    fn eval_biaca(block: &BiAca, store: &ParamStore, sp: &Tensor, sfx: &Tensor) -> (Tensor, Tensor) {
        let mut g = Graph::new();
        let p = store.bind_frozen(&mut g);
        let (a, b) = (g.constant(sp.clone()), g.constant(sfx.clone()));
        let lat = DualStreamLatent::new(&g, a, b).unwrap();
        let out = block.forward(&mut g, &p, lat).unwrap();
        (g.value(out.h_sp).clone(), g.value(out.h_sfx).clone())
    }

    #[test]
    fn latent_requires_matching_shapes() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[1, 4, D]));
        let b = g.constant(Tensor::zeros(&[1, 5, D]));
        assert!(DualStreamLatent::new(&g, a, b).is_err());
    }

    #[test]
    fn biaca_rejects_bad_head_count() {
        let mut store = ParamStore::new();
        assert!(BiAca::new(&mut store, "b", D, 3, &mut rng(0)).is_err());
    }

    #[test]
    fn biaca_starts_as_identity() {
        let mut store = ParamStore::new();
        let block = BiAca::new(&mut store, "b", D, HEADS, &mut rng(1)).unwrap();
        let mut r = rng(2);
        let sp = Tensor::randn(&[2, 4, D], 1.0, &mut r);
        let sfx = Tensor::randn(&[2, 4, D], 1.0, &mut r);
        let (a, b) = eval_biaca(&block, &store, &sp, &sfx);
        assert_eq!(a, sp);
        assert_eq!(b, sfx);
    }

    #[test]
    fn biaca_shared_params_on_equal_streams_give_equal_outputs() {
        let mut store = ParamStore::new();
        let block = BiAca::new(&mut store, "b", D, HEADS, &mut rng(3)).unwrap();
        randomise(&mut store, 4);
        // Copy the speech-direction parameters into the sfx direction.
        let names: Vec<String> = store
            .iter()
            .filter(|(_, n, _)| n.contains("sp_from_sfx"))
            .map(|(_, n, _)| n.to_string())
            .collect();
        for name in names {
            let src = store.get(store.id(&name).unwrap()).clone();
            let dst = store.id(&name.replace("sp_from_sfx", "sfx_from_sp")).unwrap();
            store.set(dst, src).unwrap();
        }
        let h = Tensor::randn(&[2, 5, D], 1.0, &mut rng(5));
        let (a, b) = eval_biaca(&block, &store, &h, &h);
        assert_eq!(a, b);
    }

    #[test]
    fn biaca_swap_equivariance_with_mirrored_params() {
        let mut store = ParamStore::new();
        let block = BiAca::new(&mut store, "b", D, HEADS, &mut rng(6)).unwrap();
        randomise(&mut store, 7);
        let mut mirrored = store.clone();
        let names: Vec<String> = store
            .iter()
            .filter(|(_, n, _)| n.contains("sp_from_sfx"))
            .map(|(_, n, _)| n.to_string())
            .collect();
        for name in names {
            let other = name.replace("sp_from_sfx", "sfx_from_sp");
            let (a, b) = (store.id(&name).unwrap(), store.id(&other).unwrap());
            mirrored.set(a, store.get(b).clone()).unwrap();
            mirrored.set(b, store.get(a).clone()).unwrap();
        }
        let mut r = rng(8);
        let sp = Tensor::randn(&[2, 4, D], 1.0, &mut r);
        let sfx = Tensor::randn(&[2, 4, D], 1.0, &mut r);
        let (a, b) = eval_biaca(&block, &store, &sp, &sfx);
        let (a2, b2) = eval_biaca(&block, &mirrored, &sfx, &sp);
        assert_eq!(a, b2);
        assert_eq!(b, a2);
    }

    #[test]
    fn gates_start_neutral_and_stay_in_open_interval() {
        let mut store = ParamStore::new();
        let gate = ScgGate::new(&mut store, "scg", 4, &mut rng(9));
        let mut r = rng(10);
        let conds: Vec<ConditionPair> = (0..5)
            .map(|_| ConditionPair::new(Tensor::randn(&[4], 1.0, &mut r), Tensor::randn(&[4], 1.0, &mut r)).unwrap())
            .collect();
        for gv in scg_gates(&gate, &store, &conds).unwrap() {
            assert_eq!((gv.g_sp, gv.g_sfx), (0.5, 0.5));
        }

        let mut zero = ParamStore::new();
        let zgate = ScgGate::new(&mut zero, "scg", 4, &mut rng(11));
        let ids: Vec<ParamId> = zero.iter().map(|(id, _, _)| id).collect();
        for id in ids {
            let shape = zero.get(id).shape().to_vec();
            zero.set(id, Tensor::zeros(&shape)).unwrap();
        }
        assert!(scg_gates(&zgate, &zero, &conds)
            .unwrap()
            .iter()
            .all(|g| g.g_sp == 0.5 && g.g_sfx == 0.5));

        randomise(&mut store, 12);
        for gv in scg_gates(&gate, &store, &conds).unwrap() {
            assert!(gv.g_sp > 0.0 && gv.g_sp < 1.0);
            assert!(gv.g_sfx > 0.0 && gv.g_sfx < 1.0);
        }
    }

    #[test]
    fn gated_update_valve_positions() {
        let mut r = rng(13);
        let h = Tensor::randn(&[2, 3, D], 1.0, &mut r);
        let m = Tensor::randn(&[2, 3, D], 1.0, &mut r);
        let mut g = Graph::new();
        let (hv, mv) = (g.constant(h.clone()), g.constant(m.clone()));
        for (gate, expect) in [(0.0, 0.0), (1.0, 1.0), (0.5, 0.5)] {
            let gv = g.constant(Tensor::full(&[2, 1, 1], gate));
            let out = scg_gated_update(&mut g, hv, mv, gv).unwrap();
            let want = h.zip_map(&m, "t", |a, b| a + expect * b).unwrap();
            assert_eq!(g.value(out), &want);
        }
        let bad = g.constant(Tensor::zeros(&[2, 4, D]));
        let gv = g.constant(Tensor::full(&[2, 1, 1], 0.5));
        assert!(scg_gated_update(&mut g, hv, bad, gv).is_err());
    }

    #[test]
    fn closed_gates_block_the_cross_stream_path() {
        let mut store = ParamStore::new();
        let block = BiAca::new(&mut store, "b", D, HEADS, &mut rng(14)).unwrap();
        randomise(&mut store, 15);
        let mut r = rng(16);
        let sp = Tensor::randn(&[1, 4, D], 1.0, &mut r);
        let sfx = Tensor::randn(&[1, 4, D], 1.0, &mut r);
        let sfx2 = Tensor::randn(&[1, 4, D], 1.0, &mut r);
        let run = |sfx: &Tensor| {
            let mut g = Graph::new();
            let p = store.bind_frozen(&mut g);
            let (a, b) = (g.constant(sp.clone()), g.constant(sfx.clone()));
            let lat = DualStreamLatent::new(&g, a, b).unwrap();
            let (to_sp, _) = block.messages(&mut g, &p, lat).unwrap();
            let zero = g.constant(Tensor::zeros(&[1, 1, 1]));
            let out = scg_gated_update(&mut g, a, to_sp, zero).unwrap();
            g.value(out).clone()
        };
        assert_eq!(run(&sfx), sp);
        assert_eq!(run(&sfx2), sp);
    }

    #[test]
    fn concat_split_round_trip() {
        let mut r = rng(17);
        let sp = Tensor::randn(&[2, 5, D], 1.0, &mut r);
        let sfx = Tensor::randn(&[2, 5, D], 1.0, &mut r);
        let mut g = Graph::new();
        let (a, b) = (g.constant(sp.clone()), g.constant(sfx.clone()));
        let joint = concat_streams(&mut g, &[a, b]).unwrap();
        assert_eq!(g.shape(joint), &[2, 10, D]);
        let parts = split_streams(&mut g, joint, 2).unwrap();
        assert_eq!(g.value(parts[0]), &sp);
        assert_eq!(g.value(parts[1]), &sfx);
    }

    #[test]
    fn both_streams_reuse_identical_positions() {
        let pos = joint_positions(7, 2);
        assert_eq!(pos[..7], pos[7..]);
        assert_eq!(&pos[..7], stream_positions(7).as_slice());
    }

    fn eval_joint(block: &JointBlock, store: &ParamStore, sp: &Tensor, sfx: &Tensor) -> (Tensor, Tensor) {
        let mut g = Graph::new();
        let p = store.bind_frozen(&mut g);
        let (a, b) = (g.constant(sp.clone()), g.constant(sfx.clone()));
        let lat = DualStreamLatent::new(&g, a, b).unwrap();
        let out = block.forward(&mut g, &p, lat).unwrap();
        (g.value(out.h_sp).clone(), g.value(out.h_sfx).clone())
    }

    #[test]
    fn modality_bias_controls_stream_symmetry() {
        let mut store = ParamStore::new();
        let block = JointBlock::new(&mut store, "j", D, HEADS, 2, &mut rng(18)).unwrap();
        randomise(&mut store, 19);
        let bias = block.modality_bias.unwrap();
        let h = Tensor::randn(&[2, 4, D], 1.0, &mut rng(20));

        store.set(bias, Tensor::zeros(&[2, D])).unwrap();
        let (a, b) = eval_joint(&block, &store, &h, &h);
        assert_eq!(a, b);

        store.set(bias, Tensor::randn(&[2, D], 0.5, &mut rng(21))).unwrap();
        let (a, b) = eval_joint(&block, &store, &h, &h);
        assert!(a.max_abs_diff(&b) > 0.0);
    }

    #[test]
    fn dual_stream_block_gradients() {
        let mut store = ParamStore::new();
        let mut r = rng(22);
        let biaca = BiAca::new(&mut store, "b", D, HEADS, &mut r).unwrap();
        let gate = ScgGate::new(&mut store, "scg", 3, &mut r);
        let joint = JointBlock::new(&mut store, "j", D, HEADS, 2, &mut r).unwrap();
        randomise(&mut store, 23);
        let n_params = store.len();
        let mut inputs = store.tensors().to_vec();
        inputs.push(Tensor::randn(&[2, 3, D], 1.0, &mut r));
        inputs.push(Tensor::randn(&[2, 3, D], 1.0, &mut r));
        inputs.push(Tensor::randn(&[2, 6], 1.0, &mut r));
        let report = grad_check_many(
            |g, vars| {
                let p = Bound::from_vars(vars[..n_params].to_vec());
                let lat = DualStreamLatent::new(g, vars[n_params], vars[n_params + 1])?;
                let (to_sp, to_sfx) = biaca.messages(g, &p, lat)?;
                let (g_sp, g_sfx) = gate.forward(g, &p, vars[n_params + 2])?;
                let h_sp = scg_gated_update(g, lat.h_sp, to_sp, g_sp)?;
                let h_sfx = scg_gated_update(g, lat.h_sfx, to_sfx, g_sfx)?;
                let out = joint.forward(g, &p, DualStreamLatent { h_sp, h_sfx })?;
                let both = g.concat(&[out.h_sp, out.h_sfx], 2)?;
                g.mean_square(both)
            },
            &inputs,
            1e-5,
            None,
        )
        .unwrap();
        assert!(report.max_rel_error <= 1e-4, "{report:?}");
    }
}
