//! Attention building blocks. Every function records onto the caller's tape.

use std::rc::Rc;

use rand::Rng;

use crate::tensor::nn::{Activation, LayerNorm, Linear, Mlp};
use crate::tensor::{ParamStore, Tape, TensorError, Var};

type Result<T> = std::result::Result<T, TensorError>;

/// The `W_q`, `W_k`, `W_v` maps of one attention block.
#[derive(Clone, Debug)]
pub struct QkvProj {
    pub q: Mlp,
    pub k: Mlp,
    pub v: Mlp,
}

impl QkvProj {
    pub fn new(store: &mut ParamStore, name: &str, h: usize, depth: usize, rng: &mut impl Rng) -> Self {
        let widths = vec![h; depth + 1];
        Self {
            q: Mlp::new(store, &format!("{name}.wq"), &widths, Activation::Relu, rng),
            k: Mlp::new(store, &format!("{name}.wk"), &widths, Activation::Relu, rng),
            v: Mlp::new(store, &format!("{name}.wv"), &widths, Activation::Relu, rng),
        }
    }
}

/// `softmax(q kᵀ · scale) v` for dense query/key sets; returns (output, weights).
pub fn dense_attention(tape: &mut Tape, q: Var, k: Var, v: Var, scale: f64) -> Result<(Var, Var)> {
    let kt = tape.transpose(k)?;
    let s = tape.matmul(q, kt)?;
    let s = tape.scale(s, scale);
    let w = tape.softmax(s, 1)?;
    let out = tape.matmul(w, v)?;
    Ok((out, w))
}

/// The base attention operator: queries from `x`, keys and values from `y`,
/// scaled by `1/√h`.
pub fn attention(tape: &mut Tape, store: &ParamStore, p: &QkvProj, x: Var, y: Var) -> Result<(Var, Var)> {
    let h = tape.shape(x)[1];
    let q = p.q.forward(tape, store, x)?;
    let k = p.k.forward(tape, store, y)?;
    let v = p.v.forward(tape, store, y)?;
    dense_attention(tape, q, k, v, 1.0 / (h as f64).sqrt())
}

/// Multi-head self-attention over the rows of `x`, followed by `W_o`.
/// Returns the projected output and the per-head weight matrices.
pub fn multi_head_self_attention(
    tape: &mut Tape,
    store: &ParamStore,
    p: &QkvProj,
    w_o: &Linear,
    x: Var,
    heads: usize,
) -> Result<(Var, Vec<Var>)> {
    let h = tape.shape(x)[1];
    let d = h / heads;
    let q = p.q.forward(tape, store, x)?;
    let k = p.k.forward(tape, store, x)?;
    let v = p.v.forward(tape, store, x)?;
    let mut outs = Vec::with_capacity(heads);
    let mut weights = Vec::with_capacity(heads);
    for head in 0..heads {
        let (qh, kh, vh) = if heads == 1 {
            (q, k, v)
        } else {
            (tape.slice_cols(q, head * d, d)?, tape.slice_cols(k, head * d, d)?, tape.slice_cols(v, head * d, d)?)
        };
        let (o, w) = dense_attention(tape, qh, kh, vh, 1.0 / (d as f64).sqrt())?;
        outs.push(o);
        weights.push(w);
    }
    let cat = if heads == 1 { outs[0] } else { tape.concat(&outs, 1)? };
    Ok((w_o.forward(tape, store, cat)?, weights))
}

/// Attention of every attention point over its `k` spatial neighbors.
/// `nbr` is a row-major `n × k` neighbor table. Returns (pre-norm mix, weights).
pub fn knn_attention(
    tape: &mut Tape,
    store: &ParamStore,
    p: &QkvProj,
    v_feat: Var,
    nbr: &Rc<[usize]>,
    k: usize,
) -> Result<(Var, Var)> {
    let h = tape.shape(v_feat)[1];
    let q = p.q.forward(tape, store, v_feat)?;
    let key = p.k.forward(tape, store, v_feat)?;
    let val = p.v.forward(tape, store, v_feat)?;
    let s = tape.knn_scores(q, key, nbr, k)?;
    let s = tape.scale(s, 1.0 / (h as f64).sqrt());
    let w = tape.softmax(s, 1)?;
    Ok((tape.knn_mix(w, val, nbr, k)?, w))
}

/// `LayerNorm(x + delta)`.
pub fn residual_norm(tape: &mut Tape, store: &ParamStore, ln: &LayerNorm, x: Var, delta: Var) -> Result<Var> {
    let s = tape.add(x, delta)?;
    ln.forward(tape, store, s)
}

/// One GPAT layer: multi-scale neighbor attention on targets, multi-head
/// attention among parts, then simultaneous cross-attention both ways.
#[derive(Clone, Debug)]
pub struct GpatLayer {
    pub msa: QkvProj,
    pub msa_norm: LayerNorm,
    pub part: QkvProj,
    pub part_out: Linear,
    pub part_norm: LayerNorm,
    pub to_parts: QkvProj,
    pub target_norm: LayerNorm,
    pub to_targets: QkvProj,
    pub cross_part_norm: LayerNorm,
}

/// Attention weights recorded by one layer, for inspection.
#[derive(Clone, Debug)]
pub struct LayerTrace {
    pub weights: Vec<Var>,
}

impl GpatLayer {
    pub fn new(store: &mut ParamStore, name: &str, h: usize, depth: usize, rng: &mut impl Rng) -> Self {
        Self {
            msa: QkvProj::new(store, &format!("{name}.msa"), h, depth, rng),
            msa_norm: LayerNorm::new(store, &format!("{name}.msa_norm"), h),
            part: QkvProj::new(store, &format!("{name}.part"), h, depth, rng),
            part_out: Linear::new(store, &format!("{name}.part.wo"), h, h, rng),
            part_norm: LayerNorm::new(store, &format!("{name}.part_norm"), h),
            to_parts: QkvProj::new(store, &format!("{name}.cross_t"), h, depth, rng),
            target_norm: LayerNorm::new(store, &format!("{name}.cross_t_norm"), h),
            to_targets: QkvProj::new(store, &format!("{name}.cross_p"), h, depth, rng),
            cross_part_norm: LayerNorm::new(store, &format!("{name}.cross_p_norm"), h),
        }
    }

    pub fn multi_scale(&self, tape: &mut Tape, store: &ParamStore, v: Var, nbr: &Rc<[usize]>, k: usize) -> Result<(Var, Var)> {
        let (mix, w) = knn_attention(tape, store, &self.msa, v, nbr, k)?;
        Ok((residual_norm(tape, store, &self.msa_norm, v, mix)?, w))
    }

    pub fn part_self_attention(&self, tape: &mut Tape, store: &ParamStore, u: Var, heads: usize) -> Result<(Var, Vec<Var>)> {
        let (mix, w) = multi_head_self_attention(tape, store, &self.part, &self.part_out, u, heads)?;
        Ok((residual_norm(tape, store, &self.part_norm, u, mix)?, w))
    }

    /// Both directions read the same inputs, so neither sees the other's update.
    pub fn cross_attention(&self, tape: &mut Tape, store: &ParamStore, v: Var, u: Var) -> Result<(Var, Var, [Var; 2])> {
        let (tv, wt) = attention(tape, store, &self.to_parts, v, u)?;
        let (pu, wp) = attention(tape, store, &self.to_targets, u, v)?;
        let v1 = residual_norm(tape, store, &self.target_norm, v, tv)?;
        let u1 = residual_norm(tape, store, &self.cross_part_norm, u, pu)?;
        Ok((v1, u1, [wt, wp]))
    }

    #[allow(clippy::too_many_arguments)]
    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        v: Var,
        u: Var,
        nbr: &Rc<[usize]>,
        k: usize,
        heads: usize,
    ) -> Result<(Var, Var, LayerTrace)> {
        let (vb, w0) = self.multi_scale(tape, store, v, nbr, k)?;
        let (ub, mut wp) = self.part_self_attention(tape, store, u, heads)?;
        let (v1, u1, wc) = self.cross_attention(tape, store, vb, ub)?;
        let mut weights = vec![w0];
        weights.append(&mut wp);
        weights.extend(wc);
        Ok((v1, u1, LayerTrace { weights }))
    }
}

/// Ablation layer: one multi-head self-attention over the joint token
/// sequence `[V; U]`.
#[derive(Clone, Debug)]
pub struct TfLayer {
    pub attn: QkvProj,
    pub out: Linear,
    pub norm: LayerNorm,
}

impl TfLayer {
    pub fn new(store: &mut ParamStore, name: &str, h: usize, depth: usize, rng: &mut impl Rng) -> Self {
        Self {
            attn: QkvProj::new(store, &format!("{name}.attn"), h, depth, rng),
            out: Linear::new(store, &format!("{name}.attn.wo"), h, h, rng),
            norm: LayerNorm::new(store, &format!("{name}.norm"), h),
        }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, v: Var, u: Var, heads: usize) -> Result<(Var, Var, LayerTrace)> {
        let n = tape.shape(v)[0];
        let m = tape.shape(u)[0];
        let x = tape.concat(&[v, u], 0)?;
        let (mix, weights) = multi_head_self_attention(tape, store, &self.attn, &self.out, x, heads)?;
        let y = residual_norm(tape, store, &self.norm, x, mix)?;
        let v_idx: Vec<usize> = (0..n).collect();
        let u_idx: Vec<usize> = (n..n + m).collect();
        let v1 = tape.gather_rows(y, &v_idx)?;
        let u1 = tape.gather_rows(y, &u_idx)?;
        Ok((v1, u1, LayerTrace { weights }))
    }
}

/// Part-matching head: `W_T(v)·W_P(u) / √h`, normalized over parts.
#[derive(Clone, Debug)]
pub struct MatchHead {
    pub w_t: Mlp,
    pub w_p: Mlp,
}

impl MatchHead {
    pub fn new(store: &mut ParamStore, name: &str, h: usize, depth: usize, rng: &mut impl Rng) -> Self {
        let widths = vec![h; depth + 1];
        Self {
            w_t: Mlp::new(store, &format!("{name}.wt"), &widths, Activation::Relu, rng),
            w_p: Mlp::new(store, &format!("{name}.wp"), &widths, Activation::Relu, rng),
        }
    }

    pub fn logits(&self, tape: &mut Tape, store: &ParamStore, v: Var, u: Var) -> Result<Var> {
        let h = tape.shape(v)[1];
        let a = self.w_t.forward(tape, store, v)?;
        let b = self.w_p.forward(tape, store, u)?;
        let bt = tape.transpose(b)?;
        let s = tape.matmul(a, bt)?;
        Ok(tape.scale(s, 1.0 / (h as f64).sqrt()))
    }
}
