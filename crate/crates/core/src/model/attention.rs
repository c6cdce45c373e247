//! Attention over backbone feature positions.
//!
//! The feature map is flattened to `P = Hf·Wf` positions; 1×1 convolutions
//! produce a key and a value vector of size `d` per position. A single query
//! per sample (from the structure embedding or a learned vector) attends over
//! the positions.

use super::layers::{Conv, Ctx, Dense};
use super::params::Initializer;
use crate::error::{shape_err, Result};
use crate::tensor::{Tape, Var};

/// Additive scores `uᵀ tanh(W_q q + W_k k_j)` for every position:
/// `query [N, d]`, `keys [N, P, d]` → `[N, P]`.
pub fn additive_scores(tape: &mut Tape, query: Var, keys: Var, w_q: Var, w_k: Var, u: Var) -> Result<Var> {
    let ks = tape.shape(keys).to_vec();
    if ks.len() != 3 || tape.shape(query) != [ks[0], ks[2]] {
        return Err(shape_err!(
            "additive attention: query {:?} vs keys {:?}",
            tape.shape(query),
            ks
        ));
    }
    if ks[1] == 0 {
        return Err(shape_err!("attention over zero positions"));
    }
    let qp = tape.linear(query, w_q, None)?;
    let qp = tape.expand(qp, 1, ks[1])?;
    let kp = tape.linear(keys, w_k, None)?;
    let s = tape.add(qp, kp)?;
    let s = tape.tanh(s);
    let e = tape.linear(s, u, None)?;
    tape.reshape(e, &[ks[0], ks[1]])
}

/// Softmax-weighted sum of `values [N, P, dv]` under weights `[N, P]`.
fn weighted_sum(tape: &mut Tape, weights: Var, values: Var) -> Result<Var> {
    let ws = tape.shape(weights).to_vec();
    let vs = tape.shape(values).to_vec();
    if vs.len() != 3 || vs[0] != ws[0] || vs[1] != ws[1] {
        return Err(shape_err!("weights {:?} vs values {:?}", ws, vs));
    }
    let w = tape.reshape(weights, &[ws[0], 1, ws[1]])?;
    let z = tape.bmm(w, values)?;
    tape.reshape(z, &[vs[0], vs[2]])
}

/// Bahdanau-style attention. Returns `(z [N, d], alpha [N, P])`.
pub fn additive_attention(
    tape: &mut Tape,
    query: Var,
    keys: Var,
    values: Var,
    w_q: Var,
    w_k: Var,
    u: Var,
) -> Result<(Var, Var)> {
    let scores = additive_scores(tape, query, keys, w_q, w_k, u)?;
    let alpha = tape.softmax(scores)?;
    let z = weighted_sum(tape, alpha, values)?;
    Ok((z, alpha))
}

/// `softmax(q Kᵀ / √d_k) V` per batch entry: `q [B, 1, dk]`, `k [B, P, dk]`,
/// `v [B, P, dv]` → `(z [B, 1, dv], weights [B, 1, P])`.
pub fn scaled_dot_product_attention(tape: &mut Tape, q: Var, k: Var, v: Var) -> Result<(Var, Var)> {
    let (qs, ks, vs) = (tape.shape(q).to_vec(), tape.shape(k).to_vec(), tape.shape(v).to_vec());
    if qs.len() != 3 || ks.len() != 3 || vs.len() != 3 || qs[2] != ks[2] || ks[0] != qs[0] || vs[..2] != ks[..2] {
        return Err(shape_err!("attention: q {:?}, k {:?}, v {:?}", qs, ks, vs));
    }
    let kt = tape.permute(k, &[0, 2, 1])?;
    let scores = tape.bmm(q, kt)?;
    let scores = tape.scale(scores, 1.0 / (qs[2] as f64).sqrt());
    let weights = tape.softmax(scores)?;
    let z = tape.bmm(weights, v)?;
    Ok((z, weights))
}

/// Splits `[N, P, d]` into `[N·h, P, d/h]` head-major batches.
fn split_heads(tape: &mut Tape, x: Var, heads: usize) -> Result<Var> {
    let s = tape.shape(x).to_vec();
    let dh = s[2] / heads;
    let x = tape.reshape(x, &[s[0], s[1], heads, dh])?;
    let x = tape.permute(x, &[0, 2, 1, 3])?;
    tape.reshape(x, &[s[0] * heads, s[1], dh])
}

/// Multi-head attention with projected query; keys and values are expected
/// already projected. Returns `(z [N, d], weights [N, h, P])`, where `z` is
/// the concatenation of head outputs (before any output projection).
pub fn multihead_attention(tape: &mut Tape, query: Var, keys: Var, values: Var, heads: usize) -> Result<(Var, Var)> {
    let ks = tape.shape(keys).to_vec();
    if ks.len() != 3 || tape.shape(query) != [ks[0], ks[2]] || tape.shape(values) != ks.as_slice() {
        return Err(shape_err!(
            "multi-head attention: query {:?}, keys {:?}, values {:?}",
            tape.shape(query),
            ks,
            tape.shape(values)
        ));
    }
    let (n, p, d) = (ks[0], ks[1], ks[2]);
    if heads == 0 || d % heads != 0 {
        return Err(shape_err!("embedding {} not divisible by {} heads", d, heads));
    }
    let dh = d / heads;
    let q = tape.reshape(query, &[n * heads, 1, dh])?;
    let k = split_heads(tape, keys, heads)?;
    let v = split_heads(tape, values, heads)?;
    let (z, w) = scaled_dot_product_attention(tape, q, k, v)?;
    let z = tape.reshape(z, &[n, d])?;
    let w = tape.reshape(w, &[n, heads, p])?;
    Ok((z, w))
}

#[derive(Clone, Debug)]
pub(crate) enum AttentionModule {
    Additive {
        key: Conv,
        value: Conv,
        w_q: Dense,
        w_k: Dense,
        u: Dense,
    },
    MultiHead {
        key: Conv,
        value: Conv,
        w_q: Dense,
        w_o: Dense,
        heads: usize,
    },
}

impl AttentionModule {
    pub fn additive(init: &mut Initializer, d: usize) -> Self {
        AttentionModule::Additive {
            key: Conv::new(init, "attention.key", d, d, 1, 1, true),
            value: Conv::new(init, "attention.value", d, d, 1, 1, true),
            w_q: Dense::new(init, "attention.w_q", d, d, false),
            w_k: Dense::new(init, "attention.w_k", d, d, false),
            u: Dense::new(init, "attention.u", d, 1, false),
        }
    }

    pub fn multihead(init: &mut Initializer, d: usize, heads: usize) -> Self {
        AttentionModule::MultiHead {
            key: Conv::new(init, "attention.key", d, d, 1, 1, true),
            value: Conv::new(init, "attention.value", d, d, 1, 1, true),
            w_q: Dense::new(init, "attention.w_q", d, d, true),
            w_o: Dense::new(init, "attention.w_o", d, d, true),
            heads,
        }
    }

    /// `features [N, d, Hf, Wf]`, `query [N, d]` → `(z [N, d], weights [N, h, P])`.
    pub fn forward(&self, ctx: &mut Ctx, features: Var, query: Var) -> Result<(Var, Var)> {
        let (key, value) = match self {
            AttentionModule::Additive { key, value, .. } | AttentionModule::MultiHead { key, value, .. } => (key, value),
        };
        let k = key.forward(ctx, features)?;
        let v = value.forward(ctx, features)?;
        let k = positions(ctx.tape, k)?;
        let v = positions(ctx.tape, v)?;
        match self {
            AttentionModule::Additive { w_q, w_k, u, .. } => {
                let (wq, wk, uu) = (ctx.var(w_q.weight), ctx.var(w_k.weight), ctx.var(u.weight));
                let (z, alpha) = additive_attention(ctx.tape, query, k, v, wq, wk, uu)?;
                let s = ctx.tape.shape(alpha).to_vec();
                let alpha = ctx.tape.reshape(alpha, &[s[0], 1, s[1]])?;
                Ok((z, alpha))
            }
            AttentionModule::MultiHead { w_q, w_o, heads, .. } => {
                let q = w_q.forward(ctx, query)?;
                let (z, w) = multihead_attention(ctx.tape, q, k, v, *heads)?;
                let z = w_o.forward(ctx, z)?;
                Ok((z, w))
            }
        }
    }
}

/// `[N, d, Hf, Wf]` → `[N, Hf·Wf, d]`, positions in row-major grid order.
pub fn positions(tape: &mut Tape, features: Var) -> Result<Var> {
    let s = tape.shape(features).to_vec();
    if s.len() != 4 {
        return Err(shape_err!("expected a [N, d, Hf, Wf] feature map, got {:?}", s));
    }
    let x = tape.reshape(features, &[s[0], s[1], s[2] * s[3]])?;
    tape.permute(x, &[0, 2, 1])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape, data.to_vec()).unwrap()
    }

    fn eye(d: usize) -> Tensor {
        let mut e = Tensor::zeros(&[d, d]);
        for i in 0..d {
            e.data_mut()[i * d + i] = 1.0;
        }
        e
    }

    #[test]
    fn additive_single_position_returns_its_value() {
        let mut tape = Tape::new();
        let q = tape.constant(t(&[1, 2], &[0.3, -0.7]));
        let k = tape.constant(t(&[1, 1, 2], &[1.0, 2.0]));
        let v = tape.constant(t(&[1, 1, 2], &[5.0, -3.0]));
        let wq = tape.constant(t(&[2, 2], &[0.1, 0.2, 0.3, 0.4]));
        let wk = tape.constant(t(&[2, 2], &[-0.5, 0.6, 0.7, -0.8]));
        let u = tape.constant(t(&[1, 2], &[0.9, 1.1]));
        let (z, a) = additive_attention(&mut tape, q, k, v, wq, wk, u).unwrap();
        assert_eq!(tape.value(a).data(), &[1.0]);
        assert_eq!(tape.value(z).data(), &[5.0, -3.0]);
    }

    #[test]
    fn additive_identical_keys_split_evenly() {
        let mut tape = Tape::new();
        let q = tape.constant(t(&[1, 2], &[0.3, -0.7]));
        let k = tape.constant(t(&[1, 2, 2], &[1.0, 2.0, 1.0, 2.0]));
        let v = tape.constant(t(&[1, 2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let wq = tape.constant(eye(2));
        let wk = tape.constant(eye(2));
        let u = tape.constant(t(&[1, 2], &[1.0, 1.0]));
        let (_, a) = additive_attention(&mut tape, q, k, v, wq, wk, u).unwrap();
        assert_eq!(tape.value(a).data(), &[0.5, 0.5]);
    }

    #[test]
    fn additive_hand_set_weights_match_scalar_evaluation() {
        let mut tape = Tape::new();
        let q = tape.constant(t(&[1, 2], &[0.0, 0.0]));
        let k = tape.constant(t(&[1, 2, 2], &[0.0, 0.0, 10.0, 0.0]));
        let v = tape.constant(t(&[1, 2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let wq = tape.constant(eye(2));
        let wk = tape.constant(eye(2));
        let u = tape.constant(t(&[1, 2], &[1.0, 0.0]));
        let (_, a) = additive_attention(&mut tape, q, k, v, wq, wk, u).unwrap();
        // Independent scalar evaluation: scores (tanh 0, tanh 10).
        let s1 = 10f64.tanh();
        let a0 = 1.0 / (1.0 + s1.exp());
        let a = tape.value(a).data().to_vec();
        assert!((a[0] - a0).abs() < 1e-15);
        assert!((a[1] - (1.0 - a0)).abs() < 1e-15);
        assert!((a[0] - 0.2689).abs() < 1e-4 && (a[1] - 0.7311).abs() < 1e-4);
    }

    #[test]
    fn additive_rejects_empty_or_mismatched() {
        let mut tape = Tape::new();
        let q = tape.constant(Tensor::zeros(&[1, 3]));
        let k = tape.constant(Tensor::zeros(&[1, 2, 2]));
        let w = tape.constant(eye(2));
        let u = tape.constant(Tensor::zeros(&[1, 2]));
        assert!(additive_attention(&mut tape, q, k, k, w, w, u).is_err());
    }

    #[test]
    fn dot_product_identical_keys_average_values() {
        let mut tape = Tape::new();
        let q = tape.constant(t(&[1, 1, 2], &[0.4, -1.3]));
        let k = tape.constant(t(&[1, 3, 2], &[0.5, 0.5, 0.5, 0.5, 0.5, 0.5]));
        let v = tape.constant(t(&[1, 3, 2], &[1.0, 2.0, 3.0, 4.0, 5.0, 9.0]));
        let (z, w) = scaled_dot_product_attention(&mut tape, q, k, v).unwrap();
        for p in tape.value(w).data() {
            assert!((p - 1.0 / 3.0).abs() < 1e-15);
        }
        let z = tape.value(z).data();
        assert!((z[0] - 3.0).abs() < 1e-14 && (z[1] - 5.0).abs() < 1e-14);
    }

    #[test]
    fn dot_product_scaling_by_root_head_dim() {
        // d_head = 4, raw scores [0, ln 9] become [0, ln 3] after /√4.
        let mut tape = Tape::new();
        let q = tape.constant(t(&[1, 1, 4], &[1.0, 0.0, 0.0, 0.0]));
        let k = tape.constant(t(&[1, 2, 4], &[0.0, 1.0, 0.0, 0.0, 9f64.ln(), 0.0, 0.0, 0.0]));
        let v = tape.constant(Tensor::zeros(&[1, 2, 4]));
        let (_, w) = scaled_dot_product_attention(&mut tape, q, k, v).unwrap();
        let w = tape.value(w).data();
        assert!((w[0] - 0.25).abs() < 1e-15 && (w[1] - 0.75).abs() < 1e-15);
    }

    #[test]
    fn dot_product_key_algebra() {
        let run = |keys: &[f64]| {
            let mut tape = Tape::new();
            let q = tape.constant(t(&[1, 1, 2], &[1.0, 0.0]));
            let k = tape.constant(t(&[1, 2, 2], keys));
            let v = tape.constant(Tensor::zeros(&[1, 2, 2]));
            let (_, w) = scaled_dot_product_attention(&mut tape, q, k, v).unwrap();
            tape.value(w).data().to_vec()
        };
        let base = run(&[0.2, 0.1, 1.0, -0.4]);
        let doubled = run(&[0.4, 0.2, 2.0, -0.8]);
        let orthogonal_shift = run(&[0.2, 3.1, 1.0, 2.6]);
        assert!((base[0] - doubled[0]).abs() > 1e-3);
        for (a, b) in base.iter().zip(&orthogonal_shift) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn multihead_rejects_indivisible_embedding() {
        let mut tape = Tape::new();
        let q = tape.constant(Tensor::zeros(&[1, 6]));
        let k = tape.constant(Tensor::zeros(&[1, 3, 6]));
        assert!(multihead_attention(&mut tape, q, k, k, 4).is_err());
        let (z, w) = multihead_attention(&mut tape, q, k, k, 3).unwrap();
        assert_eq!(tape.shape(z), &[1, 6]);
        assert_eq!(tape.shape(w), &[1, 3, 3]);
    }
}
