//! Multi-head dot-product attention over memory slots.
//!
//! Queries always come from the memory matrix alone; keys and values may
//! additionally see row-appended input, so the output keeps the memory's
//! shape. A block wraps the attention in residual layer-norm structure with
//! a row-wise MLP, and blocks can be stacked per timestep.

use rand::Rng;

use crate::nn::{layer_norm_apply, mlp_apply, xavier_uniform, LayerNorm, Mlp};
use crate::tensor::{Result, Tape, Tensor, TensorError, Var};

/// Query/key/value projections for one attention head. No bias terms:
/// the projections are pure linear maps of the memory rows.
#[derive(Debug, Clone)]
pub struct HeadParams<T> {
    /// F x d_k
    pub query: T,
    /// F x d_k
    pub key: T,
    /// F x (F / num_heads)
    pub value: T,
}

/// One attention block: per-head projections plus the post-attention
/// row-wise MLP and the two layer norms around it.
#[derive(Debug, Clone)]
pub struct AttentionParams<T> {
    pub heads: Vec<HeadParams<T>>,
    pub mlp: Mlp<T>,
    pub ln1: LayerNorm<T>,
    pub ln2: LayerNorm<T>,
}

impl AttentionParams<Tensor> {
    /// `mem_size` must be divisible by `num_heads`; `key_size` is the
    /// query/key width d_k.
    pub fn init(
        rng: &mut impl Rng,
        mem_size: usize,
        num_heads: usize,
        key_size: usize,
    ) -> Self {
        assert!(num_heads >= 1 && mem_size.is_multiple_of(num_heads));
        let head_width = mem_size / num_heads;
        let heads = (0..num_heads)
            .map(|_| HeadParams {
                query: xavier_uniform(rng, mem_size, key_size),
                key: xavier_uniform(rng, mem_size, key_size),
                value: xavier_uniform(rng, mem_size, head_width),
            })
            .collect();
        AttentionParams {
            heads,
            mlp: Mlp::xavier(rng, &[mem_size, mem_size, mem_size], false),
            ln1: LayerNorm::identity(mem_size),
            ln2: LayerNorm::identity(mem_size),
        }
    }

    pub fn bind(&self, tape: &mut Tape) -> AttentionParams<Var> {
        AttentionParams {
            heads: self
                .heads
                .iter()
                .map(|h| HeadParams {
                    query: tape.leaf(h.query.clone()),
                    key: tape.leaf(h.key.clone()),
                    value: tape.leaf(h.value.clone()),
                })
                .collect(),
            mlp: self.mlp.bind(tape),
            ln1: self.ln1.bind(tape),
            ln2: self.ln2.bind(tape),
        }
    }

}

impl<T> AttentionParams<T> {
    pub fn visit_at(&self, prefix: &str, f: &mut dyn FnMut(&str, &T)) {
        for (k, head) in self.heads.iter().enumerate() {
            f(&format!("{prefix}.heads.{k}.query"), &head.query);
            f(&format!("{prefix}.heads.{k}.key"), &head.key);
            f(&format!("{prefix}.heads.{k}.value"), &head.value);
        }
        self.mlp.visit_at(&format!("{prefix}.mlp"), f);
        self.ln1.visit_at(&format!("{prefix}.ln1"), f);
        self.ln2.visit_at(&format!("{prefix}.ln2"), f);
    }

    pub fn visit_at_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut T)) {
        for (k, head) in self.heads.iter_mut().enumerate() {
            f(&format!("{prefix}.heads.{k}.query"), &mut head.query);
            f(&format!("{prefix}.heads.{k}.key"), &mut head.key);
            f(&format!("{prefix}.heads.{k}.value"), &mut head.value);
        }
        self.mlp.visit_at_mut(&format!("{prefix}.mlp"), f);
        self.ln1.visit_at_mut(&format!("{prefix}.ln1"), f);
        self.ln2.visit_at_mut(&format!("{prefix}.ln2"), f);
    }
}

/// Row-stochastic attention weights captured while running a timestep,
/// indexed `[block][head]`, each N x (N + appended input rows).
#[derive(Debug, Clone)]
pub struct AttentionTrace {
    pub weights: Vec<Vec<Tensor>>,
    pub timestep: usize,
}

impl AttentionTrace {
    pub fn num_blocks(&self) -> usize {
        self.weights.len()
    }

    pub fn num_heads(&self) -> usize {
        self.weights.first().map_or(0, |b| b.len())
    }
}

/// softmax(q kᵀ / sqrt(d_k)) v. Returns (output, weights); weight rows are
/// nonnegative and sum to one.
pub fn scaled_dot_attention(
    tape: &mut Tape,
    q: Var,
    k: Var,
    v: Var,
    d_k: usize,
) -> Result<(Var, Var)> {
    let (qr, qc) = tape.shape(q);
    let (kr, kc) = tape.shape(k);
    let (vr, vc) = tape.shape(v);
    if qc != d_k || kc != d_k {
        return Err(TensorError::Dim {
            op: "scaled_dot_attention",
            lhs: (qr, qc),
            rhs: (kr, kc),
        });
    }
    if vr != kr {
        return Err(TensorError::Dim {
            op: "scaled_dot_attention",
            lhs: (kr, kc),
            rhs: (vr, vc),
        });
    }
    let kt = tape.transpose(k);
    let scores = tape.matmul(q, kt)?;
    let scaled = tape.scale(scores, 1.0 / (d_k as f64).sqrt());
    let weights = tape.softmax_rows(scaled);
    let out = tape.matmul(weights, v)?;
    Ok((out, weights))
}

/// Memory-size preserving multi-head attention: queries from the memory
/// only, keys and values from the memory with `x_rows` appended row-wise.
/// Head outputs are column-concatenated back to the memory width.
pub fn mhdpa_over_memory(
    tape: &mut Tape,
    params: &AttentionParams<Var>,
    memory: Var,
    x_rows: Option<Var>,
) -> Result<(Var, Vec<Var>)> {
    let source = match x_rows {
        Some(x) => tape.concat_rows(&[memory, x])?,
        None => memory,
    };
    let mut outs = Vec::with_capacity(params.heads.len());
    let mut weights = Vec::with_capacity(params.heads.len());
    for head in &params.heads {
        let d_k = tape.shape(head.query).1;
        let q = tape.matmul(memory, head.query)?;
        let k = tape.matmul(source, head.key)?;
        let v = tape.matmul(source, head.value)?;
        let (out, w) = scaled_dot_attention(tape, q, k, v, d_k)?;
        outs.push(out);
        weights.push(w);
    }
    let m_tilde = tape.concat_cols(&outs)?;
    Ok((m_tilde, weights))
}

/// Runs `blocks.len()` iterations of attention. Each block applies the
/// residual + layer-norm + row-wise MLP structure:
/// t = ln1(M + A(M)); M <- ln2(t + mlp(t)).
/// Returns the final memory and the per-block, per-head weight vars.
pub fn attend_blocks(
    tape: &mut Tape,
    blocks: &[AttentionParams<Var>],
    memory: Var,
    x_rows: Option<Var>,
) -> Result<(Var, Vec<Vec<Var>>)> {
    assert!(!blocks.is_empty(), "attend_blocks needs at least one block");
    let mut cur = memory;
    let mut trace = Vec::with_capacity(blocks.len());
    for block in blocks {
        let (attended, ws) = mhdpa_over_memory(tape, block, cur, x_rows)?;
        let residual = tape.add(cur, attended)?;
        let normed = layer_norm_apply(tape, &block.ln1, residual)?;
        let transformed = mlp_apply(tape, &block.mlp, normed)?;
        let residual2 = tape.add(normed, transformed)?;
        cur = layer_norm_apply(tape, &block.ln2, residual2)?;
        trace.push(ws);
    }
    Ok((cur, trace))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn singleton_key_gets_all_the_weight() {
        let mut tape = Tape::new();
        let q = tape.leaf(Tensor::row(&[0.3, -0.8]));
        let k = tape.leaf(Tensor::row(&[1.5, 0.2]));
        let v = tape.leaf(Tensor::row(&[7.0, 8.0, 9.0]));
        let (out, w) = scaled_dot_attention(&mut tape, q, k, v, 2).unwrap();
        assert_eq!(tape.value(w), &Tensor::row(&[1.0]));
        assert_eq!(tape.value(out), tape.value(v));
    }

    #[test]
    fn identical_keys_split_evenly() {
        let mut tape = Tape::new();
        let q = tape.leaf(Tensor::from_rows(&[vec![0.5, 1.0], vec![-1.0, 2.0]]));
        let k = tape.leaf(Tensor::from_rows(&[vec![0.7, -0.1], vec![0.7, -0.1]]));
        let v = tape.leaf(Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]));
        let (_, w) = scaled_dot_attention(&mut tape, q, k, v, 2).unwrap();
        for r in 0..2 {
            assert!((tape.value(w).get(r, 0) - 0.5).abs() < 1e-12);
            assert!((tape.value(w).get(r, 1) - 0.5).abs() < 1e-12);
        }
    }

    #[test]
    fn closed_form_two_by_two() {
        let mut tape = Tape::new();
        let q = tape.leaf(Tensor::identity(2));
        let k = tape.leaf(Tensor::identity(2));
        let v = tape.leaf(Tensor::identity(2));
        let (_, w) = scaled_dot_attention(&mut tape, q, k, v, 2).unwrap();
        // row 0 scores are [1/sqrt(2), 0]
        let s = (1.0f64 / 2.0f64.sqrt()).exp();
        let expect = s / (s + 1.0);
        assert!((tape.value(w).get(0, 0) - expect).abs() < 1e-12);
        assert!((tape.value(w).get(0, 0) - 0.6698).abs() < 1e-4);
        assert!((tape.value(w).get(0, 1) - 0.3302).abs() < 1e-4);
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let mut tape = Tape::new();
        let q = tape.leaf(Tensor::zeros(2, 3));
        let k = tape.leaf(Tensor::zeros(4, 2));
        let v = tape.leaf(Tensor::zeros(4, 2));
        assert!(scaled_dot_attention(&mut tape, q, k, v, 2).is_err());
        let k2 = tape.leaf(Tensor::zeros(4, 3));
        let v2 = tape.leaf(Tensor::zeros(3, 2));
        assert!(scaled_dot_attention(&mut tape, q, k2, v2, 3).is_err());
    }

    #[test]
    fn single_identity_head_reduces_to_plain_attention() {
        // With no appended input and identity projections, the
        // memory-preserving form is exactly attention of M over itself.
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let m = xavier_uniform(&mut rng, 3, 4);

        let mut tape = Tape::new();
        let mv = tape.leaf(m.clone());
        let params = AttentionParams {
            heads: vec![HeadParams {
                query: tape.leaf(Tensor::identity(4)),
                key: tape.leaf(Tensor::identity(4)),
                value: tape.leaf(Tensor::identity(4)),
            }],
            mlp: Mlp::xavier(&mut rng, &[4, 4], false).bind(&mut tape),
            ln1: LayerNorm::identity(4).bind(&mut tape),
            ln2: LayerNorm::identity(4).bind(&mut tape),
        };
        let (m_tilde, _) = mhdpa_over_memory(&mut tape, &params, mv, None).unwrap();

        let q = tape.leaf(m.clone());
        let (direct, _) = scaled_dot_attention(&mut tape, q, q, q, 4).unwrap();
        assert_eq!(tape.value(m_tilde), tape.value(direct));
    }

    #[test]
    fn mhdpa_shapes_and_row_sums() {
        let mut rng = ChaCha8Rng::seed_from_u64(32);
        let params = AttentionParams::init(&mut rng, 32, 2, 16);
        let mut tape = Tape::new();
        let bound = params.bind(&mut tape);
        let m = tape.leaf(xavier_uniform(&mut rng, 4, 32));
        let x = tape.leaf(xavier_uniform(&mut rng, 1, 32));
        let (m_tilde, weights) = mhdpa_over_memory(&mut tape, &bound, m, Some(x)).unwrap();
        assert_eq!(tape.shape(m_tilde), (4, 32));
        assert_eq!(weights.len(), 2);
        for &w in &weights {
            assert_eq!(tape.shape(w), (4, 5));
            for r in 0..4 {
                let sum: f64 = tape.value(w).row_slice(r).iter().sum();
                assert!((sum - 1.0).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn attend_blocks_traces_and_preserves_shape() {
        let mut rng = ChaCha8Rng::seed_from_u64(33);
        for num_blocks in 1..=4 {
            let blocks: Vec<_> = (0..num_blocks)
                .map(|_| AttentionParams::init(&mut rng, 8, 2, 4))
                .collect();
            let mut tape = Tape::new();
            let bound: Vec<_> = blocks.iter().map(|b| b.bind(&mut tape)).collect();
            let m = tape.leaf(xavier_uniform(&mut rng, 3, 8));
            let x = tape.leaf(xavier_uniform(&mut rng, 1, 8));
            let (out, trace) = attend_blocks(&mut tape, &bound, m, Some(x)).unwrap();
            assert_eq!(tape.shape(out), (3, 8));
            assert_eq!(trace.len(), num_blocks);
            assert!(trace.iter().all(|b| b.len() == 2));
        }
    }
}
