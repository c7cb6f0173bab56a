//! Seeded generators and brute-force oracles for the toy tasks: the
//! nth-farthest comparison task and the copy/reverse/double memorization
//! tasks, plus their model-facing encodings.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::tensor::{Result, Tensor, TensorError};

/// One comparison episode: labelled random vectors and the question
/// "which labelled vector is the n-th farthest from the one labelled m?".
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NthFarthestEpisode {
    /// seq_len vectors of `dim` entries in (-1, 1).
    pub vectors: Vec<Vec<f64>>,
    /// A permutation of 1..=seq_len; labels do not follow presentation order.
    pub labels: Vec<usize>,
    pub n: usize,
    pub m: usize,
    /// Label of the answer vector.
    pub target: usize,
}

pub fn gen_nth_farthest(
    rng: &mut impl Rng,
    dim: usize,
    seq_len: usize,
) -> NthFarthestEpisode {
    assert!(seq_len >= 2, "nth farthest needs at least two vectors");
    let vectors: Vec<Vec<f64>> = (0..seq_len)
        .map(|_| (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect())
        .collect();
    let mut labels: Vec<usize> = (1..=seq_len).collect();
    labels.shuffle(rng);
    let n = rng.random_range(1..=seq_len);
    let m = rng.random_range(1..=seq_len);
    let target = nth_farthest_oracle(&vectors, &labels, n, m)
        .expect("generated labels always contain m");
    NthFarthestEpisode {
        vectors,
        labels,
        n,
        m,
        target,
    }
}

/// Sorts the labels by Euclidean distance of their vector to the vector
/// labelled `m`, farthest first, and returns the label at rank `n`
/// (1-based). Ties break toward the smaller label.
pub fn nth_farthest_oracle(
    vectors: &[Vec<f64>],
    labels: &[usize],
    n: usize,
    m: usize,
) -> Result<usize> {
    let reference = labels
        .iter()
        .position(|&l| l == m)
        .ok_or_else(|| TensorError::Contract(format!("label {m} not present")))?;
    if n == 0 || n > labels.len() {
        return Err(TensorError::Contract(format!(
            "rank {n} out of range for {} vectors",
            labels.len()
        )));
    }
    let mut ranked: Vec<(f64, usize)> = vectors
        .iter()
        .zip(labels)
        .map(|(v, &label)| {
            let d = v
                .iter()
                .zip(&vectors[reference])
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt();
            (d, label)
        })
        .collect();
    ranked.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
    Ok(ranked[n - 1].1)
}

/// Per-timestep encoding [vector ; onehot(label) ; onehot(n) ; onehot(m)]
/// of width dim + 3*seq_len, plus the zero-based target class.
pub fn encode_nth_farthest(episode: &NthFarthestEpisode) -> (Tensor, usize) {
    let seq_len = episode.vectors.len();
    let dim = episode.vectors[0].len();
    let width = dim + 3 * seq_len;
    let mut rows = Vec::with_capacity(seq_len);
    for (v, &label) in episode.vectors.iter().zip(&episode.labels) {
        let mut row = vec![0.0; width];
        row[..dim].copy_from_slice(v);
        row[dim + label - 1] = 1.0;
        row[dim + seq_len + episode.n - 1] = 1.0;
        row[dim + 2 * seq_len + episode.m - 1] = 1.0;
        rows.push(row);
    }
    (Tensor::from_rows(&rows), episode.target - 1)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MemorizationKind {
    Copy,
    Reverse,
    Double,
}

/// One memorization sample over the digit vocabulary 0..vocab_size.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeqSample {
    pub kind: MemorizationKind,
    pub input_tokens: Vec<usize>,
    pub target_tokens: Vec<usize>,
}

pub fn gen_memorization(
    rng: &mut impl Rng,
    kind: MemorizationKind,
    vocab_size: usize,
    length: usize,
) -> SeqSample {
    assert!(vocab_size >= 2 && length >= 1);
    let input_tokens: Vec<usize> = (0..length).map(|_| rng.random_range(0..vocab_size)).collect();
    let target_tokens = memorization_oracle(kind, &input_tokens);
    SeqSample {
        kind,
        input_tokens,
        target_tokens,
    }
}

pub fn memorization_oracle(kind: MemorizationKind, input: &[usize]) -> Vec<usize> {
    match kind {
        MemorizationKind::Copy => input.to_vec(),
        MemorizationKind::Reverse => input.iter().rev().copied().collect(),
        MemorizationKind::Double => input.iter().chain(input).copied().collect(),
    }
}

/// Sequence encoding with a non-auto-regressive answer phase: the tokens
/// are presented one-hot, then a GO symbol, then one PAD-fed step per
/// answer token. The loss mask covers exactly the answer steps; the model
/// never sees its own or gold outputs.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodedSeq {
    /// T x (vocab_size + 2); GO = vocab_size, PAD = vocab_size + 1.
    pub inputs: Tensor,
    /// Target class per timestep; only meaningful where `mask` is set.
    pub targets: Vec<usize>,
    pub mask: Vec<bool>,
}

/// Symbol-set width for a vocabulary: the digits plus GO and PAD.
pub fn memorization_symbols(vocab_size: usize) -> usize {
    vocab_size + 2
}

pub fn encode_memorization(sample: &SeqSample, vocab_size: usize) -> EncodedSeq {
    let width = memorization_symbols(vocab_size);
    let go = vocab_size;
    let pad = vocab_size + 1;
    let total = sample.input_tokens.len() + 1 + sample.target_tokens.len();

    let mut rows = Vec::with_capacity(total);
    let mut targets = vec![0usize; total];
    let mut mask = vec![false; total];
    let onehot = |symbol: usize| {
        let mut row = vec![0.0; width];
        row[symbol] = 1.0;
        row
    };
    for &tok in &sample.input_tokens {
        rows.push(onehot(tok));
    }
    rows.push(onehot(go));
    for (j, &tok) in sample.target_tokens.iter().enumerate() {
        rows.push(onehot(pad));
        let t = sample.input_tokens.len() + 1 + j;
        targets[t] = tok;
        mask[t] = true;
    }
    EncodedSeq {
        inputs: Tensor::from_rows(&rows),
        targets,
        mask,
    }
}
