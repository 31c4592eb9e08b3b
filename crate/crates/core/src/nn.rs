//! Small shared network building blocks on top of the tape.

use crate::error::{Error, Result};
use crate::tensor::{Tape, Var};

/// Multi-head scaled dot-product attention over already-projected q/k/v of
/// shape (S, D). `mask` is an additive (S, S) bias (0 / -1e30) applied to the
/// scores of every head; pass `None` for full bidirectional attention.
pub(crate) fn scaled_dot_attention(
    tape: &mut Tape,
    q: Var,
    k: Var,
    v: Var,
    heads: usize,
    mask: Option<Var>,
) -> Result<Var> {
    let (_, d) = tape.value(q).dims2()?;
    if heads == 0 || d % heads != 0 {
        return Err(Error::Config(format!(
            "attention: hidden dim {d} not divisible by {heads} heads"
        )));
    }
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut ctx = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = tape.slice_cols(q, h * dh, dh)?;
        let kh = tape.slice_cols(k, h * dh, dh)?;
        let vh = tape.slice_cols(v, h * dh, dh)?;
        let kt = tape.transpose(kh)?;
        let scores = tape.matmul(qh, kt)?;
        let mut scores = tape.scale(scores, scale);
        if let Some(m) = mask {
            scores = tape.add(scores, m)?;
        }
        let probs = tape.softmax(scores, 1)?;
        ctx.push(tape.matmul(probs, vh)?);
    }
    tape.concat_cols(&ctx)
}

/// Additive causal mask: position i may attend to positions <= i.
pub(crate) fn causal_mask(seq_len: usize) -> crate::tensor::Array {
    let mut data = vec![0.0; seq_len * seq_len];
    for i in 0..seq_len {
        for j in i + 1..seq_len {
            data[i * seq_len + j] = -1e30;
        }
    }
    crate::tensor::Array { shape: vec![seq_len, seq_len], data }
}

/// Inverted dropout mask: entries are 0 with probability `p`, else 1/(1-p).
pub(crate) fn dropout_mask(shape: &[usize], p: f64, rng: &mut rand_chacha::ChaCha8Rng) -> crate::tensor::Array {
    use rand::Rng;
    let n: usize = shape.iter().product();
    let keep = 1.0 - p;
    let data = (0..n)
        .map(|_| if rng.gen::<f64>() < p { 0.0 } else { 1.0 / keep })
        .collect();
    crate::tensor::Array { shape: shape.to_vec(), data }
}
