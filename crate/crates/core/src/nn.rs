//! Building blocks shared by the host encoder and the adapter.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

/// Additive score applied to masked key positions before the softmax.
pub const MASK_NEG: f64 = -1e9;

/// Projection weights of one multi-head attention layer (all `t x t`).
#[derive(Debug, Clone, Copy)]
pub struct AttentionVars {
    pub wq: Var,
    pub wk: Var,
    pub wv: Var,
    pub wo: Var,
}

pub struct AttentionOutput {
    pub output: Var,
    /// Per-head `queries x keys` attention weights.
    pub weights: Vec<Var>,
}

/// Scaled dot-product multi-head attention with queries from `query_in` and
/// keys/values from `kv_in`. `key_mask[j] == false` hides key `j`.
pub fn multi_head_attention(
    tape: &mut Tape,
    query_in: Var,
    kv_in: Var,
    w: AttentionVars,
    heads: usize,
    key_mask: Option<&[bool]>,
) -> Result<AttentionOutput> {
    let q = tape.matmul(query_in, w.wq)?;
    let k = tape.matmul(kv_in, w.wk)?;
    let v = tape.matmul(kv_in, w.wv)?;
    let width = tape.shape(q)[1];
    let n_keys = tape.shape(k)[0];
    if heads == 0 || !width.is_multiple_of(heads) {
        return Err(Error::Config(format!("{heads} heads do not divide width {width}")));
    }
    if n_keys == 0 {
        return Err(Error::Value("attention over zero keys".into()));
    }
    let mask_row = match key_mask {
        Some(m) => {
            if m.len() != n_keys {
                return Err(Error::shape("attention mask", &[m.len()], &[n_keys]));
            }
            if !m.iter().any(|&b| b) {
                return Err(Error::Value("every key position is masked".into()));
            }
            let row = m.iter().map(|&b| if b { 0.0 } else { MASK_NEG }).collect();
            Some(tape.constant(Tensor::new(&[1, n_keys], row)?))
        }
        None => None,
    };
    let dh = width / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut weights = Vec::with_capacity(heads);
    let mut merged: Option<Var> = None;
    for h in 0..heads {
        let qh = tape.narrow(q, 1, h * dh, dh)?;
        let kh = tape.narrow(k, 1, h * dh, dh)?;
        let vh = tape.narrow(v, 1, h * dh, dh)?;
        let kt = tape.transpose(kh)?;
        let raw = tape.matmul(qh, kt)?;
        let mut scores = tape.scale(raw, scale);
        if let Some(m) = mask_row {
            scores = tape.add(scores, m)?;
        }
        let p = tape.softmax(scores, 1)?;
        weights.push(p);
        let oh = tape.matmul(p, vh)?;
        merged = Some(match merged {
            None => oh,
            Some(acc) => tape.concat(acc, oh, 1)?,
        });
    }
    let output = tape.matmul(merged.expect("heads >= 1"), w.wo)?;
    Ok(AttentionOutput { output, weights })
}

/// Stacks per-head weight matrices into a `heads x queries x keys` tensor.
pub fn stack_weights(tape: &Tape, weights: &[Var]) -> Tensor {
    let (q, k) = match tape.shape(weights[0]) {
        [q, k] => (*q, *k),
        _ => unreachable!("attention weights are rank 2"),
    };
    let data = weights.iter().flat_map(|&w| tape.value(w).to_vec()).collect();
    Tensor::new(&[weights.len(), q, k], data).expect("stack shape")
}

/// Inverted dropout driven by an explicit RNG stream.
pub struct Dropout<'a> {
    pub p: f64,
    pub rng: &'a mut ChaCha8Rng,
}

impl Dropout<'_> {
    pub fn apply(&mut self, tape: &mut Tape, x: Var) -> Result<Var> {
        if self.p <= 0.0 {
            return Ok(x);
        }
        let keep = 1.0 - self.p;
        let shape = tape.shape(x).to_vec();
        let n = shape.iter().product();
        let mask = (0..n)
            .map(|_| {
                if self.rng.random::<f64>() < keep {
                    1.0 / keep
                } else {
                    0.0
                }
            })
            .collect();
        let m = tape.constant(Tensor::new(&shape, mask)?);
        tape.mul(x, m)
    }
}

pub fn maybe_dropout(tape: &mut Tape, x: Var, dropout: &mut Option<Dropout<'_>>) -> Result<Var> {
    match dropout {
        Some(d) => d.apply(tape, x),
        None => Ok(x),
    }
}
