use rand::Rng;

use super::init::xavier_uniform;
use super::{Forward, ParamId, ParamStore};
use crate::error::{Error, Result};
use crate::tape::{Tape, Var};

/// Per-head projections `W_i^Q, W_i^K, W_i^V [d_model×d_k]` and the output
/// projection `W^O [h·d_k × d_model]`.
#[derive(Clone, Debug)]
pub struct AttentionHeadSet {
    pub wq: Vec<ParamId>,
    pub wk: Vec<ParamId>,
    pub wv: Vec<ParamId>,
    pub wo: ParamId,
    pub heads: usize,
    pub d_k: usize,
    pub d_model: usize,
}

impl AttentionHeadSet {
    pub fn new(store: &mut ParamStore, name: &str, d_model: usize, heads: usize, rng: &mut impl Rng) -> Result<Self> {
        if heads == 0 || d_model == 0 || !d_model.is_multiple_of(heads) {
            return Err(Error::Config(format!(
                "attention heads ({heads}) must divide d_model ({d_model})"
            )));
        }
        let d_k = d_model / heads;
        let mut proj = |kind: &str, i: usize, rng: &mut _| {
            store.add(
                format!("{name}.head{i}.{kind}"),
                xavier_uniform(&[d_model, d_k], d_model, d_k, rng),
                true,
            )
        };
        let (mut wq, mut wk, mut wv) = (Vec::new(), Vec::new(), Vec::new());
        for i in 0..heads {
            wq.push(proj("wq", i, rng));
            wk.push(proj("wk", i, rng));
            wv.push(proj("wv", i, rng));
        }
        let wo = store.add(
            format!("{name}.wo"),
            xavier_uniform(&[heads * d_k, d_model], heads * d_k, d_model, rng),
            true,
        );
        Ok(Self {
            wq,
            wk,
            wv,
            wo,
            heads,
            d_k,
            d_model,
        })
    }
}

/// `softmax(Q·Kᵀ/√d_k)·V` for `[L×d_k]` or batched `[B×L×d_k]` operands. No mask.
pub fn scaled_dot_product_attention(tape: &mut Tape, q: Var, k: Var, v: Var) -> Result<Var> {
    let sq = tape.shape(q).to_vec();
    if sq != tape.shape(k) || sq != tape.shape(v) || !(sq.len() == 2 || sq.len() == 3) {
        return Err(Error::dim("scaled_dot_product_attention", &sq, tape.shape(k)));
    }
    let d_k = *sq.last().unwrap();
    if d_k == 0 {
        return Err(Error::Config("attention key dimension d_k must be ≥ 1".into()));
    }
    let batched = sq.len() == 3;
    let (q, k, v) = if batched {
        (q, k, v)
    } else {
        let s3 = [1, sq[0], sq[1]];
        (tape.reshape(q, &s3)?, tape.reshape(k, &s3)?, tape.reshape(v, &s3)?)
    };
    let scores = tape.bmm(q, k, true)?;
    let scores = tape.scale(scores, 1.0 / (d_k as f64).sqrt())?;
    let weights = tape.softmax(scores, 2)?;
    let out = tape.bmm(weights, v, false)?;
    if batched {
        Ok(out)
    } else {
        tape.reshape(out, &sq)
    }
}

/// Self-attention `Concat(head_1..head_h)·W^O` with `head_i = Attention(xW_i^Q, xW_i^K, xW_i^V)`.
///
/// Accepts `[L×d_model]` or `[B×L×d_model]`.
pub fn multi_head_attention(f: &mut Forward, x: Var, heads: &AttentionHeadSet) -> Result<Var> {
    let shape = f.tape.shape(x).to_vec();
    let (b, l, d) = match shape.as_slice() {
        [l, d] => (1, *l, *d),
        [b, l, d] => (*b, *l, *d),
        _ => return Err(Error::dim("multi_head_attention", &shape, &[heads.d_model])),
    };
    if d != heads.d_model || heads.heads * heads.d_k != heads.d_model {
        return Err(Error::dim("multi_head_attention", &shape, &[heads.heads, heads.d_k]));
    }
    let flat = f.tape.reshape(x, &[b * l, d])?;
    let mut outs = Vec::with_capacity(heads.heads);
    for i in 0..heads.heads {
        let project = |f: &mut Forward, id: ParamId| -> Result<Var> {
            let w = f.param(id);
            let p = f.tape.matmul(flat, w)?;
            f.tape.reshape(p, &[b, l, heads.d_k])
        };
        let q = project(f, heads.wq[i])?;
        let k = project(f, heads.wk[i])?;
        let v = project(f, heads.wv[i])?;
        outs.push(scaled_dot_product_attention(&mut f.tape, q, k, v)?);
    }
    let cat = if outs.len() == 1 { outs[0] } else { f.tape.concat_last(&outs)? };
    let cat = f.tape.reshape(cat, &[b * l, heads.heads * heads.d_k])?;
    let wo = f.param(heads.wo);
    let y = f.tape.matmul(cat, wo)?;
    f.tape.reshape(y, &shape)
}
