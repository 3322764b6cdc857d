use rand::Rng;

use crate::error::{Error, Result};

use super::tape::AttentionSpec;
use super::{ParamId, ParamStore, Tape, Tensor, Var};

/// Shared query/key/value projections of a multi-head attention block.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionParams {
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub heads: usize,
    pub dim: usize,
}

impl AttentionParams {
    pub fn register<R: Rng>(
        store: &mut ParamStore,
        prefix: &str,
        dim: usize,
        heads: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Self::register_io(store, prefix, dim, dim, dim, heads, rng)
    }

    /// Query inputs of width `q_in`, key/value inputs of width `kv_in`,
    /// both projected to `dim`.
    pub fn register_io<R: Rng>(
        store: &mut ParamStore,
        prefix: &str,
        q_in: usize,
        kv_in: usize,
        dim: usize,
        heads: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(Error::InvalidArgument(format!(
                "{prefix}: width {dim} is not divisible by {heads} heads"
            )));
        }
        Ok(Self {
            wq: store.add_weight(&format!("{prefix}.w_q"), q_in, dim, rng)?,
            wk: store.add_weight(&format!("{prefix}.w_k"), kv_in, dim, rng)?,
            wv: store.add_weight(&format!("{prefix}.w_v"), kv_in, dim, rng)?,
            heads,
            dim,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttentionOptions {
    /// Rows of query and key/value are split into this many independent blocks.
    pub groups: usize,
    pub causal: bool,
    /// One entry per key row; `false` excludes the key.
    pub key_mask: Option<Vec<bool>>,
}

impl Default for AttentionOptions {
    fn default() -> Self {
        Self {
            groups: 1,
            causal: false,
            key_mask: None,
        }
    }
}

/// Projects `query` and `kv` with the block's weights, then runs per-head
/// scaled dot-product attention.
pub fn multi_head_attention(
    tape: &mut Tape,
    store: &ParamStore,
    query: Var,
    kv: Var,
    p: &AttentionParams,
    opts: &AttentionOptions,
) -> Result<Var> {
    if p.heads == 0 || p.dim % p.heads != 0 {
        return Err(Error::InvalidArgument(format!(
            "width {} is not divisible by {} heads",
            p.dim, p.heads
        )));
    }
    let (wq, wk, wv) = (
        tape.param(store, p.wq),
        tape.param(store, p.wk),
        tape.param(store, p.wv),
    );
    let q = tape.matmul(query, wq)?;
    let k = tape.matmul(kv, wk)?;
    let v = tape.matmul(kv, wv)?;
    tape.attention(
        q,
        k,
        v,
        AttentionSpec {
            heads: p.heads,
            groups: opts.groups,
            causal: opts.causal,
            key_mask: opts.key_mask.clone(),
        },
    )
}

pub fn multi_head_cross_attention(
    tape: &mut Tape,
    store: &ParamStore,
    query: Var,
    kv: Var,
    p: &AttentionParams,
) -> Result<Var> {
    multi_head_attention(tape, store, query, kv, p, &AttentionOptions::default())
}

/// Unfused attention over projected `q`, `k`, `v` built only from primitive
/// tape ops. Used to cross-check the fused kernel.
pub fn attention_reference(
    tape: &mut Tape,
    q: Var,
    k: Var,
    v: Var,
    heads: usize,
    causal: bool,
) -> Result<Var> {
    let (nq, d) = tape.dims(q);
    let nk = tape.dims(k).0;
    if heads == 0 || d % heads != 0 {
        return Err(Error::InvalidArgument(format!("width {d} with {heads} heads")));
    }
    let dh = d / heads;
    let bias = causal.then(|| {
        let data = (0..nq * nk)
            .map(|i| if i % nk > i / nk { -1e300 } else { 0.0 })
            .collect();
        tape.constant(Tensor {
            shape: vec![nq, nk],
            data,
        })
    });
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = tape.slice_cols(q, h * dh, dh)?;
        let kh = tape.slice_cols(k, h * dh, dh)?;
        let vh = tape.slice_cols(v, h * dh, dh)?;
        let kt = tape.transpose(kh);
        let s = tape.matmul(qh, kt)?;
        let mut s = tape.scale(s, 1.0 / (dh as f64).sqrt());
        if let Some(b) = bias {
            s = tape.add(s, b)?;
        }
        let a = tape.softmax(s);
        outs.push(tape.matmul(a, vh)?);
    }
    tape.concat_cols(&outs)
}
