//! Reusable parameterised layers on top of the tape.

use rand::Rng;

use crate::error::Result;
use crate::tensor::{multi_head_attention, AttentionOptions, AttentionParams, ParamId, ParamStore, Tape, Var};

/// `x W + b`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
}

impl Linear {
    pub fn register<R: Rng>(
        store: &mut ParamStore,
        prefix: &str,
        fan_in: usize,
        fan_out: usize,
        bias: bool,
        rng: &mut R,
    ) -> Result<Self> {
        let w = store.add_weight(&format!("{prefix}.w"), fan_in, fan_out, rng)?;
        let b = if bias {
            Some(store.add_zeros(&format!("{prefix}.b"), &[1, fan_out])?)
        } else {
            None
        };
        Ok(Self { w, b })
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let w = tape.param(store, self.w);
        let b = self.b.map(|b| tape.param(store, b));
        tape.linear(x, w, b)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn register(store: &mut ParamStore, prefix: &str, dim: usize) -> Result<Self> {
        Ok(Self {
            gamma: store.add_ones(&format!("{prefix}.gamma"), &[1, dim])?,
            beta: store.add_zeros(&format!("{prefix}.beta"), &[1, dim])?,
        })
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let (g, b) = (tape.param(store, self.gamma), tape.param(store, self.beta));
        tape.layer_norm(x, g, b)
    }
}

/// Pre-norm self-attention and GELU feed-forward block with residuals.
#[derive(Clone, Debug, PartialEq)]
pub struct TransformerBlock {
    pub ln1: LayerNorm,
    pub attn: AttentionParams,
    pub out: Linear,
    pub ln2: LayerNorm,
    pub ff1: Linear,
    pub ff2: Linear,
}

impl TransformerBlock {
    pub fn register<R: Rng>(
        store: &mut ParamStore,
        prefix: &str,
        dim: usize,
        heads: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            ln1: LayerNorm::register(store, &format!("{prefix}.ln1"), dim)?,
            attn: AttentionParams::register(store, &format!("{prefix}.attn"), dim, heads, rng)?,
            out: Linear::register(store, &format!("{prefix}.attn_out"), dim, dim, true, rng)?,
            ln2: LayerNorm::register(store, &format!("{prefix}.ln2"), dim)?,
            ff1: Linear::register(store, &format!("{prefix}.ff1"), dim, hidden, true, rng)?,
            ff2: Linear::register(store, &format!("{prefix}.ff2"), hidden, dim, true, rng)?,
        })
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var, causal: bool) -> Result<Var> {
        let h = self.ln1.forward(tape, store, x)?;
        let opts = AttentionOptions {
            causal,
            ..AttentionOptions::default()
        };
        let a = multi_head_attention(tape, store, h, h, &self.attn, &opts)?;
        let a = self.out.forward(tape, store, a)?;
        let x = tape.add(x, a)?;
        let h = self.ln2.forward(tape, store, x)?;
        let h = self.ff1.forward(tape, store, h)?;
        let h = tape.gelu(h);
        let h = self.ff2.forward(tape, store, h)?;
        tape.add(x, h)
    }
}
