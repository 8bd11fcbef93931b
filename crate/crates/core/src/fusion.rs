//! Two-token transformer fusing the pooled global and local features.
//!
//! Tokens carry no positional encoding and there is no class token; the head
//! reads the concatenation of both final tokens.

use rand::Rng;
use radformer_tensor::{Element, Init, ParamId, ParamStore, Tape, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{LayerNorm, Linear};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FusionConfig {
    pub depth: usize,
    pub heads: usize,
    pub model_dim: usize,
    pub mlp_hidden: usize,
    pub output_projection: bool,
    pub num_classes: usize,
}

impl FusionConfig {
    pub fn new(model_dim: usize) -> Self {
        FusionConfig { depth: 4, heads: 16, model_dim, mlp_hidden: 4 * model_dim, output_projection: true, num_classes: 3 }
    }

    pub fn head_dim(&self) -> usize {
        self.model_dim / self.heads
    }

    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 {
            return Err(Error::config("fusion depth must be at least 1"));
        }
        if self.heads == 0 || self.model_dim % self.heads != 0 {
            return Err(Error::config(format!(
                "model dim {} is not divisible by {} heads",
                self.model_dim, self.heads
            )));
        }
        if self.mlp_hidden == 0 || self.num_classes < 2 {
            return Err(Error::config("mlp_hidden must be positive and num_classes at least 2"));
        }
        Ok(())
    }
}

/// Per-head projection weights `[m, dh, dh]`, applied as `x · W[h]`.
#[derive(Clone, Debug)]
pub struct HeadProjections {
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
}

#[derive(Clone, Debug)]
pub struct TransformerLayer {
    pub attn: HeadProjections,
    pub out_proj: Option<Linear>,
    pub norm1: LayerNorm,
    pub mlp1: Linear,
    pub mlp2: Linear,
    pub norm2: LayerNorm,
}

#[derive(Clone, Debug)]
pub struct FusionTransformer {
    pub cfg: FusionConfig,
    pub layers: Vec<TransformerLayer>,
    pub head: Linear,
}

#[derive(Clone, Debug)]
pub struct FusionOutput {
    /// `[N, classes]`
    pub logits: Var,
    /// Final token sequence `[N, 2, d]` before the head.
    pub tokens: Var,
    /// Softmax scores per layer, `[m * N, n, n]` with head-major batch order.
    pub attention: Vec<Var>,
}

/// Scaled dot-product attention over `m` independent heads.
///
/// `x` is `[m, N, n, dh]` and each weight `[m, dh, dh]`. Returns the attended
/// values `[m, N, n, dh]` and the scores `[m * N, n, n]`.
pub fn head_attention<T: Element>(
    tape: &mut Tape<'_, T>,
    x: Var,
    wq: Var,
    wk: Var,
    wv: Var,
) -> Result<(Var, Var)> {
    let s = tape.shape(x).to_vec();
    if s.len() != 4 {
        return Err(Error::config(format!("head_attention expects [m, N, n, dh], got {s:?}")));
    }
    let (m, batch, n, dh) = (s[0], s[1], s[2], s[3]);
    let flat = tape.reshape(x, &[m, batch * n, dh])?;
    let mut project = |w: Var| -> Result<Var> {
        let p = tape.bmm(flat, w)?;
        Ok(tape.reshape(p, &[m * batch, n, dh])?)
    };
    let (q, k, v) = (project(wq)?, project(wk)?, project(wv)?);
    let kt = tape.transpose_last(k)?;
    let raw = tape.bmm(q, kt)?;
    let scaled = tape.scale(raw, T::from_f64_lossy(1.0 / (dh as f64).sqrt()));
    let scores = tape.softmax(scaled)?;
    let out = tape.bmm(scores, v)?;
    let out = tape.reshape(out, &[m, batch, n, dh])?;
    Ok((out, scores))
}

/// Single-head self-attention `softmax(Q Kᵀ / √dh) V` on `x: [n, dh]` with
/// `Q = x Wq`, `K = x Wk`, `V = x Wv` and weights `[dh, dh]`.
pub fn self_attention<T: Element>(tape: &mut Tape<'_, T>, x: Var, wq: Var, wk: Var, wv: Var) -> Result<(Var, Var)> {
    let s = tape.shape(x).to_vec();
    if s.len() != 2 {
        return Err(Error::config(format!("self_attention expects [n, dh], got {s:?}")));
    }
    let dh = s[1];
    let x4 = tape.reshape(x, &[1, 1, s[0], dh])?;
    let mut lift = |w: Var| tape.reshape(w, &[1, dh, dh]);
    let (q, k, v) = (lift(wq)?, lift(wk)?, lift(wv)?);
    let (out, scores) = head_attention(tape, x4, q, k, v)?;
    let out = tape.reshape(out, &[s[0], dh])?;
    let scores = tape.reshape(scores, &[s[0], s[0]])?;
    Ok((out, scores))
}

impl TransformerLayer {
    fn new<T: Element, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        cfg: &FusionConfig,
    ) -> Result<Self> {
        let (d, m, dh) = (cfg.model_dim, cfg.heads, cfg.head_dim());
        let mut proj = |p: &str| store.init_param(format!("{name}.attn.{p}"), &[m, dh, dh], Init::FanInUniform { fan_in: dh }, rng);
        let attn = HeadProjections { wq: proj("wq")?, wk: proj("wk")?, wv: proj("wv")? };
        let out_proj = if cfg.output_projection {
            Some(Linear::new(store, rng, &format!("{name}.attn.out"), d, d, true, Init::FanInUniform { fan_in: d })?)
        } else {
            None
        };
        let norm1 = LayerNorm::new(store, &format!("{name}.norm1"), d)?;
        let mlp1 = Linear::new(store, rng, &format!("{name}.mlp.fc1"), d, cfg.mlp_hidden, true, Init::FanInUniform {
            fan_in: d,
        })?;
        let mlp2 = Linear::new(store, rng, &format!("{name}.mlp.fc2"), cfg.mlp_hidden, d, true, Init::FanInUniform {
            fan_in: cfg.mlp_hidden,
        })?;
        let norm2 = LayerNorm::new(store, &format!("{name}.norm2"), d)?;
        Ok(TransformerLayer { attn, out_proj, norm1, mlp1, mlp2, norm2 })
    }

    /// Multi-head attention on `x: [N, n, d]`: split the feature axis into
    /// `m` slices, attend per slice, concatenate, then project.
    pub fn multi_head_attention<T: Element>(&self, tape: &mut Tape<'_, T>, x: Var, heads: usize) -> Result<(Var, Var)> {
        let s = tape.shape(x).to_vec();
        let (batch, n, d) = (s[0], s[1], s[2]);
        let dh = d / heads;
        let split = tape.reshape(x, &[batch, n, heads, dh])?;
        let per_head = tape.permute(split, &[2, 0, 1, 3])?;
        let (wq, wk, wv) = (tape.param(self.attn.wq), tape.param(self.attn.wk), tape.param(self.attn.wv));
        let (out, scores) = head_attention(tape, per_head, wq, wk, wv)?;
        let merged = tape.permute(out, &[1, 2, 0, 3])?;
        let mut y = tape.reshape(merged, &[batch, n, d])?;
        if let Some(p) = &self.out_proj {
            y = p.forward(tape, y)?;
        }
        Ok((y, scores))
    }

    pub fn forward<T: Element>(&self, tape: &mut Tape<'_, T>, x: Var, heads: usize) -> Result<(Var, Var)> {
        let (a, scores) = self.multi_head_attention(tape, x, heads)?;
        let r1 = tape.add(a, x)?;
        let f1 = self.norm1.forward(tape, r1)?;
        let h = self.mlp1.forward(tape, f1)?;
        let h = tape.relu(h);
        let h = self.mlp2.forward(tape, h)?;
        let r2 = tape.add(h, f1)?;
        Ok((self.norm2.forward(tape, r2)?, scores))
    }
}

impl FusionTransformer {
    pub fn new<T: Element, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        prefix: &str,
        cfg: FusionConfig,
    ) -> Result<Self> {
        cfg.validate()?;
        let layers = (0..cfg.depth)
            .map(|i| TransformerLayer::new(store, rng, &format!("{prefix}.layer{i}"), &cfg))
            .collect::<Result<Vec<_>>>()?;
        let d2 = 2 * cfg.model_dim;
        let head = Linear::new(store, rng, &format!("{prefix}.head"), d2, cfg.num_classes, true, Init::FanInUniform {
            fan_in: d2,
        })?;
        Ok(FusionTransformer { cfg, layers, head })
    }

    /// Stacks the two pooled tokens `[N, d]` into the sequence `[N, 2, d]`,
    /// global first.
    pub fn pool_and_concat<T: Element>(tape: &mut Tape<'_, T>, global: Var, local: Var) -> Result<Var> {
        let (gs, ls) = (tape.shape(global).to_vec(), tape.shape(local).to_vec());
        if gs.len() != 2 || gs != ls {
            return Err(Error::config(format!("token shapes differ: global {gs:?}, local {ls:?}")));
        }
        let g = tape.reshape(global, &[gs[0], 1, gs[1]])?;
        let l = tape.reshape(local, &[gs[0], 1, gs[1]])?;
        Ok(tape.concat(&[g, l], 1)?)
    }

    /// Runs every layer over `tokens: [N, 2, d]` and classifies.
    pub fn forward<T: Element>(&self, tape: &mut Tape<'_, T>, tokens: Var) -> Result<FusionOutput> {
        let s = tape.shape(tokens).to_vec();
        if s.len() != 3 || s[2] != self.cfg.model_dim {
            return Err(Error::config(format!("fusion expects [N, n, {}], got {s:?}", self.cfg.model_dim)));
        }
        let mut f = tokens;
        let mut attention = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let (next, scores) = layer.forward(tape, f, self.cfg.heads)?;
            attention.push(scores);
            f = next;
        }
        let flat = tape.reshape(f, &[s[0], s[1] * s[2]])?;
        let logits = self.head.forward(tape, flat)?;
        Ok(FusionOutput { logits, tokens: f, attention })
    }
}

/// One head's `n × n` score matrix for one sample.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionRecord {
    pub layer: usize,
    pub head: usize,
    pub scores: Vec<Vec<f64>>,
}

/// Unpacks per-layer score tensors `[m * N, n, n]` for sample `index`.
pub fn attention_records<T: Element>(scores: &[Tensor<T>], heads: usize, index: usize) -> Vec<AttentionRecord> {
    let mut out = Vec::new();
    for (layer, t) in scores.iter().enumerate() {
        let s = t.shape();
        let (batch, n) = (s[0] / heads, s[1]);
        for head in 0..heads {
            let base = (head * batch + index) * n * n;
            let rows = (0..n)
                .map(|i| (0..n).map(|j| t.data()[base + i * n + j].to_f64_lossy()).collect())
                .collect();
            out.push(AttentionRecord { layer, head, scores: rows });
        }
    }
    out
}
