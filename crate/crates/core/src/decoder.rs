//! Masked-attention transformer decoder.
//!
//! Evolves N learnable object queries against the per-pixel embeddings,
//! coarse to fine (gamma_4, gamma_3, gamma_2), one stage per level. Each
//! stage predicts a binary attention mask from the entering query state
//! (binarization is excluded from the gradient path), restricts the
//! cross-attention to the unmasked locations, then applies query
//! self-attention and a feed-forward sublayer, all post-norm.

use std::rc::Rc;

use serde::{Deserialize, Serialize};

use crate::clcrp::positional_encoding_rows;
use crate::encoder::map_to_tokens;
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::nn::{LayerNorm, Linear, Mlp, Mlp3};
use crate::params::{ParamId, ParamStore};
use crate::rng::SeededRng;

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct DecoderConfig {
    pub stages: usize,
    pub heads: usize,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        DecoderConfig { stages: 3, heads: 8 }
    }
}

/// Binary attention mask for one stage plus its additive form.
pub struct AttentionMask {
    /// Row-major `[N, HW]`, true where the query may attend.
    pub binary: Vec<bool>,
    /// 0 where attendable, -inf elsewhere; fully masked rows fall back
    /// to an all-zero row (full attention).
    pub additive: Vec<f64>,
    pub fallback_rows: Vec<usize>,
}

/// Build the additive mask from mask logits, applying the fallback rule.
pub fn attention_mask_from_logits(logits: &[f64], n: usize, hw: usize) -> AttentionMask {
    let mut binary = vec![false; n * hw];
    let mut additive = vec![0.0; n * hw];
    let mut fallback_rows = Vec::new();
    for q in 0..n {
        let row = &logits[q * hw..(q + 1) * hw];
        let mut any = false;
        for (p, &l) in row.iter().enumerate() {
            // sigmoid(l) > 0.5 is exactly l > 0; the boundary itself is
            // masked out.
            if l > 0.0 {
                binary[q * hw + p] = true;
                any = true;
            }
        }
        if any {
            for p in 0..hw {
                if !binary[q * hw + p] {
                    additive[q * hw + p] = f64::NEG_INFINITY;
                }
            }
        } else {
            fallback_rows.push(q);
        }
    }
    AttentionMask {
        binary,
        additive,
        fallback_rows,
    }
}

struct HeadLayout {
    heads: usize,
    /// [heads*rows] gather from a [rows*heads, dh] view.
    split: Rc<Vec<usize>>,
    /// [rows*heads] gather back.
    merge: Rc<Vec<usize>>,
}

fn head_layout(rows: usize, heads: usize) -> HeadLayout {
    let mut split = Vec::with_capacity(heads * rows);
    for hd in 0..heads {
        for r in 0..rows {
            split.push(r * heads + hd);
        }
    }
    let mut merge = Vec::with_capacity(rows * heads);
    for r in 0..rows {
        for hd in 0..heads {
            merge.push(hd * rows + r);
        }
    }
    HeadLayout {
        heads,
        split: Rc::new(split),
        merge: Rc::new(merge),
    }
}

/// Split `[rows, d]` into `[heads, rows, dh]`.
fn to_heads(g: &mut Graph, x: Var, lay: &HeadLayout) -> Result<Var> {
    let (rows, d) = (g.shape(x)[0], g.shape(x)[1]);
    let dh = d / lay.heads;
    let x = g.reshape(x, vec![rows * lay.heads, dh])?;
    let x = g.gather_rows(x, lay.split.clone())?;
    g.reshape(x, vec![lay.heads, rows, dh])
}

/// Merge `[heads, rows, dh]` back to `[rows, d]`.
fn from_heads(g: &mut Graph, x: Var, lay: &HeadLayout) -> Result<Var> {
    let s = g.shape(x).to_vec();
    let (heads, rows, dh) = (s[0], s[1], s[2]);
    let x = g.reshape(x, vec![heads * rows, dh])?;
    let x = g.gather_rows(x, lay.merge.clone())?;
    g.reshape(x, vec![rows, heads * dh])
}

struct DecoderStage {
    q_proj: Linear,
    k_proj: Linear,
    v_proj: Linear,
    attn_out: Linear,
    norm1: LayerNorm,
    self_q: Linear,
    self_k: Linear,
    self_v: Linear,
    self_out: Linear,
    norm2: LayerNorm,
    ffn: Mlp,
    norm3: LayerNorm,
}

impl DecoderStage {
    fn new(store: &mut ParamStore, rng: &mut SeededRng, name: &str, dim: usize) -> Self {
        DecoderStage {
            q_proj: Linear::new(store, rng, &format!("{name}.cross.q"), dim, dim),
            k_proj: Linear::new(store, rng, &format!("{name}.cross.k"), dim, dim),
            v_proj: Linear::new(store, rng, &format!("{name}.cross.v"), dim, dim),
            attn_out: Linear::new(store, rng, &format!("{name}.cross.out"), dim, dim),
            norm1: LayerNorm::new(store, &format!("{name}.norm1"), dim),
            self_q: Linear::new(store, rng, &format!("{name}.self.q"), dim, dim),
            self_k: Linear::new(store, rng, &format!("{name}.self.k"), dim, dim),
            self_v: Linear::new(store, rng, &format!("{name}.self.v"), dim, dim),
            self_out: Linear::new(store, rng, &format!("{name}.self.out"), dim, dim),
            norm2: LayerNorm::new(store, &format!("{name}.norm2"), dim),
            ffn: Mlp::new(store, rng, &format!("{name}.ffn"), dim, 4 * dim),
            norm3: LayerNorm::new(store, &format!("{name}.norm3"), dim),
        }
    }

    /// Masked cross-attention: Norm(softmax(M + QK^T)V + X). Keys carry
    /// positional encodings; values do not.
    fn masked_attention(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        x: Var,
        gamma_flat: Var,
        pe: Var,
        additive_mask: &[f64],
        heads: usize,
    ) -> Result<Var> {
        let n = g.shape(x)[0];
        let hw = g.shape(gamma_flat)[0];
        if additive_mask.len() != n * hw {
            return Err(Error::dims("attention mask", &[n, hw], &[additive_mask.len()]));
        }
        let q = self.q_proj.apply(g, store, x)?;
        let k_in = g.add(gamma_flat, pe)?;
        let k = self.k_proj.apply(g, store, k_in)?;
        let v = self.v_proj.apply(g, store, gamma_flat)?;

        let q_lay = head_layout(n, heads);
        let kv_lay = head_layout(hw, heads);
        let qh = to_heads(g, q, &q_lay)?;
        let kh = to_heads(g, k, &kv_lay)?;
        let vh = to_heads(g, v, &kv_lay)?;

        let attn = g.bmm(qh, kh, true)?; // [heads, N, HW]
        let attn2 = g.reshape(attn, vec![heads * n, hw])?;
        let mut tiled = Vec::with_capacity(heads * n * hw);
        for _ in 0..heads {
            tiled.extend_from_slice(additive_mask);
        }
        let mask = g.constant_from(vec![heads * n, hw], tiled);
        let attn2 = g.add(attn2, mask)?;
        let attn = g.reshape(attn2, vec![heads, n, hw])?;
        let (attn, degenerate) = g.softmax_lastdim(attn);
        if !degenerate.is_empty() {
            return Err(Error::Numeric(
                "masked attention hit a fully masked row; fallback should have caught it".into(),
            ));
        }
        let out = g.bmm(attn, vh, false)?;
        let out = from_heads(g, out, &q_lay)?;
        let out = self.attn_out.apply(g, store, out)?;
        let res = g.add(x, out)?;
        self.norm1.apply(g, store, res)
    }

    /// Query self-attention: Norm(softmax(QK^T/sqrt(dh))V + X).
    fn self_attention(&self, g: &mut Graph, store: &ParamStore, x: Var, heads: usize) -> Result<Var> {
        let n = g.shape(x)[0];
        let d = g.shape(x)[1];
        let dh = d / heads;
        let q = self.self_q.apply(g, store, x)?;
        let q = g.scale(q, 1.0 / (dh as f64).sqrt());
        let k = self.self_k.apply(g, store, x)?;
        let v = self.self_v.apply(g, store, x)?;
        let lay = head_layout(n, heads);
        let qh = to_heads(g, q, &lay)?;
        let kh = to_heads(g, k, &lay)?;
        let vh = to_heads(g, v, &lay)?;
        let attn = g.bmm(qh, kh, true)?;
        let (attn, degenerate) = g.softmax_lastdim(attn);
        debug_assert!(degenerate.is_empty());
        let out = g.bmm(attn, vh, false)?;
        let out = from_heads(g, out, &lay)?;
        let out = self.self_out.apply(g, store, out)?;
        let res = g.add(x, out)?;
        self.norm2.apply(g, store, res)
    }

    fn feed_forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let h = self.ffn.apply(g, store, x)?;
        let res = g.add(x, h)?;
        self.norm3.apply(g, store, res)
    }
}

pub struct DecoderOutputs {
    /// Query state after each stage; the last entry is the final
    /// per-segment embedding.
    pub stage_states: Vec<Var>,
}

impl DecoderOutputs {
    pub fn final_state(&self) -> Var {
        *self.stage_states.last().unwrap()
    }
}

pub struct Decoder {
    pub query_embed: ParamId,
    stages: Vec<DecoderStage>,
    pe_rows: Vec<Rc<Vec<f64>>>,
    level_hw: Vec<(usize, usize)>,
    pub n_queries: usize,
    pub dim: usize,
    heads: usize,
    pub disable_masked_attention: bool,
}

impl Decoder {
    /// `gamma_shapes`: the `[d, H_l, W_l]` shapes of the per-pixel
    /// embedding levels, finest first (as produced by the perceiver).
    pub fn new(
        store: &mut ParamStore,
        rng: &mut SeededRng,
        cfg: &DecoderConfig,
        n_queries: usize,
        dim: usize,
        gamma_shapes: &[(usize, usize, usize)],
        disable_masked_attention: bool,
    ) -> Result<Self> {
        if cfg.stages == 0 || cfg.stages > gamma_shapes.len() - 1 {
            return Err(Error::Config(format!(
                "decoder stages {} must be between 1 and {}",
                cfg.stages,
                gamma_shapes.len() - 1
            )));
        }
        if dim % cfg.heads != 0 {
            return Err(Error::Config(format!(
                "decoder dim {dim} not divisible by {} heads",
                cfg.heads
            )));
        }
        if n_queries == 0 {
            return Err(Error::Config("decoder needs at least one query".into()));
        }
        let query_embed = store.register_normal(
            "dec.query_embed",
            vec![n_queries, dim],
            crate::nn::INIT_STD,
            rng,
        );
        let mut stages = Vec::new();
        let mut pe_rows = Vec::new();
        let mut level_hw = Vec::new();
        for s in 0..cfg.stages {
            stages.push(DecoderStage::new(store, rng, &format!("dec.stage{s}"), dim));
            // stage s attends to level (coarsest - s): gamma_4, gamma_3, gamma_2
            let (_, h, w) = gamma_shapes[gamma_shapes.len() - 1 - s];
            pe_rows.push(Rc::new(positional_encoding_rows(h, w, dim)?));
            level_hw.push((h, w));
        }
        Ok(Decoder {
            query_embed,
            stages,
            pe_rows,
            level_hw,
            n_queries,
            dim,
            heads: cfg.heads,
            disable_masked_attention,
        })
    }

    /// Level index (into the gamma list) used by stage `s`.
    pub fn stage_level(&self, s: usize, n_levels: usize) -> usize {
        n_levels - 1 - s
    }

    /// Predict the stage attention mask from a query state, outside the
    /// gradient path: M(q,p) = [sigmoid(<MLP(x_q), gamma_l(p)>) > 0.5].
    pub fn predict_attention_mask(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        mask_mlp: &Mlp3,
        x: Var,
        gamma_flat: Var,
    ) -> Result<AttentionMask> {
        let n = g.shape(x)[0];
        let hw = g.shape(gamma_flat)[0];
        let mark = g.len();
        let emb = mask_mlp.apply(g, store, x)?;
        let gt = g.transpose(gamma_flat)?;
        let logits = g.matmul(emb, gt)?;
        let logits_data = g.data(logits).to_vec();
        g.truncate(mark);
        Ok(attention_mask_from_logits(&logits_data, n, hw))
    }

    /// Run all stages; `gamma` is the per-pixel embedding pyramid
    /// (finest first) and `mask_mlp` the shared mask-embedding MLP.
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        gamma: &[Var],
        mask_mlp: &Mlp3,
    ) -> Result<DecoderOutputs> {
        let mut x = g.param(store, self.query_embed);
        let n = self.n_queries;
        let mut stage_states = Vec::new();
        for (s, stage) in self.stages.iter().enumerate() {
            let level = gamma[self.stage_level(s, gamma.len())];
            let gamma_flat = map_to_tokens(g, level)?;
            let (h, w) = self.level_hw[s];
            let hw = h * w;
            let mask = if self.disable_masked_attention {
                vec![0.0; n * hw]
            } else {
                self.predict_attention_mask(g, store, mask_mlp, x, gamma_flat)?
                    .additive
            };
            let pe = g.constant_from(vec![hw, self.dim], self.pe_rows[s].as_ref().clone());
            x = stage.masked_attention(g, store, x, gamma_flat, pe, &mask, self.heads)?;
            x = stage.self_attention(g, store, x, self.heads)?;
            x = stage.feed_forward(g, store, x)?;
            stage_states.push(x);
        }
        Ok(DecoderOutputs { stage_states })
    }

    /// One stage's masked attention with an explicit mask; used by tests
    /// and the degeneracy checks.
    #[doc(hidden)]
    pub fn stage_masked_attention(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        s: usize,
        x: Var,
        gamma_flat: Var,
        additive_mask: &[f64],
    ) -> Result<Var> {
        let hw = g.shape(gamma_flat)[0];
        let pe = g.constant_from(vec![hw, self.dim], self.pe_rows[s].as_ref().clone());
        self.stages[s].masked_attention(g, store, x, gamma_flat, pe, additive_mask, self.heads)
    }

    pub fn heads(&self) -> usize {
        self.heads
    }
}
