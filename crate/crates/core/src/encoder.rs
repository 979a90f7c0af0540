//! Siamese hierarchical window-attention encoder.
//!
//! Both temporal branches share one set of parameters. Each stage is a
//! pair (or pairs) of pre-norm transformer blocks using regular and
//! shifted window partitioning, followed by 2x2 patch merging into the
//! next stage. The per-level outputs of the two branches are concatenated
//! channel-wise into the bitemporal features delta_l.

use std::rc::Rc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::nn::{LayerNorm, Linear, Mlp};
use crate::params::{ParamId, ParamStore};
use crate::rng::SeededRng;

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct EncoderConfig {
    /// Patch size of the embedding stem.
    pub patch_size: usize,
    /// Channels of the first stage; stage l has `embed_dim * 2^(l-1)`.
    pub embed_dim: usize,
    /// Blocks per stage; must be even (blocks come in W/SW pairs).
    pub depths: Vec<usize>,
    /// Attention heads per stage.
    pub num_heads: Vec<usize>,
    pub window_size: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            patch_size: 4,
            embed_dim: 32,
            depths: vec![2, 2, 2, 2],
            num_heads: vec![2, 4, 8, 16],
            window_size: 4,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.depths.is_empty() || self.depths.len() != self.num_heads.len() {
            return Err(Error::Config(format!(
                "encoder depths ({}) and heads ({}) must be non-empty and equal length",
                self.depths.len(),
                self.num_heads.len()
            )));
        }
        for (l, &d) in self.depths.iter().enumerate() {
            if d == 0 || d % 2 != 0 {
                return Err(Error::Config(format!(
                    "encoder stage {l} depth {d} must be even: blocks pair regular and shifted window attention"
                )));
            }
            let dim = self.embed_dim << l;
            if dim % self.num_heads[l] != 0 {
                return Err(Error::Config(format!(
                    "encoder stage {l} dim {dim} not divisible by {} heads",
                    self.num_heads[l]
                )));
            }
        }
        Ok(())
    }

    pub fn num_stages(&self) -> usize {
        self.depths.len()
    }

    /// (channels, height, width) of each level for the given input size.
    pub fn level_shapes(&self, h: usize, w: usize) -> Vec<(usize, usize, usize)> {
        (0..self.num_stages())
            .map(|l| {
                (
                    self.embed_dim << l,
                    (h / self.patch_size) >> l,
                    (w / self.patch_size) >> l,
                )
            })
            .collect()
    }

    /// The input extent must divide cleanly through the patch stem and
    /// every 2x2 merge.
    pub fn required_divisor(&self) -> usize {
        self.patch_size << (self.num_stages() - 1)
    }
}

/// Precomputed index maps for one block's window arrangement. The cyclic
/// shift, window partition and head split are folded into single row
/// gathers.
struct BlockLayout {
    m: usize,
    nw: usize,
    heads: usize,
    /// [nW*heads*M^2] rows into q/k/v viewed as [T*heads, dh].
    split_idx: Rc<Vec<usize>>,
    /// [T*heads] rows back out of [nW*heads*M^2, dh].
    merge_idx: Rc<Vec<usize>>,
    /// [M^4] rows into the relative-position bias table.
    bias_gather_idx: Rc<Vec<usize>>,
    /// [nW*heads*M^2] rows into the per-head bias matrix [heads*M^2, M^2].
    bias_tile_idx: Rc<Vec<usize>>,
    /// Additive 0 / -inf mask, [nW*heads*M^2 * M^2]; only for shifted blocks.
    attn_mask: Option<Rc<Vec<f64>>>,
}

impl BlockLayout {
    fn build(h: usize, w: usize, window: usize, heads: usize, shifted: bool) -> Self {
        let m = window.min(h).min(w);
        // Shifting is meaningful only when there is more than one window.
        let s = if shifted && (h > m || w > m) { m / 2 } else { 0 };
        let (gh, gw) = (h / m, w / m);
        let nw = gh * gw;
        let m2 = m * m;

        // Post-shift raster index of window w, slot i.
        let ts = |wi: usize, i: usize| -> (usize, usize) {
            let (wy, wx) = (wi / gw, wi % gw);
            let (iy, ix) = (i / m, i % m);
            (wy * m + iy, wx * m + ix)
        };

        let mut split_idx = Vec::with_capacity(nw * heads * m2);
        for wi in 0..nw {
            for hd in 0..heads {
                for i in 0..m2 {
                    let (yp, xp) = ts(wi, i);
                    let (yo, xo) = ((yp + s) % h, (xp + s) % w);
                    split_idx.push((yo * w + xo) * heads + hd);
                }
            }
        }

        let mut merge_idx = Vec::with_capacity(h * w * heads);
        for t in 0..h * w {
            let (yo, xo) = (t / w, t % w);
            let (yp, xp) = ((yo + h - s) % h, (xo + w - s) % w);
            let (wi, i) = ((yp / m) * gw + xp / m, (yp % m) * m + xp % m);
            for hd in 0..heads {
                merge_idx.push((wi * heads + hd) * m2 + i);
            }
        }

        let mut bias_gather_idx = Vec::with_capacity(m2 * m2);
        for i in 0..m2 {
            for j in 0..m2 {
                let (iy, ix) = (i / m, i % m);
                let (jy, jx) = (j / m, j % m);
                bias_gather_idx.push((iy + m - 1 - jy) * (2 * m - 1) + (ix + m - 1 - jx));
            }
        }

        let mut bias_tile_idx = Vec::with_capacity(nw * heads * m2);
        for _wi in 0..nw {
            for hd in 0..heads {
                for i in 0..m2 {
                    bias_tile_idx.push(hd * m2 + i);
                }
            }
        }

        let attn_mask = if s > 0 {
            // Region ids on the unshifted grid; tokens in the same window
            // may attend only within their region, which separates spans
            // wrapped together by the cyclic shift.
            let region = |y: usize, x: usize| -> usize {
                let r = |v: usize, n: usize| {
                    if v < n - m {
                        0
                    } else if v < n - s {
                        1
                    } else {
                        2
                    }
                };
                r(y, h) * 3 + r(x, w)
            };
            let mut mask = vec![0.0; nw * heads * m2 * m2];
            for wi in 0..nw {
                for i in 0..m2 {
                    let (yi, xi) = ts(wi, i);
                    for j in 0..m2 {
                        let (yj, xj) = ts(wi, j);
                        if region(yi, xi) != region(yj, xj) {
                            for hd in 0..heads {
                                mask[((wi * heads + hd) * m2 + i) * m2 + j] = f64::NEG_INFINITY;
                            }
                        }
                    }
                }
            }
            Some(Rc::new(mask))
        } else {
            None
        };

        BlockLayout {
            m,
            nw,
            heads,
            split_idx: Rc::new(split_idx),
            merge_idx: Rc::new(merge_idx),
            bias_gather_idx: Rc::new(bias_gather_idx),
            bias_tile_idx: Rc::new(bias_tile_idx),
            attn_mask,
        }
    }
}

/// Multi-head attention within (possibly shifted) windows:
/// softmax(QK^T/sqrt(d) + B [+ shift mask]) V, heads concatenated and
/// output-projected.
struct WindowAttention {
    qkv: Linear,
    proj: Linear,
    bias_table: ParamId,
    dim: usize,
    layout: Rc<BlockLayout>,
}

impl WindowAttention {
    fn new(
        store: &mut ParamStore,
        rng: &mut SeededRng,
        name: &str,
        dim: usize,
        layout: Rc<BlockLayout>,
    ) -> Self {
        let m = layout.m;
        WindowAttention {
            qkv: Linear::new(store, rng, &format!("{name}.qkv"), dim, 3 * dim),
            proj: Linear::new(store, rng, &format!("{name}.proj"), dim, dim),
            bias_table: store.register_normal(
                &format!("{name}.rel_bias"),
                vec![(2 * m - 1) * (2 * m - 1), layout.heads],
                crate::nn::INIT_STD,
                rng,
            ),
            dim,
            layout,
        }
    }

    fn apply(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let lay = &self.layout;
        let (t, c) = (g.shape(x)[0], self.dim);
        let (heads, m2, nw) = (lay.heads, lay.m * lay.m, lay.nw);
        let dh = c / heads;

        let qkv = self.qkv.apply(g, store, x)?;
        let q = g.slice_cols(qkv, 0, c)?;
        let k = g.slice_cols(qkv, c, c)?;
        let v = g.slice_cols(qkv, 2 * c, c)?;
        let q = g.scale(q, 1.0 / (dh as f64).sqrt());

        let windows = |g: &mut Graph, y: Var| -> Result<Var> {
            let y = g.reshape(y, vec![t * heads, dh])?;
            let y = g.gather_rows(y, lay.split_idx.clone())?;
            g.reshape(y, vec![nw * heads, m2, dh])
        };
        let qw = windows(g, q)?;
        let kw = windows(g, k)?;
        let vw = windows(g, v)?;

        let mut attn = g.bmm(qw, kw, true)?;

        let table = g.param(store, self.bias_table);
        let b = g.gather_rows(table, lay.bias_gather_idx.clone())?; // [M^4, heads]
        let b = g.transpose(b)?; // [heads, M^4]
        let b = g.reshape(b, vec![heads * m2, m2])?;
        let b = g.gather_rows(b, lay.bias_tile_idx.clone())?; // [nW*heads*M^2, M^2]
        let attn2 = g.reshape(attn, vec![nw * heads * m2, m2])?;
        let mut attn2 = g.add(attn2, b)?;
        if let Some(mask) = &lay.attn_mask {
            let mv = g.constant_from(vec![nw * heads * m2, m2], mask.as_ref().clone());
            attn2 = g.add(attn2, mv)?;
        }
        attn = g.reshape(attn2, vec![nw * heads, m2, m2])?;

        let (attn, degenerate) = g.softmax_lastdim(attn);
        if !degenerate.is_empty() {
            return Err(Error::Numeric(
                "window attention produced a fully masked row".into(),
            ));
        }

        let out = g.bmm(attn, vw, false)?; // [nW*heads, M^2, dh]
        let out = g.reshape(out, vec![nw * heads * m2, dh])?;
        let out = g.gather_rows(out, lay.merge_idx.clone())?; // [T*heads, dh]
        let out = g.reshape(out, vec![t, c])?;
        self.proj.apply(g, store, out)
    }
}

struct SwinBlock {
    norm1: LayerNorm,
    attn: WindowAttention,
    norm2: LayerNorm,
    mlp: Mlp,
}

impl SwinBlock {
    fn apply(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let h = self.norm1.apply(g, store, x)?;
        let h = self.attn.apply(g, store, h)?;
        let x = g.add(x, h)?;
        let h = self.norm2.apply(g, store, x)?;
        let h = self.mlp.apply(g, store, h)?;
        g.add(x, h)
    }
}

struct Stage {
    blocks: Vec<SwinBlock>,
    /// 2x2 neighborhood concatenation followed by linear reduction to 2C.
    merge: Option<(Linear, [Rc<Vec<usize>>; 4])>,
}

/// Per-level token features of one branch, `[H_l*W_l, C_l]` each.
pub struct LevelTokens {
    pub tokens: Vec<Var>,
}

/// The four-level features of both branches plus their channel-wise
/// concatenations, all as `[C, H, W]` maps.
pub struct BitemporalFeatures {
    pub f_t1: Vec<Var>,
    pub f_t2: Vec<Var>,
    pub delta: Vec<Var>,
}

pub struct Encoder {
    pub cfg: EncoderConfig,
    input_hw: (usize, usize),
    patch_embed: Linear,
    stages: Vec<Stage>,
}

impl Encoder {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut SeededRng,
        cfg: &EncoderConfig,
        input_hw: (usize, usize),
    ) -> Result<Self> {
        cfg.validate()?;
        let (h, w) = input_hw;
        let div = cfg.required_divisor();
        if h % div != 0 || w % div != 0 {
            return Err(Error::Input(format!(
                "encoder input {h}x{w} must be divisible by {div}; tile or pad the input"
            )));
        }
        let p = cfg.patch_size;
        let patch_embed = Linear::new(
            store,
            rng,
            "enc.patch_embed",
            3 * p * p,
            cfg.embed_dim,
        );

        let mut stages = Vec::new();
        let (mut lh, mut lw) = (h / p, w / p);
        for l in 0..cfg.num_stages() {
            let dim = cfg.embed_dim << l;
            let heads = cfg.num_heads[l];
            let regular = Rc::new(BlockLayout::build(lh, lw, cfg.window_size, heads, false));
            let shifted = Rc::new(BlockLayout::build(lh, lw, cfg.window_size, heads, true));
            let mut blocks = Vec::new();
            for b in 0..cfg.depths[l] {
                let name = format!("enc.stage{l}.block{b}");
                let layout = if b % 2 == 0 {
                    regular.clone()
                } else {
                    shifted.clone()
                };
                blocks.push(SwinBlock {
                    norm1: LayerNorm::new(store, &format!("{name}.norm1"), dim),
                    attn: WindowAttention::new(store, rng, &format!("{name}.attn"), dim, layout),
                    norm2: LayerNorm::new(store, &format!("{name}.norm2"), dim),
                    mlp: Mlp::new(store, rng, &format!("{name}.mlp"), dim, 4 * dim),
                });
            }
            let merge = if l + 1 < cfg.num_stages() {
                let red = Linear::new(
                    store,
                    rng,
                    &format!("enc.stage{l}.merge"),
                    4 * dim,
                    2 * dim,
                );
                let mut gathers: Vec<Rc<Vec<usize>>> = Vec::new();
                for (dy, dx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                    let mut idx = Vec::with_capacity(lh * lw / 4);
                    for y2 in 0..lh / 2 {
                        for x2 in 0..lw / 2 {
                            idx.push((2 * y2 + dy) * lw + 2 * x2 + dx);
                        }
                    }
                    gathers.push(Rc::new(idx));
                }
                let gathers: [Rc<Vec<usize>>; 4] = [
                    gathers[0].clone(),
                    gathers[1].clone(),
                    gathers[2].clone(),
                    gathers[3].clone(),
                ];
                Some((red, gathers))
            } else {
                None
            };
            stages.push(Stage { blocks, merge });
            lh /= 2;
            lw /= 2;
        }

        Ok(Encoder {
            cfg: cfg.clone(),
            input_hw,
            patch_embed,
            stages,
        })
    }

    pub fn level_shapes(&self) -> Vec<(usize, usize, usize)> {
        self.cfg.level_shapes(self.input_hw.0, self.input_hw.1)
    }

    /// Non-overlapping patch projection: `[3,H,W] -> [H/p*W/p, C1]` tokens.
    pub fn patch_embed(&self, g: &mut Graph, store: &ParamStore, img: Var) -> Result<Var> {
        let rows = g.extract_patches(img, self.cfg.patch_size)?;
        self.patch_embed.apply(g, store, rows)
    }

    /// One branch; returns per-level token matrices `[H_l*W_l, C_l]`.
    pub fn forward_branch(&self, g: &mut Graph, store: &ParamStore, img: Var) -> Result<LevelTokens> {
        let s = g.shape(img);
        if s.len() != 3 || s[0] != 3 || (s[1], s[2]) != self.input_hw {
            return Err(Error::dims(
                "encoder input",
                s,
                &[3, self.input_hw.0, self.input_hw.1],
            ));
        }
        let mut x = self.patch_embed(g, store, img)?;
        let mut levels = Vec::new();
        for stage in &self.stages {
            for block in &stage.blocks {
                x = block.apply(g, store, x)?;
            }
            levels.push(x);
            if let Some((red, gathers)) = &stage.merge {
                let mut parts = Vec::new();
                for idx in gathers.iter() {
                    parts.push(g.gather_rows(x, idx.clone())?);
                }
                let cat = g.concat_cols(&parts)?;
                x = red.apply(g, store, cat)?;
            }
        }
        Ok(LevelTokens { tokens: levels })
    }

    /// Both branches under shared parameters, plus the channel-wise
    /// concatenations delta_l = [f_l^T1; f_l^T2] as `[2C_l, H_l, W_l]`.
    pub fn siamese_forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        img_t1: Var,
        img_t2: Var,
    ) -> Result<BitemporalFeatures> {
        if g.shape(img_t1) != g.shape(img_t2) {
            return Err(Error::dims(
                "bitemporal image pair",
                g.shape(img_t1),
                g.shape(img_t2),
            ));
        }
        let b1 = self.forward_branch(g, store, img_t1)?;
        let b2 = self.forward_branch(g, store, img_t2)?;
        let shapes = self.level_shapes();
        let mut f_t1 = Vec::new();
        let mut f_t2 = Vec::new();
        let mut delta = Vec::new();
        for (l, &(c, h, w)) in shapes.iter().enumerate() {
            let m1 = tokens_to_map(g, b1.tokens[l], c, h, w)?;
            let m2 = tokens_to_map(g, b2.tokens[l], c, h, w)?;
            let m1_2d = g.reshape(m1, vec![c, h * w])?;
            let m2_2d = g.reshape(m2, vec![c, h * w])?;
            let d = g.concat_rows(&[m1_2d, m2_2d])?;
            delta.push(g.reshape(d, vec![2 * c, h, w])?);
            f_t1.push(m1);
            f_t2.push(m2);
        }
        Ok(BitemporalFeatures { f_t1, f_t2, delta })
    }
}

/// `[H*W, C]` tokens to a `[C, H, W]` map.
pub fn tokens_to_map(g: &mut Graph, tokens: Var, c: usize, h: usize, w: usize) -> Result<Var> {
    let t = g.transpose(tokens)?;
    g.reshape(t, vec![c, h, w])
}

/// `[C, H, W]` map to `[H*W, C]` tokens.
pub fn map_to_tokens(g: &mut Graph, map: Var) -> Result<Var> {
    let s = g.shape(map).to_vec();
    let m2 = g.reshape(map, vec![s[0], s[1] * s[2]])?;
    g.transpose(m2)
}
