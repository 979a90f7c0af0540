//! Cross-level change representation perceiver.
//!
//! Projects the four bitemporal feature levels to a common width, encodes
//! levels 2-4 with deformable multi-head self-attention over a flattened
//! multi-level sequence, and fuses level 1 back in residually to produce
//! the per-pixel embeddings gamma_1..4.

use std::rc::Rc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::nn::{LayerNorm, Linear, Mlp};
use crate::params::{ParamId, ParamStore};
use crate::rng::SeededRng;
use crate::tensor::Tensor;

pub const NUM_LEVELS: usize = 4;
/// Levels encoded by the deformable encoder (1-based levels 2..4).
pub const DEFORM_LEVELS: usize = 3;

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct DeformAttnConfig {
    pub heads: usize,
    /// Sampling points per level per head.
    pub points: usize,
    pub layers: usize,
}

impl Default for DeformAttnConfig {
    fn default() -> Self {
        DeformAttnConfig {
            heads: 8,
            points: 4,
            layers: 3,
        }
    }
}

// ── positional encoding ─────────────────────────────────────────────────

/// Per-channel encoding of one normalized coordinate pair. The x and y
/// halves each hold interleaved (cos, sin) pairs: channel 2i carries
/// cos(phi / 10000^(2i/(C/2))), channel 2i+1 the matching sin.
pub fn encode_position(phi_x: f64, phi_y: f64, d: usize) -> Vec<f64> {
    let mut out = vec![0.0; d];
    let half = d / 2;
    for i in 0..d / 4 {
        // frequency divisor 10000^(2i/(C/2)) with C = d
        let t = 10000f64.powf(2.0 * i as f64 / half as f64);
        out[2 * i] = (phi_x / t).cos();
        out[2 * i + 1] = (phi_x / t).sin();
        out[half + 2 * i] = (phi_y / t).cos();
        out[half + 2 * i + 1] = (phi_y / t).sin();
    }
    out
}

/// Coordinate of pixel index `i` of `n`, normalized to the open interval
/// (0, 2*pi).
pub fn coord_to_angle(i: usize, n: usize) -> f64 {
    2.0 * std::f64::consts::PI * (i as f64 + 0.5) / n as f64
}

/// Deterministic sine/cosine positional encoding, `[d, h, w]`.
pub fn positional_encoding(h: usize, w: usize, d: usize) -> Result<Tensor> {
    if d % 4 != 0 {
        return Err(Error::Config(format!(
            "positional encoding width {d} must be divisible by 4"
        )));
    }
    let mut data = vec![0.0; d * h * w];
    for y in 0..h {
        for x in 0..w {
            let pe = encode_position(coord_to_angle(x, w), coord_to_angle(y, h), d);
            for (c, v) in pe.iter().enumerate() {
                data[(c * h + y) * w + x] = *v;
            }
        }
    }
    Tensor::new(vec![d, h, w], data)
}

/// Same encoding flattened to `[h*w, d]` rows in raster order.
pub fn positional_encoding_rows(h: usize, w: usize, d: usize) -> Result<Vec<f64>> {
    if d % 4 != 0 {
        return Err(Error::Config(format!(
            "positional encoding width {d} must be divisible by 4"
        )));
    }
    let mut data = vec![0.0; h * w * d];
    for y in 0..h {
        for x in 0..w {
            let pe = encode_position(coord_to_angle(x, w), coord_to_angle(y, h), d);
            data[(y * w + x) * d..(y * w + x + 1) * d].copy_from_slice(&pe);
        }
    }
    Ok(data)
}

// ── deformable encoder ──────────────────────────────────────────────────

/// Static metadata for the flattened level 2-4 sequence.
struct SequenceMeta {
    /// (start, len) row spans of each encoded level.
    spans: Vec<(usize, usize)>,
    /// (h, w) of each encoded level.
    shapes: Vec<(usize, usize)>,
    /// Positional-encoding rows per encoded level.
    pe_rows: Vec<Rc<Vec<f64>>>,
    /// Each query's own normalized coordinate repeated per sampling point:
    /// `[S*K, 2]`.
    ref_tiled: Rc<Vec<f64>>,
    /// Per encoded level, 1/extent factors tiled to `[S*K, 2]`.
    inv_extent: Vec<Rc<Vec<f64>>>,
    total: usize,
    points: usize,
}

impl SequenceMeta {
    fn build(shapes: &[(usize, usize)], points: usize, d: usize) -> Result<Self> {
        let mut spans = Vec::new();
        let mut pe_rows = Vec::new();
        let mut refs = Vec::new();
        let mut start = 0;
        for &(h, w) in shapes {
            spans.push((start, h * w));
            start += h * w;
            pe_rows.push(Rc::new(positional_encoding_rows(h, w, d)?));
            for y in 0..h {
                for x in 0..w {
                    refs.push(((x as f64 + 0.5) / w as f64, (y as f64 + 0.5) / h as f64));
                }
            }
        }
        let total = start;
        let mut ref_tiled = Vec::with_capacity(total * points * 2);
        for &(rx, ry) in &refs {
            for _ in 0..points {
                ref_tiled.push(rx);
                ref_tiled.push(ry);
            }
        }
        let inv_extent = shapes
            .iter()
            .map(|&(h, w)| {
                let mut v = Vec::with_capacity(total * points * 2);
                for _ in 0..total * points {
                    v.push(1.0 / w as f64);
                    v.push(1.0 / h as f64);
                }
                Rc::new(v)
            })
            .collect();
        Ok(SequenceMeta {
            spans,
            shapes: shapes.to_vec(),
            pe_rows,
            ref_tiled: Rc::new(ref_tiled),
            inv_extent,
            total,
            points,
        })
    }
}

/// One deformable encoder layer: sampled multi-scale attention with
/// residual + norm, then a feed-forward sublayer with residual + norm.
struct DeformLayer {
    offset: Linear,
    attn_weight: Linear,
    value: Linear,
    out: Linear,
    norm1: LayerNorm,
    ffn: Mlp,
    norm2: LayerNorm,
    heads: usize,
    dim: usize,
    index: usize,
}

impl DeformLayer {
    fn new(
        store: &mut ParamStore,
        rng: &mut SeededRng,
        name: &str,
        dim: usize,
        heads: usize,
        points: usize,
        index: usize,
    ) -> Self {
        let k_total = heads * DEFORM_LEVELS * points;
        DeformLayer {
            // Zero-initialized predictors: initial offsets are 0 and
            // attention weights uniform.
            offset: Linear::new_zeros(store, &format!("{name}.offset"), dim, k_total * 2),
            attn_weight: Linear::new_zeros(store, &format!("{name}.attn_weight"), dim, k_total),
            value: Linear::new(store, rng, &format!("{name}.value"), dim, dim),
            out: Linear::new(store, rng, &format!("{name}.out"), dim, dim),
            norm1: LayerNorm::new(store, &format!("{name}.norm1"), dim),
            ffn: Mlp::new(store, rng, &format!("{name}.ffn"), dim, 4 * dim),
            norm2: LayerNorm::new(store, &format!("{name}.norm2"), dim),
            heads,
            dim,
            index,
        }
    }

    /// Query input: source features plus positional encodings plus the
    /// per-level scale embedding.
    fn query_input(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        src: Var,
        meta: &SequenceMeta,
        level_embed: &[ParamId],
    ) -> Result<Var> {
        let mut parts = Vec::new();
        for (l, &(start, len)) in meta.spans.iter().enumerate() {
            let piece = g.slice_rows(src, start, len)?;
            let pe = g.constant_from(vec![len, self.dim], meta.pe_rows[l].as_ref().clone());
            let piece = g.add(piece, pe)?;
            let emb = g.param(store, level_embed[l]);
            parts.push(g.add_row_vec(piece, emb)?);
        }
        g.concat_rows(&parts)
    }

    /// The multi-scale deformable attention aggregation for every query,
    /// before the output residual: per head, a convex combination of
    /// bilinear samples taken at offset locations in each level.
    fn aggregate(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        src: Var,
        q_in: Var,
        meta: &SequenceMeta,
    ) -> Result<Var> {
        let (heads, k, dim) = (self.heads, meta.points, self.dim);
        let dh = dim / heads;
        let s_total = meta.total;

        let offsets = self.offset.apply(g, store, q_in)?; // [S, M*3K*2]
        if g.data(offsets).iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!(
                "non-finite sampling offsets in deformable layer {}",
                self.index
            )));
        }
        let weights = self.attn_weight.apply(g, store, q_in)?; // [S, M*3K]
        let values = self.value.apply(g, store, src)?; // [S, d]

        // Per (level, head) value maps [dh, h, w].
        let mut value_maps = vec![Vec::with_capacity(heads); DEFORM_LEVELS];
        for (l, &(start, len)) in meta.spans.iter().enumerate() {
            let (h, w) = meta.shapes[l];
            let lv = g.slice_rows(values, start, len)?;
            for m in 0..heads {
                let vh = g.slice_cols(lv, m * dh, dh)?;
                let vh = g.transpose(vh)?;
                let vh = g.reshape(vh, vec![dh, h, w])?;
                value_maps[l].push(vh);
            }
        }

        let mut head_outputs = Vec::with_capacity(heads);
        for m in 0..heads {
            // Joint softmax over (level, point) within the head.
            let aw = g.slice_cols(weights, m * DEFORM_LEVELS * k, DEFORM_LEVELS * k)?;
            let (aw, degenerate) = g.softmax_lastdim(aw);
            debug_assert!(degenerate.is_empty());

            let mut head_sum: Option<Var> = None;
            for l in 0..DEFORM_LEVELS {
                let base = ((m * DEFORM_LEVELS) + l) * k * 2;
                let off = g.slice_cols(offsets, base, k * 2)?;
                let off = g.reshape(off, vec![s_total * k, 2])?;
                let inv = g.constant_from(
                    vec![s_total * k, 2],
                    meta.inv_extent[l].as_ref().clone(),
                );
                let off = g.mul(off, inv)?;
                let refs =
                    g.constant_from(vec![s_total * k, 2], meta.ref_tiled.as_ref().clone());
                let pts = g.add(off, refs)?;

                let sampled = g.bilinear_sample(value_maps[l][m], pts)?; // [S*K, dh]
                let sampled = g.reshape(sampled, vec![s_total, k, dh])?;

                let a_l = g.slice_cols(aw, l * k, k)?;
                let a_l = g.reshape(a_l, vec![s_total, 1, k])?;
                let contrib = g.bmm(a_l, sampled, false)?; // [S,1,dh]
                let contrib = g.reshape(contrib, vec![s_total, dh])?;
                head_sum = Some(match head_sum {
                    Some(acc) => g.add(acc, contrib)?,
                    None => contrib,
                });
            }
            head_outputs.push(head_sum.unwrap());
        }
        let cat = g.concat_cols(&head_outputs)?;
        self.out.apply(g, store, cat)
    }

    fn apply(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        src: Var,
        meta: &SequenceMeta,
        level_embed: &[ParamId],
    ) -> Result<Var> {
        let q_in = self.query_input(g, store, src, meta, level_embed)?;
        let attn = self.aggregate(g, store, src, q_in, meta)?;
        let x = g.add(src, attn)?;
        let x = self.norm1.apply(g, store, x)?;
        let h = self.ffn.apply(g, store, x)?;
        let h = g.add(x, h)?;
        self.norm2.apply(g, store, h)
    }
}

/// Multi-scale per-pixel embeddings, `gamma[l]: [d, H_l, W_l]`, with
/// `gamma[0]` at the highest resolution (stride 4).
pub struct PerPixelEmbeddings {
    pub gamma: Vec<Var>,
}

pub struct Clcrp {
    proj: Vec<(ParamId, ParamId)>, // 1x1 kernel + bias per level
    level_embed: Vec<ParamId>,
    layers: Vec<DeformLayer>,
    fuse_kernel: ParamId,
    fuse_bias: ParamId,
    meta: SequenceMeta,
    pub dim: usize,
    level_shapes: Vec<(usize, usize, usize)>,
    upsample_grid: Rc<Vec<f64>>,
    pub disable_deform: bool,
}

impl Clcrp {
    /// `delta_shapes`: the `[C, H, W]` shapes of the four concatenated
    /// bitemporal levels, finest first.
    pub fn new(
        store: &mut ParamStore,
        rng: &mut SeededRng,
        delta_shapes: &[(usize, usize, usize)],
        dim: usize,
        cfg: &DeformAttnConfig,
        disable_deform: bool,
    ) -> Result<Self> {
        if delta_shapes.len() != NUM_LEVELS {
            return Err(Error::Config(format!(
                "expected {NUM_LEVELS} pyramid levels, got {}",
                delta_shapes.len()
            )));
        }
        if dim % 4 != 0 {
            return Err(Error::Config(format!(
                "hidden dim {dim} must be divisible by 4 for positional encodings"
            )));
        }
        if dim % cfg.heads != 0 {
            return Err(Error::Config(format!(
                "hidden dim {dim} not divisible by {} deformable heads",
                cfg.heads
            )));
        }
        let (h1, w1) = (delta_shapes[0].1, delta_shapes[0].2);
        let (h2, w2) = (delta_shapes[1].1, delta_shapes[1].2);
        if h1 != 2 * h2 || w1 != 2 * w2 {
            return Err(Error::Config(format!(
                "level 1 extent {h1}x{w1} must be exactly twice level 2 {h2}x{w2}"
            )));
        }

        let mut proj = Vec::new();
        for (l, &(c, _, _)) in delta_shapes.iter().enumerate() {
            let k = store.register_normal(
                &format!("clcrp.proj{l}.kernel"),
                vec![dim, c, 1, 1],
                crate::nn::INIT_STD,
                rng,
            );
            let b = store.register_zeros(&format!("clcrp.proj{l}.bias"), vec![dim]);
            proj.push((k, b));
        }
        let level_embed = (0..DEFORM_LEVELS)
            .map(|l| {
                store.register_normal(
                    &format!("clcrp.level_embed{}", l + 1),
                    vec![dim],
                    crate::nn::INIT_STD,
                    rng,
                )
            })
            .collect();

        let enc_shapes: Vec<(usize, usize)> = delta_shapes[1..]
            .iter()
            .map(|&(_, h, w)| (h, w))
            .collect();
        let meta = SequenceMeta::build(&enc_shapes, cfg.points, dim)?;

        let layers = (0..cfg.layers)
            .map(|i| {
                DeformLayer::new(
                    store,
                    rng,
                    &format!("clcrp.layer{i}"),
                    dim,
                    cfg.heads,
                    cfg.points,
                    i,
                )
            })
            .collect();

        let fuse_kernel = store.register_normal(
            "clcrp.fuse.kernel",
            vec![dim, dim, 3, 3],
            crate::nn::INIT_STD,
            rng,
        );
        let fuse_bias = store.register_zeros("clcrp.fuse.bias", vec![dim]);

        // Upsample-by-2 grid: output pixel (r, c) samples level-2 space at
        // (c/2, r/2) in pixel units, clamped at the border. Exact at even
        // output pixels.
        let mut grid = Vec::with_capacity(h1 * w1 * 2);
        for r in 0..h1 {
            for c in 0..w1 {
                let x = if w2 > 1 {
                    (c as f64 / 2.0 / (w2 - 1) as f64).min(1.0)
                } else {
                    0.0
                };
                let y = if h2 > 1 {
                    (r as f64 / 2.0 / (h2 - 1) as f64).min(1.0)
                } else {
                    0.0
                };
                grid.push(x);
                grid.push(y);
            }
        }

        Ok(Clcrp {
            proj,
            level_embed,
            layers,
            fuse_kernel,
            fuse_bias,
            meta,
            dim,
            level_shapes: delta_shapes.to_vec(),
            upsample_grid: Rc::new(grid),
            disable_deform,
        })
    }

    /// Project all levels to the common width; returns the level-1
    /// residual map and the per-level projected maps for levels 2-4.
    fn project(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        delta: &[Var],
    ) -> Result<(Var, Vec<Var>)> {
        let mut projected = Vec::new();
        for (l, &d) in delta.iter().enumerate() {
            let (k, b) = self.proj[l];
            let kv = g.param(store, k);
            let bv = g.param(store, b);
            let y = g.conv2d(d, kv, 0)?;
            let (c, h, w) = (self.dim, g.shape(y)[1], g.shape(y)[2]);
            let y2 = g.reshape(y, vec![c, h * w])?;
            let y2 = g.add_col_vec(y2, bv)?;
            projected.push(g.reshape(y2, vec![c, h, w])?);
        }
        Ok((projected[0], projected[1..].to_vec()))
    }

    /// Flatten levels 2-4 into the encoder sequence; row spans follow
    /// level order.
    fn flatten_sequence(&self, g: &mut Graph, maps: &[Var]) -> Result<Var> {
        let mut parts = Vec::new();
        for &m in maps {
            parts.push(crate::encoder::map_to_tokens(g, m)?);
        }
        g.concat_rows(&parts)
    }

    /// gamma_1 = conv3x3(upsample_2x(gamma_2) + residual level-1 map).
    pub fn fuse_gamma1(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        gamma2: Var,
        delta1_hat: Var,
    ) -> Result<Var> {
        let (_, h1, w1) = self.level_shapes[0];
        let grid = g.constant_from(vec![h1 * w1, 2], self.upsample_grid.as_ref().clone());
        let up = g.bilinear_sample(gamma2, grid)?; // [H1*W1, d]
        let up = g.transpose(up)?;
        let up = g.reshape(up, vec![self.dim, h1, w1])?;
        let x = g.add(up, delta1_hat)?;
        let k = g.param(store, self.fuse_kernel);
        let b = g.param(store, self.fuse_bias);
        let y = g.conv2d(x, k, 1)?;
        let y2 = g.reshape(y, vec![self.dim, h1 * w1])?;
        let y2 = g.add_col_vec(y2, b)?;
        g.reshape(y2, vec![self.dim, h1, w1])
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        delta: &[Var],
    ) -> Result<PerPixelEmbeddings> {
        let (delta1_hat, enc_maps) = self.project(g, store, delta)?;
        let mut seq = self.flatten_sequence(g, &enc_maps)?;
        if !self.disable_deform {
            for layer in &self.layers {
                seq = layer.apply(g, store, seq, &self.meta, &self.level_embed)?;
            }
        }
        // Split back into maps.
        let mut gamma = Vec::with_capacity(NUM_LEVELS);
        let mut upper = Vec::new();
        for (l, &(start, len)) in self.meta.spans.iter().enumerate() {
            let (h, w) = self.meta.shapes[l];
            let rows = g.slice_rows(seq, start, len)?;
            upper.push(crate::encoder::tokens_to_map(g, rows, self.dim, h, w)?);
        }
        let g1 = self.fuse_gamma1(g, store, upper[0], delta1_hat)?;
        gamma.push(g1);
        gamma.extend(upper);
        Ok(PerPixelEmbeddings { gamma })
    }

    /// Span bookkeeping for tests and downstream consumers.
    pub fn spans(&self) -> &[(usize, usize)] {
        &self.meta.spans
    }

    pub fn sequence_len(&self) -> usize {
        self.meta.total
    }

    /// Direct access to one layer's aggregation for oracle checks.
    #[doc(hidden)]
    pub fn aggregate_layer(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        layer: usize,
        src: Var,
    ) -> Result<Var> {
        let l = &self.layers[layer];
        let q_in = l.query_input(g, store, src, &self.meta, &self.level_embed)?;
        l.aggregate(g, store, src, q_in, &self.meta)
    }
}
