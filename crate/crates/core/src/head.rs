//! Mask classification head and change-map assembly.
//!
//! Per-segment embeddings become class logits (linear head) and mask
//! embeddings (MLP shared with the decoder's attention-mask predictor).
//! Mask logits are the dot products of mask embeddings with the stride-4
//! per-pixel embeddings gamma_1; at inference they are upsampled x4 and
//! combined with the class probabilities into a change map.

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::nn::{Linear, Mlp3};
use crate::params::ParamStore;
use crate::rng::SeededRng;

/// Class index conventions.
pub const CLASS_CHANGED: usize = 0;
pub const CLASS_UNCHANGED: usize = 1;
/// In the default 3-logit head the last class is no-object.
pub fn no_object_class(n_classes: usize) -> Option<usize> {
    if n_classes > 2 {
        Some(n_classes - 1)
    } else {
        None
    }
}

pub struct MaskHead {
    pub classifier: Linear,
    pub mask_mlp: Mlp3,
    pub n_classes: usize,
    pub dim: usize,
}

impl MaskHead {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut SeededRng,
        dim: usize,
        two_logit_classes: bool,
    ) -> Self {
        let n_classes = if two_logit_classes { 2 } else { 3 };
        MaskHead {
            classifier: Linear::new(store, rng, "head.classifier", dim, n_classes),
            mask_mlp: Mlp3::new(store, rng, "head.mask_mlp", dim),
            n_classes,
            dim,
        }
    }

    /// Single linear layer; softmax is applied where needed.
    pub fn classify_queries(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        self.classifier.apply(g, store, x)
    }

    /// Mask embeddings for a query state.
    pub fn mask_embeddings(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        self.mask_mlp.apply(g, store, x)
    }

    /// mask_logits(q, p) = <embed_q, gamma_1(p)>, shape `[N, H1*W1]`.
    pub fn mask_logits_from_embed(&self, g: &mut Graph, embed: Var, gamma1: Var) -> Result<Var> {
        let s = g.shape(gamma1).to_vec();
        let flat = g.reshape(gamma1, vec![s[0], s[1] * s[2]])?;
        g.matmul(embed, flat)
    }

    /// Full mask path from a query state.
    pub fn masks_from_embeddings(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        x: Var,
        gamma1: Var,
    ) -> Result<Var> {
        let embed = self.mask_embeddings(g, store, x)?;
        self.mask_logits_from_embed(g, embed, gamma1)
    }
}

/// One prediction set: class probabilities and stride-4 mask logits.
#[derive(Clone, Debug)]
pub struct ProbMaskPairs {
    pub n: usize,
    pub n_classes: usize,
    pub h: usize,
    pub w: usize,
    /// `[N, n_classes]` softmax rows.
    pub probs: Vec<f64>,
    /// `[N, H, W]` logits.
    pub mask_logits: Vec<f64>,
}

impl ProbMaskPairs {
    pub fn from_graph(g: &Graph, class_logits: Var, mask_logits: Var, h: usize, w: usize) -> Self {
        let cls = g.shape(class_logits);
        let (n, n_classes) = (cls[0], cls[1]);
        let probs = softmax_rows(g.data(class_logits), n, n_classes);
        ProbMaskPairs {
            n,
            n_classes,
            h,
            w,
            probs,
            mask_logits: g.data(mask_logits).to_vec(),
        }
    }

    pub fn prob(&self, i: usize, class: usize) -> f64 {
        self.probs[i * self.n_classes + class]
    }

    pub fn mask(&self, i: usize) -> &[f64] {
        &self.mask_logits[i * self.h * self.w..(i + 1) * self.h * self.w]
    }

    /// Reorder the N pairs; used by the permutation-invariance checks.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        assert_eq!(perm.len(), self.n);
        let mut probs = Vec::with_capacity(self.probs.len());
        let mut masks = Vec::with_capacity(self.mask_logits.len());
        let hw = self.h * self.w;
        for &src in perm {
            probs.extend_from_slice(&self.probs[src * self.n_classes..(src + 1) * self.n_classes]);
            masks.extend_from_slice(&self.mask_logits[src * hw..(src + 1) * hw]);
        }
        ProbMaskPairs {
            probs,
            mask_logits: masks,
            ..*self
        }
    }
}

/// Binary change map plus the class score maps it was decided from.
#[derive(Clone, Debug, PartialEq)]
pub struct ChangeMap {
    pub h: usize,
    pub w: usize,
    /// 1 = changed, 0 = unchanged.
    pub labels: Vec<u8>,
    pub score_changed: Vec<f64>,
    pub score_unchanged: Vec<f64>,
}

pub fn softmax_rows(logits: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    for r in 0..rows {
        let row = &logits[r * cols..(r + 1) * cols];
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for c in 0..cols {
            let e = (row[c] - m).exp();
            out[r * cols + c] = e;
            sum += e;
        }
        for c in 0..cols {
            out[r * cols + c] /= sum;
        }
    }
    out
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Bilinear upsampling by an integer factor. Output pixel (r, c) samples
/// the source at (r/scale, c/scale) in pixel units with the border
/// replicated, so source grid points are reproduced exactly at integer
/// multiples of the factor.
pub fn bilinear_upsample(src: &[f64], h: usize, w: usize, scale: usize) -> Vec<f64> {
    let (oh, ow) = (h * scale, w * scale);
    let mut out = vec![0.0; oh * ow];
    for r in 0..oh {
        let py = (r as f64 / scale as f64).min((h - 1) as f64);
        let y0 = (py.floor() as usize).min(h.saturating_sub(2).max(0));
        let y1 = (y0 + 1).min(h - 1);
        let fy = py - y0 as f64;
        for c in 0..ow {
            let px = (c as f64 / scale as f64).min((w - 1) as f64);
            let x0 = (px.floor() as usize).min(w.saturating_sub(2).max(0));
            let x1 = (x0 + 1).min(w - 1);
            let fx = px - x0 as f64;
            let v00 = src[y0 * w + x0];
            let v01 = src[y0 * w + x1];
            let v10 = src[y1 * w + x0];
            let v11 = src[y1 * w + x1];
            out[r * ow + c] =
                (1.0 - fy) * ((1.0 - fx) * v00 + fx * v01) + fy * ((1.0 - fx) * v10 + fx * v11);
        }
    }
    out
}

/// Assemble the inference change map: for each pixel and class
/// c in {changed, unchanged},
/// `S_c = sum_i p_i(c) * sigmoid(upsampled mask_i)`, the no-object
/// probability excluded. Ties resolve to unchanged.
///
/// The per-pixel sums run in a canonical (sorted) order so the result is
/// bit-identical under any permutation of the prediction set.
pub fn assemble_change_map(pairs: &ProbMaskPairs, scale: usize) -> Result<ChangeMap> {
    if pairs.n_classes < 2 {
        return Err(Error::Config(format!(
            "change-map assembly needs at least 2 classes, got {}",
            pairs.n_classes
        )));
    }
    let (oh, ow) = (pairs.h * scale, pairs.w * scale);
    let up: Vec<Vec<f64>> = (0..pairs.n)
        .map(|i| bilinear_upsample(pairs.mask(i), pairs.h, pairs.w, scale))
        .collect();

    let mut score_changed = vec![0.0; oh * ow];
    let mut score_unchanged = vec![0.0; oh * ow];
    let mut buf = vec![0.0f64; pairs.n];
    for p in 0..oh * ow {
        for (class, scores) in [
            (CLASS_CHANGED, &mut score_changed),
            (CLASS_UNCHANGED, &mut score_unchanged),
        ] {
            for i in 0..pairs.n {
                buf[i] = pairs.prob(i, class) * sigmoid(up[i][p]);
            }
            buf.sort_by(f64::total_cmp);
            scores[p] = buf.iter().sum();
        }
    }
    let labels = score_changed
        .iter()
        .zip(&score_unchanged)
        .map(|(c, u)| u8::from(c > u))
        .collect();
    Ok(ChangeMap {
        h: oh,
        w: ow,
        labels,
        score_changed,
        score_unchanged,
    })
}
