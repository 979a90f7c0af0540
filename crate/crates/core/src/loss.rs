//! Bipartite matching and the hybrid mask-classification loss.
//!
//! Predictions are matched to ground-truth segments per stage with the
//! Hungarian algorithm over cost -p_i(c_j) + lambda_b*BCE + lambda_d*dice;
//! matched predictions receive cross-entropy toward their class plus the
//! weighted mask loss, unmatched ones cross-entropy toward no-object at a
//! reduced weight. The total adds the final-stage (main) loss and the
//! same construction over the earlier decoder stages (auxiliary).

use std::rc::Rc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::head::{no_object_class, softmax_rows, ProbMaskPairs, CLASS_CHANGED, CLASS_UNCHANGED};
use crate::hungarian::{hungarian_assign, Assignment};

#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq)]
pub struct LossWeights {
    pub cls: f64,
    pub mask: f64,
    pub bce: f64,
    pub dice: f64,
    /// Cross-entropy weight of predictions matched to no-object.
    pub no_object: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            cls: 2.0,
            mask: 1.0,
            bce: 5.0,
            dice: 2.0,
            no_object: 0.1,
        }
    }
}

/// Ground-truth segments of one tile at mask resolution (stride 4):
/// at most one changed and one unchanged segment; empty classes omitted.
#[derive(Clone, Debug)]
pub struct GroundTruthSegments {
    pub h: usize,
    pub w: usize,
    /// (class, binary mask as 0.0/1.0 values).
    pub segments: Vec<(usize, Rc<Vec<f64>>)>,
}

impl GroundTruthSegments {
    /// Build from a binary label already at mask resolution.
    pub fn from_binary_label(label: &[u8], h: usize, w: usize) -> Result<Self> {
        if label.len() != h * w {
            return Err(Error::dims("label", &[h, w], &[label.len()]));
        }
        let changed: Vec<f64> = label.iter().map(|&v| f64::from(v != 0)).collect();
        let unchanged: Vec<f64> = label.iter().map(|&v| f64::from(v == 0)).collect();
        let mut segments = Vec::new();
        if changed.iter().any(|&v| v != 0.0) {
            segments.push((CLASS_CHANGED, Rc::new(changed)));
        }
        if unchanged.iter().any(|&v| v != 0.0) {
            segments.push((CLASS_UNCHANGED, Rc::new(unchanged)));
        }
        Ok(GroundTruthSegments { h, w, segments })
    }

    pub fn n_segments(&self) -> usize {
        self.segments.len()
    }
}

/// Nearest-neighbor downsampling of a binary label, top-left phase.
pub fn downsample_label_nearest(label: &[u8], h: usize, w: usize, factor: usize) -> Vec<u8> {
    let (oh, ow) = (h / factor, w / factor);
    let mut out = vec![0u8; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = label[(y * factor) * w + x * factor];
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

/// Mean logit-space binary cross-entropy on plain data.
pub fn bce_with_logits_data(logits: &[f64], target: &[f64]) -> f64 {
    let n = logits.len() as f64;
    logits
        .iter()
        .zip(target)
        .map(|(&m, &t)| m.max(0.0) - m * t + (-m.abs()).exp().ln_1p())
        .sum::<f64>()
        / n
}

/// Dice loss with smoothing 1 on plain data.
pub fn dice_loss_data(logits: &[f64], target: &[f64]) -> f64 {
    let mut inter = 0.0;
    let mut s_sum = 0.0;
    let mut g_sum = 0.0;
    for (&m, &t) in logits.iter().zip(target) {
        let s = sigmoid(m);
        inter += s * t;
        s_sum += s;
        g_sum += t;
    }
    1.0 - (2.0 * inter + 1.0) / (s_sum + g_sum + 1.0)
}

/// The weighted mask loss used both in matching costs and training:
/// lambda_b * BCE + lambda_d * dice.
pub fn mask_loss_data(logits: &[f64], target: &[f64], w: &LossWeights) -> f64 {
    w.bce * bce_with_logits_data(logits, target) + w.dice * dice_loss_data(logits, target)
}

/// Matching cost matrix `[n_gt, N]`: -p_i(c_j) + L_mask(m_i, m_j).
pub fn matching_cost_matrix(
    pairs: &ProbMaskPairs,
    gt: &GroundTruthSegments,
    w: &LossWeights,
) -> Vec<f64> {
    let n_gt = gt.n_segments();
    let mut cost = vec![0.0; n_gt * pairs.n];
    for (j, (class, gmask)) in gt.segments.iter().enumerate() {
        for i in 0..pairs.n {
            cost[j * pairs.n + i] =
                -pairs.prob(i, *class) + mask_loss_data(pairs.mask(i), gmask, w);
        }
    }
    cost
}

/// Graph-level dice loss for one mask row against a constant target.
pub fn dice_loss_graph(g: &mut Graph, row: Var, target: &Rc<Vec<f64>>) -> Result<Var> {
    let n = g.numel(row);
    if n != target.len() {
        return Err(Error::dims("dice target", g.shape(row), &[target.len()]));
    }
    let s = g.sigmoid(row);
    let t = g.constant_from(g.shape(row).to_vec(), target.as_ref().clone());
    let st = g.mul(s, t)?;
    let inter = g.sum_all(st);
    let num = g.scale(inter, 2.0);
    let num = g.add_scalar(num, 1.0);
    let s_sum = g.sum_all(s);
    let g_sum: f64 = target.iter().sum();
    let den = g.add_scalar(s_sum, g_sum + 1.0);
    let q = g.div(num, den)?;
    let neg = g.scale(q, -1.0);
    Ok(g.add_scalar(neg, 1.0))
}

/// Graph-level weighted mask loss (BCE + dice) for one prediction row.
pub fn mask_loss_graph(
    g: &mut Graph,
    row: Var,
    target: &Rc<Vec<f64>>,
    w: &LossWeights,
) -> Result<Var> {
    let bce = g.bce_with_logits_mean(row, target.clone())?;
    let dice = dice_loss_graph(g, row, target)?;
    let bce_w = g.scale(bce, w.bce);
    let dice_w = g.scale(dice, w.dice);
    g.add(bce_w, dice_w)
}

#[derive(Clone, Copy, Debug, Default, Serialize)]
pub struct StageLossTerms {
    pub cls: f64,
    pub bce: f64,
    pub dice: f64,
}

#[derive(Clone, Debug, Default, Serialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub cls: f64,
    pub bce: f64,
    pub dice: f64,
    pub per_stage: Vec<StageLossTerms>,
}

pub struct StagePredictions {
    /// `[N, K]` class logits.
    pub class_logits: Var,
    /// `[N, H*W]` mask logits at stride-4 resolution.
    pub mask_logits: Var,
}

/// Match one stage's predictions to the ground truth (outside the
/// gradient path).
pub fn match_stage(
    g: &Graph,
    preds: &StagePredictions,
    gt: &GroundTruthSegments,
    w: &LossWeights,
) -> Result<Assignment> {
    let s = g.shape(preds.class_logits);
    let (n, k) = (s[0], s[1]);
    let pairs = ProbMaskPairs {
        n,
        n_classes: k,
        h: gt.h,
        w: gt.w,
        probs: softmax_rows(g.data(preds.class_logits), n, k),
        mask_logits: g.data(preds.mask_logits).to_vec(),
    };
    let cost = matching_cost_matrix(&pairs, gt, w);
    hungarian_assign(&cost, gt.n_segments(), n)
}

/// One stage's loss under a fixed assignment. The assignment is a
/// non-differentiable selection; gradients flow through the selected
/// class and mask terms only.
pub fn stage_loss_with_assignment(
    g: &mut Graph,
    preds: &StagePredictions,
    gt: &GroundTruthSegments,
    assignment: &Assignment,
    w: &LossWeights,
) -> Result<(Var, StageLossTerms)> {
    let s = g.shape(preds.class_logits).to_vec();
    let (n, k) = (s[0], s[1]);
    let no_obj = no_object_class(k);

    // Classification targets: matched predictions get their segment's
    // class; the rest go to no-object (down-weighted), or carry zero
    // weight in the strict two-logit mode.
    let mut targets = vec![0usize; n];
    let mut weights = vec![0.0f64; n];
    if let Some(no) = no_obj {
        targets.iter_mut().for_each(|t| *t = no);
        weights.iter_mut().for_each(|v| *v = w.no_object);
    }
    for (j, &i) in assignment.row_to_col.iter().enumerate() {
        targets[i] = gt.segments[j].0;
        weights[i] = 1.0;
    }
    let ce = g.ce_rows(preds.class_logits, Rc::new(targets), Rc::new(weights))?;
    let cls_term = g.scale(ce, w.cls);
    let mut terms = StageLossTerms {
        cls: g.data(cls_term)[0],
        ..Default::default()
    };

    let mut total = cls_term;
    let hw = gt.h * gt.w;
    for (j, &i) in assignment.row_to_col.iter().enumerate() {
        let row = g.slice_rows(preds.mask_logits, i, 1)?;
        let row = g.reshape(row, vec![hw])?;
        let target = &gt.segments[j].1;
        let bce = g.bce_with_logits_mean(row, target.clone())?;
        let dice = dice_loss_graph(g, row, target)?;
        terms.bce += w.mask * w.bce * g.data(bce)[0];
        terms.dice += w.mask * w.dice * g.data(dice)[0];
        let bce_w = g.scale(bce, w.mask * w.bce);
        let dice_w = g.scale(dice, w.mask * w.dice);
        let mterm = g.add(bce_w, dice_w)?;
        total = g.add(total, mterm)?;
    }
    Ok((total, terms))
}

/// The complete training loss for one tile: the final stage's main loss
/// plus the auxiliary losses of the earlier decoder stages, each matched
/// independently.
pub fn maskcd_loss(
    g: &mut Graph,
    final_preds: &StagePredictions,
    aux_preds: &[StagePredictions],
    gt: &GroundTruthSegments,
    w: &LossWeights,
) -> Result<(Var, LossBreakdown)> {
    let mut breakdown = LossBreakdown::default();
    let mut total: Option<Var> = None;
    for preds in aux_preds.iter().chain(std::iter::once(final_preds)) {
        let assignment = match_stage(g, preds, gt, w)?;
        let (stage_total, terms) = stage_loss_with_assignment(g, preds, gt, &assignment, w)?;
        breakdown.cls += terms.cls;
        breakdown.bce += terms.bce;
        breakdown.dice += terms.dice;
        breakdown.per_stage.push(terms);
        total = Some(match total {
            Some(acc) => g.add(acc, stage_total)?,
            None => stage_total,
        });
    }
    let total = total.expect("at least the final stage");
    breakdown.total = g.data(total)[0];
    if !breakdown.total.is_finite() {
        return Err(Error::Numeric(format!(
            "loss is not finite: {}",
            breakdown.total
        )));
    }
    Ok((total, breakdown))
}
