//! Acceptance suite. Each test covers one numbered criterion and prints
//! one PASS line (run with `--nocapture` to see them); a failing
//! criterion fails its test. Training-based criteria run the real
//! pipeline at desk scale.

use std::process::Command;
use std::rc::Rc;
use std::time::Instant;

use maskcd_core::clcrp::{positional_encoding_rows, Clcrp, DeformAttnConfig};
use maskcd_core::config::{ModelConfig, RunConfig};
use maskcd_core::data::dataset::TileDataset;
use maskcd_core::decoder::{Decoder, DecoderConfig};
use maskcd_core::encoder::{map_to_tokens, Encoder, EncoderConfig};
use maskcd_core::gradcheck::{check_gradients, rescale_to_generic_point};
use maskcd_core::graph::{Graph, Var};
use maskcd_core::head::{assemble_change_map, softmax_rows, MaskHead, ProbMaskPairs};
use maskcd_core::hungarian::hungarian_assign;
use maskcd_core::loss::{
    mask_loss_graph, match_stage, stage_loss_with_assignment, GroundTruthSegments, LossWeights,
    StagePredictions,
};
use maskcd_core::metrics::{compute_metrics, confusion_counts, ConfusionCounts};
use maskcd_core::model::Model;
use maskcd_core::nn::{Mlp3, LN_EPS};
use maskcd_core::params::ParamStore;
use maskcd_core::rng::SeededRng;
use maskcd_core::train::{evaluate_dataset, run_training, Trainer};

fn pass(criterion: &str, detail: String) {
    println!("ACCEPTANCE PASS {criterion}: {detail}");
}

// ── criterion 1: gradient suite ─────────────────────────────────────────

fn rand_vec(rng: &mut SeededRng, n: usize, std: f64) -> Vec<f64> {
    (0..n).map(|_| rng.normal(0.0, std)).collect()
}

/// Every differentiable op composed into small checked graphs.
fn op_level_checks(rng: &mut SeededRng) -> usize {
    let mut checked = 0;

    // matmul, transpose, add/sub/mul/div, scale, add_scalar, sum
    let mut store = ParamStore::new();
    let a = store.register("a", vec![3, 4], rand_vec(rng, 12, 1.0));
    let b = store.register("b", vec![4, 3], rand_vec(rng, 12, 1.0));
    let rep = check_gradients(&mut store, |g, s| {
        let av = g.param(s, a);
        let bv = g.param(s, b);
        let m = g.matmul(av, bv)?;
        let t = g.transpose(m)?;
        let sum = g.add(t, m)?;
        let diff = g.sub(sum, m)?;
        let prod = g.mul(diff, m)?;
        let quot = {
            let shifted = g.add_scalar(m, 4.0); // keep denominators away from 0
            g.div(prod, shifted)?
        };
        let scaled = g.scale(quot, 1.7);
        Ok(g.sum_all(scaled))
    })
    .unwrap();
    rep.assert_ok();
    checked += rep.checked;

    // bmm (both variants), gathers, concats, slices, row/col vectors
    let mut store = ParamStore::new();
    let a = store.register("a", vec![2, 3, 4], rand_vec(rng, 24, 1.0));
    let b = store.register("b", vec![2, 4, 3], rand_vec(rng, 24, 1.0));
    let v = store.register("v", vec![3], rand_vec(rng, 3, 1.0));
    let rep = check_gradients(&mut store, |g, s| {
        let av = g.param(s, a);
        let bv = g.param(s, b);
        let m1 = g.bmm(av, bv, false)?; // [2,3,3]
        let m2 = g.bmm(av, av, true)?; // [2,3,3]
        let sum = g.add(m1, m2)?;
        let flat = g.reshape(sum, vec![6, 3])?;
        let gathered = g.gather_rows(flat, Rc::new(vec![5, 0, 0, 3]))?;
        let top = g.slice_rows(gathered, 0, 2)?;
        let bottom = g.slice_rows(gathered, 2, 2)?;
        let cat = g.concat_cols(&[top, bottom])?; // [2, 6]
        let cols = g.slice_cols(cat, 1, 3)?;
        let vv = g.param(s, v);
        let with_rows = g.add_row_vec(cols, vv)?;
        let vc = g.slice_cols(with_rows, 0, 1)?;
        let vc = g.reshape(vc, vec![2])?;
        let with_cols = g.add_col_vec(with_rows, vc)?;
        let rows = g.concat_rows(&[with_cols, with_rows])?;
        Ok(g.sum_all(rows))
    })
    .unwrap();
    rep.assert_ok();
    checked += rep.checked;

    // sigmoid, gelu, softmax, layer_norm, bce, ce
    let mut store = ParamStore::new();
    let x = store.register("x", vec![4, 5], rand_vec(rng, 20, 1.5));
    let gain = store.register("gain", vec![5], vec![1.0; 5]);
    let bias = store.register("bias", vec![5], rand_vec(rng, 5, 0.1));
    let target: Vec<f64> = (0..20).map(|_| f64::from(rng.uniform() > 0.5)).collect();
    let rep = check_gradients(&mut store, |g, s| {
        let xv = g.param(s, x);
        let gn = g.param(s, gain);
        let bs = g.param(s, bias);
        let ln = g.layer_norm(xv, gn, bs, 1e-5)?;
        let (sm, _) = g.softmax_lastdim(ln);
        let act = g.gelu(sm);
        let sig = g.sigmoid(act);
        let bce = g.bce_with_logits_mean(sig, Rc::new(target.clone()))?;
        let ce = g.ce_rows(
            xv,
            Rc::new(vec![1, 0, 4, 2]),
            Rc::new(vec![1.0, 0.5, 0.1, 1.0]),
        )?;
        g.add(bce, ce)
    })
    .unwrap();
    rep.assert_ok();
    checked += rep.checked;

    // conv2d 1x1 and 3x3, extract_patches
    let mut store = ParamStore::new();
    let img = store.register("img", vec![2, 4, 4], rand_vec(rng, 32, 1.0));
    let k1 = store.register("k1", vec![3, 2, 1, 1], rand_vec(rng, 6, 0.5));
    let k3 = store.register("k3", vec![2, 3, 3, 3], rand_vec(rng, 54, 0.3));
    let rep = check_gradients(&mut store, |g, s| {
        let iv = g.param(s, img);
        let k1v = g.param(s, k1);
        let k3v = g.param(s, k3);
        let y1 = g.conv2d(iv, k1v, 0)?;
        let y3 = g.conv2d(y1, k3v, 1)?;
        let rows = g.extract_patches(y3, 2)?;
        let act = g.gelu(rows);
        Ok(g.sum_all(act))
    })
    .unwrap();
    rep.assert_ok();
    checked += rep.checked;

    // bilinear sampling: gradients to both the feature map and the
    // point coordinates (points parameterized away from cell boundaries)
    let mut store = ParamStore::new();
    let feat = store.register("feat", vec![2, 5, 6], rand_vec(rng, 60, 1.0));
    let pts = store.register(
        "pts",
        vec![4, 2],
        vec![0.21, 0.33, 0.52, 0.11, 0.77, 0.68, 0.15, 0.92],
    );
    let rep = check_gradients(&mut store, |g, s| {
        let f = g.param(s, feat);
        let p = g.param(s, pts);
        let sampled = g.bilinear_sample(f, p)?;
        let act = g.sigmoid(sampled);
        Ok(g.sum_all(act))
    })
    .unwrap();
    rep.assert_ok();
    checked += rep.checked;

    checked
}

fn composite_checks(rng: &mut SeededRng) -> usize {
    let mut checked = 0;

    // encoder block pair (regular + shifted window attention)
    let mut store = ParamStore::new();
    let mut init = SeededRng::new(rng.next_u64());
    let cfg = EncoderConfig {
        patch_size: 2,
        embed_dim: 4,
        depths: vec![2],
        num_heads: vec![2],
        window_size: 2,
    };
    let enc = Encoder::new(&mut store, &mut init, &cfg, (8, 8)).unwrap();
    rescale_to_generic_point(&mut store);
    let img = rand_vec(rng, 3 * 64, 0.5);
    let readout = rand_vec(rng, 16 * 4, 1.0);
    let rep = check_gradients(&mut store, |g, s| {
        let x = g.constant_from(vec![3, 8, 8], img.clone());
        let levels = enc.forward_branch(g, s, x)?;
        let w = g.constant_from(vec![16, 4], readout.clone());
        let y = g.mul(levels.tokens[0], w)?;
        Ok(g.sum_all(y))
    })
    .unwrap();
    rep.assert_ok();
    checked += rep.checked;

    // deformable attention layer (within the full perceiver)
    let mut store = ParamStore::new();
    let mut init = SeededRng::new(rng.next_u64());
    let shapes = vec![(4, 4, 4), (4, 2, 2), (4, 2, 2), (4, 2, 2)];
    let clcrp = Clcrp::new(
        &mut store,
        &mut init,
        &shapes,
        8,
        &DeformAttnConfig {
            heads: 2,
            points: 2,
            layers: 1,
        },
        false,
    )
    .unwrap();
    rescale_to_generic_point(&mut store);
    for id in store.ids().collect::<Vec<_>>() {
        let name = store.get(id).name.clone();
        if name.contains("offset") || name.contains("attn_weight") {
            let e = store.get_mut(id);
            for v in e.data.iter_mut() {
                *v = rng.normal(0.0, 0.05);
            }
        }
    }
    let delta: Vec<Vec<f64>> = shapes
        .iter()
        .map(|&(c, h, w)| rand_vec(rng, c * h * w, 1.0))
        .collect();
    let readouts: Vec<Vec<f64>> = shapes
        .iter()
        .map(|&(_, h, w)| rand_vec(rng, 8 * h * w, 1.0))
        .collect();
    let rep = check_gradients(&mut store, |g, s| {
        let dv: Vec<Var> = shapes
            .iter()
            .zip(&delta)
            .map(|(&(c, h, w), d)| g.constant_from(vec![c, h, w], d.clone()))
            .collect();
        let emb = clcrp.forward(g, s, &dv)?;
        let mut loss = None;
        for (&gm, r) in emb.gamma.iter().zip(&readouts) {
            let n = g.numel(gm);
            let flat = g.reshape(gm, vec![n])?;
            let w = g.constant_from(vec![n], r.clone());
            let term = g.mul(flat, w)?;
            let s1 = g.sum_all(term);
            loss = Some(match loss {
                Some(acc) => g.add(acc, s1)?,
                None => s1,
            });
        }
        Ok(loss.unwrap())
    })
    .unwrap();
    rep.assert_ok();
    checked += rep.checked;

    // masked-attention decoder stage under a fixed attention mask
    let mut store = ParamStore::new();
    let mut init = SeededRng::new(rng.next_u64());
    let gshapes = vec![(8, 4, 4), (8, 2, 2), (8, 2, 2), (8, 2, 2)];
    let _mlp = Mlp3::new(&mut store, &mut init, "head.mask_mlp", 8);
    let dec = Decoder::new(
        &mut store,
        &mut init,
        &DecoderConfig { stages: 1, heads: 2 },
        3,
        8,
        &gshapes,
        false,
    )
    .unwrap();
    rescale_to_generic_point(&mut store);
    let gamma = rand_vec(rng, 8 * 4, 1.0);
    let xdata = rand_vec(rng, 3 * 8, 1.0);
    let mut mask = vec![0.0; 3 * 4];
    mask[1] = f64::NEG_INFINITY;
    mask[4 + 2] = f64::NEG_INFINITY;
    let readout = rand_vec(rng, 3 * 8, 1.0);
    let rep = check_gradients(&mut store, |g, s| {
        let gm = g.constant_from(vec![8, 2, 2], gamma.clone());
        let gflat = map_to_tokens(g, gm)?;
        let x = g.constant_from(vec![3, 8], xdata.clone());
        let y = dec.stage_masked_attention(g, s, 0, x, gflat, &mask)?;
        let w = g.constant_from(vec![3, 8], readout.clone());
        let y = g.mul(y, w)?;
        Ok(g.sum_all(y))
    })
    .unwrap();
    rep.assert_ok();
    checked += rep.checked;

    // mask head: classification and mask logits
    let mut store = ParamStore::new();
    let mut init = SeededRng::new(rng.next_u64());
    let head = MaskHead::new(&mut store, &mut init, 8, false);
    rescale_to_generic_point(&mut store);
    let x = rand_vec(rng, 5 * 8, 1.0);
    let gamma1 = rand_vec(rng, 8 * 2 * 2, 1.0);
    let cls_w = rand_vec(rng, 5 * 3, 1.0);
    let msk_w = rand_vec(rng, 5 * 4, 1.0);
    let rep = check_gradients(&mut store, |g, s| {
        let xv = g.constant_from(vec![5, 8], x.clone());
        let g1 = g.constant_from(vec![8, 2, 2], gamma1.clone());
        let cls = head.classify_queries(g, s, xv)?;
        let masks = head.masks_from_embeddings(g, s, xv, g1)?;
        let wc = g.constant_from(vec![5, 3], cls_w.clone());
        let wm = g.constant_from(vec![5, 4], msk_w.clone());
        let t1 = g.mul(cls, wc)?;
        let t2 = g.mul(masks, wm)?;
        let s1 = g.sum_all(t1);
        let s2 = g.sum_all(t2);
        g.add(s1, s2)
    })
    .unwrap();
    rep.assert_ok();
    checked += rep.checked;

    // mask_loss
    let mut store = ParamStore::new();
    let logits = store.register("m", vec![9], rand_vec(rng, 9, 1.5));
    let target: Rc<Vec<f64>> =
        Rc::new((0..9).map(|_| f64::from(rng.uniform() > 0.5)).collect());
    let w = LossWeights::default();
    let rep = check_gradients(&mut store, |g, s| {
        let row = g.param(s, logits);
        mask_loss_graph(g, row, &target, &w)
    })
    .unwrap();
    rep.assert_ok();
    checked += rep.checked;

    // maskcd_loss with the matching held fixed (main + one aux stage)
    let label = vec![1u8, 0, 0, 1, 1, 0, 0, 0, 0];
    let gt = GroundTruthSegments::from_binary_label(&label, 3, 3).unwrap();
    let mut store = ParamStore::new();
    let n = 4;
    let cls_main = store.register("cls_main", vec![n, 3], rand_vec(rng, n * 3, 1.0));
    let msk_main = store.register("msk_main", vec![n, 9], rand_vec(rng, n * 9, 1.5));
    let cls_aux = store.register("cls_aux", vec![n, 3], rand_vec(rng, n * 3, 1.0));
    let msk_aux = store.register("msk_aux", vec![n, 9], rand_vec(rng, n * 9, 1.5));
    let assignments = {
        let mut g = Graph::new();
        let mk = |g: &mut Graph, s: &ParamStore, c, m| StagePredictions {
            class_logits: g.param(s, c),
            mask_logits: g.param(s, m),
        };
        let pm = mk(&mut g, &store, cls_main, msk_main);
        let pa = mk(&mut g, &store, cls_aux, msk_aux);
        (
            match_stage(&g, &pm, &gt, &w).unwrap(),
            match_stage(&g, &pa, &gt, &w).unwrap(),
        )
    };
    let rep = check_gradients(&mut store, |g, s| {
        let pm = StagePredictions {
            class_logits: g.param(s, cls_main),
            mask_logits: g.param(s, msk_main),
        };
        let pa = StagePredictions {
            class_logits: g.param(s, cls_aux),
            mask_logits: g.param(s, msk_aux),
        };
        let (lm, _) = stage_loss_with_assignment(g, &pm, &gt, &assignments.0, &w)?;
        let (la, _) = stage_loss_with_assignment(g, &pa, &gt, &assignments.1, &w)?;
        g.add(lm, la)
    })
    .unwrap();
    rep.assert_ok();
    checked += rep.checked;

    checked
}

#[test]
fn criterion_1_gradient_suite() {
    let start = Instant::now();
    let mut rng = SeededRng::new(0xACCE01);
    let mut checked = op_level_checks(&mut rng);
    checked += composite_checks(&mut rng);
    let elapsed = start.elapsed();
    assert!(
        elapsed.as_secs_f64() < 120.0,
        "gradient suite took {elapsed:?}, budget is 2 minutes"
    );
    pass(
        "criterion 1 (gradient suite)",
        format!("{checked} parameter elements checked at rel 1e-5 in {elapsed:.2?}"),
    );
}

// ── criterion 2: hungarian oracle ───────────────────────────────────────

fn brute_force_min(cost: &[f64], n: usize, m: usize) -> f64 {
    fn rec(
        cost: &[f64],
        n: usize,
        m: usize,
        row: usize,
        used: &mut Vec<bool>,
        cur: f64,
        best: &mut f64,
    ) {
        if row == n {
            if cur < *best {
                *best = cur;
            }
            return;
        }
        for c in 0..m {
            if used[c] {
                continue;
            }
            used[c] = true;
            rec(cost, n, m, row + 1, used, cur + cost[row * m + c], best);
            used[c] = false;
        }
    }
    let mut best = f64::INFINITY;
    rec(cost, n, m, 0, &mut vec![false; m], 0.0, &mut best);
    best
}

#[test]
fn criterion_2_hungarian_oracle() {
    let start = Instant::now();
    let mut rng = SeededRng::new(0xACCE02);
    let mut cases = 0;
    for n in 2..=7usize {
        for _ in 0..200 {
            let cost: Vec<f64> = (0..n * n).map(|_| rng.uniform_range(-1.0, 1.0)).collect();
            let a = hungarian_assign(&cost, n, n).unwrap();
            let got = a.total_cost(&cost, n);
            let want = brute_force_min(&cost, n, n);
            assert_eq!(got, want, "n={n}: {got} vs {want}");
            cases += 1;
        }
    }
    let elapsed = start.elapsed();
    assert!(
        elapsed.as_secs_f64() < 10.0,
        "hungarian oracle took {elapsed:?}, budget is 10 seconds"
    );
    pass(
        "criterion 2 (hungarian oracle)",
        format!("{cases} matrices matched brute force exactly in {elapsed:.2?}"),
    );
}

// ── criterion 3: masked-attention degeneracy ────────────────────────────

fn linear_data(store: &ParamStore, name: &str, x: &[f64], rows: usize, d_in: usize) -> Vec<f64> {
    let w = &store.get(store.find(&format!("{name}.weight")).unwrap()).data;
    let b = &store.get(store.find(&format!("{name}.bias")).unwrap()).data;
    let d_out = b.len();
    let mut out = vec![0.0; rows * d_out];
    for r in 0..rows {
        for o in 0..d_out {
            let mut s = b[o];
            for i in 0..d_in {
                s += x[r * d_in + i] * w[i * d_out + o];
            }
            out[r * d_out + o] = s;
        }
    }
    out
}

fn layer_norm_data(store: &ParamStore, name: &str, x: &[f64], rows: usize, d: usize) -> Vec<f64> {
    let gain = &store.get(store.find(&format!("{name}.gain")).unwrap()).data;
    let bias = &store.get(store.find(&format!("{name}.bias")).unwrap()).data;
    let mut out = vec![0.0; rows * d];
    for r in 0..rows {
        let row = &x[r * d..(r + 1) * d];
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let inv = 1.0 / (var + LN_EPS).sqrt();
        for c in 0..d {
            out[r * d + c] = (row[c] - mean) * inv * gain[c] + bias[c];
        }
    }
    out
}

/// Plain multi-head cross attention in straight loops, independent of
/// the graph: softmax(QK^T)V per head (the decoder's unscaled
/// convention), concatenated heads, output projection, residual, norm.
fn independent_cross_attention(
    store: &ParamStore,
    x: &[f64],
    n: usize,
    gamma: &[f64],
    pe: &[f64],
    hw: usize,
    d: usize,
    heads: usize,
) -> Vec<f64> {
    let q = linear_data(store, "dec.stage0.cross.q", x, n, d);
    let k_in: Vec<f64> = gamma.iter().zip(pe).map(|(a, b)| a + b).collect();
    let k = linear_data(store, "dec.stage0.cross.k", &k_in, hw, d);
    let v = linear_data(store, "dec.stage0.cross.v", gamma, hw, d);
    let dh = d / heads;
    let mut merged = vec![0.0; n * d];
    for h in 0..heads {
        for i in 0..n {
            let mut logits = vec![0.0; hw];
            for p in 0..hw {
                let mut s = 0.0;
                for c in 0..dh {
                    s += q[i * d + h * dh + c] * k[p * d + h * dh + c];
                }
                logits[p] = s;
            }
            let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut weights: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
            let sum: f64 = weights.iter().sum();
            weights.iter_mut().for_each(|w| *w /= sum);
            for c in 0..dh {
                let mut acc = 0.0;
                for p in 0..hw {
                    acc += weights[p] * v[p * d + h * dh + c];
                }
                merged[i * d + h * dh + c] = acc;
            }
        }
    }
    let projected = linear_data(store, "dec.stage0.cross.out", &merged, n, d);
    let residual: Vec<f64> = projected.iter().zip(x).map(|(a, b)| a + b).collect();
    layer_norm_data(store, "dec.stage0.norm1", &residual, n, d)
}

#[test]
fn criterion_3_masked_attention_degeneracy() {
    let mut store = ParamStore::new();
    let mut init = SeededRng::new(0xACCE03);
    let d = 16;
    let heads = 4;
    let gshapes = vec![(d, 8, 8), (d, 4, 4), (d, 4, 4), (d, 4, 4)];
    let _mlp = Mlp3::new(&mut store, &mut init, "head.mask_mlp", d);
    let dec = Decoder::new(
        &mut store,
        &mut init,
        &DecoderConfig { stages: 1, heads },
        6,
        d,
        &gshapes,
        false,
    )
    .unwrap();
    let mut rng = SeededRng::new(0xACCE13);
    let hw = 16;
    let gamma = rand_vec(&mut rng, d * hw, 1.0);
    let xdata = rand_vec(&mut rng, 6 * d, 1.0);

    let mut g = Graph::new();
    let gm = g.constant_from(vec![d, 4, 4], gamma.clone());
    let gflat = map_to_tokens(&mut g, gm).unwrap();
    let gamma_rows = g.data(gflat).to_vec();
    let x = g.constant_from(vec![6, d], xdata.clone());
    let zeros = vec![0.0; 6 * hw];
    let y = dec
        .stage_masked_attention(&mut g, &store, 0, x, gflat, &zeros)
        .unwrap();
    let got = g.data(y).to_vec();

    let pe = positional_encoding_rows(4, 4, d).unwrap();
    let want = independent_cross_attention(&store, &xdata, 6, &gamma_rows, &pe, hw, d, heads);

    let mut worst: f64 = 0.0;
    for (a, b) in got.iter().zip(&want) {
        worst = worst.max((a - b).abs());
    }
    assert!(
        worst < 1e-9,
        "masked attention with zero mask deviates from plain cross attention by {worst:.3e}"
    );
    pass(
        "criterion 3 (masked-attention degeneracy)",
        format!("max |gap| = {worst:.3e} against an independent cross-attention"),
    );
}

// ── criterion 4: deformable-attention oracle ────────────────────────────

#[test]
fn criterion_4_deformable_oracle() {
    let mut store = ParamStore::new();
    let mut init = SeededRng::new(0xACCE04);
    let d = 8;
    let shapes = vec![(6, 8, 8), (12, 4, 4), (24, 2, 2), (48, 2, 2)];
    let clcrp = Clcrp::new(
        &mut store,
        &mut init,
        &shapes,
        d,
        &DeformAttnConfig {
            heads: 1,
            points: 4,
            layers: 1,
        },
        false,
    )
    .unwrap();
    // identity value and output projections, single head; offsets and
    // attention weights keep their zero initialization (uniform weights)
    for pname in ["clcrp.layer0.value", "clcrp.layer0.out"] {
        let wid = store.find(&format!("{pname}.weight")).unwrap();
        let e = store.get_mut(wid);
        e.data.iter_mut().for_each(|v| *v = 0.0);
        for i in 0..d {
            e.data[i * d + i] = 1.0;
        }
    }

    let mut rng = SeededRng::new(0xACCE14);
    let s_total = clcrp.sequence_len();
    let src_data = rand_vec(&mut rng, s_total * d, 1.0);
    let mut g = Graph::new();
    let src = g.constant_from(vec![s_total, d], src_data.clone());
    let agg = clcrp.aggregate_layer(&mut g, &store, 0, src).unwrap();
    let got = g.data(agg).to_vec();

    // independent direct evaluation: mean over levels of bilinear
    // samples of the raw sequence at each query's reference point
    let level_hw = [(4usize, 4usize), (2, 2), (2, 2)];
    let spans = clcrp.spans().to_vec();
    let sample = |l: usize, xn: f64, yn: f64, ch: usize| -> f64 {
        let (h, w) = level_hw[l];
        let (start, _) = spans[l];
        let px = if w > 1 { xn * (w - 1) as f64 } else { 0.0 };
        let py = if h > 1 { yn * (h - 1) as f64 } else { 0.0 };
        let x0 = (px.floor() as usize).min(w - 2);
        let y0 = (py.floor() as usize).min(h - 2);
        let (fx, fy) = (px - x0 as f64, py - y0 as f64);
        let at = |y: usize, x: usize| src_data[(start + y * w + x) * d + ch];
        (1.0 - fy) * ((1.0 - fx) * at(y0, x0) + fx * at(y0, x0 + 1))
            + fy * ((1.0 - fx) * at(y0 + 1, x0) + fx * at(y0 + 1, x0 + 1))
    };
    let mut worst: f64 = 0.0;
    let mut q = 0;
    for &(h, w) in &level_hw {
        for y in 0..h {
            for x in 0..w {
                let rx = (x as f64 + 0.5) / w as f64;
                let ry = (y as f64 + 0.5) / h as f64;
                for ch in 0..d {
                    let want = (0..3).map(|l| sample(l, rx, ry, ch)).sum::<f64>() / 3.0;
                    worst = worst.max((want - got[q * d + ch]).abs());
                }
                q += 1;
            }
        }
    }
    assert!(worst < 1e-9, "deformable oracle gap {worst:.3e}");
    pass(
        "criterion 4 (deformable-attention oracle)",
        format!("max |gap| = {worst:.3e} against direct mean of bilinear samples"),
    );
}

// ── criterion 5: positional-encoding uniqueness ─────────────────────────

#[test]
fn criterion_5_positional_encoding_uniqueness() {
    let rows = positional_encoding_rows(64, 64, 64).unwrap();
    let n = 64 * 64;
    let mut min_gap = f64::INFINITY;
    for i in 0..n {
        for j in (i + 1)..n {
            let a = &rows[i * 64..(i + 1) * 64];
            let b = &rows[j * 64..(j + 1) * 64];
            let mut gap: f64 = 0.0;
            for (x, y) in a.iter().zip(b) {
                gap = gap.max((x - y).abs());
                if gap >= min_gap {
                    break;
                }
            }
            if gap < min_gap {
                min_gap = gap;
            }
        }
    }
    assert!(min_gap > 1e-9, "minimum pairwise L-inf distance {min_gap:.3e}");
    pass(
        "criterion 5 (positional-encoding uniqueness)",
        format!("min pairwise L-inf distance on 64x64, d=64: {min_gap:.3e}"),
    );
}

// ── criterion 6: metrics oracle ─────────────────────────────────────────

#[test]
fn criterion_6_metrics_oracle() {
    use num_rational::Ratio;
    use num_traits::ToPrimitive;

    // worked example
    let c = ConfusionCounts {
        tp: 50,
        tn: 40,
        fp: 5,
        fn_: 5,
    };
    let r = compute_metrics(&c);
    assert!((r.oa - 0.9).abs() < 1e-12);
    assert!((r.f1 - 10.0 / 11.0).abs() < 1e-12);
    assert!((r.miou - (5.0 / 6.0 + 4.0 / 5.0) / 2.0).abs() < 1e-12);

    let mut rng = SeededRng::new(0xACCE06);
    for trial in 0..100 {
        let pred: Vec<u8> = (0..256).map(|_| (rng.uniform() > 0.5) as u8).collect();
        let gt: Vec<u8> = (0..256).map(|_| (rng.uniform() > 0.7) as u8).collect();
        let counts = confusion_counts(&pred, &gt).unwrap();
        let got = compute_metrics(&counts);

        // independent per-pixel rational oracle
        let (mut tp, mut tn, mut fp, mut fn_) = (0i64, 0i64, 0i64, 0i64);
        for i in 0..256 {
            match (pred[i], gt[i]) {
                (1, 1) => tp += 1,
                (0, 0) => tn += 1,
                (1, 0) => fp += 1,
                _ => fn_ += 1,
            }
        }
        let rational = |num: i64, den: i64| -> (f64, bool) {
            if den == 0 {
                (0.0, false)
            } else {
                (Ratio::new(num, den).to_f64().unwrap(), true)
            }
        };
        let checks = [
            (got.oa, rational(tp + tn, tp + tn + fp + fn_)),
            (got.pre, rational(tp, tp + fp)),
            (got.rec, rational(tp, tp + fn_)),
            (got.f1, rational(2 * tp, 2 * tp + fp + fn_)),
            (got.iou_c, rational(tp, tp + fp + fn_)),
            (got.iou_u, rational(tn, tn + fp + fn_)),
        ];
        for (i, (have, (want, _defined))) in checks.iter().enumerate() {
            assert!(
                (have - want).abs() == 0.0 || (have - want).abs() < 1e-15,
                "trial {trial} metric {i}: {have} vs {want}"
            );
        }
        assert_eq!(got.miou, (got.iou_c + got.iou_u) / 2.0);
    }
    pass(
        "criterion 6 (metrics oracle)",
        "100 random grids matched the rational per-pixel oracle; worked example exact".into(),
    );
}

// ── criteria 7 and 8: training behavior ─────────────────────────────────

fn desk_run_config() -> RunConfig {
    let mut cfg = RunConfig::default();
    // The paper's 5e-5 presumes a pretrained backbone at batch 16; the
    // desk-scale model trains from scratch, so the acceptance harness
    // uses a from-scratch rate. The model section stays fully default.
    cfg.train.lr = 1e-3;
    cfg.data.synthetic = true;
    cfg
}

#[test]
fn criterion_7_overfit_acceptance() {
    let start = Instant::now();
    let cfg = desk_run_config();
    assert_eq!(cfg.model, ModelConfig::default(), "model must be the default");
    assert_eq!(cfg.data.synthetic_train_tiles, 8);
    assert_eq!(cfg.model.tile_size, 64);

    let train_set = TileDataset::synthetic(
        cfg.train.seed,
        &cfg.data.train_split,
        64,
        8,
        cfg.data.synthetic_shapes,
    );
    let mut trainer = Trainer::new(&cfg).unwrap();
    let mut first_loss = None;
    let mut last_loss = 0.0;
    for _ in 0..500 {
        let rec = trainer.train_step(&train_set).unwrap();
        if first_loss.is_none() {
            first_loss = Some(rec.total);
        }
        last_loss = rec.total;
    }
    let report = evaluate_dataset(&trainer.model, &train_set).unwrap();
    let elapsed = start.elapsed();
    let first_loss = first_loss.unwrap();
    assert!(
        elapsed.as_secs_f64() < 1800.0,
        "overfit run took {elapsed:?}, budget 30 minutes"
    );
    assert!(
        report.f1 >= 0.95,
        "train-set F1 {:.4} below 0.95 (oa {:.4}, miou {:.4})",
        report.f1,
        report.oa,
        report.miou
    );
    assert!(
        last_loss < 0.1 * first_loss,
        "loss at step 500 ({last_loss:.4}) not below 10% of step 1 ({first_loss:.4})"
    );
    pass(
        "criterion 7 (overfit acceptance)",
        format!(
            "train F1 {:.4}, loss {:.2} -> {:.2} ({:.1}%), wall {:.1?}",
            report.f1,
            first_loss,
            last_loss,
            100.0 * last_loss / first_loss,
            elapsed
        ),
    );
}

#[test]
fn criterion_8_ablation_ordering() {
    // Same synthetic split and step budget for every variant; budget
    // chosen so the full model converges while variants remain
    // distinguishable.
    let steps = 300;
    let mut base = desk_run_config();
    base.train.steps = steps;

    let val_set = TileDataset::synthetic(
        base.train.seed,
        &base.data.val_split,
        64,
        base.data.synthetic_val_tiles,
        base.data.synthetic_shapes,
    );
    let train_set = TileDataset::synthetic(
        base.train.seed,
        &base.data.train_split,
        64,
        base.data.synthetic_train_tiles,
        base.data.synthetic_shapes,
    );

    let run_variant = |tag: &str, mutate: &dyn Fn(&mut ModelConfig)| -> f64 {
        let mut cfg = base.clone();
        mutate(&mut cfg.model);
        let mut trainer = Trainer::new(&cfg).unwrap();
        for _ in 0..steps {
            trainer.train_step(&train_set).unwrap();
        }
        let report = evaluate_dataset(&trainer.model, &val_set).unwrap();
        println!("  variant {tag}: val F1 {:.4}", report.f1);
        report.f1
    };

    let full = run_variant("full", &|_| {});
    let no_deform = run_variant("disable_deform_mhsa", &|m| m.disable_deform_mhsa = true);
    let no_ma = run_variant("disable_masked_attention", &|m| {
        m.disable_masked_attention = true
    });
    let per_pixel = run_variant("per_pixel_head", &|m| m.per_pixel_head = true);

    for (name, f1) in [
        ("disable_deform_mhsa", no_deform),
        ("disable_masked_attention", no_ma),
        ("per_pixel_head", per_pixel),
    ] {
        assert!(
            full >= f1 - 0.02,
            "full model F1 {full:.4} below ablation {name} ({f1:.4}) by more than 0.02"
        );
    }
    pass(
        "criterion 8 (ablation ordering)",
        format!(
            "full {full:.4} vs no-deform {no_deform:.4}, no-ma {no_ma:.4}, per-pixel {per_pixel:.4}"
        ),
    );
}

// ── criterion 9: determinism through the CLI ────────────────────────────

#[test]
fn criterion_9_determinism() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().to_str().unwrap().to_string();
    let run = |name: &str, extra: &[&str]| {
        let mut args = vec![
            "train",
            "--synthetic",
            "--steps",
            "10",
            "--seed",
            "8888",
            "--checkpoint-every",
            "5",
            "--run-root",
            &root,
            "--name",
            name,
        ];
        args.extend_from_slice(extra);
        let out = Command::new(env!("CARGO_BIN_EXE_maskcd"))
            .args(&args)
            .output()
            .expect("binary runs");
        assert!(
            out.status.success(),
            "{}",
            String::from_utf8_lossy(&out.stderr)
        );
    };

    run("a", &[]);
    run("b", &[]);
    let log_a = std::fs::read(dir.path().join("a/loss.jsonl")).unwrap();
    let log_b = std::fs::read(dir.path().join("b/loss.jsonl")).unwrap();
    assert_eq!(log_a, log_b, "same-seed loss logs differ");
    let ck_a = std::fs::read(dir.path().join("a/last.mkcd")).unwrap();
    let ck_b = std::fs::read(dir.path().join("b/last.mkcd")).unwrap();
    assert_eq!(ck_a, ck_b, "same-seed checkpoints differ");

    // interrupt at the step-5 checkpoint, resume to step 10
    let resume_ckpt = dir.path().join("a/ckpt-000005.mkcd");
    assert!(resume_ckpt.is_file());
    run(
        "c",
        &["--resume", resume_ckpt.to_str().unwrap()],
    );
    let log_c = std::fs::read_to_string(dir.path().join("c/loss.jsonl")).unwrap();
    let log_a = String::from_utf8(log_a).unwrap();
    let tail_a: Vec<&str> = log_a.lines().skip(5).collect();
    let lines_c: Vec<&str> = log_c.lines().collect();
    assert_eq!(lines_c, tail_a, "resumed steps 6-10 differ from continuous");
    let ck_c = std::fs::read(dir.path().join("c/last.mkcd")).unwrap();
    assert_eq!(ck_a, ck_c, "resumed final checkpoint differs");
    pass(
        "criterion 9 (determinism)",
        "bit-identical logs and checkpoints; resume reproduces steps 6-10 exactly".into(),
    );
}

// ── criterion 10: change-map permutation invariance ─────────────────────

#[test]
fn criterion_10_change_map_permutation_invariance() {
    let mut rng = SeededRng::new(0xACCE10);
    for trial in 0..100 {
        let n = 75;
        let (h, w) = (8, 8);
        let logits: Vec<f64> = (0..n * 3).map(|_| rng.normal(0.0, 2.0)).collect();
        let pairs = ProbMaskPairs {
            n,
            n_classes: 3,
            h,
            w,
            probs: softmax_rows(&logits, n, 3),
            mask_logits: (0..n * h * w).map(|_| rng.normal(0.0, 3.0)).collect(),
        };
        let perm = rng.permutation(n);
        let base = assemble_change_map(&pairs, 4).unwrap();
        let shuffled = assemble_change_map(&pairs.permuted(&perm), 4).unwrap();
        assert_eq!(base, shuffled, "trial {trial}: maps differ bitwise");
    }
    pass(
        "criterion 10 (change-map permutation invariance)",
        "100 random trials bit-identical under query permutation".into(),
    );
}

// ── supporting behavioral check from the CLI contract ───────────────────

#[test]
fn overfit_model_predicts_no_change_on_identical_inputs() {
    // A short converged-enough run; identical inputs must map to an
    // overwhelmingly unchanged output.
    let mut cfg = desk_run_config();
    cfg.train.steps = 150;
    let train_set = TileDataset::synthetic(cfg.train.seed, "train", 64, 8, 4);
    let mut trainer = Trainer::new(&cfg).unwrap();
    for _ in 0..150 {
        trainer.train_step(&train_set).unwrap();
    }
    let item = &train_set.items[0];
    let map = trainer
        .model
        .predict_change_map(&item.img_t1, &item.img_t1)
        .unwrap();
    let changed = map.labels.iter().filter(|&&v| v != 0).count();
    let frac = changed as f64 / map.labels.len() as f64;
    assert!(
        frac <= 0.01,
        "identical inputs produced {:.2}% changed pixels",
        100.0 * frac
    );
    let model = Model::new(&cfg.model, cfg.train.seed).unwrap();
    drop(model);
}
