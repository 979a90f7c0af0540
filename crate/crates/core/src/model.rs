//! Full model assembly: encoder -> perceiver -> decoder -> heads, plus
//! the per-pixel classification ablation (1x1 convolution on gamma_1) and
//! the inference path producing change maps.

use crate::clcrp::Clcrp;
use crate::config::ModelConfig;
use crate::data::dataset::TileItem;
use crate::decoder::Decoder;
use crate::encoder::Encoder;
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::head::{
    assemble_change_map, bilinear_upsample, ChangeMap, MaskHead, ProbMaskPairs,
};
use crate::loss::{
    downsample_label_nearest, maskcd_loss, GroundTruthSegments, LossBreakdown, LossWeights,
    StagePredictions,
};
use crate::params::{ParamId, ParamStore};
use crate::rng::substream;
use crate::tensor::Tensor;

/// Upsampling factor from mask resolution back to the input tile.
pub const MASK_STRIDE: usize = 4;

enum NetworkKind {
    Mask {
        decoder: Decoder,
        head: MaskHead,
    },
    PerPixel {
        kernel: ParamId,
        bias: ParamId,
    },
}

pub struct Model {
    pub cfg: ModelConfig,
    pub store: ParamStore,
    encoder: Encoder,
    clcrp: Clcrp,
    kind: NetworkKind,
}

/// Per-tile graph outputs.
pub enum TileOutput {
    Mask {
        final_preds: StagePredictions,
        aux_preds: Vec<StagePredictions>,
    },
    PerPixel {
        /// `[2, H1, W1]` class logits (changed, unchanged).
        logits: Var,
    },
}

impl Model {
    pub fn new(cfg: &ModelConfig, seed: u64) -> Result<Model> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let mut rng = substream(seed, "init", 0);
        let hw = (cfg.tile_size, cfg.tile_size);
        let encoder = Encoder::new(&mut store, &mut rng, &cfg.encoder, hw)?;
        let delta_shapes: Vec<(usize, usize, usize)> = encoder
            .level_shapes()
            .iter()
            .map(|&(c, h, w)| (2 * c, h, w))
            .collect();
        let clcrp = Clcrp::new(
            &mut store,
            &mut rng,
            &delta_shapes,
            cfg.hidden_dim,
            &cfg.deform,
            cfg.disable_deform_mhsa,
        )?;
        let gamma_shapes: Vec<(usize, usize, usize)> = delta_shapes
            .iter()
            .map(|&(_, h, w)| (cfg.hidden_dim, h, w))
            .collect();
        let kind = if cfg.per_pixel_head {
            let kernel = store.register_normal(
                "pixel_head.kernel",
                vec![2, cfg.hidden_dim, 1, 1],
                crate::nn::INIT_STD,
                &mut rng,
            );
            let bias = store.register_zeros("pixel_head.bias", vec![2]);
            NetworkKind::PerPixel { kernel, bias }
        } else {
            let head = MaskHead::new(&mut store, &mut rng, cfg.hidden_dim, cfg.two_logit_classes);
            let decoder = Decoder::new(
                &mut store,
                &mut rng,
                &cfg.decoder,
                cfg.num_queries,
                cfg.hidden_dim,
                &gamma_shapes,
                cfg.disable_masked_attention,
            )?;
            NetworkKind::Mask { decoder, head }
        };
        Ok(Model {
            cfg: cfg.clone(),
            store,
            encoder,
            clcrp,
            kind,
        })
    }

    /// (H, W) of the stride-4 mask grid.
    pub fn mask_hw(&self) -> (usize, usize) {
        let (_, h, w) = self.encoder.level_shapes()[0];
        (h, w)
    }

    /// Convert channel-major RGB bytes to a [0,1]-scaled image tensor.
    pub fn image_tensor(bytes: &[u8], h: usize, w: usize) -> Result<Tensor> {
        let data: Vec<f64> = bytes.iter().map(|&v| v as f64 / 255.0).collect();
        Tensor::new(vec![3, h, w], data)
    }

    pub fn forward_tile(&self, g: &mut Graph, img_t1: Var, img_t2: Var) -> Result<TileOutput> {
        let feats = self.encoder.siamese_forward(g, &self.store, img_t1, img_t2)?;
        let emb = self.clcrp.forward(g, &self.store, &feats.delta)?;
        match &self.kind {
            NetworkKind::Mask { decoder, head } => {
                let dec = decoder.forward(g, &self.store, &emb.gamma, &head.mask_mlp)?;
                let mut preds = Vec::with_capacity(dec.stage_states.len());
                for &state in &dec.stage_states {
                    let class_logits = head.classify_queries(g, &self.store, state)?;
                    let mask_logits =
                        head.masks_from_embeddings(g, &self.store, state, emb.gamma[0])?;
                    preds.push(StagePredictions {
                        class_logits,
                        mask_logits,
                    });
                }
                let final_preds = preds.pop().expect("decoder has at least one stage");
                Ok(TileOutput::Mask {
                    final_preds,
                    aux_preds: preds,
                })
            }
            NetworkKind::PerPixel { kernel, bias } => {
                let k = g.param(&self.store, *kernel);
                let b = g.param(&self.store, *bias);
                let y = g.conv2d(emb.gamma[0], k, 0)?;
                let (h, w) = self.mask_hw();
                let y2 = g.reshape(y, vec![2, h * w])?;
                let y2 = g.add_col_vec(y2, b)?;
                let logits = g.reshape(y2, vec![2, h, w])?;
                Ok(TileOutput::PerPixel { logits })
            }
        }
    }

    /// Training loss of one tile against its full-resolution label.
    pub fn tile_loss(
        &self,
        g: &mut Graph,
        out: &TileOutput,
        label: &[u8],
        weights: &LossWeights,
    ) -> Result<(Var, LossBreakdown)> {
        let t = self.cfg.tile_size;
        if label.len() != t * t {
            return Err(Error::dims("label", &[t, t], &[label.len()]));
        }
        let (h, w) = self.mask_hw();
        let label_s4 = downsample_label_nearest(label, t, t, MASK_STRIDE);
        match out {
            TileOutput::Mask {
                final_preds,
                aux_preds,
            } => {
                let gt = GroundTruthSegments::from_binary_label(&label_s4, h, w)?;
                maskcd_loss(g, final_preds, aux_preds, &gt, weights)
            }
            TileOutput::PerPixel { logits } => {
                let flat = g.reshape(*logits, vec![2, h * w])?;
                let rows = g.transpose(flat)?; // [HW, 2]
                let targets: Vec<usize> = label_s4
                    .iter()
                    .map(|&v| {
                        if v != 0 {
                            crate::head::CLASS_CHANGED
                        } else {
                            crate::head::CLASS_UNCHANGED
                        }
                    })
                    .collect();
                let n = (h * w) as f64;
                let wvec = vec![1.0 / n; h * w];
                let ce = g.ce_rows(rows, std::rc::Rc::new(targets), std::rc::Rc::new(wvec))?;
                let ce = g.scale(ce, weights.cls);
                let cls = g.data(ce)[0];
                let breakdown = LossBreakdown {
                    total: cls,
                    cls,
                    bce: 0.0,
                    dice: 0.0,
                    per_stage: vec![],
                };
                Ok((ce, breakdown))
            }
        }
    }

    /// Inference: run one pair and assemble the full-resolution change map.
    pub fn predict_change_map(&self, item_t1: &[u8], item_t2: &[u8]) -> Result<ChangeMap> {
        let t = self.cfg.tile_size;
        let mut g = Graph::new();
        let t1 = g.constant(Self::image_tensor(item_t1, t, t)?);
        let t2 = g.constant(Self::image_tensor(item_t2, t, t)?);
        let out = self.forward_tile(&mut g, t1, t2)?;
        let (h, w) = self.mask_hw();
        match out {
            TileOutput::Mask { final_preds, .. } => {
                let pairs = ProbMaskPairs::from_graph(
                    &g,
                    final_preds.class_logits,
                    final_preds.mask_logits,
                    h,
                    w,
                );
                assemble_change_map(&pairs, MASK_STRIDE)
            }
            TileOutput::PerPixel { logits } => {
                let data = g.data(logits);
                let changed = bilinear_upsample(&data[..h * w], h, w, MASK_STRIDE);
                let unchanged = bilinear_upsample(&data[h * w..], h, w, MASK_STRIDE);
                let labels = changed
                    .iter()
                    .zip(&unchanged)
                    .map(|(c, u)| u8::from(c > u))
                    .collect();
                Ok(ChangeMap {
                    h: h * MASK_STRIDE,
                    w: w * MASK_STRIDE,
                    labels,
                    score_changed: changed,
                    score_unchanged: unchanged,
                })
            }
        }
    }

    pub fn predict_item(&self, item: &TileItem) -> Result<ChangeMap> {
        self.predict_change_map(&item.img_t1, &item.img_t2)
    }
}
