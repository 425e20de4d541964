//! Hierarchical encoder with HILA wrapping, plus the segmentation head.
//!
//! Each stage patch-merges its input and runs `N` spatial-reduction blocks.
//! When HILA is on, every `s`-th block becomes a HILA block: a top-down
//! update of the previous stage's map (skipped for the first wrapped block),
//! then a bottom-up update whose self-attention is that block's own. The
//! inter-level layers, their FFNs and the extra lower-level block are shared
//! by all wrapped blocks of the stage.

mod blocks;
mod config;
#[cfg(test)]
mod tests;

use crate::autograd::{Graph, ParamStore, Var};
use crate::error::{config as config_err, contract, Result};
use crate::interlevel::{
    bottom_up_attention, mix_ffn, top_down_attention_efficient, Direction, InterLevelAttnParams,
    InterLevelWeights, MixFfnParams,
};
use crate::layers::Linear;
use crate::tensor::{count_macs, PatchGeometry, Scalar, Tensor};

pub use blocks::{patch_merge, sra_attention, sra_block, PatchMergeParams, SraBlockParams};
pub use config::{ModelConfig, StageConfig, INPUT_MULTIPLE, LADDER_STRIDES};

/// Label value excluded from the loss and from metrics.
pub const IGNORE_INDEX: u8 = 255;

/// One stage's feature map inside a graph. `iteration` counts how many
/// blocks and top-down updates have produced it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FeatureMap {
    pub var: Var,
    /// 1-based stage index.
    pub stage: usize,
    pub iteration: usize,
}

/// What block `i` of a stage does.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BlockRole {
    Plain,
    /// First wrapped block of the stage: bottom-up update only.
    BottomUp,
    TopDownBottomUp,
}

/// Roles of blocks `1..=n`: every `s`-th block is wrapped when `hila` is on.
pub fn block_schedule(n: usize, s: usize, hila: bool) -> Vec<BlockRole> {
    let mut seen = false;
    (1..=n)
        .map(|i| {
            if !hila || s == 0 || i % s != 0 {
                BlockRole::Plain
            } else if seen {
                BlockRole::TopDownBottomUp
            } else {
                seen = true;
                BlockRole::BottomUp
            }
        })
        .collect()
}

/// Shared HILA parameters of one stage.
#[derive(Debug, Clone)]
pub struct HilaParams {
    pub bu_attn: InterLevelAttnParams,
    pub td_attn: InterLevelAttnParams,
    pub bu_ffn: MixFfnParams,
    pub td_ffn: MixFfnParams,
    /// Fresh self-attention block for the lower level, built with the
    /// previous stage's hyper-parameters.
    pub td_block: SraBlockParams,
    pub alpha: f64,
    pub beta: f64,
}

impl HilaParams {
    pub fn num_params(&self) -> usize {
        self.bu_attn.num_params()
            + self.td_attn.num_params()
            + self.bu_ffn.num_params()
            + self.td_ffn.num_params()
            + self.td_block.num_params()
    }
}

#[derive(Debug, Clone)]
pub struct StageParams {
    pub merge: PatchMergeParams,
    pub blocks: Vec<SraBlockParams>,
    pub hila: Option<HilaParams>,
    pub s_stride: usize,
}

impl StageParams {
    pub fn num_params(&self) -> usize {
        self.merge.num_params()
            + self.blocks.iter().map(SraBlockParams::num_params).sum::<usize>()
            + self.hila.as_ref().map_or(0, HilaParams::num_params)
    }
}

#[derive(Debug, Clone)]
pub struct DecodeHeadParams {
    /// Per-stage projection to the decode width.
    pub proj: Vec<Linear>,
    pub fuse: Linear,
    pub classifier: Linear,
}

impl DecodeHeadParams {
    pub fn num_params(&self) -> usize {
        self.proj.iter().map(Linear::num_params).sum::<usize>()
            + self.fuse.num_params()
            + self.classifier.num_params()
    }
}

/// Instrumentation of one stage's forward pass.
#[derive(Debug, Clone)]
pub struct StageTrace<T> {
    /// 1-based stage index.
    pub stage: usize,
    /// 1-based indices of HILA-wrapped blocks.
    pub wrapped_blocks: Vec<usize>,
    /// Blocks that ran a top-down update.
    pub top_down_blocks: Vec<usize>,
    /// MACs of the bottom-up attention layers (projections and dot products).
    pub bottom_up_macs: u64,
    pub top_down_macs: u64,
    pub last_bottom_up: Option<InterLevelWeights<T>>,
    pub last_top_down: Option<InterLevelWeights<T>>,
}

impl<T> StageTrace<T> {
    fn new(stage: usize) -> Self {
        Self {
            stage,
            wrapped_blocks: Vec::new(),
            top_down_blocks: Vec::new(),
            bottom_up_macs: 0,
            top_down_macs: 0,
            last_bottom_up: None,
            last_top_down: None,
        }
    }

    pub fn interlevel_macs(&self) -> u64 {
        self.bottom_up_macs + self.top_down_macs
    }
}

#[derive(Debug, Clone)]
pub struct EncoderOutput<T> {
    /// Final map of every stage, after all top-down refinement.
    pub features: Vec<FeatureMap>,
    pub trace: Vec<StageTrace<T>>,
}

/// Parameter handles of a full model. The values live in a [`ParamStore`].
#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub stages: Vec<StageParams>,
    pub head: DecodeHeadParams,
}

impl Model {
    /// Registers every parameter of `config` in `store`.
    pub fn register<T: Scalar>(config: &ModelConfig, store: &mut ParamStore<T>) -> Result<Self> {
        config.validate()?;
        let mut stages = Vec::with_capacity(4);
        let mut cin = config.input_channels;
        for (i, sc) in config.stages.iter().enumerate() {
            let name = format!("stage{}", i + 1);
            let merge = PatchMergeParams::new(store, &format!("{name}.merge"), cin, sc.d, sc.kernel, sc.stride)?;
            let blocks = (1..=sc.blocks)
                .map(|j| SraBlockParams::new(store, &format!("{name}.block{j}"), sc.d, sc.heads, sc.reduction, sc.expansion))
                .collect::<Result<Vec<_>>>()?;
            let hila = if sc.hila {
                let lo = &config.stages[i - 1];
                let geom = PatchGeometry::for_patch(sc.p_patch)?;
                let h = format!("{name}.hila");
                Some(HilaParams {
                    bu_attn: InterLevelAttnParams::new(store, &format!("{h}.bu_attn"), Direction::BottomUp, sc.d, lo.d, geom)?,
                    td_attn: InterLevelAttnParams::new(store, &format!("{h}.td_attn"), Direction::TopDown, sc.d, lo.d, geom)?,
                    bu_ffn: MixFfnParams::new(store, &format!("{h}.bu_ffn"), sc.d, sc.expansion)?,
                    td_ffn: MixFfnParams::new(store, &format!("{h}.td_ffn"), lo.d, lo.expansion)?,
                    td_block: SraBlockParams::new(store, &format!("{h}.td_block"), lo.d, lo.heads, lo.reduction, lo.expansion)?,
                    alpha: sc.alpha,
                    beta: sc.beta,
                })
            } else {
                None
            };
            stages.push(StageParams {
                merge,
                blocks,
                hila,
                s_stride: sc.s_stride,
            });
            cin = sc.d;
        }
        let dd = config.decode_dim;
        let head = DecodeHeadParams {
            proj: config
                .stages
                .iter()
                .enumerate()
                .map(|(i, sc)| Linear::new(store, &format!("head.proj{}", i + 1), sc.d, dd))
                .collect::<Result<Vec<_>>>()?,
            fuse: Linear::new(store, "head.fuse", 4 * dd, dd)?,
            classifier: Linear::new(store, "head.classifier", dd, config.num_classes)?,
        };
        Ok(Self {
            config: config.clone(),
            stages,
            head,
        })
    }

    /// Fresh model and parameters. Every parameter draws from its own
    /// stream keyed by `(seed, name)`, so models that differ only in HILA
    /// start from identical backbone weights.
    pub fn init<T: Scalar>(config: &ModelConfig, seed: u64) -> Result<(Self, ParamStore<T>)> {
        let mut store = ParamStore::new(seed);
        let model = Self::register(config, &mut store)?;
        Ok((model, store))
    }

    /// Handles for an existing store, e.g. one loaded from a checkpoint.
    /// Names and shapes must match what `config` would register.
    pub fn bind<T: Scalar>(config: &ModelConfig, store: &ParamStore<T>) -> Result<Self> {
        let (model, fresh) = Self::init::<T>(config, store.seed())?;
        if fresh.len() != store.len() {
            return Err(config_err(format!(
                "checkpoint has {} parameters, config expects {}",
                store.len(),
                fresh.len()
            )));
        }
        for ((_, a, ta), (_, b, tb)) in fresh.iter().zip(store.iter()) {
            if a != b || ta.shape() != tb.shape() {
                return Err(config_err(format!(
                    "checkpoint parameter {b:?} {:?} does not match expected {a:?} {:?}",
                    tb.shape(),
                    ta.shape()
                )));
            }
        }
        Ok(model)
    }

    pub fn num_params(&self) -> usize {
        self.stages.iter().map(StageParams::num_params).sum::<usize>() + self.head.num_params()
    }

    /// Runs stage `index` (0-based). Returns the stage output and the
    /// refined lower-level map when HILA is on.
    pub fn run_stage<T: Scalar>(
        &self,
        g: &Graph<'_, T>,
        index: usize,
        input: Var,
        lower: Option<FeatureMap>,
    ) -> Result<(FeatureMap, Option<FeatureMap>, StageTrace<T>)> {
        let sp = &self.stages[index];
        let sc = &self.config.stages[index];
        let stage = index + 1;
        let mut trace = StageTrace::new(stage);
        let mut x = FeatureMap {
            var: patch_merge(g, input, &sp.merge)?,
            stage,
            iteration: 0,
        };
        let mut lo = lower;
        let roles = block_schedule(sc.blocks, sc.s_stride, sp.hila.is_some());
        for (i, (role, block)) in roles.iter().zip(&sp.blocks).enumerate() {
            let i = i + 1;
            let hp = match (role, &sp.hila) {
                (BlockRole::Plain, _) | (_, None) => {
                    x = FeatureMap {
                        var: sra_block(g, x.var, block)?,
                        stage,
                        iteration: i,
                    };
                    continue;
                }
                (_, Some(hp)) => hp,
            };
            let mut l = lo.ok_or_else(|| contract(format!("stage {stage}: HILA needs the previous stage's map")))?;
            trace.wrapped_blocks.push(i);
            if *role == BlockRole::TopDownBottomUp {
                let (r, macs) = count_macs(|| top_down_attention_efficient(g, l.var, x.var, &hp.td_attn));
                let (y, wts) = r?;
                let y = mix_ffn(g, y, &hp.td_ffn, hp.alpha, hp.beta)?;
                let y = sra_block(g, y, &hp.td_block)?;
                l = FeatureMap {
                    var: y,
                    stage: l.stage,
                    iteration: l.iteration + 1,
                };
                trace.top_down_blocks.push(i);
                trace.top_down_macs += macs;
                trace.last_top_down = Some(wts);
                lo = Some(l);
            }
            let (r, macs) = count_macs(|| bottom_up_attention(g, x.var, l.var, &hp.bu_attn));
            let (y, wts) = r?;
            let y = mix_ffn(g, y, &hp.bu_ffn, hp.alpha, hp.beta)?;
            x = FeatureMap {
                var: sra_block(g, y, block)?,
                stage,
                iteration: i,
            };
            trace.bottom_up_macs += macs;
            trace.last_bottom_up = Some(wts);
        }
        Ok((x, if sp.hila.is_some() { lo } else { None }, trace))
    }

    /// All four stages. `image` is `[B, H, W, input_channels]` with `H`, `W`
    /// multiples of 32.
    pub fn forward_encoder<T: Scalar>(&self, g: &Graph<'_, T>, image: Var) -> Result<EncoderOutput<T>> {
        let shape = g.shape(image);
        match shape[..] {
            [_, h, w, c] if c == self.config.input_channels => {
                self.config.stage_sizes(h, w)?;
            }
            _ => {
                return Err(contract(format!(
                    "image {shape:?} is not [B, H, W, {}]",
                    self.config.input_channels
                )))
            }
        }
        let mut features: Vec<FeatureMap> = Vec::with_capacity(4);
        let mut trace = Vec::with_capacity(4);
        let mut input = image;
        for index in 0..4 {
            let (hi, lo, tr) = self.run_stage(g, index, input, features.last().copied())?;
            if let Some(lo) = lo {
                *features.last_mut().expect("lower stage exists") = lo;
            }
            input = hi.var;
            features.push(hi);
            trace.push(tr);
        }
        Ok(EncoderOutput { features, trace })
    }

    /// Logits at 1/4 input resolution.
    pub fn decode_head<T: Scalar>(&self, g: &Graph<'_, T>, features: &[FeatureMap]) -> Result<Var> {
        if features.len() != 4 {
            return Err(contract(format!("decode_head needs 4 feature maps, got {}", features.len())));
        }
        let top = g.shape(features[0].var);
        let (h, w) = (top[1], top[2]);
        let parts = features
            .iter()
            .zip(&self.head.proj)
            .map(|(f, lin)| {
                let y = lin.apply(g, f.var)?;
                g.bilinear(y, h, w)
            })
            .collect::<Result<Vec<_>>>()?;
        let cat = g.concat_lastdim(&parts)?;
        let fused = self.head.fuse.apply(g, cat)?;
        self.head.classifier.apply(g, fused)
    }

    /// Encoder and head: logits `[B, H/4, W/4, num_classes]`.
    pub fn forward<T: Scalar>(&self, g: &Graph<'_, T>, image: Var) -> Result<(Var, EncoderOutput<T>)> {
        let enc = self.forward_encoder(g, image)?;
        let logits = self.decode_head(g, &enc.features)?;
        Ok((logits, enc))
    }

    /// Per-pixel class predictions at `out_h×out_w` for a batch of images.
    pub fn predict<T: Scalar>(&self, store: &ParamStore<T>, images: &Tensor<T>, out_h: usize, out_w: usize) -> Result<Vec<u8>> {
        let g = Graph::inference(store);
        let x = g.constant(images.clone());
        let (logits, _) = self.forward(&g, x)?;
        let up = g.bilinear(logits, out_h, out_w)?;
        Ok(argmax_lastdim(&g.value(up)))
    }
}

/// Index of the largest entry along the last axis (first one on ties).
pub fn argmax_lastdim<T: Scalar>(t: &Tensor<T>) -> Vec<u8> {
    let c = t.last_dim().max(1);
    t.data()
        .chunks(c)
        .map(|row| {
            let mut best = 0;
            for (k, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = k;
                }
            }
            best as u8
        })
        .collect()
}

/// Mean pixel cross-entropy after upsampling `logits` to the label grid.
/// `labels` is `[B, H, W]` flattened; [`IGNORE_INDEX`] pixels are skipped.
pub fn segmentation_loss<T: Scalar>(
    g: &Graph<'_, T>,
    logits: Var,
    labels: &[u8],
    label_h: usize,
    label_w: usize,
) -> Result<Var> {
    let up = g.bilinear(logits, label_h, label_w)?;
    g.cross_entropy(up, labels, IGNORE_INDEX)
}
