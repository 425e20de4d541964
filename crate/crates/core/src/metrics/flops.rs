//! Closed-form multiply-accumulate counts.
//!
//! One multiply-accumulate is one unit. Counts are per image. Only the terms
//! that the attention layers spend in projections and in `QKᵀ`/`AV` products
//! are covered; norms, softmax and the Mix-FFN are left out.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::encoder::{block_schedule, BlockRole, Model, ModelConfig};
use crate::error::{contract, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Term {
    FullyConnected,
    DotProduct,
}

/// Named MAC counts with their per-term totals.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlopsReport {
    pub components: BTreeMap<String, (Term, u64)>,
    pub fully_connected: u64,
    pub dot_product: u64,
    /// `Ω(Self-Attention)` of a full, unreduced attention over the same
    /// input, for comparison. Not part of `total`.
    pub self_attention: u64,
    pub total: u64,
}

impl FlopsReport {
    pub fn add(&mut self, name: &str, term: Term, macs: u64) {
        let e = self.components.entry(name.to_string()).or_insert((term, 0));
        debug_assert_eq!(e.0, term, "component {name} changed term");
        e.1 += macs;
        match term {
            Term::FullyConnected => self.fully_connected += macs,
            Term::DotProduct => self.dot_product += macs,
        }
        self.total += macs;
    }

    /// Adds every component of `other`, prefixed.
    pub fn absorb(&mut self, prefix: &str, other: &FlopsReport) {
        for (name, &(term, macs)) in &other.components {
            self.add(&format!("{prefix}{name}"), term, macs);
        }
        self.self_attention += other.self_attention;
    }

    pub fn scaled(&self, k: u64) -> FlopsReport {
        let mut out = FlopsReport { self_attention: self.self_attention * k, ..Default::default() };
        for (name, &(term, macs)) in &self.components {
            out.add(name, term, macs * k);
        }
        out
    }

    pub fn get(&self, name: &str) -> u64 {
        self.components.get(name).map_or(0, |c| c.1)
    }

    /// Sum of the components whose name starts with `prefix`.
    pub fn sum_prefix(&self, prefix: &str) -> u64 {
        self.components.iter().filter(|(n, _)| n.starts_with(prefix)).map(|(_, c)| c.1).sum()
    }

    /// Recomputes the totals from the parts.
    pub fn check(&self) -> Result<()> {
        let sum = |t: Term| self.components.values().filter(|c| c.0 == t).map(|c| c.1).sum::<u64>();
        let (fc, dot) = (sum(Term::FullyConnected), sum(Term::DotProduct));
        if fc != self.fully_connected || dot != self.dot_product || fc + dot != self.total {
            return Err(contract("flops totals disagree with their components"));
        }
        Ok(())
    }
}

fn u(x: usize) -> u64 {
    x as u64
}

/// Both inter-level directions with the default 4×4 patch.
pub fn flops_interlevel(d_hi: usize, d_lo: usize, h_hi: usize, w_hi: usize, h_lo: usize, w_lo: usize) -> FlopsReport {
    flops_interlevel_patch(d_hi, d_lo, h_hi, w_hi, h_lo, w_lo, 4)
}

/// Both inter-level directions for a `p×p` patch, under the components
/// `bottom_up.*` and `top_down.*`. The inner width is `min(d_hi, d_lo)`.
pub fn flops_interlevel_patch(
    d_hi: usize,
    d_lo: usize,
    h_hi: usize,
    w_hi: usize,
    h_lo: usize,
    w_lo: usize,
    p: usize,
) -> FlopsReport {
    let d = u(d_hi.min(d_lo));
    let (n_hi, n_lo) = (u(h_hi * w_hi), u(h_lo * w_lo));
    let (dh, dl) = (u(d_hi), u(d_lo));
    // Every higher location scores all p² slots of its window, so both the
    // scores and the weighted sum cost p²·d per window in each direction.
    let dot = u(p * p) * d * n_hi;
    let mut r = FlopsReport::default();
    r.add("bottom_up.q", Term::FullyConnected, n_hi * dh * d);
    r.add("bottom_up.k", Term::FullyConnected, n_lo * dl * d);
    r.add("bottom_up.v", Term::FullyConnected, n_lo * dl * d);
    r.add("bottom_up.f", Term::FullyConnected, n_hi * d * dh);
    r.add("bottom_up.qk", Term::DotProduct, dot);
    r.add("bottom_up.av", Term::DotProduct, dot);
    r.add("top_down.q", Term::FullyConnected, n_lo * dl * d);
    r.add("top_down.k", Term::FullyConnected, n_hi * dh * d);
    r.add("top_down.v", Term::FullyConnected, n_hi * dh * d);
    r.add("top_down.f", Term::FullyConnected, n_lo * d * dl);
    r.add("top_down.qk", Term::DotProduct, dot);
    r.add("top_down.av", Term::DotProduct, dot);
    r.self_attention = flops_selfattention(h_lo, w_lo, d_lo.min(d_hi));
    r
}

/// `4HWd² + 2dH²W²`.
pub fn flops_selfattention(h: usize, w: usize, d: usize) -> u64 {
    let (hw, d) = (u(h * w), u(d));
    4 * hw * d * d + 2 * d * hw * hw
}

/// Dot-product cost of full self-attention on an `h×w×d` map against the
/// bottom-up local attention with that map as the higher level. The ratio is
/// `hw/16`.
pub fn attention_dot_reduction(h: usize, w: usize, d: usize) -> (u64, u64) {
    let full = flops_selfattention(h, w, d) - 4 * u(h * w * d * d);
    let local = flops_interlevel(d, d, h, w, 2 * h, 2 * w);
    (full, local.get("bottom_up.qk") + local.get("bottom_up.av"))
}

/// Spatial-reduction self-attention on an `h×w×d` map with ratio `r`. The
/// map is padded up to a multiple of `r` before the reduction.
pub fn flops_sra(h: usize, w: usize, d: usize, r: usize) -> FlopsReport {
    let (n, d64) = (u(h * w), u(d));
    let mut rep = FlopsReport::default();
    let m = if r > 1 {
        let (hp, wp) = (h.div_ceil(r) * r, w.div_ceil(r) * r);
        let m = u((hp / r) * (wp / r));
        rep.add("reduce", Term::FullyConnected, m * u(r * r) * d64 * d64);
        m
    } else {
        n
    };
    rep.add("q", Term::FullyConnected, n * d64 * d64);
    rep.add("k", Term::FullyConnected, m * d64 * d64);
    rep.add("v", Term::FullyConnected, m * d64 * d64);
    rep.add("proj", Term::FullyConnected, n * d64 * d64);
    rep.add("qk", Term::DotProduct, n * m * d64);
    rep.add("av", Term::DotProduct, n * m * d64);
    rep.self_attention = flops_selfattention(h, w, d);
    rep
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageFlops {
    pub stage: usize,
    pub height: usize,
    pub width: usize,
    pub bottom_up_calls: u64,
    pub top_down_calls: u64,
    /// Inter-level attention over all calls of the stage.
    pub interlevel: FlopsReport,
    /// Self-attention over all blocks run in the stage, including the
    /// dedicated top-down blocks.
    pub self_attention: FlopsReport,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelFlops {
    pub height: usize,
    pub width: usize,
    pub stages: Vec<StageFlops>,
    pub interlevel_total: u64,
    pub self_attention_total: u64,
    pub params: usize,
}

/// Per-stage attention costs of one `h×w` image through `cfg`.
pub fn model_flops(cfg: &ModelConfig, h: usize, w: usize) -> Result<ModelFlops> {
    cfg.validate()?;
    let sizes = cfg.stage_sizes(h, w)?;
    let mut stages = Vec::with_capacity(4);
    for (i, sc) in cfg.stages.iter().enumerate() {
        let (sh, sw) = sizes[i];
        let roles = block_schedule(sc.blocks, sc.s_stride, sc.hila);
        let bu = roles.iter().filter(|r| **r != BlockRole::Plain).count() as u64;
        let td = roles.iter().filter(|r| **r == BlockRole::TopDownBottomUp).count() as u64;
        let mut inter = FlopsReport::default();
        if bu > 0 {
            let (lh, lw) = sizes[i - 1];
            let d_lo = cfg.stages[i - 1].d;
            let one = flops_interlevel_patch(sc.d, d_lo, sh, sw, lh, lw, sc.p_patch);
            let mut per = FlopsReport::default();
            for (name, &(term, macs)) in &one.components {
                let calls = if name.starts_with("bottom_up") { bu } else { td };
                per.add(name, term, macs * calls);
            }
            per.self_attention = one.self_attention * (bu + td);
            inter = per;
        }
        let mut sa = flops_sra(sh, sw, sc.d, sc.reduction).scaled(sc.blocks as u64);
        if td > 0 {
            let (lh, lw) = sizes[i - 1];
            let prev = &cfg.stages[i - 1];
            sa.absorb("top_down_block.", &flops_sra(lh, lw, prev.d, prev.reduction).scaled(td));
        }
        stages.push(StageFlops {
            stage: i + 1,
            height: sh,
            width: sw,
            bottom_up_calls: bu,
            top_down_calls: td,
            interlevel: inter,
            self_attention: sa,
        });
    }
    let (model, _) = Model::init::<f32>(cfg, 0)?;
    Ok(ModelFlops {
        height: h,
        width: w,
        interlevel_total: stages.iter().map(|s| s.interlevel.total).sum(),
        self_attention_total: stages.iter().map(|s| s.self_attention.total).sum(),
        stages,
        params: model.num_params(),
    })
}
