use serde::{Deserialize, Serialize};

use crate::error::{config, Result};

/// Hyper-parameters of one encoder stage. Field names double as the JSON
/// contract.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageConfig {
    /// Patch-merging kernel.
    #[serde(rename = "K")]
    pub kernel: usize,
    /// Patch-merging stride.
    #[serde(rename = "S")]
    pub stride: usize,
    pub d: usize,
    /// Transformer blocks in the stage.
    #[serde(rename = "N")]
    pub blocks: usize,
    #[serde(rename = "H")]
    pub heads: usize,
    /// Mix-FFN expansion ratio.
    #[serde(rename = "E")]
    pub expansion: usize,
    /// Spatial reduction ratio of the keys and values.
    #[serde(rename = "R")]
    pub reduction: usize,
    pub hila: bool,
    pub alpha: f64,
    pub beta: f64,
    /// HILA wraps every `s_stride`-th block.
    pub s_stride: usize,
    /// Side of the lower-level window each higher feature owns.
    pub p_patch: usize,
}

fn default_input_channels() -> usize {
    3
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub num_classes: usize,
    pub decode_dim: usize,
    #[serde(default = "default_input_channels")]
    pub input_channels: usize,
    pub stages: Vec<StageConfig>,
}

/// Patch-merging strides giving the 1/4, 1/8, 1/16, 1/32 ladder.
pub const LADDER_STRIDES: [usize; 4] = [4, 2, 2, 2];

/// Input sides must be multiples of this.
pub const INPUT_MULTIPLE: usize = 32;

impl StageConfig {
    fn validate(&self, index: usize) -> Result<()> {
        let n = index + 1;
        let positive = [
            ("K", self.kernel),
            ("S", self.stride),
            ("d", self.d),
            ("N", self.blocks),
            ("H", self.heads),
            ("E", self.expansion),
            ("R", self.reduction),
            ("s_stride", self.s_stride),
            ("p_patch", self.p_patch),
        ];
        for (field, v) in positive {
            if v == 0 {
                return Err(config(format!("stage {n}: {field} must be positive")));
            }
        }
        if self.stride != LADDER_STRIDES[index] {
            return Err(config(format!(
                "stage {n}: S must be {} to keep the 1/4..1/32 resolution ladder, got {}",
                LADDER_STRIDES[index], self.stride
            )));
        }
        if self.kernel.is_multiple_of(2) || self.kernel < self.stride {
            return Err(config(format!(
                "stage {n}: K must be odd and at least S, got K={} S={}",
                self.kernel, self.stride
            )));
        }
        if !self.d.is_multiple_of(self.heads) {
            return Err(config(format!("stage {n}: d={} not divisible by H={}", self.d, self.heads)));
        }
        if !self.p_patch.is_multiple_of(2) {
            return Err(config(format!("stage {n}: p_patch must be even, got {}", self.p_patch)));
        }
        if self.hila && index == 0 {
            return Err(config("stage 1 has no lower level; hila must be false there"));
        }
        if !self.alpha.is_finite() || !self.beta.is_finite() {
            return Err(config(format!("stage {n}: alpha and beta must be finite")));
        }
        Ok(())
    }
}

impl ModelConfig {
    /// Small four-stage model that trains in minutes on a CPU.
    pub fn tiny(num_classes: usize) -> Self {
        let dims = [16, 32, 64, 128];
        let heads = [1, 1, 2, 4];
        let reduction = [4, 2, 1, 1];
        let kernel = [7, 3, 3, 3];
        let stages = (0..4)
            .map(|i| StageConfig {
                kernel: kernel[i],
                stride: LADDER_STRIDES[i],
                d: dims[i],
                blocks: 2,
                heads: heads[i],
                expansion: 4,
                reduction: reduction[i],
                hila: i > 0,
                alpha: 0.5,
                beta: 0.5,
                s_stride: 1,
                p_patch: 4,
            })
            .collect();
        Self {
            num_classes,
            decode_dim: 64,
            input_channels: 3,
            stages,
        }
    }

    /// The same model with HILA switched on or off at every eligible stage.
    pub fn with_hila(mut self, on: bool) -> Self {
        for (i, s) in self.stages.iter_mut().enumerate() {
            s.hila = on && i > 0;
        }
        self
    }

    pub fn any_hila(&self) -> bool {
        self.stages.iter().any(|s| s.hila)
    }

    pub fn validate(&self) -> Result<()> {
        if self.stages.len() != 4 {
            return Err(config(format!("expected 4 stages, got {}", self.stages.len())));
        }
        if self.num_classes == 0 || self.num_classes > 255 {
            return Err(config(format!(
                "num_classes must be in 1..=255 (255 is the ignore label), got {}",
                self.num_classes
            )));
        }
        if self.decode_dim == 0 || self.input_channels == 0 {
            return Err(config("decode_dim and input_channels must be positive"));
        }
        for (i, s) in self.stages.iter().enumerate() {
            s.validate(i)?;
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serialises")
    }

    /// Spatial size of every stage for an `h×w` input.
    pub fn stage_sizes(&self, h: usize, w: usize) -> Result<[(usize, usize); 4]> {
        if h == 0 || w == 0 || !h.is_multiple_of(INPUT_MULTIPLE) || !w.is_multiple_of(INPUT_MULTIPLE) {
            return Err(config(format!(
                "input {h}×{w} must have sides divisible by {INPUT_MULTIPLE}"
            )));
        }
        Ok([(h / 4, w / 4), (h / 8, w / 8), (h / 16, w / 16), (h / 32, w / 32)])
    }
}
