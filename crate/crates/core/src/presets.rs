//! Model presets.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::scenario::ModelDims;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelPreset {
    Llama2_7b,
    DeepseekV2Lite,
    Custom,
}

/// Optional per-field overrides applied on top of a preset.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DimOverrides {
    pub hidden: Option<usize>,
    pub n_heads: Option<usize>,
    pub head_dim: Option<usize>,
    pub kv_lora_rank: Option<usize>,
}

impl ModelPreset {
    pub fn name(self) -> &'static str {
        match self {
            ModelPreset::Llama2_7b => "llama2_7b",
            ModelPreset::DeepseekV2Lite => "deepseek_v2_lite",
            ModelPreset::Custom => "custom",
        }
    }

    /// `(hidden, n_heads, head_dim, kv_lora_rank)`.
    fn base(self) -> (usize, usize, usize, Option<usize>) {
        match self {
            ModelPreset::Llama2_7b => (4096, 32, 128, None),
            // Only kv_lora_rank = 512 is given for this model; the rest are assumed.
            ModelPreset::DeepseekV2Lite => (2048, 16, 128, Some(512)),
            // Small MHA shape that runs quickly; override as needed.
            ModelPreset::Custom => (256, 4, 64, None),
        }
    }

    /// Fields whose preset value is an assumption rather than a published figure.
    pub fn assumed_fields(self) -> &'static [&'static str] {
        match self {
            ModelPreset::Llama2_7b => &[],
            ModelPreset::DeepseekV2Lite => &["hidden", "n_heads", "head_dim"],
            ModelPreset::Custom => &["hidden", "n_heads", "head_dim"],
        }
    }

    pub fn dims(self, batch: usize, seq_len: usize, overrides: &DimOverrides) -> ModelDims {
        let (hidden, n_heads, head_dim, lora) = self.base();
        ModelDims {
            batch,
            hidden: overrides.hidden.unwrap_or(hidden),
            n_heads: overrides.n_heads.unwrap_or(n_heads),
            head_dim: overrides.head_dim.unwrap_or(head_dim),
            seq_len,
            kv_lora_rank: overrides.kv_lora_rank.or(lora),
        }
    }
}

impl fmt::Display for ModelPreset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ModelPreset {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "llama2_7b" | "llama2-7b" => Ok(ModelPreset::Llama2_7b),
            "deepseek_v2_lite" | "deepseek-v2-lite" => Ok(ModelPreset::DeepseekV2Lite),
            "custom" => Ok(ModelPreset::Custom),
            other => Err(format!(
                "unknown model `{other}` (expected llama2_7b, deepseek_v2_lite or custom)"
            )),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_expand() {
        let d = ModelPreset::Llama2_7b.dims(1, 64, &DimOverrides::default());
        assert_eq!((d.hidden, d.n_heads, d.head_dim, d.kv_lora_rank), (4096, 32, 128, None));
        let d = ModelPreset::DeepseekV2Lite.dims(1, 64, &DimOverrides::default());
        assert_eq!(d.kv_lora_rank, Some(512));
        let o = DimOverrides { hidden: Some(64), ..Default::default() };
        assert_eq!(ModelPreset::DeepseekV2Lite.dims(2, 8, &o).hidden, 64);
        assert_eq!("deepseek_v2_lite".parse::<ModelPreset>().unwrap(), ModelPreset::DeepseekV2Lite);
    }
}
