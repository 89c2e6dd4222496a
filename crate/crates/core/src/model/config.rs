use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::moment::PoolingMode;

/// Normalization group of the late guidance module.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LateNorm {
    /// One L2 norm per map cell, across all channels. Relative attention
    /// magnitudes survive normalization.
    #[default]
    Joint,
    /// One L2 norm per channel plane. The attention scalar then only
    /// contributes its sign.
    PerChannel,
}

/// Architecture and ablation switches.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Side of the proposal map (clips per video after resampling).
    pub n: usize,
    pub d_v: usize,
    pub d_w: usize,
    /// Hidden width of the LSTM, the visual head and the map channels.
    pub d_h: usize,
    pub d_s: usize,
    pub n_early: usize,
    pub n_conv: usize,
    pub n_late: usize,
    pub kernel_size: usize,
    pub pooling: PoolingMode,
    /// Dropout ratio of the visual head; see `dropout_ratio_is_keep`.
    pub dropout: f64,
    /// Read `dropout` as a keep probability instead of a drop probability.
    pub dropout_ratio_is_keep: bool,
    pub use_early: bool,
    pub use_late: bool,
    pub late_norm: LateNorm,
    pub max_query_len: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            n: 16,
            d_v: 32,
            d_w: 16,
            d_h: 32,
            d_s: 32,
            n_early: 2,
            n_conv: 6,
            n_late: 6,
            kernel_size: 3,
            pooling: PoolingMode::Max,
            dropout: 0.75,
            dropout_ratio_is_keep: false,
            use_early: true,
            use_late: true,
            late_norm: LateNorm::Joint,
            max_query_len: 32,
            seed: 0,
        }
    }
}

/// The four ablation rows.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Baseline,
    Early,
    Late,
    Full,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::Baseline, Variant::Early, Variant::Late, Variant::Full];

    pub fn label(self) -> &'static str {
        match self {
            Variant::Baseline => "baseline",
            Variant::Early => "+early",
            Variant::Late => "+late",
            Variant::Full => "full",
        }
    }
}

impl ModelConfig {
    /// Widths used by the original feature extractors.
    pub fn full_scale() -> Self {
        ModelConfig {
            d_v: 4096,
            d_w: 300,
            d_h: 512,
            d_s: 512,
            ..Self::default()
        }
    }

    pub fn with_variant(mut self, variant: Variant) -> Self {
        (self.use_early, self.use_late) = match variant {
            Variant::Baseline => (false, false),
            Variant::Early => (true, false),
            Variant::Late => (false, true),
            Variant::Full => (true, true),
        };
        self
    }

    pub fn drop_probability(&self) -> f64 {
        if self.dropout_ratio_is_keep {
            1.0 - self.dropout
        } else {
            self.dropout
        }
    }

    pub fn validate(&self) -> Result<()> {
        let widths = [
            ("n", self.n),
            ("d_v", self.d_v),
            ("d_w", self.d_w),
            ("d_h", self.d_h),
            ("d_s", self.d_s),
            ("n_early", self.n_early),
            ("n_conv", self.n_conv),
            ("max_query_len", self.max_query_len),
        ];
        for (name, v) in widths {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be at least 1")));
            }
        }
        if self.n_late > self.n_conv {
            return Err(Error::Config(format!(
                "n_late ({}) exceeds n_conv ({})",
                self.n_late, self.n_conv
            )));
        }
        if self.kernel_size % 2 == 0 {
            return Err(Error::Config(format!("kernel_size must be odd, got {}", self.kernel_size)));
        }
        let p = self.drop_probability();
        if !(0.0..1.0).contains(&p) {
            return Err(Error::Config(format!("drop probability must lie in [0, 1), got {p}")));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        ModelConfig::default().validate().unwrap();
        ModelConfig::full_scale().validate().unwrap();
        let c = ModelConfig::default();
        assert_eq!((c.n_early, c.n_late, c.n_conv), (2, 6, 6));
    }

    #[test]
    fn invalid_configs() {
        let bad = [
            ModelConfig { n_late: 7, ..Default::default() },
            ModelConfig { kernel_size: 4, ..Default::default() },
            ModelConfig { d_h: 0, ..Default::default() },
            ModelConfig { dropout: 1.0, ..Default::default() },
            ModelConfig { dropout: 0.0, dropout_ratio_is_keep: true, ..Default::default() },
        ];
        for c in bad {
            assert!(matches!(c.validate(), Err(Error::Config(_))), "{c:?}");
        }
    }

    #[test]
    fn keep_reading_flips_probability() {
        let c = ModelConfig { dropout: 0.75, dropout_ratio_is_keep: true, ..Default::default() };
        assert!((c.drop_probability() - 0.25).abs() < 1e-15);
    }

    #[test]
    fn json_uses_field_names() {
        let c: ModelConfig = serde_json::from_str(r#"{"n": 8, "use_late": false, "late_norm": "per_channel"}"#).unwrap();
        assert_eq!(c.n, 8);
        assert!(!c.use_late);
        assert_eq!(c.late_norm, LateNorm::PerChannel);
        assert!(serde_json::from_str::<ModelConfig>(r#"{"bogus": 1}"#).is_err());
    }
}
