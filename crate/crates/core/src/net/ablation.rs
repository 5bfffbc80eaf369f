use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::ball::Geometry;
use crate::error::Error;

/// How continuous frames and prosody tokens are combined.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Fusion {
    Mobius,
    /// Tangent-space concatenation followed by a one-hidden-layer tanh MLP.
    ConcatMlp,
}

/// Which branches feed the fusion step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Branch {
    Both,
    ContinuousOnly,
    TokenOnly,
}

/// Architectural switches. The default is the full model.
///
/// `hel` also serves as the intensity-calibration switch of the Euclidean
/// variant: with `geometry = Euclidean` the lens warps plain vector norms.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationConfig {
    pub geometry: Geometry,
    pub fusion: Fusion,
    pub branch: Branch,
    pub hel: bool,
    pub ot_geometry: Geometry,
}

impl Default for AblationConfig {
    fn default() -> Self {
        AblationPreset::Full.config()
    }
}

impl AblationConfig {
    pub fn uses_vq(&self) -> bool {
        self.branch != Branch::ContinuousOnly
    }

    pub fn is_full(&self) -> bool {
        *self == AblationPreset::Full.config()
    }
}

/// Named rows of the ablation matrix.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum AblationPreset {
    Full,
    Euclidean,
    EuclideanNoCalibration,
    NoVq,
    TokenOnly,
    ConcatMlp,
    NoHel,
    EuclideanOt,
}

impl AblationPreset {
    pub const ALL: [AblationPreset; 8] = [
        AblationPreset::Euclidean,
        AblationPreset::EuclideanNoCalibration,
        AblationPreset::NoVq,
        AblationPreset::TokenOnly,
        AblationPreset::ConcatMlp,
        AblationPreset::NoHel,
        AblationPreset::EuclideanOt,
        AblationPreset::Full,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AblationPreset::Full => "full",
            AblationPreset::Euclidean => "euclidean",
            AblationPreset::EuclideanNoCalibration => "euclidean-no-calibration",
            AblationPreset::NoVq => "no-vq",
            AblationPreset::TokenOnly => "token-only",
            AblationPreset::ConcatMlp => "concat-mlp",
            AblationPreset::NoHel => "no-hel",
            AblationPreset::EuclideanOt => "euclidean-ot",
        }
    }

    pub fn config(self) -> AblationConfig {
        let full = AblationConfig {
            geometry: Geometry::Hyperbolic,
            fusion: Fusion::Mobius,
            branch: Branch::Both,
            hel: true,
            ot_geometry: Geometry::Hyperbolic,
        };
        match self {
            AblationPreset::Full => full,
            AblationPreset::Euclidean => AblationConfig {
                geometry: Geometry::Euclidean,
                ot_geometry: Geometry::Euclidean,
                ..full
            },
            AblationPreset::EuclideanNoCalibration => AblationConfig {
                geometry: Geometry::Euclidean,
                ot_geometry: Geometry::Euclidean,
                hel: false,
                ..full
            },
            AblationPreset::NoVq => AblationConfig {
                branch: Branch::ContinuousOnly,
                ..full
            },
            AblationPreset::TokenOnly => AblationConfig {
                branch: Branch::TokenOnly,
                ..full
            },
            AblationPreset::ConcatMlp => AblationConfig {
                fusion: Fusion::ConcatMlp,
                ..full
            },
            AblationPreset::NoHel => AblationConfig { hel: false, ..full },
            AblationPreset::EuclideanOt => AblationConfig {
                ot_geometry: Geometry::Euclidean,
                ..full
            },
        }
    }
}

impl fmt::Display for AblationPreset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for AblationPreset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| {
                let names: Vec<_> = Self::ALL.iter().map(|p| p.name()).collect();
                Error::Config(format!(
                    "unknown ablation `{s}` (expected one of {})",
                    names.join(", ")
                ))
            })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_are_distinct_and_parse() {
        for (i, a) in AblationPreset::ALL.iter().enumerate() {
            assert_eq!(a.name().parse::<AblationPreset>().unwrap(), *a);
            for b in &AblationPreset::ALL[i + 1..] {
                assert_ne!(a.config(), b.config(), "{a} vs {b}");
            }
        }
        assert!(AblationConfig::default().is_full());
        assert!("bogus".parse::<AblationPreset>().is_err());
    }
}
