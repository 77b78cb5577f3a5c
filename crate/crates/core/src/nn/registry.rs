use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::layers::LayerSpec;
use super::tensor::Shape;
use super::{Model, NnError, NUM_CLASSES};

/// Compact stand-ins for three CNN families: a plain conv stack with dense
/// head, a deep stack of 3×3 blocks, and depthwise/pointwise residual
/// blocks with GELU.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Architecture {
    #[serde(rename = "baseline-mini")]
    BaselineMini,
    #[serde(rename = "deep-mini")]
    DeepMini,
    #[serde(rename = "dwblock-mini")]
    DwblockMini,
}

impl Architecture {
    pub const ALL: [Architecture; 3] = [Architecture::BaselineMini, Architecture::DeepMini, Architecture::DwblockMini];

    pub fn name(self) -> &'static str {
        match self {
            Architecture::BaselineMini => "baseline-mini",
            Architecture::DeepMini => "deep-mini",
            Architecture::DwblockMini => "dwblock-mini",
        }
    }

    /// Layer list for a square single-channel input; `input_size` must be a
    /// multiple of 16.
    pub fn layers(self, input_size: usize) -> Vec<LayerSpec> {
        use LayerSpec::*;
        match self {
            Architecture::BaselineMini => {
                let s = input_size / 16;
                vec![
                    LayerSpec::conv(1, 16, 5, 2, 2),
                    Relu,
                    MaxPool { kernel: 2, stride: 2 },
                    LayerSpec::conv(16, 32, 3, 1, 1),
                    Relu,
                    MaxPool { kernel: 2, stride: 2 },
                    LayerSpec::conv(32, 48, 3, 1, 1),
                    Relu,
                    MaxPool { kernel: 2, stride: 2 },
                    Flatten,
                    Dense { in_f: 48 * s * s, out_f: 64 },
                    Relu,
                    Dropout { rate: 0.5 },
                    Dense { in_f: 64, out_f: NUM_CLASSES },
                ]
            }
            Architecture::DeepMini => vec![
                LayerSpec::conv(1, 8, 3, 1, 1),
                Relu,
                MaxPool { kernel: 2, stride: 2 },
                LayerSpec::conv(8, 16, 3, 1, 1),
                Relu,
                LayerSpec::conv(16, 16, 3, 1, 1),
                Relu,
                MaxPool { kernel: 2, stride: 2 },
                LayerSpec::conv(16, 32, 3, 1, 1),
                Relu,
                LayerSpec::conv(32, 32, 3, 1, 1),
                Relu,
                MaxPool { kernel: 2, stride: 2 },
                GlobalAvgPool,
                Flatten,
                Dense { in_f: 32, out_f: 32 },
                Relu,
                Dense { in_f: 32, out_f: NUM_CLASSES },
            ],
            Architecture::DwblockMini => {
                let block = |c: usize| Residual {
                    body: vec![LayerSpec::depthwise(c, 7, 3), LayerSpec::conv(c, 4 * c, 1, 1, 0), Gelu, LayerSpec::conv(4 * c, c, 1, 1, 0)],
                };
                vec![
                    LayerSpec::conv(1, 24, 4, 4, 0),
                    block(24),
                    block(24),
                    LayerSpec::conv(24, 48, 2, 2, 0),
                    block(48),
                    block(48),
                    GlobalAvgPool,
                    Flatten,
                    Dense { in_f: 48, out_f: NUM_CLASSES },
                ]
            }
        }
    }
}

impl fmt::Display for Architecture {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Architecture {
    type Err = NnError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Architecture::ALL.into_iter().find(|a| a.name() == s).ok_or_else(|| NnError::UnknownArchitecture(s.to_string()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub arch: Architecture,
    pub input_size: usize,
    pub init_seed: u64,
}

impl ModelConfig {
    pub fn new(arch: Architecture, input_size: usize, init_seed: u64) -> Self {
        ModelConfig { arch, input_size, init_seed }
    }

    pub fn build(&self) -> Result<Model, NnError> {
        if self.input_size == 0 || !self.input_size.is_multiple_of(16) {
            return Err(NnError::ShapeMismatch(format!("input size {} is not a multiple of 16", self.input_size)));
        }
        let input = Shape::new(1, self.input_size, self.input_size);
        Model::new(self.arch.name(), input, self.arch.layers(self.input_size), self.init_seed)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn all_architectures_build_at_supported_sizes() {
        for arch in Architecture::ALL {
            for size in [16, 64, 128] {
                let m = ModelConfig::new(arch, size, 0).build().unwrap();
                assert_eq!(m.input_shape(), Shape::new(1, size, size));
            }
            assert_eq!(arch.name().parse::<Architecture>().unwrap(), arch);
        }
        assert!(ModelConfig::new(Architecture::DeepMini, 20, 0).build().is_err());
    }

    #[test]
    fn parameter_counts_are_stable() {
        let count = |a| ModelConfig::new(a, 64, 0).build().unwrap().num_params();
        // conv 1->16 k5: 416, 16->32 k3: 4640, 32->48 k3: 13872, dense 768->64: 49216, 64->3: 195
        assert_eq!(count(Architecture::BaselineMini), 68_339);
        // 80 + 1168 + 2320 + 4640 + 9248 + 1056 + 99
        assert_eq!(count(Architecture::DeepMini), 18_611);
        // stem 408, 2 x 5928, down 4656, 2 x 21072, head 147
        assert_eq!(count(Architecture::DwblockMini), 59_211);
        // the dwblock net is independent of input size
        assert_eq!(ModelConfig::new(Architecture::DwblockMini, 16, 0).build().unwrap().num_params(), 59_211);
    }
}
