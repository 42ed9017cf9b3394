//! Architecture descriptors: a fixed layer menu plus the embedding-layer
//! marker that the pruning stage depends on.

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActivationKind {
    Relu,
    Tanh,
    Identity,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PoolKind {
    Avg,
    Max,
}

/// One layer of the fixed menu. Conv and Dense carry parameters
/// (weights then biases, in that order, within the flat parameter vector).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerSpec {
    Conv {
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    },
    Dense {
        in_dim: usize,
        out_dim: usize,
    },
    Pool {
        kind: PoolKind,
        kernel: usize,
        stride: usize,
    },
    Activation(ActivationKind),
    Flatten,
}

impl LayerSpec {
    pub fn param_count(&self) -> usize {
        match *self {
            LayerSpec::Conv {
                in_ch,
                out_ch,
                kernel,
                ..
            } => out_ch * in_ch * kernel * kernel + out_ch,
            LayerSpec::Dense { in_dim, out_dim } => out_dim * in_dim + out_dim,
            _ => 0,
        }
    }

    /// Per-sample output shape given the per-sample input shape.
    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        let bad = |msg: String| Error::InvalidConfig(msg);
        match *self {
            LayerSpec::Conv {
                in_ch,
                out_ch,
                kernel,
                stride,
                padding,
            } => {
                if input.len() != 3 || input[0] != in_ch {
                    return Err(bad(format!(
                        "conv expects [{in_ch},H,W] input, got {input:?}"
                    )));
                }
                let (h, w) = (input[1] + 2 * padding, input[2] + 2 * padding);
                if kernel == 0 || stride == 0 || h < kernel || w < kernel {
                    return Err(bad(format!("conv kernel {kernel} too large for {input:?}")));
                }
                Ok(vec![
                    out_ch,
                    (h - kernel) / stride + 1,
                    (w - kernel) / stride + 1,
                ])
            }
            LayerSpec::Dense { in_dim, out_dim } => {
                if input != [in_dim] {
                    return Err(bad(format!(
                        "dense expects flat input of {in_dim}, got {input:?}"
                    )));
                }
                Ok(vec![out_dim])
            }
            LayerSpec::Pool {
                kernel, stride, ..
            } => {
                if input.len() != 3 {
                    return Err(bad(format!("pool expects [C,H,W] input, got {input:?}")));
                }
                if kernel == 0 || stride == 0 || input[1] < kernel || input[2] < kernel {
                    return Err(bad(format!("pool kernel {kernel} too large for {input:?}")));
                }
                Ok(vec![
                    input[0],
                    (input[1] - kernel) / stride + 1,
                    (input[2] - kernel) / stride + 1,
                ])
            }
            LayerSpec::Activation(_) => Ok(input.to_vec()),
            LayerSpec::Flatten => Ok(vec![input.iter().product()]),
        }
    }
}

/// Layer list plus the embedding-layer index and output class count.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArchitectureSpec {
    /// Per-sample input shape `[C, H, W]`.
    pub input_shape: [usize; 3],
    pub layers: Vec<LayerSpec>,
    /// The output of `layers[embedding_layer]` is the embedding representation.
    pub embedding_layer: usize,
    pub num_classes: usize,
}

impl ArchitectureSpec {
    pub fn new(
        input_shape: [usize; 3],
        layers: Vec<LayerSpec>,
        embedding_layer: usize,
        num_classes: usize,
    ) -> Result<Self> {
        let spec = Self {
            input_shape,
            layers,
            embedding_layer,
            num_classes,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Checks shape propagation, classifier width and embedding placement.
    pub fn validate(&self) -> Result<()> {
        let shapes = self.layer_shapes()?;
        let last = self
            .layers
            .last()
            .ok_or_else(|| Error::InvalidConfig("architecture has no layers".into()))?;
        match *last {
            LayerSpec::Dense { out_dim, .. } if out_dim == self.num_classes => {}
            _ => {
                return Err(Error::InvalidConfig(format!(
                    "final layer must be a dense classifier of width {}",
                    self.num_classes
                )))
            }
        }
        if self.embedding_layer + 1 >= self.layers.len() {
            return Err(Error::InvalidConfig(
                "embedding layer must come strictly before the final classifier".into(),
            ));
        }
        let emb = &shapes[self.embedding_layer + 1];
        if emb.len() != 1 {
            return Err(Error::InvalidConfig(format!(
                "embedding layer output must be flat, got shape {emb:?}"
            )));
        }
        Ok(())
    }

    /// Per-sample shapes before and after every layer; `shapes[0]` is the input.
    pub fn layer_shapes(&self) -> Result<Vec<Vec<usize>>> {
        let mut shapes = Vec::with_capacity(self.layers.len() + 1);
        shapes.push(self.input_shape.to_vec());
        for layer in &self.layers {
            let next = layer.output_shape(shapes.last().unwrap())?;
            shapes.push(next);
        }
        Ok(shapes)
    }

    pub fn input_len(&self) -> usize {
        self.input_shape.iter().product()
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(LayerSpec::param_count).sum()
    }

    /// Flat-parameter range of each layer; equal specs produce equal layouts.
    pub fn param_layout(&self) -> Vec<Range<usize>> {
        let mut offset = 0;
        self.layers
            .iter()
            .map(|l| {
                let n = l.param_count();
                let r = offset..offset + n;
                offset += n;
                r
            })
            .collect()
    }

    pub fn embedding_dim(&self) -> usize {
        self.layer_shapes().expect("validated spec")[self.embedding_layer + 1][0]
    }
}

/// Small configurable conv+dense presets; the heterogeneity experiments mix
/// the three.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    Small,
    Medium,
    Wide,
}

impl Preset {
    pub fn name(&self) -> &'static str {
        match self {
            Preset::Small => "small",
            Preset::Medium => "medium",
            Preset::Wide => "wide",
        }
    }

    pub fn from_name(name: &str) -> Result<Self> {
        match name {
            "small" => Ok(Preset::Small),
            "medium" => Ok(Preset::Medium),
            "wide" => Ok(Preset::Wide),
            other => Err(Error::InvalidConfig(format!(
                "unknown architecture preset '{other}' (expected small|medium|wide)"
            ))),
        }
    }

    /// Builds the preset for a given input shape and class count. The
    /// embedding is the activated output of the penultimate dense layer.
    pub fn build(&self, input_shape: [usize; 3], num_classes: usize) -> Result<ArchitectureSpec> {
        let c = input_shape[0];
        let relu = LayerSpec::Activation(ActivationKind::Relu);
        let pool = LayerSpec::Pool {
            kind: PoolKind::Avg,
            kernel: 2,
            stride: 2,
        };
        let conv = |in_ch, out_ch| LayerSpec::Conv {
            in_ch,
            out_ch,
            kernel: 3,
            stride: 1,
            padding: 1,
        };
        let mut layers = match self {
            Preset::Small => vec![conv(c, 8), relu, pool, LayerSpec::Flatten],
            Preset::Medium => vec![
                conv(c, 8),
                relu,
                pool,
                conv(8, 16),
                relu,
                pool,
                LayerSpec::Flatten,
            ],
            Preset::Wide => vec![conv(c, 16), relu, pool, LayerSpec::Flatten],
        };
        let embed_dim = match self {
            Preset::Small => 32,
            Preset::Medium => 48,
            Preset::Wide => 64,
        };
        let flat = {
            let mut shape = input_shape.to_vec();
            for l in &layers {
                shape = l.output_shape(&shape)?;
            }
            shape[0]
        };
        layers.push(LayerSpec::Dense {
            in_dim: flat,
            out_dim: embed_dim,
        });
        layers.push(relu);
        let embedding_layer = layers.len() - 1;
        layers.push(LayerSpec::Dense {
            in_dim: embed_dim,
            out_dim: num_classes,
        });
        ArchitectureSpec::new(input_shape, layers, embedding_layer, num_classes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate_and_report_dims() {
        for p in [Preset::Small, Preset::Medium, Preset::Wide] {
            let a = p.build([3, 16, 16], 4).unwrap();
            assert_eq!(a.num_classes, 4);
            let shapes = a.layer_shapes().unwrap();
            assert_eq!(shapes.last().unwrap(), &vec![4]);
            assert!(a.embedding_dim() >= 32);
        }
    }

    #[test]
    fn layout_is_deterministic_per_spec() {
        let a = Preset::Small.build([3, 16, 16], 4).unwrap();
        let b = Preset::Small.build([3, 16, 16], 4).unwrap();
        assert_eq!(a.param_layout(), b.param_layout());
        assert_eq!(
            a.param_count(),
            a.param_layout().last().unwrap().end
        );
    }

    #[test]
    fn rejects_embedding_after_classifier() {
        let layers = vec![
            LayerSpec::Flatten,
            LayerSpec::Dense {
                in_dim: 12,
                out_dim: 3,
            },
        ];
        let err = ArchitectureSpec::new([3, 2, 2], layers, 1, 3);
        assert!(err.is_err());
    }

    #[test]
    fn rejects_non_flat_embedding() {
        let layers = vec![
            LayerSpec::Activation(ActivationKind::Relu),
            LayerSpec::Flatten,
            LayerSpec::Dense {
                in_dim: 12,
                out_dim: 3,
            },
        ];
        assert!(ArchitectureSpec::new([3, 2, 2], layers, 0, 3).is_err());
    }

    #[test]
    fn rejects_dense_width_mismatch() {
        let layers = vec![
            LayerSpec::Flatten,
            LayerSpec::Dense {
                in_dim: 12,
                out_dim: 5,
            },
        ];
        assert!(ArchitectureSpec::new([3, 2, 2], layers, 0, 3).is_err());
    }
}
