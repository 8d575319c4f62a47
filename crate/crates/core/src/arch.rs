//! Architecture descriptors: networks as chains of blocks.

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};

/// Channels × height × width of one sample.
pub type Shape3 = [usize; 3];

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum LayerSpec {
    Conv {
        out_channels: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        groups: usize,
        bias: bool,
    },
    BatchNorm,
    Relu,
    MaxPool {
        kernel: usize,
        stride: usize,
    },
}

impl LayerSpec {
    pub fn conv3x3(out_channels: usize) -> Self {
        LayerSpec::Conv {
            out_channels,
            kernel: 3,
            stride: 1,
            pad: 1,
            groups: 1,
            bias: false,
        }
    }

    pub fn depthwise3x3(channels: usize) -> Self {
        LayerSpec::Conv {
            out_channels: channels,
            kernel: 3,
            stride: 1,
            pad: 1,
            groups: channels,
            bias: false,
        }
    }

    pub fn pointwise(out_channels: usize) -> Self {
        LayerSpec::Conv {
            out_channels,
            kernel: 1,
            stride: 1,
            pad: 0,
            groups: 1,
            bias: false,
        }
    }

    /// Output shape for a given input shape, or `None` when the layer cannot
    /// be applied.
    pub fn output_shape(&self, [c, h, w]: Shape3) -> Option<Shape3> {
        match *self {
            LayerSpec::Conv {
                out_channels,
                kernel,
                stride,
                pad,
                groups,
                ..
            } => {
                if stride == 0 || groups == 0 || c % groups != 0 || out_channels % groups != 0 {
                    return None;
                }
                if h + 2 * pad < kernel || w + 2 * pad < kernel {
                    return None;
                }
                Some([
                    out_channels,
                    (h + 2 * pad - kernel) / stride + 1,
                    (w + 2 * pad - kernel) / stride + 1,
                ])
            }
            LayerSpec::BatchNorm | LayerSpec::Relu => Some([c, h, w]),
            LayerSpec::MaxPool { kernel, stride } => {
                if kernel == 0 || stride == 0 || h < kernel || w < kernel {
                    return None;
                }
                Some([c, (h - kernel) / stride + 1, (w - kernel) / stride + 1])
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BlockSpec {
    pub layers: Vec<LayerSpec>,
    pub input_shape: Shape3,
    pub output_shape: Shape3,
}

impl BlockSpec {
    pub fn new(layers: Vec<LayerSpec>, input_shape: Shape3) -> Result<Self> {
        let output_shape = infer_shape(&layers, input_shape)?;
        Ok(Self {
            layers,
            input_shape,
            output_shape,
        })
    }

    /// Checks that the declared output shape is what the layers produce.
    pub fn validate(&self) -> Result<()> {
        let actual = infer_shape(&self.layers, self.input_shape)?;
        if actual != self.output_shape {
            return Err(CoreError::ArchMismatch(format!(
                "block declares output {:?} but layers produce {:?}",
                self.output_shape, actual
            )));
        }
        Ok(())
    }
}

fn infer_shape(layers: &[LayerSpec], input: Shape3) -> Result<Shape3> {
    layers.iter().try_fold(input, |shape, layer| {
        layer.output_shape(shape).ok_or_else(|| {
            CoreError::ArchMismatch(format!("layer {layer:?} cannot consume shape {shape:?}"))
        })
    })
}

/// A network of `N ≥ 2` chained blocks followed by global average pooling
/// and a linear classifier.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetArch {
    pub name: String,
    pub input_shape: Shape3,
    pub num_classes: usize,
    pub blocks: Vec<BlockSpec>,
}

pub const DEFAULT_INPUT: Shape3 = [3, 16, 16];
pub const DEFAULT_CLASSES: usize = 10;

impl NetArch {
    pub fn new(
        name: impl Into<String>,
        input_shape: Shape3,
        num_classes: usize,
        block_layers: Vec<Vec<LayerSpec>>,
    ) -> Result<Self> {
        let mut blocks = Vec::with_capacity(block_layers.len());
        let mut shape = input_shape;
        for layers in block_layers {
            let block = BlockSpec::new(layers, shape)?;
            shape = block.output_shape;
            blocks.push(block);
        }
        let arch = Self {
            name: name.into(),
            input_shape,
            num_classes,
            blocks,
        };
        arch.validate()?;
        Ok(arch)
    }

    pub fn validate(&self) -> Result<()> {
        if self.blocks.len() < 2 {
            return Err(CoreError::ArchMismatch(format!(
                "`{}` has {} block(s); at least 2 are required",
                self.name,
                self.blocks.len()
            )));
        }
        if self.num_classes < 2 {
            return Err(CoreError::ArchMismatch(format!(
                "`{}` needs at least 2 classes",
                self.name
            )));
        }
        let mut expected = self.input_shape;
        for (i, block) in self.blocks.iter().enumerate() {
            if block.input_shape != expected {
                return Err(CoreError::ArchMismatch(format!(
                    "block {i} of `{}` expects {:?} but receives {:?}",
                    self.name, block.input_shape, expected
                )));
            }
            block.validate()?;
            expected = block.output_shape;
        }
        Ok(())
    }

    pub fn num_blocks(&self) -> usize {
        self.blocks.len()
    }

    /// Channels of the last block, i.e. the classifier's input width.
    pub fn feature_dim(&self) -> usize {
        self.blocks.last().map_or(0, |b| b.output_shape[0])
    }

    /// `[conv3×3 → bn → relu] ×2 → maxpool2` per block.
    pub fn plain_cnn(
        name: &str,
        input_shape: Shape3,
        num_classes: usize,
        channels: &[usize],
    ) -> Result<Self> {
        let blocks = channels
            .iter()
            .map(|&c| {
                vec![
                    LayerSpec::conv3x3(c),
                    LayerSpec::BatchNorm,
                    LayerSpec::Relu,
                    LayerSpec::conv3x3(c),
                    LayerSpec::BatchNorm,
                    LayerSpec::Relu,
                    LayerSpec::MaxPool {
                        kernel: 2,
                        stride: 2,
                    },
                ]
            })
            .collect();
        Self::new(name, input_shape, num_classes, blocks)
    }

    /// Depthwise-separable variant: `[dw3×3 → bn → relu → pw1×1 → bn → relu] ×2 → maxpool2`.
    pub fn separable_cnn(
        name: &str,
        input_shape: Shape3,
        num_classes: usize,
        channels: &[usize],
    ) -> Result<Self> {
        let mut in_c = input_shape[0];
        let mut blocks = Vec::new();
        for &c in channels {
            let mut layers = Vec::new();
            for _ in 0..2 {
                layers.extend([
                    LayerSpec::depthwise3x3(in_c),
                    LayerSpec::BatchNorm,
                    LayerSpec::Relu,
                    LayerSpec::pointwise(c),
                    LayerSpec::BatchNorm,
                    LayerSpec::Relu,
                ]);
                in_c = c;
            }
            layers.push(LayerSpec::MaxPool {
                kernel: 2,
                stride: 2,
            });
            blocks.push(layers);
        }
        Self::new(name, input_shape, num_classes, blocks)
    }

    pub fn teacher_s3(num_classes: usize) -> Self {
        Self::plain_cnn("teacher-s3", DEFAULT_INPUT, num_classes, &[32, 64, 128])
            .expect("valid reference architecture")
    }

    pub fn student_s3(num_classes: usize) -> Self {
        Self::plain_cnn("student-s3", DEFAULT_INPUT, num_classes, &[8, 16, 32])
            .expect("valid reference architecture")
    }

    pub fn student_h3(num_classes: usize) -> Self {
        Self::separable_cnn("student-h3", DEFAULT_INPUT, num_classes, &[8, 16, 32])
            .expect("valid reference architecture")
    }

    /// Looks up a reference architecture by id.
    pub fn by_id(id: &str, num_classes: usize) -> Option<Self> {
        match id {
            "teacher-s3" => Some(Self::teacher_s3(num_classes)),
            "student-s3" => Some(Self::student_s3(num_classes)),
            "student-h3" => Some(Self::student_h3(num_classes)),
            _ => None,
        }
    }
}

/// An architecture named by id or given inline.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ArchRef {
    Named(String),
    Inline(NetArch),
}

impl ArchRef {
    pub fn resolve(&self, num_classes: usize) -> Result<NetArch> {
        match self {
            ArchRef::Named(id) => NetArch::by_id(id, num_classes)
                .ok_or_else(|| CoreError::ArchMismatch(format!("unknown architecture id `{id}`"))),
            ArchRef::Inline(arch) => {
                arch.validate()?;
                Ok(arch.clone())
            }
        }
    }

    pub fn id(&self) -> &str {
        match self {
            ArchRef::Named(id) => id,
            ArchRef::Inline(arch) => &arch.name,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reference_shapes_chain() {
        let t = NetArch::teacher_s3(10);
        let shapes: Vec<_> = t.blocks.iter().map(|b| b.output_shape).collect();
        assert_eq!(shapes, vec![[32, 8, 8], [64, 4, 4], [128, 2, 2]]);
        let s = NetArch::student_h3(10);
        let shapes: Vec<_> = s.blocks.iter().map(|b| b.output_shape).collect();
        assert_eq!(shapes, vec![[8, 8, 8], [16, 4, 4], [32, 2, 2]]);
        assert_eq!(s.feature_dim(), 32);
    }

    #[test]
    fn single_block_is_rejected() {
        let err = NetArch::plain_cnn("one", [3, 8, 8], 4, &[4]).unwrap_err();
        assert!(matches!(err, CoreError::ArchMismatch(_)));
    }

    #[test]
    fn broken_chain_is_rejected() {
        let mut arch = NetArch::student_s3(10);
        arch.blocks[1].input_shape = [9, 8, 8];
        assert!(arch.validate().is_err());
        let mut arch = NetArch::student_s3(10);
        arch.blocks[0].output_shape = [8, 16, 16];
        assert!(arch.validate().is_err());
    }

    #[test]
    fn arch_ref_parses_both_forms() {
        let named: ArchRef = serde_json::from_str("\"student-h3\"").unwrap();
        assert_eq!(named.resolve(10).unwrap().name, "student-h3");
        let inline = serde_json::to_string(&NetArch::student_s3(4)).unwrap();
        let parsed: ArchRef = serde_json::from_str(&inline).unwrap();
        assert_eq!(parsed.resolve(4).unwrap(), NetArch::student_s3(4));
        assert!(ArchRef::Named("resnet".into()).resolve(10).is_err());
    }
}
