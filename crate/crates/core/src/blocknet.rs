//! Block-modular networks with per-block feature taps.
//!
//! Parameters live in a [`Graph`]; a [`BlockNet`] only records which
//! persistent nodes belong to which layer, so a teacher, its student
//! branches and transform layers can share one graph during joint training.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use sftn_tensor::{BatchNormOpts, Conv2dOpts, Graph, Real, Tensor, Var};

use crate::arch::{BlockSpec, LayerSpec, NetArch, Shape3};
use crate::checkpoint::{Checkpoint, StoredTensor};
use crate::error::{CoreError, Result};
use crate::rng::{stream_rng, streams};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

impl Mode {
    pub fn batch_norm(self) -> BatchNormOpts {
        match self {
            Mode::Train => BatchNormOpts::train(),
            Mode::Eval => BatchNormOpts::eval(),
        }
    }
}

/// He-normal draw: `N(0, 2 / fan_in)`.
pub fn he_normal<T: Real>(rng: &mut impl Rng, len: usize, fan_in: usize) -> Vec<T> {
    let std = (2.0 / fan_in.max(1) as f64).sqrt();
    let normal = Normal::new(0.0, std).expect("finite std");
    (0..len).map(|_| T::lit(normal.sample(rng))).collect()
}

/// Batch-norm parameters and running statistics of one layer.
#[derive(Clone, Copy, Debug)]
pub struct BatchNorm {
    pub gamma: Var,
    pub beta: Var,
    pub running_mean: Var,
    pub running_var: Var,
}

impl BatchNorm {
    pub fn allocate<T: Real>(g: &mut Graph<T>, channels: usize) -> Result<Self> {
        Ok(Self {
            gamma: g.add_param(Tensor::full(vec![channels], T::one()), false)?,
            beta: g.add_param(Tensor::zeros(vec![channels]), false)?,
            running_mean: g.add_buffer(Tensor::zeros(vec![channels]))?,
            running_var: g.add_buffer(Tensor::full(vec![channels], T::one()))?,
        })
    }

    pub fn reset<T: Real>(&self, g: &mut Graph<T>) -> Result<()> {
        g.value_mut(self.gamma)?.data_mut().fill(T::one());
        g.value_mut(self.beta)?.data_mut().fill(T::zero());
        g.value_mut(self.running_mean)?.data_mut().fill(T::zero());
        g.value_mut(self.running_var)?.data_mut().fill(T::one());
        Ok(())
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, x: Var, mode: Mode) -> Result<Var> {
        Ok(g.batch_norm2d(
            x,
            self.gamma,
            self.beta,
            self.running_mean,
            self.running_var,
            mode.batch_norm(),
        )?)
    }

    pub fn trainable(&self) -> [Var; 2] {
        [self.gamma, self.beta]
    }

    pub fn state(&self) -> [Var; 4] {
        [self.gamma, self.beta, self.running_mean, self.running_var]
    }
}

#[derive(Clone, Debug)]
enum LayerParams {
    Conv {
        weight: Var,
        bias: Option<Var>,
        opts: Conv2dOpts,
        fan_in: usize,
    },
    BatchNorm(BatchNorm),
    Relu,
    MaxPool {
        kernel: usize,
        stride: usize,
    },
}

/// One block `B^i`: its spec plus the graph nodes holding its parameters.
#[derive(Clone, Debug)]
pub struct Block {
    spec: BlockSpec,
    layers: Vec<LayerParams>,
}

impl Block {
    /// Registers zero-valued parameters for `spec`; call [`Block::init`] afterwards.
    pub fn allocate<T: Real>(spec: &BlockSpec, g: &mut Graph<T>) -> Result<Self> {
        spec.validate()?;
        let mut channels = spec.input_shape[0];
        let mut layers = Vec::with_capacity(spec.layers.len());
        for layer in &spec.layers {
            layers.push(match *layer {
                LayerSpec::Conv {
                    out_channels,
                    kernel,
                    stride,
                    pad,
                    groups,
                    bias,
                } => {
                    let fan_in = channels / groups * kernel * kernel;
                    let weight = g.add_param(
                        Tensor::zeros(vec![out_channels, channels / groups, kernel, kernel]),
                        true,
                    )?;
                    let bias = if bias {
                        Some(g.add_param(Tensor::zeros(vec![out_channels]), false)?)
                    } else {
                        None
                    };
                    channels = out_channels;
                    LayerParams::Conv {
                        weight,
                        bias,
                        opts: Conv2dOpts {
                            stride,
                            pad,
                            groups,
                        },
                        fan_in,
                    }
                }
                LayerSpec::BatchNorm => LayerParams::BatchNorm(BatchNorm::allocate(g, channels)?),
                LayerSpec::Relu => LayerParams::Relu,
                LayerSpec::MaxPool { kernel, stride } => LayerParams::MaxPool { kernel, stride },
            });
        }
        Ok(Self {
            spec: spec.clone(),
            layers,
        })
    }

    pub fn spec(&self) -> &BlockSpec {
        &self.spec
    }

    pub fn init<T: Real>(&self, g: &mut Graph<T>, rng: &mut impl Rng) -> Result<()> {
        for layer in &self.layers {
            match layer {
                LayerParams::Conv {
                    weight,
                    bias,
                    fan_in,
                    ..
                } => {
                    let len = g.value(*weight).numel();
                    g.value_mut(*weight)?
                        .data_mut()
                        .copy_from_slice(&he_normal::<T>(rng, len, *fan_in));
                    if let Some(b) = bias {
                        g.value_mut(*b)?.data_mut().fill(T::zero());
                    }
                }
                LayerParams::BatchNorm(bn) => bn.reset(g)?,
                LayerParams::Relu | LayerParams::MaxPool { .. } => {}
            }
        }
        Ok(())
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, x: Var, mode: Mode) -> Result<Var> {
        let shape = g.shape(x);
        if shape.len() != 4 || shape[1..] != self.spec.input_shape {
            return Err(CoreError::ArchMismatch(format!(
                "block expects per-sample input {:?}, got batch shape {:?}",
                self.spec.input_shape, shape
            )));
        }
        let mut h = x;
        for layer in &self.layers {
            h = match layer {
                LayerParams::Conv {
                    weight, bias, opts, ..
                } => {
                    let y = g.conv2d(h, *weight, *opts)?;
                    match bias {
                        Some(b) => g.add_bias(y, *b)?,
                        None => y,
                    }
                }
                LayerParams::BatchNorm(bn) => bn.forward(g, h, mode)?,
                LayerParams::Relu => g.relu(h)?,
                LayerParams::MaxPool { kernel, stride } => g.maxpool2d(h, *kernel, *stride)?,
            };
        }
        Ok(h)
    }

    pub fn trainable(&self) -> Vec<Var> {
        let mut out = Vec::new();
        for layer in &self.layers {
            match layer {
                LayerParams::Conv { weight, bias, .. } => {
                    out.push(*weight);
                    out.extend(*bias);
                }
                LayerParams::BatchNorm(bn) => out.extend(bn.trainable()),
                _ => {}
            }
        }
        out
    }

    /// All persistent tensors in checkpoint order.
    pub fn state(&self) -> Vec<Var> {
        let mut out = Vec::new();
        for layer in &self.layers {
            match layer {
                LayerParams::Conv { weight, bias, .. } => {
                    out.push(*weight);
                    out.extend(*bias);
                }
                LayerParams::BatchNorm(bn) => out.extend(bn.state()),
                _ => {}
            }
        }
        out
    }
}

/// Global average pooling followed by a linear classifier.
#[derive(Clone, Copy, Debug)]
pub struct Head {
    pub weight: Var,
    pub bias: Var,
}

impl Head {
    pub fn allocate<T: Real>(g: &mut Graph<T>, in_features: usize, classes: usize) -> Result<Self> {
        Ok(Self {
            weight: g.add_param(Tensor::zeros(vec![in_features, classes]), true)?,
            bias: g.add_param(Tensor::zeros(vec![classes]), false)?,
        })
    }

    pub fn init<T: Real>(&self, g: &mut Graph<T>, rng: &mut impl Rng) -> Result<()> {
        let shape = g.shape(self.weight).to_vec();
        let bound = 1.0 / (shape[0].max(1) as f64).sqrt();
        let w: Vec<T> = (0..shape[0] * shape[1])
            .map(|_| T::lit(rng.random_range(-bound..bound)))
            .collect();
        g.value_mut(self.weight)?.data_mut().copy_from_slice(&w);
        g.value_mut(self.bias)?.data_mut().fill(T::zero());
        Ok(())
    }

    /// Logits from a `[n, c, h, w]` feature map.
    pub fn forward<T: Real>(&self, g: &mut Graph<T>, features: Var) -> Result<Var> {
        let pooled = g.global_avgpool(features)?;
        self.classify(g, pooled)
    }

    /// Logits from already pooled `[n, c]` features.
    pub fn classify<T: Real>(&self, g: &mut Graph<T>, pooled: Var) -> Result<Var> {
        let z = g.matmul(pooled, self.weight)?;
        Ok(g.add_bias(z, self.bias)?)
    }

    pub fn state(&self) -> [Var; 2] {
        [self.weight, self.bias]
    }
}

/// Logits plus every block's output feature map `F^i`.
#[derive(Clone, Debug)]
pub struct TapOutput {
    pub logits: Var,
    pub features: Vec<Var>,
}

#[derive(Clone, Debug)]
pub struct BlockNet {
    arch: NetArch,
    blocks: Vec<Block>,
    head: Head,
}

impl BlockNet {
    /// Registers parameters with neutral values (zero weights, unit batch-norm scale).
    pub fn allocate<T: Real>(arch: &NetArch, g: &mut Graph<T>) -> Result<Self> {
        arch.validate()?;
        let blocks = arch
            .blocks
            .iter()
            .map(|spec| Block::allocate(spec, g))
            .collect::<Result<Vec<_>>>()?;
        let head = Head::allocate(g, arch.feature_dim(), arch.num_classes)?;
        Ok(Self {
            arch: arch.clone(),
            blocks,
            head,
        })
    }

    /// Allocates and initializes with [`BlockNet::init_params`].
    pub fn build<T: Real>(arch: &NetArch, g: &mut Graph<T>, seed: u64) -> Result<Self> {
        let net = Self::allocate(arch, g)?;
        net.init_params(g, seed)?;
        Ok(net)
    }

    /// He-normal conv/linear weights, zero biases, unit batch-norm scale and
    /// zero shift; a pure function of `seed`.
    pub fn init_params<T: Real>(&self, g: &mut Graph<T>, seed: u64) -> Result<()> {
        let mut rng = stream_rng(seed, streams::NET_INIT);
        for block in &self.blocks {
            block.init(g, &mut rng)?;
        }
        self.head.init(g, &mut rng)
    }

    pub fn arch(&self) -> &NetArch {
        &self.arch
    }

    pub fn blocks(&self) -> &[Block] {
        &self.blocks
    }

    pub fn head(&self) -> &Head {
        &self.head
    }

    pub fn num_blocks(&self) -> usize {
        self.blocks.len()
    }

    pub fn block_output_shape(&self, i: usize) -> Shape3 {
        self.arch.blocks[i].output_shape
    }

    fn check_input<T: Real>(&self, g: &Graph<T>, x: Var) -> Result<()> {
        let shape = g.shape(x);
        if shape.len() != 4 || shape[1..] != self.arch.input_shape {
            return Err(CoreError::ArchMismatch(format!(
                "`{}` expects input [n, {}, {}, {}], got {:?}",
                self.arch.name,
                self.arch.input_shape[0],
                self.arch.input_shape[1],
                self.arch.input_shape[2],
                shape
            )));
        }
        Ok(())
    }

    pub fn forward_with_taps<T: Real>(
        &self,
        g: &mut Graph<T>,
        x: Var,
        mode: Mode,
    ) -> Result<TapOutput> {
        self.check_input(g, x)?;
        let mut features = Vec::with_capacity(self.blocks.len());
        let mut h = x;
        for block in &self.blocks {
            h = block.forward(g, h, mode)?;
            features.push(h);
        }
        let logits = self.head.forward(g, h)?;
        Ok(TapOutput { logits, features })
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, x: Var, mode: Mode) -> Result<Var> {
        self.check_input(g, x)?;
        let mut h = x;
        for block in &self.blocks {
            h = block.forward(g, h, mode)?;
        }
        self.head.forward(g, h)
    }

    /// Globally pooled output of the last block, `[n, feature_dim]`.
    pub fn pooled_features<T: Real>(&self, g: &mut Graph<T>, x: Var, mode: Mode) -> Result<Var> {
        self.check_input(g, x)?;
        let mut h = x;
        for block in &self.blocks {
            h = block.forward(g, h, mode)?;
        }
        Ok(g.global_avgpool(h)?)
    }

    pub fn trainable_params(&self) -> Vec<Var> {
        let mut out: Vec<Var> = self.blocks.iter().flat_map(Block::trainable).collect();
        out.extend(self.head.state());
        out
    }

    /// Every persistent tensor (parameters and running statistics) in checkpoint order.
    pub fn state_vars(&self) -> Vec<Var> {
        let mut out: Vec<Var> = self.blocks.iter().flat_map(Block::state).collect();
        out.extend(self.head.state());
        out
    }

    /// Freezes (`false`) or unfreezes every trainable parameter.
    pub fn set_trainable<T: Real>(&self, g: &mut Graph<T>, trainable: bool) -> Result<()> {
        for v in self.trainable_params() {
            g.set_requires_grad(v, trainable)?;
        }
        Ok(())
    }

    pub fn to_checkpoint<T: Real>(&self, g: &Graph<T>) -> Checkpoint {
        let tensors = self
            .state_vars()
            .into_iter()
            .map(|v| {
                let t = g.value(v);
                StoredTensor {
                    shape: t.shape().to_vec(),
                    data: t.data().iter().map(|x| x.as_f64() as f32).collect(),
                }
            })
            .collect();
        Checkpoint {
            arch: self.arch.clone(),
            tensors,
        }
    }

    /// Overwrites this network's state with a checkpoint of the same architecture.
    pub fn load_state<T: Real>(&self, g: &mut Graph<T>, ckpt: &Checkpoint) -> Result<()> {
        if ckpt.arch != self.arch {
            return Err(CoreError::ArchMismatch(format!(
                "checkpoint holds `{}`, network is `{}`",
                ckpt.arch.name, self.arch.name
            )));
        }
        let vars = self.state_vars();
        if vars.len() != ckpt.tensors.len() {
            return Err(CoreError::ArchMismatch(format!(
                "checkpoint has {} tensors, network expects {}",
                ckpt.tensors.len(),
                vars.len()
            )));
        }
        for (v, stored) in vars.into_iter().zip(&ckpt.tensors) {
            let t = g.value_mut(v)?;
            if t.shape() != stored.shape.as_slice() {
                return Err(CoreError::ArchMismatch(format!(
                    "tensor shape {:?} in checkpoint, {:?} in network",
                    stored.shape,
                    t.shape()
                )));
            }
            for (dst, &src) in t.data_mut().iter_mut().zip(&stored.data) {
                *dst = T::lit(src as f64);
            }
        }
        Ok(())
    }

    pub fn from_checkpoint<T: Real>(ckpt: &Checkpoint, g: &mut Graph<T>) -> Result<Self> {
        let net = Self::allocate(&ckpt.arch, g)?;
        net.load_state(g, ckpt)?;
        Ok(net)
    }

    /// Hash of the network's current state (see [`Checkpoint::hash`]).
    pub fn state_hash<T: Real>(&self, g: &Graph<T>) -> String {
        self.to_checkpoint(g).hash()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy_arch() -> NetArch {
        NetArch::plain_cnn("toy", [1, 4, 4], 3, &[2, 3]).unwrap()
    }

    #[test]
    fn zero_weight_net_has_zero_logits() {
        let mut g = Graph::<f64>::new();
        let net = BlockNet::allocate(&NetArch::student_s3(10), &mut g).unwrap();
        let x = g.constant(Tensor::full(vec![2, 3, 16, 16], 0.7));
        let logits = net.forward(&mut g, x, Mode::Eval).unwrap();
        assert_eq!(g.shape(logits), &[2, 10]);
        assert!(g.data(logits).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn taps_match_declared_shapes() {
        let mut g = Graph::<f32>::new();
        let arch = toy_arch();
        let net = BlockNet::build(&arch, &mut g, 3).unwrap();
        let x = g.constant(Tensor::full(vec![1, 1, 4, 4], 1.0));
        let out = net.forward_with_taps(&mut g, x, Mode::Train).unwrap();
        for (f, spec) in out.features.iter().zip(&arch.blocks) {
            assert_eq!(g.shape(*f)[1..], spec.output_shape);
        }
    }

    #[test]
    fn taps_do_not_perturb_logits() {
        let mut g = Graph::<f32>::new();
        let net = BlockNet::build(&NetArch::student_h3(10), &mut g, 11).unwrap();
        let data: Vec<f32> = (0..2 * 3 * 256).map(|i| (i as f32 * 0.01).sin()).collect();
        let x = g.constant(Tensor::new(vec![2, 3, 16, 16], data).unwrap());
        let tapped = net.forward_with_taps(&mut g, x, Mode::Eval).unwrap().logits;
        let plain = net.forward(&mut g, x, Mode::Eval).unwrap();
        assert_eq!(g.data(tapped), g.data(plain));
    }

    #[test]
    fn wrong_input_shape_is_an_error() {
        let mut g = Graph::<f32>::new();
        let net = BlockNet::build(&toy_arch(), &mut g, 0).unwrap();
        let x = g.constant(Tensor::zeros(vec![1, 2, 4, 4]));
        assert!(matches!(
            net.forward(&mut g, x, Mode::Eval),
            Err(CoreError::ArchMismatch(_))
        ));
    }

    #[test]
    fn init_is_deterministic_per_seed() {
        let arch = NetArch::student_s3(10);
        let hash = |seed| {
            let mut g = Graph::<f32>::new();
            BlockNet::build(&arch, &mut g, seed).unwrap().state_hash(&g)
        };
        assert_eq!(hash(5), hash(5));
        assert_ne!(hash(5), hash(6));
    }

    #[test]
    fn checkpoint_round_trip_restores_state() {
        let arch = toy_arch();
        let mut g = Graph::<f32>::new();
        let net = BlockNet::build(&arch, &mut g, 9).unwrap();
        let ckpt = net.to_checkpoint(&g);
        let mut g2 = Graph::<f32>::new();
        let net2 = BlockNet::from_checkpoint(&ckpt, &mut g2).unwrap();
        assert_eq!(net2.to_checkpoint(&g2), ckpt);

        let mut g3 = Graph::<f32>::new();
        let other = BlockNet::build(&NetArch::student_s3(10), &mut g3, 1).unwrap();
        assert!(other.load_state(&mut g3, &ckpt).is_err());
    }
}
