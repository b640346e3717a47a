//! The localization CNN: four convolutional blocks feeding three FC layers
//! and a 3K-output regression head.
//!
//! Blocks 1-2 are Conv-BN-ReLU x2 + MaxPool; block 3 is Conv-BN-ReLU x3
//! with a residual shortcut over the last two units; block 4 repeats that
//! and ends in adaptive average pooling to 4x4 so the flattened width is
//! independent of the array size. Each FC layer is Linear-BN-ReLU-Dropout.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::rng_from_seed;
use crate::tensor::Tensor;

use super::layers::{
    AdaptiveAvgPool, BatchNorm, Conv2d, Dropout, Linear, MaxPool2x2, Mode, Relu, Softmax,
};

/// Activation applied to the output layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OutputActivation {
    Linear,
    Softmax,
}

/// Architecture descriptor: everything needed to rebuild the layer stack.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Architecture {
    /// Input spatial size N (the eigenvector matrix is N x N).
    pub input_size: usize,
    /// Number of sources K; the output width is 3K.
    pub num_sources: usize,
    /// Output channel counts of the four conv blocks.
    pub conv_channels: [usize; 4],
    /// Widths of the three FC layers.
    pub fc_sizes: [usize; 3],
    pub dropout_rate: f64,
    pub output_activation: OutputActivation,
    /// Adaptive-pool target in block 4.
    pub pool_target: usize,
}

impl Architecture {
    /// Full-scale preset matching the published block/FC widths.
    pub fn paper(input_size: usize, num_sources: usize) -> Self {
        Self {
            input_size,
            num_sources,
            conv_channels: [32, 64, 128, 256],
            fc_sizes: [1024, 512, 256],
            dropout_rate: 0.3,
            output_activation: OutputActivation::Linear,
            pool_target: 4,
        }
    }

    /// Reduced preset sized for CPU-scale experiments and tests.
    pub fn desk(input_size: usize, num_sources: usize) -> Self {
        Self {
            input_size,
            num_sources,
            conv_channels: [8, 16, 32, 64],
            fc_sizes: [128, 64, 32],
            dropout_rate: 0.3,
            output_activation: OutputActivation::Linear,
            pool_target: 4,
        }
    }

    pub fn output_width(&self) -> usize {
        3 * self.num_sources
    }

    pub fn flattened_width(&self) -> usize {
        self.conv_channels[3] * self.pool_target * self.pool_target
    }

    fn validate(&self) -> Result<()> {
        if self.input_size < 4 {
            return Err(Error::InvalidArgument(format!(
                "input size must be >= 4, got {}",
                self.input_size
            )));
        }
        if self.num_sources == 0 {
            return Err(Error::InvalidArgument("need at least one source".into()));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::InvalidArgument(format!(
                "dropout rate must be in [0, 1), got {}",
                self.dropout_rate
            )));
        }
        Ok(())
    }
}

/// Affine map between label coordinates in meters and the [-1, 1] space the
/// network is trained in. Bounds travel with the model file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabelNormalizer {
    /// Per-axis lower bounds (x, y, z) in meters.
    pub lo: [f64; 3],
    /// Per-axis upper bounds (x, y, z) in meters.
    pub hi: [f64; 3],
}

impl LabelNormalizer {
    pub fn new(lo: [f64; 3], hi: [f64; 3]) -> Result<Self> {
        for a in 0..3 {
            if hi[a] <= lo[a] {
                return Err(Error::InvalidArgument(format!(
                    "degenerate label bounds on axis {a}: [{}, {}]",
                    lo[a], hi[a]
                )));
            }
        }
        Ok(Self { lo, hi })
    }

    pub fn normalize(&self, meters: &[f64]) -> Vec<f64> {
        meters
            .iter()
            .enumerate()
            .map(|(i, &v)| {
                let a = i % 3;
                2.0 * (v - self.lo[a]) / (self.hi[a] - self.lo[a]) - 1.0
            })
            .collect()
    }

    pub fn denormalize(&self, normed: &[f64]) -> Vec<f64> {
        normed
            .iter()
            .enumerate()
            .map(|(i, &v)| {
                let a = i % 3;
                self.lo[a] + (v + 1.0) * 0.5 * (self.hi[a] - self.lo[a])
            })
            .collect()
    }
}

#[derive(Clone, Debug)]
struct ConvUnit {
    conv: Conv2d,
    bn: BatchNorm,
    relu: Relu,
}

impl ConvUnit {
    fn new(in_ch: usize, out_ch: usize, rng: &mut impl Rng) -> Self {
        Self {
            conv: Conv2d::new(in_ch, out_ch, rng),
            bn: BatchNorm::new(out_ch),
            relu: Relu::new(),
        }
    }

    fn forward(&mut self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        let x = self.conv.forward(x)?;
        let x = self.bn.forward(&x, mode)?;
        Ok(self.relu.forward(&x))
    }

    fn backward(&mut self, grad: &Tensor) -> Result<Tensor> {
        let grad = self.relu.backward(grad);
        let grad = self.bn.backward(&grad)?;
        self.conv.backward(&grad)
    }
}

#[derive(Clone, Debug)]
struct FcUnit {
    linear: Linear,
    bn: BatchNorm,
    relu: Relu,
    dropout: Dropout,
}

impl FcUnit {
    fn new(in_f: usize, out_f: usize, dropout: f64, rng: &mut impl Rng) -> Result<Self> {
        Ok(Self {
            linear: Linear::new(in_f, out_f, rng),
            bn: BatchNorm::new(out_f),
            relu: Relu::new(),
            dropout: Dropout::new(dropout)?,
        })
    }

    fn forward(&mut self, x: &Tensor, mode: Mode, rng: &mut ChaCha8Rng) -> Result<Tensor> {
        let x = self.linear.forward(x)?;
        let x = self.bn.forward(&x, mode)?;
        let x = self.relu.forward(&x);
        Ok(self.dropout.forward(&x, mode, rng))
    }

    fn backward(&mut self, grad: &Tensor) -> Result<Tensor> {
        let grad = self.dropout.backward(grad);
        let grad = self.relu.backward(&grad);
        let grad = self.bn.backward(&grad)?;
        self.linear.backward(&grad)
    }
}

/// A parameter tensor exposed for optimization or serialization.
pub struct ParamView<'a> {
    pub name: &'static str,
    pub data: &'a mut Vec<f64>,
    /// Gradient buffer; `None` for non-trainable state (BN running stats).
    pub grad: Option<&'a mut Vec<f64>>,
}

/// The full model: architecture, parameters, and label scaling.
#[derive(Clone, Debug)]
pub struct Model {
    pub arch: Architecture,
    pub normalizer: LabelNormalizer,
    block1: (ConvUnit, ConvUnit, MaxPool2x2),
    block2: (ConvUnit, ConvUnit, MaxPool2x2),
    block3: (ConvUnit, ConvUnit, ConvUnit),
    block4: (ConvUnit, ConvUnit, ConvUnit, AdaptiveAvgPool),
    fc: [FcUnit; 3],
    output: Linear,
    softmax: Softmax,
}

impl Model {
    /// Initialize with fan-in-scaled uniform weights from `seed`.
    pub fn new(arch: Architecture, normalizer: LabelNormalizer, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut rng = rng_from_seed(seed);
        let [c1, c2, c3, c4] = arch.conv_channels;
        let [f1, f2, f3] = arch.fc_sizes;
        let dr = arch.dropout_rate;
        let flat = arch.flattened_width();
        Ok(Self {
            block1: (
                ConvUnit::new(2, c1, &mut rng),
                ConvUnit::new(c1, c1, &mut rng),
                MaxPool2x2::new(),
            ),
            block2: (
                ConvUnit::new(c1, c2, &mut rng),
                ConvUnit::new(c2, c2, &mut rng),
                MaxPool2x2::new(),
            ),
            block3: (
                ConvUnit::new(c2, c3, &mut rng),
                ConvUnit::new(c3, c3, &mut rng),
                ConvUnit::new(c3, c3, &mut rng),
            ),
            block4: (
                ConvUnit::new(c3, c4, &mut rng),
                ConvUnit::new(c4, c4, &mut rng),
                ConvUnit::new(c4, c4, &mut rng),
                AdaptiveAvgPool::new(arch.pool_target, arch.pool_target),
            ),
            fc: [
                FcUnit::new(flat, f1, dr, &mut rng)?,
                FcUnit::new(f1, f2, dr, &mut rng)?,
                FcUnit::new(f2, f3, dr, &mut rng)?,
            ],
            output: Linear::new(f3, arch.output_width(), &mut rng),
            softmax: Softmax::new(),
            arch,
            normalizer,
        })
    }

    fn check_input(&self, input: &Tensor) -> Result<usize> {
        let n = self.arch.input_size;
        match input.shape.as_slice() {
            [b, 2, h, w] if *h == n && *w == n => Ok(*b),
            other => Err(Error::InvalidArgument(format!(
                "model expects (B, 2, {n}, {n}) input, got {other:?}"
            ))),
        }
    }

    /// Run the network on a batched `(B, 2, N, N)` tensor; returns `(B, 3K)`
    /// normalized coordinates. `rng` drives dropout and is untouched in
    /// inference mode.
    pub fn forward(&mut self, input: &Tensor, mode: Mode, rng: &mut ChaCha8Rng) -> Result<Tensor> {
        self.check_input(input)?;
        let x = self.block1.0.forward(input, mode)?;
        let x = self.block1.1.forward(&x, mode)?;
        let x = self.block1.2.forward(&x)?;

        let x = self.block2.0.forward(&x, mode)?;
        let x = self.block2.1.forward(&x, mode)?;
        let x = self.block2.2.forward(&x)?;

        // block 3: residual shortcut over the last two units
        let x = self.block3.0.forward(&x, mode)?;
        let f = self.block3.1.forward(&x, mode)?;
        let f = self.block3.2.forward(&f, mode)?;
        let x = add_same_shape(&x, &f)?;

        let x = self.block4.0.forward(&x, mode)?;
        let f = self.block4.1.forward(&x, mode)?;
        let f = self.block4.2.forward(&f, mode)?;
        let x = add_same_shape(&x, &f)?;
        let x = self.block4.3.forward(&x)?;

        let b = x.shape[0];
        let mut x = Tensor {
            shape: vec![b, self.arch.flattened_width()],
            data: x.data,
        };
        for unit in self.fc.iter_mut() {
            x = unit.forward(&x, mode, rng)?;
        }
        let x = self.output.forward(&x)?;
        Ok(match self.arch.output_activation {
            OutputActivation::Linear => x,
            OutputActivation::Softmax => self.softmax.forward(&x),
        })
    }

    /// Backpropagate `grad_output` (gradient of the loss w.r.t. the model
    /// output), accumulating parameter gradients; returns the input gradient.
    pub fn backward(&mut self, grad_output: &Tensor) -> Result<Tensor> {
        let mut grad = match self.arch.output_activation {
            OutputActivation::Linear => grad_output.clone(),
            OutputActivation::Softmax => self.softmax.backward(grad_output),
        };
        grad = self.output.backward(&grad)?;
        for unit in self.fc.iter_mut().rev() {
            grad = unit.backward(&grad)?;
        }
        let b = grad.shape[0];
        let p = self.arch.pool_target;
        let grad4 = Tensor {
            shape: vec![b, self.arch.conv_channels[3], p, p],
            data: grad.data,
        };
        let grad = self.block4.3.backward(&grad4);
        // residual: identity plus the branch gradient
        let g_branch = self.block4.2.backward(&grad)?;
        let g_branch = self.block4.1.backward(&g_branch)?;
        let grad = add_same_shape(&grad, &g_branch)?;
        let grad = self.block4.0.backward(&grad)?;

        let g_branch = self.block3.2.backward(&grad)?;
        let g_branch = self.block3.1.backward(&g_branch)?;
        let grad = add_same_shape(&grad, &g_branch)?;
        let grad = self.block3.0.backward(&grad)?;

        let grad = self.block2.2.backward(&grad);
        let grad = self.block2.1.backward(&grad)?;
        let grad = self.block2.0.backward(&grad)?;

        let grad = self.block1.2.backward(&grad);
        let grad = self.block1.1.backward(&grad)?;
        self.block1.0.backward(&grad)
    }

    /// Visit every parameter tensor in declared (serialization) order.
    /// Trainable tensors expose their gradient buffer; BN running stats do
    /// not.
    pub fn visit_params(&mut self, f: &mut dyn FnMut(ParamView<'_>)) {
        fn visit_conv(unit: &mut ConvUnit, f: &mut dyn FnMut(ParamView<'_>)) {
            f(ParamView {
                name: "conv.weight",
                data: &mut unit.conv.weight,
                grad: Some(&mut unit.conv.grad_weight),
            });
            f(ParamView {
                name: "conv.bias",
                data: &mut unit.conv.bias,
                grad: Some(&mut unit.conv.grad_bias),
            });
            visit_bn(&mut unit.bn, f);
        }
        fn visit_bn(bn: &mut BatchNorm, f: &mut dyn FnMut(ParamView<'_>)) {
            f(ParamView {
                name: "bn.gamma",
                data: &mut bn.gamma,
                grad: Some(&mut bn.grad_gamma),
            });
            f(ParamView {
                name: "bn.beta",
                data: &mut bn.beta,
                grad: Some(&mut bn.grad_beta),
            });
            f(ParamView {
                name: "bn.running_mean",
                data: &mut bn.running_mean,
                grad: None,
            });
            f(ParamView {
                name: "bn.running_var",
                data: &mut bn.running_var,
                grad: None,
            });
        }
        fn visit_fc(unit: &mut FcUnit, f: &mut dyn FnMut(ParamView<'_>)) {
            f(ParamView {
                name: "fc.weight",
                data: &mut unit.linear.weight,
                grad: Some(&mut unit.linear.grad_weight),
            });
            f(ParamView {
                name: "fc.bias",
                data: &mut unit.linear.bias,
                grad: Some(&mut unit.linear.grad_bias),
            });
            visit_bn(&mut unit.bn, f);
        }

        visit_conv(&mut self.block1.0, f);
        visit_conv(&mut self.block1.1, f);
        visit_conv(&mut self.block2.0, f);
        visit_conv(&mut self.block2.1, f);
        visit_conv(&mut self.block3.0, f);
        visit_conv(&mut self.block3.1, f);
        visit_conv(&mut self.block3.2, f);
        visit_conv(&mut self.block4.0, f);
        visit_conv(&mut self.block4.1, f);
        visit_conv(&mut self.block4.2, f);
        for unit in self.fc.iter_mut() {
            visit_fc(unit, f);
        }
        f(ParamView {
            name: "output.weight",
            data: &mut self.output.weight,
            grad: Some(&mut self.output.grad_weight),
        });
        f(ParamView {
            name: "output.bias",
            data: &mut self.output.bias,
            grad: Some(&mut self.output.grad_bias),
        });
    }

    /// Zero all gradient buffers.
    pub fn zero_grads(&mut self) {
        self.visit_params(&mut |p| {
            if let Some(g) = p.grad {
                g.iter_mut().for_each(|v| *v = 0.0);
            }
        });
    }

    /// Number of trainable parameters.
    pub fn num_trainable_params(&mut self) -> usize {
        let mut n = 0;
        self.visit_params(&mut |p| {
            if p.grad.is_some() {
                n += p.data.len();
            }
        });
        n
    }

    /// Total state length (trainable params plus BN running stats), i.e.
    /// the length of the serialized payload.
    pub fn state_len(&mut self) -> usize {
        let mut n = 0;
        self.visit_params(&mut |p| n += p.data.len());
        n
    }
}

fn add_same_shape(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.shape != b.shape {
        return Err(Error::InvalidArgument(format!(
            "residual shape mismatch: {:?} vs {:?}",
            a.shape, b.shape
        )));
    }
    Ok(Tensor {
        shape: a.shape.clone(),
        data: a.data.iter().zip(&b.data).map(|(&x, &y)| x + y).collect(),
    })
}
