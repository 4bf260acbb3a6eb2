use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::numeric::{Scalar, Tape, Tensor, Var};

/// Uniform Glorot bound `sqrt(6 / (fan_in + fan_out))`.
fn glorot<S: Scalar>(rng: &mut ChaCha8Rng, n: usize, fan_in: usize, fan_out: usize) -> Vec<S> {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    (0..n).map(|_| S::of(rng.random_range(-bound..bound))).collect()
}

fn param<S: Scalar>(shape: Vec<usize>, data: Vec<S>) -> Result<Tensor<S>> {
    Ok(Tensor::new(shape, data)?.with_grad())
}

/// Fully connected layer, `y = x W + b` with `W: [in, out]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dense<S> {
    pub weight: Tensor<S>,
    pub bias: Tensor<S>,
}

impl<S: Scalar> Dense<S> {
    pub fn init(rng: &mut ChaCha8Rng, inputs: usize, outputs: usize) -> Result<Self> {
        Ok(Self {
            weight: param(vec![inputs, outputs], glorot(rng, inputs * outputs, inputs, outputs))?,
            bias: param(vec![outputs], vec![S::zero(); outputs])?,
        })
    }

    pub fn from_parts(weight: Tensor<S>, bias: Tensor<S>) -> Result<Self> {
        let ws = weight.shape();
        if ws.len() != 2 || bias.shape() != [ws[1]] {
            return Err(Error::shape("dense", ws, bias.shape()));
        }
        Ok(Self {
            weight: weight.with_grad(),
            bias: bias.with_grad(),
        })
    }

    pub fn inputs(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn outputs(&self) -> usize {
        self.weight.shape()[1]
    }

    pub(crate) fn forward(tape: &mut Tape<S>, vars: &[Var], x: Var) -> Result<Var> {
        let y = tape.matmul(x, vars[0])?;
        tape.add_bias(y, vars[1])
    }
}

/// 2-D convolution, optionally preceded by zero-insertion upsampling.
///
/// `upsample > 1` followed by a stride-1 convolution is how the decoder
/// expresses a transposed convolution.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvLayer<S> {
    pub weight: Tensor<S>,
    pub bias: Tensor<S>,
    pub stride: usize,
    pub pad: usize,
    pub upsample: usize,
}

impl<S: Scalar> ConvLayer<S> {
    pub fn init(
        rng: &mut ChaCha8Rng,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        upsample: usize,
    ) -> Result<Self> {
        let n = cout * cin * kernel * kernel;
        Ok(Self {
            weight: param(
                vec![cout, cin, kernel, kernel],
                glorot(rng, n, cin * kernel * kernel, cout * kernel * kernel),
            )?,
            bias: param(vec![cout], vec![S::zero(); cout])?,
            stride,
            pad: kernel / 2,
            upsample,
        })
    }

    pub fn from_parts(weight: Tensor<S>, bias: Tensor<S>, stride: usize, pad: usize, upsample: usize) -> Result<Self> {
        let ws = weight.shape();
        if ws.len() != 4 || ws[2] != ws[3] || bias.shape() != [ws[0]] {
            return Err(Error::shape("conv layer", ws, bias.shape()));
        }
        if stride == 0 || upsample == 0 {
            return Err(Error::invalid("conv layer", "stride and upsample factor must be >= 1"));
        }
        Ok(Self {
            weight: weight.with_grad(),
            bias: bias.with_grad(),
            stride,
            pad,
            upsample,
        })
    }

    pub fn in_channels(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn kernel(&self) -> usize {
        self.weight.shape()[2]
    }

    /// Spatial output extent for an input of side `side`.
    pub fn output_side(&self, side: usize) -> Option<usize> {
        let up = side * self.upsample;
        let padded = up + 2 * self.pad;
        (padded >= self.kernel()).then(|| (padded - self.kernel()) / self.stride + 1)
    }

    pub(crate) fn forward(&self, tape: &mut Tape<S>, vars: &[Var], x: Var) -> Result<Var> {
        if self.upsample > 1 && self.stride == 1 {
            return tape.upconv2d(x, vars[0], vars[1], self.upsample, self.pad);
        }
        let x = if self.upsample > 1 {
            tape.upsample(x, self.upsample)?
        } else {
            x
        };
        tape.conv2d(x, vars[0], vars[1], self.stride, self.pad)
    }
}

/// Records parameters on a tape, as differentiable leaves when `trainable`.
pub(crate) fn bind_all<S: Scalar>(tape: &mut Tape<S>, params: &[&Tensor<S>], trainable: bool) -> Vec<Var> {
    params
        .iter()
        .map(|p| if trainable { tape.leaf(p) } else { tape.constant(p) })
        .collect()
}
