use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::numeric::{Scalar, Tape, Tensor, Var};

use super::layers::{ConvLayer, Dense};

fn dense_params<S>(layers: &[Dense<S>]) -> Vec<&Tensor<S>> {
    layers.iter().flat_map(|l| [&l.weight, &l.bias]).collect()
}

fn dense_params_mut<S>(layers: &mut [Dense<S>]) -> Vec<&mut Tensor<S>> {
    layers.iter_mut().flat_map(|l| [&mut l.weight, &mut l.bias]).collect()
}

fn conv_params<S>(layers: &[ConvLayer<S>]) -> Vec<&Tensor<S>> {
    layers.iter().flat_map(|l| [&l.weight, &l.bias]).collect()
}

fn conv_params_mut<S>(layers: &mut [ConvLayer<S>]) -> Vec<&mut Tensor<S>> {
    layers.iter_mut().flat_map(|l| [&mut l.weight, &mut l.bias]).collect()
}

/// Dense stack with ReLU between layers and none after the last.
fn dense_stack<S: Scalar>(tape: &mut Tape<S>, layers: &[Dense<S>], vars: &[Var], mut x: Var) -> Result<Var> {
    for (i, _) in layers.iter().enumerate() {
        x = Dense::forward(tape, &vars[2 * i..2 * i + 2], x)?;
        if i + 1 < layers.len() {
            x = tape.relu(x)?;
        }
    }
    Ok(x)
}

fn check_chain<S: Scalar>(layers: &[Dense<S>], what: &'static str) -> Result<()> {
    if layers.is_empty() {
        return Err(Error::invalid(what, "needs at least one layer"));
    }
    for pair in layers.windows(2) {
        if pair[0].outputs() != pair[1].inputs() {
            return Err(Error::shape(what, pair[0].weight.shape(), pair[1].weight.shape()));
        }
    }
    Ok(())
}

/// Fully connected autoencoder for the tabular modality.
#[derive(Clone, Debug, PartialEq)]
pub struct TabularAe<S> {
    pub encoder: Vec<Dense<S>>,
    pub decoder: Vec<Dense<S>>,
}

impl<S: Scalar> TabularAe<S> {
    /// `input -> hidden.. -> latent -> reversed hidden.. -> input`.
    pub fn init(rng: &mut ChaCha8Rng, input: usize, hidden: &[usize], latent: usize) -> Result<Self> {
        let widths: Vec<usize> = std::iter::once(input)
            .chain(hidden.iter().copied())
            .chain(std::iter::once(latent))
            .collect();
        let encoder = widths
            .windows(2)
            .map(|w| Dense::init(rng, w[0], w[1]))
            .collect::<Result<Vec<_>>>()?;
        let decoder = widths
            .iter()
            .rev()
            .collect::<Vec<_>>()
            .windows(2)
            .map(|w| Dense::init(rng, *w[0], *w[1]))
            .collect::<Result<Vec<_>>>()?;
        Self::from_layers(encoder, decoder)
    }

    pub fn from_layers(encoder: Vec<Dense<S>>, decoder: Vec<Dense<S>>) -> Result<Self> {
        check_chain(&encoder, "tabular encoder")?;
        check_chain(&decoder, "tabular decoder")?;
        let ae = Self { encoder, decoder };
        if ae.decoder[0].inputs() != ae.latent_dim() || ae.decoder.last().unwrap().outputs() != ae.input_dim() {
            return Err(Error::invalid("tabular autoencoder", "decoder does not mirror encoder dimensions"));
        }
        Ok(ae)
    }

    pub fn input_dim(&self) -> usize {
        self.encoder[0].inputs()
    }

    pub fn latent_dim(&self) -> usize {
        self.encoder.last().unwrap().outputs()
    }

    pub fn params(&self) -> Vec<&Tensor<S>> {
        let mut p = dense_params(&self.encoder);
        p.extend(dense_params(&self.decoder));
        p
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor<S>> {
        let mut p = dense_params_mut(&mut self.encoder);
        p.extend(dense_params_mut(&mut self.decoder));
        p
    }

    fn split(&self) -> usize {
        2 * self.encoder.len()
    }

    pub(crate) fn encode_on(&self, tape: &mut Tape<S>, vars: &[Var], x: Var) -> Result<Var> {
        dense_stack(tape, &self.encoder, &vars[..self.split()], x)
    }

    pub(crate) fn decode_on(&self, tape: &mut Tape<S>, vars: &[Var], h: Var) -> Result<Var> {
        dense_stack(tape, &self.decoder, &vars[self.split()..], h)
    }
}

/// Convolutional autoencoder for single-channel square images.
///
/// The encoder output is flattened into the latent vector; the decoder
/// reshapes the latent back onto `latent_grid` and ends in a sigmoid.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvAe<S> {
    pub encoder: Vec<ConvLayer<S>>,
    pub decoder: Vec<ConvLayer<S>>,
    side: usize,
    latent_grid: [usize; 3],
}

impl<S: Scalar> ConvAe<S> {
    /// Three stride-2 3x3 convolutions down and three upsample+conv blocks up.
    /// `channels` are the two intermediate widths; the bottleneck width is
    /// `latent / (side / 8)^2`.
    pub fn init(rng: &mut ChaCha8Rng, side: usize, channels: [usize; 2], latent: usize) -> Result<Self> {
        if side % 8 != 0 {
            return Err(Error::invalid("conv autoencoder", format!("image side {side} not divisible by 8")));
        }
        let cells = (side / 8) * (side / 8);
        if latent % cells != 0 {
            return Err(Error::invalid(
                "conv autoencoder",
                format!("latent width {latent} not a multiple of the {cells}-cell bottleneck grid"),
            ));
        }
        let bottleneck = latent / cells;
        let widths = [1, channels[0], channels[1], bottleneck];
        let encoder = widths
            .windows(2)
            .map(|w| ConvLayer::init(rng, w[0], w[1], 3, 2, 1))
            .collect::<Result<Vec<_>>>()?;
        let decoder = widths
            .iter()
            .rev()
            .collect::<Vec<_>>()
            .windows(2)
            .map(|w| ConvLayer::init(rng, *w[0], *w[1], 3, 1, 2))
            .collect::<Result<Vec<_>>>()?;
        Self::from_layers(encoder, decoder, side)
    }

    pub fn from_layers(encoder: Vec<ConvLayer<S>>, decoder: Vec<ConvLayer<S>>, side: usize) -> Result<Self> {
        if encoder.is_empty() || decoder.is_empty() {
            return Err(Error::invalid("conv autoencoder", "needs encoder and decoder layers"));
        }
        let trace = |layers: &[ConvLayer<S>], mut ch: usize, mut s: usize| -> Result<(usize, usize)> {
            for l in layers {
                if l.in_channels() != ch {
                    return Err(Error::invalid("conv autoencoder", format!("channel chain broken at {ch}")));
                }
                s = l
                    .output_side(s)
                    .ok_or_else(|| Error::invalid("conv autoencoder", "kernel larger than feature map"))?;
                ch = l.out_channels();
            }
            Ok((ch, s))
        };
        let (ch, grid) = trace(&encoder, 1, side)?;
        let (out_ch, out_side) = trace(&decoder, ch, grid)?;
        if out_ch != 1 || out_side != side {
            return Err(Error::invalid(
                "conv autoencoder",
                format!("decoder produces {out_ch}x{out_side}x{out_side}, expected 1x{side}x{side}"),
            ));
        }
        Ok(Self {
            encoder,
            decoder,
            side,
            latent_grid: [ch, grid, grid],
        })
    }

    pub fn side(&self) -> usize {
        self.side
    }

    pub fn latent_dim(&self) -> usize {
        self.latent_grid.iter().product()
    }

    pub fn params(&self) -> Vec<&Tensor<S>> {
        let mut p = conv_params(&self.encoder);
        p.extend(conv_params(&self.decoder));
        p
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor<S>> {
        let mut p = conv_params_mut(&mut self.encoder);
        p.extend(conv_params_mut(&mut self.decoder));
        p
    }

    fn split(&self) -> usize {
        2 * self.encoder.len()
    }

    /// `x: [batch, side * side]` to `h: [batch, latent]`.
    pub(crate) fn encode_on(&self, tape: &mut Tape<S>, vars: &[Var], x: Var) -> Result<Var> {
        let batch = tape.shape(x)[0];
        let mut y = tape.reshape(x, vec![batch, 1, self.side, self.side])?;
        for (i, layer) in self.encoder.iter().enumerate() {
            y = layer.forward(tape, &vars[2 * i..2 * i + 2], y)?;
            if i + 1 < self.encoder.len() {
                y = tape.relu(y)?;
            }
        }
        tape.reshape(y, vec![batch, self.latent_dim()])
    }

    /// `h: [batch, latent]` to `x_hat: [batch, side * side]` in `[0, 1]`.
    pub(crate) fn decode_on(&self, tape: &mut Tape<S>, vars: &[Var], h: Var) -> Result<Var> {
        let vars = &vars[self.split()..];
        let batch = tape.shape(h)[0];
        let [c, gh, gw] = self.latent_grid;
        let mut y = tape.reshape(h, vec![batch, c, gh, gw])?;
        for (i, layer) in self.decoder.iter().enumerate() {
            y = layer.forward(tape, &vars[2 * i..2 * i + 2], y)?;
            if i + 1 < self.decoder.len() {
                y = tape.relu(y)?;
            }
        }
        let y = tape.sigmoid(y)?;
        tape.reshape(y, vec![batch, self.side * self.side])
    }
}

/// Fused classifier: dense stack with ReLU hidden layers and a softmax head.
#[derive(Clone, Debug, PartialEq)]
pub struct MlpClassifier<S> {
    pub layers: Vec<Dense<S>>,
}

impl<S: Scalar> MlpClassifier<S> {
    pub fn init(rng: &mut ChaCha8Rng, input: usize, hidden: &[usize], classes: usize) -> Result<Self> {
        let widths: Vec<usize> = std::iter::once(input)
            .chain(hidden.iter().copied())
            .chain(std::iter::once(classes))
            .collect();
        let layers = widths
            .windows(2)
            .map(|w| Dense::init(rng, w[0], w[1]))
            .collect::<Result<Vec<_>>>()?;
        Self::from_layers(layers)
    }

    pub fn from_layers(layers: Vec<Dense<S>>) -> Result<Self> {
        check_chain(&layers, "classifier")?;
        if layers.last().unwrap().outputs() < 2 {
            return Err(Error::invalid("classifier", "needs at least 2 classes"));
        }
        Ok(Self { layers })
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].inputs()
    }

    pub fn classes(&self) -> usize {
        self.layers.last().unwrap().outputs()
    }

    pub fn params(&self) -> Vec<&Tensor<S>> {
        dense_params(&self.layers)
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor<S>> {
        dense_params_mut(&mut self.layers)
    }

    /// `h: [batch, input]` to class probabilities `[batch, classes]`.
    pub(crate) fn forward_on(&self, tape: &mut Tape<S>, vars: &[Var], h: Var) -> Result<Var> {
        let logits = dense_stack(tape, &self.layers, vars, h)?;
        tape.softmax(logits)
    }
}
