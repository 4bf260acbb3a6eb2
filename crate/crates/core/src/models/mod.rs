//! The three-block multimodal network: tabular autoencoder, convolutional
//! image autoencoder and a classifier over the concatenated latents.

mod blocks;
mod checkpoint;
mod layers;

pub use blocks::{ConvAe, MlpClassifier, TabularAe};
pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use layers::{ConvLayer, Dense};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::{Scalar, Tape, Tensor, Var};

use layers::bind_all;

/// Which input modalities a model consumes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Modality {
    Both,
    TabularOnly,
    ImageOnly,
}

impl Modality {
    pub fn uses_tabular(self) -> bool {
        !matches!(self, Modality::ImageOnly)
    }

    pub fn uses_image(self) -> bool {
        !matches!(self, Modality::TabularOnly)
    }
}

/// Input, latent and output widths.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelDims {
    /// Number of tabular features.
    pub tabular_dim: usize,
    /// Image side length; images are `image_side x image_side`.
    pub image_side: usize,
    pub tabular_latent: usize,
    pub image_latent: usize,
    pub classes: usize,
}

impl Default for ModelDims {
    fn default() -> Self {
        Self {
            tabular_dim: 16,
            image_side: 32,
            tabular_latent: 8,
            image_latent: 32,
            classes: 2,
        }
    }
}

/// Hidden-layer sizes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArchConfig {
    pub ae_hidden: Vec<usize>,
    pub cae_channels: [usize; 2],
    pub classifier_hidden: Vec<usize>,
    pub modality: Modality,
}

impl Default for ArchConfig {
    fn default() -> Self {
        Self {
            ae_hidden: vec![32, 16],
            cae_channels: [8, 8],
            classifier_hidden: vec![32, 16, 8],
            modality: Modality::Both,
        }
    }
}

/// `h_t`, `h_i` and their concatenation `h`.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentEmbedding<S> {
    pub h_t: Vec<S>,
    pub h_i: Vec<S>,
    pub h: Vec<S>,
}

impl<S: Scalar> LatentEmbedding<S> {
    pub fn new(h_t: Vec<S>, h_i: Vec<S>) -> Self {
        let h = h_t.iter().chain(&h_i).copied().collect();
        Self { h_t, h_i, h }
    }

    /// Splits a fused latent after the first `n` coordinates.
    pub fn split(h: &[S], n: usize) -> Self {
        Self::new(h[..n].to_vec(), h[n..].to_vec())
    }
}

/// Reconstructions, class probabilities and latents of one sample.
#[derive(Clone, Debug, PartialEq)]
pub struct ForwardOutput<S> {
    pub recon_t: Vec<S>,
    pub recon_i: Vec<S>,
    pub probs: Vec<S>,
    pub latent: LatentEmbedding<S>,
}

/// Block selector for training-time parameter binding.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Block {
    TabularAe,
    ConvAe,
    Classifier,
}

#[derive(Clone, Debug)]
pub struct MultimodalModel<S> {
    dims: ModelDims,
    tabular: Option<TabularAe<S>>,
    image: Option<ConvAe<S>>,
    classifier: MlpClassifier<S>,
}

/// Parameters of a model recorded on one tape.
#[derive(Clone, Debug, Default)]
pub(crate) struct BoundModel {
    pub tabular: Vec<Var>,
    pub image: Vec<Var>,
    pub classifier: Vec<Var>,
}

/// Which outputs a batched forward pass should build.
#[derive(Clone, Copy, Debug, Default)]
pub(crate) struct Want {
    pub recon_t: bool,
    pub recon_i: bool,
    pub classify: bool,
}

#[derive(Clone, Debug, Default)]
pub(crate) struct BatchVars {
    pub recon_t: Option<Var>,
    pub recon_i: Option<Var>,
    pub probs: Option<Var>,
}

impl<S: Scalar> MultimodalModel<S> {
    /// Glorot-initialised model; fails when a latent is not a bottleneck.
    pub fn new(dims: ModelDims, arch: &ArchConfig, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let tabular = arch
            .modality
            .uses_tabular()
            .then(|| TabularAe::init(&mut rng, dims.tabular_dim, &arch.ae_hidden, dims.tabular_latent))
            .transpose()?;
        let image = arch
            .modality
            .uses_image()
            .then(|| ConvAe::init(&mut rng, dims.image_side, arch.cae_channels, dims.image_latent))
            .transpose()?;
        let width = tabular.as_ref().map_or(0, |_| dims.tabular_latent) + image.as_ref().map_or(0, |_| dims.image_latent);
        let classifier = MlpClassifier::init(&mut rng, width, &arch.classifier_hidden, dims.classes)?;
        Self::from_parts(dims, tabular, image, classifier)
    }

    pub fn from_parts(
        dims: ModelDims,
        tabular: Option<TabularAe<S>>,
        image: Option<ConvAe<S>>,
        classifier: MlpClassifier<S>,
    ) -> Result<Self> {
        if tabular.is_none() && image.is_none() {
            return Err(Error::invalid("model", "at least one modality block is required"));
        }
        if let Some(ae) = &tabular {
            if ae.input_dim() != dims.tabular_dim || ae.latent_dim() != dims.tabular_latent {
                return Err(Error::invalid("model", "tabular autoencoder does not match dims"));
            }
            if dims.tabular_latent >= dims.tabular_dim {
                return Err(Error::invalid(
                    "model",
                    format!("tabular latent {} must be smaller than input {}", dims.tabular_latent, dims.tabular_dim),
                ));
            }
        }
        if let Some(cae) = &image {
            if cae.side() != dims.image_side || cae.latent_dim() != dims.image_latent {
                return Err(Error::invalid("model", "conv autoencoder does not match dims"));
            }
            if dims.image_latent >= dims.image_side * dims.image_side {
                return Err(Error::invalid(
                    "model",
                    format!("image latent {} must be smaller than {} pixels", dims.image_latent, dims.image_side.pow(2)),
                ));
            }
        }
        let model = Self {
            dims,
            tabular,
            image,
            classifier,
        };
        if model.classifier.input_dim() != model.latent_width() || model.classifier.classes() != dims.classes {
            return Err(Error::invalid(
                "model",
                format!(
                    "classifier maps {} -> {}, expected {} -> {}",
                    model.classifier.input_dim(),
                    model.classifier.classes(),
                    model.latent_width(),
                    dims.classes
                ),
            ));
        }
        Ok(model)
    }

    pub fn dims(&self) -> ModelDims {
        self.dims
    }

    pub fn modality(&self) -> Modality {
        match (&self.tabular, &self.image) {
            (Some(_), Some(_)) => Modality::Both,
            (Some(_), None) => Modality::TabularOnly,
            _ => Modality::ImageOnly,
        }
    }

    /// Latent width of the tabular part of `h` (zero when ablated).
    pub fn tabular_width(&self) -> usize {
        self.tabular.as_ref().map_or(0, |_| self.dims.tabular_latent)
    }

    pub fn image_width(&self) -> usize {
        self.image.as_ref().map_or(0, |_| self.dims.image_latent)
    }

    /// Width of the fused latent `h`.
    pub fn latent_width(&self) -> usize {
        self.tabular_width() + self.image_width()
    }

    pub fn tabular_ae(&self) -> Option<&TabularAe<S>> {
        self.tabular.as_ref()
    }

    pub fn conv_ae(&self) -> Option<&ConvAe<S>> {
        self.image.as_ref()
    }

    pub fn classifier(&self) -> &MlpClassifier<S> {
        &self.classifier
    }

    pub fn block_params(&self, block: Block) -> Vec<&Tensor<S>> {
        match block {
            Block::TabularAe => self.tabular.as_ref().map(TabularAe::params).unwrap_or_default(),
            Block::ConvAe => self.image.as_ref().map(ConvAe::params).unwrap_or_default(),
            Block::Classifier => self.classifier.params(),
        }
    }

    pub fn block_params_mut(&mut self, block: Block) -> Vec<&mut Tensor<S>> {
        match block {
            Block::TabularAe => self.tabular.as_mut().map(TabularAe::params_mut).unwrap_or_default(),
            Block::ConvAe => self.image.as_mut().map(ConvAe::params_mut).unwrap_or_default(),
            Block::Classifier => self.classifier.params_mut(),
        }
    }

    /// Named parameters in checkpoint order.
    pub fn named_params(&self) -> Vec<(String, &Tensor<S>)> {
        let mut out = Vec::new();
        if let Some(ae) = &self.tabular {
            for (part, layers) in [("enc", &ae.encoder), ("dec", &ae.decoder)] {
                for (i, l) in layers.iter().enumerate() {
                    out.push((format!("ae.{part}.{i}.weight"), &l.weight));
                    out.push((format!("ae.{part}.{i}.bias"), &l.bias));
                }
            }
        }
        if let Some(cae) = &self.image {
            for (part, layers) in [("enc", &cae.encoder), ("dec", &cae.decoder)] {
                for (i, l) in layers.iter().enumerate() {
                    out.push((format!("cae.{part}.{i}.weight"), &l.weight));
                    out.push((format!("cae.{part}.{i}.bias"), &l.bias));
                }
            }
        }
        for (i, l) in self.classifier.layers.iter().enumerate() {
            out.push((format!("clf.{i}.weight"), &l.weight));
            out.push((format!("clf.{i}.bias"), &l.bias));
        }
        out
    }

    /// Mutable parameters of `blocks`, in the order given.
    pub(crate) fn params_mut_of(&mut self, blocks: &[Block]) -> Vec<&mut Tensor<S>> {
        let Self {
            tabular,
            image,
            classifier,
            ..
        } = self;
        let (mut t, mut i, mut c) = (
            tabular.as_mut().map(TabularAe::params_mut),
            image.as_mut().map(ConvAe::params_mut),
            Some(classifier.params_mut()),
        );
        let mut out = Vec::new();
        for block in blocks {
            let part = match block {
                Block::TabularAe => t.take(),
                Block::ConvAe => i.take(),
                Block::Classifier => c.take(),
            };
            out.extend(part.unwrap_or_default());
        }
        out
    }

    pub fn zero_grads(&mut self) {
        for block in [Block::TabularAe, Block::ConvAe, Block::Classifier] {
            for p in self.block_params_mut(block) {
                p.zero_grad();
            }
        }
    }

    // ---- tape plumbing ----------------------------------------------------

    /// Records every parameter; blocks listed in `trainable` become
    /// differentiable leaves, the rest constants.
    pub(crate) fn bind(&self, tape: &mut Tape<S>, trainable: &[Block]) -> BoundModel {
        let is = |b: Block| trainable.contains(&b);
        BoundModel {
            tabular: bind_all(tape, &self.block_params(Block::TabularAe), is(Block::TabularAe)),
            image: bind_all(tape, &self.block_params(Block::ConvAe), is(Block::ConvAe)),
            classifier: bind_all(tape, &self.block_params(Block::Classifier), is(Block::Classifier)),
        }
    }

    /// Copies gradients from `tape` into the parameters of `blocks`.
    pub(crate) fn collect_grads(&mut self, tape: &Tape<S>, bound: &BoundModel, blocks: &[Block]) -> Result<()> {
        for &block in blocks {
            let vars = match block {
                Block::TabularAe => &bound.tabular,
                Block::ConvAe => &bound.image,
                Block::Classifier => &bound.classifier,
            };
            for (p, v) in self.block_params_mut(block).into_iter().zip(vars) {
                p.set_grad(tape.grad(*v))?;
            }
        }
        Ok(())
    }

    pub(crate) fn encode_tabular_on(&self, tape: &mut Tape<S>, bound: &BoundModel, x: Var) -> Result<Var> {
        let ae = self.tabular.as_ref().ok_or_else(|| Error::invalid("ae_encode", "model has no tabular block"))?;
        ae.encode_on(tape, &bound.tabular, x)
    }

    pub(crate) fn decode_tabular_on(&self, tape: &mut Tape<S>, bound: &BoundModel, h: Var) -> Result<Var> {
        let ae = self.tabular.as_ref().ok_or_else(|| Error::invalid("ae_decode", "model has no tabular block"))?;
        ae.decode_on(tape, &bound.tabular, h)
    }

    pub(crate) fn encode_image_on(&self, tape: &mut Tape<S>, bound: &BoundModel, x: Var) -> Result<Var> {
        let cae = self.image.as_ref().ok_or_else(|| Error::invalid("cae_encode", "model has no image block"))?;
        cae.encode_on(tape, &bound.image, x)
    }

    pub(crate) fn decode_image_on(&self, tape: &mut Tape<S>, bound: &BoundModel, h: Var) -> Result<Var> {
        let cae = self.image.as_ref().ok_or_else(|| Error::invalid("cae_decode", "model has no image block"))?;
        cae.decode_on(tape, &bound.image, h)
    }

    pub(crate) fn classify_on(&self, tape: &mut Tape<S>, bound: &BoundModel, h: Var) -> Result<Var> {
        self.classifier.forward_on(tape, &bound.classifier, h)
    }

    /// Fuses per-modality latents in `[h_t, h_i]` order, skipping absent ones.
    pub(crate) fn fuse_on(&self, tape: &mut Tape<S>, h_t: Option<Var>, h_i: Option<Var>) -> Result<Var> {
        match (h_t, h_i) {
            (Some(t), Some(i)) => tape.concat(t, i),
            (Some(t), None) => Ok(t),
            (None, Some(i)) => Ok(i),
            (None, None) => Err(Error::invalid("fuse", "no latent to fuse")),
        }
    }

    /// Batched forward pass building only what `want` asks for.
    pub(crate) fn forward_batch(
        &self,
        tape: &mut Tape<S>,
        bound: &BoundModel,
        x_t: Option<Var>,
        x_i: Option<Var>,
        want: Want,
    ) -> Result<BatchVars> {
        let need_t = self.tabular.is_some() && (want.recon_t || want.classify);
        let need_i = self.image.is_some() && (want.recon_i || want.classify);
        let missing = |what| Error::invalid("forward", format!("{what} input required"));
        let h_t = if need_t {
            Some(self.encode_tabular_on(tape, bound, x_t.ok_or_else(|| missing("tabular"))?)?)
        } else {
            None
        };
        let h_i = if need_i {
            Some(self.encode_image_on(tape, bound, x_i.ok_or_else(|| missing("image"))?)?)
        } else {
            None
        };
        let mut out = BatchVars::default();
        if want.recon_t {
            if let Some(h) = h_t {
                out.recon_t = Some(self.decode_tabular_on(tape, bound, h)?);
            }
        }
        if want.recon_i {
            if let Some(h) = h_i {
                out.recon_i = Some(self.decode_image_on(tape, bound, h)?);
            }
        }
        if want.classify {
            let h = self.fuse_on(tape, h_t, h_i)?;
            out.probs = Some(self.classify_on(tape, bound, h)?);
        }
        Ok(out)
    }

    // ---- single-sample inference -------------------------------------------

    fn frozen(&self) -> (Tape<S>, BoundModel) {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, &[]);
        (tape, bound)
    }

    fn check_len(op: &'static str, got: usize, want: usize) -> Result<()> {
        if got != want {
            return Err(Error::shape(op, &[got], &[want]));
        }
        Ok(())
    }

    pub fn ae_encode(&self, x_t: &[S]) -> Result<Vec<S>> {
        Self::check_len("ae_encode", x_t.len(), self.dims.tabular_dim)?;
        let (mut tape, bound) = self.frozen();
        let x = tape.input(vec![1, x_t.len()], x_t.to_vec(), false)?;
        let h = self.encode_tabular_on(&mut tape, &bound, x)?;
        Ok(tape.value(h).to_vec())
    }

    pub fn cae_encode(&self, x_i: &[S]) -> Result<Vec<S>> {
        Self::check_len("cae_encode", x_i.len(), self.dims.image_side.pow(2))?;
        let (mut tape, bound) = self.frozen();
        let x = tape.input(vec![1, x_i.len()], x_i.to_vec(), false)?;
        let h = self.encode_image_on(&mut tape, &bound, x)?;
        Ok(tape.value(h).to_vec())
    }

    pub fn ae_decode(&self, h_t: &[S]) -> Result<Vec<S>> {
        Self::check_len("ae_decode", h_t.len(), self.tabular_width())?;
        let (mut tape, bound) = self.frozen();
        let h = tape.input(vec![1, h_t.len()], h_t.to_vec(), false)?;
        let x = self.decode_tabular_on(&mut tape, &bound, h)?;
        Ok(tape.value(x).to_vec())
    }

    pub fn cae_decode(&self, h_i: &[S]) -> Result<Vec<S>> {
        Self::check_len("cae_decode", h_i.len(), self.image_width())?;
        let (mut tape, bound) = self.frozen();
        let h = tape.input(vec![1, h_i.len()], h_i.to_vec(), false)?;
        let x = self.decode_image_on(&mut tape, &bound, h)?;
        Ok(tape.value(x).to_vec())
    }

    /// Class probabilities for a fused latent `h`.
    pub fn classify(&self, h: &[S]) -> Result<Vec<S>> {
        Self::check_len("classify", h.len(), self.latent_width())?;
        let (mut tape, bound) = self.frozen();
        let hv = tape.input(vec![1, h.len()], h.to_vec(), false)?;
        let y = self.classify_on(&mut tape, &bound, hv)?;
        Ok(tape.value(y).to_vec())
    }

    /// Encodes whichever modalities the model uses.
    pub fn encode(&self, x_t: &[S], x_i: &[S]) -> Result<LatentEmbedding<S>> {
        let h_t = if self.tabular.is_some() { self.ae_encode(x_t)? } else { Vec::new() };
        let h_i = if self.image.is_some() { self.cae_encode(x_i)? } else { Vec::new() };
        Ok(LatentEmbedding::new(h_t, h_i))
    }

    /// Decodes the latent(s) of whichever modalities the model uses.
    pub fn decode(&self, latent: &LatentEmbedding<S>) -> Result<(Vec<S>, Vec<S>)> {
        let recon_t = if self.tabular.is_some() { self.ae_decode(&latent.h_t)? } else { Vec::new() };
        let recon_i = if self.image.is_some() { self.cae_decode(&latent.h_i)? } else { Vec::new() };
        Ok((recon_t, recon_i))
    }

    /// Both reconstructions, the class probabilities and the latents.
    pub fn forward(&self, x_t: &[S], x_i: &[S]) -> Result<ForwardOutput<S>> {
        let latent = self.encode(x_t, x_i)?;
        let (recon_t, recon_i) = self.decode(&latent)?;
        let probs = self.classify(&latent.h)?;
        Ok(ForwardOutput {
            recon_t,
            recon_i,
            probs,
            latent,
        })
    }
}

/// Index of the largest entry; the first one wins ties.
pub fn argmax<S: Scalar>(values: &[S]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests;
