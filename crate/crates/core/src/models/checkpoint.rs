//! Binary little-endian model checkpoints.
//!
//! Layout: magic `MMXAI\0`, `u32` version, five `u32` dims
//! (tabular_dim, image_side, tabular_latent, image_latent, classes), `u32`
//! record count, then per record: `u32` name length, UTF-8 name, `u32` rank,
//! `rank` x `u32` extents and the row-major `f64` payload.
//! Convolution layers carry an extra `<prefix>.geometry` record holding
//! `[stride, pad, upsample]`.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::numeric::{Scalar, Tensor};

use super::{ConvAe, ConvLayer, Dense, MlpClassifier, ModelDims, MultimodalModel, TabularAe};

pub const CHECKPOINT_MAGIC: &[u8; 6] = b"MMXAI\0";
pub const CHECKPOINT_VERSION: u32 = 1;

fn records<S: Scalar>(model: &MultimodalModel<S>) -> Vec<(String, Vec<usize>, Vec<f64>)> {
    let mut out: Vec<(String, Vec<usize>, Vec<f64>)> = Vec::new();
    let geometry = model.conv_ae().map(|cae| {
        let mut g = BTreeMap::new();
        for (part, layers) in [("enc", &cae.encoder), ("dec", &cae.decoder)] {
            for (i, l) in layers.iter().enumerate() {
                g.insert(
                    format!("cae.{part}.{i}.weight"),
                    (format!("cae.{part}.{i}.geometry"), [l.stride, l.pad, l.upsample]),
                );
            }
        }
        g
    });
    for (name, t) in model.named_params() {
        out.push((name.clone(), t.shape().to_vec(), t.to_f64_vec()));
        if let Some((gname, vals)) = geometry.as_ref().and_then(|g| g.get(&name)) {
            out.push((gname.clone(), vec![3], vals.iter().map(|&v| v as f64).collect()));
        }
    }
    out
}

pub fn write_checkpoint<S: Scalar, W: Write>(model: &MultimodalModel<S>, mut w: W) -> Result<()> {
    let d = model.dims();
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    for v in [d.tabular_dim, d.image_side, d.tabular_latent, d.image_latent, d.classes] {
        w.write_all(&(v as u32).to_le_bytes())?;
    }
    let recs = records(model);
    w.write_all(&(recs.len() as u32).to_le_bytes())?;
    for (name, shape, data) in recs {
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&(shape.len() as u32).to_le_bytes())?;
        for e in shape {
            w.write_all(&(e as u32).to_le_bytes())?;
        }
        for v in data {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn save_checkpoint<S: Scalar>(model: &MultimodalModel<S>, path: &Path) -> Result<()> {
    write_checkpoint(model, BufWriter::new(File::create(path)?))
}

struct Cursor<R> {
    inner: R,
    offset: u64,
}

impl<R: Read> Cursor<R> {
    fn bytes(&mut self, n: usize, what: &str) -> Result<Vec<u8>> {
        let mut buf = vec![0u8; n];
        self.inner
            .read_exact(&mut buf)
            .map_err(|_| Error::format("checkpoint", self.offset, format!("truncated while reading {what}")))?;
        self.offset += n as u64;
        Ok(buf)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.bytes(4, what)?;
        Ok(u32::from_le_bytes(b.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        let b = self.bytes(8, "payload")?;
        Ok(f64::from_le_bytes(b.try_into().unwrap()))
    }
}

pub fn read_checkpoint<S: Scalar, R: Read>(reader: R) -> Result<MultimodalModel<S>> {
    let mut c = Cursor {
        inner: reader,
        offset: 0,
    };
    let magic = c.bytes(CHECKPOINT_MAGIC.len(), "magic")?;
    if magic != CHECKPOINT_MAGIC {
        return Err(Error::format("checkpoint", 0, "bad magic, expected MMXAI\\0"));
    }
    let version_at = c.offset;
    let version = c.u32("version")?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::format("checkpoint", version_at, format!("unsupported version {version}")));
    }
    let mut d = [0usize; 5];
    for v in &mut d {
        *v = c.u32("dims")? as usize;
    }
    let dims = ModelDims {
        tabular_dim: d[0],
        image_side: d[1],
        tabular_latent: d[2],
        image_latent: d[3],
        classes: d[4],
    };
    let count = c.u32("record count")?;
    let mut table: BTreeMap<String, (Vec<usize>, Vec<f64>)> = BTreeMap::new();
    for _ in 0..count {
        let at = c.offset;
        let len = c.u32("name length")? as usize;
        if len > 1024 {
            return Err(Error::format("checkpoint", at, format!("implausible name length {len}")));
        }
        let name = String::from_utf8(c.bytes(len, "name")?)
            .map_err(|_| Error::format("checkpoint", at, "record name is not UTF-8"))?;
        let rank = c.u32("rank")? as usize;
        if rank == 0 || rank > 8 {
            return Err(Error::format("checkpoint", at, format!("implausible rank {rank} for {name}")));
        }
        let shape = (0..rank).map(|_| c.u32("shape").map(|v| v as usize)).collect::<Result<Vec<_>>>()?;
        let numel: usize = shape.iter().product();
        let data = (0..numel).map(|_| c.f64()).collect::<Result<Vec<_>>>()?;
        table.insert(name, (shape, data));
    }
    assemble(dims, table)
}

pub fn load_checkpoint<S: Scalar>(path: &Path) -> Result<MultimodalModel<S>> {
    read_checkpoint(BufReader::new(File::open(path)?))
}

type Table = BTreeMap<String, (Vec<usize>, Vec<f64>)>;

fn take<S: Scalar>(table: &mut Table, name: &str) -> Option<Result<Tensor<S>>> {
    table.remove(name).map(|(shape, data)| Tensor::from_f64(shape, &data))
}

fn dense_chain<S: Scalar>(table: &mut Table, prefix: &str) -> Result<Vec<Dense<S>>> {
    let mut layers = Vec::new();
    while let Some(w) = take(table, &format!("{prefix}.{}.weight", layers.len())) {
        let b = take(table, &format!("{prefix}.{}.bias", layers.len()))
            .ok_or_else(|| Error::format("checkpoint", 0, format!("{prefix}.{} has no bias", layers.len())))??;
        layers.push(Dense::from_parts(w?, b)?);
    }
    Ok(layers)
}

fn conv_chain<S: Scalar>(table: &mut Table, prefix: &str) -> Result<Vec<ConvLayer<S>>> {
    let mut layers = Vec::new();
    while let Some(w) = take::<S>(table, &format!("{prefix}.{}.weight", layers.len())) {
        let i = layers.len();
        let missing = |what: &str| Error::format("checkpoint", 0, format!("{prefix}.{i} has no {what}"));
        let b = take(table, &format!("{prefix}.{i}.bias")).ok_or_else(|| missing("bias"))??;
        let (_, g) = table.remove(&format!("{prefix}.{i}.geometry")).ok_or_else(|| missing("geometry"))?;
        if g.len() != 3 {
            return Err(missing("3-value geometry"));
        }
        layers.push(ConvLayer::from_parts(w?, b, g[0] as usize, g[1] as usize, g[2] as usize)?);
    }
    Ok(layers)
}

fn assemble<S: Scalar>(dims: ModelDims, mut table: Table) -> Result<MultimodalModel<S>> {
    let ae_enc = dense_chain(&mut table, "ae.enc")?;
    let ae_dec = dense_chain(&mut table, "ae.dec")?;
    let tabular = match (ae_enc.is_empty(), ae_dec.is_empty()) {
        (true, true) => None,
        (false, false) => Some(TabularAe::from_layers(ae_enc, ae_dec)?),
        _ => return Err(Error::format("checkpoint", 0, "tabular autoencoder is missing a half")),
    };
    let cae_enc = conv_chain(&mut table, "cae.enc")?;
    let cae_dec = conv_chain(&mut table, "cae.dec")?;
    let image = match (cae_enc.is_empty(), cae_dec.is_empty()) {
        (true, true) => None,
        (false, false) => Some(ConvAe::from_layers(cae_enc, cae_dec, dims.image_side)?),
        _ => return Err(Error::format("checkpoint", 0, "conv autoencoder is missing a half")),
    };
    let classifier = MlpClassifier::from_layers(dense_chain(&mut table, "clf")?)?;
    if let Some(name) = table.keys().next() {
        return Err(Error::format("checkpoint", 0, format!("unexpected record {name}")));
    }
    MultimodalModel::from_parts(dims, tabular, image, classifier)
}
