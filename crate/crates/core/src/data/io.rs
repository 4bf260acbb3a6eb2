//! Dataset directories.
//!
//! ```text
//! meta.json       dims, feature kinds, image format
//! tabular.csv     id,group,label,f0..f{d-1}; empty cell = missing
//! tab_masks.csv   id,f0..f{d-1} as 0/1
//! images.bin      packed images (or images/<id>.pgm)
//! masks/<id>.pgm  image masks, 0 or 255
//! ```
//!
//! Packed images: magic `MMIMG`, `u32` count, `u32` side, then `count * side²`
//! little-endian `f64` values.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::{Dataset, FeatureKind, MultimodalSample};

pub const PACKED_IMAGE_MAGIC: &[u8; 5] = b"MMIMG";
const META_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ImageFormat {
    #[default]
    Packed,
    Pgm,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Meta {
    version: u32,
    samples: usize,
    tabular_dim: usize,
    image_side: usize,
    kinds: Vec<FeatureKind>,
    image_format: ImageFormat,
}

pub fn write_packed_images<W: Write>(mut w: W, side: usize, images: &[&[f64]]) -> Result<()> {
    w.write_all(PACKED_IMAGE_MAGIC)?;
    w.write_all(&(images.len() as u32).to_le_bytes())?;
    w.write_all(&(side as u32).to_le_bytes())?;
    for img in images {
        if img.len() != side * side {
            return Err(Error::shape("write_packed_images", &[side, side], &[img.len()]));
        }
        for v in img.iter() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Returns the side and the images.
pub fn read_packed_images<R: Read>(mut r: R) -> Result<(usize, Vec<Vec<f64>>)> {
    let mut offset = 0u64;
    let mut take = |n: usize, what: &str| -> Result<Vec<u8>> {
        let mut buf = vec![0u8; n];
        r.read_exact(&mut buf)
            .map_err(|_| Error::format("packed images", offset, format!("truncated while reading {what}")))?;
        offset += n as u64;
        Ok(buf)
    };
    if take(5, "magic")? != PACKED_IMAGE_MAGIC {
        return Err(Error::format("packed images", 0, "bad magic, expected MMIMG"));
    }
    let count = u32::from_le_bytes(take(4, "count")?.try_into().unwrap()) as usize;
    let side = u32::from_le_bytes(take(4, "side")?.try_into().unwrap()) as usize;
    let mut images = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let raw = take(side * side * 8, "pixels")?;
        images.push(raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect());
    }
    Ok((side, images))
}

/// ASCII P2 with maxval 255; values in `[0, 1]` are rounded to the nearest level.
pub fn write_pgm<W: Write>(mut w: W, side: usize, pixels: &[f64]) -> Result<()> {
    if pixels.len() != side * side {
        return Err(Error::shape("write_pgm", &[side, side], &[pixels.len()]));
    }
    writeln!(w, "P2\n{side} {side}\n255")?;
    for row in pixels.chunks(side.max(1)) {
        let line: Vec<String> = row.iter().map(|v| ((v.clamp(0.0, 1.0) * 255.0).round() as u8).to_string()).collect();
        writeln!(w, "{}", line.join(" "))?;
    }
    w.flush()?;
    Ok(())
}

/// Reads an ASCII P2 image, scaling by its maxval into `[0, 1]`. Only square
/// images are accepted.
pub fn read_pgm<R: Read>(mut r: R) -> Result<(usize, Vec<f64>)> {
    let mut text = String::new();
    r.read_to_string(&mut text)?;
    let mut tokens = Vec::new();
    let mut offset = 0u64;
    for line in text.split_inclusive('\n') {
        let content = line.split('#').next().unwrap_or("");
        let mut pos = 0usize;
        for tok in content.split_ascii_whitespace() {
            let start = content[pos..].find(tok).unwrap() + pos;
            pos = start + tok.len();
            tokens.push((offset + start as u64, tok));
        }
        offset += line.len() as u64;
    }
    let mut it = tokens.into_iter();
    match it.next() {
        Some((_, "P2")) => {}
        Some((at, other)) => return Err(Error::format("pgm", at, format!("expected P2, found {other}"))),
        None => return Err(Error::format("pgm", 0, "empty file")),
    }
    let mut header = [0usize; 3];
    for (k, what) in ["width", "height", "maxval"].iter().enumerate() {
        let (at, tok) = it.next().ok_or_else(|| Error::format("pgm", offset, format!("missing {what}")))?;
        header[k] = tok
            .parse()
            .map_err(|_| Error::format("pgm", at, format!("bad {what} {tok:?}")))?;
    }
    let [w, h, maxval] = header;
    if w != h || w == 0 {
        return Err(Error::format("pgm", 0, format!("expected a square image, got {w}x{h}")));
    }
    if maxval == 0 || maxval > 65535 {
        return Err(Error::format("pgm", 0, format!("bad maxval {maxval}")));
    }
    let mut pixels = Vec::with_capacity(w * h);
    for (at, tok) in it {
        let v: usize = tok.parse().map_err(|_| Error::format("pgm", at, format!("bad pixel {tok:?}")))?;
        if v > maxval {
            return Err(Error::format("pgm", at, format!("pixel {v} exceeds maxval {maxval}")));
        }
        pixels.push(v as f64 / maxval as f64);
    }
    if pixels.len() != w * h {
        return Err(Error::format("pgm", offset, format!("expected {} pixels, found {}", w * h, pixels.len())));
    }
    Ok((w, pixels))
}

fn mask_to_pixels(mask: &[bool]) -> Vec<f64> {
    mask.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect()
}

fn fmt_f64(v: f64) -> String {
    // `{:?}` is the shortest string that parses back to the same bits.
    format!("{v:?}")
}

pub fn save_dataset(dataset: &Dataset, dir: &Path, format: ImageFormat) -> Result<()> {
    fs::create_dir_all(dir.join("masks"))?;
    let side = dataset.image_side;
    let meta = Meta {
        version: META_VERSION,
        samples: dataset.len(),
        tabular_dim: dataset.tabular_dim,
        image_side: side,
        kinds: dataset.kinds.clone(),
        image_format: format,
    };
    fs::write(dir.join("meta.json"), serde_json::to_string_pretty(&meta)? + "\n")?;

    let features: Vec<String> = (0..dataset.tabular_dim).map(|j| format!("f{j}")).collect();
    let mut tab = csv::Writer::from_path(dir.join("tabular.csv")).map_err(csv_err)?;
    let mut masks = csv::Writer::from_path(dir.join("tab_masks.csv")).map_err(csv_err)?;
    tab.write_record(["id", "group", "label"].into_iter().map(String::from).chain(features.iter().cloned()))
        .map_err(csv_err)?;
    masks.write_record(std::iter::once("id".to_string()).chain(features.iter().cloned())).map_err(csv_err)?;
    for s in &dataset.samples {
        if s.tabular.len() != dataset.tabular_dim || s.image.len() != side * side {
            return Err(Error::invalid("save_dataset", format!("sample {} has inconsistent sizes", s.id)));
        }
        let row = [s.id.to_string(), s.group.to_string(), s.label.to_string()]
            .into_iter()
            .chain(s.tabular.iter().map(|v| v.map(fmt_f64).unwrap_or_default()));
        tab.write_record(row).map_err(csv_err)?;
        let mrow = std::iter::once(s.id.to_string()).chain(s.tab_mask.iter().map(|&b| u8::from(b).to_string()));
        masks.write_record(mrow).map_err(csv_err)?;
        write_pgm(BufWriter::new(File::create(dir.join("masks").join(format!("{}.pgm", s.id)))?), side, &mask_to_pixels(&s.img_mask))?;
    }
    tab.flush()?;
    masks.flush()?;

    match format {
        ImageFormat::Packed => {
            let images: Vec<&[f64]> = dataset.samples.iter().map(|s| s.image.as_slice()).collect();
            write_packed_images(BufWriter::new(File::create(dir.join("images.bin"))?), side, &images)?;
        }
        ImageFormat::Pgm => {
            fs::create_dir_all(dir.join("images"))?;
            for s in &dataset.samples {
                let f = File::create(dir.join("images").join(format!("{}.pgm", s.id)))?;
                write_pgm(BufWriter::new(f), side, &s.image)?;
            }
        }
    }
    Ok(())
}

fn csv_err(e: csv::Error) -> Error {
    let offset = e.position().map(|p| p.byte()).unwrap_or(0);
    Error::format("csv", offset, e.to_string())
}

fn read_header(reader: &mut csv::Reader<File>, expected: &[String], file: &str) -> Result<()> {
    let header = reader.headers().map_err(csv_err)?;
    let got: Vec<&str> = header.iter().collect();
    if got != expected {
        return Err(Error::format(file, 0, format!("expected header {}, found {}", expected.join(","), got.join(","))));
    }
    Ok(())
}

fn field<T: std::str::FromStr>(rec: &csv::StringRecord, i: usize, file: &str, what: &str) -> Result<T> {
    let offset = rec.position().map(|p| p.byte()).unwrap_or(0);
    rec.get(i)
        .and_then(|v| v.trim().parse().ok())
        .ok_or_else(|| Error::format(file, offset, format!("bad {what} {:?}", rec.get(i).unwrap_or(""))))
}

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let meta: Meta = serde_json::from_str(&fs::read_to_string(dir.join("meta.json"))?)?;
    if meta.version != META_VERSION {
        return Err(Error::format("meta.json", 0, format!("unsupported version {}", meta.version)));
    }
    if meta.kinds.len() != meta.tabular_dim {
        return Err(Error::format("meta.json", 0, "kinds length differs from tabular_dim"));
    }
    let d = meta.tabular_dim;
    let side = meta.image_side;
    let features: Vec<String> = (0..d).map(|j| format!("f{j}")).collect();

    let mut tab = csv::Reader::from_path(dir.join("tabular.csv")).map_err(csv_err)?;
    let expected: Vec<String> = ["id", "group", "label"].iter().map(|s| s.to_string()).chain(features.iter().cloned()).collect();
    read_header(&mut tab, &expected, "tabular.csv")?;
    let mut samples = Vec::new();
    for rec in tab.records() {
        let rec = rec.map_err(csv_err)?;
        let offset = rec.position().map(|p| p.byte()).unwrap_or(0);
        if rec.len() != d + 3 {
            return Err(Error::format("tabular.csv", offset, format!("expected {} fields, found {}", d + 3, rec.len())));
        }
        let tabular = (0..d)
            .map(|j| match rec[j + 3].trim() {
                "" => Ok(None),
                _ => field::<f64>(&rec, j + 3, "tabular.csv", "value").map(Some),
            })
            .collect::<Result<Vec<_>>>()?;
        samples.push(MultimodalSample {
            id: field(&rec, 0, "tabular.csv", "id")?,
            group: field(&rec, 1, "tabular.csv", "group")?,
            label: field(&rec, 2, "tabular.csv", "label")?,
            tabular,
            image: Vec::new(),
            tab_mask: Vec::new(),
            img_mask: Vec::new(),
        });
    }
    if samples.len() != meta.samples {
        return Err(Error::format("tabular.csv", 0, format!("expected {} rows, found {}", meta.samples, samples.len())));
    }

    let mut masks = csv::Reader::from_path(dir.join("tab_masks.csv")).map_err(csv_err)?;
    let expected: Vec<String> = std::iter::once("id".to_string()).chain(features).collect();
    read_header(&mut masks, &expected, "tab_masks.csv")?;
    let mut mask_rows = masks.records();
    for s in &mut samples {
        let rec = mask_rows
            .next()
            .ok_or_else(|| Error::format("tab_masks.csv", 0, format!("no row for sample {}", s.id)))?
            .map_err(csv_err)?;
        let offset = rec.position().map(|p| p.byte()).unwrap_or(0);
        if rec.len() != d + 1 || field::<usize>(&rec, 0, "tab_masks.csv", "id")? != s.id {
            return Err(Error::format("tab_masks.csv", offset, format!("row does not match sample {}", s.id)));
        }
        s.tab_mask = (1..=d)
            .map(|j| match rec[j].trim() {
                "0" => Ok(false),
                "1" => Ok(true),
                v => Err(Error::format("tab_masks.csv", offset, format!("bad mask value {v:?}"))),
            })
            .collect::<Result<Vec<_>>>()?;
        let (mside, mpix) = read_pgm(BufReader::new(File::open(dir.join("masks").join(format!("{}.pgm", s.id)))?))?;
        if mside != side {
            return Err(Error::format("mask pgm", 0, format!("sample {} mask side {mside}, expected {side}", s.id)));
        }
        s.img_mask = mpix.into_iter().map(|v| v >= 0.5).collect();
    }

    match meta.image_format {
        ImageFormat::Packed => {
            let (pside, images) = read_packed_images(BufReader::new(File::open(dir.join("images.bin"))?))?;
            if pside != side || images.len() != samples.len() {
                return Err(Error::format("images.bin", 5, "image count or side differs from meta.json"));
            }
            for (s, img) in samples.iter_mut().zip(images) {
                s.image = img;
            }
        }
        ImageFormat::Pgm => {
            for s in &mut samples {
                let (pside, img) = read_pgm(BufReader::new(File::open(dir.join("images").join(format!("{}.pgm", s.id)))?))?;
                if pside != side {
                    return Err(Error::format("image pgm", 0, format!("sample {} side {pside}, expected {side}", s.id)));
                }
                s.image = img;
            }
        }
    }
    Ok(Dataset {
        tabular_dim: d,
        image_side: side,
        kinds: meta.kinds,
        samples,
    })
}
