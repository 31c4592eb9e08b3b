//! Binary dataset file format and the vocabulary sidecar.
//!
//! Header: magic, version, sample count, image dims, vocabulary table.
//! Per sample: page-type byte, raw f32-LE pixel payload, box list
//! (f32-LE coords + category byte), markup id list with a length prefix.
//! Every stored value is exactly representable in f32, so save/load
//! round-trips bit-for-bit.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::compressor::{ElementAnnotation, ElementCategory};
use crate::encoder::PageImage;
use crate::error::{Error, Result};
use crate::synth::markup::{parse_lenient, vocab};
use crate::synth::{gen_sample, GenConfig, PageType, SyntheticSample};

const MAGIC: &[u8; 4] = b"PGDS";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub height_px: usize,
    pub width_px: usize,
    pub samples: Vec<SyntheticSample>,
}

impl Dataset {
    /// Generate `count` samples from consecutive seeds.
    pub fn generate(cfg: &GenConfig, base_seed: u64, count: usize) -> Result<Dataset> {
        let samples = (0..count)
            .map(|i| gen_sample(base_seed + i as u64, cfg))
            .collect::<Result<Vec<_>>>()?;
        Ok(Dataset { height_px: cfg.height_px, width_px: cfg.width_px, samples })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        w.write_all(&(self.samples.len() as u32).to_le_bytes())?;
        w.write_all(&(self.height_px as u32).to_le_bytes())?;
        w.write_all(&(self.width_px as u32).to_le_bytes())?;
        w.write_all(&(vocab::SIZE as u16).to_le_bytes())?;
        for name in vocab::NAMES {
            w.write_all(&[name.len() as u8])?;
            w.write_all(name.as_bytes())?;
        }
        for s in &self.samples {
            w.write_all(&[s.page_type.as_u8()])?;
            for &px in &s.image.pixels {
                w.write_all(&(px as f32).to_le_bytes())?;
            }
            w.write_all(&(s.annotation.boxes.len() as u32).to_le_bytes())?;
            for (&(x0, y0, x1, y1), &cat) in
                s.annotation.boxes.iter().zip(&s.annotation.categories)
            {
                for v in [x0, y0, x1, y1] {
                    w.write_all(&(v as f32).to_le_bytes())?;
                }
                w.write_all(&[cat.as_u8()])?;
            }
            let ids = s.markup.linearize();
            w.write_all(&(ids.len() as u32).to_le_bytes())?;
            for id in ids {
                w.write_all(&(id as u16).to_le_bytes())?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Dataset> {
        let mut r = BufReader::new(File::open(path)?);
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Data(format!("{} is not a dataset file", path.display())));
        }
        let version = read_u32(&mut r)?;
        if version != VERSION {
            return Err(Error::Data(format!("unsupported dataset version {version}")));
        }
        let count = read_u32(&mut r)? as usize;
        let height_px = read_u32(&mut r)? as usize;
        let width_px = read_u32(&mut r)? as usize;
        let vocab_len = read_u16(&mut r)? as usize;
        if vocab_len != vocab::SIZE {
            return Err(Error::Data(format!(
                "dataset vocabulary has {vocab_len} entries, expected {}",
                vocab::SIZE
            )));
        }
        for expect in vocab::NAMES {
            let mut len = [0u8; 1];
            r.read_exact(&mut len)?;
            let mut name = vec![0u8; len[0] as usize];
            r.read_exact(&mut name)?;
            if name != expect.as_bytes() {
                return Err(Error::Data(format!(
                    "dataset vocabulary mismatch: {:?} vs {expect:?}",
                    String::from_utf8_lossy(&name)
                )));
            }
        }
        let mut samples = Vec::with_capacity(count);
        for i in 0..count {
            let mut tag = [0u8; 1];
            r.read_exact(&mut tag)?;
            let page_type = PageType::from_u8(tag[0])?;
            let mut pixels = Vec::with_capacity(height_px * width_px * 3);
            let mut buf = [0u8; 4];
            for _ in 0..height_px * width_px * 3 {
                r.read_exact(&mut buf)?;
                pixels.push(f32::from_le_bytes(buf) as f64);
            }
            let image = PageImage::new(height_px, width_px, pixels)?;
            let n_boxes = read_u32(&mut r)? as usize;
            let mut annotation = ElementAnnotation::default();
            for _ in 0..n_boxes {
                let mut coords = [0.0f64; 4];
                for c in coords.iter_mut() {
                    r.read_exact(&mut buf)?;
                    *c = f32::from_le_bytes(buf) as f64;
                }
                let mut cat = [0u8; 1];
                r.read_exact(&mut cat)?;
                annotation.boxes.push((coords[0], coords[1], coords[2], coords[3]));
                annotation.categories.push(ElementCategory::from_u8(cat[0])?);
            }
            annotation.validate(width_px, height_px)?;
            let n_ids = read_u32(&mut r)? as usize;
            let mut ids = Vec::with_capacity(n_ids);
            let mut id_buf = [0u8; 2];
            for _ in 0..n_ids {
                r.read_exact(&mut id_buf)?;
                ids.push(u16::from_le_bytes(id_buf) as usize);
            }
            let (markup, valid) = parse_lenient(&ids);
            if !valid {
                return Err(Error::Data(format!("sample {i}: stored markup does not parse")));
            }
            samples.push(SyntheticSample { image, annotation, markup, page_type });
        }
        Ok(Dataset { height_px, width_px, samples })
    }
}

/// One token name per line; a token's id is its line number.
pub fn write_vocab_sidecar(path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for name in vocab::NAMES {
        writeln!(w, "{name}")?;
    }
    w.flush()?;
    Ok(())
}

fn read_u16<R: Read>(r: &mut R) -> Result<u16> {
    let mut b = [0u8; 2];
    r.read_exact(&mut b)?;
    Ok(u16::from_le_bytes(b))
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}
