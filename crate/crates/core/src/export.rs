//! File formats for segmentation outputs.
//!
//! Probabilities are written as a multi-page TIFF with one 32-bit float
//! grayscale page per class, in class order. Label masks are 8-bit indexed
//! PNGs whose palette follows the class table, with the table itself in a
//! JSON sidecar next to the image.

use std::io::Cursor;
use std::path::{Path, PathBuf};

use tiff::decoder::{Decoder, DecodingResult};
use tiff::encoder::{colortype, TiffEncoder};

use crate::checkpoint::write_atomic;
use crate::decoder::ProbabilityMap;
use crate::error::{Error, Result};
use crate::mask::{ClassTable, LabelMask};

pub fn encode_probability_tiff(prob: &ProbabilityMap) -> Result<Vec<u8>> {
    let mut buf = Cursor::new(Vec::new());
    {
        let mut enc = TiffEncoder::new(&mut buf)?;
        for c in 0..prob.num_classes {
            enc.write_image::<colortype::Gray32Float>(prob.width as u32, prob.height as u32, &prob.channel(c))?;
        }
    }
    Ok(buf.into_inner())
}

pub fn decode_probability_tiff(bytes: &[u8], spacing_um: f64) -> Result<ProbabilityMap> {
    let mut dec = Decoder::new(Cursor::new(bytes))?;
    let (w, h) = dec.dimensions()?;
    let mut pages = Vec::new();
    loop {
        if dec.dimensions()? != (w, h) {
            return Err(Error::Codec("probability pages differ in size".into()));
        }
        match dec.read_image()? {
            DecodingResult::F32(v) => pages.push(v),
            _ => return Err(Error::Codec("probability pages must be 32-bit float".into())),
        }
        if !dec.more_images() {
            break;
        }
        dec.next_image()?;
    }
    let (w, h, k) = (w as usize, h as usize, pages.len());
    let mut data = vec![0.0f32; w * h * k];
    for (c, page) in pages.iter().enumerate() {
        for (i, &v) in page.iter().enumerate() {
            data[i * k + c] = v;
        }
    }
    ProbabilityMap::new(h, w, k, data, spacing_um)
}

pub fn save_probability_tiff(prob: &ProbabilityMap, path: &Path) -> Result<()> {
    write_atomic(path, &encode_probability_tiff(prob)?)
}

/// `mask.png` -> `mask.classes.json`.
pub fn sidecar_path(mask_path: &Path) -> PathBuf {
    mask_path.with_extension("classes.json")
}

/// Writes the indexed PNG and its class-table sidecar.
pub fn save_mask(mask: &LabelMask, classes: &ClassTable, path: &Path) -> Result<()> {
    write_atomic(path, &mask.encode_indexed_png(classes)?)?;
    classes.save_json(&sidecar_path(path))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn probability_tiff_round_trip() {
        let data: Vec<f32> = (0..3 * 4 * 5).map(|i| i as f32 / 60.0).collect();
        let p = ProbabilityMap::new(3, 4, 5, data, 2.0).unwrap();
        let bytes = encode_probability_tiff(&p).unwrap();
        assert_eq!(decode_probability_tiff(&bytes, 2.0).unwrap(), p);
    }

    #[test]
    fn mask_with_sidecar() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("out.png");
        let m = LabelMask::new(2, 2, vec![0, 1, 1, 0]).unwrap();
        save_mask(&m, &ClassTable::default_for(2), &path).unwrap();
        assert_eq!(LabelMask::load_png(&path).unwrap(), m);
        assert!(dir.path().join("out.classes.json").exists());
    }
}
