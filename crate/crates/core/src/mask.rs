//! Integer label rasters, class tables, and their PNG/JSON encodings.

use std::collections::BTreeSet;
use std::io::Cursor;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Label value meaning "no label here".
pub const IGNORE: u8 = 255;

/// A per-pixel class raster. Scribbles, ground truth and predictions all use
/// this type; unlabeled pixels hold [`IGNORE`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMask {
    width: usize,
    height: usize,
    data: Vec<u8>,
}

impl LabelMask {
    pub fn new(width: usize, height: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::Contract(format!(
                "label buffer holds {} values, {width}x{height} needs {}",
                data.len(),
                width * height
            )));
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn filled(width: usize, height: usize, value: u8) -> Self {
        Self {
            width,
            height,
            data: vec![value; width * height],
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [u8] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> u8 {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: u8) {
        self.data[y * self.width + x] = v;
    }

    pub fn same_shape(&self, other: &LabelMask) -> bool {
        self.width == other.width && self.height == other.height
    }

    pub fn crop(&self, x0: usize, y0: usize, w: usize, h: usize) -> Result<Self> {
        if x0 + w > self.width || y0 + h > self.height {
            return Err(Error::Contract(format!(
                "crop {w}x{h}+{x0}+{y0} outside {}x{} mask",
                self.width, self.height
            )));
        }
        let mut data = Vec::with_capacity(w * h);
        for y in y0..y0 + h {
            data.extend_from_slice(&self.data[y * self.width + x0..y * self.width + x0 + w]);
        }
        Self::new(w, h, data)
    }

    /// Sorted set of labels present, excluding [`IGNORE`].
    pub fn classes_present(&self) -> BTreeSet<u8> {
        self.data.iter().copied().filter(|&v| v != IGNORE).collect()
    }

    pub fn labeled_count(&self) -> usize {
        self.data.iter().filter(|&&v| v != IGNORE).count()
    }

    /// Reads an 8-bit grayscale or indexed PNG; indexed images yield their
    /// palette indices.
    pub fn load_png(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::file(path, e))?;
        Self::decode_png(&bytes)
    }

    pub fn decode_png(bytes: &[u8]) -> Result<Self> {
        let mut decoder = png::Decoder::new(Cursor::new(bytes));
        decoder.set_transformations(png::Transformations::IDENTITY);
        let mut reader = decoder.read_info()?;
        let info = reader.info();
        let (w, h) = (info.width as usize, info.height as usize);
        if info.bit_depth != png::BitDepth::Eight {
            return Err(Error::Input(format!(
                "label PNG must be 8-bit, found {:?}",
                info.bit_depth
            )));
        }
        match info.color_type {
            png::ColorType::Grayscale | png::ColorType::Indexed => {}
            other => {
                return Err(Error::Input(format!(
                    "label PNG must be grayscale or indexed, found {other:?}"
                )))
            }
        }
        let mut buf = vec![0u8; reader.output_buffer_size().unwrap_or(w * h)];
        let frame = reader.next_frame(&mut buf)?;
        buf.truncate(frame.buffer_size());
        if frame.line_size != w {
            return Err(Error::Input("unexpected PNG row layout".into()));
        }
        Self::new(w, h, buf)
    }

    /// Encodes as an indexed PNG whose palette carries the class colors;
    /// [`IGNORE`] and unknown indices render black.
    pub fn encode_indexed_png(&self, classes: &ClassTable) -> Result<Vec<u8>> {
        let mut palette = vec![0u8; 256 * 3];
        for c in &classes.classes {
            let i = c.id as usize * 3;
            palette[i..i + 3].copy_from_slice(&c.color.0);
        }
        let mut out = Vec::new();
        {
            let mut enc = png::Encoder::new(&mut out, self.width as u32, self.height as u32);
            enc.set_color(png::ColorType::Indexed);
            enc.set_depth(png::BitDepth::Eight);
            enc.set_palette(palette);
            let mut writer = enc.write_header()?;
            writer.write_image_data(&self.data)?;
        }
        Ok(out)
    }

    /// Encodes as 8-bit grayscale PNG holding the raw label values.
    pub fn encode_gray_png(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        {
            let mut enc = png::Encoder::new(&mut out, self.width as u32, self.height as u32);
            enc.set_color(png::ColorType::Grayscale);
            enc.set_depth(png::BitDepth::Eight);
            let mut writer = enc.write_header()?;
            writer.write_image_data(&self.data)?;
        }
        Ok(out)
    }

    pub fn save_indexed_png(&self, path: &Path, classes: &ClassTable) -> Result<()> {
        let bytes = self.encode_indexed_png(classes)?;
        std::fs::write(path, bytes).map_err(|e| Error::file(path, e))
    }

    pub fn save_gray_png(&self, path: &Path) -> Result<()> {
        let bytes = self.encode_gray_png()?;
        std::fs::write(path, bytes).map_err(|e| Error::file(path, e))
    }

    /// Run-length encoding as `(value, count)` pairs in row-major order.
    pub fn to_runs(&self) -> RunLengthMask {
        let mut runs: Vec<(u8, u32)> = Vec::new();
        for &v in &self.data {
            match runs.last_mut() {
                Some((last, n)) if *last == v => *n += 1,
                _ => runs.push((v, 1)),
            }
        }
        RunLengthMask {
            width: self.width,
            height: self.height,
            runs,
        }
    }
}

/// JSON transport form of a [`LabelMask`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunLengthMask {
    pub width: usize,
    pub height: usize,
    pub runs: Vec<(u8, u32)>,
}

impl RunLengthMask {
    pub fn to_mask(&self) -> Result<LabelMask> {
        let total: u64 = self.runs.iter().map(|&(_, n)| n as u64).sum();
        if total != (self.width * self.height) as u64 {
            return Err(Error::Input(format!(
                "runs cover {total} pixels, mask is {}x{}",
                self.width, self.height
            )));
        }
        let mut data = Vec::with_capacity(self.width * self.height);
        for &(v, n) in &self.runs {
            data.extend(std::iter::repeat_n(v, n as usize));
        }
        LabelMask::new(self.width, self.height, data)
    }
}

/// RGB display color, serialized as `#rrggbb`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Color(pub [u8; 3]);

impl Serialize for Color {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&format!("#{}", hex::encode(self.0)))
    }
}

impl<'de> Deserialize<'de> for Color {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        let digits = s.strip_prefix('#').unwrap_or(&s);
        let mut rgb = [0u8; 3];
        hex::decode_to_slice(digits, &mut rgb)
            .map_err(|e| serde::de::Error::custom(format!("bad color {s:?}: {e}")))?;
        Ok(Color(rgb))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassInfo {
    pub id: u8,
    pub name: String,
    pub color: Color,
}

/// Ordered class definitions. Ids are dense (`0..K`) and colors unique.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ClassTable {
    pub classes: Vec<ClassInfo>,
}

const DEFAULT_COLORS: [[u8; 3]; 10] = [
    [230, 25, 75],
    [60, 180, 75],
    [0, 130, 200],
    [255, 225, 25],
    [145, 30, 180],
    [70, 240, 240],
    [245, 130, 48],
    [240, 50, 230],
    [210, 245, 60],
    [128, 128, 128],
];

impl ClassTable {
    pub fn new(classes: Vec<ClassInfo>) -> Result<Self> {
        let table = Self { classes };
        table.validate()?;
        Ok(table)
    }

    /// `k` classes named `class_<i>` with a fixed color cycle.
    pub fn default_for(k: usize) -> Self {
        let classes = (0..k)
            .map(|i| {
                let base = DEFAULT_COLORS[i % DEFAULT_COLORS.len()];
                // keep colors unique past the first cycle
                let shift = (i / DEFAULT_COLORS.len()) as u8;
                ClassInfo {
                    id: i as u8,
                    name: format!("class_{i}"),
                    color: Color([base[0].wrapping_add(shift), base[1], base[2]]),
                }
            })
            .collect();
        Self { classes }
    }

    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes.len() < 2 {
            return Err(Error::Config(format!(
                "need at least 2 classes, got {}",
                self.classes.len()
            )));
        }
        if self.classes.len() >= IGNORE as usize {
            return Err(Error::Config("too many classes".into()));
        }
        for (i, c) in self.classes.iter().enumerate() {
            if c.id as usize != i {
                return Err(Error::Config(format!(
                    "class ids must be 0..K in order; position {i} has id {}",
                    c.id
                )));
            }
        }
        let mut colors = BTreeSet::new();
        for c in &self.classes {
            if !colors.insert(c.color.0) {
                return Err(Error::Config(format!(
                    "duplicate class color #{}",
                    hex::encode(c.color.0)
                )));
            }
        }
        Ok(())
    }

    pub fn save_json(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).expect("class table serializes");
        std::fs::write(path, text).map_err(|e| Error::file(path, e))
    }

    pub fn load_json(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::file(path, e))?;
        let table: Self = serde_json::from_str(&text)
            .map_err(|e| Error::Input(format!("{}: {e}", path.display())))?;
        table.validate()?;
        Ok(table)
    }
}
