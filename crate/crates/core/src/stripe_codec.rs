//! Gray-code plus line-shift stripe patterns and their per-pixel decoder.
//!
//! A stack holds `gray_bits` Gray-code planes (MSB first), their
//! complements, and `shifts` line-shift planes. The Gray word selects a band
//! of `band_width` projector columns; the line shifts split each band into
//! `shifts` cells. With the defaults (7 bits, 4 shifts, 512 columns) this is
//! 18 patterns and 512 resolvable cells.

use std::fmt;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::raster::GrayImage;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CodecError {
    #[error("invalid codec configuration: {0}")]
    ConfigInvalid(String),
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "CodecConfigRepr", into = "CodecConfigRepr")]
pub struct CodecConfig {
    gray_bits: u32,
    shifts: u32,
    projector_columns: u32,
    band_width: u32,
    contrast_threshold: f64,
}

#[derive(Serialize, Deserialize)]
struct CodecConfigRepr {
    gray_bits: u32,
    shifts: u32,
    projector_columns: u32,
    contrast_threshold: f64,
}

impl TryFrom<CodecConfigRepr> for CodecConfig {
    type Error = CodecError;
    fn try_from(r: CodecConfigRepr) -> Result<Self, CodecError> {
        CodecConfig::new(r.gray_bits, r.shifts, r.projector_columns, r.contrast_threshold)
    }
}

impl From<CodecConfig> for CodecConfigRepr {
    fn from(c: CodecConfig) -> Self {
        Self {
            gray_bits: c.gray_bits,
            shifts: c.shifts,
            projector_columns: c.projector_columns,
            contrast_threshold: c.contrast_threshold,
        }
    }
}

impl Default for CodecConfig {
    fn default() -> Self {
        Self::new(7, 4, 512, 0.1).expect("default codec config is valid")
    }
}

impl CodecConfig {
    pub fn new(
        gray_bits: u32,
        shifts: u32,
        projector_columns: u32,
        contrast_threshold: f64,
    ) -> Result<Self, CodecError> {
        let invalid = |m: String| Err(CodecError::ConfigInvalid(m));
        if gray_bits == 0 || gray_bits > 16 {
            return invalid(format!("gray_bits must be in 1..=16, got {gray_bits}"));
        }
        if shifts == 0 {
            return invalid("shifts must be positive".into());
        }
        if !(contrast_threshold > 0.0 && contrast_threshold <= 1.0) {
            return invalid(format!("contrast_threshold {contrast_threshold} outside (0, 1]"));
        }
        let bands = 1u32 << gray_bits;
        if projector_columns == 0 || projector_columns % bands != 0 {
            return invalid(format!(
                "projector_columns {projector_columns} is not a positive multiple of 2^{gray_bits}"
            ));
        }
        let band_width = projector_columns / bands;
        if band_width % shifts != 0 {
            return invalid(format!("shifts {shifts} does not divide band width {band_width}"));
        }
        Ok(Self { gray_bits, shifts, projector_columns, band_width, contrast_threshold })
    }

    pub fn gray_bits(&self) -> u32 {
        self.gray_bits
    }
    pub fn shifts(&self) -> u32 {
        self.shifts
    }
    pub fn projector_columns(&self) -> u32 {
        self.projector_columns
    }
    pub fn band_width(&self) -> u32 {
        self.band_width
    }
    pub fn contrast_threshold(&self) -> f64 {
        self.contrast_threshold
    }

    pub fn with_contrast_threshold(mut self, threshold: f64) -> Result<Self, CodecError> {
        self = Self::new(self.gray_bits, self.shifts, self.projector_columns, threshold)?;
        Ok(self)
    }

    /// Width of one line-shift cell in projector columns.
    pub fn cell_width(&self) -> u32 {
        self.band_width / self.shifts
    }

    pub fn pattern_count(&self) -> usize {
        (2 * self.gray_bits + self.shifts) as usize
    }

    pub fn bands(&self) -> u32 {
        1 << self.gray_bits
    }

    /// Slot order of the pattern stack.
    pub fn layout(&self) -> Vec<PatternSlot> {
        let g = self.gray_bits;
        (0..g)
            .map(PatternSlot::Gray)
            .chain((0..g).map(PatternSlot::InverseGray))
            .chain((0..self.shifts).map(PatternSlot::Shift))
            .collect()
    }

    /// Binary value of `slot` at integer projector column `column`.
    pub fn pattern_value(&self, slot: PatternSlot, column: u32) -> bool {
        match slot {
            PatternSlot::Gray(k) => self.gray_bit(column, k),
            PatternSlot::InverseGray(k) => !self.gray_bit(column, k),
            PatternSlot::Shift(s) => self.shift_bit(column, s),
        }
    }

    fn gray_bit(&self, column: u32, k: u32) -> bool {
        let code = gray_encode(column / self.band_width);
        (code >> (self.gray_bits - 1 - k)) & 1 == 1
    }

    /// Stripe of width `band_width`, shifted right by `s` cells; lit on even stripes.
    fn shift_bit(&self, column: u32, s: u32) -> bool {
        let shifted = column as i64 - (s * self.cell_width()) as i64;
        shifted.div_euclid(self.band_width as i64).rem_euclid(2) == 0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum PatternSlot {
    Gray(u32),
    InverseGray(u32),
    Shift(u32),
}

impl fmt::Display for PatternSlot {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PatternSlot::Gray(k) => write!(f, "gray{k}"),
            PatternSlot::InverseGray(k) => write!(f, "igray{k}"),
            PatternSlot::Shift(s) => write!(f, "shift{s}"),
        }
    }
}

/// Reflected binary code.
pub fn gray_encode(n: u32) -> u32 {
    n ^ (n >> 1)
}

pub fn gray_decode(g: u32) -> u32 {
    let mut n = g;
    let mut shift = g >> 1;
    while shift != 0 {
        n ^= shift;
        shift >>= 1;
    }
    n
}

/// One-dimensional binary profiles, one per slot, in decode order.
#[derive(Debug, Clone, PartialEq)]
pub struct PatternStack {
    config: CodecConfig,
    slots: Vec<PatternSlot>,
    profiles: Vec<Vec<u8>>,
}

impl PatternStack {
    pub fn config(&self) -> &CodecConfig {
        &self.config
    }

    pub fn slots(&self) -> &[PatternSlot] {
        &self.slots
    }

    pub fn profiles(&self) -> &[Vec<u8>] {
        &self.profiles
    }

    pub fn len(&self) -> usize {
        self.profiles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.profiles.is_empty()
    }

    /// Conventional file name of slot `index`.
    pub fn file_name(&self, index: usize) -> String {
        format!("pattern_{index:02}_{}.pgm", self.slots[index])
    }

    /// Profile `index` replicated down `height` rows, as 8-bit pixels.
    pub fn image_u8(&self, index: usize, height: u32) -> Vec<u8> {
        let row: Vec<u8> = self.profiles[index].iter().map(|&b| b * 255).collect();
        row.repeat(height as usize)
    }
}

pub fn generate_patterns(cfg: &CodecConfig) -> PatternStack {
    let slots = cfg.layout();
    let profiles = slots
        .iter()
        .map(|&slot| (0..cfg.projector_columns).map(|c| cfg.pattern_value(slot, c) as u8).collect())
        .collect();
    PatternStack { config: *cfg, slots, profiles }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Bit {
    Zero,
    One,
    Unknown,
}

/// Classifies a bit from a pattern/complement intensity pair.
pub fn binarize_bit(direct: f64, inverse: f64, cfg: &CodecConfig) -> Bit {
    let diff = direct - inverse;
    if diff > cfg.contrast_threshold {
        Bit::One
    } else if -diff > cfg.contrast_threshold {
        Bit::Zero
    } else {
        Bit::Unknown
    }
}

/// Decodes one pixel's intensity sequence to a projector column estimate.
///
/// Returns the center of the decoded line-shift cell, or `None` when any Gray
/// bit lacks contrast, any shift sample sits within half the contrast
/// threshold of the pixel's mid level, or the shift phase vote is tied.
pub fn decode_pixel(samples: &[f64], cfg: &CodecConfig) -> Option<f64> {
    if samples.len() != cfg.pattern_count() {
        return None;
    }
    let g = cfg.gray_bits as usize;
    let mut code = 0u32;
    for k in 0..g {
        let bit = match binarize_bit(samples[k], samples[g + k], cfg) {
            Bit::One => 1,
            Bit::Zero => 0,
            Bit::Unknown => return None,
        };
        code = (code << 1) | bit;
    }
    let band = gray_decode(code);

    let mid = (0..g).map(|k| samples[k] + samples[g + k]).sum::<f64>() / (2 * g) as f64;
    let half = cfg.contrast_threshold / 2.0;
    let mut observed = Vec::with_capacity(cfg.shifts as usize);
    for &sample in &samples[2 * g..] {
        if sample - mid > half {
            observed.push(true);
        } else if mid - sample > half {
            observed.push(false);
        } else {
            return None;
        }
    }

    // majority vote: the cell whose expected shift bits agree best
    let cell = cfg.cell_width();
    let band_start = band * cfg.band_width;
    let mut best = (0usize, 0u32);
    let mut tied = false;
    for q in 0..cfg.shifts {
        let column = band_start + q * cell;
        let agree = observed
            .iter()
            .enumerate()
            .filter(|&(s, &bit)| cfg.shift_bit(column, s as u32) == bit)
            .count();
        if q == 0 || agree > best.0 {
            best = (agree, q);
            tied = false;
        } else if agree == best.0 {
            tied = true;
        }
    }
    if tied {
        return None;
    }
    Some(band_start as f64 + (best.1 * cell) as f64 + cell as f64 / 2.0)
}

/// Per-camera-pixel projector column; invalid pixels hold `NaN`.
#[derive(Debug, Clone, PartialEq)]
pub struct CorrespondenceMap {
    pub width: u32,
    pub height: u32,
    pub projector_columns: u32,
    pub column: Vec<f64>,
    pub valid: Vec<bool>,
}

impl CorrespondenceMap {
    pub fn invalid(width: u32, height: u32, projector_columns: u32) -> Self {
        let n = width as usize * height as usize;
        Self { width, height, projector_columns, column: vec![f64::NAN; n], valid: vec![false; n] }
    }

    pub fn from_columns(width: u32, height: u32, projector_columns: u32, columns: Vec<Option<f64>>) -> Self {
        assert_eq!(columns.len(), width as usize * height as usize);
        let valid = columns.iter().map(Option::is_some).collect();
        let column = columns.into_iter().map(|c| c.unwrap_or(f64::NAN)).collect();
        Self { width, height, projector_columns, column, valid }
    }

    pub fn get(&self, index: usize) -> Option<f64> {
        self.valid[index].then(|| self.column[index])
    }

    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|&&v| v).count()
    }

    /// Debug raster: column mapped onto `1..=65535`, invalid pixels are 0.
    pub fn debug_pgm16(&self) -> Vec<u16> {
        let scale = 65534.0 / self.projector_columns as f64;
        self.column
            .iter()
            .zip(&self.valid)
            .map(|(&c, &ok)| if ok { (1.0 + c * scale).round().min(65535.0) as u16 } else { 0 })
            .collect()
    }
}

#[derive(Serialize, Deserialize)]
struct CorrespondenceMapRepr {
    width: u32,
    height: u32,
    projector_columns: u32,
    column: Vec<Option<f64>>,
}

impl Serialize for CorrespondenceMap {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        let column = (0..self.column.len()).map(|i| self.get(i)).collect();
        CorrespondenceMapRepr {
            width: self.width,
            height: self.height,
            projector_columns: self.projector_columns,
            column,
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for CorrespondenceMap {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        use serde::de::Error;
        let r = CorrespondenceMapRepr::deserialize(d)?;
        if r.column.len() != r.width as usize * r.height as usize {
            return Err(D::Error::custom("column array length does not match width*height"));
        }
        if r.column.iter().flatten().any(|&c| !(c >= 0.0 && c < r.projector_columns as f64)) {
            return Err(D::Error::custom("column value outside projector range"));
        }
        Ok(CorrespondenceMap::from_columns(r.width, r.height, r.projector_columns, r.column))
    }
}

/// Decodes a captured stack, one image per pattern slot in layout order.
pub fn decode_stack(images: &[GrayImage], cfg: &CodecConfig) -> Result<CorrespondenceMap, CodecError> {
    if images.len() != cfg.pattern_count() {
        return Err(CodecError::DimensionMismatch(format!(
            "expected {} images, got {}",
            cfg.pattern_count(),
            images.len()
        )));
    }
    let (w, h) = (images[0].width, images[0].height);
    if let Some(bad) = images.iter().find(|im| im.width != w || im.height != h || im.data.len() != w as usize * h as usize) {
        return Err(CodecError::DimensionMismatch(format!(
            "image {}x{} does not match {w}x{h}",
            bad.width, bad.height
        )));
    }
    let columns: Vec<Option<f64>> = (0..w as usize * h as usize)
        .into_par_iter()
        .map_init(
            || vec![0.0; images.len()],
            |samples, i| {
                for (s, im) in samples.iter_mut().zip(images) {
                    *s = im.data[i] as f64;
                }
                decode_pixel(samples, cfg)
            },
        )
        .collect();
    Ok(CorrespondenceMap::from_columns(w, h, cfg.projector_columns, columns))
}
