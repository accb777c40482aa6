use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{min_max, Matrix, Scalar};

pub const MIN_BITS: u8 = 2;
pub const MAX_BITS: u8 = 16;

/// Storage bits charged per quantization group: two 16-bit grid endpoints.
pub const GROUP_OVERHEAD_BITS: u64 = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum QuantScheme {
    PerTensorMinMax,
    PerGroupMinMax,
}

/// Integer codes plus the min/max grid that maps them back to reals.
///
/// Per-group grids run along input channels within each row: row `r`,
/// column `c` uses grid `r·groups_per_row + c / group_size`. A per-tensor
/// matrix stores a single grid and reports `group_size = rows·cols`.
/// `channel_scales`, when present, divides column `c` after decoding; it
/// carries activation-aware scaling so `dequantize` alone reproduces the
/// effective weights.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedMatrix<T> {
    rows: usize,
    cols: usize,
    bits: u8,
    scheme: QuantScheme,
    group_size: usize,
    codes: Vec<u16>,
    grid_lo: Vec<T>,
    grid_hi: Vec<T>,
    channel_scales: Option<Vec<T>>,
}

pub(crate) fn check_bits(bits: u8) -> Result<()> {
    if !(MIN_BITS..=MAX_BITS).contains(&bits) {
        return Err(Error::InvalidArgument(format!(
            "bit width {bits} outside [{MIN_BITS}, {MAX_BITS}]"
        )));
    }
    Ok(())
}

pub(crate) fn check_finite<T: Scalar>(w: &Matrix<T>) -> Result<()> {
    if let Some(i) = w.data().iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite { row: i / w.cols(), col: i % w.cols() });
    }
    Ok(())
}

#[inline]
pub(crate) fn levels(bits: u8) -> f64 {
    ((1u32 << bits) - 1) as f64
}

/// Nearest code on the `[lo, hi]` grid, ties to even.
#[inline]
pub(crate) fn encode(w: f64, lo: f64, hi: f64, levels: f64) -> u16 {
    if hi <= lo {
        return 0;
    }
    // Span of the halved operands.
    let s = (0.5 * w - 0.5 * lo) / (0.5 * hi - 0.5 * lo);
    let x = (s * levels).round_ties_even();
    if x.is_nan() || x <= 0.0 {
        0
    } else if x >= levels {
        levels as u16
    } else {
        x as u16
    }
}

/// Grid value of `code`; exact at both endpoints.
#[inline]
pub(crate) fn decode(code: u16, lo: f64, hi: f64, levels: f64) -> f64 {
    let t = code as f64 / levels;
    lo * (1.0 - t) + hi * t
}

impl<T: Scalar> QuantizedMatrix<T> {
    #[allow(clippy::too_many_arguments)]
    pub(crate) fn from_parts(
        rows: usize,
        cols: usize,
        bits: u8,
        scheme: QuantScheme,
        group_size: usize,
        codes: Vec<u16>,
        grid_lo: Vec<T>,
        grid_hi: Vec<T>,
    ) -> Self {
        debug_assert_eq!(codes.len(), rows * cols);
        debug_assert_eq!(grid_lo.len(), grid_hi.len());
        Self { rows, cols, bits, scheme, group_size, codes, grid_lo, grid_hi, channel_scales: None }
    }

    pub(crate) fn with_channel_scales(mut self, scales: Vec<T>) -> Self {
        debug_assert_eq!(scales.len(), self.cols);
        self.channel_scales = Some(scales);
        self
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn bits(&self) -> u8 {
        self.bits
    }

    pub fn scheme(&self) -> QuantScheme {
        self.scheme
    }

    pub fn group_size(&self) -> usize {
        self.group_size
    }

    pub fn codes(&self) -> &[u16] {
        &self.codes
    }

    pub fn grid_lo(&self) -> &[T] {
        &self.grid_lo
    }

    pub fn grid_hi(&self) -> &[T] {
        &self.grid_hi
    }

    pub fn channel_scales(&self) -> Option<&[T]> {
        self.channel_scales.as_deref()
    }

    pub fn max_code(&self) -> u16 {
        levels(self.bits) as u16
    }

    pub fn groups_per_row(&self) -> usize {
        match self.scheme {
            QuantScheme::PerTensorMinMax => 1,
            QuantScheme::PerGroupMinMax => self.cols.div_ceil(self.group_size),
        }
    }

    /// Number of `(lo, hi)` pairs.
    pub fn group_count(&self) -> usize {
        self.grid_lo.len()
    }

    #[inline]
    fn grid_index(&self, r: usize, c: usize) -> usize {
        match self.scheme {
            QuantScheme::PerTensorMinMax => 0,
            QuantScheme::PerGroupMinMax => r * self.groups_per_row() + c / self.group_size,
        }
    }

    /// Code bits plus grid overhead.
    pub fn storage_bits(&self) -> u64 {
        self.bits as u64 * self.codes.len() as u64 + GROUP_OVERHEAD_BITS * self.group_count() as u64
    }

    pub fn dequantize(&self) -> Matrix<T> {
        let lv = levels(self.bits);
        let mut out = Vec::with_capacity(self.codes.len());
        for r in 0..self.rows {
            for c in 0..self.cols {
                let g = self.grid_index(r, c);
                let mut v = decode(
                    self.codes[r * self.cols + c],
                    self.grid_lo[g].widen(),
                    self.grid_hi[g].widen(),
                    lv,
                );
                if let Some(s) = &self.channel_scales {
                    v /= s[c].widen();
                }
                out.push(T::from_wide(v));
            }
        }
        Matrix::from_parts(self.rows, self.cols, out)
    }
}

/// Per-tensor min/max quantization with round-half-to-even.
pub fn uniform_quantize<T: Scalar>(w: &Matrix<T>, bits: u8) -> Result<QuantizedMatrix<T>> {
    check_bits(bits)?;
    check_finite(w)?;
    let (lo, hi) = w.min_max();
    let (lo64, hi64, lv) = (lo.widen(), hi.widen(), levels(bits));
    let codes = w.data().iter().map(|v| encode(v.widen(), lo64, hi64, lv)).collect();
    Ok(QuantizedMatrix::from_parts(
        w.rows(),
        w.cols(),
        bits,
        QuantScheme::PerTensorMinMax,
        w.len(),
        codes,
        vec![lo],
        vec![hi],
    ))
}

pub fn dequantize<T: Scalar>(q: &QuantizedMatrix<T>) -> Matrix<T> {
    q.dequantize()
}

/// Round-to-nearest with min/max grids over `group_size` input channels.
///
/// `group_size ≥ rows·cols` reduces to [`uniform_quantize`].
pub fn rtn_group_quantize<T: Scalar>(
    w: &Matrix<T>,
    bits: u8,
    group_size: usize,
) -> Result<QuantizedMatrix<T>> {
    if group_size == 0 {
        return Err(Error::InvalidArgument("group_size must be positive".into()));
    }
    if group_size >= w.len() {
        return uniform_quantize(w, bits);
    }
    check_bits(bits)?;
    check_finite(w)?;
    let lv = levels(bits);
    let (rows, cols) = (w.rows(), w.cols());
    let per_row = cols.div_ceil(group_size);
    let mut codes = Vec::with_capacity(w.len());
    let mut grid_lo = Vec::with_capacity(rows * per_row);
    let mut grid_hi = Vec::with_capacity(rows * per_row);
    for r in 0..rows {
        for chunk in w.row(r).chunks(group_size) {
            let (lo, hi) = min_max(chunk);
            let (lo64, hi64) = (lo.widen(), hi.widen());
            codes.extend(chunk.iter().map(|v| encode(v.widen(), lo64, hi64, lv)));
            grid_lo.push(lo);
            grid_hi.push(hi);
        }
    }
    Ok(QuantizedMatrix::from_parts(
        rows,
        cols,
        bits,
        QuantScheme::PerGroupMinMax,
        group_size,
        codes,
        grid_lo,
        grid_hi,
    ))
}
