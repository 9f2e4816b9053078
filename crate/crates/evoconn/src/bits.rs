//! Bit-packed boolean matrices and vectors, and the popcount matvec kernel.
//!
//! Layout is row-major with every row padded to whole bytes; bit `j` of row
//! `i` lives in byte `j / 8` of that row, least-significant bit first. The
//! mask file format stores rows verbatim in this layout, and padding bits
//! past `cols` are guaranteed zero at all times so popcounts over whole
//! rows never see garbage.

use crate::error::{Error, Result};

#[inline]
fn row_stride(cols: usize) -> usize {
    cols.div_ceil(8)
}

/// AND two equal-length byte slices and count the set bits of the result.
/// Works in u64 chunks with a byte tail.
#[inline]
fn and_popcount(a: &[u8], b: &[u8]) -> u32 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = 0u32;
    let mut ca = a.chunks_exact(8);
    let mut cb = b.chunks_exact(8);
    for (x, y) in (&mut ca).zip(&mut cb) {
        let xw = u64::from_le_bytes(x.try_into().unwrap());
        let yw = u64::from_le_bytes(y.try_into().unwrap());
        acc += (xw & yw).count_ones();
    }
    for (x, y) in ca.remainder().iter().zip(cb.remainder()) {
        acc += (x & y).count_ones();
    }
    acc
}

#[inline]
fn xor_popcount(a: &[u8], b: &[u8]) -> u32 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = 0u32;
    let mut ca = a.chunks_exact(8);
    let mut cb = b.chunks_exact(8);
    for (x, y) in (&mut ca).zip(&mut cb) {
        let xw = u64::from_le_bytes(x.try_into().unwrap());
        let yw = u64::from_le_bytes(y.try_into().unwrap());
        acc += (xw ^ yw).count_ones();
    }
    for (x, y) in ca.remainder().iter().zip(cb.remainder()) {
        acc += (x ^ y).count_ones();
    }
    acc
}

/// Packed boolean connection matrix. `get(i, j)` is the connection from
/// column entity `j` into row entity `i`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BitMatrix {
    rows: usize,
    cols: usize,
    bits: Vec<u8>,
}

impl BitMatrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        BitMatrix {
            rows,
            cols,
            bits: vec![0u8; rows * row_stride(cols)],
        }
    }

    /// Rebuild from packed bytes in the canonical layout. Rejects byte
    /// counts that do not match and nonzero padding bits.
    pub fn from_bytes(rows: usize, cols: usize, bytes: Vec<u8>) -> Result<Self> {
        let stride = row_stride(cols);
        if bytes.len() != rows * stride {
            return Err(Error::Format(format!(
                "bit matrix payload is {} bytes, expected {} for {}x{}",
                bytes.len(),
                rows * stride,
                rows,
                cols
            )));
        }
        let m = BitMatrix { rows, cols, bits: bytes };
        if cols % 8 != 0 {
            let mask = !0u8 << (cols % 8);
            for r in 0..rows {
                if m.row_bytes(r)[stride - 1] & mask != 0 {
                    return Err(Error::Format(format!(
                        "nonzero padding bits in row {r} of a {rows}x{cols} bit matrix"
                    )));
                }
            }
        }
        Ok(m)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn row_stride(&self) -> usize {
        row_stride(self.cols)
    }

    pub fn as_bytes(&self) -> &[u8] {
        &self.bits
    }

    #[inline]
    pub fn row_bytes(&self, row: usize) -> &[u8] {
        let stride = self.row_stride();
        &self.bits[row * stride..(row + 1) * stride]
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> bool {
        assert!(row < self.rows && col < self.cols);
        let stride = self.row_stride();
        self.bits[row * stride + col / 8] & (1u8 << (col % 8)) != 0
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, value: bool) {
        assert!(row < self.rows && col < self.cols);
        let stride = self.row_stride();
        let byte = &mut self.bits[row * stride + col / 8];
        let mask = 1u8 << (col % 8);
        if value {
            *byte |= mask;
        } else {
            *byte &= !mask;
        }
    }

    pub fn count_ones(&self) -> usize {
        self.bits.iter().map(|b| b.count_ones() as usize).sum()
    }

    /// Number of positions where the two matrices hold the same bit.
    /// Padding cancels in the xor, so this is exact.
    pub fn count_matching(&self, other: &BitMatrix) -> Result<usize> {
        if self.rows != other.rows || self.cols != other.cols {
            return Err(Error::DimensionMismatch(format!(
                "cannot compare {}x{} with {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let differing = xor_popcount(&self.bits, &other.bits) as usize;
        Ok(self.rows * self.cols - differing)
    }

    /// Complement of every in-range bit; padding stays zero.
    pub fn complement(&self) -> BitMatrix {
        let mut out = BitMatrix::zeros(self.rows, self.cols);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.set(r, c, !self.get(r, c));
            }
        }
        out
    }
}

/// Packed bit vector; shares the byte layout of a single matrix row.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BitVector {
    len: usize,
    bits: Vec<u8>,
}

impl BitVector {
    pub fn zeros(len: usize) -> Self {
        BitVector {
            len,
            bits: vec![0u8; row_stride(len)],
        }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn as_bytes(&self) -> &[u8] {
        &self.bits
    }

    #[inline]
    pub fn get(&self, i: usize) -> bool {
        assert!(i < self.len);
        self.bits[i / 8] & (1u8 << (i % 8)) != 0
    }

    #[inline]
    pub fn set(&mut self, i: usize, value: bool) {
        assert!(i < self.len);
        let mask = 1u8 << (i % 8);
        if value {
            self.bits[i / 8] |= mask;
        } else {
            self.bits[i / 8] &= !mask;
        }
    }

    pub fn fill(&mut self, value: bool) {
        if value {
            self.bits.fill(0xFF);
            self.clear_padding();
        } else {
            self.bits.fill(0);
        }
    }

    fn clear_padding(&mut self) {
        if self.len % 8 != 0 {
            if let Some(last) = self.bits.last_mut() {
                *last &= !(!0u8 << (self.len % 8));
            }
        }
    }

    pub fn count_ones(&self) -> usize {
        self.bits.iter().map(|b| b.count_ones() as usize).sum()
    }

    /// `out = self & mask`, elementwise over the packed bytes.
    pub fn and_into(&self, mask: &BitVector, out: &mut BitVector) {
        assert_eq!(self.len, mask.len);
        assert_eq!(self.len, out.len);
        for ((o, a), b) in out.bits.iter_mut().zip(&self.bits).zip(&mask.bits) {
            *o = a & b;
        }
    }

    /// Indices of set bits, ascending.
    pub fn iter_set(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.len).filter(move |&i| self.get(i))
    }
}

/// Popcount of `row & spikes` for one packed row. The building block of
/// [`packed_matvec_into`], exposed so the dynamics can combine per-group
/// counts without an intermediate vector.
#[inline]
pub fn packed_row_popcount(row: &[u8], spikes: &[u8]) -> u32 {
    and_popcount(row, spikes)
}

/// Integer matrix-vector product over packed bits:
/// `out[i] = sum_j m[i,j] & spikes[j]`, via bitwise AND plus popcount.
/// Accumulators are 32-bit, comfortably wide for any supported column count.
pub fn packed_matvec_into(m: &BitMatrix, spikes: &BitVector, out: &mut [u32]) -> Result<()> {
    if spikes.len() != m.cols() {
        return Err(Error::DimensionMismatch(format!(
            "spike vector of length {} against a {}x{} matrix",
            spikes.len(),
            m.rows(),
            m.cols()
        )));
    }
    if out.len() != m.rows() {
        return Err(Error::DimensionMismatch(format!(
            "output of length {} for a matrix with {} rows",
            out.len(),
            m.rows()
        )));
    }
    let sb = spikes.as_bytes();
    for (i, o) in out.iter_mut().enumerate() {
        *o = and_popcount(m.row_bytes(i), sb);
    }
    Ok(())
}

pub fn packed_matvec(m: &BitMatrix, spikes: &BitVector) -> Result<Vec<u32>> {
    let mut out = vec![0u32; m.rows()];
    packed_matvec_into(m, spikes, &mut out)?;
    Ok(out)
}
