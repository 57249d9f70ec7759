//! Model and corpus files.
//!
//! # Model file (`.nqhm`)
//!
//! All integers little-endian.
//!
//! ```text
//! offset  size  field
//! 0       4     magic "NQHM"
//! 4       2     format version (1)
//! 6       1     precision: 0 = dense f64, 1 = quantized
//! 7       1     bit width b (0 for dense)
//! 8       1     scheme: 0 dense, 1 linear-fixed, 2 norm-q, 3 kmeans, 4 kmeans-norm
//! 9       3     reserved, zero
//! 12      8     hidden_size (u64)
//! 20      8     vocab_size (u64)
//! 28            payload
//! ```
//!
//! Dense payload: initial, transition, emission as row-major `f64`.
//!
//! Quantized payload, once per matrix in the order initial (`1 x N`),
//! transition, emission:
//!
//! ```text
//! (rows + 1) x u64   byte offset of each row record from the first record
//! per row:           u32 count, count x u32 column, ceil(b*count/8) bytes of
//!                    levels packed most-significant bit first
//! f64                epsilon
//! kmeans schemes:    u32 codebook length, then that many f64 centroids
//! ```
//!
//! No codebook is written for linear-fixed or norm-q.

use std::fs;
use std::path::Path;

use crate::compression::{QuantizedHmm, QuantizedMatrix, Scheme};
use crate::error::{Error, Result};
use crate::hmm::{HmmModel, TokenSequence};
use crate::matrix::Matrix;
use crate::training::Corpus;

pub const MAGIC: &[u8; 4] = b"NQHM";
pub const VERSION: u16 = 1;
pub const HEADER_LEN: u64 = 28;

const PRECISION_DENSE: u8 = 0;
const PRECISION_QUANT: u8 = 1;

#[derive(Debug, Clone, PartialEq)]
#[allow(clippy::large_enum_variant)]
pub enum ModelFile {
    Dense(HmmModel),
    Quantized(QuantizedHmm),
}

impl ModelFile {
    /// The model as probabilities, dequantizing when needed.
    pub fn to_model(&self) -> Result<HmmModel> {
        match self {
            Self::Dense(m) => Ok(m.clone()),
            Self::Quantized(q) => q.dequantize(),
        }
    }

    pub fn dims(&self) -> (usize, usize) {
        match self {
            Self::Dense(m) => (m.hidden_size(), m.vocab_size()),
            Self::Quantized(q) => (q.transition.rows(), q.emission.cols()),
        }
    }
}

fn scheme_tag(s: Scheme) -> u8 {
    match s {
        Scheme::LinearFixed => 1,
        Scheme::NormQ => 2,
        Scheme::KMeans => 3,
        Scheme::KMeansNorm => 4,
    }
}

fn scheme_from_tag(t: u8) -> Option<Scheme> {
    Some(match t {
        1 => Scheme::LinearFixed,
        2 => Scheme::NormQ,
        3 => Scheme::KMeans,
        4 => Scheme::KMeansNorm,
        _ => return None,
    })
}

#[inline]
fn packed_len(bits: u8, count: usize) -> usize {
    (bits as usize * count).div_ceil(8)
}

fn row_record_len(bits: u8, count: usize) -> usize {
    4 + 4 * count + packed_len(bits, count)
}

/// Bytes taken by one quantized matrix section.
pub fn quantized_matrix_size(q: &QuantizedMatrix) -> u64 {
    let offsets = 8 * (q.rows() as u64 + 1);
    let rows: u64 = (0..q.rows())
        .map(|r| row_record_len(q.bits(), q.row_entries(r).0.len()) as u64)
        .sum();
    let codebook = q.codebook().map_or(0, |cb| 4 + 8 * cb.len() as u64);
    offsets + rows + 8 + codebook
}

/// Exact size of the encoded quantized model file.
pub fn quantized_file_size(q: &QuantizedHmm) -> u64 {
    HEADER_LEN
        + quantized_matrix_size(&q.initial)
        + quantized_matrix_size(&q.transition)
        + quantized_matrix_size(&q.emission)
}

pub fn dense_file_size(hidden_size: usize, vocab_size: usize) -> u64 {
    let n = hidden_size as u64;
    HEADER_LEN + 8 * (n + n * n + n * vocab_size as u64)
}

fn write_header(out: &mut Vec<u8>, precision: u8, bits: u8, scheme: u8, n: usize, v: usize) {
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&[precision, bits, scheme, 0, 0, 0]);
    out.extend_from_slice(&(n as u64).to_le_bytes());
    out.extend_from_slice(&(v as u64).to_le_bytes());
}

fn put_f64s(out: &mut Vec<u8>, v: &[f64]) {
    for x in v {
        out.extend_from_slice(&x.to_le_bytes());
    }
}

/// Packs `bits`-wide values most-significant bit first, zero padded.
fn pack_levels(out: &mut Vec<u8>, levels: &[u32], bits: u8) {
    let start = out.len();
    out.resize(start + packed_len(bits, levels.len()), 0);
    let buf = &mut out[start..];
    let mut pos = 0usize;
    for &l in levels {
        for b in (0..bits).rev() {
            if (l >> b) & 1 == 1 {
                buf[pos / 8] |= 0x80 >> (pos % 8);
            }
            pos += 1;
        }
    }
}

fn unpack_levels(buf: &[u8], count: usize, bits: u8) -> Vec<u32> {
    let mut out = Vec::with_capacity(count);
    let mut pos = 0usize;
    for _ in 0..count {
        let mut l = 0u32;
        for _ in 0..bits {
            let bit = (buf[pos / 8] >> (7 - pos % 8)) & 1;
            l = (l << 1) | bit as u32;
            pos += 1;
        }
        out.push(l);
    }
    out
}

fn encode_quantized_matrix(out: &mut Vec<u8>, q: &QuantizedMatrix) {
    let bits = q.bits();
    let mut offset = 0u64;
    out.extend_from_slice(&offset.to_le_bytes());
    for r in 0..q.rows() {
        offset += row_record_len(bits, q.row_entries(r).0.len()) as u64;
        out.extend_from_slice(&offset.to_le_bytes());
    }
    for r in 0..q.rows() {
        let (cols, levels) = q.row_entries(r);
        out.extend_from_slice(&(cols.len() as u32).to_le_bytes());
        for c in cols {
            out.extend_from_slice(&c.to_le_bytes());
        }
        pack_levels(out, levels, bits);
    }
    out.extend_from_slice(&q.epsilon().to_le_bytes());
    if let Some(cb) = q.codebook() {
        out.extend_from_slice(&(cb.len() as u32).to_le_bytes());
        put_f64s(out, cb);
    }
}

pub fn encode(file: &ModelFile) -> Vec<u8> {
    let mut out = Vec::new();
    match file {
        ModelFile::Dense(m) => {
            out.reserve(dense_file_size(m.hidden_size(), m.vocab_size()) as usize);
            write_header(
                &mut out,
                PRECISION_DENSE,
                0,
                0,
                m.hidden_size(),
                m.vocab_size(),
            );
            put_f64s(&mut out, m.initial());
            put_f64s(&mut out, m.transition().as_slice());
            put_f64s(&mut out, m.emission().as_slice());
        }
        ModelFile::Quantized(q) => {
            out.reserve(quantized_file_size(q) as usize);
            write_header(
                &mut out,
                PRECISION_QUANT,
                q.bits(),
                scheme_tag(q.scheme()),
                q.transition.rows(),
                q.emission.cols(),
            );
            for m in [&q.initial, &q.transition, &q.emission] {
                encode_quantized_matrix(&mut out, m);
            }
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn err<T>(&self, reason: impl Into<String>) -> Result<T> {
        Err(Error::Format {
            offset: self.pos as u64,
            reason: reason.into(),
        })
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return self.err(format!(
                "truncated: need {n} bytes for {what}, {} remain",
                self.buf.len() - self.pos
            ));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn f64s(&mut self, n: usize, what: &str) -> Result<Vec<f64>> {
        let bytes = n
            .checked_mul(8)
            .map_or_else(|| self.err(format!("{what} too large")), Ok)?;
        let raw = self.take(bytes, what)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }
}

fn decode_quantized_matrix(
    rd: &mut Reader<'_>,
    rows: usize,
    cols: usize,
    bits: u8,
    scheme: Scheme,
    name: &str,
) -> Result<QuantizedMatrix> {
    let section_start = rd.pos;
    // the offset table alone needs 8 bytes per row; check before allocating
    if rd.remaining() / 8 < rows + 1 {
        return rd.err(format!("truncated: {name} row offset table"));
    }
    let mut offsets = Vec::with_capacity(rows + 1);
    for _ in 0..=rows {
        offsets.push(rd.u64(name)?);
    }
    if offsets[0] != 0 {
        return Err(Error::Format {
            offset: section_start as u64,
            reason: format!("{name} row offsets must start at 0"),
        });
    }
    let records_start = rd.pos;
    let mut row_offsets = Vec::with_capacity(rows + 1);
    row_offsets.push(0usize);
    let mut columns = Vec::new();
    let mut levels = Vec::new();
    for r in 0..rows {
        let at = (rd.pos - records_start) as u64;
        if offsets[r] != at {
            return rd.err(format!(
                "{name} row {r} offset {} disagrees with position {at}",
                offsets[r]
            ));
        }
        let count = rd.u32(name)? as usize;
        if count > cols {
            return rd.err(format!(
                "{name} row {r} stores {count} entries but has {cols} columns"
            ));
        }
        let need = row_record_len(bits, count) - 4;
        if rd.remaining() < need {
            return rd.err(format!("truncated: {name} row {r}"));
        }
        for _ in 0..count {
            columns.push(rd.u32(name)?);
        }
        let packed = rd.take(packed_len(bits, count), name)?;
        levels.extend(unpack_levels(packed, count, bits));
        row_offsets.push(columns.len());
    }
    let at = (rd.pos - records_start) as u64;
    if offsets[rows] != at {
        return rd.err(format!(
            "{name} final offset {} disagrees with {at}",
            offsets[rows]
        ));
    }
    let eps = f64::from_le_bytes(rd.take(8, "epsilon")?.try_into().unwrap());
    let codebook = if scheme.uses_codebook() {
        let len = rd.u32("codebook length")? as usize;
        if len as u64 > 1u64 << bits {
            return rd.err(format!(
                "{name} codebook of {len} entries exceeds {bits} bits"
            ));
        }
        Some(rd.f64s(len, "codebook")?)
    } else {
        None
    };
    QuantizedMatrix::from_parts(
        rows,
        cols,
        bits,
        scheme,
        eps,
        row_offsets,
        columns,
        levels,
        codebook,
    )
    .map_err(|e| Error::Format {
        offset: section_start as u64,
        reason: format!("{name}: {e}"),
    })
}

/// Decodes a model file. Nothing is returned unless the whole buffer
/// decodes cleanly.
pub fn decode(buf: &[u8]) -> Result<ModelFile> {
    let mut rd = Reader { buf, pos: 0 };
    let magic = rd.take(4, "magic")?;
    if magic != MAGIC {
        return Err(Error::Format {
            offset: 0,
            reason: format!("bad magic {magic:?}"),
        });
    }
    let version = rd.u16("version")?;
    if version != VERSION {
        return Err(Error::Format {
            offset: 4,
            reason: format!("unsupported version {version}"),
        });
    }
    let precision = rd.u8("precision")?;
    let bits = rd.u8("bit width")?;
    let scheme = rd.u8("scheme")?;
    rd.take(3, "reserved")?;
    let n = rd.u64("hidden size")?;
    let v = rd.u64("vocab size")?;
    if n == 0 || v == 0 {
        return Err(Error::Format {
            offset: 12,
            reason: "hidden and vocab sizes must be positive".into(),
        });
    }
    let out = match precision {
        PRECISION_DENSE => {
            if bits != 0 || scheme != 0 {
                return Err(Error::Format {
                    offset: 7,
                    reason: "dense file with nonzero bit width or scheme".into(),
                });
            }
            let expected = n
                .checked_mul(n)
                .and_then(|nn| n.checked_mul(v).and_then(|nv| nn.checked_add(nv)))
                .and_then(|x| x.checked_add(n))
                .and_then(|x| x.checked_mul(8));
            if expected.is_none_or(|e| e > rd.remaining() as u64) {
                return rd.err(format!(
                    "truncated: dense payload for {n} states and {v} tokens"
                ));
            }
            let (n, v) = (n as usize, v as usize);
            let initial = rd.f64s(n, "initial")?;
            let transition = Matrix::from_vec(n, n, rd.f64s(n * n, "transition")?)?;
            let emission = Matrix::from_vec(n, v, rd.f64s(n * v, "emission")?)?;
            ModelFile::Dense(HmmModel::new(initial, transition, emission)?)
        }
        PRECISION_QUANT => {
            let scheme = scheme_from_tag(scheme).map_or_else(
                || {
                    Err(Error::Format {
                        offset: 8,
                        reason: format!("unknown scheme tag {scheme}"),
                    })
                },
                Ok,
            )?;
            if crate::compression::check_bits(bits).is_err() {
                return Err(Error::Format {
                    offset: 7,
                    reason: format!("bit width {bits} outside [1, 24]"),
                });
            }
            if n > u32::MAX as u64 || v > u32::MAX as u64 + 1 {
                return Err(Error::Format {
                    offset: 12,
                    reason: "dimensions exceed 32-bit column indices".into(),
                });
            }
            let (n, v) = (n as usize, v as usize);
            let initial = decode_quantized_matrix(&mut rd, 1, n, bits, scheme, "initial")?;
            let transition = decode_quantized_matrix(&mut rd, n, n, bits, scheme, "transition")?;
            let emission = decode_quantized_matrix(&mut rd, n, v, bits, scheme, "emission")?;
            ModelFile::Quantized(QuantizedHmm {
                initial,
                transition,
                emission,
            })
        }
        other => {
            return Err(Error::Format {
                offset: 6,
                reason: format!("unknown precision tag {other}"),
            })
        }
    };
    if rd.remaining() != 0 {
        return rd.err(format!("{} trailing bytes", rd.remaining()));
    }
    Ok(out)
}

pub fn save_model(path: impl AsRef<Path>, file: &ModelFile) -> Result<()> {
    fs::write(path, encode(file))?;
    Ok(())
}

pub fn load_model(path: impl AsRef<Path>) -> Result<ModelFile> {
    decode(&fs::read(path)?)
}

// ---------------------------------------------------------------------------
// Corpus files: one sequence per line, space-separated decimal token IDs.
// ---------------------------------------------------------------------------

/// Parses corpus text. Blank lines are skipped. With `vocab_size` unset the
/// vocabulary is one past the largest token.
pub fn parse_corpus(text: &str, vocab_size: Option<usize>) -> Result<Corpus> {
    let mut sequences = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let tokens = line
            .split_whitespace()
            .map(|t| {
                let id: u32 = t.parse().map_err(|_| Error::Parse {
                    line: line_no,
                    reason: format!("token {t:?} is not a non-negative integer"),
                })?;
                if vocab_size.is_some_and(|v| id as usize >= v) {
                    return Err(Error::Parse {
                        line: line_no,
                        reason: format!(
                            "token {id} outside vocabulary of size {}",
                            vocab_size.unwrap()
                        ),
                    });
                }
                Ok(id)
            })
            .collect::<Result<Vec<u32>>>()?;
        sequences.push(TokenSequence::new(tokens)?);
    }
    if sequences.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let vocab = vocab_size
        .unwrap_or_else(|| sequences.iter().map(|s| s.max_token()).max().unwrap() as usize + 1);
    Corpus::new(sequences, vocab)
}

pub fn load_corpus(
    path: impl AsRef<Path>,
    vocab_size: Option<usize>,
    num_chunks: usize,
) -> Result<Corpus> {
    parse_corpus(&fs::read_to_string(path)?, vocab_size)?.with_chunks(num_chunks)
}

pub fn format_corpus(corpus: &Corpus) -> String {
    let mut out = String::new();
    for s in corpus.sequences() {
        let line: Vec<String> = s.tokens().iter().map(u32::to_string).collect();
        out.push_str(&line.join(" "));
        out.push('\n');
    }
    out
}

pub fn save_corpus(path: impl AsRef<Path>, corpus: &Corpus) -> Result<()> {
    fs::write(path, format_corpus(corpus))?;
    Ok(())
}
