//! Single-file binary checkpoint.
//!
//! ```text
//! "RNNLM1"                      6 bytes
//! d_s, d_h, layers,             u64 LE each
//! vocab_size, shortlist_size
//! vocab_bytes                   u64 LE, then that many bytes of vocabulary
//!                               text (`#shortlist=<n>` + one token per line)
//! S                             d_s × shortlist
//! per layer: W_x, W_h, b        4d_h × d_in, 4d_h × d_h, 4d_h
//! U                             d_h × shortlist
//! b_y                           shortlist
//! ```
//! Matrices are column-major f64 little-endian. Trailing bytes are rejected.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use super::{LstmLayer, RnnError, RnnLm};
use crate::linalg::Matrix;
use crate::vocab::Vocabulary;

pub const CHECKPOINT_MAGIC: &[u8; 6] = b"RNNLM1";

fn put_u64(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_f64s(out: &mut Vec<u8>, vs: &[f64]) {
    for v in vs {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

pub fn write_checkpoint<W: Write>(model: &RnnLm, mut out: W) -> Result<(), RnnError> {
    let dims = model.dims();
    let vocab_text = model.vocab().to_text();
    let mut buf = Vec::new();
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    for v in [
        dims.d_s,
        dims.d_h,
        dims.layers,
        model.vocab().len(),
        model.vocab().shortlist_size(),
        vocab_text.len(),
    ] {
        put_u64(&mut buf, v as u64);
    }
    buf.extend_from_slice(vocab_text.as_bytes());
    put_f64s(&mut buf, model.input_embeddings().as_slice());
    for layer in model.layers() {
        put_f64s(&mut buf, layer.w_x.as_slice());
        put_f64s(&mut buf, layer.w_h.as_slice());
        put_f64s(&mut buf, &layer.bias);
    }
    put_f64s(&mut buf, model.output_embeddings().as_slice());
    put_f64s(&mut buf, model.output_bias());
    out.write_all(&buf)?;
    Ok(())
}

pub fn save_checkpoint(model: &RnnLm, path: impl AsRef<Path>) -> Result<(), RnnError> {
    let mut f = std::io::BufWriter::new(fs::File::create(path)?);
    write_checkpoint(model, &mut f)?;
    f.flush()?;
    Ok(())
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8], RnnError> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| {
                RnnError::Checkpoint(format!("truncated while reading {what} at byte {}", self.pos))
            })?;
        let out = &self.buf[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u64(&mut self, what: &str) -> Result<usize, RnnError> {
        let b = self.take(8, what)?;
        let v = u64::from_le_bytes(b.try_into().expect("8 bytes"));
        usize::try_from(v).map_err(|_| RnnError::Checkpoint(format!("{what} too large")))
    }

    fn f64s(&mut self, n: usize, what: &str) -> Result<Vec<f64>, RnnError> {
        let bytes = n
            .checked_mul(8)
            .ok_or_else(|| RnnError::Checkpoint(format!("{what} too large")))?;
        let b = self.take(bytes, what)?;
        Ok(b.chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }

    fn matrix(&mut self, rows: usize, cols: usize, what: &str) -> Result<Matrix, RnnError> {
        let n = rows
            .checked_mul(cols)
            .ok_or_else(|| RnnError::Checkpoint(format!("{what} too large")))?;
        Ok(Matrix::from_col_major(rows, cols, self.f64s(n, what)?))
    }
}

pub fn read_checkpoint<R: Read>(mut input: R) -> Result<RnnLm, RnnError> {
    let mut buf = Vec::new();
    input.read_to_end(&mut buf)?;
    let mut cur = Cursor { buf: &buf, pos: 0 };
    if cur.take(CHECKPOINT_MAGIC.len(), "magic")? != CHECKPOINT_MAGIC {
        return Err(RnnError::Checkpoint("magic mismatch (expected RNNLM1)".into()));
    }
    let d_s = cur.u64("d_s")?;
    let d_h = cur.u64("d_h")?;
    let layers = cur.u64("layer count")?;
    let vocab_size = cur.u64("vocab size")?;
    let shortlist = cur.u64("shortlist size")?;
    let vocab_len = cur.u64("vocabulary length")?;
    let vocab_text = std::str::from_utf8(cur.take(vocab_len, "vocabulary")?)
        .map_err(|_| RnnError::Checkpoint("vocabulary is not UTF-8".into()))?;
    let vocab = Vocabulary::from_text(vocab_text)?;
    if vocab.len() != vocab_size || vocab.shortlist_size() != shortlist {
        return Err(RnnError::Checkpoint(format!(
            "header says {vocab_size} words / shortlist {shortlist}, embedded vocabulary has {} / {}",
            vocab.len(),
            vocab.shortlist_size()
        )));
    }
    if layers == 0 {
        return Err(RnnError::Checkpoint("layer count is zero".into()));
    }

    let input_emb = cur.matrix(d_s, shortlist, "input embeddings")?;
    let mut lstm = Vec::with_capacity(layers);
    for l in 0..layers {
        let d_in = if l == 0 { d_s } else { d_h };
        lstm.push(LstmLayer {
            w_x: cur.matrix(4 * d_h, d_in, "LSTM input weights")?,
            w_h: cur.matrix(4 * d_h, d_h, "LSTM recurrent weights")?,
            bias: cur.f64s(4 * d_h, "LSTM bias")?,
        });
    }
    let output_emb = cur.matrix(d_h, shortlist, "output embeddings")?;
    let output_bias = cur.f64s(shortlist, "output bias")?;
    if cur.pos != buf.len() {
        return Err(RnnError::Checkpoint(format!(
            "{} trailing bytes after output bias",
            buf.len() - cur.pos
        )));
    }
    RnnLm::from_parts(vocab, input_emb, lstm, output_emb, output_bias)
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<RnnLm, RnnError> {
    read_checkpoint(std::io::BufReader::new(fs::File::open(path)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rnnlm::ModelDims;
    use crate::vocab::Corpus;

    fn model() -> RnnLm {
        let corpus = Corpus::from_text("a b c d a b");
        let vocab = Vocabulary::build(&corpus, 6, 7).unwrap();
        RnnLm::random(vocab, ModelDims { layers: 2, d_s: 3, d_h: 4 }, 0.3, 11)
    }

    fn bytes(m: &RnnLm) -> Vec<u8> {
        let mut buf = Vec::new();
        write_checkpoint(m, &mut buf).unwrap();
        buf
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let m = model();
        let buf = bytes(&m);
        assert_eq!(&buf[..6], b"RNNLM1");
        let back = read_checkpoint(buf.as_slice()).unwrap();
        assert_eq!(back, m);
        assert_eq!(bytes(&back), buf);
    }

    #[test]
    fn size_matches_layout() {
        let m = model();
        let text_len = m.vocab().to_text().len();
        let floats = 3 * 6 + (16 * 3 + 16 * 4 + 16) + (16 * 4 + 16 * 4 + 16) + 4 * 6 + 6;
        assert_eq!(bytes(&m).len(), 6 + 6 * 8 + text_len + floats * 8);
    }

    #[test]
    fn truncation_and_corruption_are_errors() {
        let buf = bytes(&model());
        assert!(matches!(
            read_checkpoint(&buf[..buf.len() - 1]),
            Err(RnnError::Checkpoint(_))
        ));
        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(matches!(read_checkpoint(bad.as_slice()), Err(RnnError::Checkpoint(_))));
        let mut extra = buf.clone();
        extra.push(0);
        assert!(matches!(read_checkpoint(extra.as_slice()), Err(RnnError::Checkpoint(_))));
        // shortlist in header disagrees with the embedded vocabulary
        let mut dims = buf;
        dims[6 + 4 * 8] ^= 1;
        assert!(matches!(read_checkpoint(dims.as_slice()), Err(RnnError::Checkpoint(_))));
    }
}
