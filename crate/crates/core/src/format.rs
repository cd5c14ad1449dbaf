//! Sequence file formats.
//!
//! `CATP1` binary layout (all integers and floats little-endian):
//!
//! ```text
//! magic        6 bytes  "CATP1\0"
//! version      u16      1
//! dim          u32
//! segments     u32
//! per segment:
//!   kind         u8     0=System 1=IcdImage 2=IcdText 3=QueryImage 4=QueryText
//!   sample_index u32
//!   rows         u32
//!   data         rows * dim f32, row-major
//! ```
//!
//! Spans are implied by cumulative row counts. The JSON form is
//! `{"dim": D, "segments": [{"kind": "IcdImage", "sample_index": 1,
//! "embeddings": [[...], ...]}]}` with an optional per-segment `"start"`
//! that, when present, must equal the implied span start.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seq::{EmbeddingMatrix, InContextSequence, SegmentKind};

pub const MAGIC: &[u8; 6] = b"CATP1\0";
pub const VERSION: u16 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SequenceFormat {
    Json,
    Catp1,
}

pub fn save_sequence(seq: &InContextSequence, format: SequenceFormat) -> Result<Vec<u8>> {
    match format {
        SequenceFormat::Catp1 => Ok(encode_catp1(seq)),
        SequenceFormat::Json => {
            let file = SequenceFile::from(seq);
            let mut out = serde_json::to_vec(&file)?;
            out.push(b'\n');
            Ok(out)
        }
    }
}

/// Decodes either format, sniffing the binary magic first.
pub fn load_sequence(bytes: &[u8]) -> Result<InContextSequence> {
    if bytes.starts_with(MAGIC) {
        return decode_catp1(bytes);
    }
    match bytes.iter().position(|b| !b.is_ascii_whitespace()) {
        Some(p) if bytes[p] == b'{' => decode_json(bytes),
        _ => Err(Error::Format {
            offset: 0,
            message: "unrecognised magic; expected \"CATP1\\0\" or a JSON object".into(),
        }),
    }
}

fn encode_catp1(seq: &InContextSequence) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + seq.len() * seq.dim() * 4 + seq.segments().len() * 9);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(seq.dim() as u32).to_le_bytes());
    out.extend_from_slice(&(seq.segments().len() as u32).to_le_bytes());
    for s in seq.segments() {
        out.push(s.kind.code());
        out.extend_from_slice(&s.sample_index.to_le_bytes());
        out.extend_from_slice(&(s.embeddings.rows() as u32).to_le_bytes());
        for v in s.embeddings.as_slice() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(Error::Format {
                offset: self.pos,
                message: format!(
                    "truncated payload: needed {n} byte(s) for {what}, {} left",
                    self.bytes.len() - self.pos
                ),
            }),
        }
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
}

fn decode_catp1(bytes: &[u8]) -> Result<InContextSequence> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(MAGIC.len(), "magic")? != MAGIC {
        return Err(Error::Format {
            offset: 0,
            message: "bad magic".into(),
        });
    }
    let at = r.pos;
    let version = r.u16("version")?;
    if version != VERSION {
        return Err(Error::Format {
            offset: at,
            message: format!("unsupported version {version}"),
        });
    }
    let at = r.pos;
    let dim = r.u32("dim")? as usize;
    if dim == 0 {
        return Err(Error::Format {
            offset: at,
            message: "dim must be >= 1".into(),
        });
    }
    let count = r.u32("segment count")? as usize;
    let mut parts = Vec::with_capacity(count.min(1 << 16));
    for index in 0..count {
        let at = r.pos;
        let code = r.u8("segment kind")?;
        let kind = SegmentKind::from_code(code).ok_or_else(|| Error::Format {
            offset: at,
            message: format!("segment {index}: unknown kind code {code}"),
        })?;
        let sample_index = r.u32("sample index")?;
        let at = r.pos;
        let rows = r.u32("row count")? as usize;
        if rows == 0 {
            return Err(Error::Format {
                offset: at,
                message: format!("segment {index}: zero rows"),
            });
        }
        let n_bytes = rows
            .checked_mul(dim)
            .and_then(|v| v.checked_mul(4))
            .ok_or_else(|| Error::Format {
                offset: at,
                message: format!("segment {index}: size overflow"),
            })?;
        let at = r.pos;
        let raw = r.take(n_bytes, "embedding data")?;
        let data: Vec<f32> = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let m = EmbeddingMatrix::new(rows, dim, data).map_err(|e| Error::Format {
            offset: at,
            message: format!("segment {index}: {e}"),
        })?;
        parts.push((kind, sample_index, m));
    }
    if r.pos != bytes.len() {
        return Err(Error::Format {
            offset: r.pos,
            message: format!("{} trailing byte(s)", bytes.len() - r.pos),
        });
    }
    InContextSequence::new(dim, parts)
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SequenceFile {
    dim: usize,
    segments: Vec<SegmentFile>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SegmentFile {
    kind: SegmentKind,
    sample_index: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    start: Option<usize>,
    embeddings: Vec<Vec<f32>>,
}

impl From<&InContextSequence> for SequenceFile {
    fn from(seq: &InContextSequence) -> Self {
        SequenceFile {
            dim: seq.dim(),
            segments: seq
                .segments()
                .iter()
                .map(|s| SegmentFile {
                    kind: s.kind,
                    sample_index: s.sample_index,
                    start: None,
                    embeddings: s.embeddings.iter_rows().map(<[f32]>::to_vec).collect(),
                })
                .collect(),
        }
    }
}

fn decode_json(bytes: &[u8]) -> Result<InContextSequence> {
    let file: SequenceFile = serde_json::from_slice(bytes)?;
    let mut cursor = 0usize;
    let mut parts = Vec::with_capacity(file.segments.len());
    for (index, s) in file.segments.into_iter().enumerate() {
        if let Some(start) = s.start {
            if start != cursor {
                let what = if start < cursor { "overlaps the previous segment" } else { "leaves a gap" };
                return Err(Error::SegmentFormat {
                    index,
                    message: format!("span start {start} {what} (expected {cursor})"),
                });
            }
        }
        if s.embeddings.iter().any(|r| r.len() != file.dim) {
            return Err(Error::SegmentFormat {
                index,
                message: format!("row length differs from dim {}", file.dim),
            });
        }
        let m = EmbeddingMatrix::from_rows(&s.embeddings).map_err(|e| Error::SegmentFormat {
            index,
            message: e.to_string(),
        })?;
        cursor += m.rows();
        parts.push((s.kind, s.sample_index, m));
    }
    InContextSequence::new(file.dim, parts)
}
