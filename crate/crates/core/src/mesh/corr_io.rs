//! Vertex correspondence files.
//!
//! Text: one `src_index tgt_index` pair per line (0-based).
//! Binary: 8-byte magic `CORRv001` followed by little-endian `u32` pairs.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};

pub const CORR_MAGIC: &[u8; 8] = b"CORRv001";

pub type Correspondence = Vec<(u32, u32)>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CorrFormat {
    Text,
    Binary,
}

pub fn write_correspondences(pairs: &[(u32, u32)], path: impl AsRef<Path>, format: CorrFormat) -> Result<()> {
    let path = path.as_ref();
    let mut buf = Vec::with_capacity(8 + pairs.len() * 8);
    match format {
        CorrFormat::Binary => {
            buf.extend_from_slice(CORR_MAGIC);
            for &(s, t) in pairs {
                buf.extend_from_slice(&s.to_le_bytes());
                buf.extend_from_slice(&t.to_le_bytes());
            }
        }
        CorrFormat::Text => {
            for &(s, t) in pairs {
                writeln!(buf, "{s} {t}").expect("vec write");
            }
        }
    }
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

/// Reads either format, detected by the magic header.
pub fn read_correspondences(path: impl AsRef<Path>) -> Result<Correspondence> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let name = path.display().to_string();
    if bytes.starts_with(CORR_MAGIC) {
        let body = &bytes[8..];
        if body.len() % 8 != 0 {
            return Err(Error::format(
                name,
                format!("byte offset {}", 8 + body.len() - body.len() % 8),
                "trailing partial pair",
            ));
        }
        Ok(body
            .chunks_exact(8)
            .map(|c| {
                (
                    u32::from_le_bytes(c[..4].try_into().unwrap()),
                    u32::from_le_bytes(c[4..].try_into().unwrap()),
                )
            })
            .collect())
    } else {
        let text = String::from_utf8(bytes).map_err(|_| Error::format(&name, "body", "not utf-8 text"))?;
        let mut out = Vec::new();
        for (ln, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let mut it = line.split_whitespace();
            let mut next = || -> Result<u32> {
                let tok = it
                    .next()
                    .ok_or_else(|| Error::format(&name, format!("line {}", ln + 1), "expected two indices"))?;
                tok.parse()
                    .map_err(|_| Error::format(&name, format!("line {}", ln + 1), format!("bad index {tok:?}")))
            };
            let s = next()?;
            let t = next()?;
            out.push((s, t));
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn round_trip_both_formats(pairs in proptest::collection::vec((any::<u32>(), any::<u32>()), 0..64)) {
            let dir = tempfile::tempdir().unwrap();
            for (fmt, name) in [(CorrFormat::Binary, "a.corr"), (CorrFormat::Text, "a.txt")] {
                let p = dir.path().join(name);
                write_correspondences(&pairs, &p, fmt).unwrap();
                prop_assert_eq!(read_correspondences(&p).unwrap(), pairs.clone());
            }
        }
    }

    #[test]
    fn binary_header_layout() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.corr");
        write_correspondences(&[(1, 2)], &p, CorrFormat::Binary).unwrap();
        let b = std::fs::read(&p).unwrap();
        assert_eq!(&b[..8], b"CORRv001");
        assert_eq!(&b[8..], &[1, 0, 0, 0, 2, 0, 0, 0]);
    }
}
