//! Binary checkpoint format.
//!
//! ```text
//! magic      4 bytes  "MALK"
//! version    u16
//! meta_len   u32      length of the UTF-8 JSON metadata block
//! metadata   meta_len bytes
//! n_tensors  u32
//! per tensor:
//!   name_len u16, name (UTF-8), dtype u8 (1 = f64), ndim u8,
//!   dims     ndim × u64,
//!   payload  product(dims) × f64, row-major
//! ```
//!
//! All integers and floats are little-endian.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::linalg::Matrix;

pub const MAGIC: &[u8; 4] = b"MALK";
pub const FORMAT_VERSION: u16 = 1;
pub const DTYPE_F64: u8 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub metadata: serde_json::Value,
    pub tensors: Vec<(String, Matrix)>,
}

impl Checkpoint {
    pub fn tensor(&self, name: &str) -> Option<&Matrix> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, m)| m)
    }
}

pub fn encode(ckpt: &Checkpoint) -> Result<Vec<u8>> {
    let meta = serde_json::to_vec(&ckpt.metadata).map_err(|e| Error::InvalidInput(e.to_string()))?;
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&u32::try_from(meta.len()).map_err(|_| too_large("metadata"))?.to_le_bytes());
    out.extend_from_slice(&meta);
    out.extend_from_slice(&u32::try_from(ckpt.tensors.len()).map_err(|_| too_large("tensor table"))?.to_le_bytes());
    for (name, m) in &ckpt.tensors {
        let name_len = u16::try_from(name.len()).map_err(|_| too_large("tensor name"))?;
        out.extend_from_slice(&name_len.to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(DTYPE_F64);
        out.push(2);
        out.extend_from_slice(&(m.rows() as u64).to_le_bytes());
        out.extend_from_slice(&(m.cols() as u64).to_le_bytes());
        for v in m.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

fn too_large(what: &str) -> Error {
    Error::InvalidInput(format!("{what} too large for the checkpoint format"))
}

struct Reader<'b> {
    buf: &'b [u8],
    pos: usize,
}

impl<'b> Reader<'b> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'b [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|e| *e <= self.buf.len())
            .ok_or_else(|| Error::Format { offset: self.pos, message: format!("truncated while reading {what}") })?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }

    fn fail(&self, offset: usize, message: impl Into<String>) -> Error {
        Error::Format { offset, message: message.into() }
    }
}

pub fn decode(bytes: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(4, "magic")? != MAGIC {
        return Err(r.fail(0, "bad magic, not a MALK checkpoint"));
    }
    let version = r.u16("version")?;
    if version != FORMAT_VERSION {
        return Err(r.fail(4, format!("unsupported format version {version}")));
    }
    let meta_len = r.u32("metadata length")? as usize;
    let meta_at = r.pos;
    let metadata = serde_json::from_slice(r.take(meta_len, "metadata")?)
        .map_err(|e| r.fail(meta_at, format!("metadata is not valid JSON: {e}")))?;
    let count = r.u32("tensor count")?;
    let mut tensors = Vec::new();
    for _ in 0..count {
        let name_len = r.u16("tensor name length")? as usize;
        let name_at = r.pos;
        let name = std::str::from_utf8(r.take(name_len, "tensor name")?)
            .map_err(|_| r.fail(name_at, "tensor name is not UTF-8"))?
            .to_string();
        let dtype_at = r.pos;
        let dtype = r.u8("dtype")?;
        if dtype != DTYPE_F64 {
            return Err(r.fail(dtype_at, format!("unsupported dtype tag {dtype}")));
        }
        let ndim_at = r.pos;
        let ndim = r.u8("ndim")?;
        let mut dims = Vec::with_capacity(ndim as usize);
        for _ in 0..ndim {
            dims.push(r.u64("dims")?);
        }
        let (rows, cols) = match dims[..] {
            [n] => (1, n),
            [rows, cols] => (rows, cols),
            _ => return Err(r.fail(ndim_at, format!("tensor {name:?} has {ndim} dims; only 1 or 2 are supported"))),
        };
        let len = rows.checked_mul(cols).and_then(|n| n.checked_mul(8)).and_then(|b| usize::try_from(b).ok());
        let payload_at = r.pos;
        let payload = r.take(len.ok_or_else(|| r.fail(payload_at, "tensor size overflows"))?, "tensor payload")?;
        let data = payload.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
        tensors.push((name, Matrix::from_vec(rows as usize, cols as usize, data)?));
    }
    if r.pos != bytes.len() {
        return Err(r.fail(r.pos, "trailing bytes after tensor table"));
    }
    Ok(Checkpoint { metadata, tensors })
}

/// Writes `bytes` to a sibling temp file and renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    fs::create_dir_all(dir)?;
    let file_name =
        path.file_name().ok_or_else(|| Error::InvalidInput(format!("{} is not a file path", path.display())))?;
    let tmp = dir.join(format!(".{}.tmp{}", file_name.to_string_lossy(), std::process::id()));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path).inspect_err(|_| {
        let _ = fs::remove_file(&tmp);
    })?;
    Ok(())
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    write_atomic(path, &encode(ckpt)?)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    decode(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        Checkpoint {
            metadata: serde_json::json!({"seed": 3, "rng": "x"}),
            tensors: vec![
                ("w".into(), Matrix::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap()),
                ("b".into(), Matrix::from_vec(1, 3, vec![-0.0, f64::MIN_POSITIVE, 1e300]).unwrap()),
            ],
        }
    }

    #[test]
    fn round_trip_is_bitwise() {
        let bytes = encode(&sample()).unwrap();
        let back = decode(&bytes).unwrap();
        assert_eq!(encode(&back).unwrap(), bytes);
        assert_eq!(back.tensor("b").unwrap().data()[0].to_bits(), (-0.0f64).to_bits());
    }

    #[test]
    fn known_payload_layout() {
        let ckpt = Checkpoint {
            metadata: serde_json::json!({}),
            tensors: vec![("m".into(), Matrix::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap())],
        };
        let bytes = encode(&ckpt).unwrap();
        let payload = &bytes[bytes.len() - 32..];
        let expect: Vec<u8> = [1.0f64, 2.0, 3.0, 4.0].iter().flat_map(|v| v.to_le_bytes()).collect();
        assert_eq!(payload, &expect[..]);
        // header: magic, version, meta_len, "{}", count, name_len, "m", dtype, ndim, 2 dims
        assert_eq!(&bytes[..4], b"MALK");
        assert_eq!(bytes.len(), 4 + 2 + 4 + 2 + 4 + 2 + 1 + 1 + 1 + 16 + 32);
    }

    #[test]
    fn truncation_reports_offset() {
        let bytes = encode(&sample()).unwrap();
        for cut in [0, 3, 7, 20, bytes.len() - 1] {
            match decode(&bytes[..cut]) {
                Err(Error::Format { offset, .. }) => assert!(offset <= cut),
                other => panic!("cut {cut}: {other:?}"),
            }
        }
    }

    #[test]
    fn unknown_version_rejected() {
        let mut bytes = encode(&sample()).unwrap();
        bytes[4] = 9;
        assert!(matches!(decode(&bytes), Err(Error::Format { offset: 4, .. })));
    }

    #[test]
    fn atomic_write_leaves_no_temp() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.malk");
        save_checkpoint(&p, &sample()).unwrap();
        assert_eq!(load_checkpoint(&p).unwrap(), sample());
        assert_eq!(fs::read_dir(dir.path()).unwrap().count(), 1);
    }
}
