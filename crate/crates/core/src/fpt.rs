//! FPT v1 tensor container.
//!
//! Layout: the 8-byte magic `FPTV1\0\0\0`, a little-endian `u64` header
//! length, a UTF-8 JSON header, then the payload of little-endian `f32`
//! values. The payload holds each named tensor in turn; each tensor is a
//! stack of `heads` row-major `rows × cols` matrices.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor2D;

pub const MAGIC: &[u8; 8] = b"FPTV1\0\0\0";
/// Headers above this size are rejected before allocation.
const MAX_HEADER_BYTES: u64 = 1 << 20;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FptHeader {
    pub version: u32,
    pub dtype: String,
    pub byte_order: String,
    pub layout: String,
    /// `[heads, rows, cols]`.
    pub shape: [usize; 3],
    pub tensors: Vec<String>,
    pub payload_bytes: u64,
    /// `crc32:` followed by eight lowercase hex digits.
    pub checksum: String,
}

impl FptHeader {
    fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::HeaderValidation(m));
        if self.version != 1 {
            return bad(format!("unsupported version {}", self.version));
        }
        if self.dtype != "f32" || self.byte_order != "little-endian" || self.layout != "row-major" {
            return bad(format!(
                "unsupported encoding {}/{}/{}",
                self.dtype, self.byte_order, self.layout
            ));
        }
        if self.tensors.is_empty() {
            return bad("no tensors listed".into());
        }
        let [h, r, c] = self.shape;
        let expected = (h as u128) * (r as u128) * (c as u128) * (self.tensors.len() as u128) * 4;
        if expected != self.payload_bytes as u128 {
            return bad(format!(
                "shape {:?} x {} tensors needs {expected} bytes, header declares {}",
                self.shape,
                self.tensors.len(),
                self.payload_bytes
            ));
        }
        if parse_checksum(&self.checksum).is_none() {
            return bad(format!(
                "checksum field {:?} is not crc32:<8 hex>",
                self.checksum
            ));
        }
        Ok(())
    }
}

fn format_checksum(crc: u32) -> String {
    format!("crc32:{crc:08x}")
}

fn parse_checksum(s: &str) -> Option<u32> {
    let hex = s.strip_prefix("crc32:")?;
    if hex.len() != 8 {
        return None;
    }
    u32::from_str_radix(hex, 16).ok()
}

/// Named stacks of equally shaped matrices, one per head.
#[derive(Debug, Clone, PartialEq)]
pub struct TensorBundle {
    pub names: Vec<String>,
    /// `tensors[t][h]` is head `h` of tensor `names[t]`.
    pub tensors: Vec<Vec<Tensor2D>>,
}

impl TensorBundle {
    pub fn new(names: Vec<String>, tensors: Vec<Vec<Tensor2D>>) -> Result<Self> {
        if names.is_empty() || names.len() != tensors.len() {
            return Err(Error::InvalidArgument(
                "bundle needs one head stack per name".into(),
            ));
        }
        let heads = tensors[0].len();
        if heads == 0 {
            return Err(Error::InvalidArgument(
                "bundle needs at least one head".into(),
            ));
        }
        let shape = tensors[0][0].shape();
        for stack in &tensors {
            if stack.len() != heads || stack.iter().any(|t| t.shape() != shape) {
                return Err(Error::Shape("bundle tensors differ in shape".into()));
            }
        }
        Ok(Self { names, tensors })
    }

    /// A Q/K/V bundle.
    pub fn qkv(q: Vec<Tensor2D>, k: Vec<Tensor2D>, v: Vec<Tensor2D>) -> Result<Self> {
        Self::new(vec!["q".into(), "k".into(), "v".into()], vec![q, k, v])
    }

    pub fn heads(&self) -> usize {
        self.tensors[0].len()
    }

    pub fn shape(&self) -> [usize; 3] {
        let (r, c) = self.tensors[0][0].shape();
        [self.heads(), r, c]
    }

    pub fn get(&self, name: &str) -> Option<&[Tensor2D]> {
        let i = self.names.iter().position(|n| n == name)?;
        Some(&self.tensors[i])
    }
}

pub fn encode(bundle: &TensorBundle) -> Result<Vec<u8>> {
    let mut payload = Vec::new();
    for stack in &bundle.tensors {
        for t in stack {
            for &x in t.data() {
                payload.extend_from_slice(&(x as f32).to_le_bytes());
            }
        }
    }
    let header = FptHeader {
        version: 1,
        dtype: "f32".into(),
        byte_order: "little-endian".into(),
        layout: "row-major".into(),
        shape: bundle.shape(),
        tensors: bundle.names.clone(),
        payload_bytes: payload.len() as u64,
        checksum: format_checksum(crc32fast::hash(&payload)),
    };
    let json = serde_json::to_vec(&header)
        .map_err(|e| Error::InvalidArgument(format!("header encoding: {e}")))?;
    let mut out = Vec::with_capacity(16 + json.len() + payload.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&payload);
    Ok(out)
}

/// Reads exactly `buf.len()` bytes, returning how many were available.
fn read_up_to(r: &mut impl Read, buf: &mut [u8]) -> Result<usize> {
    let mut filled = 0;
    while filled < buf.len() {
        match r.read(&mut buf[filled..]) {
            Ok(0) => break,
            Ok(k) => filled += k,
            Err(e) if e.kind() == std::io::ErrorKind::Interrupted => {}
            Err(e) => return Err(e.into()),
        }
    }
    Ok(filled)
}

pub fn decode(mut r: impl Read) -> Result<TensorBundle> {
    let mut magic = [0u8; 8];
    let got = read_up_to(&mut r, &mut magic)?;
    if got < 8 || &magic != MAGIC {
        return Err(Error::BadMagic(magic[..got].to_vec()));
    }
    let mut len = [0u8; 8];
    if read_up_to(&mut r, &mut len)? < 8 {
        return Err(Error::MalformedHeader("missing header length".into()));
    }
    let len = u64::from_le_bytes(len);
    if len > MAX_HEADER_BYTES {
        return Err(Error::MalformedHeader(format!(
            "header length {len} too large"
        )));
    }
    let mut json = vec![0u8; len as usize];
    if read_up_to(&mut r, &mut json)? < json.len() {
        return Err(Error::MalformedHeader(
            "header shorter than its declared length".into(),
        ));
    }
    let header: FptHeader =
        serde_json::from_slice(&json).map_err(|e| Error::MalformedHeader(e.to_string()))?;
    header.validate()?;

    let expected = header.payload_bytes as usize;
    let mut payload = Vec::new();
    r.read_to_end(&mut payload)?;
    if payload.len() < expected {
        return Err(Error::TruncatedPayload {
            expected,
            found: payload.len(),
        });
    }
    if payload.len() > expected {
        return Err(Error::HeaderValidation(format!(
            "{} trailing bytes after payload",
            payload.len() - expected
        )));
    }
    let declared = parse_checksum(&header.checksum).expect("validated");
    let actual = crc32fast::hash(&payload);
    if declared != actual {
        return Err(Error::ChecksumMismatch {
            expected: header.checksum.clone(),
            actual: format_checksum(actual),
        });
    }

    let [heads, rows, cols] = header.shape;
    let per = rows * cols;
    let mut values = payload
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64);
    let mut tensors = Vec::with_capacity(header.tensors.len());
    for _ in &header.tensors {
        let mut stack = Vec::with_capacity(heads);
        for _ in 0..heads {
            let data: Vec<f64> = values.by_ref().take(per).collect();
            stack.push(Tensor2D::new(rows, cols, data)?);
        }
        tensors.push(stack);
    }
    TensorBundle::new(header.tensors, tensors)
}

/// Writes through a temporary file in the target directory, then renames.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| Error::Io(e.error))?;
    Ok(())
}

pub fn save(bundle: &TensorBundle, path: &Path) -> Result<()> {
    write_atomic(path, &encode(bundle)?)
}

pub fn load(path: &Path) -> Result<TensorBundle> {
    let file = std::fs::File::open(path)?;
    decode(std::io::BufReader::new(file))
}

/// Saves a single matrix as a one-head, one-tensor file named `t`.
pub fn save_tensor(t: &Tensor2D, path: &Path) -> Result<()> {
    save(
        &TensorBundle::new(vec!["t".into()], vec![vec![t.clone()]])?,
        path,
    )
}

pub fn load_tensor(path: &Path) -> Result<Tensor2D> {
    let b = load(path)?;
    if b.names.len() != 1 || b.heads() != 1 {
        return Err(Error::HeaderValidation(format!(
            "expected one single-head tensor, found {} tensor(s) with {} head(s)",
            b.names.len(),
            b.heads()
        )));
    }
    Ok(b.tensors
        .into_iter()
        .next()
        .unwrap()
        .into_iter()
        .next()
        .unwrap())
}
