//! "UMX1" checkpoint container: magic bytes, then self-describing named
//! tensor records until EOF. Per record: name length (u32 LE), name bytes,
//! rank (u32 LE), extents (u32 LE each), payload (f32 LE, product-of-extents
//! values). Non-tensor metadata rides along as a reserved record whose
//! payload is JSON, one byte per f32.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"UMX1";

/// Name of the reserved metadata record.
pub const META_RECORD: &str = "__meta__";

const MAX_NAME_LEN: u32 = 1 << 16;
const MAX_RANK: u32 = 16;
const MAX_ELEMENTS: u64 = 1 << 31;

#[derive(Debug, Clone, PartialEq)]
pub struct TensorRecord {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

impl TensorRecord {
    pub fn new(name: impl Into<String>, shape: &[usize], data: Vec<f32>) -> Self {
        assert_eq!(shape.iter().product::<usize>(), data.len());
        Self {
            name: name.into(),
            shape: shape.to_vec(),
            data,
        }
    }
}

/// Wrap a JSON string as the reserved metadata record.
pub fn meta_record(json: &str) -> TensorRecord {
    let data: Vec<f32> = json.bytes().map(|b| b as f32).collect();
    let len = data.len();
    TensorRecord {
        name: META_RECORD.to_string(),
        shape: vec![len],
        data,
    }
}

/// Recover the JSON string from a metadata record.
pub fn meta_json(rec: &TensorRecord) -> Result<String> {
    let bytes: Vec<u8> = rec
        .data
        .iter()
        .map(|&f| {
            if f.fract() == 0.0 && (0.0..256.0).contains(&f) {
                Ok(f as u8)
            } else {
                Err(Error::Format(format!(
                    "metadata record holds non-byte value {f}"
                )))
            }
        })
        .collect::<Result<_>>()?;
    String::from_utf8(bytes).map_err(|e| Error::Format(format!("metadata not UTF-8: {e}")))
}

pub fn write_to(w: &mut impl Write, records: &[TensorRecord]) -> Result<()> {
    w.write_all(MAGIC)?;
    for rec in records {
        let name = rec.name.as_bytes();
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name)?;
        w.write_all(&(rec.shape.len() as u32).to_le_bytes())?;
        for &e in &rec.shape {
            w.write_all(&(e as u32).to_le_bytes())?;
        }
        for &v in &rec.data {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn write_file(path: &Path, records: &[TensorRecord]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_to(&mut w, records)?;
    w.flush()?;
    Ok(())
}

struct Cursor<'a, R: Read> {
    r: &'a mut R,
    offset: u64,
    label: &'a str,
}

impl<'a, R: Read> Cursor<'a, R> {
    fn bad(&self, msg: impl Into<String>) -> Error {
        Error::BadRecord {
            path: self.label.to_string(),
            msg: msg.into(),
            offset: self.offset,
        }
    }

    fn fill(&mut self, buf: &mut [u8]) -> Result<()> {
        self.r.read_exact(buf).map_err(|e| {
            if e.kind() == std::io::ErrorKind::UnexpectedEof {
                self.bad("truncated record")
            } else {
                Error::Io(e)
            }
        })?;
        self.offset += buf.len() as u64;
        Ok(())
    }

    fn u32(&mut self) -> Result<u32> {
        let mut b = [0u8; 4];
        self.fill(&mut b)?;
        Ok(u32::from_le_bytes(b))
    }

    /// Returns None at a clean EOF boundary (between records).
    fn u32_or_eof(&mut self) -> Result<Option<u32>> {
        let mut b = [0u8; 4];
        let mut read = 0;
        while read < 4 {
            let n = self.r.read(&mut b[read..])?;
            if n == 0 {
                if read == 0 {
                    return Ok(None);
                }
                return Err(self.bad("truncated record header"));
            }
            read += n;
        }
        self.offset += 4;
        Ok(Some(u32::from_le_bytes(b)))
    }
}

pub fn read_from(r: &mut impl Read, label: &str) -> Result<Vec<TensorRecord>> {
    let mut cur = Cursor {
        r,
        offset: 0,
        label,
    };
    let mut magic = [0u8; 4];
    cur.fill(&mut magic)
        .map_err(|_| Error::Format(format!("{label}: file too short for magic bytes")))?;
    if &magic != MAGIC {
        return Err(Error::Format(format!(
            "{label}: bad magic bytes {magic:?}, expected {MAGIC:?}"
        )));
    }
    let mut records = Vec::new();
    while let Some(name_len) = cur.u32_or_eof()? {
        if name_len == 0 || name_len > MAX_NAME_LEN {
            return Err(cur.bad(format!("implausible name length {name_len}")));
        }
        let mut name_bytes = vec![0u8; name_len as usize];
        cur.fill(&mut name_bytes)?;
        let name = String::from_utf8(name_bytes)
            .map_err(|_| cur.bad("record name is not UTF-8"))?;
        let rank = cur.u32()?;
        if rank > MAX_RANK {
            return Err(cur.bad(format!("implausible rank {rank} for record {name}")));
        }
        let mut shape = Vec::with_capacity(rank as usize);
        let mut elements: u64 = 1;
        for _ in 0..rank {
            let e = cur.u32()? as u64;
            elements = elements.saturating_mul(e);
            shape.push(e as usize);
        }
        if elements > MAX_ELEMENTS {
            return Err(cur.bad(format!("record {name} too large ({elements} elements)")));
        }
        let mut data = vec![0.0f32; elements as usize];
        let mut buf = [0u8; 4];
        for v in data.iter_mut() {
            cur.fill(&mut buf)?;
            *v = f32::from_le_bytes(buf);
        }
        records.push(TensorRecord { name, shape, data });
    }
    Ok(records)
}

pub fn read_file(path: &Path) -> Result<Vec<TensorRecord>> {
    let mut r = BufReader::new(File::open(path)?);
    read_from(&mut r, &path.display().to_string())
}
