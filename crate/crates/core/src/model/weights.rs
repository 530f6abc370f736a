//! `GHWT` weight files: little-endian, tensors in path order.

use std::io::{ErrorKind, Read, Write};

use crate::error::{Error, Result};
use crate::params::ParamStore;

pub const WEIGHTS_MAGIC: [u8; 4] = *b"GHWT";
pub const WEIGHTS_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct WeightEntry {
    pub path: String,
    pub shape: Vec<usize>,
    pub values: Vec<f32>,
}

pub fn write_weights<W: Write>(params: &ParamStore<f32>, mut w: W) -> Result<()> {
    w.write_all(&WEIGHTS_MAGIC)?;
    w.write_all(&WEIGHTS_VERSION.to_le_bytes())?;
    let count = u32::try_from(params.len()).map_err(|_| Error::Format("too many tensors".into()))?;
    w.write_all(&count.to_le_bytes())?;
    for (path, p) in params.iter() {
        let len = u16::try_from(path.len()).map_err(|_| Error::Format(format!("path too long: `{path}`")))?;
        w.write_all(&len.to_le_bytes())?;
        w.write_all(path.as_bytes())?;
        w.write_all(&[p.shape.len() as u8])?;
        for &d in &p.shape {
            let d = u32::try_from(d).map_err(|_| Error::Format(format!("dim too large in `{path}`")))?;
            w.write_all(&d.to_le_bytes())?;
        }
        let mut buf = Vec::with_capacity(p.value.len() * 4);
        for v in p.value.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf)?;
    }
    w.flush()?;
    Ok(())
}

struct Reader<R> {
    inner: R,
}

impl<R: Read> Reader<R> {
    fn bytes(&mut self, n: usize, what: &str) -> Result<Vec<u8>> {
        let mut buf = vec![0u8; n];
        self.inner.read_exact(&mut buf).map_err(|e| match e.kind() {
            ErrorKind::UnexpectedEof => Error::Truncated(format!("ended while reading {what}")),
            _ => Error::Io(e),
        })?;
        Ok(buf)
    }

    fn array<const N: usize>(&mut self, what: &str) -> Result<[u8; N]> {
        Ok(self.bytes(N, what)?.try_into().expect("length matches"))
    }
}

/// Reads every entry; trailing bytes after the last tensor are a format error.
pub fn read_weights<R: Read>(r: R) -> Result<Vec<WeightEntry>> {
    let mut r = Reader { inner: r };
    let magic: [u8; 4] = r.array("magic")?;
    if magic != WEIGHTS_MAGIC {
        return Err(Error::Format(format!("bad magic {magic:02x?}")));
    }
    let version = u32::from_le_bytes(r.array("version")?);
    if version != WEIGHTS_VERSION {
        return Err(Error::Format(format!("unsupported version {version}")));
    }
    let count = u32::from_le_bytes(r.array("tensor count")?) as usize;
    let mut entries = Vec::with_capacity(count.min(4096));
    for t in 0..count {
        let len = u16::from_le_bytes(r.array("path length")?) as usize;
        let path = String::from_utf8(r.bytes(len, "path")?)
            .map_err(|_| Error::Format(format!("tensor {t}: path is not UTF-8")))?;
        let rank = r.array::<1>("rank")?[0] as usize;
        if !(1..=4).contains(&rank) {
            return Err(Error::Format(format!("`{path}`: rank {rank} not in 1..=4")));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(u32::from_le_bytes(r.array("dims")?) as usize);
        }
        let n: usize = shape.iter().product();
        let raw = r.bytes(n * 4, &format!("payload of `{path}`"))?;
        let values = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("chunk of 4"))).collect();
        entries.push(WeightEntry { path, shape, values });
    }
    let mut rest = [0u8; 1];
    match r.inner.read(&mut rest)? {
        0 => Ok(entries),
        _ => Err(Error::Format("trailing bytes after last tensor".into())),
    }
}
