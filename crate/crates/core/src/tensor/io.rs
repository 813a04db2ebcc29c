//! Flat binary layout: u64 LE rank, u64 LE extents, then row-major f64 LE
//! values. A factor bundle is several such records back to back.

use std::io::{Read, Write};
use std::path::Path;

use super::Tensor;
use crate::error::{Error, Result};

impl Tensor {
    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(&(self.rank() as u64).to_le_bytes())?;
        for &d in self.shape() {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        for v in self.data() {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    /// Reads one record; `Ok(None)` at a clean end of stream.
    pub fn read_from<R: Read>(r: &mut R) -> Result<Option<Tensor>> {
        let mut word = [0u8; 8];
        match r.read_exact(&mut word) {
            Ok(()) => {}
            Err(e) if e.kind() == std::io::ErrorKind::UnexpectedEof => return Ok(None),
            Err(e) => return Err(e.into()),
        }
        let rank = u64::from_le_bytes(word);
        if rank > 16 {
            return Err(Error::Format(format!("implausible rank {rank}")));
        }
        let mut shape = Vec::with_capacity(rank as usize);
        for _ in 0..rank {
            r.read_exact(&mut word)
                .map_err(|_| Error::Format("truncated extents".into()))?;
            shape.push(u64::from_le_bytes(word) as usize);
        }
        let n: usize = shape.iter().product();
        let mut data = Vec::with_capacity(n);
        for _ in 0..n {
            r.read_exact(&mut word)
                .map_err(|_| Error::Format("truncated values".into()))?;
            data.push(f64::from_le_bytes(word));
        }
        Tensor::new(&shape, data).map(Some)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::with_capacity(8 * (1 + self.rank() + self.len()));
        self.write_to(&mut buf).expect("writing to a Vec cannot fail");
        buf
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Tensor> {
        let bytes = std::fs::read(path)?;
        let mut cursor = bytes.as_slice();
        let t = Tensor::read_from(&mut cursor)?.ok_or_else(|| Error::Format("empty file".into()))?;
        if !cursor.is_empty() {
            return Err(Error::Format("trailing bytes after tensor".into()));
        }
        Ok(t)
    }
}

pub fn save_bundle(path: impl AsRef<Path>, tensors: &[Tensor]) -> Result<()> {
    let mut buf = Vec::new();
    for t in tensors {
        t.write_to(&mut buf)?;
    }
    std::fs::write(path, buf)?;
    Ok(())
}

pub fn load_bundle(path: impl AsRef<Path>) -> Result<Vec<Tensor>> {
    let bytes = std::fs::read(path)?;
    let mut cursor = bytes.as_slice();
    let mut out = Vec::new();
    while let Some(t) = Tensor::read_from(&mut cursor)? {
        out.push(t);
    }
    Ok(out)
}
