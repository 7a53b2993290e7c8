//! `DMCK1` parameter checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "DMCK1"
//! repeated until EOF:
//!   u32   name length
//!   [u8]  name (UTF-8)
//!   u32   rank
//!   u64   extent, `rank` times
//!   f64   payload, product(extents) values, row-major
//! ```

use std::io::{ErrorKind, Read, Write};
use std::path::Path;

use sha2::{Digest, Sha256};

use super::{Result, Tensor, TensorError};

pub const CHECKPOINT_MAGIC: &[u8; 5] = b"DMCK1";

/// Ordered list of named tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub entries: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, t: Tensor) {
        self.entries.push((name.into(), t));
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        write_checkpoint(&mut out, self).expect("writing to a Vec cannot fail");
        out
    }

    /// SHA-256 of the serialized bytes, hex encoded.
    pub fn digest(&self) -> String {
        hex::encode(Sha256::digest(self.to_bytes()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let f = std::fs::File::create(path)?;
        let mut w = std::io::BufWriter::new(f);
        write_checkpoint(&mut w, self)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = std::fs::File::open(path)?;
        read_checkpoint(std::io::BufReader::new(f))
    }
}

pub fn write_checkpoint<W: Write>(mut w: W, ck: &Checkpoint) -> Result<()> {
    w.write_all(CHECKPOINT_MAGIC)?;
    for (name, t) in &ck.entries {
        let bytes = name.as_bytes();
        w.write_all(&(bytes.len() as u32).to_le_bytes())?;
        w.write_all(bytes)?;
        w.write_all(&(t.rank() as u32).to_le_bytes())?;
        for &e in t.shape() {
            w.write_all(&(e as u64).to_le_bytes())?;
        }
        let mut buf = Vec::with_capacity(t.numel() * 8);
        for v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf)?;
    }
    Ok(())
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

pub fn read_checkpoint<R: Read>(mut r: R) -> Result<Checkpoint> {
    let mut magic = [0u8; 5];
    r.read_exact(&mut magic)
        .map_err(|_| TensorError::Format("missing magic".into()))?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(TensorError::Format(format!("bad magic {magic:?}")));
    }
    let mut ck = Checkpoint::new();
    loop {
        let mut lenb = [0u8; 4];
        match r.read(&mut lenb[..1]) {
            Ok(0) => break,
            Ok(_) => r.read_exact(&mut lenb[1..])?,
            Err(e) if e.kind() == ErrorKind::Interrupted => continue,
            Err(e) => return Err(e.into()),
        }
        let len = u32::from_le_bytes(lenb) as usize;
        let mut name = vec![0u8; len];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name).map_err(|e| TensorError::Format(e.to_string()))?;
        let rank = read_u32(&mut r)? as usize;
        if rank > 16 {
            return Err(TensorError::Format(format!("implausible rank {rank} for {name}")));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            let mut b = [0u8; 8];
            r.read_exact(&mut b)?;
            shape.push(u64::from_le_bytes(b) as usize);
        }
        let n: usize = shape.iter().product();
        let mut raw = vec![0u8; n * 8];
        r.read_exact(&mut raw)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
            .collect();
        ck.push(name, Tensor::new(shape, data)?);
    }
    Ok(ck)
}
