//! Self-describing little-endian checkpoint:
//! `"RLAB"`, format version (u32), architecture hash (u64), then per tensor
//! name length (u32), name bytes, rank (u32), dims (u32 each), f32 payload.
//! Tensors run to end of file.

use std::fs::File;
use std::io::{BufReader, BufWriter, ErrorKind, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{ModelWeights, LAYOUT, T_TRAIN};
use crate::tensor::DenseArray;

const MAGIC: &[u8; 4] = b"RLAB";
const VERSION: u32 = 1;

/// FNV-1a over a canonical description of the tensor layout.
pub fn architecture_hash() -> u64 {
    let mut desc = format!("toy-denoiser;T={T_TRAIN};");
    for (name, dims) in LAYOUT.iter() {
        desc.push_str(&format!("{name}:{dims:?};"));
    }
    desc.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3))
}

pub fn write_checkpoint<W: Write>(w: &ModelWeights, out: &mut W) -> Result<()> {
    out.write_all(MAGIC)?;
    out.write_all(&VERSION.to_le_bytes())?;
    out.write_all(&architecture_hash().to_le_bytes())?;
    for (name, t) in ModelWeights::names().zip(w.tensors()) {
        out.write_all(&(name.len() as u32).to_le_bytes())?;
        out.write_all(name.as_bytes())?;
        out.write_all(&(t.dims().len() as u32).to_le_bytes())?;
        for &d in t.dims() {
            out.write_all(&(d as u32).to_le_bytes())?;
        }
        for v in t.data() {
            out.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

pub fn read_checkpoint<R: Read>(input: &mut R) -> Result<ModelWeights> {
    let mut magic = [0u8; 4];
    input.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let version = read_u32(input)?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let mut hash = [0u8; 8];
    input.read_exact(&mut hash)?;
    if u64::from_le_bytes(hash) != architecture_hash() {
        return Err(Error::Checkpoint("architecture hash mismatch".into()));
    }
    let mut tensors = Vec::new();
    loop {
        let name_len = match read_u32(input) {
            Ok(n) => n as usize,
            Err(Error::Io(e)) if e.kind() == ErrorKind::UnexpectedEof => break,
            Err(e) => return Err(e),
        };
        let mut name = vec![0u8; name_len];
        input.read_exact(&mut name)?;
        let name = String::from_utf8(name).map_err(|_| Error::Checkpoint("tensor name not utf-8".into()))?;
        let expected = LAYOUT.get(tensors.len()).map(|(n, _)| *n);
        if expected != Some(name.as_str()) {
            return Err(Error::Checkpoint(format!("unexpected tensor {name:?}, wanted {expected:?}")));
        }
        let rank = read_u32(input)? as usize;
        if rank == 0 || rank > 4 {
            return Err(Error::Checkpoint(format!("{name}: rank {rank}")));
        }
        let dims = (0..rank).map(|_| read_u32(input).map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let numel: usize = dims.iter().product();
        let mut raw = vec![0u8; numel * 4];
        input.read_exact(&mut raw)?;
        let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
        tensors.push(DenseArray::from_vec(&dims, data)?);
    }
    let w = ModelWeights::from_tensors(tensors)?;
    if !w.is_finite() {
        return Err(Error::Checkpoint("non-finite weights".into()));
    }
    Ok(w)
}

pub fn save_checkpoint(w: &ModelWeights, path: &Path) -> Result<()> {
    let mut f = BufWriter::new(File::create(path)?);
    write_checkpoint(w, &mut f)?;
    f.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<ModelWeights> {
    read_checkpoint(&mut BufReader::new(File::open(path)?))
}
