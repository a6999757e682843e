//! Flat binary checkpoints.
//!
//! Layout, all integers and floats little-endian:
//!
//! ```text
//! "NGRD"  u32 version
//! repeated until EOF:
//!   u32 name_len, name (UTF-8), u32 ndim, ndim x u64 dims, prod(dims) x f64 values (row-major)
//! ```

use std::io::{self, Read, Write};

use super::MlpModel;
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"NGRD";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

fn io_err(e: io::Error) -> Error {
    Error::Checkpoint(e.to_string())
}

pub fn write_checkpoint<W: Write>(model: &MlpModel, mut w: W) -> Result<()> {
    w.write_all(CHECKPOINT_MAGIC).map_err(io_err)?;
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes()).map_err(io_err)?;
    for (name, shape, values) in model.named_params() {
        w.write_all(&(name.len() as u32).to_le_bytes()).map_err(io_err)?;
        w.write_all(name.as_bytes()).map_err(io_err)?;
        w.write_all(&(shape.len() as u32).to_le_bytes()).map_err(io_err)?;
        for d in &shape {
            w.write_all(&(*d as u64).to_le_bytes()).map_err(io_err)?;
        }
        for v in values {
            w.write_all(&v.to_le_bytes()).map_err(io_err)?;
        }
    }
    w.flush().map_err(io_err)
}

fn read_exact<R: Read, const N: usize>(r: &mut R) -> Result<[u8; N]> {
    let mut buf = [0u8; N];
    r.read_exact(&mut buf).map_err(|e| match e.kind() {
        io::ErrorKind::UnexpectedEof => Error::Checkpoint("truncated checkpoint".into()),
        _ => io_err(e),
    })?;
    Ok(buf)
}

pub fn read_checkpoint<R: Read>(mut r: R) -> Result<Vec<NamedTensor>> {
    let magic: [u8; 4] = read_exact(&mut r)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(Error::Checkpoint(format!("bad magic {magic:?}")));
    }
    let version = u32::from_le_bytes(read_exact(&mut r)?);
    if version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let mut tensors = Vec::new();
    loop {
        // A clean EOF is only allowed between tensors.
        let mut first = [0u8; 1];
        if r.read(&mut first).map_err(io_err)? == 0 {
            break;
        }
        let rest: [u8; 3] = read_exact(&mut r)?;
        let name_len = u32::from_le_bytes([first[0], rest[0], rest[1], rest[2]]) as usize;
        let mut name = vec![0u8; name_len];
        r.read_exact(&mut name).map_err(|_| Error::Checkpoint("truncated name".into()))?;
        let name = String::from_utf8(name).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let ndim = u32::from_le_bytes(read_exact(&mut r)?) as usize;
        let shape = (0..ndim)
            .map(|_| read_exact::<_, 8>(&mut r).map(|b| u64::from_le_bytes(b) as usize))
            .collect::<Result<Vec<_>>>()?;
        let count: usize = shape.iter().product();
        let values =
            (0..count).map(|_| read_exact::<_, 8>(&mut r).map(f64::from_le_bytes)).collect::<Result<Vec<_>>>()?;
        tensors.push(NamedTensor { name, shape, values });
    }
    Ok(tensors)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::normlayers::NormVariant;
    use crate::numcore::Rng;

    #[test]
    fn round_trip_restores_model() {
        let model = MlpModel::new(&mut Rng::seeded(3), 4, &[5, 3], 2, NormVariant::LayerNorm, 1e-5, None);
        let mut buf = Vec::new();
        write_checkpoint(&model, &mut buf).unwrap();
        assert_eq!(&buf[..4], b"NGRD");
        assert_eq!(u32::from_le_bytes(buf[4..8].try_into().unwrap()), 1);

        let tensors = read_checkpoint(buf.as_slice()).unwrap();
        assert_eq!(tensors[0].name, "layers.0.weight");
        assert_eq!(tensors[0].shape, vec![5, 4]);
        assert_eq!(tensors.len(), 2 * 4 + 2);

        let mut other = MlpModel::new(&mut Rng::seeded(99), 4, &[5, 3], 2, NormVariant::LayerNorm, 1e-5, None);
        assert_ne!(other, model);
        other.load_tensors(&tensors).unwrap();
        assert_eq!(other, model);
    }

    #[test]
    fn rejects_corruption() {
        let model = MlpModel::new(&mut Rng::seeded(3), 2, &[2], 2, NormVariant::NoNorm, 0.0, None);
        let mut buf = Vec::new();
        write_checkpoint(&model, &mut buf).unwrap();
        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(read_checkpoint(bad.as_slice()).is_err());
        assert!(read_checkpoint(&buf[..buf.len() - 3]).is_err());

        let mut wrong = MlpModel::new(&mut Rng::seeded(3), 2, &[3], 2, NormVariant::NoNorm, 0.0, None);
        assert!(wrong.load_tensors(&read_checkpoint(buf.as_slice()).unwrap()).is_err());
    }
}
