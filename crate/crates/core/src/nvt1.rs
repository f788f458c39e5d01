//! NVT1 binary tensor container.
//!
//! Layout: magic bytes `N V T 1`, one dtype byte (0 = f32 LE, 1 = f64 LE),
//! one rank byte, `rank` 8-byte little-endian unsigned extents, then the
//! row-major payload. Every clip, latent, flow stack, and checkpoint tensor
//! in this project uses this container.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::Tensor;

const MAGIC: [u8; 4] = *b"NVT1";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dtype {
    F32 = 0,
    F64 = 1,
}

impl Dtype {
    fn from_code(code: u8) -> Result<Self> {
        match code {
            0 => Ok(Dtype::F32),
            1 => Ok(Dtype::F64),
            other => Err(Error::Container(format!("unknown dtype code {other}"))),
        }
    }
}

pub fn write(w: &mut impl Write, tensor: &Tensor, dtype: Dtype) -> Result<()> {
    w.write_all(&MAGIC)?;
    w.write_all(&[dtype as u8])?;
    let rank = tensor.rank();
    if rank > u8::MAX as usize {
        return Err(Error::Container(format!("rank {rank} exceeds u8")));
    }
    w.write_all(&[rank as u8])?;
    for &extent in tensor.shape() {
        w.write_all(&(extent as u64).to_le_bytes())?;
    }
    match dtype {
        Dtype::F32 => {
            for &v in tensor.data() {
                w.write_all(&(v as f32).to_le_bytes())?;
            }
        }
        Dtype::F64 => {
            for &v in tensor.data() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
    }
    Ok(())
}

pub fn read(r: &mut impl Read) -> Result<Tensor> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if magic != MAGIC {
        return Err(Error::Container(format!("bad magic {magic:?}")));
    }
    let mut header = [0u8; 2];
    r.read_exact(&mut header)?;
    let dtype = Dtype::from_code(header[0])?;
    let rank = header[1] as usize;
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        let mut buf = [0u8; 8];
        r.read_exact(&mut buf)?;
        let extent = u64::from_le_bytes(buf);
        shape.push(usize::try_from(extent).map_err(|_| {
            Error::Container(format!("extent {extent} does not fit in usize"))
        })?);
    }
    let len = shape
        .iter()
        .try_fold(1usize, |acc, &e| acc.checked_mul(e))
        .ok_or_else(|| Error::Container("shape product overflows".into()))?;
    let mut data = Vec::with_capacity(len);
    match dtype {
        Dtype::F32 => {
            let mut buf = [0u8; 4];
            for _ in 0..len {
                r.read_exact(&mut buf)?;
                data.push(f32::from_le_bytes(buf) as f64);
            }
        }
        Dtype::F64 => {
            let mut buf = [0u8; 8];
            for _ in 0..len {
                r.read_exact(&mut buf)?;
                data.push(f64::from_le_bytes(buf));
            }
        }
    }
    // A trailing-byte check keeps truncated/overlong files from passing.
    let mut extra = [0u8; 1];
    if r.read(&mut extra)? != 0 {
        return Err(Error::Container("trailing bytes after payload".into()));
    }
    Tensor::new(shape, data)
}

pub fn write_file(path: impl AsRef<Path>, tensor: &Tensor, dtype: Dtype) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write(&mut w, tensor, dtype)?;
    w.flush()?;
    Ok(())
}

pub fn read_file(path: impl AsRef<Path>) -> Result<Tensor> {
    let mut r = BufReader::new(File::open(path)?);
    read(&mut r)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn rejects_bad_magic() {
        let mut bytes = Vec::new();
        write(&mut bytes, &Tensor::zeros(vec![2]), Dtype::F64).unwrap();
        bytes[0] = b'X';
        assert!(read(&mut bytes.as_slice()).is_err());
    }

    #[test]
    fn rejects_truncation_and_trailing_bytes() {
        let mut bytes = Vec::new();
        write(&mut bytes, &Tensor::zeros(vec![3, 2]), Dtype::F32).unwrap();
        let truncated = &bytes[..bytes.len() - 1];
        assert!(read(&mut &truncated[..]).is_err());
        bytes.push(0);
        assert!(read(&mut bytes.as_slice()).is_err());
    }

    #[test]
    fn header_layout_is_exact() {
        let t = Tensor::new(vec![1, 2], vec![0.5, -0.5]).unwrap();
        let mut bytes = Vec::new();
        write(&mut bytes, &t, Dtype::F64).unwrap();
        assert_eq!(&bytes[..4], b"NVT1");
        assert_eq!(bytes[4], 1); // f64
        assert_eq!(bytes[5], 2); // rank
        assert_eq!(&bytes[6..14], &1u64.to_le_bytes());
        assert_eq!(&bytes[14..22], &2u64.to_le_bytes());
        assert_eq!(bytes.len(), 22 + 16);
    }

    proptest! {
        #[test]
        fn f64_write_read_write_is_bitwise(seed in 0u64..500, rank in 1usize..4) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let shape: Vec<usize> = (0..rank).map(|_| rng.gen_range(1usize..5)).collect();
            let len: usize = shape.iter().product();
            let t = Tensor::new(shape, (0..len).map(|_| rng.gen_range(-1e6..1e6)).collect()).unwrap();

            let mut first = Vec::new();
            write(&mut first, &t, Dtype::F64).unwrap();
            let back = read(&mut first.as_slice()).unwrap();
            let mut second = Vec::new();
            write(&mut second, &back, Dtype::F64).unwrap();
            prop_assert_eq!(first, second);
            prop_assert_eq!(back, t);
        }

        #[test]
        fn f32_write_read_write_is_bitwise(seed in 0u64..200) {
            // f32 write quantizes once; after that the bytes are stable.
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let t = Tensor::new(vec![3, 3], (0..9).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
            let mut first = Vec::new();
            write(&mut first, &t, Dtype::F32).unwrap();
            let back = read(&mut first.as_slice()).unwrap();
            let mut second = Vec::new();
            write(&mut second, &back, Dtype::F32).unwrap();
            prop_assert_eq!(first, second);
        }
    }
}
