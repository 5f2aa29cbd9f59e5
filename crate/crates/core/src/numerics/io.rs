//! Raw tensor files.
//!
//! Layout: 4 magic bytes, `u8` rank, `rank` little-endian `u32` dims, then the
//! row-major payload in little-endian. Magic `MNTT` carries an `f32` payload;
//! `MNTD` carries `f64` and is used where reload must be bit-exact.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{NumericsError, Scalar, Tensor};

pub const MAGIC_F32: &[u8; 4] = b"MNTT";
pub const MAGIC_F64: &[u8; 4] = b"MNTD";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Precision {
    #[default]
    F32,
    F64,
}

pub fn write_tensor<W: Write, F: Scalar>(
    w: &mut W,
    t: &Tensor<F>,
    precision: Precision,
) -> Result<(), NumericsError> {
    let rank = u8::try_from(t.rank()).map_err(|_| NumericsError::Format(format!("rank {} too large", t.rank())))?;
    w.write_all(match precision {
        Precision::F32 => MAGIC_F32,
        Precision::F64 => MAGIC_F64,
    })?;
    w.write_all(&[rank])?;
    for &d in t.shape() {
        let d = u32::try_from(d).map_err(|_| NumericsError::Format(format!("dimension {d} exceeds u32")))?;
        w.write_all(&d.to_le_bytes())?;
    }
    match precision {
        Precision::F32 => {
            for &x in t.data() {
                w.write_all(&(x.to_real() as f32).to_le_bytes())?;
            }
        }
        Precision::F64 => {
            for &x in t.data() {
                w.write_all(&x.to_real().to_le_bytes())?;
            }
        }
    }
    Ok(())
}

pub fn read_tensor<R: Read, F: Scalar>(r: &mut R) -> Result<Tensor<F>, NumericsError> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    let precision = match &magic {
        m if m == MAGIC_F32 => Precision::F32,
        m if m == MAGIC_F64 => Precision::F64,
        other => return Err(NumericsError::Format(format!("bad tensor magic {other:?}"))),
    };
    let mut rank = [0u8; 1];
    r.read_exact(&mut rank)?;
    let mut shape = Vec::with_capacity(rank[0] as usize);
    let mut buf4 = [0u8; 4];
    for _ in 0..rank[0] {
        r.read_exact(&mut buf4)?;
        shape.push(u32::from_le_bytes(buf4) as usize);
    }
    let len: usize = shape.iter().product();
    let mut data = Vec::with_capacity(len);
    match precision {
        Precision::F32 => {
            let mut bytes = vec![0u8; len * 4];
            r.read_exact(&mut bytes)?;
            for c in bytes.chunks_exact(4) {
                let v = f32::from_le_bytes([c[0], c[1], c[2], c[3]]);
                data.push(F::from_real(v as f64));
            }
        }
        Precision::F64 => {
            let mut bytes = vec![0u8; len * 8];
            r.read_exact(&mut bytes)?;
            for c in bytes.chunks_exact(8) {
                let v = f64::from_le_bytes(c.try_into().expect("chunk of 8"));
                data.push(F::from_real(v));
            }
        }
    }
    Tensor::new(shape, data)
}

pub fn save_tensor<F: Scalar>(path: &Path, t: &Tensor<F>, precision: Precision) -> Result<(), NumericsError> {
    let mut w = BufWriter::new(File::create(path)?);
    write_tensor(&mut w, t, precision)?;
    w.flush()?;
    Ok(())
}

pub fn load_tensor<F: Scalar>(path: &Path) -> Result<Tensor<F>, NumericsError> {
    let mut r = BufReader::new(File::open(path)?);
    read_tensor(&mut r)
}
