//! Binary parameter container.
//!
//! Layout (all integers little-endian):
//! `u32 count`, then per parameter `u32 name_len`, UTF-8 name bytes,
//! `u32 ndim`, `ndim x u64` dims, `numel x f64` values.
//! Callers prepend their own magic and format version.

use std::io::{Read, Write};

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use crate::error::{Result, TensorError};
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const FORMAT_VERSION: u32 = 1;

const MAX_NAME: u32 = 4096;
const MAX_NDIM: u32 = 8;
const MAX_NUMEL: u64 = 1 << 28;

pub fn write_params(w: &mut impl Write, store: &ParamStore) -> Result<()> {
    w.write_u32::<LittleEndian>(store.len() as u32)?;
    for (name, t) in store.iter() {
        w.write_u32::<LittleEndian>(name.len() as u32)?;
        w.write_all(name.as_bytes())?;
        w.write_u32::<LittleEndian>(t.shape().len() as u32)?;
        for &d in t.shape() {
            w.write_u64::<LittleEndian>(d as u64)?;
        }
        for &v in t.data() {
            w.write_f64::<LittleEndian>(v)?;
        }
    }
    Ok(())
}

fn truncated(e: std::io::Error) -> TensorError {
    if e.kind() == std::io::ErrorKind::UnexpectedEof {
        TensorError::Format("truncated parameter block".into())
    } else {
        TensorError::Io(e)
    }
}

pub fn read_params(r: &mut impl Read) -> Result<ParamStore> {
    let count = r.read_u32::<LittleEndian>().map_err(truncated)?;
    let mut store = ParamStore::new();
    for _ in 0..count {
        let len = r.read_u32::<LittleEndian>().map_err(truncated)?;
        if len > MAX_NAME {
            return Err(TensorError::Format(format!("parameter name length {len} too large")));
        }
        let mut name = vec![0u8; len as usize];
        r.read_exact(&mut name).map_err(truncated)?;
        let name = String::from_utf8(name)
            .map_err(|_| TensorError::Format("parameter name is not UTF-8".into()))?;
        let ndim = r.read_u32::<LittleEndian>().map_err(truncated)?;
        if ndim == 0 || ndim > MAX_NDIM {
            return Err(TensorError::Format(format!("`{name}`: bad rank {ndim}")));
        }
        let mut shape = Vec::with_capacity(ndim as usize);
        let mut n: u64 = 1;
        for _ in 0..ndim {
            let d = r.read_u64::<LittleEndian>().map_err(truncated)?;
            n = n.saturating_mul(d);
            shape.push(d as usize);
        }
        if n == 0 || n > MAX_NUMEL {
            return Err(TensorError::Format(format!("`{name}`: bad shape {shape:?}")));
        }
        let mut data = vec![0.0; n as usize];
        r.read_f64_into::<LittleEndian>(&mut data).map_err(truncated)?;
        if store.get(&name).is_some() {
            return Err(TensorError::Format(format!("duplicate parameter `{name}`")));
        }
        store.insert(name, Tensor::new(&shape, data)?);
    }
    Ok(store)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_bit_exact() {
        let mut store = ParamStore::new();
        store.insert("x.w", Tensor::new(&[2, 2], vec![1.5, -0.0, f64::MIN_POSITIVE, 1e300]).unwrap());
        store.insert("x.b", Tensor::scalar(std::f64::consts::PI));
        let mut buf = Vec::new();
        write_params(&mut buf, &store).unwrap();
        let back = read_params(&mut buf.as_slice()).unwrap();
        for (name, t) in store.iter() {
            let u = back.get(name).unwrap();
            assert_eq!(t.shape(), u.shape());
            let a: Vec<u64> = t.data().iter().map(|v| v.to_bits()).collect();
            let b: Vec<u64> = u.data().iter().map(|v| v.to_bits()).collect();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn truncation_is_a_format_error() {
        let mut store = ParamStore::new();
        store.insert("w", Tensor::zeros(&[4]));
        let mut buf = Vec::new();
        write_params(&mut buf, &store).unwrap();
        buf.truncate(buf.len() - 3);
        assert!(matches!(read_params(&mut buf.as_slice()), Err(TensorError::Format(_))));
    }
}
