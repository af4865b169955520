//! Little-endian binary tensor records and the named-tensor container used
//! by checkpoints.
//!
//! Tensor record: `"MDTN"`, `u32` rank, `rank × u64` extents, `f32` payload.
//! Container: `"MDCK"`, `u32` version, `u32` count, then per entry a `u32`
//! name length, UTF-8 name, `u8` trainable flag and a tensor record.

use std::io::{self, Read, Write};

use super::{Scalar, Tensor};
use crate::params::ParamStore;

pub const TENSOR_MAGIC: &[u8; 4] = b"MDTN";
pub const CONTAINER_MAGIC: &[u8; 4] = b"MDCK";
pub const CONTAINER_VERSION: u32 = 1;

fn invalid(msg: impl Into<String>) -> io::Error {
    io::Error::new(io::ErrorKind::InvalidData, msg.into())
}

fn read_u32(r: &mut impl Read) -> io::Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut impl Read) -> io::Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

pub fn write_tensor<T: Scalar>(w: &mut impl Write, t: &Tensor<T>) -> io::Result<()> {
    w.write_all(TENSOR_MAGIC)?;
    w.write_all(&(t.rank() as u32).to_le_bytes())?;
    for &d in t.shape() {
        w.write_all(&(d as u64).to_le_bytes())?;
    }
    let mut buf = Vec::with_capacity(t.len() * 4);
    for v in t.data() {
        buf.extend_from_slice(&v.to_f32().unwrap_or(f32::NAN).to_le_bytes());
    }
    w.write_all(&buf)
}

pub fn read_tensor<T: Scalar>(r: &mut impl Read) -> io::Result<Tensor<T>> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != TENSOR_MAGIC {
        return Err(invalid("bad tensor magic"));
    }
    let rank = read_u32(r)? as usize;
    if rank == 0 || rank > 8 {
        return Err(invalid(format!("unsupported tensor rank {rank}")));
    }
    let shape = (0..rank)
        .map(|_| read_u64(r).map(|d| d as usize))
        .collect::<io::Result<Vec<_>>>()?;
    let n = shape
        .iter()
        .try_fold(1usize, |a, &d| a.checked_mul(d))
        .filter(|&n| n <= 1 << 32)
        .ok_or_else(|| invalid("tensor too large"))?;
    let mut raw = vec![0u8; n * 4];
    r.read_exact(&mut raw)?;
    let data = raw
        .chunks_exact(4)
        .map(|c| T::from_f32(f32::from_le_bytes([c[0], c[1], c[2], c[3]])).unwrap())
        .collect();
    Tensor::new(&shape, data).map_err(|e| invalid(e.to_string()))
}

pub fn write_container<T: Scalar>(w: &mut impl Write, store: &ParamStore<T>) -> io::Result<()> {
    w.write_all(CONTAINER_MAGIC)?;
    w.write_all(&CONTAINER_VERSION.to_le_bytes())?;
    w.write_all(&(store.len() as u32).to_le_bytes())?;
    for (name, p) in store.iter() {
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&[p.trainable as u8])?;
        write_tensor(w, &p.value)?;
    }
    Ok(())
}

pub fn read_container<T: Scalar>(r: &mut impl Read) -> io::Result<ParamStore<T>> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != CONTAINER_MAGIC {
        return Err(invalid("bad container magic"));
    }
    let version = read_u32(r)?;
    if version != CONTAINER_VERSION {
        return Err(invalid(format!("unsupported container version {version}")));
    }
    let count = read_u32(r)?;
    let mut store = ParamStore::new();
    for _ in 0..count {
        let len = read_u32(r)? as usize;
        if len > 4096 {
            return Err(invalid("parameter name too long"));
        }
        let mut name = vec![0u8; len];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name).map_err(|_| invalid("parameter name is not UTF-8"))?;
        let mut flag = [0u8; 1];
        r.read_exact(&mut flag)?;
        let t = read_tensor(r)?;
        store.insert(name, t, flag[0] != 0);
    }
    Ok(store)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tensor_record_layout() {
        let t = Tensor::<f32>::new(&[2, 1], vec![1.0, -2.5]).unwrap();
        let mut buf = Vec::new();
        write_tensor(&mut buf, &t).unwrap();
        assert_eq!(&buf[..4], b"MDTN");
        assert_eq!(&buf[4..8], &2u32.to_le_bytes());
        assert_eq!(&buf[8..16], &2u64.to_le_bytes());
        assert_eq!(&buf[16..24], &1u64.to_le_bytes());
        assert_eq!(&buf[24..28], &1.0f32.to_le_bytes());
        assert_eq!(&buf[28..32], &(-2.5f32).to_le_bytes());
        assert_eq!(buf.len(), 32);
        let back: Tensor<f32> = read_tensor(&mut buf.as_slice()).unwrap();
        assert_eq!(back, t);
    }

    #[test]
    fn rejects_bad_magic() {
        let buf = b"XXXX\x01\x00\x00\x00".to_vec();
        assert!(read_tensor::<f32>(&mut buf.as_slice()).is_err());
    }

    #[test]
    fn container_round_trip_keeps_order_and_flags() {
        let mut s = ParamStore::<f32>::new();
        s.insert("b", Tensor::new(&[3], vec![1.0, 2.0, 3.0]).unwrap(), true);
        s.insert("a", Tensor::new(&[1, 2], vec![4.0, 5.0]).unwrap(), false);
        let mut buf = Vec::new();
        write_container(&mut buf, &s).unwrap();
        let back: ParamStore<f32> = read_container(&mut buf.as_slice()).unwrap();
        let names: Vec<_> = back.names().collect();
        assert_eq!(names, ["b", "a"]);
        assert!(back.is_trainable("b"));
        assert!(!back.is_trainable("a"));
        assert_eq!(back.get("a"), s.get("a"));
    }
}
