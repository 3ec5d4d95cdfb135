//! Flat binary tensor container: magic "OCLT", version u16, rank u16,
//! dims as u64 each, then little-endian f64 data. Checkpoint files
//! concatenate these blobs behind a text header.

use std::io::{Read, Write};

use super::{Tensor, TensorError};

pub const CONTAINER_MAGIC: &[u8; 4] = b"OCLT";
pub const CONTAINER_VERSION: u16 = 1;

pub fn write_tensor<W: Write>(w: &mut W, t: &Tensor) -> Result<(), TensorError> {
    w.write_all(CONTAINER_MAGIC)?;
    w.write_all(&CONTAINER_VERSION.to_le_bytes())?;
    let rank = t.shape().len() as u16;
    w.write_all(&rank.to_le_bytes())?;
    for dim in t.shape() {
        w.write_all(&(*dim as u64).to_le_bytes())?;
    }
    for v in t.data().iter() {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub fn read_tensor<R: Read>(r: &mut R) -> Result<Tensor, TensorError> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != CONTAINER_MAGIC {
        return Err(TensorError::Container(format!(
            "bad magic {:?}, expected {:?}",
            magic, CONTAINER_MAGIC
        )));
    }
    let mut buf2 = [0u8; 2];
    r.read_exact(&mut buf2)?;
    let version = u16::from_le_bytes(buf2);
    if version != CONTAINER_VERSION {
        return Err(TensorError::Container(format!(
            "unsupported version {version}"
        )));
    }
    r.read_exact(&mut buf2)?;
    let rank = u16::from_le_bytes(buf2) as usize;
    let mut shape = Vec::with_capacity(rank);
    let mut buf8 = [0u8; 8];
    for _ in 0..rank {
        r.read_exact(&mut buf8)?;
        shape.push(u64::from_le_bytes(buf8) as usize);
    }
    let numel: usize = shape.iter().product();
    let mut data = Vec::with_capacity(numel);
    for _ in 0..numel {
        r.read_exact(&mut buf8)?;
        data.push(f64::from_le_bytes(buf8));
    }
    Ok(Tensor::new(data, &shape))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_preserves_shape_and_bits() {
        let t = Tensor::new(vec![1.5, -2.25, 1e-300, f64::MIN_POSITIVE], &[2, 2]);
        let mut buf = Vec::new();
        write_tensor(&mut buf, &t).unwrap();
        let back = read_tensor(&mut buf.as_slice()).unwrap();
        assert_eq!(back.shape(), t.shape());
        for (a, b) in back.data().iter().zip(t.data().iter()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn scalar_round_trips_with_rank_zero() {
        let t = Tensor::scalar(3.25);
        let mut buf = Vec::new();
        write_tensor(&mut buf, &t).unwrap();
        // magic(4) + version(2) + rank(2) + no dims + one f64
        assert_eq!(buf.len(), 4 + 2 + 2 + 8);
        let back = read_tensor(&mut buf.as_slice()).unwrap();
        assert_eq!(back.shape(), &[] as &[usize]);
        assert_eq!(back.item(), 3.25);
    }

    #[test]
    fn rejects_corrupt_magic() {
        let t = Tensor::scalar(1.0);
        let mut buf = Vec::new();
        write_tensor(&mut buf, &t).unwrap();
        buf[0] = b'X';
        assert!(read_tensor(&mut buf.as_slice()).is_err());
    }
}
