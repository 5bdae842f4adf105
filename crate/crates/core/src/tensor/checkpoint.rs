//! `TSCK` checkpoint container.
//!
//! Layout (little endian): magic `TSCK`, version `u32`, entry count `u32`,
//! then per entry: name length `u32`, UTF-8 name, rank `u32`, `rank` dims as
//! `u32`, and the `f32` payload.

use std::io::{Read, Write};

use super::Tensor;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"TSCK";
pub const VERSION: u32 = 1;

pub(crate) fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn to_u32(x: usize, what: &str) -> Result<u32> {
    u32::try_from(x).map_err(|_| Error::Format(format!("{} {} does not fit in u32", what, x)))
}

pub fn write_checkpoint<W: Write>(mut w: W, entries: &[(String, Tensor<f32>)]) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&to_u32(entries.len(), "entry count")?.to_le_bytes())?;
    for (name, t) in entries {
        w.write_all(&to_u32(name.len(), "name length")?.to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&to_u32(t.rank(), "rank")?.to_le_bytes())?;
        for &d in t.shape() {
            w.write_all(&to_u32(d, "dim")?.to_le_bytes())?;
        }
        let mut payload = Vec::with_capacity(t.numel() * 4);
        for &x in t.data() {
            payload.extend_from_slice(&x.to_le_bytes());
        }
        w.write_all(&payload)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_checkpoint<R: Read>(mut r: R) -> Result<Vec<(String, Tensor<f32>)>> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Format(format!("bad checkpoint magic {:?}", magic)));
    }
    let version = read_u32(&mut r)?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {}", version)));
    }
    let count = read_u32(&mut r)? as usize;
    let mut entries = Vec::with_capacity(count);
    for _ in 0..count {
        let len = read_u32(&mut r)? as usize;
        let mut name = vec![0u8; len];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name)
            .map_err(|e| Error::Format(format!("checkpoint name is not UTF-8: {}", e)))?;
        let rank = read_u32(&mut r)? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(read_u32(&mut r)? as usize);
        }
        let n: usize = shape.iter().product();
        let mut raw = vec![0u8; n * 4];
        r.read_exact(&mut raw)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        entries.push((name, Tensor::new(&shape, data)?));
    }
    Ok(entries)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_layout() {
        let t = Tensor::new(&[2], vec![1.0f32, -2.5]).unwrap();
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, &[("a".to_string(), t)]).unwrap();
        assert_eq!(&buf[..4], b"TSCK");
        assert_eq!(&buf[4..8], &1u32.to_le_bytes());
        assert_eq!(&buf[8..12], &1u32.to_le_bytes());
        assert_eq!(&buf[12..16], &1u32.to_le_bytes());
        assert_eq!(buf[16], b'a');
        assert_eq!(&buf[17..21], &1u32.to_le_bytes());
        assert_eq!(&buf[21..25], &2u32.to_le_bytes());
        assert_eq!(&buf[25..29], &1.0f32.to_le_bytes());
        assert_eq!(buf.len(), 33);
    }

    #[test]
    fn rejects_bad_magic() {
        let err = read_checkpoint(&b"XXXX\x01\0\0\0\0\0\0\0"[..]).unwrap_err();
        assert!(matches!(err, Error::Format(_)));
    }

    proptest! {
        #[test]
        fn round_trip_is_bit_exact(
            dims in proptest::collection::vec(1usize..4, 0..4),
            seed in any::<u32>(),
        ) {
            let n: usize = dims.iter().product();
            // include odd bit patterns: negative zero, subnormals, large values
            let data: Vec<f32> = (0..n)
                .map(|i| f32::from_bits(seed.wrapping_mul(2654435761).wrapping_add(i as u32 * 40503) & 0xff7f_ffff))
                .collect();
            let t = Tensor::new(&dims, data).unwrap();
            let mut buf = Vec::new();
            write_checkpoint(&mut buf, &[("layer.0.w".into(), t.clone())]).unwrap();
            let back = read_checkpoint(&buf[..]).unwrap();
            prop_assert_eq!(back.len(), 1);
            prop_assert_eq!(&back[0].0, "layer.0.w");
            let bits_a: Vec<u32> = t.data().iter().map(|x| x.to_bits()).collect();
            let bits_b: Vec<u32> = back[0].1.data().iter().map(|x| x.to_bits()).collect();
            prop_assert_eq!(bits_a, bits_b);
            prop_assert_eq!(back[0].1.shape(), t.shape());
        }
    }
}
