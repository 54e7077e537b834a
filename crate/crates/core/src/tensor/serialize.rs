//! `SQT1` tensor files: magic, `u32` rank, `u64` dims, then `f32` payload,
//! all little-endian.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{Precision, Tensor};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"SQT1";

const MAX_RANK: u32 = 16;

pub fn write_tensor<W: Write>(mut w: W, t: &Tensor) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&(t.rank() as u32).to_le_bytes())?;
    for &d in t.shape() {
        w.write_all(&(d as u64).to_le_bytes())?;
    }
    for &x in t.data() {
        w.write_all(&(x as f32).to_le_bytes())?;
    }
    Ok(())
}

/// Reads one tensor. The result carries [`Precision::F32`] since that is
/// what the payload holds.
pub fn read_tensor<R: Read>(mut r: R, origin: &Path) -> Result<Tensor> {
    let bad = |reason: &str| Error::Format {
        path: origin.to_path_buf(),
        reason: reason.to_string(),
    };
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(|_| bad("truncated header"))?;
    if &magic != MAGIC {
        return Err(bad("bad magic"));
    }
    let mut b4 = [0u8; 4];
    r.read_exact(&mut b4).map_err(|_| bad("truncated rank"))?;
    let rank = u32::from_le_bytes(b4);
    if rank > MAX_RANK {
        return Err(bad("rank too large"));
    }
    let mut shape = Vec::with_capacity(rank as usize);
    let mut b8 = [0u8; 8];
    for _ in 0..rank {
        r.read_exact(&mut b8).map_err(|_| bad("truncated dims"))?;
        shape.push(usize::try_from(u64::from_le_bytes(b8)).map_err(|_| bad("dimension overflow"))?);
    }
    let n = shape
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| bad("element count overflow"))?;
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    if bytes.len() != n * 4 {
        return Err(bad(&format!("payload holds {} bytes, expected {}", bytes.len(), n * 4)));
    }
    let data = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    Ok(Tensor::new(&shape, data)?.with_precision(Precision::F32))
}

pub fn write_tensor_file(path: &Path, t: &Tensor) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_tensor(&mut w, t)?;
    w.flush()?;
    Ok(())
}

pub fn read_tensor_file(path: &Path) -> Result<Tensor> {
    read_tensor(BufReader::new(File::open(path)?), path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_layout_is_bit_exact() {
        let t = Tensor::new(&[2, 1], vec![1.0, -0.5]).unwrap();
        let mut buf = Vec::new();
        write_tensor(&mut buf, &t).unwrap();
        let mut expect = b"SQT1".to_vec();
        expect.extend(2u32.to_le_bytes());
        expect.extend(2u64.to_le_bytes());
        expect.extend(1u64.to_le_bytes());
        expect.extend(1.0f32.to_le_bytes());
        expect.extend((-0.5f32).to_le_bytes());
        assert_eq!(buf, expect);
    }

    #[test]
    fn rejects_bad_magic_and_truncation() {
        let p = Path::new("mem");
        assert!(read_tensor(&b"SQT0\0\0\0\0"[..], p).is_err());
        let t = Tensor::ones(&[3]);
        let mut buf = Vec::new();
        write_tensor(&mut buf, &t).unwrap();
        buf.pop();
        assert!(matches!(read_tensor(&buf[..], p), Err(Error::Format { .. })));
    }

    proptest! {
        #[test]
        fn f32_tensors_round_trip_exactly(
            dims in proptest::collection::vec(1usize..4, 0..4),
            seed in any::<u64>(),
        ) {
            let n: usize = dims.iter().product();
            let data: Vec<f64> = (0..n).map(|i| ((i as u64 ^ seed) as f64 * 1e-3).sin()).collect();
            let t = Tensor::new(&dims, data).unwrap().with_precision(Precision::F32);
            let mut buf = Vec::new();
            write_tensor(&mut buf, &t).unwrap();
            let back = read_tensor(&buf[..], Path::new("mem")).unwrap();
            prop_assert_eq!(back.shape(), t.shape());
            prop_assert_eq!(back.data(), t.data());
        }
    }
}
