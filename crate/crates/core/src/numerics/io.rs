//! Tensor persistence.
//!
//! Binary layout: the magic bytes `DMX1`, a little-endian `u32` rank, one
//! little-endian `u64` per extent, then the row-major `f64` payload in
//! little-endian order.

use std::fs;
use std::io::Read;
use std::path::Path;

use crate::error::{Error, Result};

use super::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"DMX1";

pub fn encode(t: &Tensor) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + 8 * t.rank() + 8 * t.numel());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
    for &e in t.shape() {
        out.extend_from_slice(&(e as u64).to_le_bytes());
    }
    for &x in t.data() {
        out.extend_from_slice(&x.to_le_bytes());
    }
    out
}

pub fn decode(mut bytes: &[u8]) -> std::result::Result<Tensor, String> {
    let mut magic = [0u8; 4];
    bytes.read_exact(&mut magic).map_err(|_| "truncated header".to_string())?;
    if &magic != MAGIC {
        return Err(format!("bad magic {magic:?}"));
    }
    let mut b4 = [0u8; 4];
    bytes.read_exact(&mut b4).map_err(|_| "truncated rank".to_string())?;
    let rank = u32::from_le_bytes(b4) as usize;
    let mut shape = Vec::with_capacity(rank);
    let mut b8 = [0u8; 8];
    for _ in 0..rank {
        bytes.read_exact(&mut b8).map_err(|_| "truncated extents".to_string())?;
        shape.push(u64::from_le_bytes(b8) as usize);
    }
    let n: usize = shape.iter().product();
    if bytes.len() != 8 * n {
        return Err(format!("payload holds {} bytes, shape {shape:?} needs {}", bytes.len(), 8 * n));
    }
    let data = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
        .collect();
    Tensor::new(shape, data).map_err(|e| e.to_string())
}

pub fn save(t: &Tensor, path: &Path) -> Result<()> {
    fs::write(path, encode(t)).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<Tensor> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes).map_err(|d| Error::format(path, d))
}

/// Parses comma-separated rows of numbers into a matrix. Blank lines and
/// lines starting with `#` are skipped.
pub fn parse_csv(text: &str) -> std::result::Result<Tensor, String> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let mut rows = Vec::new();
    for (line, record) in reader.records().enumerate() {
        let record = record.map_err(|e| e.to_string())?;
        let row = record
            .iter()
            .map(|f| f.parse::<f64>().map_err(|e| format!("record {}: {f:?}: {e}", line + 1)))
            .collect::<std::result::Result<Vec<_>, _>>()?;
        rows.push(row);
    }
    Tensor::from_rows(&rows).map_err(|e| e.to_string())
}

pub fn load_csv(path: &Path) -> Result<Tensor> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_csv(&text).map_err(|d| Error::format(path, d))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_layout() {
        let t = Tensor::new(vec![2, 1], vec![1.5, -2.0]).unwrap();
        let b = encode(&t);
        assert_eq!(&b[..4], b"DMX1");
        assert_eq!(u32::from_le_bytes(b[4..8].try_into().unwrap()), 2);
        assert_eq!(u64::from_le_bytes(b[8..16].try_into().unwrap()), 2);
        assert_eq!(u64::from_le_bytes(b[16..24].try_into().unwrap()), 1);
        assert_eq!(f64::from_le_bytes(b[24..32].try_into().unwrap()), 1.5);
        assert_eq!(b.len(), 40);
    }

    #[test]
    fn rejects_bad_magic_and_truncation() {
        let mut b = encode(&Tensor::vector(vec![1.0, 2.0]));
        assert!(decode(&b[..b.len() - 1]).is_err());
        b[0] = b'X';
        assert!(decode(&b).is_err());
    }

    #[test]
    fn csv_fixture() {
        let t = parse_csv("# fixture\n1, 2, 3\n4,5,6\n").unwrap();
        assert_eq!(t.shape(), &[2, 3]);
        assert_eq!(t.data(), &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        assert!(parse_csv("1,2\n3\n").is_err());
        assert!(parse_csv("1,x\n").is_err());
    }

    proptest! {
        #[test]
        fn binary_roundtrip_is_bitwise(
            shape in prop::collection::vec(1usize..4, 1..4),
            seed in any::<u64>(),
        ) {
            let n: usize = shape.iter().product();
            let data: Vec<f64> = (0..n).map(|i| f64::from_bits(seed.wrapping_mul(i as u64 + 1) >> 2)).collect();
            let t = Tensor::new(shape, data).unwrap();
            let back = decode(&encode(&t)).unwrap();
            prop_assert_eq!(back.shape(), t.shape());
            for (a, b) in back.data().iter().zip(t.data()) {
                prop_assert_eq!(a.to_bits(), b.to_bits());
            }
        }
    }
}
