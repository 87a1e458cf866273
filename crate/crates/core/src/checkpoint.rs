//! Binary model checkpoints.
//!
//! ```text
//! "TTSN" | version u32 |
//!   per parameter, until end of file:
//!     name_len u32 | name bytes (UTF-8) | rank u32 | rank × dim u32 | numel × f64
//! ```
//!
//! All integers and floats are little-endian. Parameters are written in
//! store order.

use std::fs;
use std::path::Path;

use crate::binfmt::{put_f64s, put_u32, to_u32, ByteReader};
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"TTSN";
pub const VERSION: u32 = 1;

pub fn encode(store: &ParamStore) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    put_u32(&mut out, VERSION);
    for p in store.iter() {
        put_u32(&mut out, to_u32(p.name.len(), "name length")?);
        out.extend_from_slice(p.name.as_bytes());
        put_u32(&mut out, to_u32(p.value.rank(), "rank")?);
        for &d in p.value.shape() {
            put_u32(&mut out, to_u32(d, "dimension")?);
        }
        put_f64s(&mut out, p.value.data());
    }
    Ok(out)
}

pub fn decode(bytes: &[u8]) -> Result<ParamStore> {
    let mut r = ByteReader::new(bytes);
    r.header(MAGIC, VERSION)?;
    let mut store = ParamStore::new();
    while !r.is_empty() {
        let len = r.u32("name length")? as usize;
        let name = std::str::from_utf8(r.take(len, "parameter name")?)
            .map_err(|_| Error::Malformed("parameter name is not UTF-8".into()))?
            .to_owned();
        let rank = r.u32("rank")? as usize;
        let mut shape = Vec::with_capacity(rank.min(8));
        for _ in 0..rank {
            shape.push(r.u32("shape")? as usize);
        }
        let numel = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| Error::Malformed(format!("shape {shape:?} overflows")))?;
        let data = r.f64s(numel, "parameter data")?;
        let value = Tensor::new(shape, data).map_err(|e| Error::Malformed(e.to_string()))?;
        store
            .insert(name, value)
            .map_err(|e| Error::Malformed(e.to_string()))?;
    }
    Ok(store)
}

pub fn save(path: impl AsRef<Path>, store: &ParamStore) -> Result<()> {
    fs::write(path, encode(store)?)?;
    Ok(())
}

pub fn load(path: impl AsRef<Path>) -> Result<ParamStore> {
    decode(&fs::read(path)?)
}

/// Copies checkpoint values into `target`, which must hold exactly the same names and shapes.
pub fn restore_into(target: &mut ParamStore, loaded: &ParamStore) -> Result<()> {
    if target.len() != loaded.len() {
        return Err(Error::Malformed(format!(
            "checkpoint has {} parameters, model expects {}",
            loaded.len(),
            target.len()
        )));
    }
    for p in loaded.iter() {
        if !target.contains(&p.name) {
            return Err(Error::Malformed(format!("unexpected parameter {:?}", p.name)));
        }
        target.set(&p.name, p.value.clone())?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testutil::random_tensor;

    fn sample() -> ParamStore {
        let mut s = ParamStore::new();
        s.insert("a.weight", random_tensor(&[2, 3, 1, 1], 1)).unwrap();
        s.insert("λ", Tensor::scalar(0.125)).unwrap();
        s.insert("pe", random_tensor(&[4, 6], 2)).unwrap();
        s
    }

    fn bitwise_equal(a: &ParamStore, b: &ParamStore) -> bool {
        a.len() == b.len()
            && a.iter().zip(b.iter()).all(|(x, y)| {
                x.name == y.name
                    && x.value.shape() == y.value.shape()
                    && x.value.data().iter().zip(y.value.data()).all(|(p, q)| p.to_bits() == q.to_bits())
            })
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let s = sample();
        let bytes = encode(&s).unwrap();
        assert_eq!(&bytes[..4], b"TTSN");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), VERSION);
        assert!(bitwise_equal(&s, &decode(&bytes).unwrap()));
    }

    #[test]
    fn record_layout() {
        let mut s = ParamStore::new();
        s.insert("w", Tensor::new(vec![1, 2], vec![1.5, -2.0]).unwrap()).unwrap();
        let bytes = encode(&s).unwrap();
        let mut expected = b"TTSN".to_vec();
        expected.extend_from_slice(&1u32.to_le_bytes());
        expected.extend_from_slice(&1u32.to_le_bytes());
        expected.push(b'w');
        expected.extend_from_slice(&2u32.to_le_bytes());
        expected.extend_from_slice(&1u32.to_le_bytes());
        expected.extend_from_slice(&2u32.to_le_bytes());
        expected.extend_from_slice(&1.5f64.to_le_bytes());
        expected.extend_from_slice(&(-2.0f64).to_le_bytes());
        assert_eq!(bytes, expected);
    }

    #[test]
    fn corrupt_inputs() {
        let bytes = encode(&sample()).unwrap();
        let mut bad = bytes.clone();
        bad[..4].copy_from_slice(b"NOPE");
        let err = decode(&bad).unwrap_err();
        assert!(matches!(err, Error::BadMagic { .. }));
        assert!(err.to_string().contains("TTSN"));

        let mut v = bytes.clone();
        v[4] = 2;
        assert!(matches!(decode(&v), Err(Error::Version { .. })));
        assert!(matches!(decode(&bytes[..bytes.len() - 1]), Err(Error::Truncated(_))));
    }

    #[test]
    fn restore_checks_names() {
        let s = sample();
        let mut target = sample();
        target.set("λ", Tensor::scalar(9.0)).unwrap();
        restore_into(&mut target, &s).unwrap();
        assert_eq!(target.value("λ").unwrap().item(), 0.125);

        let mut other = ParamStore::new();
        other.insert("x", Tensor::scalar(1.0)).unwrap();
        assert!(restore_into(&mut target, &other).is_err());
    }
}
