//! Flat key-to-tensor checkpoint container.
//!
//! Binary layout, little-endian throughout:
//!
//! ```text
//! magic  b"TAMO"
//! version u8 (currently 1)
//! count  u32                      number of entries
//! entry  repeated `count` times:
//!   name_len u32, name bytes (UTF-8)
//!   ndim     u32, extents u32 x ndim
//!   payload  f64 x product(extents)   raw IEEE-754 bits
//! ```
//!
//! Round-trips are bit-exact: payloads are written with `f64::to_le_bytes`.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"TAMO";
const VERSION: u8 = 1;

/// Prefix used for adapter-only checkpoints.
pub const ADAPTER_PREFIX: &str = "lora.";

pub fn write_entries<W: Write>(entries: &[(String, Tensor)], mut w: W) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&[VERSION])?;
    w.write_all(&(entries.len() as u32).to_le_bytes())?;
    for (name, t) in entries {
        let bytes = name.as_bytes();
        w.write_all(&(bytes.len() as u32).to_le_bytes())?;
        w.write_all(bytes)?;
        w.write_all(&(t.shape().len() as u32).to_le_bytes())?;
        for &extent in t.shape() {
            w.write_all(&(extent as u32).to_le_bytes())?;
        }
        for v in t.data().iter() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn read_entries<R: Read>(mut r: R) -> Result<Vec<(String, Tensor)>> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Parse(format!(
            "bad checkpoint magic {magic:?}, expected {MAGIC:?}"
        )));
    }
    let mut version = [0u8; 1];
    r.read_exact(&mut version)?;
    if version[0] != VERSION {
        return Err(Error::Parse(format!(
            "unsupported checkpoint version {}",
            version[0]
        )));
    }
    let mut u32buf = [0u8; 4];
    r.read_exact(&mut u32buf)?;
    let count = u32::from_le_bytes(u32buf);
    let mut out = Vec::with_capacity(count as usize);
    for _ in 0..count {
        r.read_exact(&mut u32buf)?;
        let name_len = u32::from_le_bytes(u32buf) as usize;
        let mut name_bytes = vec![0u8; name_len];
        r.read_exact(&mut name_bytes)?;
        let name = String::from_utf8(name_bytes)
            .map_err(|e| Error::Parse(format!("checkpoint name not UTF-8: {e}")))?;
        r.read_exact(&mut u32buf)?;
        let ndim = u32::from_le_bytes(u32buf) as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            r.read_exact(&mut u32buf)?;
            shape.push(u32::from_le_bytes(u32buf) as usize);
        }
        let numel: usize = shape.iter().product();
        let mut data = Vec::with_capacity(numel);
        let mut f64buf = [0u8; 8];
        for _ in 0..numel {
            r.read_exact(&mut f64buf)?;
            data.push(f64::from_le_bytes(f64buf));
        }
        out.push((name, Tensor::from_vec(&shape, data, false)?));
    }
    Ok(out)
}

pub fn save_to_file(entries: &[(String, Tensor)], path: &Path) -> Result<()> {
    let file = std::fs::File::create(path)?;
    write_entries(entries, std::io::BufWriter::new(file))
}

pub fn load_from_file(path: &Path) -> Result<Vec<(String, Tensor)>> {
    let file = std::fs::File::open(path)?;
    read_entries(std::io::BufReader::new(file))
}

/// Copies checkpoint values into live tensors by name. Every entry must
/// match an existing tensor of identical shape; missing names are errors.
pub fn load_named(target: &[(String, Tensor)], entries: &[(String, Tensor)]) -> Result<()> {
    let mut by_name: std::collections::HashMap<&str, &Tensor> =
        target.iter().map(|(n, t)| (n.as_str(), t)).collect();
    for (name, value) in entries {
        let t = by_name.remove(name.as_str()).ok_or_else(|| {
            Error::Parse(format!("checkpoint entry {name} has no matching tensor"))
        })?;
        if t.shape() != value.shape() {
            return Err(Error::Shape(format!(
                "checkpoint entry {name}: shape {:?} vs model {:?}",
                value.shape(),
                t.shape()
            )));
        }
        t.set_data(&value.data());
    }
    Ok(())
}

/// Adapter-only view: every `*.lora_a` / `*.lora_b` entry, re-keyed under
/// the `lora.` prefix.
pub fn adapter_entries(named: &[(String, Tensor)]) -> Vec<(String, Tensor)> {
    named
        .iter()
        .filter(|(n, _)| n.ends_with(".lora_a") || n.ends_with(".lora_b"))
        .map(|(n, t)| (format!("{ADAPTER_PREFIX}{n}"), t.clone()))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn round_trip_is_bit_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let entries = vec![
            ("a.w".to_string(), Tensor::randn(&[3, 5], 1.0, &mut rng)),
            ("a.b".to_string(), Tensor::randn(&[5], 1e-300, &mut rng)),
            ("alpha".to_string(), Tensor::scalar(0.2)),
        ];
        let mut buf = Vec::new();
        write_entries(&entries, &mut buf).unwrap();
        assert_eq!(&buf[..4], b"TAMO");
        assert_eq!(buf[4], 1);
        let back = read_entries(&buf[..]).unwrap();
        assert_eq!(back.len(), 3);
        for ((n1, t1), (n2, t2)) in entries.iter().zip(&back) {
            assert_eq!(n1, n2);
            assert_eq!(t1.shape(), t2.shape());
            let (d1, d2) = (t1.to_vec(), t2.to_vec());
            for (a, b) in d1.iter().zip(&d2) {
                assert_eq!(a.to_bits(), b.to_bits());
            }
        }
    }

    #[test]
    fn rejects_corrupt_magic_and_version() {
        let entries = vec![("x".to_string(), Tensor::scalar(1.0))];
        let mut buf = Vec::new();
        write_entries(&entries, &mut buf).unwrap();
        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(read_entries(&bad[..]).is_err());
        let mut bad = buf.clone();
        bad[4] = 9;
        assert!(read_entries(&bad[..]).is_err());
    }

    #[test]
    fn load_named_checks_names_and_shapes() {
        let target = vec![("w".to_string(), Tensor::zeros(&[2, 2]))];
        let good = vec![(
            "w".to_string(),
            Tensor::from_vec(&[2, 2], vec![1., 2., 3., 4.], false).unwrap(),
        )];
        load_named(&target, &good).unwrap();
        assert_eq!(target[0].1.to_vec(), vec![1., 2., 3., 4.]);

        let unknown = vec![("nope".to_string(), Tensor::zeros(&[2, 2]))];
        assert!(load_named(&target, &unknown).is_err());
        let misshaped = vec![("w".to_string(), Tensor::zeros(&[4]))];
        assert!(load_named(&target, &misshaped).is_err());
    }

    #[test]
    fn adapter_entries_are_prefixed() {
        let named = vec![
            ("block0.attn.wq.base".to_string(), Tensor::zeros(&[2, 2])),
            ("block0.attn.wq.lora_a".to_string(), Tensor::zeros(&[1, 2])),
            ("block0.attn.wq.lora_b".to_string(), Tensor::zeros(&[2, 1])),
        ];
        let adapters = adapter_entries(&named);
        assert_eq!(adapters.len(), 2);
        assert!(adapters
            .iter()
            .all(|(n, _)| n.starts_with("lora.block0.attn.wq.lora_")));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn any_container_round_trips(
            names in proptest::collection::vec("[a-z0-9._]{1,20}", 0..6),
            seed in any::<u64>(),
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let entries: Vec<(String, Tensor)> = names
                .iter()
                .enumerate()
                .map(|(i, n)| {
                    let shape = [1 + i % 4, 1 + (i * 7) % 5];
                    (format!("{n}{i}"), Tensor::randn(&shape, 3.0, &mut rng))
                })
                .collect();
            let mut buf = Vec::new();
            write_entries(&entries, &mut buf).unwrap();
            let back = read_entries(&buf[..]).unwrap();
            prop_assert_eq!(entries.len(), back.len());
            for ((n1, t1), (n2, t2)) in entries.iter().zip(&back) {
                prop_assert_eq!(n1, n2);
                prop_assert_eq!(t1.shape(), t2.shape());
                let (d1, d2) = (t1.to_vec(), t2.to_vec());
                for (a, b) in d1.iter().zip(&d2) {
                    prop_assert_eq!(a.to_bits(), b.to_bits());
                }
            }
        }
    }
}
