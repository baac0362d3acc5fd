//! Named-tensor checkpoints.
//!
//! Layout: magic `BANC`, u32 version, u32 tensor count, then per tensor a
//! u16 name length, the UTF-8 name and one raw tensor record. Integers are
//! little-endian.

use std::io::{Read, Write};
use std::path::Path;

use crate::params::ParameterStore;
use crate::tensor::io::{read_tensor, write_tensor};
use crate::tensor::{Scalar, Tensor};
use crate::Error;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"BANC";
pub const CHECKPOINT_VERSION: u32 = 1;

fn format_err(detail: impl Into<String>) -> Error {
    Error::Tensor(crate::TensorError::Format(detail.into()))
}

pub fn write_named<T: Scalar, W: Write>(out: &mut W, tensors: &[(&str, &Tensor<T>)]) -> Result<(), Error> {
    let mut buf = Vec::new();
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    let count = u32::try_from(tensors.len()).map_err(|_| format_err("too many tensors"))?;
    buf.extend_from_slice(&count.to_le_bytes());
    for (name, t) in tensors {
        let len = u16::try_from(name.len()).map_err(|_| format_err(format!("name {name} is too long")))?;
        buf.extend_from_slice(&len.to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        write_tensor(&mut buf, t)?;
    }
    out.write_all(&buf).map_err(|e| format_err(e.to_string()))
}

pub fn read_named<T: Scalar, R: Read>(r: &mut R) -> Result<Vec<(String, Tensor<T>)>, Error> {
    let mut word = [0u8; 4];
    r.read_exact(&mut word).map_err(|e| format_err(e.to_string()))?;
    if &word != CHECKPOINT_MAGIC {
        return Err(format_err(format!("bad checkpoint magic {word:?}")));
    }
    let mut u32_field = |r: &mut R| -> Result<u32, Error> {
        r.read_exact(&mut word).map_err(|e| format_err(e.to_string()))?;
        Ok(u32::from_le_bytes(word))
    };
    let version = u32_field(r)?;
    if version != CHECKPOINT_VERSION {
        return Err(format_err(format!("unsupported checkpoint version {version}")));
    }
    let count = u32_field(r)?;
    let mut out = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let mut len = [0u8; 2];
        r.read_exact(&mut len).map_err(|e| format_err(e.to_string()))?;
        let mut name = vec![0u8; u16::from_le_bytes(len) as usize];
        r.read_exact(&mut name).map_err(|e| format_err(e.to_string()))?;
        let name = String::from_utf8(name).map_err(|_| format_err("tensor name is not UTF-8"))?;
        out.push((name, read_tensor(r)?));
    }
    Ok(out)
}

/// Write every parameter of `store` in registration order.
pub fn save_checkpoint<T: Scalar>(store: &ParameterStore<T>, path: &Path) -> Result<(), Error> {
    let entries: Vec<(&str, &Tensor<T>)> = store.iter().collect();
    save_named(&entries, path)
}

pub fn save_named<T: Scalar>(entries: &[(&str, &Tensor<T>)], path: &Path) -> Result<(), Error> {
    let mut buf = Vec::new();
    write_named(&mut buf, entries)?;
    std::fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn load_named<T: Scalar>(path: &Path) -> Result<Vec<(String, Tensor<T>)>, Error> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    read_named(&mut bytes.as_slice())
}

/// Copy checkpoint tensors into `store`. Every missing, unexpected or
/// mis-shaped name is reported at once and nothing is modified.
pub fn apply_checkpoint<T: Scalar>(store: &mut ParameterStore<T>, entries: Vec<(String, Tensor<T>)>) -> Result<(), Error> {
    let mut problems = Vec::new();
    let mut seen = vec![false; store.len()];
    for (name, t) in &entries {
        match store.id(name) {
            None => problems.push(format!("unexpected {name}")),
            Some(id) => {
                if seen[id.index()] {
                    problems.push(format!("duplicate {name}"));
                }
                seen[id.index()] = true;
                let want = store.value(id).shape();
                if t.shape() != want {
                    problems.push(format!("{name}: shape {} in checkpoint, {want} in model", t.shape()));
                }
            }
        }
    }
    for id in store.ids() {
        if !seen[id.index()] {
            problems.push(format!("missing {}", store.name(id)));
        }
    }
    if !problems.is_empty() {
        return Err(Error::CheckpointMismatch(problems));
    }
    for (name, t) in entries {
        let id = store.id(&name).expect("validated above");
        *store.value_mut(id) = t;
    }
    Ok(())
}

pub fn load_checkpoint<T: Scalar>(store: &mut ParameterStore<T>, path: &Path) -> Result<(), Error> {
    apply_checkpoint(store, load_named(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Shape;

    fn store() -> ParameterStore<f32> {
        let mut s = ParameterStore::new();
        s.register("a.weight", Tensor::from_fn(Shape::new(2, 1, 3, 3), |[o, _, y, x]| (o * 9 + y * 3 + x) as f32 * 0.1))
            .unwrap();
        s.register("a.bias", Tensor::full(Shape::new(2, 1, 1, 1), -0.25)).unwrap();
        s
    }

    #[test]
    fn header_layout() {
        let mut buf = Vec::new();
        let t = Tensor::<f32>::scalar(1.0);
        write_named(&mut buf, &[("ab", &t)]).unwrap();
        assert_eq!(&buf[..4], b"BANC");
        assert_eq!(&buf[4..8], &1u32.to_le_bytes());
        assert_eq!(&buf[8..12], &1u32.to_le_bytes());
        assert_eq!(&buf[12..14], &2u16.to_le_bytes());
        assert_eq!(&buf[14..16], b"ab");
        assert_eq!(&buf[16..20], b"BANT");
    }

    #[test]
    fn save_load_save_is_bitwise_stable() {
        let dir = tempfile::tempdir().unwrap();
        let (p1, p2) = (dir.path().join("a.banc"), dir.path().join("b.banc"));
        let s = store();
        save_checkpoint(&s, &p1).unwrap();
        let mut t = store();
        t.fill_zero();
        load_checkpoint(&mut t, &p1).unwrap();
        save_checkpoint(&t, &p2).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
    }

    #[test]
    fn mismatches_are_enumerated() {
        let mut s = store();
        let entries = vec![
            ("a.weight".to_string(), Tensor::<f32>::zeros(Shape::new(1, 1, 3, 3))),
            ("b.weight".to_string(), Tensor::<f32>::zeros(Shape::new(1, 1, 1, 1))),
        ];
        match apply_checkpoint(&mut s, entries) {
            Err(Error::CheckpointMismatch(p)) => {
                assert_eq!(p.len(), 3, "{p:?}");
                assert!(p.iter().any(|m| m.starts_with("a.weight: shape")));
                assert!(p.iter().any(|m| m == "unexpected b.weight"));
                assert!(p.iter().any(|m| m == "missing a.bias"));
            }
            other => panic!("unexpected {other:?}"),
        }
        assert_eq!(s.value(s.id("a.bias").unwrap()).data(), &[-0.25, -0.25]);
    }

    #[test]
    fn rejects_bad_magic() {
        assert!(read_named::<f32, _>(&mut &b"BANX\x01\0\0\0\0\0\0\0"[..]).is_err());
    }
}
