//! Named-tensor files: encoder weight files and training checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic   8 bytes  "MITPW\0\0\x01"
//! count   u32
//! count × {
//!     name_len u32, name (UTF-8)
//!     ndim     u32, dims (u64 × ndim)
//!     values   f64 × product(dims), little-endian
//! }
//! ```

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{MitpError, Result};
use crate::numerics::{ParamGroup, ParamStore, Tensor};

const MAGIC: &[u8; 8] = b"MITPW\0\0\x01";

pub fn write_tensors<'a, I>(path: &Path, entries: I) -> Result<()>
where
    I: IntoIterator<Item = (&'a str, &'a Tensor)>,
{
    let entries: Vec<_> = entries.into_iter().collect();
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for (name, t) in entries {
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.extend_from_slice(&(t.ndim() as u32).to_le_bytes());
        for &d in t.shape() {
            buf.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &x in t.data() {
            buf.extend_from_slice(&x.to_le_bytes());
        }
    }
    let mut f = fs::File::create(path)?;
    f.write_all(&buf)?;
    Ok(())
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| MitpError::WeightFile(format!("truncated at byte {}", self.pos)))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

pub fn read_tensors(path: &Path) -> Result<Vec<(String, Tensor)>> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    let mut cur = Cursor { bytes: &bytes, pos: 0 };
    if cur.take(8)? != MAGIC {
        return Err(MitpError::WeightFile(format!("{}: bad magic", path.display())));
    }
    let count = cur.u32()? as usize;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = cur.u32()? as usize;
        let name = std::str::from_utf8(cur.take(name_len)?)
            .map_err(|e| MitpError::WeightFile(format!("tensor name is not UTF-8: {e}")))?
            .to_string();
        let ndim = cur.u32()? as usize;
        let shape = (0..ndim)
            .map(|_| cur.u64().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let raw = cur.take(n * 8)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let t = Tensor::new(&shape, data).map_err(|e| MitpError::WeightFile(format!("{name}: {e}")))?;
        out.push((name, t));
    }
    if cur.pos != bytes.len() {
        return Err(MitpError::WeightFile(format!(
            "{} trailing bytes after {count} tensors",
            bytes.len() - cur.pos
        )));
    }
    Ok(out)
}

/// Copies tensors from a file into same-named parameters. Every name in the
/// file must exist in the store with an identical shape.
pub fn load_into(store: &mut ParamStore, path: &Path) -> Result<usize> {
    let entries = read_tensors(path)?;
    let mut loaded = 0;
    for (name, t) in entries {
        let id = store
            .find(&name)
            .ok_or_else(|| MitpError::WeightFile(format!("unknown parameter `{name}`")))?;
        let p = store.get_mut(id);
        if p.tensor.shape() != t.shape() {
            return Err(MitpError::WeightFile(format!(
                "`{name}`: expected shape {:?}, file has {:?}",
                p.tensor.shape(),
                t.shape()
            )));
        }
        p.tensor = t;
        loaded += 1;
    }
    Ok(loaded)
}

/// Writes every parameter of the given groups.
pub fn save_groups(store: &ParamStore, groups: &[ParamGroup], path: &Path) -> Result<()> {
    write_tensors(
        path,
        store
            .iter()
            .filter(|(_, p)| groups.contains(&p.group))
            .map(|(_, p)| (p.name.as_str(), &p.tensor)),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_and_validation() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.bin");
        let a = Tensor::new(&[2, 3], vec![1.0, -2.0, 3.5, 0.0, 1e-300, -0.0]).unwrap();
        let b = Tensor::vector(vec![7.0]);
        write_tensors(&path, [("a", &a), ("b", &b)]).unwrap();
        let back = read_tensors(&path).unwrap();
        assert_eq!(back.len(), 2);
        assert!(back[0].1.bit_eq(&a));
        assert_eq!(back[1].0, "b");

        let mut store = ParamStore::new();
        store.add("a", ParamGroup::Backbone, Tensor::zeros(&[2, 3]), true);
        store.add("b", ParamGroup::Backbone, Tensor::zeros(&[1]), true);
        assert_eq!(load_into(&mut store, &path).unwrap(), 2);
        assert!(store.tensor(store.find("a").unwrap()).bit_eq(&a));

        let mut wrong = ParamStore::new();
        wrong.add("a", ParamGroup::Backbone, Tensor::zeros(&[3, 2]), true);
        wrong.add("b", ParamGroup::Backbone, Tensor::zeros(&[1]), true);
        assert!(load_into(&mut wrong, &path).is_err());
    }

    #[test]
    fn truncated_file_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.bin");
        write_tensors(&path, [("a", &Tensor::vector(vec![1.0, 2.0]))]).unwrap();
        let bytes = fs::read(&path).unwrap();
        fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
        assert!(matches!(read_tensors(&path), Err(MitpError::WeightFile(_))));
    }
}
