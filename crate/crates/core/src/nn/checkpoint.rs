//! Parameter checkpoints.
//!
//! A name table (`u32` count, then per entry a `u32` byte length and UTF-8
//! name) followed by one tensor record per entry, in the same order. All
//! integers are little-endian; tensors use the `SASF` record format.

use std::io::{Read, Write};
use std::path::Path;

use super::params::ParamStore;
use crate::error::{Error, Result};
use crate::tensor::io::{read_tensor, write_tensor, DType};
use crate::tensor::Tensor;

pub fn write_entries<W: Write>(w: &mut W, entries: &[(&str, &Tensor)]) -> Result<()> {
    w.write_all(&(entries.len() as u32).to_le_bytes())?;
    for (name, _) in entries {
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
    }
    for (_, t) in entries {
        write_tensor(w, t, DType::F64)?;
    }
    Ok(())
}

pub fn read_entries<R: Read>(r: &mut R) -> Result<Vec<(String, Tensor)>> {
    let mut word = [0u8; 4];
    r.read_exact(&mut word)
        .map_err(|_| Error::Format("checkpoint is missing its name table".into()))?;
    let count = u32::from_le_bytes(word) as usize;
    let mut names = Vec::with_capacity(count.min(1 << 16));
    for i in 0..count {
        r.read_exact(&mut word)
            .map_err(|_| Error::Format(format!("truncated name table at entry {i}")))?;
        let mut bytes = vec![0u8; u32::from_le_bytes(word) as usize];
        r.read_exact(&mut bytes)
            .map_err(|_| Error::Format(format!("truncated name table at entry {i}")))?;
        names.push(
            String::from_utf8(bytes)
                .map_err(|_| Error::Format(format!("entry {i} name is not UTF-8")))?,
        );
    }
    names
        .into_iter()
        .map(|name| Ok((name, read_tensor(r)?.0)))
        .collect()
}

pub fn save(store: &ParamStore, path: impl AsRef<Path>) -> Result<()> {
    let entries: Vec<(&str, &Tensor)> = store
        .entries()
        .iter()
        .map(|e| (e.name.as_str(), &e.value))
        .collect();
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_entries(&mut w, &entries)?;
    w.flush()?;
    Ok(())
}

/// Replaces every tensor in `store` with the checkpoint's; names and shapes must match exactly.
pub fn load_into(store: &mut ParamStore, path: impl AsRef<Path>) -> Result<()> {
    let mut r = std::io::BufReader::new(std::fs::File::open(path)?);
    let entries = read_entries(&mut r)?;
    if entries.len() != store.len() {
        return Err(Error::Format(format!(
            "checkpoint has {} entries, model has {}",
            entries.len(),
            store.len()
        )));
    }
    for (name, t) in entries {
        let id = store
            .find(&name)
            .ok_or_else(|| Error::Format(format!("checkpoint entry {name} not in model")))?;
        store.set(id, t)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::params::{Builder, Init};
    use crate::rng::SeedSource;

    #[test]
    fn save_and_load_round_trip() {
        let mut store = ParamStore::new();
        {
            let mut b = Builder::new(&mut store, SeedSource::new(5));
            b.param("a.weight", &[3, 2], Init::Normal { std: 1.0 }).unwrap();
            b.buffer("a.running_var", Tensor::ones(&[2])).unwrap();
        }
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.bin");
        save(&store, &path).unwrap();

        let mut other = ParamStore::new();
        {
            let mut b = Builder::new(&mut other, SeedSource::new(6));
            b.param("a.weight", &[3, 2], Init::Zeros).unwrap();
            b.buffer("a.running_var", Tensor::zeros(&[2])).unwrap();
        }
        load_into(&mut other, &path).unwrap();
        for (x, y) in store.entries().iter().zip(other.entries()) {
            assert_eq!(x.value, y.value);
        }

        let mut wrong = ParamStore::new();
        Builder::new(&mut wrong, SeedSource::new(0))
            .param("b.weight", &[3, 2], Init::Zeros)
            .unwrap();
        assert!(load_into(&mut wrong, &path).is_err());
    }
}
