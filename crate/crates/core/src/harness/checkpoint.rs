//! Checkpoint directories: `manifest.json` plus one MTEN file per parameter.

use std::fs;
use std::io::BufWriter;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::io::{read_raw, write_raw};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub frozen: bool,
    pub file: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub params: Vec<ManifestEntry>,
}

pub fn save_checkpoint(ps: &ParamStore, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut entries = Vec::with_capacity(ps.len());
    for (i, p) in ps.params().iter().enumerate() {
        let file = format!("{i:04}.mten");
        let mut w = BufWriter::new(fs::File::create(dir.join(&file))?);
        write_raw(&mut w, &p.shape, &p.value)?;
        entries.push(ManifestEntry { name: p.name.clone(), shape: p.shape.clone(), frozen: p.frozen, file });
    }
    let manifest = serde_json::to_string_pretty(&Manifest { params: entries }).map_err(|e| Error::Parse(e.to_string()))?;
    fs::write(dir.join("manifest.json"), manifest + "\n")?;
    Ok(())
}

/// Overwrite the values and frozen flags of `ps` from a checkpoint. The
/// checkpoint must list exactly the same names and shapes.
pub fn load_checkpoint(ps: &mut ParamStore, dir: &Path) -> Result<()> {
    let text = fs::read_to_string(dir.join("manifest.json"))?;
    let manifest: Manifest = serde_json::from_str(&text).map_err(|e| Error::Parse(format!("manifest: {e}")))?;
    if manifest.params.len() != ps.len() {
        return Err(Error::Config(format!("checkpoint has {} parameters, model has {}", manifest.params.len(), ps.len())));
    }
    for (p, e) in ps.params_mut().iter_mut().zip(&manifest.params) {
        if p.name != e.name || p.shape != e.shape {
            return Err(Error::Config(format!("checkpoint entry {} {:?} does not match {} {:?}", e.name, e.shape, p.name, p.shape)));
        }
        let mut r = std::io::BufReader::new(fs::File::open(dir.join(&e.file))?);
        let (shape, data) = read_raw(&mut r)?;
        if shape != p.shape {
            return Err(Error::Parse(format!("{}: stored shape {shape:?}", e.file)));
        }
        p.value = data;
        p.frozen = e.frozen;
    }
    Ok(())
}

/// SHA-256 over the serialized names, shapes and values of every parameter
/// whose name starts with one of `prefixes`, in store order.
pub fn params_hash(ps: &ParamStore, prefixes: &[&str]) -> Result<String> {
    let mut h = Sha256::new();
    let mut buf = Vec::new();
    for p in ps.params().iter().filter(|p| prefixes.iter().any(|pre| p.name.starts_with(pre))) {
        buf.clear();
        buf.extend_from_slice(p.name.as_bytes());
        buf.push(0);
        write_raw(&mut buf, &p.shape, &p.value)?;
        h.update(&buf);
    }
    Ok(hex::encode(h.finalize()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::Init;

    fn store() -> ParamStore {
        let mut ps = ParamStore::new(5);
        ps.add("enc.w", &[2, 3], Init::Normal(1.0));
        ps.add("head.b", &[4], Init::Const(0.5));
        ps
    }

    #[test]
    fn round_trip_restores_values_and_flags() {
        let dir = tempfile::tempdir().unwrap();
        let mut a = store();
        a.set_frozen_prefix("enc", true);
        save_checkpoint(&a, dir.path()).unwrap();
        let mut b = ParamStore::new(99);
        b.add("enc.w", &[2, 3], Init::Zeros);
        b.add("head.b", &[4], Init::Zeros);
        load_checkpoint(&mut b, dir.path()).unwrap();
        assert_eq!(a.params()[0].value, b.params()[0].value);
        assert!(b.params()[0].frozen && !b.params()[1].frozen);
        let mut c = ParamStore::new(0);
        c.add("enc.w", &[3, 2], Init::Zeros);
        c.add("head.b", &[4], Init::Zeros);
        assert!(matches!(load_checkpoint(&mut c, dir.path()), Err(Error::Config(_))));
    }

    #[test]
    fn hash_tracks_selected_values_only() {
        let a = store();
        let mut b = store();
        assert_eq!(params_hash(&a, &["enc"]).unwrap(), params_hash(&b, &["enc"]).unwrap());
        b.params_mut()[1].value[0] = 9.0;
        assert_eq!(params_hash(&a, &["enc"]).unwrap(), params_hash(&b, &["enc"]).unwrap());
        assert_ne!(params_hash(&a, &["enc", "head"]).unwrap(), params_hash(&b, &["enc", "head"]).unwrap());
    }
}
