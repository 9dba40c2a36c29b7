//! Network weight storage: a JSON manifest listing named tensors and a
//! sidecar `.bin` holding their little-endian f32 data back to back.
//!
//! `save("net")` writes `net.json` + `net.bin`; `load` accepts either the
//! manifest path or the extension-less base. Entry order is preserved and
//! meaningful: encoder/decoder layers are reconstructed from it.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::Grid;

#[derive(Clone, Debug)]
pub struct NetWeights {
    entries: Vec<(String, Grid)>,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    entries: Vec<ManifestEntry>,
}

#[derive(Serialize, Deserialize)]
struct ManifestEntry {
    name: String,
    shape: [usize; 3],
    offset: usize,
}

impl NetWeights {
    pub fn new() -> Self {
        Self { entries: Vec::new() }
    }

    pub fn push(&mut self, name: &str, grid: Grid) {
        debug_assert!(
            !self.entries.iter().any(|(n, _)| n == name),
            "duplicate weight entry {name}"
        );
        self.entries.push((name.to_string(), grid));
    }

    pub fn get(&self, name: &str) -> Option<&Grid> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, g)| g)
    }

    pub fn entries(&self) -> impl Iterator<Item = (&str, &Grid)> {
        self.entries.iter().map(|(n, g)| (n.as_str(), g))
    }

    pub fn names(&self) -> Vec<&str> {
        self.entries.iter().map(|(n, _)| n.as_str()).collect()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn save(&self, base: &Path) -> Result<()> {
        let (manifest_path, bin_path) = paths_for(base);
        if let Some(dir) = manifest_path.parent() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let mut bin: Vec<u8> = Vec::new();
        let mut manifest = Manifest { entries: Vec::new() };
        for (name, grid) in &self.entries {
            let (c, h, w) = grid.shape();
            manifest.entries.push(ManifestEntry {
                name: name.clone(),
                shape: [c, h, w],
                offset: bin.len() / 4,
            });
            for v in grid.data() {
                bin.extend_from_slice(&v.to_le_bytes());
            }
        }
        let json = serde_json::to_string_pretty(&manifest)
            .map_err(|e| Error::format(&manifest_path, e.to_string()))?;
        std::fs::write(&manifest_path, json).map_err(|e| Error::io(&manifest_path, e))?;
        std::fs::write(&bin_path, bin).map_err(|e| Error::io(&bin_path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (manifest_path, bin_path) = if path.extension().is_some_and(|e| e == "json") {
            (path.to_path_buf(), path.with_extension("bin"))
        } else {
            paths_for(path)
        };
        let json =
            std::fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
        let manifest: Manifest = serde_json::from_str(&json)
            .map_err(|e| Error::format(&manifest_path, e.to_string()))?;
        let bin = std::fs::read(&bin_path).map_err(|e| Error::io(&bin_path, e))?;
        if bin.len() % 4 != 0 {
            return Err(Error::format(&bin_path, "length is not a multiple of 4"));
        }
        let values: Vec<f32> = bin
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("chunk of 4")))
            .collect();

        let mut entries = Vec::with_capacity(manifest.entries.len());
        for e in &manifest.entries {
            let count = e.shape[0] * e.shape[1] * e.shape[2];
            let end = e.offset.checked_add(count).filter(|&end| end <= values.len());
            let end = end.ok_or_else(|| {
                Error::format(
                    &bin_path,
                    format!(
                        "entry {} spans [{}, {}+{count}) but file holds {} floats",
                        e.name,
                        e.offset,
                        e.offset,
                        values.len()
                    ),
                )
            })?;
            let grid = Grid::from_vec(
                e.shape[0],
                e.shape[1],
                e.shape[2],
                values[e.offset..end].to_vec(),
            )?;
            entries.push((e.name.clone(), grid));
        }
        Ok(Self { entries })
    }

    /// Check names and shapes against an expected schema in order,
    /// naming the first mismatch.
    pub fn expect_schema(&self, schema: &[(&str, (usize, usize, usize))]) -> Result<()> {
        if self.entries.len() != schema.len() {
            return Err(Error::validation(format!(
                "weight set has {} entries, expected {}",
                self.entries.len(),
                schema.len()
            )));
        }
        for ((name, grid), (want_name, want_shape)) in self.entries.iter().zip(schema) {
            if name != want_name {
                return Err(Error::validation(format!(
                    "weight entry {name} where {want_name} was expected"
                )));
            }
            if grid.shape() != *want_shape {
                return Err(Error::validation(format!(
                    "weight {name} has shape {:?}, expected {:?}",
                    grid.shape(),
                    want_shape
                )));
            }
        }
        Ok(())
    }
}

impl Default for NetWeights {
    fn default() -> Self {
        Self::new()
    }
}

fn paths_for(base: &Path) -> (PathBuf, PathBuf) {
    (base.with_extension("json"), base.with_extension("bin"))
}
