use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{generate_pairs, split_locations, NuisanceLog, RawGrid, SceneSpec, ScenePair};
use crate::error::{input_err, Error, Result};

pub const MANIFEST_VERSION: u32 = 1;
const GRID_MAGIC: &[u8; 4] = b"IGTD";
const GRID_VERSION: u32 = 1;
const DTYPE_F32: u8 = 0;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Splits {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FileEntry {
    pub id: usize,
    pub path_q: String,
    pub path_g: String,
    pub coords: (f64, f64),
    /// SHA-256 of the query file bytes followed by the gallery file bytes.
    pub checksum: String,
    pub nuisance: NuisanceLog,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub version: u32,
    pub seed: u64,
    pub n_locations: usize,
    pub spec: SceneSpec,
    pub splits: Splits,
    pub files: Vec<FileEntry>,
}

impl DatasetManifest {
    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }

    /// SHA-256 of the serialized manifest.
    pub fn checksum(&self) -> Result<String> {
        Ok(hex::encode(Sha256::digest(self.to_json()?.as_bytes())))
    }
}

/// A manifest with its scenes in memory.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub pairs: Vec<ScenePair>,
}

impl Dataset {
    /// Generate without touching the file system. The manifest is identical to
    /// the one [`generate_dataset`] writes.
    pub fn generate(spec: &SceneSpec, n_locations: usize, seed: u64) -> Result<Self> {
        let spec = SceneSpec {
            seed,
            ..spec.clone()
        };
        let pairs = generate_pairs(&spec, n_locations)?;
        let files = pairs
            .iter()
            .map(|p| {
                let (q, g) = (encode_grid(&p.raw_q), encode_grid(&p.raw_g));
                FileEntry {
                    id: p.location_id,
                    path_q: scene_path(p.location_id, 'q'),
                    path_g: scene_path(p.location_id, 'g'),
                    coords: p.coords,
                    checksum: pair_checksum(&q, &g),
                    nuisance: p.nuisance.clone(),
                }
            })
            .collect();
        let manifest = DatasetManifest {
            version: MANIFEST_VERSION,
            seed,
            n_locations,
            splits: split_locations(n_locations, seed),
            spec,
            files,
        };
        Ok(Dataset { manifest, pairs })
    }

    pub fn split_pairs(&self, ids: &[usize]) -> Vec<&ScenePair> {
        ids.iter().map(|&i| &self.pairs[i]).collect()
    }

    pub fn train(&self) -> Vec<&ScenePair> {
        self.split_pairs(&self.manifest.splits.train)
    }

    pub fn test(&self) -> Vec<&ScenePair> {
        self.split_pairs(&self.manifest.splits.test)
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir.join("scenes"))?;
        for (p, f) in self.pairs.iter().zip(&self.manifest.files) {
            fs::write(dir.join(&f.path_q), encode_grid(&p.raw_q))?;
            fs::write(dir.join(&f.path_g), encode_grid(&p.raw_g))?;
        }
        fs::write(dir.join("manifest.json"), self.manifest.to_json()?)?;
        Ok(())
    }
}

fn scene_path(id: usize, view: char) -> String {
    format!("scenes/{id:05}_{view}.igtd")
}

fn pair_checksum(q: &[u8], g: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(q);
    h.update(g);
    hex::encode(h.finalize())
}

/// Generate a dataset and write it under `dir`.
pub fn generate_dataset(spec: &SceneSpec, n_locations: usize, seed: u64, dir: &Path) -> Result<DatasetManifest> {
    let ds = Dataset::generate(spec, n_locations, seed)?;
    ds.write(dir)?;
    Ok(ds.manifest)
}

/// Read a dataset directory, verifying every checksum.
pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let text = fs::read_to_string(dir.join("manifest.json"))?;
    let manifest: DatasetManifest = serde_json::from_str(&text)?;
    if manifest.version != MANIFEST_VERSION {
        return Err(Error::Format(format!(
            "manifest version {} is not supported (expected {MANIFEST_VERSION})",
            manifest.version
        )));
    }
    let mut pairs = Vec::with_capacity(manifest.files.len());
    for (i, f) in manifest.files.iter().enumerate() {
        if f.id != i {
            return Err(input_err!("manifest entry {i} has id {}", f.id));
        }
        let q = fs::read(dir.join(&f.path_q))?;
        let g = fs::read(dir.join(&f.path_g))?;
        if pair_checksum(&q, &g) != f.checksum {
            return Err(Error::Corruption(format!("checksum mismatch for location {}", f.id)));
        }
        pairs.push(ScenePair {
            location_id: f.id,
            raw_q: decode_grid(&q)?,
            raw_g: decode_grid(&g)?,
            coords: f.coords,
            nuisance: f.nuisance.clone(),
        });
    }
    let s = &manifest.splits;
    if s.train.iter().any(|id| s.test.contains(id)) {
        return Err(input_err!("train and test splits overlap"));
    }
    if s.train.iter().chain(&s.test).any(|&id| id >= pairs.len()) {
        return Err(input_err!("split refers to a missing location"));
    }
    Ok(Dataset { manifest, pairs })
}

fn encode_grid(g: &RawGrid) -> Vec<u8> {
    let mut out = Vec::with_capacity(4 + 4 + 2 + 3 * 8 + g.data.len() * 4);
    out.extend_from_slice(GRID_MAGIC);
    out.extend_from_slice(&GRID_VERSION.to_le_bytes());
    out.push(DTYPE_F32);
    out.push(3);
    for d in [g.size, g.size, 3] {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for x in &g.data {
        out.extend_from_slice(&x.to_le_bytes());
    }
    out
}

fn decode_grid(bytes: &[u8]) -> Result<RawGrid> {
    let truncated = || Error::Corruption("grid file truncated".into());
    if bytes.len() < 10 {
        return Err(truncated());
    }
    if &bytes[..4] != GRID_MAGIC {
        return Err(Error::Format("not a grid file (bad magic)".into()));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != GRID_VERSION {
        return Err(Error::Format(format!(
            "grid file version {version}, reader supports {GRID_VERSION}"
        )));
    }
    if bytes[8] != DTYPE_F32 {
        return Err(Error::Format(format!("unsupported grid dtype {}", bytes[8])));
    }
    let rank = bytes[9] as usize;
    let mut at = 10;
    let mut dims = Vec::with_capacity(rank);
    for _ in 0..rank {
        let b = bytes.get(at..at + 8).ok_or_else(truncated)?;
        dims.push(u64::from_le_bytes(b.try_into().expect("8 bytes")) as usize);
        at += 8;
    }
    if dims.len() != 3 || dims[0] != dims[1] || dims[2] != 3 {
        return Err(Error::Format(format!("unexpected grid dims {dims:?}")));
    }
    let n = dims.iter().product::<usize>();
    let payload = bytes.get(at..at + 4 * n).ok_or_else(truncated)?;
    if bytes.len() != at + 4 * n {
        return Err(Error::Corruption("trailing bytes after grid payload".into()));
    }
    let data = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    Ok(RawGrid { size: dims[0], data })
}

pub fn write_grid(path: &Path, g: &RawGrid) -> Result<()> {
    fs::write(path, encode_grid(g))?;
    Ok(())
}

pub fn read_grid(path: &Path) -> Result<RawGrid> {
    decode_grid(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_roundtrip_and_errors() {
        let mut g = RawGrid::filled(8, 0.25);
        g.data[5] = -1.5;
        let b = encode_grid(&g);
        assert_eq!(decode_grid(&b).unwrap(), g);
        assert!(matches!(decode_grid(&b[..b.len() - 1]), Err(Error::Corruption(_))));
        let mut bad = b.clone();
        bad[0] = b'X';
        assert!(matches!(decode_grid(&bad), Err(Error::Format(_))));
        let mut v2 = b;
        v2[4] = 2;
        assert!(matches!(decode_grid(&v2), Err(Error::Format(_))));
    }
}
