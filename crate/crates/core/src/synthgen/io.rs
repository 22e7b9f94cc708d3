use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Dataset, DatasetManifest, SceneImage};
use crate::error::{Error, Result};

pub const IMAGE_BLOB_MAGIC: [u8; 8] = *b"RSHAPES\0";
pub const IMAGE_BLOB_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct ManifestFile {
    digest: String,
    manifest: DatasetManifest,
}

/// Writes `manifest.json` and `images.bin` into `dir`.
///
/// The blob is the magic, then little-endian `u32` version, side and count,
/// then `count * side * side` little-endian `f64` pixels.
pub fn save_dataset(ds: &Dataset, dir: &Path) -> Result<String> {
    fs::create_dir_all(dir)?;
    let digest = ds.digest();
    let file = ManifestFile {
        digest: digest.clone(),
        manifest: ds.manifest.clone(),
    };
    fs::write(dir.join("manifest.json"), serde_json::to_vec_pretty(&file)?)?;
    let side = ds.manifest.side;
    let mut out = Vec::with_capacity(20 + ds.len() * side * side * 8);
    out.extend_from_slice(&IMAGE_BLOB_MAGIC);
    out.extend_from_slice(&IMAGE_BLOB_VERSION.to_le_bytes());
    out.extend_from_slice(&(side as u32).to_le_bytes());
    out.extend_from_slice(&(ds.len() as u32).to_le_bytes());
    for img in &ds.images {
        for p in &img.pixels {
            out.extend_from_slice(&p.to_le_bytes());
        }
    }
    fs::File::create(dir.join("images.bin"))?.write_all(&out)?;
    Ok(digest)
}

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let file: ManifestFile = serde_json::from_slice(&fs::read(dir.join("manifest.json"))?)?;
    let mut blob = Vec::new();
    fs::File::open(dir.join("images.bin"))?.read_to_end(&mut blob)?;
    let bad = |m: &str| Error::Generation(format!("{}: {m}", dir.display()));
    if blob.len() < 20 || blob[..8] != IMAGE_BLOB_MAGIC {
        return Err(bad("image blob has no valid header"));
    }
    let word = |i: usize| u32::from_le_bytes(blob[i..i + 4].try_into().expect("4 bytes")) as usize;
    if word(8) != IMAGE_BLOB_VERSION as usize {
        return Err(bad("unsupported image blob version"));
    }
    let (side, count) = (word(12), word(16));
    if side != file.manifest.side || count != file.manifest.items.len() {
        return Err(bad("image blob does not match manifest"));
    }
    if blob.len() != 20 + count * side * side * 8 {
        return Err(bad("image blob has the wrong length"));
    }
    let images = file
        .manifest
        .items
        .iter()
        .enumerate()
        .map(|(i, rec)| {
            let off = 20 + i * side * side * 8;
            let pixels = blob[off..off + side * side * 8]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            SceneImage {
                side,
                seed: rec.seed,
                pixels,
            }
        })
        .collect();
    let ds = Dataset {
        manifest: file.manifest,
        images,
    };
    if ds.digest() != file.digest {
        return Err(bad("digest mismatch"));
    }
    Ok(ds)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthgen::{build_kshot_dataset, split_classes, DataConfig};

    #[test]
    fn roundtrip_and_tamper_detection() {
        let split = split_classes(12, 4, 1).unwrap();
        let ds = build_kshot_dataset(&split, 2, &DataConfig::default(), 1).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let digest = save_dataset(&ds, dir.path()).unwrap();
        let back = load_dataset(dir.path()).unwrap();
        assert_eq!(back, ds);
        assert_eq!(back.digest(), digest);

        let path = dir.path().join("images.bin");
        let mut blob = fs::read(&path).unwrap();
        let n = blob.len();
        blob[n - 1] ^= 0x40;
        fs::write(&path, &blob).unwrap();
        assert!(load_dataset(dir.path()).is_err());
        fs::write(&path, &blob[..n - 8]).unwrap();
        assert!(load_dataset(dir.path()).is_err());
    }
}
