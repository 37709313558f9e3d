//! Dependency-free raw volume container and dataset directories.
//!
//! One `.vol` file holds one subject:
//!
//! ```text
//! bytes 0..4    magic "TSVL"
//! bytes 4..8    u32 LE format version (currently 1)
//! bytes 8..16   u64 LE header length in bytes
//! ...           header JSON: subject_id, shape [4, S, H, W], voxel_spacing
//! ...           modality voxels, 4*S*H*W little-endian f32, C-order
//! ...           label voxels, S*H*W u8, C-order
//! ```
//!
//! Round-trips are lossless: the f32 payload is written bit-for-bit. A
//! dataset directory is a set of `.vol` files plus a `manifest.json` naming
//! them in order.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::{Array3, Array4};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::{PhantomSpec, Volume, N_MODALITIES};

const MAGIC: &[u8; 4] = b"TSVL";
const FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct VolumeHeader {
    version: u32,
    subject_id: String,
    /// [modalities, slices, rows, cols]
    shape: [usize; 4],
    voxel_spacing: [f64; 3],
}

/// Write a volume to the raw container format.
pub fn save_volume(volume: &Volume, path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    let (c, s, h, w) = volume.modalities.dim();
    let header = VolumeHeader {
        version: FORMAT_VERSION,
        subject_id: volume.subject_id.clone(),
        shape: [c, s, h, w],
        voxel_spacing: volume.voxel_spacing,
    };
    let header_json =
        serde_json::to_vec(&header).map_err(|e| Error::Data(format!("header encode: {e}")))?;
    let write = |out: &mut BufWriter<File>, bytes: &[u8]| -> Result<()> {
        out.write_all(bytes).map_err(|e| Error::io(path, e))
    };
    write(&mut out, MAGIC)?;
    write(&mut out, &FORMAT_VERSION.to_le_bytes())?;
    write(&mut out, &(header_json.len() as u64).to_le_bytes())?;
    write(&mut out, &header_json)?;
    // as_standard_layout is a no-op for freshly built arrays but keeps the
    // on-disk order well-defined for views.
    let modalities = volume.modalities.as_standard_layout();
    for v in modalities.iter() {
        write(&mut out, &v.to_le_bytes())?;
    }
    let labels = volume.labels.as_standard_layout();
    for v in labels.iter() {
        write(&mut out, &[*v])?;
    }
    out.flush().map_err(|e| Error::io(path, e))
}

/// Read a volume from the raw container format.
pub fn load_volume(path: &Path) -> Result<Volume> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut input = BufReader::new(file);
    let mut magic = [0u8; 4];
    input
        .read_exact(&mut magic)
        .map_err(|e| Error::io(path, e))?;
    if &magic != MAGIC {
        return Err(Error::Data(format!(
            "{}: not a volume container (bad magic)",
            path.display()
        )));
    }
    let mut buf4 = [0u8; 4];
    input
        .read_exact(&mut buf4)
        .map_err(|e| Error::io(path, e))?;
    let version = u32::from_le_bytes(buf4);
    if version != FORMAT_VERSION {
        return Err(Error::Data(format!(
            "{}: unsupported container version {version}",
            path.display()
        )));
    }
    let mut buf8 = [0u8; 8];
    input
        .read_exact(&mut buf8)
        .map_err(|e| Error::io(path, e))?;
    let header_len = u64::from_le_bytes(buf8) as usize;
    if header_len > 1 << 20 {
        return Err(Error::Data(format!(
            "{}: implausible header length {header_len}",
            path.display()
        )));
    }
    let mut header_bytes = vec![0u8; header_len];
    input
        .read_exact(&mut header_bytes)
        .map_err(|e| Error::io(path, e))?;
    let header: VolumeHeader = serde_json::from_slice(&header_bytes)
        .map_err(|e| Error::Data(format!("{}: malformed header: {e}", path.display())))?;
    let [c, s, h, w] = header.shape;
    if c != N_MODALITIES {
        return Err(Error::Data(format!(
            "{}: expected {N_MODALITIES} modalities, header says {c}",
            path.display()
        )));
    }
    let n_vox = c * s * h * w;
    let mut raw = vec![0u8; n_vox * 4];
    input
        .read_exact(&mut raw)
        .map_err(|e| Error::io(path, e))?;
    let floats: Vec<f32> = raw
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect();
    let modalities = Array4::from_shape_vec((c, s, h, w), floats)
        .map_err(|e| Error::Data(format!("{}: bad modality payload: {e}", path.display())))?;
    let mut label_bytes = vec![0u8; s * h * w];
    input
        .read_exact(&mut label_bytes)
        .map_err(|e| Error::io(path, e))?;
    let labels = Array3::from_shape_vec((s, h, w), label_bytes)
        .map_err(|e| Error::Data(format!("{}: bad label payload: {e}", path.display())))?;
    Volume::new(modalities, labels, header.voxel_spacing, header.subject_id)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub subject_id: String,
    pub file: String,
    pub has_tumor: bool,
}

/// Index of a dataset directory.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub version: u32,
    pub subjects: Vec<ManifestEntry>,
    /// Present when the dataset was synthesized.
    pub phantom_spec: Option<PhantomSpec>,
}

/// Write volumes plus a manifest into `dir` (created if missing).
pub fn save_dataset(
    volumes: &[Volume],
    dir: &Path,
    phantom_spec: Option<PhantomSpec>,
) -> Result<DatasetManifest> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut subjects = Vec::with_capacity(volumes.len());
    for v in volumes {
        let file = format!("{}.vol", v.subject_id);
        save_volume(v, &dir.join(&file))?;
        subjects.push(ManifestEntry {
            subject_id: v.subject_id.clone(),
            file,
            has_tumor: v.labels.iter().any(|&l| l != 0),
        });
    }
    let manifest = DatasetManifest {
        version: FORMAT_VERSION,
        subjects,
        phantom_spec,
    };
    let path = dir.join("manifest.json");
    let json = serde_json::to_string_pretty(&manifest)
        .map_err(|e| Error::Data(format!("manifest encode: {e}")))?;
    fs::write(&path, json).map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

/// Load every volume named by a dataset directory's manifest, in manifest order.
pub fn load_dataset(dir: &Path) -> Result<(Vec<Volume>, DatasetManifest)> {
    let path = dir.join("manifest.json");
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: DatasetManifest = serde_json::from_str(&text)
        .map_err(|e| Error::Data(format!("{}: malformed manifest: {e}", path.display())))?;
    let volumes = manifest
        .subjects
        .iter()
        .map(|entry| load_volume(&dir.join(&entry.file)))
        .collect::<Result<Vec<_>>>()?;
    Ok((volumes, manifest))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::synth_dataset;
    use tempfile::tempdir;

    #[test]
    fn round_trip_is_bit_identical() {
        let spec = PhantomSpec {
            n_subjects: 1,
            seed: 11,
            ..Default::default()
        };
        let v = synth_dataset(&spec, true).unwrap().remove(0);
        let dir = tempdir().unwrap();
        let path = dir.path().join("subject.vol");
        save_volume(&v, &path).unwrap();
        let loaded = load_volume(&path).unwrap();
        assert_eq!(loaded.subject_id, v.subject_id);
        assert_eq!(loaded.voxel_spacing, v.voxel_spacing);
        assert_eq!(loaded.labels, v.labels);
        assert!(loaded
            .modalities
            .iter()
            .zip(v.modalities.iter())
            .all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn dataset_round_trip_preserves_order_and_flags() {
        let spec = PhantomSpec {
            n_subjects: 3,
            seed: 5,
            ..Default::default()
        };
        let volumes = synth_dataset(&spec, true).unwrap();
        let dir = tempdir().unwrap();
        let manifest = save_dataset(&volumes, dir.path(), Some(spec.clone())).unwrap();
        assert!(manifest.subjects.iter().all(|e| e.has_tumor));
        let (loaded, manifest2) = load_dataset(dir.path()).unwrap();
        assert_eq!(manifest2.phantom_spec.as_ref(), Some(&spec));
        for (a, b) in loaded.iter().zip(&volumes) {
            assert_eq!(a.subject_id, b.subject_id);
        }
    }

    #[test]
    fn rejects_bad_magic() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("junk.vol");
        fs::write(&path, b"NOPE....").unwrap();
        assert!(matches!(load_volume(&path), Err(Error::Data(_))));
    }
}
