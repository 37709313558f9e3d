//! NIfTI-1 ingestion.
//!
//! Three input shapes are accepted by [`load_nifti`]:
//!
//! * a **directory** holding one file per modality, recognized by filename
//!   suffix (`*_t1.nii[.gz]`, `*_t1ce.*`, `*_t2.*`, `*_flair.*`) plus an
//!   optional `*_seg.*` label map;
//! * a **4-D file** whose last axis carries exactly the four modalities;
//! * a **3-D file**, treated as a single acquisition and replicated across
//!   all four channels (labels default to all-background).
//!
//! NIfTI stores voxels x-fastest; everything is permuted to the crate-wide
//! `[slice, row, col]` = `[z, y, x]` layout, and `pixdim` is reversed to
//! match.

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{Array3, Array4, ArrayD, Axis};
use nifti::{IntoNdArray, NiftiObject, ReaderOptions};

use crate::error::{Error, Result};
use crate::volume::{Volume, MODALITY_NAMES, N_MODALITIES};

/// Strip `.nii` / `.nii.gz` from a filename, or `None` if it is not NIfTI.
fn nifti_stem(name: &str) -> Option<&str> {
    name.strip_suffix(".nii.gz")
        .or_else(|| name.strip_suffix(".nii"))
}

struct RawScan {
    /// `[z, y, x]`
    data: ArrayD<f32>,
    /// mm per voxel along `[z, y, x]`
    spacing: [f64; 3],
}

/// Read one NIfTI file and permute to slice-major order. 3-D in, 3-D out;
/// 4-D in, `[t, z, y, x]` out.
fn read_scan(path: &Path) -> Result<RawScan> {
    let obj = ReaderOptions::new()
        .read_file(path)
        .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    let header = obj.header().clone();
    let ndim = header.dim[0] as usize;
    if !(3..=4).contains(&ndim) {
        return Err(Error::Data(format!(
            "{}: expected a 3-D or 4-D image, got {ndim}-D",
            path.display()
        )));
    }
    let spacing = [
        header.pixdim[3] as f64,
        header.pixdim[2] as f64,
        header.pixdim[1] as f64,
    ];
    if spacing.iter().any(|&s| !(s.is_finite() && s > 0.0)) {
        return Err(Error::Data(format!(
            "{}: non-positive voxel spacing {spacing:?}",
            path.display()
        )));
    }
    let arr = obj
        .into_volume()
        .into_ndarray::<f32>()
        .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    // [x, y, z(, t)] -> [(t,) z, y, x]
    let permuted = match ndim {
        3 => arr.permuted_axes(vec![2, 1, 0]),
        _ => arr.permuted_axes(vec![3, 2, 1, 0]),
    };
    let data = permuted.as_standard_layout().to_owned();
    Ok(RawScan { data, spacing })
}

fn to_labels(path: &Path, data: &ArrayD<f32>) -> Result<Array3<u8>> {
    let dim = data.shape().to_vec();
    if dim.len() != 3 {
        return Err(Error::Data(format!(
            "{}: label map must be 3-D",
            path.display()
        )));
    }
    let mut labels = Array3::zeros((dim[0], dim[1], dim[2]));
    for (l, &v) in labels.iter_mut().zip(data.iter()) {
        let rounded = v.round();
        if (v - rounded).abs() > 1e-3 || !(0.0..=255.0).contains(&rounded) {
            return Err(Error::Data(format!(
                "{}: non-integral label value {v}",
                path.display()
            )));
        }
        *l = rounded as u8;
    }
    Ok(labels)
}

fn subject_id_from(path: &Path) -> String {
    let name = path
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| "subject".into());
    nifti_stem(&name).unwrap_or(&name).to_string()
}

/// Load one subject from a NIfTI file or modality directory.
pub fn load_nifti(path: &Path) -> Result<Volume> {
    if path.is_dir() {
        load_modality_dir(path)
    } else {
        load_single_file(path)
    }
}

fn load_single_file(path: &Path) -> Result<Volume> {
    let scan = read_scan(path)?;
    let subject_id = subject_id_from(path);
    match scan.data.ndim() {
        3 => {
            let one = scan
                .data
                .into_dimensionality::<ndarray::Ix3>()
                .expect("checked 3-D");
            let (s, h, w) = one.dim();
            let mut modalities = Array4::zeros((N_MODALITIES, s, h, w));
            for c in 0..N_MODALITIES {
                modalities.index_axis_mut(Axis(0), c).assign(&one);
            }
            let labels = Array3::zeros((s, h, w));
            Volume::new(modalities, labels, scan.spacing, subject_id)
        }
        _ => {
            let stack = scan
                .data
                .into_dimensionality::<ndarray::Ix4>()
                .expect("checked 4-D");
            if stack.dim().0 != N_MODALITIES {
                return Err(Error::Data(format!(
                    "{}: 4-D input must have exactly {N_MODALITIES} channels, got {}",
                    path.display(),
                    stack.dim().0
                )));
            }
            let (_, s, h, w) = stack.dim();
            let labels = Array3::zeros((s, h, w));
            Volume::new(stack, labels, scan.spacing, subject_id)
        }
    }
}

fn load_modality_dir(dir: &Path) -> Result<Volume> {
    let mut modality_paths: [Option<PathBuf>; N_MODALITIES] = Default::default();
    let mut seg_path: Option<PathBuf> = None;
    let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let name = entry.file_name().to_string_lossy().into_owned();
        let Some(stem) = nifti_stem(&name) else {
            continue;
        };
        let claim = |slot: &mut Option<PathBuf>, what: &str| -> Result<()> {
            if let Some(prev) = slot {
                return Err(Error::Data(format!(
                    "{}: both {} and {} look like the {what} image",
                    dir.display(),
                    prev.file_name().unwrap_or_default().to_string_lossy(),
                    name,
                )));
            }
            *slot = Some(entry.path());
            Ok(())
        };
        if stem.ends_with("_seg") {
            claim(&mut seg_path, "seg")?;
            continue;
        }
        for (i, m) in MODALITY_NAMES.iter().enumerate() {
            // suffix match keeps `_t1` and `_t1ce` distinct
            if stem.ends_with(&format!("_{m}")) {
                claim(&mut modality_paths[i], m)?;
                break;
            }
        }
    }

    let mut channels = Vec::with_capacity(N_MODALITIES);
    let mut spacing: Option<[f64; 3]> = None;
    for (i, m) in MODALITY_NAMES.iter().enumerate() {
        let path = modality_paths[i].as_ref().ok_or_else(|| {
            Error::Data(format!("{}: no *_{m}.nii[.gz] file found", dir.display()))
        })?;
        let scan = read_scan(path)?;
        if scan.data.ndim() != 3 {
            return Err(Error::Data(format!(
                "{}: modality image must be 3-D",
                path.display()
            )));
        }
        match &spacing {
            None => spacing = Some(scan.spacing),
            Some(prev) => {
                let agree = prev
                    .iter()
                    .zip(&scan.spacing)
                    .all(|(a, b)| (a - b).abs() < 1e-4);
                if !agree {
                    return Err(Error::Data(format!(
                        "{}: voxel spacing {:?} disagrees with {:?}",
                        path.display(),
                        scan.spacing,
                        prev
                    )));
                }
            }
        }
        channels.push((
            path.clone(),
            scan.data
                .into_dimensionality::<ndarray::Ix3>()
                .expect("checked 3-D"),
        ));
    }

    let shape = channels[0].1.dim();
    for (path, c) in &channels[1..] {
        if c.dim() != shape {
            return Err(Error::Data(format!(
                "{}: shape {:?} disagrees with {:?}",
                path.display(),
                c.dim(),
                shape
            )));
        }
    }
    let (s, h, w) = shape;
    let mut modalities = Array4::zeros((N_MODALITIES, s, h, w));
    for (i, (_, c)) in channels.into_iter().enumerate() {
        modalities.index_axis_mut(Axis(0), i).assign(&c);
    }

    let labels = match &seg_path {
        Some(p) => {
            let scan = read_scan(p)?;
            let labels = to_labels(p, &scan.data)?;
            if labels.dim() != shape {
                return Err(Error::Data(format!(
                    "{}: label shape {:?} disagrees with image shape {:?}",
                    p.display(),
                    labels.dim(),
                    shape
                )));
            }
            labels
        }
        None => Array3::zeros(shape),
    };

    let subject_id = dir
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| "subject".into());
    Volume::new(modalities, labels, spacing.expect("set above"), subject_id)
}
