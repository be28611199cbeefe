//! Volume file I/O: uncompressed single-file NIfTI-1 and the `rawf32`
//! golden-test format (JSON sidecar + little-endian float32 blob).

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::volume::{Mask3D, Volume3D};

pub const NIFTI_HEADER_LEN: usize = 348;

#[derive(Debug, Error)]
pub enum IoError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: malformed {format} file: bad field `{field}`: {detail}")]
    Format {
        path: PathBuf,
        format: &'static str,
        field: &'static str,
        detail: String,
    },
    #[error("{path}: unsupported NIfTI datatype code {code} (supported: 4 = int16, 16 = float32)")]
    UnsupportedDatatype { path: PathBuf, code: i16 },
    #[error("{path}: cannot infer volume format from extension (expected .nii, .bin or .json)")]
    UnknownFormat { path: PathBuf },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VolumeFormat {
    Nifti1,
    RawF32,
}

impl VolumeFormat {
    pub fn infer(path: &Path) -> Result<Self, IoError> {
        match path.extension().and_then(|e| e.to_str()) {
            Some("nii") => Ok(VolumeFormat::Nifti1),
            Some("bin") | Some("json") => Ok(VolumeFormat::RawF32),
            _ => Err(IoError::UnknownFormat { path: path.to_owned() }),
        }
    }
}

pub fn load_volume(path: &Path, format: VolumeFormat) -> Result<Volume3D, IoError> {
    match format {
        VolumeFormat::Nifti1 => load_nifti(path),
        VolumeFormat::RawF32 => load_rawf32(path),
    }
}

pub fn save_volume(v: &Volume3D, path: &Path, format: VolumeFormat) -> Result<(), IoError> {
    match format {
        VolumeFormat::Nifti1 => save_nifti(v, path),
        VolumeFormat::RawF32 => save_rawf32(v, path),
    }
}

/// Load a volume (format inferred from the extension) and binarize it.
pub fn load_mask(path: &Path) -> Result<Mask3D, IoError> {
    let v = load_volume(path, VolumeFormat::infer(path)?)?;
    Ok(Mask3D::from_volume(&v))
}

pub fn load_volume_auto(path: &Path) -> Result<Volume3D, IoError> {
    load_volume(path, VolumeFormat::infer(path)?)
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> IoError + '_ {
    move |source| IoError::Io { path: path.to_owned(), source }
}

// ---------------------------------------------------------------------------
// NIfTI-1

fn load_nifti(path: &Path) -> Result<Volume3D, IoError> {
    let mut f = BufReader::new(File::open(path).map_err(io_err(path))?);
    let mut hdr = [0u8; NIFTI_HEADER_LEN];
    f.read_exact(&mut hdr).map_err(io_err(path))?;

    let fmt = |field: &'static str, detail: String| IoError::Format {
        path: path.to_owned(),
        format: "NIfTI-1",
        field,
        detail,
    };

    let rd_i32 = |off: usize| i32::from_le_bytes(hdr[off..off + 4].try_into().unwrap());
    let rd_i16 = |off: usize| i16::from_le_bytes(hdr[off..off + 2].try_into().unwrap());
    let rd_f32 = |off: usize| f32::from_le_bytes(hdr[off..off + 4].try_into().unwrap());

    if &hdr[344..348] != b"n+1\0" {
        return Err(fmt("magic", format!("expected \"n+1\\0\", got {:?}", &hdr[344..348])));
    }
    let sizeof_hdr = rd_i32(0);
    if sizeof_hdr != NIFTI_HEADER_LEN as i32 {
        return Err(fmt("sizeof_hdr", format!("expected 348, got {sizeof_hdr}")));
    }
    let ndim = rd_i16(40);
    if !(1..=7).contains(&ndim) {
        return Err(fmt("dim[0]", format!("expected 1..=7, got {ndim}")));
    }
    let mut dim = [1usize; 7];
    for (a, slot) in dim.iter_mut().enumerate() {
        let v = rd_i16(42 + 2 * a);
        if a < ndim as usize {
            if v < 1 {
                return Err(fmt("dim", format!("dim[{}] = {v} must be >= 1", a + 1)));
            }
            *slot = v as usize;
        }
    }
    if dim[3..].iter().any(|&v| v != 1) {
        return Err(fmt("dim", "volumes with a 4th+ axis of size > 1 are unsupported".into()));
    }
    let dims = (dim[0], dim[1], dim[2]);

    let datatype = rd_i16(70);
    let bitpix = rd_i16(72);
    let mut spacing = (rd_f32(80), rd_f32(84), rd_f32(88));
    for (a, s) in [spacing.0, spacing.1, spacing.2].iter().enumerate() {
        if !s.is_finite() {
            return Err(fmt("pixdim", format!("pixdim[{}] = {s} is not finite", a + 1)));
        }
    }
    // Some writers leave pixdim at 0; fall back to unit spacing.
    if spacing.0 <= 0.0 {
        spacing.0 = 1.0;
    }
    if spacing.1 <= 0.0 {
        spacing.1 = 1.0;
    }
    if spacing.2 <= 0.0 {
        spacing.2 = 1.0;
    }

    let vox_offset = rd_f32(108);
    if !(vox_offset.is_finite() && vox_offset >= NIFTI_HEADER_LEN as f32) {
        return Err(fmt("vox_offset", format!("expected >= 348, got {vox_offset}")));
    }
    let scl_slope = rd_f32(112);
    let scl_inter = rd_f32(116);

    let sform_code = rd_i16(254);
    let affine = (sform_code > 0).then(|| {
        let mut m = [[0.0f32; 4]; 4];
        for (r, base) in [(0usize, 280usize), (1, 296), (2, 312)] {
            for c in 0..4 {
                m[r][c] = rd_f32(base + 4 * c);
            }
        }
        m[3] = [0.0, 0.0, 0.0, 1.0];
        m
    });

    // Skip to the payload.
    let skip = vox_offset as usize - NIFTI_HEADER_LEN;
    std::io::copy(&mut f.by_ref().take(skip as u64), &mut std::io::sink()).map_err(io_err(path))?;

    let count = dims.0 * dims.1 * dims.2;
    let data = match datatype {
        16 => {
            if bitpix != 32 {
                return Err(fmt("bitpix", format!("expected 32 for float32, got {bitpix}")));
            }
            let mut data = vec![0.0f32; count];
            f.read_f32_into::<LittleEndian>(&mut data).map_err(io_err(path))?;
            data
        }
        4 => {
            if bitpix != 16 {
                return Err(fmt("bitpix", format!("expected 16 for int16, got {bitpix}")));
            }
            let mut raw = vec![0i16; count];
            f.read_i16_into::<LittleEndian>(&mut raw).map_err(io_err(path))?;
            raw.into_iter().map(|v| v as f32).collect()
        }
        code => return Err(IoError::UnsupportedDatatype { path: path.to_owned(), code }),
    };

    let data = if scl_slope != 0.0 && (scl_slope != 1.0 || scl_inter != 0.0) {
        data.into_iter().map(|v| v * scl_slope + scl_inter).collect()
    } else {
        data
    };

    let mut vol = Volume3D::new(dims, spacing, data);
    vol.affine = affine;
    Ok(vol)
}

fn save_nifti(v: &Volume3D, path: &Path) -> Result<(), IoError> {
    let mut hdr = [0u8; NIFTI_HEADER_LEN];
    let wr_i32 = |hdr: &mut [u8], off: usize, val: i32| hdr[off..off + 4].copy_from_slice(&val.to_le_bytes());
    let wr_i16 = |hdr: &mut [u8], off: usize, val: i16| hdr[off..off + 2].copy_from_slice(&val.to_le_bytes());
    let wr_f32 = |hdr: &mut [u8], off: usize, val: f32| hdr[off..off + 4].copy_from_slice(&val.to_le_bytes());

    wr_i32(&mut hdr, 0, NIFTI_HEADER_LEN as i32);
    hdr[39] = b'r'; // dim_info unused; regular flag
    wr_i16(&mut hdr, 40, 3);
    wr_i16(&mut hdr, 42, v.dims.0 as i16);
    wr_i16(&mut hdr, 44, v.dims.1 as i16);
    wr_i16(&mut hdr, 46, v.dims.2 as i16);
    for a in 4..8 {
        wr_i16(&mut hdr, 40 + 2 * a, 1);
    }
    wr_i16(&mut hdr, 70, 16); // float32
    wr_i16(&mut hdr, 72, 32);
    wr_f32(&mut hdr, 76, 1.0);
    wr_f32(&mut hdr, 80, v.spacing.0);
    wr_f32(&mut hdr, 84, v.spacing.1);
    wr_f32(&mut hdr, 88, v.spacing.2);
    wr_f32(&mut hdr, 108, 352.0); // vox_offset: header + 4 bytes extension flag
    wr_f32(&mut hdr, 112, 1.0); // scl_slope
    wr_f32(&mut hdr, 116, 0.0); // scl_inter
    if let Some(m) = v.affine {
        wr_i16(&mut hdr, 254, 1); // sform_code = NIFTI_XFORM_SCANNER_ANAT
        for (r, base) in [(0usize, 280usize), (1, 296), (2, 312)] {
            for c in 0..4 {
                wr_f32(&mut hdr, base + 4 * c, m[r][c]);
            }
        }
    }
    hdr[344..348].copy_from_slice(b"n+1\0");

    let mut f = BufWriter::new(File::create(path).map_err(io_err(path))?);
    f.write_all(&hdr).map_err(io_err(path))?;
    f.write_all(&[0u8; 4]).map_err(io_err(path))?; // no extensions
    for &x in &v.data {
        f.write_f32::<LittleEndian>(x).map_err(io_err(path))?;
    }
    f.flush().map_err(io_err(path))
}

// ---------------------------------------------------------------------------
// rawf32: `<name>.json` sidecar + `<name>.bin` little-endian float32 payload

#[derive(Serialize, Deserialize)]
struct RawSidecar {
    dims: [usize; 3],
    spacing: [f32; 3],
    #[serde(skip_serializing_if = "Option::is_none")]
    affine: Option<[[f32; 4]; 4]>,
}

fn raw_pair(path: &Path) -> (PathBuf, PathBuf) {
    (path.with_extension("json"), path.with_extension("bin"))
}

fn load_rawf32(path: &Path) -> Result<Volume3D, IoError> {
    let (json_path, bin_path) = raw_pair(path);
    let sidecar = std::fs::read_to_string(&json_path).map_err(io_err(&json_path))?;
    let sidecar: RawSidecar = serde_json::from_str(&sidecar).map_err(|e| IoError::Format {
        path: json_path.clone(),
        format: "rawf32",
        field: "sidecar",
        detail: e.to_string(),
    })?;
    let count = sidecar.dims.iter().product::<usize>();
    let mut f = BufReader::new(File::open(&bin_path).map_err(io_err(&bin_path))?);
    let mut data = vec![0.0f32; count];
    f.read_f32_into::<LittleEndian>(&mut data).map_err(io_err(&bin_path))?;
    for (a, &s) in sidecar.spacing.iter().enumerate() {
        if !(s.is_finite() && s > 0.0) {
            return Err(IoError::Format {
                path: json_path,
                format: "rawf32",
                field: "spacing",
                detail: format!("spacing[{a}] = {s} must be positive"),
            });
        }
    }
    let mut vol = Volume3D::new(
        (sidecar.dims[0], sidecar.dims[1], sidecar.dims[2]),
        (sidecar.spacing[0], sidecar.spacing[1], sidecar.spacing[2]),
        data,
    );
    vol.affine = sidecar.affine;
    Ok(vol)
}

fn save_rawf32(v: &Volume3D, path: &Path) -> Result<(), IoError> {
    let (json_path, bin_path) = raw_pair(path);
    let sidecar = RawSidecar {
        dims: [v.dims.0, v.dims.1, v.dims.2],
        spacing: [v.spacing.0, v.spacing.1, v.spacing.2],
        affine: v.affine,
    };
    std::fs::write(&json_path, serde_json::to_string_pretty(&sidecar).unwrap())
        .map_err(io_err(&json_path))?;
    let mut f = BufWriter::new(File::create(&bin_path).map_err(io_err(&bin_path))?);
    for &x in &v.data {
        f.write_f32::<LittleEndian>(x).map_err(io_err(&bin_path))?;
    }
    f.flush().map_err(io_err(&bin_path))
}

/// Enumerate `<dir>/*.nii` and `<dir>/*.bin` as (stem, path), sorted by stem.
pub fn list_volume_files(dir: &Path) -> Result<Vec<(String, PathBuf)>, IoError> {
    let mut out = Vec::new();
    for entry in std::fs::read_dir(dir).map_err(io_err(dir))? {
        let entry = entry.map_err(io_err(dir))?;
        let path = entry.path();
        match path.extension().and_then(|e| e.to_str()) {
            Some("nii") | Some("bin") => {
                let stem = path.file_stem().unwrap().to_string_lossy().into_owned();
                out.push((stem, path));
            }
            _ => {}
        }
    }
    out.sort();
    Ok(out)
}
