//! Minimal NIfTI-1 reader/writer.
//!
//! Supports single-file `.nii` / `.nii.gz` volumes, little-endian, the common
//! scalar datatypes, spacing from `pixdim` and origin from the sform/qform
//! translation. Rotations are not interpreted; the crate works on axis-aligned
//! grids. The writer always emits datatype u8/i16/f32, sform with a diagonal
//! spacing matrix, and a fixed (zero) gzip mtime so outputs are byte-stable.

use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use flate2::read::MultiGzDecoder;
use flate2::write::GzEncoder;
use flate2::Compression;
use ndarray::{Array3, ShapeBuilder};

use crate::error::{Error, Result};
use crate::volume::Volume;

const HEADER_SIZE: usize = 348;
const VOX_OFFSET: usize = 352;
const MAGIC: &[u8; 4] = b"n+1\0";

const DT_UINT8: i16 = 2;
const DT_INT16: i16 = 4;
const DT_INT32: i16 = 8;
const DT_FLOAT32: i16 = 16;
const DT_FLOAT64: i16 = 64;
const DT_UINT16: i16 = 512;

/// On-disk element type used when writing.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VoxelType {
    U8,
    I16,
    F32,
}

fn is_gz(path: &Path) -> bool {
    path.extension().is_some_and(|e| e.eq_ignore_ascii_case("gz"))
}

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    let mut file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut raw = Vec::new();
    if is_gz(path) {
        MultiGzDecoder::new(file)
            .read_to_end(&mut raw)
            .map_err(|e| Error::io(path, e))?;
    } else {
        file.read_to_end(&mut raw).map_err(|e| Error::io(path, e))?;
    }
    Ok(raw)
}

fn i16_at(buf: &[u8], off: usize) -> i16 {
    i16::from_le_bytes([buf[off], buf[off + 1]])
}

fn i32_at(buf: &[u8], off: usize) -> i32 {
    i32::from_le_bytes(buf[off..off + 4].try_into().unwrap())
}

fn f32_at(buf: &[u8], off: usize) -> f32 {
    f32::from_le_bytes(buf[off..off + 4].try_into().unwrap())
}

/// Load a volume from a `.nii` or `.nii.gz` file.
pub fn load_volume(path: &Path) -> Result<Volume> {
    let raw = read_bytes(path)?;
    let bad = |reason: &str| Error::BadVolume {
        path: path.to_path_buf(),
        reason: reason.to_string(),
    };
    if raw.len() < VOX_OFFSET {
        return Err(bad("file shorter than a NIfTI-1 header"));
    }
    let sizeof_hdr = i32_at(&raw, 0);
    if sizeof_hdr != HEADER_SIZE as i32 {
        if sizeof_hdr.swap_bytes() == HEADER_SIZE as i32 {
            return Err(bad("big-endian NIfTI files are not supported"));
        }
        return Err(bad("not a NIfTI-1 file (bad sizeof_hdr)"));
    }

    let ndim = i16_at(&raw, 40);
    let dims: Vec<i16> = (1..8).map(|k| i16_at(&raw, 40 + 2 * k)).collect();
    let effective_ndim = if ndim > 3
        && (3..ndim as usize).all(|k| dims[k] <= 1)
    {
        3
    } else {
        ndim
    };
    if effective_ndim != 3 {
        return Err(Error::NonVolumetric(format!(
            "non-3D image: {} has dim[0] = {ndim}",
            path.display()
        )));
    }
    let (nx, ny, nz) = (dims[0] as usize, dims[1] as usize, dims[2] as usize);
    if nx < 1 || ny < 1 || nz < 1 {
        return Err(Error::NonVolumetric(format!(
            "non-3D image: degenerate extent ({nx}, {ny}, {nz})"
        )));
    }

    let spacing = [
        f32_at(&raw, 80) as f64,
        f32_at(&raw, 84) as f64,
        f32_at(&raw, 88) as f64,
    ];
    if spacing.iter().any(|&s| s.is_nan() || !s.is_finite() || s <= 0.0) {
        return Err(Error::MissingSpacing(format!(
            "{}: pixdim = {spacing:?}",
            path.display()
        )));
    }

    let qform_code = i16_at(&raw, 252);
    let sform_code = i16_at(&raw, 254);
    let origin = if sform_code > 0 {
        [
            f32_at(&raw, 280 + 12) as f64,
            f32_at(&raw, 296 + 12) as f64,
            f32_at(&raw, 312 + 12) as f64,
        ]
    } else if qform_code > 0 {
        [
            f32_at(&raw, 268) as f64,
            f32_at(&raw, 272) as f64,
            f32_at(&raw, 276) as f64,
        ]
    } else {
        [0.0; 3]
    };

    let datatype = i16_at(&raw, 70);
    let vox_offset = f32_at(&raw, 108).max(VOX_OFFSET as f32) as usize;
    let n_vox = nx * ny * nz;
    let elem_size = match datatype {
        DT_UINT8 => 1,
        DT_INT16 | DT_UINT16 => 2,
        DT_INT32 | DT_FLOAT32 => 4,
        DT_FLOAT64 => 8,
        other => return Err(bad(&format!("unsupported datatype {other}"))),
    };
    if raw.len() < vox_offset + n_vox * elem_size {
        return Err(bad("truncated voxel data"));
    }
    let body = &raw[vox_offset..vox_offset + n_vox * elem_size];
    let mut data = Vec::with_capacity(n_vox);
    match datatype {
        DT_UINT8 => data.extend(body.iter().map(|&b| b as f32)),
        DT_INT16 => data.extend(
            body.chunks_exact(2)
                .map(|c| i16::from_le_bytes([c[0], c[1]]) as f32),
        ),
        DT_UINT16 => data.extend(
            body.chunks_exact(2)
                .map(|c| u16::from_le_bytes([c[0], c[1]]) as f32),
        ),
        DT_INT32 => data.extend(
            body.chunks_exact(4)
                .map(|c| i32::from_le_bytes(c.try_into().unwrap()) as f32),
        ),
        DT_FLOAT32 => data.extend(
            body.chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap())),
        ),
        DT_FLOAT64 => data.extend(
            body.chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()) as f32),
        ),
        _ => unreachable!(),
    }

    let slope = f32_at(&raw, 112);
    let inter = f32_at(&raw, 116);
    if slope != 0.0 && (slope != 1.0 || inter != 0.0) {
        for v in &mut data {
            *v = *v * slope + inter;
        }
    }

    // NIfTI stores x fastest; interpret as Fortran order for (x, y, z).
    let arr = Array3::from_shape_vec((nx, ny, nz).f(), data)
        .map_err(|e| bad(&format!("shape error: {e}")))?;
    Volume::new(arr.as_standard_layout().into_owned(), spacing, origin)
}

fn put_i16(buf: &mut [u8], off: usize, v: i16) {
    buf[off..off + 2].copy_from_slice(&v.to_le_bytes());
}

fn put_i32(buf: &mut [u8], off: usize, v: i32) {
    buf[off..off + 4].copy_from_slice(&v.to_le_bytes());
}

fn put_f32(buf: &mut [u8], off: usize, v: f32) {
    buf[off..off + 4].copy_from_slice(&v.to_le_bytes());
}

fn build_header(extent: [usize; 3], spacing: [f64; 3], origin: [f64; 3], dtype: VoxelType) -> Vec<u8> {
    let mut h = vec![0u8; VOX_OFFSET];
    put_i32(&mut h, 0, HEADER_SIZE as i32);
    h[39] = b'r'; // regular
    put_i16(&mut h, 40, 3);
    for k in 0..3 {
        put_i16(&mut h, 42 + 2 * k, extent[k] as i16);
    }
    for k in 3..7 {
        put_i16(&mut h, 42 + 2 * k, 1);
    }
    let (dt, bitpix) = match dtype {
        VoxelType::U8 => (DT_UINT8, 8),
        VoxelType::I16 => (DT_INT16, 16),
        VoxelType::F32 => (DT_FLOAT32, 32),
    };
    put_i16(&mut h, 70, dt);
    put_i16(&mut h, 72, bitpix);
    put_f32(&mut h, 76, 1.0); // pixdim[0] (qfac)
    for k in 0..3 {
        put_f32(&mut h, 80 + 4 * k, spacing[k] as f32);
    }
    put_f32(&mut h, 108, VOX_OFFSET as f32);
    put_f32(&mut h, 112, 1.0); // scl_slope
    h[123] = 2; // xyzt_units: mm
    put_i16(&mut h, 252, 0); // qform_code
    put_i16(&mut h, 254, 1); // sform_code: scanner
    for k in 0..3 {
        put_f32(&mut h, 268 + 4 * k, origin[k] as f32);
        // srow_k: diagonal spacing, translation = origin
        let row_off = 280 + 16 * k;
        put_f32(&mut h, row_off + 4 * k, spacing[k] as f32);
        put_f32(&mut h, row_off + 12, origin[k] as f32);
    }
    h[344..348].copy_from_slice(MAGIC);
    h
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    if is_gz(path) {
        let mut enc = GzEncoder::new(file, Compression::default());
        enc.write_all(bytes).map_err(|e| Error::io(path, e))?;
        enc.finish().map_err(|e| Error::io(path, e))?;
    } else {
        let mut file = file;
        file.write_all(bytes).map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

/// Write a volume as NIfTI-1; element type chosen by `dtype`.
pub fn save_volume(path: &Path, v: &Volume, dtype: VoxelType) -> Result<()> {
    let extent = v.extent();
    let mut bytes = build_header(extent, v.spacing, v.origin, dtype);
    bytes.reserve(extent.iter().product::<usize>() * 4);
    // x fastest on disk.
    for k in 0..extent[2] {
        for j in 0..extent[1] {
            for i in 0..extent[0] {
                let val = v.data[[i, j, k]];
                match dtype {
                    VoxelType::U8 => bytes.push(val.round().clamp(0.0, 255.0) as u8),
                    VoxelType::I16 => bytes.extend_from_slice(
                        &(val.round().clamp(i16::MIN as f32, i16::MAX as f32) as i16).to_le_bytes(),
                    ),
                    VoxelType::F32 => bytes.extend_from_slice(&val.to_le_bytes()),
                }
            }
        }
    }
    write_bytes(path, &bytes)
}

/// Write an integer label array as a u8 NIfTI volume with the given geometry.
pub fn save_labels(path: &Path, labels: &Array3<u8>, spacing: [f64; 3], origin: [f64; 3]) -> Result<()> {
    let s = labels.shape();
    let extent = [s[0], s[1], s[2]];
    let mut bytes = build_header(extent, spacing, origin, VoxelType::U8);
    bytes.reserve(labels.len());
    for k in 0..extent[2] {
        for j in 0..extent[1] {
            for i in 0..extent[0] {
                bytes.push(labels[[i, j, k]]);
            }
        }
    }
    write_bytes(path, &bytes)
}

/// Load a u8 label array written by [`save_labels`].
pub fn load_labels(path: &Path) -> Result<(Array3<u8>, [f64; 3], [f64; 3])> {
    let v = load_volume(path)?;
    let labels = v.data.mapv(|x| x.round().clamp(0.0, 255.0) as u8);
    Ok((labels, v.spacing, v.origin))
}
