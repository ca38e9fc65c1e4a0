//! Single-file NIfTI-1 (`.nii`) reading and writing.
//!
//! Only little-endian files with `uint8`, `int16` or `float32` payloads are
//! supported. No reorientation is applied: array axis 0..3 are the file's
//! `dim[1..4]` and an optional fourth axis becomes the channel axis.

use std::fs;
use std::io::Write;
use std::path::Path;

use byteorder::{ByteOrder, LittleEndian};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

use super::{SemanticMap, Volume};

const HEADER_SIZE: usize = 348;
const VOX_OFFSET: usize = 352;

mod offsets {
    pub const SIZEOF_HDR: usize = 0;
    pub const DIM: usize = 40;
    pub const DATATYPE: usize = 70;
    pub const BITPIX: usize = 72;
    pub const PIXDIM: usize = 76;
    pub const VOX_OFFSET: usize = 108;
    pub const SCL_SLOPE: usize = 112;
    pub const SCL_INTER: usize = 116;
    pub const XYZT_UNITS: usize = 123;
    pub const DESCRIP: usize = 148;
    pub const QFORM_CODE: usize = 252;
    pub const SFORM_CODE: usize = 254;
    pub const SROW_X: usize = 280;
    pub const MAGIC: usize = 344;
}

/// Payload datatypes this reader understands.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NiftiDtype {
    U8,
    I16,
    F32,
}

impl NiftiDtype {
    pub fn code(self) -> i16 {
        match self {
            NiftiDtype::U8 => 2,
            NiftiDtype::I16 => 4,
            NiftiDtype::F32 => 16,
        }
    }

    pub fn from_code(code: i16) -> Option<Self> {
        match code {
            2 => Some(NiftiDtype::U8),
            4 => Some(NiftiDtype::I16),
            16 => Some(NiftiDtype::F32),
            _ => None,
        }
    }

    pub fn bytes(self) -> usize {
        match self {
            NiftiDtype::U8 => 1,
            NiftiDtype::I16 => 2,
            NiftiDtype::F32 => 4,
        }
    }
}

/// Decoded contents of a `.nii` file, values in `f64`, laid out row-major
/// `(H, W, L, C)`.
#[derive(Debug, Clone, PartialEq)]
pub struct NiftiImage {
    pub dims: [usize; 4],
    pub spacing: [f64; 3],
    pub dtype: NiftiDtype,
    pub data: Vec<f64>,
}

pub fn read_nifti(path: impl AsRef<Path>) -> Result<NiftiImage> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_nifti(&bytes, path)
}

fn parse_nifti(bytes: &[u8], path: &Path) -> Result<NiftiImage> {
    let fmt = |msg: &str| Error::Format {
        path: path.to_path_buf(),
        msg: msg.to_string(),
    };
    if bytes.len() < HEADER_SIZE {
        return Err(fmt("file shorter than the 348-byte header"));
    }
    let magic = &bytes[offsets::MAGIC..offsets::MAGIC + 4];
    if magic != b"n+1\0" {
        return Err(fmt(&format!(
            "bad magic {:?}",
            String::from_utf8_lossy(magic)
        )));
    }
    let sizeof_hdr = LittleEndian::read_i32(&bytes[offsets::SIZEOF_HDR..]);
    if sizeof_hdr != HEADER_SIZE as i32 {
        return Err(fmt(&format!(
            "sizeof_hdr = {sizeof_hdr} (big-endian files are not supported)"
        )));
    }
    let mut dim = [0i16; 8];
    LittleEndian::read_i16_into(&bytes[offsets::DIM..offsets::DIM + 16], &mut dim);
    let ndim = dim[0];
    if !(1..=4).contains(&ndim) {
        return Err(fmt(&format!(
            "dim[0] = {ndim}; only 1 to 4 axes are supported"
        )));
    }
    let mut dims = [1usize; 4];
    for a in 0..ndim as usize {
        let d = dim[a + 1];
        if d < 1 {
            return Err(fmt(&format!("dim[{}] = {d}", a + 1)));
        }
        dims[a] = d as usize;
    }
    let code = LittleEndian::read_i16(&bytes[offsets::DATATYPE..]);
    let dtype = NiftiDtype::from_code(code).ok_or_else(|| Error::UnsupportedDtype {
        path: path.to_path_buf(),
        code,
    })?;
    let mut pixdim = [0f32; 8];
    LittleEndian::read_f32_into(&bytes[offsets::PIXDIM..offsets::PIXDIM + 32], &mut pixdim);
    let spacing = [pixdim[1] as f64, pixdim[2] as f64, pixdim[3] as f64];
    let vox_offset = LittleEndian::read_f32(&bytes[offsets::VOX_OFFSET..]);
    if !(vox_offset >= HEADER_SIZE as f32) {
        return Err(fmt(&format!("vox_offset = {vox_offset}")));
    }
    let start = vox_offset as usize;
    let n: usize = dims.iter().product();
    let need = start + n * dtype.bytes();
    if bytes.len() < need {
        return Err(Error::Corrupt {
            path: path.to_path_buf(),
            msg: format!("payload truncated: {} of {need} bytes", bytes.len()),
        });
    }
    let slope = LittleEndian::read_f32(&bytes[offsets::SCL_SLOPE..]) as f64;
    let inter = LittleEndian::read_f32(&bytes[offsets::SCL_INTER..]) as f64;
    let scaled = slope != 0.0 && (slope != 1.0 || inter != 0.0);
    let payload = &bytes[start..need];
    let raw = |i: usize| -> f64 {
        match dtype {
            NiftiDtype::U8 => payload[i] as f64,
            NiftiDtype::I16 => LittleEndian::read_i16(&payload[2 * i..]) as f64,
            NiftiDtype::F32 => LittleEndian::read_f32(&payload[4 * i..]) as f64,
        }
    };
    // File order is x-fastest (column-major); convert to row-major (H, W, L, C).
    let [h, w, l, c] = dims;
    let mut data = vec![0.0; n];
    for ci in 0..c {
        for li in 0..l {
            for wi in 0..w {
                for hi in 0..h {
                    let fi = hi + h * (wi + w * (li + l * ci));
                    let v = raw(fi);
                    data[((hi * w + wi) * l + li) * c + ci] =
                        if scaled { slope * v + inter } else { v };
                }
            }
        }
    }
    Ok(NiftiImage {
        dims,
        spacing,
        dtype,
        data,
    })
}

pub fn write_nifti(path: impl AsRef<Path>, img: &NiftiImage) -> Result<()> {
    let path = path.as_ref();
    let [h, w, l, c] = img.dims;
    let n = h * w * l * c;
    if img.data.len() != n {
        return Err(Error::shape(format!(
            "{} values for dims {:?}",
            img.data.len(),
            img.dims
        )));
    }
    if img.data.iter().any(|v| !v.is_finite()) {
        return Err(Error::Domain(
            "refusing to write non-finite voxel values".into(),
        ));
    }
    let range_ok = |lo: f64, hi: f64| {
        img.data
            .iter()
            .all(|&v| v.fract() == 0.0 && v >= lo && v <= hi)
    };
    match img.dtype {
        NiftiDtype::U8 if !range_ok(0.0, 255.0) => {
            return Err(Error::Domain("values not representable as uint8".into()))
        }
        NiftiDtype::I16 if !range_ok(i16::MIN as f64, i16::MAX as f64) => {
            return Err(Error::Domain("values not representable as int16".into()))
        }
        _ => {}
    }

    let mut buf = vec![0u8; VOX_OFFSET + n * img.dtype.bytes()];
    LittleEndian::write_i32(&mut buf[offsets::SIZEOF_HDR..], HEADER_SIZE as i32);
    let ndim: i16 = if c > 1 { 4 } else { 3 };
    let dim: [i16; 8] = [ndim, h as i16, w as i16, l as i16, c as i16, 1, 1, 1];
    if img.dims.iter().any(|&d| d > i16::MAX as usize) {
        return Err(Error::shape("dimension exceeds NIfTI-1 limit of 32767"));
    }
    LittleEndian::write_i16_into(&dim, &mut buf[offsets::DIM..offsets::DIM + 16]);
    LittleEndian::write_i16(&mut buf[offsets::DATATYPE..], img.dtype.code());
    LittleEndian::write_i16(&mut buf[offsets::BITPIX..], (img.dtype.bytes() * 8) as i16);
    let pixdim: [f32; 8] = [
        1.0,
        img.spacing[0] as f32,
        img.spacing[1] as f32,
        img.spacing[2] as f32,
        1.0,
        1.0,
        1.0,
        1.0,
    ];
    LittleEndian::write_f32_into(&pixdim, &mut buf[offsets::PIXDIM..offsets::PIXDIM + 32]);
    LittleEndian::write_f32(&mut buf[offsets::VOX_OFFSET..], VOX_OFFSET as f32);
    LittleEndian::write_f32(&mut buf[offsets::SCL_SLOPE..], 1.0);
    LittleEndian::write_f32(&mut buf[offsets::SCL_INTER..], 0.0);
    buf[offsets::XYZT_UNITS] = 2; // millimetres
    let descrip = b"volsynth";
    buf[offsets::DESCRIP..offsets::DESCRIP + descrip.len()].copy_from_slice(descrip);
    // Scaled-identity sform so viewers place voxels at their spacing.
    LittleEndian::write_i16(&mut buf[offsets::QFORM_CODE..], 0);
    LittleEndian::write_i16(&mut buf[offsets::SFORM_CODE..], 1);
    for r in 0..3 {
        let mut row = [0f32; 4];
        row[r] = img.spacing[r] as f32;
        LittleEndian::write_f32_into(
            &row,
            &mut buf[offsets::SROW_X + 16 * r..offsets::SROW_X + 16 * (r + 1)],
        );
    }
    buf[offsets::MAGIC..offsets::MAGIC + 4].copy_from_slice(b"n+1\0");

    let payload = &mut buf[VOX_OFFSET..];
    for ci in 0..c {
        for li in 0..l {
            for wi in 0..w {
                for hi in 0..h {
                    let fi = hi + h * (wi + w * (li + l * ci));
                    let v = img.data[((hi * w + wi) * l + li) * c + ci];
                    match img.dtype {
                        NiftiDtype::U8 => payload[fi] = v as u8,
                        NiftiDtype::I16 => {
                            LittleEndian::write_i16(&mut payload[2 * fi..], v as i16)
                        }
                        NiftiDtype::F32 => {
                            LittleEndian::write_f32(&mut payload[4 * fi..], v as f32)
                        }
                    }
                }
            }
        }
    }
    atomic_write(path, &buf)
}

/// Write to a sibling temp file, then rename over `path`.
pub(crate) fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension(format!(
        "{}.tmp",
        path.extension().and_then(|e| e.to_str()).unwrap_or("")
    ));
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    drop(f);
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

/// Load an intensity volume. Values are returned un-normalized; the observed
/// range is recorded in `intensity_range`.
pub fn load_volume<T: Scalar>(path: impl AsRef<Path>) -> Result<Volume<T>> {
    let img = read_nifti(path)?;
    let data = Tensor::new(
        img.dims.to_vec(),
        img.data.iter().map(|&v| T::lit(v)).collect(),
    )?;
    Volume::new(data, img.spacing)
}

/// Load a label map. Every label must be an integer in `[0, num_classes)`.
pub fn load_map(path: impl AsRef<Path>, num_classes: usize) -> Result<SemanticMap> {
    let path = path.as_ref();
    let img = read_nifti(path)?;
    if img.dims[3] != 1 {
        return Err(Error::Format {
            path: path.to_path_buf(),
            msg: "label map has channels".into(),
        });
    }
    let mut labels = Vec::with_capacity(img.data.len());
    for &v in &img.data {
        if v.fract() != 0.0 || v < 0.0 {
            return Err(Error::InvalidLabel {
                label: v as i64,
                num_classes,
            });
        }
        labels.push(v as u16);
    }
    SemanticMap::new([img.dims[0], img.dims[1], img.dims[2]], labels, num_classes)
}

/// Save a volume as `float32`.
pub fn save_nifti<T: Scalar>(volume: &Volume<T>, path: impl AsRef<Path>) -> Result<()> {
    save_nifti_as(volume, path, NiftiDtype::F32)
}

/// Save a volume with an explicit payload type. Integer types require
/// integral values within range.
pub fn save_nifti_as<T: Scalar>(
    volume: &Volume<T>,
    path: impl AsRef<Path>,
    dtype: NiftiDtype,
) -> Result<()> {
    let s = volume.data.shape();
    let img = NiftiImage {
        dims: [s[0], s[1], s[2], s[3]],
        spacing: volume.spacing,
        dtype,
        data: volume.data.data().iter().map(|v| v.as_f64()).collect(),
    };
    write_nifti(path, &img)
}

pub fn save_map(map: &SemanticMap, spacing: [f64; 3], path: impl AsRef<Path>) -> Result<()> {
    let [h, w, l] = map.dims;
    let dtype = if map.num_classes <= 256 {
        NiftiDtype::U8
    } else {
        NiftiDtype::I16
    };
    let img = NiftiImage {
        dims: [h, w, l, 1],
        spacing,
        dtype,
        data: map.labels.iter().map(|&v| v as f64).collect(),
    };
    write_nifti(path, &img)
}
