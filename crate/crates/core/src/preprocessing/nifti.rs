//! Minimal NIfTI-1 single-file reader and writer (`.nii`, `.nii.gz`).
//!
//! Only what 2-D cine volumes need: dims up to 4, the common scalar data
//! types, and `scl_slope`/`scl_inter` scaling. Axis 1 (x) maps to image
//! columns and axis 2 (y) to rows.

use std::fs::File;
use std::io::{BufReader, Read, Write};
use std::path::{Path, PathBuf};

use flate2::read::MultiGzDecoder;
use flate2::write::GzEncoder;
use flate2::Compression;
use ndarray::Array2;

use crate::error::{Error, Result};

const HEADER_SIZE: usize = 348;
const DATA_OFFSET: usize = 352;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NiftiDataType {
    U8,
    I8,
    I16,
    U16,
    I32,
    U32,
    F32,
    F64,
}

impl NiftiDataType {
    fn from_code(code: i16) -> Option<Self> {
        Some(match code {
            2 => Self::U8,
            4 => Self::I16,
            8 => Self::I32,
            16 => Self::F32,
            64 => Self::F64,
            256 => Self::I8,
            512 => Self::U16,
            768 => Self::U32,
            _ => return None,
        })
    }

    fn code(self) -> i16 {
        match self {
            Self::U8 => 2,
            Self::I16 => 4,
            Self::I32 => 8,
            Self::F32 => 16,
            Self::F64 => 64,
            Self::I8 => 256,
            Self::U16 => 512,
            Self::U32 => 768,
        }
    }

    fn size(self) -> usize {
        match self {
            Self::U8 | Self::I8 => 1,
            Self::I16 | Self::U16 => 2,
            Self::I32 | Self::U32 | Self::F32 => 4,
            Self::F64 => 8,
        }
    }
}

/// A decoded volume, viewed as a stack of 2-D frames.
#[derive(Debug, Clone)]
pub struct NiftiVolume {
    width: usize,
    height: usize,
    frames: usize,
    /// Pixel size along (rows, cols), from `pixdim[2]` and `pixdim[1]`.
    spacing: Option<(f64, f64)>,
    data: Vec<f64>,
}

impl NiftiVolume {
    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn frame_count(&self) -> usize {
        self.frames
    }

    pub fn spacing(&self) -> Option<(f64, f64)> {
        self.spacing
    }

    /// Frame `t` as a `height x width` array of the stored (scaled) values.
    pub fn frame(&self, t: usize) -> Array2<f64> {
        let plane = self.width * self.height;
        let slice = &self.data[t * plane..(t + 1) * plane];
        Array2::from_shape_fn((self.height, self.width), |(r, c)| slice[r * self.width + c])
    }
}

fn unreadable(path: &Path, reason: impl Into<String>) -> Error {
    Error::UnreadableVolume {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

fn is_gz(path: &Path) -> bool {
    path.extension().is_some_and(|e| e == "gz")
}

pub fn read_nifti(path: &Path) -> Result<NiftiVolume> {
    let file = File::open(path).map_err(|e| unreadable(path, e.to_string()))?;
    let mut bytes = Vec::new();
    let read = if is_gz(path) {
        MultiGzDecoder::new(BufReader::new(file)).read_to_end(&mut bytes)
    } else {
        BufReader::new(file).read_to_end(&mut bytes)
    };
    read.map_err(|e| unreadable(path, e.to_string()))?;
    parse_nifti(&bytes).map_err(|reason| unreadable(path, reason))
}

fn parse_nifti(bytes: &[u8]) -> std::result::Result<NiftiVolume, String> {
    if bytes.len() < HEADER_SIZE {
        return Err(format!("file is {} bytes, shorter than a header", bytes.len()));
    }
    let little = i32::from_le_bytes(bytes[0..4].try_into().unwrap()) == HEADER_SIZE as i32;
    let big = i32::from_be_bytes(bytes[0..4].try_into().unwrap()) == HEADER_SIZE as i32;
    if !little && !big {
        return Err("not a NIfTI-1 header (sizeof_hdr != 348)".into());
    }
    let i16_at = |off: usize| {
        let b: [u8; 2] = bytes[off..off + 2].try_into().unwrap();
        if little {
            i16::from_le_bytes(b)
        } else {
            i16::from_be_bytes(b)
        }
    };
    let f32_at = |off: usize| {
        let b: [u8; 4] = bytes[off..off + 4].try_into().unwrap();
        if little {
            f32::from_le_bytes(b)
        } else {
            f32::from_be_bytes(b)
        }
    };
    let magic = &bytes[344..348];
    if magic != b"n+1\0" {
        return Err("only single-file NIfTI-1 (magic n+1) is supported".into());
    }

    let ndim = i16_at(40);
    if !(1..=7).contains(&ndim) {
        return Err(format!("invalid dimension count {ndim}"));
    }
    let dims: Vec<usize> = (1..=ndim as usize)
        .map(|i| usize::try_from(i16_at(40 + 2 * i)).map_err(|_| "negative dimension".to_string()))
        .collect::<std::result::Result<_, _>>()?;
    let dim = |i: usize| dims.get(i).copied().unwrap_or(1);
    let (width, height) = (dim(0), dim(1));
    // Stacked 2-D frames may sit on axis 3 or, with a singleton z, on axis 4.
    let frames = match (dim(2), dim(3)) {
        (z, 1) => z,
        (1, t) => t,
        (z, t) => return Err(format!("3-D + time volumes ({z} slices x {t} frames) are not supported")),
    };
    if dims.iter().skip(4).any(|&d| d > 1) {
        return Err("volumes with more than 4 dimensions are not supported".into());
    }

    let dtype = NiftiDataType::from_code(i16_at(70))
        .ok_or_else(|| format!("unsupported datatype code {}", i16_at(70)))?;
    let pixdim = [f32_at(80), f32_at(84)];
    let spacing = (pixdim[0] > 0.0 && pixdim[1] > 0.0)
        .then_some((f64::from(pixdim[1]), f64::from(pixdim[0])));
    let vox_offset = f32_at(108).max(HEADER_SIZE as f32) as usize;
    let (slope, inter) = (f32_at(112), f32_at(116));
    let (slope, inter) = if slope == 0.0 || !slope.is_finite() {
        (1.0, 0.0)
    } else {
        (f64::from(slope), f64::from(inter))
    };

    let count = width * height * frames;
    let needed = vox_offset + count * dtype.size();
    if bytes.len() < needed {
        return Err(format!("truncated data: need {needed} bytes, have {}", bytes.len()));
    }
    let raw = &bytes[vox_offset..needed];
    let data = raw
        .chunks_exact(dtype.size())
        .map(|c| decode(c, dtype, little) * slope + inter)
        .collect();
    Ok(NiftiVolume {
        width,
        height,
        frames,
        spacing,
        data,
    })
}

fn decode(c: &[u8], dtype: NiftiDataType, little: bool) -> f64 {
    macro_rules! num {
        ($t:ty) => {{
            let b = c.try_into().unwrap();
            (if little { <$t>::from_le_bytes(b) } else { <$t>::from_be_bytes(b) }) as f64
        }};
    }
    match dtype {
        NiftiDataType::U8 => c[0] as f64,
        NiftiDataType::I8 => c[0] as i8 as f64,
        NiftiDataType::I16 => num!(i16),
        NiftiDataType::U16 => num!(u16),
        NiftiDataType::I32 => num!(i32),
        NiftiDataType::U32 => num!(u32),
        NiftiDataType::F32 => num!(f32),
        NiftiDataType::F64 => num!(f64),
    }
}

/// Writes equally-sized frames as a little-endian NIfTI-1 volume with frames on
/// axis 3. Gzip-compresses when the path ends in `.gz`.
pub fn write_nifti(
    path: &Path,
    frames: &[Array2<f64>],
    dtype: NiftiDataType,
    spacing: Option<(f64, f64)>,
) -> Result<PathBuf> {
    let write_err = |e: std::io::Error| Error::IoWrite {
        path: path.to_path_buf(),
        reason: e.to_string(),
    };
    let first = frames.first().ok_or_else(|| Error::EmptyVolume(path.to_path_buf()))?;
    let (height, width) = first.dim();
    if let Some(bad) = frames.iter().find(|f| f.dim() != (height, width)) {
        return Err(Error::ShapeMismatch {
            expected: vec![height, width],
            actual: vec![bad.nrows(), bad.ncols()],
        });
    }

    let mut header = vec![0u8; DATA_OFFSET];
    header[0..4].copy_from_slice(&(HEADER_SIZE as i32).to_le_bytes());
    let dims: [i16; 8] = [3, width as i16, height as i16, frames.len() as i16, 1, 1, 1, 1];
    for (i, d) in dims.iter().enumerate() {
        header[40 + 2 * i..42 + 2 * i].copy_from_slice(&d.to_le_bytes());
    }
    header[70..72].copy_from_slice(&dtype.code().to_le_bytes());
    header[72..74].copy_from_slice(&((dtype.size() * 8) as i16).to_le_bytes());
    let (dy, dx) = spacing.unwrap_or((1.0, 1.0));
    let pixdim: [f32; 4] = [1.0, dx as f32, dy as f32, 1.0];
    for (i, p) in pixdim.iter().enumerate() {
        header[76 + 4 * i..80 + 4 * i].copy_from_slice(&p.to_le_bytes());
    }
    header[108..112].copy_from_slice(&(DATA_OFFSET as f32).to_le_bytes());
    header[112..116].copy_from_slice(&1f32.to_le_bytes());
    header[344..348].copy_from_slice(b"n+1\0");

    let mut body = Vec::with_capacity(width * height * frames.len() * dtype.size());
    for frame in frames {
        for &v in frame.iter() {
            match dtype {
                NiftiDataType::U8 => body.push(v as u8),
                NiftiDataType::I8 => body.push(v as i8 as u8),
                NiftiDataType::I16 => body.extend((v as i16).to_le_bytes()),
                NiftiDataType::U16 => body.extend((v as u16).to_le_bytes()),
                NiftiDataType::I32 => body.extend((v as i32).to_le_bytes()),
                NiftiDataType::U32 => body.extend((v as u32).to_le_bytes()),
                NiftiDataType::F32 => body.extend((v as f32).to_le_bytes()),
                NiftiDataType::F64 => body.extend(v.to_le_bytes()),
            }
        }
    }

    let file = File::create(path).map_err(write_err)?;
    if is_gz(path) {
        let mut enc = GzEncoder::new(file, Compression::default());
        enc.write_all(&header).map_err(write_err)?;
        enc.write_all(&body).map_err(write_err)?;
        enc.finish().map_err(write_err)?;
    } else {
        let mut file = file;
        file.write_all(&header).map_err(write_err)?;
        file.write_all(&body).map_err(write_err)?;
    }
    Ok(path.to_path_buf())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_gz_preserves_values_and_layout() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vol.nii.gz");
        let frames: Vec<Array2<f64>> = (0..3)
            .map(|t| Array2::from_shape_fn((5, 7), |(r, c)| (t * 100 + r * 10 + c) as f64 + 0.25))
            .collect();
        write_nifti(&path, &frames, NiftiDataType::F32, Some((0.3, 0.2))).unwrap();
        let vol = read_nifti(&path).unwrap();
        assert_eq!((vol.height(), vol.width(), vol.frame_count()), (5, 7, 3));
        assert_eq!(vol.frame(2), frames[2]);
        let (dy, dx) = vol.spacing().unwrap();
        assert!((dy - 0.3).abs() < 1e-6 && (dx - 0.2).abs() < 1e-6);
    }

    #[test]
    fn rejects_garbage() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.nii");
        std::fs::write(&path, vec![7u8; 400]).unwrap();
        assert!(matches!(read_nifti(&path), Err(Error::UnreadableVolume { .. })));
        assert!(matches!(
            read_nifti(&dir.path().join("missing.nii")),
            Err(Error::UnreadableVolume { .. })
        ));
    }
}
