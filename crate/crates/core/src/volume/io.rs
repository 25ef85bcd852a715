//! NIfTI-1 (`.nii`, `.nii.gz`) and raw float32 + JSON sidecar volume files.

use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use flate2::read::GzDecoder;
use flate2::write::GzEncoder;
use flate2::Compression;
use ndarray::{Array3, ShapeBuilder};

use super::{Grid, GridHeader, LabelVolume, Volume};
use crate::error::{Error, Result};

const HEADER_SIZE: usize = 348;
const VOX_OFFSET: usize = 352;

const DT_UINT8: i16 = 2;
const DT_INT16: i16 = 4;
const DT_INT32: i16 = 8;
const DT_FLOAT32: i16 = 16;
const DT_FLOAT64: i16 = 64;
const DT_INT8: i16 = 256;
const DT_UINT16: i16 = 512;
const DT_UINT32: i16 = 768;

/// On-disk volume encodings, chosen from the file name.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum VolumeFormat {
    NiftiGz,
    Nifti,
    /// Little-endian float32 payload, x fastest, with a `.json` sidecar.
    Raw,
}

impl VolumeFormat {
    pub fn from_path(path: &Path) -> Result<Self> {
        let name = path.file_name().and_then(|n| n.to_str()).unwrap_or_default();
        if name.ends_with(".nii.gz") {
            Ok(Self::NiftiGz)
        } else if name.ends_with(".nii") {
            Ok(Self::Nifti)
        } else if name.ends_with(".raw") {
            Ok(Self::Raw)
        } else {
            Err(Error::Format {
                path: path.to_path_buf(),
                reason: "unsupported extension (expected .nii.gz, .nii or .raw)".into(),
            })
        }
    }
}

fn sidecar(path: &Path) -> PathBuf {
    path.with_extension("json")
}

/// Voxel element types that can be written to disk.
pub trait Voxel: Copy + 'static {
    const DATATYPE: i16;
    const BITPIX: i16;
    fn to_le(self, out: &mut Vec<u8>);
    fn as_f32(self) -> f32;
}

impl Voxel for f32 {
    const DATATYPE: i16 = DT_FLOAT32;
    const BITPIX: i16 = 32;
    fn to_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn as_f32(self) -> f32 {
        self
    }
}

impl Voxel for u8 {
    const DATATYPE: i16 = DT_UINT8;
    const BITPIX: i16 = 8;
    fn to_le(self, out: &mut Vec<u8>) {
        out.push(self);
    }
    fn as_f32(self) -> f32 {
        self as f32
    }
}

/// Raw geometry and intensities as decoded from disk, before validation.
struct Decoded {
    shape: [usize; 3],
    spacing: [f64; 3],
    origin: [f64; 3],
    values: Vec<f64>,
}

fn malformed(path: &Path, reason: impl Into<String>) -> Error {
    Error::Format {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

fn read_bytes(path: &Path, gz: bool) -> Result<Vec<u8>> {
    let raw = fs::read(path).map_err(|e| Error::io(path, e))?;
    if gz || (raw.len() >= 2 && raw[0] == 0x1f && raw[1] == 0x8b) {
        let mut out = Vec::new();
        GzDecoder::new(raw.as_slice())
            .read_to_end(&mut out)
            .map_err(|e| malformed(path, format!("gzip: {e}")))?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

struct Endian {
    big: bool,
}

impl Endian {
    fn i16(&self, b: &[u8], at: usize) -> i16 {
        let a = [b[at], b[at + 1]];
        if self.big { i16::from_be_bytes(a) } else { i16::from_le_bytes(a) }
    }
    fn i32(&self, b: &[u8], at: usize) -> i32 {
        let a = [b[at], b[at + 1], b[at + 2], b[at + 3]];
        if self.big { i32::from_be_bytes(a) } else { i32::from_le_bytes(a) }
    }
    fn f32(&self, b: &[u8], at: usize) -> f32 {
        let a = [b[at], b[at + 1], b[at + 2], b[at + 3]];
        if self.big { f32::from_be_bytes(a) } else { f32::from_le_bytes(a) }
    }
    fn f64(&self, b: &[u8], at: usize) -> f64 {
        let mut a = [0u8; 8];
        a.copy_from_slice(&b[at..at + 8]);
        if self.big { f64::from_be_bytes(a) } else { f64::from_le_bytes(a) }
    }
}

fn decode_nifti(path: &Path, bytes: &[u8]) -> Result<Decoded> {
    if bytes.len() < HEADER_SIZE {
        return Err(malformed(path, "file shorter than a NIfTI-1 header"));
    }
    let big = match (i32::from_le_bytes(bytes[0..4].try_into().unwrap()), i32::from_be_bytes(bytes[0..4].try_into().unwrap())) {
        (348, _) => false,
        (_, 348) => true,
        _ => return Err(malformed(path, "sizeof_hdr is not 348")),
    };
    let e = Endian { big };
    if &bytes[344..347] != b"n+1" && &bytes[344..347] != b"ni1" {
        return Err(malformed(path, "missing NIfTI-1 magic"));
    }
    let ndim = e.i16(bytes, 40);
    if !(1..=7).contains(&ndim) {
        return Err(malformed(path, format!("invalid dim[0] = {ndim}")));
    }
    let dims: Vec<i64> = (1..=ndim as usize).map(|i| e.i16(bytes, 40 + 2 * i) as i64).collect();
    if dims.iter().any(|&d| d < 1) {
        return Err(malformed(path, format!("non-positive dimension in {dims:?}")));
    }
    if dims.len() < 3 || dims[3..].iter().any(|&d| d != 1) {
        return Err(Error::InvalidVolume(format!(
            "{}: expected a 3D payload, got dimensions {dims:?}",
            path.display()
        )));
    }
    let shape = [dims[0] as usize, dims[1] as usize, dims[2] as usize];
    let spacing = [e.f32(bytes, 80) as f64, e.f32(bytes, 84) as f64, e.f32(bytes, 88) as f64];
    let qform = e.i16(bytes, 252);
    let sform = e.i16(bytes, 254);
    let origin = if qform > 0 {
        [e.f32(bytes, 268) as f64, e.f32(bytes, 272) as f64, e.f32(bytes, 276) as f64]
    } else if sform > 0 {
        [e.f32(bytes, 292) as f64, e.f32(bytes, 308) as f64, e.f32(bytes, 324) as f64]
    } else {
        [0.0; 3]
    };
    let datatype = e.i16(bytes, 70);
    let vox_offset = e.f32(bytes, 108);
    if !(vox_offset >= HEADER_SIZE as f32) {
        return Err(malformed(path, format!("invalid vox_offset {vox_offset}")));
    }
    let offset = vox_offset as usize;
    let mut slope = e.f32(bytes, 112) as f64;
    let inter = e.f32(bytes, 116) as f64;
    if slope == 0.0 || !slope.is_finite() {
        slope = 1.0;
    }
    let inter = if inter.is_finite() { inter } else { 0.0 };

    let n = shape[0] * shape[1] * shape[2];
    let width = match datatype {
        DT_UINT8 | DT_INT8 => 1,
        DT_INT16 | DT_UINT16 => 2,
        DT_INT32 | DT_UINT32 | DT_FLOAT32 => 4,
        DT_FLOAT64 => 8,
        other => return Err(malformed(path, format!("unsupported datatype code {other}"))),
    };
    let payload = bytes
        .get(offset..offset + n * width)
        .ok_or_else(|| malformed(path, "payload shorter than declared dimensions"))?;
    let values = (0..n)
        .map(|i| {
            let at = i * width;
            let v = match datatype {
                DT_UINT8 => payload[at] as f64,
                DT_INT8 => payload[at] as i8 as f64,
                DT_INT16 => e.i16(payload, at) as f64,
                DT_UINT16 => e.i16(payload, at) as u16 as f64,
                DT_INT32 => e.i32(payload, at) as f64,
                DT_UINT32 => e.i32(payload, at) as u32 as f64,
                DT_FLOAT32 => e.f32(payload, at) as f64,
                _ => e.f64(payload, at),
            };
            if slope == 1.0 && inter == 0.0 { v } else { v * slope + inter }
        })
        .collect();
    Ok(Decoded {
        shape,
        spacing,
        origin,
        values,
    })
}

fn decode_raw(path: &Path) -> Result<Decoded> {
    let side = sidecar(path);
    let text = fs::read_to_string(&side).map_err(|e| Error::io(&side, e))?;
    let header: GridHeader = serde_json::from_str(&text).map_err(|e| malformed(&side, e.to_string()))?;
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let n: usize = header.shape.iter().product();
    if bytes.len() != 4 * n {
        return Err(malformed(path, format!("expected {} payload bytes, found {}", 4 * n, bytes.len())));
    }
    let values = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    Ok(Decoded {
        shape: header.shape,
        spacing: header.spacing,
        origin: header.origin,
        values,
    })
}

fn decode(path: &Path) -> Result<Decoded> {
    if !path.exists() {
        return Err(Error::io(path, std::io::Error::new(std::io::ErrorKind::NotFound, "no such file")));
    }
    match VolumeFormat::from_path(path)? {
        VolumeFormat::NiftiGz => decode_nifti(path, &read_bytes(path, true)?),
        VolumeFormat::Nifti => decode_nifti(path, &read_bytes(path, false)?),
        VolumeFormat::Raw => decode_raw(path),
    }
}

/// Builds a standard-layout `[x, y, z]` array from x-fastest values.
fn from_fortran<T: Clone>(shape: [usize; 3], values: Vec<T>) -> Array3<T> {
    Array3::from_shape_vec((shape[0], shape[1], shape[2]).f(), values)
        .expect("value count matches shape")
        .as_standard_layout()
        .into_owned()
}

/// Reads an intensity volume.
pub fn load_volume(path: impl AsRef<Path>) -> Result<Volume> {
    let path = path.as_ref();
    let d = decode(path)?;
    let values: Vec<f32> = d.values.iter().map(|&v| v as f32).collect();
    Volume::new(from_fortran(d.shape, values), d.spacing, d.origin)
}

/// Reads a binary mask; any value other than 0 or 1 is an error.
pub fn load_label(path: impl AsRef<Path>) -> Result<LabelVolume> {
    let path = path.as_ref();
    let d = decode(path)?;
    if let Some(v) = d.values.iter().find(|&&v| v != 0.0 && v != 1.0) {
        return Err(Error::InvalidVolume(format!("{}: non-binary label value {v}", path.display())));
    }
    let values: Vec<u8> = d.values.iter().map(|&v| v as u8).collect();
    LabelVolume::new(from_fortran(d.shape, values), d.spacing, d.origin)
}

fn put_i16(h: &mut [u8], at: usize, v: i16) {
    h[at..at + 2].copy_from_slice(&v.to_le_bytes());
}

fn put_f32(h: &mut [u8], at: usize, v: f32) {
    h[at..at + 4].copy_from_slice(&v.to_le_bytes());
}

fn nifti_bytes<T: Voxel>(grid: &Grid<T>) -> Vec<u8> {
    let shape = grid.shape();
    let sp = grid.spacing();
    let org = grid.origin();
    let mut out = vec![0u8; VOX_OFFSET];
    out[0..4].copy_from_slice(&(HEADER_SIZE as i32).to_le_bytes());
    out[38] = b'r';
    put_i16(&mut out, 40, 3);
    for (i, &d) in shape.iter().enumerate() {
        put_i16(&mut out, 42 + 2 * i, d as i16);
    }
    for i in 3..7 {
        put_i16(&mut out, 42 + 2 * i, 1);
    }
    put_i16(&mut out, 70, T::DATATYPE);
    put_i16(&mut out, 72, T::BITPIX);
    put_f32(&mut out, 76, 1.0);
    for (i, &s) in sp.iter().enumerate() {
        put_f32(&mut out, 80 + 4 * i, s as f32);
    }
    put_f32(&mut out, 108, VOX_OFFSET as f32);
    put_f32(&mut out, 112, 1.0);
    out[123] = 2; // mm
    put_i16(&mut out, 252, 1);
    put_i16(&mut out, 254, 1);
    for (i, &o) in org.iter().enumerate() {
        put_f32(&mut out, 268 + 4 * i, o as f32);
    }
    for (row, base) in [280usize, 296, 312].into_iter().enumerate() {
        put_f32(&mut out, base + 4 * row, sp[row] as f32);
        put_f32(&mut out, base + 12, org[row] as f32);
    }
    out[344..348].copy_from_slice(b"n+1\0");
    out.reserve(grid.len() * (T::BITPIX as usize / 8));
    for &v in grid.data().t().iter() {
        v.to_le(&mut out);
    }
    out
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(bytes).map_err(|e| Error::io(path, e))
}

/// Writes a volume or mask; the format follows the file extension.
pub fn save_volume<T: Voxel>(grid: &Grid<T>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    match VolumeFormat::from_path(path)? {
        VolumeFormat::NiftiGz => {
            let f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
            let mut enc = GzEncoder::new(f, Compression::fast());
            enc.write_all(&nifti_bytes(grid)).map_err(|e| Error::io(path, e))?;
            enc.finish().map_err(|e| Error::io(path, e))?;
            Ok(())
        }
        VolumeFormat::Nifti => write_file(path, &nifti_bytes(grid)),
        VolumeFormat::Raw => {
            let mut bytes = Vec::with_capacity(4 * grid.len());
            for &v in grid.data().t().iter() {
                bytes.extend_from_slice(&v.as_f32().to_le_bytes());
            }
            write_file(path, &bytes)?;
            let header = GridHeader {
                shape: grid.shape(),
                spacing: grid.spacing(),
                origin: grid.origin(),
            };
            let side = sidecar(path);
            write_file(&side, serde_json::to_string_pretty(&header)?.as_bytes())
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_volume(shape: (usize, usize, usize), spacing: [f64; 3]) -> Volume {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let data = Array3::from_shape_simple_fn(shape, || rng.random_range(-100.0f32..100.0));
        Volume::new(data, spacing, [1.5, -2.0, 3.25]).unwrap()
    }

    #[test]
    fn nifti_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let v = random_volume((8, 8, 8), [0.3, 0.3, 0.6]);
        for name in ["a.nii.gz", "a.nii", "a.raw"] {
            let p = dir.path().join(name);
            save_volume(&v, &p).unwrap();
            let back = load_volume(&p).unwrap();
            assert_eq!(back.data(), v.data(), "{name}");
            for i in 0..3 {
                assert!((back.spacing()[i] - v.spacing()[i]).abs() <= 1e-6);
                assert!((back.origin()[i] - v.origin()[i]).abs() <= 1e-6);
            }
        }
    }

    #[test]
    fn anisotropic_shape_keeps_axis_order() {
        let dir = tempfile::tempdir().unwrap();
        let mut data = Array3::<f32>::zeros((3, 4, 5));
        data[[2, 1, 4]] = 7.0;
        let v = Volume::new(data, [1.0, 2.0, 3.0], [0.0; 3]).unwrap();
        let p = dir.path().join("b.nii.gz");
        save_volume(&v, &p).unwrap();
        let back = load_volume(&p).unwrap();
        assert_eq!(back.shape(), [3, 4, 5]);
        assert_eq!(back.data()[[2, 1, 4]], 7.0);
    }

    #[test]
    fn labels_round_trip_as_uint8() {
        let dir = tempfile::tempdir().unwrap();
        let mut data = Array3::<u8>::zeros((4, 4, 4));
        data[[1, 2, 3]] = 1;
        let lab = LabelVolume::new(data, [0.5; 3], [0.0; 3]).unwrap();
        let p = dir.path().join("m.nii.gz");
        save_volume(&lab, &p).unwrap();
        assert_eq!(load_label(&p).unwrap(), lab);
        // intensities with non-binary values are not labels
        let v = random_volume((2, 2, 2), [1.0; 3]);
        let q = dir.path().join("v.nii.gz");
        save_volume(&v, &q).unwrap();
        assert!(load_label(&q).is_err());
    }

    #[test]
    fn rejects_zero_spacing_and_2d_payloads() {
        let dir = tempfile::tempdir().unwrap();
        let v = random_volume((4, 4, 4), [1.0; 3]);
        let p = dir.path().join("z.nii");
        save_volume(&v, &p).unwrap();
        let mut bytes = fs::read(&p).unwrap();
        bytes[84..88].copy_from_slice(&0f32.to_le_bytes());
        fs::write(&p, &bytes).unwrap();
        assert!(matches!(load_volume(&p), Err(Error::InvalidVolume(_))));

        let mut bytes = fs::read(&p).unwrap();
        bytes[84..88].copy_from_slice(&1f32.to_le_bytes());
        bytes[40..42].copy_from_slice(&2i16.to_le_bytes());
        fs::write(&p, &bytes).unwrap();
        assert!(matches!(load_volume(&p), Err(Error::InvalidVolume(_))));
    }

    #[test]
    fn missing_and_unwritable_paths_error() {
        assert!(matches!(load_volume("/nonexistent/x.nii.gz"), Err(Error::Io { .. })));
        let v = random_volume((2, 2, 2), [1.0; 3]);
        assert!(matches!(save_volume(&v, "/nonexistent/dir/x.nii.gz"), Err(Error::Io { .. })));
        assert!(save_volume(&v, "/tmp/x.png").is_err());
    }

    #[test]
    fn truncated_header_is_malformed() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.nii");
        fs::write(&p, [0u8; 100]).unwrap();
        assert!(matches!(load_volume(&p), Err(Error::Format { .. })));
    }
}
