//! Minimal NIfTI-1 single-file (`.nii`, `.nii.gz`) reader and writer.
//!
//! Only 3D scalar volumes and 4D vector fields (fourth dim of size 3) are
//! accepted, with datatypes uint8, int16, int32 and float32.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{BigEndian, ByteOrder, LittleEndian};
use flate2::read::MultiGzDecoder;
use flate2::write::GzEncoder;
use flate2::Compression;
use nalgebra::Matrix3;

use super::{Geometry, LabelSchema, LabelVolume, ScalarVolume, Volume};
use crate::error::{Error, Result};

const HEADER_SIZE: usize = 348;
const VOX_OFFSET: usize = 352;
const INTENT_VECTOR: i16 = 1007;
const XYZT_MM: u8 = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NiftiDatatype {
    U8,
    I16,
    I32,
    F32,
}

impl NiftiDatatype {
    fn from_code(code: i16) -> Result<Self> {
        match code {
            2 => Ok(Self::U8),
            4 => Ok(Self::I16),
            8 => Ok(Self::I32),
            16 => Ok(Self::F32),
            other => Err(Error::Format(format!(
                "unsupported NIfTI datatype code {other} (accepted: uint8, int16, int32, float32)"
            ))),
        }
    }

    fn code(self) -> i16 {
        match self {
            Self::U8 => 2,
            Self::I16 => 4,
            Self::I32 => 8,
            Self::F32 => 16,
        }
    }

    fn size(self) -> usize {
        match self {
            Self::U8 => 1,
            Self::I16 => 2,
            Self::I32 | Self::F32 => 4,
        }
    }

    pub fn is_integer(self) -> bool {
        !matches!(self, Self::F32)
    }
}

/// Decoded image: geometry plus values in internal row-major order.
/// For vector images `components == 3` and values are interleaved per voxel.
#[derive(Debug, Clone)]
pub struct NiftiImage {
    pub geometry: Geometry,
    pub components: usize,
    pub datatype: NiftiDatatype,
    pub values: Vec<f64>,
}

pub enum LoadedVolume {
    Labels(LabelVolume),
    Scalar(ScalarVolume),
}

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = BufReader::new(file);
    let mut raw = Vec::new();
    reader
        .read_to_end(&mut raw)
        .map_err(|e| Error::io(path, e))?;
    if raw.len() >= 2 && raw[0] == 0x1f && raw[1] == 0x8b {
        let mut out = Vec::new();
        MultiGzDecoder::new(&raw[..])
            .read_to_end(&mut out)
            .map_err(|e| Error::Format(format!("{}: bad gzip stream: {e}", path.display())))?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

struct HeaderView<'a> {
    bytes: &'a [u8],
    big_endian: bool,
}

impl HeaderView<'_> {
    fn i16(&self, off: usize) -> i16 {
        if self.big_endian {
            BigEndian::read_i16(&self.bytes[off..])
        } else {
            LittleEndian::read_i16(&self.bytes[off..])
        }
    }

    fn f32(&self, off: usize) -> f32 {
        if self.big_endian {
            BigEndian::read_f32(&self.bytes[off..])
        } else {
            LittleEndian::read_f32(&self.bytes[off..])
        }
    }
}

pub fn read_nifti(path: impl AsRef<Path>) -> Result<NiftiImage> {
    let path = path.as_ref();
    let bytes = read_bytes(path)?;
    decode(&bytes).map_err(|e| match e {
        Error::Format(msg) => Error::Format(format!("{}: {msg}", path.display())),
        other => other,
    })
}

fn decode(bytes: &[u8]) -> Result<NiftiImage> {
    if bytes.len() < HEADER_SIZE {
        return Err(Error::Format("file shorter than a NIfTI-1 header".into()));
    }
    let big_endian = match (
        LittleEndian::read_i32(&bytes[0..]),
        BigEndian::read_i32(&bytes[0..]),
    ) {
        (348, _) => false,
        (_, 348) => true,
        _ => return Err(Error::Format("sizeof_hdr is not 348".into())),
    };
    if &bytes[344..347] != b"n+1" {
        return Err(Error::Format(
            "not a single-file NIfTI-1 image (magic != n+1)".into(),
        ));
    }
    let h = HeaderView { bytes, big_endian };

    let ndim = h.i16(40);
    let dim: Vec<i64> = (0..8).map(|i| h.i16(40 + 2 * i) as i64).collect();
    let components = match ndim {
        3 => 1,
        4 if dim[4] == 3 => 3,
        4 if dim[4] == 1 => 1,
        n => {
            return Err(Error::Format(format!(
                "expected a 3D volume (or 4D vector field with 3 components), got {n}D with dims {:?}",
                &dim[1..=(n.clamp(1, 7) as usize)]
            )))
        }
    };
    if dim[1..=3].iter().any(|&d| d <= 0) {
        return Err(Error::Format(format!("non-positive dims {:?}", &dim[1..=3])));
    }
    let dims = [dim[1] as usize, dim[2] as usize, dim[3] as usize];
    let datatype = NiftiDatatype::from_code(h.i16(70))?;

    let pixdim: Vec<f64> = (0..8).map(|i| h.f32(76 + 4 * i) as f64).collect();
    let vox_offset = h.f32(108);
    if vox_offset.is_nan() || vox_offset < HEADER_SIZE as f32 {
        return Err(Error::Format(format!("invalid vox_offset {vox_offset}")));
    }
    let vox_offset = vox_offset as usize;
    let slope = h.f32(112) as f64;
    let inter = h.f32(116) as f64;
    let qform_code = h.i16(252);
    let sform_code = h.i16(254);

    let (spacing, origin, direction) = if sform_code > 0 {
        let row = |off: usize| [h.f32(off) as f64, h.f32(off + 4) as f64, h.f32(off + 8) as f64, h.f32(off + 12) as f64];
        let (rx, ry, rz) = (row(280), row(296), row(312));
        let m = Matrix3::new(rx[0], rx[1], rx[2], ry[0], ry[1], ry[2], rz[0], rz[1], rz[2]);
        let mut spacing = [0.0; 3];
        let mut dir = Matrix3::zeros();
        for (a, sp) in spacing.iter_mut().enumerate() {
            let col = m.column(a);
            let n = col.norm();
            if n <= 0.0 {
                return Err(Error::Geometry("sform has a zero column".into()));
            }
            *sp = n;
            dir.set_column(a, &(col / n));
        }
        (spacing, [rx[3], ry[3], rz[3]], dir)
    } else if qform_code > 0 {
        let (b, c, d) = (h.f32(256) as f64, h.f32(260) as f64, h.f32(264) as f64);
        let a = (1.0 - (b * b + c * c + d * d)).max(0.0).sqrt();
        let mut r = Matrix3::new(
            a * a + b * b - c * c - d * d,
            2.0 * (b * c - a * d),
            2.0 * (b * d + a * c),
            2.0 * (b * c + a * d),
            a * a + c * c - b * b - d * d,
            2.0 * (c * d - a * b),
            2.0 * (b * d - a * c),
            2.0 * (c * d + a * b),
            a * a + d * d - c * c - b * b,
        );
        let qfac = if pixdim[0] < 0.0 { -1.0 } else { 1.0 };
        let col2 = r.column(2) * qfac;
        r.set_column(2, &col2);
        let spacing = [pixdim[1].abs(), pixdim[2].abs(), pixdim[3].abs()];
        let origin = [h.f32(268) as f64, h.f32(272) as f64, h.f32(276) as f64];
        (spacing, origin, r)
    } else {
        let sp = |v: f64| if v > 0.0 { v } else { 1.0 };
        (
            [sp(pixdim[1].abs()), sp(pixdim[2].abs()), sp(pixdim[3].abs())],
            [0.0; 3],
            Matrix3::identity(),
        )
    };
    let geometry = Geometry::new(dims, spacing, origin, direction)?;

    let nvox = geometry.len();
    let total = nvox * components;
    let need = vox_offset + total * datatype.size();
    if bytes.len() < need {
        return Err(Error::Format(format!(
            "truncated data: need {need} bytes, have {}",
            bytes.len()
        )));
    }
    let data = &bytes[vox_offset..need];
    let raw = |n: usize| -> f64 {
        let off = n * datatype.size();
        let b = &data[off..];
        match (datatype, big_endian) {
            (NiftiDatatype::U8, _) => b[0] as f64,
            (NiftiDatatype::I16, false) => LittleEndian::read_i16(b) as f64,
            (NiftiDatatype::I16, true) => BigEndian::read_i16(b) as f64,
            (NiftiDatatype::I32, false) => LittleEndian::read_i32(b) as f64,
            (NiftiDatatype::I32, true) => BigEndian::read_i32(b) as f64,
            (NiftiDatatype::F32, false) => LittleEndian::read_f32(b) as f64,
            (NiftiDatatype::F32, true) => BigEndian::read_f32(b) as f64,
        }
    };
    let scale = slope != 0.0 && slope.is_finite() && !(slope == 1.0 && inter == 0.0);

    // File order is first-index-fastest with the component outermost.
    let [n0, n1, n2] = dims;
    let mut values = vec![0.0; total];
    for c in 0..components {
        for k in 0..n2 {
            for j in 0..n1 {
                for i in 0..n0 {
                    let file_idx = ((c * n2 + k) * n1 + j) * n0 + i;
                    let mut v = raw(file_idx);
                    if scale {
                        v = slope * v + inter;
                    }
                    values[geometry.index(i, j, k) * components + c] = v;
                }
            }
        }
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::Format("non-finite voxel values".into()));
    }
    Ok(NiftiImage {
        geometry,
        components,
        datatype,
        values,
    })
}

fn require_scalar(img: &NiftiImage) -> Result<()> {
    if img.components != 1 {
        return Err(Error::Format(
            "expected a 3D scalar volume, got a vector field".into(),
        ));
    }
    Ok(())
}

fn to_labels(img: NiftiImage, schema: &LabelSchema) -> Result<LabelVolume> {
    require_scalar(&img)?;
    let mut out = Vec::with_capacity(img.values.len());
    for &v in &img.values {
        if v.fract() != 0.0 || !(0.0..=u16::MAX as f64).contains(&v) {
            return Err(Error::Format(format!(
                "label value {v} is not a small nonnegative integer"
            )));
        }
        out.push(v as u16);
    }
    LabelVolume::new(Volume::new(img.geometry, out)?, schema.clone())
}

pub fn load_labels(path: impl AsRef<Path>, schema: &LabelSchema) -> Result<LabelVolume> {
    to_labels(read_nifti(path)?, schema)
}

pub fn load_scalar(path: impl AsRef<Path>) -> Result<ScalarVolume> {
    let img = read_nifti(path)?;
    require_scalar(&img)?;
    Volume::new(img.geometry, img.values)
}

/// Integer files load as labels, float files as scalar images.
pub fn load_volume(path: impl AsRef<Path>, schema: &LabelSchema) -> Result<LoadedVolume> {
    let img = read_nifti(path)?;
    require_scalar(&img)?;
    if img.datatype.is_integer() {
        Ok(LoadedVolume::Labels(to_labels(img, schema)?))
    } else {
        Ok(LoadedVolume::Scalar(Volume::new(img.geometry, img.values)?))
    }
}

/// Vector field with displacement components in millimetres (RAS order).
pub fn load_field(path: impl AsRef<Path>) -> Result<(Geometry, Vec<[f64; 3]>)> {
    let img = read_nifti(path)?;
    if img.components != 3 {
        return Err(Error::Format(
            "expected a 4D field with a fourth dimension of size 3".into(),
        ));
    }
    let vectors = img
        .values
        .chunks_exact(3)
        .map(|c| [c[0], c[1], c[2]])
        .collect();
    Ok((img.geometry, vectors))
}

/// Unit quaternion (b, c, d) and qfac of an orthonormal direction matrix.
fn quaternion(dir: &Matrix3<f64>) -> ([f64; 3], f64) {
    let mut r = *dir;
    let qfac = if r.determinant() < 0.0 {
        let c2 = -r.column(2);
        r.set_column(2, &c2);
        -1.0
    } else {
        1.0
    };
    let (r11, r12, r13) = (r[(0, 0)], r[(0, 1)], r[(0, 2)]);
    let (r21, r22, r23) = (r[(1, 0)], r[(1, 1)], r[(1, 2)]);
    let (r31, r32, r33) = (r[(2, 0)], r[(2, 1)], r[(2, 2)]);
    let trace = r11 + r22 + r33 + 1.0;
    let (a, mut b, mut c, mut d);
    if trace > 0.5 {
        a = 0.5 * trace.sqrt();
        b = 0.25 * (r32 - r23) / a;
        c = 0.25 * (r13 - r31) / a;
        d = 0.25 * (r21 - r12) / a;
    } else {
        let xd = 1.0 + r11 - (r22 + r33);
        let yd = 1.0 + r22 - (r11 + r33);
        let zd = 1.0 + r33 - (r11 + r22);
        if xd > 1.0 {
            b = 0.5 * xd.sqrt();
            c = 0.25 * (r12 + r21) / b;
            d = 0.25 * (r13 + r31) / b;
            a = 0.25 * (r32 - r23) / b;
        } else if yd > 1.0 {
            c = 0.5 * yd.sqrt();
            b = 0.25 * (r12 + r21) / c;
            d = 0.25 * (r23 + r32) / c;
            a = 0.25 * (r13 - r31) / c;
        } else {
            d = 0.5 * zd.sqrt();
            b = 0.25 * (r13 + r31) / d;
            c = 0.25 * (r23 + r32) / d;
            a = 0.25 * (r21 - r12) / d;
        }
        if a < 0.0 {
            b = -b;
            c = -c;
            d = -d;
        }
    }
    ([b, c, d], qfac)
}

fn encode(
    geometry: &Geometry,
    components: usize,
    datatype: NiftiDatatype,
    values: &[f64],
) -> Vec<u8> {
    let mut h = vec![0u8; VOX_OFFSET];
    LittleEndian::write_i32(&mut h[0..], HEADER_SIZE as i32);
    h[38] = b'r';
    let ndim: i16 = if components == 1 { 3 } else { 4 };
    let mut dim = [1i16; 8];
    dim[0] = ndim;
    for a in 0..3 {
        dim[a + 1] = geometry.dims[a] as i16;
    }
    dim[4] = components as i16;
    for (i, d) in dim.iter().enumerate() {
        LittleEndian::write_i16(&mut h[40 + 2 * i..], *d);
    }
    if components == 3 {
        LittleEndian::write_i16(&mut h[68..], INTENT_VECTOR);
    }
    LittleEndian::write_i16(&mut h[70..], datatype.code());
    LittleEndian::write_i16(&mut h[72..], (datatype.size() * 8) as i16);

    let ([qb, qc, qd], qfac) = quaternion(&geometry.direction);
    let pixdim = [qfac, geometry.spacing[0], geometry.spacing[1], geometry.spacing[2], 1.0, 1.0, 1.0, 1.0];
    for (i, p) in pixdim.iter().enumerate() {
        LittleEndian::write_f32(&mut h[76 + 4 * i..], *p as f32);
    }
    LittleEndian::write_f32(&mut h[108..], VOX_OFFSET as f32);
    LittleEndian::write_f32(&mut h[112..], 1.0);
    LittleEndian::write_f32(&mut h[116..], 0.0);
    h[123] = XYZT_MM;
    let descrip = concat!("kneemorph ", env!("CARGO_PKG_VERSION"));
    h[148..148 + descrip.len()].copy_from_slice(descrip.as_bytes());
    LittleEndian::write_i16(&mut h[252..], 1);
    LittleEndian::write_i16(&mut h[254..], 1);
    for (i, q) in [qb, qc, qd].iter().enumerate() {
        LittleEndian::write_f32(&mut h[256 + 4 * i..], *q as f32);
    }
    for a in 0..3 {
        LittleEndian::write_f32(&mut h[268 + 4 * a..], geometry.origin[a] as f32);
    }
    let lin = geometry.linear();
    for r in 0..3 {
        let off = 280 + 16 * r;
        for c in 0..3 {
            LittleEndian::write_f32(&mut h[off + 4 * c..], lin[(r, c)] as f32);
        }
        LittleEndian::write_f32(&mut h[off + 12..], geometry.origin[r] as f32);
    }
    h[344..348].copy_from_slice(b"n+1\0");

    let [n0, n1, n2] = geometry.dims;
    let mut body = vec![0u8; values.len() * datatype.size()];
    for c in 0..components {
        for k in 0..n2 {
            for j in 0..n1 {
                for i in 0..n0 {
                    let file_idx = ((c * n2 + k) * n1 + j) * n0 + i;
                    let v = values[geometry.index(i, j, k) * components + c];
                    let out = &mut body[file_idx * datatype.size()..];
                    match datatype {
                        NiftiDatatype::U8 => out[0] = v as u8,
                        NiftiDatatype::I16 => LittleEndian::write_i16(out, v as i16),
                        NiftiDatatype::I32 => LittleEndian::write_i32(out, v as i32),
                        NiftiDatatype::F32 => LittleEndian::write_f32(out, v as f32),
                    }
                }
            }
        }
    }
    h.extend_from_slice(&body);
    h
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let gz = path
        .file_name()
        .and_then(|n| n.to_str())
        .is_some_and(|n| n.ends_with(".gz"));
    let mut w = BufWriter::new(file);
    if gz {
        let mut enc = GzEncoder::new(&mut w, Compression::default());
        enc.write_all(bytes).map_err(|e| Error::io(path, e))?;
        enc.finish().map_err(|e| Error::io(path, e))?;
    } else {
        w.write_all(bytes).map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn save_labels(path: impl AsRef<Path>, vol: &LabelVolume) -> Result<()> {
    let max = vol.labels.data.iter().copied().max().unwrap_or(0);
    let dt = if max <= u8::MAX as u16 {
        NiftiDatatype::U8
    } else if max <= i16::MAX as u16 {
        NiftiDatatype::I16
    } else {
        NiftiDatatype::I32
    };
    let values: Vec<f64> = vol.labels.data.iter().map(|&v| v as f64).collect();
    write_bytes(path.as_ref(), &encode(vol.geometry(), 1, dt, &values))
}

pub fn save_mask(path: impl AsRef<Path>, mask: &Volume<bool>) -> Result<()> {
    let values: Vec<f64> = mask.data.iter().map(|&b| b as u8 as f64).collect();
    write_bytes(
        path.as_ref(),
        &encode(&mask.geometry, 1, NiftiDatatype::U8, &values),
    )
}

pub fn save_scalar(path: impl AsRef<Path>, vol: &ScalarVolume) -> Result<()> {
    write_bytes(
        path.as_ref(),
        &encode(&vol.geometry, 1, NiftiDatatype::F32, &vol.data),
    )
}

pub fn save_field(path: impl AsRef<Path>, geometry: &Geometry, vectors: &[[f64; 3]]) -> Result<()> {
    if vectors.len() != geometry.len() {
        return Err(Error::invalid("field length does not match geometry"));
    }
    let values: Vec<f64> = vectors.iter().flatten().copied().collect();
    write_bytes(
        path.as_ref(),
        &encode(geometry, 3, NiftiDatatype::F32, &values),
    )
}
