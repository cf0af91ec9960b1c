//! Minimal NIfTI-1 single-file (`.nii` / `.nii.gz`) reader and writer.
//!
//! Reads uint8, int16, float32 and float64 payloads in either byte order and
//! always writes little-endian float32 with the affine in the sform rows.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use flate2::read::GzDecoder;
use flate2::write::GzEncoder;
use flate2::Compression;

use crate::error::{Error, Result};
use crate::volume::{Affine, Grid, PedSign, Volume};

pub const HEADER_SIZE: usize = 348;
pub const VOX_OFFSET: usize = 352;
pub const MAGIC: &[u8; 4] = b"n+1\0";

pub const DT_UINT8: i16 = 2;
pub const DT_INT16: i16 = 4;
pub const DT_FLOAT32: i16 = 16;
pub const DT_FLOAT64: i16 = 64;

/// Intent name tag carried by displacement field files.
pub const PED_DISPLACEMENT_INTENT: &str = "ped-displacement";

/// Header fields this crate consumes or produces.
#[derive(Clone, Debug, PartialEq)]
pub struct NiftiHeader {
    pub dim: [i16; 8],
    pub datatype: i16,
    pub bitpix: i16,
    pub pixdim: [f32; 8],
    pub vox_offset: f32,
    pub scl_slope: f32,
    pub scl_inter: f32,
    pub dim_info: u8,
    pub descrip: String,
    pub qform_code: i16,
    pub sform_code: i16,
    pub quatern: [f32; 3],
    pub qoffset: [f32; 3],
    pub srow: [[f32; 4]; 3],
    pub intent_name: String,
}

impl NiftiHeader {
    pub fn ndim(&self) -> usize {
        self.dim[0] as usize
    }

    /// Voxel to world affine: sform when `sform_code > 0`, else qform, else pixdim scaling.
    pub fn affine(&self) -> Affine {
        let mut a = [[0.0; 4]; 4];
        a[3][3] = 1.0;
        if self.sform_code > 0 {
            for r in 0..3 {
                for c in 0..4 {
                    a[r][c] = self.srow[r][c] as f64;
                }
            }
        } else if self.qform_code > 0 {
            let [b, c, d] = self.quatern.map(|x| x as f64);
            let a0 = (1.0 - (b * b + c * c + d * d)).max(0.0).sqrt();
            let qfac = if self.pixdim[0] < 0.0 { -1.0 } else { 1.0 };
            let r = [
                [a0 * a0 + b * b - c * c - d * d, 2.0 * (b * c - a0 * d), 2.0 * (b * d + a0 * c)],
                [2.0 * (b * c + a0 * d), a0 * a0 + c * c - b * b - d * d, 2.0 * (c * d - a0 * b)],
                [2.0 * (b * d - a0 * c), 2.0 * (c * d + a0 * b), a0 * a0 + d * d - c * c - b * b],
            ];
            let s = [
                self.pixdim[1] as f64,
                self.pixdim[2] as f64,
                qfac * self.pixdim[3] as f64,
            ];
            for row in 0..3 {
                for col in 0..3 {
                    a[row][col] = r[row][col] * s[col];
                }
                a[row][3] = self.qoffset[row] as f64;
            }
        } else {
            for axis in 0..3 {
                a[axis][axis] = self.pixdim[axis + 1] as f64;
            }
        }
        a
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    big_endian: bool,
}

impl Reader<'_> {
    fn arr<const N: usize>(&self, off: usize) -> [u8; N] {
        let mut b = [0u8; N];
        b.copy_from_slice(&self.bytes[off..off + N]);
        if self.big_endian {
            b.reverse();
        }
        b
    }
    fn i16(&self, off: usize) -> i16 {
        i16::from_le_bytes(self.arr(off))
    }
    fn f32(&self, off: usize) -> f32 {
        f32::from_le_bytes(self.arr(off))
    }
    fn f64(&self, off: usize) -> f64 {
        f64::from_le_bytes(self.arr(off))
    }
    fn text(&self, off: usize, len: usize) -> String {
        let raw = &self.bytes[off..off + len];
        let end = raw.iter().position(|&b| b == 0).unwrap_or(len);
        String::from_utf8_lossy(&raw[..end]).into_owned()
    }
}

fn is_gzip(bytes: &[u8]) -> bool {
    bytes.len() >= 2 && bytes[0] == 0x1f && bytes[1] == 0x8b
}

pub fn parse_header(bytes: &[u8]) -> Result<(NiftiHeader, bool)> {
    if bytes.len() < HEADER_SIZE {
        return Err(Error::CorruptHeader(format!("{} bytes, need at least 348", bytes.len())));
    }
    let le = i32::from_le_bytes(bytes[0..4].try_into().unwrap());
    let be = i32::from_be_bytes(bytes[0..4].try_into().unwrap());
    let big_endian = match (le, be) {
        (348, _) => false,
        (_, 348) => true,
        _ => return Err(Error::CorruptHeader(format!("sizeof_hdr = {le}, expected 348"))),
    };
    if &bytes[344..348] != MAGIC {
        return Err(Error::CorruptHeader(format!(
            "magic {:?}, expected \"n+1\\0\"",
            String::from_utf8_lossy(&bytes[344..348])
        )));
    }
    let r = Reader { bytes, big_endian };
    let mut dim = [0i16; 8];
    for (i, d) in dim.iter_mut().enumerate() {
        *d = r.i16(40 + 2 * i);
    }
    let mut pixdim = [0f32; 8];
    for (i, p) in pixdim.iter_mut().enumerate() {
        *p = r.f32(76 + 4 * i);
    }
    let mut srow = [[0f32; 4]; 3];
    for (row, s) in srow.iter_mut().enumerate() {
        for (col, v) in s.iter_mut().enumerate() {
            *v = r.f32(280 + 16 * row + 4 * col);
        }
    }
    let header = NiftiHeader {
        dim,
        datatype: r.i16(70),
        bitpix: r.i16(72),
        pixdim,
        vox_offset: r.f32(108),
        scl_slope: r.f32(112),
        scl_inter: r.f32(116),
        dim_info: bytes[39],
        descrip: r.text(148, 80),
        qform_code: r.i16(252),
        sform_code: r.i16(254),
        quatern: [r.f32(256), r.f32(260), r.f32(264)],
        qoffset: [r.f32(268), r.f32(272), r.f32(276)],
        srow,
        intent_name: r.text(328, 16),
    };
    Ok((header, big_endian))
}

/// Decodes an in-memory NIfTI-1 image, gzip-compressed or not.
pub fn decode(bytes: &[u8]) -> Result<(NiftiHeader, Volume)> {
    let inflated;
    let bytes = if is_gzip(bytes) {
        let mut out = Vec::new();
        GzDecoder::new(bytes)
            .read_to_end(&mut out)
            .map_err(|e| Error::CorruptHeader(format!("gzip stream: {e}")))?;
        inflated = out;
        &inflated[..]
    } else {
        bytes
    };
    let (header, big_endian) = parse_header(bytes)?;
    let ndim = header.dim[0];
    if ndim < 1 || ndim > 7 {
        return Err(Error::CorruptHeader(format!("dim[0] = {ndim}")));
    }
    let ndim = ndim as usize;
    if ndim > 4 && header.dim[5..=ndim].iter().any(|&d| d > 1) {
        return Err(Error::DimensionOverflow(ndim));
    }
    let mut dims = [1usize; 4];
    for axis in 0..ndim.min(4) {
        let d = header.dim[axis + 1];
        if d < 1 {
            return Err(Error::CorruptHeader(format!("dim[{}] = {d}", axis + 1)));
        }
        dims[axis] = d as usize;
    }
    let elem = match header.datatype {
        DT_UINT8 => 1,
        DT_INT16 => 2,
        DT_FLOAT32 => 4,
        DT_FLOAT64 => 8,
        other => return Err(Error::UnsupportedDatatype(other)),
    };
    let offset = header.vox_offset as usize;
    if offset < VOX_OFFSET {
        return Err(Error::CorruptHeader(format!("vox_offset {offset} < 352")));
    }
    let count: usize = dims.iter().product();
    let needed = offset + count * elem;
    if bytes.len() < needed {
        return Err(Error::CorruptHeader(format!(
            "payload truncated: {} bytes, need {needed}",
            bytes.len()
        )));
    }
    let (slope, inter) = if header.scl_slope != 0.0 && header.scl_slope.is_finite() {
        (header.scl_slope as f64, header.scl_inter as f64)
    } else {
        (1.0, 0.0)
    };
    let r = Reader { bytes, big_endian };
    let data: Vec<f64> = (0..count)
        .map(|n| {
            let off = offset + n * elem;
            let raw = match header.datatype {
                DT_UINT8 => bytes[off] as f64,
                DT_INT16 => r.i16(off) as f64,
                DT_FLOAT32 => r.f32(off) as f64,
                _ => r.f64(off),
            };
            raw * slope + inter
        })
        .collect();

    let mut spacing = [1.0; 3];
    for (axis, s) in spacing.iter_mut().enumerate() {
        let p = header.pixdim[axis + 1].abs() as f64;
        if p > 0.0 && p.is_finite() {
            *s = p;
        }
    }
    let grid = Grid::with_affine([dims[0], dims[1], dims[2]], spacing, header.affine())
        .map_err(|e| Error::CorruptHeader(e.to_string()))?;
    let mut volume = Volume::new_4d(grid, dims[3], data)?;
    let phase_dim = (header.dim_info >> 2) & 0x3;
    if (1..=3).contains(&phase_dim) {
        volume.ped_axis = phase_dim as usize - 1;
    }
    if header.descrip.split_whitespace().any(|t| t == "ped_sign=-1") {
        volume.ped_sign = PedSign::Backward;
    }
    Ok((header, volume))
}

/// Encodes a volume as little-endian float32 NIfTI-1 with `vox_offset = 352`.
pub fn encode(v: &Volume, intent_name: Option<&str>) -> Result<Vec<u8>> {
    if !v.is_finite() {
        return Err(Error::RejectNonFinite);
    }
    let grid = v.grid();
    let mut h = vec![0u8; VOX_OFFSET];
    let put = |h: &mut Vec<u8>, off: usize, b: &[u8]| h[off..off + b.len()].copy_from_slice(b);
    put(&mut h, 0, &(HEADER_SIZE as i32).to_le_bytes());
    h[38] = b'r';
    // freq = x, slice = z, phase = declared axis
    let phase = (v.ped_axis + 1) as u8;
    let freq = if v.ped_axis == 0 { 2u8 } else { 1u8 };
    let slice = 6 - phase - freq;
    h[39] = freq | (phase << 2) | (slice << 4);
    let ndim: i16 = if v.nvol() > 1 { 4 } else { 3 };
    let dims = [
        ndim,
        grid.dims[0] as i16,
        grid.dims[1] as i16,
        grid.dims[2] as i16,
        v.nvol() as i16,
        1,
        1,
        1,
    ];
    if grid.dims.iter().chain(std::iter::once(&v.nvol())).any(|&d| d > i16::MAX as usize) {
        return Err(Error::InvalidSpec("dimension exceeds NIfTI-1 limit of 32767".into()));
    }
    for (i, d) in dims.iter().enumerate() {
        put(&mut h, 40 + 2 * i, &d.to_le_bytes());
    }
    put(&mut h, 70, &DT_FLOAT32.to_le_bytes());
    put(&mut h, 72, &32i16.to_le_bytes());
    let pixdim = [1.0f32, grid.spacing[0] as f32, grid.spacing[1] as f32, grid.spacing[2] as f32, 1.0, 1.0, 1.0, 1.0];
    for (i, p) in pixdim.iter().enumerate() {
        put(&mut h, 76 + 4 * i, &p.to_le_bytes());
    }
    put(&mut h, 108, &(VOX_OFFSET as f32).to_le_bytes());
    put(&mut h, 112, &1.0f32.to_le_bytes());
    put(&mut h, 116, &0.0f32.to_le_bytes());
    // mm, seconds
    h[123] = 2 | 8;
    let descrip = format!("cordwarp ped_sign={}", if v.ped_sign == PedSign::Backward { -1 } else { 1 });
    put(&mut h, 148, descrip.as_bytes());
    put(&mut h, 252, &0i16.to_le_bytes());
    put(&mut h, 254, &1i16.to_le_bytes());
    for row in 0..3 {
        for col in 0..4 {
            put(&mut h, 280 + 16 * row + 4 * col, &(grid.affine[row][col] as f32).to_le_bytes());
        }
    }
    if let Some(name) = intent_name {
        let b = name.as_bytes();
        put(&mut h, 328, &b[..b.len().min(16)]);
    }
    put(&mut h, 344, MAGIC);
    h.reserve(v.data().len() * 4);
    for x in v.data() {
        h.extend_from_slice(&(*x as f32).to_le_bytes());
    }
    Ok(h)
}

pub fn load_volume(path: impl AsRef<Path>) -> Result<Volume> {
    load_with_header(path).map(|(_, v)| v)
}

pub fn load_with_header(path: impl AsRef<Path>) -> Result<(NiftiHeader, Volume)> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

/// Writes float32 NIfTI-1; gzip-compressed when the path ends in `.gz`.
pub fn save_volume(v: &Volume, path: impl AsRef<Path>) -> Result<()> {
    save_with_intent(v, path, None)
}

pub fn save_with_intent(v: &Volume, path: impl AsRef<Path>, intent_name: Option<&str>) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode(v, intent_name)?;
    let gz = path.extension().is_some_and(|e| e == "gz");
    let payload = if gz {
        let mut enc = GzEncoder::new(Vec::new(), Compression::default());
        enc.write_all(&bytes).map_err(|e| Error::io(path, e))?;
        enc.finish().map_err(|e| Error::io(path, e))?
    } else {
        bytes
    };
    fs::write(path, payload).map_err(|e| Error::io(path, e))
}
