//! Single-file NIfTI-1 (.nii) reading and writing.
//!
//! Only the fields this pipeline needs are interpreted: dimensions, voxel
//! spacing, datatype, data offset and the value scaling pair. Byte order is
//! detected from `sizeof_hdr`, which reads as 348 in the file's native order
//! and as a garbage value in the swapped one. Supported on-disk datatypes
//! are u8, i16, f32 and f64; everything is widened to `f64` in memory.

use std::path::Path;

use byteorder::{BigEndian, ByteOrder, LittleEndian};
use thiserror::Error;

use crate::volume::{Modality, Volume3D, VolumeError};

const HEADER_LEN: usize = 348;
/// Header plus the four-byte extension flag; voxel data starts here.
const DATA_OFFSET: u32 = 352;
const MAGIC_SINGLE: [u8; 4] = *b"n+1\0";

// Field offsets within the 348-byte header.
mod offsets {
    pub const SIZEOF_HDR: usize = 0;
    pub const DIM: usize = 40;
    pub const DATATYPE: usize = 70;
    pub const BITPIX: usize = 72;
    pub const PIXDIM: usize = 76;
    pub const VOX_OFFSET: usize = 108;
    pub const SCL_SLOPE: usize = 112;
    pub const SCL_INTER: usize = 116;
    pub const MAGIC: usize = 344;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Endianness {
    Little,
    Big,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DataType {
    U8,
    I16,
    F32,
    F64,
}

impl DataType {
    pub fn from_code(code: i16) -> Option<DataType> {
        match code {
            2 => Some(DataType::U8),
            4 => Some(DataType::I16),
            16 => Some(DataType::F32),
            64 => Some(DataType::F64),
            _ => None,
        }
    }

    pub fn code(self) -> i16 {
        match self {
            DataType::U8 => 2,
            DataType::I16 => 4,
            DataType::F32 => 16,
            DataType::F64 => 64,
        }
    }

    pub fn bitpix(self) -> i16 {
        8 * self.elem_size() as i16
    }

    pub fn elem_size(self) -> usize {
        match self {
            DataType::U8 => 1,
            DataType::I16 => 2,
            DataType::F32 => 4,
            DataType::F64 => 8,
        }
    }
}

#[derive(Debug, Error)]
pub enum NiftiError {
    #[error("header needs {HEADER_LEN} bytes, got {got}")]
    WrongSize { got: usize },
    #[error("sizeof_hdr is {got} in both byte orders, expected 348")]
    BadSizeofHdr { got: i32 },
    #[error("magic is {got:?}, expected \"n+1\\0\" (single-file)")]
    BadMagic { got: [u8; 4] },
    #[error("unsupported datatype code {code}")]
    UnsupportedDatatype { code: i16 },
    #[error("bitpix {bitpix} inconsistent with datatype (expected {expected})")]
    BitpixMismatch { bitpix: i16, expected: i16 },
    #[error("bad dimensions: {0}")]
    BadDimensions(String),
    #[error("pixdim[{axis}] is {value}, expected strictly positive")]
    NonPositiveSpacing { axis: usize, value: f32 },
    #[error("vox_offset {0} is not an integral offset past the header")]
    BadVoxOffset(f32),
    #[error("voxel data needs {needed} bytes, file holds {got}")]
    TruncatedData { needed: usize, got: usize },
    #[error("value {value} at voxel {index} not representable as {datatype:?}")]
    NotRepresentable {
        index: usize,
        value: f64,
        datatype: DataType,
    },
    #[error(transparent)]
    Volume(#[from] VolumeError),
    #[error("i/o failure: {0}")]
    IoFailure(#[from] std::io::Error),
}

/// The interpreted subset of a NIfTI-1 header.
#[derive(Debug, Clone, PartialEq)]
pub struct NiftiHeader {
    pub endianness: Endianness,
    pub dim: [i16; 8],
    pub datatype: DataType,
    pub bitpix: i16,
    pub pixdim: [f32; 8],
    pub vox_offset: f32,
    pub scl_slope: f32,
    pub scl_inter: f32,
}

impl NiftiHeader {
    /// Spatial extents as (nx, ny, nz). Trailing dimensions, if declared,
    /// must all be singleton.
    pub fn spatial_extents(&self) -> Result<(usize, usize, usize), NiftiError> {
        let ndim = self.dim[0];
        if ndim < 3 {
            return Err(NiftiError::BadDimensions(format!(
                "dim[0] is {ndim}, expected at least 3 spatial dimensions"
            )));
        }
        for axis in 1..=ndim as usize {
            let d = self.dim[axis];
            if d < 1 {
                return Err(NiftiError::BadDimensions(format!(
                    "dim[{axis}] is {d}, expected >= 1"
                )));
            }
            if axis > 3 && d != 1 {
                return Err(NiftiError::BadDimensions(format!(
                    "dim[{axis}] is {d}; only singleton non-spatial dimensions are supported"
                )));
            }
        }
        Ok((
            self.dim[1] as usize,
            self.dim[2] as usize,
            self.dim[3] as usize,
        ))
    }

    pub fn spacing_mm(&self) -> (f64, f64, f64) {
        (
            self.pixdim[1] as f64,
            self.pixdim[2] as f64,
            self.pixdim[3] as f64,
        )
    }
}

/// Parses the first 348 bytes of `bytes` as a NIfTI-1 header.
pub fn parse_header(bytes: &[u8]) -> Result<NiftiHeader, NiftiError> {
    if bytes.len() < HEADER_LEN {
        return Err(NiftiError::WrongSize { got: bytes.len() });
    }
    let endianness = if LittleEndian::read_i32(&bytes[offsets::SIZEOF_HDR..]) == 348 {
        Endianness::Little
    } else if BigEndian::read_i32(&bytes[offsets::SIZEOF_HDR..]) == 348 {
        Endianness::Big
    } else {
        return Err(NiftiError::BadSizeofHdr {
            got: LittleEndian::read_i32(&bytes[offsets::SIZEOF_HDR..]),
        });
    };
    match endianness {
        Endianness::Little => parse_with::<LittleEndian>(bytes, endianness),
        Endianness::Big => parse_with::<BigEndian>(bytes, endianness),
    }
}

fn parse_with<B: ByteOrder>(
    bytes: &[u8],
    endianness: Endianness,
) -> Result<NiftiHeader, NiftiError> {
    let mut magic = [0u8; 4];
    magic.copy_from_slice(&bytes[offsets::MAGIC..offsets::MAGIC + 4]);
    if magic != MAGIC_SINGLE {
        return Err(NiftiError::BadMagic { got: magic });
    }

    let mut dim = [0i16; 8];
    for (i, d) in dim.iter_mut().enumerate() {
        *d = B::read_i16(&bytes[offsets::DIM + 2 * i..]);
    }
    if !(1..=7).contains(&dim[0]) {
        return Err(NiftiError::BadDimensions(format!(
            "dim[0] is {}, expected 1..=7",
            dim[0]
        )));
    }

    let code = B::read_i16(&bytes[offsets::DATATYPE..]);
    let datatype = DataType::from_code(code).ok_or(NiftiError::UnsupportedDatatype { code })?;
    let bitpix = B::read_i16(&bytes[offsets::BITPIX..]);
    if bitpix != datatype.bitpix() {
        return Err(NiftiError::BitpixMismatch {
            bitpix,
            expected: datatype.bitpix(),
        });
    }

    let mut pixdim = [0f32; 8];
    for (i, p) in pixdim.iter_mut().enumerate() {
        *p = B::read_f32(&bytes[offsets::PIXDIM + 4 * i..]);
    }
    let spatial_axes = (dim[0] as usize).min(3);
    for (axis, &value) in pixdim.iter().enumerate().take(spatial_axes + 1).skip(1) {
        if !(value > 0.0) || !value.is_finite() {
            return Err(NiftiError::NonPositiveSpacing { axis, value });
        }
    }

    Ok(NiftiHeader {
        endianness,
        dim,
        datatype,
        bitpix,
        pixdim,
        vox_offset: B::read_f32(&bytes[offsets::VOX_OFFSET..]),
        scl_slope: B::read_f32(&bytes[offsets::SCL_SLOPE..]),
        scl_inter: B::read_f32(&bytes[offsets::SCL_INTER..]),
    })
}

/// Reads a single-file NIfTI volume, widening voxels to f64 and applying the
/// header's slope/intercept scaling (`scl_slope == 0` means unscaled). The
/// caller states what the file holds; mask and probability invariants are
/// enforced on the scaled values.
pub fn read_volume(path: &Path, modality: Modality) -> Result<Volume3D, NiftiError> {
    let bytes = std::fs::read(path)?;
    decode_volume(&bytes, modality)
}

/// [`read_volume`] over an in-memory file image.
pub fn decode_volume(bytes: &[u8], modality: Modality) -> Result<Volume3D, NiftiError> {
    let header = parse_header(bytes)?;
    let (nx, ny, nz) = header.spatial_extents()?;

    let off = header.vox_offset;
    if !off.is_finite() || off < HEADER_LEN as f32 || off.fract() != 0.0 {
        return Err(NiftiError::BadVoxOffset(off));
    }
    let offset = off as usize;

    let n = nx * ny * nz;
    let needed = n * header.datatype.elem_size();
    if bytes.len() < offset + needed {
        return Err(NiftiError::TruncatedData {
            needed: offset + needed,
            got: bytes.len(),
        });
    }
    let data = &bytes[offset..offset + needed];
    let mut voxels = match header.endianness {
        Endianness::Little => decode_with::<LittleEndian>(data, header.datatype, n),
        Endianness::Big => decode_with::<BigEndian>(data, header.datatype, n),
    };

    // A non-finite slope is treated like an absent one, as readers
    // conventionally do.
    if header.scl_slope != 0.0 && header.scl_slope.is_finite() {
        let slope = header.scl_slope as f64;
        let inter = if header.scl_inter.is_finite() {
            header.scl_inter as f64
        } else {
            0.0
        };
        for v in &mut voxels {
            *v = *v * slope + inter;
        }
    }

    Ok(Volume3D::new(
        (nx, ny, nz),
        header.spacing_mm(),
        modality,
        voxels,
    )?)
}

fn decode_with<B: ByteOrder>(data: &[u8], datatype: DataType, n: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(n);
    match datatype {
        DataType::U8 => out.extend(data.iter().map(|&b| b as f64)),
        DataType::I16 => out.extend((0..n).map(|i| B::read_i16(&data[2 * i..]) as f64)),
        DataType::F32 => out.extend((0..n).map(|i| B::read_f32(&data[4 * i..]) as f64)),
        DataType::F64 => out.extend((0..n).map(|i| B::read_f64(&data[8 * i..]))),
    }
    out
}

/// Writes `vol` as a little-endian single-file NIfTI, picking u8 for masks
/// and f32 for everything else.
pub fn write_volume(vol: &Volume3D, path: &Path) -> Result<(), NiftiError> {
    let datatype = match vol.modality() {
        Modality::Mask => DataType::U8,
        _ => DataType::F32,
    };
    write_volume_with(vol, path, datatype, Endianness::Little)
}

/// Writes `vol` with an explicit on-disk datatype and byte order.
///
/// Values must be representable in `datatype`: integral and in range for u8
/// and i16. Float values are narrowed with `as`, so a volume whose values
/// are exactly representable in the target type round-trips bitwise. The
/// header is written with `scl_slope = 0` (no scaling).
pub fn write_volume_with(
    vol: &Volume3D,
    path: &Path,
    datatype: DataType,
    endianness: Endianness,
) -> Result<(), NiftiError> {
    let bytes = match endianness {
        Endianness::Little => encode_with::<LittleEndian>(vol, datatype)?,
        Endianness::Big => encode_with::<BigEndian>(vol, datatype)?,
    };
    std::fs::write(path, bytes)?;
    Ok(())
}

fn encode_with<B: ByteOrder>(vol: &Volume3D, datatype: DataType) -> Result<Vec<u8>, NiftiError> {
    let (nx, ny, nz) = vol.extents();
    for (d, name) in [(nx, "nx"), (ny, "ny"), (nz, "nz")] {
        if d > i16::MAX as usize {
            return Err(NiftiError::BadDimensions(format!(
                "{name} = {d} exceeds the i16 extent field"
            )));
        }
    }

    let n = nx * ny * nz;
    let mut bytes = vec![0u8; DATA_OFFSET as usize + n * datatype.elem_size()];

    B::write_i32(&mut bytes[offsets::SIZEOF_HDR..], HEADER_LEN as i32);
    let dim: [i16; 8] = [3, nx as i16, ny as i16, nz as i16, 1, 1, 1, 1];
    for (i, d) in dim.iter().enumerate() {
        B::write_i16(&mut bytes[offsets::DIM + 2 * i..], *d);
    }
    B::write_i16(&mut bytes[offsets::DATATYPE..], datatype.code());
    B::write_i16(&mut bytes[offsets::BITPIX..], datatype.bitpix());
    let (sx, sy, sz) = vol.spacing_mm();
    let pixdim: [f32; 8] = [1.0, sx as f32, sy as f32, sz as f32, 0.0, 0.0, 0.0, 0.0];
    for (i, p) in pixdim.iter().enumerate() {
        B::write_f32(&mut bytes[offsets::PIXDIM + 4 * i..], *p);
    }
    B::write_f32(&mut bytes[offsets::VOX_OFFSET..], DATA_OFFSET as f32);
    B::write_f32(&mut bytes[offsets::SCL_SLOPE..], 0.0);
    B::write_f32(&mut bytes[offsets::SCL_INTER..], 0.0);
    bytes[offsets::MAGIC..offsets::MAGIC + 4].copy_from_slice(&MAGIC_SINGLE);

    let data = &mut bytes[DATA_OFFSET as usize..];
    for (i, &v) in vol.voxels().iter().enumerate() {
        match datatype {
            DataType::U8 => {
                if v.fract() != 0.0 || !(0.0..=255.0).contains(&v) {
                    return Err(NiftiError::NotRepresentable {
                        index: i,
                        value: v,
                        datatype,
                    });
                }
                data[i] = v as u8;
            }
            DataType::I16 => {
                if v.fract() != 0.0 || !(i16::MIN as f64..=i16::MAX as f64).contains(&v) {
                    return Err(NiftiError::NotRepresentable {
                        index: i,
                        value: v,
                        datatype,
                    });
                }
                B::write_i16(&mut data[2 * i..], v as i16);
            }
            DataType::F32 => B::write_f32(&mut data[4 * i..], v as f32),
            DataType::F64 => B::write_f64(&mut data[8 * i..], v),
        }
    }
    Ok(bytes)
}

/// In-memory encoding of `vol` as a NIfTI file image.
pub fn encode_volume(
    vol: &Volume3D,
    datatype: DataType,
    endianness: Endianness,
) -> Result<Vec<u8>, NiftiError> {
    match endianness {
        Endianness::Little => encode_with::<LittleEndian>(vol, datatype),
        Endianness::Big => encode_with::<BigEndian>(vol, datatype),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample(modality: Modality, values: &[f64]) -> Volume3D {
        Volume3D::new((2, 2, 2), (2.0, 3.0, 4.0), modality, values.to_vec()).unwrap()
    }

    #[test]
    fn header_anchors() {
        let vol = sample(Modality::PetSuv, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0]);
        let bytes = encode_volume(&vol, DataType::F32, Endianness::Little).unwrap();
        assert_eq!(LittleEndian::read_i32(&bytes[0..]), 348);
        assert_eq!(&bytes[344..348], b"n+1\0");
        let h = parse_header(&bytes).unwrap();
        assert_eq!(h.endianness, Endianness::Little);
        assert_eq!(h.datatype, DataType::F32);
        assert_eq!(h.bitpix, 32);
        assert_eq!(h.dim[0], 3);
        assert_eq!(h.dim[1..4], [2, 2, 2]);
        assert_eq!(h.vox_offset, 352.0);
        assert_eq!(h.spacing_mm(), (2.0, 3.0, 4.0));
    }

    #[test]
    fn byte_order_detected_from_sizeof_hdr() {
        let vol = sample(Modality::PetSuv, &[0.0; 8]);
        let bytes = encode_volume(&vol, DataType::F32, Endianness::Big).unwrap();
        assert_ne!(LittleEndian::read_i32(&bytes[0..]), 348);
        let h = parse_header(&bytes).unwrap();
        assert_eq!(h.endianness, Endianness::Big);
        assert_eq!(h.dim[1..4], [2, 2, 2]);
        assert_eq!(h.spacing_mm(), (2.0, 3.0, 4.0));
    }

    #[test]
    fn rejects_malformed_headers() {
        let vol = sample(Modality::PetSuv, &[0.0; 8]);
        let good = encode_volume(&vol, DataType::F32, Endianness::Little).unwrap();

        assert!(matches!(
            parse_header(&good[..100]),
            Err(NiftiError::WrongSize { got: 100 })
        ));

        let mut bad_sizeof = good.clone();
        LittleEndian::write_i32(&mut bad_sizeof[0..], 350);
        assert!(matches!(
            parse_header(&bad_sizeof),
            Err(NiftiError::BadSizeofHdr { got: 350 })
        ));

        let mut bad_magic = good.clone();
        bad_magic[344..348].copy_from_slice(b"ni1\0");
        assert!(matches!(
            parse_header(&bad_magic),
            Err(NiftiError::BadMagic { .. })
        ));

        let mut bad_dtype = good.clone();
        LittleEndian::write_i16(&mut bad_dtype[70..], 8); // i32, unsupported
        assert!(matches!(
            parse_header(&bad_dtype),
            Err(NiftiError::UnsupportedDatatype { code: 8 })
        ));

        let mut bad_bitpix = good.clone();
        LittleEndian::write_i16(&mut bad_bitpix[72..], 16);
        assert!(matches!(
            parse_header(&bad_bitpix),
            Err(NiftiError::BitpixMismatch {
                bitpix: 16,
                expected: 32
            })
        ));

        let mut bad_spacing = good.clone();
        LittleEndian::write_f32(&mut bad_spacing[80..], -1.0); // pixdim[1]
        assert!(matches!(
            parse_header(&bad_spacing),
            Err(NiftiError::NonPositiveSpacing { axis: 1, .. })
        ));
    }

    #[test]
    fn truncated_data_detected() {
        let vol = sample(Modality::PetSuv, &[1.0; 8]);
        let mut bytes = encode_volume(&vol, DataType::F32, Endianness::Little).unwrap();
        bytes.truncate(bytes.len() - 4);
        assert!(matches!(
            decode_volume(&bytes, Modality::PetSuv),
            Err(NiftiError::TruncatedData { .. })
        ));
    }

    #[test]
    fn slope_and_intercept_applied() {
        let vol = sample(Modality::PetSuv, &[5.0; 8]);
        let mut bytes = encode_volume(&vol, DataType::U8, Endianness::Little).unwrap();
        LittleEndian::write_f32(&mut bytes[112..], 2.5);
        LittleEndian::write_f32(&mut bytes[116..], 1.0);
        let read = decode_volume(&bytes, Modality::PetSuv).unwrap();
        assert!(read.voxels().iter().all(|&v| v == 13.5));
    }

    #[test]
    fn zero_slope_means_unscaled() {
        let vol = sample(Modality::PetSuv, &[5.0; 8]);
        let mut bytes = encode_volume(&vol, DataType::U8, Endianness::Little).unwrap();
        LittleEndian::write_f32(&mut bytes[116..], 99.0); // intercept ignored
        let read = decode_volume(&bytes, Modality::PetSuv).unwrap();
        assert!(read.voxels().iter().all(|&v| v == 5.0));
    }

    #[test]
    fn mask_values_validated_after_scaling() {
        let vol = sample(Modality::PetSuv, &[0.0, 1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 2.0]);
        let bytes = encode_volume(&vol, DataType::F32, Endianness::Little).unwrap();
        assert!(matches!(
            decode_volume(&bytes, Modality::Mask),
            Err(NiftiError::Volume(VolumeError::MaskNotBinary {
                index: 7,
                ..
            }))
        ));
    }

    #[test]
    fn non_representable_values_rejected() {
        let vol = sample(Modality::PetSuv, &[0.5; 8]);
        assert!(matches!(
            encode_volume(&vol, DataType::U8, Endianness::Little),
            Err(NiftiError::NotRepresentable { index: 0, .. })
        ));
        let vol = sample(Modality::PetSuv, &[70000.0; 8]);
        assert!(matches!(
            encode_volume(&vol, DataType::I16, Endianness::Little),
            Err(NiftiError::NotRepresentable { .. })
        ));
    }

    #[test]
    fn round_trips_all_datatypes_and_orders() {
        let cases: Vec<(DataType, Vec<f64>)> = vec![
            (
                DataType::U8,
                vec![0.0, 255.0, 17.0, 3.0, 9.0, 128.0, 1.0, 2.0],
            ),
            (
                DataType::I16,
                vec![-32768.0, 32767.0, 0.0, -5.0, 123.0, -9.0, 7.0, 1.0],
            ),
            // f32 case uses values exactly representable in f32.
            (
                DataType::F32,
                vec![0.25, -1.5, 3.75, 14.25, -800.0, 400.0, 0.0, 0.0009765625],
            ),
            (
                DataType::F64,
                vec![0.1, -0.3, 1e-17, 7.7, -2.2, 0.0, 9.9, 1e300],
            ),
        ];
        for endianness in [Endianness::Little, Endianness::Big] {
            for (datatype, values) in &cases {
                let vol = sample(Modality::PetSuv, values);
                let bytes = encode_volume(&vol, *datatype, endianness).unwrap();
                let back = decode_volume(&bytes, Modality::PetSuv).unwrap();
                assert_eq!(back, vol, "{datatype:?} {endianness:?}");
            }
        }
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("mask.nii");
        let vol = sample(Modality::Mask, &[0.0, 1.0, 1.0, 0.0, 0.0, 1.0, 0.0, 0.0]);
        write_volume(&vol, &path).unwrap();
        let back = read_volume(&path, Modality::Mask).unwrap();
        assert_eq!(back, vol);
    }
}
