//! Voxel volumes and the 2D axial slices cut from them.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// What the scalar values of a volume mean.
///
/// The tag is carried through the pipeline so that value-range invariants
/// can be enforced where they exist: masks must be exactly binary and
/// probability maps must stay inside `[0, 1]`. PET and CT volumes have no
/// range constraint (windowing later maps them into `[0, 1]`, standardizing
/// then takes them back out of it).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Modality {
    PetSuv,
    CtHu,
    Mask,
    Prob,
}

#[derive(Debug, Error)]
pub enum VolumeError {
    #[error("voxel count {got} does not match extents {nx}x{ny}x{nz}")]
    CountMismatch {
        got: usize,
        nx: usize,
        ny: usize,
        nz: usize,
    },
    #[error("extents must be non-zero, got {0}x{1}x{2}")]
    EmptyExtent(usize, usize, usize),
    #[error("voxel spacing must be strictly positive and finite, got ({0}, {1}, {2})")]
    NonPositiveSpacing(f64, f64, f64),
    #[error("mask voxel {index} is {value}, expected exactly 0 or 1")]
    MaskNotBinary { index: usize, value: f64 },
    #[error("probability voxel {index} is {value}, outside [0, 1]")]
    ProbOutOfRange { index: usize, value: f64 },
    #[error("slice stack is empty or slices disagree in shape")]
    BadSliceStack,
}

/// A dense scalar voxel grid with physical spacing and a modality tag.
///
/// Storage is x-fastest: `index(x, y, z) = x + nx * (y + ny * z)`, matching
/// the on-disk layout of the NIfTI volumes this type is read from.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume3D {
    extents: (usize, usize, usize),
    spacing_mm: (f64, f64, f64),
    modality: Modality,
    voxels: Vec<f64>,
}

impl Volume3D {
    pub fn new(
        extents: (usize, usize, usize),
        spacing_mm: (f64, f64, f64),
        modality: Modality,
        voxels: Vec<f64>,
    ) -> Result<Self, VolumeError> {
        let (nx, ny, nz) = extents;
        if nx == 0 || ny == 0 || nz == 0 {
            return Err(VolumeError::EmptyExtent(nx, ny, nz));
        }
        let (sx, sy, sz) = spacing_mm;
        if !(sx > 0.0 && sy > 0.0 && sz > 0.0)
            || !(sx.is_finite() && sy.is_finite() && sz.is_finite())
        {
            return Err(VolumeError::NonPositiveSpacing(sx, sy, sz));
        }
        if voxels.len() != nx * ny * nz {
            return Err(VolumeError::CountMismatch {
                got: voxels.len(),
                nx,
                ny,
                nz,
            });
        }
        match modality {
            Modality::Mask => {
                for (i, &v) in voxels.iter().enumerate() {
                    if v != 0.0 && v != 1.0 {
                        return Err(VolumeError::MaskNotBinary { index: i, value: v });
                    }
                }
            }
            Modality::Prob => {
                for (i, &v) in voxels.iter().enumerate() {
                    if !(0.0..=1.0).contains(&v) {
                        return Err(VolumeError::ProbOutOfRange { index: i, value: v });
                    }
                }
            }
            Modality::PetSuv | Modality::CtHu => {}
        }
        Ok(Self {
            extents,
            spacing_mm,
            modality,
            voxels,
        })
    }

    pub fn filled(
        extents: (usize, usize, usize),
        spacing_mm: (f64, f64, f64),
        modality: Modality,
        value: f64,
    ) -> Result<Self, VolumeError> {
        let n = extents.0 * extents.1 * extents.2;
        Self::new(extents, spacing_mm, modality, vec![value; n])
    }

    pub fn extents(&self) -> (usize, usize, usize) {
        self.extents
    }

    pub fn nx(&self) -> usize {
        self.extents.0
    }

    pub fn ny(&self) -> usize {
        self.extents.1
    }

    pub fn nz(&self) -> usize {
        self.extents.2
    }

    pub fn spacing_mm(&self) -> (f64, f64, f64) {
        self.spacing_mm
    }

    pub fn modality(&self) -> Modality {
        self.modality
    }

    pub fn voxels(&self) -> &[f64] {
        &self.voxels
    }

    /// Consumes the volume, handing back the raw buffer.
    pub fn into_voxels(self) -> Vec<f64> {
        self.voxels
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        debug_assert!(x < self.nx() && y < self.ny() && z < self.nz());
        x + self.nx() * (y + self.ny() * z)
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, z: usize) -> f64 {
        self.voxels[self.index(x, y, z)]
    }

    /// Physical volume of one voxel in milliliters.
    pub fn voxel_ml(&self) -> f64 {
        let (sx, sy, sz) = self.spacing_mm;
        sx * sy * sz / 1000.0
    }

    /// True when `other` shares extents and spacing with `self`.
    pub fn same_geometry(&self, other: &Volume3D) -> bool {
        self.extents == other.extents && self.spacing_mm == other.spacing_mm
    }

    /// Copies axial plane `z` out as a slice grid (rows span y, cols span x).
    pub fn axial_slice(&self, z: usize) -> SliceGrid {
        let (nx, ny, _) = self.extents;
        let base = self.index(0, 0, z);
        SliceGrid::new(ny, nx, self.voxels[base..base + nx * ny].to_vec())
            .expect("plane extracted with matching length")
    }

    /// Rebuilds a volume from a stack of equally shaped axial slices,
    /// `slices[z]` becoming plane z. Value invariants of `modality` are
    /// re-checked.
    pub fn from_axial_slices(
        slices: &[SliceGrid],
        spacing_mm: (f64, f64, f64),
        modality: Modality,
    ) -> Result<Self, VolumeError> {
        let first = slices.first().ok_or(VolumeError::BadSliceStack)?;
        let (rows, cols) = (first.rows(), first.cols());
        if slices.iter().any(|s| s.rows() != rows || s.cols() != cols) {
            return Err(VolumeError::BadSliceStack);
        }
        let mut voxels = Vec::with_capacity(rows * cols * slices.len());
        for s in slices {
            voxels.extend_from_slice(s.data());
        }
        Self::new((cols, rows, slices.len()), spacing_mm, modality, voxels)
    }
}

/// A single 2D axial plane, row-major. Rows run along the volume's y axis
/// and columns along x, so `SliceGrid::get(y, x)` matches `Volume3D::get`.
#[derive(Debug, Clone, PartialEq)]
pub struct SliceGrid {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl SliceGrid {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self, VolumeError> {
        if rows == 0 || cols == 0 {
            return Err(VolumeError::EmptyExtent(cols, rows, 1));
        }
        if data.len() != rows * cols {
            return Err(VolumeError::CountMismatch {
                got: data.len(),
                nx: cols,
                ny: rows,
                nz: 1,
            });
        }
        Ok(Self { rows, cols, data })
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Self {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.cols + col]
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, value: f64) {
        self.data[row * self.cols + col] = value;
    }

    /// Number of strictly positive entries; masks use this to test for any
    /// foreground.
    pub fn count_positive(&self) -> usize {
        self.data.iter().filter(|&&v| v > 0.0).count()
    }

    /// Rotates 90 degrees counterclockwise (the positive mathematical
    /// direction when rows index y upward).
    pub fn rot90(&self) -> SliceGrid {
        let mut out = SliceGrid::filled(self.cols, self.rows, 0.0);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.set(self.cols - 1 - c, r, self.get(r, c));
            }
        }
        out
    }

    pub fn rot180(&self) -> SliceGrid {
        let mut data = self.data.clone();
        data.reverse();
        SliceGrid {
            rows: self.rows,
            cols: self.cols,
            data,
        }
    }

    pub fn rot270(&self) -> SliceGrid {
        self.rot180().rot90()
    }

    /// Mirror across the horizontal axis (first row becomes last).
    pub fn flip_rows(&self) -> SliceGrid {
        let mut out = self.clone();
        for r in 0..self.rows {
            let src = &self.data[r * self.cols..(r + 1) * self.cols];
            out.data[(self.rows - 1 - r) * self.cols..(self.rows - r) * self.cols]
                .copy_from_slice(src);
        }
        out
    }

    /// Mirror across the vertical axis (first column becomes last).
    pub fn flip_cols(&self) -> SliceGrid {
        let mut out = self.clone();
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.set(r, self.cols - 1 - c, self.get(r, c));
            }
        }
        out
    }
}
