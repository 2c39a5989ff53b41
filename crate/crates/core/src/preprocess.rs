//! Intensity normalization, cropping, slice extraction and training-time
//! augmentation.
//!
//! The normalization pipeline has a fixed order: window to a modality
//! range, min-max to `[0, 1]`, standardize, crop. PET standardizes with
//! statistics of the whole training corpus; CT standardizes with the
//! statistics of the volume itself. Masks are only cropped. The order
//! matters (standardizing before windowing would change clipping), so the
//! public entry point is the composed [`preprocess_study`].

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numeric::KahanSum;
use crate::volume::{Modality, SliceGrid, Volume3D, VolumeError};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Window {
    pub low: f64,
    pub high: f64,
}

impl Window {
    pub fn new(low: f64, high: f64) -> Self {
        Self { low, high }
    }
}

/// Mean and population standard deviation of a voxel population.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DataStats {
    pub mean: f64,
    pub std: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreprocessConfig {
    pub suv_window: Window,
    pub hu_window: Window,
    /// Side length of the axial crop. The clinical setting uses 224.
    pub patch_xy: usize,
    /// Computed once over the windowed+min-maxed training PET volumes and
    /// cached; absent until then.
    pub pet_dataset_stats: Option<DataStats>,
    /// Crop anchor override (x, y). `None` means centered.
    pub crop_offset: Option<(usize, usize)>,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        Self {
            suv_window: Window::new(0.0, 14.25),
            hu_window: Window::new(-800.0, 400.0),
            patch_xy: 224,
            pet_dataset_stats: None,
            crop_offset: None,
        }
    }
}

impl PreprocessConfig {
    pub fn validate(&self) -> Result<(), PreprocessError> {
        for w in [self.suv_window, self.hu_window] {
            if !(w.high > w.low) {
                return Err(PreprocessError::DegenerateWindow {
                    low: w.low,
                    high: w.high,
                });
            }
        }
        if self.patch_xy < 8 || !self.patch_xy.is_multiple_of(2) {
            return Err(PreprocessError::BadPatch {
                patch_xy: self.patch_xy,
            });
        }
        if let Some(stats) = self.pet_dataset_stats {
            if !(stats.std > 0.0) {
                return Err(PreprocessError::ZeroStd);
            }
        }
        Ok(())
    }
}

#[derive(Debug, Error)]
pub enum PreprocessError {
    #[error("window ({low}, {high}) is degenerate")]
    DegenerateWindow { low: f64, high: f64 },
    #[error("standard deviation is not strictly positive")]
    ZeroStd,
    #[error("patch {patch_xy} exceeds axial extents {nx}x{ny}")]
    PatchTooLarge {
        patch_xy: usize,
        nx: usize,
        ny: usize,
    },
    #[error("patch_xy {patch_xy} must be even and at least 8")]
    BadPatch { patch_xy: usize },
    #[error("crop at offset ({0}, {1}) leaves the volume")]
    CropOutOfBounds(usize, usize),
    #[error("dataset statistics are empty: no volumes given")]
    EmptyCorpus,
    #[error("PET dataset statistics not set in the config")]
    MissingDatasetStats,
    #[error("expected modality {expected:?}, got {got:?}")]
    ModalityMismatch { expected: Modality, got: Modality },
    #[error("volumes of one study must share extents and spacing")]
    GeometryMismatch,
    #[error("slice grids of one pair must share extents")]
    SliceShapeMismatch,
    #[error(transparent)]
    Volume(#[from] VolumeError),
}

/// Clamps into the window and rescales it to `[0, 1]`.
pub fn window_minmax(v: &Volume3D, window: Window) -> Result<Volume3D, PreprocessError> {
    if !(window.high > window.low) {
        return Err(PreprocessError::DegenerateWindow {
            low: window.low,
            high: window.high,
        });
    }
    let span = window.high - window.low;
    let voxels = v
        .voxels()
        .iter()
        .map(|&x| (x.clamp(window.low, window.high) - window.low) / span)
        .collect();
    Ok(Volume3D::new(
        v.extents(),
        v.spacing_mm(),
        v.modality(),
        voxels,
    )?)
}

/// Maps each voxel to `(x - mean) / std`.
pub fn standardize(v: &Volume3D, stats: DataStats) -> Result<Volume3D, PreprocessError> {
    if !(stats.std > 0.0) {
        return Err(PreprocessError::ZeroStd);
    }
    let voxels = v
        .voxels()
        .iter()
        .map(|&x| (x - stats.mean) / stats.std)
        .collect();
    Ok(Volume3D::new(
        v.extents(),
        v.spacing_mm(),
        v.modality(),
        voxels,
    )?)
}

/// Mean and population standard deviation of one volume.
pub fn volume_stats(v: &Volume3D) -> DataStats {
    stats_over(std::iter::once(v))
}

/// Mean and population standard deviation over all voxels of all volumes.
pub fn compute_dataset_stats(corpus: &[Volume3D]) -> Result<DataStats, PreprocessError> {
    if corpus.is_empty() {
        return Err(PreprocessError::EmptyCorpus);
    }
    Ok(stats_over(corpus.iter()))
}

fn stats_over<'a>(volumes: impl Iterator<Item = &'a Volume3D> + Clone) -> DataStats {
    let mut n: usize = 0;
    let mut sum = KahanSum::new();
    for v in volumes.clone() {
        n += v.voxels().len();
        for &x in v.voxels() {
            sum.add(x);
        }
    }
    let mean = sum.value() / n as f64;
    let mut sq = KahanSum::new();
    for v in volumes {
        for &x in v.voxels() {
            let d = x - mean;
            sq.add(d * d);
        }
    }
    DataStats {
        mean,
        std: (sq.value() / n as f64).sqrt(),
    }
}

/// Centered axial crop to `patch_xy` square; z planes untouched.
pub fn crop_axial(v: &Volume3D, patch_xy: usize) -> Result<Volume3D, PreprocessError> {
    let (nx, ny, _) = v.extents();
    if patch_xy > nx || patch_xy > ny {
        return Err(PreprocessError::PatchTooLarge { patch_xy, nx, ny });
    }
    crop_axial_at(v, patch_xy, ((nx - patch_xy) / 2, (ny - patch_xy) / 2))
}

/// Axial crop with an explicit (x, y) anchor for the low corner.
pub fn crop_axial_at(
    v: &Volume3D,
    patch_xy: usize,
    offset: (usize, usize),
) -> Result<Volume3D, PreprocessError> {
    let (nx, ny, nz) = v.extents();
    if patch_xy > nx || patch_xy > ny {
        return Err(PreprocessError::PatchTooLarge { patch_xy, nx, ny });
    }
    let (ox, oy) = offset;
    if ox + patch_xy > nx || oy + patch_xy > ny {
        return Err(PreprocessError::CropOutOfBounds(ox, oy));
    }
    let mut voxels = Vec::with_capacity(patch_xy * patch_xy * nz);
    for z in 0..nz {
        for y in oy..oy + patch_xy {
            let base = v.index(ox, y, z);
            voxels.extend_from_slice(&v.voxels()[base..base + patch_xy]);
        }
    }
    Ok(Volume3D::new(
        (patch_xy, patch_xy, nz),
        v.spacing_mm(),
        v.modality(),
        voxels,
    )?)
}

/// One normalized study, ready to be cut into slices.
#[derive(Debug, Clone)]
pub struct PreprocessedStudy {
    pub pet: Volume3D,
    pub ct: Volume3D,
    pub mask: Option<Volume3D>,
}

/// The composed normalization pipeline for one study.
///
/// PET: window with `suv_window`, min-max, standardize with the dataset
/// statistics from the config. CT: window with `hu_window`, min-max,
/// standardize with this volume's own statistics. Both cropped; the mask
/// (when given) is cropped identically and left binary.
pub fn preprocess_study(
    pet: &Volume3D,
    ct: &Volume3D,
    mask: Option<&Volume3D>,
    cfg: &PreprocessConfig,
) -> Result<PreprocessedStudy, PreprocessError> {
    cfg.validate()?;
    expect_modality(pet, Modality::PetSuv)?;
    expect_modality(ct, Modality::CtHu)?;
    if !pet.same_geometry(ct) {
        return Err(PreprocessError::GeometryMismatch);
    }
    if let Some(m) = mask {
        expect_modality(m, Modality::Mask)?;
        if !pet.same_geometry(m) {
            return Err(PreprocessError::GeometryMismatch);
        }
    }
    let pet_stats = cfg
        .pet_dataset_stats
        .ok_or(PreprocessError::MissingDatasetStats)?;

    let crop = |v: &Volume3D| match cfg.crop_offset {
        Some(offset) => crop_axial_at(v, cfg.patch_xy, offset),
        None => crop_axial(v, cfg.patch_xy),
    };

    let pet_norm = standardize(&window_minmax(pet, cfg.suv_window)?, pet_stats)?;
    let ct_win = window_minmax(ct, cfg.hu_window)?;
    let ct_norm = standardize(&ct_win, volume_stats(&ct_win))?;

    Ok(PreprocessedStudy {
        pet: crop(&pet_norm)?,
        ct: crop(&ct_norm)?,
        mask: mask.map(crop).transpose()?,
    })
}

fn expect_modality(v: &Volume3D, expected: Modality) -> Result<(), PreprocessError> {
    if v.modality() != expected {
        return Err(PreprocessError::ModalityMismatch {
            expected,
            got: v.modality(),
        });
    }
    Ok(())
}

/// One axial training unit: aligned PET, CT and mask planes.
#[derive(Debug, Clone)]
pub struct SlicePair {
    pub pet: SliceGrid,
    pub ct: SliceGrid,
    pub mask: SliceGrid,
    pub has_tumor: bool,
}

impl SlicePair {
    pub fn new(pet: SliceGrid, ct: SliceGrid, mask: SliceGrid) -> Result<Self, PreprocessError> {
        let same = |a: &SliceGrid, b: &SliceGrid| a.rows() == b.rows() && a.cols() == b.cols();
        if !same(&pet, &ct) || !same(&pet, &mask) {
            return Err(PreprocessError::SliceShapeMismatch);
        }
        let has_tumor = mask.count_positive() > 0;
        Ok(Self {
            pet,
            ct,
            mask,
            has_tumor,
        })
    }
}

/// Cuts a preprocessed study (with mask) into per-plane slice pairs,
/// ordered by z.
pub fn slice_pairs(study: &PreprocessedStudy) -> Result<Vec<SlicePair>, PreprocessError> {
    let mask = study
        .mask
        .as_ref()
        .ok_or(PreprocessError::GeometryMismatch)?;
    (0..study.pet.nz())
        .map(|z| {
            SlicePair::new(
                study.pet.axial_slice(z),
                study.ct.axial_slice(z),
                mask.axial_slice(z),
            )
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Rotation {
    R90,
    R180,
    R270,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FlipAxis {
    Rows,
    Cols,
}

/// One sampled augmentation: an optional quarter-turn rotation and an
/// optional mirror, applied in that order.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AugmentDraw {
    pub rotation: Option<Rotation>,
    pub flip: Option<FlipAxis>,
}

impl AugmentDraw {
    pub fn identity() -> Self {
        Self {
            rotation: None,
            flip: None,
        }
    }

    /// Each of rotation and flip fires independently with probability 1/2;
    /// the rotation angle and flip axis are uniform over their choices. The
    /// generator is advanced by a fixed number of draws regardless of the
    /// outcome, keeping downstream consumers aligned.
    pub fn sample<R: Rng + ?Sized>(rng: &mut R) -> Self {
        let rotate = rng.random::<f64>() < 0.5;
        let angle = rng.random_range(0..3u8);
        let flip = rng.random::<f64>() < 0.5;
        let axis = rng.random_range(0..2u8);
        Self {
            rotation: rotate.then_some(match angle {
                0 => Rotation::R90,
                1 => Rotation::R180,
                _ => Rotation::R270,
            }),
            flip: flip.then_some(match axis {
                0 => FlipAxis::Rows,
                _ => FlipAxis::Cols,
            }),
        }
    }
}

/// Applies a draw to a single grid.
pub fn augment_grid(g: &SliceGrid, draw: AugmentDraw) -> SliceGrid {
    let rotated = match draw.rotation {
        None => g.clone(),
        Some(Rotation::R90) => g.rot90(),
        Some(Rotation::R180) => g.rot180(),
        Some(Rotation::R270) => g.rot270(),
    };
    match draw.flip {
        None => rotated,
        Some(FlipAxis::Rows) => rotated.flip_rows(),
        Some(FlipAxis::Cols) => rotated.flip_cols(),
    }
}

/// Applies one draw identically to PET, CT and mask.
pub fn augment(s: &SlicePair, draw: AugmentDraw) -> SlicePair {
    SlicePair {
        pet: augment_grid(&s.pet, draw),
        ct: augment_grid(&s.ct, draw),
        mask: augment_grid(&s.mask, draw),
        has_tumor: s.has_tumor,
    }
}
