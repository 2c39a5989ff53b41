//! Two-stage inference: a coarse slice-wise probability map, thresholded
//! and fed back through the refinement network, then fused across models
//! (optionally with an external probability volume) and thresholded once.

use thiserror::Error;

use crate::graph::{ComputeGraph, EngineError, ParamStore};
use crate::networks::{
    forward_segment, probs_to_grids, stack_gsm, stack_lrm, GsmInput, LrmInput, NetworkError,
    BINARY_THRESHOLD,
};
use crate::preprocess::PreprocessedStudy;
use crate::volume::{Modality, SliceGrid, Volume3D, VolumeError};

pub const DEFAULT_EXTERNAL_WEIGHT: f64 = 0.35;

#[derive(Debug, Error)]
pub enum CascadeError {
    #[error("fusion needs at least one model output")]
    EmptyModelList,
    #[error("fusion inputs do not share a geometry")]
    ExtentMismatch,
    #[error("stage-two inputs are not aligned with the study")]
    MisalignedInputs,
    #[error("external weight {0} outside [0, 1]")]
    BadWeight(f64),
    #[error("voxel {index} holds {value}, not a probability")]
    NotProbability { index: usize, value: f64 },
    #[error(transparent)]
    Network(#[from] NetworkError),
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error(transparent)]
    Volume(#[from] VolumeError),
}

fn assemble(
    like: &Volume3D,
    grids: Vec<SliceGrid>,
    modality: Modality,
) -> Result<Volume3D, CascadeError> {
    let mut voxels = Vec::with_capacity(like.voxels().len());
    for g in &grids {
        voxels.extend_from_slice(g.data());
    }
    Ok(Volume3D::new(
        like.extents(),
        like.spacing_mm(),
        modality,
        voxels,
    )?)
}

/// Runs the coarse stage over every axial plane and returns the assembled
/// probability volume together with its 0.5-thresholded mask.
pub fn infer_global(
    gsm: &ComputeGraph,
    params: &ParamStore,
    study: &PreprocessedStudy,
) -> Result<(Volume3D, Volume3D), CascadeError> {
    let inputs: Vec<GsmInput> = (0..study.pet.nz())
        .map(|z| GsmInput::new(study.pet.axial_slice(z), study.ct.axial_slice(z)))
        .collect::<Result<_, _>>()?;
    let probs = forward_segment(gsm, params, &stack_gsm(&inputs)?)?;
    let prob = assemble(&study.pet, probs_to_grids(&probs), Modality::Prob)?;
    let binary = threshold_mask(&prob)?;
    Ok((prob, binary))
}

/// Runs the refinement stage on the 5-channel layout: PET, PET, CT, the
/// coarse probabilities, and their binarization. The binary volume must be
/// exactly the 0.5-thresholded probability volume.
pub fn refine_local(
    lrm: &ComputeGraph,
    params: &ParamStore,
    study: &PreprocessedStudy,
    global_prob: &Volume3D,
    global_binary: &Volume3D,
) -> Result<Volume3D, CascadeError> {
    if !global_prob.same_geometry(&study.pet) || !global_binary.same_geometry(&study.pet) {
        return Err(CascadeError::MisalignedInputs);
    }
    let inputs: Vec<LrmInput> = (0..study.pet.nz())
        .map(|z| {
            LrmInput::new(
                study.pet.axial_slice(z),
                study.ct.axial_slice(z),
                global_prob.axial_slice(z),
                global_binary.axial_slice(z),
            )
        })
        .collect::<Result<_, _>>()
        .map_err(|e| match e {
            NetworkError::InconsistentLrmInput { .. } | NetworkError::ChannelOutOfRange { .. } => {
                CascadeError::MisalignedInputs
            }
            other => other.into(),
        })?;
    let probs = forward_segment(lrm, params, &stack_lrm(&inputs)?)?;
    assemble(&study.pet, probs_to_grids(&probs), Modality::Prob)
}

/// Binarizes a probability volume; 0.5 maps to foreground.
pub fn threshold_mask(prob: &Volume3D) -> Result<Volume3D, CascadeError> {
    for (index, &value) in prob.voxels().iter().enumerate() {
        if !(0.0..=1.0).contains(&value) {
            return Err(CascadeError::NotProbability { index, value });
        }
    }
    Ok(Volume3D::new(
        prob.extents(),
        prob.spacing_mm(),
        Modality::Mask,
        prob.voxels()
            .iter()
            .map(|&p| f64::from(p >= BINARY_THRESHOLD))
            .collect(),
    )?)
}

/// Voxelwise `w_ext * external + (1 - w_ext) * mean(cv_probs)`; without an
/// external map this is the plain cross-validation average.
pub fn ensemble_fuse(
    cv_probs: &[Volume3D],
    external: Option<&Volume3D>,
    w_ext: f64,
) -> Result<Volume3D, CascadeError> {
    let first = cv_probs.first().ok_or(CascadeError::EmptyModelList)?;
    if !(0.0..=1.0).contains(&w_ext) {
        return Err(CascadeError::BadWeight(w_ext));
    }
    if cv_probs.iter().any(|v| !v.same_geometry(first))
        || external.is_some_and(|e| !e.same_geometry(first))
    {
        return Err(CascadeError::ExtentMismatch);
    }
    let k = cv_probs.len() as f64;
    let mut out = vec![0.0; first.voxels().len()];
    for v in cv_probs {
        for (o, &p) in out.iter_mut().zip(v.voxels()) {
            *o += p;
        }
    }
    for o in &mut out {
        *o /= k;
    }
    if let Some(ext) = external {
        for (o, &x) in out.iter_mut().zip(ext.voxels()) {
            *o = w_ext * x + (1.0 - w_ext) * *o;
        }
    }
    Ok(Volume3D::new(
        first.extents(),
        first.spacing_mm(),
        Modality::Prob,
        out,
    )?)
}

/// One trained two-stage pair, addressed by id in provenance listings.
#[derive(Debug, Clone)]
pub struct CascadeModel {
    pub id: String,
    pub gsm: ComputeGraph,
    pub gsm_params: ParamStore,
    pub lrm: ComputeGraph,
    pub lrm_params: ParamStore,
}

impl CascadeModel {
    pub fn new(
        id: impl Into<String>,
        gsm: ComputeGraph,
        gsm_params: ParamStore,
        lrm: ComputeGraph,
        lrm_params: ParamStore,
    ) -> Result<Self, CascadeError> {
        gsm_params.validate_for(&gsm)?;
        lrm_params.validate_for(&lrm)?;
        Ok(Self {
            id: id.into(),
            gsm,
            gsm_params,
            lrm,
            lrm_params,
        })
    }

    /// Both stages end to end, producing this model's refined probabilities.
    pub fn cascade_prob(&self, study: &PreprocessedStudy) -> Result<Volume3D, CascadeError> {
        let (prob, binary) = infer_global(&self.gsm, &self.gsm_params, study)?;
        refine_local(&self.lrm, &self.lrm_params, study, &prob, &binary)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StudyPrediction {
    pub prob: Volume3D,
    pub binary: Volume3D,
    /// (source id, effective fusion weight); sums to 1.
    pub provenance: Vec<(String, f64)>,
}

pub const EXTERNAL_SOURCE_ID: &str = "external";

fn provenance_weights(
    models: &[CascadeModel],
    has_external: bool,
    w_ext: f64,
) -> Vec<(String, f64)> {
    let k = models.len() as f64;
    let per_model = if has_external {
        (1.0 - w_ext) / k
    } else {
        1.0 / k
    };
    let mut out: Vec<(String, f64)> = models.iter().map(|m| (m.id.clone(), per_model)).collect();
    if has_external {
        out.push((EXTERNAL_SOURCE_ID.to_string(), w_ext));
    }
    // Pin the final entry to the complement of the running sum so the list
    // totals exactly 1.0 in left-to-right f64 addition.
    let partial: f64 = out[..out.len() - 1].iter().map(|(_, w)| w).sum();
    out.last_mut().expect("k >= 1").1 = 1.0 - partial;
    out
}

/// Full per-study inference: each model's cascade, ensemble fusion, one
/// final threshold.
pub fn segment_study(
    models: &[CascadeModel],
    external: Option<&Volume3D>,
    w_ext: f64,
    study: &PreprocessedStudy,
) -> Result<StudyPrediction, CascadeError> {
    if models.is_empty() {
        return Err(CascadeError::EmptyModelList);
    }
    let probs: Vec<Volume3D> = models
        .iter()
        .map(|m| m.cascade_prob(study))
        .collect::<Result<_, _>>()?;
    let prob = ensemble_fuse(&probs, external, w_ext)?;
    let binary = threshold_mask(&prob)?;
    Ok(StudyPrediction {
        prob,
        binary,
        provenance: provenance_weights(models, external.is_some(), w_ext),
    })
}
