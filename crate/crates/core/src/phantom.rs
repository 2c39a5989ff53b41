//! Synthetic PET/CT studies with analytic ground truth: ellipsoidal
//! Gaussian uptake blobs over a noisy background, plus bright non-tumor
//! decoys (brain-like near the top of the volume, bladder-like near the
//! bottom) that stage one is expected to over-segment.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::volume::{Modality, Volume3D, VolumeError};

#[derive(Debug, Error)]
pub enum PhantomError {
    #[error("invalid phantom spec: {0}")]
    SpecInvalid(String),
    #[error(transparent)]
    Volume(#[from] VolumeError),
}

/// One ellipsoidal blob. Intensity falls off as a Gaussian of the
/// normalized elliptic radius, scaled so the half-peak surface is exactly
/// the ellipsoid `rho2 == 1`; ground truth uses that same surface.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Blob {
    pub center: (f64, f64, f64),
    pub radii: (f64, f64, f64),
    pub peak_suv: f64,
}

impl Blob {
    pub fn rho2(&self, x: f64, y: f64, z: f64) -> f64 {
        let dx = (x - self.center.0) / self.radii.0;
        let dy = (y - self.center.1) / self.radii.1;
        let dz = (z - self.center.2) / self.radii.2;
        dx * dx + dy * dy + dz * dz
    }

    pub fn contains(&self, x: f64, y: f64, z: f64) -> bool {
        self.rho2(x, y, z) <= 1.0
    }

    pub fn intensity(&self, x: f64, y: f64, z: f64) -> f64 {
        self.peak_suv * (-std::f64::consts::LN_2 * self.rho2(x, y, z)).exp()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum DecoyKind {
    BrainLike,
    BladderLike,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Decoy {
    pub kind: DecoyKind,
    pub blob: Blob,
}

pub const TUMOR_PEAK_RANGE: (f64, f64) = (4.0, 14.0);
pub const DECOY_PEAK_RANGE: (f64, f64) = (6.0, 14.0);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhantomSpec {
    pub extents: (usize, usize, usize),
    pub spacing_mm: (f64, f64, f64),
    pub background_suv: f64,
    pub noise_sigma: f64,
    pub soft_tissue_hu: f64,
    pub bone_shell: bool,
    pub seed: u64,
    pub tumors: Vec<Blob>,
    pub decoys: Vec<Decoy>,
}

impl PhantomSpec {
    fn blobs(&self) -> impl Iterator<Item = &Blob> {
        self.tumors
            .iter()
            .chain(self.decoys.iter().map(|d| &d.blob))
    }

    pub fn validate(&self) -> Result<(), PhantomError> {
        let (nx, ny, nz) = self.extents;
        if nx == 0 || ny == 0 || nz == 0 {
            return Err(PhantomError::SpecInvalid("empty extents".into()));
        }
        if !(self.spacing_mm.0 > 0.0 && self.spacing_mm.1 > 0.0 && self.spacing_mm.2 > 0.0) {
            return Err(PhantomError::SpecInvalid("non-positive spacing".into()));
        }
        if !(self.background_suv >= 0.0) {
            return Err(PhantomError::SpecInvalid("negative background".into()));
        }
        if !(self.noise_sigma >= 0.0) {
            return Err(PhantomError::SpecInvalid("negative noise sigma".into()));
        }
        for (blob, range, label) in self
            .tumors
            .iter()
            .map(|b| (b, TUMOR_PEAK_RANGE, "tumor"))
            .chain(
                self.decoys
                    .iter()
                    .map(|d| (&d.blob, DECOY_PEAK_RANGE, "decoy")),
            )
        {
            if !(blob.peak_suv >= range.0 && blob.peak_suv <= range.1) {
                return Err(PhantomError::SpecInvalid(format!(
                    "{label} peak {} outside [{}, {}]",
                    blob.peak_suv, range.0, range.1
                )));
            }
            let r = blob.radii;
            if !(r.0 > 0.0 && r.1 > 0.0 && r.2 > 0.0) {
                return Err(PhantomError::SpecInvalid(format!(
                    "{label} has non-positive radius"
                )));
            }
            let c = blob.center;
            let bounds = [
                (c.0 - r.0, c.0 + r.0, (nx - 1) as f64),
                (c.1 - r.1, c.1 + r.1, (ny - 1) as f64),
                (c.2 - r.2, c.2 + r.2, (nz - 1) as f64),
            ];
            for (lo, hi, max) in bounds {
                if lo < 0.0 || hi > max {
                    return Err(PhantomError::SpecInvalid(format!(
                        "{label} blob extends outside the volume"
                    )));
                }
            }
        }
        // Exact voxel-level disjointness across every blob pair.
        let blobs: Vec<&Blob> = self.blobs().collect();
        for z in 0..nz {
            for y in 0..ny {
                for x in 0..nx {
                    let (xf, yf, zf) = (x as f64, y as f64, z as f64);
                    let mut hits = 0;
                    for b in &blobs {
                        if b.contains(xf, yf, zf) {
                            hits += 1;
                            if hits > 1 {
                                return Err(PhantomError::SpecInvalid(format!(
                                    "blobs overlap at voxel ({x}, {y}, {z})"
                                )));
                            }
                        }
                    }
                }
            }
        }
        Ok(())
    }
}

const BONE_HU: f64 = 700.0;
const AIR_HU: f64 = -1000.0;

/// Renders a study. PET is background plus per-voxel Gaussian noise plus
/// every blob's profile, floored at zero; CT is soft tissue with an
/// optional elliptic bone shell and air outside it; ground truth marks
/// tumor voxels only.
pub fn generate_phantom(
    spec: &PhantomSpec,
) -> Result<(Volume3D, Volume3D, Volume3D), PhantomError> {
    spec.validate()?;
    let (nx, ny, nz) = spec.extents;
    let n = nx * ny * nz;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let noise =
        Normal::new(0.0, spec.noise_sigma).map_err(|e| PhantomError::SpecInvalid(e.to_string()))?;

    let mut pet = vec![0.0f64; n];
    // Noise is drawn in voxel order before any blob is painted, so the
    // stream layout does not depend on the blob list.
    for v in pet.iter_mut() {
        *v = spec.background_suv + noise.sample(&mut rng);
    }
    let mut gt = vec![0.0f64; n];
    let mut idx = 0;
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                let (xf, yf, zf) = (x as f64, y as f64, z as f64);
                for b in spec.blobs() {
                    // Beyond ~6 normalized radii the profile is below any
                    // plausible noise floor; skip to keep rendering linear.
                    let rho2 = b.rho2(xf, yf, zf);
                    if rho2 < 36.0 {
                        pet[idx] += b.peak_suv * (-std::f64::consts::LN_2 * rho2).exp();
                    }
                }
                for t in &spec.tumors {
                    if t.contains(xf, yf, zf) {
                        gt[idx] = 1.0;
                        break;
                    }
                }
                idx += 1;
            }
        }
    }
    for v in pet.iter_mut() {
        if *v < 0.0 {
            *v = 0.0;
        }
    }

    let mut ct = vec![spec.soft_tissue_hu; n];
    if spec.bone_shell {
        let (cx, cy) = ((nx - 1) as f64 / 2.0, (ny - 1) as f64 / 2.0);
        let (ax, ay) = (
            ((nx - 1) as f64 / 2.0).max(1.0),
            ((ny - 1) as f64 / 2.0).max(1.0),
        );
        let mut idx = 0;
        for _z in 0..nz {
            for y in 0..ny {
                for x in 0..nx {
                    let r = ((x as f64 - cx) / ax).powi(2) + ((y as f64 - cy) / ay).powi(2);
                    let r = r.sqrt();
                    if r > 0.98 {
                        ct[idx] = AIR_HU;
                    } else if r > 0.85 {
                        ct[idx] = BONE_HU;
                    }
                    idx += 1;
                }
            }
        }
    }

    let pet = Volume3D::new(spec.extents, spec.spacing_mm, Modality::PetSuv, pet)?;
    let ct = Volume3D::new(spec.extents, spec.spacing_mm, Modality::CtHu, ct)?;
    let gt = Volume3D::new(spec.extents, spec.spacing_mm, Modality::Mask, gt)?;
    Ok((pet, ct, gt))
}

/// Geometry and difficulty knobs shared by every generated study.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusConfig {
    pub extents: (usize, usize, usize),
    pub spacing_mm: (f64, f64, f64),
    pub background_suv: f64,
    pub noise_sigma: f64,
    pub soft_tissue_hu: f64,
    pub bone_shell: bool,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            extents: (32, 32, 24),
            spacing_mm: (4.0, 4.0, 4.0),
            background_suv: 1.0,
            noise_sigma: 0.05,
            soft_tissue_hu: 40.0,
            bone_shell: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyEntry {
    pub id: String,
    pub healthy: bool,
    pub spec: PhantomSpec,
}

/// The reproducible description of a whole corpus; regenerating from it
/// yields bitwise-identical volumes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusManifest {
    pub seed: u64,
    pub mix: f64,
    pub config: CorpusConfig,
    pub studies: Vec<StudyEntry>,
}

#[derive(Debug, Clone)]
pub struct Study {
    pub id: String,
    pub healthy: bool,
    pub pet: Volume3D,
    pub ct: Volume3D,
    pub gt: Volume3D,
}

fn splitmix64(x: u64) -> u64 {
    let mut z = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn study_seed(corpus_seed: u64, index: usize) -> u64 {
    splitmix64(corpus_seed.wrapping_add(splitmix64(index as u64 + 1)))
}

fn range(rng: &mut impl Rng, lo: f64, hi: f64) -> f64 {
    lo + (hi - lo) * rng.random::<f64>()
}

/// z-extents of an ellipsoid never overlap across these bands, which keeps
/// tumors and decoys disjoint by construction: tumors live mid-volume,
/// the brain-like decoy at the top, the bladder-like decoy at the bottom.
fn draw_tumors(rng: &mut impl Rng, cfg: &CorpusConfig) -> Vec<Blob> {
    let (nx, ny, nz) = cfg.extents;
    let (nx1, ny1, nz1) = ((nx - 1) as f64, (ny - 1) as f64, (nz - 1) as f64);
    let count = rng.random_range(1..=3usize);
    let mut tumors: Vec<Blob> = Vec::with_capacity(count);
    'outer: for _ in 0..count {
        for _attempt in 0..64 {
            let radii = (
                range(rng, 2.0, 3.5),
                range(rng, 2.0, 3.5),
                range(rng, 1.5, 2.5),
            );
            let center = (
                range(rng, 0.25 * nx1, 0.75 * nx1),
                range(rng, 0.25 * ny1, 0.75 * ny1),
                range(rng, 0.35 * nz1, 0.65 * nz1),
            );
            let peak = range(rng, 4.0, 9.0);
            let candidate = Blob {
                center,
                radii,
                peak_suv: peak,
            };
            // Accept when some axis separates the bounding boxes; box
            // disjointness implies ellipsoid disjointness.
            let clear = tumors.iter().all(|t| {
                let sep = |c0: f64, r0: f64, c1: f64, r1: f64| (c0 - c1).abs() > r0 + r1;
                sep(t.center.0, t.radii.0, center.0, radii.0)
                    || sep(t.center.1, t.radii.1, center.1, radii.1)
                    || sep(t.center.2, t.radii.2, center.2, radii.2)
            });
            if clear {
                tumors.push(candidate);
                continue 'outer;
            }
        }
        // Crowded volume: settle for the tumors placed so far.
        break;
    }
    tumors
}

fn draw_decoys(rng: &mut impl Rng, cfg: &CorpusConfig) -> Vec<Decoy> {
    let (nx, ny, nz) = cfg.extents;
    let (nx1, ny1, nz1) = ((nx - 1) as f64, (ny - 1) as f64, (nz - 1) as f64);
    let mut decoys = Vec::with_capacity(2);

    let rz = range(rng, 1.5, 2.2);
    let brain = Blob {
        center: (
            range(rng, 0.42 * nx1, 0.58 * nx1),
            range(rng, 0.42 * ny1, 0.58 * ny1),
            range(rng, nz1 - rz - 1.0, nz1 - rz),
        ),
        radii: (range(rng, 4.5, 6.0), range(rng, 4.5, 6.0), rz),
        peak_suv: range(rng, 8.0, 14.0),
    };
    decoys.push(Decoy {
        kind: DecoyKind::BrainLike,
        blob: brain,
    });

    let rz = range(rng, 1.5, 2.2);
    let bladder = Blob {
        center: (
            range(rng, 0.45 * nx1, 0.55 * nx1),
            range(rng, 0.45 * ny1, 0.55 * ny1),
            range(rng, rz, rz + 1.0),
        ),
        radii: (range(rng, 3.5, 5.0), range(rng, 3.5, 5.0), rz),
        peak_suv: range(rng, 8.0, 14.0),
    };
    decoys.push(Decoy {
        kind: DecoyKind::BladderLike,
        blob: bladder,
    });
    decoys
}

/// Builds a manifest of `n` studies with `floor(n * mix)` healthy ones
/// spread evenly through the list. Decoys appear in 9 of every 10 studies.
pub fn make_corpus_with(
    cfg: &CorpusConfig,
    n: usize,
    mix: f64,
    seed: u64,
) -> Result<CorpusManifest, PhantomError> {
    if !(0.0..=1.0).contains(&mix) {
        return Err(PhantomError::SpecInvalid(format!(
            "healthy fraction {mix} outside [0, 1]"
        )));
    }
    let mut studies = Vec::with_capacity(n);
    for i in 0..n {
        let healthy = ((i + 1) as f64 * mix).floor() > (i as f64 * mix).floor();
        let with_decoys = i % 10 != 7;
        let mut rng = ChaCha8Rng::seed_from_u64(study_seed(seed, i));
        let tumors = if healthy {
            Vec::new()
        } else {
            draw_tumors(&mut rng, cfg)
        };
        let decoys = if with_decoys {
            draw_decoys(&mut rng, cfg)
        } else {
            Vec::new()
        };
        let spec = PhantomSpec {
            extents: cfg.extents,
            spacing_mm: cfg.spacing_mm,
            tumors,
            decoys,
            background_suv: cfg.background_suv,
            noise_sigma: cfg.noise_sigma,
            soft_tissue_hu: cfg.soft_tissue_hu,
            bone_shell: cfg.bone_shell,
            seed: study_seed(seed, i ^ 0x5EED_0000_0000_0000),
        };
        spec.validate()?;
        studies.push(StudyEntry {
            id: format!("study_{i:04}"),
            healthy,
            spec,
        });
    }
    Ok(CorpusManifest {
        seed,
        mix,
        config: cfg.clone(),
        studies,
    })
}

pub fn make_corpus(n: usize, mix: f64, seed: u64) -> Result<CorpusManifest, PhantomError> {
    make_corpus_with(&CorpusConfig::default(), n, mix, seed)
}

/// Renders every study in a manifest.
pub fn generate_corpus(manifest: &CorpusManifest) -> Result<Vec<Study>, PhantomError> {
    manifest
        .studies
        .iter()
        .map(|entry| {
            let (pet, ct, gt) = generate_phantom(&entry.spec)?;
            Ok(Study {
                id: entry.id.clone(),
                healthy: entry.healthy,
                pet,
                ct,
                gt,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn base_spec() -> PhantomSpec {
        PhantomSpec {
            extents: (16, 16, 12),
            spacing_mm: (4.0, 4.0, 4.0),
            tumors: Vec::new(),
            decoys: Vec::new(),
            background_suv: 1.0,
            noise_sigma: 0.0,
            soft_tissue_hu: 40.0,
            bone_shell: false,
            seed: 99,
        }
    }

    fn one_tumor() -> Blob {
        Blob {
            center: (7.0, 8.0, 6.0),
            radii: (3.0, 2.5, 2.0),
            peak_suv: 6.0,
        }
    }

    #[test]
    fn empty_spec_is_healthy_background() {
        let (pet, _ct, gt) = generate_phantom(&base_spec()).unwrap();
        assert!(gt.voxels().iter().all(|&v| v == 0.0));
        assert!(pet.voxels().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn ground_truth_matches_analytic_ellipsoid() {
        let mut spec = base_spec();
        spec.tumors = vec![one_tumor()];
        let (pet, _ct, gt) = generate_phantom(&spec).unwrap();
        let blob = one_tumor();
        let (nx, ny, nz) = spec.extents;
        for z in 0..nz {
            for y in 0..ny {
                for x in 0..nx {
                    let expect = f64::from(blob.contains(x as f64, y as f64, z as f64));
                    assert_eq!(gt.voxels()[gt.index(x, y, z)], expect, "({x},{y},{z})");
                }
            }
        }
        // Center voxel carries the full peak on top of background.
        let c = pet.voxels()[pet.index(7, 8, 6)];
        assert!((c - 7.0).abs() < 1e-12, "center = {c}");
        // At the gt boundary the added profile is half the peak.
        let edge = pet.voxels()[pet.index(10, 8, 6)]; // rho = 1 along x
        assert!((edge - (1.0 + 3.0)).abs() < 1e-12, "edge = {edge}");
    }

    #[test]
    fn decoys_brighten_pet_but_not_gt() {
        let mut spec = base_spec();
        spec.tumors = vec![one_tumor()];
        spec.decoys = vec![Decoy {
            kind: DecoyKind::BrainLike,
            blob: Blob {
                center: (7.5, 7.5, 9.5),
                radii: (4.0, 4.0, 1.5),
                peak_suv: 10.0,
            },
        }];
        let (pet, _ct, gt) = generate_phantom(&spec).unwrap();
        let at = pet.index(7, 7, 10);
        assert!(pet.voxels()[at] > 5.0);
        assert_eq!(gt.voxels()[at], 0.0);
    }

    #[test]
    fn generation_is_bitwise_deterministic() {
        let mut spec = base_spec();
        spec.noise_sigma = 0.25;
        spec.tumors = vec![one_tumor()];
        let (a_pet, a_ct, a_gt) = generate_phantom(&spec).unwrap();
        let (b_pet, b_ct, b_gt) = generate_phantom(&spec).unwrap();
        assert_eq!(a_pet.voxels(), b_pet.voxels());
        assert_eq!(a_ct.voxels(), b_ct.voxels());
        assert_eq!(a_gt.voxels(), b_gt.voxels());

        let mut other = spec.clone();
        other.seed += 1;
        let (c_pet, _, _) = generate_phantom(&other).unwrap();
        assert_ne!(a_pet.voxels(), c_pet.voxels());
    }

    #[test]
    fn noise_floor_is_zero() {
        let mut spec = base_spec();
        spec.background_suv = 0.1;
        spec.noise_sigma = 1.0;
        let (pet, _, _) = generate_phantom(&spec).unwrap();
        assert!(pet.voxels().iter().all(|&v| v >= 0.0));
        assert!(pet.voxels().contains(&0.0), "clamp never hit");
    }

    #[test]
    fn invalid_specs_are_rejected() {
        let mut spec = base_spec();
        spec.tumors = vec![Blob {
            peak_suv: 3.0,
            ..one_tumor()
        }];
        assert!(matches!(
            generate_phantom(&spec),
            Err(PhantomError::SpecInvalid(_))
        ));

        let mut spec = base_spec();
        spec.tumors = vec![Blob {
            center: (1.0, 8.0, 6.0),
            ..one_tumor()
        }];
        assert!(matches!(
            generate_phantom(&spec),
            Err(PhantomError::SpecInvalid(_))
        ));

        let mut spec = base_spec();
        spec.tumors = vec![one_tumor()];
        spec.decoys = vec![Decoy {
            kind: DecoyKind::BladderLike,
            blob: Blob {
                center: (8.0, 8.0, 6.5),
                radii: (3.0, 3.0, 2.0),
                peak_suv: 9.0,
            },
        }];
        assert!(matches!(
            generate_phantom(&spec),
            Err(PhantomError::SpecInvalid(_))
        ));

        let mut spec = base_spec();
        spec.noise_sigma = -0.1;
        assert!(matches!(
            generate_phantom(&spec),
            Err(PhantomError::SpecInvalid(_))
        ));
    }

    #[test]
    fn bone_shell_rings_the_ct() {
        let mut spec = base_spec();
        spec.bone_shell = true;
        let (_, ct, _) = generate_phantom(&spec).unwrap();
        assert_eq!(ct.voxels()[ct.index(7, 7, 0)], 40.0);
        assert_eq!(ct.voxels()[ct.index(0, 0, 0)], AIR_HU);
        assert!(ct.voxels().contains(&BONE_HU));
    }

    #[test]
    fn corpus_mix_and_decoy_floor() {
        let m = make_corpus(20, 0.5, 41).unwrap();
        assert_eq!(m.studies.len(), 20);
        assert_eq!(m.studies.iter().filter(|s| s.healthy).count(), 10);
        for s in &m.studies {
            assert_eq!(s.healthy, s.spec.tumors.is_empty());
        }
        let with_decoys = m
            .studies
            .iter()
            .filter(|s| !s.spec.decoys.is_empty())
            .count();
        assert!(
            with_decoys >= 16,
            "only {with_decoys}/20 studies have decoys"
        );

        let all_healthy = make_corpus(10, 1.0, 41).unwrap();
        assert!(all_healthy.studies.iter().all(|s| s.healthy));
        assert!(matches!(
            make_corpus(4, 1.5, 41),
            Err(PhantomError::SpecInvalid(_))
        ));
    }

    #[test]
    fn manifest_round_trips_and_regenerates() {
        let m = make_corpus(6, 0.33, 7).unwrap();
        let text = toml::to_string(&m).unwrap();
        let back: CorpusManifest = toml::from_str(&text).unwrap();
        assert_eq!(back, m);

        let a = generate_corpus(&m).unwrap();
        let b = generate_corpus(&back).unwrap();
        assert_eq!(a.len(), 6);
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.id, y.id);
            assert_eq!(x.pet.voxels(), y.pet.voxels());
            assert_eq!(x.ct.voxels(), y.ct.voxels());
            assert_eq!(x.gt.voxels(), y.gt.voxels());
        }
    }

    #[test]
    fn generated_studies_survive_file_round_trips() {
        use crate::nifti::{read_volume, write_volume_with, DataType, Endianness};
        let m = make_corpus(2, 0.0, 13).unwrap();
        let studies = generate_corpus(&m).unwrap();
        let dir = tempfile::tempdir().unwrap();
        for s in &studies {
            for (vol, name) in [(&s.pet, "pet"), (&s.ct, "ct"), (&s.gt, "gt")] {
                let path = dir.path().join(format!("{}_{name}.nii", s.id));
                write_volume_with(vol, &path, DataType::F64, Endianness::Little).unwrap();
                let back = read_volume(&path, vol.modality()).unwrap();
                assert_eq!(back.voxels(), vol.voxels());
                assert_eq!(back.extents(), vol.extents());
            }
        }
    }
}
