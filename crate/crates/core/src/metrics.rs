//! Evaluation: foreground Dice, component-based false-positive and
//! false-negative volumes with an explicit 3D connectivity choice,
//! healthy-case handling, and weighted rank aggregation across
//! submissions.

use thiserror::Error;

use crate::numeric::kahan_sum;
use crate::volume::Volume3D;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("masks do not share a geometry")]
    ExtentMismatch,
    #[error("metric undefined on an empty ground truth")]
    HealthyCase,
    #[error("mask contains a non-binary voxel")]
    NotBinary,
    #[error("ranking needs at least 2 submissions, got {0}")]
    TooFewSubmissions(usize),
    #[error("submission {0} has a non-finite metric mean")]
    NotFinite(String),
}

/// Which voxels count as neighbors: faces only, faces plus edges, or
/// faces, edges, and corners.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Connectivity {
    Six,
    Eighteen,
    #[default]
    TwentySix,
}

impl Connectivity {
    pub fn code(self) -> u8 {
        match self {
            Connectivity::Six => 6,
            Connectivity::Eighteen => 18,
            Connectivity::TwentySix => 26,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            6 => Some(Connectivity::Six),
            18 => Some(Connectivity::Eighteen),
            26 => Some(Connectivity::TwentySix),
            _ => None,
        }
    }

    pub fn offsets(self) -> Vec<(i64, i64, i64)> {
        let max_manhattan = match self {
            Connectivity::Six => 1,
            Connectivity::Eighteen => 2,
            Connectivity::TwentySix => 3,
        };
        let mut out = Vec::new();
        for dz in -1i64..=1 {
            for dy in -1i64..=1 {
                for dx in -1i64..=1 {
                    let m = dx.abs() + dy.abs() + dz.abs();
                    if m >= 1 && m <= max_manhattan {
                        out.push((dx, dy, dz));
                    }
                }
            }
        }
        out
    }
}

/// Per-voxel component labels: 0 is background, components are numbered
/// 1..=count in first-visited scan order.
#[derive(Debug, Clone, PartialEq)]
pub struct ComponentLabeling {
    labels: Vec<u32>,
    count: u32,
    connectivity: Connectivity,
    extents: (usize, usize, usize),
}

impl ComponentLabeling {
    pub fn labels(&self) -> &[u32] {
        &self.labels
    }

    pub fn count(&self) -> usize {
        self.count as usize
    }

    pub fn connectivity(&self) -> Connectivity {
        self.connectivity
    }

    /// Voxel counts per component, indexed by label - 1.
    pub fn sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0usize; self.count as usize];
        for &l in &self.labels {
            if l > 0 {
                sizes[(l - 1) as usize] += 1;
            }
        }
        sizes
    }
}

fn require_binary(v: &Volume3D) -> Result<(), MetricsError> {
    if v.voxels().iter().any(|&x| x != 0.0 && x != 1.0) {
        return Err(MetricsError::NotBinary);
    }
    Ok(())
}

fn require_aligned(a: &Volume3D, b: &Volume3D) -> Result<(), MetricsError> {
    if !a.same_geometry(b) {
        return Err(MetricsError::ExtentMismatch);
    }
    Ok(())
}

/// Breadth-first flood fill over the chosen adjacency. Seeds are taken in
/// voxel scan order, so labeling is deterministic.
pub fn connected_components(
    mask: &Volume3D,
    connectivity: Connectivity,
) -> Result<ComponentLabeling, MetricsError> {
    require_binary(mask)?;
    let (nx, ny, nz) = mask.extents();
    let voxels = mask.voxels();
    let offsets = connectivity.offsets();
    let mut labels = vec![0u32; voxels.len()];
    let mut count = 0u32;
    let mut queue = std::collections::VecDeque::new();

    for seed in 0..voxels.len() {
        if voxels[seed] == 0.0 || labels[seed] != 0 {
            continue;
        }
        count += 1;
        labels[seed] = count;
        queue.push_back(seed);
        while let Some(idx) = queue.pop_front() {
            let x = (idx % nx) as i64;
            let y = ((idx / nx) % ny) as i64;
            let z = (idx / (nx * ny)) as i64;
            for &(dx, dy, dz) in &offsets {
                let (qx, qy, qz) = (x + dx, y + dy, z + dz);
                if qx < 0
                    || qy < 0
                    || qz < 0
                    || qx >= nx as i64
                    || qy >= ny as i64
                    || qz >= nz as i64
                {
                    continue;
                }
                let q = qx as usize + nx * (qy as usize + ny * qz as usize);
                if voxels[q] == 1.0 && labels[q] == 0 {
                    labels[q] = count;
                    queue.push_back(q);
                }
            }
        }
    }
    Ok(ComponentLabeling {
        labels,
        count,
        connectivity,
        extents: (nx, ny, nz),
    })
}

/// 2|P intersect G| / (|P| + |G|) over voxel counts.
pub fn dice_score(pred: &Volume3D, gt: &Volume3D) -> Result<f64, MetricsError> {
    require_aligned(pred, gt)?;
    require_binary(pred)?;
    require_binary(gt)?;
    let mut inter = 0u64;
    let mut p = 0u64;
    let mut g = 0u64;
    for (&pv, &gv) in pred.voxels().iter().zip(gt.voxels()) {
        p += pv as u64;
        g += gv as u64;
        inter += (pv * gv) as u64;
    }
    if g == 0 {
        return Err(MetricsError::HealthyCase);
    }
    Ok(2.0 * inter as f64 / (p + g) as f64)
}

/// Milliliters of predicted components that touch no ground-truth voxel.
/// A single overlapping voxel exonerates its whole component.
pub fn false_positive_volume(
    pred: &Volume3D,
    gt: &Volume3D,
    connectivity: Connectivity,
) -> Result<f64, MetricsError> {
    require_aligned(pred, gt)?;
    require_binary(gt)?;
    let labeling = connected_components(pred, connectivity)?;
    Ok(unmatched_ml(&labeling, gt, pred.voxel_ml()))
}

/// Milliliters of ground-truth components the prediction misses entirely.
pub fn false_negative_volume(
    pred: &Volume3D,
    gt: &Volume3D,
    connectivity: Connectivity,
) -> Result<f64, MetricsError> {
    require_aligned(pred, gt)?;
    require_binary(pred)?;
    if gt.voxels().iter().all(|&v| v == 0.0) {
        return Err(MetricsError::HealthyCase);
    }
    let labeling = connected_components(gt, connectivity)?;
    Ok(unmatched_ml(&labeling, pred, gt.voxel_ml()))
}

fn unmatched_ml(labeling: &ComponentLabeling, other: &Volume3D, voxel_ml: f64) -> f64 {
    let n = labeling.count();
    if n == 0 {
        return 0.0;
    }
    let mut touched = vec![false; n];
    let mut sizes = vec![0usize; n];
    for (&l, &ov) in labeling.labels().iter().zip(other.voxels()) {
        if l > 0 {
            sizes[(l - 1) as usize] += 1;
            if ov == 1.0 {
                touched[(l - 1) as usize] = true;
            }
        }
    }
    let voxels: usize = sizes
        .iter()
        .zip(&touched)
        .filter(|&(_, &t)| !t)
        .map(|(&s, _)| s)
        .sum();
    voxels as f64 * voxel_ml
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub study_id: String,
    pub healthy: bool,
    pub dice: Option<f64>,
    pub fpv_ml: f64,
    pub fnv_ml: Option<f64>,
    pub connectivity: Connectivity,
}

/// Scores one study. On an empty ground truth only the false-positive
/// volume is defined.
pub fn evaluate_study(
    study_id: &str,
    pred: &Volume3D,
    gt: &Volume3D,
    connectivity: Connectivity,
) -> Result<MetricsReport, MetricsError> {
    require_aligned(pred, gt)?;
    require_binary(pred)?;
    require_binary(gt)?;
    let healthy = gt.voxels().iter().all(|&v| v == 0.0);
    let fpv_ml = false_positive_volume(pred, gt, connectivity)?;
    let (dice, fnv_ml) = if healthy {
        (None, None)
    } else {
        (
            Some(dice_score(pred, gt)?),
            Some(false_negative_volume(pred, gt, connectivity)?),
        )
    };
    Ok(MetricsReport {
        study_id: study_id.to_string(),
        healthy,
        dice,
        fpv_ml,
        fnv_ml,
        connectivity,
    })
}

/// Cohort means; Dice and FNV average over non-healthy studies only.
#[derive(Debug, Clone, PartialEq)]
pub struct CohortSummary {
    pub n_studies: usize,
    pub n_healthy: usize,
    pub mean_dice: Option<f64>,
    pub mean_fpv: f64,
    pub mean_fnv: Option<f64>,
    pub connectivity: Connectivity,
}

pub fn summarize(reports: &[MetricsReport]) -> CohortSummary {
    let n = reports.len();
    let n_healthy = reports.iter().filter(|r| r.healthy).count();
    let connectivity = reports.first().map(|r| r.connectivity).unwrap_or_default();
    let mean = |xs: Vec<f64>| {
        if xs.is_empty() {
            None
        } else {
            Some(kahan_sum(xs.iter().copied()) / xs.len() as f64)
        }
    };
    CohortSummary {
        n_studies: n,
        n_healthy,
        mean_dice: mean(reports.iter().filter_map(|r| r.dice).collect()),
        mean_fpv: if n == 0 {
            0.0
        } else {
            kahan_sum(reports.iter().map(|r| r.fpv_ml)) / n as f64
        },
        mean_fnv: mean(reports.iter().filter_map(|r| r.fnv_ml).collect()),
        connectivity,
    }
}

pub const CSV_HEADER: &str = "study_id,healthy,dice,fpv_ml,fnv_ml,connectivity";

impl MetricsReport {
    pub fn csv_row(&self) -> String {
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        format!(
            "{},{},{},{},{},{}",
            self.study_id,
            self.healthy,
            opt(self.dice),
            self.fpv_ml,
            opt(self.fnv_ml),
            self.connectivity.code()
        )
    }
}

pub fn reports_to_csv(reports: &[MetricsReport]) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for r in reports {
        out.push_str(&r.csv_row());
        out.push('\n');
    }
    out
}

/// Per-submission cohort means fed into the leaderboard.
#[derive(Debug, Clone, PartialEq)]
pub struct SubmissionSummary {
    pub id: String,
    pub mean_dice: f64,
    pub mean_fpv: f64,
    pub mean_fnv: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RankedSubmission {
    pub id: String,
    pub rank_dice: f64,
    pub rank_fpv: f64,
    pub rank_fnv: f64,
    pub final_score: f64,
}

fn fractional_ranks(values: &[f64], higher_is_better: bool) -> Vec<f64> {
    let n = values.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        let cmp = values[a].partial_cmp(&values[b]).expect("finite");
        if higher_is_better {
            cmp.reverse()
        } else {
            cmp
        }
    });
    let mut ranks = vec![0.0; n];
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        // Tied entries share the average of the positions they span.
        let avg = (i + j + 2) as f64 / 2.0;
        for k in i..=j {
            ranks[order[k]] = avg;
        }
        i = j + 1;
    }
    ranks
}

pub const RANK_WEIGHTS: (f64, f64, f64) = (0.5, 0.25, 0.25);

/// Weighted rank aggregation: per-metric fractional ranks combined as
/// 0.5 * dice + 0.25 * fpv + 0.25 * fnv, ascending final score. Score ties
/// break by dice rank, then by id.
pub fn rank_aggregate(
    submissions: &[SubmissionSummary],
) -> Result<Vec<RankedSubmission>, MetricsError> {
    if submissions.len() < 2 {
        return Err(MetricsError::TooFewSubmissions(submissions.len()));
    }
    for s in submissions {
        if !(s.mean_dice.is_finite() && s.mean_fpv.is_finite() && s.mean_fnv.is_finite()) {
            return Err(MetricsError::NotFinite(s.id.clone()));
        }
    }
    let dice: Vec<f64> = submissions.iter().map(|s| s.mean_dice).collect();
    let fpv: Vec<f64> = submissions.iter().map(|s| s.mean_fpv).collect();
    let fnv: Vec<f64> = submissions.iter().map(|s| s.mean_fnv).collect();
    let rd = fractional_ranks(&dice, true);
    let rp = fractional_ranks(&fpv, false);
    let rn = fractional_ranks(&fnv, false);
    let mut ranked: Vec<RankedSubmission> = submissions
        .iter()
        .enumerate()
        .map(|(i, s)| RankedSubmission {
            id: s.id.clone(),
            rank_dice: rd[i],
            rank_fpv: rp[i],
            rank_fnv: rn[i],
            final_score: RANK_WEIGHTS.0 * rd[i] + RANK_WEIGHTS.1 * rp[i] + RANK_WEIGHTS.2 * rn[i],
        })
        .collect();
    ranked.sort_by(|a, b| {
        a.final_score
            .partial_cmp(&b.final_score)
            .expect("finite")
            .then(a.rank_dice.partial_cmp(&b.rank_dice).expect("finite"))
            .then_with(|| a.id.cmp(&b.id))
    });
    Ok(ranked)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::Modality;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn mask(extents: (usize, usize, usize), ones: &[(usize, usize, usize)]) -> Volume3D {
        let (nx, ny, nz) = extents;
        let mut v = vec![0.0; nx * ny * nz];
        for &(x, y, z) in ones {
            v[x + nx * (y + ny * z)] = 1.0;
        }
        Volume3D::new(extents, (2.0, 2.0, 2.0), Modality::Mask, v).unwrap()
    }

    #[test]
    fn dice_anchors() {
        let gt = mask((4, 4, 4), &[(0, 0, 0), (1, 0, 0), (2, 0, 0), (3, 0, 0)]);
        assert_eq!(dice_score(&gt, &gt).unwrap(), 1.0);

        let pred = mask((4, 4, 4), &[(0, 3, 3), (1, 3, 3), (2, 3, 3), (3, 3, 3)]);
        assert_eq!(dice_score(&pred, &gt).unwrap(), 0.0);

        let half = mask((4, 4, 4), &[(0, 0, 0), (1, 0, 0), (0, 1, 1), (1, 1, 1)]);
        assert_eq!(dice_score(&half, &gt).unwrap(), 0.5);

        let empty = mask((4, 4, 4), &[]);
        assert!(matches!(
            dice_score(&pred, &empty),
            Err(MetricsError::HealthyCase)
        ));
        let other = mask((4, 4, 2), &[]);
        assert!(matches!(
            dice_score(&gt, &other),
            Err(MetricsError::ExtentMismatch)
        ));
    }

    #[test]
    fn component_adjacency_table() {
        let corners = mask((5, 5, 5), &[(0, 0, 0), (4, 4, 4)]);
        for c in [
            Connectivity::Six,
            Connectivity::Eighteen,
            Connectivity::TwentySix,
        ] {
            assert_eq!(connected_components(&corners, c).unwrap().count(), 2);
        }

        // Sharing only a corner: one component at 26, two otherwise.
        let corner_pair = mask((4, 4, 4), &[(1, 1, 1), (2, 2, 2)]);
        assert_eq!(
            connected_components(&corner_pair, Connectivity::TwentySix)
                .unwrap()
                .count(),
            1
        );
        assert_eq!(
            connected_components(&corner_pair, Connectivity::Eighteen)
                .unwrap()
                .count(),
            2
        );
        assert_eq!(
            connected_components(&corner_pair, Connectivity::Six)
                .unwrap()
                .count(),
            2
        );

        // Sharing an edge: joined at 18 and 26, split at 6.
        let edge_pair = mask((4, 4, 4), &[(1, 1, 1), (2, 2, 1)]);
        assert_eq!(
            connected_components(&edge_pair, Connectivity::TwentySix)
                .unwrap()
                .count(),
            1
        );
        assert_eq!(
            connected_components(&edge_pair, Connectivity::Eighteen)
                .unwrap()
                .count(),
            1
        );
        assert_eq!(
            connected_components(&edge_pair, Connectivity::Six)
                .unwrap()
                .count(),
            2
        );

        let empty = mask((3, 3, 3), &[]);
        assert_eq!(
            connected_components(&empty, Connectivity::TwentySix)
                .unwrap()
                .count(),
            0
        );
    }

    #[test]
    fn labels_are_first_visited_contiguous() {
        let m = mask((6, 1, 1), &[(0, 0, 0), (1, 0, 0), (4, 0, 0)]);
        let l = connected_components(&m, Connectivity::Six).unwrap();
        assert_eq!(l.count(), 2);
        assert_eq!(&l.labels()[..2], &[1, 1]);
        assert_eq!(l.labels()[4], 2);
        assert_eq!(l.sizes(), vec![2, 1]);
        for (&lab, &v) in l.labels().iter().zip(m.voxels()) {
            assert_eq!(lab > 0, v == 1.0);
        }
    }

    #[test]
    fn fpv_anchors() {
        let gt = mask((6, 6, 6), &[(0, 0, 0)]);
        let empty = mask((6, 6, 6), &[]);
        assert_eq!(
            false_positive_volume(&empty, &gt, Connectivity::TwentySix).unwrap(),
            0.0
        );

        // A 10-voxel bar away from gt; voxels are 2x2x2 mm = 0.008 ml.
        let bar: Vec<(usize, usize, usize)> = (0..5).flat_map(|x| [(x, 4, 4), (x, 5, 4)]).collect();
        let pred = mask((6, 6, 6), &bar);
        let fpv = false_positive_volume(&pred, &gt, Connectivity::TwentySix).unwrap();
        assert!((fpv - 0.08).abs() < 1e-15, "fpv = {fpv}");

        // Touching gt by one voxel exonerates the whole component.
        let mut touching = bar.clone();
        touching.extend([(0, 3, 3), (0, 2, 2), (0, 1, 1), (0, 0, 0)]);
        let pred = mask((6, 6, 6), &touching);
        assert_eq!(
            false_positive_volume(&pred, &gt, Connectivity::TwentySix).unwrap(),
            0.0
        );
    }

    #[test]
    fn fnv_anchors() {
        let gt = mask(
            (8, 4, 4),
            &[(0, 0, 0), (1, 0, 0), (6, 2, 2), (7, 2, 2), (7, 3, 2)],
        );
        assert_eq!(
            false_negative_volume(&gt, &gt, Connectivity::TwentySix).unwrap(),
            0.0
        );

        // Covering only the first component leaves the 3-voxel one missed.
        let pred = mask((8, 4, 4), &[(0, 0, 0), (1, 0, 0)]);
        let fnv = false_negative_volume(&pred, &gt, Connectivity::TwentySix).unwrap();
        assert!((fnv - 3.0 * 0.008).abs() < 1e-15, "fnv = {fnv}");

        // One grazing voxel rescues a component.
        let graze = mask((8, 4, 4), &[(0, 0, 0), (1, 0, 0), (7, 3, 2)]);
        assert_eq!(
            false_negative_volume(&graze, &gt, Connectivity::TwentySix).unwrap(),
            0.0
        );

        let empty = mask((8, 4, 4), &[]);
        assert!(matches!(
            false_negative_volume(&pred, &empty, Connectivity::TwentySix),
            Err(MetricsError::HealthyCase)
        ));
    }

    // Label propagation to a fixpoint over an explicit pairwise adjacency
    // relation: independent of the breadth-first labeling above.
    fn oracle_groups(m: &Volume3D, conn: Connectivity) -> Vec<Vec<usize>> {
        let (nx, ny, nz) = m.extents();
        let fg: Vec<usize> = (0..m.voxels().len())
            .filter(|&i| m.voxels()[i] == 1.0)
            .collect();
        let coord = |i: usize| {
            (
                (i % nx) as i64,
                ((i / nx) % ny) as i64,
                (i / (nx * ny)) as i64,
            )
        };
        let _ = nz;
        let offsets = conn.offsets();
        let adjacent = |a: usize, b: usize| {
            let (ax, ay, az) = coord(a);
            let (bx, by, bz) = coord(b);
            offsets.contains(&(bx - ax, by - ay, bz - az))
        };
        let mut label: Vec<usize> = (0..fg.len()).collect();
        loop {
            let mut changed = false;
            for i in 0..fg.len() {
                for j in 0..fg.len() {
                    if i != j && adjacent(fg[i], fg[j]) && label[j] != label[i] {
                        let min = label[i].min(label[j]);
                        label[i] = min;
                        label[j] = min;
                        changed = true;
                    }
                }
            }
            if !changed {
                break;
            }
        }
        let mut groups: std::collections::BTreeMap<usize, Vec<usize>> = Default::default();
        for (k, &l) in label.iter().enumerate() {
            groups.entry(l).or_default().push(fg[k]);
        }
        groups.into_values().collect()
    }

    fn oracle_fpv(pred: &Volume3D, gt: &Volume3D, conn: Connectivity) -> f64 {
        let mut voxels = 0usize;
        for g in oracle_groups(pred, conn) {
            if g.iter().all(|&i| gt.voxels()[i] == 0.0) {
                voxels += g.len();
            }
        }
        voxels as f64 * pred.voxel_ml()
    }

    fn random_mask(rng: &mut ChaCha8Rng) -> Volume3D {
        let extents = (
            rng.random_range(1..=6usize),
            rng.random_range(1..=6usize),
            rng.random_range(1..=6usize),
        );
        let n = extents.0 * extents.1 * extents.2;
        let density = rng.random_range(0.1..0.5);
        let v: Vec<f64> = (0..n)
            .map(|_| f64::from(rng.random::<f64>() < density))
            .collect();
        Volume3D::new(extents, (2.0, 2.0, 2.0), Modality::Mask, v).unwrap()
    }

    #[test]
    fn volumes_match_brute_force_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(1234);
        for trial in 0..150 {
            let pred = random_mask(&mut rng);
            let gt_vals: Vec<f64> = pred
                .voxels()
                .iter()
                .map(|_| f64::from(rng.random::<f64>() < 0.3))
                .collect();
            let gt =
                Volume3D::new(pred.extents(), (2.0, 2.0, 2.0), Modality::Mask, gt_vals).unwrap();
            for conn in [
                Connectivity::Six,
                Connectivity::Eighteen,
                Connectivity::TwentySix,
            ] {
                let fast = false_positive_volume(&pred, &gt, conn).unwrap();
                let slow = oracle_fpv(&pred, &gt, conn);
                assert_eq!(fast, slow, "fpv trial {trial} conn {}", conn.code());

                if gt.voxels().contains(&1.0) {
                    let fast = false_negative_volume(&pred, &gt, conn).unwrap();
                    let slow = oracle_fpv(&gt, &pred, conn);
                    assert_eq!(fast, slow, "fnv trial {trial} conn {}", conn.code());
                }

                let counted = connected_components(&pred, conn).unwrap().count();
                assert_eq!(counted, oracle_groups(&pred, conn).len());
            }
        }
    }

    fn flip_x(m: &Volume3D) -> Volume3D {
        let (nx, ny, nz) = m.extents();
        let mut v = vec![0.0; m.voxels().len()];
        for z in 0..nz {
            for y in 0..ny {
                for x in 0..nx {
                    v[(nx - 1 - x) + nx * (y + ny * z)] = m.voxels()[m.index(x, y, z)];
                }
            }
        }
        Volume3D::new(m.extents(), m.spacing_mm(), m.modality(), v).unwrap()
    }

    fn rot90_xy(m: &Volume3D) -> Volume3D {
        let (nx, ny, nz) = m.extents();
        let mut v = vec![0.0; m.voxels().len()];
        // (x, y) -> (y, nx-1-x), extents (ny, nx, nz).
        for z in 0..nz {
            for y in 0..ny {
                for x in 0..nx {
                    v[y + ny * ((nx - 1 - x) + nx * z)] = m.voxels()[m.index(x, y, z)];
                }
            }
        }
        Volume3D::new((ny, nx, nz), m.spacing_mm(), m.modality(), v).unwrap()
    }

    #[test]
    fn volumes_invariant_under_shared_grid_motions() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        for _ in 0..25 {
            let pred = random_mask(&mut rng);
            let gt_vals: Vec<f64> = pred
                .voxels()
                .iter()
                .map(|_| f64::from(rng.random::<f64>() < 0.3))
                .collect();
            let gt =
                Volume3D::new(pred.extents(), (2.0, 2.0, 2.0), Modality::Mask, gt_vals).unwrap();
            let conn = Connectivity::TwentySix;
            let fpv = false_positive_volume(&pred, &gt, conn).unwrap();
            assert_eq!(
                false_positive_volume(&flip_x(&pred), &flip_x(&gt), conn).unwrap(),
                fpv
            );
            assert_eq!(
                false_positive_volume(&rot90_xy(&pred), &rot90_xy(&gt), conn).unwrap(),
                fpv
            );
            if gt.voxels().contains(&1.0) {
                let d = dice_score(&pred, &gt).unwrap();
                assert_eq!(dice_score(&flip_x(&pred), &flip_x(&gt)).unwrap(), d);
                assert_eq!(dice_score(&rot90_xy(&pred), &rot90_xy(&gt)).unwrap(), d);
            }
        }
    }

    #[test]
    fn dice_is_permutation_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let pred = mask((4, 4, 4), &[(0, 0, 0), (1, 0, 0), (2, 2, 2)]);
        let gt = mask((4, 4, 4), &[(0, 0, 0), (3, 3, 3), (2, 2, 2)]);
        let d = dice_score(&pred, &gt).unwrap();
        let mut perm: Vec<usize> = (0..64).collect();
        use rand::seq::SliceRandom;
        perm.shuffle(&mut rng);
        let apply = |m: &Volume3D| {
            let mut v = vec![0.0; 64];
            for (i, &p) in perm.iter().enumerate() {
                v[p] = m.voxels()[i];
            }
            Volume3D::new(m.extents(), m.spacing_mm(), m.modality(), v).unwrap()
        };
        assert_eq!(dice_score(&apply(&pred), &apply(&gt)).unwrap(), d);
    }

    #[test]
    fn study_reports_and_summary() {
        let gt = mask((4, 4, 4), &[(1, 1, 1), (2, 1, 1)]);
        let pred = mask((4, 4, 4), &[(1, 1, 1), (3, 3, 3)]);
        let r = evaluate_study("s1", &pred, &gt, Connectivity::TwentySix).unwrap();
        assert!(!r.healthy);
        assert!((r.dice.unwrap() - 0.5).abs() < 1e-15);
        assert_eq!(r.fpv_ml, 0.008);
        assert_eq!(r.fnv_ml.unwrap(), 0.0);

        let empty = mask((4, 4, 4), &[]);
        let h = evaluate_study("s2", &pred, &empty, Connectivity::TwentySix).unwrap();
        assert!(h.healthy);
        assert_eq!(h.dice, None);
        assert_eq!(h.fnv_ml, None);
        assert_eq!(h.fpv_ml, 2.0 * 0.008);

        let summary = summarize(&[r.clone(), h.clone()]);
        assert_eq!(summary.n_studies, 2);
        assert_eq!(summary.n_healthy, 1);
        assert!((summary.mean_dice.unwrap() - 0.5).abs() < 1e-15);
        assert!((summary.mean_fpv - 0.012).abs() < 1e-15);
        assert_eq!(summary.mean_fnv.unwrap(), 0.0);

        let csv = reports_to_csv(&[r, h]);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], CSV_HEADER);
        assert_eq!(lines.len(), 3);
        assert!(lines[2].starts_with("s2,true,,"));
        assert!(lines[2].ends_with(",26"));
    }

    fn sub(id: &str, dice: f64, fpv: f64, fnv: f64) -> SubmissionSummary {
        SubmissionSummary {
            id: id.into(),
            mean_dice: dice,
            mean_fpv: fpv,
            mean_fnv: fnv,
        }
    }

    #[test]
    fn ranking_rules() {
        // A clear dominator scores exactly 1.
        let ranked =
            rank_aggregate(&[sub("worse", 0.5, 2.0, 1.0), sub("best", 0.9, 0.5, 0.2)]).unwrap();
        assert_eq!(ranked[0].id, "best");
        assert_eq!(ranked[0].final_score, 1.0);

        // The hand-computed tie: A(1,2,2) vs B(2,1,1), both 1.5, dice
        // rank puts A first.
        let ranked = rank_aggregate(&[sub("b", 0.6, 1.0, 1.0), sub("a", 0.8, 2.0, 2.0)]).unwrap();
        assert_eq!(ranked[0].id, "a");
        assert_eq!(ranked[0].final_score, 1.5);
        assert_eq!(ranked[1].id, "b");
        assert_eq!(ranked[1].final_score, 1.5);

        // Identical submissions share averaged ranks and sort by id.
        let ranked = rank_aggregate(&[
            sub("y", 0.7, 1.0, 1.0),
            sub("x", 0.7, 1.0, 1.0),
            sub("z", 0.7, 1.0, 1.0),
        ])
        .unwrap();
        for r in &ranked {
            assert_eq!(r.rank_dice, 2.0);
            assert_eq!(r.final_score, 2.0);
        }
        assert_eq!(
            ranked.iter().map(|r| r.id.as_str()).collect::<Vec<_>>(),
            vec!["x", "y", "z"]
        );

        assert!(matches!(
            rank_aggregate(&[sub("only", 0.5, 1.0, 1.0)]),
            Err(MetricsError::TooFewSubmissions(1))
        ));
        assert!(matches!(
            rank_aggregate(&[sub("a", f64::NAN, 1.0, 1.0), sub("b", 0.5, 1.0, 1.0)]),
            Err(MetricsError::NotFinite(_))
        ));
    }

    #[test]
    fn ranking_is_permutation_invariant() {
        let subs = vec![
            sub("a", 0.8, 2.0, 0.4),
            sub("b", 0.6, 1.0, 1.0),
            sub("c", 0.9, 3.0, 0.2),
            sub("d", 0.6, 0.5, 0.9),
        ];
        let base = rank_aggregate(&subs).unwrap();
        let mut shuffled = subs.clone();
        shuffled.reverse();
        shuffled.swap(0, 2);
        let again = rank_aggregate(&shuffled).unwrap();
        assert_eq!(base, again);
    }
}
