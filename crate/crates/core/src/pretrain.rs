//! Label-free encoder warm-up: two augmented views per tumor slice, a
//! temperature-scaled contrastive objective over projected embeddings, and
//! export of the encoder weights under the same names stage one uses.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::graph::{
    backward_seeded, forward, ComputeGraph, EngineError, GraphBuilder, Objective, ParamStore, Sig,
};
use crate::networks::{encoder_levels, GsmInput, NetConfig, NetworkError, GSM_IN_CHANNELS};
use crate::preprocess::{augment_grid, AugmentDraw, SlicePair};
use crate::tensor::Tensor;
use crate::trainer::{
    adamw_step, cosine_lr, init_params, EpochStats, OptimHyper, OptimState, TrainError,
};

pub const DEFAULT_TEMPERATURE: f64 = 0.1;
pub const DEFAULT_PROJ_DIM: usize = 16;

#[derive(Debug, Error)]
pub enum PretrainError {
    #[error("view construction needs a tumor slice")]
    NotTumorSlice,
    #[error("contrastive batch needs at least 2 pairs, got {0}")]
    BatchTooSmall(usize),
    #[error("no tumor slices to pretrain on")]
    EmptyCorpus,
    #[error("temperature must be positive, got {0}")]
    BadTemperature(f64),
    #[error("embeddings must be a [2B, D] matrix, got {0:?}")]
    BadEmbeddingShape(Vec<usize>),
    #[error(transparent)]
    Network(#[from] NetworkError),
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error(transparent)]
    Train(#[from] TrainError),
}

impl From<PretrainError> for EngineError {
    fn from(e: PretrainError) -> Self {
        EngineError::ObjectiveFailed(e.to_string())
    }
}

/// Two independently augmented 3-channel views of one tumor slice.
#[derive(Debug, Clone)]
pub struct ViewPair {
    pub view_a: GsmInput,
    pub view_b: GsmInput,
}

pub fn make_views(
    s: &SlicePair,
    draw_a: AugmentDraw,
    draw_b: AugmentDraw,
) -> Result<ViewPair, PretrainError> {
    if !s.has_tumor {
        return Err(PretrainError::NotTumorSlice);
    }
    let view =
        |draw: AugmentDraw| GsmInput::new(augment_grid(&s.pet, draw), augment_grid(&s.ct, draw));
    Ok(ViewPair {
        view_a: view(draw_a)?,
        view_b: view(draw_b)?,
    })
}

/// Encoder tower plus projection head: global average pooling over the
/// deepest feature map, then a linear map to `proj_dim` dimensions. The
/// encoder shares the segmenter's `encoder.` namespace; the projection
/// lives under `projection.` and is dropped at export.
pub fn build_pretrain_encoder(
    cfg: &NetConfig,
    patch_xy: usize,
    proj_dim: usize,
) -> Result<ComputeGraph, PretrainError> {
    cfg.validate(patch_xy)?;
    let mut b = GraphBuilder::new();
    let input = b.input(
        "image",
        Sig::Map {
            c: GSM_IN_CHANNELS,
            h: patch_xy,
            w: patch_xy,
        },
    )?;
    let levels = encoder_levels(&mut b, input, cfg, true)?;
    let pooled = b.global_avg_pool(*levels.last().expect("depth >= 2"))?;
    let proj = b.matmul(pooled, "projection", proj_dim)?;
    Ok(b.build(proj)?)
}

fn check_embedding_shape(shape: &[usize]) -> Result<(usize, usize), PretrainError> {
    if shape.len() != 2 || !shape[0].is_multiple_of(2) {
        return Err(PretrainError::BadEmbeddingShape(shape.to_vec()));
    }
    let pairs = shape[0] / 2;
    if pairs < 2 {
        return Err(PretrainError::BatchTooSmall(pairs));
    }
    Ok((shape[0], shape[1]))
}

/// Row-normalizes to unit length; rows shorter than 1e-12 pass through
/// unscaled so degenerate embeddings stay finite.
fn normalize_rows(data: &[f64], rows: usize, d: usize) -> (Vec<f64>, Vec<f64>) {
    let mut z = vec![0.0; rows * d];
    let mut norms = vec![0.0; rows];
    for i in 0..rows {
        let row = &data[i * d..(i + 1) * d];
        let r = row.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
        norms[i] = r;
        for (o, &x) in z[i * d..(i + 1) * d].iter_mut().zip(row) {
            *o = x / r;
        }
    }
    (z, norms)
}

/// Loss over normalized rows plus its gradient with respect to those rows.
/// Row `i`'s positive is `(i + B) mod 2B`; every other row is a negative.
fn nt_xent_parts(z: &[f64], rows: usize, d: usize, tau: f64) -> (f64, Vec<f64>) {
    let pairs = rows / 2;
    let dot = |i: usize, j: usize| -> f64 {
        z[i * d..(i + 1) * d]
            .iter()
            .zip(&z[j * d..(j + 1) * d])
            .map(|(a, b)| a * b)
            .sum()
    };
    let mut sims = vec![0.0; rows * rows];
    for i in 0..rows {
        for j in 0..rows {
            if i != j {
                sims[i * rows + j] = dot(i, j) / tau;
            }
        }
    }

    // coeff[i][j] = d(loss)/d(sims[i][j]) for ordered pairs, i != j.
    let mut coeff = vec![0.0; rows * rows];
    let mut loss = 0.0;
    for i in 0..rows {
        let pos = (i + pairs) % rows;
        let mut mx = f64::NEG_INFINITY;
        for j in 0..rows {
            if j != i {
                mx = mx.max(sims[i * rows + j]);
            }
        }
        let mut denom = 0.0;
        for j in 0..rows {
            if j != i {
                denom += (sims[i * rows + j] - mx).exp();
            }
        }
        loss += -(sims[i * rows + pos] - mx) + denom.ln();
        for j in 0..rows {
            if j != i {
                let softmax = (sims[i * rows + j] - mx).exp() / denom;
                coeff[i * rows + j] = (softmax - f64::from(j == pos)) / rows as f64;
            }
        }
    }
    loss /= rows as f64;

    let mut grad = vec![0.0; rows * d];
    for k in 0..rows {
        for j in 0..rows {
            if j == k {
                continue;
            }
            let c = (coeff[k * rows + j] + coeff[j * rows + k]) / tau;
            for (g, &zj) in grad[k * d..(k + 1) * d]
                .iter_mut()
                .zip(&z[j * d..(j + 1) * d])
            {
                *g += c * zj;
            }
        }
    }
    (loss, grad)
}

/// Contrastive loss over pre-normalized embeddings laid out as
/// `[2B, D]` with view A in rows `0..B` and view B in rows `B..2B`.
pub fn nt_xent_loss(embeddings: &Tensor, temperature: f64) -> Result<f64, PretrainError> {
    if !(temperature > 0.0) {
        return Err(PretrainError::BadTemperature(temperature));
    }
    let (rows, d) = check_embedding_shape(embeddings.shape())?;
    let (loss, _) = nt_xent_parts(embeddings.data(), rows, d, temperature);
    Ok(loss)
}

/// Objective head over raw projections: normalizes rows, scores the
/// contrastive loss, and backpropagates through the normalization.
pub struct NtXentObjective {
    pub temperature: f64,
}

impl Objective for NtXentObjective {
    fn value(&self, output: &Tensor) -> Result<f64, EngineError> {
        if !(self.temperature > 0.0) {
            return Err(PretrainError::BadTemperature(self.temperature).into());
        }
        let (rows, d) = check_embedding_shape(output.shape()).map_err(EngineError::from)?;
        let (z, _) = normalize_rows(output.data(), rows, d);
        Ok(nt_xent_parts(&z, rows, d, self.temperature).0)
    }

    fn seed(&self, output: &Tensor) -> Result<Tensor, EngineError> {
        if !(self.temperature > 0.0) {
            return Err(PretrainError::BadTemperature(self.temperature).into());
        }
        let (rows, d) = check_embedding_shape(output.shape()).map_err(EngineError::from)?;
        let (z, norms) = normalize_rows(output.data(), rows, d);
        let (_, gz) = nt_xent_parts(&z, rows, d, self.temperature);
        // d(loss)/d(raw) = (g - (g . z) z) / |raw| per row.
        let mut seed = vec![0.0; rows * d];
        for i in 0..rows {
            let zi = &z[i * d..(i + 1) * d];
            let gi = &gz[i * d..(i + 1) * d];
            let g_dot_z: f64 = gi.iter().zip(zi).map(|(a, b)| a * b).sum();
            for ((s, &g), &zv) in seed[i * d..(i + 1) * d].iter_mut().zip(gi).zip(zi) {
                *s = (g - g_dot_z * zv) / norms[i];
            }
        }
        Ok(Tensor::new(output.shape().to_vec(), seed).expect("sized above"))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PretrainPlan {
    pub seed: u64,
    pub epochs: usize,
    /// View pairs per batch.
    pub batch_pairs: usize,
    pub temperature: f64,
    pub proj_dim: usize,
    pub hyper: OptimHyper,
}

impl PretrainPlan {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            epochs: 50,
            batch_pairs: 8,
            temperature: DEFAULT_TEMPERATURE,
            proj_dim: DEFAULT_PROJ_DIM,
            hyper: OptimHyper::default(),
        }
    }
}

#[derive(Debug)]
pub struct PretrainOutcome {
    /// Encoder parameters only, ready to load into the stage-one network.
    pub encoder: ParamStore,
    /// Full training-time parameters, projection head included.
    pub full: ParamStore,
    pub graph: ComputeGraph,
    pub history: Vec<EpochStats>,
}

/// Runs the contrastive warm-up on the tumor slices of a corpus and
/// returns the encoder weights. Deterministic in (corpus, cfg, plan).
pub fn pretrain_encoder(
    corpus: &[SlicePair],
    cfg: &NetConfig,
    patch_xy: usize,
    plan: &PretrainPlan,
) -> Result<PretrainOutcome, PretrainError> {
    if !(plan.temperature > 0.0) {
        return Err(PretrainError::BadTemperature(plan.temperature));
    }
    let tumor: Vec<usize> = (0..corpus.len()).filter(|&i| corpus[i].has_tumor).collect();
    if tumor.is_empty() {
        return Err(PretrainError::EmptyCorpus);
    }
    if plan.batch_pairs < 2 || plan.epochs == 0 {
        return Err(PretrainError::BatchTooSmall(plan.batch_pairs));
    }

    let graph = build_pretrain_encoder(cfg, patch_xy, plan.proj_dim)?;
    let mut rng = ChaCha8Rng::seed_from_u64(plan.seed);
    let mut params = init_params(&graph, &mut rng);
    let mut state = OptimState::new(plan.hyper);
    let objective = NtXentObjective {
        temperature: plan.temperature,
    };
    let mut history = Vec::with_capacity(plan.epochs);

    for epoch in 0..plan.epochs {
        let lr = cosine_lr(epoch, plan.epochs, plan.hyper.lr_max)?;
        let mut order = tumor.clone();
        order.shuffle(&mut rng);

        let mut weighted = 0.0;
        let mut loss_acc = 0.0;
        for chunk in order.chunks(plan.batch_pairs) {
            // A trailing chunk with a single pair has no negatives; fold it
            // away rather than scoring a degenerate batch.
            if chunk.len() < 2 {
                continue;
            }
            let mut views_a = Vec::with_capacity(chunk.len());
            let mut views_b = Vec::with_capacity(chunk.len());
            for &idx in chunk {
                let draw_a = AugmentDraw::sample(&mut rng);
                let draw_b = AugmentDraw::sample(&mut rng);
                let pair = make_views(&corpus[idx], draw_a, draw_b)?;
                views_a.push(pair.view_a);
                views_b.push(pair.view_b);
            }
            views_a.extend(views_b);
            let input = crate::networks::stack_gsm(&views_a)?;
            let pass = forward(&graph, &params, &[("image", &input)])?;
            let loss = objective.value(pass.output())?;
            if !loss.is_finite() {
                return Err(TrainError::NonFiniteLoss { epoch }.into());
            }
            let seed = objective.seed(pass.output())?;
            backward_seeded(&graph, &mut params, &pass, &seed)?;
            adamw_step(&mut params, &mut state, lr)?;

            let w = chunk.len() as f64;
            weighted += w;
            loss_acc += w * loss;
        }
        if weighted == 0.0 {
            return Err(PretrainError::BatchTooSmall(1));
        }
        let loss = loss_acc / weighted;
        history.push(EpochStats {
            epoch,
            lr,
            loss,
            components: vec![("nt_xent", loss)],
        });
    }

    let mut encoder = crate::checkpoint::filter_prefix(&params, "encoder.");
    for (_, t) in encoder.iter_mut() {
        t.clear_grad();
    }
    Ok(PretrainOutcome {
        encoder,
        full: params,
        graph,
        history,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::checkpoint::load_by_prefix;
    use crate::networks::build_gsm;
    use crate::preprocess::{FlipAxis, Rotation};
    use crate::volume::SliceGrid;

    fn grid(rows: usize, cols: usize, f: impl Fn(usize, usize) -> f64) -> SliceGrid {
        let data = (0..rows * cols).map(|i| f(i / cols, i % cols)).collect();
        SliceGrid::new(rows, cols, data).unwrap()
    }

    fn tumor_slice(k: usize) -> SlicePair {
        let r0 = k % 6;
        let peak = 2.0 + 0.4 * k as f64;
        let pet = grid(8, 8, |r, c| {
            if (r0..r0 + 2).contains(&r) && (1 + k % 3..4 + k % 3).contains(&c) {
                peak
            } else {
                0.05
            }
        });
        let mask = grid(8, 8, |r, c| {
            f64::from((r0..r0 + 2).contains(&r) && (1 + k % 3..4 + k % 3).contains(&c))
        });
        let ct = grid(8, 8, |r, _| 0.2 + 0.05 * r as f64);
        SlicePair {
            pet,
            ct,
            mask,
            has_tumor: true,
        }
    }

    #[test]
    fn views_respect_tumor_contract() {
        let s = tumor_slice(1);
        let draw = AugmentDraw {
            rotation: Some(Rotation::R90),
            flip: Some(FlipAxis::Rows),
        };
        let pair = make_views(&s, draw, draw).unwrap();
        assert_eq!(pair.view_a.pet.data(), pair.view_b.pet.data());
        assert_eq!(pair.view_a.ct.data(), pair.view_b.ct.data());

        let mut healthy = tumor_slice(1);
        healthy.has_tumor = false;
        assert!(matches!(
            make_views(&healthy, draw, draw),
            Err(PretrainError::NotTumorSlice)
        ));
    }

    fn unit_rows(rows: Vec<Vec<f64>>) -> Tensor {
        let d = rows[0].len();
        let n = rows.len();
        Tensor::new(vec![n, d], rows.into_iter().flatten().collect()).unwrap()
    }

    #[test]
    fn loss_anchor_orthogonal_positives() {
        // Positives identical, negatives orthogonal, tau = 0.1.
        let e = unit_rows(vec![
            vec![1.0, 0.0],
            vec![0.0, 1.0],
            vec![1.0, 0.0],
            vec![0.0, 1.0],
        ]);
        let loss = nt_xent_loss(&e, 0.1).unwrap();
        let expect = -((10.0f64).exp() / ((10.0f64).exp() + 2.0)).ln();
        assert!((loss - expect).abs() < 1e-12, "{loss} vs {expect}");
    }

    #[test]
    fn loss_anchor_collapsed_embeddings() {
        for pairs in [2usize, 3, 5] {
            let e = unit_rows(vec![vec![1.0, 0.0, 0.0]; 2 * pairs]);
            let loss = nt_xent_loss(&e, 0.1).unwrap();
            let expect = ((2 * pairs - 1) as f64).ln();
            assert!((loss - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn loss_rejects_bad_batches() {
        let e = unit_rows(vec![vec![1.0, 0.0], vec![0.0, 1.0]]);
        assert!(matches!(
            nt_xent_loss(&e, 0.1),
            Err(PretrainError::BatchTooSmall(1))
        ));
        let odd = Tensor::new(vec![5, 2], vec![0.1; 10]).unwrap();
        assert!(matches!(
            nt_xent_loss(&odd, 0.1),
            Err(PretrainError::BadEmbeddingShape(_))
        ));
        let e = unit_rows(vec![vec![1.0, 0.0]; 8]);
        assert!(matches!(
            nt_xent_loss(&e, 0.0),
            Err(PretrainError::BadTemperature(_))
        ));
    }

    #[test]
    fn objective_gradient_matches_finite_differences() {
        use crate::graph::{gradient_check, sample_coords, GraphBuilder};
        let mut b = GraphBuilder::new();
        let x = b.input("emb", Sig::Flat { k: 4 }).unwrap();
        let m = b.matmul(x, "projection", 5).unwrap();
        let g = b.build(m).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut params = init_params(&g, &mut rng);
        let input = Tensor::new(
            vec![6, 4],
            (0..24)
                .map(|i| ((i * 37 % 17) as f64 - 8.0) * 0.11)
                .collect(),
        )
        .unwrap();
        let coords = sample_coords(&params, 20, &mut rng);
        let report = gradient_check(
            &g,
            &mut params,
            &[("emb", &input)],
            &NtXentObjective { temperature: 0.1 },
            &coords,
            1e-6,
        )
        .unwrap();
        assert!(
            report.max_rel_err < 1e-6,
            "max rel err {}",
            report.max_rel_err
        );
    }

    fn toy_corpus(n: usize) -> Vec<SlicePair> {
        (0..n).map(tumor_slice).collect()
    }

    #[test]
    fn pretraining_learns_and_exports_cleanly() {
        let cfg = NetConfig {
            base_channels: 2,
            depth: 2,
        };
        let mut plan = PretrainPlan::new(23);
        plan.epochs = 30;
        plan.batch_pairs = 4;
        plan.proj_dim = 4;
        plan.hyper.lr_max = 5e-4;
        let corpus = toy_corpus(8);
        let out = pretrain_encoder(&corpus, &cfg, 8, &plan).unwrap();

        assert_eq!(out.history.len(), plan.epochs);
        let first = out.history.first().unwrap().loss;
        let last = out.history.last().unwrap().loss;
        assert!(last < first, "loss went {first} -> {last}");

        // Encoder-only export, no projection head.
        assert!(out.encoder.iter().all(|(n, _)| n.starts_with("encoder.")));
        assert!(out.full.contains("projection.weight"));
        assert!(!out.encoder.contains("projection.weight"));

        // The export loads into the stage-one network without leftovers.
        let gsm = build_gsm(&cfg, 8).unwrap();
        let mut gsm_params = init_params(&gsm, &mut ChaCha8Rng::seed_from_u64(0));
        let loaded = load_by_prefix(&mut gsm_params, &out.encoder, "encoder.").unwrap();
        assert_eq!(loaded, out.encoder.len());

        // Same seed, same run.
        let again = pretrain_encoder(&corpus, &cfg, 8, &plan).unwrap();
        assert_eq!(again.encoder, out.encoder);
        assert_eq!(again.history, out.history);
    }

    #[test]
    fn rotated_views_embed_nearby_after_training() {
        let cfg = NetConfig {
            base_channels: 2,
            depth: 2,
        };
        let mut plan = PretrainPlan::new(31);
        plan.epochs = 25;
        plan.batch_pairs = 4;
        plan.proj_dim = 4;
        plan.hyper.lr_max = 3e-3;
        let corpus = toy_corpus(8);
        let out = pretrain_encoder(&corpus, &cfg, 8, &plan).unwrap();

        // Embed a rotation-only view pair per slice with the trained weights.
        let rot = AugmentDraw {
            rotation: Some(Rotation::R90),
            flip: None,
        };
        let id = AugmentDraw::identity();
        let mut views = Vec::new();
        for s in &corpus {
            let pair = make_views(s, id, rot).unwrap();
            views.push(pair.view_a);
            views.push(pair.view_b);
        }
        let input = crate::networks::stack_gsm(&views).unwrap();
        let pass = forward(&out.graph, &out.full, &[("image", &input)]).unwrap();
        let emb = pass.output();
        let d = emb.shape()[1];
        let (z, _) = normalize_rows(emb.data(), emb.shape()[0], d);
        let dist = |i: usize, j: usize| -> f64 {
            z[i * d..(i + 1) * d]
                .iter()
                .zip(&z[j * d..(j + 1) * d])
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt()
        };

        // Positive pair rows are (2k, 2k+1); anything across slices is a
        // negative pair.
        let mut pos = Vec::new();
        let mut neg = Vec::new();
        for i in 0..views.len() {
            for j in (i + 1)..views.len() {
                if j == i + 1 && i % 2 == 0 {
                    pos.push(dist(i, j));
                } else {
                    neg.push(dist(i, j));
                }
            }
        }
        neg.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let p90 = neg[(neg.len() as f64 * 0.9) as usize];
        let mean_pos = pos.iter().sum::<f64>() / pos.len() as f64;
        assert!(
            mean_pos < p90,
            "mean positive distance {mean_pos} not below 90th-percentile negative {p90}"
        );
    }
}
