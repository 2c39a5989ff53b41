//! Training loop shared by both cascade stages: He initialization,
//! decoupled-weight-decay adaptive updates, cosine annealing, the
//! per-stage slice sampling policies, and a windowed stopping rule.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::graph::{backward_seeded, forward, ComputeGraph, EngineError, Objective, ParamStore};
use crate::losses::{LossError, LossKind, SegLossHead};
use crate::preprocess::{augment_grid, AugmentDraw};
use crate::tensor::Tensor;
use crate::volume::SliceGrid;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("epoch {t} outside schedule of {total}")]
    BadEpoch { t: usize, total: usize },
    #[error("invalid plan: {0}")]
    BadPlan(String),
    #[error("not enough {role} slices: need {needed}, have {available}")]
    InsufficientSlices {
        role: &'static str,
        needed: usize,
        available: usize,
    },
    #[error("parameter {0} has no gradient")]
    MissingGrad(String),
    #[error("loss became non-finite at epoch {epoch}")]
    NonFiniteLoss { epoch: usize },
    #[error("bad training slice: {0}")]
    BadSlice(String),
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error(transparent)]
    Loss(#[from] LossError),
}

/// Which cascade stage is being trained; fixes the loss head and the
/// slice-sampling policy.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModuleKind {
    Gsm,
    Lrm,
}

impl ModuleKind {
    pub fn loss_kind(self) -> LossKind {
        match self {
            ModuleKind::Gsm => LossKind::DiceCe,
            ModuleKind::Lrm => LossKind::MseCe,
        }
    }
}

/// One training example: the network's input channels plus the target mask,
/// all on the same grid. `has_tumor` is derived from the mask.
#[derive(Debug, Clone)]
pub struct TrainSlice {
    pub channels: Vec<SliceGrid>,
    pub mask: SliceGrid,
    pub has_tumor: bool,
}

impl TrainSlice {
    pub fn new(channels: Vec<SliceGrid>, mask: SliceGrid) -> Result<Self, TrainError> {
        if channels.is_empty() {
            return Err(TrainError::BadSlice("no input channels".into()));
        }
        for c in &channels {
            if c.rows() != mask.rows() || c.cols() != mask.cols() {
                return Err(TrainError::BadSlice(format!(
                    "channel is {}x{} but mask is {}x{}",
                    c.rows(),
                    c.cols(),
                    mask.rows(),
                    mask.cols()
                )));
            }
        }
        if mask.data().iter().any(|&v| v != 0.0 && v != 1.0) {
            return Err(TrainError::BadSlice("mask is not binary".into()));
        }
        let has_tumor = mask.count_positive() > 0;
        Ok(Self {
            channels,
            mask,
            has_tumor,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OptimHyper {
    pub lr_max: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for OptimHyper {
    fn default() -> Self {
        Self {
            lr_max: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// Optimizer state: first/second moments per parameter plus the shared
/// step count used for bias correction.
#[derive(Debug, Clone)]
pub struct OptimState {
    pub hyper: OptimHyper,
    t: u64,
    m: BTreeMap<String, Vec<f64>>,
    v: BTreeMap<String, Vec<f64>>,
}

impl OptimState {
    pub fn new(hyper: OptimHyper) -> Self {
        Self {
            hyper,
            t: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }
}

/// One decoupled-weight-decay update over every parameter, reading the
/// gradients accumulated by the last backward pass.
pub fn adamw_step(
    params: &mut ParamStore,
    state: &mut OptimState,
    lr_t: f64,
) -> Result<(), TrainError> {
    let h = state.hyper;
    state.t += 1;
    let bc1 = 1.0 - h.beta1.powf(state.t as f64);
    let bc2 = 1.0 - h.beta2.powf(state.t as f64);
    for (name, tensor) in params.iter_mut() {
        let n = tensor.len();
        let m = state.m.entry(name.clone()).or_insert_with(|| vec![0.0; n]);
        let v = state.v.entry(name.clone()).or_insert_with(|| vec![0.0; n]);
        let grad = tensor
            .grad()
            .ok_or_else(|| TrainError::MissingGrad(name.clone()))?
            .to_vec();
        let theta = tensor.data_mut();
        for i in 0..n {
            let g = grad[i];
            m[i] = h.beta1 * m[i] + (1.0 - h.beta1) * g;
            v[i] = h.beta2 * v[i] + (1.0 - h.beta2) * g * g;
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            theta[i] -= lr_t * (m_hat / (v_hat.sqrt() + h.eps) + h.weight_decay * theta[i]);
        }
    }
    Ok(())
}

/// Zero-mean normal draws with variance 2/fan_in.
pub fn he_init<R: Rng + ?Sized>(shape: Vec<usize>, fan_in: usize, rng: &mut R) -> Tensor {
    assert!(fan_in >= 1, "fan_in must be positive");
    let dist = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("finite std");
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| dist.sample(rng)).collect();
    Tensor::new(shape, data).expect("shape/data agree")
}

fn fan_in_for(shape: &[usize]) -> usize {
    match shape.len() {
        // conv kernels are [cout, cin, kh, kw]
        4 => shape[1] * shape[2] * shape[3],
        // matmul weights are [k, d]
        2 => shape[0],
        _ => shape.iter().product(),
    }
}

/// Fresh parameters for a graph: biases zero, everything else He-drawn.
/// Iteration follows the name-sorted parameter table, so a seed fixes the
/// result exactly.
pub fn init_params<R: Rng + ?Sized>(graph: &ComputeGraph, rng: &mut R) -> ParamStore {
    let mut params = ParamStore::new();
    for (name, shape) in graph.param_shapes() {
        let tensor = if name.ends_with(".bias") {
            Tensor::zeros(shape.clone())
        } else {
            he_init(shape.clone(), fan_in_for(shape), rng)
        };
        params.insert(name.clone(), tensor);
    }
    params
}

/// Annealed rate: 0.5 * lr_max * (1 + cos(pi * t / total)).
pub fn cosine_lr(t: usize, total: usize, lr_max: f64) -> Result<f64, TrainError> {
    if total == 0 || t > total {
        return Err(TrainError::BadEpoch { t, total });
    }
    Ok(0.5 * lr_max * (1.0 + (std::f64::consts::PI * t as f64 / total as f64).cos()))
}

/// One epoch's slice order. Stage one trains on tumor slices only; stage
/// two adds an equal-count random sample of tumor-free slices.
pub fn sample_slices<R: Rng + ?Sized>(
    corpus: &[TrainSlice],
    kind: ModuleKind,
    rng: &mut R,
) -> Result<Vec<usize>, TrainError> {
    let tumor: Vec<usize> = (0..corpus.len()).filter(|&i| corpus[i].has_tumor).collect();
    if tumor.is_empty() {
        return Err(TrainError::InsufficientSlices {
            role: "tumor",
            needed: 1,
            available: 0,
        });
    }
    let mut order = tumor.clone();
    if kind == ModuleKind::Lrm {
        let clean: Vec<usize> = (0..corpus.len())
            .filter(|&i| !corpus[i].has_tumor)
            .collect();
        if clean.len() < tumor.len() {
            return Err(TrainError::InsufficientSlices {
                role: "tumor-free",
                needed: tumor.len(),
                available: clean.len(),
            });
        }
        for pick in rand::seq::index::sample(rng, clean.len(), tumor.len()) {
            order.push(clean[pick]);
        }
    }
    order.shuffle(rng);
    Ok(order)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainPlan {
    pub module_kind: ModuleKind,
    pub seed: u64,
    pub batch_size: usize,
    pub total_epochs: usize,
    pub augment: bool,
    pub hyper: OptimHyper,
    /// Epoch window inspected by the stopping rule.
    pub stop_window: usize,
    /// Stop when the window's epoch-mean losses span less than this,
    /// relative to their magnitude.
    pub stop_rel_tol: f64,
}

impl TrainPlan {
    pub fn new(module_kind: ModuleKind, seed: u64) -> Self {
        Self {
            module_kind,
            seed,
            batch_size: 8,
            total_epochs: 160,
            augment: true,
            hyper: OptimHyper::default(),
            stop_window: 10,
            stop_rel_tol: 1e-5,
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        if self.batch_size == 0 {
            return Err(TrainError::BadPlan("batch_size must be positive".into()));
        }
        if self.total_epochs == 0 {
            return Err(TrainError::BadPlan("total_epochs must be positive".into()));
        }
        if self.stop_window < 2 {
            return Err(TrainError::BadPlan("stop_window must be at least 2".into()));
        }
        if !(self.stop_rel_tol > 0.0) {
            return Err(TrainError::BadPlan("stop_rel_tol must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
    pub components: Vec<(&'static str, f64)>,
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub params: ParamStore,
    pub history: Vec<EpochStats>,
    pub stopped_early: bool,
}

fn stack_batch(
    corpus: &[TrainSlice],
    picks: &[usize],
    draws: &[AugmentDraw],
) -> Result<(Tensor, Vec<f64>), TrainError> {
    let first = &corpus[picks[0]];
    let (c, h, w) = (first.channels.len(), first.mask.rows(), first.mask.cols());
    let n = picks.len();
    let mut input = Vec::with_capacity(n * c * h * w);
    let mut target = Vec::with_capacity(n * h * w);
    for (&idx, &draw) in picks.iter().zip(draws) {
        let slice = &corpus[idx];
        if slice.channels.len() != c || slice.mask.rows() != h || slice.mask.cols() != w {
            return Err(TrainError::BadSlice(
                "corpus slices disagree on channel count or grid size".into(),
            ));
        }
        for ch in &slice.channels {
            input.extend_from_slice(augment_grid(ch, draw).data());
        }
        target.extend_from_slice(augment_grid(&slice.mask, draw).data());
    }
    let input = Tensor::new(vec![n, c, h, w], input).expect("sized above");
    Ok((input, target))
}

fn window_has_settled(history: &[EpochStats], window: usize, rel_tol: f64) -> bool {
    if history.len() < window {
        return false;
    }
    let tail = &history[history.len() - window..];
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    let mut scale = 0.0f64;
    for s in tail {
        lo = lo.min(s.loss);
        hi = hi.max(s.loss);
        scale = scale.max(s.loss.abs());
    }
    (hi - lo) / scale.max(1e-12) < rel_tol
}

/// Runs the full loop: per-epoch sampling, augmentation, batched forward
/// and backward passes, optimizer steps under the cosine schedule, and the
/// windowed stopping rule. Given the same (seed, corpus, plan) the
/// resulting parameters and history are bit-identical.
pub fn train(
    net: &ComputeGraph,
    params: ParamStore,
    corpus: &[TrainSlice],
    plan: &TrainPlan,
) -> Result<TrainOutcome, TrainError> {
    plan.validate()?;
    params.validate_for(net)?;
    let input_name = net.input_names()[0].clone();
    let loss_kind = plan.module_kind.loss_kind();

    let mut params = params;
    let mut rng = ChaCha8Rng::seed_from_u64(plan.seed);
    let mut state = OptimState::new(plan.hyper);
    let mut history: Vec<EpochStats> = Vec::new();
    let mut stopped_early = false;

    for epoch in 0..plan.total_epochs {
        let lr = cosine_lr(epoch, plan.total_epochs, plan.hyper.lr_max)?;
        let order = sample_slices(corpus, plan.module_kind, &mut rng)?;

        let mut weighted = 0.0;
        let mut loss_acc = 0.0;
        let mut comp_acc: Vec<(&'static str, f64)> = Vec::new();
        for chunk in order.chunks(plan.batch_size) {
            let draws: Vec<AugmentDraw> = chunk
                .iter()
                .map(|_| {
                    if plan.augment {
                        AugmentDraw::sample(&mut rng)
                    } else {
                        AugmentDraw::identity()
                    }
                })
                .collect();
            let (input, target) = stack_batch(corpus, chunk, &draws)?;
            let pass = forward(net, &params, &[(&input_name, &input)])?;
            let head = SegLossHead::new(loss_kind, target);
            let value = head.evaluate(pass.output())?;
            if !value.total.is_finite() {
                return Err(TrainError::NonFiniteLoss { epoch });
            }
            let seed = head.seed(pass.output())?;
            backward_seeded(net, &mut params, &pass, &seed)?;
            adamw_step(&mut params, &mut state, lr)?;

            let w = chunk.len() as f64;
            weighted += w;
            loss_acc += w * value.total;
            if comp_acc.is_empty() {
                comp_acc = value.components.iter().map(|&(n, v)| (n, w * v)).collect();
            } else {
                for (acc, &(name, v)) in comp_acc.iter_mut().zip(&value.components) {
                    debug_assert_eq!(acc.0, name);
                    acc.1 += w * v;
                }
            }
        }
        let components = comp_acc
            .into_iter()
            .map(|(n, v)| (n, v / weighted))
            .collect();
        history.push(EpochStats {
            epoch,
            lr,
            loss: loss_acc / weighted,
            components,
        });
        if window_has_settled(&history, plan.stop_window, plan.stop_rel_tol) {
            stopped_early = true;
            break;
        }
    }

    Ok(TrainOutcome {
        params,
        history,
        stopped_early,
    })
}
