//! Bilevel search: alternating weight and architecture updates with
//! epsilon-greedy association sampling, plus discrete retraining.
//!
//! One alternating step draws fresh one-hot association picks, updates the
//! operator weights by SGD on the weight half of the training data with
//! those picks frozen, then updates the architecture logits by Adam on the
//! held-out half with everything relaxed. The discretization gap, the loss
//! difference between the relaxed and argmax-discretized convolutions on a
//! fixed validation batch, is logged every epoch.

use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;

use crate::conv::{discretize, ConvConfig, ConvGenotype, ConvMode};
use crate::data::{augment, DataError, Dataset, PairIndex, PointCloudSample, SplitIndices};
use crate::ea;
use crate::net::{
    self, discrete_forward, discretize_cell, supernet_forward, CellGenotype, CellOp, DiscreteNet,
    NetConfig, SupernetArch, SupernetWeights,
};
use crate::rng::{stream_rng, Stream};
use crate::tensor::{fmt_g17, Array, Tape, Tensor, TensorError};

#[derive(Debug, thiserror::Error)]
pub enum SearchError {
    #[error("invalid search config: {0}")]
    Config(String),
    #[error("{phase} loss is {value} at epoch {epoch} step {step}; aborting")]
    NonFinite { phase: &'static str, epoch: usize, step: u64, value: f64 },
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// lr_min + (lr_max - lr_min) (1 + cos(pi step/total)) / 2.
pub fn cosine_lr(step: usize, total: usize, lr_max: f64, lr_min: f64) -> f64 {
    assert!(total > 0, "cosine schedule needs a nonzero horizon");
    assert!(step <= total, "step {step} past horizon {total}");
    let phase = std::f64::consts::PI * step as f64 / total as f64;
    lr_min + 0.5 * (lr_max - lr_min) * (1.0 + phase.cos())
}

/// SGD with classical momentum and decoupled-from-nothing L2 decay folded
/// into the gradient. Slots follow the owner's walk order.
#[derive(Clone, Debug)]
pub struct Sgd {
    pub momentum: f64,
    pub weight_decay: f64,
    pub velocity: Vec<Array>,
}

impl Sgd {
    pub fn new(momentum: f64, weight_decay: f64) -> Self {
        Sgd { momentum, weight_decay, velocity: Vec::new() }
    }

    pub fn update(&mut self, slot: usize, lr: f64, param: &mut Array, grad: &Array) {
        if slot == self.velocity.len() {
            self.velocity.push(Array::zeros(&param.shape().to_vec()));
        }
        let v = self.velocity[slot].data_mut();
        for ((p, g), v) in param.data_mut().iter_mut().zip(grad.data()).zip(v) {
            let g = g + self.weight_decay * *p;
            *v = self.momentum * *v + g;
            *p -= lr * *v;
        }
    }
}

/// Adam with L2 decay folded into the gradient and shared step count.
#[derive(Clone, Debug)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub t: u64,
    pub m: Vec<Array>,
    pub v: Vec<Array>,
}

impl Adam {
    pub fn new(beta1: f64, beta2: f64, eps: f64, weight_decay: f64) -> Self {
        Adam { beta1, beta2, eps, weight_decay, t: 0, m: Vec::new(), v: Vec::new() }
    }

    /// Advances the shared bias-correction counter; call once per step,
    /// before the per-slot updates.
    pub fn begin_step(&mut self) {
        self.t += 1;
    }

    pub fn update(&mut self, slot: usize, lr: f64, param: &mut Array, grad: &Array) {
        if slot == self.m.len() {
            self.m.push(Array::zeros(&param.shape().to_vec()));
            self.v.push(Array::zeros(&param.shape().to_vec()));
        }
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        let m = self.m[slot].data_mut();
        let v = self.v[slot].data_mut();
        for (i, (p, g)) in param.data_mut().iter_mut().zip(grad.data()).enumerate() {
            let g = g + self.weight_decay * *p;
            m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g;
            v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g * g;
            *p -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + self.eps);
        }
    }
}

/// Knobs of one search run.
#[derive(Clone, Debug, PartialEq)]
pub struct SearchConfig {
    pub epochs: usize,
    pub batch: usize,
    pub w_lr: f64,
    pub w_lr_min: f64,
    pub w_momentum: f64,
    pub w_decay: f64,
    pub r_lr: f64,
    pub r_decay: f64,
    /// Global-norm bound on weight gradients per step; the network has no
    /// normalization layers, so one unclipped step can blow the activations
    /// past recovery.  Zero disables clipping.
    pub w_clip: f64,
    pub epsilon: f64,
    /// One-hot association sampling during weight updates; when false the
    /// weight phase keeps the relaxed mixtures (the dagger baseline mode).
    pub greedy: bool,
    pub seed: u64,
    /// Gradients never unroll through the inner problem.
    pub first_order: bool,
}

impl Default for SearchConfig {
    fn default() -> Self {
        SearchConfig {
            epochs: 20,
            batch: 16,
            w_lr: 0.005,
            w_lr_min: 1e-4,
            w_momentum: 0.9,
            w_decay: 3e-4,
            r_lr: 1e-3,
            r_decay: 1e-3,
            w_clip: 5.0,
            epsilon: 0.5,
            greedy: true,
            seed: 0,
            first_order: true,
        }
    }
}

impl SearchConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.epochs == 0 || self.batch == 0 {
            return Err("epochs and batch must be positive".into());
        }
        if !(self.w_lr > 0.0 && self.w_lr_min > 0.0 && self.r_lr > 0.0) {
            return Err("learning rates must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.epsilon) {
            return Err(format!("epsilon {} outside [0, 1]", self.epsilon));
        }
        if self.w_clip < 0.0 {
            return Err(format!("w_clip {} must be nonnegative", self.w_clip));
        }
        if !self.first_order {
            return Err("only first-order search is implemented".into());
        }
        Ok(())
    }
}

/// Knobs of one from-scratch retraining run.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalConfig {
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub lr_min: f64,
    pub weight_decay: f64,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig { epochs: 60, batch: 32, lr: 1e-3, lr_min: 1e-5, weight_decay: 1e-4, seed: 0 }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.epochs == 0 || self.batch == 0 {
            return Err("epochs and batch must be positive".into());
        }
        if !(self.lr > 0.0 && self.lr_min > 0.0) {
            return Err("learning rates must be positive".into());
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricRow {
    pub epoch: usize,
    pub split: String,
    pub loss: f64,
    pub acc: f64,
    pub gap: f64,
    pub lr: f64,
    pub epsilon: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricLog {
    pub rows: Vec<MetricRow>,
}

impl MetricLog {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,split,loss,acc,gap,lr,epsilon\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                r.epoch,
                r.split,
                fmt_g17(r.loss),
                fmt_g17(r.acc),
                fmt_g17(r.gap),
                fmt_g17(r.lr),
                fmt_g17(r.epsilon),
            ));
        }
        out
    }
}

/// One sample ready for the network: optionally subsampled coordinates and
/// the kNN pair index computed once up front. Augmentation only rescales
/// and shifts, which preserves neighbor ordering, so the index stays valid
/// for every epoch.
#[derive(Clone, Debug)]
pub struct PreparedSample {
    pub sample: PointCloudSample,
    pub pairs: PairIndex,
}

#[derive(Clone, Debug)]
pub struct PreparedSet {
    pub samples: Vec<PreparedSample>,
}

/// Prepares every sample of the dataset; `sample_points` keeps that many
/// farthest-point-sampled points per cloud.
pub fn prepare(
    ds: &Dataset,
    k: usize,
    sample_points: Option<usize>,
) -> Result<PreparedSet, DataError> {
    let mut samples = Vec::with_capacity(ds.samples.len());
    for s in &ds.samples {
        let points = match sample_points {
            Some(m) if m < s.points.shape()[0] => {
                let keep = crate::data::fps(&s.points, m, 0)?;
                let src = s.points.data();
                let mut data = Vec::with_capacity(m * 3);
                for &i in &keep {
                    data.extend_from_slice(&src[i as usize * 3..i as usize * 3 + 3]);
                }
                Array::new(vec![m, 3], data).expect("m rows of 3")
            }
            _ => s.points.clone(),
        };
        let pairs = net::sample_pairs(&points, k)?;
        samples.push(PreparedSample {
            sample: PointCloudSample { points, label: s.label, id: s.id },
            pairs,
        });
    }
    Ok(PreparedSet { samples })
}

/// Index sets used during search: the training split cut into a
/// weight-update half and an architecture-update half, plus validation.
#[derive(Clone, Debug, PartialEq)]
pub struct SearchSplit {
    pub weight: Vec<u32>,
    pub arch: Vec<u32>,
    pub val: Vec<u32>,
}

/// Alternating assignment of the class-major train list, so both halves
/// keep the class balance.
pub fn search_split(split: &SplitIndices) -> SearchSplit {
    SearchSplit {
        weight: split.train.iter().step_by(2).copied().collect(),
        arch: split.train.iter().skip(1).step_by(2).copied().collect(),
        val: split.val.clone(),
    }
}

/// Everything a search run mutates, all of it serializable.
#[derive(Clone, Debug)]
pub struct SearchState {
    pub weights: SupernetWeights,
    pub arch: SupernetArch,
    pub w_opt: Sgd,
    pub r_opt: Adam,
    pub epoch: usize,
    pub step: u64,
    /// Greedy association sampling.
    pub rng: ChaCha8Rng,
    /// Per-epoch batch order.
    pub shuffle_rng: ChaCha8Rng,
    pub log: MetricLog,
}

impl SearchState {
    pub fn init(scfg: &SearchConfig, ncfg: &NetConfig) -> Self {
        let mut rng = stream_rng(scfg.seed, Stream::ParamInit);
        SearchState {
            weights: SupernetWeights::init(ncfg, &mut rng),
            arch: SupernetArch::init(&ncfg.conv),
            w_opt: Sgd::new(scfg.w_momentum, scfg.w_decay),
            r_opt: Adam::new(0.5, 0.999, 1e-8, scfg.r_decay),
            epoch: 0,
            step: 0,
            rng: stream_rng(scfg.seed, Stream::Sampling),
            shuffle_rng: stream_rng(scfg.seed, Stream::Shuffle),
            log: MetricLog::default(),
        }
    }
}

pub struct StepStats {
    pub w_loss: f64,
    pub w_correct: usize,
    pub r_loss: f64,
    pub r_correct: usize,
}

fn lease_batch<'t, 's>(
    tape: &'t Tape,
    set: &'s PreparedSet,
    idx: &[u32],
    aug: Option<(u64, u64)>,
) -> (Vec<(Tensor<'t>, &'s PairIndex)>, Vec<u32>) {
    let mut batch = Vec::with_capacity(idx.len());
    let mut labels = Vec::with_capacity(idx.len());
    for &i in idx {
        let ps = &set.samples[i as usize];
        let coords = match aug {
            Some((seed, epoch)) => tape.input(&augment(&ps.sample, seed, epoch).points),
            None => tape.input(&ps.sample.points),
        };
        batch.push((coords, &ps.pairs));
        labels.push(ps.sample.label);
    }
    (batch, labels)
}

/// Correct predictions by per-row argmax, ties to the lowest class.
pub fn count_correct(logits: &Array, labels: &[u32]) -> usize {
    let classes = logits.shape()[1];
    labels
        .iter()
        .enumerate()
        .filter(|(r, l)| ea::argmax(&logits.data()[r * classes..(r + 1) * classes]) == **l as usize)
        .count()
}

/// One joint update: fresh greedy picks, an SGD step on the operator
/// weights over `wbatch`, then an Adam step on the architecture logits
/// over `abatch`. Learning rate zero turns either phase into a no-op on
/// its parameters.
#[allow(clippy::too_many_arguments)]
/// Scales the gradient set so its joint l2 norm is at most `max_norm`;
/// `max_norm` of zero disables clipping, small gradients pass untouched.
pub fn clip_global_norm(grads: &mut [Array], max_norm: f64) {
    if max_norm <= 0.0 {
        return;
    }
    let total: f64 = grads.iter().flat_map(|g| g.data()).map(|v| v * v).sum();
    let norm = total.sqrt();
    if std::env::var("POINTSEA_TRACE").is_ok() {
        eprintln!("grad_norm {norm:.6e}");
    }
    if norm <= max_norm {
        return;
    }
    let scale = max_norm / norm;
    for g in grads {
        for v in g.data_mut() {
            *v *= scale;
        }
    }
}

pub fn alternating_step(
    scfg: &SearchConfig,
    ncfg: &NetConfig,
    state: &mut SearchState,
    set: &PreparedSet,
    wbatch: &[u32],
    abatch: &[u32],
    epoch: usize,
    lr_w: f64,
    lr_r: f64,
) -> Result<StepStats, SearchError> {
    let (sel_a, sel_b) = if scfg.greedy {
        let mut draw = |betas: &[Array]| -> Vec<usize> {
            betas
                .iter()
                .map(|b| ea::sample_epsilon_greedy(b.data(), scfg.epsilon, &mut state.rng))
                .collect()
        };
        (draw(&state.arch.beta_a), draw(&state.arch.beta_b))
    } else {
        (Vec::new(), Vec::new())
    };

    // Weight phase: discrete associations, relaxed cell mixtures, no
    // gradient into the architecture.
    let (w_loss, w_correct) = {
        let tape = Tape::new();
        let leased = state.weights.lease(&tape);
        let al = state.arch.lease_frozen(&tape);
        let (batch, labels) = lease_batch(&tape, set, wbatch, Some((scfg.seed, epoch as u64)));
        let (am, bm) = if scfg.greedy {
            (ConvMode::Sampled(&sel_a), ConvMode::Sampled(&sel_b))
        } else {
            (ConvMode::Relaxed, ConvMode::Relaxed)
        };
        let logits = supernet_forward(&tape, ncfg, &leased, &al, am, bm, &batch)?;
        let loss = logits.cross_entropy(&labels)?;
        let value = loss.value().data()[0];
        if !value.is_finite() {
            return Err(SearchError::NonFinite {
                phase: "weight",
                epoch,
                step: state.step,
                value,
            });
        }
        loss.backward()?;
        let mut grads = Vec::new();
        leased.walk(&mut |_, t| {
            grads.push(t.grad().unwrap_or_else(|| Array::zeros(&t.shape())));
        });
        let correct = count_correct(&logits.value(), &labels);
        clip_global_norm(&mut grads, scfg.w_clip);
        let mut i = 0;
        state.weights.walk_mut(&mut |_, p| {
            state.w_opt.update(i, lr_w, p, &grads[i]);
            i += 1;
        });
        (value, correct)
    };

    // Architecture phase: everything relaxed, weights frozen.
    let (r_loss, r_correct) = {
        let tape = Tape::new();
        let leased = state.weights.lease_frozen(&tape);
        let al = state.arch.lease(&tape);
        let (batch, labels) = lease_batch(&tape, set, abatch, Some((scfg.seed, epoch as u64)));
        let logits = supernet_forward(
            &tape,
            ncfg,
            &leased,
            &al,
            ConvMode::Relaxed,
            ConvMode::Relaxed,
            &batch,
        )?;
        let loss = logits.cross_entropy(&labels)?;
        let value = loss.value().data()[0];
        if !value.is_finite() {
            return Err(SearchError::NonFinite {
                phase: "arch",
                epoch,
                step: state.step,
                value,
            });
        }
        loss.backward()?;
        let mut grads = Vec::new();
        al.walk(&mut |_, t| {
            grads.push(t.grad().unwrap_or_else(|| Array::zeros(&t.shape())));
        });
        let correct = count_correct(&logits.value(), &labels);
        state.r_opt.begin_step();
        let mut i = 0;
        state.arch.walk_mut(&mut |_, p| {
            state.r_opt.update(i, lr_r, p, &grads[i]);
            i += 1;
        });
        (value, correct)
    };

    state.step += 1;
    Ok(StepStats { w_loss, w_correct, r_loss, r_correct })
}

/// Mean loss and accuracy of the relaxed supernet over `idx`, without
/// augmentation or gradients.
pub fn eval_supernet(
    ncfg: &NetConfig,
    weights: &SupernetWeights,
    arch: &SupernetArch,
    set: &PreparedSet,
    idx: &[u32],
    batch: usize,
    a_mode: ConvMode<'_>,
    b_mode: ConvMode<'_>,
) -> Result<(f64, f64), SearchError> {
    let mut loss_sum = 0.0;
    let mut correct = 0;
    for chunk in idx.chunks(batch) {
        let tape = Tape::new();
        let leased = weights.lease_frozen(&tape);
        let al = arch.lease_frozen(&tape);
        let (bviews, labels) = lease_batch(&tape, set, chunk, None);
        let logits = supernet_forward(&tape, ncfg, &leased, &al, a_mode, b_mode, &bviews)?;
        let loss = logits.cross_entropy(&labels)?;
        loss_sum += loss.value().data()[0] * chunk.len() as f64;
        correct += count_correct(&logits.value(), &labels);
    }
    Ok((loss_sum / idx.len() as f64, correct as f64 / idx.len() as f64))
}

/// |relaxed loss - argmax-discretized loss| on one fixed batch. Cell
/// mixtures stay relaxed on both sides; only the associations discretize.
pub fn discretization_gap(
    ncfg: &NetConfig,
    weights: &SupernetWeights,
    arch: &SupernetArch,
    set: &PreparedSet,
    fixed: &[u32],
) -> Result<f64, SearchError> {
    let (relaxed, _) = eval_supernet(
        ncfg,
        weights,
        arch,
        set,
        fixed,
        fixed.len(),
        ConvMode::Relaxed,
        ConvMode::Relaxed,
    )?;
    let ga = discretize(&ncfg.conv, &arch.beta_a);
    let gb = discretize(&ncfg.conv, &arch.beta_b);
    let (disc, _) = eval_supernet(
        ncfg,
        weights,
        arch,
        set,
        fixed,
        fixed.len(),
        ConvMode::Fixed(&ga),
        ConvMode::Fixed(&gb),
    )?;
    Ok((relaxed - disc).abs())
}

pub struct SearchOutcome {
    pub genotype: CellGenotype,
}

/// Runs the remaining epochs of `state`, logging two metric rows per epoch
/// and calling `on_epoch` after each so the caller can checkpoint.
pub fn run_search(
    scfg: &SearchConfig,
    ncfg: &NetConfig,
    set: &PreparedSet,
    split: &SearchSplit,
    state: &mut SearchState,
    mut on_epoch: impl FnMut(&SearchState) -> Result<(), SearchError>,
) -> Result<SearchOutcome, SearchError> {
    scfg.validate().map_err(SearchError::Config)?;
    ncfg.validate().map_err(SearchError::Config)?;
    if split.weight.is_empty() || split.arch.is_empty() || split.val.is_empty() {
        return Err(SearchError::Config("every split part needs at least one sample".into()));
    }

    let fixed: Vec<u32> = split.val.iter().take(scfg.batch).copied().collect();
    for epoch in state.epoch..scfg.epochs {
        let lr_w = cosine_lr(epoch, scfg.epochs, scfg.w_lr, scfg.w_lr_min);
        let lr_r = scfg.r_lr;

        let mut widx = split.weight.clone();
        widx.shuffle(&mut state.shuffle_rng);
        let mut aidx = split.arch.clone();
        aidx.shuffle(&mut state.shuffle_rng);

        let mut acur = 0;
        let mut loss_sum = 0.0;
        let mut correct = 0;
        for wchunk in widx.chunks(scfg.batch) {
            let achunk: Vec<u32> = (0..wchunk.len())
                .map(|_| {
                    let v = aidx[acur];
                    acur = (acur + 1) % aidx.len();
                    v
                })
                .collect();
            let stats =
                alternating_step(scfg, ncfg, state, set, wchunk, &achunk, epoch, lr_w, lr_r)?;
            if std::env::var("POINTSEA_TRACE").is_ok() {
                eprintln!("step {} w_loss {:.6e} r_loss {:.6e}", state.step, stats.w_loss, stats.r_loss);
            }
            loss_sum += stats.w_loss * wchunk.len() as f64;
            correct += stats.w_correct;
        }
        let train_loss = loss_sum / widx.len() as f64;
        let train_acc = correct as f64 / widx.len() as f64;

        let (val_loss, val_acc) = eval_supernet(
            ncfg,
            &state.weights,
            &state.arch,
            set,
            &split.val,
            scfg.batch,
            ConvMode::Relaxed,
            ConvMode::Relaxed,
        )?;
        let gap = discretization_gap(ncfg, &state.weights, &state.arch, set, &fixed)?;

        for (split_name, loss, acc) in
            [("train", train_loss, train_acc), ("val", val_loss, val_acc)]
        {
            state.log.rows.push(MetricRow {
                epoch,
                split: split_name.into(),
                loss,
                acc,
                gap,
                lr: lr_w,
                epsilon: if scfg.greedy { scfg.epsilon } else { 0.0 },
            });
        }
        state.epoch = epoch + 1;
        on_epoch(state)?;
    }

    Ok(SearchOutcome { genotype: discretize_cell(&ncfg.conv, &state.arch) })
}

/// Uniform draw over valid genotypes: two distinct sources and a non-zero
/// op per intermediate node, one association per mixture slot.
pub fn random_genotype(conv_cfg: &ConvConfig, rng: &mut ChaCha8Rng) -> CellGenotype {
    use rand::Rng;
    let ops = [CellOp::ConvA, CellOp::ConvB, CellOp::Mlp, CellOp::Skip];
    let mut nodes = [[(0usize, CellOp::Zero); 2]; 3];
    for (i, picks) in nodes.iter_mut().enumerate() {
        let node = i + 2;
        let s0 = rng.gen_range(0..node);
        let mut s1 = rng.gen_range(0..node - 1);
        if s1 >= s0 {
            s1 += 1;
        }
        let (lo, hi) = (s0.min(s1), s0.max(s1));
        *picks = [(lo, ops[rng.gen_range(0..ops.len())]), (hi, ops[rng.gen_range(0..ops.len())])];
    }
    let mut draw_conv = |cfg: &ConvConfig| ConvGenotype {
        levels: cfg.levels,
        nodes: cfg.nodes,
        hidden: cfg.hidden,
        aggregator: cfg.aggregator,
        wiring: cfg.wiring,
        selections: (0..cfg.num_slots())
            .map(|_| cfg.ea_subset[rng.gen_range(0..cfg.ea_subset.len())])
            .collect(),
    };
    CellGenotype { nodes, conv_a: draw_conv(conv_cfg), conv_b: draw_conv(conv_cfg) }
}

pub struct EvalOutcome {
    pub net: DiscreteNet,
    pub log: MetricLog,
    pub test_acc: f64,
}

fn eval_discrete(
    ncfg: &NetConfig,
    genotype: &CellGenotype,
    net: &DiscreteNet,
    set: &PreparedSet,
    idx: &[u32],
    batch: usize,
) -> Result<(f64, f64), SearchError> {
    let mut loss_sum = 0.0;
    let mut correct = 0;
    for chunk in idx.chunks(batch) {
        let tape = Tape::new();
        let leased = net.lease_frozen(&tape);
        let (bviews, labels) = lease_batch(&tape, set, chunk, None);
        let logits = discrete_forward(&tape, ncfg, genotype, &leased, &bviews)?;
        let loss = logits.cross_entropy(&labels)?;
        loss_sum += loss.value().data()[0] * chunk.len() as f64;
        correct += count_correct(&logits.value(), &labels);
    }
    Ok((loss_sum / idx.len() as f64, correct as f64 / idx.len() as f64))
}

/// Builds the discretized network and trains it from scratch with Adam on
/// a cosine schedule, reporting accuracy on the held-out test indices.
pub fn evaluate_genotype(
    ecfg: &EvalConfig,
    ncfg: &NetConfig,
    genotype: &CellGenotype,
    set: &PreparedSet,
    train: &[u32],
    val: &[u32],
    test: &[u32],
) -> Result<EvalOutcome, SearchError> {
    ecfg.validate().map_err(SearchError::Config)?;
    ncfg.validate().map_err(SearchError::Config)?;
    genotype.validate().map_err(SearchError::Config)?;
    if train.is_empty() || test.is_empty() {
        return Err(SearchError::Config("retraining needs train and test samples".into()));
    }

    let mut rng = stream_rng(ecfg.seed, Stream::ParamInit);
    let mut net = DiscreteNet::init(ncfg, genotype, &mut rng);
    let mut opt = Adam::new(0.9, 0.999, 1e-8, ecfg.weight_decay);
    let mut shuffle_rng = stream_rng(ecfg.seed, Stream::Shuffle);
    let mut log = MetricLog::default();

    for epoch in 0..ecfg.epochs {
        let lr = cosine_lr(epoch, ecfg.epochs, ecfg.lr, ecfg.lr_min);
        let mut tidx = train.to_vec();
        tidx.shuffle(&mut shuffle_rng);

        let mut loss_sum = 0.0;
        let mut correct = 0;
        for chunk in tidx.chunks(ecfg.batch) {
            let tape = Tape::new();
            let leased = net.lease(&tape);
            let (bviews, labels) = lease_batch(&tape, set, chunk, Some((ecfg.seed, epoch as u64)));
            let logits = discrete_forward(&tape, ncfg, genotype, &leased, &bviews)?;
            let loss = logits.cross_entropy(&labels)?;
            let value = loss.value().data()[0];
            if !value.is_finite() {
                return Err(SearchError::NonFinite {
                    phase: "retrain",
                    epoch,
                    step: 0,
                    value,
                });
            }
            loss.backward()?;
            let mut grads = Vec::new();
            leased.walk(&mut |_, t| {
                grads.push(t.grad().unwrap_or_else(|| Array::zeros(&t.shape())));
            });
            correct += count_correct(&logits.value(), &labels);
            loss_sum += value * chunk.len() as f64;
            opt.begin_step();
            let mut i = 0;
            net.walk_mut(&mut |_, p| {
                opt.update(i, lr, p, &grads[i]);
                i += 1;
            });
        }
        log.rows.push(MetricRow {
            epoch,
            split: "train".into(),
            loss: loss_sum / tidx.len() as f64,
            acc: correct as f64 / tidx.len() as f64,
            gap: 0.0,
            lr,
            epsilon: 0.0,
        });
        if !val.is_empty() {
            let (vl, va) = eval_discrete(ncfg, genotype, &net, set, val, ecfg.batch)?;
            log.rows.push(MetricRow {
                epoch,
                split: "val".into(),
                loss: vl,
                acc: va,
                gap: 0.0,
                lr,
                epsilon: 0.0,
            });
        }
    }

    let (test_loss, test_acc) = eval_discrete(ncfg, genotype, &net, set, test, ecfg.batch)?;
    log.rows.push(MetricRow {
        epoch: ecfg.epochs,
        split: "test".into(),
        loss: test_loss,
        acc: test_acc,
        gap: 0.0,
        lr: ecfg.lr_min,
        epsilon: 0.0,
    });
    Ok(EvalOutcome { net, log, test_acc })
}
