//! The searchable point convolution: a multi-level DAG of mixed
//! association edges applied to every (center, neighbor) pair, followed by
//! per-level MLPs and a symmetric aggregation over each neighborhood.
//!
//! One operator instance processes all N·k pairs of a cloud at once as
//! `[P, d]` tensors, with a [`SegmentOrder`] tying the k rows of each
//! center together.

use std::fmt;
use std::str::FromStr;

use rand_chacha::ChaCha8Rng;

use crate::data::PairIndex;
use crate::ea::{self, EAKind, SlotSelect};
use crate::tensor::{Agg, Array, Tape, Tensor, TensorError};

pub mod oracle;

/// How computed DAG nodes draw their incoming pairs.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Wiring {
    /// Node t sums a mixed edge over every pair (a, b) with a < b < t.
    AllPairs,
    /// Node t reads the single pair (0, 1): one fixed association per
    /// node, as the handcrafted presets require.
    InputsOnly,
}

/// Static shape of one convolution operator.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvConfig {
    /// DAG levels.
    pub levels: usize,
    /// Nodes per level, counting the two input nodes.
    pub nodes: usize,
    /// Width of the embedded inputs and of interior level outputs.
    pub hidden: usize,
    /// Symmetric neighborhood reduction after the last level.
    pub aggregator: Agg,
    /// Allowed associations per mixture slot, canonical order.
    pub ea_subset: Vec<EAKind>,
    pub wiring: Wiring,
}

impl Default for ConvConfig {
    fn default() -> Self {
        ConvConfig {
            levels: 1,
            nodes: 3,
            hidden: 8,
            aggregator: Agg::Max,
            ea_subset: EAKind::ALL.to_vec(),
            wiring: Wiring::AllPairs,
        }
    }
}

impl ConvConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.levels < 1 {
            return Err("conv levels must be at least 1".into());
        }
        if self.nodes < 3 {
            return Err("conv nodes must be at least 3".into());
        }
        if self.ea_subset.is_empty() {
            return Err("association subset must be non-empty".into());
        }
        let mut seen = self.ea_subset.clone();
        seen.dedup();
        if seen.len() != self.ea_subset.len() || !self.ea_subset.is_sorted() {
            return Err("association subset must be sorted and duplicate-free".into());
        }
        Ok(())
    }

    /// Incoming pairs of computed node `t`, lexicographic.
    fn pairs_of(&self, t: usize) -> Vec<(usize, usize)> {
        match self.wiring {
            Wiring::InputsOnly => vec![(0, 1)],
            Wiring::AllPairs => {
                let mut out = Vec::new();
                for a in 0..t {
                    for b in (a + 1)..t {
                        out.push((a, b));
                    }
                }
                out
            }
        }
    }

    /// Mixture slots in canonical order: by level, then target node, then
    /// pair. This order indexes betas, genotype selections and sampled
    /// draws alike.
    pub fn slots(&self) -> Vec<Slot> {
        let mut out = Vec::new();
        for level in 0..self.levels {
            for target in 2..self.nodes {
                for (a, b) in self.pairs_of(target) {
                    out.push(Slot { level, target, a, b });
                }
            }
        }
        out
    }

    pub fn num_slots(&self) -> usize {
        self.slots().len()
    }
}

/// One mixture position in the DAG.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Slot {
    pub level: usize,
    pub target: usize,
    pub a: usize,
    pub b: usize,
}

/// Weight state of one operator instance: the input embedding and one
/// affine+relu MLP per level. Mixture logits live separately (they are
/// architecture parameters, shared across instances of a candidate).
#[derive(Clone, Debug, PartialEq)]
pub struct ConvWeights {
    pub emb: Array,
    pub level_w: Vec<Array>,
    pub level_b: Vec<Array>,
}

impl ConvWeights {
    /// Fresh weights for inputs of width `f_in` (plus 3 coordinates) and
    /// outputs of width `f_out`.
    pub fn init(cfg: &ConvConfig, f_in: usize, f_out: usize, rng: &mut ChaCha8Rng) -> ConvWeights {
        let d = cfg.hidden;
        let concat_w = (cfg.nodes - 2) * d;
        let emb = linear_init(&[f_in + 3, d], rng);
        let mut level_w = Vec::new();
        let mut level_b = Vec::new();
        for level in 0..cfg.levels {
            let out = if level + 1 == cfg.levels { f_out } else { d };
            level_w.push(relu_init(&[concat_w, out], rng));
            level_b.push(Array::zeros(&[out]));
        }
        ConvWeights { emb, level_w, level_b }
    }

    pub fn walk(&self, f: &mut dyn FnMut(&str, &Array)) {
        f("emb", &self.emb);
        for (i, (w, b)) in self.level_w.iter().zip(&self.level_b).enumerate() {
            f(&format!("l{i}.w"), w);
            f(&format!("l{i}.b"), b);
        }
    }

    pub fn walk_mut(&mut self, f: &mut dyn FnMut(&str, &mut Array)) {
        f("emb", &mut self.emb);
        for (i, (w, b)) in self.level_w.iter_mut().zip(self.level_b.iter_mut()).enumerate() {
            f(&format!("l{i}.w"), w);
            f(&format!("l{i}.b"), b);
        }
    }

    /// Copies the weights onto a tape as gradient-carrying leaves, in
    /// walk order.
    pub fn lease<'t>(&self, tape: &'t Tape) -> ConvLeased<'t> {
        ConvLeased {
            emb: tape.param(&self.emb),
            level_w: self.level_w.iter().map(|w| tape.param(w)).collect(),
            level_b: self.level_b.iter().map(|b| tape.param(b)).collect(),
        }
    }

    /// Copies the weights onto a tape as constants, for passes where only
    /// other parameters take gradients.
    pub fn lease_frozen<'t>(&self, tape: &'t Tape) -> ConvLeased<'t> {
        ConvLeased {
            emb: tape.input(&self.emb),
            level_w: self.level_w.iter().map(|w| tape.input(w)).collect(),
            level_b: self.level_b.iter().map(|b| tape.input(b)).collect(),
        }
    }
}

/// One zero logit row per mixture slot: a uniform mixture whose argmax
/// falls to the subset's first entry.
pub fn init_betas(cfg: &ConvConfig) -> Vec<Array> {
    vec![Array::zeros(&[cfg.ea_subset.len()]); cfg.num_slots()]
}

/// Variance-preserving uniform init for a linear layer; without any
/// normalization layers in the network, signal scale at init must survive
/// a dozen stacked affines or weight gradients vanish.
pub(crate) fn linear_init(shape: &[usize], rng: &mut ChaCha8Rng) -> Array {
    let bound = (3.0 / shape[0] as f64).sqrt();
    Array::uniform(shape, -bound, bound, rng)
}

/// As [`linear_init`] with relu gain: the following relu halves second
/// moments, so the weights carry twice the variance to compensate.
pub(crate) fn relu_init(shape: &[usize], rng: &mut ChaCha8Rng) -> Array {
    let bound = (6.0 / shape[0] as f64).sqrt();
    Array::uniform(shape, -bound, bound, rng)
}

/// Tape-resident view of [`ConvWeights`] for one forward pass.
pub struct ConvLeased<'t> {
    pub emb: Tensor<'t>,
    pub level_w: Vec<Tensor<'t>>,
    pub level_b: Vec<Tensor<'t>>,
}

impl<'t> ConvLeased<'t> {
    pub fn walk(&self, f: &mut dyn FnMut(&str, Tensor<'t>)) {
        f("emb", self.emb);
        for (i, (w, b)) in self.level_w.iter().zip(&self.level_b).enumerate() {
            f(&format!("l{i}.w"), *w);
            f(&format!("l{i}.b"), *b);
        }
    }
}

/// How mixture slots are evaluated during a forward pass.
#[derive(Clone, Copy, Debug)]
pub enum ConvMode<'a> {
    /// Softmax mixture per slot, differentiable in the logits.
    Relaxed,
    /// Per-slot subset indices drawn by the epsilon-greedy sampler.
    Sampled(&'a [usize]),
    /// A discretized genotype's selections.
    Fixed(&'a ConvGenotype),
}

/// Discrete outcome of convolution search.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvGenotype {
    pub levels: usize,
    pub nodes: usize,
    pub hidden: usize,
    pub aggregator: Agg,
    pub wiring: Wiring,
    /// One association per mixture slot, canonical slot order.
    pub selections: Vec<EAKind>,
}

/// Per-slot argmax over the logits, ties to the subset's earliest entry.
pub fn discretize(cfg: &ConvConfig, betas: &[Array]) -> ConvGenotype {
    debug_assert_eq!(betas.len(), cfg.num_slots());
    let selections = betas
        .iter()
        .map(|beta| cfg.ea_subset[ea::argmax(beta.data())])
        .collect();
    ConvGenotype {
        levels: cfg.levels,
        nodes: cfg.nodes,
        hidden: cfg.hidden,
        aggregator: cfg.aggregator,
        wiring: cfg.wiring,
        selections,
    }
}

/// Evaluates the operator on one cloud.
///
/// `features` is `[N, F]`, `coords` is `[N, 3]`, and `pairs` indexes the
/// N·k (center, neighbor) rows. Returns `[N, F']` with F' fixed by the
/// last level's MLP shape.
pub fn forward<'t>(
    tape: &'t Tape,
    cfg: &ConvConfig,
    leased: &ConvLeased<'t>,
    betas: &[Tensor<'t>],
    mode: ConvMode<'_>,
    features: Tensor<'t>,
    coords: Tensor<'t>,
    pairs: &PairIndex,
) -> Result<Tensor<'t>, TensorError> {
    let slots = cfg.slots();
    match mode {
        ConvMode::Relaxed => debug_assert_eq!(betas.len(), slots.len()),
        ConvMode::Sampled(sel) => debug_assert_eq!(sel.len(), slots.len()),
        ConvMode::Fixed(g) => debug_assert_eq!(g.selections.len(), slots.len()),
    }

    let x = tape.concat(&[features, coords], 1)?;
    let emb = x.matmul(leased.emb)?;
    let mut n0 = emb.gather_rows(&pairs.ctr)?;
    let n1 = emb.gather_rows(&pairs.nbr)?;
    let order = &pairs.order;

    let mut slot_idx = 0;
    let mut level_out = n0;
    for level in 0..cfg.levels {
        let mut nodes: Vec<Tensor<'t>> = vec![n0, n1];
        for target in 2..cfg.nodes {
            let mut terms = Vec::new();
            for (a, b) in cfg.pairs_of(target) {
                debug_assert_eq!(slots[slot_idx], Slot { level, target, a, b });
                // Sampled and discretized slots share the eval_ea path, so
                // equal selections give bitwise-equal forwards.
                terms.push(match mode {
                    ConvMode::Relaxed => ea::mixed_edge(
                        tape,
                        betas[slot_idx],
                        &cfg.ea_subset,
                        SlotSelect::Relaxed,
                        nodes[a],
                        nodes[b],
                        order,
                    )?,
                    ConvMode::Sampled(sel) => {
                        ea::eval_ea(cfg.ea_subset[sel[slot_idx]], nodes[a], nodes[b], order)?
                    }
                    ConvMode::Fixed(g) => {
                        ea::eval_ea(g.selections[slot_idx], nodes[a], nodes[b], order)?
                    }
                });
                slot_idx += 1;
            }
            nodes.push(tape.sum_n(&terms)?);
        }
        let cat = tape.concat(&nodes[2..], 1)?;
        level_out = cat
            .matmul(leased.level_w[level])?
            .bias_add(leased.level_b[level])?
            .relu();
        n0 = level_out;
    }
    level_out.seg_reduce(order, cfg.aggregator)
}

/// Handcrafted local operators expressible as fixed operator settings.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PresetName {
    PointNetPp,
    Dgcnn,
    RsCnn,
    PointWeb,
    PointwiseCnn,
}

impl PresetName {
    pub const ALL: [PresetName; 5] = [
        PresetName::PointNetPp,
        PresetName::Dgcnn,
        PresetName::RsCnn,
        PresetName::PointWeb,
        PresetName::PointwiseCnn,
    ];

    pub fn name(self) -> &'static str {
        match self {
            PresetName::PointNetPp => "pointnet++",
            PresetName::Dgcnn => "dgcnn",
            PresetName::RsCnn => "rs-cnn",
            PresetName::PointWeb => "pointweb",
            PresetName::PointwiseCnn => "pointwise-cnn",
        }
    }

    /// The associations concatenated ahead of the MLP, and the
    /// neighborhood reduction at operator scope.
    fn recipe(self) -> (&'static [EAKind], Agg) {
        use EAKind::*;
        match self {
            PresetName::PointNetPp => (&[E2], Agg::Max),
            PresetName::Dgcnn => (&[E1, E3], Agg::Max),
            PresetName::RsCnn => (&[E1, E2, E3, E4], Agg::Max),
            PresetName::PointWeb => (&[E1, E3], Agg::Sum),
            PresetName::PointwiseCnn => (&[E1, E2, E3, E4, E5], Agg::Sum),
        }
    }
}

impl fmt::Display for PresetName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for PresetName {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        PresetName::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| format!("unknown preset {s:?}"))
    }
}

/// Fixed single-level configuration and genotype reproducing `name`: one
/// computed node per association, each reading the raw (center, neighbor)
/// pair, so the level MLP sees exactly the preset's concatenation.
pub fn preset(name: PresetName, hidden: usize) -> (ConvConfig, ConvGenotype) {
    let (eas, agg) = name.recipe();
    let cfg = ConvConfig {
        levels: 1,
        nodes: 2 + eas.len().max(1),
        hidden,
        aggregator: agg,
        ea_subset: EAKind::ALL.to_vec(),
        wiring: Wiring::InputsOnly,
    };
    let genotype = ConvGenotype {
        levels: cfg.levels,
        nodes: cfg.nodes,
        hidden: cfg.hidden,
        aggregator: agg,
        wiring: cfg.wiring,
        selections: eas.to_vec(),
    };
    (cfg, genotype)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{all_pairs, knn, Neighborhood};
    use crate::rng::{stream_rng, Stream};
    use crate::tensor::gradcheck;
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;

    fn cloud(rng: &mut ChaCha8Rng, n: usize) -> Array {
        Array::uniform(&[n, 3], -1.0, 1.0, rng)
    }

    fn feats_array(rng: &mut ChaCha8Rng, n: usize, f: usize) -> Array {
        Array::uniform(&[n, f], -1.0, 1.0, rng)
    }

    #[test]
    fn slot_enumeration_counts_and_order() {
        let cfg = ConvConfig { levels: 3, nodes: 5, ..ConvConfig::default() };
        // Three computed nodes: 1 + 3 + 6 pairs per level, three levels.
        assert_eq!(cfg.num_slots(), 30);
        let slots = cfg.slots();
        assert_eq!(slots[0], Slot { level: 0, target: 2, a: 0, b: 1 });
        assert_eq!(slots[1], Slot { level: 0, target: 3, a: 0, b: 1 });
        assert_eq!(slots[4], Slot { level: 0, target: 4, a: 0, b: 1 });
        assert_eq!(slots[9], Slot { level: 0, target: 4, a: 2, b: 3 });
        assert_eq!(slots[10].level, 1);

        let inputs_only = ConvConfig { wiring: Wiring::InputsOnly, levels: 1, ..cfg };
        assert_eq!(inputs_only.num_slots(), 3);
    }

    #[test]
    fn config_validation_rejects_bad_shapes() {
        let mut cfg = ConvConfig::default();
        assert!(cfg.validate().is_ok());
        cfg.levels = 0;
        assert!(cfg.validate().is_err());
        cfg.levels = 1;
        cfg.nodes = 2;
        assert!(cfg.validate().is_err());
        cfg.nodes = 3;
        cfg.ea_subset.clear();
        assert!(cfg.validate().is_err());
        cfg.ea_subset = vec![EAKind::E3, EAKind::E1];
        assert!(cfg.validate().is_err());
    }

    fn forward_on(
        cfg: &ConvConfig,
        weights: &ConvWeights,
        betas: &[Array],
        mode_genotype: Option<&ConvGenotype>,
        feats: &Array,
        coords: &Array,
        nb: &Neighborhood,
    ) -> Array {
        let tape = Tape::new();
        let leased = weights.lease(&tape);
        let bl: Vec<_> = betas.iter().map(|b| tape.param(b)).collect();
        let f = tape.input(feats);
        let c = tape.input(coords);
        let pairs = all_pairs(nb);
        let mode = match mode_genotype {
            Some(g) => ConvMode::Fixed(g),
            None => ConvMode::Relaxed,
        };
        forward(&tape, cfg, &leased, &bl, mode, f, c, &pairs).unwrap().value()
    }

    #[test]
    fn forward_shapes_follow_the_last_level() {
        let mut rng = stream_rng(3, Stream::ParamInit);
        let cfg = ConvConfig { levels: 2, hidden: 4, ..ConvConfig::default() };
        let weights = ConvWeights::init(&cfg, 2, 7, &mut rng);
        let betas = init_betas(&cfg);
        let pts = cloud(&mut rng, 10);
        let nb = knn(&pts, 3).unwrap();
        let out = forward_on(&cfg, &weights, &betas, None, &feats_array(&mut rng, 10, 2), &pts, &nb);
        assert_eq!(out.shape(), &[10, 7]);
    }

    #[test]
    fn neighbor_permutation_leaves_forward_bitwise_unchanged() {
        let mut rng = stream_rng(11, Stream::ParamInit);
        for agg in [Agg::Max, Agg::Sum, Agg::Mean] {
            let cfg = ConvConfig { levels: 2, hidden: 4, aggregator: agg, ..ConvConfig::default() };
            let weights = ConvWeights::init(&cfg, 2, 5, &mut rng);
            let betas: Vec<Array> =
                (0..cfg.num_slots()).map(|_| Array::uniform(&[5], -1.0, 1.0, &mut rng)).collect();
            let pts = cloud(&mut rng, 12);
            let feats = feats_array(&mut rng, 12, 2);
            let nb = knn(&pts, 4).unwrap();
            let base = forward_on(&cfg, &weights, &betas, None, &feats, &pts, &nb);
            let mut shuffled = nb.clone();
            shuffled.shuffle_rows(&mut rng);
            let moved = forward_on(&cfg, &weights, &betas, None, &feats, &pts, &shuffled);
            let lb: Vec<u64> = base.data().iter().map(|v| v.to_bits()).collect();
            let rb: Vec<u64> = moved.data().iter().map(|v| v.to_bits()).collect();
            assert_eq!(lb, rb, "aggregator {agg:?}");
        }
    }

    #[test]
    fn identical_points_through_differences_give_zeros() {
        let mut rng = stream_rng(7, Stream::ParamInit);
        let cfg = ConvConfig {
            levels: 1,
            nodes: 3,
            hidden: 3,
            aggregator: Agg::Max,
            ea_subset: vec![EAKind::E3],
            wiring: Wiring::AllPairs,
        };
        let mut weights = ConvWeights::init(&cfg, 1, 1, &mut rng);
        let betas = init_betas(&cfg);
        for b in weights.level_b.iter_mut() {
            for v in b.data_mut() {
                *v = 0.0;
            }
        }
        let pts = Array::new(vec![6, 3], [0.25, -0.5, 0.75].repeat(6)).unwrap();
        let feats = Array::full(&[6, 1], 0.125);
        let nb = knn(&pts, 2).unwrap();
        let g = discretize(&cfg, &betas);
        assert_eq!(g.selections, vec![EAKind::E3]);
        let out = forward_on(&cfg, &weights, &betas, Some(&g), &feats, &pts, &nb);
        assert!(out.data().iter().all(|&v| v == 0.0), "{:?}", out.data());
    }

    #[test]
    fn discretize_takes_argmax_with_ties_low() {
        let cfg = ConvConfig { levels: 1, nodes: 3, ..ConvConfig::default() };
        let mut betas = init_betas(&cfg);
        assert_eq!(betas.len(), 1);
        // All-equal logits fall to the first subset entry.
        let g = discretize(&cfg, &betas);
        assert_eq!(g.selections, vec![EAKind::E1]);
        betas[0] = Array::new(vec![5], vec![0.0, 1.0, 7.0, 7.0, -2.0]).unwrap();
        let g = discretize(&cfg, &betas);
        assert_eq!(g.selections, vec![EAKind::E3]);
    }

    #[test]
    fn singleton_subset_has_no_mixture_freedom() {
        let cfg = ConvConfig {
            levels: 1,
            nodes: 4,
            hidden: 3,
            ea_subset: vec![EAKind::E1],
            ..ConvConfig::default()
        };
        let betas = init_betas(&cfg);
        for beta in &betas {
            assert_eq!(beta.shape(), &[1]);
        }
        let g = discretize(&cfg, &betas);
        assert!(g.selections.iter().all(|&k| k == EAKind::E1));
    }

    #[test]
    fn sampled_and_fixed_paths_agree_bitwise() {
        let mut rng = stream_rng(15, Stream::ParamInit);
        let cfg = ConvConfig { levels: 2, hidden: 3, ..ConvConfig::default() };
        let weights = ConvWeights::init(&cfg, 2, 4, &mut rng);
        let betas: Vec<Array> =
            (0..cfg.num_slots()).map(|_| Array::uniform(&[5], -1.0, 1.0, &mut rng)).collect();
        let pts = cloud(&mut rng, 8);
        let feats = feats_array(&mut rng, 8, 2);
        let nb = knn(&pts, 3).unwrap();
        let g = discretize(&cfg, &betas);
        let pairs_sel: Vec<usize> = g
            .selections
            .iter()
            .map(|k| cfg.ea_subset.iter().position(|s| s == k).unwrap())
            .collect();

        let run = |mode: ConvMode<'_>| -> Vec<u64> {
            let tape = Tape::new();
            let leased = weights.lease(&tape);
            let f = tape.input(&feats);
            let c = tape.input(&pts);
            let pairs = all_pairs(&nb);
            let out = forward(&tape, &cfg, &leased, &[], mode, f, c, &pairs).unwrap().value();
            out.data().iter().map(|v| v.to_bits()).collect()
        };
        assert_eq!(run(ConvMode::Sampled(&pairs_sel)), run(ConvMode::Fixed(&g)));
    }

    #[test]
    fn relaxed_forward_gradients_match_finite_differences() {
        let mut rng = stream_rng(21, Stream::ParamInit);
        let cfg = ConvConfig { levels: 2, nodes: 4, hidden: 3, ..ConvConfig::default() };
        let weights = ConvWeights::init(&cfg, 2, 3, &mut rng);
        let betas: Vec<Array> =
            (0..cfg.num_slots()).map(|_| Array::uniform(&[5], -0.5, 0.5, &mut rng)).collect();
        let coords = cloud(&mut rng, 6);
        let feats = feats_array(&mut rng, 6, 2);
        let nb = knn(&coords, 2).unwrap();
        let pairs = all_pairs(&nb);
        let proj = Array::uniform(&[6, 3], -1.0, 1.0, &mut rng);

        let mut parts: Vec<Array> = Vec::new();
        weights.walk(&mut |_n, a| parts.push(a.clone()));
        let n_weights = parts.len();
        parts.extend(betas.iter().cloned());
        parts.push(feats.clone());

        let c = gradcheck::check("conv_forward", gradcheck::COMPOSITE_TOL, &parts, |t, leaves| {
            let leased = ConvLeased {
                emb: leaves[0],
                level_w: leaves[1..n_weights].iter().step_by(2).copied().collect(),
                level_b: leaves[2..n_weights].iter().step_by(2).copied().collect(),
            };
            let bl = &leaves[n_weights..leaves.len() - 1];
            let f = leaves[leaves.len() - 1];
            let co = t.input(&coords);
            let out = forward(t, &cfg, &leased, bl, ConvMode::Relaxed, f, co, &pairs).unwrap();
            out.mul(t.input(&proj)).unwrap().sum_all()
        });
        assert!(c.passed(), "rel err {:e}", c.rel_err);
    }

    #[test]
    fn presets_match_their_reference_oracles() {
        let mut seed_rng = ChaCha8Rng::seed_from_u64(40);
        for name in PresetName::ALL {
            for trial in 0..4 {
                let mut rng = ChaCha8Rng::seed_from_u64(seed_rng.gen());
                let (cfg, g) = preset(name, 4);
                let f_in = 2;
                let f_out = 5;
                let weights = ConvWeights::init(&cfg, f_in, f_out, &mut rng);
                let pts = cloud(&mut rng, 32);
                let feats = feats_array(&mut rng, 32, f_in);
                let nb = knn(&pts, 6).unwrap();
                let got = forward_on(&cfg, &weights, &[], Some(&g), &feats, &pts, &nb);
                let want = oracle::reference_oracle(name, &feats, &pts, &nb, &weights).unwrap();
                assert_eq!(got.shape(), want.shape());
                for (i, (x, y)) in got.data().iter().zip(want.data()).enumerate() {
                    assert!(
                        (x - y).abs() <= 1e-10,
                        "{name} trial {trial} idx {i}: {x} vs {y}"
                    );
                }
            }
        }
    }

    #[test]
    fn preset_recipes_match_their_published_settings() {
        let (cfg, g) = preset(PresetName::Dgcnn, 4);
        assert_eq!(g.selections, vec![EAKind::E1, EAKind::E3]);
        assert_eq!(cfg.aggregator, Agg::Max);
        let (cfg, _) = preset(PresetName::PointNetPp, 4);
        assert_eq!(cfg.aggregator, Agg::Max);
        assert_eq!(cfg.nodes, 3);
        let (cfg, g) = preset(PresetName::RsCnn, 4);
        assert_eq!(g.selections.len(), 4);
        assert_eq!(cfg.nodes, 6);
        let (cfg, _) = preset(PresetName::PointWeb, 4);
        assert_eq!(cfg.aggregator, Agg::Sum);
        let (_, g) = preset(PresetName::PointwiseCnn, 4);
        assert_eq!(g.selections, EAKind::ALL.to_vec());
    }

    #[test]
    fn shared_params_serve_every_neighborhood() {
        // One parameter set drives clouds with different neighbor graphs;
        // the walk exposes each array exactly once.
        let cfg = ConvConfig { levels: 2, hidden: 3, ..ConvConfig::default() };
        let mut rng = stream_rng(2, Stream::ParamInit);
        let weights = ConvWeights::init(&cfg, 1, 2, &mut rng);
        let betas = init_betas(&cfg);
        let mut names = Vec::new();
        weights.walk(&mut |n, _| names.push(n.to_string()));
        assert_eq!(names.len(), 1 + 2 * cfg.levels);
        assert_eq!(betas.len(), cfg.num_slots());
        let mut dedup = names.clone();
        dedup.sort();
        dedup.dedup();
        assert_eq!(dedup.len(), names.len());

        for n_pts in [5, 9] {
            let pts = cloud(&mut rng, n_pts);
            let nb = knn(&pts, 3).unwrap();
            let out = forward_on(&cfg, &weights, &betas, None, &feats_array(&mut rng, n_pts, 1), &pts, &nb);
            assert_eq!(out.shape(), &[n_pts, 2]);
        }
    }
}
