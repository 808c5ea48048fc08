//! Cell-based supernet over five candidate operators.
//!
//! A cell has two input nodes, three intermediate nodes, and an output node
//! that concatenates the intermediates with the second input and projects
//! back to the cell width. Every intermediate node takes one mixed edge from
//! each earlier node. Mixture logits (`theta`, per edge) and association
//! logits (`beta`, per convolution candidate) are shared across stacked
//! cells; operator weights are owned per cell and per edge.

use rand_chacha::ChaCha8Rng;

use crate::conv::{
    self, linear_init, relu_init, ConvConfig, ConvGenotype, ConvLeased, ConvMode, ConvWeights,
};
use crate::data::{all_pairs, knn, DataError, PairIndex};
use crate::tensor::{Agg, Array, Tape, Tensor, TensorError};

/// Directed edges `(from, to)` of one cell, grouped by target node.
/// Nodes 0 and 1 are the cell inputs, 2 through 4 the intermediates.
pub const EDGES: [(usize, usize); 9] = [
    (0, 2),
    (1, 2),
    (0, 3),
    (1, 3),
    (2, 3),
    (0, 4),
    (1, 4),
    (2, 4),
    (3, 4),
];

pub const NUM_EDGES: usize = EDGES.len();
pub const NUM_OPS: usize = 5;

/// Candidate operator on a cell edge.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum CellOp {
    ConvA,
    ConvB,
    Mlp,
    Skip,
    Zero,
}

impl CellOp {
    pub const ALL: [CellOp; NUM_OPS] =
        [CellOp::ConvA, CellOp::ConvB, CellOp::Mlp, CellOp::Skip, CellOp::Zero];

    pub fn name(self) -> &'static str {
        match self {
            CellOp::ConvA => "conv_a",
            CellOp::ConvB => "conv_b",
            CellOp::Mlp => "mlp",
            CellOp::Skip => "skip",
            CellOp::Zero => "zero",
        }
    }

    pub fn index(self) -> usize {
        CellOp::ALL.iter().position(|o| *o == self).expect("member of ALL")
    }
}

impl std::fmt::Display for CellOp {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for CellOp {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        CellOp::ALL
            .into_iter()
            .find(|o| o.name() == s)
            .ok_or_else(|| format!("unknown cell op {s:?}"))
    }
}

/// Network-level shape of the supernet and of discretized models.
#[derive(Clone, Debug, PartialEq)]
pub struct NetConfig {
    /// Number of stacked cells.
    pub cells: usize,
    /// Uniform node width, kept constant through the whole network.
    pub channels: usize,
    pub classes: usize,
    /// Neighborhood size shared by every convolution instance.
    pub k: usize,
    /// Structure of both convolution candidates.
    pub conv: ConvConfig,
}

impl NetConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.cells == 0 {
            return Err("cells must be at least 1".into());
        }
        if self.channels == 0 {
            return Err("channels must be at least 1".into());
        }
        if self.classes < 2 {
            return Err("classes must be at least 2".into());
        }
        if self.k == 0 {
            return Err("k must be at least 1".into());
        }
        self.conv.validate()
    }
}

/// Builds the kNN pair index one time per sample; every convolution
/// instance in every cell reuses it.
pub fn sample_pairs(points: &Array, k: usize) -> Result<PairIndex, DataError> {
    Ok(all_pairs(&knn(points, k)?))
}

/// Operator weights owned by one mixed edge.
#[derive(Clone, Debug, PartialEq)]
pub struct EdgeWeights {
    pub conv_a: ConvWeights,
    pub conv_b: ConvWeights,
    pub mlp_w: Array,
    pub mlp_b: Array,
    /// Present only when the edge changes width; skip is identity otherwise.
    pub skip_proj: Option<Array>,
}

impl EdgeWeights {
    pub fn init(conv: &ConvConfig, c_in: usize, c_out: usize, rng: &mut ChaCha8Rng) -> Self {
        EdgeWeights {
            conv_a: ConvWeights::init(conv, c_in, c_out, rng),
            conv_b: ConvWeights::init(conv, c_in, c_out, rng),
            mlp_w: relu_init(&[c_in, c_out], rng),
            mlp_b: Array::zeros(&[c_out]),
            skip_proj: (c_in != c_out).then(|| linear_init(&[c_in, c_out], rng)),
        }
    }

    pub fn walk(&self, f: &mut dyn FnMut(&str, &Array)) {
        self.conv_a.walk(&mut |n, a| f(&format!("conv_a.{n}"), a));
        self.conv_b.walk(&mut |n, a| f(&format!("conv_b.{n}"), a));
        f("mlp.w", &self.mlp_w);
        f("mlp.b", &self.mlp_b);
        if let Some(p) = &self.skip_proj {
            f("skip.p", p);
        }
    }

    pub fn walk_mut(&mut self, f: &mut dyn FnMut(&str, &mut Array)) {
        self.conv_a.walk_mut(&mut |n, a| f(&format!("conv_a.{n}"), a));
        self.conv_b.walk_mut(&mut |n, a| f(&format!("conv_b.{n}"), a));
        f("mlp.w", &mut self.mlp_w);
        f("mlp.b", &mut self.mlp_b);
        if let Some(p) = &mut self.skip_proj {
            f("skip.p", p);
        }
    }

    fn lease_with<'t>(&self, tape: &'t Tape, frozen: bool) -> EdgeLeased<'t> {
        let mk = |a: &Array| if frozen { tape.input(a) } else { tape.param(a) };
        EdgeLeased {
            conv_a: if frozen { self.conv_a.lease_frozen(tape) } else { self.conv_a.lease(tape) },
            conv_b: if frozen { self.conv_b.lease_frozen(tape) } else { self.conv_b.lease(tape) },
            mlp_w: mk(&self.mlp_w),
            mlp_b: mk(&self.mlp_b),
            skip_proj: self.skip_proj.as_ref().map(&mk),
        }
    }
}

pub struct EdgeLeased<'t> {
    pub conv_a: ConvLeased<'t>,
    pub conv_b: ConvLeased<'t>,
    pub mlp_w: Tensor<'t>,
    pub mlp_b: Tensor<'t>,
    pub skip_proj: Option<Tensor<'t>>,
}

impl<'t> EdgeLeased<'t> {
    pub fn walk(&self, f: &mut dyn FnMut(&str, Tensor<'t>)) {
        self.conv_a.walk(&mut |n, t| f(&format!("conv_a.{n}"), t));
        self.conv_b.walk(&mut |n, t| f(&format!("conv_b.{n}"), t));
        f("mlp.w", self.mlp_w);
        f("mlp.b", self.mlp_b);
        if let Some(p) = self.skip_proj {
            f("skip.p", p);
        }
    }
}

/// Operator weights of one cell: nine edges plus the output projection.
#[derive(Clone, Debug, PartialEq)]
pub struct CellWeights {
    pub edges: Vec<EdgeWeights>,
    pub out_w: Array,
    pub out_b: Array,
}

impl CellWeights {
    pub fn init(cfg: &NetConfig, rng: &mut ChaCha8Rng) -> Self {
        let c = cfg.channels;
        CellWeights {
            edges: (0..NUM_EDGES).map(|_| EdgeWeights::init(&cfg.conv, c, c, rng)).collect(),
            out_w: linear_init(&[4 * c, c], rng),
            out_b: Array::zeros(&[c]),
        }
    }

    pub fn walk(&self, f: &mut dyn FnMut(&str, &Array)) {
        for (i, e) in self.edges.iter().enumerate() {
            e.walk(&mut |n, a| f(&format!("e{i}.{n}"), a));
        }
        f("out.w", &self.out_w);
        f("out.b", &self.out_b);
    }

    pub fn walk_mut(&mut self, f: &mut dyn FnMut(&str, &mut Array)) {
        for (i, e) in self.edges.iter_mut().enumerate() {
            e.walk_mut(&mut |n, a| f(&format!("e{i}.{n}"), a));
        }
        f("out.w", &mut self.out_w);
        f("out.b", &mut self.out_b);
    }

    fn lease_with<'t>(&self, tape: &'t Tape, frozen: bool) -> CellLeased<'t> {
        let mk = |a: &Array| if frozen { tape.input(a) } else { tape.param(a) };
        CellLeased {
            edges: self.edges.iter().map(|e| e.lease_with(tape, frozen)).collect(),
            out_w: mk(&self.out_w),
            out_b: mk(&self.out_b),
        }
    }
}

pub struct CellLeased<'t> {
    pub edges: Vec<EdgeLeased<'t>>,
    pub out_w: Tensor<'t>,
    pub out_b: Tensor<'t>,
}

impl<'t> CellLeased<'t> {
    pub fn walk(&self, f: &mut dyn FnMut(&str, Tensor<'t>)) {
        for (i, e) in self.edges.iter().enumerate() {
            e.walk(&mut |n, t| f(&format!("e{i}.{n}"), t));
        }
        f("out.w", self.out_w);
        f("out.b", self.out_b);
    }
}

/// All operator weights of the supernet: stem, stacked cells, and the
/// two-layer classifier head.
#[derive(Clone, Debug, PartialEq)]
pub struct SupernetWeights {
    pub stem_w: Array,
    pub stem_b: Array,
    pub cells: Vec<CellWeights>,
    pub head1_w: Array,
    pub head1_b: Array,
    pub head2_w: Array,
    pub head2_b: Array,
}

impl SupernetWeights {
    pub fn init(cfg: &NetConfig, rng: &mut ChaCha8Rng) -> Self {
        let c = cfg.channels;
        SupernetWeights {
            stem_w: relu_init(&[3, c], rng),
            stem_b: Array::zeros(&[c]),
            cells: (0..cfg.cells).map(|_| CellWeights::init(cfg, rng)).collect(),
            head1_w: relu_init(&[c, c], rng),
            head1_b: Array::zeros(&[c]),
            head2_w: linear_init(&[c, cfg.classes], rng),
            head2_b: Array::zeros(&[cfg.classes]),
        }
    }

    pub fn walk(&self, f: &mut dyn FnMut(&str, &Array)) {
        f("stem.w", &self.stem_w);
        f("stem.b", &self.stem_b);
        for (i, c) in self.cells.iter().enumerate() {
            c.walk(&mut |n, a| f(&format!("c{i}.{n}"), a));
        }
        f("head1.w", &self.head1_w);
        f("head1.b", &self.head1_b);
        f("head2.w", &self.head2_w);
        f("head2.b", &self.head2_b);
    }

    pub fn walk_mut(&mut self, f: &mut dyn FnMut(&str, &mut Array)) {
        f("stem.w", &mut self.stem_w);
        f("stem.b", &mut self.stem_b);
        for (i, c) in self.cells.iter_mut().enumerate() {
            c.walk_mut(&mut |n, a| f(&format!("c{i}.{n}"), a));
        }
        f("head1.w", &mut self.head1_w);
        f("head1.b", &mut self.head1_b);
        f("head2.w", &mut self.head2_w);
        f("head2.b", &mut self.head2_b);
    }

    pub fn lease<'t>(&self, tape: &'t Tape) -> SupernetLeased<'t> {
        self.lease_with(tape, false)
    }

    pub fn lease_frozen<'t>(&self, tape: &'t Tape) -> SupernetLeased<'t> {
        self.lease_with(tape, true)
    }

    fn lease_with<'t>(&self, tape: &'t Tape, frozen: bool) -> SupernetLeased<'t> {
        let mk = |a: &Array| if frozen { tape.input(a) } else { tape.param(a) };
        SupernetLeased {
            stem_w: mk(&self.stem_w),
            stem_b: mk(&self.stem_b),
            cells: self.cells.iter().map(|c| c.lease_with(tape, frozen)).collect(),
            head1_w: mk(&self.head1_w),
            head1_b: mk(&self.head1_b),
            head2_w: mk(&self.head2_w),
            head2_b: mk(&self.head2_b),
        }
    }
}

pub struct SupernetLeased<'t> {
    pub stem_w: Tensor<'t>,
    pub stem_b: Tensor<'t>,
    pub cells: Vec<CellLeased<'t>>,
    pub head1_w: Tensor<'t>,
    pub head1_b: Tensor<'t>,
    pub head2_w: Tensor<'t>,
    pub head2_b: Tensor<'t>,
}

impl<'t> SupernetLeased<'t> {
    pub fn walk(&self, f: &mut dyn FnMut(&str, Tensor<'t>)) {
        f("stem.w", self.stem_w);
        f("stem.b", self.stem_b);
        for (i, c) in self.cells.iter().enumerate() {
            c.walk(&mut |n, t| f(&format!("c{i}.{n}"), t));
        }
        f("head1.w", self.head1_w);
        f("head1.b", self.head1_b);
        f("head2.w", self.head2_w);
        f("head2.b", self.head2_b);
    }
}

/// Architecture logits: one five-way row per edge, plus the association
/// logits of each convolution candidate. Zero-initialized so the search
/// starts from uniform mixtures.
#[derive(Clone, Debug, PartialEq)]
pub struct SupernetArch {
    pub theta: Vec<Array>,
    pub beta_a: Vec<Array>,
    pub beta_b: Vec<Array>,
}

impl SupernetArch {
    pub fn init(conv: &ConvConfig) -> Self {
        SupernetArch {
            theta: (0..NUM_EDGES).map(|_| Array::zeros(&[NUM_OPS])).collect(),
            beta_a: conv::init_betas(conv),
            beta_b: conv::init_betas(conv),
        }
    }

    pub fn walk(&self, f: &mut dyn FnMut(&str, &Array)) {
        for (e, t) in self.theta.iter().enumerate() {
            f(&format!("t{e}"), t);
        }
        for (s, b) in self.beta_a.iter().enumerate() {
            f(&format!("ba{s}"), b);
        }
        for (s, b) in self.beta_b.iter().enumerate() {
            f(&format!("bb{s}"), b);
        }
    }

    pub fn walk_mut(&mut self, f: &mut dyn FnMut(&str, &mut Array)) {
        for (e, t) in self.theta.iter_mut().enumerate() {
            f(&format!("t{e}"), t);
        }
        for (s, b) in self.beta_a.iter_mut().enumerate() {
            f(&format!("ba{s}"), b);
        }
        for (s, b) in self.beta_b.iter_mut().enumerate() {
            f(&format!("bb{s}"), b);
        }
    }

    pub fn lease<'t>(&self, tape: &'t Tape) -> ArchLeased<'t> {
        self.lease_with(tape, false)
    }

    pub fn lease_frozen<'t>(&self, tape: &'t Tape) -> ArchLeased<'t> {
        self.lease_with(tape, true)
    }

    fn lease_with<'t>(&self, tape: &'t Tape, frozen: bool) -> ArchLeased<'t> {
        let mk = |a: &Array| if frozen { tape.input(a) } else { tape.param(a) };
        ArchLeased {
            theta: self.theta.iter().map(&mk).collect(),
            beta_a: self.beta_a.iter().map(&mk).collect(),
            beta_b: self.beta_b.iter().map(&mk).collect(),
        }
    }
}

pub struct ArchLeased<'t> {
    pub theta: Vec<Tensor<'t>>,
    pub beta_a: Vec<Tensor<'t>>,
    pub beta_b: Vec<Tensor<'t>>,
}

impl<'t> ArchLeased<'t> {
    pub fn walk(&self, f: &mut dyn FnMut(&str, Tensor<'t>)) {
        for (e, t) in self.theta.iter().enumerate() {
            f(&format!("t{e}"), *t);
        }
        for (s, b) in self.beta_a.iter().enumerate() {
            f(&format!("ba{s}"), *b);
        }
        for (s, b) in self.beta_b.iter().enumerate() {
            f(&format!("bb{s}"), *b);
        }
    }
}

/// Softmax-weighted sum of the five candidate operators on one edge.
/// The zero candidate contributes exact zeros; skip is identity unless the
/// edge carries a projection.
#[allow(clippy::too_many_arguments)]
pub fn mixed_op<'t>(
    tape: &'t Tape,
    conv_cfg: &ConvConfig,
    theta_row: Tensor<'t>,
    edge: &EdgeLeased<'t>,
    beta_a: &[Tensor<'t>],
    beta_b: &[Tensor<'t>],
    a_mode: ConvMode<'_>,
    b_mode: ConvMode<'_>,
    x: Tensor<'t>,
    coords: Tensor<'t>,
    pairs: &PairIndex,
) -> Result<Tensor<'t>, TensorError> {
    debug_assert_eq!(theta_row.shape(), vec![NUM_OPS]);
    let c_out = edge.mlp_b.shape()[0];
    let n = x.shape()[0];
    let skip = match edge.skip_proj {
        Some(p) => x.matmul(p)?,
        None => {
            if x.shape()[1] != c_out {
                return Err(TensorError::BadShape {
                    op: "mixed_op",
                    shape: x.shape(),
                    why: "skip without projection needs matching widths",
                });
            }
            x
        }
    };
    let ops = [
        conv::forward(tape, conv_cfg, &edge.conv_a, beta_a, a_mode, x, coords, pairs)?,
        conv::forward(tape, conv_cfg, &edge.conv_b, beta_b, b_mode, x, coords, pairs)?,
        x.matmul(edge.mlp_w)?.bias_add(edge.mlp_b)?.relu(),
        skip,
        tape.zeros(&[n, c_out]),
    ];
    tape.weighted_sum(theta_row.softmax()?, &ops)
}

/// One relaxed cell: each intermediate node sums its mixed incoming edges,
/// and the output projects concat(n2, n3, n4, second input) back to the
/// cell width.
#[allow(clippy::too_many_arguments)]
pub fn cell_forward<'t>(
    tape: &'t Tape,
    conv_cfg: &ConvConfig,
    cell: &CellLeased<'t>,
    arch: &ArchLeased<'t>,
    a_mode: ConvMode<'_>,
    b_mode: ConvMode<'_>,
    s0: Tensor<'t>,
    s1: Tensor<'t>,
    coords: Tensor<'t>,
    pairs: &PairIndex,
) -> Result<Tensor<'t>, TensorError> {
    let mut nodes = vec![s0, s1];
    let mut edge_idx = 0;
    for target in 2..5 {
        let mut terms = Vec::with_capacity(target);
        while edge_idx < NUM_EDGES && EDGES[edge_idx].1 == target {
            let from = EDGES[edge_idx].0;
            terms.push(mixed_op(
                tape,
                conv_cfg,
                arch.theta[edge_idx],
                &cell.edges[edge_idx],
                &arch.beta_a,
                &arch.beta_b,
                a_mode,
                b_mode,
                nodes[from],
                coords,
                pairs,
            )?);
            edge_idx += 1;
        }
        nodes.push(tape.sum_n(&terms)?);
    }
    let cat = tape.concat(&[nodes[2], nodes[3], nodes[4], s1], 1)?;
    cat.matmul(cell.out_w)?.bias_add(cell.out_b)
}

/// Full relaxed forward pass: stem, stacked cells with rolling inputs,
/// per-sample global max pool, then the shared two-layer head. Returns
/// logits `[batch, classes]`.
pub fn supernet_forward<'t>(
    tape: &'t Tape,
    cfg: &NetConfig,
    net: &SupernetLeased<'t>,
    arch: &ArchLeased<'t>,
    a_mode: ConvMode<'_>,
    b_mode: ConvMode<'_>,
    batch: &[(Tensor<'t>, &PairIndex)],
) -> Result<Tensor<'t>, TensorError> {
    let mut rows = Vec::with_capacity(batch.len());
    for (coords, pairs) in batch {
        let stem = coords.matmul(net.stem_w)?.bias_add(net.stem_b)?.relu();
        let (mut s0, mut s1) = (stem, stem);
        for cell in &net.cells {
            let out = cell_forward(
                tape, &cfg.conv, cell, arch, a_mode, b_mode, s0, s1, *coords, pairs,
            )?;
            s0 = s1;
            s1 = out;
        }
        let pooled = s1.reduce(Agg::Max, 0)?.reshape(&[1, cfg.channels])?;
        rows.push(pooled);
    }
    let x = tape.concat(&rows, 0)?;
    let h = x.matmul(net.head1_w)?.bias_add(net.head1_b)?.relu();
    h.matmul(net.head2_w)?.bias_add(net.head2_b)
}

/// Discrete outcome of cell search: per intermediate node its two kept
/// `(source, op)` edges in source order, plus the association choices of
/// both convolution candidates.
#[derive(Clone, Debug, PartialEq)]
pub struct CellGenotype {
    pub nodes: [[(usize, CellOp); 2]; 3],
    pub conv_a: ConvGenotype,
    pub conv_b: ConvGenotype,
}

impl CellGenotype {
    pub fn validate(&self) -> Result<(), String> {
        for (i, picks) in self.nodes.iter().enumerate() {
            let node = i + 2;
            let [(s0, o0), (s1, o1)] = *picks;
            if s0 >= s1 || s1 >= node {
                return Err(format!("node {node} inputs {s0},{s1} are not two earlier nodes"));
            }
            if o0 == CellOp::Zero || o1 == CellOp::Zero {
                return Err(format!("node {node} keeps a zero op"));
            }
        }
        Ok(())
    }
}

/// Picks each edge's strongest non-zero operator, then keeps the two
/// incoming edges with the largest such weight per node. Ties go to the
/// lower operator index and the lower edge index.
pub fn discretize_cell(conv_cfg: &ConvConfig, arch: &SupernetArch) -> CellGenotype {
    let mut choice = Vec::with_capacity(NUM_EDGES);
    for theta in &arch.theta {
        let w = softmax_row(theta.data());
        let (mut best_op, mut best_w) = (CellOp::ConvA, f64::NEG_INFINITY);
        for op in CellOp::ALL {
            if op != CellOp::Zero && w[op.index()] > best_w {
                best_op = op;
                best_w = w[op.index()];
            }
        }
        choice.push((best_op, best_w));
    }

    let mut nodes = [[(0usize, CellOp::Zero); 2]; 3];
    for target in 2..5 {
        let mut incoming: Vec<(usize, usize)> = EDGES
            .iter()
            .enumerate()
            .filter(|(_, (_, to))| *to == target)
            .map(|(i, (from, _))| (i, *from))
            .collect();
        incoming.sort_by(|a, b| {
            choice[b.0].1.partial_cmp(&choice[a.0].1).expect("finite weights").then(a.0.cmp(&b.0))
        });
        incoming.truncate(2);
        incoming.sort_by_key(|(_, from)| *from);
        nodes[target - 2] = [
            (incoming[0].1, choice[incoming[0].0].0),
            (incoming[1].1, choice[incoming[1].0].0),
        ];
    }

    CellGenotype {
        nodes,
        conv_a: conv::discretize(conv_cfg, &arch.beta_a),
        conv_b: conv::discretize(conv_cfg, &arch.beta_b),
    }
}

fn softmax_row(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exp: Vec<f64> = logits.iter().map(|v| (v - m).exp()).collect();
    let sum: f64 = exp.iter().sum();
    exp.iter().map(|e| e / sum).collect()
}

/// Weights of one kept discrete edge.
#[derive(Clone, Debug, PartialEq)]
pub enum OpWeights {
    Conv(ConvWeights),
    Mlp { w: Array, b: Array },
    Skip,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DiscreteEdge {
    pub src: usize,
    pub op: CellOp,
    pub weights: OpWeights,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DiscreteCell {
    /// Six kept edges, node-major: two for n2, two for n3, two for n4.
    pub edges: Vec<DiscreteEdge>,
    pub out_w: Array,
    pub out_b: Array,
}

/// Stand-alone network built from a genotype for retraining from scratch.
#[derive(Clone, Debug, PartialEq)]
pub struct DiscreteNet {
    pub genotype: CellGenotype,
    pub stem_w: Array,
    pub stem_b: Array,
    pub cells: Vec<DiscreteCell>,
    pub head1_w: Array,
    pub head1_b: Array,
    pub head2_w: Array,
    pub head2_b: Array,
}

impl DiscreteNet {
    pub fn init(cfg: &NetConfig, genotype: &CellGenotype, rng: &mut ChaCha8Rng) -> Self {
        genotype.validate().expect("valid genotype");
        let c = cfg.channels;
        let cells = (0..cfg.cells)
            .map(|_| {
                let edges = genotype
                    .nodes
                    .iter()
                    .flatten()
                    .map(|&(src, op)| DiscreteEdge {
                        src,
                        op,
                        weights: match op {
                            CellOp::ConvA | CellOp::ConvB => {
                                OpWeights::Conv(ConvWeights::init(&cfg.conv, c, c, rng))
                            }
                            CellOp::Mlp => OpWeights::Mlp {
                                w: relu_init(&[c, c], rng),
                                b: Array::zeros(&[c]),
                            },
                            CellOp::Skip => OpWeights::Skip,
                            CellOp::Zero => unreachable!("validated genotype"),
                        },
                    })
                    .collect();
                DiscreteCell {
                    edges,
                    out_w: linear_init(&[4 * c, c], rng),
                    out_b: Array::zeros(&[c]),
                }
            })
            .collect();
        DiscreteNet {
            genotype: genotype.clone(),
            stem_w: relu_init(&[3, c], rng),
            stem_b: Array::zeros(&[c]),
            cells,
            head1_w: relu_init(&[c, c], rng),
            head1_b: Array::zeros(&[c]),
            head2_w: linear_init(&[c, cfg.classes], rng),
            head2_b: Array::zeros(&[cfg.classes]),
        }
    }

    pub fn walk(&self, f: &mut dyn FnMut(&str, &Array)) {
        f("stem.w", &self.stem_w);
        f("stem.b", &self.stem_b);
        for (ci, cell) in self.cells.iter().enumerate() {
            for (j, e) in cell.edges.iter().enumerate() {
                match &e.weights {
                    OpWeights::Conv(cw) => {
                        cw.walk(&mut |n, a| f(&format!("c{ci}.g{j}.{n}"), a));
                    }
                    OpWeights::Mlp { w, b } => {
                        f(&format!("c{ci}.g{j}.w"), w);
                        f(&format!("c{ci}.g{j}.b"), b);
                    }
                    OpWeights::Skip => {}
                }
            }
            f(&format!("c{ci}.out.w"), &cell.out_w);
            f(&format!("c{ci}.out.b"), &cell.out_b);
        }
        f("head1.w", &self.head1_w);
        f("head1.b", &self.head1_b);
        f("head2.w", &self.head2_w);
        f("head2.b", &self.head2_b);
    }

    pub fn walk_mut(&mut self, f: &mut dyn FnMut(&str, &mut Array)) {
        f("stem.w", &mut self.stem_w);
        f("stem.b", &mut self.stem_b);
        for (ci, cell) in self.cells.iter_mut().enumerate() {
            for (j, e) in cell.edges.iter_mut().enumerate() {
                match &mut e.weights {
                    OpWeights::Conv(cw) => {
                        cw.walk_mut(&mut |n, a| f(&format!("c{ci}.g{j}.{n}"), a));
                    }
                    OpWeights::Mlp { w, b } => {
                        f(&format!("c{ci}.g{j}.w"), w);
                        f(&format!("c{ci}.g{j}.b"), b);
                    }
                    OpWeights::Skip => {}
                }
            }
            f(&format!("c{ci}.out.w"), &mut cell.out_w);
            f(&format!("c{ci}.out.b"), &mut cell.out_b);
        }
        f("head1.w", &mut self.head1_w);
        f("head1.b", &mut self.head1_b);
        f("head2.w", &mut self.head2_w);
        f("head2.b", &mut self.head2_b);
    }

    pub fn lease<'t>(&self, tape: &'t Tape) -> DiscreteLeased<'t> {
        self.lease_with(tape, false)
    }

    pub fn lease_frozen<'t>(&self, tape: &'t Tape) -> DiscreteLeased<'t> {
        self.lease_with(tape, true)
    }

    fn lease_with<'t>(&self, tape: &'t Tape, frozen: bool) -> DiscreteLeased<'t> {
        let mk = |a: &Array| if frozen { tape.input(a) } else { tape.param(a) };
        let cells = self
            .cells
            .iter()
            .map(|cell| DiscreteCellLeased {
                edges: cell
                    .edges
                    .iter()
                    .map(|e| DiscreteEdgeLeased {
                        src: e.src,
                        op: e.op,
                        weights: match &e.weights {
                            OpWeights::Conv(cw) => OpLeased::Conv(if frozen {
                                cw.lease_frozen(tape)
                            } else {
                                cw.lease(tape)
                            }),
                            OpWeights::Mlp { w, b } => OpLeased::Mlp { w: mk(w), b: mk(b) },
                            OpWeights::Skip => OpLeased::Skip,
                        },
                    })
                    .collect(),
                out_w: mk(&cell.out_w),
                out_b: mk(&cell.out_b),
            })
            .collect();
        DiscreteLeased {
            stem_w: mk(&self.stem_w),
            stem_b: mk(&self.stem_b),
            cells,
            head1_w: mk(&self.head1_w),
            head1_b: mk(&self.head1_b),
            head2_w: mk(&self.head2_w),
            head2_b: mk(&self.head2_b),
        }
    }
}

pub enum OpLeased<'t> {
    Conv(ConvLeased<'t>),
    Mlp { w: Tensor<'t>, b: Tensor<'t> },
    Skip,
}

pub struct DiscreteEdgeLeased<'t> {
    pub src: usize,
    pub op: CellOp,
    pub weights: OpLeased<'t>,
}

pub struct DiscreteCellLeased<'t> {
    pub edges: Vec<DiscreteEdgeLeased<'t>>,
    pub out_w: Tensor<'t>,
    pub out_b: Tensor<'t>,
}

pub struct DiscreteLeased<'t> {
    pub stem_w: Tensor<'t>,
    pub stem_b: Tensor<'t>,
    pub cells: Vec<DiscreteCellLeased<'t>>,
    pub head1_w: Tensor<'t>,
    pub head1_b: Tensor<'t>,
    pub head2_w: Tensor<'t>,
    pub head2_b: Tensor<'t>,
}

impl<'t> DiscreteLeased<'t> {
    pub fn walk(&self, f: &mut dyn FnMut(&str, Tensor<'t>)) {
        f("stem.w", self.stem_w);
        f("stem.b", self.stem_b);
        for (ci, cell) in self.cells.iter().enumerate() {
            for (j, e) in cell.edges.iter().enumerate() {
                match &e.weights {
                    OpLeased::Conv(cw) => {
                        cw.walk(&mut |n, t| f(&format!("c{ci}.g{j}.{n}"), t));
                    }
                    OpLeased::Mlp { w, b } => {
                        f(&format!("c{ci}.g{j}.w"), *w);
                        f(&format!("c{ci}.g{j}.b"), *b);
                    }
                    OpLeased::Skip => {}
                }
            }
            f(&format!("c{ci}.out.w"), cell.out_w);
            f(&format!("c{ci}.out.b"), cell.out_b);
        }
        f("head1.w", self.head1_w);
        f("head1.b", self.head1_b);
        f("head2.w", self.head2_w);
        f("head2.b", self.head2_b);
    }
}

/// Forward pass of a discretized network. Mirrors [`supernet_forward`]
/// with each node summing its two kept edges.
pub fn discrete_forward<'t>(
    tape: &'t Tape,
    cfg: &NetConfig,
    genotype: &CellGenotype,
    net: &DiscreteLeased<'t>,
    batch: &[(Tensor<'t>, &PairIndex)],
) -> Result<Tensor<'t>, TensorError> {
    let mut rows = Vec::with_capacity(batch.len());
    for (coords, pairs) in batch {
        let stem = coords.matmul(net.stem_w)?.bias_add(net.stem_b)?.relu();
        let (mut s0, mut s1) = (stem, stem);
        for cell in &net.cells {
            let mut nodes = vec![s0, s1];
            for picks in cell.edges.chunks(2) {
                let mut terms = Vec::with_capacity(2);
                for e in picks {
                    let x = nodes[e.src];
                    terms.push(match &e.weights {
                        OpLeased::Conv(cw) => {
                            let g = match e.op {
                                CellOp::ConvA => &genotype.conv_a,
                                _ => &genotype.conv_b,
                            };
                            conv::forward(
                                tape,
                                &cfg.conv,
                                cw,
                                &[],
                                ConvMode::Fixed(g),
                                x,
                                *coords,
                                pairs,
                            )?
                        }
                        OpLeased::Mlp { w, b } => x.matmul(*w)?.bias_add(*b)?.relu(),
                        OpLeased::Skip => x,
                    });
                }
                nodes.push(tape.sum_n(&terms)?);
            }
            let cat = tape.concat(&[nodes[2], nodes[3], nodes[4], s1], 1)?;
            let out = cat.matmul(cell.out_w)?.bias_add(cell.out_b)?;
            s0 = s1;
            s1 = out;
        }
        let pooled = s1.reduce(Agg::Max, 0)?.reshape(&[1, cfg.channels])?;
        rows.push(pooled);
    }
    let x = tape.concat(&rows, 0)?;
    let h = x.matmul(net.head1_w)?.bias_add(net.head1_b)?.relu();
    h.matmul(net.head2_w)?.bias_add(net.head2_b)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ea::EAKind;
    use crate::rng::{stream_rng, Stream};
    use crate::tensor::gradcheck;

    fn tiny_cfg() -> NetConfig {
        NetConfig {
            cells: 2,
            channels: 3,
            classes: 2,
            k: 2,
            conv: ConvConfig { levels: 1, nodes: 3, hidden: 2, ..ConvConfig::default() },
        }
    }

    fn cloud(rng: &mut ChaCha8Rng, n: usize) -> Array {
        Array::uniform(&[n, 3], -1.0, 1.0, rng)
    }

    fn max_abs_diff(a: &Array, b: &Array) -> f64 {
        a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
    }

    #[test]
    fn edge_table_lists_every_precedent_pair() {
        for (i, (from, to)) in EDGES.iter().enumerate() {
            assert!(from < to && *to >= 2 && *to <= 4, "edge {i} is ({from}, {to})");
        }
        for target in 2..5 {
            let incoming: Vec<usize> =
                EDGES.iter().filter(|(_, to)| *to == target).map(|(from, _)| *from).collect();
            assert_eq!(incoming, (0..target).collect::<Vec<_>>());
        }
    }

    #[test]
    fn skip_dominant_mixture_passes_the_input_through() {
        let cfg = tiny_cfg();
        let mut rng = stream_rng(3, Stream::ParamInit);
        let edge = EdgeWeights::init(&cfg.conv, 3, 3, &mut rng);
        let coords = cloud(&mut rng, 5);
        let x = Array::uniform(&[5, 3], -1.0, 1.0, &mut rng);
        let pairs = sample_pairs(&coords, 2).unwrap();
        let mut theta = vec![0.0; NUM_OPS];
        theta[CellOp::Skip.index()] = 60.0;

        let tape = Tape::new();
        let leased = edge.lease_with(&tape, true);
        let betas: Vec<_> = conv::init_betas(&cfg.conv).iter().map(|b| tape.input(b)).collect();
        let out = mixed_op(
            &tape,
            &cfg.conv,
            tape.input(&Array::new(vec![NUM_OPS], theta).unwrap()),
            &leased,
            &betas,
            &betas,
            ConvMode::Relaxed,
            ConvMode::Relaxed,
            tape.input(&x),
            tape.input(&coords),
            &pairs,
        )
        .unwrap();
        assert!(max_abs_diff(&out.value(), &x) <= 1e-9);
    }

    #[test]
    fn mixture_matches_direct_summation_for_random_logits() {
        let cfg = tiny_cfg();
        let mut rng = stream_rng(4, Stream::ParamInit);
        let edge = EdgeWeights::init(&cfg.conv, 3, 3, &mut rng);
        let coords = cloud(&mut rng, 6);
        let x = Array::uniform(&[6, 3], -1.0, 1.0, &mut rng);
        let pairs = sample_pairs(&coords, 2).unwrap();
        let beta_a: Vec<Array> =
            (0..cfg.conv.num_slots()).map(|_| Array::uniform(&[5], -1.0, 1.0, &mut rng)).collect();
        let beta_b: Vec<Array> =
            (0..cfg.conv.num_slots()).map(|_| Array::uniform(&[5], -1.0, 1.0, &mut rng)).collect();

        // Each candidate evaluated alone, on its own tape.
        let single = |which: usize| -> Array {
            let tape = Tape::new();
            let leased = edge.lease_with(&tape, true);
            let xs = tape.input(&x);
            let co = tape.input(&coords);
            match which {
                0 | 1 => {
                    let (cw, bs) =
                        if which == 0 { (&leased.conv_a, &beta_a) } else { (&leased.conv_b, &beta_b) };
                    let bl: Vec<_> = bs.iter().map(|b| tape.input(b)).collect();
                    conv::forward(&tape, &cfg.conv, cw, &bl, ConvMode::Relaxed, xs, co, &pairs)
                        .unwrap()
                        .value()
                }
                2 => xs.matmul(leased.mlp_w).unwrap().bias_add(leased.mlp_b).unwrap().relu().value(),
                3 => x.clone(),
                _ => Array::zeros(&[6, 3]),
            }
        };
        let parts: Vec<Array> = (0..NUM_OPS).map(single).collect();

        for theta in [vec![0.0; NUM_OPS], vec![0.7, -1.3, 0.2, 2.0, -0.5]] {
            let w = softmax_row(&theta);
            let mut want = Array::zeros(&[6, 3]);
            for (wo, part) in w.iter().zip(&parts) {
                for (dst, src) in want.data_mut().iter_mut().zip(part.data()) {
                    *dst += wo * src;
                }
            }

            let tape = Tape::new();
            let leased = edge.lease_with(&tape, true);
            let ba: Vec<_> = beta_a.iter().map(|b| tape.input(b)).collect();
            let bb: Vec<_> = beta_b.iter().map(|b| tape.input(b)).collect();
            let got = mixed_op(
                &tape,
                &cfg.conv,
                tape.input(&Array::new(vec![NUM_OPS], theta).unwrap()),
                &leased,
                &ba,
                &bb,
                ConvMode::Relaxed,
                ConvMode::Relaxed,
                tape.input(&x),
                tape.input(&coords),
                &pairs,
            )
            .unwrap();
            assert!(max_abs_diff(&got.value(), &want) <= 1e-12);
        }
    }

    #[test]
    fn mixture_logit_gradients_match_finite_differences() {
        let cfg = tiny_cfg();
        let mut rng = stream_rng(5, Stream::ParamInit);
        let edge = EdgeWeights::init(&cfg.conv, 3, 3, &mut rng);
        let coords = cloud(&mut rng, 5);
        let x = Array::uniform(&[5, 3], -1.0, 1.0, &mut rng);
        let pairs = sample_pairs(&coords, 2).unwrap();
        let betas: Vec<Array> =
            (0..cfg.conv.num_slots()).map(|_| Array::uniform(&[5], -0.5, 0.5, &mut rng)).collect();
        let proj = Array::uniform(&[5, 3], -1.0, 1.0, &mut rng);
        let theta = Array::new(vec![NUM_OPS], vec![0.4, -0.2, 0.9, -1.1, 0.3]).unwrap();

        let c = gradcheck::check("mixed_op_theta", gradcheck::COMPOSITE_TOL, &[theta], |t, leaves| {
            let leased = edge.lease_with(t, true);
            let bl: Vec<_> = betas.iter().map(|b| t.input(b)).collect();
            let out = mixed_op(
                t,
                &cfg.conv,
                leaves[0],
                &leased,
                &bl,
                &bl,
                ConvMode::Relaxed,
                ConvMode::Relaxed,
                t.input(&x),
                t.input(&coords),
                &pairs,
            )
            .unwrap();
            out.mul(t.input(&proj)).unwrap().sum_all()
        });
        assert!(c.passed(), "rel err {:e}", c.rel_err);
    }

    #[test]
    fn zero_dominant_cell_depends_only_on_the_second_input() {
        let cfg = tiny_cfg();
        let mut rng = stream_rng(6, Stream::ParamInit);
        let cell = CellWeights::init(&cfg, &mut rng);
        let mut arch = SupernetArch::init(&cfg.conv);
        for t in arch.theta.iter_mut() {
            t.data_mut()[CellOp::Zero.index()] = 60.0;
        }
        let coords = cloud(&mut rng, 5);
        let pairs = sample_pairs(&coords, 2).unwrap();
        let s1 = Array::uniform(&[5, 3], -1.0, 1.0, &mut rng);

        let run = |s0: &Array| -> Array {
            let tape = Tape::new();
            let leased = cell.lease_with(&tape, true);
            let al = arch.lease_frozen(&tape);
            cell_forward(
                &tape,
                &cfg.conv,
                &leased,
                &al,
                ConvMode::Relaxed,
                ConvMode::Relaxed,
                tape.input(s0),
                tape.input(&s1),
                tape.input(&coords),
                &pairs,
            )
            .unwrap()
            .value()
        };
        let a = run(&Array::uniform(&[5, 3], -1.0, 1.0, &mut rng));
        let b = run(&Array::full(&[5, 3], 7.0));
        assert!(max_abs_diff(&a, &b) <= 1e-12);

        // Intermediate nodes vanish, so only the s1 block of the output
        // projection survives.
        let c = cfg.channels;
        let mut want = Array::zeros(&[5, c]);
        for r in 0..5 {
            for o in 0..c {
                let mut v = cell.out_b.data()[o];
                for j in 0..c {
                    v += s1.data()[r * c + j] * cell.out_w.data()[(3 * c + j) * c + o];
                }
                want.data_mut()[r * c + o] = v;
            }
        }
        assert!(max_abs_diff(&a, &want) <= 1e-9);
    }

    #[test]
    fn skip_dominant_cell_matches_hand_computed_sums() {
        let cfg = NetConfig { channels: 2, ..tiny_cfg() };
        let mut rng = stream_rng(7, Stream::ParamInit);
        let cell = CellWeights::init(&cfg, &mut rng);
        let mut arch = SupernetArch::init(&cfg.conv);
        for t in arch.theta.iter_mut() {
            t.data_mut()[CellOp::Skip.index()] = 60.0;
        }
        let coords = cloud(&mut rng, 4);
        let pairs = sample_pairs(&coords, 2).unwrap();
        let s0 = Array::uniform(&[4, 2], -1.0, 1.0, &mut rng);
        let s1 = Array::uniform(&[4, 2], -1.0, 1.0, &mut rng);

        let tape = Tape::new();
        let leased = cell.lease_with(&tape, true);
        let al = arch.lease_frozen(&tape);
        let got = cell_forward(
            &tape,
            &cfg.conv,
            &leased,
            &al,
            ConvMode::Relaxed,
            ConvMode::Relaxed,
            tape.input(&s0),
            tape.input(&s1),
            tape.input(&coords),
            &pairs,
        )
        .unwrap()
        .value();

        // All-skip node values: n2 = s0+s1, n3 = 2(s0+s1), n4 = 4(s0+s1).
        let base: Vec<f64> = s0.data().iter().zip(s1.data()).map(|(a, b)| a + b).collect();
        let mut want = Array::zeros(&[4, 2]);
        for r in 0..4 {
            for o in 0..2 {
                let mut v = cell.out_b.data()[o];
                for j in 0..2 {
                    let cat = [
                        base[r * 2 + j],
                        2.0 * base[r * 2 + j],
                        4.0 * base[r * 2 + j],
                        s1.data()[r * 2 + j],
                    ];
                    for (blk, val) in cat.iter().enumerate() {
                        v += val * cell.out_w.data()[(blk * 2 + j) * 2 + o];
                    }
                }
                want.data_mut()[r * 2 + o] = v;
            }
        }
        assert!(max_abs_diff(&got, &want) <= 1e-9);
    }

    #[test]
    fn identical_clouds_share_identical_logits_rows() {
        let cfg = tiny_cfg();
        let mut rng = stream_rng(8, Stream::ParamInit);
        let weights = SupernetWeights::init(&cfg, &mut rng);
        let arch = SupernetArch::init(&cfg.conv);
        let coords = cloud(&mut rng, 6);
        let pairs = sample_pairs(&coords, cfg.k).unwrap();

        let tape = Tape::new();
        let net = weights.lease_frozen(&tape);
        let al = arch.lease_frozen(&tape);
        let co = tape.input(&coords);
        let logits = supernet_forward(
            &tape,
            &cfg,
            &net,
            &al,
            ConvMode::Relaxed,
            ConvMode::Relaxed,
            &[(co, &pairs), (co, &pairs), (co, &pairs)],
        )
        .unwrap()
        .value();
        assert_eq!(logits.shape(), &[3, cfg.classes]);
        let row: Vec<u64> = logits.data()[..cfg.classes].iter().map(|v| v.to_bits()).collect();
        for r in 1..3 {
            let other: Vec<u64> = logits.data()[r * cfg.classes..(r + 1) * cfg.classes]
                .iter()
                .map(|v| v.to_bits())
                .collect();
            assert_eq!(row, other, "row {r} differs");
        }
    }

    #[test]
    fn logits_have_one_row_per_sample_and_one_column_per_class() {
        let cfg = NetConfig { classes: 4, cells: 1, ..tiny_cfg() };
        let mut rng = stream_rng(9, Stream::ParamInit);
        let weights = SupernetWeights::init(&cfg, &mut rng);
        let arch = SupernetArch::init(&cfg.conv);
        let clouds: Vec<Array> = (0..3).map(|_| cloud(&mut rng, 5)).collect();
        let pairs: Vec<PairIndex> =
            clouds.iter().map(|c| sample_pairs(c, cfg.k).unwrap()).collect();

        let tape = Tape::new();
        let net = weights.lease_frozen(&tape);
        let al = arch.lease_frozen(&tape);
        let batch: Vec<_> =
            clouds.iter().zip(&pairs).map(|(c, p)| (tape.input(c), p)).collect();
        let logits = supernet_forward(
            &tape,
            &cfg,
            &net,
            &al,
            ConvMode::Relaxed,
            ConvMode::Relaxed,
            &batch,
        )
        .unwrap();
        assert_eq!(logits.shape(), vec![3, 4]);
        assert!(logits.value().data().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn classification_gradients_through_two_cells_match_finite_differences() {
        let cfg = tiny_cfg();
        let mut rng = stream_rng(10, Stream::ParamInit);
        let weights = SupernetWeights::init(&cfg, &mut rng);
        let clouds: Vec<Array> = (0..2).map(|_| cloud(&mut rng, 4)).collect();
        let pairs: Vec<PairIndex> =
            clouds.iter().map(|c| sample_pairs(c, cfg.k).unwrap()).collect();
        let labels = [0u32, 1];

        // Parts: nine theta rows, one beta per candidate, then the stem bias.
        let mut parts: Vec<Array> =
            (0..NUM_EDGES).map(|_| Array::uniform(&[5], -0.8, 0.8, &mut rng)).collect();
        parts.push(Array::uniform(&[5], -0.6, 0.6, &mut rng));
        parts.push(Array::uniform(&[5], -0.6, 0.6, &mut rng));
        parts.push(Array::uniform(&[3], -0.3, 0.3, &mut rng));

        let c = gradcheck::check("supernet_loss", gradcheck::COMPOSITE_TOL, &parts, |t, leaves| {
            let mut net = weights.lease_frozen(t);
            net.stem_b = leaves[NUM_EDGES + 2];
            let al = ArchLeased {
                theta: leaves[..NUM_EDGES].to_vec(),
                beta_a: vec![leaves[NUM_EDGES]],
                beta_b: vec![leaves[NUM_EDGES + 1]],
            };
            let batch: Vec<_> =
                clouds.iter().zip(&pairs).map(|(cl, p)| (t.input(cl), p)).collect();
            let logits = supernet_forward(
                t,
                &cfg,
                &net,
                &al,
                ConvMode::Relaxed,
                ConvMode::Relaxed,
                &batch,
            )
            .unwrap();
            logits.cross_entropy(&labels).unwrap()
        });
        assert!(c.passed(), "rel err {:e}", c.rel_err);
    }

    #[test]
    fn discretize_keeps_the_two_strongest_non_zero_edges() {
        let cfg = tiny_cfg();
        let mut arch = SupernetArch::init(&cfg.conv);
        let set = |arch: &mut SupernetArch, e: usize, op: CellOp, v: f64| {
            arch.theta[e] = Array::zeros(&[NUM_OPS]);
            arch.theta[e].data_mut()[op.index()] = v;
        };
        // Node 2: zero dominates edge 0, so its next-best op is kept.
        set(&mut arch, 0, CellOp::Zero, 9.0);
        arch.theta[0].data_mut()[CellOp::Mlp.index()] = 2.0;
        set(&mut arch, 1, CellOp::Skip, 3.0);
        // Node 3: margins rank conv_a (edge 2) above conv_b (edge 4) above
        // mlp (edge 3); the weakest edge drops.
        set(&mut arch, 2, CellOp::ConvA, 3.0);
        set(&mut arch, 3, CellOp::Mlp, 1.0);
        set(&mut arch, 4, CellOp::ConvB, 2.0);
        // Node 4: edges 5 and 6 tie exactly and win by index order.
        set(&mut arch, 5, CellOp::ConvA, 2.0);
        set(&mut arch, 6, CellOp::ConvA, 2.0);
        set(&mut arch, 7, CellOp::Skip, 0.5);
        set(&mut arch, 8, CellOp::Mlp, 0.5);
        // Association logits argmax to fixed picks.
        arch.beta_a[0].data_mut()[EAKind::E3.index()] = 1.0;
        arch.beta_b[0].data_mut()[EAKind::E5.index()] = 1.0;

        let g = discretize_cell(&cfg.conv, &arch);
        g.validate().unwrap();
        assert_eq!(g.nodes[0], [(0, CellOp::Mlp), (1, CellOp::Skip)]);
        assert_eq!(g.nodes[1], [(0, CellOp::ConvA), (2, CellOp::ConvB)]);
        assert_eq!(g.nodes[2], [(0, CellOp::ConvA), (1, CellOp::ConvA)]);
        assert_eq!(g.conv_a.selections, vec![EAKind::E3]);
        assert_eq!(g.conv_b.selections, vec![EAKind::E5]);

        // All-equal logits everywhere: first non-zero op and earliest edges.
        let uniform = SupernetArch::init(&cfg.conv);
        let g = discretize_cell(&cfg.conv, &uniform);
        g.validate().unwrap();
        for (i, picks) in g.nodes.iter().enumerate() {
            assert_eq!(*picks, [(0, CellOp::ConvA), (1, CellOp::ConvA)], "node {}", i + 2);
        }
    }

    #[test]
    fn sampled_argmax_and_discretized_convs_agree_bitwise() {
        let cfg = tiny_cfg();
        let mut rng = stream_rng(11, Stream::ParamInit);
        let weights = SupernetWeights::init(&cfg, &mut rng);
        let mut arch = SupernetArch::init(&cfg.conv);
        for b in arch.beta_a.iter_mut().chain(arch.beta_b.iter_mut()) {
            *b = Array::uniform(&[5], -1.0, 1.0, &mut rng);
        }
        let g = discretize_cell(&cfg.conv, &arch);
        let sel_a: Vec<usize> =
            g.conv_a.selections.iter().map(|k| k.index()).collect();
        let sel_b: Vec<usize> =
            g.conv_b.selections.iter().map(|k| k.index()).collect();
        let coords = cloud(&mut rng, 6);
        let pairs = sample_pairs(&coords, cfg.k).unwrap();

        let run = |a_mode: ConvMode<'_>, b_mode: ConvMode<'_>| -> Vec<u64> {
            let tape = Tape::new();
            let net = weights.lease_frozen(&tape);
            let al = arch.lease_frozen(&tape);
            let co = tape.input(&coords);
            supernet_forward(&tape, &cfg, &net, &al, a_mode, b_mode, &[(co, &pairs)])
                .unwrap()
                .value()
                .data()
                .iter()
                .map(|v| v.to_bits())
                .collect()
        };
        let sampled = run(ConvMode::Sampled(&sel_a), ConvMode::Sampled(&sel_b));
        let fixed = run(ConvMode::Fixed(&g.conv_a), ConvMode::Fixed(&g.conv_b));
        assert_eq!(sampled, fixed);
    }

    #[test]
    fn discretized_network_runs_on_a_random_batch() {
        let cfg = NetConfig { channels: 4, classes: 3, k: 3, ..tiny_cfg() };
        let mut rng = stream_rng(12, Stream::ParamInit);
        let mut arch = SupernetArch::init(&cfg.conv);
        for t in arch.theta.iter_mut() {
            *t = Array::uniform(&[NUM_OPS], -1.0, 1.0, &mut rng);
        }
        for b in arch.beta_a.iter_mut().chain(arch.beta_b.iter_mut()) {
            *b = Array::uniform(&[5], -1.0, 1.0, &mut rng);
        }
        let g = discretize_cell(&cfg.conv, &arch);
        let net = DiscreteNet::init(&cfg, &g, &mut rng);

        let clouds: Vec<Array> = (0..2).map(|_| cloud(&mut rng, 6)).collect();
        let pairs: Vec<PairIndex> =
            clouds.iter().map(|c| sample_pairs(c, cfg.k).unwrap()).collect();
        let tape = Tape::new();
        let leased = net.lease(&tape);
        let batch: Vec<_> =
            clouds.iter().zip(&pairs).map(|(c, p)| (tape.input(c), p)).collect();
        let logits = discrete_forward(&tape, &cfg, &g, &leased, &batch).unwrap();
        assert_eq!(logits.shape(), vec![2, 3]);
        let loss = logits.cross_entropy(&[0, 2]).unwrap();
        assert!(loss.value().data()[0].is_finite());
        loss.backward().unwrap();
    }

    #[test]
    fn stacked_cells_share_no_parameters() {
        let cfg = NetConfig { cells: 3, ..tiny_cfg() };
        let mut rng = stream_rng(13, Stream::ParamInit);
        let weights = SupernetWeights::init(&cfg, &mut rng);
        let mut names = Vec::new();
        weights.walk(&mut |n, _| names.push(n.to_string()));

        let mut unique = names.clone();
        unique.sort();
        unique.dedup();
        assert_eq!(unique.len(), names.len(), "aliased parameter names");

        // Per conv instance: embedding plus per-level weight and bias.
        let conv_arrays = 1 + 2 * cfg.conv.levels;
        let per_edge = 2 * conv_arrays + 2;
        let expected = 2 + cfg.cells * (NUM_EDGES * per_edge + 2) + 4;
        assert_eq!(names.len(), expected);
        let conv_a_count = names.iter().filter(|n| n.contains(".conv_a.")).count();
        assert_eq!(conv_a_count, cfg.cells * NUM_EDGES * conv_arrays);

        // The leased view mirrors the traversal exactly.
        let tape = Tape::new();
        let leased = weights.lease(&tape);
        let mut leased_names = Vec::new();
        leased.walk(&mut |n, _| leased_names.push(n.to_string()));
        assert_eq!(names, leased_names);
    }
}
