//! Gradient scenarios above the tensor level: every essential
//! association evaluated through gathered pair rows, the relaxed
//! association mixture, and the full two-cell network differentiated
//! with respect to each parameter group.

pub use crate::tensor::gradcheck::{
    check, check_primitives, check_with_step, OpCheck, COMPOSITE_TOL, FD_STEP, PRIMITIVE_TOL,
};

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::conv::{ConvConfig, ConvLeased, ConvMode};
use crate::data::{all_pairs, knn, PairIndex};
use crate::ea::{self, EAKind, SlotSelect};
use crate::net::{
    supernet_forward, ArchLeased, CellLeased, EdgeLeased, NetConfig, SupernetLeased,
    SupernetWeights, NUM_EDGES,
};
use crate::rng::{stream_rng, Stream};
use crate::tensor::{Array, Tape, Tensor};

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Array {
    let n = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.gen_range(lo..hi)).collect();
    Array::new(shape.to_vec(), data).expect("length matches shape")
}

fn project<'t>(tape: &'t Tape, t: Tensor<'t>, proj: &Array) -> Tensor<'t> {
    t.mul(tape.input(proj)).expect("projection shape matches").sum_all()
}

fn assoc_name(kind: EAKind) -> &'static str {
    match kind {
        EAKind::E1 => "assoc_e1",
        EAKind::E2 => "assoc_e2",
        EAKind::E3 => "assoc_e3",
        EAKind::E4 => "assoc_e4",
        EAKind::E5 => "assoc_e5",
    }
}

/// Each association differentiated through the point features feeding
/// both pair roles of a small neighborhood layout.
pub fn check_associations(seed: u64) -> Vec<OpCheck> {
    let rng = &mut stream_rng(seed, Stream::Baseline);
    let points = uniform(rng, &[8, 3], -1.0, 1.0);
    let pairs = all_pairs(&knn(&points, 2).expect("k fits"));
    let feats = uniform(rng, &[8, 3], -1.0, 1.0);
    let proj = uniform(rng, &[16, 3], -1.0, 1.0);

    EAKind::ALL
        .into_iter()
        .map(|kind| {
            check(assoc_name(kind), PRIMITIVE_TOL, &[feats.clone()], |t, l| {
                let a = l[0].gather_rows(&pairs.ctr).expect("indices in range");
                let b = l[0].gather_rows(&pairs.nbr).expect("indices in range");
                let out = ea::eval_ea(kind, a, b, &pairs.order).expect("same widths");
                project(t, out, &proj)
            })
        })
        .collect()
}

/// Shared fixture for the composite scenarios: a two-cell network on a
/// two-sample batch, with every parameter group stored as plain arrays
/// so any one group can become the differentiated leaves.
struct Scene {
    ncfg: NetConfig,
    weights: Vec<Array>,
    theta: Vec<Array>,
    beta_a: Vec<Array>,
    beta_b: Vec<Array>,
    coords: Vec<Array>,
    pairs: Vec<PairIndex>,
    labels: Vec<u32>,
}

fn scene(seed: u64) -> Scene {
    let ncfg = NetConfig {
        cells: 2,
        channels: 2,
        classes: 2,
        k: 2,
        conv: ConvConfig { levels: 1, nodes: 3, hidden: 2, ..ConvConfig::default() },
    };
    let rng = &mut stream_rng(seed, Stream::ParamInit);
    let mut weights = Vec::new();
    SupernetWeights::init(&ncfg, rng).walk(&mut |_, a| weights.push(a.clone()));
    // Fresh biases are all zero, which parks relu pre-activations exactly on the
    // kink whenever an upstream relu zeroes a row; jitter every array so the
    // finite-difference probe point is generic.
    for w in &mut weights {
        let shape = w.shape().to_vec();
        let noise = uniform(rng, &shape, -0.1, 0.1);
        for (x, n) in w.data_mut().iter_mut().zip(noise.data().iter()) {
            *x += *n;
        }
    }

    let slots = ncfg.conv.num_slots();
    let eas = ncfg.conv.ea_subset.len();
    let theta = (0..NUM_EDGES).map(|_| uniform(rng, &[5], -0.5, 0.5)).collect();
    let beta_a = (0..slots).map(|_| uniform(rng, &[eas], -0.5, 0.5)).collect();
    let beta_b = (0..slots).map(|_| uniform(rng, &[eas], -0.5, 0.5)).collect();

    let mut coords = Vec::new();
    let mut pairs = Vec::new();
    for _ in 0..2 {
        let c = uniform(rng, &[6, 3], -1.0, 1.0);
        pairs.push(all_pairs(&knn(&c, ncfg.k).expect("k fits")));
        coords.push(c);
    }
    Scene { ncfg, weights, theta, beta_a, beta_b, coords, pairs, labels: vec![0, 1] }
}

#[derive(Clone, Copy, PartialEq)]
enum LeafGroup {
    Omega,
    Theta,
    Beta,
}

fn conv_from<'t>(leaves: &[Tensor<'t>], cur: &mut usize, levels: usize) -> ConvLeased<'t> {
    let emb = leaves[*cur];
    *cur += 1;
    let mut level_w = Vec::with_capacity(levels);
    let mut level_b = Vec::with_capacity(levels);
    for _ in 0..levels {
        level_w.push(leaves[*cur]);
        level_b.push(leaves[*cur + 1]);
        *cur += 2;
    }
    ConvLeased { emb, level_w, level_b }
}

/// Rebuilds the leased supernet from tensors laid out in walk order.
/// Valid only for uniform channel width, where no skip projection exists.
fn supernet_from<'t>(leaves: &[Tensor<'t>], cfg: &NetConfig) -> SupernetLeased<'t> {
    let mut cur = 0;
    let stem_w = leaves[cur];
    let stem_b = leaves[cur + 1];
    cur += 2;
    let mut cells = Vec::with_capacity(cfg.cells);
    for _ in 0..cfg.cells {
        let mut edges = Vec::with_capacity(NUM_EDGES);
        for _ in 0..NUM_EDGES {
            let conv_a = conv_from(leaves, &mut cur, cfg.conv.levels);
            let conv_b = conv_from(leaves, &mut cur, cfg.conv.levels);
            let mlp_w = leaves[cur];
            let mlp_b = leaves[cur + 1];
            cur += 2;
            edges.push(EdgeLeased { conv_a, conv_b, mlp_w, mlp_b, skip_proj: None });
        }
        let out_w = leaves[cur];
        let out_b = leaves[cur + 1];
        cur += 2;
        cells.push(CellLeased { edges, out_w, out_b });
    }
    let head1_w = leaves[cur];
    let head1_b = leaves[cur + 1];
    let head2_w = leaves[cur + 2];
    let head2_b = leaves[cur + 3];
    debug_assert_eq!(cur + 4, leaves.len());
    SupernetLeased { stem_w, stem_b, cells, head1_w, head1_b, head2_w, head2_b }
}

fn scene_loss<'t>(
    tape: &'t Tape,
    sc: &Scene,
    group: LeafGroup,
    leaves: &[Tensor<'t>],
) -> Tensor<'t> {
    let lease_group = |arrays: &[Array], want: LeafGroup, offset: usize| -> Vec<Tensor<'t>> {
        if group == want {
            leaves[offset..offset + arrays.len()].to_vec()
        } else {
            arrays.iter().map(|a| tape.input(a)).collect()
        }
    };
    let omega = lease_group(&sc.weights, LeafGroup::Omega, 0);
    let theta = lease_group(&sc.theta, LeafGroup::Theta, 0);
    let beta_a = lease_group(&sc.beta_a, LeafGroup::Beta, 0);
    let beta_b = lease_group(&sc.beta_b, LeafGroup::Beta, sc.beta_a.len());

    let net = supernet_from(&omega, &sc.ncfg);
    let arch = ArchLeased { theta, beta_a, beta_b };
    let batch: Vec<(Tensor<'t>, &PairIndex)> = sc
        .coords
        .iter()
        .zip(&sc.pairs)
        .map(|(c, p)| (tape.input(c), p))
        .collect();
    let logits = supernet_forward(
        tape,
        &sc.ncfg,
        &net,
        &arch,
        ConvMode::Relaxed,
        ConvMode::Relaxed,
        &batch,
    )
    .expect("scene shapes agree");
    logits.cross_entropy(&sc.labels).expect("labels in range")
}

/// Composite checks: the relaxed mixture in its own right, then the full
/// network loss differentiated per parameter group.
pub fn check_composites(seed: u64) -> Vec<OpCheck> {
    let mut checks = Vec::new();

    let rng = &mut stream_rng(seed.wrapping_add(1), Stream::Baseline);
    let points = uniform(rng, &[8, 3], -1.0, 1.0);
    let pairs = all_pairs(&knn(&points, 2).expect("k fits"));
    let feats = uniform(rng, &[8, 3], -1.0, 1.0);
    let beta = uniform(rng, &[5], -1.0, 1.0);
    let proj = uniform(rng, &[16, 3], -1.0, 1.0);
    checks.push(check(
        "mixed_edge_beta",
        COMPOSITE_TOL,
        &[beta, feats],
        |t, l| {
            let a = l[1].gather_rows(&pairs.ctr).expect("indices in range");
            let b = l[1].gather_rows(&pairs.nbr).expect("indices in range");
            let out = ea::mixed_edge(
                t,
                l[0],
                &EAKind::ALL,
                SlotSelect::Relaxed,
                a,
                b,
                &pairs.order,
            )
            .expect("same widths");
            project(t, out, &proj)
        },
    ));

    // The two-cell network stacks relu and max selections; the smaller
    // step keeps the probes on one side of each selection boundary.
    let deep_step = 1e-6;
    let sc = scene(seed);
    checks.push(check_with_step("supernet_theta", COMPOSITE_TOL, deep_step, &sc.theta.clone(), |t, l| {
        scene_loss(t, &sc, LeafGroup::Theta, l)
    }));
    let betas: Vec<Array> = sc.beta_a.iter().chain(&sc.beta_b).cloned().collect();
    checks.push(check_with_step("supernet_beta", COMPOSITE_TOL, deep_step, &betas, |t, l| {
        scene_loss(t, &sc, LeafGroup::Beta, l)
    }));
    checks.push(check_with_step("supernet_omega", COMPOSITE_TOL, deep_step, &sc.weights.clone(), |t, l| {
        scene_loss(t, &sc, LeafGroup::Omega, l)
    }));
    checks
}

/// The full suite: tensor primitives, associations, composites.
pub fn run_all(seed: u64) -> Vec<OpCheck> {
    let mut checks = check_primitives(seed);
    checks.extend(check_associations(seed));
    checks.extend(check_composites(seed));
    checks
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn associations_and_composites_match_finite_differences() {
        for c in check_associations(3).into_iter().chain(check_composites(3)) {
            assert!(
                c.passed(),
                "{} gradient mismatch: rel_err {:e} > tol {:e}",
                c.name,
                c.rel_err,
                c.tol
            );
        }
    }


    #[test]
    fn the_suite_covers_every_group() {
        let names: Vec<_> = run_all(5).iter().map(|c| c.name).collect();
        for expected in [
            "matmul",
            "assoc_e1",
            "assoc_e5",
            "mixed_edge_beta",
            "supernet_theta",
            "supernet_beta",
            "supernet_omega",
        ] {
            assert!(names.contains(&expected), "missing scenario {expected}");
        }
    }
}
