//! Central-difference verification of tape gradients.
//!
//! Every differentiable primitive gets a scenario: random (seeded) inputs
//! placed away from kinks, a scalar loss built from the op under test, and a
//! comparison of the tape gradient against a two-sided finite difference.

use std::rc::Rc;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Agg, Array, SegmentOrder, Tape, Tensor};

/// Step for two-sided differences.
pub const FD_STEP: f64 = 1e-5;

/// Tolerance for single-primitive checks.
pub const PRIMITIVE_TOL: f64 = 1e-6;

/// Tolerance for multi-op composite checks.
pub const COMPOSITE_TOL: f64 = 1e-4;

/// Outcome of one scenario.
pub struct OpCheck {
    pub name: &'static str,
    pub rel_err: f64,
    pub tol: f64,
}

impl OpCheck {
    pub fn passed(&self) -> bool {
        self.rel_err.is_finite() && self.rel_err <= self.tol
    }
}

/// Two-sided difference gradient of `f` at `x0`.
pub fn central_diff(mut f: impl FnMut(&[f64]) -> f64, x0: &[f64], h: f64) -> Vec<f64> {
    let mut x = x0.to_vec();
    let mut g = vec![0.0; x0.len()];
    for i in 0..x0.len() {
        let orig = x[i];
        x[i] = orig + h;
        let fp = f(&x);
        x[i] = orig - h;
        let fm = f(&x);
        x[i] = orig;
        g[i] = (fp - fm) / (2.0 * h);
    }
    g
}

/// Worst elementwise relative error, with the denominator floored at 1 so
/// near-zero entries compare absolutely.
pub fn max_rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| (a - n).abs() / f64::max(1.0, f64::max(a.abs(), n.abs())))
        .fold(0.0, f64::max)
}

/// Runs one scenario: `build` combines the leaf tensors (one per entry of
/// `parts`, all gradient-carrying) into a scalar loss.
pub fn check<F>(name: &'static str, tol: f64, parts: &[Array], build: F) -> OpCheck
where
    F: for<'t> Fn(&'t Tape, &[Tensor<'t>]) -> Tensor<'t>,
{
    check_with_step(name, tol, FD_STEP, parts, build)
}

/// Like [`check`] with an explicit difference step. Deep composites use a
/// smaller step: it narrows the window in which a probe can cross a relu
/// kink or flip a max winner, which central differences cannot survive.
pub fn check_with_step<F>(
    name: &'static str,
    tol: f64,
    step: f64,
    parts: &[Array],
    build: F,
) -> OpCheck
where
    F: for<'t> Fn(&'t Tape, &[Tensor<'t>]) -> Tensor<'t>,
{
    let flat: Vec<f64> = parts.iter().flat_map(|p| p.data().iter().copied()).collect();

    let rebuild = |x: &[f64]| -> Vec<Array> {
        let mut out = Vec::with_capacity(parts.len());
        let mut off = 0;
        for p in parts {
            let n = p.numel();
            out.push(Array::new(p.shape().to_vec(), x[off..off + n].to_vec()).expect("split matches part shape"));
            off += n;
        }
        out
    };

    let tape = Tape::new();
    let leaves: Vec<Tensor> = rebuild(&flat).iter().map(|p| tape.param(p)).collect();
    let out = build(&tape, &leaves);
    out.backward().expect("scenario loss must be scalar");
    let mut analytic = Vec::with_capacity(flat.len());
    for leaf in &leaves {
        match leaf.grad() {
            Some(g) => analytic.extend_from_slice(g.data()),
            None => analytic.extend(std::iter::repeat(0.0).take(leaf.numel())),
        }
    }

    let numeric = central_diff(
        |x| {
            let tape = Tape::new();
            let leaves: Vec<Tensor> = rebuild(x).iter().map(|p| tape.param(p)).collect();
            build(&tape, &leaves).value().data()[0]
        },
        &flat,
        step,
    );

    OpCheck {
        name,
        rel_err: max_rel_err(&analytic, &numeric),
        tol,
    }
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Array {
    let n = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.gen_range(lo..hi)).collect();
    Array::new(shape.to_vec(), data).expect("length matches shape")
}

/// Values bounded away from zero, mimicking pre-activation inputs that must
/// not sit on the relu kink while differencing.
fn off_kink(rng: &mut ChaCha8Rng, shape: &[usize]) -> Array {
    let n = shape.iter().product();
    let data: Vec<f64> = (0..n)
        .map(|_| {
            let mag = rng.gen_range(0.2..1.0);
            if rng.gen::<bool>() {
                mag
            } else {
                -mag
            }
        })
        .collect();
    Array::new(shape.to_vec(), data).expect("length matches shape")
}

/// Random values staggered per row so max reductions have clear winners.
fn staggered(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Array {
    let mut data = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        for _ in 0..cols {
            data.push(rng.gen_range(0.0..1.0) + r as f64 * 0.013);
        }
    }
    Array::new(vec![rows, cols], data).expect("length matches shape")
}

fn project<'t>(tape: &'t Tape, t: Tensor<'t>, proj: &Array) -> Tensor<'t> {
    t.mul(tape.input(proj)).expect("projection shape matches").sum_all()
}

/// Segment layout used by the segmented-op scenarios: 3 segments of 4 rows,
/// visited in reverse within each segment to exercise non-identity orders.
fn test_order() -> Rc<SegmentOrder> {
    let mut rows = Vec::new();
    for s in 0..3u32 {
        for r in (0..4u32).rev() {
            rows.push(s * 4 + r);
        }
    }
    Rc::new(SegmentOrder::new(3, 4, rows).expect("valid block permutation"))
}

/// Checks every tape primitive against central differences.
pub fn check_primitives(seed: u64) -> Vec<OpCheck> {
    let rng = &mut ChaCha8Rng::seed_from_u64(seed);
    let mut checks = Vec::new();

    let p23 = uniform(rng, &[2, 3], -1.0, 1.0);
    let q23 = uniform(rng, &[2, 3], -1.0, 1.0);
    let proj23 = uniform(rng, &[2, 3], -1.0, 1.0);
    checks.push(check("add", PRIMITIVE_TOL, &[p23.clone(), q23.clone()], |t, l| {
        project(t, l[0].add(l[1]).expect("same shape"), &proj23)
    }));
    checks.push(check("sub", PRIMITIVE_TOL, &[p23.clone(), q23.clone()], |t, l| {
        project(t, l[0].sub(l[1]).expect("same shape"), &proj23)
    }));
    checks.push(check("mul", PRIMITIVE_TOL, &[p23.clone(), q23.clone()], |t, l| {
        project(t, l[0].mul(l[1]).expect("same shape"), &proj23)
    }));
    checks.push(check("add_scalar", PRIMITIVE_TOL, &[p23.clone()], |t, l| {
        project(t, l[0].add_scalar(0.7), &proj23)
    }));
    checks.push(check("mul_scalar", PRIMITIVE_TOL, &[p23.clone()], |t, l| {
        project(t, l[0].mul_scalar(-1.3), &proj23)
    }));

    let relu_in = off_kink(rng, &[3, 4]);
    let proj34 = uniform(rng, &[3, 4], -1.0, 1.0);
    checks.push(check("relu", PRIMITIVE_TOL, &[relu_in], |t, l| {
        project(t, l[0].relu(), &proj34)
    }));

    let a34 = uniform(rng, &[3, 4], -1.0, 1.0);
    let b42 = uniform(rng, &[4, 2], -1.0, 1.0);
    let proj32 = uniform(rng, &[3, 2], -1.0, 1.0);
    checks.push(check("matmul", PRIMITIVE_TOL, &[a34.clone(), b42], |t, l| {
        project(t, l[0].matmul(l[1]).expect("inner dims agree"), &proj32)
    }));

    let bias4 = uniform(rng, &[4], -1.0, 1.0);
    checks.push(check("bias_add", PRIMITIVE_TOL, &[a34.clone(), bias4], |t, l| {
        project(t, l[0].bias_add(l[1]).expect("bias length matches"), &proj34)
    }));

    let logits6 = uniform(rng, &[6], -1.0, 1.0);
    let proj6 = uniform(rng, &[6], -1.0, 1.0);
    checks.push(check("softmax", PRIMITIVE_TOL, &[logits6], |t, l| {
        project(t, l[0].softmax().expect("rank 1"), &proj6)
    }));

    let v7 = uniform(rng, &[7], 0.5, 1.5);
    checks.push(check("l2norm", PRIMITIVE_TOL, &[v7], |t, l| {
        l2scalar(t, l[0])
    }));

    let pos53 = uniform(rng, &[5, 3], 0.5, 1.5);
    let proj53 = uniform(rng, &[5, 3], -1.0, 1.0);
    checks.push(check("row_norm_bcast", PRIMITIVE_TOL, &[pos53], |t, l| {
        project(t, l[0].row_norm_bcast().expect("rank 2"), &proj53)
    }));

    let order = test_order();
    let seg_in = uniform(rng, &[12, 3], -1.0, 1.0);
    let proj123 = uniform(rng, &[12, 3], -1.0, 1.0);
    let proj33 = uniform(rng, &[3, 3], -1.0, 1.0);
    checks.push(check("seg_mean_rows", PRIMITIVE_TOL, &[seg_in.clone()], |t, l| {
        project(t, l[0].seg_mean_rows(&order).expect("rows divide"), &proj123)
    }));
    checks.push(check("seg_reduce_sum", PRIMITIVE_TOL, &[seg_in.clone()], |t, l| {
        project(t, l[0].seg_reduce(&order, Agg::Sum).expect("rows divide"), &proj33)
    }));
    checks.push(check("seg_reduce_mean", PRIMITIVE_TOL, &[seg_in.clone()], |t, l| {
        project(t, l[0].seg_reduce(&order, Agg::Mean).expect("rows divide"), &proj33)
    }));
    let seg_max_in = staggered(rng, 12, 3);
    checks.push(check("seg_reduce_max", PRIMITIVE_TOL, &[seg_max_in], |t, l| {
        project(t, l[0].seg_reduce(&order, Agg::Max).expect("rows divide"), &proj33)
    }));

    let red_in = staggered(rng, 4, 3);
    let proj3 = uniform(rng, &[3], -1.0, 1.0);
    let proj4 = uniform(rng, &[4], -1.0, 1.0);
    checks.push(check("reduce_max_axis0", PRIMITIVE_TOL, &[red_in.clone()], |t, l| {
        project(t, l[0].reduce(Agg::Max, 0).expect("axis in range"), &proj3)
    }));
    checks.push(check("reduce_sum_axis1", PRIMITIVE_TOL, &[red_in.clone()], |t, l| {
        project(t, l[0].reduce(Agg::Sum, 1).expect("axis in range"), &proj4)
    }));
    checks.push(check("reduce_mean_axis0", PRIMITIVE_TOL, &[red_in.clone()], |t, l| {
        project(t, l[0].reduce(Agg::Mean, 0).expect("axis in range"), &proj3)
    }));

    checks.push(check("sum_all", PRIMITIVE_TOL, &[p23.clone()], |_, l| l[0].sum_all()));

    let proj26 = uniform(rng, &[2, 6], -1.0, 1.0);
    checks.push(check("reshape", PRIMITIVE_TOL, &[a34.clone()], |t, l| {
        project(t, l[0].reshape(&[2, 6]).expect("same element count"), &proj26)
    }));

    let cat_a = uniform(rng, &[2, 3], -1.0, 1.0);
    let cat_b = uniform(rng, &[2, 2], -1.0, 1.0);
    let proj25 = uniform(rng, &[2, 5], -1.0, 1.0);
    checks.push(check("concat_axis1", PRIMITIVE_TOL, &[cat_a.clone(), cat_b], |t, l| {
        project(t, t.concat(&[l[0], l[1]], 1).expect("rows agree"), &proj25)
    }));
    let cat_c = uniform(rng, &[3, 3], -1.0, 1.0);
    let proj53b = uniform(rng, &[5, 3], -1.0, 1.0);
    checks.push(check("concat_axis0", PRIMITIVE_TOL, &[cat_a.clone(), cat_c], |t, l| {
        project(t, t.concat(&[l[0], l[1]], 0).expect("cols agree"), &proj53b)
    }));

    // Repeated indices exercise the scatter-add in the backward pass.
    let gather_idx = Rc::new(vec![0u32, 2, 1, 2, 0]);
    let gather_in = uniform(rng, &[4, 3], -1.0, 1.0);
    checks.push(check("gather_rows", PRIMITIVE_TOL, &[gather_in], |t, l| {
        project(t, l[0].gather_rows(&gather_idx).expect("indices in range"), &proj53)
    }));

    let w3 = uniform(rng, &[3], -1.0, 1.0);
    let x0 = uniform(rng, &[2, 3], -1.0, 1.0);
    let x1 = uniform(rng, &[2, 3], -1.0, 1.0);
    let x2 = uniform(rng, &[2, 3], -1.0, 1.0);
    checks.push(check(
        "weighted_sum",
        PRIMITIVE_TOL,
        &[w3, x0.clone(), x1.clone(), x2.clone()],
        |t, l| project(t, t.weighted_sum(l[0], &l[1..]).expect("weights match operands"), &proj23),
    ));
    checks.push(check("sum_n", PRIMITIVE_TOL, &[x0, x1, x2], |t, l| {
        project(t, t.sum_n(l).expect("same shapes"), &proj23)
    }));

    let ce_logits = uniform(rng, &[4, 5], -2.0, 2.0);
    let labels = [1u32, 0, 4, 2];
    checks.push(check("cross_entropy", PRIMITIVE_TOL, &[ce_logits], |_, l| {
        l[0].cross_entropy(&labels).expect("labels in range")
    }));

    // A deep mix of the primitives above; catches interaction bugs that
    // single-op scenarios cannot.
    let chain_x = uniform(rng, &[4, 3], -1.0, 1.0);
    let chain_w = uniform(rng, &[3, 3], -1.0, 1.0);
    let chain_b = uniform(rng, &[3], -1.0, 1.0);
    let chain_theta = uniform(rng, &[2], -1.0, 1.0);
    let chain_idx = Rc::new(vec![0u32, 1, 2, 3, 0, 1, 2, 3, 3, 2, 1, 0]);
    let chain_labels = [2u32, 0, 1];
    checks.push(check(
        "chain",
        PRIMITIVE_TOL,
        &[chain_x, chain_w, chain_b, chain_theta],
        |t, l| {
            let emb = l[0].matmul(l[1]).expect("inner dims agree");
            let emb = emb.bias_add(l[2]).expect("bias fits").relu();
            let rows = emb.gather_rows(&chain_idx).expect("indices in range");
            let centered = rows.sub(rows.seg_mean_rows(&order).expect("rows divide")).expect("same shape");
            let norms = centered.row_norm_bcast().expect("rank 2");
            let weights = l[3].softmax().expect("rank 1");
            let mixed = t
                .weighted_sum(weights, &[centered, norms])
                .expect("weights match operands");
            let pooled = mixed.seg_reduce(&order, Agg::Mean).expect("rows divide");
            pooled.cross_entropy(&chain_labels).expect("labels in range")
        },
    ));

    checks
}

fn l2scalar<'t>(_tape: &'t Tape, v: Tensor<'t>) -> Tensor<'t> {
    v.l2norm().expect("rank 1")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn central_diff_matches_analytic_square() {
        let g = central_diff(|x| x[0] * x[0] + 3.0 * x[1], &[2.0, -1.0], 1e-5);
        assert!((g[0] - 4.0).abs() < 1e-9);
        assert!((g[1] - 3.0).abs() < 1e-9);
    }

    #[test]
    fn rel_err_floors_denominator_at_one() {
        // |2e-7 - 1e-7| / 1.0, not / 2e-7.
        let e = max_rel_err(&[2e-7], &[1e-7]);
        assert!((e - 1e-7).abs() < 1e-20);
        let big = max_rel_err(&[2.0], &[1.0]);
        assert!((big - 0.5).abs() < 1e-15);
    }

    #[test]
    fn every_primitive_matches_finite_differences() {
        for c in check_primitives(7) {
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
    fn primitive_errors_are_reported_per_op() {
        let checks = check_primitives(11);
        assert!(checks.len() >= 20, "expected every primitive covered, got {}", checks.len());
        let names: Vec<_> = checks.iter().map(|c| c.name).collect();
        for expected in ["matmul", "softmax", "seg_reduce_max", "cross_entropy", "chain"] {
            assert!(names.contains(&expected), "missing scenario {expected}");
        }
    }
}
