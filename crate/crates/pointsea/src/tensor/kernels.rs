//! Hot inner loops, all on flat row-major slices with fixed iteration order.

/// c = a · b, a is m×k, b is k×n.  Overwrites c.
pub fn mm_nn(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    c.fill(0.0);
    for i in 0..m {
        let c_row = &mut c[i * n..(i + 1) * n];
        for l in 0..k {
            let av = a[i * k + l];
            let b_row = &b[l * n..(l + 1) * n];
            for (cv, &bv) in c_row.iter_mut().zip(b_row) {
                *cv += av * bv;
            }
        }
    }
}

/// da += g · bᵀ, g is m×n, b is k×n, da is m×k.
pub fn mm_nt_add(g: &[f64], b: &[f64], da: &mut [f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(g.len(), m * n);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(da.len(), m * k);
    for i in 0..m {
        let g_row = &g[i * n..(i + 1) * n];
        let da_row = &mut da[i * k..(i + 1) * k];
        for l in 0..k {
            let b_row = &b[l * n..(l + 1) * n];
            let mut s = 0.0;
            for (&gv, &bv) in g_row.iter().zip(b_row) {
                s += gv * bv;
            }
            da_row[l] += s;
        }
    }
}

/// db += aᵀ · g, a is m×k, g is m×n, db is k×n.
pub fn mm_tn_add(a: &[f64], g: &[f64], db: &mut [f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(g.len(), m * n);
    debug_assert_eq!(db.len(), k * n);
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let g_row = &g[i * n..(i + 1) * n];
        for l in 0..k {
            let av = a_row[l];
            let db_row = &mut db[l * n..(l + 1) * n];
            for (dv, &gv) in db_row.iter_mut().zip(g_row) {
                *dv += av * gv;
            }
        }
    }
}

/// y += s * x.
pub fn axpy(y: &mut [f64], s: f64, x: &[f64]) {
    debug_assert_eq!(y.len(), x.len());
    for (yv, &xv) in y.iter_mut().zip(x) {
        *yv += s * xv;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mm_nn_hand_values() {
        // [[1,2],[3,4]] · [[5,6],[7,8]] = [[19,22],[43,50]]
        let a = [1.0, 2.0, 3.0, 4.0];
        let b = [5.0, 6.0, 7.0, 8.0];
        let mut c = [0.0; 4];
        mm_nn(&a, &b, &mut c, 2, 2, 2);
        assert_eq!(c, [19.0, 22.0, 43.0, 50.0]);
    }

    #[test]
    fn transposed_variants_agree_with_explicit_transpose() {
        let m = 3;
        let k = 4;
        let n = 2;
        let a: Vec<f64> = (0..m * k).map(|i| i as f64 * 0.3 - 1.0).collect();
        let g: Vec<f64> = (0..m * n).map(|i| (i as f64).sin()).collect();
        let b: Vec<f64> = (0..k * n).map(|i| (i as f64).cos()).collect();

        let mut da = vec![0.0; m * k];
        mm_nt_add(&g, &b, &mut da, m, k, n);
        let mut bt = vec![0.0; n * k];
        for r in 0..k {
            for c in 0..n {
                bt[c * k + r] = b[r * n + c];
            }
        }
        let mut want = vec![0.0; m * k];
        mm_nn(&g, &bt, &mut want, m, n, k);
        assert_eq!(da, want);

        let mut db = vec![0.0; k * n];
        mm_tn_add(&a, &g, &mut db, m, k, n);
        let mut at = vec![0.0; k * m];
        for r in 0..m {
            for c in 0..k {
                at[c * m + r] = a[r * k + c];
            }
        }
        let mut want = vec![0.0; k * n];
        mm_nn(&at, &g, &mut want, k, m, n);
        assert_eq!(db, want);
    }
}
