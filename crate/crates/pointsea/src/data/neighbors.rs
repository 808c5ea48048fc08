//! Exact neighborhood geometry: brute-force k-NN, greedy farthest-point
//! sampling, and the flattened pair indexing used by convolution forward
//! passes.

use std::rc::Rc;

use super::DataError;
use crate::tensor::{Array, SegmentOrder};

/// Row `i` holds the `k` nearest neighbors of point `i` (center excluded),
/// closest first; distance ties break toward the lower index.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Neighborhood {
    pub k: usize,
    indices: Vec<u32>,
}

impl Neighborhood {
    pub fn row(&self, i: usize) -> &[u32] {
        &self.indices[i * self.k..(i + 1) * self.k]
    }

    pub fn num_points(&self) -> usize {
        self.indices.len() / self.k
    }

    /// Reorders each row in place without changing the neighbor sets.
    pub fn shuffle_rows(&mut self, rng: &mut rand_chacha::ChaCha8Rng) {
        use rand::seq::SliceRandom;
        for row in self.indices.chunks_mut(self.k) {
            row.shuffle(rng);
        }
    }
}

fn coords(points: &Array, i: usize) -> [f64; 3] {
    let d = points.data();
    [d[i * 3], d[i * 3 + 1], d[i * 3 + 2]]
}

fn dist2(a: [f64; 3], b: [f64; 3]) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    let dz = a[2] - b[2];
    dx * dx + dy * dy + dz * dz
}

/// Exact Euclidean k-NN by full pairwise comparison.
pub fn knn(points: &Array, k: usize) -> Result<Neighborhood, DataError> {
    let n = point_count(points)?;
    if k == 0 || k >= n {
        return Err(DataError::Geometry {
            op: "knn",
            what: format!("k={k} out of range for {n} points"),
        });
    }
    let mut indices = Vec::with_capacity(n * k);
    let mut cand: Vec<(f64, u32)> = Vec::with_capacity(n - 1);
    for i in 0..n {
        let pi = coords(points, i);
        cand.clear();
        for j in 0..n {
            if j != i {
                cand.push((dist2(pi, coords(points, j)), j as u32));
            }
        }
        cand.sort_unstable_by(|a, b| {
            a.0.partial_cmp(&b.0).expect("finite distances").then(a.1.cmp(&b.1))
        });
        indices.extend(cand[..k].iter().map(|&(_, j)| j));
    }
    Ok(Neighborhood { k, indices })
}

/// Greedy farthest-point sampling in selection order, starting at `start`.
/// Each pick maximizes the distance to the chosen set; ties go to the
/// lowest index.
pub fn fps(points: &Array, m: usize, start: usize) -> Result<Vec<u32>, DataError> {
    let n = point_count(points)?;
    if m == 0 || m > n {
        return Err(DataError::Geometry {
            op: "fps",
            what: format!("m={m} out of range for {n} points"),
        });
    }
    if start >= n {
        return Err(DataError::Geometry {
            op: "fps",
            what: format!("start={start} out of range for {n} points"),
        });
    }
    let mut chosen = Vec::with_capacity(m);
    chosen.push(start as u32);
    let ps = coords(points, start);
    let mut best: Vec<f64> = (0..n).map(|j| dist2(ps, coords(points, j))).collect();
    while chosen.len() < m {
        let mut far = 0usize;
        for j in 1..n {
            if best[j] > best[far] {
                far = j;
            }
        }
        chosen.push(far as u32);
        let pf = coords(points, far);
        for j in 0..n {
            let d = dist2(pf, coords(points, j));
            if d < best[j] {
                best[j] = d;
            }
        }
    }
    Ok(chosen)
}

fn point_count(points: &Array) -> Result<usize, DataError> {
    let s = points.shape();
    if s.len() != 2 || s[1] != 3 || s[0] == 0 {
        return Err(DataError::Geometry {
            op: "points",
            what: format!("expected a nonempty [n, 3] table, got {s:?}"),
        });
    }
    Ok(s[0])
}

/// Flattened `(center, neighbor)` pair rows for a set of centers.
///
/// Block `s` covers rows `s*k .. (s+1)*k` and belongs to `centers[s]`; `ctr`
/// repeats the center id, `nbr` lists its neighbors.  `order` visits each
/// block's rows sorted by neighbor id, making segmented reductions bitwise
/// independent of neighbor-list order.
#[derive(Clone, Debug)]
pub struct PairIndex {
    pub ctr: Rc<Vec<u32>>,
    pub nbr: Rc<Vec<u32>>,
    pub order: Rc<SegmentOrder>,
}

/// Pair rows with every point as its own center.
pub fn all_pairs(nbhd: &Neighborhood) -> PairIndex {
    let centers: Vec<u32> = (0..nbhd.num_points() as u32).collect();
    pair_index(nbhd, &centers)
}

pub fn pair_index(nbhd: &Neighborhood, centers: &[u32]) -> PairIndex {
    let k = nbhd.k;
    let mut ctr = Vec::with_capacity(centers.len() * k);
    let mut nbr = Vec::with_capacity(centers.len() * k);
    let mut order = Vec::with_capacity(centers.len() * k);
    for (s, &c) in centers.iter().enumerate() {
        let row = nbhd.row(c as usize);
        ctr.extend(std::iter::repeat(c).take(k));
        nbr.extend_from_slice(row);
        let mut pos: Vec<u32> = (0..k as u32).collect();
        pos.sort_unstable_by_key(|&t| row[t as usize]);
        order.extend(pos.into_iter().map(|t| (s * k) as u32 + t));
    }
    let order = SegmentOrder::new(centers.len(), k, order).expect("block-local positions");
    PairIndex {
        ctr: Rc::new(ctr),
        nbr: Rc::new(nbr),
        order: Rc::new(order),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn arr(n: usize, data: Vec<f64>) -> Array {
        Array::new(vec![n, 3], data).unwrap()
    }

    fn random_cloud(seed: u64, n: usize) -> Array {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        arr(n, (0..n * 3).map(|_| rng.gen_range(-1.0..1.0)).collect())
    }

    /// Independent selection: repeatedly extract the closest remaining
    /// candidate, scanning rather than sorting.
    fn knn_oracle(points: &Array, k: usize) -> Vec<u32> {
        let n = points.shape()[0];
        let mut out = Vec::new();
        for i in 0..n {
            let mut remaining: Vec<u32> = (0..n as u32).filter(|&j| j as usize != i).collect();
            for _ in 0..k {
                let mut best = 0usize;
                for c in 1..remaining.len() {
                    let db = dist2(coords(points, remaining[best] as usize), coords(points, i));
                    let dc = dist2(coords(points, remaining[c] as usize), coords(points, i));
                    if dc < db || (dc == db && remaining[c] < remaining[best]) {
                        best = c;
                    }
                }
                out.push(remaining.remove(best));
            }
        }
        out
    }

    #[test]
    fn knn_three_collinear_points() {
        let pts = arr(3, vec![0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 3.0, 0.0, 0.0]);
        let nb = knn(&pts, 1).unwrap();
        assert_eq!(nb.row(0), &[1]);
        assert_eq!(nb.row(1), &[0]);
        assert_eq!(nb.row(2), &[1]);
    }

    #[test]
    fn knn_full_rows_cover_all_other_points() {
        let pts = random_cloud(1, 9);
        let nb = knn(&pts, 8).unwrap();
        for i in 0..9 {
            let mut row = nb.row(i).to_vec();
            assert!(!row.contains(&(i as u32)));
            row.sort_unstable();
            let want: Vec<u32> = (0..9u32).filter(|&j| j as usize != i).collect();
            assert_eq!(row, want);
        }
    }

    #[test]
    fn knn_matches_extraction_oracle() {
        for seed in 0..4 {
            let pts = random_cloud(seed, 64);
            let nb = knn(&pts, 7).unwrap();
            let want = knn_oracle(&pts, 7);
            for i in 0..64 {
                assert_eq!(nb.row(i), &want[i * 7..(i + 1) * 7], "seed {seed} row {i}");
            }
        }
    }

    #[test]
    fn knn_breaks_distance_ties_by_lower_index() {
        // Points 1 and 2 are equidistant from point 0.
        let pts = arr(3, vec![0.0, 0.0, 0.0, 1.0, 0.0, 0.0, -1.0, 0.0, 0.0]);
        let nb = knn(&pts, 1).unwrap();
        assert_eq!(nb.row(0), &[1]);
    }

    #[test]
    fn knn_rejects_bad_k() {
        let pts = random_cloud(2, 5);
        assert!(knn(&pts, 0).is_err());
        assert!(knn(&pts, 5).is_err());
    }

    #[test]
    fn fps_collinear_endpoints() {
        let pts = arr(10, (0..10).flat_map(|i| vec![i as f64, 0.0, 0.0]).collect());
        assert_eq!(fps(&pts, 2, 0).unwrap(), vec![0, 9]);
    }

    #[test]
    fn fps_full_selection_is_a_permutation() {
        let pts = random_cloud(3, 17);
        let mut sel = fps(&pts, 17, 0).unwrap();
        sel.sort_unstable();
        assert_eq!(sel, (0..17).collect::<Vec<u32>>());
    }

    #[test]
    fn fps_spreads_better_than_random_subsets() {
        let pts = random_cloud(4, 40);
        let min_pairwise = |sel: &[u32]| -> f64 {
            let mut best = f64::INFINITY;
            for a in 0..sel.len() {
                for b in a + 1..sel.len() {
                    best = best.min(dist2(
                        coords(&pts, sel[a] as usize),
                        coords(&pts, sel[b] as usize),
                    ));
                }
            }
            best
        };
        let fps_spread = min_pairwise(&fps(&pts, 8, 0).unwrap());
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for _ in 0..100 {
            let mut pool: Vec<u32> = (0..40).collect();
            let mut pick = Vec::new();
            for _ in 0..8 {
                pick.push(pool.remove(rng.gen_range(0..pool.len())));
            }
            assert!(fps_spread >= min_pairwise(&pick));
        }
    }

    #[test]
    fn fps_rejects_bad_ranges() {
        let pts = random_cloud(5, 6);
        assert!(fps(&pts, 0, 0).is_err());
        assert!(fps(&pts, 7, 0).is_err());
        assert!(fps(&pts, 2, 6).is_err());
    }

    #[test]
    fn pair_index_blocks_sorted_by_neighbor_id() {
        let pts = random_cloud(6, 12);
        let nb = knn(&pts, 4).unwrap();
        let centers = [3u32, 0, 7];
        let pi = pair_index(&nb, &centers);
        assert_eq!(pi.ctr.len(), 12);
        pi.order.validate().unwrap();
        for (s, &c) in centers.iter().enumerate() {
            let mut sorted = Vec::new();
            for &row in &pi.order.rows[s * 4..(s + 1) * 4] {
                assert_eq!(pi.ctr[row as usize], c);
                sorted.push(pi.nbr[row as usize]);
            }
            for w in sorted.windows(2) {
                assert!(w[0] < w[1], "neighbor visit order not ascending: {sorted:?}");
            }
            let mut row = nb.row(c as usize).to_vec();
            row.sort_unstable();
            assert_eq!(sorted, row);
        }
    }
}
