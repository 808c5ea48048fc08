//! Direct per-neighborhood implementations of the handcrafted local
//! operators, written as plain scalar loops with no tape or DAG machinery.
//! They exist solely as equivalence oracles for the preset forward path.

use super::{ConvWeights, PresetName};
use crate::data::Neighborhood;
use crate::ea::EAKind;
use crate::tensor::{Agg, Array};

/// Evaluates the published expression for `name` point by point, sharing
/// weights with the operator under test. `features` is `[N, F]`, `coords`
/// is `[N, 3]`; the result is `[N, F']`.
pub fn reference_oracle(
    name: PresetName,
    features: &Array,
    coords: &Array,
    nb: &Neighborhood,
    weights: &ConvWeights,
) -> Result<Array, String> {
    let n = features.shape()[0];
    let f_in = features.shape()[1];
    if coords.shape() != [n, 3] {
        return Err(format!("coords shape {:?} does not match {n} points", coords.shape()));
    }
    if nb.num_points() != n {
        return Err(format!("neighborhood covers {} points, expected {n}", nb.num_points()));
    }
    let (eas, agg) = name.recipe();
    let d = weights.emb.shape()[1];
    let w_mlp = &weights.level_w[0];
    let b_mlp = &weights.level_b[0];
    let f_out = w_mlp.shape()[1];
    if w_mlp.shape()[0] != eas.len() * d {
        return Err(format!(
            "mlp expects {} inputs, preset concatenates {}",
            w_mlp.shape()[0],
            eas.len() * d
        ));
    }

    // Embed every point once: emb[p] = W_emb^T (features[p] ++ coords[p]).
    let embed = |p: usize| -> Vec<f64> {
        let mut row = vec![0.0; d];
        let w = weights.emb.data();
        for (c, r) in row.iter_mut().enumerate() {
            for f in 0..f_in {
                *r += features.data()[p * f_in + f] * w[f * d + c];
            }
            for x in 0..3 {
                *r += coords.data()[p * 3 + x] * w[(f_in + x) * d + c];
            }
        }
        row
    };
    let emb: Vec<Vec<f64>> = (0..n).map(embed).collect();

    let mut out = vec![0.0; n * f_out];
    for i in 0..n {
        let row = nb.row(i);
        let k = row.len();
        let centroid: Vec<f64> = (0..d)
            .map(|c| row.iter().map(|&j| emb[j as usize][c]).sum::<f64>() / k as f64)
            .collect();
        let mut agg_row: Option<Vec<f64>> = None;
        for &j in row {
            let ni = &emb[i];
            let nj = &emb[j as usize];
            let mut z = Vec::with_capacity(eas.len() * d);
            for &ea in eas {
                match ea {
                    EAKind::E1 => z.extend_from_slice(ni),
                    EAKind::E2 => z.extend_from_slice(nj),
                    EAKind::E3 => z.extend((0..d).map(|c| ni[c] - nj[c])),
                    EAKind::E4 => {
                        let dist = (0..d).map(|c| (ni[c] - nj[c]).powi(2)).sum::<f64>().sqrt();
                        z.extend(std::iter::repeat(dist).take(d));
                    }
                    EAKind::E5 => z.extend((0..d).map(|c| ni[c] - centroid[c])),
                }
            }
            let pair: Vec<f64> = (0..f_out)
                .map(|o| {
                    let pre = b_mlp.data()[o]
                        + z.iter().enumerate().map(|(zi, v)| v * w_mlp.data()[zi * f_out + o]).sum::<f64>();
                    pre.max(0.0)
                })
                .collect();
            agg_row = Some(match agg_row {
                None => pair,
                Some(mut acc) => {
                    for (a, p) in acc.iter_mut().zip(&pair) {
                        match agg {
                            Agg::Max => {
                                if *p > *a {
                                    *a = *p;
                                }
                            }
                            Agg::Sum | Agg::Mean => *a += p,
                        }
                    }
                    acc
                }
            });
        }
        let mut acc = agg_row.expect("k >= 1");
        if agg == Agg::Mean {
            for a in acc.iter_mut() {
                *a /= k as f64;
            }
        }
        out[i * f_out..(i + 1) * f_out].copy_from_slice(&acc);
    }
    Array::new(vec![n, f_out], out).map_err(|e| e.to_string())
}
