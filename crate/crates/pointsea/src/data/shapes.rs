//! Surface samplers for the five shape classes.  Each draws uniformly on
//! the surface; [`normalize`] then centers on the centroid and scales the
//! farthest point to radius 1.

use std::f64::consts::TAU;
use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Shape {
    Sphere,
    Cube,
    Cylinder,
    Torus,
    Cone,
}

impl Shape {
    pub const ALL: [Shape; 5] = [Shape::Sphere, Shape::Cube, Shape::Cylinder, Shape::Torus, Shape::Cone];

    pub fn name(self) -> &'static str {
        match self {
            Shape::Sphere => "sphere",
            Shape::Cube => "cube",
            Shape::Cylinder => "cylinder",
            Shape::Torus => "torus",
            Shape::Cone => "cone",
        }
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Shape {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Shape::ALL
            .into_iter()
            .find(|sh| sh.name() == s)
            .ok_or_else(|| format!("unknown shape class {s:?}"))
    }
}

/// Cylinder radius and half-height.
const CYL_R: f64 = 0.6;
const CYL_H: f64 = 1.0;
/// Torus major and minor radii.
const TOR_R: f64 = 0.7;
const TOR_TUBE: f64 = 0.3;
/// Cone base radius; apex at z=1, base at z=-1.
const CONE_R: f64 = 1.0;

pub(super) fn sample_shape(shape: Shape, rng: &mut ChaCha8Rng, n: usize) -> Vec<[f64; 3]> {
    match shape {
        Shape::Sphere => sphere(rng, n),
        Shape::Cube => (0..n).map(|_| cube_point(rng)).collect(),
        Shape::Cylinder => (0..n).map(|_| cylinder_point(rng)).collect(),
        Shape::Torus => (0..n).map(|_| torus_point(rng)).collect(),
        Shape::Cone => (0..n).map(|_| cone_point(rng)).collect(),
    }
}

/// Subtract the centroid, then scale the maximum radius to 1.
pub(super) fn normalize(points: &mut [[f64; 3]]) {
    let n = points.len() as f64;
    let mut c = [0.0; 3];
    for p in points.iter() {
        for a in 0..3 {
            c[a] += p[a];
        }
    }
    for a in 0..3 {
        c[a] /= n;
    }
    for p in points.iter_mut() {
        for a in 0..3 {
            p[a] -= c[a];
        }
    }
    let mut r_max: f64 = 0.0;
    for p in points.iter() {
        r_max = r_max.max((p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt());
    }
    if r_max > 0.0 {
        for p in points.iter_mut() {
            for a in 0..3 {
                p[a] /= r_max;
            }
        }
    }
}

fn unit_dir(rng: &mut ChaCha8Rng) -> [f64; 3] {
    loop {
        let x: f64 = rng.sample(StandardNormal);
        let y: f64 = rng.sample(StandardNormal);
        let z: f64 = rng.sample(StandardNormal);
        let n2 = x * x + y * y + z * z;
        if n2 > 1e-24 {
            let n = n2.sqrt();
            return [x / n, y / n, z / n];
        }
    }
}

/// Uniform unit-sphere sampling in antithetic pairs (`p`, `-p`), so the
/// point sum cancels exactly and noiseless spheres stay exactly unit radius
/// after centroid subtraction.  Odd counts start with an exactly-cancelling
/// equilateral triple.
fn sphere(rng: &mut ChaCha8Rng, n: usize) -> Vec<[f64; 3]> {
    let mut pts = Vec::with_capacity(n);
    if n % 2 == 1 {
        let u = unit_dir(rng);
        let v = orthonormal_to(rng, u);
        let h = 3f64.sqrt() / 2.0;
        pts.push(u);
        pts.push([-u[0] / 2.0 + h * v[0], -u[1] / 2.0 + h * v[1], -u[2] / 2.0 + h * v[2]]);
        pts.push([-u[0] / 2.0 - h * v[0], -u[1] / 2.0 - h * v[1], -u[2] / 2.0 - h * v[2]]);
    }
    while pts.len() < n {
        let p = unit_dir(rng);
        pts.push(p);
        pts.push([-p[0], -p[1], -p[2]]);
    }
    pts
}

fn orthonormal_to(rng: &mut ChaCha8Rng, u: [f64; 3]) -> [f64; 3] {
    loop {
        let d = unit_dir(rng);
        let dot = d[0] * u[0] + d[1] * u[1] + d[2] * u[2];
        let w = [d[0] - dot * u[0], d[1] - dot * u[1], d[2] - dot * u[2]];
        let n = (w[0] * w[0] + w[1] * w[1] + w[2] * w[2]).sqrt();
        if n > 1e-6 {
            return [w[0] / n, w[1] / n, w[2] / n];
        }
    }
}

fn cube_point(rng: &mut ChaCha8Rng) -> [f64; 3] {
    let axis = rng.gen_range(0..3usize);
    let side = if rng.gen::<bool>() { 1.0 } else { -1.0 };
    let a = rng.gen_range(-1.0..1.0);
    let b = rng.gen_range(-1.0..1.0);
    let mut p = [0.0; 3];
    p[axis] = side;
    p[(axis + 1) % 3] = a;
    p[(axis + 2) % 3] = b;
    p
}

fn cylinder_point(rng: &mut ChaCha8Rng) -> [f64; 3] {
    let side_area = TAU * CYL_R * 2.0 * CYL_H;
    let cap_area = std::f64::consts::PI * CYL_R * CYL_R;
    let t = rng.gen_range(0.0..side_area + 2.0 * cap_area);
    if t < side_area {
        let theta = rng.gen_range(0.0..TAU);
        let z = rng.gen_range(-CYL_H..CYL_H);
        [CYL_R * theta.cos(), CYL_R * theta.sin(), z]
    } else {
        let z = if t < side_area + cap_area { CYL_H } else { -CYL_H };
        let r = CYL_R * rng.gen::<f64>().sqrt();
        let theta = rng.gen_range(0.0..TAU);
        [r * theta.cos(), r * theta.sin(), z]
    }
}

/// Rejection on the tube angle keeps the surface measure uniform: the area
/// element scales with R + r·cos φ.
fn torus_point(rng: &mut ChaCha8Rng) -> [f64; 3] {
    let phi = loop {
        let phi = rng.gen_range(0.0..TAU);
        let accept = (TOR_R + TOR_TUBE * phi.cos()) / (TOR_R + TOR_TUBE);
        if rng.gen::<f64>() < accept {
            break phi;
        }
    };
    let theta = rng.gen_range(0.0..TAU);
    let ring = TOR_R + TOR_TUBE * phi.cos();
    [ring * theta.cos(), ring * theta.sin(), TOR_TUBE * phi.sin()]
}

fn cone_point(rng: &mut ChaCha8Rng) -> [f64; 3] {
    let slant = (CONE_R * CONE_R + 4.0).sqrt();
    let lateral_area = std::f64::consts::PI * CONE_R * slant;
    let base_area = std::f64::consts::PI * CONE_R * CONE_R;
    let t = rng.gen_range(0.0..lateral_area + base_area);
    let psi = rng.gen_range(0.0..TAU);
    if t < lateral_area {
        // Area grows linearly with distance from the apex, hence sqrt.
        let u = rng.gen::<f64>().sqrt();
        [u * CONE_R * psi.cos(), u * CONE_R * psi.sin(), 1.0 - 2.0 * u]
    } else {
        let r = CONE_R * rng.gen::<f64>().sqrt();
        [r * psi.cos(), r * psi.sin(), -1.0]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_chacha::rand_core::SeedableRng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn shape_names_round_trip() {
        for s in Shape::ALL {
            assert_eq!(s.name().parse::<Shape>().unwrap(), s);
        }
        assert!("pyramid".parse::<Shape>().is_err());
    }

    #[test]
    fn noiseless_sphere_is_exactly_unit_after_normalize() {
        for n in [6usize, 7, 32, 33] {
            let mut pts = sample_shape(Shape::Sphere, &mut rng(1), n);
            normalize(&mut pts);
            for p in &pts {
                let r = (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt();
                assert!((r - 1.0).abs() <= 1e-9, "n={n} radius {r}");
            }
        }
    }

    #[test]
    fn samplers_emit_requested_counts_deterministically() {
        for s in Shape::ALL {
            let a = sample_shape(s, &mut rng(9), 25);
            let b = sample_shape(s, &mut rng(9), 25);
            assert_eq!(a.len(), 25);
            assert_eq!(a, b, "{s} not deterministic");
        }
    }

    #[test]
    fn raw_samples_lie_on_their_surfaces() {
        let mut r = rng(3);
        for p in sample_shape(Shape::Sphere, &mut r, 40) {
            let d = (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt();
            assert!((d - 1.0).abs() < 1e-12);
        }
        for p in sample_shape(Shape::Cube, &mut r, 40) {
            let m = p.iter().fold(0f64, |m, &c| m.max(c.abs()));
            assert!((m - 1.0).abs() < 1e-12);
            assert!(p.iter().all(|&c| c.abs() <= 1.0 + 1e-12));
        }
        for p in sample_shape(Shape::Torus, &mut r, 40) {
            let ring = (p[0] * p[0] + p[1] * p[1]).sqrt() - TOR_R;
            let d = (ring * ring + p[2] * p[2]).sqrt();
            assert!((d - TOR_TUBE).abs() < 1e-12);
        }
        for p in sample_shape(Shape::Cylinder, &mut r, 40) {
            let rad = (p[0] * p[0] + p[1] * p[1]).sqrt();
            let on_side = (rad - CYL_R).abs() < 1e-12;
            let on_cap = (p[2].abs() - CYL_H).abs() < 1e-12 && rad <= CYL_R + 1e-12;
            assert!(on_side || on_cap);
        }
        for p in sample_shape(Shape::Cone, &mut r, 40) {
            let rad = (p[0] * p[0] + p[1] * p[1]).sqrt();
            let on_base = (p[2] + 1.0).abs() < 1e-12 && rad <= CONE_R + 1e-12;
            // Lateral: radius grows linearly from apex (z=1) to rim (z=-1).
            let u = (1.0 - p[2]) / 2.0;
            let on_side = (rad - u * CONE_R).abs() < 1e-12;
            assert!(on_base || on_side);
        }
    }

    #[test]
    fn normalize_centers_and_bounds() {
        let mut r = rng(5);
        for s in Shape::ALL {
            let mut pts = sample_shape(s, &mut r, 51);
            normalize(&mut pts);
            for a in 0..3 {
                let c: f64 = pts.iter().map(|p| p[a]).sum::<f64>() / 51.0;
                assert!(c.abs() <= 1e-9);
            }
            let r_max = pts
                .iter()
                .map(|p| (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt())
                .fold(0f64, f64::max);
            assert!(r_max <= 1.0 + 1e-9);
            assert!(r_max >= 1.0 - 1e-9, "scaling should reach the unit shell");
        }
    }
}
