//! Fixtures shared by the benchmarks.

use mlpmaps::diffkernel::Real;
use mlpmaps::encodings::{dir_encode, POINT_FEATURES};
use mlpmaps::mlpmaps::{Head, MlpMapSet, PointBatch};
use rand::Rng;

/// Map set at the default resolutions with uniform random weights.
pub fn random_maps<R: Real>(rng: &mut impl Rng) -> MlpMapSet<R> {
    let mut set = MlpMapSet::zeros(0, 256, 16, 2);
    for head in [Head::Density, Head::Color] {
        for map in set.maps_mut(head) {
            map.params_mut().iter_mut().for_each(|v| *v = R::lit(rng.gen_range(-0.3..0.3)));
        }
    }
    set
}

pub struct Points<R> {
    pub batch: PointBatch<R>,
    pub features: Vec<R>,
    pub directions: Vec<R>,
}

/// Uniform points in the unit cube with random features and directions.
pub fn random_points<R: Real>(rng: &mut impl Rng, n: usize) -> Points<R> {
    let positions: Vec<[R; 3]> = (0..n).map(|_| [R::lit(rng.gen()), R::lit(rng.gen()), R::lit(rng.gen())]).collect();
    let dirs: Vec<[R; 3]> = (0..n)
        .map(|_| {
            let v: [f64; 3] = [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)];
            let l = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt().max(1e-3);
            [R::lit(v[0] / l), R::lit(v[1] / l), R::lit(v[2] / l)]
        })
        .collect();
    let features = (0..n * POINT_FEATURES).map(|_| R::lit(rng.gen_range(-1.0..1.0))).collect();
    let directions = dirs.iter().flat_map(|&d| dir_encode(d)).collect();
    Points { batch: PointBatch::new(positions, dirs, R::zero()).expect("matching lengths"), features, directions }
}
