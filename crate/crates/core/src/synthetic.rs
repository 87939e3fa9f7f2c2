//! Generated fixtures: separable per-axis clusters and cache request traces.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::dataset::{Axis, MbtiLabel};
use crate::embedder::Embedding;
use crate::error::{Error, Result};
use crate::features::{BatchInput, UserBatches};
use crate::linalg::{axpy, dot, norm};

#[derive(Clone, Debug, PartialEq)]
pub struct ClusterSpec {
    pub users: usize,
    pub dim: usize,
    pub batches_per_user: usize,
    /// Distance between the two pole means of each axis, in noise std units.
    pub separation: f64,
    pub seed: u64,
}

fn gaussian(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    (0..dim).map(|_| rng.sample(StandardNormal)).collect()
}

/// `count` orthonormal directions by Gram-Schmidt on Gaussian draws.
pub fn orthonormal_directions(dim: usize, count: usize, rng: &mut ChaCha8Rng) -> Result<Vec<Vec<f64>>> {
    if count > dim {
        return Err(Error::Config(format!("cannot fit {count} orthogonal directions in dimension {dim}")));
    }
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(count);
    while basis.len() < count {
        let mut v = gaussian(rng, dim);
        for b in &basis {
            let c = dot(&v, b);
            axpy(-c, b, &mut v);
        }
        let n = norm(&v);
        if n > 1e-6 {
            v.iter_mut().for_each(|x| *x /= n);
            basis.push(v);
        }
    }
    Ok(basis)
}

/// Users with labels uniform over the 16 types. Each batch vector is
/// `Σ_axis ±(separation/2)·u_axis + N(0, I)`, with the sign set by the pole.
pub fn generate_clusters(spec: &ClusterSpec) -> Result<Vec<UserBatches>> {
    if spec.users == 0 || spec.batches_per_user == 0 {
        return Err(Error::Config("users and batches_per_user must be at least 1".into()));
    }
    if !spec.separation.is_finite() {
        return Err(Error::NonFinite("separation".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let dirs = orthonormal_directions(spec.dim, 4, &mut rng)?;
    let half = spec.separation / 2.0;
    let mut users = Vec::with_capacity(spec.users);
    for u in 0..spec.users {
        let label = MbtiLabel::from_type_index(rng.gen_range(0..16))?;
        let mut center = vec![0.0; spec.dim];
        for axis in Axis::ALL {
            let sign = if label.pole(axis) == 1 { 1.0 } else { -1.0 };
            axpy(sign * half, &dirs[axis.index()], &mut center);
        }
        let batches = (0..spec.batches_per_user)
            .map(|_| {
                let mut v = gaussian(&mut rng, spec.dim);
                axpy(1.0, &center, &mut v);
                Embedding::new(v).map(BatchInput::vector)
            })
            .collect::<Result<Vec<_>>>()?;
        users.push(UserBatches {
            user_id: format!("synthetic-{u:05}"),
            label,
            batches,
        });
    }
    Ok(users)
}

/// Request stream over a pool of `distinct` base vectors. Each request picks
/// a base uniformly; with probability `exact` it is the base itself,
/// otherwise the base plus Gaussian jitter of scale `jitter`.
#[derive(Clone, Debug, PartialEq)]
pub struct TraceSpec {
    pub distinct: usize,
    pub length: usize,
    pub dim: usize,
    pub exact: f64,
    pub jitter: f64,
    pub seed: u64,
}

impl Default for TraceSpec {
    fn default() -> Self {
        TraceSpec {
            distinct: 200,
            length: 5000,
            dim: 64,
            exact: 0.5,
            jitter: 0.05,
            seed: 0,
        }
    }
}

pub fn generate_trace(spec: &TraceSpec) -> Result<Vec<BatchInput>> {
    if spec.distinct == 0 || spec.dim == 0 {
        return Err(Error::Config("trace needs at least one base vector and dimension".into()));
    }
    if !(0.0..=1.0).contains(&spec.exact) || !(spec.jitter >= 0.0) {
        return Err(Error::Config("exact must be in [0, 1] and jitter non-negative".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let bases: Vec<Vec<f64>> = (0..spec.distinct).map(|_| gaussian(&mut rng, spec.dim)).collect();
    (0..spec.length)
        .map(|_| {
            let base = &bases[rng.gen_range(0..spec.distinct)];
            let v = if rng.gen_bool(spec.exact) {
                base.clone()
            } else {
                let mut v = gaussian(&mut rng, spec.dim);
                v.iter_mut().zip(base).for_each(|(x, b)| *x = b + spec.jitter * *x);
                v
            };
            Embedding::new(v).map(BatchInput::vector)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::Payload;

    #[test]
    fn directions_are_orthonormal() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let d = orthonormal_directions(10, 4, &mut rng).unwrap();
        for i in 0..4 {
            for j in 0..4 {
                let want = if i == j { 1.0 } else { 0.0 };
                assert!((dot(&d[i], &d[j]) - want).abs() < 1e-12);
            }
        }
        assert!(orthonormal_directions(3, 4, &mut rng).is_err());
    }

    #[test]
    fn clusters_separate_along_each_axis() {
        let spec = ClusterSpec {
            users: 200,
            dim: 16,
            batches_per_user: 2,
            separation: 4.0,
            seed: 9,
        };
        let users = generate_clusters(&spec).unwrap();
        assert_eq!(users, generate_clusters(&spec).unwrap());
        assert_eq!(users.len(), 200);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let dirs = orthonormal_directions(16, 4, &mut rng).unwrap();
        for axis in Axis::ALL {
            let (mut s, mut n) = ([0.0; 2], [0usize; 2]);
            for u in &users {
                for b in &u.batches {
                    let Payload::Vector(v) = &b.payload else { panic!() };
                    let p = u.label.pole(axis);
                    s[p] += dot(v.as_slice(), &dirs[axis.index()]);
                    n[p] += 1;
                }
            }
            let gap = s[1] / n[1] as f64 - s[0] / n[0] as f64;
            assert!((gap - 4.0).abs() < 0.5, "{axis:?}: {gap}");
        }
    }

    #[test]
    fn trace_is_deterministic_and_repeats() {
        let spec = TraceSpec {
            distinct: 5,
            length: 100,
            dim: 4,
            exact: 1.0,
            ..Default::default()
        };
        let t = generate_trace(&spec).unwrap();
        assert_eq!(t, generate_trace(&spec).unwrap());
        let keys: std::collections::BTreeSet<u64> = t.iter().map(|b| b.key).collect();
        assert!(keys.len() <= 5);
    }
}
