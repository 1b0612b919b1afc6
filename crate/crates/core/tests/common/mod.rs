//! Independent reference implementations shared by the integration tests.
#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub fn benchmark() -> (DMatrix<f64>, DMatrix<f64>) {
    (DMatrix::from_row_slice(2, 2, &[0.5, 1.0, 1.5, 0.3]), DMatrix::from_row_slice(2, 1, &[1.0, 0.0]))
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn gaussian_vec(rng: &mut ChaCha8Rng, d: usize) -> DVector<f64> {
    DVector::from_fn(d, |_, _| rng.sample::<f64, _>(StandardNormal))
}

/// Cyclic Jacobi eigenvalue iteration; returns ascending eigenvalues and the
/// matching orthonormal eigenvectors (columns).
pub fn jacobi_eigen(m: &DMatrix<f64>) -> (Vec<f64>, DMatrix<f64>) {
    let n = m.nrows();
    let mut a = m.clone();
    let mut v = DMatrix::<f64>::identity(n, n);
    for _sweep in 0..100 {
        let off: f64 = (0..n).flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j))).map(|(i, j)| a[(i, j)].powi(2)).sum();
        let scale: f64 = a.iter().map(|x| x * x).sum();
        if off <= 1e-30 * scale.max(f64::MIN_POSITIVE) {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                if a[(p, q)] == 0.0 {
                    continue;
                }
                let theta = (a[(q, q)] - a[(p, p)]) / (2.0 * a[(p, q)]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = a[(k, p)];
                    let akq = a[(k, q)];
                    a[(k, p)] = c * akp - s * akq;
                    a[(k, q)] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[(p, k)];
                    let aqk = a[(q, k)];
                    a[(p, k)] = c * apk - s * aqk;
                    a[(q, k)] = s * apk + c * aqk;
                }
                for k in 0..n {
                    let vkp = v[(k, p)];
                    let vkq = v[(k, q)];
                    v[(k, p)] = c * vkp - s * vkq;
                    v[(k, q)] = s * vkp + c * vkq;
                }
            }
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| a[(i, i)].partial_cmp(&a[(j, j)]).unwrap());
    let values = order.iter().map(|&i| a[(i, i)]).collect();
    let vectors = DMatrix::from_fn(n, n, |r, c| v[(r, order[c])]);
    (values, vectors)
}

/// Random SPD matrix `Q diag(λ) Qᵀ` with eigenvalues log-uniform in `[1, cond]`.
pub fn random_spd(rng: &mut ChaCha8Rng, d: usize, cond: f64) -> DMatrix<f64> {
    let g = DMatrix::from_fn(d, d, |_, _| rng.sample::<f64, _>(StandardNormal));
    let q = g.qr().q();
    let mut lambdas: Vec<f64> = (0..d).map(|_| cond.powf(rng.random::<f64>())).collect();
    lambdas[0] = 1.0;
    if d > 1 {
        lambdas[d - 1] = cond;
    }
    let mut m = &q * DMatrix::from_diagonal(&DVector::from_vec(lambdas)) * q.transpose();
    let mt = m.transpose();
    m = (m + mt) * 0.5;
    m
}

/// Weighted-ball projection by bisection on the multiplier, using the
/// Jacobi eigensolver above.
pub fn projection_oracle(m: &DMatrix<f64>, x: &DVector<f64>, radius: f64) -> DVector<f64> {
    if x.norm() <= radius {
        return x.clone();
    }
    let (vals, vecs) = jacobi_eigen(m);
    let c = vecs.transpose() * x;
    let omega_norm = |l: f64| {
        vals.iter().zip(c.iter()).map(|(&e, &ci)| (e * ci / (e + l)).powi(2)).sum::<f64>().sqrt()
    };
    let (mut lo, mut hi) = (0.0_f64, 1.0_f64);
    while omega_norm(hi) > radius {
        hi *= 2.0;
    }
    for _ in 0..400 {
        let mid = 0.5 * (lo + hi);
        if omega_norm(mid) > radius {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let l = hi;
    let scaled = DVector::from_fn(c.len(), |i, _| vals[i] * c[i] / (vals[i] + l));
    vecs * scaled
}

pub fn weighted_sq(m: &DMatrix<f64>, v: &DVector<f64>) -> f64 {
    v.dot(&(m * v))
}
