//! Limited-memory BFGS: curvature-pair storage and the two-loop recursion
//! computing `H_k g` without ever forming an `n x n` matrix.
//!
//! A dense inverse-Hessian builder is included for small dimensions; it
//! exists to certify the two-loop recursion in tests and is capped at
//! `n <= 64`.

use crate::error::{Error, Result};
use crate::qnet::ParamVector;
use crate::vecmath;
use std::collections::VecDeque;

/// Relative curvature threshold: a pair is stored only when
/// `s'y > CURVATURE_EPS * |s| * |y|`, which cautiously preserves positive
/// definiteness of the implied Hessian approximation.
pub const CURVATURE_EPS: f64 = 1e-8;

/// One accepted displacement / gradient-difference pair with its inner
/// product cached.
#[derive(Debug, Clone, PartialEq)]
pub struct CurvaturePair {
    pub s: ParamVector,
    pub y: ParamVector,
    pub sy: f64,
}

/// Bounded deque of the `m` most recent accepted pairs, oldest first.
#[derive(Debug, Clone, PartialEq)]
pub struct LbfgsMemory {
    pairs: VecDeque<CurvaturePair>,
    capacity: usize,
}

impl LbfgsMemory {
    pub fn new(capacity: usize) -> Self {
        assert!(capacity >= 1, "memory capacity must be positive");
        Self {
            pairs: VecDeque::with_capacity(capacity + 1),
            capacity,
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// Pairs in storage order, oldest first.
    pub fn pairs(&self) -> impl Iterator<Item = &CurvaturePair> {
        self.pairs.iter()
    }

    pub fn latest(&self) -> Option<&CurvaturePair> {
        self.pairs.back()
    }

    fn dim(&self) -> Option<usize> {
        self.pairs.front().map(|p| p.s.len())
    }

    fn check_dim(&self, v: &ParamVector) -> Result<()> {
        if let Some(n) = self.dim() {
            if v.len() != n {
                return Err(Error::DimensionMismatch {
                    expected: n,
                    got: v.len(),
                });
            }
        }
        Ok(())
    }

    /// Appends `(s, y)` iff it passes the cautious curvature test,
    /// evicting the oldest pair when over capacity. Returns whether the
    /// pair was accepted; a rejected pair leaves the memory untouched.
    pub fn push_pair(&mut self, s: ParamVector, y: ParamVector) -> Result<bool> {
        if s.len() != y.len() {
            return Err(Error::DimensionMismatch {
                expected: s.len(),
                got: y.len(),
            });
        }
        self.check_dim(&s)?;
        let sy = s.dot(&y);
        if !(sy.is_finite() && s.all_finite() && y.all_finite()) {
            return Err(Error::InvalidInput("non-finite curvature pair".into()));
        }
        if sy <= CURVATURE_EPS * s.norm2() * y.norm2() {
            return Ok(false);
        }
        self.pairs.push_back(CurvaturePair { s, y, sy });
        if self.pairs.len() > self.capacity {
            self.pairs.pop_front();
        }
        Ok(true)
    }

    /// Scaling for the initial matrix `H_0 = gamma * I`, taken from the
    /// most recent pair as `y's / y'y`; 1 for an empty memory.
    pub fn gamma_scaling(&self) -> f64 {
        match self.pairs.back() {
            Some(p) => p.sy / p.y.dot(&p.y),
            None => 1.0,
        }
    }

    /// Two-loop recursion computing `r = H_k g` with `H_0 = gamma * I`,
    /// `gamma = gamma_scaling()`. First loop walks newest to oldest,
    /// second oldest to newest; cost `O(4 m n)`.
    pub fn two_loop(&self, g: &ParamVector) -> Result<ParamVector> {
        self.two_loop_with_gamma(g, self.gamma_scaling())
    }

    pub(crate) fn two_loop_with_gamma(&self, g: &ParamVector, gamma: f64) -> Result<ParamVector> {
        self.check_dim(g)?;
        let mut q = g.as_slice().to_vec();
        let m = self.pairs.len();
        let mut alphas = vec![0.0; m];
        for (i, pair) in self.pairs.iter().enumerate().rev() {
            let alpha = vecmath::dot(&pair.s, &q) / pair.sy;
            vecmath::axpy(&mut q, -alpha, &pair.y);
            alphas[i] = alpha;
        }
        vecmath::scale(&mut q, gamma);
        for (i, pair) in self.pairs.iter().enumerate() {
            let beta = vecmath::dot(&pair.y, &q) / pair.sy;
            vecmath::axpy(&mut q, alphas[i] - beta, &pair.s);
        }
        Ok(ParamVector::from_vec(q))
    }

    /// Quasi-Newton search direction `p = -H_k g`.
    pub fn search_direction(&self, g: &ParamVector) -> Result<ParamVector> {
        let mut r = self.two_loop(g)?;
        vecmath::scale(r.as_mut_slice(), -1.0);
        Ok(r)
    }

    /// Builds `H_k` explicitly by applying the recursive inverse update
    /// once per stored pair (oldest first) starting from `gamma * I`:
    ///
    /// `H <- (I - rho s y') H (I - rho y s') + rho s s'`, `rho = 1/(y's)`.
    ///
    /// Test support only; fails for `n > 64`.
    pub fn dense_inverse_hessian(&self, n: usize) -> Result<Vec<Vec<f64>>> {
        if n > 64 {
            return Err(Error::Unsupported(format!(
                "dense inverse Hessian capped at n = 64, requested {n}"
            )));
        }
        if let Some(d) = self.dim() {
            if d != n {
                return Err(Error::DimensionMismatch { expected: d, got: n });
            }
        }
        let gamma = self.gamma_scaling();
        let mut h = vec![vec![0.0; n]; n];
        for (i, row) in h.iter_mut().enumerate() {
            row[i] = gamma;
        }
        for pair in &self.pairs {
            let rho = 1.0 / pair.sy;
            let s = pair.s.as_slice();
            let y = pair.y.as_slice();
            // v = (I - rho y s'), applied on the right: H v; on the left: v' H
            let mut next = vec![vec![0.0; n]; n];
            // t = H (I - rho y s') = H - rho (H y) s'
            let mut hy = vec![0.0; n];
            for r in 0..n {
                hy[r] = vecmath::dot(&h[r], y);
            }
            let mut t = h.clone();
            for r in 0..n {
                for c in 0..n {
                    t[r][c] -= rho * hy[r] * s[c];
                }
            }
            // next = (I - rho s y') t + rho s s'
            let mut yt = vec![0.0; n];
            for c in 0..n {
                let mut acc = 0.0;
                for r in 0..n {
                    acc += y[r] * t[r][c];
                }
                yt[c] = acc;
            }
            for r in 0..n {
                for c in 0..n {
                    next[r][c] = t[r][c] - rho * s[r] * yt[c] + rho * s[r] * s[c];
                }
            }
            // the update is symmetric in exact arithmetic; project the
            // rounding noise away so downstream checks see a symmetric H
            for r in 0..n {
                for c in 0..r {
                    let avg = 0.5 * (next[r][c] + next[c][r]);
                    next[r][c] = avg;
                    next[c][r] = avg;
                }
            }
            h = next;
        }
        Ok(h)
    }
}

/// Dense matrix-vector product helper for the oracle matrix.
pub fn mat_vec(m: &[Vec<f64>], v: &[f64]) -> Vec<f64> {
    m.iter().map(|row| vecmath::dot(row, v)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn pv(v: &[f64]) -> ParamVector {
        ParamVector::from_vec(v.to_vec())
    }

    fn random_memory(rng: &mut ChaCha8Rng, n: usize, pairs: usize, cap: usize) -> LbfgsMemory {
        let mut mem = LbfgsMemory::new(cap);
        let mut stored = 0;
        while stored < pairs {
            let s: ParamVector = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let y: ParamVector = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
            if mem.push_pair(s, y).unwrap() {
                stored += 1;
            }
        }
        mem
    }

    #[test]
    fn push_accepts_positive_curvature() {
        let mut mem = LbfgsMemory::new(4);
        let e1 = pv(&[1.0, 0.0, 0.0]);
        assert!(mem.push_pair(e1.clone(), e1).unwrap());
        assert_eq!(mem.len(), 1);
    }

    #[test]
    fn push_rejects_negative_curvature_and_leaves_memory_unchanged() {
        let mut mem = LbfgsMemory::new(4);
        let s = pv(&[0.5, -0.25]);
        let y = pv(&[0.5, 0.1]);
        assert!(mem.push_pair(s.clone(), y).unwrap());
        let before = mem.clone();
        let neg_y = pv(&[-0.5, 0.25]);
        assert!(!mem.push_pair(s.clone(), neg_y).unwrap());
        assert_eq!(mem, before);
        // tiny positive s'y relative to norms is also rejected
        let y_orth = pv(&[0.25, 0.5]);
        let sy = s.dot(&y_orth);
        assert!(sy.abs() < 1e-12);
        assert!(!mem.push_pair(s, y_orth).unwrap());
        assert_eq!(mem, before);
    }

    #[test]
    fn eviction_keeps_the_latest_pairs_in_order() {
        let mut mem = LbfgsMemory::new(2);
        for k in 1..=3 {
            let v = pv(&[k as f64, 0.0]);
            assert!(mem.push_pair(v.clone(), v).unwrap());
        }
        let kept: Vec<f64> = mem.pairs().map(|p| p.s[0]).collect();
        assert_eq!(kept, vec![2.0, 3.0]);
    }

    #[test]
    fn push_rejects_dimension_mismatch() {
        let mut mem = LbfgsMemory::new(2);
        assert!(mem
            .push_pair(pv(&[1.0, 0.0]), pv(&[1.0, 0.0, 0.0]))
            .is_err());
        mem.push_pair(pv(&[1.0, 0.0]), pv(&[1.0, 0.0])).unwrap();
        assert!(mem.push_pair(pv(&[1.0]), pv(&[1.0])).is_err());
        assert!(mem.two_loop(&pv(&[1.0, 2.0, 3.0])).is_err());
    }

    #[test]
    fn gamma_of_scaled_pair() {
        let mut mem = LbfgsMemory::new(2);
        let y = pv(&[1.0, 2.0, -1.0]);
        let s = pv(&[2.0, 4.0, -2.0]); // s = 2y
        mem.push_pair(s, y).unwrap();
        assert!((mem.gamma_scaling() - 2.0).abs() < 1e-15);
    }

    #[test]
    fn gamma_empty_memory_is_one() {
        let mem = LbfgsMemory::new(2);
        assert_eq!(mem.gamma_scaling(), 1.0);
    }

    #[test]
    fn gamma_matches_direct_dot_products() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mem = random_memory(&mut rng, 6, 3, 8);
        let p = mem.latest().unwrap();
        let want = vecmath::dot(&p.y, &p.s) / vecmath::dot(&p.y, &p.y);
        let got = mem.gamma_scaling();
        assert!((got - want).abs() <= 1e-15 * want.abs());
    }

    #[test]
    fn two_loop_empty_memory_is_identity() {
        let mem = LbfgsMemory::new(3);
        let g = pv(&[1.0, -2.0, 0.5]);
        let r = mem.two_loop(&g).unwrap();
        assert_eq!(r.as_slice(), g.as_slice());
        // with a custom gamma the empty-memory result is just gamma * g
        let r2 = mem.two_loop_with_gamma(&g, 2.0).unwrap();
        assert_eq!(r2.as_slice(), &[2.0, -4.0, 1.0]);
    }

    #[test]
    fn search_direction_is_negated_two_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mem = random_memory(&mut rng, 5, 3, 8);
        let g: ParamVector = (0..5).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let r = mem.two_loop(&g).unwrap();
        let p = mem.search_direction(&g).unwrap();
        for (a, b) in r.iter().zip(p.iter()) {
            assert_eq!(*a, -*b);
        }
        // descent against the same gradient
        assert!(g.dot(&p) < 0.0);
        // zero gradient maps to the zero vector
        let z = mem.search_direction(&ParamVector::zeros(5)).unwrap();
        assert!(z.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn dense_oracle_empty_memory_is_gamma_identity() {
        let mem = LbfgsMemory::new(2);
        let h = mem.dense_inverse_hessian(3).unwrap();
        for r in 0..3 {
            for c in 0..3 {
                assert_eq!(h[r][c], if r == c { 1.0 } else { 0.0 });
            }
        }
    }

    #[test]
    fn dense_oracle_unit_pair_satisfies_secant() {
        let mut mem = LbfgsMemory::new(2);
        let e1 = pv(&[1.0, 0.0, 0.0]);
        mem.push_pair(e1.clone(), e1.clone()).unwrap();
        let h = mem.dense_inverse_hessian(3).unwrap();
        let he1 = mat_vec(&h, &e1);
        for (a, b) in he1.iter().zip(e1.iter()) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn dense_oracle_rejects_large_n() {
        let mem = LbfgsMemory::new(2);
        assert!(matches!(
            mem.dense_inverse_hessian(65),
            Err(Error::Unsupported(_))
        ));
    }

    #[test]
    fn dense_oracle_is_symmetric_and_positive_definite() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..50 {
            let n = rng.gen_range(2..=10);
            let k = rng.gen_range(1..=5);
            let mem = random_memory(&mut rng, n, k, 8);
            let h = mem.dense_inverse_hessian(n).unwrap();
            for r in 0..n {
                for c in 0..n {
                    assert!((h[r][c] - h[c][r]).abs() <= 1e-12);
                }
            }
            // positive definiteness via a Cholesky certificate
            assert!(cholesky_is_pd(&h), "memory produced a non-PD matrix");
        }
    }

    /// PD certificate: a symmetric matrix is positive definite iff the
    /// Cholesky factorization exists with strictly positive pivots.
    fn cholesky_is_pd(a: &[Vec<f64>]) -> bool {
        let n = a.len();
        let mut l = vec![vec![0.0; n]; n];
        for i in 0..n {
            for j in 0..=i {
                let mut sum = a[i][j];
                for k in 0..j {
                    sum -= l[i][k] * l[j][k];
                }
                if i == j {
                    if sum <= 0.0 || !sum.is_finite() {
                        return false;
                    }
                    l[i][j] = sum.sqrt();
                } else {
                    l[i][j] = sum / l[j][j];
                }
            }
        }
        true
    }

    #[test]
    fn two_loop_matches_dense_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        for _ in 0..200 {
            let n = rng.gen_range(2..=10);
            let k = rng.gen_range(1..=5);
            let mem = random_memory(&mut rng, n, k, 8);
            let g: ParamVector = (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let fast = mem.two_loop(&g).unwrap();
            let h = mem.dense_inverse_hessian(n).unwrap();
            let slow = mat_vec(&h, &g);
            let scale = vecmath::norm2(&slow).max(1e-12);
            for (a, b) in fast.iter().zip(&slow) {
                assert!((a - b).abs() <= 1e-10 * scale, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn secant_property_on_latest_pair() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        for _ in 0..100 {
            let n = rng.gen_range(2..=10);
            let k = rng.gen_range(1..=5);
            let mem = random_memory(&mut rng, n, k, 8);
            let latest = mem.latest().unwrap().clone();
            let r = mem.two_loop(&latest.y).unwrap();
            let scale = latest.s.norm2();
            for (a, b) in r.iter().zip(latest.s.iter()) {
                assert!((a - b).abs() <= 1e-10 * scale);
            }
        }
    }

    /// Gauss-Jordan inverse, test support for the `B s = y` check.
    fn invert(a: &[Vec<f64>]) -> Vec<Vec<f64>> {
        let n = a.len();
        let mut aug: Vec<Vec<f64>> = a
            .iter()
            .enumerate()
            .map(|(i, row)| {
                let mut r = row.clone();
                r.extend((0..n).map(|j| if i == j { 1.0 } else { 0.0 }));
                r
            })
            .collect();
        for col in 0..n {
            let pivot = (col..n)
                .max_by(|&i, &j| aug[i][col].abs().total_cmp(&aug[j][col].abs()))
                .unwrap();
            aug.swap(col, pivot);
            let p = aug[col][col];
            for v in aug[col].iter_mut() {
                *v /= p;
            }
            for row in 0..n {
                if row != col {
                    let f = aug[row][col];
                    for c in 0..2 * n {
                        aug[row][c] -= f * aug[col][c];
                    }
                }
            }
        }
        aug.into_iter().map(|r| r[n..].to_vec()).collect()
    }

    /// Like `random_memory` but only pairs with a healthy angle between
    /// `s` and `y`; explicit inversion amplifies conditioning, so the
    /// barely-accepted pairs the threshold permits are kept out here.
    fn conditioned_memory(rng: &mut ChaCha8Rng, n: usize, pairs: usize, cap: usize) -> LbfgsMemory {
        let mut mem = LbfgsMemory::new(cap);
        let mut stored = 0;
        while stored < pairs {
            let s: ParamVector = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let y: ParamVector = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let cosine = s.dot(&y) / (s.norm2() * y.norm2());
            if cosine > 0.1 && mem.push_pair(s, y).unwrap() {
                stored += 1;
            }
        }
        mem
    }

    #[test]
    fn inverted_oracle_satisfies_the_direct_secant_equation() {
        // B = H^{-1} must map s_latest to y_latest.
        let mut rng = ChaCha8Rng::seed_from_u64(37);
        for _ in 0..50 {
            let n = rng.gen_range(2..=6);
            let k = rng.gen_range(1..=4);
            let mem = conditioned_memory(&mut rng, n, k, 8);
            let h = mem.dense_inverse_hessian(n).unwrap();
            let b = invert(&h);
            let latest = mem.latest().unwrap();
            let bs = mat_vec(&b, &latest.s);
            let scale = latest.y.norm2();
            for (a, want) in bs.iter().zip(latest.y.iter()) {
                assert!((a - want).abs() <= 1e-8 * scale, "{a} vs {want}");
            }
        }
    }

    #[test]
    fn quadratic_form_of_two_loop_is_positive() {
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        for _ in 0..100 {
            let n = rng.gen_range(2..=10);
            let mem = random_memory(&mut rng, n, 3, 8);
            let v: ParamVector = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
            if v.norm2() == 0.0 {
                continue;
            }
            let hv = mem.two_loop(&v).unwrap();
            assert!(v.dot(&hv) > 0.0);
        }
    }
}
