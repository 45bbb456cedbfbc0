//! Knowledge metabolism: a LinUCB contextual bandit over knowledge pieces.
//!
//! Every knowledge triple is an arm with design matrix `A` (starting at the
//! identity) and response vector `b` (starting at zero). For a context
//! feature `v` the arm scores
//!
//! ```text
//! p = θᵀv + α·sqrt(vᵀA⁻¹v),   θ = A⁻¹b
//! ```
//!
//! and after a payoff `r` on feature `x` it absorbs `A += x xᵀ`, `b += r x`.
//! `A⁻¹` is kept alongside `A` and refreshed with the Sherman–Morrison
//! identity so scoring never inverts a matrix.
//!
//! The scalar credibility score used for retrieval gating moves by `η·r`
//! per update and is clamped to `[0, 1]`.

use crate::embedding::{dot, Vector};
use crate::error::{Error, Result};

/// Dense square matrix, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    n: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn identity(n: usize) -> Self {
        let mut data = vec![0.0; n * n];
        for i in 0..n {
            data[i * n + i] = 1.0;
        }
        Self { n, data }
    }

    pub fn from_rows(rows: Vec<Vec<f64>>) -> Result<Self> {
        let n = rows.len();
        if n == 0 || rows.iter().any(|r| r.len() != n) {
            return Err(Error::Domain("matrix must be square and nonempty".into()));
        }
        let data: Vec<f64> = rows.into_iter().flatten().collect();
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Domain("matrix has non-finite entries".into()));
        }
        Ok(Self { n, data })
    }

    pub fn to_rows(&self) -> Vec<Vec<f64>> {
        self.data.chunks(self.n).map(<[f64]>::to_vec).collect()
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.n + j]
    }

    pub fn mul_vec(&self, x: &[f64]) -> Vec<f64> {
        self.data.chunks(self.n).map(|row| dot(row, x)).collect()
    }

    /// `xᵀ M x`
    pub fn quad(&self, x: &[f64]) -> f64 {
        dot(x, &self.mul_vec(x))
    }

    /// `M += scale · x xᵀ`
    pub fn add_outer(&mut self, x: &[f64], scale: f64) {
        for i in 0..self.n {
            for j in 0..self.n {
                self.data[i * self.n + j] += scale * x[i] * x[j];
            }
        }
    }

    /// Inverse of a symmetric positive definite matrix via Cholesky.
    pub fn spd_inverse(&self) -> Result<Matrix> {
        let n = self.n;
        let mut l = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..=i {
                let mut s = self.get(i, j);
                for k in 0..j {
                    s -= l[i * n + k] * l[j * n + k];
                }
                if i == j {
                    if s <= 0.0 || !s.is_finite() {
                        return Err(Error::Invariant(
                            "design matrix is not positive definite".into(),
                        ));
                    }
                    l[i * n + i] = s.sqrt();
                } else {
                    l[i * n + j] = s / l[j * n + j];
                }
            }
        }
        // columns of L⁻ᵀL⁻¹ by forward then backward substitution
        let mut inv = vec![0.0; n * n];
        for col in 0..n {
            let mut y = vec![0.0; n];
            for i in 0..n {
                let mut s = if i == col { 1.0 } else { 0.0 };
                for k in 0..i {
                    s -= l[i * n + k] * y[k];
                }
                y[i] = s / l[i * n + i];
            }
            let mut x = vec![0.0; n];
            for i in (0..n).rev() {
                let mut s = y[i];
                for k in i + 1..n {
                    s -= l[k * n + i] * x[k];
                }
                x[i] = s / l[i * n + i];
            }
            for i in 0..n {
                inv[i * n + col] = x[i];
            }
        }
        Ok(Matrix { n, data: inv })
    }
}

/// Bandit state carried by every knowledge triple.
#[derive(Debug, Clone)]
pub struct CredibilityState {
    a: Matrix,
    a_inv: Matrix,
    b: Vec<f64>,
    score: f64,
    selections: u64,
}

impl PartialEq for CredibilityState {
    // the inverse is derived state
    fn eq(&self, other: &Self) -> bool {
        self.a == other.a
            && self.b == other.b
            && self.score == other.score
            && self.selections == other.selections
    }
}

impl CredibilityState {
    pub const INITIAL_SCORE: f64 = 0.5;

    /// Cold-start arm: `A = I`, `b = 0`, score 0.5.
    pub fn fresh(d_feat: usize) -> Self {
        Self {
            a: Matrix::identity(d_feat),
            a_inv: Matrix::identity(d_feat),
            b: vec![0.0; d_feat],
            score: Self::INITIAL_SCORE,
            selections: 0,
        }
    }

    /// Rebuilds an arm from persisted parts, recomputing `A⁻¹`.
    pub fn from_parts(a: Matrix, b: Vec<f64>, score: f64, selections: u64) -> Result<Self> {
        if b.len() != a.dim() {
            return Err(Error::Domain(format!(
                "b has length {}, A is {}x{}",
                b.len(),
                a.dim(),
                a.dim()
            )));
        }
        if !score.is_finite() || !(0.0..=1.0).contains(&score) {
            return Err(Error::Domain(format!("score {score} outside [0, 1]")));
        }
        if b.iter().any(|v| !v.is_finite()) {
            return Err(Error::Domain("b has non-finite entries".into()));
        }
        let a_inv = a.spd_inverse()?;
        Ok(Self {
            a,
            a_inv,
            b,
            score,
            selections,
        })
    }

    pub fn a(&self) -> &Matrix {
        &self.a
    }

    pub fn a_inv(&self) -> &Matrix {
        &self.a_inv
    }

    pub fn b(&self) -> &[f64] {
        &self.b
    }

    pub fn score(&self) -> f64 {
        self.score
    }

    pub fn selections(&self) -> u64 {
        self.selections
    }

    pub fn d_feat(&self) -> usize {
        self.a.dim()
    }

    /// `θ = A⁻¹b`
    pub fn theta(&self) -> Vec<f64> {
        self.a_inv.mul_vec(&self.b)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BanditConfig {
    pub alpha: f64,
    pub eta: f64,
}

impl Default for BanditConfig {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            eta: 0.1,
        }
    }
}

impl BanditConfig {
    pub fn new(alpha: f64, eta: f64) -> Result<Self> {
        if !(alpha > 0.0) || !alpha.is_finite() {
            return Err(Error::Domain("alpha must be positive".into()));
        }
        Ok(Self { alpha, eta })
    }
}

/// Feature vector combining a context embedding and a knowledge key.
#[derive(Debug, Clone, PartialEq)]
pub struct ContextFeature(Vector);

impl ContextFeature {
    /// Wraps an arbitrary vector, rescaling it into the unit ball.
    pub fn from_vector(v: Vector) -> Self {
        let n = v.norm();
        if n > 1.0 {
            Self(v.normalized().expect("norm > 1"))
        } else {
            Self(v)
        }
    }

    pub fn as_slice(&self) -> &[f64] {
        self.0.as_slice()
    }

    pub fn dim(&self) -> usize {
        self.0.dim()
    }
}

/// `normalize(concat(context, key))`
pub fn feature(context: &Vector, key: &Vector) -> Result<ContextFeature> {
    if context.dim() != key.dim() {
        return Err(Error::Domain(format!(
            "context has dimension {}, key has {}",
            context.dim(),
            key.dim()
        )));
    }
    let mut v = context.as_slice().to_vec();
    v.extend_from_slice(key.as_slice());
    let v = Vector::new(v)?;
    let v = v
        .normalized()
        .ok_or_else(|| Error::Domain("feature of two zero vectors".into()))?;
    Ok(ContextFeature(v))
}

fn check_dims(arm: &CredibilityState, v: &ContextFeature) -> Result<()> {
    if arm.d_feat() != v.dim() {
        return Err(Error::Domain(format!(
            "feature dimension {} does not match arm dimension {}",
            v.dim(),
            arm.d_feat()
        )));
    }
    Ok(())
}

/// Upper confidence bound `θᵀv + α·sqrt(vᵀA⁻¹v)`.
pub fn ucb_score(arm: &CredibilityState, v: &ContextFeature, alpha: f64) -> Result<f64> {
    check_dims(arm, v)?;
    let x = v.as_slice();
    let mean = dot(&arm.theta(), x);
    let var = arm.a_inv.quad(x);
    if var < -1e-12 || !var.is_finite() {
        return Err(Error::Invariant(format!(
            "negative confidence width {var}: design matrix lost definiteness"
        )));
    }
    Ok(mean + alpha * var.max(0.0).sqrt())
}

/// Picks the candidate with the highest UCB; ties go to the smallest id.
pub fn select<I: Ord + Copy>(
    candidates: &[(I, &CredibilityState, ContextFeature)],
    alpha: f64,
) -> Result<I> {
    let mut best: Option<(I, f64)> = None;
    for (id, arm, v) in candidates {
        let p = ucb_score(arm, v, alpha)?;
        best = match best {
            Some((bid, bp)) if bp > p || (bp == p && bid < *id) => Some((bid, bp)),
            _ => Some((*id, p)),
        };
    }
    best.map(|(id, _)| id)
        .ok_or_else(|| Error::Domain("no candidates to select from".into()))
}

/// Absorbs payoff `r` observed on feature `x`.
pub fn update(arm: &mut CredibilityState, x: &ContextFeature, r: f64, eta: f64) -> Result<()> {
    check_dims(arm, x)?;
    if !r.is_finite() {
        return Err(Error::Domain("payoff must be finite".into()));
    }
    let x = x.as_slice();
    // Sherman–Morrison: (A + xxᵀ)⁻¹ = A⁻¹ − (A⁻¹x)(A⁻¹x)ᵀ / (1 + xᵀA⁻¹x)
    let ax = arm.a_inv.mul_vec(x);
    let denom = 1.0 + dot(x, &ax);
    if !(denom > 0.0) {
        return Err(Error::Invariant(
            "rank-one update denominator is not positive".into(),
        ));
    }
    arm.a_inv.add_outer(&ax, -1.0 / denom);
    arm.a.add_outer(x, 1.0);
    for (bi, xi) in arm.b.iter_mut().zip(x) {
        *bi += r * xi;
    }
    arm.selections += 1;
    arm.score = (arm.score + eta * r).clamp(0.0, 1.0);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::DMatrix;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn feat(xs: &[f64]) -> ContextFeature {
        ContextFeature::from_vector(Vector::new(xs.to_vec()).unwrap())
    }

    fn random_unit(rng: &mut ChaCha8Rng, d: usize) -> ContextFeature {
        let v: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        ContextFeature::from_vector(Vector::new(v).unwrap().normalized().unwrap())
    }

    fn oracle_inverse(a: &Matrix) -> DMatrix<f64> {
        let n = a.dim();
        DMatrix::from_fn(n, n, |i, j| a.get(i, j))
            .try_inverse()
            .unwrap()
    }

    fn oracle_ucb(arm: &CredibilityState, v: &[f64], alpha: f64) -> f64 {
        let inv = oracle_inverse(arm.a());
        let b = nalgebra::DVector::from_column_slice(arm.b());
        let x = nalgebra::DVector::from_column_slice(v);
        let theta = &inv * b;
        theta.dot(&x) + alpha * (x.transpose() * &inv * &x)[(0, 0)].sqrt()
    }

    #[test]
    fn cold_start_scores_one() {
        let arm = CredibilityState::fresh(4);
        let v = feat(&[0.5, 0.5, 0.5, 0.5]);
        assert!((ucb_score(&arm, &v, 1.0).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn worked_two_dimensional_example() {
        let mut arm = CredibilityState::fresh(2);
        let x = feat(&[1.0, 0.0]);
        update(&mut arm, &x, 1.0, 0.1).unwrap();
        assert_eq!(arm.a().to_rows(), vec![vec![2.0, 0.0], vec![0.0, 1.0]]);
        assert_eq!(arm.b(), &[1.0, 0.0]);
        assert_eq!(arm.theta(), vec![0.5, 0.0]);
        let p = ucb_score(&arm, &x, 1.0).unwrap();
        assert!((p - 1.20710678).abs() < 1e-8);
        assert!((p - (0.5 + 0.5f64.sqrt())).abs() < 1e-12);
    }

    #[test]
    fn zero_alpha_is_pure_exploitation() {
        let mut arm = CredibilityState::fresh(2);
        update(&mut arm, &feat(&[0.6, 0.8]), 0.7, 0.1).unwrap();
        let v = feat(&[1.0, 0.0]);
        let expect = dot(&arm.theta(), v.as_slice());
        assert_eq!(ucb_score(&arm, &v, 0.0).unwrap(), expect);
    }

    #[test]
    fn zero_payoff_leaves_b_but_grows_a() {
        let mut arm = CredibilityState::fresh(2);
        let x = feat(&[0.0, 1.0]);
        update(&mut arm, &x, 0.0, 0.1).unwrap();
        assert_eq!(arm.b(), &[0.0, 0.0]);
        assert_eq!(arm.a().get(1, 1), 2.0);
        assert_eq!(arm.score(), 0.5);
        assert_eq!(arm.selections(), 1);
    }

    #[test]
    fn updates_commute() {
        let (x, y) = (feat(&[0.6, 0.8]), feat(&[1.0, 0.0]));
        let mut p = CredibilityState::fresh(2);
        let mut q = CredibilityState::fresh(2);
        update(&mut p, &x, 0.3, 0.1).unwrap();
        update(&mut p, &y, -0.2, 0.1).unwrap();
        update(&mut q, &y, -0.2, 0.1).unwrap();
        update(&mut q, &x, 0.3, 0.1).unwrap();
        for (r1, r2) in p.a().to_rows().iter().zip(q.a().to_rows()) {
            for (u, v) in r1.iter().zip(r2) {
                assert!((u - v).abs() < 1e-15);
            }
        }
        for (u, v) in p.b().iter().zip(q.b()) {
            assert!((u - v).abs() < 1e-15);
        }
    }

    #[test]
    fn score_clamps() {
        let mut arm = CredibilityState::fresh(2);
        let x = feat(&[1.0, 0.0]);
        for _ in 0..20 {
            update(&mut arm, &x, 1.0, 0.1).unwrap();
        }
        assert_eq!(arm.score(), 1.0);
        for _ in 0..30 {
            update(&mut arm, &x, -1.0, 0.1).unwrap();
        }
        assert_eq!(arm.score(), 0.0);
    }

    #[test]
    fn feature_of_equal_basis_vectors() {
        let e1 = Vector::basis(4, 0);
        let f = feature(&e1, &e1).unwrap();
        let h = 1.0 / 2f64.sqrt();
        let expect = [h, 0.0, 0.0, 0.0, h, 0.0, 0.0, 0.0];
        for (a, b) in f.as_slice().iter().zip(expect) {
            assert!((a - b).abs() < 1e-15);
        }
        assert_eq!(f, feature(&e1, &e1).unwrap());
    }

    #[test]
    fn select_single_and_ties() {
        let fresh = CredibilityState::fresh(2);
        let v = feat(&[1.0, 0.0]);
        assert_eq!(select(&[(7u64, &fresh, v.clone())], 1.0).unwrap(), 7);
        let other = CredibilityState::fresh(2);
        let picked = select(&[(9u64, &fresh, v.clone()), (3u64, &other, v.clone())], 1.0);
        assert_eq!(picked.unwrap(), 3);
        let empty: [(u64, &CredibilityState, ContextFeature); 0] = [];
        assert!(select(&empty, 1.0).is_err());
    }

    #[test]
    fn select_matches_inversion_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let d = 6;
        for _ in 0..50 {
            let arms: Vec<CredibilityState> = (0..5)
                .map(|_| {
                    let mut arm = CredibilityState::fresh(d);
                    for _ in 0..rng.gen_range(0..20) {
                        let x = random_unit(&mut rng, d);
                        update(&mut arm, &x, rng.gen_range(-1.0..1.0), 0.1).unwrap();
                    }
                    arm
                })
                .collect();
            let feats: Vec<ContextFeature> = (0..5).map(|_| random_unit(&mut rng, d)).collect();
            let cands: Vec<(u64, &CredibilityState, ContextFeature)> = arms
                .iter()
                .zip(&feats)
                .enumerate()
                .map(|(i, (a, f))| (i as u64, a, f.clone()))
                .collect();
            let mut best = (0u64, f64::NEG_INFINITY);
            for (i, (a, f)) in arms.iter().zip(&feats).enumerate() {
                let p = oracle_ucb(a, f.as_slice(), 1.0);
                if p > best.1 {
                    best = (i as u64, p);
                }
            }
            assert_eq!(select(&cands, 1.0).unwrap(), best.0);
        }
    }

    #[test]
    fn sherman_morrison_tracks_direct_inverse() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for d in [2, 4, 8, 16] {
            let mut arm = CredibilityState::fresh(d);
            for step in 0..1000 {
                let x = random_unit(&mut rng, d);
                update(&mut arm, &x, rng.gen_range(-1.0..1.0), 0.1).unwrap();
                if step % 100 == 99 {
                    let inv = oracle_inverse(arm.a());
                    for i in 0..d {
                        for j in 0..d {
                            assert!((inv[(i, j)] - arm.a_inv().get(i, j)).abs() < 1e-9);
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn cholesky_inverse_matches_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut a = Matrix::identity(5);
        for _ in 0..30 {
            let x = random_unit(&mut rng, 5);
            a.add_outer(x.as_slice(), rng.gen_range(0.1..2.0));
        }
        let ours = a.spd_inverse().unwrap();
        let theirs = oracle_inverse(&a);
        for i in 0..5 {
            for j in 0..5 {
                assert!((ours.get(i, j) - theirs[(i, j)]).abs() < 1e-12);
            }
        }
        let not_pd = Matrix::from_rows(vec![vec![1.0, 2.0], vec![2.0, 1.0]]).unwrap();
        assert!(matches!(not_pd.spd_inverse(), Err(Error::Invariant(_))));
    }

    #[test]
    fn linear_payoffs_converge_to_best_arm() {
        // arms share one context; each arm k has payoff w_k·x + noise
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let d = 4;
        let weights: Vec<Vec<f64>> = vec![
            vec![0.9, 0.1, 0.0, 0.2],
            vec![0.2, 0.3, 0.1, 0.0],
            vec![0.1, 0.0, 0.4, 0.1],
        ];
        let ctx = feat(&[0.7, 0.1, 0.5, 0.5]);
        let true_best = weights
            .iter()
            .enumerate()
            .map(|(i, w)| (i, dot(w, ctx.as_slice())))
            .max_by(|a, b| a.1.total_cmp(&b.1))
            .unwrap()
            .0 as u64;
        let mut arms: Vec<CredibilityState> =
            (0..3).map(|_| CredibilityState::fresh(d)).collect();
        // warm start: one pull each, then greedy
        let mut hits = 0;
        for round in 0..1000 {
            let chosen = if round < 3 {
                round as u64
            } else {
                let cands: Vec<_> = arms
                    .iter()
                    .enumerate()
                    .map(|(i, a)| (i as u64, a, ctx.clone()))
                    .collect();
                select(&cands, 0.0).unwrap()
            };
            let w = &weights[chosen as usize];
            let r = dot(w, ctx.as_slice()) + rng.gen_range(-0.05..0.05);
            update(&mut arms[chosen as usize], &ctx, r, 0.1).unwrap();
            if round >= 900 && chosen == true_best {
                hits += 1;
            }
        }
        assert!(hits >= 90, "best arm chosen {hits}/100");
    }

    proptest! {
        #[test]
        fn confidence_width_shrinks(seq in proptest::collection::vec(-1.0f64..1.0, 1..30)) {
            let v = feat(&[0.6, 0.0, 0.8]);
            let mut arm = CredibilityState::fresh(3);
            let mut prev = arm.a_inv().quad(v.as_slice());
            for r in seq {
                update(&mut arm, &v, r, 0.1).unwrap();
                let now = arm.a_inv().quad(v.as_slice());
                prop_assert!(now <= prev + 1e-15);
                prev = now;
            }
        }

        #[test]
        fn a_stays_positive_definite(
            xs in proptest::collection::vec(proptest::collection::vec(-1.0f64..1.0, 3), 1..40)
        ) {
            let mut arm = CredibilityState::fresh(3);
            for x in xs {
                let f = ContextFeature::from_vector(Vector::new(x).unwrap());
                update(&mut arm, &f, 0.5, 0.1).unwrap();
            }
            let n = arm.d_feat();
            let m = DMatrix::from_fn(n, n, |i, j| arm.a().get(i, j));
            let eig = m.symmetric_eigenvalues();
            prop_assert!(eig.min() > 0.0);
            for i in 0..n {
                for j in 0..n {
                    prop_assert_eq!(arm.a().get(i, j), arm.a().get(j, i));
                }
            }
        }
    }
}
