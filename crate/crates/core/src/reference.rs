//! Dense textbook solvers, `O(N^3)` or `O((R+C)^3)`, used to validate the
//! fast path on small problems.

use nalgebra::{DMatrix, DVector};
use rand::seq::index::sample;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::data_model::{Factor, ObservationTable};
use crate::error::{Error, Result};
use crate::moments::VarianceComponents;

/// Largest N accepted by the dense oracles.
pub const DENSE_N_CAP: usize = 2000;

#[derive(Debug, Clone)]
pub struct DenseProblem {
    pub v: DMatrix<f64>,
    pub x: DMatrix<f64>,
    pub y: DVector<f64>,
    pub z_a: DMatrix<f64>,
    pub z_b: DMatrix<f64>,
    pub theta: VarianceComponents,
}

#[derive(Debug, Clone)]
pub struct PenalizedSolution {
    pub beta: DVector<f64>,
    pub a: DVector<f64>,
    pub b: DVector<f64>,
    /// A 1e-10 ridge was added to the β block to resolve a singular system.
    pub ridge_added: bool,
}

fn indicator(table: &ObservationTable, factor: Factor) -> DMatrix<f64> {
    let mut z = DMatrix::zeros(table.n_obs(), table.n_levels(factor));
    for (k, &l) in table.levels_of(factor).iter().enumerate() {
        z[(k, l)] = 1.0;
    }
    z
}

fn spd_inverse(m: DMatrix<f64>, what: &str) -> Result<DMatrix<f64>> {
    m.cholesky()
        .map(|c| c.inverse())
        .ok_or_else(|| Error::Singular(format!("{what} is not positive definite")))
}

impl DenseProblem {
    pub fn new(table: &ObservationTable, theta: &VarianceComponents) -> Result<Self> {
        let n = table.n_obs();
        if n > DENSE_N_CAP {
            return Err(Error::CapExceeded { what: "N", size: n, cap: DENSE_N_CAP });
        }
        let z_a = indicator(table, Factor::A);
        let z_b = indicator(table, Factor::B);
        let v = &z_a * z_a.transpose() * theta.sigma2_a
            + &z_b * z_b.transpose() * theta.sigma2_b
            + DMatrix::identity(n, n) * theta.sigma2_e;
        Ok(Self {
            v,
            x: table.x().clone(),
            y: DVector::from_column_slice(table.y()),
            z_a,
            z_b,
            theta: *theta,
        })
    }

    pub fn n(&self) -> usize {
        self.y.len()
    }

    /// Indicator columns and penalties of every factor with a finite λ.
    fn active_effects(&self) -> (DMatrix<f64>, Vec<f64>, Vec<(usize, usize)>) {
        let mut blocks = Vec::new();
        let mut penalties = Vec::new();
        let mut ranges = Vec::new();
        let mut start = 0;
        for (z, lambda) in [(&self.z_a, self.theta.lambda_a()), (&self.z_b, self.theta.lambda_b())] {
            if lambda.is_finite() {
                blocks.push(z.clone());
                penalties.extend(std::iter::repeat_n(lambda, z.ncols()));
                ranges.push((start, z.ncols()));
                start += z.ncols();
            } else {
                ranges.push((start, 0));
            }
        }
        let n = self.n();
        let mut zg = DMatrix::zeros(n, start);
        let mut col = 0;
        for z in &blocks {
            zg.columns_mut(col, z.ncols()).copy_from(z);
            col += z.ncols();
        }
        (zg, penalties, ranges)
    }

    /// `W = σ²_E V⁻¹`.
    pub fn w(&self) -> Result<DMatrix<f64>> {
        Ok(spd_inverse(self.v.clone(), "V")? * self.theta.sigma2_e)
    }

    /// `(β̂_GLS, cov)` with `β̂ = (XᵀV⁻¹X)⁻¹XᵀV⁻¹Y` and `cov = (XᵀV⁻¹X)⁻¹`.
    pub fn dense_gls(&self) -> Result<(DVector<f64>, DMatrix<f64>)> {
        let vinv = spd_inverse(self.v.clone(), "V")?;
        let xtv = self.x.transpose() * &vinv;
        let cov = spd_inverse(&xtv * &self.x, "XᵀV⁻¹X")?;
        let beta = &cov * (&xtv * &self.y);
        Ok((beta, cov))
    }

    pub fn dense_ols(&self) -> Result<DVector<f64>> {
        let xtx_inv = spd_inverse(self.x.transpose() * &self.x, "XᵀX")?;
        Ok(xtx_inv * (self.x.transpose() * &self.y))
    }

    /// Jointly minimizes `‖Y − Xβ − Z_A a − Z_B b‖² + λ_A‖a‖² + λ_B‖b‖²`.
    /// A factor with infinite λ is fixed at zero.
    pub fn dense_penalized(&self) -> Result<PenalizedSolution> {
        let (zg, penalties, ranges) = self.active_effects();
        let p = self.x.ncols();
        let q = zg.ncols();
        let mut design = DMatrix::zeros(self.n(), p + q);
        design.columns_mut(0, p).copy_from(&self.x);
        design.columns_mut(p, q).copy_from(&zg);
        let mut lhs = design.transpose() * &design;
        for (k, pen) in penalties.iter().enumerate() {
            lhs[(p + k, p + k)] += pen;
        }
        let rhs = design.transpose() * &self.y;
        let (sol, ridge_added) = match lhs.clone().cholesky() {
            Some(ch) => (ch.solve(&rhs), false),
            None => {
                for k in 0..p {
                    lhs[(k, k)] += 1e-10;
                }
                let ch = lhs
                    .cholesky()
                    .ok_or_else(|| Error::Singular("penalized normal equations".into()))?;
                (ch.solve(&rhs), true)
            }
        };
        let beta = sol.rows(0, p).into_owned();
        let take = |(start, len): (usize, usize), levels: usize| {
            if len == 0 {
                DVector::zeros(levels)
            } else {
                sol.rows(p + start, len).into_owned()
            }
        };
        Ok(PenalizedSolution {
            beta,
            a: take(ranges[0], self.z_a.ncols()),
            b: take(ranges[1], self.z_b.ncols()),
            ridge_added,
        })
    }

    /// `S_G = Z_G (Z_GᵀZ_G + D_λ)⁻¹ Z_Gᵀ`.
    pub fn smoother_sg(&self) -> Result<DMatrix<f64>> {
        let (zg, penalties, _) = self.active_effects();
        let mut g = zg.transpose() * &zg;
        for (k, pen) in penalties.iter().enumerate() {
            g[(k, k)] += pen;
        }
        let inv = g.try_inverse().ok_or_else(|| {
            Error::Singular("Z_GᵀZ_G + D_λ is singular (zero penalties on a disconnected design)".into())
        })?;
        Ok(&zg * inv * zg.transpose())
    }

    /// Smoother for the ridge problem with optional sum-to-zero constraints on
    /// `a` and/or `b`, solved through its KKT system.
    pub fn constrained_smoother(&self, center_a: bool, center_b: bool) -> Result<DMatrix<f64>> {
        let (zg, penalties, ranges) = self.active_effects();
        let q = zg.ncols();
        let mut constraints: Vec<(usize, usize)> = Vec::new();
        if center_a && ranges[0].1 > 0 {
            constraints.push(ranges[0]);
        }
        if center_b && ranges[1].1 > 0 {
            constraints.push(ranges[1]);
        }
        let k = q + constraints.len();
        let mut kkt = DMatrix::zeros(k, k);
        kkt.view_mut((0, 0), (q, q)).copy_from(&(zg.transpose() * &zg));
        for (idx, pen) in penalties.iter().enumerate() {
            kkt[(idx, idx)] += pen;
        }
        for (c, &(start, len)) in constraints.iter().enumerate() {
            for l in start..start + len {
                kkt[(l, q + c)] = 1.0;
                kkt[(q + c, l)] = 1.0;
            }
        }
        let inv = kkt
            .try_inverse()
            .ok_or_else(|| Error::Singular("constrained ridge KKT system".into()))?;
        let block = inv.view((0, 0), (q, q)).into_owned();
        Ok(&zg * block * zg.transpose())
    }

    /// Largest absolute entry of `(I − S_G) − σ²_E V⁻¹`.
    pub fn smw_discrepancy(&self) -> Result<f64> {
        let n = self.n();
        let lhs = DMatrix::identity(n, n) - self.smoother_sg()?;
        Ok((lhs - self.w()?).amax())
    }
}

/// Random design with no empty level and no repeated cell. The first
/// `max(r, c)` observations cover every level; the rest are distinct random
/// cells. Requires `max(r, c) <= n <= r * c`.
pub fn random_design<G: Rng>(rng: &mut G, r: usize, c: usize, n: usize) -> ObservationTable {
    assert!(r >= 1 && c >= 1 && n >= r.max(c) && n <= r * c, "infeasible design {r}x{c} with {n}");
    let base = r.max(c);
    let mut cells: Vec<usize> = (0..base).map(|k| (k % r) * c + k % c).collect();
    let taken: std::collections::HashSet<usize> = cells.iter().copied().collect();
    let free: Vec<usize> = (0..r * c).filter(|cell| !taken.contains(cell)).collect();
    for idx in sample(rng, free.len(), n - base) {
        cells.push(free[idx]);
    }
    let rows = cells.iter().map(|cell| cell / c).collect();
    let cols = cells.iter().map(|cell| cell % c).collect();
    ObservationTable::design_only(rows, cols, r, c).expect("covering design is valid")
}

/// Random design with an intercept plus `p - 1` standard normal covariates and
/// a response drawn from the crossed model with components `theta` and
/// coefficients `beta`.
pub fn random_instance<G: Rng>(
    rng: &mut G,
    r: usize,
    c: usize,
    n: usize,
    beta: &[f64],
    theta: &VarianceComponents,
) -> ObservationTable {
    let t = random_design(rng, r, c, n);
    let p = beta.len();
    let x = DMatrix::from_fn(n, p, |_, k| if k == 0 { 1.0 } else { rng.sample(StandardNormal) });
    let a: Vec<f64> = (0..r).map(|_| theta.sigma2_a.sqrt() * rng.sample::<f64, _>(StandardNormal)).collect();
    let b: Vec<f64> = (0..c).map(|_| theta.sigma2_b.sqrt() * rng.sample::<f64, _>(StandardNormal)).collect();
    let xb = &x * DVector::from_column_slice(beta);
    let y = (0..n)
        .map(|k| {
            xb[k] + a[t.rows()[k]] + b[t.cols()[k]] + theta.sigma2_e.sqrt() * rng.sample::<f64, _>(StandardNormal)
        })
        .collect();
    t.with_data(y, x).expect("shapes agree")
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn theta(a: f64, b: f64, e: f64) -> VarianceComponents {
        VarianceComponents::new(a, b, e).unwrap()
    }

    #[test]
    fn identity_covariance_gls_is_ols() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let t = random_instance(&mut rng, 5, 4, 14, &[1.0, -2.0, 0.5], &theta(1.0, 1.0, 1.0));
        let prob = DenseProblem::new(&t, &theta(0.0, 0.0, 1.0)).unwrap();
        let (gls, _) = prob.dense_gls().unwrap();
        let ols = prob.dense_ols().unwrap();
        assert!((gls - ols).amax() < 1e-10);
    }

    #[test]
    fn penalized_solution_is_gls_with_centered_blups() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for (r, c, n) in [(2, 2, 4), (6, 5, 20), (9, 7, 33)] {
            let th = theta(1.3, 0.6, 0.9);
            let t = random_instance(&mut rng, r, c, n, &[0.5, 1.0], &th);
            let prob = DenseProblem::new(&t, &th).unwrap();
            let (gls, _) = prob.dense_gls().unwrap();
            let pen = prob.dense_penalized().unwrap();
            assert!(!pen.ridge_added);
            assert!((&pen.beta - &gls).amax() < 1e-8 * gls.amax().max(1.0));
            assert!(pen.a.sum().abs() < 1e-9);
            assert!(pen.b.sum().abs() < 1e-9);
        }
    }

    #[test]
    fn infinite_penalties_recover_ols() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let t = random_instance(&mut rng, 5, 5, 15, &[1.0, 2.0], &theta(1.0, 1.0, 1.0));
        let prob = DenseProblem::new(&t, &theta(1e-12, 1e-12, 1.0)).unwrap();
        let pen = prob.dense_penalized().unwrap();
        assert!(pen.a.amax() < 1e-9 && pen.b.amax() < 1e-9);
        assert!((&pen.beta - prob.dense_ols().unwrap()).amax() < 1e-9);
    }

    #[test]
    fn smw_identity_holds() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let t = random_design(&mut rng, 6, 5, 16);
        let prob = DenseProblem::new(&t, &theta(0.8, 2.5, 1.2)).unwrap();
        assert!(prob.smw_discrepancy().unwrap() < 1e-8);
        let sg = prob.smoother_sg().unwrap();
        assert!((&sg - sg.transpose()).amax() < 1e-12);
        let eig = sg.symmetric_eigenvalues();
        assert!(eig.iter().all(|&e| (-1e-10..=1.0 + 1e-10).contains(&e)));
    }

    #[test]
    fn one_factor_reduction() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let t = random_design(&mut rng, 5, 1, 5);
        let prob = DenseProblem::new(&t, &theta(2.0, 0.0, 1.0)).unwrap();
        let sg = prob.smoother_sg().unwrap();
        let za = &prob.z_a;
        let sa = za * (za.transpose() * za + DMatrix::identity(5, 5) * 0.5).try_inverse().unwrap() * za.transpose();
        assert!((sg - sa).amax() < 1e-12);
    }

    #[test]
    fn two_by_two_intercept_cross_check() {
        let t = ObservationTable::design_only(vec![0, 0, 1, 1], vec![0, 1, 0, 1], 2, 2).unwrap();
        let t = t.with_data(vec![1.0, 4.0, 2.0, 7.0], DMatrix::from_element(4, 1, 1.0)).unwrap();
        let prob = DenseProblem::new(&t, &theta(1.0, 1.0, 1.0)).unwrap();
        let (gls, _) = prob.dense_gls().unwrap();
        let pen = prob.dense_penalized().unwrap();
        assert!((gls[0] - pen.beta[0]).abs() < 1e-12);
        assert!((gls[0] - 3.5).abs() < 1e-12);
    }

    #[test]
    fn disconnected_zero_penalty_design_is_singular() {
        // two disjoint communities
        let t = ObservationTable::design_only(vec![0, 1], vec![0, 1], 2, 2).unwrap();
        let prob = DenseProblem {
            theta: VarianceComponents { sigma2_a: 1.0, sigma2_b: 1.0, sigma2_e: 0.0 },
            ..DenseProblem::new(&t, &theta(1.0, 1.0, 1.0)).unwrap()
        };
        assert!(matches!(prob.smoother_sg(), Err(Error::Singular(_))));
    }

    #[test]
    fn random_design_covers_all_levels() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for (r, c, n) in [(1, 1, 1), (3, 7, 7), (7, 3, 21), (10, 8, 40)] {
            let t = random_design(&mut rng, r, c, n);
            assert_eq!((t.n_obs(), t.n_row_levels(), t.n_col_levels()), (n, r, c));
        }
    }
}
