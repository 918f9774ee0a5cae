//! Finite POMDP whose latent state splits into an action-driven task factor
//! `z+` and an autonomous background factor `z-`.

use crate::error::{Error, Result};
use crate::rng::RandomSource;

const ROW_TOL: f64 = 1e-12;

/// Conditional table `p(a | z+)`, row-major `[n_states][n_actions]`.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct TabularPolicy {
    pub n_states: usize,
    pub n_actions: usize,
    pub probs: Vec<f64>,
}

impl TabularPolicy {
    pub fn random(n_states: usize, n_actions: usize, rng: &mut RandomSource) -> Self {
        let probs = (0..n_states).flat_map(|_| rng.simplex(n_actions)).collect();
        Self {
            n_states,
            n_actions,
            probs,
        }
    }

    pub fn uniform(n_states: usize, n_actions: usize) -> Self {
        Self {
            n_states,
            n_actions,
            probs: vec![1.0 / n_actions as f64; n_states * n_actions],
        }
    }

    pub fn prob(&self, state: usize, action: usize) -> f64 {
        self.probs[state * self.n_actions + action]
    }

    pub fn validate(&self) -> Result<()> {
        check_rows("policy", &self.probs, self.n_actions)
    }
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct TabularFactorizedPomdp {
    pub n_plus: usize,
    pub n_minus: usize,
    pub n_actions: usize,
    pub n_obs: usize,
    pub init_plus: Vec<f64>,
    pub init_minus: Vec<f64>,
    /// `p(z+' | z+, a)`, indexed `[z+][a][z+']`.
    pub trans_plus: Vec<f64>,
    /// `p(z-' | z-)`, indexed `[z-][z-']`.
    pub trans_minus: Vec<f64>,
    /// Deterministic render `o = emission[z+ * n_minus + z-]`.
    pub emission: Vec<usize>,
    /// `R(z+, a)` in `[0, 1]`.
    pub reward: Vec<f64>,
}

/// Sizes for random instance generation.
#[derive(Debug, Clone, Copy)]
pub struct PomdpSizes {
    pub n_plus: usize,
    pub n_minus: usize,
    pub n_actions: usize,
    pub n_obs: usize,
}

impl TabularFactorizedPomdp {
    /// Random instance. With `stationary_background`, `z-` starts in the
    /// stationary law of its chain, so its marginal is the same at every
    /// step and the occupancy factorizes as `rho(z+, a) * P(z-)`.
    pub fn random(sizes: PomdpSizes, stationary_background: bool, rng: &mut RandomSource) -> Result<Self> {
        let PomdpSizes {
            n_plus,
            n_minus,
            n_actions,
            n_obs,
        } = sizes;
        if n_plus == 0 || n_minus == 0 || n_actions == 0 || n_obs == 0 {
            return Err(Error::Invalid("all tabular sizes must be positive".into()));
        }
        let trans_plus = (0..n_plus * n_actions).flat_map(|_| rng.simplex(n_plus)).collect();
        let trans_minus: Vec<f64> = (0..n_minus).flat_map(|_| rng.simplex(n_minus)).collect();
        let init_minus = if stationary_background {
            stationary_distribution(&trans_minus, n_minus)?
        } else {
            rng.simplex(n_minus)
        };
        let emission = (0..n_plus * n_minus).map(|_| rng.below(n_obs)).collect();
        let reward = (0..n_plus * n_actions).map(|_| rng.uniform()).collect();
        let pomdp = Self {
            n_plus,
            n_minus,
            n_actions,
            n_obs,
            init_plus: rng.simplex(n_plus),
            init_minus,
            trans_plus,
            trans_minus,
            emission,
            reward,
        };
        pomdp.validate()?;
        Ok(pomdp)
    }

    /// Replaces the render with the identity map `o = (z+, z-)`.
    pub fn with_bijective_emission(mut self) -> Self {
        self.n_obs = self.n_plus * self.n_minus;
        self.emission = (0..self.n_obs).collect();
        self
    }

    pub fn n_states(&self) -> usize {
        self.n_plus * self.n_minus
    }

    pub fn state_index(&self, plus: usize, minus: usize) -> usize {
        plus * self.n_minus + minus
    }

    pub fn trans_plus(&self, plus: usize, action: usize, next: usize) -> f64 {
        self.trans_plus[(plus * self.n_actions + action) * self.n_plus + next]
    }

    pub fn trans_minus(&self, minus: usize, next: usize) -> f64 {
        self.trans_minus[minus * self.n_minus + next]
    }

    /// Joint transition on `s = (z+, z-)`: the product of the two factors.
    pub fn joint_transition(&self, state: usize, action: usize, next: usize) -> f64 {
        let (p, m) = (state / self.n_minus, state % self.n_minus);
        let (np, nm) = (next / self.n_minus, next % self.n_minus);
        self.trans_plus(p, action, np) * self.trans_minus(m, nm)
    }

    pub fn reward(&self, plus: usize, action: usize) -> f64 {
        self.reward[plus * self.n_actions + action]
    }

    pub fn validate(&self) -> Result<()> {
        check_rows("init_plus", &self.init_plus, self.n_plus)?;
        check_rows("init_minus", &self.init_minus, self.n_minus)?;
        check_rows("trans_plus", &self.trans_plus, self.n_plus)?;
        check_rows("trans_minus", &self.trans_minus, self.n_minus)?;
        if self.trans_plus.len() != self.n_plus * self.n_actions * self.n_plus
            || self.trans_minus.len() != self.n_minus * self.n_minus
            || self.emission.len() != self.n_states()
            || self.reward.len() != self.n_plus * self.n_actions
        {
            return Err(Error::Shape("tabular POMDP tables have inconsistent sizes".into()));
        }
        if self.emission.iter().any(|&o| o >= self.n_obs) {
            return Err(Error::Invalid("emission maps outside the observation set".into()));
        }
        Ok(())
    }
}

fn check_rows(name: &str, table: &[f64], width: usize) -> Result<()> {
    if width == 0 || !table.len().is_multiple_of(width) {
        return Err(Error::Shape(format!(
            "{name}: length {} not a multiple of {width}",
            table.len()
        )));
    }
    for (i, row) in table.chunks(width).enumerate() {
        if row.iter().any(|&p| !(p >= 0.0)) {
            return Err(Error::Invalid(format!("{name}: row {i} has a negative or NaN entry")));
        }
        let total: f64 = row.iter().sum();
        if (total - 1.0).abs() > ROW_TOL {
            return Err(Error::Invalid(format!("{name}: row {i} sums to {total}")));
        }
    }
    Ok(())
}

/// Solves `mu T = mu`, `sum(mu) = 1` by Gaussian elimination with partial
/// pivoting. `trans` is row-stochastic `[n][n]`.
pub fn stationary_distribution(trans: &[f64], n: usize) -> Result<Vec<f64>> {
    // Rows 0..n-1 of (T^T - I) plus the normalization row.
    let mut a = vec![vec![0.0; n + 1]; n];
    for i in 0..n - 1 {
        for j in 0..n {
            a[i][j] = trans[j * n + i] - if i == j { 1.0 } else { 0.0 };
        }
    }
    for j in 0..n {
        a[n - 1][j] = 1.0;
    }
    a[n - 1][n] = 1.0;

    for col in 0..n {
        let pivot = (col..n)
            .max_by(|&x, &y| a[x][col].abs().total_cmp(&a[y][col].abs()))
            .expect("non-empty pivot range");
        if a[pivot][col].abs() < 1e-14 {
            return Err(Error::Invalid("background chain has no unique stationary law".into()));
        }
        a.swap(col, pivot);
        for row in 0..n {
            if row != col {
                let factor = a[row][col] / a[col][col];
                for k in col..=n {
                    a[row][k] -= factor * a[col][k];
                }
            }
        }
    }
    let mut mu: Vec<f64> = (0..n).map(|i| (a[i][n] / a[i][i]).max(0.0)).collect();
    let total: f64 = mu.iter().sum();
    mu.iter_mut().for_each(|p| *p /= total);
    Ok(mu)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sizes() -> PomdpSizes {
        PomdpSizes {
            n_plus: 4,
            n_minus: 3,
            n_actions: 2,
            n_obs: 7,
        }
    }

    #[test]
    fn joint_transition_is_a_product_and_stochastic() {
        let mut rng = RandomSource::new(2);
        let m = TabularFactorizedPomdp::random(sizes(), true, &mut rng).unwrap();
        for s in 0..m.n_states() {
            for a in 0..m.n_actions {
                let total: f64 = (0..m.n_states()).map(|n| m.joint_transition(s, a, n)).sum();
                assert!((total - 1.0).abs() < 1e-12);
            }
        }
        let s = m.state_index(1, 2);
        let n = m.state_index(3, 0);
        assert_eq!(m.joint_transition(s, 1, n), m.trans_plus(1, 1, 3) * m.trans_minus(2, 0));
    }

    #[test]
    fn stationary_law_is_fixed_point() {
        let mut rng = RandomSource::new(4);
        for n in 1..7 {
            let t: Vec<f64> = (0..n).flat_map(|_| rng.simplex(n)).collect();
            let mu = stationary_distribution(&t, n).unwrap();
            for j in 0..n {
                let next: f64 = (0..n).map(|i| mu[i] * t[i * n + j]).sum();
                assert!((next - mu[j]).abs() < 1e-13);
            }
        }
    }

    #[test]
    fn non_stochastic_rows_rejected() {
        let mut rng = RandomSource::new(2);
        let mut m = TabularFactorizedPomdp::random(sizes(), false, &mut rng).unwrap();
        m.trans_minus[0] += 1e-6;
        assert!(m.validate().is_err());
    }
}
