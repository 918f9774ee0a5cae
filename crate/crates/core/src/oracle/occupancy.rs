//! Exact discounted occupancy measures on tabular factorized POMDPs.

use crate::env::{TabularFactorizedPomdp, TabularPolicy};
use crate::error::{Error, Result};

/// Discounted mass beyond the truncation horizon.
pub const TAIL_MASS: f64 = 1e-12;

/// Probability table over a finite product space, row-major over `dims`.
#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct OccupancyTable {
    pub dims: Vec<usize>,
    pub probs: Vec<f64>,
}

impl OccupancyTable {
    pub fn validate(&self) -> Result<()> {
        if self.dims.iter().product::<usize>() != self.probs.len() {
            return Err(Error::Shape("occupancy table size does not match its dims".into()));
        }
        if self.probs.iter().any(|&p| !(p >= 0.0)) {
            return Err(Error::Invalid("occupancy table has a negative entry".into()));
        }
        let total: f64 = self.probs.iter().sum();
        if (total - 1.0).abs() > 1e-11 {
            return Err(Error::Invalid(format!("occupancy table sums to {total}")));
        }
        Ok(())
    }

    /// Sums out every axis not listed in `keep` (kept axes stay in order).
    pub fn marginal(&self, keep: &[usize]) -> OccupancyTable {
        let dims: Vec<usize> = keep.iter().map(|&k| self.dims[k]).collect();
        let mut probs = vec![0.0; dims.iter().product()];
        let mut index = vec![0usize; self.dims.len()];
        for &p in &self.probs {
            let mut flat = 0;
            for &k in keep {
                flat = flat * self.dims[k] + index[k];
            }
            probs[flat] += p;
            for axis in (0..index.len()).rev() {
                index[axis] += 1;
                if index[axis] < self.dims[axis] {
                    break;
                }
                index[axis] = 0;
            }
        }
        OccupancyTable { dims, probs }
    }
}

/// Number of steps after which `gamma^h` drops below [`TAIL_MASS`].
pub fn truncation_horizon(gamma: f64) -> usize {
    if gamma <= 0.0 {
        1
    } else {
        (TAIL_MASS.ln() / gamma.ln()).ceil() as usize + 1
    }
}

/// Discounted, `(1 - gamma)`-normalized visitation of `(z+, z-, a)` under a
/// policy acting on `z+`, by forward recursion on the joint state.
pub fn exact_occupancy(pomdp: &TabularFactorizedPomdp, policy: &TabularPolicy, gamma: f64) -> Result<OccupancyTable> {
    pomdp.validate()?;
    policy.validate()?;
    if policy.n_states != pomdp.n_plus || policy.n_actions != pomdp.n_actions {
        return Err(Error::Shape("policy table does not match the POMDP".into()));
    }
    if !(0.0..1.0).contains(&gamma) {
        return Err(Error::Invalid(format!("discount {gamma} outside [0, 1)")));
    }
    let (np, nm, na) = (pomdp.n_plus, pomdp.n_minus, pomdp.n_actions);
    let mut dist: Vec<f64> = (0..np * nm)
        .map(|s| pomdp.init_plus[s / nm] * pomdp.init_minus[s % nm])
        .collect();
    let mut occ = vec![0.0; np * nm * na];
    let mut weight = 1.0 - gamma;
    for _ in 0..truncation_horizon(gamma) {
        let mut next = vec![0.0; np * nm];
        for (s, &mass) in dist.iter().enumerate() {
            if mass == 0.0 {
                continue;
            }
            let (zp, zm) = (s / nm, s % nm);
            for a in 0..na {
                let sa = mass * policy.prob(zp, a);
                occ[s * na + a] += weight * sa;
                for np_ in 0..np {
                    let tp = sa * pomdp.trans_plus(zp, a, np_);
                    for nm_ in 0..nm {
                        next[np_ * nm + nm_] += tp * pomdp.trans_minus(zm, nm_);
                    }
                }
            }
        }
        dist = next;
        weight *= gamma;
    }
    Ok(OccupancyTable {
        dims: vec![np, nm, na],
        probs: occ,
    })
}

/// Occupancy of `(z+, a)` on the task chain alone with transition table
/// `trans[z+][a][z+']`.
pub fn task_occupancy(
    init: &[f64],
    trans: &[f64],
    n_actions: usize,
    policy: &TabularPolicy,
    gamma: f64,
) -> Result<OccupancyTable> {
    let n = init.len();
    if trans.len() != n * n_actions * n || policy.n_states != n || policy.n_actions != n_actions {
        return Err(Error::Shape("task chain tables disagree in size".into()));
    }
    let mut dist = init.to_vec();
    let mut occ = vec![0.0; n * n_actions];
    let mut weight = 1.0 - gamma;
    for _ in 0..truncation_horizon(gamma) {
        let mut next = vec![0.0; n];
        for (s, &mass) in dist.iter().enumerate() {
            for a in 0..n_actions {
                let sa = mass * policy.prob(s, a);
                occ[s * n_actions + a] += weight * sa;
                let row = &trans[(s * n_actions + a) * n..(s * n_actions + a + 1) * n];
                for (t, &p) in row.iter().enumerate() {
                    next[t] += sa * p;
                }
            }
        }
        dist = next;
        weight *= gamma;
    }
    Ok(OccupancyTable {
        dims: vec![n, n_actions],
        probs: occ,
    })
}

/// Pushes the `(z+, z-, a)` table through the emission to `(o, a)`.
pub fn observation_occupancy(pomdp: &TabularFactorizedPomdp, joint: &OccupancyTable) -> OccupancyTable {
    let na = pomdp.n_actions;
    let mut probs = vec![0.0; pomdp.n_obs * na];
    for s in 0..pomdp.n_states() {
        let o = pomdp.emission[s];
        for a in 0..na {
            probs[o * na + a] += joint.probs[s * na + a];
        }
    }
    OccupancyTable {
        dims: vec![pomdp.n_obs, na],
        probs,
    }
}
