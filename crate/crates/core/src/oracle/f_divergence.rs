use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize)]
pub enum FDivergence {
    Kl,
    Js,
    Tv,
    ChiSquared,
}

impl FDivergence {
    pub const ALL: [FDivergence; 4] = [
        FDivergence::Kl,
        FDivergence::Js,
        FDivergence::Tv,
        FDivergence::ChiSquared,
    ];

    pub fn name(self) -> &'static str {
        match self {
            FDivergence::Kl => "kl",
            FDivergence::Js => "js",
            FDivergence::Tv => "tv",
            FDivergence::ChiSquared => "chi2",
        }
    }

    /// Convex generator with `f(1) = 0`.
    pub fn generator(self, t: f64) -> f64 {
        match self {
            FDivergence::Kl => xlogx(t),
            FDivergence::Js => 0.5 * (xlogx(t) - (1.0 + t) * ((1.0 + t) / 2.0).ln()),
            FDivergence::Tv => 0.5 * (t - 1.0).abs(),
            FDivergence::ChiSquared => (t - 1.0).powi(2),
        }
    }

    /// `lim_{q -> 0} q f(p / q)` for `p > 0`, or `None` when infinite.
    fn zero_q_limit(self, p: f64) -> Option<f64> {
        match self {
            FDivergence::Kl | FDivergence::ChiSquared => None,
            FDivergence::Js => Some(0.5 * std::f64::consts::LN_2 * p),
            FDivergence::Tv => Some(0.5 * p),
        }
    }

    /// `sum_i q_i f(p_i / q_i)`.
    pub fn divergence(self, p: &[f64], q: &[f64]) -> Result<f64> {
        if p.len() != q.len() {
            return Err(Error::Shape(format!(
                "distributions of length {} and {}",
                p.len(),
                q.len()
            )));
        }
        let mut total = 0.0;
        for (i, (&pi, &qi)) in p.iter().zip(q).enumerate() {
            if qi > 0.0 {
                total += qi * self.generator(pi / qi);
            } else if pi > 0.0 {
                total += self.zero_q_limit(pi).ok_or_else(|| {
                    Error::Invalid(format!("{}: p has mass {pi} at atom {i} where q has none", self.name()))
                })?;
            }
        }
        Ok(total)
    }
}

fn xlogx(t: f64) -> f64 {
    if t == 0.0 {
        0.0
    } else {
        t * t.ln()
    }
}
