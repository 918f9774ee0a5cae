//! Desk-scale environments: a pixel point-mass with moving stripe
//! distractors, and finite factorized POMDPs for exact verification.

mod point_mass;
mod tabular;

pub use point_mass::{
    collect_demonstrations, random_action, run_episode, DistractedPointMass, GroundTruthSegmentation, PointMassParams,
    ScriptedExpert, StepOutcome, StripePattern, ACTION_DIM,
};
pub use tabular::{stationary_distribution, PomdpSizes, TabularFactorizedPomdp, TabularPolicy};

use crate::error::{Error, Result};

/// Named point-mass variants selectable from the command line.
pub fn pattern_for_env(name: &str) -> Result<StripePattern> {
    match name {
        "pointmass" => Ok(StripePattern::A),
        "pointmass-b" => Ok(StripePattern::B),
        other => Err(Error::Invalid(format!(
            "unknown env `{other}` (expected `pointmass` or `pointmass-b`)"
        ))),
    }
}
