use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::SimError;
use crate::types::{ParamSample, StateVec};

/// Componentwise disturbance bounds and the seed of the run's generator.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DisturbanceSpec {
    /// State deviation bound (per component).
    pub delta_x: f64,
    /// Parameter measurement error bound (per component).
    pub delta_p: f64,
    /// Additive plant–model mismatch bound (per component).
    pub delta_f: f64,
    pub seed: u64,
}

impl DisturbanceSpec {
    pub fn none() -> Self {
        Self {
            delta_x: 0.0,
            delta_p: 0.0,
            delta_f: 0.0,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<(), SimError> {
        for (name, v) in [("delta_x", self.delta_x), ("delta_p", self.delta_p), ("delta_f", self.delta_f)] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(SimError::InvalidDisturbance(format!("{name} = {v}")));
            }
        }
        Ok(())
    }

    pub fn is_zero(&self) -> bool {
        self.delta_x == 0.0 && self.delta_p == 0.0 && self.delta_f == 0.0
    }
}

/// Owns the random state of one closed-loop run.
#[derive(Debug, Clone)]
pub struct Disturber {
    spec: DisturbanceSpec,
    rng: ChaCha8Rng,
}

fn perturb(values: &mut [f64], bound: f64, rng: &mut impl Rng) {
    if bound > 0.0 {
        for v in values {
            *v += rng.random_range(-bound..=bound);
        }
    }
}

impl Disturber {
    pub fn new(spec: DisturbanceSpec) -> Result<Self, SimError> {
        spec.validate()?;
        Ok(Self {
            spec,
            rng: ChaCha8Rng::seed_from_u64(spec.seed),
        })
    }

    pub fn spec(&self) -> &DisturbanceSpec {
        &self.spec
    }

    /// Measured state and parameters: nominal plus i.i.d. uniform noise.
    pub fn disturb(&mut self, x: &StateVec, p: &[ParamSample]) -> Result<(StateVec, Vec<ParamSample>), SimError> {
        Ok((self.disturb_state(x)?, self.disturb_params(p)?))
    }

    pub fn disturb_state(&mut self, x: &StateVec) -> Result<StateVec, SimError> {
        let mut v = x.as_slice().to_vec();
        perturb(&mut v, self.spec.delta_x, &mut self.rng);
        Ok(StateVec::new(v)?)
    }

    pub fn disturb_params(&mut self, p: &[ParamSample]) -> Result<Vec<ParamSample>, SimError> {
        p.iter()
            .map(|s| {
                let mut v = s.as_slice().to_vec();
                perturb(&mut v, self.spec.delta_p, &mut self.rng);
                Ok(ParamSample::new(v)?)
            })
            .collect()
    }

    /// Additive model mismatch applied after a plant step.
    pub fn mismatch(&mut self, x: &mut [f64]) {
        perturb(x, self.spec.delta_f, &mut self.rng);
    }
}

/// Stateless form: draws from the caller's generator.
pub fn disturb(
    x: &StateVec,
    p: &[ParamSample],
    spec: &DisturbanceSpec,
    rng: &mut impl Rng,
) -> Result<(StateVec, Vec<ParamSample>), SimError> {
    spec.validate()?;
    let mut xv = x.as_slice().to_vec();
    perturb(&mut xv, spec.delta_x, rng);
    let ps = p
        .iter()
        .map(|s| {
            let mut v = s.as_slice().to_vec();
            perturb(&mut v, spec.delta_p, rng);
            ParamSample::new(v)
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok((StateVec::new(xv)?, ps))
}
