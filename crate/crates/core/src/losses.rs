//! Least-squares adversarial, L1 cycle-consistency and combined objectives.
//!
//! Patch scores are regressed onto 1 for real images and 0 for generated
//! ones. The combined objective is `adv1 + adv2 + lambda * cyc`; the trainer
//! minimizes it over the generators and alternates with discriminator steps.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub const REAL_TARGET: f64 = 1.0;
pub const FAKE_TARGET: f64 = 0.0;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda_cyc: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { lambda_cyc: 10.0 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_cyc.is_finite() && self.lambda_cyc >= 0.0) {
            return Err(Error::Config(format!(
                "lambda_cyc must be finite and non-negative, got {}",
                self.lambda_cyc
            )));
        }
        Ok(())
    }
}

/// Discriminator loss on tape: `mean((real - 1)^2) + mean(fake^2)`.
pub(crate) fn discriminator_loss(tape: &mut Tape, real: Var, fake: Var) -> Result<Var> {
    let r = tape.mse_to(real, REAL_TARGET);
    let f = tape.mse_to(fake, FAKE_TARGET);
    tape.add(r, f)
}

/// Generator adversarial loss on tape: `mean((fake - 1)^2)`.
pub(crate) fn generator_loss(tape: &mut Tape, fake: Var) -> Var {
    tape.mse_to(fake, REAL_TARGET)
}

/// Cycle loss on tape: `mean|x - x_cyc| + mean|y - y_cyc|`.
pub(crate) fn cycle_loss(tape: &mut Tape, x: Var, x_cyc: Var, y: Var, y_cyc: Var) -> Result<Var> {
    let fwd = tape.mean_abs_diff(x, x_cyc)?;
    let bwd = tape.mean_abs_diff(y, y_cyc)?;
    tape.add(fwd, bwd)
}

fn finite(t: &Tensor, what: &str) -> Result<()> {
    if t.is_empty() {
        return Err(Error::Shape(format!("{what} is empty")));
    }
    t.ensure_finite(what)
}

pub fn adv_loss_discriminator(scores_real: &Tensor, scores_fake: &Tensor) -> Result<f64> {
    finite(scores_real, "real scores")?;
    finite(scores_fake, "fake scores")?;
    let mut tape = Tape::new();
    let r = tape.constant(scores_real.clone());
    let f = tape.constant(scores_fake.clone());
    let l = discriminator_loss(&mut tape, r, f)?;
    Ok(tape.value(l).item())
}

pub fn adv_loss_generator(scores_fake: &Tensor) -> Result<f64> {
    finite(scores_fake, "fake scores")?;
    let mut tape = Tape::new();
    let f = tape.constant(scores_fake.clone());
    let l = generator_loss(&mut tape, f);
    Ok(tape.value(l).item())
}

pub fn cycle_consistency_loss(x: &Tensor, x_cyc: &Tensor, y: &Tensor, y_cyc: &Tensor) -> Result<f64> {
    for (t, name) in [(x, "x"), (x_cyc, "x_cyc"), (y, "y"), (y_cyc, "y_cyc")] {
        finite(t, name)?;
    }
    let mut tape = Tape::new();
    let vars: Vec<Var> = [x, x_cyc, y, y_cyc]
        .into_iter()
        .map(|t| tape.constant(t.clone()))
        .collect();
    let l = cycle_loss(&mut tape, vars[0], vars[1], vars[2], vars[3])?;
    Ok(tape.value(l).item())
}

pub fn full_objective(adv1: f64, adv2: f64, cyc: f64, w: &LossWeights) -> Result<f64> {
    w.validate()?;
    if !(adv1.is_finite() && adv2.is_finite() && cyc.is_finite()) {
        return Err(Error::NonFinite("objective terms must be finite".into()));
    }
    Ok(adv1 + adv2 + w.lambda_cyc * cyc)
}
