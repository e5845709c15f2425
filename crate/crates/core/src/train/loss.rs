//! Regression losses recorded on a tape.

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};

fn check(tape: &Tape, name: &str, vars: &[Var]) -> Result<()> {
    let shape = tape.value(vars[0]).shape();
    for &v in &vars[1..] {
        if tape.value(v).shape() != shape {
            return Err(Error::Shape(format!(
                "{name}: shapes {:?} and {:?} differ",
                shape,
                tape.value(v).shape()
            )));
        }
    }
    for &v in vars {
        if let Some(i) = tape.value(v).first_non_finite() {
            return Err(Error::Domain(format!(
                "{name}: non-finite input at flat index {i}"
            )));
        }
    }
    Ok(())
}

/// Heteroscedastic Gaussian negative log-likelihood with predicted
/// log-variance `s = log σ̂²`:
///
/// `(1/M) Σᵢ ½·exp(−sᵢ)·(yᵢ − ŷᵢ)² + ½·sᵢ`
pub fn hetero_loss(tape: &mut Tape, y: Var, y_hat: Var, s: Var) -> Result<Var> {
    check(tape, "hetero_loss", &[y, y_hat, s])?;
    let r = tape.sub(y, y_hat)?;
    let r2 = tape.square(r)?;
    let neg_s = tape.neg(s)?;
    let precision = tape.exp(neg_s)?;
    let weighted = tape.mul(precision, r2)?;
    let data_term = tape.scale(weighted, 0.5)?;
    let log_term = tape.scale(s, 0.5)?;
    let total = tape.add(data_term, log_term)?;
    tape.mean(total)
}

/// Mean squared error `(1/M) Σ (yᵢ − ŷᵢ)²`.
pub fn mse_loss(tape: &mut Tape, y: Var, y_hat: Var) -> Result<Var> {
    check(tape, "mse_loss", &[y, y_hat])?;
    let r = tape.sub(y, y_hat)?;
    let r2 = tape.square(r)?;
    tape.mean(r2)
}
