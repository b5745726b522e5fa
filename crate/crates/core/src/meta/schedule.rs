use crate::error::{Error, Result};

/// KL weight for `epoch`: constant at `start`, then a linear ramp over the last `ramp` epochs reaching `end` at the final epoch.
pub fn lambda1_schedule(epoch: usize, epochs: usize, start: f64, end: f64, ramp: usize) -> Result<f64> {
    if epoch >= epochs {
        return Err(Error::Contract(format!("epoch {epoch} outside 0..{epochs}")));
    }
    let ramp = ramp.min(epochs - 1);
    let first_ramp = epochs - ramp;
    if ramp == 0 || epoch < first_ramp {
        return Ok(start);
    }
    let t = (epoch + 1 - first_ramp) as f64 / ramp as f64;
    Ok(start + (end - start) * t)
}
