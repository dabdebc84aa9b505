use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// `round(log_Δ scale)`, ties away from zero.
pub fn sublevel(scale: f64, delta: f64) -> u32 {
    let v = (scale.log2() / delta.log2()).round();
    if v <= 0.0 {
        0
    } else {
        v as u32
    }
}

/// Scale, remaining rescale moduli `Λ`, and sublevel `λ` of a ciphertext.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CiphertextMeta {
    pub scale: f64,
    pub level: u32,
    pub sublevel: u32,
}

impl CiphertextMeta {
    pub fn new(scale: f64, level: u32, delta: f64) -> Self {
        Self { scale, level, sublevel: sublevel(scale, delta) }
    }

    /// A sublevel of zero cannot carry a value.
    pub fn is_dead(&self) -> bool {
        self.sublevel == 0
    }
}

/// Whether `x` must be rescaled before it fits a modulus of sublevel `q_sublevel`.
pub fn needs_rescale(x: &CiphertextMeta, q_sublevel: u32) -> Result<bool> {
    let need = x.sublevel > q_sublevel;
    if need && x.level == 0 {
        return Err(Error::DepthExhausted(format!(
            "sublevel {} exceeds modulus sublevel {q_sublevel} with no modulus left",
            x.sublevel
        )));
    }
    Ok(need)
}

/// Drops the next modulus `q` of sublevel `q_sublevel`.
pub fn apply_rescale(x: &CiphertextMeta, q: f64, q_sublevel: u32) -> Result<CiphertextMeta> {
    if x.level == 0 {
        return Err(Error::DepthExhausted("rescale with no modulus left".into()));
    }
    if x.sublevel < q_sublevel {
        return Err(Error::Invalid(format!("sublevel {} is below the modulus sublevel {q_sublevel}", x.sublevel)));
    }
    Ok(CiphertextMeta { scale: x.scale / q, level: x.level - 1, sublevel: x.sublevel - q_sublevel })
}
