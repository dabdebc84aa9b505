//! Rescale error instrumentation.

use std::sync::Arc;

use num_bigint::BigInt;
use num_traits::FromPrimitive;

use super::{SimContext, SlotLayout};
use crate::error::{Error, Result};

const WIDTH: usize = 64;

/// `q = round(Δ^ℓ (1 + eps))` for every modulus of a chain of `count`.
pub fn perturbed_moduli(delta_bits: u32, sublevel: u32, eps: f64, count: usize) -> Vec<BigInt> {
    let bits = (delta_bits * sublevel) as i32;
    let base = BigInt::from(1) << bits as usize;
    let shift = BigInt::from_f64((eps * 2f64.powi(bits)).round()).unwrap_or_default();
    vec![base + shift; count]
}

/// Runs a fixed chain of `depth` plaintext products, each followed by a
/// rescale by the next modulus of `moduli`, and reports the largest error
/// relative to the exact product. Scales are tracked nominally, so a modulus
/// away from `Δ^ℓ` shows up as error.
pub fn rescale_error_probe(delta_bits: u32, sublevel: u32, moduli: &[BigInt], depth: usize) -> Result<f64> {
    if depth > moduli.len() {
        return Err(Error::DepthExhausted(format!("probe depth {depth} exceeds the chain of {}", moduli.len())));
    }
    let ctx = SimContext {
        delta_bits,
        moduli: moduli[moduli.len() - depth..].to_vec(),
        moduli_sublevels: vec![sublevel; depth],
    };
    let layout = SlotLayout::for_image(1, WIDTH, WIDTH, 1, 0)?;
    let x: Vec<f64> = (0..WIDTH).map(|j| 0.9 * ((j + 1) as f64).sin()).collect();
    let mut ct = ctx.encode(std::slice::from_ref(&x), &layout, depth as u32)?;
    let mut exact = x;
    let mask = Arc::new(layout.positions());
    for t in 0..depth {
        let w = 0.9 + 0.02 * t as f64;
        let pt = ctx.encode_plain(&[w], sublevel, mask.clone(), layout.region)?;
        ct = ctx.rescale(&ctx.mult_plain(&ct, &pt))?;
        exact.iter_mut().for_each(|v| *v *= w);
    }
    let got = &ctx.decode(&ct)[0];
    let norm = exact.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    Ok(got.iter().zip(&exact).fold(0.0f64, |m, (a, b)| m.max((a - b).abs())) / norm)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exact_moduli_leave_only_rounding() {
        let q = perturbed_moduli(40, 1, 0.0, 4);
        let e = rescale_error_probe(40, 1, &q, 4).unwrap();
        assert!(e < 1e-10, "{e}");
    }

    #[test]
    fn larger_deviation_larger_error() {
        let a = rescale_error_probe(30, 2, &perturbed_moduli(30, 2, 1e-3, 3), 3).unwrap();
        let b = rescale_error_probe(30, 2, &perturbed_moduli(30, 2, 1e-2, 3), 3).unwrap();
        assert!(b >= a);
    }

    #[test]
    fn deeper_chain_no_smaller_error() {
        let q = perturbed_moduli(30, 2, 1e-3, 6);
        let errs: Vec<f64> = (1..=6).map(|d| rescale_error_probe(30, 2, &q, d).unwrap()).collect();
        assert!(errs.windows(2).all(|w| w[1] >= w[0]), "{errs:?}");
    }

    #[test]
    fn too_deep_is_an_error() {
        assert!(rescale_error_probe(30, 1, &perturbed_moduli(30, 1, 0.0, 2), 3).is_err());
    }
}
