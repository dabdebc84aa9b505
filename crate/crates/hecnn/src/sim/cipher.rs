//! Scaled-integer slot arithmetic with CKKS scale and level bookkeeping.

use std::sync::Arc;

use num_bigint::BigInt;
use num_integer::Integer;
use num_traits::{FromPrimitive, ToPrimitive, Zero};

use super::SlotLayout;
use crate::error::{Error, Result};
use crate::levels::{apply_rescale, CiphertextMeta};

#[derive(Clone, Debug, PartialEq)]
pub struct SimCiphertext {
    pub slots: Vec<BigInt>,
    pub meta: CiphertextMeta,
    pub layout: SlotLayout,
}

/// Plaintext holding one value per replica region on a set of
/// region-relative slots, zero elsewhere.
#[derive(Clone, Debug, PartialEq)]
pub struct SimPlaintext {
    pub sublevel: u32,
    pub values: Vec<BigInt>,
    pub mask: Arc<Vec<usize>>,
    pub region: usize,
}

impl SimPlaintext {
    pub fn slots(&self, n: usize) -> Vec<BigInt> {
        let mut out = vec![BigInt::zero(); n];
        for (r, v) in self.values.iter().enumerate() {
            for &s in self.mask.iter() {
                out[r * self.region + s] = v.clone();
            }
        }
        out
    }
}

/// Encoding parameters and the concrete rescale moduli `q_1..q_L`.
#[derive(Clone, Debug)]
pub struct SimContext {
    pub delta_bits: u32,
    pub moduli: Vec<BigInt>,
    /// `λ(q_i)` per modulus; the nominal value of `q_i` is `Δ^λ(q_i)`.
    pub moduli_sublevels: Vec<u32>,
}

impl SimContext {
    pub fn exact(delta_bits: u32, sublevel: u32, count: usize) -> Self {
        let q = BigInt::from(1) << (sublevel * delta_bits) as usize;
        Self { delta_bits, moduli: vec![q; count], moduli_sublevels: vec![sublevel; count] }
    }

    pub fn delta(&self) -> f64 {
        2f64.powi(self.delta_bits as i32)
    }

    pub fn top_level(&self) -> u32 {
        self.moduli.len() as u32
    }

    fn pow_delta(&self, sublevel: u32) -> f64 {
        2f64.powi((self.delta_bits * sublevel) as i32)
    }

    /// `round(v * Δ^sublevel)`.
    pub fn encode_value(&self, v: f64, sublevel: u32) -> Result<BigInt> {
        let s = v * self.pow_delta(sublevel);
        BigInt::from_f64(s.round()).ok_or_else(|| Error::NonFinite(format!("cannot encode {v}")))
    }

    pub fn encode_plain(&self, values: &[f64], sublevel: u32, mask: Arc<Vec<usize>>, region: usize) -> Result<SimPlaintext> {
        if sublevel == 0 {
            return Err(Error::Invalid("plaintext sublevel must be >= 1".into()));
        }
        let values = values.iter().map(|&v| self.encode_value(v, sublevel)).collect::<Result<_>>()?;
        Ok(SimPlaintext { sublevel, values, mask, region })
    }

    /// Encodes logical values (`values[replica][pixel]`, row-major) at scale `Δ`.
    pub fn encode(&self, values: &[Vec<f64>], layout: &SlotLayout, level: u32) -> Result<SimCiphertext> {
        let mut slots = vec![BigInt::zero(); layout.slots];
        let pos = layout.positions();
        for (r, vals) in values.iter().enumerate() {
            if vals.len() != pos.len() {
                return Err(Error::Shape(format!("{} values for {} pixels", vals.len(), pos.len())));
            }
            for (&p, &v) in pos.iter().zip(vals) {
                slots[r * layout.region + p] = self.encode_value(v, 1)?;
            }
        }
        Ok(SimCiphertext { slots, meta: CiphertextMeta::new(self.delta(), level, self.delta()), layout: layout.clone() })
    }

    /// Logical values per replica.
    pub fn decode(&self, ct: &SimCiphertext) -> Vec<Vec<f64>> {
        let pos = ct.layout.positions();
        (0..ct.layout.replicas)
            .map(|r| pos.iter().map(|&p| self.decode_slot(ct, r * ct.layout.region + p)).collect())
            .collect()
    }

    pub fn decode_slot(&self, ct: &SimCiphertext, slot: usize) -> f64 {
        ct.slots[slot].to_f64().unwrap_or(f64::NAN) / ct.meta.scale
    }

    fn meta(&self, scale: f64, level: u32, sublevel: u32) -> CiphertextMeta {
        CiphertextMeta { scale, level, sublevel }
    }

    pub fn add(&self, a: &SimCiphertext, b: &SimCiphertext) -> Result<SimCiphertext> {
        if a.meta.sublevel != b.meta.sublevel || a.meta.scale != b.meta.scale {
            return Err(Error::Invalid(format!(
                "add of mismatched scales (sublevels {} and {})",
                a.meta.sublevel, b.meta.sublevel
            )));
        }
        let slots = a.slots.iter().zip(&b.slots).map(|(x, y)| x + y).collect();
        let mut layout = a.layout.clone();
        layout.dirty |= b.layout.dirty;
        Ok(SimCiphertext {
            slots,
            meta: self.meta(a.meta.scale, a.meta.level.min(b.meta.level), a.meta.sublevel),
            layout,
        })
    }

    pub fn add_plain(&self, a: &SimCiphertext, p: &SimPlaintext) -> Result<SimCiphertext> {
        if a.meta.sublevel != p.sublevel {
            return Err(Error::Invalid(format!(
                "add_plain of sublevel {} plaintext to sublevel {} ciphertext",
                p.sublevel, a.meta.sublevel
            )));
        }
        let mut out = a.clone();
        for (r, v) in p.values.iter().enumerate() {
            for &s in p.mask.iter() {
                out.slots[r * p.region + s] += v;
            }
        }
        Ok(out)
    }

    /// Products outside the plaintext mask are zero.
    pub fn mult_plain(&self, a: &SimCiphertext, p: &SimPlaintext) -> SimCiphertext {
        let mut slots = vec![BigInt::zero(); a.slots.len()];
        for (r, v) in p.values.iter().enumerate() {
            if v.is_zero() {
                continue;
            }
            for &s in p.mask.iter() {
                let i = r * p.region + s;
                if !a.slots[i].is_zero() {
                    slots[i] = &a.slots[i] * v;
                }
            }
        }
        let sub = a.meta.sublevel + p.sublevel;
        let mut layout = a.layout.clone();
        layout.dirty = false;
        SimCiphertext { slots, meta: self.meta(a.meta.scale * self.pow_delta(p.sublevel), a.meta.level, sub), layout }
    }

    pub fn mult_ct(&self, a: &SimCiphertext, b: &SimCiphertext) -> SimCiphertext {
        let slots = a.slots.iter().zip(&b.slots).map(|(x, y)| x * y).collect();
        let mut layout = a.layout.clone();
        layout.dirty = a.layout.dirty || b.layout.dirty;
        SimCiphertext {
            slots,
            meta: self.meta(
                a.meta.scale * b.meta.scale,
                a.meta.level.min(b.meta.level),
                a.meta.sublevel + b.meta.sublevel,
            ),
            layout,
        }
    }

    /// Left rotation: output slot `i` takes input slot `i + step`.
    pub fn rotate(&self, a: &SimCiphertext, step: i64) -> SimCiphertext {
        let n = a.slots.len() as i64;
        let k = step.rem_euclid(n) as usize;
        let mut slots = a.slots.clone();
        slots.rotate_left(k);
        SimCiphertext { slots, meta: a.meta, layout: a.layout.clone() }
    }

    /// Divides by the next modulus `q_Λ` with rounding. The scale is
    /// divided by the nominal `Δ^λ(q)`, so a modulus that deviates from it
    /// shows up as value error.
    pub fn rescale(&self, a: &SimCiphertext) -> Result<SimCiphertext> {
        let lvl = a.meta.level as usize;
        if lvl == 0 || lvl > self.moduli.len() {
            return Err(Error::DepthExhausted(format!("rescale at level {lvl}")));
        }
        let q = &self.moduli[lvl - 1];
        let qs = self.moduli_sublevels[lvl - 1];
        let meta = apply_rescale(&a.meta, self.pow_delta(qs), qs)?;
        let two_q: BigInt = q << 1;
        let slots = a
            .slots
            .iter()
            .map(|x| if x.is_zero() { BigInt::zero() } else { ((x << 1usize) + q).div_floor(&two_q) })
            .collect();
        Ok(SimCiphertext { slots, meta, layout: a.layout.clone() })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ctx() -> SimContext {
        SimContext::exact(20, 1, 4)
    }

    fn layout() -> SlotLayout {
        SlotLayout::for_image(2, 2, 8, 1, 0).unwrap()
    }

    #[test]
    fn encode_decode_round_trip() {
        let c = ctx();
        let x = vec![vec![0.1, -2.5, 3.25, 1e-3]];
        let ct = c.encode(&x, &layout(), 4).unwrap();
        for (a, b) in c.decode(&ct)[0].iter().zip(&x[0]) {
            assert!((a - b).abs() <= 0.5 / c.delta());
        }
        assert!(ct.slots[4..].iter().all(|s| s.is_zero()));
    }

    #[test]
    fn rotation_is_a_permutation() {
        let c = ctx();
        let ct = c.encode(&[vec![1.0, 2.0, 3.0, 4.0]], &layout(), 1).unwrap();
        let r = c.rotate(&ct, 3);
        let mut a = ct.slots.clone();
        let mut b = r.slots.clone();
        a.sort();
        b.sort();
        assert_eq!(a, b);
        assert_eq!(r.slots[0], ct.slots[3]);
        assert_eq!(c.rotate(&ct, -1).slots[1], ct.slots[0]);
    }

    #[test]
    fn exact_rescale_rounds() {
        let c = ctx();
        let mut ct = c.encode(&[vec![0.0; 4]], &layout(), 2).unwrap();
        let d = BigInt::from(1u64 << 20);
        ct.slots[0] = &d * 7i32 + 3i32;
        ct.slots[1] = -(&d * 5i32) - (&d / 2i32);
        ct.slots[2] = &d * 2i32 - 1i32;
        ct.meta = CiphertextMeta::new(c.delta().powi(2), 2, c.delta());
        let r = c.rescale(&ct).unwrap();
        assert_eq!(r.slots[0], BigInt::from(7));
        assert_eq!(r.slots[1], BigInt::from(-5));
        assert_eq!(r.slots[2], BigInt::from(2));
        assert_eq!((r.meta.level, r.meta.sublevel, r.meta.scale), (1, 1, c.delta()));
    }

    #[test]
    fn products_track_scale() {
        let c = ctx();
        let l = layout();
        let a = c.encode(&[vec![1.5, -1.0, 0.5, 2.0]], &l, 3).unwrap();
        let sq = c.mult_ct(&a, &a);
        assert_eq!(sq.meta.sublevel, 2);
        assert_eq!(sq.meta.scale, c.delta().powi(2));
        let p = c.encode_plain(&[3.0], 1, Arc::new(vec![0, 3]), 8).unwrap();
        let m = c.mult_plain(&sq, &p);
        assert_eq!(m.meta.sublevel, 3);
        let v = c.decode(&m)[0].clone();
        assert_eq!(v, vec![6.75, 0.0, 0.0, 12.0]);
        let down = c.rescale(&c.rescale(&m).unwrap()).unwrap();
        assert_eq!(down.meta.level, 1);
        assert!((c.decode(&down)[0][0] - 6.75).abs() < 1e-5);
    }

    #[test]
    fn add_requires_matching_scale() {
        let c = ctx();
        let a = c.encode(&[vec![1.0; 4]], &layout(), 2).unwrap();
        let b = c.mult_ct(&a, &a);
        assert!(c.add(&a, &b).is_err());
        assert!(c.add(&a, &a).is_ok());
    }
}
