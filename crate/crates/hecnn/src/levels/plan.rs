use std::collections::BTreeMap;

use num_bigint::BigInt;
use num_traits::Num;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{ModelGraph, NodeId};
use crate::sim::{compile, LowerConfig};

/// Rescales inserted after each node, by node id.
pub type RescaleSchedule = BTreeMap<NodeId, u32>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModulusRole {
    Output,
    Rescale,
    Special,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModulusSpec {
    pub role: ModulusRole,
    pub bits: u32,
    /// `round(log_Δ 2^bits)`.
    pub sublevel: u32,
    /// Concrete prime, carried as metadata only.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hex: Option<String>,
}

/// Ordered `q_0, q_1..q_L, P`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModulusChainPlan {
    pub delta_bits: u32,
    pub log_n: u32,
    pub sublevel: u32,
    pub moduli: Vec<ModulusSpec>,
    pub total_bits: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub preset: Option<String>,
}

impl ModulusChainPlan {
    /// Default chain: rescale moduli of exactly `sublevel * delta_bits` bits,
    /// an output modulus one bit above `Δ`, and a special modulus as large
    /// as the largest rescale modulus.
    pub fn standard(delta_bits: u32, sublevel: u32, rescales: u32, log_n: u32) -> Self {
        let rb = sublevel * delta_bits;
        let mut moduli = vec![ModulusSpec { role: ModulusRole::Output, bits: delta_bits + 1, sublevel: 1, hex: None }];
        moduli.extend((0..rescales).map(|_| ModulusSpec { role: ModulusRole::Rescale, bits: rb, sublevel, hex: None }));
        moduli.push(ModulusSpec { role: ModulusRole::Special, bits: rb.max(delta_bits + 1), sublevel, hex: None });
        let mut p = Self { delta_bits, log_n, sublevel, moduli, total_bits: 0, preset: None };
        p.total_bits = p.moduli.iter().map(|m| m.bits).sum();
        p
    }

    pub fn rescale_count(&self) -> usize {
        self.moduli.iter().filter(|m| m.role == ModulusRole::Rescale).count()
    }

    /// Rescale moduli `q_1..q_L` in chain order.
    pub fn rescale_moduli(&self) -> impl Iterator<Item = &ModulusSpec> {
        self.moduli.iter().filter(|m| m.role == ModulusRole::Rescale)
    }

    /// Rescale moduli as exact powers `Δ^λ(q_i)`.
    pub fn exact_moduli(&self) -> Vec<BigInt> {
        self.rescale_moduli().map(|m| BigInt::from(1) << (m.sublevel * self.delta_bits) as usize).collect()
    }

    /// Rescale moduli as the concrete primes, when the plan carries them.
    pub fn prime_moduli(&self) -> Option<Vec<BigInt>> {
        self.rescale_moduli()
            .map(|m| {
                let h = m.hex.as_ref()?;
                BigInt::from_str_radix(h.trim_start_matches("0x"), 16).ok()
            })
            .collect()
    }
}

/// Parameter set shipped as JSON under `presets/`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Preset {
    pub name: String,
    pub log_n: u32,
    pub delta_bits: u32,
    pub sublevel: u32,
    pub rescale_bits: u32,
    pub rescale_count: u32,
    pub output_bits: u32,
    pub special_bits: u32,
    pub rescale_hex: Vec<String>,
    pub output_hex: String,
    pub special_hex: String,
}

impl Preset {
    pub fn builtin(name: &str) -> Option<Preset> {
        let text = match name.to_ascii_lowercase().as_str() {
            "rn18" => include_str!("../../presets/rn18.json"),
            "rn20" => include_str!("../../presets/rn20.json"),
            "rn32" => include_str!("../../presets/rn32.json"),
            _ => return None,
        };
        Some(serde_json::from_str(text).expect("bundled preset parses"))
    }

    pub fn total_bits(&self) -> u32 {
        self.rescale_count * self.rescale_bits + self.output_bits + self.special_bits
    }

    pub fn to_plan(&self) -> ModulusChainPlan {
        let lam = |bits: u32| ((bits as f64) / self.delta_bits as f64).round() as u32;
        let mut moduli = vec![ModulusSpec {
            role: ModulusRole::Output,
            bits: self.output_bits,
            sublevel: lam(self.output_bits),
            hex: Some(self.output_hex.clone()),
        }];
        moduli.extend(self.rescale_hex.iter().map(|h| ModulusSpec {
            role: ModulusRole::Rescale,
            bits: self.rescale_bits,
            sublevel: lam(self.rescale_bits),
            hex: Some(h.clone()),
        }));
        moduli.push(ModulusSpec {
            role: ModulusRole::Special,
            bits: self.special_bits,
            sublevel: lam(self.special_bits),
            hex: Some(self.special_hex.clone()),
        });
        ModulusChainPlan {
            delta_bits: self.delta_bits,
            log_n: self.log_n,
            sublevel: self.sublevel,
            moduli,
            total_bits: self.total_bits(),
            preset: Some(self.name.clone()),
        }
    }
}

/// Walks the circuit lowering of `g` and sizes the chain to the rescales it
/// needs. With a preset, `Δ` and `ℓ` must match it and its modulus count
/// must equal the requirement.
pub fn plan_modulus_chain(
    g: &ModelGraph,
    delta_bits: u32,
    sublevel: u32,
    preset: Option<&Preset>,
) -> Result<(ModulusChainPlan, RescaleSchedule)> {
    if let Some(p) = preset {
        if p.delta_bits != delta_bits || p.sublevel != sublevel {
            return Err(Error::Invalid(format!(
                "preset {} uses Δ = 2^{} and ℓ = {}, requested 2^{delta_bits} and {sublevel}",
                p.name, p.delta_bits, p.sublevel
            )));
        }
    }
    let cfg = LowerConfig { delta_bits, sublevel, slots: None };
    let compiled = compile(std::slice::from_ref(g), &cfg)?;
    let need = compiled.depth;
    let plan = match preset {
        Some(p) => {
            if p.rescale_count != need {
                return Err(Error::DepthExhausted(format!(
                    "preset {} has {} rescale moduli, the circuit needs {need}",
                    p.name, p.rescale_count
                )));
            }
            p.to_plan()
        }
        None => {
            let log_n = (2 * compiled.program.slots).trailing_zeros();
            ModulusChainPlan::standard(delta_bits, sublevel, need, log_n)
        }
    };
    Ok((plan, compiled.schedule))
}
