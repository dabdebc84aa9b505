use std::collections::{BTreeMap, HashMap};
use std::sync::Arc;

use num_bigint::BigInt;
use serde::{Deserialize, Serialize};

use super::program::{CircuitProgram, Instr};
use super::{SimCiphertext, SimContext, SimPlaintext};
use crate::error::{Error, Result};
use crate::graph::Tensor;
use crate::levels::sublevel;

/// Which rescale moduli the run divides by.
#[derive(Clone, Debug, Default, PartialEq)]
pub enum ModuliMode {
    /// `q_i = Δ^λ(q_i)` exactly.
    #[default]
    Exact,
    /// The concrete primes carried by the plan.
    Primes,
    /// Caller-supplied `q_1..q_L`.
    Custom(Vec<BigInt>),
}

#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    pub moduli: ModuliMode,
    pub trace: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceEntry {
    pub index: usize,
    pub op: String,
    pub sublevel: u32,
    pub level: u32,
    pub scale_log2: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PlaintextStats {
    /// Plaintexts encoded over the run.
    pub materialized: usize,
    /// Distinct weight encodings per `(conv node, kernel column)`.
    pub per_slice: BTreeMap<String, usize>,
}

impl PlaintextStats {
    pub fn max_per_slice(&self) -> usize {
        self.per_slice.values().copied().max().unwrap_or(0)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunOutput {
    /// Logits per ensemble member.
    pub members: Vec<Vec<f64>>,
    pub averaged: Vec<f64>,
    /// Level of the decoded outputs; 0 means they sit on `q_0`.
    pub final_level: u32,
    pub rescales: usize,
    pub plaintexts: PlaintextStats,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub trace: Vec<TraceEntry>,
}

fn context(prog: &CircuitProgram, mode: &ModuliMode) -> Result<SimContext> {
    let sublevels: Vec<u32> = prog.plan.rescale_moduli().map(|m| m.sublevel).collect();
    let moduli = match mode {
        ModuliMode::Exact => prog.plan.exact_moduli(),
        ModuliMode::Primes => prog
            .plan
            .prime_moduli()
            .ok_or_else(|| Error::Invalid("plan carries no concrete primes".into()))?,
        ModuliMode::Custom(q) => q.clone(),
    };
    if moduli.len() != sublevels.len() {
        return Err(Error::Invalid(format!("{} moduli for a chain of {}", moduli.len(), sublevels.len())));
    }
    Ok(SimContext { delta_bits: prog.delta_bits, moduli, moduli_sublevels: sublevels })
}

/// Encodes each input channel at the top level, replicated into every region.
pub fn encode_input(ctx: &SimContext, prog: &CircuitProgram, input: &Tensor) -> Result<Vec<SimCiphertext>> {
    let l = &prog.input_layout;
    if input.shape.channels != prog.input_channels || input.shape.height != l.height || input.shape.width != l.width {
        return Err(Error::Shape(format!(
            "input {:?} does not match the program's {}x{}x{}",
            input.shape, prog.input_channels, l.height, l.width
        )));
    }
    let hw = l.height * l.width;
    (0..prog.input_channels)
        .map(|c| {
            let vals = input.data[c * hw..(c + 1) * hw].to_vec();
            ctx.encode(&vec![vals; prog.replicas], l, ctx.top_level())
        })
        .collect()
}

/// Executes `prog` on one input image.
pub fn run_circuit(prog: &CircuitProgram, input: &Tensor, opts: &RunOptions) -> Result<RunOutput> {
    let ctx = context(prog, &opts.moduli)?;
    let delta = ctx.delta();
    let inputs = encode_input(&ctx, prog, input)?;
    let nregs = prog.instrs.iter().filter_map(Instr::dst).max().map_or(0, |r| r + 1);
    let mut last_use = vec![0usize; nregs];
    for (i, ins) in prog.instrs.iter().enumerate() {
        for s in ins.sources() {
            last_use[s] = i;
        }
    }
    let mut regs: Vec<Option<SimCiphertext>> = vec![None; nregs];
    let mut cache: HashMap<usize, Arc<SimPlaintext>> = HashMap::new();
    let masks: Vec<Arc<Vec<usize>>> = prog.masks.iter().map(|m| Arc::new(m.clone())).collect();
    let region = prog.input_layout.region;
    let mut outputs: BTreeMap<usize, SimCiphertext> = BTreeMap::new();
    let mut trace = Vec::new();
    let mut rescales = 0;
    let cap = 2 * prog.sublevel;

    for (i, ins) in prog.instrs.iter().enumerate() {
        let get = |r: usize| regs[r].as_ref().ok_or_else(|| Error::Invalid(format!("instruction {i} reads empty register {r}")));
        let mut plain = |p: usize| -> Result<Arc<SimPlaintext>> {
            if let Some(pt) = cache.get(&p) {
                return Ok(pt.clone());
            }
            let spec = prog.plaintexts.get(p).ok_or_else(|| Error::Invalid(format!("no plaintext {p}")))?;
            let pt = Arc::new(ctx.encode_plain(&spec.values, spec.sublevel, masks[spec.mask].clone(), region)?);
            cache.insert(p, pt.clone());
            Ok(pt)
        };
        let out = match *ins {
            Instr::Encode { channel, .. } => Some(inputs[channel].clone()),
            Instr::Add { a, b, .. } => Some(ctx.add(get(a)?, get(b)?)?),
            Instr::AddPlain { a, pt, .. } => Some(ctx.add_plain(get(a)?, &*plain(pt)?)?),
            Instr::MultPlain { a, pt, .. } => {
                let p = plain(pt)?;
                let mut ct = ctx.mult_plain(get(a)?, &p);
                if let Some(l) = prog.plaintexts[pt].layout {
                    ct.layout = prog.layouts[l].clone();
                }
                Some(ct)
            }
            Instr::MultCt { a, b, .. } => Some(ctx.mult_ct(get(a)?, get(b)?)),
            Instr::Rotate { a, step, .. } => Some(ctx.rotate(get(a)?, step)),
            Instr::Rescale { a, .. } => {
                rescales += 1;
                Some(ctx.rescale(get(a)?)?)
            }
            Instr::Decode { src, index } => {
                outputs.insert(index, get(src)?.clone());
                None
            }
        };
        if let Some(ct) = &out {
            if sublevel(ct.meta.scale, delta) != ct.meta.sublevel {
                return Err(Error::Invalid(format!(
                    "instruction {i}: scale 2^{:.3} disagrees with sublevel {}",
                    ct.meta.scale.log2(),
                    ct.meta.sublevel
                )));
            }
            if ct.meta.sublevel > cap {
                return Err(Error::DepthExhausted(format!(
                    "schedule violation at instruction {i}: sublevel {} exceeds {cap}",
                    ct.meta.sublevel
                )));
            }
            if opts.trace {
                trace.push(TraceEntry {
                    index: i,
                    op: ins.name().to_string(),
                    sublevel: ct.meta.sublevel,
                    level: ct.meta.level,
                    scale_log2: ct.meta.scale.log2(),
                });
            }
        }
        if let Some(d) = ins.dst() {
            regs[d] = out;
        }
        for s in ins.sources() {
            if last_use[s] == i {
                regs[s] = None;
            }
        }
    }

    let mut per_slice: BTreeMap<String, usize> = BTreeMap::new();
    for &p in cache.keys() {
        if let Some((node, col)) = prog.plaintexts[p].slice {
            *per_slice.entry(format!("{node}:{col}")).or_insert(0) += 1;
        }
    }
    let plaintexts = PlaintextStats { materialized: cache.len(), per_slice };

    if prog.instrs.is_empty() {
        // Nothing to execute: the input itself is the output.
        let mut members = vec![Vec::new(); prog.replicas];
        for ct in &inputs {
            for (r, v) in ctx.decode(ct).into_iter().enumerate() {
                members[r].extend(v);
            }
        }
        let averaged = average(&members);
        return Ok(RunOutput { members, averaged, final_level: ctx.top_level(), rescales, plaintexts, trace });
    }
    let pos = prog.output_layout.positions();
    let mut members = vec![Vec::with_capacity(prog.outputs * pos.len()); prog.replicas];
    let mut final_level = u32::MAX;
    for index in 0..prog.outputs {
        let ct = outputs.get(&index).ok_or_else(|| Error::Invalid(format!("output {index} never decoded")))?;
        final_level = final_level.min(ct.meta.level);
        for (r, m) in members.iter_mut().enumerate() {
            m.extend(pos.iter().map(|&p| ctx.decode_slot(ct, r * region + p)));
        }
    }
    if prog.outputs == 0 {
        final_level = ctx.top_level();
    }
    let averaged = average(&members);
    Ok(RunOutput { members, averaged, final_level, rescales, plaintexts, trace })
}

/// Client-side logit average over ensemble members.
pub fn average(members: &[Vec<f64>]) -> Vec<f64> {
    let Some(first) = members.first() else { return Vec::new() };
    let m = members.len() as f64;
    (0..first.len()).map(|i| members.iter().map(|v| v[i]).sum::<f64>() / m).collect()
}
