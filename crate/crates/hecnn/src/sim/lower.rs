//! Lowering of a model graph to a circuit program.
//!
//! Every node output is a set of per-channel ciphertexts sharing one
//! sublevel `λ` and one rescale count. After each node the value is settled:
//! while `λ > ℓ` it is rescaled by a modulus of sublevel `ℓ`. Operands are
//! settled before any multiplication, except the top power of a monic
//! polynomial, which is only added.
//!
//! Conv taps are rotations of the input by the tap offset, multiplied by
//! a plaintext holding the weight on the output pixels whose tap column is
//! in bounds. The plaintext therefore depends only on the layer, the kernel
//! column and the weight value. Out-of-bounds rows read the zero margin.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use super::program::{CircuitProgram, Instr, PlainSpec, Reg};
use super::SlotLayout;
use crate::error::{Error, Result};
use crate::graph::{ConvNode, ModelGraph, Node, NodeId, PolySkipNode};
use crate::levels::{ModulusChainPlan, RescaleSchedule};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LowerConfig {
    pub delta_bits: u32,
    /// `ℓ`, the sublevel of every rescale modulus.
    pub sublevel: u32,
    /// Slot count `N/2`; the smallest power of two that fits when `None`.
    pub slots: Option<usize>,
}

#[derive(Clone, Debug)]
pub struct Compiled {
    pub program: CircuitProgram,
    pub schedule: RescaleSchedule,
    /// Rescale moduli the circuit consumes.
    pub depth: u32,
}

/// Lowers an ensemble of identically shaped models, one per slot region.
pub fn compile(models: &[ModelGraph], cfg: &LowerConfig) -> Result<Compiled> {
    let Some(base) = models.first() else {
        return Err(Error::Invalid("no models to compile".into()));
    };
    if cfg.sublevel == 0 || cfg.delta_bits == 0 {
        return Err(Error::Invalid("Δ and ℓ must be >= 1".into()));
    }
    let shapes = base.validate()?;
    for m in &models[1..] {
        m.validate()?;
        if !same_structure(base, m) {
            return Err(Error::Graph("ensemble members differ in topology".into()));
        }
    }
    let members = models.iter().map(fold_skip_scale).collect::<Result<Vec<_>>>()?;
    let input = base.input_id()?;
    let in_shape = shapes[&input];
    let margin = margin_rows(base)?;
    let per_region = (in_shape.height + 2 * margin) * in_shape.width;
    let slots = cfg.slots.unwrap_or_else(|| (per_region * models.len()).next_power_of_two());
    let layout = SlotLayout::for_image(in_shape.height, in_shape.width, slots, models.len(), margin)?;
    let mut l = Lowerer::new(&members, cfg.sublevel, layout);
    l.run()?;
    let depth = l.max_depth;
    let log_n = (2 * slots).trailing_zeros();
    let plan = ModulusChainPlan::standard(cfg.delta_bits, cfg.sublevel, depth, log_n);
    let program = CircuitProgram {
        slots,
        replicas: models.len(),
        delta_bits: cfg.delta_bits,
        sublevel: cfg.sublevel,
        input_channels: in_shape.channels,
        input_layout: l.input_layout.clone(),
        output_layout: l.output_layout.clone().expect("validated graph has an output"),
        layouts: l.layouts,
        masks: l.masks,
        plaintexts: l.pts,
        instrs: l.instrs,
        outputs: l.outputs,
        plan,
    };
    Ok(Compiled { program, schedule: l.schedule, depth })
}

fn same_structure(a: &ModelGraph, b: &ModelGraph) -> bool {
    if a.edges() != b.edges() || a.node_ids() != b.node_ids() {
        return false;
    }
    a.nodes().zip(b.nodes()).all(|((_, x), (_, y))| match (x, y) {
        (Node::Input(s), Node::Input(t)) => s == t,
        (Node::Conv(c), Node::Conv(d)) => {
            (c.out_channels, c.in_channels, c.kernel_h, c.kernel_w, c.stride, c.padding)
                == (d.out_channels, d.in_channels, d.kernel_h, d.kernel_w, d.stride, d.padding)
        }
        (Node::BatchNorm(c), Node::BatchNorm(d)) => c.channels() == d.channels(),
        (Node::PolyAct(c), Node::PolyAct(d)) => c.degree() == d.degree(),
        (Node::PolySkip(c), Node::PolySkip(d)) => c.monomials == d.monomials,
        (Node::AvgPool(c), Node::AvgPool(d)) => c.window == d.window,
        (Node::Linear(c), Node::Linear(d)) => (c.out_features, c.in_features) == (d.out_features, d.in_features),
        (Node::Add, Node::Add) | (Node::Output, Node::Output) => true,
        _ => false,
    })
}

/// Zero rows needed above and below the image so that padded taps never
/// leave the region.
fn margin_rows(g: &ModelGraph) -> Result<usize> {
    let mut gap: BTreeMap<NodeId, usize> = BTreeMap::new();
    let mut margin = 0;
    for id in g.topo_order()? {
        let ins = g.inputs(id);
        let gin = ins.first().map_or(1, |i| gap[i]);
        let out = match g.node(id).unwrap() {
            Node::Conv(c) => {
                margin = margin.max(c.padding * gin);
                gin * c.stride
            }
            Node::AvgPool(p) => gin * p.window,
            _ => gin,
        };
        gap.insert(id, out);
    }
    Ok(margin)
}

/// `S(x, y)` is `(x + a y)^2 + d_X (x + a y) + d_0` on every row.
fn separable(p: &PolySkipNode) -> bool {
    let want: BTreeSet<(u32, u32)> = PolySkipNode::QUADRATIC.into_iter().collect();
    let have: BTreeSet<(u32, u32)> = p.monomials.iter().copied().collect();
    if want != have || have.len() != p.monomials.len() || !p.is_monic() {
        return false;
    }
    let close = |u: f64, v: f64| (u - v).abs() <= 1e-9 * u.abs().max(v.abs()).max(1.0);
    (0..p.coeffs.len()).all(|c| {
        let a = p.coeff(c, 1, 1) / 2.0;
        close(p.coeff(c, 0, 2), a * a) && close(p.coeff(c, 0, 1), a * p.coeff(c, 1, 0))
    })
}

/// Moves the skip-branch factor `a` of a separable polyskip into the conv
/// that produces its `y` input, when that conv feeds nothing else. The
/// polyskip then adds `x + y` directly.
pub fn fold_skip_scale(g: &ModelGraph) -> Result<ModelGraph> {
    let mut h = g.clone();
    for id in g.ids_of_kind(crate::graph::NodeKind::PolySkip) {
        let ins = h.inputs(id);
        let (x, y) = (ins[0], ins[1]);
        let Some(Node::PolySkip(p)) = h.node(id) else { continue };
        if x == y || !separable(p) || h.consumers(y) != [id] {
            continue;
        }
        let Some(Node::Conv(conv)) = h.node(y) else { continue };
        let n = conv.out_channels;
        let a: Vec<f64> = (0..n).map(|c| p.coeff(c, 1, 1) / 2.0).collect();
        if a.iter().any(|v| *v == 0.0 || !v.is_finite()) || a.iter().all(|v| *v == 1.0) {
            continue;
        }
        let mut conv: ConvNode = conv.clone();
        let per = conv.in_channels * conv.kernel_h * conv.kernel_w;
        for (i, w) in conv.weights.iter_mut().enumerate() {
            *w *= a[i / per];
        }
        for (o, b) in conv.bias.iter_mut().enumerate() {
            *b *= a[o];
        }
        let k11 = p.position(1, 1).unwrap();
        let coeffs = (0..n)
            .map(|c| {
                let mut r: Vec<f64> =
                    p.row(c).iter().zip(&p.monomials).map(|(v, &(_, j))| v * a[c].powi(-(j as i32))).collect();
                r[k11] = 2.0;
                r
            })
            .collect();
        let skip = PolySkipNode { monomials: p.monomials.clone(), coeffs };
        *h.node_mut(y).unwrap() = Node::Conv(conv);
        *h.node_mut(id).unwrap() = Node::PolySkip(skip);
    }
    Ok(h)
}

#[derive(Clone, Debug)]
struct Val {
    regs: Vec<Reg>,
    lam: u32,
    depth: u32,
    layout: SlotLayout,
}

type PtKey = (usize, Vec<u64>, u32, Option<(NodeId, usize)>, Option<usize>);

struct Lowerer<'a> {
    members: &'a [ModelGraph],
    ell: u32,
    input_layout: SlotLayout,
    output_layout: Option<SlotLayout>,
    outputs: usize,
    instrs: Vec<Instr>,
    masks: Vec<Vec<usize>>,
    mask_ids: HashMap<Vec<usize>, usize>,
    layouts: Vec<SlotLayout>,
    pts: Vec<PlainSpec>,
    pt_ids: HashMap<PtKey, usize>,
    next: Reg,
    schedule: RescaleSchedule,
    max_depth: u32,
}

impl<'a> Lowerer<'a> {
    fn new(members: &'a [ModelGraph], ell: u32, layout: SlotLayout) -> Self {
        Self {
            members,
            ell,
            input_layout: layout,
            output_layout: None,
            outputs: 0,
            instrs: Vec::new(),
            masks: Vec::new(),
            mask_ids: HashMap::new(),
            layouts: Vec::new(),
            pts: Vec::new(),
            pt_ids: HashMap::new(),
            next: 0,
            schedule: RescaleSchedule::new(),
            max_depth: 0,
        }
    }

    fn node(&self, m: usize, id: NodeId) -> &'a Node {
        self.members[m].node(id).unwrap()
    }

    fn m(&self) -> usize {
        self.members.len()
    }

    fn reg(&mut self) -> Reg {
        self.next += 1;
        self.next - 1
    }

    fn mask(&mut self, slots: Vec<usize>) -> usize {
        if let Some(&id) = self.mask_ids.get(&slots) {
            return id;
        }
        self.masks.push(slots.clone());
        self.mask_ids.insert(slots, self.masks.len() - 1);
        self.masks.len() - 1
    }

    fn positions_mask(&mut self, l: &SlotLayout) -> usize {
        self.mask(l.positions())
    }

    fn layout_id(&mut self, l: &SlotLayout) -> usize {
        if let Some(i) = self.layouts.iter().position(|x| x == l) {
            return i;
        }
        self.layouts.push(l.clone());
        self.layouts.len() - 1
    }

    fn pt(&mut self, mask: usize, values: Vec<f64>, sublevel: u32, slice: Option<(NodeId, usize)>, layout: Option<usize>) -> usize {
        let key = (mask, values.iter().map(|v| v.to_bits()).collect(), sublevel, slice, layout);
        if let Some(&i) = self.pt_ids.get(&key) {
            return i;
        }
        self.pts.push(PlainSpec { mask, values, sublevel, slice, layout });
        self.pt_ids.insert(key, self.pts.len() - 1);
        self.pts.len() - 1
    }

    fn rotate(&mut self, a: Reg, step: i64) -> Reg {
        if step == 0 {
            return a;
        }
        let dst = self.reg();
        self.instrs.push(Instr::Rotate { dst, a, step });
        dst
    }

    fn mult_plain(&mut self, a: Reg, pt: usize) -> Reg {
        let dst = self.reg();
        self.instrs.push(Instr::MultPlain { dst, a, pt });
        dst
    }

    fn add_reg(&mut self, a: Reg, b: Reg) -> Reg {
        let dst = self.reg();
        self.instrs.push(Instr::Add { dst, a, b });
        dst
    }

    /// Balanced sum of `terms`.
    fn sum(&mut self, mut terms: Vec<Reg>) -> Reg {
        while terms.len() > 1 {
            let mut next = Vec::with_capacity(terms.len().div_ceil(2));
            for pair in terms.chunks(2) {
                next.push(if pair.len() == 2 { self.add_reg(pair[0], pair[1]) } else { pair[0] });
            }
            terms = next;
        }
        terms[0]
    }

    fn values(&self, f: &dyn Fn(usize) -> f64) -> Vec<f64> {
        (0..self.m()).map(f).collect()
    }

    /// Multiplies channel `c` by the per-member constant `f(member, c)` on the
    /// logical pixels of `out`.
    fn mul_const(&mut self, v: &Val, lam_p: u32, out: &SlotLayout, f: &dyn Fn(usize, usize) -> f64) -> Val {
        let mask = self.positions_mask(out);
        let lid = self.layout_id(out);
        let regs = (0..v.regs.len())
            .map(|c| {
                let vals = self.values(&|m| f(m, c));
                let pt = self.pt(mask, vals, lam_p, None, Some(lid));
                self.mult_plain(v.regs[c], pt)
            })
            .collect();
        Val { regs, lam: v.lam + lam_p, depth: v.depth, layout: out.clone() }
    }

    fn add_const(&mut self, v: Val, f: &dyn Fn(usize, usize) -> f64) -> Val {
        let n = v.regs.len();
        if (0..self.m()).all(|m| (0..n).all(|c| f(m, c) == 0.0)) {
            return v;
        }
        let mask = self.positions_mask(&v.layout);
        let regs = (0..n)
            .map(|c| {
                let vals = self.values(&|m| f(m, c));
                let pt = self.pt(mask, vals, v.lam, None, None);
                let dst = self.reg();
                self.instrs.push(Instr::AddPlain { dst, a: v.regs[c], pt });
                dst
            })
            .collect();
        Val { regs, ..v }
    }

    /// Raises `v` to sublevel `lam` by a unit plaintext at the difference.
    fn align(&mut self, v: Val, lam: u32) -> Val {
        if v.lam >= lam {
            return v;
        }
        let layout = v.layout.clone();
        self.mul_const(&v, lam - v.lam, &layout, &|_, _| 1.0)
    }

    fn add(&mut self, a: Val, b: Val) -> Result<Val> {
        if a.layout.positions() != b.layout.positions() {
            return Err(Error::Layout("add of operands with different pixel layouts".into()));
        }
        let lam = a.lam.max(b.lam);
        let (a, b) = (self.align(a, lam), self.align(b, lam));
        let regs = a.regs.iter().zip(&b.regs).map(|(&x, &y)| self.add_reg(x, y)).collect();
        let mut layout = a.layout.clone();
        layout.dirty |= b.layout.dirty;
        Ok(Val { regs, lam, depth: a.depth.max(b.depth), layout })
    }

    fn mul_ct(&mut self, a: &Val, b: &Val) -> Val {
        let regs = a
            .regs
            .iter()
            .zip(&b.regs)
            .map(|(&x, &y)| {
                let dst = self.reg();
                self.instrs.push(Instr::MultCt { dst, a: x, b: y });
                dst
            })
            .collect();
        let mut layout = a.layout.clone();
        layout.dirty |= b.layout.dirty;
        Val { regs, lam: a.lam + b.lam, depth: a.depth.max(b.depth), layout }
    }

    fn settle(&mut self, mut v: Val, node: NodeId) -> Val {
        while v.lam > self.ell {
            v.regs = v
                .regs
                .iter()
                .map(|&a| {
                    let dst = self.reg();
                    self.instrs.push(Instr::Rescale { dst, a, node });
                    dst
                })
                .collect();
            v.lam -= self.ell;
            v.depth += 1;
            *self.schedule.entry(node).or_insert(0) += 1;
        }
        self.max_depth = self.max_depth.max(v.depth);
        v
    }

    fn run(&mut self) -> Result<()> {
        let base = &self.members[0];
        let mut vals: BTreeMap<NodeId, Val> = BTreeMap::new();
        for id in base.topo_order()? {
            let ins: Vec<Val> = base.inputs(id).iter().map(|i| vals[i].clone()).collect();
            let out = match base.node(id).unwrap() {
                Node::Input(s) => {
                    let regs = (0..s.channels)
                        .map(|channel| {
                            let dst = self.reg();
                            self.instrs.push(Instr::Encode { dst, channel });
                            dst
                        })
                        .collect();
                    Val { regs, lam: 1, depth: 0, layout: self.input_layout.clone() }
                }
                Node::Conv(_) => self.conv(id, ins[0].clone())?,
                Node::BatchNorm(b) => {
                    let x = ins[0].clone();
                    let unit = (0..self.m()).all(|m| matches!(self.node(m, id), Node::BatchNorm(b) if b.is_unit_slope()));
                    let _ = b;
                    let members = self.members;
                    let bn = move |m: usize| match members[m].node(id).unwrap() {
                        Node::BatchNorm(b) => b,
                        _ => unreachable!(),
                    };
                    let v = if unit {
                        x
                    } else {
                        let l = x.layout.clone();
                        self.mul_const(&x, 1, &l, &|m, c| bn(m).slope(c))
                    };
                    let v = self.add_const(v, &|m, c| bn(m).intercept(c));
                    self.settle(v, id)
                }
                Node::AvgPool(p) => self.pool(id, p.window, ins[0].clone())?,
                Node::Add => {
                    let v = self.add(ins[0].clone(), ins[1].clone())?;
                    self.settle(v, id)
                }
                Node::PolyAct(p) => {
                    let d = p.degree();
                    let monic = (0..self.m()).all(|m| matches!(self.node(m, id), Node::PolyAct(q) if q.is_monic()));
                    let mons: Vec<(u32, u32)> = (0..=d as u32).map(|i| (i, 0)).collect();
                    let members = self.members;
                    let coef = move |m: usize, c: usize, k: usize| match members[m].node(id).unwrap() {
                        Node::PolyAct(q) => q.row(c)[k],
                        _ => unreachable!(),
                    };
                    let lead = if monic { Some(d) } else { None };
                    self.eval_terms(id, ins[0].clone(), None, &mons, lead, &coef)?
                }
                Node::PolySkip(p) => self.polyskip(id, p, ins[0].clone(), ins[1].clone())?,
                Node::Linear(_) => self.linear(id, ins[0].clone())?,
                Node::Output => {
                    let v = ins[0].clone();
                    for (index, &src) in v.regs.iter().enumerate() {
                        self.instrs.push(Instr::Decode { src, index });
                    }
                    self.outputs = v.regs.len();
                    self.output_layout = Some(v.layout.clone());
                    v
                }
            };
            vals.insert(id, out);
        }
        Ok(())
    }

    fn conv(&mut self, id: NodeId, x: Val) -> Result<Val> {
        let Node::Conv(cb) = self.node(0, id) else { unreachable!() };
        let x = if x.layout.dirty && cb.padding > 0 {
            let lam = x.lam + 1;
            let v = self.align(x, lam);
            self.settle(v, id)
        } else {
            x
        };
        let lay = &x.layout;
        let (g, s, p) = (lay.gap, cb.stride, cb.padding);
        if p * g > lay.margin_rows {
            return Err(Error::Layout(format!("conv {id} needs {} margin rows, layout has {}", p * g, lay.margin_rows)));
        }
        let (ho, wo) = cb
            .out_hw(lay.height, lay.width)
            .ok_or_else(|| Error::Layout(format!("conv {id} kernel exceeds its input")))?;
        let out = lay.subsampled(s, ho, wo);
        out.check()?;
        let lid = self.layout_id(&out);
        let win = lay.width as isize;
        let col_masks: Vec<Option<usize>> = (0..cb.kernel_w)
            .map(|kw| {
                let slots: Vec<usize> = (0..ho)
                    .flat_map(|i| (0..wo).map(move |j| (i, j)))
                    .filter(|&(_, j)| {
                        let c = (j * s + kw) as isize - p as isize;
                        (0..win).contains(&c)
                    })
                    .map(|(i, j)| out.rel_slot(i, j))
                    .collect();
                if slots.is_empty() {
                    None
                } else {
                    Some(self.mask(slots))
                }
            })
            .collect();
        let gw = lay.grid_w as i64;
        let mut rotated: HashMap<(usize, usize, usize), Reg> = HashMap::new();
        for ci in 0..cb.in_channels {
            for kh in 0..cb.kernel_h {
                for (kw, m) in col_masks.iter().enumerate() {
                    if m.is_some() {
                        let step = (kh as i64 - p as i64) * g as i64 * gw + (kw as i64 - p as i64) * g as i64;
                        let r = self.rotate(x.regs[ci], step);
                        rotated.insert((ci, kh, kw), r);
                    }
                }
            }
        }
        let members = self.members;
        let conv_of = |m: usize| match members[m].node(id).unwrap() {
            Node::Conv(c) => c,
            _ => unreachable!(),
        };
        let out_mask = self.positions_mask(&out);
        let mut regs = Vec::with_capacity(cb.out_channels);
        for o in 0..cb.out_channels {
            let mut terms = Vec::new();
            for ci in 0..cb.in_channels {
                for kh in 0..cb.kernel_h {
                    for kw in 0..cb.kernel_w {
                        let Some(mask) = col_masks[kw] else { continue };
                        let vals = self.values(&|m| conv_of(m).weight(o, ci, kh, kw));
                        if vals.iter().all(|v| *v == 0.0) {
                            continue;
                        }
                        let pt = self.pt(mask, vals, 1, Some((id, kw)), Some(lid));
                        let r = rotated[&(ci, kh, kw)];
                        terms.push(self.mult_plain(r, pt));
                    }
                }
            }
            if terms.is_empty() {
                let pt = self.pt(out_mask, vec![0.0; self.m()], 1, None, Some(lid));
                terms.push(self.mult_plain(x.regs[0], pt));
            }
            regs.push(self.sum(terms));
        }
        let v = Val { regs, lam: x.lam + 1, depth: x.depth, layout: out };
        let v = self.add_const(v, &|m, c| conv_of(m).bias[c]);
        Ok(self.settle(v, id))
    }

    fn pool(&mut self, id: NodeId, w: usize, x: Val) -> Result<Val> {
        let lay = &x.layout;
        if lay.height % w != 0 || lay.width % w != 0 {
            return Err(Error::Layout(format!("pool {id} window {w} does not tile {}x{}", lay.height, lay.width)));
        }
        let mut out = lay.subsampled(w, lay.height / w, lay.width / w);
        out.dirty = lay.dirty || w > 1;
        let (g, gw) = (lay.gap as i64, lay.grid_w as i64);
        let regs = x
            .regs
            .iter()
            .map(|&r| {
                let terms: Vec<Reg> = (0..w as i64)
                    .flat_map(|a| (0..w as i64).map(move |b| a * g * gw + b * g))
                    .map(|step| self.rotate(r, step))
                    .collect();
                self.sum(terms)
            })
            .collect();
        let v = Val { regs, lam: x.lam, depth: x.depth, layout: out.clone() };
        let members = self.members;
        let div = move |m: usize| match members[m].node(id).unwrap() {
            Node::AvgPool(p) => p.divisor,
            _ => unreachable!(),
        };
        if (0..self.m()).all(|m| div(m) == 1.0) {
            return Ok(self.settle(v, id));
        }
        out.dirty = false;
        let v = self.mul_const(&v, 1, &out, &|m, _| div(m));
        Ok(self.settle(v, id))
    }

    fn linear(&mut self, id: NodeId, x: Val) -> Result<Val> {
        let Node::Linear(lb) = self.node(0, id) else { unreachable!() };
        let pos = x.layout.positions();
        let anchor = pos[0];
        let hw = pos.len();
        if x.regs.len() * hw != lb.in_features {
            return Err(Error::Layout(format!("linear {id} expects {} inputs", lb.in_features)));
        }
        let out = SlotLayout { height: 1, width: 1, dirty: false, ..x.layout.clone() };
        let lid = self.layout_id(&out);
        let mask = self.mask(vec![anchor]);
        let mut rotated = Vec::with_capacity(x.regs.len() * hw);
        for &r in &x.regs {
            for &p in &pos {
                rotated.push(self.rotate(r, p as i64 - anchor as i64));
            }
        }
        let members = self.members;
        let lin = |m: usize| match members[m].node(id).unwrap() {
            Node::Linear(l) => l,
            _ => unreachable!(),
        };
        let fin = lb.in_features;
        let mut regs = Vec::with_capacity(lb.out_features);
        for k in 0..lb.out_features {
            let mut terms = Vec::new();
            for (f, &r) in rotated.iter().enumerate() {
                let vals = self.values(&|m| lin(m).weights[k * fin + f]);
                if vals.iter().all(|v| *v == 0.0) {
                    continue;
                }
                let pt = self.pt(mask, vals, 1, None, Some(lid));
                terms.push(self.mult_plain(r, pt));
            }
            if terms.is_empty() {
                let pt = self.pt(mask, vec![0.0; self.m()], 1, None, Some(lid));
                terms.push(self.mult_plain(x.regs[0], pt));
            }
            regs.push(self.sum(terms));
        }
        let v = Val { regs, lam: x.lam + 1, depth: x.depth, layout: out };
        let v = self.add_const(v, &|m, k| lin(m).bias[k]);
        Ok(self.settle(v, id))
    }

    fn polyskip(&mut self, id: NodeId, p: &PolySkipNode, x: Val, y: Val) -> Result<Val> {
        let members = self.members;
        let skip = move |m: usize| match members[m].node(id).unwrap() {
            Node::PolySkip(q) => q,
            _ => unreachable!(),
        };
        let fast = (0..self.m()).all(|m| separable(skip(m)));
        if !fast {
            let monic = (0..self.m()).all(|m| skip(m).is_monic());
            let lead = if monic { p.position(p.degree() as u32, 0) } else { None };
            let coef = move |m: usize, c: usize, k: usize| skip(m).row(c)[k];
            return self.eval_terms(id, x, Some(y), &p.monomials.clone(), lead, &coef);
        }
        // v = x + a y, then v^2 + d_X v + d_0.
        let n = x.regs.len();
        let a = move |m: usize, c: usize| skip(m).coeff(c, 1, 1) / 2.0;
        let all = |v: f64| (0..self.m()).all(|m| (0..n).all(|c| a(m, c) == v));
        let v = if all(0.0) {
            x
        } else {
            let ya = if all(1.0) {
                y
            } else {
                let l = y.layout.clone();
                let t = self.mul_const(&y, 1, &l, &a);
                self.settle(t, id)
            };
            self.add(x, ya)?
        };
        let coef = move |m: usize, c: usize, k: usize| match k {
            0 => skip(m).coeff(c, 0, 0),
            1 => skip(m).coeff(c, 1, 0),
            _ => 1.0,
        };
        self.eval_terms(id, v, None, &[(0, 0), (1, 0), (2, 0)], Some(2), &coef)
    }

    /// Evaluates `sum_k coef(k) x^i y^j` over `mons`. `lead` names a monomial
    /// with unit coefficient that is added without a plaintext product.
    fn eval_terms(
        &mut self,
        node: NodeId,
        x: Val,
        y: Option<Val>,
        mons: &[(u32, u32)],
        lead: Option<usize>,
        coef: &dyn Fn(usize, usize, usize) -> f64,
    ) -> Result<Val> {
        let n = x.regs.len();
        let m_count = self.m();
        let nonzero = |k: usize| (0..m_count).any(|m| (0..n).any(|c| coef(m, c, k) != 0.0));
        let used: Vec<usize> = (0..mons.len()).filter(|&k| Some(k) == lead || nonzero(k)).collect();
        let mut xp = Powers::new(x.clone());
        let mut yp = y.clone().map(Powers::new);
        let mut terms: Vec<(Val, Option<usize>)> = Vec::new();
        let mut constant = None;
        for &k in &used {
            let (i, j) = mons[k];
            if (i, j) == (0, 0) {
                constant = Some(k);
                continue;
            }
            if Some(k) == lead && j == 0 {
                terms.push((xp.raw(self, i as usize, node), None));
                continue;
            }
            let base = match (i, j) {
                (_, 0) => xp.settled(self, i as usize, node),
                (0, _) => {
                    let yp = yp.as_mut().ok_or_else(|| Error::node(node, "y monomial without a y input"))?;
                    yp.settled(self, j as usize, node)
                }
                _ => {
                    let a = xp.settled(self, i as usize, node);
                    let yp = yp.as_mut().ok_or_else(|| Error::node(node, "y monomial without a y input"))?;
                    let b = yp.settled(self, j as usize, node);
                    let prod = self.mul_ct(&a, &b);
                    self.settle(prod, node)
                }
            };
            terms.push((base, Some(k)));
        }
        let layout = x.layout.clone();
        if terms.is_empty() {
            // Constant polynomial: materialize a zero at the next sublevel.
            let z = self.mul_const(&x, 1, &layout, &|_, _| 0.0);
            terms.push((z, None));
        }
        let lam_t = terms.iter().map(|(b, k)| b.lam + u32::from(k.is_some())).max().unwrap();
        let mut acc: Option<Val> = None;
        for (base, k) in terms {
            let t = match k {
                Some(k) => {
                    let l = base.layout.clone();
                    self.mul_const(&base, lam_t - base.lam, &l, &|m, c| coef(m, c, k))
                }
                None => self.align(base, lam_t),
            };
            acc = Some(match acc {
                None => t,
                Some(a) => self.add(a, t)?,
            });
        }
        let mut v = acc.unwrap();
        if let Some(k) = constant {
            v = self.add_const(v, &|m, c| coef(m, c, k));
        }
        Ok(self.settle(v, node))
    }
}

/// Powers of one value built by a product tree; `raw` powers are unsettled.
struct Powers {
    raw: BTreeMap<usize, Val>,
    settled: BTreeMap<usize, Val>,
}

impl Powers {
    fn new(x: Val) -> Self {
        Self { raw: BTreeMap::from([(1, x)]), settled: BTreeMap::new() }
    }

    fn raw(&mut self, l: &mut Lowerer<'_>, i: usize, node: NodeId) -> Val {
        if let Some(v) = self.raw.get(&i) {
            return v.clone();
        }
        let (a, b) = (self.settled(l, i.div_ceil(2), node), self.settled(l, i / 2, node));
        let v = l.mul_ct(&a, &b);
        self.raw.insert(i, v.clone());
        v
    }

    fn settled(&mut self, l: &mut Lowerer<'_>, i: usize, node: NodeId) -> Val {
        if let Some(v) = self.settled.get(&i) {
            return v.clone();
        }
        let r = self.raw(l, i, node);
        let v = l.settle(r, node);
        self.settled.insert(i, v.clone());
        v
    }
}
