//! Numerical checks of the pre-activation update decomposition and the
//! clipping pullback, on a single sample with only one layer stepped.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use super::{gradient_check, norm, residual, Sample, TinyMLP, TrainConfig};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Lemma1Report {
    pub layer: usize,
    pub measured: Vec<f64>,
    pub formula: Vec<f64>,
    pub ce_part: Vec<f64>,
    /// `None` when `‖d‖ = 0` and the penalty branch drops out.
    pub pen_part: Option<Vec<f64>>,
    pub rel_error: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Lemma2Report {
    pub layer: usize,
    pub penalty_branch: bool,
    /// `<Δz_pen, d>` from two measured steps.
    pub inner: f64,
    /// `-η ζ ‖h‖² ‖d‖`.
    pub closed_form: f64,
    pub negative: bool,
    pub rel_error: f64,
}

struct Step {
    h: Vec<f64>,
    d: Vec<f64>,
    g: Vec<f64>,
    dz_total: Vec<f64>,
    dz_ce: Vec<f64>,
    /// Smallest pre-activation change a step can resolve in f64.
    floor: f64,
}

/// Steps `W^(layer)` alone, once on the per-sample loss `CE + ζ‖d‖` and once
/// on CE only, and measures the pre-activation change of each.
fn step(net: &TinyMLP, s: &Sample, cfg: &TrainConfig, layer: usize) -> Result<Step> {
    if layer == 0 || layer > net.activated() {
        return Err(Error::Invalid(format!("layer must be in 1..={}", net.activated())));
    }
    let l = layer - 1;
    let t = net.forward(&s.x, None)?;
    let h = t.h[l].clone();
    let z = t.z[l].clone();
    let d = residual(&z, cfg.c);
    let mut pen = vec![0.0; net.activated()];
    let ce_only = net.backward(&t, s.y, 1.0, &pen, None, cfg.c);
    pen[l] = cfg.zeta;
    let both = net.backward(&t, s.y, 1.0, &pen, None, cfg.c);
    let moved = |grad: &super::Matrix| {
        let mut w = net.weights[l].clone();
        w.data.iter_mut().zip(&grad.data).for_each(|(a, b)| *a -= cfg.lr * b);
        w.mul_vec(&h).iter().zip(&z).map(|(a, b)| a - b).collect::<Vec<f64>>()
    };
    let floor = 1e-12 * z.iter().fold(1.0f64, |m, v| m.max(v.abs()));
    Ok(Step { dz_total: moved(&both.grads[l]), dz_ce: moved(&ce_only.grads[l]), g: ce_only.dz[l].clone(), h, d, floor })
}

fn rel(a: &[f64], b: &[f64], floor: f64) -> f64 {
    let scale = b.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(floor);
    a.iter().zip(b).fold(0.0f64, |m, (x, y)| m.max((x - y).abs())) / scale
}

/// `Δz = -η‖h‖² g - η ζ ‖h‖² d / ‖d‖` for activated layer `layer` (one based).
pub fn lemma1_check(net: &TinyMLP, s: &Sample, cfg: &TrainConfig, layer: usize) -> Result<Lemma1Report> {
    let st = step(net, s, cfg, layer)?;
    let hh = st.h.iter().map(|v| v * v).sum::<f64>();
    let ce_part: Vec<f64> = st.g.iter().map(|g| -cfg.lr * hh * g).collect();
    let dn = norm(&st.d);
    let pen_part = (dn > 0.0).then(|| st.d.iter().map(|v| -cfg.lr * cfg.zeta * hh * v / dn).collect::<Vec<f64>>());
    let formula: Vec<f64> = match &pen_part {
        Some(p) => ce_part.iter().zip(p).map(|(a, b)| a + b).collect(),
        None => ce_part.clone(),
    };
    Ok(Lemma1Report { layer, rel_error: rel(&st.dz_total, &formula, st.floor), measured: st.dz_total, formula, ce_part, pen_part })
}

/// `<Δz_pen, d> = -η ζ ‖h‖² ‖d‖ < 0`.
pub fn lemma2_check(net: &TinyMLP, s: &Sample, cfg: &TrainConfig, layer: usize) -> Result<Lemma2Report> {
    let st = step(net, s, cfg, layer)?;
    let dn = norm(&st.d);
    let hh = st.h.iter().map(|v| v * v).sum::<f64>();
    let inner: f64 = st.dz_total.iter().zip(&st.dz_ce).zip(&st.d).map(|((a, b), d)| (a - b) * d).sum();
    let closed_form = -cfg.lr * cfg.zeta * hh * dn;
    let rel_error = if closed_form.abs() > st.floor { (inner - closed_form).abs() / closed_form.abs() } else { inner.abs() / st.floor };
    Ok(Lemma2Report { layer, penalty_branch: dn > 0.0, inner, closed_form, negative: inner < 0.0, rel_error })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LemmaSuiteReport {
    pub states: usize,
    /// `(state, layer)` pairs checked.
    pub checks: usize,
    pub penalty_branches: usize,
    pub lemma1_max_rel_error: f64,
    pub lemma2_max_rel_error: f64,
    pub lemma2_all_negative: bool,
    pub gradient_max_rel_error: f64,
    pub pass: bool,
}

pub const LEMMA_TOL: f64 = 1e-8;
pub const GRADIENT_TOL: f64 = 1e-4;

/// Both lemma checks on every activated layer of `states` random networks,
/// plus a finite-difference gradient check per network. Weights are scaled
/// up so that most states have pre-activations outside `[-c, c]`.
pub fn lemma_suite(act: &[f64], states: usize, cfg: &TrainConfig, seed: u64) -> Result<LemmaSuiteReport> {
    cfg.validate()?;
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut r = LemmaSuiteReport {
        states,
        checks: 0,
        penalty_branches: 0,
        lemma1_max_rel_error: 0.0,
        lemma2_max_rel_error: 0.0,
        lemma2_all_negative: true,
        gradient_max_rel_error: 0.0,
        pass: false,
    };
    let span = 1.5 * cfg.c;
    let sample = |rng: &mut ChaCha20Rng| Sample {
        x: (0..3).map(|_| rng.gen_range(-span..span)).collect(),
        y: rng.gen_range(0..3),
    };
    for _ in 0..states {
        let sizes = [3, rng.gen_range(2..6), rng.gen_range(2..6), 3];
        let mut net = TinyMLP::new(&sizes, act.to_vec(), rng.gen())?;
        net.weights.iter_mut().for_each(|w| w.data.iter_mut().for_each(|v| *v *= 1.5 * cfg.c));
        let s = sample(&mut rng);
        for layer in 1..=net.activated() {
            let l1 = lemma1_check(&net, &s, cfg, layer)?;
            let l2 = lemma2_check(&net, &s, cfg, layer)?;
            r.checks += 1;
            r.lemma1_max_rel_error = r.lemma1_max_rel_error.max(l1.rel_error);
            if l2.penalty_branch {
                r.penalty_branches += 1;
                r.lemma2_max_rel_error = r.lemma2_max_rel_error.max(l2.rel_error);
                r.lemma2_all_negative &= l2.negative || cfg.zeta * cfg.lr == 0.0;
            }
        }
        let batch: Vec<Sample> = (0..5).map(|_| sample(&mut rng)).collect();
        let g = gradient_check(&net, &batch, cfg, cfg.warmup.len() + 1, 1e-5)?;
        r.gradient_max_rel_error = r.gradient_max_rel_error.max(g);
    }
    r.pass = r.lemma1_max_rel_error <= LEMMA_TOL
        && r.lemma2_max_rel_error <= LEMMA_TOL
        && r.lemma2_all_negative
        && r.gradient_max_rel_error <= GRADIENT_TOL;
    Ok(r)
}
