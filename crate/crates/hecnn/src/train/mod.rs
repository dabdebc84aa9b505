//! Desk-scale trainer for small polynomial MLPs with the clip-range penalty.
//!
//! Layers `1..L-1` apply `p(W h)`, layer `L` produces logits. During training
//! the pre-activations are clipped to `[-c, c]` before the polynomial, after
//! the penalty has been read from the unclipped values.

mod lemma;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::horner;

pub use lemma::{
    lemma1_check, lemma2_check, lemma_suite, Lemma1Report, Lemma2Report, LemmaSuiteReport, GRADIENT_TOL, LEMMA_TOL,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub c: f64,
    pub zeta: f64,
    /// Warm-up factors `α_1 < … < α_T`, one per warm-up epoch.
    pub warmup: Vec<f64>,
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            c: 2.0,
            zeta: 1e-3,
            warmup: vec![1.0 / 100.0, 1.0 / 50.0, 1.0 / 10.0, 1.0 / 5.0],
            lr: 0.05,
            batch_size: 32,
            epochs: 20,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.c > 0.0) || !(self.zeta >= 0.0) {
            return Err(Error::Invalid("c must be positive and ζ nonnegative".into()));
        }
        let a = &self.warmup;
        if a.iter().any(|&v| !(v > 0.0 && v < 1.0)) || a.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Invalid("warm-up factors must increase strictly inside (0, 1)".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Invalid("batch size must be >= 1".into()));
        }
        Ok(())
    }
}

/// `ζ_t`: `α_t ζ` during warm-up, `ζ` afterwards. Epochs count from 1.
pub fn warmup_zeta(cfg: &TrainConfig, t: usize) -> f64 {
    match cfg.warmup.get(t.max(1) - 1) {
        Some(a) => a * cfg.zeta,
        None => cfg.zeta,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub x: Vec<f64>,
    pub y: usize,
}

/// Row-major dense matrix.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![0.0; rows * cols] }
    }

    #[inline]
    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn at_mut(&mut self, r: usize, c: usize) -> &mut f64 {
        &mut self.data[r * self.cols + c]
    }

    pub fn mul_vec(&self, v: &[f64]) -> Vec<f64> {
        self.data.chunks(self.cols).map(|row| row.iter().zip(v).map(|(a, b)| a * b).sum()).collect()
    }

    fn mul_t_vec(&self, v: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.cols];
        for (r, &s) in v.iter().enumerate() {
            for (o, w) in out.iter_mut().zip(&self.data[r * self.cols..(r + 1) * self.cols]) {
                *o += w * s;
            }
        }
        out
    }

    fn add_outer(&mut self, a: &[f64], b: &[f64], s: f64) {
        for (r, &x) in a.iter().enumerate() {
            for (w, &y) in self.data[r * self.cols..(r + 1) * self.cols].iter_mut().zip(b) {
                *w += s * x * y;
            }
        }
    }
}

/// Values of one forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct Trace {
    /// `h[0]` is the input; `h[l]` the output of layer `l`.
    pub h: Vec<Vec<f64>>,
    /// Unclipped pre-activations; the last entry holds the logits.
    pub z: Vec<Vec<f64>>,
}

impl Trace {
    pub fn logits(&self) -> &[f64] {
        self.z.last().unwrap()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TinyMLP {
    pub weights: Vec<Matrix>,
    /// Activation coefficients, constant term first.
    pub act: Vec<f64>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub total: f64,
    pub ce: f64,
    /// Mean over activated layers of the per-sample residual norm, batch averaged.
    pub pen: f64,
}

pub fn clip(z: f64, c: f64) -> f64 {
    z.clamp(-c, c)
}

/// `z - clip(z)` elementwise.
pub fn residual(z: &[f64], c: f64) -> Vec<f64> {
    z.iter().map(|&v| v - clip(v, c)).collect()
}

pub fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn softmax(z: &[f64]) -> Vec<f64> {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

/// `-log softmax(z)[y]`.
pub fn cross_entropy(z: &[f64], y: usize) -> f64 {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
    lse - z[y]
}

fn poly_deriv(c: &[f64], x: f64) -> f64 {
    c.iter().enumerate().skip(1).rev().fold(0.0, |acc, (k, &a)| acc * x + k as f64 * a)
}

impl TinyMLP {
    /// Uniform Glorot-style init; `sizes` lists layer widths from input to logits.
    pub fn new(sizes: &[usize], act: Vec<f64>, seed: u64) -> Result<Self> {
        if sizes.len() < 3 || sizes.contains(&0) {
            return Err(Error::Invalid("need >= 2 layers of nonzero width".into()));
        }
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let weights = sizes
            .windows(2)
            .map(|w| {
                let a = (6.0 / (w[0] + w[1]) as f64).sqrt();
                Matrix { rows: w[1], cols: w[0], data: (0..w[0] * w[1]).map(|_| rng.gen_range(-a..a)).collect() }
            })
            .collect();
        Ok(Self { weights, act })
    }

    /// Number of weight layers `L`.
    pub fn depth(&self) -> usize {
        self.weights.len()
    }

    /// Layers followed by the polynomial activation.
    pub fn activated(&self) -> usize {
        self.weights.len() - 1
    }

    pub fn forward(&self, x: &[f64], clip_to: Option<f64>) -> Result<Trace> {
        if x.len() != self.weights[0].cols {
            return Err(Error::Shape(format!("{} inputs, first layer takes {}", x.len(), self.weights[0].cols)));
        }
        let mut h = vec![x.to_vec()];
        let mut z = Vec::with_capacity(self.depth());
        for (l, w) in self.weights.iter().enumerate() {
            let zl = w.mul_vec(&h[l]);
            if l + 1 < self.depth() {
                h.push(zl.iter().map(|&v| horner(&self.act, clip_to.map_or(v, |c| clip(v, c)))).collect());
            }
            z.push(zl);
        }
        Ok(Trace { h, z })
    }

    pub fn predict(&self, x: &[f64]) -> Result<usize> {
        let t = self.forward(x, None)?;
        Ok(argmax(t.logits()))
    }

    /// Per-sample weight gradients and pre-activation gradients. `pen[l]`
    /// weights `‖d^(l)‖` for activated layer `l` (zero based); `ce` weights
    /// the cross-entropy.
    pub fn backward(&self, t: &Trace, y: usize, ce: f64, pen: &[f64], clip_to: Option<f64>, c: f64) -> Backprop {
        let l_count = self.depth();
        let mut grads: Vec<Matrix> = self.weights.iter().map(|w| Matrix::zeros(w.rows, w.cols)).collect();
        let mut dzs = vec![Vec::new(); l_count];
        let mut dz: Vec<f64> = softmax(t.logits()).iter().enumerate().map(|(k, p)| ce * (p - f64::from(k == y))).collect();
        for l in (0..l_count).rev() {
            grads[l].add_outer(&dz, &t.h[l], 1.0);
            dzs[l] = dz.clone();
            if l == 0 {
                break;
            }
            let dh = self.weights[l].mul_t_vec(&dz);
            let zl = &t.z[l - 1];
            let d = residual(zl, c);
            let dn = norm(&d);
            dz = zl
                .iter()
                .zip(&dh)
                .zip(&d)
                .map(|((&v, &g), &r)| {
                    let inside = clip_to.map_or(true, |cc| v.abs() <= cc);
                    let through = if inside { g * poly_deriv(&self.act, clip_to.map_or(v, |cc| clip(v, cc))) } else { 0.0 };
                    let p = if dn > 0.0 { pen[l - 1] * r / dn } else { 0.0 };
                    through + p
                })
                .collect();
        }
        Backprop { grads, dz: dzs }
    }
}

pub struct Backprop {
    pub grads: Vec<Matrix>,
    /// Loss gradient with respect to each layer's pre-activation.
    pub dz: Vec<Vec<f64>>,
}

pub fn argmax(v: &[f64]) -> usize {
    v.iter().enumerate().fold(0, |b, (i, &x)| if x > v[b] { i } else { b })
}

fn check_batch(batch: &[Sample]) -> Result<()> {
    if batch.is_empty() {
        return Err(Error::Invalid("empty batch".into()));
    }
    Ok(())
}

/// Training loss on `batch` at epoch `t`, forward pass in training mode.
pub fn penalty_loss(net: &TinyMLP, batch: &[Sample], cfg: &TrainConfig, t: usize) -> Result<LossParts> {
    check_batch(batch)?;
    let (mut ce, mut pen) = (0.0, 0.0);
    for s in batch {
        let tr = net.forward(&s.x, Some(cfg.c))?;
        ce += cross_entropy(tr.logits(), s.y);
        pen += tr.z[..net.activated()].iter().map(|z| norm(&residual(z, cfg.c))).sum::<f64>();
    }
    let n = batch.len() as f64;
    let ce = ce / n;
    let pen = pen / (n * net.activated() as f64);
    Ok(LossParts { total: ce + warmup_zeta(cfg, t) * pen, ce, pen })
}

/// Gradient of `penalty_loss` with respect to every weight.
pub fn loss_gradient(net: &TinyMLP, batch: &[Sample], cfg: &TrainConfig, t: usize) -> Result<Vec<Matrix>> {
    check_batch(batch)?;
    let n = batch.len() as f64;
    let pw = vec![warmup_zeta(cfg, t) / (n * net.activated() as f64); net.activated()];
    let mut total: Vec<Matrix> = net.weights.iter().map(|w| Matrix::zeros(w.rows, w.cols)).collect();
    for s in batch {
        let tr = net.forward(&s.x, Some(cfg.c))?;
        for (acc, g) in total.iter_mut().zip(net.backward(&tr, s.y, 1.0 / n, &pw, Some(cfg.c), cfg.c).grads) {
            acc.data.iter_mut().zip(&g.data).for_each(|(a, b)| *a += b);
        }
    }
    Ok(total)
}

/// One SGD step; returns the loss before the step.
pub fn train_step(net: &mut TinyMLP, batch: &[Sample], cfg: &TrainConfig, t: usize) -> Result<LossParts> {
    let loss = penalty_loss(net, batch, cfg, t)?;
    if !loss.total.is_finite() {
        return Err(Error::NonFinite(format!("training loss at epoch {t}")));
    }
    let grads = loss_gradient(net, batch, cfg, t)?;
    for (w, g) in net.weights.iter_mut().zip(&grads) {
        w.data.iter_mut().zip(&g.data).for_each(|(a, b)| *a -= cfg.lr * b);
    }
    Ok(loss)
}

/// Largest per-weight relative gap between the analytic gradient and
/// central differences with step `h`.
pub fn gradient_check(net: &TinyMLP, batch: &[Sample], cfg: &TrainConfig, t: usize, h: f64) -> Result<f64> {
    let grads = loss_gradient(net, batch, cfg, t)?;
    let mut worst = 0.0f64;
    let mut probe = net.clone();
    for (l, g) in grads.iter().enumerate() {
        for i in 0..g.data.len() {
            let w0 = probe.weights[l].data[i];
            probe.weights[l].data[i] = w0 + h;
            let up = penalty_loss(&probe, batch, cfg, t)?.total;
            probe.weights[l].data[i] = w0 - h;
            let down = penalty_loss(&probe, batch, cfg, t)?.total;
            probe.weights[l].data[i] = w0;
            let fd = (up - down) / (2.0 * h);
            let a = g.data[i];
            worst = worst.max((a - fd).abs() / a.abs().max(fd.abs()).max(1e-6));
        }
    }
    Ok(worst)
}

pub fn accuracy(net: &TinyMLP, data: &[Sample]) -> Result<f64> {
    let hits = data.iter().map(|s| net.predict(&s.x).map(|p| p == s.y)).collect::<Result<Vec<_>>>()?;
    Ok(hits.iter().filter(|&&h| h).count() as f64 / data.len().max(1) as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub loss: f64,
    pub ce: f64,
    pub pen: f64,
    pub zeta: f64,
    pub accuracy: f64,
}

impl EpochLog {
    pub const CSV_HEADER: &'static str = "epoch,loss,ce,pen,zeta,accuracy";

    pub fn csv_row(&self) -> String {
        format!("{},{},{},{},{},{}", self.epoch, self.loss, self.ce, self.pen, self.zeta, self.accuracy)
    }
}

/// Minibatch SGD over `cfg.epochs` epochs with a seeded shuffle.
pub fn train(net: &mut TinyMLP, data: &[Sample], cfg: &TrainConfig) -> Result<Vec<EpochLog>> {
    cfg.validate()?;
    check_batch(data)?;
    let mut rng = ChaCha20Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut logs = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let (mut sum, mut steps) = (LossParts::default(), 0.0);
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<Sample> = chunk.iter().map(|&i| data[i].clone()).collect();
            let l = train_step(net, &batch, cfg, epoch)?;
            sum.total += l.total;
            sum.ce += l.ce;
            sum.pen += l.pen;
            steps += 1.0;
        }
        logs.push(EpochLog {
            epoch,
            loss: sum.total / steps,
            ce: sum.ce / steps,
            pen: sum.pen / steps,
            zeta: warmup_zeta(cfg, epoch),
            accuracy: accuracy(net, data)?,
        });
    }
    Ok(logs)
}

/// Two-class points in `[-1, 1]^2` split by a line with a margin, plus a
/// constant feature acting as bias.
pub fn separable_data(n: usize, seed: u64) -> Vec<Sample> {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let (a, b): (f64, f64) = (rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
        let s = a + 0.5 * b - 0.1;
        if s.abs() < 0.1 {
            continue;
        }
        out.push(Sample { x: vec![a, b, 1.0], y: usize::from(s > 0.0) });
    }
    out
}
