use hecnn::poly::fit_relu_poly;
use hecnn::train::{
    accuracy, gradient_check, lemma1_check, lemma2_check, lemma_suite, penalty_loss, separable_data, train, warmup_zeta, Sample,
    TinyMLP, TrainConfig,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

fn act() -> Vec<f64> {
    fit_relu_poly(2, 2.0, 10).unwrap().0.real_coeffs()
}

fn random_net(rng: &mut ChaCha20Rng, scale: f64) -> TinyMLP {
    let sizes = [3, rng.gen_range(2..6), rng.gen_range(2..6), 3];
    let mut net = TinyMLP::new(&sizes, act(), rng.gen()).unwrap();
    net.weights.iter_mut().for_each(|w| w.data.iter_mut().for_each(|v| *v *= scale));
    net
}

fn random_batch(rng: &mut ChaCha20Rng, n: usize) -> Vec<Sample> {
    (0..n).map(|_| Sample { x: (0..3).map(|_| rng.gen_range(-2.0..2.0)).collect(), y: rng.gen_range(0..3) }).collect()
}

/// Straight-line evaluation of the batch loss written from the formula.
fn oracle_loss(net: &TinyMLP, batch: &[Sample], cfg: &TrainConfig, t: usize) -> f64 {
    let layers = net.weights.len();
    let mut ce = 0.0;
    let mut pen = 0.0;
    for s in batch {
        let mut h = s.x.clone();
        for (l, w) in net.weights.iter().enumerate() {
            let mut z = vec![0.0; w.rows];
            for r in 0..w.rows {
                for c in 0..w.cols {
                    z[r] += w.data[r * w.cols + c] * h[c];
                }
            }
            if l + 1 == layers {
                let m = z.iter().cloned().fold(f64::MIN, f64::max);
                let sum: f64 = z.iter().map(|v| (v - m).exp()).sum();
                ce += m + sum.ln() - z[s.y];
            } else {
                let mut sq = 0.0;
                for v in &z {
                    let e = v - v.max(-cfg.c).min(cfg.c);
                    sq += e * e;
                }
                pen += sq.sqrt();
                h = z
                    .iter()
                    .map(|v| {
                        let x = v.max(-cfg.c).min(cfg.c);
                        net.act.iter().enumerate().map(|(k, a)| a * x.powi(k as i32)).sum()
                    })
                    .collect();
            }
        }
    }
    let n = batch.len() as f64;
    let zeta_t = if t <= cfg.warmup.len() { cfg.warmup[t - 1] * cfg.zeta } else { cfg.zeta };
    ce / n + zeta_t * pen / (n * (layers - 1) as f64)
}

#[test]
fn loss_matches_straight_line_oracle() {
    let mut rng = ChaCha20Rng::seed_from_u64(1);
    let cfg = TrainConfig { zeta: 0.3, ..Default::default() };
    for t in 1..=6 {
        let net = random_net(&mut rng, 2.5);
        let batch = random_batch(&mut rng, 7);
        let got = penalty_loss(&net, &batch, &cfg, t).unwrap();
        let want = oracle_loss(&net, &batch, &cfg, t);
        assert!((got.total - want).abs() <= 1e-12 * want.abs().max(1.0), "{} vs {want}", got.total);
        assert!(got.pen > 0.0);
        assert_eq!(got.total, got.ce + warmup_zeta(&cfg, t) * got.pen);
    }
}

#[test]
fn gradients_match_central_differences() {
    let mut rng = ChaCha20Rng::seed_from_u64(2);
    let cfg = TrainConfig { zeta: 0.5, ..Default::default() };
    for _ in 0..5 {
        let net = random_net(&mut rng, 1.8);
        let batch = random_batch(&mut rng, 5);
        let e = gradient_check(&net, &batch, &cfg, 6, 1e-5).unwrap();
        assert!(e < 1e-4, "{e}");
    }
}

#[test]
fn learns_separable_data() {
    let data = separable_data(320, 3);
    let mut net = TinyMLP::new(&[3, 8, 2], act(), 4).unwrap();
    let cfg = TrainConfig { lr: 0.2, batch_size: 32, epochs: 20, ..Default::default() };
    let logs = train(&mut net, &data, &cfg).unwrap();
    assert_eq!(logs.len() * 10, 200);
    let acc = accuracy(&net, &data).unwrap();
    assert!(acc >= 0.95, "{acc}");
}

#[test]
fn lemma_suite_on_random_states() {
    let mut rng = ChaCha20Rng::seed_from_u64(5);
    let mut branches = 0;
    for _ in 0..50 {
        let net = random_net(&mut rng, 3.0);
        let s = random_batch(&mut rng, 1).pop().unwrap();
        let cfg = TrainConfig { lr: rng.gen_range(0.01..0.5), zeta: rng.gen_range(0.01..1.0), ..Default::default() };
        for layer in 1..=net.weights.len() - 1 {
            let r1 = lemma1_check(&net, &s, &cfg, layer).unwrap();
            assert!(r1.rel_error <= 1e-8, "{}", r1.rel_error);
            let r2 = lemma2_check(&net, &s, &cfg, layer).unwrap();
            if r2.penalty_branch {
                branches += 1;
                assert!(r2.negative);
                assert!(r2.rel_error <= 1e-8, "{}", r2.rel_error);
            }
        }
    }
    assert!(branches > 25);
}

#[test]
fn in_range_state_has_only_the_ce_term() {
    let mut net = TinyMLP::new(&[3, 4, 2], act(), 9).unwrap();
    net.weights[0].data.iter_mut().for_each(|v| *v *= 0.05);
    let s = Sample { x: vec![0.5, -0.2, 1.0], y: 1 };
    let r = lemma1_check(&net, &s, &TrainConfig::default(), 1).unwrap();
    assert!(r.pen_part.is_none());
    assert_eq!(r.formula, r.ce_part);
    assert!(!lemma2_check(&net, &s, &TrainConfig::default(), 1).unwrap().penalty_branch);
}

#[test]
fn pullback_scales_with_the_residual() {
    // One hidden unit sits at z = 3 (excess 1); moving it to z = 4 doubles d.
    let mut net = TinyMLP::new(&[2, 2, 2], act(), 1).unwrap();
    net.weights[0].data = vec![3.0, 0.0, 0.0, 0.5];
    let s = Sample { x: vec![1.0, 0.0], y: 0 };
    let cfg = TrainConfig { lr: 0.1, zeta: 0.2, ..Default::default() };
    let a = lemma2_check(&net, &s, &cfg, 1).unwrap();
    net.weights[0].data[0] = 4.0;
    let b = lemma2_check(&net, &s, &cfg, 1).unwrap();
    assert!(a.negative && b.negative);
    assert!((b.inner / a.inner - 2.0).abs() < 1e-9);
    assert!((a.closed_form + 0.1 * 0.2).abs() < 1e-15);
}

#[test]
fn without_penalty_the_update_is_pure_ce() {
    let mut rng = ChaCha20Rng::seed_from_u64(8);
    let net = random_net(&mut rng, 3.0);
    let s = random_batch(&mut rng, 1).pop().unwrap();
    let cfg = TrainConfig { zeta: 0.0, ..Default::default() };
    let r = lemma1_check(&net, &s, &cfg, 1).unwrap();
    for (m, c) in r.measured.iter().zip(&r.ce_part) {
        assert!((m - c).abs() <= 1e-12 * c.abs().max(1e-12));
    }
}

#[test]
fn suite_passes_on_default_and_zero_penalty() {
    for zeta in [0.0, 1e-3, 0.5] {
        let cfg = TrainConfig { zeta, lr: 0.1, ..Default::default() };
        let r = lemma_suite(&act(), 50, &cfg, 17).unwrap();
        assert!(r.pass, "{r:?}");
        assert!(r.penalty_branches > r.checks / 2);
    }
}
