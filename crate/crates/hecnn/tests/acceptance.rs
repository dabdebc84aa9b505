//! Acceptance run: one PASS/FAIL line per criterion, nonzero exit on any
//! failure. Built with `harness = false`.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use hecnn::cluster::{ensemble_slice_cluster, kmeans, slice_cluster, sq_dist};
use hecnn::graph::{
    build_resnet_graph, load_model, reference_eval, to_json_string, ActKind, AvgPoolNode, BatchNormNode, ConvNode,
    ModelGraph, Node, PolyActNode, PolySkipNode, Tensor, TensorShape, Variant,
};
use hecnn::levels::{strategy_table, ModulusChainPlan, Preset};
use hecnn::poly::{coeff_box, fit_relu_poly, quantized_domain, relu};
use hecnn::sim::{
    compile, fold_skip_scale, perturbed_moduli, rescale_error_probe, run_circuit, CircuitProgram, Instr, LowerConfig,
    PlainSpec, RunOptions, SlotLayout,
};
use hecnn::train::{lemma_suite, TrainConfig, GRADIENT_TOL, LEMMA_TOL};
use hecnn::transform::{
    apply_pipeline, fuse_at, fuse_bn_act, fuse_skip_bn_bn, fuse_skip_identity, normalize_forward, receive_backward,
    FuseRule, Strategy,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

type Outcome = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        if !$cond {
            return Err(format!($($msg)+));
        }
    };
}

fn fixture(name: &str) -> ModelGraph {
    load_model(Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)).expect("fixture loads")
}

fn input_shape(g: &ModelGraph) -> TensorShape {
    match g.node(g.input_id().unwrap()) {
        Some(Node::Input(s)) => *s,
        _ => unreachable!(),
    }
}

fn random_tensor(shape: TensorShape, rng: &mut ChaCha20Rng) -> Tensor {
    Tensor::new(shape, (0..shape.len()).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

/// `max|a - b|` over `max|b|`.
fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let n = b.iter().fold(f64::MIN_POSITIVE, |m, v| m.max(v.abs()));
    a.iter().zip(b).fold(0.0f64, |m, (x, y)| m.max((x - y).abs())) / n
}

fn argmax(v: &[f64]) -> usize {
    (0..v.len()).max_by(|&i, &j| v[i].total_cmp(&v[j])).unwrap()
}

fn level_table() -> Outcome {
    use Strategy::*;
    let want: [(Variant, [(Strategy, u32); 6]); 3] = [
        (Variant::Rn18, [(P4, 87), (P2, 70), (P2F, 53), (P2R, 35), (P2FR, 35), (P2FRT, 18)]),
        (Variant::Rn20, [(P4, 97), (P2, 78), (P2F, 59), (P2R, 39), (P2FR, 39), (P2FRT, 20)]),
        (Variant::Rn32, [(P4, 157), (P2, 126), (P2F, 95), (P2R, 63), (P2FR, 63), (P2FRT, 32)]),
    ];
    for (v, row) in want {
        let got = strategy_table(v).map_err(|e| e.to_string())?;
        ensure!(got == row, "{}: {got:?}", v.name());
    }
    Ok("rn18 87/70/53/35/35/18, rn20 97..20, rn32 157..32".into())
}

fn affine(b1: f64, b0: f64) -> BatchNormNode {
    BatchNormNode::from_affine(vec![b1], vec![b0])
}

/// Worst batch-normalized error of `f` against `g` over 1000 draws.
fn unit_error(rng: &mut ChaCha20Rng, mut sample: impl FnMut(&mut ChaCha20Rng) -> (f64, f64)) -> f64 {
    let (got, want): (Vec<f64>, Vec<f64>) = (0..1000).map(|_| sample(rng)).unzip();
    rel_err(&got, &want)
}

fn conv_bn_case(rng: &mut ChaCha20Rng) -> f64 {
    let s = TensorShape::new(2, 5, 5);
    let conv = ConvNode {
        out_channels: 3,
        in_channels: 2,
        kernel_h: 3,
        kernel_w: 3,
        weights: (0..54).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        bias: (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        stride: 1,
        padding: 1,
    };
    let bn = BatchNormNode {
        gamma: (0..3).map(|_| rng.gen_range(-1.5..1.5)).collect(),
        beta: (0..3).map(|_| rng.gen_range(-0.5..0.5)).collect(),
        mean: (0..3).map(|_| rng.gen_range(-0.5..0.5)).collect(),
        std: (0..3).map(|_| rng.gen_range(0.5..2.0)).collect(),
    };
    let mut g = ModelGraph::new();
    let i = g.push(Node::Input(s), &[]);
    let c = g.push(Node::Conv(conv), &[i]);
    let b = g.push(Node::BatchNorm(bn), &[c]);
    g.push(Node::Output, &[b]);
    let mut h = g.clone();
    fuse_at(&mut h, b, FuseRule::ConvBn).unwrap();
    assert!(!h.nodes().any(|(_, n)| matches!(n, Node::BatchNorm(_))));
    let (mut got, mut want) = (Vec::new(), Vec::new());
    for _ in 0..1000 {
        let x = random_tensor(s, rng);
        want.extend(reference_eval(&g, &x).unwrap());
        got.extend(reference_eval(&h, &x).unwrap());
    }
    rel_err(&got, &want)
}

fn transform_equivalence() -> Outcome {
    let mut rng = ChaCha20Rng::seed_from_u64(2);
    let mut worst = [0.0f64; 4];
    for _ in 0..10 {
        let mut r = || rng.gen_range(-1.5..1.5);
        let (x1, x0, y1, y0) = (r(), r(), r(), r());
        let act = PolyActNode::shared(vec![r(), r(), r()]);
        let bn_act = fuse_bn_act(&affine(x1, x0), &act).unwrap();
        let skip = fuse_skip_bn_bn(&affine(x1, x0), &affine(y1, y0), &act).unwrap();
        let ident = fuse_skip_identity(&affine(x1, x0), &act).unwrap();
        worst[0] = worst[0].max(unit_error(&mut rng, |r| {
            let x = r.gen_range(-3.0..3.0);
            (bn_act.eval(0, x), act.eval(0, x1 * x + x0))
        }));
        worst[1] = worst[1].max(conv_bn_case(&mut rng));
        worst[2] = worst[2].max(unit_error(&mut rng, |r| {
            let (x, y) = (r.gen_range(-3.0..3.0), r.gen_range(-3.0..3.0));
            (skip.eval(0, x, y), act.eval(0, x1 * x + x0 + y1 * y + y0))
        }));
        worst[3] = worst[3].max(unit_error(&mut rng, |r| {
            let (x, y) = (r.gen_range(-3.0..3.0), r.gen_range(-3.0..3.0));
            (ident.eval(0, x, y), act.eval(0, x1 * x + x0 + y))
        }));
    }
    for (k, e) in worst.iter().enumerate() {
        ensure!(*e <= 1e-10, "case {} error {e:e}", k + 1);
    }
    let mut full = 0.0f64;
    for v in Variant::ALL {
        let g = build_resnet_graph(v, ActKind::Relu { degree: 2 });
        let h = apply_pipeline(&g, Strategy::P2FR).map_err(|e| e.to_string())?.0;
        let mut rng = ChaCha20Rng::seed_from_u64(40 + v as u64);
        for t in 0..100 {
            let x = random_tensor(input_shape(&g), &mut rng);
            let (a, b) = (reference_eval(&g, &x).unwrap(), reference_eval(&h, &x).unwrap());
            full = full.max(rel_err(&b, &a));
            ensure!(argmax(&a) == argmax(&b), "{} input {t}: argmax flipped", v.name());
        }
    }
    ensure!(full <= 1e-8, "P2FR logits error {full:e}");
    Ok(format!("cases 1-4 max {:.1e}, P2FR max {full:.1e}, argmax exact", worst.iter().cloned().fold(0.0, f64::max)))
}

fn is_normalized(n: &Node) -> bool {
    match n {
        Node::PolyAct(p) => p.is_monic(),
        Node::PolySkip(p) => p.is_monic(),
        Node::AvgPool(p) => p.divisor == 1.0,
        _ => true,
    }
}

fn coeffs_of(n: &Node) -> Vec<f64> {
    match n {
        Node::PolyAct(p) => p.coeffs.concat(),
        Node::PolySkip(p) => p.coeffs.concat(),
        Node::AvgPool(p) => vec![p.divisor],
        _ => unreachable!(),
    }
}

fn redistribution() -> Outcome {
    for v in Variant::ALL {
        let g = build_resnet_graph(v, ActKind::Relu { degree: 2 });
        for s in [Strategy::P2R, Strategy::P2FR] {
            let h = apply_pipeline(&g, s).map_err(|e| e.to_string())?.0;
            let bad = h.nodes().find(|(_, n)| !is_normalized(n));
            ensure!(bad.is_none(), "{} {s}: node {:?} not normalized", v.name(), bad.map(|b| b.0));
        }
    }
    let mut rng = ChaCha20Rng::seed_from_u64(3);
    let mut worst = 0.0f64;
    let mut donors: Vec<Node> = Vec::new();
    for _ in 0..100 {
        let rows = rng.gen_range(1..4);
        let coeffs = (0..rows).map(|_| (0..3).map(|_| rng.gen_range(0.1..3.0)).collect()).collect();
        donors.push(Node::PolyAct(PolyActNode { coeffs }));
        let row = (0..6).map(|_| rng.gen_range(0.1..3.0)).collect();
        donors.push(Node::PolySkip(PolySkipNode { monomials: PolySkipNode::QUADRATIC.to_vec(), coeffs: vec![row] }));
    }
    donors.extend([2, 4].map(|w| Node::AvgPool(AvgPoolNode::new(w))));
    for donor in &donors {
        let (norm, ups) = normalize_forward(donor, 0).map_err(|e| e.to_string())?;
        ensure!(is_normalized(&norm), "normalized donor is not monic");
        // Pools are never receivers; their divisor takes the factor back directly.
        let back = match &norm {
            Node::AvgPool(p) => Node::AvgPool(AvgPoolNode { window: p.window, divisor: p.divisor * ups[0] }),
            n => receive_backward(n, &ups).ok_or("donor refuses the backward update")?,
        };
        let (a, b) = (coeffs_of(&back), coeffs_of(donor));
        ensure!(a.len() == b.len(), "row count changed");
        worst = a.iter().zip(&b).fold(worst, |m, (x, y)| m.max((x - y).abs() / y.abs().max(1.0)));
    }
    ensure!(worst <= 1e-10, "restore error {worst:e}");
    Ok(format!("P2R/P2FR normalized on 3 variants, restore max {worst:.1e} on {} donors", donors.len()))
}

fn tower_trace() -> Outcome {
    let layout = SlotLayout::for_image(2, 2, 8, 1, 0).unwrap();
    let prog = CircuitProgram {
        slots: 8,
        replicas: 1,
        delta_bits: 30,
        sublevel: 2,
        input_channels: 1,
        input_layout: layout.clone(),
        output_layout: layout.clone(),
        layouts: vec![layout.clone()],
        masks: vec![layout.positions()],
        plaintexts: vec![PlainSpec { mask: 0, values: vec![0.5], sublevel: 1, slice: None, layout: None }],
        instrs: vec![
            Instr::Encode { dst: 0, channel: 0 },
            Instr::MultCt { dst: 1, a: 0, b: 0 },
            Instr::MultPlain { dst: 2, a: 1, pt: 0 },
            Instr::Rescale { dst: 3, a: 2, node: 0 },
            Instr::Decode { src: 3, index: 0 },
        ],
        outputs: 1,
        plan: ModulusChainPlan::standard(30, 2, 1, 4),
    };
    let x = Tensor::new(TensorShape::new(1, 2, 2), vec![0.5, -0.25, 1.0, 0.75]).unwrap();
    let out = run_circuit(&prog, &x, &RunOptions { trace: true, ..Default::default() }).map_err(|e| e.to_string())?;
    let got: Vec<(&str, u32, u32)> = out.trace.iter().map(|t| (t.op.as_str(), t.sublevel, t.level)).collect();
    let want = [("encode", 1, 1), ("mult_ct", 2, 1), ("mult_plain", 3, 1), ("rescale", 1, 0)];
    ensure!(got == want, "trace {got:?}");
    Ok("λ 1 -> 2 -> 3, rescale to λ 1 at Λ - 1".into())
}

fn presets() -> Outcome {
    for (name, total) in [("rn18", 869), ("rn20", 906), ("rn32", 1745)] {
        let p = Preset::builtin(name).ok_or("missing preset")?;
        let plan = p.to_plan();
        let sum: u32 = plan.moduli.iter().map(|m| m.bits).sum();
        ensure!(p.total_bits() == total && plan.total_bits == total && sum == total, "{name}: {sum}");
    }
    Ok("869 / 906 / 1745".into())
}

fn sse(a: &[i64], xs: &[f64], ys: &[f64]) -> f64 {
    xs.iter()
        .zip(ys)
        .map(|(&x, &y)| {
            let v: f64 = a.iter().enumerate().map(|(k, &ak)| ak as f64 * x.powi(k as i32)).sum();
            (v - y).powi(2)
        })
        .sum()
}

/// Integer least squares by direct search: every vector within 4 steps of the
/// rounded real solution, clipped to the box, ranked by its residual.
fn integer_lsq_oracle(d: usize, c: f64, b: u32) -> Vec<i64> {
    let xs = quantized_domain(c, b);
    let scale = 2f64.powi(b as i32);
    let ys: Vec<f64> = xs.iter().map(|&x| scale * relu(x)).collect();
    // Real solution from the normal equations in the basis (x/c)^k.
    let n = d + 1;
    let mut m = vec![vec![0.0; n + 1]; n];
    for (&x, &y) in xs.iter().zip(&ys) {
        let t: Vec<f64> = (0..n).map(|k| (x / c).powi(k as i32)).collect();
        for j in 0..n {
            for k in 0..n {
                m[j][k] += t[j] * t[k];
            }
            m[j][n] += t[j] * y;
        }
    }
    for col in 0..n {
        for row in 0..n {
            if row != col {
                let f = m[row][col] / m[col][col];
                for k in 0..=n {
                    m[row][k] -= f * m[col][k];
                }
            }
        }
    }
    let (lo, hi) = coeff_box(b);
    let center: Vec<i64> = (0..n).map(|k| (m[k][n] / m[k][k] / c.powi(k as i32)).round() as i64).collect();
    let mut best = (f64::INFINITY, Vec::new());
    let offsets = 9usize.pow(n as u32);
    for code in 0..offsets {
        let mut code = code;
        let a: Vec<i64> = center
            .iter()
            .map(|&c0| {
                let off = (code % 9) as i64 - 4;
                code /= 9;
                (c0 + off).clamp(lo, hi)
            })
            .collect();
        let e = sse(&a, &xs, &ys);
        if e < best.0 {
            best = (e, a);
        }
    }
    best.1
}

fn polynomial_fitting() -> Outcome {
    let (p, _) = fit_relu_poly(2, 2.0, 10).map_err(|e| e.to_string())?;
    let oracle = integer_lsq_oracle(2, 2.0, 10);
    ensure!(p.int_coeffs == oracle, "fit {:?}, oracle {oracle:?}", p.int_coeffs);
    let mut rng = ChaCha20Rng::seed_from_u64(6);
    let mut configs = 0;
    while configs < 100 {
        let (d, c, b) = (rng.gen_range(1..=4), rng.gen_range(0.1..=4.0), rng.gen_range(1..=12));
        if quantized_domain(c, b).len() < d + 1 {
            continue;
        }
        let (q, _) = fit_relu_poly(d, c, b).map_err(|e| e.to_string())?;
        ensure!(q.in_box() && q.int_coeffs.len() == d + 1, "d={d} c={c} b={b}: {:?}", q.int_coeffs);
        configs += 1;
    }
    Ok(format!("{:?} matches the oracle, box holds on 100 configurations", p.int_coeffs))
}

fn lemma_checks() -> Outcome {
    let act = ActKind::Relu { degree: 2 }.coeffs();
    let r = lemma_suite(&act, 50, &TrainConfig::default(), 7).map_err(|e| e.to_string())?;
    let detail = format!(
        "{} checks, {} penalty branches, lemma1 {:.1e}, lemma2 {:.1e}, gradient {:.1e}",
        r.checks, r.penalty_branches, r.lemma1_max_rel_error, r.lemma2_max_rel_error, r.gradient_max_rel_error
    );
    ensure!(r.lemma1_max_rel_error <= LEMMA_TOL && LEMMA_TOL == 1e-8, "{detail}");
    ensure!(r.lemma2_max_rel_error <= LEMMA_TOL && r.lemma2_all_negative, "{detail}");
    ensure!(r.gradient_max_rel_error <= GRADIENT_TOL && GRADIENT_TOL == 1e-4, "{detail}");
    ensure!(r.penalty_branches > 0, "no state reached the penalty branch");
    Ok(detail)
}

fn exhaustive_optimum(points: &[Vec<f64>], k: usize) -> f64 {
    let n = points.len();
    let dim = points[0].len();
    let mut best = f64::INFINITY;
    for code in 0..k.pow(n as u32) {
        let labels: Vec<usize> = (0..n).map(|i| code / k.pow(i as u32) % k).collect();
        let mut cost = 0.0;
        for c in 0..k {
            let members: Vec<&Vec<f64>> = points.iter().zip(&labels).filter(|(_, &l)| l == c).map(|(p, _)| p).collect();
            if members.is_empty() {
                continue;
            }
            let mean: Vec<f64> =
                (0..dim).map(|d| members.iter().map(|p| p[d]).sum::<f64>() / members.len() as f64).collect();
            cost += members.iter().map(|p| sq_dist(p, &mean)).sum::<f64>();
        }
        best = best.min(cost);
    }
    best
}

fn clustering() -> Outcome {
    for dim in [1, 2] {
        let mut rng = ChaCha20Rng::seed_from_u64(80 + dim as u64);
        for t in 0..50 {
            let n = rng.gen_range(2..=8);
            let k = rng.gen_range(1..=3.min(n));
            let pts: Vec<Vec<f64>> = (0..n).map(|_| (0..dim).map(|_| rng.gen_range(-2.0..2.0)).collect()).collect();
            let r = kmeans(&pts, k, t).map_err(|e| e.to_string())?;
            let opt = exhaustive_optimum(&pts, k);
            ensure!((r.distortion - opt).abs() <= 1e-9 * opt.max(1.0), "dim {dim} instance {t}: {} vs {opt}", r.distortion);
        }
    }
    let k = 4;
    let g = fold_skip_scale(&apply_pipeline(&fixture("rn20_seed0.json"), Strategy::P2FR).map_err(|e| e.to_string())?.0)
        .map_err(|e| e.to_string())?;
    let (q, report) = slice_cluster(&g, k, 1).map_err(|e| e.to_string())?;
    ensure!(report.max_slice_encodings() <= k, "report has {} encodings", report.max_slice_encodings());
    let c = compile(std::slice::from_ref(&q), &LowerConfig { delta_bits: 40, sublevel: 2, slots: None })
        .map_err(|e| e.to_string())?;
    let x = random_tensor(input_shape(&q), &mut ChaCha20Rng::seed_from_u64(8));
    let out = run_circuit(&c.program, &x, &RunOptions::default()).map_err(|e| e.to_string())?;
    let per_slice = out.plaintexts.max_per_slice();
    ensure!(per_slice <= k, "circuit encodes {per_slice} plaintexts in one slice");
    let (e, _) = ensemble_slice_cluster(std::slice::from_ref(&g), k, 1).map_err(|e| e.to_string())?;
    ensure!(to_json_string(&e[0]) == to_json_string(&q), "M = 1 ensemble differs from slice mode");
    Ok(format!("oracles match on 2 x 50 instances, {per_slice} encodings per slice at k = {k}, M = 1 bit-identical"))
}

fn simulator_fidelity() -> Outcome {
    let members: Vec<ModelGraph> = ["rn20_seed0.json", "rn20_seed1.json"]
        .iter()
        .map(|f| apply_pipeline(&fixture(f), Strategy::P2FR).map(|r| r.0))
        .collect::<Result<_, _>>()
        .map_err(|e| e.to_string())?;
    ensure!(input_shape(&members[0]) == TensorShape::new(3, 8, 8), "fixture is not 8x8");
    let cfg = LowerConfig { delta_bits: 40, sublevel: 2, slots: None };
    let x = random_tensor(input_shape(&members[0]), &mut ChaCha20Rng::seed_from_u64(9));
    let mut solo = Vec::new();
    let mut worst = 0.0f64;
    for g in &members {
        let c = compile(std::slice::from_ref(g), &cfg).map_err(|e| e.to_string())?;
        let out = run_circuit(&c.program, &x, &RunOptions::default()).map_err(|e| e.to_string())?;
        worst = worst.max(rel_err(&out.members[0], &reference_eval(g, &x).unwrap()));
        solo.push(out.members[0].clone());
    }
    ensure!(worst <= 1e-6, "exact-mode error {worst:e}");
    let both = run_circuit(&compile(&members, &cfg).map_err(|e| e.to_string())?.program, &x, &RunOptions::default())
        .map_err(|e| e.to_string())?;
    let mean: Vec<f64> = solo[0].iter().zip(&solo[1]).map(|(a, b)| 0.5 * (a + b)).collect();
    let ens = rel_err(&both.averaged, &mean);
    ensure!(ens <= 1e-10, "ensemble mean error {ens:e}");
    Ok(format!("exact mode {worst:.1e}, M = 2 mean {ens:.1e}"))
}

fn probe_monotonicity() -> Outcome {
    let sweep = [0.0, 1e-8, 1e-6, 1e-4, 1e-2];
    let errs: Vec<f64> = sweep
        .iter()
        .map(|&eps| rescale_error_probe(30, 2, &perturbed_moduli(30, 2, eps, 8), 8))
        .collect::<Result<_, _>>()
        .map_err(|e| e.to_string())?;
    ensure!(errs.windows(2).all(|w| w[1] >= w[0]), "{errs:?}");
    Ok(errs.iter().map(|e| format!("{e:.1e}")).collect::<Vec<_>>().join(" <= "))
}

fn main() -> ExitCode {
    let criteria: [(&str, fn() -> Outcome, Option<u64>); 10] = [
        ("level-table", level_table, Some(1)),
        ("transform-equivalence", transform_equivalence, Some(30)),
        ("redistribution-inverses", redistribution, None),
        ("tower-reuse-trace", tower_trace, None),
        ("planner-presets", presets, None),
        ("polynomial-fitting", polynomial_fitting, None),
        ("lemma-suite", lemma_checks, Some(10)),
        ("clustering-oracles", clustering, None),
        ("simulator-fidelity", simulator_fidelity, Some(120)),
        ("probe-monotonicity", probe_monotonicity, None),
    ];
    let mut failed = 0;
    for (name, check, budget) in criteria {
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|_| Err("panicked".into()));
        let took = start.elapsed();
        let outcome = match (outcome, budget) {
            (Ok(_), Some(s)) if took > Duration::from_secs(s) => Err(format!("took {:.2} s, budget {s} s", took.as_secs_f64())),
            (o, _) => o,
        };
        match outcome {
            Ok(detail) => println!("PASS {name}: {detail} [{:.2} s]", took.as_secs_f64()),
            Err(why) => {
                failed += 1;
                println!("FAIL {name}: {why} [{:.2} s]", took.as_secs_f64());
            }
        }
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
