use std::collections::BTreeMap;
use std::fs::File;
use std::io::Write;
use std::path::{Path, PathBuf};

use hecnn::cluster::{ensemble_slice_cluster, full_cluster, slice_cluster, ClusterMode};
use hecnn::graph::{
    build_resnet_with, load_model, load_tensor, reference_eval, save_model, ActKind, ModelGraph, Node, NodeKind,
    ResNetConfig, Tensor, Variant,
};
use hecnn::levels::{analyze_levels, plan_modulus_chain, strategy_table, ModulusChainPlan};
use hecnn::poly::fit_relu_poly;
use hecnn::sim::{compile as lower, run_circuit, CircuitProgram, LowerConfig, ModuliMode, RunOptions};
use hecnn::train::{accuracy, lemma_suite, separable_data, train, EpochLog, TinyMLP, TrainConfig};
use hecnn::transform::{apply_pipeline, Strategy};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::Serialize;
use serde_json::json;

use crate::config::{parse_strategy, pick, preset, CliResult, Failure, PipelineConfig};
use crate::{
    ClusterArgs, CompareArgs, CompileArgs, FitPolyArgs, LevelsArgs, ModelSource, PlanArgs, RunArgs, TrainLabArgs,
};

const DEFAULT_DELTA_BITS: u32 = 40;
const DEFAULT_SUBLEVEL: u32 = 2;
const DEFAULT_K: usize = 4;
const TOL_TRANSFORM: f64 = 1e-8;
const TOL_SIM: f64 = 1e-6;

/// Writes to stdout; a closed pipe downstream is not an error.
fn say(text: &str) -> CliResult {
    match std::io::stdout().lock().write_all(text.as_bytes()) {
        Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => Err(e.into()),
        _ => Ok(()),
    }
}

fn emit(value: &impl Serialize, out: Option<&Path>) -> CliResult {
    let text = serde_json::to_string_pretty(value)? + "\n";
    match out {
        Some(p) => Ok(std::fs::write(p, text)?),
        None => say(&text),
    }
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> CliResult<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))
}

/// Accepts a bare plan or the object printed by `plan`.
fn read_plan(path: &Path) -> CliResult<ModulusChainPlan> {
    let mut v: serde_json::Value = read_json(path)?;
    if let Some(inner) = v.get_mut("plan") {
        v = inner.take();
    }
    serde_json::from_value(v).map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))
}

fn variant(name: &str) -> CliResult<Variant> {
    Variant::parse(name).ok_or_else(|| Failure::Usage(format!("unknown variant {name}")))
}

fn generated(name: &str, src: &ModelSource, seed: u64) -> CliResult<ModelGraph> {
    let mut cfg = ResNetConfig::new(variant(name)?, ActKind::Relu { degree: src.degree });
    cfg.seed = seed;
    cfg.input_hw = src.input_hw.unwrap_or(cfg.input_hw);
    cfg.base_width = src.base_width.unwrap_or(cfg.base_width);
    Ok(build_resnet_with(&cfg))
}

fn load_source(src: &ModelSource, seed: u64) -> CliResult<ModelGraph> {
    match (&src.model, &src.variant) {
        (Some(p), _) => Ok(load_model(p)?),
        (None, Some(v)) => generated(v, src, seed),
        (None, None) => Err(Failure::Usage("give --model or --variant".into())),
    }
}

fn strategy_of(flag: &Option<String>, cfg: &PipelineConfig) -> CliResult<Strategy> {
    parse_strategy(&pick(flag.clone(), &cfg.strategy, "p2fr".into()))
}

fn rel_err(got: &[f64], want: &[f64]) -> f64 {
    let n = want.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(f64::MIN_POSITIVE);
    got.iter().zip(want).fold(0.0f64, |m, (a, b)| m.max((a - b).abs())) / n
}

fn argmax(v: &[f64]) -> usize {
    hecnn::train::argmax(v)
}

fn random_input(g: &ModelGraph, rng: &mut ChaCha20Rng) -> CliResult<Tensor> {
    let shape = g.validate()?[&g.input_id()?];
    Ok(Tensor::new(shape, (0..shape.len()).map(|_| rng.gen_range(-1.0..1.0)).collect())?)
}

pub fn fit_poly(a: FitPolyArgs) -> CliResult {
    let (p, report) = fit_relu_poly(a.degree, a.clip, a.bits)?;
    emit(
        &json!({
            "degree": a.degree,
            "clip": a.clip,
            "bits": a.bits,
            "int_coeffs": p.int_coeffs,
            "coeffs": p.real_coeffs(),
            "in_box": p.in_box(),
            "report": report,
        }),
        None,
    )
}

pub fn compile(a: CompileArgs, cfg: &PipelineConfig) -> CliResult {
    let seed = pick(a.seed, &cfg.seed, 0);
    let g = load_source(&a.source, seed)?;
    let strategy = strategy_of(&a.strategy, cfg)?;
    let (h, report) = apply_pipeline(&g, strategy)?;
    if let Some(out) = &a.out {
        save_model(&h, out)?;
    }
    if let Some(path) = &a.emit_program {
        let lc = LowerConfig {
            delta_bits: pick(a.delta_bits, &cfg.delta_bits, DEFAULT_DELTA_BITS),
            sublevel: pick(a.sublevel, &cfg.sublevel, DEFAULT_SUBLEVEL),
            slots: None,
        };
        emit(&lower(std::slice::from_ref(&h), &lc)?.program, Some(path))?;
    }
    emit(&report, None)
}

pub fn levels(a: LevelsArgs) -> CliResult {
    let strategies: Vec<Strategy> = if a.strategy.eq_ignore_ascii_case("all") {
        Strategy::ALL.to_vec()
    } else {
        vec![parse_strategy(&a.strategy)?]
    };
    let mut rows: Vec<(String, Vec<Option<u32>>)> = Vec::new();
    if let Some(path) = &a.model {
        let g = load_model(path)?;
        let cells = strategies
            .iter()
            .map(|&s| apply_pipeline(&g, s).and_then(|(h, _)| analyze_levels(&h, s)).ok())
            .collect();
        rows.push((path.display().to_string(), cells));
    } else {
        let variants: Vec<Variant> =
            if a.variant.eq_ignore_ascii_case("all") { Variant::ALL.to_vec() } else { vec![variant(&a.variant)?] };
        for v in variants {
            let table = strategy_table(v)?;
            let cell = |s: &Strategy| table.iter().find(|(t, _)| t == s).map(|&(_, l)| l);
            rows.push((v.name().to_string(), strategies.iter().map(cell).collect()));
        }
    }
    if a.json {
        let rows: Vec<_> = rows
            .iter()
            .map(|(name, cells)| {
                let levels: BTreeMap<String, Option<u32>> =
                    strategies.iter().map(|s| s.name().to_ascii_lowercase()).zip(cells.iter().copied()).collect();
                json!({ "name": name, "levels": levels })
            })
            .collect();
        return emit(&json!({ "strategies": strategies, "rows": rows }), None);
    }
    let head: Vec<&str> = strategies.iter().map(|s| s.name()).collect();
    let mut text = format!("variant {}\n", head.join(" "));
    for (name, cells) in rows {
        let cells: Vec<String> = cells.iter().map(|c| c.map_or("-".into(), |v| v.to_string())).collect();
        text += &format!("{name} {}\n", cells.join(" "));
    }
    say(&text)
}

pub fn plan(a: PlanArgs, cfg: &PipelineConfig) -> CliResult {
    let seed = pick(a.seed, &cfg.seed, 0);
    let preset_name = a.preset.clone().or_else(|| cfg.preset.clone());
    let p = preset_name.as_deref().map(preset).transpose()?;
    let g = match (&p, &a.source.model, &a.source.variant) {
        (Some(p), None, None) => generated(&p.name, &a.source, seed)?,
        _ => load_source(&a.source, seed)?,
    };
    let strategy = strategy_of(&a.strategy, cfg)?;
    let (h, _) = apply_pipeline(&g, strategy)?;
    let delta_bits = a.delta_bits.or(p.as_ref().map(|p| p.delta_bits)).or(cfg.delta_bits).unwrap_or(DEFAULT_DELTA_BITS);
    let sublevel = a.sublevel.or(p.as_ref().map(|p| p.sublevel)).or(cfg.sublevel).unwrap_or(DEFAULT_SUBLEVEL);
    let (plan, schedule) = plan_modulus_chain(&h, delta_bits, sublevel, p.as_ref()).map_err(|e| match e {
        hecnn::Error::DepthExhausted(m) => Failure::Check(format!("plan: {m}")),
        e => e.into(),
    })?;
    let out = json!({
        "strategy": strategy,
        "rescales": plan.rescale_count(),
        "log2_q": plan.total_bits,
        "plan": plan,
        "schedule": schedule,
    });
    emit(&out, a.out.as_deref())
}

pub fn cluster(a: ClusterArgs, cfg: &PipelineConfig) -> CliResult {
    let mode = ClusterMode::parse(&a.mode).ok_or_else(|| Failure::Usage(format!("unknown mode {}", a.mode)))?;
    let k = pick(a.k, &cfg.k, DEFAULT_K);
    let seed = pick(a.seed, &cfg.seed, 0);
    let models = a.models.iter().map(load_model).collect::<hecnn::Result<Vec<_>>>()?;
    if mode != ClusterMode::Ensemble && models.len() != 1 {
        return Err(Failure::Usage(format!("{} mode takes exactly one model", a.mode)));
    }
    let (out, report) = match mode {
        ClusterMode::Full => full_cluster(&models[0], k, seed).map(|(g, r)| (vec![g], r))?,
        ClusterMode::Slice => slice_cluster(&models[0], k, seed).map(|(g, r)| (vec![g], r))?,
        ClusterMode::Ensemble => ensemble_slice_cluster(&models, k, seed)?,
    };
    if let Some(dir) = &a.out_dir {
        std::fs::create_dir_all(dir)?;
        for (g, src) in out.iter().zip(&a.models) {
            let stem = src.file_stem().map_or("model".into(), |s| s.to_string_lossy().into_owned());
            save_model(g, dir.join(format!("{stem}.clustered.json")))?;
        }
    }
    emit(&report, None)
}

fn warmup(a: &TrainLabArgs) -> Vec<f64> {
    match (&a.warmup_factors, a.warmup_epochs) {
        (Some(f), _) => f.clone(),
        (None, Some(t)) => (1..=t).map(|i| i as f64 / (t + 1) as f64).collect(),
        (None, None) => TrainConfig::default().warmup,
    }
}

pub fn train_lab(a: TrainLabArgs, cfg: &PipelineConfig) -> CliResult {
    let d = TrainConfig::default();
    let tc = TrainConfig {
        c: a.clip.unwrap_or(d.c),
        zeta: a.zeta.unwrap_or(d.zeta),
        warmup: warmup(&a),
        lr: a.lr.unwrap_or(d.lr),
        batch_size: a.batch_size.unwrap_or(d.batch_size),
        epochs: a.epochs.unwrap_or(d.epochs),
        seed: pick(a.seed, &cfg.seed, d.seed),
    };
    tc.validate()?;
    let act = fit_relu_poly(2, tc.c, 10)?.0.real_coeffs();
    let data = separable_data(a.samples, tc.seed);
    let mut sizes = vec![3];
    sizes.extend(&a.hidden);
    sizes.push(2);
    let mut net = TinyMLP::new(&sizes, act.clone(), tc.seed)?;
    let logs = train(&mut net, &data, &tc)?;

    let mut csv = String::from(EpochLog::CSV_HEADER);
    csv.push('\n');
    for l in &logs {
        csv.push_str(&l.csv_row());
        csv.push('\n');
    }
    match &a.csv {
        Some(p) => File::create(p)?.write_all(csv.as_bytes())?,
        None => say(&csv)?,
    }

    let lemmas = lemma_suite(&act, a.lemma_states, &tc, tc.seed)?;
    let report = json!({
        "config": tc,
        "final_accuracy": accuracy(&net, &data)?,
        "lemmas": lemmas,
    });
    emit(&report, a.report.as_deref())?;
    if !lemmas.pass {
        return Err(Failure::Check("lemma-suite".into()));
    }
    Ok(())
}

pub fn run(a: RunArgs, cfg: &PipelineConfig) -> CliResult {
    let plan = a.plan.as_deref().map(read_plan).transpose()?;
    let mut prog: CircuitProgram = match &a.program {
        Some(p) => read_json(p)?,
        None => {
            if a.models.is_empty() {
                return Err(Failure::Usage("give --model or --program".into()));
            }
            let models = a.models.iter().map(load_model).collect::<hecnn::Result<Vec<_>>>()?;
            let lc = LowerConfig {
                delta_bits: a.delta_bits.or(plan.as_ref().map(|p| p.delta_bits)).or(cfg.delta_bits).unwrap_or(DEFAULT_DELTA_BITS),
                sublevel: a.sublevel.or(plan.as_ref().map(|p| p.sublevel)).or(cfg.sublevel).unwrap_or(DEFAULT_SUBLEVEL),
                slots: None,
            };
            lower(&models, &lc)?.program
        }
    };
    if let Some(p) = plan {
        if p.delta_bits != prog.delta_bits || p.sublevel != prog.sublevel {
            return Err(Failure::Usage("plan Δ and ℓ differ from the program's".into()));
        }
        if p.rescale_count() < prog.plan.rescale_count() {
            return Err(Failure::Check(format!(
                "plan: {} rescale moduli, the circuit needs {}",
                p.rescale_count(),
                prog.plan.rescale_count()
            )));
        }
        prog.plan = p;
    }
    let moduli = match a.moduli.as_str() {
        "exact" => ModuliMode::Exact,
        "primes" => ModuliMode::Primes,
        m => return Err(Failure::Usage(format!("unknown moduli mode {m}"))),
    };
    let input = load_tensor(&a.input)?;
    let out = run_circuit(&prog, &input, &RunOptions { moduli, trace: a.trace })?;
    emit(&out, a.out.as_deref())
}

#[derive(Serialize)]
struct Check {
    name: &'static str,
    pass: bool,
    value: f64,
    tolerance: f64,
    detail: String,
}

#[derive(Serialize)]
struct CompareReport {
    model: String,
    strategy: Strategy,
    delta_bits: u32,
    sublevel: u32,
    fault_injected: bool,
    checks: Vec<Check>,
    pass: bool,
}

/// Perturbs a low-order coefficient of the first fused node, keeping its
/// form so that later checks still run.
fn inject_fault(g: &mut ModelGraph) -> CliResult {
    let ids = [NodeKind::PolySkip, NodeKind::PolyAct].iter().flat_map(|&k| g.ids_of_kind(k)).collect::<Vec<_>>();
    let id = *ids.first().ok_or_else(|| Failure::Usage("no polynomial node to corrupt".into()))?;
    match g.node_mut(id) {
        Some(Node::PolySkip(p)) => {
            let k = p.position(0, 0).or(p.position(1, 0)).unwrap_or(0);
            p.coeffs[0][k] += 0.05;
        }
        Some(Node::PolyAct(p)) => p.coeffs[0][0] += 0.05,
        _ => unreachable!(),
    }
    Ok(())
}

pub fn compare(a: CompareArgs, cfg: &PipelineConfig) -> CliResult {
    let seed = pick(a.seed, &cfg.seed, 0);
    let g = load_source(&a.source, seed)?;
    let strategy = strategy_of(&a.strategy, cfg)?;
    let delta_bits = pick(a.delta_bits, &cfg.delta_bits, DEFAULT_DELTA_BITS);
    let sublevel = pick(a.sublevel, &cfg.sublevel, DEFAULT_SUBLEVEL);
    let tol_t = pick(a.tol_transform, &cfg.tol_transform, TOL_TRANSFORM);
    let tol_s = pick(a.tol_sim, &cfg.tol_sim, TOL_SIM);
    let (mut h, _) = apply_pipeline(&g, strategy)?;
    if a.inject_fault {
        inject_fault(&mut h)?;
    }
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut checks = Vec::new();

    let (mut worst, mut flips) = (0.0f64, 0);
    for _ in 0..a.trials {
        let x = random_input(&g, &mut rng)?;
        let (want, got) = (reference_eval(&g, &x)?, reference_eval(&h, &x)?);
        worst = worst.max(rel_err(&got, &want));
        flips += usize::from(argmax(&got) != argmax(&want));
    }
    checks.push(Check {
        name: "transform-equivalence",
        pass: worst <= tol_t && flips == 0,
        value: worst,
        tolerance: tol_t,
        detail: format!("{} inputs, {flips} argmax changes", a.trials),
    });

    let compiled = lower(std::slice::from_ref(&h), &LowerConfig { delta_bits, sublevel, slots: None })?;
    let base = if strategy == Strategy::P2FRT { Strategy::P2FR } else { strategy };
    let expected = match (sublevel, base) {
        (1, s) => Some(analyze_levels(&h, s)?),
        (2, Strategy::P2FR) => Some(analyze_levels(&h, Strategy::P2FRT)?),
        _ => None,
    };
    checks.push(match expected {
        Some(want) => Check {
            name: "level-table",
            pass: compiled.depth == want,
            value: compiled.depth as f64,
            tolerance: 0.0,
            detail: format!("circuit uses {} rescales, analyzer expects {want}", compiled.depth),
        },
        None => Check {
            name: "level-table",
            pass: true,
            value: compiled.depth as f64,
            tolerance: 0.0,
            detail: format!("no analyzer column for {strategy} at sublevel {sublevel}"),
        },
    });

    let inputs = match &a.input {
        Some(p) => vec![load_tensor(p)?],
        None => (0..a.sim_inputs).map(|_| random_input(&g, &mut rng)).collect::<CliResult<Vec<_>>>()?,
    };
    let mut sim_worst = 0.0f64;
    for x in &inputs {
        let out = run_circuit(&compiled.program, x, &RunOptions::default())?;
        sim_worst = sim_worst.max(rel_err(&out.members[0], &reference_eval(&g, x)?));
    }
    checks.push(Check {
        name: "simulator-fidelity",
        pass: sim_worst <= tol_s,
        value: sim_worst,
        tolerance: tol_s,
        detail: format!("{} inputs, exact moduli", inputs.len()),
    });

    let first_fail = checks.iter().find(|c| !c.pass).map(|c| c.name);
    let report = CompareReport {
        model: a.source.model.as_ref().map_or_else(
            || a.source.variant.clone().unwrap_or_default(),
            |p: &PathBuf| p.display().to_string(),
        ),
        strategy,
        delta_bits,
        sublevel,
        fault_injected: a.inject_fault,
        pass: first_fail.is_none(),
        checks,
    };
    emit(&report, None)?;
    if let Some(p) = &a.out {
        emit(&report, Some(p))?;
    }
    match first_fail {
        Some(name) => Err(Failure::Check(name.into())),
        None => Ok(()),
    }
}
