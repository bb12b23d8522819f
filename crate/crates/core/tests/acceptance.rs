//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any fails. `G2IS_ACCEPTANCE=1,4,9` restricts the run.

mod common;

use std::collections::BTreeMap;
use std::path::Path;
use std::process::Command;
use std::time::Instant;

use g2is::core_knowledge::{extract_core_knowledge, CoreKnowledge, PcaOptions};
use g2is::feature_store::{DegeneratePolicy, FeatureKind, GradientFeatureMatrix};
use g2is::kernels::dot_f32;
use g2is::oracle::{oracle_budgets, oracle_pca, oracle_select};
use g2is::pipeline::{toy_compare, ToyConfig};
use g2is::projection::ProjectionSketch;
use g2is::toy::{momentum_gradient, sgd_gradient, AdamState, Sample, ToyModel};
use g2is::walk::{allocate_budgets, audit_constraints, run_selection, run_selection_observed, WalkConfig};
use g2is::Error;
use rand::Rng;

use common::*;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

/// Walk reports audited for criterion 2, accumulated across criteria.
#[derive(Default)]
struct Audit {
    runs: usize,
    checked_steps: usize,
    violations: usize,
}

impl Audit {
    fn add(&mut self, train: &GradientFeatureMatrix, ck: &CoreKnowledge, sel: &g2is::Selection) {
        self.runs += 1;
        self.checked_steps += sel.report.steps.iter().filter(|s| s.step > 0 && !s.fallback).count();
        self.violations += audit_constraints(train, ck, &sel.report, 1e-9).len();
    }
}

fn criterion_1(audit: &mut Audit) -> Outcome {
    let start = Instant::now();
    let instances = 240;
    let mut mismatches = Vec::new();
    let mut steps = 0;
    let mut fallbacks = 0;
    let mut worst_mean = 0f64;
    for seed in 0..instances {
        let inst = random_instance(seed);
        let ck = extract_core_knowledge(&inst.validation, &inst.pca).unwrap();
        let engine = run_selection(&inst.train, &ck, &inst.walk).unwrap();
        let mut means = Vec::new();
        let observed = run_selection_observed(&inst.train, &ck, &inst.walk, &mut |_, state| {
            means.push(state.set_gradient().unwrap());
        })
        .unwrap();
        let oracle = oracle_select(&inst.train, &inst.validation, &inst.pca, &inst.walk).unwrap();
        audit.add(&inst.train, &ck, &engine);

        let engine_seq: Vec<(usize, usize, bool)> =
            engine.report.steps.iter().map(|s| (s.component, s.sample, s.fallback)).collect();
        let oracle_seq: Vec<(usize, usize, bool)> =
            oracle.steps.iter().map(|s| (s.component, s.sample, s.fallback)).collect();
        let observed_seq: Vec<(usize, usize, bool)> =
            observed.report.steps.iter().map(|s| (s.component, s.sample, s.fallback)).collect();
        if engine_seq != oracle_seq || engine.indices() != oracle.selected || observed_seq != engine_seq {
            mismatches.push(seed);
            continue;
        }
        for (m, o) in means.iter().zip(&oracle.steps) {
            for (a, b) in m.iter().zip(&o.set_mean) {
                worst_mean = worst_mean.max((a - b).abs());
            }
        }
        steps += engine_seq.len();
        fallbacks += engine_seq.iter().filter(|s| s.2).count();
    }
    let secs = start.elapsed().as_secs_f64();
    let pass = mismatches.is_empty() && worst_mean <= 1e-9 && secs < 120.0;
    outcome(
        pass,
        format!(
            "{instances} instances, {steps} steps ({fallbacks} fallbacks), mismatched seeds {mismatches:?}, \
             max set-mean gap {worst_mean:.2e}, {secs:.1}s"
        ),
    )
}

fn anisotropic(seed: u64, n: usize, d: usize) -> GradientFeatureMatrix {
    let mut r = rng(seed);
    // Random rotation of axis-aligned scales 1, 0.85, 0.85^2, ...
    let basis: Vec<Vec<f64>> = (0..d).map(|_| unit(gaussian(&mut r, d))).collect();
    let rows: Vec<Vec<f64>> = (0..n)
        .map(|_| {
            let z = gaussian(&mut r, d);
            let mut row = vec![0.0; d];
            for (k, b) in basis.iter().enumerate() {
                let s = 0.85f64.powi(k as i32) * z[k];
                for (x, bj) in row.iter_mut().zip(b) {
                    *x += s * bj;
                }
            }
            row
        })
        .collect();
    matrix(FeatureKind::ValidationSgd, d, &rows)
}

fn criterion_3(audit: &mut Audit) -> Outcome {
    let mut worst_ortho = 0f64;
    let mut worst_alpha = 0f64;
    let mut prefix_errors = Vec::new();
    let mut flip_errors = Vec::new();
    let cases = 24;
    for seed in 0..cases {
        let mut r = rng(300 + seed);
        let d = [8, 16, 32, 64, 96, 128][seed as usize % 6];
        let k_ratio = [0.3, 0.5, 0.8, 0.95][(seed / 6) as usize % 4];
        let val = anisotropic(seed, 300, d);
        let opts = PcaOptions {
            k_ratio,
            ..Default::default()
        };
        let ck = extract_core_knowledge(&val, &opts).unwrap();
        for i in 0..ck.len() {
            for j in 0..ck.len() {
                let dot: f64 = ck.components[i].iter().zip(&ck.components[j]).map(|(a, b)| a * b).sum();
                let want = if i == j { 1.0 } else { 0.0 };
                worst_ortho = worst_ortho.max((dot - want).abs());
            }
        }
        worst_alpha = worst_alpha.max((ck.alphas.iter().sum::<f64>() - 1.0).abs());

        // Minimal prefix against an independent spectrum.
        let spectrum = oracle_pca(&val, &opts).unwrap().spectrum;
        let total: f64 = spectrum.iter().sum();
        let mut acc = 0.0;
        let mut minimal = 0;
        for (k, v) in spectrum.iter().enumerate() {
            acc += v;
            if acc >= k_ratio * total * (1.0 - 1e-12) {
                minimal = k + 1;
                break;
            }
        }
        if ck.len() != minimal {
            prefix_errors.push((seed, ck.len(), minimal));
        }

        let train = matrix(FeatureKind::TrainMomentum, d, &clustered_rows(&mut r, 160, d, 4, 1.0, 0.2));
        let cfg = WalkConfig {
            ratio: 0.1,
            ..Default::default()
        };
        let base = run_selection(&train, &ck, &cfg).unwrap();
        audit.add(&train, &ck, &base);
        for c in 0..ck.len() {
            let mut flipped = ck.clone();
            flipped.components[c].iter_mut().for_each(|x| *x = -*x);
            let other = run_selection(&train, &flipped, &cfg).unwrap();
            if other.selected != base.selected {
                flip_errors.push((seed, c));
            }
        }
    }
    let pass = worst_ortho <= 1e-6 && worst_alpha <= 1e-9 && prefix_errors.is_empty() && flip_errors.is_empty();
    outcome(
        pass,
        format!(
            "{cases} spectra, max |<ci,cj> - I| {worst_ortho:.1e}, max |sum α - 1| {worst_alpha:.1e}, \
             prefix errors {prefix_errors:?}, sign-flip changes {flip_errors:?}"
        ),
    )
}

fn max_distortion(seed: u64, d_in: usize, d_out: usize) -> f64 {
    let mut r = rng(seed);
    let rows: Vec<Vec<f64>> = (0..50).map(|_| unit(gaussian(&mut r, d_in))).collect();
    let m = matrix(FeatureKind::TrainMomentum, d_in, &rows);
    let p = ProjectionSketch::new(seed, d_in, d_out).unwrap().project(&m).unwrap();
    let mut worst = 0f64;
    for i in 0..50 {
        for j in i + 1..50 {
            worst = worst.max((dot_f32(m.row(i), m.row(j)) - dot_f32(p.row(i), p.row(j))).abs());
        }
    }
    worst
}

fn criterion_4() -> Outcome {
    let small = max_distortion(4, 4096, 1024);
    let large = max_distortion(8, 16384, 8192);
    let again = max_distortion(4, 4096, 1024);
    outcome(
        small <= 0.15 && large <= 0.05 && again == small,
        format!("4096->1024 max |Δcos| {small:.4}, 16384->8192 max |Δcos| {large:.4}, rerun identical {}", again == small),
    )
}

fn loss_at(model: &ToyModel, params: &[f64], s: &Sample) -> f64 {
    let mut m = model.clone();
    m.set_params(params);
    m.loss(s)
}

fn central_difference(model: &ToyModel, s: &Sample) -> Vec<f64> {
    let p = model.params();
    let h = 1e-5;
    (0..p.len())
        .map(|i| {
            let mut up = p.clone();
            let mut down = p.clone();
            up[i] += h;
            down[i] -= h;
            (loss_at(model, &up, s) - loss_at(model, &down, s)) / (2.0 * h)
        })
        .collect()
}

/// Largest coordinate error relative to the largest reference coordinate.
fn relative_error(got: &[f64], want: &[f64]) -> f64 {
    let scale = want.iter().fold(0f64, |m, x| m.max(x.abs())).max(1e-300);
    got.iter().zip(want).fold(0f64, |m, (a, b)| m.max((a - b).abs())) / scale
}

fn criterion_5() -> Outcome {
    let mut r = rng(55);
    let mut worst_sgd = 0f64;
    let mut worst_momentum = 0f64;
    let pairs = 100;
    for _ in 0..pairs {
        let classes = r.random_range(2..=6);
        let features = r.random_range(2..=20);
        let mut model = ToyModel::new(classes, features);
        let params: Vec<f64> = (0..model.dim()).map(|_| r.random_range(-1.0..1.0)).collect();
        model.set_params(&params);
        let s = Sample {
            x: (0..features).map(|_| r.random_range(-2.0..2.0)).collect(),
            label: r.random_range(0..classes),
            task: 0,
        };
        let fd = central_difference(&model, &s);
        worst_sgd = worst_sgd.max(relative_error(&sgd_gradient(&model, &s).unwrap(), &fd));

        let mut adam = AdamState::new(model.dim());
        adam.t = r.random_range(1..50);
        adam.m = (0..model.dim()).map(|_| r.random_range(-0.2..0.2)).collect();
        adam.v = (0..model.dim()).map(|_| r.random_range(0.01..0.2)).collect();
        // The direction is an explicit function of the gradient, so feeding it
        // the finite-difference gradient tests the gradient inside it.
        let (dir, warned) = momentum_gradient(&model, &adam, &s).unwrap();
        assert!(!warned);
        worst_momentum = worst_momentum.max(relative_error(&dir, &adam.direction(&fd)));
    }
    outcome(
        worst_sgd <= 1e-4 && worst_momentum <= 1e-4,
        format!("{pairs} pairs, max rel. error sgd {worst_sgd:.2e}, momentum {worst_momentum:.2e}"),
    )
}

fn criterion_6() -> (Outcome, usize) {
    let start = Instant::now();
    let walk = WalkConfig {
        ratio: 0.05,
        delta: 0.8,
        k_ratio: 0.5,
        ..Default::default()
    };
    let pca = PcaOptions {
        k_ratio: 0.5,
        ..Default::default()
    };
    let seeds = 20;
    let mut beats_random = 0;
    let mut beats_no_graph = 0;
    let mut share = 0.0;
    let mut violations = 0;
    let mut losses = [0.0f64; 4];
    let mut beats_components = 0;
    for seed in 0..seeds {
        let cfg = ToyConfig {
            seed,
            ..Default::default()
        };
        let cmp = toy_compare(&cfg, &walk, &pca, false).unwrap();
        beats_random += (cmp.g2is.loss < cmp.random.loss) as usize;
        beats_no_graph += (cmp.g2is.loss < cmp.no_graph.loss) as usize;
        share += cmp.g2is_target_share / seeds as f64;
        violations += cmp.violations;
        losses[0] += cmp.g2is.loss / seeds as f64;
        losses[1] += cmp.random.loss / seeds as f64;
        losses[2] += cmp.no_graph.loss / seeds as f64;
        losses[3] += cmp.no_graph_components.loss / seeds as f64;
        beats_components += (cmp.g2is.loss < cmp.no_graph_components.loss) as usize;
    }
    let secs = start.elapsed().as_secs_f64();
    (
        outcome(
            beats_random >= 16 && beats_no_graph >= 12 && secs < 600.0,
            format!(
                "beats random {beats_random}/{seeds}, beats no-graph {beats_no_graph}/{seeds}, mean loss \
                 g2is {:.4} random {:.4} no-graph {:.4}, target share {share:.2}, {secs:.1}s \
                 [info: per-component quota arm {:.4}, beaten {beats_components}/{seeds}]",
                losses[0], losses[1], losses[2], losses[3]
            ),
        ),
        violations,
    )
}

fn run_cli(dir: &Path, config: &Path, out: &str, threads: usize) -> Result<(Vec<u8>, Vec<u8>), String> {
    let status = Command::new(env!("CARGO_BIN_EXE_g2is"))
        .args(["--threads", &threads.to_string(), "run", "--config"])
        .arg(config)
        .arg("--out-dir")
        .arg(dir.join(out))
        .output()
        .map_err(|e| e.to_string())?;
    if !status.status.success() {
        return Err(String::from_utf8_lossy(&status.stderr).into_owned());
    }
    let read = |name: &str| std::fs::read(dir.join(out).join(name)).map_err(|e| e.to_string());
    Ok((read("selection.jsonl")?, read("report.json")?))
}

fn criterion_7() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("run.toml");
    std::fs::write(
        &config,
        "ratio = 0.05\ndelta = 0.8\nk_ratio = 0.5\n\n[toy]\nn = 4000\ntasks = 4\nseed = 7\n\n[projection]\nseed = 42\nd_out = 48\n",
    )
    .unwrap();
    let runs: Result<Vec<_>, String> = [("a", 1), ("b", 1), ("c", 4), ("d", 4)]
        .iter()
        .map(|(out, t)| run_cli(dir.path(), &config, out, *t))
        .collect();
    match runs {
        Err(e) => outcome(false, format!("pipeline failed: {e}")),
        Ok(runs) => {
            let same = runs.iter().all(|r| r == &runs[0]);
            let lines = runs[0].0.iter().filter(|b| **b == b'\n').count();
            outcome(
                same && lines > 0,
                format!("4 runs (threads 1,1,4,4), {lines} selected lines, byte-identical {same}"),
            )
        }
    }
}

fn criterion_8() -> Outcome {
    let mut r = rng(88);
    let mut bad = Vec::new();
    let mut zero_totals = 0;
    let trials = 1000;
    for t in 0..trials {
        let k = r.random_range(1..=8);
        let mut alpha: Vec<f64> = (0..k)
            .map(|_| if r.random_bool(0.1) { 0.0 } else { r.random_range(0.0..1.0) })
            .collect();
        if alpha.iter().sum::<f64>() == 0.0 {
            alpha[0] = 1.0;
        }
        let s: f64 = alpha.iter().sum();
        alpha.iter_mut().for_each(|a| *a /= s);
        let n = r.random_range(1..=100_000);
        let ratio = if r.random_bool(0.5) { r.random_range(0.0001..0.05) } else { r.random_range(0.0001..=1.0) };
        let total = (ratio * n as f64).round() as usize;
        match allocate_budgets(&alpha, n, ratio) {
            Ok(b) => {
                if b.len() != k || b.iter().sum::<usize>() != total || b != oracle_budgets(&alpha, n, ratio) {
                    bad.push(t);
                }
            }
            Err(Error::Config(_)) if total == 0 => zero_totals += 1,
            Err(_) => bad.push(t),
        }
    }
    outcome(
        bad.is_empty(),
        format!("{trials} triples, {zero_totals} zero-total rejections, failures {bad:?}"),
    )
}

fn peak_rss_bytes() -> Option<u64> {
    let status = std::fs::read_to_string("/proc/self/status").ok()?;
    let line = status.lines().find(|l| l.starts_with("VmHWM:"))?;
    let kb: u64 = line.split_whitespace().nth(1)?.parse().ok()?;
    Some(kb * 1024)
}

fn criterion_9(audit: &mut Audit) -> Outcome {
    let n = 100_000;
    let d = 8192;
    let gen_start = Instant::now();
    let mut r = rng(9);
    let clusters = 64;
    let centres: Vec<Vec<f32>> = (0..clusters)
        .map(|_| unit(gaussian(&mut r, d)).into_iter().map(|x| x as f32).collect())
        .collect();
    let mut data = vec![0f32; n * d];
    g2is::par::for_each_row_mut(&mut data, d, |i, row| {
        let mut rr = rng(1_000_000 + i as u64);
        let c = &centres[rr.random_range(0..clusters)];
        let sign = if rr.random_bool(0.1) { -1.0f32 } else { 1.0 };
        let scale = 1.5 / (d as f32).sqrt();
        for (x, cj) in row.iter_mut().zip(c) {
            let z: f32 = rand_distr::Distribution::sample(&rand_distr::StandardNormal, &mut rr);
            *x = sign * (cj + scale * z);
        }
    });
    let train = GradientFeatureMatrix::from_raw(FeatureKind::TrainMomentum, d, data, DegeneratePolicy::Reject)
        .unwrap()
        .0;
    let val_rows: Vec<Vec<f64>> = (0..200)
        .map(|i| {
            let mut row: Vec<f64> = centres[i % 3].iter().map(|&x| x as f64).collect();
            let noise = gaussian(&mut r, d);
            row.iter_mut().zip(&noise).for_each(|(a, b)| *a += 0.5 * b / (d as f64).sqrt());
            row
        })
        .collect();
    let validation = matrix(FeatureKind::ValidationSgd, d, &val_rows);
    let ck = extract_core_knowledge(&validation, &PcaOptions::default()).unwrap();
    let gen_secs = gen_start.elapsed().as_secs_f64();

    let cfg = WalkConfig {
        ratio: 0.01,
        ..Default::default()
    };
    let start = Instant::now();
    let sel = run_selection(&train, &ck, &cfg).unwrap();
    let secs = start.elapsed().as_secs_f64();
    let peak = peak_rss_bytes();
    let selected = sel.selected.len();
    audit.add(&train, &ck, &sel);
    let peak_gib = peak.map(|b| b as f64 / (1u64 << 30) as f64);
    let threads = std::thread::available_parallelism().map_or(1, |n| n.get());
    outcome(
        secs < 900.0 && peak_gib.is_some_and(|g| g < 8.0),
        format!(
            "n={n} d={d}: {selected} selected from {} components in {secs:.1}s on {threads} thread(s), \
             peak RSS {:.2} GiB (instance built in {gen_secs:.1}s)",
            ck.len(),
            peak_gib.unwrap_or(f64::NAN)
        ),
    )
}

fn main() {
    let only: Option<Vec<usize>> = std::env::var("G2IS_ACCEPTANCE")
        .ok()
        .map(|s| s.split(',').filter_map(|x| x.trim().parse().ok()).collect());
    let wanted = |c: usize| only.as_ref().is_none_or(|o| o.contains(&c) || (c == 2 && !o.is_empty()));
    let names = [
        "",
        "oracle equivalence",
        "constraint soundness",
        "PCA correctness",
        "JL distortion",
        "gradient correctness",
        "end-to-end desk-scale win",
        "determinism",
        "budget apportionment",
        "performance envelope",
    ];
    let mut audit = Audit::default();
    let mut results: BTreeMap<usize, Outcome> = BTreeMap::new();
    let mut run = |c: usize, f: &mut dyn FnMut() -> Outcome| {
        if wanted(c) {
            let o = f();
            println!("criterion {c} {} {}: {}", if o.pass { "PASS" } else { "FAIL" }, names[c], o.detail);
            results.insert(c, o);
        }
    };
    run(8, &mut criterion_8);
    run(4, &mut criterion_4);
    run(5, &mut criterion_5);
    run(1, &mut || criterion_1(&mut audit));
    run(3, &mut || criterion_3(&mut audit));
    let mut toy_violations = 0;
    run(6, &mut || {
        let (o, v) = criterion_6();
        toy_violations = v;
        o
    });
    run(7, &mut criterion_7);
    run(9, &mut || criterion_9(&mut audit));
    run(2, &mut || {
        let total = audit.violations + toy_violations;
        outcome(
            total == 0,
            format!(
                "{} audited walks ({} constrained steps) plus the end-to-end runs, {total} violations",
                audit.runs, audit.checked_steps
            ),
        )
    });

    println!();
    let mut failed = 0;
    for (c, o) in &results {
        println!("{:<28} {}", format!("criterion {c} {}", names[*c]), if o.pass { "PASS" } else { "FAIL" });
        failed += (!o.pass) as usize;
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}
