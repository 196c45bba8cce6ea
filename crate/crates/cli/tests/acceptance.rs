//! One PASS/FAIL line per acceptance criterion.
//!
//! Criteria 7 to 9 are empirical trends; their lines are printed but only
//! fail the test when METAVD_STRICT_ACCEPTANCE=1. Everything else asserts.

use std::path::Path;
use std::process::Command;
use std::time::Instant;

use metavd_core::config::RunConfig;
use metavd_core::data::dirichlet_partition;
use metavd_core::engine::{precision_weights, product_mode_weights, server_round};
use metavd_core::eval::{ece, evaluate, mce, PredictionRecord};
use metavd_core::experiment::{init_state, load_data, make_plan, run_train};
use metavd_core::gradcheck::{self, GradcheckOptions};
use metavd_core::metavd::{kl_term, plain_loss_and_grads};
use metavd_core::rng::rng_for;
use metavd_core::{ClientRegistry, Dataset, DropoutVector, ModelParams, Tensor};
use rand::Rng;

const TREND: &str = include_str!("../../../configs/trend.toml");

struct Line {
    id: usize,
    ok: bool,
    strict: bool,
    text: String,
}

fn report(lines: &mut Vec<Line>, id: usize, ok: bool, strict: bool, text: String) {
    println!("{} criterion {id}: {text}", if ok { "PASS" } else { "FAIL" });
    lines.push(Line { id, ok, strict, text });
}

fn median(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    if n % 2 == 1 {
        s[n / 2]
    } else {
        0.5 * (s[n / 2 - 1] + s[n / 2])
    }
}

fn criterion_1(lines: &mut Vec<Line>) {
    let t = Instant::now();
    let r = gradcheck::run(&GradcheckOptions::default()).unwrap();
    let secs = t.elapsed().as_secs_f64();
    let cases = r.checks.iter().map(|c| c.cases).min().unwrap_or(0);
    let worst: Vec<String> = r
        .checks
        .iter()
        .map(|c| format!("{} {:.1e}/{:.0e}", c.name, c.max_rel_err, c.tolerance))
        .collect();
    let ok = r.passed() && cases >= 100 && secs < 60.0;
    report(lines, 1, ok, true, format!("{cases} cases per check, {secs:.1}s, {}", worst.join(", ")));
}

fn criterion_2(lines: &mut Vec<Line>) {
    let one = kl_term(&DropoutVector::constant(&[3, 4], 0.0)) / 12.0;
    let err = (one - 0.5 * 2f64.ln()).abs();
    let mut rng = rng_for(2, &[]);
    let mut violations = 0;
    for _ in 0..10_000 {
        let a: f64 = rng.random_range(-8.0..8.0);
        let b: f64 = rng.random_range(-8.0..8.0);
        let (lo, hi) = if a < b { (a, b) } else { (b, a) };
        if lo == hi {
            continue;
        }
        let kl = |v| kl_term(&DropoutVector::constant(&[1], v));
        if !(kl(lo) > kl(hi)) {
            violations += 1;
        }
    }
    let ok = err <= 1e-12 && violations == 0;
    report(lines, 2, ok, true, format!("|KL(alpha=1) - 0.5 ln 2| = {err:.1e}, {violations} monotonicity violations in 10000 pairs"));
}

fn grid_argmax(g: &[f64], var: &[f64], mu: &[f64]) -> f64 {
    let mut best = (f64::NEG_INFINITY, 0.0);
    for i in 0..=200_000 {
        let x = -10.0 + i as f64 * 1e-4;
        let logp: f64 = (0..g.len()).map(|m| -g[m] * (x - mu[m]).powi(2) / (2.0 * var[m])).sum();
        if logp > best.0 {
            best = (logp, x);
        }
    }
    best.1
}

fn criterion_3(lines: &mut Vec<Line>) {
    let mut rng = rng_for(3, &[]);
    let mut worst: f64 = 0.0;
    for _ in 0..50 {
        let m = rng.random_range(2..=5);
        let g: Vec<f64> = (0..m).map(|_| rng.random_range(0.05..1.0)).collect();
        let alpha: Vec<f64> = (0..m).map(|_| rng.random_range(-2.0f64..2.0).exp()).collect();
        let theta: Vec<f64> = (0..m)
            .map(|_| rng.random_range(0.2..3.0) * if rng.random_bool(0.5) { 1.0 } else { -1.0 })
            .collect();
        let r = precision_weights(&g, &alpha, &theta);
        let mean: f64 = r.iter().zip(&theta).map(|(r, t)| r * t).sum();
        let var: Vec<f64> = alpha.iter().zip(&theta).map(|(a, t)| a * t * t).collect();
        worst = worst.max((mean - grid_argmax(&g, &var, &theta)).abs());
    }
    let r = product_mode_weights(&[1.0, 9.0]);
    let footnote = r == [0.9, 0.1];
    let ok = worst <= 1e-4 && footnote;
    report(
        lines,
        3,
        ok,
        true,
        format!("max |weighted mean - grid argmax| = {worst:.1e} over 50 instances, footnote weights {r:?}"),
    );
}

fn reference_fedavg_round(reg: &ClientRegistry<'_>, cfg: &RunConfig, theta: &ModelParams, spec: &metavd_core::MlpSpec) -> ModelParams {
    let pool = reg.plan.training_pool();
    let total: usize = pool.iter().map(|&c| reg.train_indices(c).unwrap().len()).sum();
    let mut agg = theta.clone();
    for t in agg.tensors_mut() {
        t.data_mut().iter_mut().for_each(|v| *v = 0.0);
    }
    for &c in &pool {
        let idx = reg.train_indices(c).unwrap();
        let batch = reg.data.batch(idx).unwrap();
        let mut local = theta.clone();
        for _ in 0..cfg.algo.local_steps {
            let (_, grad) = plain_loss_and_grads(spec, &local, &batch).unwrap();
            for (p, g) in local.tensors_mut().zip(grad.tensors()) {
                for (p, g) in p.data_mut().iter_mut().zip(g.data()) {
                    *p -= cfg.algo.gamma * g;
                }
            }
        }
        let w = idx.len() as f64 / total as f64;
        for (a, p) in agg.tensors_mut().zip(local.tensors()) {
            for (a, p) in a.data_mut().iter_mut().zip(p.data()) {
                *a += w * p;
            }
        }
    }
    agg
}

fn criterion_4(lines: &mut Vec<Line>) {
    let o = |s: &[&str]| s.iter().map(|x| x.to_string()).collect::<Vec<_>>();
    let mut cfg = RunConfig::from_toml_str(
        TREND,
        &o(&[
            "algo.method=fedavg",
            "algo.metavd=off",
            "algo.eta=1.0",
            "algo.clients_per_round=16",
            "algo.batch_size=100000",
            "algo.local_steps=3",
            "algo.gamma=0.05",
            "data.synthetic.n=1000",
        ]),
    )
    .unwrap();
    cfg.algo.grad_clip = None;
    let data = load_data(&cfg).unwrap();
    let plan = make_plan(&cfg, &data).unwrap();
    let reg = ClientRegistry::new(&data, &plan);
    let mut state = init_state(&cfg, &data, &plan).unwrap();
    let mut reference = state.theta.clone();
    let mut mismatched = None;
    for round in 0..10 {
        server_round(&mut state, &cfg.algo, &reg).unwrap();
        reference = reference_fedavg_round(&reg, &cfg, &reference, &state.spec);
        let same = state
            .theta
            .flatten()
            .iter()
            .zip(reference.flatten())
            .all(|(a, b)| a.to_bits() == b.to_bits());
        if !same && mismatched.is_none() {
            mismatched = Some(round);
        }
    }
    let text = match mismatched {
        None => "engine and reference theta bitwise equal for 10 rounds".to_string(),
        Some(r) => format!("first bitwise mismatch at round {r}"),
    };
    report(lines, 4, mismatched.is_none(), true, text);
}

fn criterion_5(lines: &mut Vec<Line>) {
    let t = Instant::now();
    let n = 10 * 6000;
    let data = Dataset::new(Tensor::matrix(n, 1, vec![0.0; n]).unwrap(), (0..n).map(|i| i % 10).collect(), 10, "balanced").unwrap();
    let means: Vec<f64> = (0..20)
        .map(|seed| {
            let plan = dirichlet_partition(&data, 130, 0.1, &mut rng_for(seed, &[5])).unwrap();
            let per = plan.classes_per_client(&data);
            per.iter().sum::<usize>() as f64 / per.len() as f64
        })
        .collect();
    let mean = means.iter().sum::<f64>() / means.len() as f64;
    let secs = t.elapsed().as_secs_f64();
    let ok = (mean - 4.65).abs() <= 2.0 * 1.49 && secs < 30.0;
    report(lines, 5, ok, true, format!("mean classes per client {mean:.2} (target 4.65 +- 2 x 1.49), {secs:.1}s"));
}

fn rec(confidence: f64, correct: bool) -> PredictionRecord {
    PredictionRecord {
        confidence,
        predicted: 0,
        actual: if correct { 0 } else { 1 },
        client_id: 0,
    }
}

fn criterion_6(lines: &mut Vec<Line>) {
    let ten: Vec<_> = (0..10).map(|i| rec(0.9, i < 6)).collect();
    let fixture_ece = ece(&ten, 10).unwrap();
    // bin [0, .5): conf .3, acc .2 -> 10; bin [.5, 1]: conf .9, acc .6 -> 30
    let mut two: Vec<_> = (0..10).map(|i| rec(0.3, i < 2)).collect();
    two.extend((0..10).map(|i| rec(0.9, i < 6)));
    let fixture_mce = mce(&two, 2).unwrap();

    // Error diffusion over sorted confidences keeps every bin's correct
    // count within one of its summed confidence.
    let mut rng = rng_for(6, &[]);
    let mut conf: Vec<f64> = (0..10_000).map(|_| rng.random_range(0.2..1.0)).collect();
    conf.sort_by(f64::total_cmp);
    let mut acc = 0.0;
    let calibrated: Vec<_> = conf
        .iter()
        .map(|&c| {
            let before = acc;
            acc += c;
            rec(c, acc.floor() > before.floor())
        })
        .collect();
    let perfect = ece(&calibrated, 10).unwrap();
    let ok = (fixture_ece - 30.0).abs() < 1e-9 && (fixture_mce - 30.0).abs() < 1e-9 && perfect < 0.5;
    report(
        lines,
        6,
        ok,
        true,
        format!("fixture ECE {fixture_ece:.6}, two-bin MCE {fixture_mce:.6}, calibrated ECE {perfect:.3}"),
    );
}

struct TrendRun {
    ood: f64,
    ood_ece: f64,
    compressed: Option<(f64, f64)>,
}

fn trend_run(seed: u64, overrides: &[&str], compress: bool, dir: &Path) -> TrendRun {
    let mut o: Vec<String> = overrides.iter().map(|s| s.to_string()).collect();
    o.push(format!("seed={seed}"));
    let cfg = RunConfig::from_toml_str(TREND, &o).unwrap();
    let out = run_train(&cfg, dir).unwrap();
    let compressed = compress.then(|| {
        let data = load_data(&cfg).unwrap();
        let reg = ClientRegistry::new(&data, &out.plan);
        let mut eval = cfg.eval.clone();
        eval.compress_threshold = Some(0.8);
        let r = evaluate(&out.state, &reg, &cfg.algo, &eval).unwrap();
        (r.ood_acc.unwrap(), r.sparsity)
    });
    TrendRun {
        ood: out.final_report.ood_acc.unwrap(),
        ood_ece: out.final_report.ood_ece.unwrap(),
        compressed,
    }
}

fn criteria_7_to_9(lines: &mut Vec<Line>) {
    let tmp = tempfile::tempdir().unwrap();
    let t = Instant::now();
    let mut fedavg = Vec::new();
    let mut reptile = Vec::new();
    let mut metavd = Vec::new();
    for seed in 1..=5u64 {
        let d = |name: &str| tmp.path().join(format!("{name}-{seed}"));
        fedavg.push(trend_run(seed, &["algo.method=fedavg", "algo.metavd=off"], false, &d("fedavg")));
        reptile.push(trend_run(seed, &["algo.metavd=off"], false, &d("reptile")));
        metavd.push(trend_run(seed, &[], true, &d("metavd")));
        let (c_ood, sp) = metavd[metavd.len() - 1].compressed.unwrap();
        println!(
            "  seed {seed}: ood fedavg {:.1} reptile {:.1} metavd {:.1} | ood ece reptile {:.2} metavd {:.2} | compressed ood {c_ood:.1} sparsity {sp:.1}",
            fedavg[fedavg.len() - 1].ood,
            reptile[reptile.len() - 1].ood,
            metavd[metavd.len() - 1].ood,
            reptile[reptile.len() - 1].ood_ece,
            metavd[metavd.len() - 1].ood_ece,
        );
    }
    let secs = t.elapsed().as_secs_f64();
    let ood = |v: &[TrendRun]| median(&v.iter().map(|r| r.ood).collect::<Vec<_>>());
    let (f, r, m) = (ood(&fedavg), ood(&reptile), ood(&metavd));
    let wins = metavd.iter().zip(&reptile).filter(|(a, b)| a.ood > b.ood).count();
    let ok7 = m > r && r > f && wins >= 4 && secs < 600.0;
    report(
        lines,
        7,
        ok7,
        false,
        format!("median OOD acc metavd {m:.1} / reptile {r:.1} / fedavg {f:.1}, metavd ahead in {wins}/5 seeds, {secs:.0}s"),
    );

    let ece_of = |v: &[TrendRun]| median(&v.iter().map(|r| r.ood_ece).collect::<Vec<_>>());
    let (em, er) = (ece_of(&metavd), ece_of(&reptile));
    report(lines, 8, em <= er, false, format!("median OOD ECE metavd {em:.2} vs reptile {er:.2}"));

    let sparsity = median(&metavd.iter().map(|r| r.compressed.unwrap().1).collect::<Vec<_>>());
    let drop = median(&metavd.iter().map(|r| r.ood - r.compressed.unwrap().0).collect::<Vec<_>>());
    report(
        lines,
        9,
        sparsity >= 40.0 && drop <= 5.0,
        false,
        format!("p=0.8 median sparsity {sparsity:.1}%, median OOD drop {drop:.1} points"),
    );
}

fn criterion_10(lines: &mut Vec<Line>) {
    let tmp = tempfile::tempdir().unwrap();
    let config = tmp.path().join("trend.toml");
    std::fs::write(&config, TREND).unwrap();
    let train = |out: &Path| {
        let status = Command::new(env!("CARGO_BIN_EXE_metavd"))
            .args(["train", "-c"])
            .arg(&config)
            .args(["--set", "algo.rounds=20", "--set", "eval.eval_every=5", "--out"])
            .arg(out)
            .output()
            .unwrap();
        assert!(status.status.success(), "{}", String::from_utf8_lossy(&status.stderr));
    };
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    train(&a);
    train(&b);
    let same = |f: &str| std::fs::read(a.join(f)).unwrap() == std::fs::read(b.join(f)).unwrap();
    let (m, c) = (same("metrics.jsonl"), same("checkpoint.mvd"));
    report(lines, 10, m && c, true, format!("metrics.jsonl identical: {m}, checkpoint.mvd identical: {c}"));
}

#[test]
fn acceptance_criteria() {
    let mut lines = Vec::new();
    criterion_1(&mut lines);
    criterion_2(&mut lines);
    criterion_3(&mut lines);
    criterion_4(&mut lines);
    criterion_5(&mut lines);
    criterion_6(&mut lines);
    criteria_7_to_9(&mut lines);
    criterion_10(&mut lines);

    let strict = std::env::var("METAVD_STRICT_ACCEPTANCE").is_ok_and(|v| v == "1");
    let failed: Vec<String> = lines
        .iter()
        .filter(|l| !l.ok && (l.strict || strict))
        .map(|l| format!("{}: {}", l.id, l.text))
        .collect();
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
