//! End-to-end acceptance checks. Runs as a plain binary so every criterion
//! prints its own PASS/FAIL line; exits nonzero if any criterion fails.

use std::path::Path;
use std::time::{Duration, Instant};

use rand::Rng;
use specshape::classunlearn::{fit_threshold, reweight_distribution, solve_beta, tilt_distribution};
use specshape::net::{LabeledDataset, Partition};
use specshape::rng::{seeded, sub_seed};
use specshape::unlearn::{build_adversarial_set, verify_amun_bound};
use specshape_cli::config::{ExperimentConfig, Scenario, ScenarioParams};
use specshape_cli::report::{ReportBundle, Section};
use specshape_cli::scenarios::amun::{bound_instance, AmunParams, BoundParams};
use specshape_cli::scenarios::circulant::CirculantParams;
use specshape_cli::scenarios::clip::ClipParams;
use specshape_cli::scenarios::fastclip::FastClipParams;
use specshape_cli::scenarios::lotos::LotosParams;
use specshape_cli::scenarios::miann::MiaNnParams;
use specshape_cli::scenarios::spectrum::SpectrumParams;
use specshape_cli::scenarios::trw::TrwParams;
use specshape_cli::{emit_report, run_config};

struct Verdict {
    passed: bool,
    summary: String,
}

fn verdict(passed: bool, summary: String) -> Verdict {
    Verdict { passed, summary }
}

fn seeds(n: u64) -> Vec<u64> {
    (1..=n).collect()
}

fn run(scenario: Scenario, seeds: Vec<u64>, params: ScenarioParams) -> (ReportBundle, Duration) {
    let start = Instant::now();
    let bundle = run_config(&ExperimentConfig::new(scenario, seeds, params)).expect("scenario runs");
    (bundle, start.elapsed())
}

fn only(bundle: &ReportBundle) -> &Section {
    assert_eq!(bundle.sections.len(), 1);
    &bundle.sections[0]
}

/// Largest value of `name` over all runs; a missing value counts as a failure.
fn worst(section: &Section, name: &str) -> f64 {
    section
        .runs
        .iter()
        .map(|r| r.metric(name).unwrap_or(f64::INFINITY))
        .fold(f64::NEG_INFINITY, f64::max)
}

fn failed_runs(section: &Section) -> usize {
    section.runs.iter().filter(|r| r.error.is_some()).count()
}

fn ac1() -> Verdict {
    let p = CirculantParams {
        instances: 200,
        ..Default::default()
    };
    let (b, t) = run(Scenario::CirculantVerify, vec![1], ScenarioParams::CirculantVerify(p));
    let s = only(&b);
    let err = worst(s, "max_abs_err");
    let flags = worst(s, "duplicate_failures") + worst(s, "bound_failures") + worst(s, "equality_failures");
    verdict(
        s.passed && err <= 1e-8 && flags == 0.0 && t.as_secs_f64() < 60.0,
        format!("200 filter banks, max abs err {err:.2e}, flag failures {flags}, {:.1}s", t.as_secs_f64()),
    )
}

fn ac2() -> Verdict {
    let p = SpectrumParams {
        instances: 10,
        max_dim: 400,
        k: 5,
        rel_tol: 1e-6,
        probes: 100,
        adjoint_tol: 1e-10,
        ..Default::default()
    };
    let (b, t) = run(Scenario::Spectrum, seeds(10), ScenarioParams::Spectrum(p));
    let s = only(&b);
    let rel = worst(s, "max_rel_err");
    let adj = worst(s, "adjoint_max_err");
    let unconverged = worst(s, "unconverged");
    verdict(
        s.passed && rel <= 1e-6 && adj <= 1e-10 && failed_runs(s) == 0,
        format!(
            "100 operators, top-5 rel err {rel:.2e}, adjoint err {adj:.2e}, unconverged {unconverged}, {:.1}s",
            t.as_secs_f64()
        ),
    )
}

fn ac3() -> Verdict {
    let p = ClipParams {
        dense_instances: 50,
        ..Default::default()
    };
    let (b, _) = run(Scenario::Clip, vec![1], ScenarioParams::Clip(p));
    let s = only(&b);
    let law = worst(s, "law_max_err");
    let idem = worst(s, "idempotence_max_change");
    let conv = worst(s, "conv_max_dev");
    let cases = worst(s, "conv_cases");
    verdict(
        s.passed && law <= 1e-6 && idem <= 1e-8 && conv <= 1e-3,
        format!("projection law {law:.2e}, idempotence {idem:.2e}, conv |σ₁−c| {conv:.2e} over {cases} padding/stride cases"),
    )
}

fn ac4() -> Verdict {
    let (b, t) = run(Scenario::Fastclip, seeds(3), ScenarioParams::Fastclip(FastClipParams::default()));
    let s = only(&b);
    let dev = worst(s, "max_band_dev");
    let acc = s
        .runs
        .iter()
        .map(|r| r.metric("train_accuracy").unwrap_or(0.0))
        .fold(f64::INFINITY, f64::min);
    verdict(
        s.passed && dev <= 0.05 && acc >= 0.9 && t.as_secs_f64() < 300.0,
        format!("3 seeds, max |σ₁−1| {dev:.3}, min train acc {acc:.3}, {:.1}s", t.as_secs_f64()),
    )
}

fn kl(q: &[f64], p: &[f64]) -> f64 {
    q.iter()
        .zip(p)
        .filter(|(a, _)| **a > 0.0)
        .map(|(a, b)| a * (a / b).ln())
        .sum()
}

/// Slides a simplex point toward the extreme-score vertex until its first
/// moment equals `c`, turning a random draw into a feasible point.
fn make_feasible(q: &mut [f64], s: &[f64], c: f64) {
    let m: f64 = q.iter().zip(s).map(|(a, b)| a * b).sum();
    let v = (0..s.len()).fold(0, |best, i| {
        let better = if m < c { s[i] > s[best] } else { s[i] < s[best] };
        if better {
            i
        } else {
            best
        }
    });
    let t = (c - m) / (s[v] - m);
    for (i, qi) in q.iter_mut().enumerate() {
        *qi = (1.0 - t) * *qi + if i == v { t } else { 0.0 };
    }
}

fn random_simplex<R: Rng>(rng: &mut R, k: usize) -> Vec<f64> {
    let e: Vec<f64> = (0..k).map(|_| -rng.random::<f64>().max(1e-300).ln()).collect();
    let t: f64 = e.iter().sum();
    e.into_iter().map(|v| v / t).collect()
}

fn ac5() -> Verdict {
    let mut rng = seeded(5);
    let mut moment_err: f64 = 0.0;
    let mut reduction_err: f64 = 0.0;
    let mut shift_err: f64 = 0.0;
    for _ in 0..100 {
        let k = rng.random_range(3..=8);
        let y_f = rng.random_range(0..k);
        let p: Vec<f64> = random_simplex(&mut rng, k).iter().map(|v| 0.9 * v + 0.1 / k as f64).collect();
        let s: Vec<f64> = (0..k - 1).map(|_| rng.random_range(-2.0..2.0)).collect();
        let (lo, hi) = s.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(*v), b.max(*v)));
        let c = lo + (hi - lo) * rng.random_range(0.05..0.95);
        let (beta, m) = solve_beta(&p, y_f, &s, c).expect("interior target");
        moment_err = moment_err.max((m - c).abs());
        let zero = tilt_distribution(&p, y_f, &s, 0.0).unwrap().probs;
        let plain = reweight_distribution(&p, y_f).unwrap();
        reduction_err = reduction_err.max(zero.iter().zip(&plain).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max));
        let shifted: Vec<f64> = s.iter().map(|v| v + 3.7).collect();
        let a = tilt_distribution(&p, y_f, &s, beta).unwrap().probs;
        let b = tilt_distribution(&p, y_f, &shifted, beta).unwrap().probs;
        shift_err = shift_err.max(a.iter().zip(&b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max));
    }

    // information projection versus a million random feasible points
    let mut kl_violation: f64 = 0.0;
    for k in [3usize, 4, 5] {
        let p = random_simplex(&mut rng, k);
        let y_f = k - 1;
        let s: Vec<f64> = (0..k - 1).map(|_| rng.random_range(-1.0..1.0)).collect();
        let (lo, hi) = s.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(*v), b.max(*v)));
        let c = lo + (hi - lo) * rng.random_range(0.2..0.8);
        let (beta, _) = solve_beta(&p, y_f, &s, c).unwrap();
        let q = tilt_distribution(&p, y_f, &s, beta).unwrap().probs;
        let base = reweight_distribution(&p, y_f).unwrap();
        let best = kl(&q[..k - 1], &base[..k - 1]);
        for _ in 0..1_000_000 / 3 + 1 {
            let mut cand = random_simplex(&mut rng, k - 1);
            make_feasible(&mut cand, &s, c);
            kl_violation = kl_violation.max(best - kl(&cand, &base[..k - 1]));
        }
    }
    verdict(
        moment_err <= 1e-10 && kl_violation <= 1e-6 && reduction_err <= 1e-12 && shift_err <= 1e-12,
        format!(
            "moment err {moment_err:.1e}, KL beaten by {kl_violation:.1e}, β=0 err {reduction_err:.1e}, shift err {shift_err:.1e}"
        ),
    )
}

fn ac6() -> Verdict {
    let (b, t) = run(Scenario::Trw, seeds(10), ScenarioParams::Trw(TrwParams::default()));
    let s = only(&b);
    let wins = s.runs.iter().filter(|r| r.passed).count();
    verdict(
        wins >= 8 && t.as_secs_f64() < 120.0,
        format!("tilted beats plain reweighting on {wins}/10 seeds, {:.1}s", t.as_secs_f64()),
    )
}

fn ac7() -> Verdict {
    let p = AmunParams {
        bound: None,
        ..Default::default()
    };
    let (b, t) = run(Scenario::Amun, seeds(10), ScenarioParams::Amun(p));
    let s = only(&b);
    let mut closer = 0;
    let mut max_drop: f64 = 0.0;
    for r in &s.runs {
        let m = |n: &str| r.metric(n).unwrap_or(f64::NAN);
        if (m("auc_after") - 0.5).abs() < (m("auc_before") - 0.5).abs() {
            closer += 1;
        }
        max_drop = max_drop.max(m("test_acc_before") - m("test_acc_after"));
    }
    let ok = s.runs.iter().filter(|r| r.passed).count();
    verdict(
        ok >= 8 && closer >= 8 && t.as_secs_f64() < 300.0,
        format!(
            "AUC moves toward 0.5 on {closer}/10, both conditions on {ok}/10, worst drop {:.1} points, {:.1}s",
            100.0 * max_drop,
            t.as_secs_f64()
        ),
    )
}

fn ac8() -> Verdict {
    let params = AmunParams::default();
    let b = BoundParams::default();
    let (mut conclusive, mut holds, mut tried) = (0, 0, 0u64);
    while conclusive < 100 && tried < 400 {
        tried += 1;
        let seed = sub_seed(8, tried);
        let inst = bound_instance(&b, seed).expect("logistic fit");
        let forget = LabeledDataset::new(vec![inst.inputs[0].clone()], vec![inst.labels[0]], vec![Partition::Forget], 2).unwrap();
        let attack = specshape::net::AttackConfig {
            seed: sub_seed(seed, 1),
            ..params.attack.clone()
        };
        let adv = build_adversarial_set(&inst.original, &forget, params.eps_init, &attack, params.max_doublings).unwrap();
        let Some(rec) = adv.records.first() else { continue };
        let r = verify_amun_bound(&inst, &rec.x_adv, rec.y_adv, inst.smoothness(&rec.x_adv)).unwrap();
        if !r.inconclusive {
            conclusive += 1;
            holds += usize::from(r.holds);
        }
    }
    verdict(
        conclusive == 100 && holds >= 95,
        format!("bound holds on {holds}/{conclusive} conclusive instances ({tried} drawn)"),
    )
}

fn ac9() -> Verdict {
    let p = LotosParams::default();
    let mal = p.lotos.mal;
    let (b, t) = run(Scenario::Lotos, seeds(10), ScenarioParams::Lotos(p));
    let s = only(&b);
    let ok = s.runs.iter().filter(|r| r.passed).count();
    verdict(
        ok >= 7,
        format!(
            "cross-norm ≤ {:.2} and lower transfer on {ok}/10 seeds, worst cross-norm {:.3}, {:.1}s",
            mal + 0.05,
            worst(s, "cross_norm_lotos"),
            t.as_secs_f64()
        ),
    )
}

/// Best accuracy over every cut (data points and midpoints) and both orientations.
fn exhaustive_threshold(pos: &[f64], neg: &[f64]) -> f64 {
    let mut cuts: Vec<f64> = pos.iter().chain(neg).copied().collect();
    cuts.sort_by(f64::total_cmp);
    let mut cand = vec![cuts[0] - 1.0, cuts[cuts.len() - 1] + 1.0];
    cand.extend(cuts.windows(2).map(|w| 0.5 * (w[0] + w[1])));
    cand.extend(cuts.iter().copied());
    let n = (pos.len() + neg.len()) as f64;
    let mut best: f64 = 0.0;
    for t in cand {
        for above in [true, false] {
            let ok = pos.iter().filter(|&&v| (v > t) == above).count() + neg.iter().filter(|&&v| (v > t) != above).count();
            best = best.max(ok as f64 / n);
        }
    }
    best
}

fn ac10() -> Verdict {
    let (b, _) = run(Scenario::Miann, seeds(5), ScenarioParams::Miann(MiaNnParams::default()));
    let s = only(&b);
    let ok = s.runs.iter().filter(|r| r.passed).count();
    let ratio = worst(s, "gap_over_std");
    let mut rng = seeded(10);
    let mut mismatches = 0;
    for _ in 0..500 {
        let np = rng.random_range(1..40);
        let nn = rng.random_range(1..40);
        let pos: Vec<f64> = (0..np).map(|_| (rng.random_range(-3.0..3.0f64) * 4.0).round() / 4.0 + 0.5).collect();
        let neg: Vec<f64> = (0..nn).map(|_| (rng.random_range(-3.0..3.0f64) * 4.0).round() / 4.0).collect();
        let t = fit_threshold(&pos, &neg).unwrap();
        mismatches += usize::from(t.accuracy != exhaustive_threshold(&pos, &neg));
    }
    verdict(
        ok == 5 && mismatches == 0,
        format!("held-out gap ≤ 2σ on {ok}/5 seeds (worst gap/σ {ratio:.2}), threshold mismatches {mismatches}/500"),
    )
}

/// Small configurations of every scenario, so the rerun check stays cheap.
fn small(scenario: Scenario) -> ScenarioParams {
    match scenario {
        Scenario::Spectrum => ScenarioParams::Spectrum(SpectrumParams {
            instances: 3,
            max_dim: 60,
            ..Default::default()
        }),
        Scenario::Clip => ScenarioParams::Clip(ClipParams {
            dense_instances: 3,
            ..Default::default()
        }),
        Scenario::Fastclip => {
            let mut p = FastClipParams::default();
            p.train.steps = 300;
            ScenarioParams::Fastclip(p)
        }
        Scenario::CirculantVerify => ScenarioParams::CirculantVerify(CirculantParams {
            instances: 10,
            ortho_instances: 2,
            ..Default::default()
        }),
        Scenario::Lotos => {
            let mut p = LotosParams::default();
            p.train.steps = 300;
            ScenarioParams::Lotos(p)
        }
        Scenario::Amun => {
            let mut p = AmunParams::default();
            p.train.steps = 500;
            ScenarioParams::Amun(p)
        }
        Scenario::Trw => {
            let mut p = TrwParams::default();
            p.train.steps = 300;
            ScenarioParams::Trw(p)
        }
        Scenario::Miann => {
            let mut p = MiaNnParams::default();
            p.train.steps = 300;
            ScenarioParams::Miann(p)
        }
        Scenario::VerifyAll => ScenarioParams::VerifyAll(specshape_cli::scenarios::verify_all::VerifyAllParams {
            circulant: CirculantParams {
                instances: 5,
                ortho_instances: 1,
                ..Default::default()
            },
            spectrum: SpectrumParams {
                instances: 2,
                max_dim: 40,
                ..Default::default()
            },
            clip: ClipParams {
                dense_instances: 2,
                ..Default::default()
            },
        }),
    }
}

fn read_dir_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<(String, Vec<u8>)> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (e.file_name().to_string_lossy().into_owned(), std::fs::read(e.path()).unwrap())
        })
        .collect();
    files.sort();
    files
}

fn ac11() -> Verdict {
    let mut differing = Vec::new();
    for scenario in Scenario::ALL {
        let cfg = ExperimentConfig::new(scenario, vec![3, 4], small(scenario));
        let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
        for d in &dirs {
            emit_report(&run_config(&cfg).unwrap(), d.path()).unwrap();
        }
        if read_dir_bytes(dirs[0].path()) != read_dir_bytes(dirs[1].path()) {
            differing.push(scenario.name());
        }
    }
    verdict(
        differing.is_empty(),
        format!("{} scenarios rerun, differing: {:?}", Scenario::ALL.len(), differing),
    )
}

fn main() {
    let criteria: [(&str, fn() -> Verdict); 11] = [
        ("AC1 circulant closed form", ac1),
        ("AC2 PowerQR and adjoints", ac2),
        ("AC3 clip projection law", ac3),
        ("AC4 FastClip training", ac4),
        ("AC5 tilted projection", ac5),
        ("AC6 TRW boundary", ac6),
        ("AC7 AMUN direction", ac7),
        ("AC8 AMUN one-step bound", ac8),
        ("AC9 LOTOS transferability", ac9),
        ("AC10 MIA-NN self-consistency", ac10),
        ("AC11 determinism", ac11),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failures = 0;
    for (name, check) in criteria {
        if !filter.is_empty() && !filter.iter().any(|f| name.contains(f.as_str())) {
            continue;
        }
        let v = check();
        failures += usize::from(!v.passed);
        println!("{} {name}: {}", if v.passed { "PASS" } else { "FAIL" }, v.summary);
    }
    if failures > 0 {
        eprintln!("{failures} acceptance criteria failed");
        std::process::exit(1);
    }
}
