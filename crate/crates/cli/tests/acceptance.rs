//! End-to-end acceptance run. Prints one PASS/FAIL line per criterion and exits non-zero if any
//! criterion fails. Runs without the libtest harness so the lines always reach the terminal.

use std::path::PathBuf;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use ringfed::checkpoint::{decode, encode, load, save};
use ringfed::federation::{mean_final_sensitivity, Federation, RunHistory, ScheduleKind};
use ringfed::losses::{bce_loss, seg_loss, vss_loss, LossConfig};
use ringfed::metrics::{connected_components, match_lesions, score_volume, EvalConfig, LesionSet};
use ringfed::nn::{ArchConfig, ModelState};
use ringfed::si::{SiConfig, SiState, StepRecord};
use ringfed::synth::build_scenario;
use ringfed::{Extent, Tensor};
use ringfed_cli::commands::{self, Options, SeedResult};
use ringfed_cli::ScenarioConfig;

fn scenario(file: &str) -> (ScenarioConfig, String) {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("scenarios").join(file);
    ScenarioConfig::load(&path).unwrap()
}

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome { pass, detail: detail.into() }
}

fn within(elapsed: Duration, limit_s: u64) -> bool {
    elapsed <= Duration::from_secs(limit_s)
}

fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let scale = norm(a).max(norm(b));
    if scale < 1e-12 {
        diff
    } else {
        diff / scale
    }
}

fn rand_vec(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(lo..hi)).collect()
}

fn si_oracle() -> Outcome {
    let t = Instant::now();
    // L = 0.5 theta^T A theta with a symmetric positive definite A
    let a = [[1.5, 0.4], [0.4, 0.7]];
    let loss = |th: &[f64; 2]| {
        0.5 * (a[0][0] * th[0] * th[0] + 2.0 * a[0][1] * th[0] * th[1] + a[1][1] * th[1] * th[1])
    };
    let theta0 = [1.2, -0.8];
    let mut theta = theta0;
    let mut si = SiState::<f64>::new(&theta0, SiConfig::default()).unwrap();
    for step in 0..2000 {
        let g = [a[0][0] * theta[0] + a[0][1] * theta[1], a[1][0] * theta[0] + a[1][1] * theta[1]];
        let d = [-0.005 * g[0], -0.005 * g[1]];
        theta = [theta[0] + d[0], theta[1] + d[1]];
        si.accumulate(StepRecord { g: &g, delta_theta: &d, t: step }).unwrap();
    }
    let decrease = loss(&theta0) - loss(&theta);
    let sum_w: f64 = si.w_acc().iter().sum();
    let path_err = (sum_w - decrease).abs() / decrease;

    let xi = 1e-3;
    let mut s = SiState::<f64>::from_parts(vec![0.3, -0.2], vec![0.5, 0.0], vec![1.0, 2.0], vec![1.0, 2.0], 0.1, xi, 1)
        .unwrap();
    s.consolidate(&[1.5, 1.0]).unwrap();
    let expect = [0.5 + 0.3 / (0.25 + xi), 0.0];
    let cons_err = s
        .omega()
        .iter()
        .zip(expect)
        .map(|(&o, e): (&f64, f64)| if e == 0.0 { o.abs() } else { ((o - e) / e).abs() })
        .fold(0.0, f64::max);
    let pass = path_err < 0.01 && cons_err < 1e-6 && within(t.elapsed(), 1);
    outcome(pass, format!("path-integral rel err {path_err:.2e}, consolidation rel err {cons_err:.1e}"))
}

fn fd(p: &Tensor<f64>, f: impl Fn(&Tensor<f64>) -> f64) -> Vec<f64> {
    const H: f64 = 1e-6;
    (0..p.len())
        .map(|k| {
            let (mut up, mut down) = (p.clone(), p.clone());
            up.data_mut()[k] += H;
            down.data_mut()[k] -= H;
            (f(&up) - f(&down)) / (2.0 * H)
        })
        .collect()
}

fn gradient_suite() -> Outcome {
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst = [0.0f64; 4];
    for _ in 0..100 {
        let (n, h, w) = (rng.gen_range(1..4), rng.gen_range(1..6), rng.gen_range(1..6));
        let len = n * h * w;
        let fg = if rng.gen_bool(0.2) { 0.0 } else { rng.gen_range(0.1..0.6) };
        let shape = vec![n, 1, h, w];
        let p = Tensor::new(shape.clone(), rand_vec(&mut rng, len, 0.02, 0.98)).unwrap();
        let y = Tensor::new(shape, (0..len).map(|_| f64::from(u8::from(rng.gen_bool(fg)))).collect()).unwrap();
        let cfg = LossConfig { alpha: rng.gen_range(0.0..=1.0), ..LossConfig::default() };

        let e = rel_err(bce_loss(&p, &y).unwrap().grad.data(), &fd(&p, |q| bce_loss(q, &y).unwrap().value));
        worst[0] = worst[0].max(e);
        let e = rel_err(
            vss_loss(&p, &y, &cfg).unwrap().grad.data(),
            &fd(&p, |q| vss_loss(q, &y, &cfg).unwrap().value),
        );
        worst[1] = worst[1].max(e);
        let e = rel_err(
            seg_loss(&p, &y, &cfg).unwrap().grad_wrt_predictions.data(),
            &fd(&p, |q| seg_loss(q, &y, &cfg).unwrap().total),
        );
        worst[2] = worst[2].max(e);

        let k = rng.gen_range(1..20);
        let theta0 = rand_vec(&mut rng, k, -1.0, 1.0);
        let mut si = SiState::new(&theta0, SiConfig { c: rng.gen_range(0.01..1.0), xi: 1e-8 }).unwrap();
        let g = rand_vec(&mut rng, k, -1.0, 1.0);
        let d = rand_vec(&mut rng, k, -0.2, 0.2);
        si.accumulate(StepRecord { g: &g, delta_theta: &d, t: 0 }).unwrap();
        let theta1: Vec<f64> = theta0.iter().zip(&d).map(|(a, b)| a + b).collect();
        si.consolidate(&theta1).unwrap();
        let theta = Tensor::new(vec![k], rand_vec(&mut rng, k, -1.5, 1.5)).unwrap();
        let (_, grad) = si.penalty(theta.data()).unwrap();
        let e = rel_err(&grad, &fd(&theta, |q| si.penalty(q.data()).unwrap().0));
        worst[3] = worst[3].max(e);
    }
    let pass = worst.iter().all(|&e| e < 1e-4) && within(t.elapsed(), 30);
    outcome(
        pass,
        format!("max rel err bce {:.1e} vss {:.1e} seg {:.1e} si {:.1e}", worst[0], worst[1], worst[2], worst[3]),
    )
}

fn final_sens(h: &RunHistory) -> f64 {
    h.final_report().map_or(f64::NAN, |r| r.sensitivity)
}

fn one<'a>(r: &'a SeedResult, kind: ScheduleKind, si: bool) -> &'a RunHistory {
    r.find(kind, si).next().expect("run present")
}

fn forgetting_and_si() -> Outcome {
    let (mut cfg, _) = scenario("sevencenter.cfg");
    cfg.schedule.runs = ["isolated", "svcl", "svcl-si"].map(String::from).to_vec();
    let t = Instant::now();
    let (_, seeds) = commands::simulate(&cfg, &Options::new("unused")).unwrap();
    let elapsed = t.elapsed();
    let (mut a, mut b, mut c) = (0, 0, 0);
    let mut rows = Vec::new();
    for r in &seeds {
        let iso: Vec<RunHistory> = r.find(ScheduleKind::Isolated, false).cloned().collect();
        let iso = mean_final_sensitivity(&iso);
        let plain = final_sens(one(r, ScheduleKind::Svcl, false));
        let with_si = one(r, ScheduleKind::Svcl, true);
        let smooth = with_si
            .snapshots
            .windows(2)
            .all(|w| w[1].report.sensitivity >= w[0].report.sensitivity - 0.02);
        a += usize::from(iso < plain);
        b += usize::from(final_sens(with_si) >= plain);
        c += usize::from(smooth);
        rows.push(format!("{:.3}/{:.3}/{:.3}", iso, plain, final_sens(with_si)));
    }
    let pass = a >= 4 && b >= 4 && c >= 4 && within(elapsed, 600);
    outcome(
        pass,
        format!(
            "(a) {a}/5 (b) {b}/5 (c) {c}/5; iso/svcl/svcl-si per seed {}; {:.0}s",
            rows.join(" "),
            elapsed.as_secs_f64()
        ),
    )
}

fn icl_matches_mixed() -> (Outcome, Outcome) {
    let (mut cfg, _) = scenario("sevencenter.cfg");
    cfg.schedule.runs = ["icl", "mixed"].map(String::from).to_vec();
    let t = Instant::now();
    let (cfg, seeds) = commands::simulate(&cfg, &Options::new("unused")).unwrap();
    let elapsed = t.elapsed();
    let mut ok = 0;
    let mut rows = Vec::new();
    let mut afprs = Vec::new();
    for r in &seeds {
        let icl = one(r, ScheduleKind::Icl, false);
        let mixed = one(r, ScheduleKind::Mixed, false);
        let same_budget = icl.trace.steps.len() == mixed.trace.steps.len();
        let (si, sm) = (final_sens(icl), final_sens(mixed));
        ok += usize::from(same_budget && (si - sm).abs() <= 0.05);
        rows.push(format!("{si:.3}/{sm:.3}"));
        afprs.push(icl.final_report().map_or(f64::NAN, |r| r.afpr));
    }
    let pass = ok == 5 && within(elapsed, 600);
    let crit = outcome(
        pass,
        format!(
            "{ok}/5 within 0.05 (rounds {}, {} epochs per visit); icl/mixed {}; {:.0}s",
            cfg.schedule.rounds,
            cfg.schedule.icl_epochs_visit,
            rows.join(" "),
            elapsed.as_secs_f64()
        ),
    );
    let afpr = outcome(
        afprs.iter().all(|&a| a < 1.0),
        format!("final ICL afpr per seed {}", afprs.iter().map(|a| format!("{a:.2}")).collect::<Vec<_>>().join(" ")),
    );
    (crit, afpr)
}

fn ledger_exactness() -> Outcome {
    let t = Instant::now();
    let (cfg, _) = scenario("sevencenter.cfg");
    // the ledger depends only on the schedule, so a tiny training budget suffices
    let mut train = cfg.train_config().unwrap();
    train.subepochs = 1;
    train.volumes_per_subepoch = 1;
    train.patches_per_subepoch = 1;
    train.batch_size = 1;
    train.monitor_validation = false;
    let sc = build_scenario(&cfg.task_spec().unwrap(), 7, 1, 1, 1, &cfg.shifts().unwrap(), 5).unwrap();
    let fed = Federation::from_scenario(&sc, &train, 5);
    let svcl = fed.run_svcl(&cfg.svcl_schedule(false)).unwrap();
    let icl_schedule = cfg.icl_schedule(false);
    let icl = fed.run_icl(&icl_schedule).unwrap();
    let totals = icl.ledger.totals();
    let rounds = icl_schedule.rounds;
    let interior = (1..7).all(|i| totals.get(&(i, i + 1)) == Some(&rounds));
    let wrap = totals.get(&(7, 1)) == Some(&(rounds - 1));
    let pass = svcl.ledger.len() == 6
        && svcl.ledger.events().iter().all(|e| e.to == e.from + 1)
        && interior
        && wrap
        && totals.len() == 7
        && icl.ledger.len() == 41
        && within(t.elapsed(), 1);
    outcome(
        pass,
        format!(
            "svcl {} transfers, icl {} transfers ({} per interior pair, {} on the wrap); {} ms",
            svcl.ledger.len(),
            icl.ledger.len(),
            totals.get(&(1, 2)).copied().unwrap_or(0),
            totals.get(&(7, 1)).copied().unwrap_or(0),
            t.elapsed().as_millis()
        ),
    )
}

fn data_amount_trend() -> Outcome {
    let (cfg, text) = scenario("sevencenter.cfg");
    let dir = tempfile::tempdir().unwrap();
    let t = Instant::now();
    let mut opts = Options::new(dir.path());
    opts.plots = false;
    let out = commands::sweep(&cfg, &text, &opts).unwrap();
    let elapsed = t.elapsed();
    let m = &out.medians;
    let monotone = m.windows(2).all(|w| w[1].1 >= w[0].1 - 0.03);
    let ratio_up = m.last().unwrap().3 > m[0].3;
    let pass = m.len() == 4 && monotone && ratio_up && within(elapsed, 900);
    outcome(
        pass,
        format!(
            "median sensitivity {}; small-TP ratio {:.3} -> {:.3}; {:.0}s",
            m.iter().map(|r| format!("{}:{:.3}", r.0, r.1)).collect::<Vec<_>>().join(" "),
            m[0].3,
            m.last().unwrap().3,
            elapsed.as_secs_f64()
        ),
    )
}

const SIDE: usize = 16;

fn brute_components(mask: &[u8]) -> Vec<Vec<u32>> {
    let mut label = vec![usize::MAX; mask.len()];
    let mut comps: Vec<Vec<u32>> = Vec::new();
    for start in 0..mask.len() {
        if mask[start] == 0 || label[start] != usize::MAX {
            continue;
        }
        let id = comps.len();
        let mut comp = Vec::new();
        let mut stack = vec![start];
        label[start] = id;
        while let Some(v) = stack.pop() {
            comp.push(v as u32);
            let (y, x) = ((v / SIDE) as i64, (v % SIDE) as i64);
            for dy in -1..=1 {
                for dx in -1..=1 {
                    let (ny, nx) = (y + dy, x + dx);
                    if ny < 0 || nx < 0 || ny >= SIDE as i64 || nx >= SIDE as i64 {
                        continue;
                    }
                    let n = ny as usize * SIDE + nx as usize;
                    if mask[n] != 0 && label[n] == usize::MAX {
                        label[n] = id;
                        stack.push(n);
                    }
                }
            }
        }
        comp.sort_unstable();
        comps.push(comp);
    }
    comps
}

fn metrics_oracle() -> Outcome {
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let ext = Extent::d2(SIDE, SIDE);
    let mut mismatches = 0;
    for _ in 0..1000 {
        let mut mask = || {
            let density = rng.gen_range(0.05..0.6);
            (0..SIDE * SIDE).map(|_| u8::from(rng.gen_bool(density))).collect::<Vec<u8>>()
        };
        let (pm, tm) = (mask(), mask());
        let (pb, tb) = (brute_components(&pm), brute_components(&tm));
        if connected_components(&pm, ext).components != pb || connected_components(&tm, ext).components != tb {
            mismatches += 1;
            continue;
        }
        let shares = |a: &[u32], b: &[u32]| a.iter().any(|v| b.contains(v));
        let tp = tb.iter().filter(|t| pb.iter().any(|p| shares(p, t))).count();
        let fp = pb.iter().filter(|p| tb.iter().all(|t| !shares(p, t))).count();
        let m = match_lesions(&LesionSet { components: pb }, &LesionSet { components: tb.clone() }, SIDE * SIDE, 1);
        let counts = score_volume(&pm, &tm, ext, &EvalConfig::default());
        if (m.tp, m.fp, m.fn_) != (tp, fp, tb.len() - tp) || (counts.tp, counts.fp, counts.fn_) != (tp, fp, tb.len() - tp) {
            mismatches += 1;
        }
    }
    let pass = mismatches == 0 && within(t.elapsed(), 10);
    outcome(pass, format!("{mismatches} mismatches over 1000 mask pairs; {} ms", t.elapsed().as_millis()))
}

fn checkpoint_fidelity() -> Outcome {
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let dir = tempfile::tempdir().unwrap();
    let mut failures = 0;
    for i in 0..100 {
        let chans = |rng: &mut ChaCha8Rng| (0..rng.gen_range(1..4)).map(|_| rng.gen_range(1..6)).collect::<Vec<_>>();
        let arch = ArchConfig {
            ndim: rng.gen_range(2..4),
            kernel: [1, 3][rng.gen_range(0..2)],
            normal_channels: chans(&mut rng),
            low_factor: rng.gen_range(0..4),
            low_channels: chans(&mut rng),
            fused_channels: chans(&mut rng),
            output_prior: 0.01,
        };
        let model = ModelState::<f32>::init(arch.layers().unwrap(), &mut rng).unwrap();
        let n = model.param_count();
        let mut v = |scale: f32| (0..n).map(|_| rng.gen_range(-scale..scale)).collect::<Vec<f32>>();
        let si = SiState::from_parts(v(1.0), v(5.0).into_iter().map(f32::abs).collect(), v(1.0), v(1.0), 0.1, 1e-8, 3)
            .unwrap();
        let path = dir.path().join(format!("m{i}.ckpt"));
        save(&path, &model, Some(&si)).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        let (m2, s2) = load(&path).unwrap();
        let s2 = s2.unwrap();
        let same = |a: &[f32], b: &[f32]| a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits()) && a.len() == b.len();
        let ok = same(m2.theta(), model.theta())
            && m2.layers() == model.layers()
            && same(s2.w_acc(), si.w_acc())
            && same(s2.omega(), si.omega())
            && same(s2.anchor(), si.anchor())
            && same(s2.prev_final(), si.prev_final())
            && encode(&m2, Some(&s2)).unwrap() == bytes
            && decode(&bytes).is_ok();
        failures += usize::from(!ok);
    }
    let pass = failures == 0 && within(t.elapsed(), 5);
    outcome(pass, format!("{failures} of 100 models differ after save/load; {} ms", t.elapsed().as_millis()))
}

fn reproducibility() -> Outcome {
    let (cfg, text) = scenario("bilateral.cfg");
    let mut files = Vec::new();
    for _ in 0..2 {
        let dir = tempfile::tempdir().unwrap();
        let mut opts = Options::new(dir.path());
        opts.plots = false;
        commands::run(&cfg, &text, &opts).unwrap();
        let read = |f: &str| std::fs::read(dir.path().join(f)).unwrap();
        files.push((read("metrics.csv"), read("ledger.csv"), read("summary.csv")));
    }
    let pass = files[0] == files[1] && !files[0].1.is_empty();
    outcome(pass, format!("bilateral.cfg twice: metrics, ledger and summary CSVs identical = {pass}"))
}

fn report(name: &'static str, o: Outcome, results: &mut Vec<(&'static str, Outcome)>) {
    println!("{} {name}: {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
    results.push((name, o));
}

fn main() {
    // honor `cargo test -- <filter>` style invocations that do not target this binary
    let args: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    if args.iter().any(|a| !"acceptance".contains(a.as_str())) {
        return;
    }
    if std::env::args().any(|a| a == "--list") {
        return;
    }
    let mut results: Vec<(&str, Outcome)> = Vec::new();
    report("1 si oracle", si_oracle(), &mut results);
    report("2 gradient suite", gradient_suite(), &mut results);
    report("5 ledger exactness", ledger_exactness(), &mut results);
    report("7 metrics oracle", metrics_oracle(), &mut results);
    report("8 checkpoint fidelity", checkpoint_fidelity(), &mut results);
    report("9 reproducibility", reproducibility(), &mut results);
    report("3 forgetting and si benefit", forgetting_and_si(), &mut results);
    let (icl, afpr) = icl_matches_mixed();
    report("4 icl matches mixed", icl, &mut results);
    report("6 data amount trend", data_amount_trend(), &mut results);
    println!("info final icl afpr below 1: {} ({})", if afpr.pass { "yes" } else { "no" }, afpr.detail);
    let failed: Vec<&str> = results.iter().filter(|(_, o)| !o.pass).map(|(n, _)| *n).collect();
    println!("acceptance: {}/{} criteria passed", results.len() - failed.len(), results.len());
    if !failed.is_empty() {
        eprintln!("failed: {}", failed.join(", "));
        std::process::exit(1);
    }
}
