//! The `run`, `sweep` and `compare` commands, usable without the binary.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use ringfed::checkpoint;
use ringfed::federation::{Federation, RunHistory, ScheduleKind, TrainConfig, HISTORY_CSV_HEADER};
use ringfed::synth::{build_scenario, Scenario};

use crate::artifacts::{csv_bytes, test_set_hash, Manifest, OutDir, SeedEntry};
use crate::config::{RunSpec, ScenarioConfig};
use crate::error::CliError;
use crate::plots::{write_chart, Chart, Series};

#[derive(Debug, Clone)]
pub struct Options {
    /// Replaces `seeds.master`; the repeat count is kept.
    pub seed_override: Option<u64>,
    pub workers: usize,
    pub out: PathBuf,
    /// Only the CSV twins are written when false.
    pub plots: bool,
}

impl Options {
    pub fn new(out: impl Into<PathBuf>) -> Self {
        Self {
            seed_override: None,
            workers: 1,
            out: out.into(),
            plots: true,
        }
    }
}

pub struct SeedResult {
    pub seed: u64,
    pub test_hash: String,
    pub histories: Vec<RunHistory>,
}

impl SeedResult {
    pub fn find(&self, kind: ScheduleKind, use_si: bool) -> impl Iterator<Item = &RunHistory> {
        self.histories
            .iter()
            .filter(move |h| h.schedule == kind && h.use_si == use_si)
    }
}

pub struct RunOutput {
    pub out_dir: PathBuf,
    pub seeds: Vec<SeedResult>,
}

pub struct SweepPoint {
    pub seed: u64,
    pub fraction: f64,
    pub history: RunHistory,
}

pub struct SweepOutput {
    pub out_dir: PathBuf,
    pub points: Vec<SweepPoint>,
    /// One row per fraction: (fraction, median sensitivity, median afpr, median small-TP ratio).
    pub medians: Vec<(f64, f64, f64, f64)>,
}

/// Runs `jobs` on up to `workers` threads and returns results in job order.
pub fn parallel_map<J: Sync, R: Send>(
    jobs: &[J],
    workers: usize,
    f: impl Fn(&J) -> Result<R, CliError> + Sync,
) -> Result<Vec<R>, CliError> {
    let slots: Vec<Mutex<Option<Result<R, CliError>>>> = jobs.iter().map(|_| Mutex::new(None)).collect();
    let next = AtomicUsize::new(0);
    std::thread::scope(|s| {
        for _ in 0..workers.clamp(1, jobs.len().max(1)) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some(job) = jobs.get(i) else { break };
                let r = f(job);
                let failed = r.is_err();
                *slots[i].lock().unwrap() = Some(r);
                if failed {
                    next.store(jobs.len(), Ordering::SeqCst);
                }
            });
        }
    });
    let mut out = Vec::with_capacity(jobs.len());
    for slot in slots {
        match slot.into_inner().unwrap() {
            Some(r) => out.push(r?),
            None => continue,
        }
    }
    if out.len() != jobs.len() {
        return Err(CliError::Numerical("a job failed before all jobs ran".into()));
    }
    Ok(out)
}

struct Prepared {
    cfg: ScenarioConfig,
    train: TrainConfig,
    seeds: Vec<u64>,
}

fn prepare(cfg: &ScenarioConfig, opts: &Options) -> Result<Prepared, CliError> {
    let mut cfg = cfg.clone();
    if let Some(s) = opts.seed_override {
        cfg.seeds.master = s;
    }
    cfg.validate()?;
    let train = cfg.train_config()?;
    let seeds = cfg.seed_list();
    Ok(Prepared { cfg, train, seeds })
}

fn scenario_for(cfg: &ScenarioConfig, seed: u64) -> Result<Scenario, CliError> {
    let c = &cfg.centers;
    Ok(build_scenario(
        &cfg.task_spec()?,
        c.count,
        c.per_center,
        c.validation,
        c.test,
        &cfg.shifts()?,
        seed,
    )?)
}

fn run_one(cfg: &ScenarioConfig, fed: &Federation, spec: RunSpec) -> Result<Vec<RunHistory>, CliError> {
    Ok(match spec.kind {
        ScheduleKind::Isolated => fed.run_isolated(cfg.schedule.epochs_initial)?,
        ScheduleKind::Svcl => vec![fed.run_svcl(&cfg.svcl_schedule(spec.use_si))?],
        ScheduleKind::Icl => vec![fed.run_icl(&cfg.icl_schedule(spec.use_si))?],
        ScheduleKind::Mixed => vec![fed.run_mixed(cfg.mixed_epochs(), cfg.schedule.mixed_snapshot_every, false)?],
    })
}

/// Trains every configured schedule for every seed without writing anything.
pub fn simulate(cfg: &ScenarioConfig, opts: &Options) -> Result<(ScenarioConfig, Vec<SeedResult>), CliError> {
    let p = prepare(cfg, opts)?;
    let scenarios: Vec<Scenario> = p.seeds.iter().map(|&s| scenario_for(&p.cfg, s)).collect::<Result<_, _>>()?;
    let specs = p.cfg.run_specs();
    let jobs: Vec<(usize, RunSpec)> = (0..p.seeds.len())
        .flat_map(|i| specs.iter().map(move |&s| (i, s)))
        .collect();
    let results = parallel_map(&jobs, opts.workers, |&(i, spec)| {
        let fed = Federation::from_scenario(&scenarios[i], &p.train, p.seeds[i]);
        run_one(&p.cfg, &fed, spec)
    })?;
    let mut seeds: Vec<SeedResult> = p
        .seeds
        .iter()
        .zip(&scenarios)
        .map(|(&seed, sc)| SeedResult {
            seed,
            test_hash: test_set_hash(&sc.test),
            histories: Vec::new(),
        })
        .collect();
    for (&(i, _), hs) in jobs.iter().zip(results) {
        seeds[i].histories.extend(hs);
    }
    Ok((p.cfg, seeds))
}

fn metrics_csv(seeds: &[SeedResult]) -> String {
    let mut s = format!("{HISTORY_CSV_HEADER}\n");
    for r in seeds {
        for h in &r.histories {
            s.push_str(&h.csv_rows());
        }
    }
    s
}

fn ledger_csv(seeds: &[SeedResult]) -> Result<Vec<u8>, CliError> {
    let rows: Vec<Vec<String>> = seeds
        .iter()
        .flat_map(|r| &r.histories)
        .flat_map(|h| {
            h.ledger.events().iter().map(move |e| {
                vec![
                    h.run_id.clone(),
                    e.seq.to_string(),
                    e.from.to_string(),
                    e.to.to_string(),
                    e.bytes.to_string(),
                    e.round.to_string(),
                ]
            })
        })
        .collect();
    csv_bytes(&["run_id", "seq", "from", "to", "bytes", "round"], &rows)
}

fn summary_csv(seeds: &[SeedResult]) -> Result<Vec<u8>, CliError> {
    let mut rows = Vec::new();
    for r in seeds {
        for h in &r.histories {
            let Some(rep) = h.final_report() else { continue };
            let last = h.snapshots.last().map_or(0, |s| s.cum_epochs);
            rows.push(vec![
                h.run_id.clone(),
                r.seed.to_string(),
                h.schedule.to_string(),
                h.use_si.to_string(),
                last.to_string(),
                format!("{:.6}", rep.sensitivity),
                format!("{:.6}", rep.precision),
                format!("{:.6}", rep.afpr),
                format!("{:.6}", rep.mean_tp_dsc),
                format!("{:.6}", rep.small_tp_ratio),
                h.ledger.len().to_string(),
                h.ledger.total_bytes().to_string(),
            ]);
        }
    }
    csv_bytes(
        &[
            "run_id", "seed", "schedule", "use_si", "cum_epochs", "sensitivity", "precision", "afpr", "dsc",
            "small_tp_ratio", "transfers", "bytes",
        ],
        &rows,
    )
}

fn curve_series(r: &SeedResult, pick: impl Fn(&ringfed::metrics::MetricsReport) -> f64) -> Vec<Series> {
    r.histories
        .iter()
        .filter(|h| h.schedule != ScheduleKind::Isolated)
        .map(|h| Series {
            label: h.run_id.clone(),
            points: h.snapshots.iter().map(|s| (s.cum_epochs as f64, pick(&s.report))).collect(),
        })
        .collect()
}

/// `run`: trains, then writes metrics, ledger, summary, checkpoints, plots and the manifest.
pub fn run(cfg: &ScenarioConfig, config_text: &str, opts: &Options) -> Result<RunOutput, CliError> {
    let (cfg, seeds) = simulate(cfg, opts)?;
    let mut out = OutDir::new(opts.out.clone());
    out.write("metrics.csv", metrics_csv(&seeds).as_bytes())?;
    out.write("ledger.csv", &ledger_csv(&seeds)?)?;
    out.write("summary.csv", &summary_csv(&seeds)?)?;
    for r in &seeds {
        for h in &r.histories {
            let bytes = checkpoint::encode(&h.final_model, h.final_si.as_ref())?;
            out.write(&format!("checkpoints/{}.ckpt", h.run_id), &bytes)?;
        }
        let sens = curve_series(r, |m| m.sensitivity);
        let chart = Chart {
            title: &format!("{} test sensitivity, seed {}", cfg.name, r.seed),
            x_label: "cum_epochs",
            y_label: "sensitivity",
            series: &sens,
        };
        write_chart(&mut out, &format!("sensitivity-s{}", r.seed), &chart, !opts.plots)?;
        let afpr = curve_series(r, |m| m.afpr);
        let chart = Chart {
            title: &format!("{} false positives per volume, seed {}", cfg.name, r.seed),
            x_label: "cum_epochs",
            y_label: "afpr",
            series: &afpr,
        };
        write_chart(&mut out, &format!("afpr-s{}", r.seed), &chart, !opts.plots)?;
    }
    let mut manifest = Manifest::new("run", &cfg.name, config_text);
    manifest.seeds = seeds
        .iter()
        .map(|r| SeedEntry { seed: r.seed, test_set_sha256: r.test_hash.clone() })
        .collect();
    let out_dir = out.finish(manifest)?;
    Ok(RunOutput { out_dir, seeds })
}

fn median(mut v: Vec<f64>) -> f64 {
    if v.is_empty() {
        return f64::NAN;
    }
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// `sweep`: mixed-data training on growing fractions of the pooled data.
pub fn sweep(cfg: &ScenarioConfig, config_text: &str, opts: &Options) -> Result<SweepOutput, CliError> {
    let p = prepare(cfg, opts)?;
    let scenarios: Vec<Scenario> = p.seeds.iter().map(|&s| scenario_for(&p.cfg, s)).collect::<Result<_, _>>()?;
    let fractions = p.cfg.sweep.fractions.clone();
    let jobs: Vec<(usize, f64)> = (0..p.seeds.len())
        .flat_map(|i| fractions.iter().map(move |&f| (i, f)))
        .collect();
    let results = parallel_map(&jobs, opts.workers, |&(i, f)| {
        let fed = Federation::from_scenario(&scenarios[i], &p.train, p.seeds[i]);
        Ok(fed.run_mixed_fraction(p.cfg.sweep.epochs, f)?)
    })?;
    let points: Vec<SweepPoint> = jobs
        .iter()
        .zip(results)
        .map(|(&(i, fraction), history)| SweepPoint { seed: p.seeds[i], fraction, history })
        .collect();

    let pooled = p.cfg.centers.count * p.cfg.centers.per_center;
    let rows: Vec<Vec<String>> = points
        .iter()
        .map(|pt| {
            let r = pt.history.final_report().expect("sweep runs always evaluate");
            vec![
                pt.seed.to_string(),
                pt.fraction.to_string(),
                ((pooled as f64 * pt.fraction).ceil() as usize).to_string(),
                format!("{:.6}", r.sensitivity),
                format!("{:.6}", r.precision),
                format!("{:.6}", r.afpr),
                format!("{:.6}", r.mean_tp_dsc),
                format!("{:.6}", r.small_tp_ratio),
            ]
        })
        .collect();
    let mut by_fraction: BTreeMap<usize, Vec<&SweepPoint>> = BTreeMap::new();
    for pt in &points {
        let idx = fractions.iter().position(|&f| f == pt.fraction).unwrap_or(0);
        by_fraction.entry(idx).or_default().push(pt);
    }
    let medians: Vec<(f64, f64, f64, f64)> = by_fraction
        .iter()
        .map(|(&idx, pts)| {
            let col = |g: fn(&ringfed::metrics::MetricsReport) -> f64| {
                median(pts.iter().filter_map(|p| p.history.final_report().map(g)).collect())
            };
            (fractions[idx], col(|r| r.sensitivity), col(|r| r.afpr), col(|r| r.small_tp_ratio))
        })
        .collect();
    let summary: Vec<Vec<String>> = medians
        .iter()
        .map(|&(f, s, a, t)| vec![f.to_string(), format!("{s:.6}"), format!("{a:.6}"), format!("{t:.6}")])
        .collect();

    let mut out = OutDir::new(opts.out.clone());
    out.write(
        "sweep.csv",
        &csv_bytes(
            &["seed", "fraction", "volumes", "sensitivity", "precision", "afpr", "dsc", "small_tp_ratio"],
            &rows,
        )?,
    )?;
    out.write(
        "sweep_summary.csv",
        &csv_bytes(&["fraction", "median_sensitivity", "median_afpr", "median_small_tp_ratio"], &summary)?,
    )?;
    let series = vec![
        Series { label: "sensitivity".into(), points: medians.iter().map(|m| (m.0, m.1)).collect() },
        Series { label: "small_tp_ratio".into(), points: medians.iter().map(|m| (m.0, m.3)).collect() },
    ];
    let chart = Chart {
        title: &format!("{} data fraction sweep", p.cfg.name),
        x_label: "fraction",
        y_label: "median",
        series: &series,
    };
    write_chart(&mut out, "sweep", &chart, !opts.plots)?;
    let mut manifest = Manifest::new("sweep", &p.cfg.name, config_text);
    manifest.seeds = p
        .seeds
        .iter()
        .zip(&scenarios)
        .map(|(&seed, sc)| SeedEntry { seed, test_set_sha256: test_set_hash(&sc.test) })
        .collect();
    let out_dir = out.finish(manifest)?;
    Ok(SweepOutput { out_dir, points, medians })
}

/// `compare`: runs each scenario into its own subdirectory, then writes every curve into one
/// long table keyed by cumulative epochs. All scenarios must evaluate on identical test sets.
pub fn compare(inputs: &[(ScenarioConfig, String)], opts: &Options) -> Result<PathBuf, CliError> {
    if inputs.is_empty() {
        return Err(CliError::Config("compare needs at least one scenario".into()));
    }
    let mut names: Vec<&str> = inputs.iter().map(|(c, _)| c.name.as_str()).collect();
    names.sort_unstable();
    if names.windows(2).any(|w| w[0] == w[1]) {
        return Err(CliError::Config("compared scenarios need distinct names".into()));
    }
    // Test sets depend only on the task, the test count and the seed, so check before training.
    let expected: Vec<String> = hashes_for(&inputs[0].0, opts)?;
    for (cfg, _) in &inputs[1..] {
        if hashes_for(cfg, opts)? != expected {
            return Err(CliError::Config(format!(
                "scenario {} evaluates on a different test set than {}",
                cfg.name, inputs[0].0.name
            )));
        }
    }
    let mut table = format!("scenario,{HISTORY_CSV_HEADER}\n");
    let mut series = Vec::new();
    let mut config_concat = String::new();
    for (cfg, text) in inputs {
        let sub = Options { out: opts.out.join(&cfg.name), ..opts.clone() };
        let res = run(cfg, text, &sub)?;
        for r in &res.seeds {
            for h in &r.histories {
                for line in h.csv_rows().lines() {
                    table.push_str(&format!("{},{line}\n", cfg.name));
                }
                if h.schedule != ScheduleKind::Isolated {
                    series.push(Series {
                        label: format!("{}/{}", cfg.name, h.run_id),
                        points: h.snapshots.iter().map(|s| (s.cum_epochs as f64, s.report.sensitivity)).collect(),
                    });
                }
            }
        }
        config_concat.push_str(text);
    }
    let mut out = OutDir::new(opts.out.clone());
    out.write("compare.csv", table.as_bytes())?;
    let chart = Chart {
        title: "test sensitivity by scenario",
        x_label: "cum_epochs",
        y_label: "sensitivity",
        series: &series,
    };
    write_chart(&mut out, "compare", &chart, !opts.plots)?;
    let mut manifest = Manifest::new("compare", &names.join("+"), &config_concat);
    let seeds = prepare(&inputs[0].0, opts)?.seeds;
    manifest.seeds = seeds
        .into_iter()
        .zip(expected)
        .map(|(seed, test_set_sha256)| SeedEntry { seed, test_set_sha256 })
        .collect();
    out.finish(manifest)
}

fn hashes_for(cfg: &ScenarioConfig, opts: &Options) -> Result<Vec<String>, CliError> {
    let p = prepare(cfg, opts)?;
    p.seeds
        .iter()
        .map(|&s| Ok(test_set_hash(&scenario_for(&p.cfg, s)?.test)))
        .collect()
}

/// Output directory precedence: explicit flag or environment, then the config, then a default.
pub fn resolve_out(flag: Option<&Path>, cfg: &ScenarioConfig) -> PathBuf {
    flag.map(Path::to_path_buf)
        .or_else(|| cfg.output_dir.clone())
        .unwrap_or_else(|| PathBuf::from("ringfed-out").join(&cfg.name))
}
