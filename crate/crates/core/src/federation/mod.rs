//! Ring schedules: isolated baselines, single-visit (SVCL) and iterative (ICL) continual
//! learning, and the mixed-data upper bound, with model hand-offs recorded in a ledger.

mod ledger;
mod train;

use std::fmt;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use ledger::{transfer, CommLedger, TransferEvent};
pub use train::{
    apply_gradients, sample_subepoch, source_center, train_local, visit_rng, Center, LocalRun,
    StepProvenance, TrainConfig, TrainTrace,
};

use crate::error::{Error, Result};
use crate::metrics::{evaluate, MetricsReport};
use crate::nn::ModelState;
use crate::optim::OptimizerState;
use crate::si::SiState;
use crate::synth::{mix_seed, LabeledVolume, Scenario};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ScheduleKind {
    Isolated,
    Svcl,
    Icl,
    Mixed,
}

impl ScheduleKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            ScheduleKind::Isolated => "isolated",
            ScheduleKind::Svcl => "svcl",
            ScheduleKind::Icl => "icl",
            ScheduleKind::Mixed => "mixed",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "isolated" => ScheduleKind::Isolated,
            "svcl" => ScheduleKind::Svcl,
            "icl" => ScheduleKind::Icl,
            "mixed" => ScheduleKind::Mixed,
            _ => return None,
        })
    }
}

impl fmt::Display for ScheduleKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Schedule {
    pub kind: ScheduleKind,
    /// Epochs at the first center (SVCL) and for every isolated model.
    pub epochs_initial: usize,
    /// Epochs at later SVCL centers, and per ICL visit.
    pub epochs_visit: usize,
    pub rounds: usize,
    pub use_si: bool,
}

impl Schedule {
    pub fn validate(&self) -> Result<()> {
        if self.epochs_initial == 0 || self.epochs_visit == 0 {
            return Err(Error::Config("epoch counts must be at least 1".into()));
        }
        if self.kind == ScheduleKind::Icl && self.rounds == 0 {
            return Err(Error::Config("ICL needs at least one round".into()));
        }
        Ok(())
    }

    /// Mixed-data epochs that match the step budget of this schedule over `n_centers`.
    pub fn matched_mixed_epochs(&self, n_centers: usize) -> usize {
        match self.kind {
            ScheduleKind::Icl => self.rounds * n_centers * self.epochs_visit,
            ScheduleKind::Svcl => self.epochs_initial + n_centers.saturating_sub(1) * self.epochs_visit,
            ScheduleKind::Isolated | ScheduleKind::Mixed => self.epochs_initial,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Snapshot {
    /// Center just trained at; 0 for the mixed-data site.
    pub center: usize,
    pub round: usize,
    pub cum_epochs: usize,
    pub report: MetricsReport,
    pub transfers_so_far: usize,
    pub bytes_so_far: u64,
}

#[derive(Debug, Clone)]
pub struct RunHistory {
    pub run_id: String,
    pub schedule: ScheduleKind,
    pub use_si: bool,
    pub snapshots: Vec<Snapshot>,
    pub final_model: ModelState<f32>,
    pub final_si: Option<SiState<f32>>,
    pub ledger: CommLedger,
    pub trace: TrainTrace,
}

pub const HISTORY_CSV_HEADER: &str =
    "run_id,schedule,use_si,center,round,cum_epochs,sensitivity,precision,afpr,dsc,transfers_so_far,bytes_so_far";

impl RunHistory {
    pub fn final_report(&self) -> Option<&MetricsReport> {
        self.snapshots.last().map(|s| &s.report)
    }

    pub fn csv_rows(&self) -> String {
        let mut s = String::new();
        for snap in &self.snapshots {
            let r = &snap.report;
            s.push_str(&format!(
                "{},{},{},{},{},{},{:.6},{:.6},{:.6},{:.6},{},{}\n",
                self.run_id,
                self.schedule,
                self.use_si,
                snap.center,
                snap.round,
                snap.cum_epochs,
                r.sensitivity,
                r.precision,
                r.afpr,
                r.mean_tp_dsc,
                snap.transfers_so_far,
                snap.bytes_so_far
            ));
        }
        s
    }

    pub fn to_csv(&self) -> String {
        format!("{HISTORY_CSV_HEADER}\n{}", self.csv_rows())
    }
}

/// Data and settings shared by every schedule of one experiment.
pub struct Federation<'a> {
    pub centers: Vec<Center>,
    pub validation: &'a [LabeledVolume],
    pub test: &'a [LabeledVolume],
    pub cfg: &'a TrainConfig,
    /// Seeds model initialization; every schedule of one seed starts from the same weights.
    pub seed: u64,
}

impl<'a> Federation<'a> {
    pub fn from_scenario(scenario: &'a Scenario, cfg: &'a TrainConfig, seed: u64) -> Self {
        let centers = scenario
            .centers
            .iter()
            .map(|c| Center {
                id: c.id,
                volumes: c.volumes.clone(),
                local_seed: mix_seed(seed, 0xC0DE_0000 + c.id as u64),
            })
            .collect();
        Self {
            centers,
            validation: &scenario.validation,
            test: &scenario.test,
            cfg,
            seed,
        }
    }

    pub fn initial_model(&self) -> Result<ModelState<f32>> {
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(self.seed, 0x1417));
        let mut model = ModelState::init(self.cfg.arch.layers()?, &mut rng)?;
        model.set_output_prior(self.cfg.arch.output_prior)?;
        Ok(model)
    }

    fn optimizer(&self, model: &ModelState<f32>) -> Result<OptimizerState<f32>> {
        OptimizerState::new(self.cfg.optimizer.clone(), model.param_count())
    }

    fn local_run(&self, center: &'a Center, visit: usize) -> LocalRun<'_>
    where
        'a: 'a,
    {
        LocalRun {
            center_id: center.id,
            volumes: center.volumes.iter().collect(),
            validation: self.validation,
            cfg: self.cfg,
            rng: visit_rng(center.local_seed, visit),
            epoch_offset: 0,
        }
    }

    fn run_id(&self, kind: ScheduleKind, use_si: bool, suffix: &str) -> String {
        format!("{kind}{}{suffix}-s{}", if use_si { "-si" } else { "" }, self.seed)
    }

    fn snapshot(&self, model: &ModelState<f32>, center: usize, round: usize, cum_epochs: usize, ledger: &CommLedger) -> Result<Snapshot> {
        Ok(Snapshot {
            center,
            round,
            cum_epochs,
            report: evaluate(model, self.test, &self.cfg.eval)?,
            transfers_so_far: ledger.len(),
            bytes_so_far: ledger.total_bytes(),
        })
    }

    fn check(&self, schedule: &Schedule, kind: ScheduleKind) -> Result<()> {
        schedule.validate()?;
        self.cfg.validate()?;
        if schedule.kind != kind {
            return Err(Error::Config(format!("expected a {kind} schedule, got {}", schedule.kind)));
        }
        if self.centers.is_empty() {
            return Err(Error::Config("no centers".into()));
        }
        Ok(())
    }

    /// Single-visit continual learning: I -> II -> ... -> N, each center once.
    pub fn run_svcl(&self, schedule: &Schedule) -> Result<RunHistory> {
        self.check(schedule, ScheduleKind::Svcl)?;
        let mut model = self.initial_model()?;
        let mut si = if schedule.use_si {
            Some(SiState::new(model.theta(), self.cfg.si)?)
        } else {
            None
        };
        let mut ledger = CommLedger::new();
        let mut trace = TrainTrace::default();
        let mut snapshots = Vec::new();
        let mut cum = 0;
        for (i, center) in self.centers.iter().enumerate() {
            let epochs = if i == 0 { schedule.epochs_initial } else { schedule.epochs_visit };
            let mut opt = self.optimizer(&model)?;
            let mut run = self.local_run(center, 0);
            train_local(&mut run, &mut model, &mut opt, si.as_mut(), epochs, &mut trace)?;
            cum += epochs;
            snapshots.push(self.snapshot(&model, center.id, 0, cum, &ledger)?);
            if let Some(next) = self.centers.get(i + 1) {
                if let Some(s) = si.as_mut() {
                    s.consolidate(model.theta())?;
                }
                let (m, s) = transfer(&model, si.as_ref(), center.id, next.id, 0, cum, &mut ledger)?;
                model = m;
                si = s;
            }
        }
        Ok(RunHistory {
            run_id: self.run_id(ScheduleKind::Svcl, schedule.use_si, ""),
            schedule: ScheduleKind::Svcl,
            use_si: schedule.use_si,
            snapshots,
            final_model: model,
            final_si: si,
            ledger,
            trace,
        })
    }

    /// Iterative continual learning: `rounds` passes around the ring with `epochs_visit` epochs per
    /// visit and a direct N -> I hand-off between rounds. Optimizer state stays at each center.
    pub fn run_icl(&self, schedule: &Schedule) -> Result<RunHistory> {
        self.check(schedule, ScheduleKind::Icl)?;
        let mut model = self.initial_model()?;
        let mut si = if schedule.use_si {
            Some(SiState::new(model.theta(), self.cfg.si)?)
        } else {
            None
        };
        let n = self.centers.len();
        let mut opts: Vec<OptimizerState<f32>> =
            (0..n).map(|_| self.optimizer(&model)).collect::<Result<_>>()?;
        let mut runs: Vec<LocalRun<'_>> = self.centers.iter().map(|c| self.local_run(c, 0)).collect();
        let mut ledger = CommLedger::new();
        let mut trace = TrainTrace::default();
        let mut snapshots = Vec::new();
        let mut cum = 0;
        for round in 0..schedule.rounds {
            for i in 0..n {
                let center_id = self.centers[i].id;
                train_local(&mut runs[i], &mut model, &mut opts[i], si.as_mut(), schedule.epochs_visit, &mut trace)?;
                cum += schedule.epochs_visit;
                snapshots.push(self.snapshot(&model, center_id, round, cum, &ledger)?);
                let last = round + 1 == schedule.rounds && i + 1 == n;
                if last || n == 1 {
                    continue;
                }
                if let Some(s) = si.as_mut() {
                    s.consolidate(model.theta())?;
                }
                let next = self.centers[(i + 1) % n].id;
                let (m, s) = transfer(&model, si.as_ref(), center_id, next, round, cum, &mut ledger)?;
                model = m;
                si = s;
            }
        }
        Ok(RunHistory {
            run_id: self.run_id(ScheduleKind::Icl, schedule.use_si, ""),
            schedule: ScheduleKind::Icl,
            use_si: schedule.use_si,
            snapshots,
            final_model: model,
            final_si: si,
            ledger,
            trace,
        })
    }

    /// One model per center on local data only, `epochs` epochs each.
    pub fn run_isolated(&self, epochs: usize) -> Result<Vec<RunHistory>> {
        self.cfg.validate()?;
        if epochs == 0 {
            return Err(Error::Config("epoch counts must be at least 1".into()));
        }
        self.centers
            .iter()
            .map(|center| {
                let mut model = self.initial_model()?;
                let mut opt = self.optimizer(&model)?;
                let mut run = self.local_run(center, 0);
                let mut trace = TrainTrace::default();
                train_local(&mut run, &mut model, &mut opt, None, epochs, &mut trace)?;
                let ledger = CommLedger::new();
                let snapshots = vec![self.snapshot(&model, center.id, 0, epochs, &ledger)?];
                Ok(RunHistory {
                    run_id: self.run_id(ScheduleKind::Isolated, false, &format!("-c{}", center.id)),
                    schedule: ScheduleKind::Isolated,
                    use_si: false,
                    snapshots,
                    final_model: model,
                    final_si: None,
                    ledger,
                    trace,
                })
            })
            .collect()
    }

    /// One model on the union of all centers' data, evaluated every `snapshot_every` epochs and
    /// at the end. `block_ordered` feeds whole epochs center by center in ring order instead of
    /// sampling from the shuffled union.
    pub fn run_mixed(&self, epochs: usize, snapshot_every: usize, block_ordered: bool) -> Result<RunHistory> {
        self.cfg.validate()?;
        if epochs == 0 {
            return Err(Error::Config("epoch counts must be at least 1".into()));
        }
        let every = if snapshot_every == 0 { epochs } else { snapshot_every };
        if !block_ordered {
            return self.mixed_pooled(epochs, every, 1.0, "");
        }
        let mut model = self.initial_model()?;
        let mut opt = self.optimizer(&model)?;
        let mut trace = TrainTrace::default();
        let ledger = CommLedger::new();
        let mut snapshots = Vec::new();
        let mut runs: Vec<LocalRun<'_>> = self.centers.iter().map(|c| self.local_run(c, 0)).collect();
        for e in 0..epochs {
            let i = e % runs.len();
            train_local(&mut runs[i], &mut model, &mut opt, None, 1, &mut trace)?;
            if (e + 1) % every == 0 || e + 1 == epochs {
                snapshots.push(self.snapshot(&model, 0, e / runs.len(), e + 1, &ledger)?);
            }
        }
        Ok(RunHistory {
            run_id: self.run_id(ScheduleKind::Mixed, false, "-block"),
            schedule: ScheduleKind::Mixed,
            use_si: false,
            snapshots,
            final_model: model,
            final_si: None,
            ledger,
            trace,
        })
    }

    /// Mixed-data training on the first `ceil(fraction * n)` volumes of the shuffled pool.
    /// A fraction of 1 is exactly [`Federation::run_mixed`] without block ordering.
    pub fn run_mixed_fraction(&self, epochs: usize, fraction: f64) -> Result<RunHistory> {
        self.cfg.validate()?;
        if epochs == 0 {
            return Err(Error::Config("epoch counts must be at least 1".into()));
        }
        if !(fraction > 0.0 && fraction <= 1.0) {
            return Err(Error::Config(format!("fraction {fraction} outside (0, 1]")));
        }
        let suffix = if fraction == 1.0 { String::new() } else { format!("-f{fraction}") };
        self.mixed_pooled(epochs, epochs, fraction, &suffix)
    }

    fn mixed_pooled(&self, epochs: usize, every: usize, fraction: f64, suffix: &str) -> Result<RunHistory> {
        let pooled_seed = mix_seed(self.seed, 0xC0DE_0000);
        let mut pooled: Vec<&LabeledVolume> = self.centers.iter().flat_map(|c| c.volumes.iter()).collect();
        pooled.shuffle(&mut ChaCha8Rng::seed_from_u64(pooled_seed));
        let keep = ((pooled.len() as f64 * fraction).ceil() as usize).clamp(1, pooled.len().max(1));
        pooled.truncate(keep);
        let mut run = LocalRun {
            center_id: 0,
            volumes: pooled,
            validation: self.validation,
            cfg: self.cfg,
            rng: visit_rng(pooled_seed, 0),
            epoch_offset: 0,
        };
        let mut model = self.initial_model()?;
        let mut opt = self.optimizer(&model)?;
        let mut trace = TrainTrace::default();
        let ledger = CommLedger::new();
        let mut snapshots = Vec::new();
        let mut done = 0;
        while done < epochs {
            let chunk = every.min(epochs - done);
            train_local(&mut run, &mut model, &mut opt, None, chunk, &mut trace)?;
            done += chunk;
            snapshots.push(self.snapshot(&model, 0, 0, done, &ledger)?);
        }
        Ok(RunHistory {
            run_id: self.run_id(ScheduleKind::Mixed, false, suffix),
            schedule: ScheduleKind::Mixed,
            use_si: false,
            snapshots,
            final_model: model,
            final_si: None,
            ledger,
            trace,
        })
    }

    /// Dispatches on the schedule kind. Isolated runs return one history per center.
    pub fn run(&self, schedule: &Schedule) -> Result<Vec<RunHistory>> {
        match schedule.kind {
            ScheduleKind::Svcl => Ok(vec![self.run_svcl(schedule)?]),
            ScheduleKind::Icl => Ok(vec![self.run_icl(schedule)?]),
            ScheduleKind::Isolated => self.run_isolated(schedule.epochs_initial),
            ScheduleKind::Mixed => Ok(vec![self.run_mixed(schedule.epochs_initial, 0, false)?]),
        }
    }
}

/// Mean final sensitivity over a set of histories (e.g. the isolated baselines).
pub fn mean_final_sensitivity(histories: &[RunHistory]) -> f64 {
    let v: Vec<f64> = histories
        .iter()
        .filter_map(|h| h.final_report().map(|r| r.sensitivity))
        .collect();
    v.iter().sum::<f64>() / v.len().max(1) as f64
}
