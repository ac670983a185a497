//! Scenario files: TOML with one table per concern. Every key is optional and falls back to the
//! library default; unknown keys and out-of-range values are rejected before any training.

use std::path::{Path, PathBuf};

use ringfed::federation::{Schedule, ScheduleKind, TrainConfig};
use ringfed::losses::LossConfig;
use ringfed::metrics::EvalConfig;
use ringfed::nn::ArchConfig;
use ringfed::optim::OptimizerConfig;
use ringfed::patch::Augment;
use ringfed::si::SiConfig;
use ringfed::synth::{CenterShift, TaskSpec};
use ringfed::Extent;
use serde::{Deserialize, Serialize};

use crate::error::CliError;

#[derive(Debug, Clone, PartialEq, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub name: String,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
    #[serde(default)]
    pub seeds: SeedsSection,
    #[serde(default)]
    pub task: TaskSection,
    #[serde(default)]
    pub centers: CentersSection,
    #[serde(default)]
    pub schedule: ScheduleSection,
    #[serde(default)]
    pub loss: LossSection,
    #[serde(default)]
    pub optimizer: OptimizerSection,
    #[serde(default)]
    pub training: TrainingSection,
    #[serde(default)]
    pub network: NetworkSection,
    #[serde(default)]
    pub eval: EvalSection,
    #[serde(default)]
    pub sweep: SweepSection,
}

#[derive(Debug, Clone, PartialEq, Deserialize, Serialize)]
#[serde(default, deny_unknown_fields)]
pub struct SeedsSection {
    pub master: u64,
    /// Seeds `master, master + 1, ..` are run.
    pub repeats: usize,
}

impl Default for SeedsSection {
    fn default() -> Self {
        Self { master: 1, repeats: 1 }
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize, Serialize)]
#[serde(default, deny_unknown_fields)]
pub struct TaskSection {
    pub extent: Vec<usize>,
    pub lesions_per_volume: f64,
    pub small_lesion_fraction: f64,
    pub small_radius: [f64; 2],
    pub large_radius: [f64; 2],
    pub small_contrast: f64,
    pub large_contrast: f64,
    pub contrast_jitter: f64,
    pub background_level: f64,
    pub texture_amplitude: f64,
    pub texture_scale: f64,
    pub base_noise: f64,
    pub distractors_per_volume: f64,
    pub distractor_length: [f64; 2],
    pub distractor_width: f64,
    pub distractor_contrast: f64,
}

impl Default for TaskSection {
    fn default() -> Self {
        let t = TaskSpec::default();
        Self {
            extent: t.extent.dims(),
            lesions_per_volume: t.lesions_per_volume,
            small_lesion_fraction: t.small_lesion_fraction,
            small_radius: [t.small_radius.0, t.small_radius.1],
            large_radius: [t.large_radius.0, t.large_radius.1],
            small_contrast: t.small_contrast,
            large_contrast: t.large_contrast,
            contrast_jitter: t.contrast_jitter,
            background_level: t.background_level,
            texture_amplitude: t.texture_amplitude,
            texture_scale: t.texture_scale,
            base_noise: t.base_noise,
            distractors_per_volume: t.distractors_per_volume,
            distractor_length: [t.distractor_length.0, t.distractor_length.1],
            distractor_width: t.distractor_width,
            distractor_contrast: t.distractor_contrast,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct ShiftEntry {
    pub gain: f64,
    pub bias: f64,
    pub noise_sigma: f64,
    pub gamma: f64,
}

#[derive(Debug, Clone, PartialEq, Deserialize, Serialize)]
#[serde(untagged)]
pub enum Shifts {
    /// `"evenly_spaced"` or `"identity"`.
    Preset(String),
    Explicit(Vec<ShiftEntry>),
}

#[derive(Debug, Clone, PartialEq, Deserialize, Serialize)]
#[serde(default, deny_unknown_fields)]
pub struct CentersSection {
    pub count: usize,
    pub per_center: usize,
    pub validation: usize,
    pub test: usize,
    pub shifts: Shifts,
}

impl Default for CentersSection {
    fn default() -> Self {
        Self {
            count: 7,
            per_center: 100,
            validation: 67,
            test: 103,
            shifts: Shifts::Preset("evenly_spaced".into()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize, Serialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleSection {
    /// Any of `isolated`, `svcl`, `svcl-si`, `icl`, `icl-si`, `mixed`.
    pub runs: Vec<String>,
    /// Isolated baselines and the first SVCL center.
    pub epochs_initial: usize,
    /// Every later SVCL center.
    pub epochs_visit: usize,
    pub rounds: usize,
    pub icl_epochs_visit: usize,
    /// Defaults to the ICL budget, `rounds * centers * icl_epochs_visit`.
    pub mixed_epochs: Option<usize>,
    /// Mixed-run evaluation interval in epochs; 0 evaluates once at the end.
    pub mixed_snapshot_every: usize,
}

impl Default for ScheduleSection {
    fn default() -> Self {
        Self {
            runs: ["isolated", "svcl", "svcl-si", "icl", "mixed"].map(String::from).to_vec(),
            epochs_initial: 20,
            epochs_visit: 10,
            rounds: 6,
            icl_epochs_visit: 2,
            mixed_epochs: None,
            mixed_snapshot_every: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize, Serialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossSection {
    pub alpha: f64,
    pub epsilon_den: f64,
    pub c: f64,
    pub xi: f64,
}

impl Default for LossSection {
    fn default() -> Self {
        let (l, s) = (LossConfig::default(), SiConfig::default());
        Self {
            alpha: l.alpha,
            epsilon_den: l.epsilon_den,
            c: s.c,
            xi: s.xi,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize, Serialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerSection {
    pub lr: f64,
    pub rho: f64,
    pub eps: f64,
    pub momentum: f64,
    pub plateau_patience: usize,
    pub plateau_delta: f64,
    pub monitor_validation: bool,
}

impl Default for OptimizerSection {
    fn default() -> Self {
        let o = OptimizerConfig::default();
        Self {
            lr: o.lr,
            rho: o.rho,
            eps: o.eps,
            momentum: o.momentum,
            plateau_patience: o.plateau_patience,
            plateau_delta: o.plateau_delta,
            monitor_validation: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize, Serialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingSection {
    pub subepochs: usize,
    pub volumes_per_subepoch: usize,
    pub patches_per_subepoch: usize,
    pub batch_size: usize,
    pub patch: Vec<usize>,
    pub fg_fraction: f64,
    pub flip: bool,
    pub rotate: bool,
    pub intensity_scale: f64,
}

impl Default for TrainingSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            subepochs: t.subepochs,
            volumes_per_subepoch: t.volumes_per_subepoch,
            patches_per_subepoch: t.patches_per_subepoch,
            batch_size: t.batch_size,
            patch: t.patch_extent.dims(),
            fg_fraction: t.fg_fraction,
            flip: t.augment.flip,
            rotate: t.augment.rotate,
            intensity_scale: t.augment.intensity_scale,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize, Serialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetworkSection {
    pub kernel: usize,
    pub normal_channels: Vec<usize>,
    /// 0 disables the low-resolution pathway.
    pub low_factor: usize,
    pub low_channels: Vec<usize>,
    pub fused_channels: Vec<usize>,
    pub output_prior: f64,
}

impl Default for NetworkSection {
    fn default() -> Self {
        let a = ArchConfig::default();
        Self {
            kernel: a.kernel,
            normal_channels: a.normal_channels,
            low_factor: a.low_factor,
            low_channels: a.low_channels,
            fused_channels: a.fused_channels,
            output_prior: a.output_prior,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize, Serialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub tau: f32,
    pub min_overlap_voxels: usize,
    pub min_component_voxels: usize,
    pub small_lesion_voxels: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        let e = EvalConfig::default();
        Self {
            tau: e.tau,
            min_overlap_voxels: e.min_overlap_voxels,
            min_component_voxels: e.min_component_voxels,
            small_lesion_voxels: e.small_lesion_voxels,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize, Serialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepSection {
    pub fractions: Vec<f64>,
    pub epochs: usize,
}

impl Default for SweepSection {
    fn default() -> Self {
        Self {
            fractions: vec![0.125, 0.25, 0.5, 1.0],
            epochs: 40,
        }
    }
}

/// One requested run: a schedule kind and whether SI is on.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RunSpec {
    pub kind: ScheduleKind,
    pub use_si: bool,
}

impl RunSpec {
    pub fn parse(s: &str) -> Option<Self> {
        let (name, use_si) = match s.strip_suffix("-si") {
            Some(base) => (base, true),
            None => (s, false),
        };
        let kind = ScheduleKind::parse(name)?;
        if use_si && !matches!(kind, ScheduleKind::Svcl | ScheduleKind::Icl) {
            return None;
        }
        Some(Self { kind, use_si })
    }
}

fn bad(msg: impl Into<String>) -> CliError {
    CliError::Config(msg.into())
}

fn extent(dims: &[usize], what: &str) -> Result<Extent, CliError> {
    if dims.iter().any(|&d| d == 0) {
        return Err(bad(format!("{what}: extents must be positive")));
    }
    match *dims {
        [h, w] => Ok(Extent::d2(h, w)),
        [d, h, w] => Ok(Extent::d3(d, h, w)),
        _ => Err(bad(format!("{what}: expected 2 or 3 extents, got {}", dims.len()))),
    }
}

impl ScenarioConfig {
    pub fn load(path: &Path) -> Result<(Self, String), CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Io(format!("reading {}: {e}", path.display())))?;
        let cfg = Self::parse(&text).map_err(|e| match e {
            CliError::Config(m) => CliError::Config(format!("{}: {m}", path.display())),
            other => other,
        })?;
        Ok((cfg, text))
    }

    pub fn parse(text: &str) -> Result<Self, CliError> {
        let cfg: Self = toml::from_str(text).map_err(|e| bad(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Range checks on everything, including what the library would only catch mid-run.
    pub fn validate(&self) -> Result<(), CliError> {
        if self.name.is_empty() || !self.name.chars().all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_') {
            return Err(bad("name must be nonempty ASCII letters, digits, '-' or '_'"));
        }
        if self.seeds.repeats == 0 {
            return Err(bad("seeds.repeats must be at least 1"));
        }
        let c = &self.centers;
        if c.count == 0 || c.per_center == 0 || c.test == 0 {
            return Err(bad("centers.count, per_center and test must be positive"));
        }
        if let Shifts::Preset(p) = &c.shifts {
            if p != "evenly_spaced" && p != "identity" {
                return Err(bad(format!("centers.shifts: unknown preset {p:?}")));
            }
        }
        let s = &self.schedule;
        if s.runs.is_empty() {
            return Err(bad("schedule.runs is empty"));
        }
        for r in &s.runs {
            if RunSpec::parse(r).is_none() {
                return Err(bad(format!("schedule.runs: unknown run {r:?}")));
            }
        }
        if s.epochs_initial == 0 || s.epochs_visit == 0 || s.rounds == 0 || s.icl_epochs_visit == 0 {
            return Err(bad("schedule epoch and round counts must be at least 1"));
        }
        if s.mixed_epochs == Some(0) {
            return Err(bad("schedule.mixed_epochs must be at least 1"));
        }
        if self.sweep.epochs == 0 || self.sweep.fractions.is_empty() {
            return Err(bad("sweep needs epochs and at least one fraction"));
        }
        if let Some(f) = self.sweep.fractions.iter().find(|f| !(**f > 0.0 && **f <= 1.0)) {
            return Err(bad(format!("sweep.fractions: {f} outside (0, 1]")));
        }
        if !(self.loss.c >= 0.0 && self.loss.c.is_finite()) || !(self.loss.xi > 0.0) {
            return Err(bad("loss.c must be finite and non-negative, loss.xi positive"));
        }
        let o = &self.optimizer;
        if !(o.lr > 0.0 && o.eps > 0.0 && (0.0..1.0).contains(&o.rho) && (0.0..1.0).contains(&o.momentum)) {
            return Err(bad("optimizer: need lr > 0, eps > 0, rho and momentum in [0, 1)"));
        }
        if o.plateau_patience == 0 || !(o.plateau_delta >= 0.0) {
            return Err(bad("optimizer: plateau_patience >= 1 and plateau_delta >= 0"));
        }
        if !(0.0..1.0).contains(&self.training.intensity_scale) {
            return Err(bad("training.intensity_scale must lie in [0, 1)"));
        }
        let e = &self.eval;
        if !(0.0..=1.0).contains(&e.tau) || e.min_overlap_voxels == 0 || e.min_component_voxels == 0 {
            return Err(bad("eval: tau in [0, 1], overlap and component sizes at least 1"));
        }
        if !(self.network.output_prior > 0.0 && self.network.output_prior < 1.0) {
            return Err(bad("network.output_prior must lie in (0, 1)"));
        }
        self.task_spec()?
            .validate()
            .map_err(|e| bad(e.to_string()))?;
        for sh in self.shifts()? {
            sh.validate().map_err(|e| bad(e.to_string()))?;
        }
        let train = self.train_config()?;
        train.validate().map_err(|e| bad(e.to_string()))?;
        if train.patch_extent.ndim() != self.task_spec()?.extent.ndim() {
            return Err(bad("training.patch and task.extent differ in dimensionality"));
        }
        let m = train.arch.spatial_multiple();
        if self.task.extent.iter().any(|d| d % m != 0) {
            return Err(bad(format!("task.extent must be multiples of the low-res factor {m}")));
        }
        Ok(())
    }

    pub fn task_spec(&self) -> Result<TaskSpec, CliError> {
        let t = &self.task;
        Ok(TaskSpec {
            extent: extent(&t.extent, "task.extent")?,
            lesions_per_volume: t.lesions_per_volume,
            forced_lesion_count: None,
            small_lesion_fraction: t.small_lesion_fraction,
            small_radius: (t.small_radius[0], t.small_radius[1]),
            large_radius: (t.large_radius[0], t.large_radius[1]),
            small_contrast: t.small_contrast,
            large_contrast: t.large_contrast,
            contrast_jitter: t.contrast_jitter,
            background_level: t.background_level,
            texture_amplitude: t.texture_amplitude,
            texture_scale: t.texture_scale,
            base_noise: t.base_noise,
            distractors_per_volume: t.distractors_per_volume,
            distractor_length: (t.distractor_length[0], t.distractor_length[1]),
            distractor_width: t.distractor_width,
            distractor_contrast: t.distractor_contrast,
        })
    }

    pub fn shifts(&self) -> Result<Vec<CenterShift>, CliError> {
        let n = self.centers.count;
        match &self.centers.shifts {
            Shifts::Preset(p) if p == "identity" => Ok(vec![CenterShift::IDENTITY; n]),
            Shifts::Preset(_) => Ok(CenterShift::evenly_spaced(n)),
            Shifts::Explicit(list) => {
                if list.len() != n {
                    return Err(bad(format!("centers.shifts lists {} entries for {n} centers", list.len())));
                }
                Ok(list
                    .iter()
                    .map(|s| CenterShift {
                        intensity_gain: s.gain,
                        intensity_bias: s.bias,
                        noise_sigma: s.noise_sigma,
                        contrast_gamma: s.gamma,
                    })
                    .collect())
            }
        }
    }

    pub fn train_config(&self) -> Result<TrainConfig, CliError> {
        let (tr, o, n) = (&self.training, &self.optimizer, &self.network);
        let patch = extent(&tr.patch, "training.patch")?;
        Ok(TrainConfig {
            arch: ArchConfig {
                ndim: patch.ndim(),
                kernel: n.kernel,
                normal_channels: n.normal_channels.clone(),
                low_factor: n.low_factor,
                low_channels: n.low_channels.clone(),
                fused_channels: n.fused_channels.clone(),
                output_prior: n.output_prior,
            },
            loss: LossConfig {
                alpha: self.loss.alpha,
                epsilon_den: self.loss.epsilon_den,
            },
            si: SiConfig {
                c: self.loss.c,
                xi: self.loss.xi,
            },
            optimizer: OptimizerConfig {
                lr: o.lr,
                rho: o.rho,
                eps: o.eps,
                momentum: o.momentum,
                plateau_patience: o.plateau_patience,
                plateau_delta: o.plateau_delta,
            },
            subepochs: tr.subepochs,
            volumes_per_subepoch: tr.volumes_per_subepoch,
            patches_per_subepoch: tr.patches_per_subepoch,
            batch_size: tr.batch_size,
            patch_extent: patch,
            fg_fraction: tr.fg_fraction,
            augment: Augment {
                flip: tr.flip,
                rotate: tr.rotate,
                intensity_scale: tr.intensity_scale,
            },
            eval: EvalConfig {
                tau: self.eval.tau,
                min_overlap_voxels: self.eval.min_overlap_voxels,
                min_component_voxels: self.eval.min_component_voxels,
                small_lesion_voxels: self.eval.small_lesion_voxels,
            },
            monitor_validation: o.monitor_validation,
        })
    }

    pub fn run_specs(&self) -> Vec<RunSpec> {
        self.schedule.runs.iter().filter_map(|r| RunSpec::parse(r)).collect()
    }

    pub fn svcl_schedule(&self, use_si: bool) -> Schedule {
        Schedule {
            kind: ScheduleKind::Svcl,
            epochs_initial: self.schedule.epochs_initial,
            epochs_visit: self.schedule.epochs_visit,
            rounds: 1,
            use_si,
        }
    }

    pub fn icl_schedule(&self, use_si: bool) -> Schedule {
        Schedule {
            kind: ScheduleKind::Icl,
            epochs_initial: self.schedule.icl_epochs_visit,
            epochs_visit: self.schedule.icl_epochs_visit,
            rounds: self.schedule.rounds,
            use_si,
        }
    }

    pub fn mixed_epochs(&self) -> usize {
        self.schedule
            .mixed_epochs
            .unwrap_or_else(|| self.icl_schedule(false).matched_mixed_epochs(self.centers.count))
    }

    pub fn seed_list(&self) -> Vec<u64> {
        (0..self.seeds.repeats as u64).map(|r| self.seeds.master + r).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_config_takes_defaults() {
        let cfg = ScenarioConfig::parse("name = \"x\"").unwrap();
        assert_eq!(cfg.centers.count, 7);
        assert_eq!(cfg.train_config().unwrap().si, SiConfig::default());
        assert_eq!(cfg.task_spec().unwrap(), TaskSpec::default());
        assert_eq!(cfg.mixed_epochs(), 6 * 7 * 2);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(ScenarioConfig::parse("name = \"x\"\nbogus = 1").is_err());
        assert!(ScenarioConfig::parse("name = \"x\"\n[loss]\nbeta = 1.0").is_err());
        assert!(ScenarioConfig::parse("name = \"x\"\n[nonsense]\n").is_err());
    }

    #[test]
    fn out_of_range_values_are_rejected() {
        for body in [
            "[loss]\nalpha = 1.5",
            "[loss]\nxi = 0.0",
            "[sweep]\nfractions = [0.0, 1.0]",
            "[schedule]\nruns = [\"ring\"]",
            "[schedule]\nruns = [\"mixed-si\"]",
            "[centers]\ncount = 0",
            "[centers]\ncount = 2\nshifts = [{ gain = 1.0, bias = 0.0, noise_sigma = 0.0, gamma = 1.0 }]",
            "[task]\nextent = [48]",
            "[training]\npatch = [18, 18, 18]",
            "[eval]\ntau = 2.0",
            "[optimizer]\nmomentum = 1.0",
        ] {
            let text = format!("name = \"x\"\n{body}");
            assert!(
                matches!(ScenarioConfig::parse(&text), Err(CliError::Config(_))),
                "accepted {body}"
            );
        }
    }

    #[test]
    fn run_names() {
        assert_eq!(RunSpec::parse("svcl-si"), Some(RunSpec { kind: ScheduleKind::Svcl, use_si: true }));
        assert_eq!(RunSpec::parse("isolated"), Some(RunSpec { kind: ScheduleKind::Isolated, use_si: false }));
        assert_eq!(RunSpec::parse("isolated-si"), None);
    }

    #[test]
    fn explicit_shifts() {
        let text = "name = \"x\"\n[centers]\ncount = 2\nshifts = [\n  { gain = 1.0, bias = 0.0, noise_sigma = 0.0, gamma = 1.0 },\n  { gain = 1.1, bias = 0.1, noise_sigma = 0.02, gamma = 0.9 },\n]";
        let cfg = ScenarioConfig::parse(text).unwrap();
        let s = cfg.shifts().unwrap();
        assert_eq!(s[0], CenterShift::IDENTITY);
        assert_eq!(s[1].intensity_gain, 1.1);
    }
}
