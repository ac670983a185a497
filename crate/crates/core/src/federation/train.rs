use rand::seq::index;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::losses::LossConfig;
use crate::metrics::{evaluate, EvalConfig};
use crate::nn::{ArchConfig, ModelState, Session};
use crate::optim::{OptimizerConfig, OptimizerState};
use crate::patch::{sample_patches, Augment, PatchBatch};
use crate::si::{total_loss, SiConfig, SiState, StepRecord};
use crate::synth::{mix_seed, LabeledVolume};
use crate::tensor::Extent;

/// Everything that shapes local training, shared by all centers of a run.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub arch: ArchConfig,
    pub loss: LossConfig,
    pub si: SiConfig,
    pub optimizer: OptimizerConfig,
    pub subepochs: usize,
    pub volumes_per_subepoch: usize,
    pub patches_per_subepoch: usize,
    pub batch_size: usize,
    pub patch_extent: Extent,
    pub fg_fraction: f64,
    pub augment: Augment,
    pub eval: EvalConfig,
    /// Halve the learning rate when validation sensitivity plateaus.
    pub monitor_validation: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            arch: ArchConfig::default(),
            loss: LossConfig::default(),
            si: SiConfig::default(),
            optimizer: OptimizerConfig::default(),
            subepochs: 2,
            volumes_per_subepoch: 8,
            patches_per_subepoch: 64,
            batch_size: 16,
            patch_extent: Extent::d2(18, 18),
            fg_fraction: 0.5,
            augment: Augment::default(),
            eval: EvalConfig::default(),
            monitor_validation: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.loss.validate()?;
        if self.subepochs == 0 || self.volumes_per_subepoch == 0 || self.batch_size == 0 {
            return Err(Error::Config("subepochs, volumes and batch size must be positive".into()));
        }
        if self.patches_per_subepoch < self.volumes_per_subepoch {
            return Err(Error::Config("need at least one patch per sampled volume".into()));
        }
        if !(0.0..=1.0).contains(&self.fg_fraction) {
            return Err(Error::Config("fg_fraction must lie in [0, 1]".into()));
        }
        if self.patch_extent.ndim() != self.arch.ndim {
            return Err(Error::Config("patch dimensionality differs from the network's".into()));
        }
        let m = self.arch.spatial_multiple();
        if self.patch_extent.dims().iter().any(|d| d % m != 0) {
            return Err(Error::Config(format!("patch extents must be multiples of {m}")));
        }
        self.arch.layers()?;
        Ok(())
    }

    pub fn steps_per_epoch(&self) -> usize {
        self.subepochs * self.patches_per_subepoch.div_ceil(self.batch_size)
    }
}

/// One participant of the ring. Ids are 1-based ring ordinals; id 0 is the pooled mixed-data site.
#[derive(Debug, Clone)]
pub struct Center {
    pub id: usize,
    pub volumes: Vec<LabeledVolume>,
    pub local_seed: u64,
}

/// Center a volume was generated for (its id carries the generation stream).
pub fn source_center(volume_id: u64) -> usize {
    (volume_id >> 32) as usize
}

/// Which center's data fed a step, and how many epochs that center's data had seen before.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct StepProvenance {
    pub center: usize,
    pub epoch: usize,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainTrace {
    pub epoch_seg_loss: Vec<f64>,
    pub epoch_penalty: Vec<f64>,
    pub validation_sensitivity: Vec<f64>,
    pub steps: Vec<StepProvenance>,
    pub lr_halvings: usize,
}

/// Combines the segmentation gradient with the SI penalty gradient, applies one optimizer step
/// and feeds the path integral. The path integral only ever sees `seg_grad`.
pub fn apply_gradients(
    model: &mut ModelState<f32>,
    opt: &mut OptimizerState<f32>,
    si: Option<&mut SiState<f32>>,
    seg_grad: &[f32],
    t: u64,
) -> Result<()> {
    let full: Vec<f32> = match si.as_deref() {
        Some(s) => {
            let (_, pg) = s.penalty(model.theta())?;
            seg_grad.iter().zip(&pg).map(|(a, b)| a + b).collect()
        }
        None => seg_grad.to_vec(),
    };
    let delta = opt.step(model, &full)?;
    if let Some(s) = si {
        s.accumulate(StepRecord {
            g: seg_grad,
            delta_theta: &delta,
            t,
        })?;
    }
    Ok(())
}

/// Draws one subepoch of patches from `volumes`.
pub fn sample_subepoch(
    volumes: &[&LabeledVolume],
    cfg: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<PatchBatch> {
    let k = cfg.volumes_per_subepoch.min(volumes.len());
    let chosen = index::sample(rng, volumes.len(), k).into_vec();
    let base = cfg.patches_per_subepoch / k;
    let extra = cfg.patches_per_subepoch % k;
    let mut parts = Vec::with_capacity(k);
    for (j, &vi) in chosen.iter().enumerate() {
        let n = base + usize::from(j < extra);
        parts.push(sample_patches(volumes[vi], n, cfg.fg_fraction, cfg.patch_extent, &cfg.augment, rng)?);
    }
    let all = PatchBatch::concat(&parts)?;
    let mut order: Vec<usize> = (0..all.len()).collect();
    order.shuffle(rng);
    all.permuted(&order)
}

/// Mutable training context of one model at one site.
pub struct LocalRun<'a> {
    pub center_id: usize,
    pub volumes: Vec<&'a LabeledVolume>,
    pub validation: &'a [LabeledVolume],
    pub cfg: &'a TrainConfig,
    pub rng: ChaCha8Rng,
    /// Epochs this site's data had already fed, per source center (for step provenance).
    pub epoch_offset: usize,
}

/// Trains for `epochs` epochs without consolidating SI state.
///
/// Each epoch is `subepochs` rounds of: sample patches, then for every batch forward,
/// `L_seg` (+ SI penalty), backward, optimizer step, path-integral update.
pub fn train_local(
    run: &mut LocalRun<'_>,
    model: &mut ModelState<f32>,
    opt: &mut OptimizerState<f32>,
    mut si: Option<&mut SiState<f32>>,
    epochs: usize,
    trace: &mut TrainTrace,
) -> Result<()> {
    if epochs == 0 {
        return Ok(());
    }
    if run.volumes.is_empty() {
        return Err(Error::Config(format!("center {} has no training data", run.center_id)));
    }
    let cfg = run.cfg;
    let mut t = 0u64;
    for e in 0..epochs {
        let (mut seg_sum, mut pen_sum, mut n_steps) = (0.0, 0.0, 0usize);
        for _ in 0..cfg.subepochs {
            let batch = sample_subepoch(&run.volumes, cfg, &mut run.rng)?;
            let n = batch.len();
            let mut start = 0;
            while start < n {
                let idx: Vec<usize> = (start..(start + cfg.batch_size).min(n)).collect();
                start += cfg.batch_size;
                let mb = batch.select(&idx)?;
                let loss = {
                    let mut session = Session::new(&*model);
                    let pred = session.forward(&mb.inputs)?;
                    total_loss(&session, model.theta(), &pred, &mb.targets, &cfg.loss, si.as_deref())
                }
                .map_err(|err| Error::Diverged {
                    center: run.center_id,
                    epoch: e,
                    step: n_steps,
                    what: err.to_string(),
                })?;
                if !loss.total.is_finite() {
                    return Err(Error::Diverged {
                        center: run.center_id,
                        epoch: e,
                        step: n_steps,
                        what: "non-finite loss".into(),
                    });
                }
                seg_sum += loss.seg.total;
                pen_sum += loss.penalty;
                apply_gradients(model, opt, si.as_deref_mut(), &loss.seg_grad, t)?;
                t += 1;
                n_steps += 1;
                let center = source_center(mb.provenance[0].0);
                trace.steps.push(StepProvenance {
                    center,
                    epoch: run.epoch_offset + e,
                });
            }
        }
        trace.epoch_seg_loss.push(seg_sum / n_steps as f64);
        trace.epoch_penalty.push(pen_sum / n_steps as f64);
        if cfg.monitor_validation && !run.validation.is_empty() {
            let report = evaluate(model, run.validation, &cfg.eval)?;
            trace.validation_sensitivity.push(report.sensitivity);
            if opt.observe(report.sensitivity) {
                trace.lr_halvings += 1;
            }
        }
    }
    run.epoch_offset += epochs;
    model.bump_version();
    Ok(())
}

/// Per-visit RNG: a function of the site seed and the visit number only.
pub fn visit_rng(local_seed: u64, visit: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(mix_seed(local_seed, visit as u64 + 1))
}
