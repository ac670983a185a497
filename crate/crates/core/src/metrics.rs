//! Lesion-level evaluation: connected components, prediction-to-truth matching, and the
//! sensitivity / precision / AFPR / true-positive Dice report.

use std::collections::VecDeque;

use crate::error::{Error, Result};
use crate::nn::{ModelState, Session};
use crate::synth::LabeledVolume;
use crate::tensor::{Extent, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Source {
    Prediction,
    Truth,
}

/// Disjoint, nonempty voxel sets. Voxel lists are ascending; components are ordered by their
/// smallest voxel.
#[derive(Debug, Clone, PartialEq)]
pub struct LesionSet {
    pub components: Vec<Vec<u32>>,
}

impl LesionSet {
    pub fn len(&self) -> usize {
        self.components.len()
    }

    pub fn is_empty(&self) -> bool {
        self.components.is_empty()
    }

    /// Per-voxel component label, `u32::MAX` for background.
    pub fn label_map(&self, n: usize) -> Vec<u32> {
        let mut labels = vec![u32::MAX; n];
        for (i, c) in self.components.iter().enumerate() {
            for &v in c {
                labels[v as usize] = i as u32;
            }
        }
        labels
    }
}

/// Components under full-neighborhood connectivity (8 in 2D, 26 in 3D).
pub fn connected_components(mask: &[u8], ext: Extent) -> LesionSet {
    let nbrs = ext.neighborhood();
    let mut seen = vec![false; mask.len()];
    let mut components = Vec::new();
    let mut queue = VecDeque::new();
    for start in 0..mask.len() {
        if mask[start] == 0 || seen[start] {
            continue;
        }
        seen[start] = true;
        queue.push_back(start);
        let mut comp = Vec::new();
        while let Some(v) = queue.pop_front() {
            comp.push(v as u32);
            let c = ext.coords(v);
            for &d in &nbrs {
                if let Some(u) = ext.offset(c, d) {
                    if mask[u] != 0 && !seen[u] {
                        seen[u] = true;
                        queue.push_back(u);
                    }
                }
            }
        }
        comp.sort_unstable();
        components.push(comp);
    }
    LesionSet { components }
}

pub fn threshold_predictions(prob: &[f32], tau: f32) -> Vec<u8> {
    prob.iter().map(|&p| u8::from(p >= tau)).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Matching {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    /// For each detected truth lesion, the predicted components overlapping it.
    pub pairs: Vec<(usize, Vec<usize>)>,
}

/// A predicted component detects a truth lesion when they share at least `min_overlap` voxels.
/// Predicted components detecting nothing are false positives.
pub fn match_lesions(
    pred: &LesionSet,
    truth: &LesionSet,
    n_voxels: usize,
    min_overlap: usize,
) -> Matching {
    let min_overlap = min_overlap.max(1);
    let truth_labels = truth.label_map(n_voxels);
    let mut hits: Vec<Vec<usize>> = vec![Vec::new(); truth.len()];
    let mut fp = 0;
    let mut counts: Vec<(u32, usize)> = Vec::new();
    for (pi, comp) in pred.components.iter().enumerate() {
        counts.clear();
        for &v in comp {
            let t = truth_labels[v as usize];
            if t == u32::MAX {
                continue;
            }
            match counts.iter_mut().find(|(l, _)| *l == t) {
                Some((_, n)) => *n += 1,
                None => counts.push((t, 1)),
            }
        }
        let mut detects = false;
        for &(t, n) in &counts {
            if n >= min_overlap {
                hits[t as usize].push(pi);
                detects = true;
            }
        }
        if !detects {
            fp += 1;
        }
    }
    let pairs: Vec<(usize, Vec<usize>)> = hits
        .into_iter()
        .enumerate()
        .filter(|(_, h)| !h.is_empty())
        .collect();
    Matching {
        tp: pairs.len(),
        fp,
        fn_: truth.len() - pairs.len(),
        pairs,
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalConfig {
    pub tau: f32,
    pub min_overlap_voxels: usize,
    /// Predicted components smaller than this are discarded before matching.
    pub min_component_voxels: usize,
    /// Truth lesions with at most this many voxels count as small.
    pub small_lesion_voxels: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            tau: 0.5,
            min_overlap_voxels: 1,
            min_component_voxels: 1,
            small_lesion_voxels: 12,
        }
    }
}

/// Raw per-volume (or aggregated) counts.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct Counts {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    pub small_tp: usize,
    pub n_volumes: usize,
    pub dsc_sum: f64,
}

impl Counts {
    pub fn add(&mut self, o: &Counts) {
        self.tp += o.tp;
        self.fp += o.fp;
        self.fn_ += o.fn_;
        self.small_tp += o.small_tp;
        self.n_volumes += o.n_volumes;
        self.dsc_sum += o.dsc_sum;
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricsReport {
    pub sensitivity: f64,
    pub precision: f64,
    /// False-positive lesions per volume.
    pub afpr: f64,
    pub mean_tp_dsc: f64,
    /// Share of small lesions among the true positives.
    pub small_tp_ratio: f64,
    pub counts: Counts,
    /// Set when a metric had an empty denominator and reports its neutral value instead.
    pub sensitivity_undefined: bool,
    pub precision_undefined: bool,
    pub dsc_undefined: bool,
}

impl MetricsReport {
    /// Sensitivity, precision and Dice fall back to 1, the small-lesion ratio to 0.
    pub fn from_counts(c: Counts) -> Self {
        let ratio = |num: f64, den: usize, neutral: f64| {
            if den == 0 {
                (neutral, true)
            } else {
                (num / den as f64, false)
            }
        };
        let (sensitivity, su) = ratio(c.tp as f64, c.tp + c.fn_, 1.0);
        let (precision, pu) = ratio(c.tp as f64, c.tp + c.fp, 1.0);
        let (mean_tp_dsc, du) = ratio(c.dsc_sum, c.tp, 1.0);
        let (small_tp_ratio, _) = ratio(c.small_tp as f64, c.tp, 0.0);
        let afpr = if c.n_volumes == 0 {
            0.0
        } else {
            c.fp as f64 / c.n_volumes as f64
        };
        Self {
            sensitivity,
            precision,
            afpr,
            mean_tp_dsc,
            small_tp_ratio,
            counts: c,
            sensitivity_undefined: su,
            precision_undefined: pu,
            dsc_undefined: du,
        }
    }
}

/// Counts for one volume given its binary prediction.
pub fn score_volume(pred_mask: &[u8], truth_mask: &[u8], ext: Extent, cfg: &EvalConfig) -> Counts {
    let mut pred = connected_components(pred_mask, ext);
    pred.components.retain(|c| c.len() >= cfg.min_component_voxels);
    let truth = connected_components(truth_mask, ext);
    let m = match_lesions(&pred, &truth, ext.len(), cfg.min_overlap_voxels);
    let mut c = Counts {
        tp: m.tp,
        fp: m.fp,
        fn_: m.fn_,
        n_volumes: 1,
        ..Counts::default()
    };
    for (ti, preds) in &m.pairs {
        let t = &truth.components[*ti];
        if t.len() <= cfg.small_lesion_voxels {
            c.small_tp += 1;
        }
        let p_size: usize = preds.iter().map(|&p| pred.components[p].len()).sum();
        let inter: usize = preds
            .iter()
            .map(|&p| {
                pred.components[p]
                    .iter()
                    .filter(|&&v| truth_mask[v as usize] != 0 && t.binary_search(&v).is_ok())
                    .count()
            })
            .sum();
        c.dsc_sum += 2.0 * inter as f64 / (p_size + t.len()) as f64;
    }
    c
}

/// Probability map of one volume, computed on its normalized image.
pub fn predict_volume(session: &Session<'_, f32>, v: &LabeledVolume) -> Result<Vec<f32>> {
    let mut shape = vec![1, 1];
    shape.extend(v.extent.dims());
    let x = Tensor::new(shape, v.normalized_image())?;
    Ok(session.predict(&x)?.into_data())
}

/// Runs the model on every volume of `set` and aggregates lesion-level metrics.
pub fn evaluate(model: &ModelState<f32>, set: &[LabeledVolume], cfg: &EvalConfig) -> Result<MetricsReport> {
    if set.is_empty() {
        return Err(Error::Config("empty evaluation set".into()));
    }
    let session = Session::new(model);
    let mut total = Counts::default();
    for v in set {
        let prob = predict_volume(&session, v)?;
        let pred = threshold_predictions(&prob, cfg.tau);
        total.add(&score_volume(&pred, &v.mask, v.extent, cfg));
    }
    Ok(MetricsReport::from_counts(total))
}
