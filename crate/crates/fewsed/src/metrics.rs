//! Event-based scoring: intersection-over-union matching with event-level
//! F-measure, operating-point sweeps over (threshold, alpha, beta), and the
//! PSD-ROC / PSDS construction.

use std::collections::BTreeMap;
use std::path::PathBuf;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{DatasetIndex, DetectionEvent, Polarity};
use crate::encoder::Encoder;
use crate::error::{Error, Result};
use crate::evaluator::{
    build_context, compute_file_queries, ensemble_runs, file_rng, post_filter,
    threshold_and_merge, EvalConfig, ProbabilityTrack,
};
use crate::features::FeatureStore;

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MatchCriterion {
    pub min_iou: f64,
}

impl Default for MatchCriterion {
    fn default() -> Self {
        MatchCriterion { min_iou: 0.3 }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ConfusionCounts {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
}

impl ConfusionCounts {
    pub fn add(&mut self, other: &ConfusionCounts) {
        self.tp += other.tp;
        self.fp += other.fp;
        self.fn_ += other.fn_;
    }
}

fn iou(a: &DetectionEvent, b: &DetectionEvent) -> f64 {
    let inter = a.offset.min(b.offset) - a.onset.max(b.onset);
    if inter <= 0.0 {
        return 0.0;
    }
    let union = (a.offset - a.onset) + (b.offset - b.onset) - inter;
    inter / union
}

/// One-to-one event matching maximizing the number of matched pairs among
/// those with IoU at or above the criterion (augmenting-path bipartite
/// matching, equivalent to the exhaustive optimal assignment).
pub fn match_events(
    predictions: &[DetectionEvent],
    ground_truth: &[DetectionEvent],
    criterion: &MatchCriterion,
) -> ConfusionCounts {
    let eligible: Vec<Vec<usize>> = predictions
        .iter()
        .map(|p| {
            ground_truth
                .iter()
                .enumerate()
                .filter(|(_, g)| iou(p, g) >= criterion.min_iou)
                .map(|(j, _)| j)
                .collect()
        })
        .collect();

    let mut gt_owner: Vec<Option<usize>> = vec![None; ground_truth.len()];
    let mut matched = 0usize;
    for p in 0..predictions.len() {
        let mut visited = vec![false; ground_truth.len()];
        if try_assign(p, &eligible, &mut gt_owner, &mut visited) {
            matched += 1;
        }
    }
    ConfusionCounts {
        tp: matched,
        fp: predictions.len() - matched,
        fn_: ground_truth.len() - matched,
    }
}

fn try_assign(
    p: usize,
    eligible: &[Vec<usize>],
    gt_owner: &mut [Option<usize>],
    visited: &mut [bool],
) -> bool {
    for &g in &eligible[p] {
        if visited[g] {
            continue;
        }
        visited[g] = true;
        if gt_owner[g].is_none() || try_assign(gt_owner[g].unwrap(), eligible, gt_owner, visited) {
            gt_owner[g] = Some(p);
            return true;
        }
    }
    false
}

/// Precision, recall, F1 with the zero-denominator-is-zero convention.
pub fn f_measure(counts: &ConfusionCounts) -> (f64, f64, f64) {
    let p = if counts.tp + counts.fp == 0 {
        0.0
    } else {
        counts.tp as f64 / (counts.tp + counts.fp) as f64
    };
    let r = if counts.tp + counts.fn_ == 0 {
        0.0
    } else {
        counts.tp as f64 / (counts.tp + counts.fn_) as f64
    };
    let f = if p + r == 0.0 { 0.0 } else { 2.0 * p * r / (p + r) };
    (p, r, f)
}

// ---------------------------------------------------------------------------
// PSDS
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PsdsConfig {
    /// Detection tolerance criterion (detection-side intersection ratio).
    pub dtc: f64,
    /// Ground-truth intersection criterion.
    pub gtc: f64,
    /// Integration range for the PSD-ROC, in false positives per hour.
    pub max_efpr: f64,
}

impl Default for PsdsConfig {
    fn default() -> Self {
        PsdsConfig {
            dtc: 0.5,
            gtc: 0.5,
            max_efpr: 100.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RocPoint {
    pub efpr: f64,
    pub tpr: f64,
}

/// Per-class upper-envelope step curves, the mean-TPR curve, and the PSDS.
#[derive(Debug, Clone)]
pub struct PsdRoc {
    pub per_class: BTreeMap<String, Vec<RocPoint>>,
    pub mean: Vec<RocPoint>,
    pub psds: f64,
    pub max_efpr: f64,
}

/// Intersection mass of `event` with a set of (sorted or unsorted) spans.
fn intersection_mass(event: (f64, f64), spans: &[(f64, f64)]) -> f64 {
    let mut mass = 0.0;
    for &(a, b) in spans {
        let inter = event.1.min(b) - event.0.max(a);
        if inter > 0.0 {
            mass += inter;
        }
    }
    mass
}

/// Per-class TPR and eFPR for one operating point.
///
/// A ground-truth event counts as detected when the detection mass covering
/// it reaches `gtc` of its duration; a detection is a false positive when
/// the ground truth covers less than `dtc` of it. eFPR is false positives
/// per hour of evaluated audio.
pub fn class_rates(
    detections_per_file: &BTreeMap<PathBuf, Vec<DetectionEvent>>,
    truths_per_file: &BTreeMap<PathBuf, Vec<DetectionEvent>>,
    cfg: &PsdsConfig,
    evaluated_hours: f64,
) -> RocPoint {
    let mut gt_total = 0usize;
    let mut gt_hit = 0usize;
    let mut false_positives = 0usize;
    let empty: Vec<DetectionEvent> = Vec::new();
    for (file, truths) in truths_per_file {
        let dets = detections_per_file.get(file).unwrap_or(&empty);
        let det_spans: Vec<(f64, f64)> = dets.iter().map(|d| (d.onset, d.offset)).collect();
        let gt_spans: Vec<(f64, f64)> = truths.iter().map(|g| (g.onset, g.offset)).collect();
        for g in truths {
            gt_total += 1;
            let dur = g.offset - g.onset;
            if dur > 0.0 && intersection_mass((g.onset, g.offset), &det_spans) >= cfg.gtc * dur {
                gt_hit += 1;
            }
        }
        for d in dets {
            let dur = d.offset - d.onset;
            if dur <= 0.0 || intersection_mass((d.onset, d.offset), &gt_spans) < cfg.dtc * dur {
                false_positives += 1;
            }
        }
    }
    // detections in files without any ground truth entry
    for (file, dets) in detections_per_file {
        if truths_per_file.contains_key(file) {
            continue;
        }
        false_positives += dets.len();
    }
    let tpr = if gt_total == 0 {
        0.0
    } else {
        gt_hit as f64 / gt_total as f64
    };
    RocPoint {
        efpr: false_positives as f64 / evaluated_hours.max(1e-12),
        tpr,
    }
}

/// Upper envelope of raw per-class points: sorted by eFPR, running-max TPR.
fn envelope(points: &[RocPoint]) -> Vec<RocPoint> {
    let mut sorted: Vec<RocPoint> = points.to_vec();
    sorted.sort_by(|a, b| a.efpr.partial_cmp(&b.efpr).expect("finite efpr"));
    let mut out: Vec<RocPoint> = Vec::new();
    let mut best = 0.0f64;
    for p in sorted {
        if p.tpr > best {
            best = p.tpr;
        }
        match out.last_mut() {
            Some(last) if last.efpr == p.efpr => last.tpr = best,
            _ => out.push(RocPoint {
                efpr: p.efpr,
                tpr: best,
            }),
        }
    }
    out
}

fn step_value(curve: &[RocPoint], x: f64) -> f64 {
    let mut value = 0.0;
    for p in curve {
        if p.efpr <= x {
            value = p.tpr;
        } else {
            break;
        }
    }
    value
}

/// Builds the PSD-ROC from raw per-class operating points and integrates
/// the mean-TPR curve over `[0, max_efpr]`.
pub fn psds(raw_points: &BTreeMap<String, Vec<RocPoint>>, cfg: &PsdsConfig) -> PsdRoc {
    let per_class: BTreeMap<String, Vec<RocPoint>> = raw_points
        .iter()
        .map(|(class, pts)| (class.clone(), envelope(pts)))
        .collect();

    let mut knots: Vec<f64> = vec![0.0];
    for curve in per_class.values() {
        for p in curve {
            if p.efpr >= 0.0 && p.efpr <= cfg.max_efpr {
                knots.push(p.efpr);
            }
        }
    }
    knots.push(cfg.max_efpr);
    knots.sort_by(|a, b| a.partial_cmp(b).expect("finite"));
    knots.dedup();

    let n_classes = per_class.len().max(1) as f64;
    let mean: Vec<RocPoint> = knots
        .iter()
        .map(|&x| {
            let sum: f64 = per_class.values().map(|c| step_value(c, x)).sum();
            RocPoint {
                efpr: x,
                tpr: sum / n_classes,
            }
        })
        .collect();

    let mut area = 0.0;
    for w in mean.windows(2) {
        area += w[0].tpr * (w[1].efpr - w[0].efpr);
    }
    let psds = if cfg.max_efpr > 0.0 {
        area / cfg.max_efpr
    } else {
        0.0
    };
    PsdRoc {
        per_class,
        mean,
        psds,
        max_efpr: cfg.max_efpr,
    }
}

/// Writes the ROC as CSV rows `(class_or_mean, efpr, tpr)`.
pub fn emit_psd_roc_csv(roc: &PsdRoc, path: &std::path::Path) -> Result<()> {
    let mut text = String::from("class_or_mean,efpr,tpr\n");
    for (class, curve) in &roc.per_class {
        for p in curve {
            text.push_str(&format!("{class},{:.9},{:.9}\n", p.efpr, p.tpr));
        }
    }
    for p in &roc.mean {
        text.push_str(&format!("mean,{:.9},{:.9}\n", p.efpr, p.tpr));
    }
    std::fs::write(path, text)?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Operating-point sweep
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepGrids {
    pub thresholds: Vec<f64>,
    pub alphas: Vec<f64>,
    pub betas: Vec<f64>,
}

impl Default for SweepGrids {
    fn default() -> Self {
        SweepGrids {
            thresholds: (0..20).map(|i| i as f64 * 0.05).collect(),
            alphas: (1..=9).map(|i| i as f64 * 0.1).collect(),
            betas: vec![2.0],
        }
    }
}

#[derive(Debug, Clone)]
pub struct OperatingPoint {
    pub threshold: f64,
    pub alpha: f64,
    pub beta: f64,
    pub pooled: ConfusionCounts,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub per_class: BTreeMap<String, RocPoint>,
}

#[derive(Debug, Clone)]
pub struct SweepResult {
    pub points: Vec<OperatingPoint>,
    pub roc: PsdRoc,
    /// Index into `points` of the best-F operating point.
    pub best: usize,
}

impl SweepResult {
    pub fn best_point(&self) -> &OperatingPoint {
        &self.points[self.best]
    }
}

/// Everything needed to score one evaluation file at many operating points:
/// the ensembled track, the file's post-prefix ground truth, and `t_max`.
pub struct FileTrack {
    pub file: PathBuf,
    pub class: String,
    pub track: ProbabilityTrack,
    pub t_max: f64,
    pub truth: Vec<DetectionEvent>,
    pub evaluated_secs: f64,
}

/// Computes the per-file probability tracks once (the expensive part).
pub fn compute_tracks(
    encoder: &Encoder<f32>,
    store: &FeatureStore,
    eval_index: &DatasetIndex,
    cfg: &EvalConfig,
) -> Result<Vec<FileTrack>> {
    cfg.validate()?;
    let files: Vec<(&PathBuf, &crate::corpus::FileEntry)> = eval_index.files.iter().collect();
    let tracks: Vec<Result<FileTrack>> = files
        .par_iter()
        .map(|(path, entry)| {
            let map = store
                .get(path)
                .ok_or_else(|| Error::Data(format!("no features for {}", path.display())))?;
            let context = build_context(path, entry, cfg.k_shots)?;
            let queries = compute_file_queries(encoder, map, &context);
            let mut rng = file_rng(cfg.seed, path);
            let track = ensemble_runs(encoder, map, &context, &queries, cfg, &mut rng);
            let truth: Vec<DetectionEvent> = entry
                .annotations
                .iter()
                .filter(|r| {
                    r.polarity == Polarity::Positive
                        && r.onset >= context.prediction_start - 1e-9
                })
                .map(|r| DetectionEvent {
                    onset: r.onset,
                    offset: r.offset,
                    score: 1.0,
                })
                .collect();
            Ok(FileTrack {
                file: (*path).clone(),
                class: entry.subfolder.clone(),
                track,
                t_max: context.t_max,
                truth,
                evaluated_secs: entry.duration - context.prediction_start,
            })
        })
        .collect();
    tracks.into_iter().collect()
}

/// Detections for one track at one operating point.
pub fn detections_at(
    track: &FileTrack,
    threshold: f64,
    alpha: f64,
    beta: f64,
    apply_filter: bool,
) -> Vec<DetectionEvent> {
    let merged = threshold_and_merge(&track.track, threshold);
    if apply_filter {
        post_filter(&merged, track.t_max, alpha, beta)
    } else {
        merged
    }
}

/// Scores every (threshold, alpha, beta) combination against the tracks,
/// reusing each track across the whole grid, and assembles the PSD-ROC.
pub fn sweep_operating_points(
    tracks: &[FileTrack],
    grids: &SweepGrids,
    criterion: &MatchCriterion,
    psds_cfg: &PsdsConfig,
    apply_filter: bool,
) -> SweepResult {
    let evaluated_hours: f64 = tracks.iter().map(|t| t.evaluated_secs).sum::<f64>() / 3600.0;
    let combos: Vec<(f64, f64, f64)> = grids
        .thresholds
        .iter()
        .flat_map(|&h| {
            grids
                .alphas
                .iter()
                .flat_map(move |&a| grids.betas.iter().map(move |&b| (h, a, b)))
        })
        .collect();

    let points: Vec<OperatingPoint> = combos
        .par_iter()
        .map(|&(h, alpha, beta)| {
            let mut pooled = ConfusionCounts::default();
            let mut dets_by_class: BTreeMap<String, BTreeMap<PathBuf, Vec<DetectionEvent>>> =
                BTreeMap::new();
            let mut truth_by_class: BTreeMap<String, BTreeMap<PathBuf, Vec<DetectionEvent>>> =
                BTreeMap::new();
            for t in tracks {
                let dets = detections_at(t, h, alpha, beta, apply_filter);
                pooled.add(&match_events(&dets, &t.truth, criterion));
                dets_by_class
                    .entry(t.class.clone())
                    .or_default()
                    .insert(t.file.clone(), dets);
                truth_by_class
                    .entry(t.class.clone())
                    .or_default()
                    .insert(t.file.clone(), t.truth.clone());
            }
            let per_class: BTreeMap<String, RocPoint> = truth_by_class
                .iter()
                .map(|(class, truths)| {
                    let empty = BTreeMap::new();
                    let dets = dets_by_class.get(class).unwrap_or(&empty);
                    (
                        class.clone(),
                        class_rates(dets, truths, psds_cfg, evaluated_hours),
                    )
                })
                .collect();
            let (precision, recall, f1) = f_measure(&pooled);
            OperatingPoint {
                threshold: h,
                alpha,
                beta,
                pooled,
                precision,
                recall,
                f1,
                per_class,
            }
        })
        .collect();

    let mut raw: BTreeMap<String, Vec<RocPoint>> = BTreeMap::new();
    for point in &points {
        for (class, rates) in &point.per_class {
            raw.entry(class.clone()).or_default().push(*rates);
        }
    }
    let roc = psds(&raw, psds_cfg);
    let best = points
        .iter()
        .enumerate()
        .max_by(|a, b| {
            a.1.f1
                .partial_cmp(&b.1.f1)
                .unwrap()
                .then(b.0.cmp(&a.0))
        })
        .map(|(i, _)| i)
        .unwrap_or(0);
    SweepResult { points, roc, best }
}

/// Writes the per-operating-point scores table.
pub fn write_scores_csv(result: &SweepResult, path: &std::path::Path) -> Result<()> {
    let mut text = String::from("h,alpha,beta,tp,fp,fn,precision,recall,f1\n");
    for p in &result.points {
        text.push_str(&format!(
            "{:.2},{:.1},{:.1},{},{},{},{:.6},{:.6},{:.6}\n",
            p.threshold,
            p.alpha,
            p.beta,
            p.pooled.tp,
            p.pooled.fp,
            p.pooled.fn_,
            p.precision,
            p.recall,
            p.f1
        ));
    }
    let best = result.best_point();
    text.push_str(&format!(
        "# best_f1={:.6} at h={:.2} alpha={:.1} beta={:.1}; psds={:.6}\n",
        best.f1, best.threshold, best.alpha, best.beta, result.roc.psds
    ));
    std::fs::write(path, text)?;
    Ok(())
}
