//! Per-file detection: adaptive segment length from the labeled events,
//! positive/negative prototypes from the labeled prefix, the ensembled
//! probability track over the unlabeled region, thresholding with
//! consecutive-frame merging, and duration filtering.

use std::path::{Path, PathBuf};

use ndarray::{Array1, Array2, Array4, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::{DetectionEvent, FileEntry, Polarity, RegionRef};
use crate::encoder::Encoder;
use crate::error::{Error, Result};
use crate::features::{FeatureMap, FRAME_HOP, SAMPLE_RATE};

/// Everything detection needs to know about one evaluation file.
#[derive(Debug, Clone)]
pub struct EvalContext {
    pub file: PathBuf,
    /// The first `k` labeled positive events, onset-sorted.
    pub labeled: Vec<RegionRef>,
    /// Gaps before each labeled event within the labeled prefix.
    pub negative_chunks: Vec<RegionRef>,
    /// Longest labeled event duration.
    pub t_max: f64,
    /// Offset of the k-th labeled event; queries start here.
    pub prediction_start: f64,
    pub file_duration: f64,
}

/// Sliding-window layout over the unlabeled region.
#[derive(Debug, Clone)]
pub struct SegmentGrid {
    pub segment_len: f64,
    /// Exactly `segment_len / 3`.
    pub hop: f64,
    pub onsets: Vec<f64>,
}

/// Per-frame positive-class probability over the unlabeled region.
#[derive(Debug, Clone)]
pub struct ProbabilityTrack {
    /// Absolute frame index of the first track frame.
    pub start_frame: usize,
    pub probs: Vec<f32>,
    pub frame_rate: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Labeled events per evaluation file (the "shots").
    pub k_shots: usize,
    pub n_runs: usize,
    pub negatives_per_run: usize,
    pub threshold: f64,
    pub alpha: f64,
    pub beta: f64,
    /// Duration filter toggle; off reproduces the "w/o post processing" arm.
    pub post_filter: bool,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            k_shots: 5,
            n_runs: 6,
            negatives_per_run: 30,
            threshold: 0.5,
            alpha: 0.2,
            beta: 2.0,
            post_filter: true,
            seed: 1,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k_shots < 1
            || self.n_runs < 1
            || self.negatives_per_run < 1
            || !(0.0..=1.0).contains(&self.threshold)
            || self.alpha >= self.beta
        {
            return Err(Error::Config(format!("invalid eval config: {self:?}")));
        }
        Ok(())
    }
}

/// Segment length for a file whose longest labeled event is `t_max`
/// seconds. The first band is 8 feature frames.
pub fn adaptive_segment_length(t_max: f64) -> f64 {
    assert!(t_max > 0.0, "t_max must be positive");
    let eight_frames = 8.0 * FRAME_HOP as f64 / SAMPLE_RATE as f64;
    if t_max <= 0.1 {
        eight_frames
    } else if t_max <= 0.4 {
        t_max
    } else if t_max <= 0.8 {
        t_max / 2.0
    } else if t_max <= 3.0 {
        t_max / 4.0
    } else {
        t_max / 8.0
    }
}

/// Builds the evaluation context from a file's annotations: the first `k`
/// positive events are the labeled prefix, the `k` gaps before them are the
/// negative chunks.
pub fn build_context(path: &Path, entry: &FileEntry, k: usize) -> Result<EvalContext> {
    let mut positives: Vec<RegionRef> = entry
        .annotations
        .iter()
        .filter(|r| r.polarity == Polarity::Positive)
        .map(|r| RegionRef {
            file: path.to_path_buf(),
            onset: r.onset,
            offset: r.offset.min(entry.duration),
        })
        .collect();
    positives.sort_by(|a, b| a.onset.partial_cmp(&b.onset).expect("finite onsets"));
    if positives.len() < k {
        return Err(Error::Data(format!(
            "{}: needs {k} labeled events, has {}",
            path.display(),
            positives.len()
        )));
    }
    let labeled: Vec<RegionRef> = positives[..k].to_vec();
    let mut negative_chunks = Vec::new();
    let mut prev_end = 0.0f64;
    for region in &labeled {
        if region.onset > prev_end {
            negative_chunks.push(RegionRef {
                file: path.to_path_buf(),
                onset: prev_end,
                offset: region.onset,
            });
        }
        prev_end = prev_end.max(region.offset);
    }
    if negative_chunks.is_empty() {
        return Err(Error::Data(format!(
            "{}: no negative material in the labeled prefix; check the annotations",
            path.display()
        )));
    }
    let t_max = labeled
        .iter()
        .map(|r| r.duration())
        .fold(f64::NEG_INFINITY, f64::max);
    Ok(EvalContext {
        file: path.to_path_buf(),
        prediction_start: prev_end,
        labeled,
        negative_chunks,
        t_max,
        file_duration: entry.duration,
    })
}

/// Sliding-window onsets covering `[prediction_start, file end)` with hop
/// one third of the segment length.
pub fn segment_grid(context: &EvalContext) -> SegmentGrid {
    let segment_len = adaptive_segment_length(context.t_max);
    let hop = segment_len / 3.0;
    let mut onsets = Vec::new();
    let mut t = context.prediction_start;
    while t < context.file_duration {
        onsets.push(t);
        t += hop;
    }
    SegmentGrid {
        segment_len,
        hop,
        onsets,
    }
}

fn segment_frames_for(map: &FeatureMap, len_secs: f64) -> usize {
    ((len_secs * map.frame_rate).round() as usize).max(8)
}

/// Crops a zero-padded segment starting at an exact frame.
fn crop_at_frame(map: &FeatureMap, start: usize, frames: usize) -> ndarray::Array3<f32> {
    let (c, total, f) = map.values.dim();
    let mut seg = ndarray::Array3::<f32>::zeros((c, frames, f));
    if start < total {
        let take = frames.min(total - start);
        seg.slice_mut(ndarray::s![.., ..take, ..])
            .assign(&map.values.slice(ndarray::s![.., start..start + take, ..]));
    }
    seg
}

fn encode_batch(encoder: &Encoder<f32>, segments: &[ndarray::Array3<f32>]) -> Array2<f32> {
    assert!(!segments.is_empty());
    let (c, t, f) = segments[0].dim();
    let dim = encoder.embedding_dim();
    let mut out = Array2::<f32>::zeros((segments.len(), dim));
    // parallel over modest chunks; each forward is independent in eval mode
    let chunk = 16usize;
    let results: Vec<(usize, Array2<f32>)> = segments
        .par_chunks(chunk)
        .enumerate()
        .map(|(ci, segs)| {
            let mut batch = Array4::<f32>::zeros((segs.len(), c, t, f));
            for (i, seg) in segs.iter().enumerate() {
                batch.index_axis_mut(Axis(0), i).assign(seg);
            }
            (ci, encoder.forward_eval(&batch))
        })
        .collect();
    for (ci, emb) in results {
        for (i, row) in emb.rows().into_iter().enumerate() {
            out.row_mut(ci * chunk + i).assign(&row);
        }
    }
    out
}

fn mean_rows(embeddings: &Array2<f32>) -> Array1<f32> {
    crate::fewshot::compute_prototype(embeddings)
}

/// Positive prototype: segments of the adaptive length tiled with hop
/// `len/3` across every labeled event (one zero-padded segment for events
/// shorter than the length). Negative prototype: mean embedding of
/// `negatives_per_run` segments drawn uniformly from the distinct start
/// positions inside the labeled negative chunks (with replacement when
/// fewer exist).
pub fn build_eval_prototypes(
    encoder: &Encoder<f32>,
    map: &FeatureMap,
    context: &EvalContext,
    negatives_per_run: usize,
    rng: &mut ChaCha8Rng,
) -> (Array1<f32>, Array1<f32>) {
    let segment_len = adaptive_segment_length(context.t_max);
    let frames = segment_frames_for(map, segment_len);

    let mut pos_segments = Vec::new();
    for event in &context.labeled {
        let onset_frame = map.secs_to_frame(event.onset);
        let offset_frame = map.secs_to_frame(event.offset);
        let span = offset_frame.saturating_sub(onset_frame);
        if span <= frames {
            pos_segments.push(crop_at_frame(map, onset_frame, frames));
        } else {
            let hop = (frames / 3).max(1);
            let mut start = onset_frame;
            while start + frames <= offset_frame {
                pos_segments.push(crop_at_frame(map, start, frames));
                start += hop;
            }
        }
    }
    let pos_proto = mean_rows(&encode_batch(encoder, &pos_segments));

    let neg_positions = negative_start_positions(map, context, frames);
    let mut neg_segments = Vec::with_capacity(negatives_per_run);
    for _ in 0..negatives_per_run {
        let start = neg_positions[rng.gen_range(0..neg_positions.len())];
        neg_segments.push(crop_at_frame(map, start, frames));
    }
    let neg_proto = mean_rows(&encode_batch(encoder, &neg_segments));
    (pos_proto, neg_proto)
}

fn negative_start_positions(map: &FeatureMap, context: &EvalContext, frames: usize) -> Vec<usize> {
    let mut positions = Vec::new();
    for chunk in &context.negative_chunks {
        let first = map.secs_to_frame(chunk.onset);
        let last_excl = map.secs_to_frame(chunk.offset);
        if last_excl.saturating_sub(first) <= frames {
            positions.push(first);
        } else {
            positions.extend(first..=last_excl - frames);
        }
    }
    debug_assert!(!positions.is_empty(), "context guarantees negative chunks");
    positions
}

/// One run: queries along the grid classified against the two prototypes,
/// averaged per frame over the segments covering it.
pub fn query_probabilities(
    query_embeddings: &Array2<f32>,
    grid_start_frames: &[usize],
    segment_frames: usize,
    pos_proto: &Array1<f32>,
    neg_proto: &Array1<f32>,
    track_start: usize,
    track_len: usize,
    frame_rate: f64,
) -> ProbabilityTrack {
    let mut sums = vec![0.0f64; track_len];
    let mut counts = vec![0u32; track_len];
    for (row, &seg_start) in query_embeddings.rows().into_iter().zip(grid_start_frames) {
        let d_pos = euclid(&row, pos_proto);
        let d_neg = euclid(&row, neg_proto);
        // softmax over {-d_pos, -d_neg}, positive entry
        let p = 1.0 / (1.0 + ((d_pos - d_neg) as f64).exp());
        for f in seg_start..seg_start + segment_frames {
            if f >= track_start && f < track_start + track_len {
                sums[f - track_start] += p;
                counts[f - track_start] += 1;
            }
        }
    }
    let probs = sums
        .iter()
        .zip(counts.iter())
        .map(|(&s, &c)| if c > 0 { (s / c as f64) as f32 } else { 0.0 })
        .collect();
    ProbabilityTrack {
        start_frame: track_start,
        probs,
        frame_rate,
    }
}

fn euclid(a: &ndarray::ArrayView1<'_, f32>, b: &Array1<f32>) -> f32 {
    let mut acc = 0.0f32;
    for (&x, &y) in a.iter().zip(b.iter()) {
        acc += (x - y) * (x - y);
    }
    acc.sqrt()
}

/// Per-file rng stream: global seed mixed with a stable hash of the file
/// name, so parallel evaluation order never changes results.
pub fn file_rng(seed: u64, path: &Path) -> ChaCha8Rng {
    let mut hasher = Sha256::new();
    hasher.update(path.to_string_lossy().as_bytes());
    let digest = hasher.finalize();
    let mut bytes = [0u8; 8];
    bytes.copy_from_slice(&digest[..8]);
    ChaCha8Rng::seed_from_u64(seed ^ u64::from_le_bytes(bytes))
}

/// Query embeddings along the grid plus track bounds; computed once per
/// file and reused across ensemble runs and threshold sweeps.
pub struct FileQueries {
    pub grid: SegmentGrid,
    pub segment_frames: usize,
    pub grid_start_frames: Vec<usize>,
    pub embeddings: Array2<f32>,
    pub track_start: usize,
    pub track_len: usize,
    pub frame_rate: f64,
}

pub fn compute_file_queries(
    encoder: &Encoder<f32>,
    map: &FeatureMap,
    context: &EvalContext,
) -> FileQueries {
    let grid = segment_grid(context);
    let frames = segment_frames_for(map, grid.segment_len);
    let grid_start_frames: Vec<usize> = grid.onsets.iter().map(|&t| map.secs_to_frame(t)).collect();
    let segments: Vec<ndarray::Array3<f32>> = grid_start_frames
        .iter()
        .map(|&s| crop_at_frame(map, s, frames))
        .collect();
    let embeddings = encode_batch(encoder, &segments);
    // first frame at or after prediction_start, so no event can precede it
    let track_start =
        ((context.prediction_start * map.frame_rate - 1e-9).ceil().max(0.0)) as usize;
    let track_len = map.frames().saturating_sub(track_start);
    FileQueries {
        grid,
        segment_frames: frames,
        grid_start_frames,
        embeddings,
        track_start,
        track_len,
        frame_rate: map.frame_rate,
    }
}

/// Averages `n_runs` probability tracks, each with independently drawn
/// negative prototypes.
pub fn ensemble_runs(
    encoder: &Encoder<f32>,
    map: &FeatureMap,
    context: &EvalContext,
    queries: &FileQueries,
    cfg: &EvalConfig,
    rng: &mut ChaCha8Rng,
) -> ProbabilityTrack {
    let mut mean = vec![0.0f64; queries.track_len];
    for _ in 0..cfg.n_runs {
        let (pos, neg) = build_eval_prototypes(encoder, map, context, cfg.negatives_per_run, rng);
        let track = query_probabilities(
            &queries.embeddings,
            &queries.grid_start_frames,
            queries.segment_frames,
            &pos,
            &neg,
            queries.track_start,
            queries.track_len,
            queries.frame_rate,
        );
        for (acc, &p) in mean.iter_mut().zip(track.probs.iter()) {
            *acc += p as f64;
        }
    }
    ProbabilityTrack {
        start_frame: queries.track_start,
        probs: mean.iter().map(|&s| (s / cfg.n_runs as f64) as f32).collect(),
        frame_rate: queries.frame_rate,
    }
}

/// Frames with probability strictly above `h` become positive; maximal runs
/// of consecutive positive frames merge into one event with the mean
/// probability as its score.
pub fn threshold_and_merge(track: &ProbabilityTrack, h: f64) -> Vec<DetectionEvent> {
    let mut events = Vec::new();
    let mut run_start: Option<usize> = None;
    let mut run_sum = 0.0f64;
    let fr = track.frame_rate;
    for (i, &p) in track.probs.iter().enumerate() {
        if (p as f64) > h {
            if run_start.is_none() {
                run_start = Some(i);
                run_sum = 0.0;
            }
            run_sum += p as f64;
        } else if let Some(s) = run_start.take() {
            events.push(frame_run_to_event(track.start_frame, s, i, run_sum, fr));
        }
    }
    if let Some(s) = run_start {
        events.push(frame_run_to_event(
            track.start_frame,
            s,
            track.probs.len(),
            run_sum,
            fr,
        ));
    }
    events
}

fn frame_run_to_event(
    track_start: usize,
    run_start: usize,
    run_end: usize,
    run_sum: f64,
    frame_rate: f64,
) -> DetectionEvent {
    DetectionEvent {
        onset: (track_start + run_start) as f64 / frame_rate,
        offset: (track_start + run_end) as f64 / frame_rate,
        score: (run_sum / (run_end - run_start) as f64) as f32,
    }
}

/// Keeps events whose duration lies in `[alpha*t_max, beta*t_max]`
/// (boundary-inclusive).
pub fn post_filter(events: &[DetectionEvent], t_max: f64, alpha: f64, beta: f64) -> Vec<DetectionEvent> {
    assert!(alpha < beta, "post filter needs alpha < beta");
    events
        .iter()
        .filter(|ev| {
            let dur = ev.offset - ev.onset;
            dur >= alpha * t_max - 1e-12 && dur <= beta * t_max + 1e-12
        })
        .cloned()
        .collect()
}

/// Full per-file detection: context, grid, ensemble probabilities,
/// threshold-merge, duration filter.
pub fn detect_file(
    encoder: &Encoder<f32>,
    map: &FeatureMap,
    path: &Path,
    entry: &FileEntry,
    cfg: &EvalConfig,
) -> Result<Vec<DetectionEvent>> {
    cfg.validate()?;
    let context = build_context(path, entry, cfg.k_shots)?;
    let queries = compute_file_queries(encoder, map, &context);
    let mut rng = file_rng(cfg.seed, path);
    let track = ensemble_runs(encoder, map, &context, &queries, cfg, &mut rng);
    let merged = threshold_and_merge(&track, cfg.threshold);
    let events = if cfg.post_filter {
        post_filter(&merged, context.t_max, cfg.alpha, cfg.beta)
    } else {
        merged
    };
    debug_assert!(events
        .iter()
        .all(|e| e.onset >= context.prediction_start - 1e-9));
    Ok(events)
}
