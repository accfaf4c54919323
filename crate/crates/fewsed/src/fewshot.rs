//! Episodic sampling and the segment-level metric-learning objective:
//! prototypes, the query-to-support distance matrix over positive and
//! negative prototypes, and the episode loss.

use ndarray::{Array1, Array2, Array3, Array4, Axis};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{DatasetIndex, PoolSource, RegionRef};
use crate::error::{Error, Result};
use crate::features::{FeatureMap, FeatureStore};
use crate::nn::Scalar;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EpisodeSpec {
    pub n_way: usize,
    pub m_shot: usize,
    /// Segment length in feature frames (0.2 s at 86.13 fps is 17 frames).
    pub segment_frames: usize,
}

impl Default for EpisodeSpec {
    fn default() -> Self {
        EpisodeSpec {
            n_way: 5,
            m_shot: 5,
            segment_frames: 17,
        }
    }
}

impl EpisodeSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_way < 2 || self.m_shot < 1 || self.segment_frames < 8 {
            return Err(Error::Config(format!(
                "episode spec needs n_way >= 2, m_shot >= 1, segment_frames >= 8: {self:?}"
            )));
        }
        Ok(())
    }
}

/// One class's worth of episode material.
#[derive(Debug, Clone)]
pub struct EpisodeClass {
    pub class_id: String,
    pub source: PoolSource,
    /// M positive support segments, each `(channels, frames, freq)`.
    pub support: Vec<Array3<f32>>,
    /// M positive query segments.
    pub query: Vec<Array3<f32>>,
    /// M negative support segments.
    pub negative: Vec<Array3<f32>>,
}

#[derive(Debug, Clone)]
pub struct Episode {
    pub classes: Vec<EpisodeClass>,
    pub segment_frames: usize,
}

impl Episode {
    pub fn n_way(&self) -> usize {
        self.classes.len()
    }
    pub fn m_shot(&self) -> usize {
        self.classes.first().map(|c| c.support.len()).unwrap_or(0)
    }

    /// Stacks segments into one batch ordered
    /// `[support (N*M), query (N*M), negatives (N*M)]`. Negatives are
    /// omitted when `use_negatives` is false.
    pub fn batch(&self, use_negatives: bool) -> Array4<f32> {
        let n = self.n_way();
        let m = self.m_shot();
        let (c, t, f) = self.classes[0].support[0].dim();
        let groups = if use_negatives { 3 } else { 2 };
        let mut out = Array4::<f32>::zeros((groups * n * m, c, t, f));
        let mut row = 0;
        let mut put = |seg: &Array3<f32>, row: &mut usize| {
            out.index_axis_mut(Axis(0), *row).assign(seg);
            *row += 1;
        };
        for class in &self.classes {
            for seg in &class.support {
                put(seg, &mut row);
            }
        }
        for class in &self.classes {
            for seg in &class.query {
                put(seg, &mut row);
            }
        }
        if use_negatives {
            for class in &self.classes {
                for seg in &class.negative {
                    put(seg, &mut row);
                }
            }
        }
        out
    }
}

/// Cuts a segment of `segment_frames` frames from a labeled region, random
/// start within the region, zero-padded on the right when the event is
/// shorter than the segment.
pub fn crop_segment(
    map: &FeatureMap,
    region: &RegionRef,
    segment_frames: usize,
    rng: &mut ChaCha8Rng,
) -> (Array3<f32>, usize) {
    let total = map.frames();
    let onset = map.secs_to_frame(region.onset).min(total.saturating_sub(1));
    let offset = map.secs_to_frame(region.offset).clamp(onset + 1, total);
    let span = offset - onset;
    let start = if span > segment_frames {
        onset + rng.gen_range(0..=(span - segment_frames))
    } else {
        onset
    };
    let take = segment_frames.min(total - start).min(span.max(1));
    let (c, _, f) = map.values.dim();
    let mut seg = Array3::<f32>::zeros((c, segment_frames, f));
    seg.slice_mut(ndarray::s![.., ..take, ..])
        .assign(&map.values.slice(ndarray::s![.., start..start + take, ..]));
    (seg, start)
}

fn pick_region<'a>(regions: &'a [RegionRef], rng: &mut ChaCha8Rng) -> &'a RegionRef {
    &regions[rng.gen_range(0..regions.len())]
}

struct Crop {
    file: std::path::PathBuf,
    start: usize,
    segment: Array3<f32>,
}

fn crop_from(
    index_regions: &[RegionRef],
    store: &FeatureStore,
    segment_frames: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Crop> {
    let region = pick_region(index_regions, rng);
    let map = store
        .get(&region.file)
        .ok_or_else(|| Error::Data(format!("no features for {}", region.file.display())))?;
    let (segment, start) = crop_segment(map, region, segment_frames, rng);
    Ok(Crop {
        file: region.file.clone(),
        start,
        segment,
    })
}

fn overlaps(a: &Crop, b: &Crop, frames: usize) -> bool {
    a.file == b.file && a.start < b.start + frames && b.start < a.start + frames
}

/// Samples one N-way-M-shot episode. Classes are drawn uniformly without
/// replacement; positive segments are random-start crops within positive
/// regions; query crops avoid support crops when the class has enough
/// material; negatives come from the class's negative regions (global pool
/// as a logged fallback).
pub fn sample_episode(
    index: &DatasetIndex,
    store: &FeatureStore,
    spec: &EpisodeSpec,
    rng: &mut ChaCha8Rng,
) -> Result<Episode> {
    spec.validate()?;
    let classes = index.classes();
    if classes.len() < spec.n_way {
        return Err(Error::Data(format!(
            "need {} classes for a {}-way episode, pool has {}",
            spec.n_way,
            spec.n_way,
            classes.len()
        )));
    }
    let chosen = rand::seq::index::sample(rng, classes.len(), spec.n_way);
    let picked: Vec<String> = chosen.iter().map(|i| classes[i].clone()).collect();
    build_episode(index, &picked, store, spec, rng)
}

/// Mixed-pool episode: `ceil(N/2)` classes from `main`, `floor(N/2)` from
/// `aux`, mirroring the half-per-dataset training protocol.
pub fn sample_episode_mixed(
    main: &DatasetIndex,
    aux: &DatasetIndex,
    store: &FeatureStore,
    spec: &EpisodeSpec,
    rng: &mut ChaCha8Rng,
) -> Result<Episode> {
    spec.validate()?;
    let n_main = spec.n_way.div_ceil(2);
    let n_aux = spec.n_way / 2;
    let main_classes = main.classes();
    let aux_classes = aux.classes();
    if main_classes.len() < n_main || aux_classes.len() < n_aux {
        return Err(Error::Data(format!(
            "mixed episode needs {n_main}+{n_aux} classes, pools have {}+{}",
            main_classes.len(),
            aux_classes.len()
        )));
    }
    let mut picked: Vec<(String, &DatasetIndex)> = Vec::new();
    for i in rand::seq::index::sample(rng, main_classes.len(), n_main).iter() {
        picked.push((main_classes[i].clone(), main));
    }
    for i in rand::seq::index::sample(rng, aux_classes.len(), n_aux).iter() {
        picked.push((aux_classes[i].clone(), aux));
    }

    let mut episode_classes = Vec::with_capacity(spec.n_way);
    for (class_id, idx) in picked {
        episode_classes.push(build_class(idx, &class_id, store, spec, rng)?);
    }
    Ok(Episode {
        classes: episode_classes,
        segment_frames: spec.segment_frames,
    })
}

fn build_episode(
    index: &DatasetIndex,
    picked: &[String],
    store: &FeatureStore,
    spec: &EpisodeSpec,
    rng: &mut ChaCha8Rng,
) -> Result<Episode> {
    let mut episode_classes = Vec::with_capacity(picked.len());
    for class_id in picked {
        episode_classes.push(build_class(index, class_id, store, spec, rng)?);
    }
    Ok(Episode {
        classes: episode_classes,
        segment_frames: spec.segment_frames,
    })
}

fn build_class(
    index: &DatasetIndex,
    class_id: &str,
    store: &FeatureStore,
    spec: &EpisodeSpec,
    rng: &mut ChaCha8Rng,
) -> Result<EpisodeClass> {
    let regions = index
        .regions_by_class
        .get(class_id)
        .ok_or_else(|| Error::Data(format!("unknown class {class_id}")))?;
    if regions.positives.is_empty() {
        return Err(Error::Data(format!("class {class_id} has no positive regions")));
    }

    let mut support = Vec::with_capacity(spec.m_shot);
    for _ in 0..spec.m_shot {
        support.push(crop_from(&regions.positives, store, spec.segment_frames, rng)?);
    }
    // Queries avoid overlapping supports when possible (10 retries).
    let mut query = Vec::with_capacity(spec.m_shot);
    for _ in 0..spec.m_shot {
        let mut chosen = None;
        for _attempt in 0..10 {
            let candidate = crop_from(&regions.positives, store, spec.segment_frames, rng)?;
            if !support.iter().any(|s| overlaps(s, &candidate, spec.segment_frames)) {
                chosen = Some(candidate);
                break;
            }
        }
        let crop = match chosen {
            Some(c) => c,
            None => crop_from(&regions.positives, store, spec.segment_frames, rng)?,
        };
        query.push(crop);
    }

    let negative_pool;
    let negatives_src = if regions.negatives.is_empty() {
        log::warn!(
            "class {class_id} has no negative material; drawing from the global negative pool"
        );
        negative_pool = index.global_negative_pool();
        if negative_pool.is_empty() {
            return Err(Error::Data(format!(
                "no negative material anywhere for class {class_id}"
            )));
        }
        &negative_pool
    } else {
        &regions.negatives
    };
    let mut negative = Vec::with_capacity(spec.m_shot);
    for _ in 0..spec.m_shot {
        negative.push(crop_from(negatives_src, store, spec.segment_frames, rng)?);
    }

    Ok(EpisodeClass {
        class_id: class_id.to_string(),
        source: regions.source.unwrap_or(PoolSource::Train),
        support: support.into_iter().map(|c| c.segment).collect(),
        query: query.into_iter().map(|c| c.segment).collect(),
        negative: negative.into_iter().map(|c| c.segment).collect(),
    })
}

// ---------------------------------------------------------------------------
// Prototypes, distances, loss
// ---------------------------------------------------------------------------

/// Coordinate-wise mean of a group of embeddings (rows).
pub fn compute_prototype<T: Scalar>(embeddings: &Array2<T>) -> Array1<T> {
    let m = embeddings.nrows();
    assert!(m >= 1, "prototype of an empty group");
    let mut proto = Array1::<T>::zeros(embeddings.ncols());
    for row in embeddings.rows() {
        proto += &row;
    }
    proto.mapv_inplace(|v| v / T::from_f64(m as f64));
    proto
}

/// Query-to-support distance matrix. With negatives the layout is
/// `d[i, 2j]` = distance to the positive prototype of class `j` and
/// `d[i, 2j+1]` = distance to the negative prototype of class `j`; without
/// negatives it is simply `d[i, j]` over positive prototypes.
pub fn distance_matrix<T: Scalar>(
    query: &Array2<T>,
    support_pos: &Array2<T>,
    support_neg: Option<&Array2<T>>,
) -> Array2<T> {
    let n = query.nrows();
    assert_eq!(support_pos.nrows(), n);
    if let Some(neg) = support_neg {
        assert_eq!(neg.nrows(), n);
    }
    let cols = if support_neg.is_some() { 2 * n } else { n };
    let mut d = Array2::<T>::zeros((n, cols));
    for i in 0..n {
        let q = query.row(i);
        for j in 0..n {
            let dp = euclidean(&q, &support_pos.row(j));
            match support_neg {
                Some(neg) => {
                    d[[i, 2 * j]] = dp;
                    d[[i, 2 * j + 1]] = euclidean(&q, &neg.row(j));
                }
                None => d[[i, j]] = dp,
            }
        }
    }
    d
}

fn euclidean<T: Scalar>(a: &ndarray::ArrayView1<'_, T>, b: &ndarray::ArrayView1<'_, T>) -> T {
    let mut acc = T::zero();
    for (&x, &y) in a.iter().zip(b.iter()) {
        let diff = x - y;
        acc = acc + diff * diff;
    }
    acc.sqrt()
}

/// Target column for row `i`: the positive prototype of the same class.
pub fn target_column(i: usize, with_negatives: bool) -> usize {
    if with_negatives {
        2 * i
    } else {
        i
    }
}

/// Episode objective: softmax over negated distances per query row,
/// negative log-likelihood of the matching positive prototype, averaged
/// over rows. Also returns the per-row class probabilities.
pub fn episode_loss<T: Scalar>(d: &Array2<T>, with_negatives: bool) -> (T, Array2<T>) {
    let (n, cols) = d.dim();
    let mut probs = Array2::<T>::zeros((n, cols));
    let mut loss = T::zero();
    for i in 0..n {
        // stable softmax of -d: subtract max(-d) = -min(d)
        let min_d = d.row(i).iter().cloned().fold(T::infinity(), |a, b| a.min(b));
        let mut denom = T::zero();
        for c in 0..cols {
            let e = (min_d - d[[i, c]]).exp();
            probs[[i, c]] = e;
            denom = denom + e;
        }
        for c in 0..cols {
            probs[[i, c]] = probs[[i, c]] / denom;
        }
        let t = target_column(i, with_negatives);
        // log p = (min_d - d_t) - ln denom
        let log_p = (min_d - d[[i, t]]) - denom.ln();
        loss = loss - log_p;
    }
    (loss / T::from_f64(n as f64), probs)
}

/// Gradient of [`episode_loss`] w.r.t. the distance matrix.
pub fn episode_loss_backward<T: Scalar>(probs: &Array2<T>, with_negatives: bool) -> Array2<T> {
    let (n, cols) = probs.dim();
    let inv_n = T::one() / T::from_f64(n as f64);
    let mut grad = Array2::<T>::zeros((n, cols));
    for i in 0..n {
        let t = target_column(i, with_negatives);
        for c in 0..cols {
            let indicator = if c == t { T::one() } else { T::zero() };
            // dL/dd = (1/N) (indicator - p)
            grad[[i, c]] = inv_n * (indicator - probs[[i, c]]);
        }
    }
    grad
}

/// Fraction of query rows whose nearest prototype is their own positive one.
pub fn episode_accuracy<T: Scalar>(d: &Array2<T>, with_negatives: bool) -> f64 {
    let (n, cols) = d.dim();
    let mut correct = 0usize;
    for i in 0..n {
        let mut best = 0usize;
        for c in 1..cols {
            if d[[i, c]] < d[[i, best]] {
                best = c;
            }
        }
        if best == target_column(i, with_negatives) {
            correct += 1;
        }
    }
    correct as f64 / n as f64
}

/// Loss, accuracy, and (optionally) the gradient w.r.t. the embeddings for a
/// batch laid out as `[support (N*M), query (N*M), negatives (N*M)]`.
pub struct ProtoOutcome<T: Scalar> {
    pub loss: T,
    pub accuracy: f64,
    pub grad_embeddings: Option<Array2<T>>,
}

pub fn prototype_loss<T: Scalar>(
    embeddings: &Array2<T>,
    n_way: usize,
    m_shot: usize,
    use_negatives: bool,
    want_grad: bool,
) -> ProtoOutcome<T> {
    let groups = if use_negatives { 3 } else { 2 };
    let rows = embeddings.nrows();
    let dim = embeddings.ncols();
    assert_eq!(rows, groups * n_way * m_shot, "batch layout mismatch");

    let proto_of = |offset: usize, class: usize| -> Array1<T> {
        let start = offset + class * m_shot;
        compute_prototype(&embeddings.slice(ndarray::s![start..start + m_shot, ..]).to_owned())
    };
    let mut support = Array2::<T>::zeros((n_way, dim));
    let mut query = Array2::<T>::zeros((n_way, dim));
    let mut negative = Array2::<T>::zeros((n_way, dim));
    for i in 0..n_way {
        support.row_mut(i).assign(&proto_of(0, i));
        query.row_mut(i).assign(&proto_of(n_way * m_shot, i));
        if use_negatives {
            negative.row_mut(i).assign(&proto_of(2 * n_way * m_shot, i));
        }
    }
    let neg_ref = if use_negatives { Some(&negative) } else { None };
    let d = distance_matrix(&query, &support, neg_ref);
    let (loss, probs) = episode_loss(&d, use_negatives);
    let accuracy = episode_accuracy(&d, use_negatives);

    let grad_embeddings = want_grad.then(|| {
        let grad_d = episode_loss_backward(&probs, use_negatives);
        let mut grad_q = Array2::<T>::zeros((n_way, dim));
        let mut grad_s = Array2::<T>::zeros((n_way, dim));
        let mut grad_n = Array2::<T>::zeros((n_way, dim));
        let tiny = T::from_f64(1e-12);
        for i in 0..n_way {
            for j in 0..n_way {
                let cols: &[(usize, bool)] = if use_negatives {
                    &[(2 * j, false), (2 * j + 1, true)]
                } else {
                    &[(j, false)]
                };
                for &(c, is_neg) in cols {
                    let g = grad_d[[i, c]];
                    if g == T::zero() {
                        continue;
                    }
                    let denom = d[[i, c]].max(tiny);
                    let proto = if is_neg { negative.row(j) } else { support.row(j) };
                    for k in 0..dim {
                        let unit = (query[[i, k]] - proto[k]) / denom;
                        grad_q[[i, k]] = grad_q[[i, k]] + g * unit;
                        if is_neg {
                            grad_n[[j, k]] = grad_n[[j, k]] - g * unit;
                        } else {
                            grad_s[[j, k]] = grad_s[[j, k]] - g * unit;
                        }
                    }
                }
            }
        }
        // prototypes are means: distribute over the M member embeddings
        let inv_m = T::one() / T::from_f64(m_shot as f64);
        let mut grad = Array2::<T>::zeros((rows, dim));
        for i in 0..n_way {
            for s in 0..m_shot {
                for k in 0..dim {
                    grad[[i * m_shot + s, k]] = grad_s[[i, k]] * inv_m;
                    grad[[n_way * m_shot + i * m_shot + s, k]] = grad_q[[i, k]] * inv_m;
                    if use_negatives {
                        grad[[2 * n_way * m_shot + i * m_shot + s, k]] = grad_n[[i, k]] * inv_m;
                    }
                }
            }
        }
        grad
    });

    ProtoOutcome {
        loss,
        accuracy,
        grad_embeddings,
    }
}
