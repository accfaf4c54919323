//! Episodic training: lr schedule, transductive pseudo-classes built from
//! the labeled prefix of evaluation files, class-balanced episode sampling,
//! per-epoch validation, and patience-based early stopping.

use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{DatasetIndex, PoolRole, PoolSource, RegionRef};
use crate::encoder::{load_checkpoint, save_checkpoint, Encoder, EncoderConfig};
use crate::error::{Error, Result};
use crate::features::FeatureStore;
use crate::fewshot::{prototype_loss, sample_episode, sample_episode_mixed, Episode, EpisodeSpec};
use crate::nn::Adam;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr: f64,
    pub lr_decay: f64,
    pub lr_decay_every_epochs: usize,
    pub episodes_per_epoch: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub val_episodes: usize,
    pub val_n_way: usize,
    pub val_m_shot: usize,
    pub seed: u64,
    pub use_negative_contrast: bool,
    pub use_transductive: bool,
    /// Number of labeled events per evaluation file used for pseudo-classes.
    pub transductive_k: usize,
    pub episode: EpisodeSpec,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 0.001,
            lr_decay: 0.65,
            lr_decay_every_epochs: 10,
            episodes_per_epoch: 200,
            max_epochs: 100,
            patience: 10,
            val_episodes: 100,
            val_n_way: 3,
            val_m_shot: 5,
            seed: 1,
            use_negative_contrast: true,
            use_transductive: true,
            transductive_k: 5,
            episode: EpisodeSpec::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patience < 1
            || !(self.lr_decay > 0.0 && self.lr_decay <= 1.0)
            || self.lr <= 0.0
            || self.episodes_per_epoch == 0
            || self.max_epochs == 0
        {
            return Err(Error::Config(format!("invalid train config: {self:?}")));
        }
        self.episode.validate()
    }

    pub fn lr_for_epoch(&self, epoch: usize) -> f64 {
        let steps = (epoch - 1) / self.lr_decay_every_epochs;
        self.lr * self.lr_decay.powi(steps as i32)
    }
}

/// One row of the training log CSV.
#[derive(Debug, Clone)]
pub struct EpochRow {
    pub epoch: usize,
    pub lr: f64,
    pub mean_loss: f64,
    pub val_accuracy: f64,
    /// Segments drawn from evaluation-pool pseudo-classes this epoch.
    pub eval_pool_segments: usize,
    pub seconds: f64,
}

#[derive(Debug, Clone, Default)]
pub struct TrainLog {
    pub rows: Vec<EpochRow>,
    pub episode_losses: Vec<f64>,
    pub best_epoch: usize,
    pub best_val_accuracy: f64,
    /// Episode provenance: (epoch, class id, pool source) per sampled class.
    pub provenance: Vec<(usize, String, PoolSource)>,
}

impl TrainLog {
    pub fn total_eval_pool_segments(&self) -> usize {
        self.rows.iter().map(|r| r.eval_pool_segments).sum()
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut text = String::from("epoch,lr,mean_loss,val_accuracy,eval_pool_segments,seconds\n");
        for r in &self.rows {
            text.push_str(&format!(
                "{},{:.8},{:.6},{:.4},{},{:.2}\n",
                r.epoch, r.lr, r.mean_loss, r.val_accuracy, r.eval_pool_segments, r.seconds
            ));
        }
        std::fs::write(path, text)?;
        Ok(())
    }
}

/// Builds one pseudo-class per evaluation subfolder from the first `k`
/// labeled events of each file; the `k` gaps before those events within the
/// labeled prefix become the negative material. Files with fewer than `k`
/// labeled events are excluded with a diagnostic.
pub fn build_transductive_classes(eval_index: &DatasetIndex, k: usize) -> DatasetIndex {
    let mut out = DatasetIndex {
        role: PoolRole::Train,
        regions_by_class: Default::default(),
        files: Default::default(),
    };
    for (path, entry) in &eval_index.files {
        let positives: Vec<&crate::corpus::LabeledRegion> = entry
            .annotations
            .iter()
            .filter(|r| r.polarity == crate::corpus::Polarity::Positive)
            .collect();
        if positives.len() < k {
            log::warn!(
                "{}: only {} labeled events (< {k}), excluded from transductive pool",
                path.display(),
                positives.len()
            );
            continue;
        }
        let first_k = &positives[..k];
        let class = out
            .regions_by_class
            .entry(entry.subfolder.clone())
            .or_insert_with(|| crate::corpus::ClassRegions {
                source: Some(PoolSource::Transductive),
                ..Default::default()
            });
        let mut prev_end = 0.0f64;
        for region in first_k {
            class.positives.push(RegionRef {
                file: path.clone(),
                onset: region.onset,
                offset: region.offset,
            });
            if region.onset > prev_end {
                class.negatives.push(RegionRef {
                    file: path.clone(),
                    onset: prev_end,
                    offset: region.onset,
                });
            }
            prev_end = region.offset;
        }
        out.files.insert(path.clone(), entry.clone());
    }
    out
}

/// Episode accuracy of `encoder` (eval mode) over `n_episodes` fixed-seed
/// episodes on the validation pool, fixed-length segments.
pub fn validate(
    encoder: &mut Encoder<f32>,
    val_index: &DatasetIndex,
    store: &FeatureStore,
    spec: &EpisodeSpec,
    use_negatives: bool,
    n_episodes: usize,
    seed: u64,
) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut total = 0.0f64;
    for _ in 0..n_episodes {
        let episode = sample_episode(val_index, store, spec, &mut rng)?;
        let batch = episode.batch(use_negatives);
        let embeddings = encoder.forward(&batch, false);
        let outcome = prototype_loss(
            &embeddings,
            episode.n_way(),
            episode.m_shot(),
            use_negatives,
            false,
        );
        total += outcome.accuracy;
    }
    Ok(total / n_episodes as f64)
}

pub struct TrainOutcome {
    pub encoder: Encoder<f32>,
    pub log: TrainLog,
    pub best_checkpoint: PathBuf,
}

/// Runs the full training loop and returns the checkpoint with the best
/// validation accuracy (ties resolved to the earliest epoch).
#[allow(clippy::too_many_arguments)]
pub fn train(
    train_index: &DatasetIndex,
    val_index: &DatasetIndex,
    eval_index: Option<&DatasetIndex>,
    aux_index: Option<&DatasetIndex>,
    store: &FeatureStore,
    encoder_config: EncoderConfig,
    config: &TrainConfig,
    out_dir: &Path,
    start_epoch: usize,
    mut encoder: Option<Encoder<f32>>,
) -> Result<TrainOutcome> {
    config.validate()?;
    encoder_config.validate()?;
    std::fs::create_dir_all(out_dir)?;
    let best_path = out_dir.join("best.ckpt");

    // Pool assembly: training classes, plus evaluation pseudo-classes when
    // transductive inference is on.
    let mut pool = train_index.clone();
    pool.tag_source(PoolSource::Train);
    if config.use_transductive {
        if let Some(eval) = eval_index {
            let pseudo = build_transductive_classes(eval, config.transductive_k);
            log::info!(
                "transductive pool: {} pseudo-classes from evaluation subfolders",
                pseudo.regions_by_class.len()
            );
            pool.merge_classes(&pseudo, PoolSource::Transductive);
        }
    }

    let mut enc = match encoder.take() {
        Some(e) => e,
        None => Encoder::new_seeded(encoder_config.clone(), config.seed),
    };
    let mut optimizer = Adam::<f32>::new();
    let mut episode_rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(0x5eed));
    let val_spec = EpisodeSpec {
        n_way: config.val_n_way,
        m_shot: config.val_m_shot,
        segment_frames: config.episode.segment_frames,
    };
    let val_seed = config.seed.wrapping_add(0xa1);

    let mut log_out = TrainLog::default();
    let mut best_acc = f64::NEG_INFINITY;
    let mut best_epoch = 0usize;
    let mut epochs_since_best = 0usize;

    for epoch in start_epoch..start_epoch + config.max_epochs {
        let epoch_start = Instant::now();
        let lr = config.lr_for_epoch(epoch) as f32;
        let mut loss_sum = 0.0f64;
        let mut eval_pool_segments = 0usize;

        for _ in 0..config.episodes_per_epoch {
            let episode = match aux_index {
                Some(aux) => {
                    sample_episode_mixed(&pool, aux, store, &config.episode, &mut episode_rng)?
                }
                None => sample_episode(&pool, store, &config.episode, &mut episode_rng)?,
            };
            let segments_per_class =
                episode.m_shot() * if config.use_negative_contrast { 3 } else { 2 };
            for class in &episode.classes {
                log_out
                    .provenance
                    .push((epoch, class.class_id.clone(), class.source));
                if class.source == PoolSource::Transductive {
                    eval_pool_segments += segments_per_class;
                }
            }

            let loss = train_step(&mut enc, &mut optimizer, &episode, config, lr)?;
            loss_sum += loss;
            log_out.episode_losses.push(loss);
        }

        let val_accuracy = validate(
            &mut enc,
            val_index,
            store,
            &val_spec,
            config.use_negative_contrast,
            config.val_episodes,
            val_seed,
        )?;

        let mean_loss = loss_sum / config.episodes_per_epoch as f64;
        log_out.rows.push(EpochRow {
            epoch,
            lr: lr as f64,
            mean_loss,
            val_accuracy,
            eval_pool_segments,
            seconds: epoch_start.elapsed().as_secs_f64(),
        });
        log::info!(
            "epoch {epoch}: lr {lr:.6} loss {mean_loss:.4} val_acc {val_accuracy:.4}"
        );

        if val_accuracy > best_acc {
            best_acc = val_accuracy;
            best_epoch = epoch;
            epochs_since_best = 0;
            save_checkpoint(&best_path, &mut enc)?;
        } else {
            epochs_since_best += 1;
            if epochs_since_best >= config.patience {
                log::info!("early stop at epoch {epoch} (best epoch {best_epoch})");
                break;
            }
        }
    }

    log_out.best_epoch = best_epoch;
    log_out.best_val_accuracy = best_acc;
    let best = load_checkpoint::<f32>(&best_path)?;
    Ok(TrainOutcome {
        encoder: best,
        log: log_out,
        best_checkpoint: best_path,
    })
}

fn train_step(
    encoder: &mut Encoder<f32>,
    optimizer: &mut Adam<f32>,
    episode: &Episode,
    config: &TrainConfig,
    lr: f32,
) -> Result<f64> {
    let use_neg = config.use_negative_contrast;
    let batch = episode.batch(use_neg);
    let embeddings = encoder.forward(&batch, true);
    let outcome = prototype_loss(
        &embeddings,
        episode.n_way(),
        episode.m_shot(),
        use_neg,
        true,
    );
    let loss = outcome.loss as f64;
    if !loss.is_finite() {
        return Err(Error::Numeric(format!(
            "non-finite training loss {loss}; aborting (last good checkpoint is retained)"
        )));
    }
    encoder.zero_grad();
    let grad = outcome.grad_embeddings.expect("gradient requested");
    encoder.backward(&grad);
    optimizer.step(encoder, lr)?;
    Ok(loss)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{generate_synthetic_corpus, index_directory, SyntheticSpec, ToneParams};
    use crate::features::FeatureConfig;

    fn small_encoder() -> EncoderConfig {
        EncoderConfig {
            block_channels: [4, 8, 4],
            adaptive_t: 2,
            adaptive_f: 4,
            ..EncoderConfig::default()
        }
    }

    fn fixture(
        n_classes: usize,
        same_tone: bool,
    ) -> (tempfile::TempDir, crate::corpus::SynthCorpus, FeatureStore) {
        let dir = tempfile::tempdir().unwrap();
        let tone_params = if same_tone {
            (0..n_classes)
                .map(|_| ToneParams {
                    fundamental_hz: 700.0,
                    am_rate_hz: 3.0,
                })
                .collect()
        } else {
            Vec::new()
        };
        let spec = SyntheticSpec {
            n_classes,
            events_per_file: 8,
            event_duration_range: (0.15, 0.35),
            file_duration: 8.0,
            files_per_class_train: 2,
            files_per_class_val: 1,
            files_per_class_eval: 1,
            seed: 9,
            tone_params,
            ..SyntheticSpec::default()
        };
        let corpus = generate_synthetic_corpus(&spec, dir.path()).unwrap();
        let mut store = FeatureStore::new();
        let fc = FeatureConfig::default();
        store.load_index(&corpus.train_index().unwrap(), &fc).unwrap();
        store.load_index(&corpus.val_index().unwrap(), &fc).unwrap();
        store.load_index(&corpus.eval_index().unwrap(), &fc).unwrap();
        (dir, corpus, store)
    }

    #[test]
    fn lr_schedule_matches_paper_bands() {
        let config = TrainConfig::default();
        for e in 1..=10 {
            assert!((config.lr_for_epoch(e) - 1e-3).abs() < 1e-12, "epoch {e}");
        }
        for e in 11..=20 {
            assert!((config.lr_for_epoch(e) - 6.5e-4).abs() < 1e-12, "epoch {e}");
        }
        assert!((config.lr_for_epoch(21) - 4.225e-4).abs() < 1e-12);
    }

    #[test]
    fn transductive_classes_from_subfolders() {
        let (_dir, corpus, _) = fixture(2, false);
        let eval = corpus.eval_index().unwrap();
        let pseudo = build_transductive_classes(&eval, 5);
        assert_eq!(pseudo.regions_by_class.len(), 2);
        for regions in pseudo.regions_by_class.values() {
            assert_eq!(regions.source, Some(PoolSource::Transductive));
            assert_eq!(regions.positives.len(), 5); // one file per class in fixture
            assert_eq!(regions.negatives.len(), 5); // the K gaps
        }
    }

    #[test]
    fn transductive_negative_chunks_are_gaps() {
        // events at [1,2], [3,4], ... -> negatives [0,1], [2,3], ...
        let dir = tempfile::tempdir().unwrap();
        let sub = dir.path().join("cls");
        std::fs::create_dir_all(&sub).unwrap();
        let clip = crate::corpus::AudioClip {
            samples: vec![0.0; 22050 * 12],
            sample_rate: 22050,
        };
        crate::corpus::write_wav(&sub.join("f.wav"), &clip).unwrap();
        let mut csv = String::from("Audiofilename,Starttime,Endtime,Q\n");
        for i in 0..5 {
            csv.push_str(&format!("f.wav,{}.0,{}.0,POS\n", 2 * i + 1, 2 * i + 2));
        }
        std::fs::write(sub.join("f.csv"), csv).unwrap();
        let eval = index_directory(dir.path(), PoolRole::Evaluation).unwrap();
        let pseudo = build_transductive_classes(&eval, 5);
        let regions = &pseudo.regions_by_class["cls"];
        let gaps: Vec<(f64, f64)> = regions.negatives.iter().map(|r| (r.onset, r.offset)).collect();
        assert_eq!(
            gaps,
            vec![(0.0, 1.0), (2.0, 3.0), (4.0, 5.0), (6.0, 7.0), (8.0, 9.0)]
        );
    }

    #[test]
    fn files_with_too_few_labels_are_excluded() {
        let (_dir, corpus, _) = fixture(2, false);
        let eval = corpus.eval_index().unwrap();
        // fixture files have 8 events; asking for 9 excludes everything
        let pseudo = build_transductive_classes(&eval, 9);
        assert!(pseudo.regions_by_class.is_empty());
    }

    #[test]
    fn untrained_model_on_featureless_classes_is_chance_level() {
        // pure-noise files with arbitrary POS labels: positive and negative
        // segments share one distribution, so all 2N prototype columns are
        // exchangeable and argmin is chance over 6 columns
        use rand::{Rng, SeedableRng};
        let dir = tempfile::tempdir().unwrap();
        let sub = dir.path().join("noise");
        std::fs::create_dir_all(&sub).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4242);
        for class in 0..3 {
            let samples: Vec<f32> = (0..22050 * 16).map(|_| rng.gen_range(-0.1..0.1)).collect();
            let clip = crate::corpus::AudioClip {
                samples,
                sample_rate: 22050,
            };
            let stem = format!("n{class}");
            crate::corpus::write_wav(&sub.join(format!("{stem}.wav")), &clip).unwrap();
            let mut csv = format!("Audiofilename,Starttime,Endtime,class_{class:02}\n");
            for e in 0..24 {
                let onset = 0.3 + e as f64 * 0.65;
                csv.push_str(&format!("{stem}.wav,{onset:.6},{:.6},POS\n", onset + 0.2));
            }
            std::fs::write(sub.join(format!("{stem}.csv")), csv).unwrap();
        }
        let val = index_directory(dir.path(), PoolRole::Validation).unwrap();
        let mut store = FeatureStore::new();
        store.load_index(&val, &FeatureConfig::default()).unwrap();
        let mut enc = Encoder::<f32>::new_seeded(small_encoder(), 1234);
        let spec = EpisodeSpec {
            n_way: 3,
            m_shot: 5,
            segment_frames: 17,
        };
        let acc = validate(&mut enc, &val, &store, &spec, true, 100, 42).unwrap();
        assert!(
            (acc - 1.0 / 6.0).abs() <= 0.1,
            "chance-level accuracy was {acc}"
        );
    }

    #[test]
    fn validation_is_deterministic() {
        let (_dir, corpus, store) = fixture(3, false);
        let val = corpus.val_index().unwrap();
        let mut enc = Encoder::<f32>::new_seeded(small_encoder(), 7);
        let spec = EpisodeSpec {
            n_way: 3,
            m_shot: 2,
            segment_frames: 17,
        };
        let a = validate(&mut enc, &val, &store, &spec, true, 20, 99).unwrap();
        let b = validate(&mut enc, &val, &store, &spec, true, 20, 99).unwrap();
        assert_eq!(a, b);
    }

    fn quick_train_config() -> TrainConfig {
        TrainConfig {
            episodes_per_epoch: 8,
            max_epochs: 3,
            patience: 2,
            val_episodes: 6,
            val_n_way: 3,
            val_m_shot: 2,
            episode: EpisodeSpec {
                n_way: 3,
                m_shot: 2,
                segment_frames: 17,
            },
            ..TrainConfig::default()
        }
    }

    #[test]
    fn transductive_off_never_touches_eval_pool() {
        let (_dir, corpus, store) = fixture(3, false);
        let out = tempfile::tempdir().unwrap();
        let config = TrainConfig {
            use_transductive: false,
            ..quick_train_config()
        };
        let outcome = train(
            &corpus.train_index().unwrap(),
            &corpus.val_index().unwrap(),
            Some(&corpus.eval_index().unwrap()),
            None,
            &store,
            small_encoder(),
            &config,
            out.path(),
            1,
            None,
        )
        .unwrap();
        assert_eq!(outcome.log.total_eval_pool_segments(), 0);
        assert!(outcome
            .log
            .provenance
            .iter()
            .all(|(_, _, src)| *src != PoolSource::Transductive));
    }

    #[test]
    fn transductive_on_uses_pseudo_classes() {
        let (_dir, corpus, store) = fixture(3, false);
        let out = tempfile::tempdir().unwrap();
        let config = TrainConfig {
            use_transductive: true,
            transductive_k: 5,
            ..quick_train_config()
        };
        let outcome = train(
            &corpus.train_index().unwrap(),
            &corpus.val_index().unwrap(),
            Some(&corpus.eval_index().unwrap()),
            None,
            &store,
            small_encoder(),
            &config,
            out.path(),
            1,
            None,
        )
        .unwrap();
        assert!(outcome.log.total_eval_pool_segments() > 0);
        assert!(outcome
            .log
            .provenance
            .iter()
            .any(|(_, _, src)| *src == PoolSource::Transductive));
    }

    #[test]
    fn training_loss_trends_downward() {
        let (_dir, corpus, store) = fixture(3, false);
        let out = tempfile::tempdir().unwrap();
        let config = TrainConfig {
            episodes_per_epoch: 40,
            max_epochs: 5,
            patience: 5,
            val_episodes: 4,
            ..quick_train_config()
        };
        let outcome = train(
            &corpus.train_index().unwrap(),
            &corpus.val_index().unwrap(),
            None,
            None,
            &store,
            small_encoder(),
            &config,
            out.path(),
            1,
            None,
        )
        .unwrap();
        let losses: Vec<f64> = outcome.log.episode_losses.iter().take(200).cloned().collect();
        assert!(losses.len() >= 100);
        // least-squares slope over episode index
        let n = losses.len() as f64;
        let mean_x = (losses.len() as f64 - 1.0) / 2.0;
        let mean_y = losses.iter().sum::<f64>() / n;
        let mut num = 0.0;
        let mut den = 0.0;
        for (i, &y) in losses.iter().enumerate() {
            num += (i as f64 - mean_x) * (y - mean_y);
            den += (i as f64 - mean_x) * (i as f64 - mean_x);
        }
        let slope = num / den;
        assert!(slope < 0.0, "loss slope {slope}");
    }

    #[test]
    fn early_stopping_and_best_checkpoint() {
        let (_dir, corpus, store) = fixture(3, false);
        let out = tempfile::tempdir().unwrap();
        let config = TrainConfig {
            max_epochs: 30,
            patience: 2,
            ..quick_train_config()
        };
        let outcome = train(
            &corpus.train_index().unwrap(),
            &corpus.val_index().unwrap(),
            None,
            None,
            &store,
            small_encoder(),
            &config,
            out.path(),
            1,
            None,
        )
        .unwrap();
        let rows = &outcome.log.rows;
        // stopped within patience epochs of the best epoch
        let last = rows.last().unwrap().epoch;
        assert!(last <= outcome.log.best_epoch + config.patience);
        // best row has the max accuracy, earliest on ties
        let best_row = rows
            .iter()
            .find(|r| r.epoch == outcome.log.best_epoch)
            .unwrap();
        for r in rows.iter() {
            assert!(r.val_accuracy <= best_row.val_accuracy + 1e-12);
            if (r.val_accuracy - best_row.val_accuracy).abs() < 1e-12 {
                assert!(best_row.epoch <= r.epoch);
            }
        }
        assert!(outcome.best_checkpoint.is_file());
    }
}
