use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use fewsed::config::RunConfig;
use fewsed::corpus::{
    generate_synthetic_corpus, index_directory, read_detections_csv, write_detections_csv,
    DetectionEvent, PoolRole, PoolSource,
};
use fewsed::encoder::load_checkpoint;
use fewsed::error::Error;
use fewsed::evaluator::build_context;
use fewsed::features::{FeatureMode, FeatureStore};
use fewsed::metrics::{
    class_rates, compute_tracks, detections_at, emit_psd_roc_csv, f_measure, match_events, psds,
    sweep_operating_points, write_scores_csv, ConfusionCounts, RocPoint,
};
use fewsed::trainer::train;

#[derive(Parser)]
#[command(
    name = "fewsed",
    about = "Segment-level few-shot bioacoustic sound event detection",
    version
)]
struct Cli {
    /// TOML run config; built-in defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Worker threads (also FEWSED_THREADS); default: all cores.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic train/val/eval corpus.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        n_classes: Option<usize>,
        #[arg(long)]
        files_per_class: Option<usize>,
        #[arg(long)]
        file_duration: Option<f64>,
        #[arg(long)]
        events_per_file: Option<usize>,
    },
    /// Train on a corpus directory (train/ val/ eval/ layout).
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Drop the negative-prototype columns from the episode objective.
        #[arg(long)]
        no_negative_contrast: bool,
        /// Train on the labeled training classes only.
        #[arg(long)]
        no_transductive: bool,
        /// pcen_delta | pcen | delta | logmel | logmel_delta
        #[arg(long)]
        feature_mode: Option<String>,
        /// Adaptive-pool frequency size (8 -> 2048-dim embeddings).
        #[arg(long)]
        embedding_f: Option<usize>,
        #[arg(long)]
        n_way: Option<usize>,
        #[arg(long)]
        m_shot: Option<usize>,
        #[arg(long)]
        episodes_per_epoch: Option<usize>,
        #[arg(long)]
        max_epochs: Option<usize>,
        #[arg(long)]
        patience: Option<usize>,
        #[arg(long)]
        val_episodes: Option<usize>,
        /// Second training corpus mixed half-and-half per episode.
        #[arg(long)]
        aux_data: Option<PathBuf>,
        /// Continue from an existing checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Detect events on the evaluation split with a trained checkpoint.
    Eval {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Sweep the full (h, alpha, beta) grid and score every point.
        #[arg(long)]
        sweep: bool,
        #[arg(long)]
        h: Option<f64>,
        #[arg(long)]
        alpha: Option<f64>,
        #[arg(long)]
        beta: Option<f64>,
        #[arg(long)]
        runs: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        /// Disable the duration filter (the "w/o post processing" arm).
        #[arg(long)]
        no_post_filter: bool,
        /// Write per-file probability tracks as CSV.
        #[arg(long)]
        dump_tracks: bool,
    },
    /// Score a detections CSV against corpus ground truth.
    Score {
        #[arg(long)]
        detections: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        k: Option<usize>,
        #[arg(long)]
        min_iou: Option<f64>,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();

    let threads = cli
        .threads
        .or_else(|| std::env::var("FEWSED_THREADS").ok().and_then(|v| v.parse().ok()));
    if let Some(n) = threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            log::warn!("thread pool already initialized: {e}");
        }
    }

    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            let code = match err {
                Error::Config(_) => 2,
                Error::Numeric(_) => 3,
                Error::Data(_) | Error::Io(_) => 4,
                Error::Format(_) => 5,
            };
            ExitCode::from(code)
        }
    }
}

fn load_config(path: &Option<PathBuf>) -> Result<RunConfig, Error> {
    let config = match path {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    config.validate()?;
    Ok(config)
}

fn run(cli: Cli) -> Result<(), Error> {
    let mut config = load_config(&cli.config)?;
    match cli.command {
        Command::Synth {
            out,
            seed,
            n_classes,
            files_per_class,
            file_duration,
            events_per_file,
        } => {
            if let Some(s) = seed {
                config.synth.seed = s;
            }
            if let Some(n) = n_classes {
                config.synth.n_classes = n;
            }
            if let Some(n) = files_per_class {
                config.synth.files_per_class_train = n;
            }
            if let Some(d) = file_duration {
                config.synth.file_duration = d;
            }
            if let Some(e) = events_per_file {
                config.synth.events_per_file = e;
            }
            let corpus = generate_synthetic_corpus(&config.synth, &out)?;
            let train_index = corpus.train_index()?;
            println!(
                "synth: {} classes, {} train files, config_hash={}",
                train_index.regions_by_class.len(),
                train_index.files.len(),
                config.hash()
            );
            Ok(())
        }
        Command::Train {
            data,
            out,
            seed,
            no_negative_contrast,
            no_transductive,
            feature_mode,
            embedding_f,
            n_way,
            m_shot,
            episodes_per_epoch,
            max_epochs,
            patience,
            val_episodes,
            aux_data,
            resume,
        } => {
            if let Some(s) = seed {
                config.set_seed(s);
            }
            if no_negative_contrast {
                config.train.use_negative_contrast = false;
            }
            if no_transductive {
                config.train.use_transductive = false;
            }
            if let Some(mode) = feature_mode {
                config.features.mode = mode.parse::<FeatureMode>()?;
                config.encoder.in_channels = config.features.mode.channels();
            }
            if let Some(f) = embedding_f {
                config.encoder.adaptive_f = f;
            }
            if let Some(n) = n_way {
                config.train.episode.n_way = n;
            }
            if let Some(m) = m_shot {
                config.train.episode.m_shot = m;
            }
            if let Some(e) = episodes_per_epoch {
                config.train.episodes_per_epoch = e;
            }
            if let Some(e) = max_epochs {
                config.train.max_epochs = e;
            }
            if let Some(p) = patience {
                config.train.patience = p;
            }
            if let Some(v) = val_episodes {
                config.train.val_episodes = v;
            }
            config.validate()?;
            cmd_train(&config, &data, &out, aux_data.as_deref(), resume.as_deref())
        }
        Command::Eval {
            data,
            checkpoint,
            out,
            sweep,
            h,
            alpha,
            beta,
            runs,
            seed,
            no_post_filter,
            dump_tracks,
        } => {
            if let Some(s) = seed {
                config.eval.seed = s;
            }
            if let Some(v) = h {
                config.eval.threshold = v;
            }
            if let Some(v) = alpha {
                config.eval.alpha = v;
            }
            if let Some(v) = beta {
                config.eval.beta = v;
            }
            if let Some(v) = runs {
                config.eval.n_runs = v;
            }
            if no_post_filter {
                config.eval.post_filter = false;
            }
            config.validate()?;
            cmd_eval(&config, &data, &checkpoint, &out, sweep, dump_tracks)
        }
        Command::Score {
            detections,
            data,
            out,
            k,
            min_iou,
        } => {
            if let Some(k) = k {
                config.eval.k_shots = k;
            }
            if let Some(m) = min_iou {
                config.matching.min_iou = m;
            }
            config.validate()?;
            cmd_score(&config, &detections, &data, out.as_deref())
        }
    }
}

fn eval_dir_of(data: &Path) -> PathBuf {
    let nested = data.join("eval");
    if nested.is_dir() {
        nested
    } else {
        data.to_path_buf()
    }
}

fn cmd_train(
    config: &RunConfig,
    data: &Path,
    out: &Path,
    aux_data: Option<&Path>,
    resume: Option<&Path>,
) -> Result<(), Error> {
    let train_index = index_directory(&data.join("train"), PoolRole::Train)?;
    let val_index = index_directory(&data.join("val"), PoolRole::Validation)?;
    let eval_index = match index_directory(&eval_dir_of(data), PoolRole::Evaluation) {
        Ok(idx) => Some(idx),
        Err(e) => {
            log::warn!("no evaluation split ({e}); transductive pool disabled");
            None
        }
    };
    let aux_index = match aux_data {
        Some(dir) => {
            let mut idx = index_directory(&dir.join("train"), PoolRole::Train)?;
            idx.tag_source(PoolSource::Aux);
            Some(idx)
        }
        None => None,
    };

    let mut store = FeatureStore::new();
    store.load_index(&train_index, &config.features)?;
    store.load_index(&val_index, &config.features)?;
    if let Some(eval) = &eval_index {
        store.load_index(eval, &config.features)?;
    }
    if let Some(aux) = &aux_index {
        store.load_index(aux, &config.features)?;
    }

    let (start_epoch, encoder) = match resume {
        Some(ckpt) => {
            let enc = load_checkpoint::<f32>(ckpt)?;
            let log_path = out.join("train_log.csv");
            let last_epoch = std::fs::read_to_string(&log_path)
                .ok()
                .and_then(|text| {
                    text.lines()
                        .skip(1)
                        .filter_map(|l| l.split(',').next()?.parse::<usize>().ok())
                        .max()
                })
                .unwrap_or(0);
            log::info!("resuming from {} at epoch {}", ckpt.display(), last_epoch + 1);
            (last_epoch + 1, Some(enc))
        }
        None => (1, None),
    };

    let outcome = train(
        &train_index,
        &val_index,
        eval_index.as_ref(),
        aux_index.as_ref(),
        &store,
        config.encoder.clone(),
        &config.train,
        out,
        start_epoch,
        encoder,
    )?;

    let log_path = out.join("train_log.csv");
    if start_epoch > 1 && log_path.is_file() {
        // append new epochs to the existing log
        let old = std::fs::read_to_string(&log_path)?;
        let mut text = old.trim_end().to_string();
        text.push('\n');
        for r in &outcome.log.rows {
            text.push_str(&format!(
                "{},{:.8},{:.6},{:.4},{},{:.2}\n",
                r.epoch, r.lr, r.mean_loss, r.val_accuracy, r.eval_pool_segments, r.seconds
            ));
        }
        std::fs::write(&log_path, text)?;
    } else {
        outcome.log.write_csv(&log_path)?;
    }

    let summary = format!(
        "config_hash={}\nbest_epoch={}\nbest_val_accuracy={:.4}\neval_pool_segments={}\ncheckpoint={}\n",
        config.hash(),
        outcome.log.best_epoch,
        outcome.log.best_val_accuracy,
        outcome.log.total_eval_pool_segments(),
        outcome.best_checkpoint.display()
    );
    std::fs::write(out.join("summary.txt"), &summary)?;
    println!(
        "train: best_val_accuracy={:.4} at epoch {} (checkpoint {})",
        outcome.log.best_val_accuracy,
        outcome.log.best_epoch,
        outcome.best_checkpoint.display()
    );
    Ok(())
}

fn file_name_of(path: &Path) -> String {
    path.file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default()
}

fn cmd_eval(
    config: &RunConfig,
    data: &Path,
    checkpoint: &Path,
    out: &Path,
    sweep: bool,
    dump_tracks: bool,
) -> Result<(), Error> {
    let eval_index = index_directory(&eval_dir_of(data), PoolRole::Evaluation)?;
    let encoder = load_checkpoint::<f32>(checkpoint)?;
    let mut store = FeatureStore::new();
    store.load_index(&eval_index, &config.features)?;
    std::fs::create_dir_all(out)?;

    let tracks = compute_tracks(&encoder, &store, &eval_index, &config.eval)?;

    if dump_tracks {
        let dir = out.join("tracks");
        std::fs::create_dir_all(&dir)?;
        for t in &tracks {
            let mut text = String::from("frame_time,probability\n");
            for (i, &p) in t.track.probs.iter().enumerate() {
                let time = (t.track.start_frame + i) as f64 / t.track.frame_rate;
                text.push_str(&format!("{time:.6},{p:.6}\n"));
            }
            let stem = t.file.file_stem().unwrap_or_default().to_string_lossy();
            std::fs::write(dir.join(format!("{stem}.csv")), text)?;
        }
    }

    if sweep {
        let result = sweep_operating_points(
            &tracks,
            &config.sweep,
            &config.matching,
            &config.psds,
            config.eval.post_filter,
        );
        let det_dir = out.join("detections");
        std::fs::create_dir_all(&det_dir)?;
        for p in &result.points {
            let mut events = Vec::new();
            for t in &tracks {
                for ev in detections_at(t, p.threshold, p.alpha, p.beta, config.eval.post_filter) {
                    events.push((file_name_of(&t.file), ev));
                }
            }
            let name = format!(
                "detections_h{:.2}_a{:.1}_b{:.1}.csv",
                p.threshold, p.alpha, p.beta
            );
            write_detections_csv(&events, &det_dir.join(name))?;
        }
        write_scores_csv(&result, &out.join("scores.csv"))?;
        emit_psd_roc_csv(&result.roc, &out.join("psd_roc.csv"))?;
        let best = result.best_point();
        std::fs::write(
            out.join("summary.txt"),
            format!(
                "config_hash={}\nbest_f1={:.6}\nbest_h={:.2}\nbest_alpha={:.1}\nbest_beta={:.1}\npsds={:.6}\n",
                config.hash(),
                best.f1,
                best.threshold,
                best.alpha,
                best.beta,
                result.roc.psds
            ),
        )?;
        println!(
            "eval sweep: {} operating points; best F1 {:.4} at h={:.2} alpha={:.1} beta={:.1}; PSDS {:.4}",
            result.points.len(),
            best.f1,
            best.threshold,
            best.alpha,
            best.beta,
            result.roc.psds
        );
    } else {
        let mut events = Vec::new();
        for t in &tracks {
            for ev in detections_at(
                t,
                config.eval.threshold,
                config.eval.alpha,
                config.eval.beta,
                config.eval.post_filter,
            ) {
                events.push((file_name_of(&t.file), ev));
            }
        }
        let path = out.join("detections.csv");
        write_detections_csv(&events, &path)?;
        println!(
            "eval: {} detections at h={:.2} alpha={:.1} beta={:.1} -> {}",
            events.len(),
            config.eval.threshold,
            config.eval.alpha,
            config.eval.beta,
            path.display()
        );
    }
    Ok(())
}

fn cmd_score(
    config: &RunConfig,
    detections_path: &Path,
    data: &Path,
    out: Option<&Path>,
) -> Result<(), Error> {
    let eval_index = index_directory(&eval_dir_of(data), PoolRole::Evaluation)?;
    let detections = read_detections_csv(detections_path)?;
    let k = config.eval.k_shots;

    struct FileScore {
        class: String,
        counts: ConfusionCounts,
        dets: Vec<DetectionEvent>,
        truth: Vec<DetectionEvent>,
        evaluated_secs: f64,
    }

    let mut scores: Vec<FileScore> = Vec::new();
    for (path, entry) in &eval_index.files {
        let context = build_context(path, entry, k)?;
        let name = file_name_of(path);
        let truth: Vec<DetectionEvent> = entry
            .annotations
            .iter()
            .filter(|r| {
                r.polarity == fewsed::corpus::Polarity::Positive
                    && r.onset >= context.prediction_start - 1e-9
            })
            .map(|r| DetectionEvent {
                onset: r.onset,
                offset: r.offset,
                score: 1.0,
            })
            .collect();
        let dets: Vec<DetectionEvent> = detections
            .iter()
            .filter(|(f, ev)| *f == name && ev.onset >= context.prediction_start - 1e-9)
            .map(|(_, ev)| ev.clone())
            .collect();
        let counts = match_events(&dets, &truth, &config.matching);
        scores.push(FileScore {
            class: entry.subfolder.clone(),
            counts,
            dets,
            truth,
            evaluated_secs: entry.duration - context.prediction_start,
        });
    }

    let mut pooled = ConfusionCounts::default();
    for s in &scores {
        pooled.add(&s.counts);
    }
    let (precision, recall, f1) = f_measure(&pooled);

    // single-operating-point PSDS from the per-class rates
    let evaluated_hours: f64 = scores.iter().map(|s| s.evaluated_secs).sum::<f64>() / 3600.0;
    let mut per_class_counts: BTreeMap<String, ConfusionCounts> = BTreeMap::new();
    let mut raw_points: BTreeMap<String, Vec<RocPoint>> = BTreeMap::new();
    type EventsByFile = BTreeMap<PathBuf, Vec<DetectionEvent>>;
    let mut by_class: BTreeMap<String, (EventsByFile, EventsByFile)> = BTreeMap::new();
    for (i, s) in scores.iter().enumerate() {
        per_class_counts
            .entry(s.class.clone())
            .or_default()
            .add(&s.counts);
        let slot = by_class.entry(s.class.clone()).or_default();
        let key = PathBuf::from(format!("{i}"));
        slot.0.insert(key.clone(), s.dets.clone());
        slot.1.insert(key, s.truth.clone());
    }
    for (class, (dets, truths)) in &by_class {
        let rates = class_rates(dets, truths, &config.psds, evaluated_hours);
        raw_points.entry(class.clone()).or_default().push(rates);
    }
    let roc = psds(&raw_points, &config.psds);

    let mut report = String::from("class,tp,fp,fn,precision,recall,f1,tpr,efpr\n");
    for (class, counts) in &per_class_counts {
        let (p, r, f) = f_measure(counts);
        let rates = raw_points[class][0];
        report.push_str(&format!(
            "{class},{},{},{},{:.6},{:.6},{:.6},{:.6},{:.6}\n",
            counts.tp, counts.fp, counts.fn_, p, r, f, rates.tpr, rates.efpr
        ));
    }
    report.push_str(&format!(
        "pooled,{},{},{},{:.6},{:.6},{:.6},,\n",
        pooled.tp, pooled.fp, pooled.fn_, precision, recall, f1
    ));

    if let Some(out) = out {
        std::fs::create_dir_all(out)?;
        std::fs::write(out.join("score_report.csv"), &report)?;
        emit_psd_roc_csv(&roc, &out.join("psd_roc.csv"))?;
        std::fs::write(
            out.join("summary.txt"),
            format!(
                "config_hash={}\nf1={f1:.6}\nprecision={precision:.6}\nrecall={recall:.6}\npsds={:.6}\n",
                config.hash(),
                roc.psds
            ),
        )?;
    }
    println!(
        "score: F1 {f1:.4} (P {precision:.4} R {recall:.4}), PSDS {:.4}",
        roc.psds
    );
    print!("{report}");
    Ok(())
}
