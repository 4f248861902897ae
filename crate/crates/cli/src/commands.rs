//! The pipeline stages behind each subcommand. Every stage reads and writes
//! files only, so stages can be run, rerun and compared independently.

use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::Serialize;
use tal_core::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CheckpointMeta};
use tal_core::data::Video;
use tal_core::evaluation::{evaluate, oracle_cls, oracle_rank, GroundTruth, Metrics, ProposalMap};
use tal_core::formats::{read_annotations, read_proposals, write_json, write_proposals, write_synthetic_dataset, Dataset};
use tal_core::gradsuite::{run_suite, Fault, OpReport, SuiteConfig, OPS};
use tal_core::inference::{class_centroids, classify_proposals, infer_video, soft_nms, PhaseSource};
use tal_core::losses::LossReport;
use tal_core::model::{ModelParams, NetworkConfig};
use tal_core::synthetic::Subset;
use tal_core::trainer::{prepare_windows, train_epoch, StepRecord, TrainState};
use tal_core::{Error, Result};

use crate::config::RunConfig;

pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const TRAIN_LOG_FILE: &str = "train_log.jsonl";
pub const METRICS_FILE: &str = "metrics.json";
pub const CURVE_FILE: &str = "ar_an.csv";

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

/// Generate the synthetic corpus into `out`. Returns the number of videos.
pub fn gen_data(config: &RunConfig, out: &Path) -> Result<usize> {
    let videos = config.synthetic.generate()?;
    write_synthetic_dataset(out, &config.synthetic, &videos)?;
    Ok(videos.len())
}

fn check_channels<'a>(videos: impl IntoIterator<Item = &'a Video>, network: &NetworkConfig) -> Result<()> {
    for v in videos {
        if v.features.channels() != network.input_channels {
            return Err(Error::ConfigMismatch(format!(
                "video {} has {} feature channels, network expects {}",
                v.id,
                v.features.channels(),
                network.input_channels
            )));
        }
    }
    Ok(())
}

/// Inference metadata derived from the training split.
pub fn dataset_meta(ds: &Dataset) -> CheckpointMeta {
    let train: Vec<&Video> = ds.subset(Subset::Train).collect();
    let channels = train.first().map_or(0, |v| v.features.channels());
    let max_duration = train
        .iter()
        .flat_map(|v| v.annotations.instances.iter().map(|i| i.duration()))
        .max()
        .unwrap_or(0);
    let centroids = class_centroids(
        train.iter().map(|v| (&v.features, v.annotations.instances.as_slice())),
        ds.annotations.classes.len(),
        channels,
    );
    CheckpointMeta {
        max_duration,
        class_names: ds.annotations.classes.clone(),
        centroids,
    }
}

#[derive(Clone, Debug, Default)]
pub struct TrainOptions {
    pub resume: Option<PathBuf>,
    pub save_every_epoch: bool,
}

#[derive(Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum LogLine<'a> {
    Step(&'a StepRecord),
    Epoch {
        epoch: usize,
        #[serde(flatten)]
        losses: &'a LossReport,
    },
}

fn write_log_line(log: &mut impl Write, line: &LogLine<'_>, path: &Path) -> Result<()> {
    let text = serde_json::to_string(line).expect("log line serializes");
    writeln!(log, "{text}").map_err(|e| Error::io(path, e))
}

/// Train on the training split of `data`, writing `model.ckpt` and
/// `train_log.jsonl` into `out`. Returns the per-epoch mean losses.
pub fn train(config: &RunConfig, data: &Path, out: &Path, opts: &TrainOptions) -> Result<Vec<LossReport>> {
    config.train.validate()?;
    config.network.validate()?;
    let ds = Dataset::load(data)?;
    check_channels(ds.subset(Subset::Train), &config.network)?;
    let meta = dataset_meta(&ds);
    let windows = prepare_windows(ds.subset(Subset::Train), config.network.window_length);

    let mut state = match &opts.resume {
        Some(path) => {
            let ck = load_checkpoint(path)?;
            ck.require_network(&config.network)?;
            let mut state = TrainState::new(ck.params);
            state.epoch = ck.epoch;
            if let Some(v) = ck.velocity {
                state.velocity = v;
            }
            state
        }
        None => TrainState::new(ModelParams::init(&config.network, config.train.seed)?),
    };
    create_dir(out)?;
    let checkpoint = |state: &TrainState| Checkpoint {
        params: state.params.clone(),
        epoch: state.epoch,
        meta: meta.clone(),
        velocity: Some(state.velocity.clone()),
    };

    let mut history = Vec::new();
    if state.epoch < config.train.epochs {
        let log_path = out.join(TRAIN_LOG_FILE);
        let file = OpenOptions::new()
            .create(true)
            .write(true)
            .append(opts.resume.is_some())
            .truncate(opts.resume.is_none())
            .open(&log_path)
            .map_err(|e| Error::io(&log_path, e))?;
        let mut log = BufWriter::new(file);
        while state.epoch < config.train.epochs {
            let mut io_err = None;
            let report = train_epoch(&mut state, &windows, &config.train, &mut |rec| {
                if io_err.is_none() {
                    io_err = write_log_line(&mut log, &LogLine::Step(rec), &log_path).err();
                }
            })?;
            if let Some(e) = io_err {
                return Err(e);
            }
            let epoch = state.epoch - 1;
            write_log_line(&mut log, &LogLine::Epoch { epoch, losses: &report }, &log_path)?;
            if opts.save_every_epoch {
                save_checkpoint(&checkpoint(&state), &out.join(format!("epoch_{:03}.ckpt", state.epoch)))?;
            }
            history.push(report);
        }
        log.flush().map_err(|e| Error::io(&log_path, e))?;
    }
    save_checkpoint(&checkpoint(&state), &out.join(CHECKPOINT_FILE))?;
    Ok(history)
}

#[derive(Clone, Debug, Default)]
pub struct InferOptions {
    /// `None` runs every video.
    pub subset: Option<Subset>,
    /// Feed ground-truth labels as phase probabilities instead of a model.
    pub phases_from_labels: bool,
}

/// Run the proposal pipeline over `data` and write the proposal file.
pub fn infer(
    config: &RunConfig,
    checkpoint: Option<&Path>,
    data: &Path,
    out_file: &Path,
    opts: &InferOptions,
) -> Result<ProposalMap> {
    config.inference.soft_nms.validate()?;
    let ds = Dataset::load(data)?;
    let ck = checkpoint.map(load_checkpoint).transpose()?;
    let (meta, window_length) = match &ck {
        Some(ck) => {
            if ck.meta.class_names != ds.annotations.classes {
                return Err(Error::ConfigMismatch(format!(
                    "checkpoint classes {:?} differ from dataset classes {:?}",
                    ck.meta.class_names, ds.annotations.classes
                )));
            }
            (ck.meta.clone(), ck.network().window_length)
        }
        None if opts.phases_from_labels => (dataset_meta(&ds), config.network.window_length),
        None => return Err(Error::InvalidConfig("a checkpoint is required unless phases come from labels".into())),
    };
    let videos: Vec<&Video> = ds
        .videos
        .iter()
        .filter(|(s, _)| opts.subset.is_none_or(|want| *s == want))
        .map(|(_, v)| v)
        .collect();
    if let Some(ck) = &ck {
        check_channels(videos.iter().copied(), ck.network())?;
    }
    let proposals: ProposalMap = videos
        .par_iter()
        .map(|v| {
            let source = match (&ck, opts.phases_from_labels) {
                (_, true) => PhaseSource::Labels(&v.annotations),
                (Some(ck), false) => PhaseSource::Model(&ck.params),
                (None, false) => unreachable!("checked above"),
            };
            let mut props = infer_video(&source, &v.features, window_length, meta.max_duration, &config.inference)?;
            classify_proposals(&mut props, &v.features, &meta.centroids);
            Ok((v.id.clone(), props))
        })
        .collect::<Result<_>>()?;
    if let Some(parent) = out_file.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    write_proposals(out_file, &proposals, &ds.annotations.classes)?;
    Ok(proposals)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Oracle {
    Rank,
    Cls,
    Both,
}

#[derive(Clone, Debug, Default)]
pub struct EvalOptions {
    pub oracle: Option<Oracle>,
    pub subset: Option<Subset>,
}

/// Model metrics and, when requested, the oracle variants side by side.
#[derive(Clone, Debug, Serialize)]
pub struct EvalReport {
    pub model: Metrics,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub oracle_rank: Option<Metrics>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub oracle_cls: Option<Metrics>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub oracle_both: Option<Metrics>,
}

impl EvalReport {
    fn columns(&self) -> Vec<(&'static str, &Metrics)> {
        let mut out = vec![("model", &self.model)];
        for (name, m) in [
            ("oracle_rank", &self.oracle_rank),
            ("oracle_cls", &self.oracle_cls),
            ("oracle_both", &self.oracle_both),
        ] {
            if let Some(m) = m {
                out.push((name, m));
            }
        }
        out
    }
}

fn rerank(proposals: &ProposalMap, gt: &GroundTruth, config: &RunConfig) -> ProposalMap {
    oracle_rank(proposals, gt)
        .into_iter()
        .map(|(v, ps)| (v, soft_nms(&ps, &config.inference.soft_nms)))
        .collect()
}

/// Evaluate a proposal file against the annotation file; writes
/// `metrics.json` and `ar_an.csv` into `out_dir`.
pub fn eval(
    config: &RunConfig,
    proposals_path: &Path,
    annotations_path: &Path,
    out_dir: &Path,
    opts: &EvalOptions,
) -> Result<EvalReport> {
    config.eval.validate()?;
    let annotations = read_annotations(annotations_path)?;
    let gt = annotations.ground_truth(opts.subset)?;
    let all_ids: std::collections::BTreeSet<&str> = annotations.videos.iter().map(|v| v.id.as_str()).collect();
    let mut proposals = read_proposals(proposals_path, &annotations.classes)?;
    if let Some(unknown) = proposals.keys().find(|k| !all_ids.contains(k.as_str())) {
        return Err(Error::format(
            proposals_path.display(),
            format!("video {unknown:?} is not in {}", annotations_path.display()),
        ));
    }
    proposals.retain(|k, _| gt.contains_key(k));

    let metrics = |p: &ProposalMap| evaluate(p, &gt, &config.eval);
    let wants = |o: Oracle| opts.oracle == Some(o) || opts.oracle == Some(Oracle::Both);
    let ranked = wants(Oracle::Rank).then(|| rerank(&proposals, &gt, config));
    let report = EvalReport {
        model: metrics(&proposals)?,
        oracle_rank: ranked.as_ref().map(metrics).transpose()?,
        oracle_cls: wants(Oracle::Cls).then(|| metrics(&oracle_cls(&proposals, &gt))).transpose()?,
        oracle_both: match (&ranked, opts.oracle) {
            (Some(r), Some(Oracle::Both)) => Some(metrics(&oracle_cls(r, &gt))?),
            _ => None,
        },
    };

    create_dir(out_dir)?;
    write_json(&out_dir.join(METRICS_FILE), &report)?;
    let curve_path = out_dir.join(CURVE_FILE);
    let to_err = |e: csv::Error| Error::format(curve_path.display(), e.to_string());
    let mut w = csv::Writer::from_path(&curve_path).map_err(to_err)?;
    let columns = report.columns();
    let mut header = vec!["an".to_string()];
    header.extend(columns.iter().map(|(n, _)| format!("ar_{n}")));
    w.write_record(&header).map_err(to_err)?;
    for (i, &(an, _)) in report.model.curve.iter().enumerate() {
        let mut row = vec![an.to_string()];
        row.extend(columns.iter().map(|(_, m)| m.curve[i].1.to_string()));
        w.write_record(&row).map_err(to_err)?;
    }
    w.flush().map_err(|e| Error::io(&curve_path, e))?;
    Ok(report)
}

#[derive(Clone, Debug)]
pub struct GradcheckOptions {
    pub seed: u64,
    /// Empty runs every op.
    pub ops: Vec<String>,
    pub points: usize,
    pub network_len: usize,
    pub fault: Option<Fault>,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        let suite = SuiteConfig::default();
        GradcheckOptions {
            seed: suite.seed,
            ops: Vec::new(),
            points: suite.points,
            network_len: suite.network_len,
            fault: None,
        }
    }
}

pub fn gradcheck(config: &RunConfig, opts: &GradcheckOptions) -> Result<Vec<OpReport>> {
    config.network.validate()?;
    if opts.points == 0 || opts.network_len == 0 {
        return Err(Error::InvalidConfig("gradcheck points and network length must be >= 1".into()));
    }
    let suite = SuiteConfig {
        seed: opts.seed,
        points: opts.points,
        network: config.network.clone(),
        network_len: opts.network_len,
        fault: opts.fault,
        ..SuiteConfig::default()
    };
    let ops: Vec<&str> = if opts.ops.is_empty() {
        OPS.to_vec()
    } else {
        opts.ops.iter().map(String::as_str).collect()
    };
    run_suite(&ops, &suite)
}

/// Read back the loss log, one JSON value per line.
pub fn read_train_log(path: &Path) -> Result<Vec<serde_json::Value>> {
    use std::io::BufRead;
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    std::io::BufReader::new(file)
        .lines()
        .enumerate()
        .map(|(i, line)| {
            let line = line.map_err(|e| Error::io(path, e))?;
            serde_json::from_str(&line).map_err(|e| Error::Parse {
                path: path.display().to_string(),
                line: i + 1,
                detail: e.to_string(),
            })
        })
        .collect()
}
