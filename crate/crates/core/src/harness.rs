//! Evaluation runs: every strategy over every manifest, with resumable
//! trace output, scoring and report files.

use std::collections::HashMap;
use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::CallCounters;
use crate::config::{ConfigError, RunConfig};
use crate::dataset::{load_manifest, DatasetError, DatasetManifest, Sample};
use crate::geometry::CropMode;
use crate::metrics::{aggregate, contains_correct, LabeledResult, Report};
use crate::pipeline::{LoadedImage, Pipeline, PipelineTrace, Strategy, TextCotOptions, TRACE_SCHEMA_VERSION};

pub const TRACES_FILE: &str = "traces.jsonl";
pub const RESULTS_FILE: &str = "results.jsonl";
pub const REPORT_MD_FILE: &str = "report.md";
pub const REPORT_CSV_FILE: &str = "report.csv";
pub const CONFIG_SNAPSHOT_FILE: &str = "config.resolved.toml";
pub const RUN_FILE: &str = "run.json";

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error("io error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("cannot resume: {} holds no previous run", .0.display())]
    NothingToResume(PathBuf),
    #[error("cannot resume: config hash {found} differs from the previous run's {expected}")]
    ResumeMismatch { expected: String, found: String },
    #[error("bad trace file {} line {line}: {message}", path.display())]
    BadTrace {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("bad results file {} line {line}: {message}", path.display())]
    BadResults {
        path: PathBuf,
        line: usize,
        message: String,
    },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> HarnessError + '_ {
    move |source| HarnessError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Written next to the outputs; identifies the run for resume.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub config_hash: String,
    pub trace_schema_version: u32,
    pub complete: bool,
    pub traces: usize,
    pub errors: usize,
    pub resumed_traces: usize,
    pub backend_calls: u64,
    pub cache_hits: u64,
}

#[derive(Debug, Clone)]
pub struct RunSummary {
    pub output_dir: PathBuf,
    pub traces: Vec<PipelineTrace>,
    pub results: Vec<LabeledResult>,
    pub report: Report,
    /// Traces carried over from a previous run instead of recomputed.
    pub resumed: usize,
    pub errors: usize,
    /// Calls made during this run only.
    pub counters: CallCounters,
}

/// Reasoning ablation rows: direct answer, grounding as text, grounding with
/// crop, and the full chain with a caption.
pub fn reasoning_ablation() -> Vec<Strategy> {
    let opts = |use_crop, use_caption| {
        Strategy::TextCot(TextCotOptions {
            use_crop,
            use_caption,
            crop_mode: CropMode::SquareScaled,
        })
    };
    vec![Strategy::Direct, opts(false, false), opts(true, false), opts(true, true)]
}

/// One full-chain row per crop mode.
pub fn cropping_ablation() -> Vec<Strategy> {
    CropMode::ALL
        .iter()
        .map(|&crop_mode| {
            Strategy::TextCot(TextCotOptions {
                crop_mode,
                ..TextCotOptions::default()
            })
        })
        .collect()
}

type TraceKey = (String, String, String);

fn trace_key(t: &PipelineTrace) -> TraceKey {
    (t.strategy.to_string(), t.dataset.clone(), t.sample_id.clone())
}

/// Read a trace file. A torn final line (from an interrupted run) is
/// dropped; damage anywhere else is an error.
pub fn read_traces(path: &Path) -> Result<Vec<PipelineTrace>, HarnessError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let lines: Vec<&str> = text.lines().collect();
    let mut out = Vec::with_capacity(lines.len());
    for (i, line) in lines.iter().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str::<PipelineTrace>(line) {
            Ok(t) => out.push(t),
            Err(_) if i + 1 == lines.len() && !text.ends_with('\n') => {
                log::warn!("dropping incomplete last line of {}", path.display());
            }
            Err(e) => {
                return Err(HarnessError::BadTrace {
                    path: path.to_path_buf(),
                    line: i + 1,
                    message: e.to_string(),
                })
            }
        }
    }
    Ok(out)
}

pub fn read_results(path: &Path) -> Result<Vec<LabeledResult>, HarnessError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| HarnessError::BadResults {
                path: path.to_path_buf(),
                line: i + 1,
                message: e.to_string(),
            })
        })
        .collect()
}

fn write_atomic(path: &Path, contents: &[u8]) -> Result<(), HarnessError> {
    let dir = path.parent().unwrap_or(Path::new("."));
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(io_err(dir))?;
    tmp.write_all(contents).map_err(io_err(path))?;
    tmp.persist(path).map_err(|e| io_err(path)(e.error))?;
    Ok(())
}

fn write_run_record(dir: &Path, record: &RunRecord) -> Result<(), HarnessError> {
    let mut text = serde_json::to_string_pretty(record).expect("record serializes");
    text.push('\n');
    write_atomic(&dir.join(RUN_FILE), text.as_bytes())
}

fn jsonl<T: Serialize>(items: &[T]) -> String {
    let mut out = String::new();
    for item in items {
        out.push_str(&serde_json::to_string(item).expect("serializes"));
        out.push('\n');
    }
    out
}

/// Score one trace; a failed sample counts as incorrect.
pub fn score(trace: &PipelineTrace, answers: &[String]) -> LabeledResult {
    let result = match contains_correct(&trace.sample_id, &trace.final_answer, answers) {
        Ok(r) => r,
        Err(_) => crate::metrics::EvalResult {
            sample_id: trace.sample_id.clone(),
            correct: false,
            matched_answer: None,
            final_answer: trace.final_answer.clone(),
        },
    };
    LabeledResult {
        strategy: trace.strategy.to_string(),
        dataset: trace.dataset.clone(),
        result,
    }
}

fn load_previous(config: &RunConfig, hash: &str) -> Result<HashMap<TraceKey, PipelineTrace>, HarnessError> {
    let dir = &config.output_dir;
    let run_path = dir.join(RUN_FILE);
    let record: RunRecord = match fs::read_to_string(&run_path) {
        Ok(text) => serde_json::from_str(&text).map_err(|_| HarnessError::NothingToResume(dir.clone()))?,
        Err(_) => return Err(HarnessError::NothingToResume(dir.clone())),
    };
    if record.config_hash != hash {
        return Err(HarnessError::ResumeMismatch {
            expected: record.config_hash,
            found: hash.to_string(),
        });
    }
    let traces_path = dir.join(TRACES_FILE);
    if !traces_path.exists() {
        return Ok(HashMap::new());
    }
    Ok(read_traces(&traces_path)?
        .into_iter()
        .filter(|t| t.error.is_none())
        .map(|t| (trace_key(&t), t))
        .collect())
}

struct Job<'a> {
    manifest: &'a DatasetManifest,
    sample: &'a Sample,
}

/// Run every configured strategy over every sample and write traces,
/// results, reports, a config snapshot and a run record into the output
/// directory.
pub fn execute(config: &RunConfig) -> Result<RunSummary, HarnessError> {
    config.validate()?;
    let dir = config.output_dir.clone();
    fs::create_dir_all(&dir).map_err(io_err(&dir))?;
    let hash = config.config_hash();

    let mut previous = if config.resume {
        load_previous(config, &hash)?
    } else {
        HashMap::new()
    };
    let manifests: Vec<DatasetManifest> = config
        .datasets
        .iter()
        .map(|p| load_manifest(p))
        .collect::<Result<_, _>>()?;
    let client = config.build_client()?;
    let pipeline = Pipeline::new(&client, config.prompts.clone(), config.crop).with_seed(config.seed);

    write_run_record(
        &dir,
        &RunRecord {
            config_hash: hash.clone(),
            trace_schema_version: TRACE_SCHEMA_VERSION,
            complete: false,
            traces: 0,
            errors: 0,
            resumed_traces: 0,
            backend_calls: 0,
            cache_hits: 0,
        },
    )?;

    // Progress log: carried-over traces first, then new ones as they finish.
    let traces_path = dir.join(TRACES_FILE);
    let progress = {
        let mut f = BufWriter::new(File::create(&traces_path).map_err(io_err(&traces_path))?);
        let mut carried: Vec<&PipelineTrace> = previous.values().collect();
        carried.sort_by_key(|t| trace_key(t));
        for t in carried {
            writeln!(f, "{}", serde_json::to_string(t).expect("trace serializes")).map_err(io_err(&traces_path))?;
        }
        f.flush().map_err(io_err(&traces_path))?;
        drop(f);
        Mutex::new(
            OpenOptions::new()
                .append(true)
                .open(&traces_path)
                .map_err(io_err(&traces_path))?,
        )
    };

    let jobs: Vec<Job> = manifests
        .iter()
        .flat_map(|m| m.samples.iter().map(move |s| Job { manifest: m, sample: s }))
        .collect();
    let resumed = previous.len();
    let previous_ref = &previous;

    let run_job = |job: &Job| -> Vec<PipelineTrace> {
        let dataset = job.manifest.name().to_string();
        let sample = job.sample;
        let mut image: Option<Result<LoadedImage, String>> = None;
        let mut fresh = Vec::new();
        for strategy in &config.strategies {
            let key = (strategy.to_string(), dataset.clone(), sample.id.clone());
            if previous_ref.contains_key(&key) {
                continue;
            }
            let loaded = image.get_or_insert_with(|| {
                LoadedImage::open(&job.manifest.image_path(sample)).map_err(|e| e.to_string())
            });
            let mut trace = match loaded {
                Ok(img) => pipeline
                    .run(&sample.id, &sample.question, img, strategy)
                    .unwrap_or_else(|e| PipelineTrace::failed(&sample.id, &sample.question, *strategy, e.to_string())),
                Err(e) => PipelineTrace::failed(&sample.id, &sample.question, *strategy, e.clone()),
            };
            trace.dataset = dataset.clone();
            if let Some(err) = &trace.error {
                log::error!("{dataset}/{} [{strategy}]: {err}", sample.id);
            }
            let line = serde_json::to_string(&trace).expect("trace serializes");
            let mut f = progress.lock().unwrap_or_else(|e| e.into_inner());
            if let Err(e) = writeln!(f, "{line}") {
                log::warn!("could not append to {}: {e}", traces_path.display());
            }
            drop(f);
            fresh.push(trace);
        }
        fresh
    };

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(config.concurrency)
        .build()
        .expect("thread pool");
    let fresh: Vec<PipelineTrace> = pool.install(|| jobs.par_iter().flat_map_iter(run_job).collect());
    drop(progress);

    let mut by_key: HashMap<TraceKey, PipelineTrace> = fresh.into_iter().map(|t| (trace_key(&t), t)).collect();
    by_key.extend(previous.drain());

    // Canonical order: strategy, then dataset, then sample.
    let mut traces = Vec::new();
    let mut results = Vec::new();
    for strategy in &config.strategies {
        let label = strategy.to_string();
        for m in &manifests {
            for s in &m.samples {
                let key = (label.clone(), m.name().to_string(), s.id.clone());
                if let Some(t) = by_key.remove(&key) {
                    results.push(score(&t, &s.answers));
                    traces.push(t);
                }
            }
        }
    }
    let errors = traces.iter().filter(|t| t.error.is_some()).count();
    let mut report = aggregate(&results);
    if errors > 0 {
        report
            .warnings
            .push(format!("{errors} samples failed and were scored as incorrect"));
    }

    write_atomic(&traces_path, jsonl(&traces).as_bytes())?;
    write_atomic(&dir.join(RESULTS_FILE), jsonl(&results).as_bytes())?;
    write_atomic(&dir.join(REPORT_MD_FILE), report.to_markdown().as_bytes())?;
    write_atomic(&dir.join(REPORT_CSV_FILE), report.to_csv().as_bytes())?;
    write_atomic(&dir.join(CONFIG_SNAPSHOT_FILE), config.to_toml().as_bytes())?;
    let counters = client.counters();
    write_run_record(
        &dir,
        &RunRecord {
            config_hash: hash,
            trace_schema_version: TRACE_SCHEMA_VERSION,
            complete: true,
            traces: traces.len(),
            errors,
            resumed_traces: resumed,
            backend_calls: counters.backend_calls,
            cache_hits: counters.cache_hits,
        },
    )?;

    Ok(RunSummary {
        output_dir: dir,
        traces,
        results,
        report,
        resumed,
        errors,
        counters,
    })
}
