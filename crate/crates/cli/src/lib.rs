//! Command implementations behind the `cglens` binary.
//!
//! Each `cmd_*` function takes a resolved [`Config`] and plain options so
//! the commands can be driven from tests without going through argument
//! parsing. Errors carry the process exit code.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use cglens_core::capture::CaptureReader;
use cglens_core::config::Config;
use cglens_core::engine::{analyze_flow, summarize, write_slot_csv, Models, SessionReport, PATTERN_MODEL, STAGE_MODEL, TITLE_MODEL};
use cglens_core::forest::Forest;
use cglens_core::harness::{
    collect_dir, eval_pattern, eval_stage, eval_title, pattern_rows, ranked_importance, split_sessions, stage_classes, stage_rows,
    train_pattern, train_stage, train_title, ClassReport, Importance, PatternEval, SessionData, TitleFeatures,
};
use cglens_core::model::{ActivityPattern, StageLabel};
use cglens_core::par::map_slice;
use cglens_core::qoe::{read_samples, QoELevel, QoESample};
use cglens_core::synth::{build_entries, mix_seed, write_corpus, CorpusConfig, ManifestRow, ProfileSet};
use cglens_core::{Error, Exec};

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_NO_FLOW: i32 = 2;
pub const EXIT_MODEL_MISMATCH: i32 = 3;
pub const EXIT_VALIDATION: i32 = 4;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("no streaming flow found in {}", .0.display())]
    NoFlow(PathBuf),
    #[error(transparent)]
    Core(#[from] Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::NoFlow(_) => EXIT_NO_FLOW,
            CliError::Core(Error::ArityMismatch { .. } | Error::ModelFormat(_)) => EXIT_MODEL_MISMATCH,
            CliError::Core(Error::Io { .. }) => EXIT_FAILURE,
            CliError::Core(_) => EXIT_VALIDATION,
        }
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;

fn io_err(path: &Path, e: std::io::Error) -> CliError {
    CliError::Core(Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn validation(msg: impl Into<String>) -> CliError {
    CliError::Core(Error::Validation(msg.into()))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    let f = File::create(path).map_err(|e| io_err(path, e))?;
    serde_json::to_writer_pretty(BufWriter::new(f), value).map_err(Error::from)?;
    Ok(())
}

fn create_dir(dir: &Path) -> CliResult<()> {
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))
}

/// Model task selector for `train` and `importance`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Task {
    Title,
    Stage,
    Pattern,
    All,
}

impl FromStr for Task {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "title" => Ok(Task::Title),
            "stage" => Ok(Task::Stage),
            "pattern" => Ok(Task::Pattern),
            "all" => Ok(Task::All),
            _ => Err(format!("unknown task `{s}` (expected title, stage, pattern or all)")),
        }
    }
}

impl Task {
    pub fn as_str(self) -> &'static str {
        match self {
            Task::Title => "title",
            Task::Stage => "stage",
            Task::Pattern => "pattern",
            Task::All => "all",
        }
    }
}

/// Apply a `--seed` override to every seed the training path uses.
pub fn apply_seed(cfg: &mut Config, seed: Option<u64>) {
    if let Some(s) = seed {
        let t = &mut cfg.training;
        t.seed = s;
        t.title.rng_seed = mix_seed(s, &[1]);
        t.stage.rng_seed = mix_seed(s, &[2]);
        t.pattern.rng_seed = mix_seed(s, &[3]);
    }
}

// ---------------------------------------------------------------- analyze

#[derive(Debug, Clone)]
pub struct AnalyzeOptions {
    pub captures: Vec<PathBuf>,
    /// QoE samples for a single capture. Without it, `<stem>.qoe.csv` next
    /// to each capture is used when present.
    pub qoe: Option<PathBuf>,
    pub models_dir: PathBuf,
    /// Where `<session>.report.json` and `<session>.slots.csv` go; nothing
    /// is written when absent.
    pub out: Option<PathBuf>,
}

pub const REPORT_SUFFIX: &str = ".report.json";
pub const SLOTS_SUFFIX: &str = ".slots.csv";

fn stem(path: &Path) -> String {
    path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "session".into())
}

fn load_qoe(path: &Path, slot_s: f64) -> CliResult<Vec<QoESample>> {
    let f = File::open(path).map_err(|e| io_err(path, e))?;
    Ok(read_samples(f, slot_s)?)
}

fn analyze_capture(path: &Path, qoe_path: Option<&Path>, models: &Models, cfg: &Config) -> CliResult<Vec<SessionReport>> {
    let summary = summarize(CaptureReader::open(path)?, cfg)?;
    if summary.flows.is_empty() {
        return Err(CliError::NoFlow(path.to_path_buf()));
    }
    let sibling = path.with_file_name(format!("{}.qoe.csv", stem(path)));
    let qoe = match qoe_path {
        Some(p) => load_qoe(p, cfg.tracker.slot_s)?,
        None if sibling.exists() => load_qoe(&sibling, cfg.tracker.slot_s)?,
        None => Vec::new(),
    };
    let calibration = cfg.calibration()?;
    let mut flows: Vec<_> = summary.flows.iter().collect();
    flows.sort_by(|a, b| b.down_bytes.cmp(&a.down_bytes).then(a.flow.first_packet_at.total_cmp(&b.flow.first_packet_at)));
    let base = stem(path);
    flows
        .iter()
        .enumerate()
        .map(|(k, f)| {
            // QoE samples describe the main stream only.
            let (id, samples) = if k == 0 { (base.clone(), qoe.as_slice()) } else { (format!("{base}-flow{k}"), &[][..]) };
            Ok(analyze_flow(&id, f, models, cfg, &calibration, samples)?)
        })
        .collect()
}

/// Analyze each capture. Reports are written per session; a capture with
/// no streaming flow fails the command with [`CliError::NoFlow`] after the
/// remaining captures are processed.
pub fn cmd_analyze(opts: &AnalyzeOptions, cfg: &Config, exec: Exec) -> CliResult<Vec<SessionReport>> {
    if opts.captures.is_empty() {
        return Err(validation("no capture files given"));
    }
    if opts.qoe.is_some() && opts.captures.len() > 1 {
        return Err(validation("--qoe applies to a single capture"));
    }
    let models = Models::load(&opts.models_dir)?;
    models.check(cfg)?;
    if let Some(out) = &opts.out {
        create_dir(out)?;
    }
    let results = map_slice(exec, &opts.captures, |p| analyze_capture(p, opts.qoe.as_deref(), &models, cfg));
    let mut reports = Vec::new();
    let mut no_flow = None;
    for (path, r) in opts.captures.iter().zip(results) {
        match r {
            Ok(rs) => reports.extend(rs),
            Err(CliError::NoFlow(p)) => {
                log::error!("{}: no streaming flow", path.display());
                no_flow.get_or_insert(p);
            }
            Err(e) => return Err(e),
        }
    }
    if let Some(out) = &opts.out {
        for r in &reports {
            write_json(&out.join(format!("{}{REPORT_SUFFIX}", r.session_id)), r)?;
            let p = out.join(format!("{}{SLOTS_SUFFIX}", r.session_id));
            write_slot_csv(r, BufWriter::new(File::create(&p).map_err(|e| io_err(&p, e))?))?;
        }
    }
    match no_flow {
        Some(p) => Err(CliError::NoFlow(p)),
        None => Ok(reports),
    }
}

// ---------------------------------------------------------------- train

#[derive(Debug, Clone)]
pub struct TrainOptions {
    pub corpus: PathBuf,
    pub task: Task,
    pub models_dir: PathBuf,
}

/// Held-out metrics of one `train` run.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct TrainMetrics {
    pub sessions: usize,
    pub train_sessions: usize,
    pub test_sessions: usize,
    pub title: Option<ClassReport>,
    pub stage: Option<BTreeMap<ActivityPattern, ClassReport>>,
    pub pattern: Option<PatternEval>,
}

impl TrainMetrics {
    pub fn render(&self) -> String {
        let mut s = format!(
            "sessions: {} ({} train / {} test)\n",
            self.sessions, self.train_sessions, self.test_sessions
        );
        if let Some(r) = &self.title {
            s += &format!("\n[title]\n{}", r.table());
        }
        if let Some(m) = &self.stage {
            for (p, r) in m {
                s += &format!("\n[stage: {}]\n{}", p.as_str(), r.table());
            }
        }
        if let Some(e) = &self.pattern {
            s += &format!(
                "\n[pattern @ {:.2}]\n{}decided {} / {}, mean decision time {:.1} s\n",
                e.threshold,
                e.report.table(),
                e.decided,
                (0..e.report.classes.len()).map(|c| e.report.total(c)).sum::<usize>(),
                e.mean_decision_s
            );
        }
        s
    }
}

fn load_corpus(dir: &Path, cfg: &Config, exec: Exec) -> CliResult<Vec<SessionData>> {
    let (data, missing) = collect_dir(dir, cfg, exec)?;
    if missing > 0 {
        log::warn!("{missing} corpus session(s) had no detectable streaming flow and were skipped");
    }
    if data.is_empty() {
        return Err(validation(format!("{}: corpus has no usable sessions", dir.display())));
    }
    Ok(data)
}

/// Train the selected model(s) on an 80/20 grouped split of a corpus
/// directory, save them under `models_dir` and return held-out metrics.
pub fn cmd_train(opts: &TrainOptions, cfg: &Config, exec: Exec) -> CliResult<TrainMetrics> {
    let data = load_corpus(&opts.corpus, cfg, exec)?;
    let (tr, te) = split_sessions(&data, cfg.training.test_fraction, cfg.training.seed);
    if tr.is_empty() || te.is_empty() {
        return Err(validation("corpus too small for a train/test split"));
    }
    create_dir(&opts.models_dir)?;
    let mut m = TrainMetrics {
        sessions: data.len(),
        train_sessions: tr.len(),
        test_sessions: te.len(),
        ..TrainMetrics::default()
    };
    let dir = &opts.models_dir;
    if matches!(opts.task, Task::Title | Task::All) {
        let model = train_title(&data, &tr, TitleFeatures::PacketGroups, cfg, &cfg.training.title, exec)?;
        m.title = Some(eval_title(&model, &data, &te, TitleFeatures::PacketGroups)?);
        model.save(&dir.join(TITLE_MODEL))?;
    }
    let mut stage_model = None;
    if matches!(opts.task, Task::Stage | Task::All) {
        let model = train_stage(&data, &tr, cfg, exec)?;
        m.stage = Some(eval_stage(&model, &data, &te, &cfg.tracker, exec)?);
        model.save(&dir.join(STAGE_MODEL))?;
        stage_model = Some(model);
    }
    if matches!(opts.task, Task::Pattern | Task::All) {
        let stage = match stage_model {
            Some(s) => s,
            None => {
                let p = dir.join(STAGE_MODEL);
                if !p.exists() {
                    return Err(validation(format!(
                        "pattern training uses the stage model's predictions; {} not found (train the stage task first)",
                        p.display()
                    )));
                }
                Forest::load(&p)?
            }
        };
        let model = train_pattern(&data, &tr, &stage, cfg, exec)?;
        m.pattern = Some(eval_pattern(&stage, &model, &data, &te, &cfg.tracker, cfg.tracker.pattern_threshold, exec)?);
        model.save(&dir.join(PATTERN_MODEL))?;
    }
    write_json(&dir.join(format!("{}.metrics.json", opts.task.as_str())), &m)?;
    Ok(m)
}

// ---------------------------------------------------------------- synth

#[derive(Debug, Clone)]
pub struct SynthOptions {
    pub out: PathBuf,
    /// Profile file; the shipped profiles when absent.
    pub profiles: Option<PathBuf>,
    /// Restrict to these profile ids; all profiles when empty.
    pub only: Vec<String>,
    pub count: usize,
    /// Session duration range in seconds (equal ends for a fixed duration).
    pub duration_s: [f64; 2],
    pub augmented: usize,
    pub seed: u64,
}

pub fn cmd_synth(opts: &SynthOptions, cfg: &Config, exec: Exec) -> CliResult<Vec<ManifestRow>> {
    let set = match &opts.profiles {
        Some(p) => ProfileSet::load(p)?,
        None => ProfileSet::shipped(),
    };
    if opts.duration_s[0] <= cfg.grouper.window_s {
        return Err(validation(format!(
            "session duration {} s must exceed the {} s launch window",
            opts.duration_s[0], cfg.grouper.window_s
        )));
    }
    if opts.count == 0 {
        return Err(validation("--count must be positive"));
    }
    let cc = CorpusConfig {
        profiles: opts.only.clone(),
        sessions_per_profile: opts.count,
        augmented_per_session: opts.augmented,
        duration_s: opts.duration_s,
        seed: opts.seed,
        ..CorpusConfig::default()
    };
    let entries = build_entries(&set, &cc)?;
    Ok(write_corpus(&entries, &opts.out, exec)?)
}

// ---------------------------------------------------------------- report

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageMinutesRow {
    pub title: String,
    pub sessions: usize,
    pub launch_min: f64,
    pub idle_min: f64,
    pub passive_min: f64,
    pub active_min: f64,
}

/// Distribution of per-session mean downstream throughput (Mbit/s).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThroughputRow {
    pub title: String,
    pub pattern: String,
    pub sessions: usize,
    pub mean: f64,
    pub min: f64,
    pub p25: f64,
    pub median: f64,
    pub p75: f64,
    pub max: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QoeFractionRow {
    pub title: String,
    pub pattern: String,
    /// `objective` or `effective`.
    pub mapping: String,
    pub sessions: usize,
    pub good: f64,
    pub medium: f64,
    pub bad: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Aggregates {
    pub stage_minutes: Vec<StageMinutesRow>,
    pub throughput: Vec<ThroughputRow>,
    pub qoe: Vec<QoeFractionRow>,
}

pub const STAGE_MINUTES_CSV: &str = "stage_minutes.csv";
pub const THROUGHPUT_CSV: &str = "throughput.csv";
pub const QOE_FRACTIONS_CSV: &str = "qoe_fractions.csv";

/// Linear-interpolation quantile of sorted values.
fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

fn fractions(levels: &[QoELevel]) -> [f64; 3] {
    let n = levels.len() as f64;
    let share = |l| levels.iter().filter(|x| **x == l).count() as f64 / n;
    [share(QoELevel::Good), share(QoELevel::Medium), share(QoELevel::Bad)]
}

pub fn aggregate(reports: &[SessionReport]) -> Aggregates {
    let mut by_title: BTreeMap<&str, Vec<&SessionReport>> = BTreeMap::new();
    let mut by_group: BTreeMap<(&str, &str), Vec<&SessionReport>> = BTreeMap::new();
    for r in reports {
        by_title.entry(r.title.title.name()).or_default().push(r);
        by_group.entry((r.title.title.name(), r.pattern.pattern.as_str())).or_default().push(r);
    }
    let stage_minutes = by_title
        .iter()
        .map(|(title, rs)| {
            let n = rs.len() as f64;
            let mins = |s: StageLabel| rs.iter().map(|r| r.stage_seconds.get(&s).copied().unwrap_or(0.0)).sum::<f64>() / n / 60.0;
            StageMinutesRow {
                title: title.to_string(),
                sessions: rs.len(),
                launch_min: mins(StageLabel::Launch),
                idle_min: mins(StageLabel::Idle),
                passive_min: mins(StageLabel::Passive),
                active_min: mins(StageLabel::Active),
            }
        })
        .collect();
    let mut throughput = Vec::new();
    let mut qoe = Vec::new();
    for ((title, pattern), rs) in &by_group {
        let mut v: Vec<f64> = rs.iter().map(|r| r.mean_down_mbps).collect();
        v.sort_by(f64::total_cmp);
        throughput.push(ThroughputRow {
            title: title.to_string(),
            pattern: pattern.to_string(),
            sessions: v.len(),
            mean: v.iter().sum::<f64>() / v.len() as f64,
            min: v[0],
            p25: quantile(&v, 0.25),
            median: quantile(&v, 0.5),
            p75: quantile(&v, 0.75),
            max: v[v.len() - 1],
        });
        let families: [(&str, Vec<QoELevel>); 2] = [
            ("objective", rs.iter().filter_map(|r| r.objective_qoe).collect()),
            ("effective", rs.iter().filter_map(|r| r.effective_qoe).collect()),
        ];
        for (mapping, levels) in families {
            if levels.is_empty() {
                continue;
            }
            let [good, medium, bad] = fractions(&levels);
            qoe.push(QoeFractionRow {
                title: title.to_string(),
                pattern: pattern.to_string(),
                mapping: mapping.to_string(),
                sessions: levels.len(),
                good,
                medium,
                bad,
            });
        }
    }
    Aggregates {
        stage_minutes,
        throughput,
        qoe,
    }
}

/// Every `*.report.json` in `dir`, in file-name order.
pub fn read_reports(dir: &Path) -> CliResult<Vec<SessionReport>> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| io_err(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.file_name().is_some_and(|n| n.to_string_lossy().ends_with(REPORT_SUFFIX)))
        .collect();
    paths.sort();
    paths
        .iter()
        .map(|p| {
            let f = File::open(p).map_err(|e| io_err(p, e))?;
            serde_json::from_reader(std::io::BufReader::new(f)).map_err(|e| CliError::Core(Error::from(e)))
        })
        .collect()
}

fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> CliResult<()> {
    let mut w = csv::Writer::from_writer(File::create(path).map_err(|e| io_err(path, e))?);
    for r in rows {
        w.serialize(r).map_err(Error::from)?;
    }
    w.flush().map_err(|e| io_err(path, e))
}

/// Aggregate session reports into stage-minute, throughput and QoE
/// fraction tables, written as CSV into `out`.
pub fn cmd_report(reports_dir: &Path, out: &Path) -> CliResult<Aggregates> {
    let reports = read_reports(reports_dir)?;
    if reports.is_empty() {
        return Err(validation(format!("{}: no *{REPORT_SUFFIX} files", reports_dir.display())));
    }
    let agg = aggregate(&reports);
    create_dir(out)?;
    write_csv(&out.join(STAGE_MINUTES_CSV), &agg.stage_minutes)?;
    write_csv(&out.join(THROUGHPUT_CSV), &agg.throughput)?;
    write_csv(&out.join(QOE_FRACTIONS_CSV), &agg.qoe)?;
    Ok(agg)
}

// ---------------------------------------------------------------- importance

#[derive(Debug, Clone)]
pub struct ImportanceOptions {
    pub corpus: PathBuf,
    pub task: Task,
    pub models_dir: PathBuf,
    pub repeats: usize,
    /// Cap on evaluation rows for the stage and pattern tasks.
    pub max_rows: usize,
    pub out: Option<PathBuf>,
}

fn class_targets(model: &Forest, rows: Vec<(Vec<f64>, String)>) -> (Vec<Vec<f64>>, Vec<usize>) {
    rows.into_iter()
        .filter_map(|(r, l)| model.classes.iter().position(|c| *c == l).map(|t| (r, t)))
        .unzip()
}

/// Permutation importance of a trained model on the held-out sessions of
/// the same split `train` uses.
pub fn cmd_importance(opts: &ImportanceOptions, cfg: &Config, exec: Exec) -> CliResult<Vec<Importance>> {
    let data = load_corpus(&opts.corpus, cfg, exec)?;
    let (_, te) = split_sessions(&data, cfg.training.test_fraction, cfg.training.seed);
    let dir = &opts.models_dir;
    let seed = cfg.training.seed;
    let (model, rows, targets) = match opts.task {
        Task::Title => {
            let model = Forest::load(&dir.join(TITLE_MODEL))?;
            let rows = te
                .iter()
                .map(|&i| (data[i].summary.title_features.clone(), data[i].labels.title.name().to_string()))
                .collect();
            let (rows, targets) = class_targets(&model, rows);
            (model, rows, targets)
        }
        Task::Stage => {
            let model = Forest::load(&dir.join(STAGE_MODEL))?;
            let mut rows = Vec::new();
            for &i in &te {
                rows.extend(stage_rows(&data[i], &cfg.tracker)?.into_iter().map(|(r, s)| (r, s.as_str().to_string())));
            }
            if rows.len() > opts.max_rows {
                let step = rows.len().div_ceil(opts.max_rows);
                rows = rows.into_iter().step_by(step).collect();
            }
            debug_assert_eq!(model.classes, stage_classes());
            let (rows, targets) = class_targets(&model, rows);
            (model, rows, targets)
        }
        Task::Pattern => {
            let stage = Forest::load(&dir.join(STAGE_MODEL))?;
            let model = Forest::load(&dir.join(PATTERN_MODEL))?;
            let (rows, targets) = pattern_rows(&data, &te, &stage, &cfg.tracker, opts.max_rows, seed, exec)?;
            (model, rows, targets)
        }
        Task::All => return Err(validation("importance needs a single task")),
    };
    if rows.is_empty() {
        return Err(validation("no held-out rows for this task"));
    }
    let ranked = ranked_importance(&model, &rows, &targets, seed, opts.repeats.max(1), exec)?;
    if let Some(out) = &opts.out {
        create_dir(out)?;
        write_csv(&out.join(format!("importance-{}.csv", opts.task.as_str())), &ranked)?;
    }
    Ok(ranked)
}
