//! Training and held-out evaluation for the title, stage and pattern
//! tasks, shared by the CLI and the experiment tests.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs::File;
use std::path::Path;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::capture::{read_labels, CaptureReader, LabeledSession};
use crate::config::Config;
use crate::engine::{summarize, FlowSummary};
use crate::error::{Error, Result};
use crate::forest::{permutation_importance, train, Dataset, Forest, ForestParams};
use crate::grouper::{baseline_names, feature_names};
use crate::model::{ActivityPattern, GameTitle, StageLabel};
use crate::par::{map_slice, Exec};
use crate::qoe::{read_samples, QoESample};
use crate::synth::{read_manifest, CorpusEntry, ManifestRow};
use crate::tracker::{prefix_matrices, session_features, transition_names, PatternInference, TrackerConfig, TransitionMatrix, VOLUMETRIC_NAMES};

/// One labeled session reduced to what training and evaluation need.
#[derive(Debug, Clone)]
pub struct SessionData {
    pub session_id: String,
    /// Sessions sharing a base id (augmented copies) never straddle a split.
    pub base_id: String,
    /// Stratum for splitting, normally the generating profile.
    pub group: String,
    pub labels: LabeledSession,
    pub summary: FlowSummary,
    pub qoe: Vec<QoESample>,
}

fn keep_found(found: Vec<Result<Option<SessionData>>>) -> Result<(Vec<SessionData>, usize)> {
    let mut out = Vec::new();
    let mut missing = 0;
    for r in found {
        match r? {
            Some(d) => out.push(d),
            None => missing += 1,
        }
    }
    Ok((out, missing))
}

/// Synthesize and summarize corpus entries. Entries without a detected
/// streaming flow are dropped and counted.
pub fn collect_synth(entries: &[CorpusEntry], cfg: &Config, exec: Exec) -> Result<(Vec<SessionData>, usize)> {
    let found = map_slice(exec, entries, |e| -> Result<Option<SessionData>> {
        let plan = e.plan()?;
        let summary = summarize(e.packets(&plan).map(Ok), cfg)?;
        let Some(primary) = summary.primary() else {
            log::warn!("{}: no streaming flow detected", e.session_id);
            return Ok(None);
        };
        Ok(Some(SessionData {
            session_id: e.session_id.clone(),
            base_id: e.base_id.clone(),
            group: e.profile_id.clone(),
            labels: plan.labels.clone(),
            summary: primary.clone(),
            qoe: plan.qoe.clone(),
        }))
    });
    keep_found(found)
}

fn load_row(dir: &Path, row: &ManifestRow, cfg: &Config) -> Result<Option<SessionData>> {
    let labels = read_labels(row.labels_path(dir))?;
    let summary = summarize(CaptureReader::open(row.capture_path(dir))?, cfg)?;
    let Some(primary) = summary.primary() else {
        log::warn!("{}: no streaming flow detected", row.session_id);
        return Ok(None);
    };
    let qp = row.qoe_path(dir);
    let qoe = if qp.exists() {
        read_samples(File::open(&qp).map_err(|e| Error::io(&qp, e))?, cfg.tracker.slot_s)?
    } else {
        Vec::new()
    };
    Ok(Some(SessionData {
        session_id: row.session_id.clone(),
        base_id: row.base_id.clone(),
        group: row.profile.clone(),
        labels,
        summary: primary.clone(),
        qoe,
    }))
}

/// Load a corpus directory written by the synthesizer (or laid out the
/// same way from real captures).
pub fn collect_dir(dir: &Path, cfg: &Config, exec: Exec) -> Result<(Vec<SessionData>, usize)> {
    let rows = read_manifest(dir)?;
    keep_found(map_slice(exec, &rows, |r| load_row(dir, r, cfg)))
}

/// Grouped, stratified train/test split: within each stratum,
/// `test_fraction` of the groups (rounded; at least one when a stratum has
/// two or more) go to test. Returns one flag per item, `true` for test.
pub fn split_groups(keys: &[(&str, &str)], test_fraction: f64, seed: u64) -> Vec<bool> {
    let mut strata: BTreeMap<&str, Vec<&str>> = BTreeMap::new();
    for (stratum, group) in keys {
        let v = strata.entry(stratum).or_default();
        if !v.contains(group) {
            v.push(group);
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut test: Vec<&str> = Vec::new();
    for (_, groups) in strata {
        let mut k = (groups.len() as f64 * test_fraction).round() as usize;
        if k == 0 && groups.len() >= 2 && test_fraction > 0.0 {
            k = 1;
        }
        let k = k.min(groups.len());
        test.extend(sample(&mut rng, groups.len(), k).into_iter().map(|i| groups[i]));
    }
    keys.iter().map(|(_, g)| test.contains(g)).collect()
}

pub fn split_sessions(data: &[SessionData], test_fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let keys: Vec<(&str, &str)> = data.iter().map(|d| (d.group.as_str(), d.base_id.as_str())).collect();
    let flags = split_groups(&keys, test_fraction, seed);
    let (mut tr, mut te) = (Vec::new(), Vec::new());
    for (i, t) in flags.into_iter().enumerate() {
        if t {
            te.push(i)
        } else {
            tr.push(i)
        }
    }
    (tr, te)
}

/// Per-class held-out accuracy with a confusion matrix. Predictions
/// outside the class list (e.g. undecided) land in an extra last column.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassReport {
    pub task: String,
    pub classes: Vec<String>,
    /// `confusion[truth][predicted]`; the extra column counts abstentions.
    pub confusion: Vec<Vec<usize>>,
}

impl ClassReport {
    pub fn new(task: &str, classes: Vec<String>) -> Self {
        let n = classes.len();
        ClassReport {
            task: task.to_string(),
            classes,
            confusion: vec![vec![0; n + 1]; n],
        }
    }

    pub fn record(&mut self, truth: usize, predicted: Option<usize>) {
        let col = predicted.unwrap_or(self.classes.len());
        self.confusion[truth][col] += 1;
    }

    pub fn total(&self, class: usize) -> usize {
        self.confusion[class].iter().sum()
    }

    pub fn class_accuracy(&self, class: usize) -> Option<f64> {
        let t = self.total(class);
        (t > 0).then(|| self.confusion[class][class] as f64 / t as f64)
    }

    pub fn overall(&self) -> f64 {
        let hits: usize = (0..self.classes.len()).map(|c| self.confusion[c][c]).sum();
        let total: usize = (0..self.classes.len()).map(|c| self.total(c)).sum();
        if total == 0 {
            0.0
        } else {
            hits as f64 / total as f64
        }
    }

    /// Lowest accuracy over classes that have test samples.
    pub fn min_class(&self) -> f64 {
        (0..self.classes.len())
            .filter_map(|c| self.class_accuracy(c))
            .fold(1.0, f64::min)
    }

    pub fn table(&self) -> String {
        let mut s = String::new();
        let w = self.classes.iter().map(|c| c.len()).max().unwrap_or(5).max(7);
        let _ = writeln!(s, "{:<w$}  {:>8}  {:>6}", "class", "accuracy", "n");
        for (i, c) in self.classes.iter().enumerate() {
            match self.class_accuracy(i) {
                Some(a) => {
                    let _ = writeln!(s, "{c:<w$}  {:>8.4}  {:>6}", a, self.total(i));
                }
                None => {
                    let _ = writeln!(s, "{c:<w$}  {:>8}  {:>6}", "-", 0);
                }
            }
        }
        let _ = writeln!(s, "{:<w$}  {:>8.4}", "overall", self.overall());
        s
    }
}

fn class_index(classes: &[String], label: &str) -> Option<usize> {
    classes.iter().position(|c| c == label)
}

/// Which launch representation a title model consumes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TitleFeatures {
    PacketGroups,
    Baseline,
}

fn title_row(d: &SessionData, which: TitleFeatures) -> &[f64] {
    match which {
        TitleFeatures::PacketGroups => &d.summary.title_features,
        TitleFeatures::Baseline => &d.summary.baseline,
    }
}

/// Title model over the catalog sessions among `idx`; sessions of
/// unknown titles are skipped.
pub fn train_title(data: &[SessionData], idx: &[usize], which: TitleFeatures, cfg: &Config, params: &ForestParams, exec: Exec) -> Result<Forest> {
    let mut rows = Vec::new();
    let mut labels = Vec::new();
    for &i in idx {
        let d = &data[i];
        if d.labels.title.is_known() {
            rows.push(title_row(d, which).to_vec());
            labels.push(d.labels.title.name());
        }
    }
    let classes: Vec<String> = GameTitle::catalog()
        .map(|t| t.name().to_string())
        .filter(|c| labels.contains(&c.as_str()))
        .collect();
    if classes.len() < 2 {
        return Err(Error::Training(format!("title task needs at least 2 classes, found {}", classes.len())));
    }
    let ds = Dataset::with_classes(classes, rows, &labels)?;
    let names = match which {
        TitleFeatures::PacketGroups => feature_names(&cfg.grouper),
        TitleFeatures::Baseline => baseline_names(&cfg.grouper),
    };
    let task = match which {
        TitleFeatures::PacketGroups => "title",
        TitleFeatures::Baseline => "title-baseline",
    };
    Ok(train(&ds, params, exec)?.with_task(task, names))
}

pub fn eval_title(model: &Forest, data: &[SessionData], idx: &[usize], which: TitleFeatures) -> Result<ClassReport> {
    let mut rep = ClassReport::new(&model.task, model.classes.clone());
    for &i in idx {
        let d = &data[i];
        let Some(truth) = class_index(&model.classes, d.labels.title.name()) else { continue };
        let p = model.predict_class(title_row(d, which))?;
        rep.record(truth, Some(p));
    }
    Ok(rep)
}

/// Gameplay stage class order for stage models.
pub fn stage_classes() -> Vec<String> {
    StageLabel::GAMEPLAY.iter().map(|s| s.as_str().to_string()).collect()
}

pub fn stage_feature_names() -> Vec<String> {
    VOLUMETRIC_NAMES.iter().map(|n| format!("smoothed_{n}")).collect()
}

/// (smoothed features, ground-truth stage) for every classified slot.
/// Slots the pipeline still treats as launch, or whose ground truth is
/// Launch, are skipped.
pub fn stage_rows(d: &SessionData, cfg: &TrackerConfig) -> Result<Vec<(Vec<f64>, StageLabel)>> {
    let feats = session_features(&d.summary.volumetrics, cfg)?;
    Ok(feats
        .iter()
        .filter(|f| !f.launch)
        .filter_map(|f| {
            let truth = d.labels.stage_at(f.raw.slot.start() + 0.5 * f.raw.slot.width);
            (truth != StageLabel::Launch).then(|| (f.smoothed.to_vec(), truth))
        })
        .collect())
}

/// Drop exact repeats of a (row, label) pair, keeping first occurrences.
/// Prefix matrices repeat verbatim while a stage persists; without this,
/// states shared by both patterns would be voted for by whichever pattern
/// happens to dwell there longer, with near-unanimous confidence.
fn dedup_rows<L: Copy + Ord>(rows: Vec<(Vec<f64>, L)>) -> Vec<(Vec<f64>, L)> {
    let mut seen = std::collections::BTreeSet::new();
    rows.into_iter()
        .filter(|(r, l)| seen.insert((r.iter().map(|v| v.to_bits()).collect::<Vec<u64>>(), *l)))
        .collect()
}

fn subsample<T: Clone>(items: Vec<T>, cap: usize, seed: u64) -> Vec<T> {
    if items.len() <= cap {
        return items;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut keep = sample(&mut rng, items.len(), cap).into_vec();
    keep.sort_unstable();
    keep.into_iter().map(|i| items[i].clone()).collect()
}

pub fn train_stage(data: &[SessionData], idx: &[usize], cfg: &Config, exec: Exec) -> Result<Forest> {
    let per = map_slice(exec, idx, |&i| stage_rows(&data[i], &cfg.tracker));
    let mut all = Vec::new();
    for r in per {
        all.extend(r?);
    }
    let all = subsample(all, cfg.training.max_stage_rows, cfg.training.seed);
    let labels: Vec<&str> = all.iter().map(|(_, s)| s.as_str()).collect();
    let rows: Vec<Vec<f64>> = all.iter().map(|(r, _)| r.clone()).collect();
    let ds = Dataset::with_classes(stage_classes(), rows, &labels)?;
    if ds.targets.iter().all(|t| *t == ds.targets[0]) {
        return Err(Error::Training("stage task needs at least 2 classes".into()));
    }
    Ok(train(&ds, &cfg.training.stage, exec)?.with_task("stage", stage_feature_names()))
}

/// Per-slot stage predictions for one session, Launch where the pipeline
/// has not left the launch phase.
pub fn predict_stages(d: &SessionData, stage_model: &Forest, cfg: &TrackerConfig) -> Result<Vec<StageLabel>> {
    let feats = session_features(&d.summary.volumetrics, cfg)?;
    feats
        .iter()
        .map(|f| {
            if f.launch {
                return Ok(StageLabel::Launch);
            }
            let p = stage_model.predict(&f.smoothed)?;
            p.label
                .parse::<StageLabel>()
                .map_err(|_| Error::ModelFormat(format!("stage model class `{}`", p.label)))
        })
        .collect()
}

/// Held-out per-slot stage accuracy, one report per activity pattern.
pub fn eval_stage(
    model: &Forest,
    data: &[SessionData],
    idx: &[usize],
    cfg: &TrackerConfig,
    exec: Exec,
) -> Result<BTreeMap<ActivityPattern, ClassReport>> {
    let classes = stage_classes();
    let per = map_slice(exec, idx, |&i| -> Result<(ActivityPattern, Vec<(usize, usize)>)> {
        let d = &data[i];
        let pred = predict_stages(d, model, cfg)?;
        let mut pairs = Vec::new();
        for (k, p) in pred.iter().enumerate() {
            let t = d.labels.stage_at((k as f64 + 0.5) * cfg.slot_s);
            if let (Some(ti), Some(pi)) = (t.gameplay_index(), p.gameplay_index()) {
                pairs.push((ti, pi));
            }
        }
        Ok((d.labels.pattern, pairs))
    });
    let mut out: BTreeMap<ActivityPattern, ClassReport> = BTreeMap::new();
    for r in per {
        let (pattern, pairs) = r?;
        let rep = out
            .entry(pattern)
            .or_insert_with(|| ClassReport::new(&format!("stage/{}", pattern.as_str()), classes.clone()));
        for (t, p) in pairs {
            rep.record(t, Some(p));
        }
    }
    Ok(out)
}

pub fn pattern_classes() -> Vec<String> {
    ActivityPattern::DECIDED.iter().map(|p| p.as_str().to_string()).collect()
}

/// Pattern model on prefix transition matrices of the tracker's own stage
/// predictions for the training sessions.
/// Equal numbers of sessions per pattern: the larger groups are subsampled.
fn balance_sessions(data: &[SessionData], idx: &[usize], seed: u64) -> Vec<usize> {
    let mut by_pattern: BTreeMap<ActivityPattern, Vec<usize>> = BTreeMap::new();
    for &i in idx {
        by_pattern.entry(data[i].labels.pattern).or_default().push(i);
    }
    let n = by_pattern.values().map(Vec::len).min().unwrap_or(0);
    let mut out: Vec<usize> = by_pattern
        .into_values()
        .flat_map(|members| subsample(members, n, seed))
        .collect();
    out.sort_unstable();
    out
}

pub fn train_pattern(data: &[SessionData], idx: &[usize], stage_model: &Forest, cfg: &Config, exec: Exec) -> Result<Forest> {
    let idx = balance_sessions(data, idx, cfg.training.seed ^ 0xb1);
    let per = map_slice(exec, &idx, |&i| -> Result<Vec<(Vec<f64>, ActivityPattern)>> {
        let d = &data[i];
        let stages = predict_stages(d, stage_model, &cfg.tracker)?;
        Ok(prefix_matrices(&stages)?
            .into_iter()
            .map(|m| (m.features(), d.labels.pattern))
            .collect())
    });
    let mut all = Vec::new();
    for r in per {
        all.extend(r?);
    }
    let all = subsample(dedup_rows(all), cfg.training.max_pattern_rows, cfg.training.seed ^ 0x5a5a);
    let labels: Vec<&str> = all.iter().map(|(_, p)| p.as_str()).collect();
    let rows: Vec<Vec<f64>> = all.iter().map(|(r, _)| r.clone()).collect();
    let ds = Dataset::with_classes(pattern_classes(), rows, &labels)?;
    if ds.targets.iter().all(|t| *t == ds.targets[0]) {
        return Err(Error::Training("pattern task needs at least 2 classes".into()));
    }
    Ok(train(&ds, &cfg.training.pattern, exec)?.with_task("pattern", transition_names()))
}

/// Replays the tracker's gated, latched pattern decision over a per-slot
/// stage sequence.
pub fn decide_pattern(stages: &[StageLabel], slot_s: f64, model: &Forest, threshold: f64) -> Result<PatternInference> {
    let mut m = TransitionMatrix::default();
    let mut prev: Option<StageLabel> = None;
    let mut last = PatternInference::undecided(0.0);
    for (k, &s) in stages.iter().enumerate() {
        if s == StageLabel::Launch {
            continue;
        }
        if let Some(p) = prev {
            m.record(p, s)?;
            let inf = crate::tracker::infer_pattern(&m, model, threshold, (k + 1) as f64 * slot_s)?;
            if inf.decided_at.is_some() {
                return Ok(inf);
            }
            last = inf;
        }
        prev = Some(s);
    }
    Ok(last)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatternEval {
    pub threshold: f64,
    /// Undecided sessions count as wrong.
    pub report: ClassReport,
    pub decided: usize,
    pub mean_decision_s: f64,
}

pub fn eval_pattern(
    stage_model: &Forest,
    pattern_model: &Forest,
    data: &[SessionData],
    idx: &[usize],
    cfg: &TrackerConfig,
    threshold: f64,
    exec: Exec,
) -> Result<PatternEval> {
    let classes = pattern_classes();
    let per = map_slice(exec, idx, |&i| -> Result<(usize, PatternInference)> {
        let d = &data[i];
        let stages = predict_stages(d, stage_model, cfg)?;
        let truth = class_index(&classes, d.labels.pattern.as_str())
            .ok_or_else(|| Error::Validation(format!("{}: session pattern must be decided", d.session_id)))?;
        Ok((truth, decide_pattern(&stages, cfg.slot_s, pattern_model, threshold)?))
    });
    let mut report = ClassReport::new("pattern", classes.clone());
    let mut times = Vec::new();
    for r in per {
        let (truth, inf) = r?;
        let pred = inf.decided_at.and_then(|_| class_index(&classes, inf.pattern.as_str()));
        report.record(truth, pred);
        if let Some(t) = inf.decided_at {
            times.push(t);
        }
    }
    let mean = if times.is_empty() {
        f64::NAN
    } else {
        times.iter().sum::<f64>() / times.len() as f64
    };
    Ok(PatternEval {
        threshold,
        report,
        decided: times.len(),
        mean_decision_s: mean,
    })
}

/// Held-out prefix-matrix rows for the pattern task, built from the
/// tracker's stage predictions.
pub fn pattern_rows(
    data: &[SessionData],
    idx: &[usize],
    stage_model: &Forest,
    cfg: &TrackerConfig,
    cap: usize,
    seed: u64,
    exec: Exec,
) -> Result<(Vec<Vec<f64>>, Vec<usize>)> {
    let classes = pattern_classes();
    let per = map_slice(exec, idx, |&i| -> Result<Vec<(Vec<f64>, usize)>> {
        let d = &data[i];
        let t = class_index(&classes, d.labels.pattern.as_str())
            .ok_or_else(|| Error::Validation(format!("{}: session pattern must be decided", d.session_id)))?;
        let stages = predict_stages(d, stage_model, cfg)?;
        Ok(prefix_matrices(&stages)?.into_iter().map(|m| (m.features(), t)).collect())
    });
    let mut all = Vec::new();
    for r in per {
        all.extend(r?);
    }
    let all = subsample(all, cap, seed);
    Ok(all.into_iter().unzip())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Importance {
    pub attribute: String,
    pub importance: f64,
}

/// Permutation importance, ranked from most to least important (ties keep
/// attribute order).
pub fn ranked_importance(
    model: &Forest,
    rows: &[Vec<f64>],
    targets: &[usize],
    seed: u64,
    repeats: usize,
    exec: Exec,
) -> Result<Vec<Importance>> {
    let imp = permutation_importance(model, rows, targets, seed, repeats, exec)?;
    let names: Vec<String> = if model.feature_names.len() == model.arity {
        model.feature_names.clone()
    } else {
        (0..model.arity).map(|i| format!("x{i}")).collect()
    };
    let mut out: Vec<Importance> = names
        .into_iter()
        .zip(imp)
        .map(|(attribute, importance)| Importance { attribute, importance })
        .collect();
    out.sort_by(|a, b| b.importance.total_cmp(&a.importance));
    Ok(out)
}
