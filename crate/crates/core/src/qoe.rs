//! Objective and context-calibrated (effective) QoE levels.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ActivityPattern, GameTitle, SlotIndex, StageLabel};

pub const CALIBRATION_VERSION: u32 = 1;

/// The calibration table shipped with the crate.
pub const DEFAULT_CALIBRATION: &str = include_str!("../data/calibration.csv");

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum QoELevel {
    Bad,
    Medium,
    Good,
}

impl QoELevel {
    pub const ALL: [QoELevel; 3] = [QoELevel::Good, QoELevel::Medium, QoELevel::Bad];

    pub fn as_str(self) -> &'static str {
        match self {
            QoELevel::Bad => "bad",
            QoELevel::Medium => "medium",
            QoELevel::Good => "good",
        }
    }
}

impl fmt::Display for QoELevel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QoESample {
    pub frame_rate: f64,
    /// bit/s
    pub throughput: f64,
    /// ms
    pub latency: f64,
    pub loss_rate: f64,
    pub interval: SlotIndex,
}

impl QoESample {
    pub fn validate(&self) -> Result<()> {
        let ok = self.frame_rate >= 0.0
            && self.throughput >= 0.0
            && self.latency >= 0.0
            && (0.0..=1.0).contains(&self.loss_rate);
        if ok {
            Ok(())
        } else {
            Err(Error::Validation(format!("QoE sample out of range: {self:?}")))
        }
    }
}

/// Edges for a metric where larger is better.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HigherBetter {
    pub bad_below: f64,
    pub good_from: f64,
}

impl HigherBetter {
    pub fn level(&self, v: f64) -> QoELevel {
        if v < self.bad_below {
            QoELevel::Bad
        } else if v >= self.good_from {
            QoELevel::Good
        } else {
            QoELevel::Medium
        }
    }
}

/// Edges for a metric where smaller is better.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LowerBetter {
    pub good_max: f64,
    pub bad_above: f64,
}

impl LowerBetter {
    pub fn level(&self, v: f64) -> QoELevel {
        if v <= self.good_max {
            QoELevel::Good
        } else if v > self.bad_above {
            QoELevel::Bad
        } else {
            QoELevel::Medium
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveThresholds {
    pub frame_rate: HigherBetter,
    pub throughput_mbps: HigherBetter,
    pub latency_ms: LowerBetter,
    pub loss_rate: LowerBetter,
}

impl Default for ObjectiveThresholds {
    fn default() -> Self {
        ObjectiveThresholds {
            frame_rate: HigherBetter {
                bad_below: 30.0,
                good_from: 50.0,
            },
            throughput_mbps: HigherBetter {
                bad_below: 8.0,
                good_from: 15.0,
            },
            latency_ms: LowerBetter {
                good_max: 40.0,
                bad_above: 80.0,
            },
            loss_rate: LowerBetter {
                good_max: 0.001,
                bad_above: 0.01,
            },
        }
    }
}

/// Per-metric verdicts in order frame rate, throughput, latency, loss.
pub fn verdicts(sample: &QoESample, fps: &HigherBetter, thr: &HigherBetter, t: &ObjectiveThresholds) -> [QoELevel; 4] {
    [
        fps.level(sample.frame_rate),
        thr.level(sample.throughput / 1e6),
        t.latency_ms.level(sample.latency),
        t.loss_rate.level(sample.loss_rate),
    ]
}

/// Worst verdict over the four metrics against the objective bands.
pub fn objective_level(sample: &QoESample, thresholds: &ObjectiveThresholds) -> QoELevel {
    verdicts(sample, &thresholds.frame_rate, &thresholds.throughput_mbps, thresholds)
        .into_iter()
        .min()
        .unwrap_or(QoELevel::Bad)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ContextSnapshot {
    pub title: GameTitle,
    pub pattern: ActivityPattern,
    pub stage: StageLabel,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CalibratedMetric {
    FrameRate,
    ThroughputMbps,
}

impl FromStr for CalibratedMetric {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "frame_rate" => Ok(CalibratedMetric::FrameRate),
            "throughput_mbps" => Ok(CalibratedMetric::ThroughputMbps),
            other => Err(Error::Validation(format!("unknown calibrated metric `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
enum Scope {
    Title(GameTitle),
    Pattern(ActivityPattern),
    Any,
}

/// Which table level supplied the bands of an effective verdict.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BandSource {
    Title,
    Pattern,
    Any,
    Objective,
}

#[derive(Debug, Deserialize)]
struct CalibrationRow {
    scope: String,
    key: String,
    stage: String,
    metric: String,
    bad_below: f64,
    good_from: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct CalibrationTable {
    bands: BTreeMap<(Scope, StageLabel, CalibratedMetric), HigherBetter>,
}

impl CalibrationTable {
    pub fn shipped() -> Self {
        CalibrationTable::parse(DEFAULT_CALIBRATION.as_bytes()).expect("shipped calibration table parses")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        CalibrationTable::parse(&bytes[..])
    }

    /// Parse the CSV schema `scope,key,stage,metric,bad_below,good_from`.
    /// Lines starting with `#` are comments; a `version N` comment newer
    /// than this build is rejected.
    pub fn parse<R: Read>(mut reader: R) -> Result<Self> {
        let mut text = String::new();
        reader
            .read_to_string(&mut text)
            .map_err(|e| Error::Config(format!("calibration table: {e}")))?;
        for line in text.lines().take_while(|l| l.starts_with('#')) {
            if let Some(v) = line.split("version").nth(1) {
                let v: u32 = v.trim().parse().map_err(|_| Error::Config(format!("bad version line `{line}`")))?;
                if v > CALIBRATION_VERSION {
                    return Err(Error::Config(format!("calibration table version {v} is newer than supported")));
                }
            }
        }
        let mut rdr = csv::ReaderBuilder::new()
            .comment(Some(b'#'))
            .trim(csv::Trim::All)
            .from_reader(text.as_bytes());
        let headers = rdr.headers()?.clone();
        for col in ["scope", "key", "stage", "metric", "bad_below", "good_from"] {
            if !headers.iter().any(|h| h == col) {
                return Err(Error::Schema { column: col.into() });
            }
        }
        let mut table = CalibrationTable::default();
        for row in rdr.deserialize() {
            let row: CalibrationRow = row?;
            let scope = match row.scope.as_str() {
                "title" => Scope::Title(
                    GameTitle::lookup(&row.key)
                        .ok_or_else(|| Error::Validation(format!("calibration row names unknown title `{}`", row.key)))?,
                ),
                "pattern" => Scope::Pattern(row.key.parse()?),
                "any" => Scope::Any,
                other => return Err(Error::Validation(format!("unknown calibration scope `{other}`"))),
            };
            let stage: StageLabel = row.stage.parse()?;
            let metric: CalibratedMetric = row.metric.parse()?;
            if !(row.bad_below <= row.good_from) || row.bad_below < 0.0 {
                return Err(Error::Validation(format!(
                    "calibration row {}/{}/{}/{}: bad_below must be <= good_from",
                    row.scope, row.key, row.stage, row.metric
                )));
            }
            table.bands.insert(
                (scope, stage, metric),
                HigherBetter {
                    bad_below: row.bad_below,
                    good_from: row.good_from,
                },
            );
        }
        Ok(table)
    }

    pub fn len(&self) -> usize {
        self.bands.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bands.is_empty()
    }

    /// Bands for one metric: title row, then pattern row, then any row,
    /// then the objective bands.
    pub fn bands_for(
        &self,
        ctx: &ContextSnapshot,
        metric: CalibratedMetric,
        objective: &ObjectiveThresholds,
    ) -> (HigherBetter, BandSource) {
        let tries = [
            (Scope::Title(ctx.title), BandSource::Title),
            (Scope::Pattern(ctx.pattern), BandSource::Pattern),
            (Scope::Any, BandSource::Any),
        ];
        for (scope, source) in tries {
            if let Some(b) = self.bands.get(&(scope, ctx.stage, metric)) {
                return (*b, source);
            }
        }
        let b = match metric {
            CalibratedMetric::FrameRate => objective.frame_rate,
            CalibratedMetric::ThroughputMbps => objective.throughput_mbps,
        };
        (b, BandSource::Objective)
    }
}

/// Effective level plus where the frame-rate/throughput bands came from.
pub fn effective_level_with_source(
    sample: &QoESample,
    ctx: &ContextSnapshot,
    table: &CalibrationTable,
    objective: &ObjectiveThresholds,
) -> (QoELevel, BandSource) {
    let (fps, s1) = table.bands_for(ctx, CalibratedMetric::FrameRate, objective);
    let (thr, s2) = table.bands_for(ctx, CalibratedMetric::ThroughputMbps, objective);
    let source = if s1 == BandSource::Objective || s2 == BandSource::Objective {
        BandSource::Objective
    } else {
        s1
    };
    let level = verdicts(sample, &fps, &thr, objective)
        .into_iter()
        .min()
        .unwrap_or(QoELevel::Bad);
    (level, source)
}

/// Worst verdict with context-specific frame-rate and throughput bands.
/// Falling back to objective bands is logged at debug level; callers that
/// need a per-session warning use [`effective_level_with_source`].
pub fn effective_level(
    sample: &QoESample,
    ctx: &ContextSnapshot,
    table: &CalibrationTable,
    objective: &ObjectiveThresholds,
) -> QoELevel {
    let (level, source) = effective_level_with_source(sample, ctx, table, objective);
    if source == BandSource::Objective {
        log::debug!("no calibration row for {:?}; objective bands used", ctx);
    }
    level
}

/// Plurality of interval levels; ties go to the worse level.
pub fn session_level(levels: &[QoELevel]) -> Result<QoELevel> {
    if levels.is_empty() {
        return Err(Error::InvalidArgument("session level of an empty interval list".into()));
    }
    let mut counts = [0usize; 3];
    for l in levels {
        counts[*l as usize] += 1;
    }
    let mut best = QoELevel::Bad;
    for l in [QoELevel::Medium, QoELevel::Good] {
        if counts[l as usize] > counts[best as usize] {
            best = l;
        }
    }
    Ok(best)
}


pub const QOE_COLUMNS: [&str; 5] = ["slot", "frame_rate", "throughput_bps", "latency_ms", "loss_rate"];

/// Write per-interval QoE samples as CSV.
pub fn write_samples(samples: &[QoESample], out: impl Write) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(QOE_COLUMNS)?;
    for s in samples {
        w.write_record([
            s.interval.index.to_string(),
            format!("{}", s.frame_rate),
            format!("{}", s.throughput),
            format!("{}", s.latency),
            format!("{}", s.loss_rate),
        ])?;
    }
    w.flush().map_err(|e| Error::io("qoe samples", e))?;
    Ok(())
}

/// Read per-interval QoE samples; `width` is the interval width in seconds.
pub fn read_samples(input: impl Read, width: f64) -> Result<Vec<QoESample>> {
    let mut r = csv::Reader::from_reader(input);
    let headers = r.headers()?.clone();
    let mut col = [0usize; 5];
    for (i, name) in QOE_COLUMNS.iter().enumerate() {
        col[i] = headers
            .iter()
            .position(|h| h.trim() == *name)
            .ok_or_else(|| Error::Schema { column: name.to_string() })?;
    }
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let field = |i: usize| -> Result<f64> {
            let raw = rec.get(col[i]).unwrap_or("").trim();
            raw.parse::<f64>()
                .map_err(|_| Error::Validation(format!("QoE column {}: bad value `{raw}`", QOE_COLUMNS[i])))
        };
        let slot = rec.get(col[0]).unwrap_or("").trim();
        let index = slot
            .parse::<u64>()
            .map_err(|_| Error::Validation(format!("QoE column slot: bad value `{slot}`")))?;
        let s = QoESample {
            frame_rate: field(1)?,
            throughput: field(2)?,
            latency: field(3)?,
            loss_rate: field(4)?,
            interval: SlotIndex { index, width },
        };
        s.validate()?;
        out.push(s);
    }
    Ok(out)
}

pub fn load_samples(path: &Path, width: f64) -> Result<Vec<QoESample>> {
    let f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_samples(f, width)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn samples_csv_roundtrip() {
        let s = vec![sample(60.0, 12.5, 20.0, 0.0005), sample(30.0, 3.0, 100.0, 0.02)];
        let mut buf = Vec::new();
        write_samples(&s, &mut buf).unwrap();
        let back = read_samples(buf.as_slice(), 1.0).unwrap();
        assert_eq!(back.len(), 2);
        assert_eq!(back[1].throughput, s[1].throughput);
        assert_eq!(back[1].latency, 100.0);
        assert!(read_samples("slot,frame_rate\n0,1\n".as_bytes(), 1.0).is_err());
    }

    fn sample(fps: f64, mbps: f64, lat: f64, loss: f64) -> QoESample {
        QoESample {
            frame_rate: fps,
            throughput: mbps * 1e6,
            latency: lat,
            loss_rate: loss,
            interval: SlotIndex { index: 0, width: 1.0 },
        }
    }

    fn ctx(title: GameTitle, stage: StageLabel) -> ContextSnapshot {
        ContextSnapshot {
            title,
            pattern: title.pattern(),
            stage,
        }
    }

    #[test]
    fn objective_examples() {
        let t = ObjectiveThresholds::default();
        assert_eq!(objective_level(&sample(25.0, 20.0, 20.0, 0.0), &t), QoELevel::Bad);
        assert_eq!(objective_level(&sample(60.0, 7.0, 20.0, 0.0), &t), QoELevel::Bad);
        assert_eq!(objective_level(&sample(60.0, 20.0, 20.0, 0.0), &t), QoELevel::Good);
        assert_eq!(objective_level(&sample(40.0, 20.0, 20.0, 0.0), &t), QoELevel::Medium);
    }

    #[test]
    fn effective_examples() {
        let t = ObjectiveThresholds::default();
        let table = CalibrationTable::shipped();
        let s = sample(15.0, 2.0, 20.0, 0.0);
        assert_eq!(effective_level(&s, &ctx(GameTitle::Overwatch2, StageLabel::Idle), &table, &t), QoELevel::Good);
        let s = sample(25.0, 30.0, 20.0, 0.0);
        assert_eq!(effective_level(&s, &ctx(GameTitle::CsGo, StageLabel::Active), &table, &t), QoELevel::Bad);
        let s = sample(60.0, 30.0, 120.0, 0.0);
        for stage in [StageLabel::Idle, StageLabel::Passive, StageLabel::Active, StageLabel::Launch] {
            assert_eq!(
                effective_level(&s, &ctx(GameTitle::Hearthstone, stage), &table, &t),
                objective_level(&s, &t)
            );
        }
    }

    #[test]
    fn lookup_falls_back() {
        let t = ObjectiveThresholds::default();
        let table = CalibrationTable::shipped();
        let (b, src) = table.bands_for(&ctx(GameTitle::Hearthstone, StageLabel::Idle), CalibratedMetric::ThroughputMbps, &t);
        assert_eq!((b.bad_below, src), (0.5, BandSource::Title));
        let (_, src) = table.bands_for(&ctx(GameTitle::Dota2, StageLabel::Idle), CalibratedMetric::FrameRate, &t);
        assert_eq!(src, BandSource::Any);
        let (b, src) = table.bands_for(&ctx(GameTitle::Dota2, StageLabel::Launch), CalibratedMetric::FrameRate, &t);
        assert_eq!((b.bad_below, src), (20.0, BandSource::Any));
        let empty = CalibrationTable::default();
        let (b, src) = empty.bands_for(&ctx(GameTitle::Dota2, StageLabel::Launch), CalibratedMetric::FrameRate, &t);
        assert_eq!((b, src), (t.frame_rate, BandSource::Objective));
    }

    #[test]
    fn session_plurality() {
        use QoELevel::*;
        assert_eq!(session_level(&[Good, Good, Bad]).unwrap(), Good);
        assert_eq!(session_level(&[Good, Bad]).unwrap(), Bad);
        assert_eq!(session_level(&[Medium, Medium]).unwrap(), Medium);
        assert!(session_level(&[]).is_err());
    }

    #[test]
    fn table_schema_errors() {
        let missing = "scope,key,stage,metric,bad_below\nany,*,idle,frame_rate,1\n";
        assert!(matches!(CalibrationTable::parse(missing.as_bytes()), Err(Error::Schema { column }) if column == "good_from"));
        let inverted = "scope,key,stage,metric,bad_below,good_from\nany,*,idle,frame_rate,20,10\n";
        assert!(CalibrationTable::parse(inverted.as_bytes()).is_err());
        let future = "# version 7\nscope,key,stage,metric,bad_below,good_from\n";
        assert!(CalibrationTable::parse(future.as_bytes()).is_err());
        assert_eq!(CalibrationTable::shipped().len(), 20);
    }
}
