//! Ground-truth label files.
//!
//! A session is described by two CSV files sharing a stem:
//!
//! * `<stem>.labels.csv`: one row with `session_id, title, genre, pattern,
//!   platform, resolution_class, fps_setting`.
//! * `<stem>.timeline.csv`: rows of `session_id, stage_start_s, stage_label`,
//!   strictly increasing in time and starting with `launch` at 0.

use std::fmt;
use std::fs::File;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use log::warn;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ActivityPattern, GameTitle, StageLabel};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum ResolutionClass {
    SD,
    HD,
    FHD,
    QHD,
    UHD,
}

impl ResolutionClass {
    pub const ALL: [ResolutionClass; 5] = [
        ResolutionClass::SD,
        ResolutionClass::HD,
        ResolutionClass::FHD,
        ResolutionClass::QHD,
        ResolutionClass::UHD,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ResolutionClass::SD => "SD",
            ResolutionClass::HD => "HD",
            ResolutionClass::FHD => "FHD",
            ResolutionClass::QHD => "QHD",
            ResolutionClass::UHD => "UHD",
        }
    }
}

impl fmt::Display for ResolutionClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ResolutionClass {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ResolutionClass::ALL
            .into_iter()
            .find(|r| r.as_str().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| Error::Validation(format!("unknown resolution class `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StreamConfig {
    pub resolution_class: ResolutionClass,
    pub frame_rate_setting: u32,
    pub platform: String,
}

impl StreamConfig {
    pub const FRAME_RATES: [u32; 3] = [30, 60, 120];

    pub fn validate(&self) -> Result<()> {
        if !Self::FRAME_RATES.contains(&self.frame_rate_setting) {
            return Err(Error::Validation(format!(
                "fps setting {} not in {:?}",
                self.frame_rate_setting,
                Self::FRAME_RATES
            )));
        }
        Ok(())
    }
}

impl Default for StreamConfig {
    fn default() -> Self {
        StreamConfig {
            resolution_class: ResolutionClass::FHD,
            frame_rate_setting: 60,
            platform: "windows-app".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledSession {
    pub session_id: String,
    pub title: GameTitle,
    pub genre: String,
    pub pattern: ActivityPattern,
    pub stage_marks: Vec<(f64, StageLabel)>,
    pub config: StreamConfig,
}

impl LabeledSession {
    pub fn validate(&self) -> Result<()> {
        validate_marks(&self.stage_marks)?;
        if self.title.is_known() && self.pattern != self.title.pattern() {
            return Err(Error::Validation(format!(
                "pattern {} inconsistent with title {}",
                self.pattern, self.title
            )));
        }
        self.config.validate()
    }

    /// Ground-truth stage in effect at session time `t`.
    pub fn stage_at(&self, t: f64) -> StageLabel {
        let idx = self.stage_marks.partition_point(|(s, _)| *s <= t);
        if idx == 0 {
            StageLabel::Launch
        } else {
            self.stage_marks[idx - 1].1
        }
    }
}

pub fn validate_marks(marks: &[(f64, StageLabel)]) -> Result<()> {
    match marks.first() {
        None => return Err(Error::Validation("empty stage timeline".into())),
        Some(&(t, l)) if t != 0.0 || l != StageLabel::Launch => {
            return Err(Error::Validation(format!(
                "timeline must start with launch at 0, got {l} at {t}"
            )))
        }
        _ => {}
    }
    for w in marks.windows(2) {
        if !(w[1].0 > w[0].0) {
            return Err(Error::Validation(format!(
                "stage timestamps not strictly increasing: {} then {}",
                w[0].0, w[1].0
            )));
        }
        if w[1].1 == StageLabel::Launch {
            return Err(Error::Validation(format!("launch mark after gameplay at {}", w[1].0)));
        }
    }
    Ok(())
}

const LABEL_COLUMNS: [&str; 7] = [
    "session_id",
    "title",
    "genre",
    "pattern",
    "platform",
    "resolution_class",
    "fps_setting",
];
const TIMELINE_COLUMNS: [&str; 3] = ["session_id", "stage_start_s", "stage_label"];

fn column_indices(headers: &csv::StringRecord, wanted: &[&str]) -> Result<Vec<usize>> {
    wanted
        .iter()
        .map(|col| {
            headers
                .iter()
                .position(|h| h.trim() == *col)
                .ok_or_else(|| Error::Schema { column: (*col).to_string() })
        })
        .collect()
}

/// Parse a label row and its timeline from readers.
pub fn parse_labels(labels: impl Read, timeline: impl Read) -> Result<LabeledSession> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(labels);
    let idx = column_indices(rdr.headers()?, &LABEL_COLUMNS)?;
    let row = rdr
        .records()
        .next()
        .ok_or_else(|| Error::Validation("label file has no data row".into()))??;
    let field = |i: usize| row.get(idx[i]).unwrap_or("").to_string();

    let session_id = field(0);
    let title_text = field(1);
    let title = match GameTitle::lookup(&title_text) {
        Some(t) => t,
        None if title_text.trim().eq_ignore_ascii_case(GameTitle::Unknown.name()) => GameTitle::Unknown,
        None => {
            warn!("session {session_id}: title `{title_text}` not in catalog; using Unknown");
            GameTitle::Unknown
        }
    };
    let pattern_text = field(3);
    let pattern = if pattern_text.is_empty() {
        title.pattern()
    } else {
        pattern_text.parse()?
    };
    let fps: u32 = field(6)
        .parse()
        .map_err(|_| Error::Validation(format!("fps_setting `{}` is not an integer", field(6))))?;
    let config = StreamConfig {
        resolution_class: field(5).parse()?,
        frame_rate_setting: fps,
        platform: field(4),
    };

    let mut trd = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(timeline);
    let tidx = column_indices(trd.headers()?, &TIMELINE_COLUMNS)?;
    let mut stage_marks = Vec::new();
    for rec in trd.records() {
        let rec = rec?;
        let t_text = rec.get(tidx[1]).unwrap_or("");
        let t: f64 = t_text
            .parse()
            .map_err(|_| Error::Validation(format!("stage_start_s `{t_text}` is not a number")))?;
        let label: StageLabel = rec.get(tidx[2]).unwrap_or("").parse()?;
        stage_marks.push((t, label));
    }

    let session = LabeledSession {
        session_id,
        title,
        genre: field(2),
        pattern,
        stage_marks,
        config,
    };
    session.validate()?;
    Ok(session)
}

/// Companion timeline path for a labels file.
pub fn timeline_path_for(labels: &Path) -> PathBuf {
    let name = labels.file_name().and_then(|n| n.to_str()).unwrap_or("");
    let stem = name
        .strip_suffix(".labels.csv")
        .or_else(|| name.strip_suffix(".csv"))
        .unwrap_or(name);
    labels.with_file_name(format!("{stem}.timeline.csv"))
}

pub fn read_labels(path: impl AsRef<Path>) -> Result<LabeledSession> {
    let path = path.as_ref();
    let labels = File::open(path).map_err(|e| Error::io(path, e))?;
    let tl_path = timeline_path_for(path);
    let timeline = File::open(&tl_path).map_err(|e| Error::io(&tl_path, e))?;
    parse_labels(labels, timeline)
}

pub fn write_label_rows(session: &LabeledSession, labels: impl Write, timeline: impl Write) -> Result<()> {
    let mut w = csv::Writer::from_writer(labels);
    w.write_record(LABEL_COLUMNS)?;
    w.write_record([
        session.session_id.as_str(),
        session.title.name(),
        session.genre.as_str(),
        session.pattern.as_str(),
        session.config.platform.as_str(),
        session.config.resolution_class.as_str(),
        &session.config.frame_rate_setting.to_string(),
    ])?;
    w.flush().map_err(|e| Error::io("labels", e))?;
    let mut t = csv::Writer::from_writer(timeline);
    t.write_record(TIMELINE_COLUMNS)?;
    for (start, label) in &session.stage_marks {
        t.write_record([session.session_id.as_str(), &format!("{start}"), label.as_str()])?;
    }
    t.flush().map_err(|e| Error::io("timeline", e))?;
    Ok(())
}

/// Write `<dir>/<stem>.labels.csv` and its timeline; returns the labels path.
pub fn write_labels(dir: &Path, stem: &str, session: &LabeledSession) -> Result<PathBuf> {
    let lp = dir.join(format!("{stem}.labels.csv"));
    let tp = dir.join(format!("{stem}.timeline.csv"));
    let lf = File::create(&lp).map_err(|e| Error::io(&lp, e))?;
    let tf = File::create(&tp).map_err(|e| Error::io(&tp, e))?;
    write_label_rows(session, lf, tf)?;
    Ok(lp)
}
