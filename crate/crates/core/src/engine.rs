//! Streaming session analysis: detection, launch features, stage and
//! pattern tracking, and QoE calibration.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::Config;
use crate::detector::{DetectorStats, FlowDetector, StreamingFlow};
use crate::error::{Error, Result};
use crate::forest::Forest;
use crate::grouper::{launch_features, volumetric_baseline, GrouperParams};
use crate::model::{GameTitle, PacketRecord, SlotIndex, StageLabel};
use crate::qoe::{effective_level_with_source, objective_level, session_level, BandSource, CalibrationTable, ContextSnapshot, QoELevel, QoESample};
use crate::tracker::{ActivityTracker, PatternInference, SlotVolumetrics, TrackerConfig};

/// Everything the models need from one streaming flow. Built in a single
/// pass; only launch-window downstream packets are retained.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlowSummary {
    pub flow: StreamingFlow,
    pub title_features: Vec<f64>,
    pub max_payload: u32,
    pub baseline: Vec<f64>,
    pub volumetrics: Vec<SlotVolumetrics>,
    /// Flow-relative time of the last packet.
    pub duration_s: f64,
    pub packets: u64,
    pub down_bytes: u64,
}

#[derive(Debug, Clone)]
pub struct CaptureSummary {
    pub flows: Vec<FlowSummary>,
    pub stats: DetectorStats,
}

impl CaptureSummary {
    /// The flow with the most downstream bytes.
    pub fn primary(&self) -> Option<&FlowSummary> {
        self.flows.iter().max_by(|a, b| a.down_bytes.cmp(&b.down_bytes).then(b.flow.first_packet_at.total_cmp(&a.flow.first_packet_at)))
    }
}

#[derive(Debug, Default)]
struct Accumulator {
    window: Vec<PacketRecord>,
    /// Per slot: down bytes, up bytes, down packets, up packets.
    counts: Vec<[u64; 4]>,
    last_t: f64,
    packets: u64,
}

impl Accumulator {
    fn push(&mut self, rec: PacketRecord, window_s: f64, slot_s: f64) {
        let t = rec.timestamp;
        if rec.is_downstream() && t < window_s {
            self.window.push(rec);
        }
        let k = (t.max(0.0) / slot_s).floor() as usize;
        if self.counts.len() <= k {
            self.counts.resize(k + 1, [0; 4]);
        }
        let c = &mut self.counts[k];
        let (b, n) = if rec.is_downstream() { (0, 2) } else { (1, 3) };
        c[b] += rec.payload_size as u64;
        c[n] += 1;
        self.last_t = self.last_t.max(t);
        self.packets += 1;
    }

    fn finish(self, flow: StreamingFlow, grouper: &GrouperParams, slot_s: f64) -> Result<FlowSummary> {
        let (features, max_payload) = launch_features(&self.window, grouper)?;
        let baseline = volumetric_baseline(&self.window, grouper)?;
        let volumetrics = self
            .counts
            .iter()
            .enumerate()
            .map(|(i, c)| SlotVolumetrics {
                down_throughput: (c[0] * 8) as f64 / slot_s,
                up_throughput: (c[1] * 8) as f64 / slot_s,
                down_pkt_rate: c[2] as f64 / slot_s,
                up_pkt_rate: c[3] as f64 / slot_s,
                slot: SlotIndex {
                    index: i as u64,
                    width: slot_s,
                },
            })
            .collect();
        Ok(FlowSummary {
            flow,
            title_features: features.values,
            max_payload,
            baseline,
            volumetrics,
            duration_s: self.last_t,
            packets: self.packets,
            down_bytes: self.counts.iter().map(|c| c[0]).sum(),
        })
    }
}

/// Detect streaming flows and summarize each in one streaming pass.
pub fn summarize<I>(packets: I, cfg: &Config) -> Result<CaptureSummary>
where
    I: IntoIterator<Item = Result<PacketRecord>>,
{
    let window_s = cfg.grouper.window_s;
    let slot_s = cfg.tracker.slot_s;
    let mut det = FlowDetector::new(cfg.detector.clone());
    let mut accs: Vec<Accumulator> = Vec::new();
    let mut out = Vec::new();
    let drain = |out: &mut Vec<(usize, PacketRecord)>, accs: &mut Vec<Accumulator>| {
        for (i, rec) in out.drain(..) {
            if accs.len() <= i {
                accs.resize_with(i + 1, Accumulator::default);
            }
            accs[i].push(rec, window_s, slot_s);
        }
    };
    for rec in packets {
        det.push(rec?, &mut out);
        drain(&mut out, &mut accs);
    }
    det.finish(&mut out);
    drain(&mut out, &mut accs);
    accs.resize_with(det.flows().len(), Accumulator::default);
    let flows = det
        .flows()
        .iter()
        .zip(accs)
        .map(|(f, a)| a.finish(f.clone(), &cfg.grouper, slot_s))
        .collect::<Result<Vec<_>>>()?;
    Ok(CaptureSummary {
        flows,
        stats: det.stats(),
    })
}

/// Trained models for the three tasks.
#[derive(Debug, Clone)]
pub struct Models {
    pub title: Forest,
    pub stage: Forest,
    pub pattern: Forest,
}

pub const TITLE_MODEL: &str = "title.json";
pub const STAGE_MODEL: &str = "stage.json";
pub const PATTERN_MODEL: &str = "pattern.json";

impl Models {
    pub fn load(dir: &Path) -> Result<Self> {
        Ok(Models {
            title: Forest::load(&dir.join(TITLE_MODEL))?,
            stage: Forest::load(&dir.join(STAGE_MODEL))?,
            pattern: Forest::load(&dir.join(PATTERN_MODEL))?,
        })
    }

    /// Check each model against the feature layout `cfg` produces.
    pub fn check(&self, cfg: &Config) -> Result<()> {
        let expect = [
            (&self.title, "title", cfg.grouper.feature_len()),
            (&self.stage, "stage", 4),
            (&self.pattern, "pattern", 9),
        ];
        for (m, task, arity) in expect {
            if !m.task.is_empty() && m.task != task {
                return Err(Error::ModelFormat(format!("expected a {task} model, found task `{}`", m.task)));
            }
            if m.arity != arity {
                return Err(Error::ArityMismatch {
                    expected: arity,
                    actual: m.arity,
                });
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TitleVerdict {
    pub title: GameTitle,
    /// Vote share of the model's top class.
    pub confidence: f64,
    /// Stream time at which the verdict was available.
    pub decided_at: f64,
}

pub fn classify_title(features: &[f64], model: &Forest, unknown_threshold: f64, window_s: f64) -> Result<TitleVerdict> {
    let p = model.predict(features)?;
    let title = if p.confidence < unknown_threshold {
        GameTitle::Unknown
    } else {
        GameTitle::lookup(&p.label).ok_or_else(|| Error::ModelFormat(format!("title model class `{}`", p.label)))?
    };
    Ok(TitleVerdict {
        title,
        confidence: p.confidence,
        decided_at: window_s,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlotReport {
    pub slot: u64,
    pub start_s: f64,
    pub down_mbps: f64,
    pub up_mbps: f64,
    pub down_pps: f64,
    pub up_pps: f64,
    pub smoothed: [f64; 4],
    pub stage: StageLabel,
    pub stage_confidence: f64,
    pub pattern: PatternInference,
    pub objective_qoe: Option<QoELevel>,
    pub effective_qoe: Option<QoELevel>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionReport {
    pub session_id: String,
    pub flow: String,
    pub detector_score: f64,
    pub title: TitleVerdict,
    pub pattern: PatternInference,
    pub duration_s: f64,
    /// Seconds per stage label.
    pub stage_seconds: BTreeMap<StageLabel, f64>,
    pub mean_down_mbps: f64,
    pub objective_qoe: Option<QoELevel>,
    pub effective_qoe: Option<QoELevel>,
    /// Slots whose effective level fell back to objective bands.
    pub qoe_fallback_slots: usize,
    pub slots: Vec<SlotReport>,
}

/// Run title, stage, pattern and QoE inference over one summarized flow.
/// QoE samples are matched to slots by index; slots without one get no
/// QoE level.
pub fn analyze_flow(
    session_id: &str,
    summary: &FlowSummary,
    models: &Models,
    cfg: &Config,
    calibration: &CalibrationTable,
    qoe: &[QoESample],
) -> Result<SessionReport> {
    models.check(cfg)?;
    let title = classify_title(&summary.title_features, &models.title, cfg.title.unknown_threshold, cfg.grouper.window_s)?;
    let tracker_cfg: TrackerConfig = cfg.tracker.clone();
    let mut tracker = ActivityTracker::new(tracker_cfg, &models.stage, Some(&models.pattern))?;
    let samples: BTreeMap<u64, &QoESample> = qoe.iter().map(|s| (s.interval.index, s)).collect();
    let mut slots = Vec::with_capacity(summary.volumetrics.len());
    let mut stage_seconds: BTreeMap<StageLabel, f64> = BTreeMap::new();
    let (mut objective, mut effective) = (Vec::new(), Vec::new());
    let mut fallback = 0;
    for v in &summary.volumetrics {
        let rec = tracker.push(*v)?;
        *stage_seconds.entry(rec.stage).or_insert(0.0) += v.slot.width;
        let (mut obj, mut eff) = (None, None);
        if let Some(s) = samples.get(&v.slot.index) {
            let ctx = ContextSnapshot {
                title: title.title,
                pattern: rec.pattern.pattern,
                stage: rec.stage,
            };
            let o = objective_level(s, &cfg.qoe.objective);
            let (e, source) = effective_level_with_source(s, &ctx, calibration, &cfg.qoe.objective);
            if source == BandSource::Objective {
                fallback += 1;
            }
            objective.push(o);
            effective.push(e);
            obj = Some(o);
            eff = Some(e);
        }
        slots.push(SlotReport {
            slot: v.slot.index,
            start_s: v.slot.start(),
            down_mbps: v.down_throughput / 1e6,
            up_mbps: v.up_throughput / 1e6,
            down_pps: v.down_pkt_rate,
            up_pps: v.up_pkt_rate,
            smoothed: rec.features.smoothed,
            stage: rec.stage,
            stage_confidence: rec.stage_confidence,
            pattern: rec.pattern,
            objective_qoe: obj,
            effective_qoe: eff,
        });
    }
    if fallback > 0 {
        log::warn!("{session_id}: {fallback} slot(s) had no calibration row; objective bands used");
    }
    let n = summary.volumetrics.len().max(1) as f64;
    let mean_down_mbps = summary.volumetrics.iter().map(|v| v.down_throughput).sum::<f64>() / n / 1e6;
    let k = summary.flow.key;
    Ok(SessionReport {
        session_id: session_id.to_string(),
        flow: format!("{}:{} <-> {}:{} {:?}", k.src.addr, k.src.port, k.dst.addr, k.dst.port, k.transport).to_lowercase(),
        detector_score: summary.flow.detector_score,
        title,
        pattern: tracker.pattern(),
        duration_s: summary.volumetrics.len() as f64 * cfg.tracker.slot_s,
        stage_seconds,
        mean_down_mbps,
        objective_qoe: session_level(&objective).ok(),
        effective_qoe: session_level(&effective).ok(),
        qoe_fallback_slots: fallback,
        slots,
    })
}

pub const SLOT_COLUMNS: [&str; 14] = [
    "session_id",
    "slot",
    "start_s",
    "down_mbps",
    "up_mbps",
    "down_pps",
    "up_pps",
    "stage",
    "stage_confidence",
    "pattern",
    "pattern_confidence",
    "title",
    "objective_qoe",
    "effective_qoe",
];

/// Per-slot timeline as CSV.
pub fn write_slot_csv(report: &SessionReport, out: impl Write) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(SLOT_COLUMNS)?;
    let opt = |l: Option<QoELevel>| l.map(|l| l.as_str().to_string()).unwrap_or_default();
    for s in &report.slots {
        w.write_record([
            report.session_id.clone(),
            s.slot.to_string(),
            format!("{}", s.start_s),
            format!("{:.6}", s.down_mbps),
            format!("{:.6}", s.up_mbps),
            format!("{}", s.down_pps),
            format!("{}", s.up_pps),
            s.stage.as_str().to_string(),
            format!("{:.4}", s.stage_confidence),
            s.pattern.pattern.as_str().to_string(),
            format!("{:.4}", s.pattern.confidence),
            report.title.title.name().to_string(),
            opt(s.objective_qoe),
            opt(s.effective_qoe),
        ])?;
    }
    w.flush().map_err(|e| Error::io("slot csv", e))?;
    Ok(())
}
