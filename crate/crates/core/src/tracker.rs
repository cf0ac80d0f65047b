//! Per-slot player activity stage and session gameplay pattern.
//!
//! Each `I`-second slot yields four raw volumetrics (throughput and packet
//! rate, both directions). They are divided by running session peaks,
//! smoothed with an EMA and fed to the stage model. Slot-to-slot stage
//! transitions accumulate in a 3x3 matrix whose row-normalized form feeds
//! the pattern model; the first confident pattern is latched.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::forest::Forest;
use crate::model::{ActivityPattern, PacketRecord, SlotIndex, StageLabel};

pub const VOLUMETRIC_NAMES: [&str; 4] = ["down_throughput", "up_throughput", "down_pkt_rate", "up_pkt_rate"];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SlotVolumetrics {
    pub down_throughput: f64,
    pub up_throughput: f64,
    pub down_pkt_rate: f64,
    pub up_pkt_rate: f64,
    pub slot: SlotIndex,
}

impl SlotVolumetrics {
    pub fn zero(slot: SlotIndex) -> Self {
        SlotVolumetrics {
            down_throughput: 0.0,
            up_throughput: 0.0,
            down_pkt_rate: 0.0,
            up_pkt_rate: 0.0,
            slot,
        }
    }

    pub fn values(&self) -> [f64; 4] {
        [self.down_throughput, self.up_throughput, self.down_pkt_rate, self.up_pkt_rate]
    }

    /// Multiply all four attributes by `c` (used for scale checks).
    pub fn scaled(&self, c: f64) -> Self {
        SlotVolumetrics {
            down_throughput: self.down_throughput * c,
            up_throughput: self.up_throughput * c,
            down_pkt_rate: self.down_pkt_rate * c,
            up_pkt_rate: self.up_pkt_rate * c,
            slot: self.slot,
        }
    }
}

/// Volumetrics of the packets of one flow that fall in one slot.
/// Byte and packet totals are summed as integers before scaling.
pub fn slot_volumetrics(packets: &[PacketRecord], slot: SlotIndex) -> SlotVolumetrics {
    let (mut db, mut ub, mut dn, mut un) = (0u64, 0u64, 0u64, 0u64);
    for p in packets {
        if p.is_downstream() {
            db += p.payload_size as u64;
            dn += 1;
        } else {
            ub += p.payload_size as u64;
            un += 1;
        }
    }
    let w = slot.width;
    SlotVolumetrics {
        down_throughput: (db * 8) as f64 / w,
        up_throughput: (ub * 8) as f64 / w,
        down_pkt_rate: dn as f64 / w,
        up_pkt_rate: un as f64 / w,
        slot,
    }
}

/// Volumetrics for every slot in `[0, duration)`, including empty ones.
/// `packets` must be time-ordered with flow-relative timestamps.
pub fn session_volumetrics(packets: &[PacketRecord], width: f64, duration: f64) -> Result<Vec<SlotVolumetrics>> {
    if !(width > 0.0) {
        return Err(Error::InvalidArgument(format!("slot width must be positive, got {width}")));
    }
    let n_slots = (duration / width).ceil().max(0.0) as u64;
    let mut out = Vec::with_capacity(n_slots as usize);
    let mut start = 0usize;
    for i in 0..n_slots {
        let end_t = (i + 1) as f64 * width;
        let mut end = start;
        while end < packets.len() && packets[end].timestamp < end_t {
            end += 1;
        }
        out.push(slot_volumetrics(&packets[start..end], SlotIndex { index: i, width }));
        start = end;
    }
    Ok(out)
}

/// One EMA step: `alpha * current + (1 - alpha) * previous`.
pub fn ema_update(current: f64, previous: f64, alpha: f64) -> Result<f64> {
    if !(alpha > 0.0 && alpha <= 1.0) {
        return Err(Error::InvalidArgument(format!("alpha must lie in (0, 1], got {alpha}")));
    }
    Ok(alpha * current + (1.0 - alpha) * previous)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RelativeVolumetrics {
    pub values: [f64; 4],
    /// All four peaks are positive.
    pub peak_valid: bool,
}

/// Running per-attribute peaks, seeded from the launch window.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunningPeaks {
    pub peaks: [f64; 4],
    pub floors: [f64; 4],
}

impl RunningPeaks {
    /// Peaks start at the launch-window maxima; a later sample may raise a
    /// peak only if it reaches `floor_fraction` of that launch maximum.
    pub fn from_launch(launch: &[SlotVolumetrics], floor_fraction: f64) -> Self {
        let mut peaks = [0.0; 4];
        for s in launch {
            for (p, v) in peaks.iter_mut().zip(s.values()) {
                *p = f64::max(*p, v);
            }
        }
        RunningPeaks {
            peaks,
            floors: peaks.map(|p| p * floor_fraction),
        }
    }

    pub fn normalize(&mut self, raw: &SlotVolumetrics) -> RelativeVolumetrics {
        let mut values = [0.0; 4];
        for (k, v) in raw.values().into_iter().enumerate() {
            if v > self.peaks[k] && v >= self.floors[k] {
                self.peaks[k] = v;
            }
            values[k] = if self.peaks[k] > 0.0 {
                (v / self.peaks[k]).min(1.0)
            } else {
                0.0
            };
        }
        RelativeVolumetrics {
            values,
            peak_valid: self.peaks.iter().all(|p| *p > 0.0),
        }
    }
}

/// Free-function form of [`RunningPeaks::normalize`].
pub fn relative_normalize(raw: &SlotVolumetrics, peaks: &mut RunningPeaks) -> RelativeVolumetrics {
    peaks.normalize(raw)
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct TransitionMatrix {
    /// `counts[from][to]` over gameplay stages in order Idle, Passive, Active.
    pub counts: [[u64; 3]; 3],
}

pub fn transition_names() -> Vec<String> {
    let short = ["idle", "passive", "active"];
    let mut v = Vec::with_capacity(9);
    for from in short {
        for to in short {
            v.push(format!("{from}->{to}"));
        }
    }
    v
}

impl TransitionMatrix {
    pub fn record(&mut self, previous: StageLabel, current: StageLabel) -> Result<()> {
        match (previous.gameplay_index(), current.gameplay_index()) {
            (Some(a), Some(b)) => {
                self.counts[a][b] += 1;
                Ok(())
            }
            _ => Err(Error::Contract(format!(
                "transition {previous} -> {current} involves a non-gameplay stage"
            ))),
        }
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    /// Row-normalized counts; an empty row is uniform.
    pub fn probabilities(&self) -> [[f64; 3]; 3] {
        let mut p = [[1.0 / 3.0; 3]; 3];
        for (row, counts) in p.iter_mut().zip(&self.counts) {
            let n: u64 = counts.iter().sum();
            if n > 0 {
                for (x, c) in row.iter_mut().zip(counts) {
                    *x = *c as f64 / n as f64;
                }
            }
        }
        p
    }

    /// The 9 probabilities, row-major, as pattern-model input.
    pub fn features(&self) -> Vec<f64> {
        self.probabilities().iter().flatten().copied().collect()
    }
}

pub fn update_transitions(previous: StageLabel, current: StageLabel, matrix: &TransitionMatrix) -> Result<TransitionMatrix> {
    let mut m = *matrix;
    m.record(previous, current)?;
    Ok(m)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PatternInference {
    pub pattern: ActivityPattern,
    pub confidence: f64,
    /// Session time at which the pattern was decided.
    pub decided_at: Option<f64>,
}

impl PatternInference {
    pub fn undecided(confidence: f64) -> Self {
        PatternInference {
            pattern: ActivityPattern::Undecided,
            confidence,
            decided_at: None,
        }
    }
}

/// One gated pattern prediction. `now` is stamped into `decided_at` when
/// the confidence reaches `threshold`.
pub fn infer_pattern(matrix: &TransitionMatrix, model: &Forest, threshold: f64, now: f64) -> Result<PatternInference> {
    if matrix.total() == 0 {
        return Err(Error::Contract("pattern inference needs at least one transition".into()));
    }
    let p = model.predict(&matrix.features())?;
    if p.confidence >= threshold {
        let pattern = p
            .label
            .parse::<ActivityPattern>()
            .map_err(|_| Error::ModelFormat(format!("pattern model class `{}`", p.label)))?;
        Ok(PatternInference {
            pattern,
            confidence: p.confidence,
            decided_at: Some(now),
        })
    } else {
        Ok(PatternInference::undecided(p.confidence))
    }
}

/// Keeps the first decided pattern for the rest of the session.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PatternLatch {
    pub current: PatternInference,
}

impl Default for PatternLatch {
    fn default() -> Self {
        PatternLatch {
            current: PatternInference::undecided(0.0),
        }
    }
}

impl PatternLatch {
    pub fn is_decided(&self) -> bool {
        self.current.pattern != ActivityPattern::Undecided
    }

    pub fn offer(&mut self, inference: PatternInference) -> PatternInference {
        if !self.is_decided() {
            self.current = inference;
        }
        self.current
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrackerConfig {
    /// Slot width `I` in seconds.
    pub slot_s: f64,
    /// EMA weight of the current slot.
    pub alpha: f64,
    /// Title window `N`; slots inside it are always Launch.
    pub launch_window_s: f64,
    /// Share of the launch maximum a sample must reach to raise a peak.
    pub floor_fraction: f64,
    pub pattern_threshold: f64,
}

impl Default for TrackerConfig {
    fn default() -> Self {
        TrackerConfig {
            slot_s: 1.0,
            alpha: 0.5,
            launch_window_s: 5.0,
            floor_fraction: 0.10,
            pattern_threshold: 0.75,
        }
    }
}

impl TrackerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.slot_s > 0.0) {
            return Err(Error::InvalidArgument(format!("slot width must be positive, got {}", self.slot_s)));
        }
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            return Err(Error::InvalidArgument(format!("alpha must lie in (0, 1], got {}", self.alpha)));
        }
        if !(self.launch_window_s >= 0.0) || !(0.0..=1.0).contains(&self.floor_fraction) {
            return Err(Error::InvalidArgument("launch window / floor fraction out of range".into()));
        }
        if !(0.0..=1.0).contains(&self.pattern_threshold) {
            return Err(Error::InvalidArgument("pattern threshold must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

/// Stage-model input for one slot.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SlotFeatures {
    pub raw: SlotVolumetrics,
    pub relative: RelativeVolumetrics,
    /// EMA-smoothed relative values; meaningful only when `launch` is false.
    pub smoothed: [f64; 4],
    pub launch: bool,
}

/// Peaks, launch boundary and EMA: everything before the stage model.
#[derive(Debug, Clone)]
pub struct VolumetricPipeline {
    cfg: TrackerConfig,
    launch: Vec<SlotVolumetrics>,
    peaks: Option<RunningPeaks>,
    launch_max_down: f64,
    smoothed: Option<[f64; 4]>,
}

impl VolumetricPipeline {
    pub fn new(cfg: TrackerConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(VolumetricPipeline {
            cfg,
            launch: Vec::new(),
            peaks: None,
            launch_max_down: 0.0,
            smoothed: None,
        })
    }

    fn in_title_window(&self, slot: &SlotIndex) -> bool {
        slot.end() <= self.cfg.launch_window_s + 1e-9
    }

    pub fn push(&mut self, raw: SlotVolumetrics) -> SlotFeatures {
        if self.peaks.is_none() && self.in_title_window(&raw.slot) {
            self.launch.push(raw);
            self.launch_max_down = self.launch_max_down.max(raw.down_throughput);
            let mut preview = RunningPeaks::from_launch(&self.launch, self.cfg.floor_fraction);
            return SlotFeatures {
                raw,
                relative: preview.normalize(&raw),
                smoothed: [0.0; 4],
                launch: true,
            };
        }
        let peaks = self
            .peaks
            .get_or_insert_with(|| RunningPeaks::from_launch(&self.launch, self.cfg.floor_fraction));
        let relative = peaks.normalize(&raw);
        if self.smoothed.is_none() {
            let floor = self.launch_max_down * self.cfg.floor_fraction;
            if raw.down_throughput <= floor {
                return SlotFeatures {
                    raw,
                    relative,
                    smoothed: [0.0; 4],
                    launch: true,
                };
            }
        }
        let alpha = self.cfg.alpha;
        let next = match self.smoothed {
            None => relative.values,
            Some(prev) => {
                let mut s = [0.0; 4];
                for k in 0..4 {
                    s[k] = alpha * relative.values[k] + (1.0 - alpha) * prev[k];
                }
                s
            }
        };
        self.smoothed = Some(next);
        SlotFeatures {
            raw,
            relative,
            smoothed: next,
            launch: false,
        }
    }
}

/// Per-slot tracker output.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SlotRecord {
    pub features: SlotFeatures,
    pub stage: StageLabel,
    pub stage_confidence: f64,
    pub pattern: PatternInference,
}

/// Streaming stage and pattern tracker for one session.
#[derive(Debug, Clone)]
pub struct ActivityTracker<'m> {
    pipeline: VolumetricPipeline,
    stage_model: &'m Forest,
    pattern_model: Option<&'m Forest>,
    threshold: f64,
    previous: Option<StageLabel>,
    matrix: TransitionMatrix,
    latch: PatternLatch,
}

impl<'m> ActivityTracker<'m> {
    pub fn new(cfg: TrackerConfig, stage_model: &'m Forest, pattern_model: Option<&'m Forest>) -> Result<Self> {
        if stage_model.arity != 4 {
            return Err(Error::ArityMismatch {
                expected: 4,
                actual: stage_model.arity,
            });
        }
        if let Some(p) = pattern_model {
            if p.arity != 9 {
                return Err(Error::ArityMismatch {
                    expected: 9,
                    actual: p.arity,
                });
            }
        }
        Ok(ActivityTracker {
            threshold: cfg.pattern_threshold,
            pipeline: VolumetricPipeline::new(cfg)?,
            stage_model,
            pattern_model,
            previous: None,
            matrix: TransitionMatrix::default(),
            latch: PatternLatch::default(),
        })
    }

    pub fn matrix(&self) -> &TransitionMatrix {
        &self.matrix
    }

    pub fn pattern(&self) -> PatternInference {
        self.latch.current
    }

    pub fn push(&mut self, raw: SlotVolumetrics) -> Result<SlotRecord> {
        let features = self.pipeline.push(raw);
        if features.launch {
            return Ok(SlotRecord {
                features,
                stage: StageLabel::Launch,
                stage_confidence: 1.0,
                pattern: self.latch.current,
            });
        }
        let p = self.stage_model.predict(&features.smoothed)?;
        let stage: StageLabel = p
            .label
            .parse()
            .map_err(|_| Error::ModelFormat(format!("stage model class `{}`", p.label)))?;
        if stage == StageLabel::Launch {
            return Err(Error::ModelFormat("stage model predicts Launch".into()));
        }
        if let Some(prev) = self.previous {
            self.matrix.record(prev, stage)?;
            if let (Some(model), false) = (self.pattern_model, self.latch.is_decided()) {
                let inf = infer_pattern(&self.matrix, model, self.threshold, raw.slot.end())?;
                self.latch.offer(inf);
            }
        }
        self.previous = Some(stage);
        Ok(SlotRecord {
            features,
            stage,
            stage_confidence: p.confidence,
            pattern: self.latch.current,
        })
    }
}

/// Stage-model inputs for a whole session, without any model.
pub fn session_features(volumetrics: &[SlotVolumetrics], cfg: &TrackerConfig) -> Result<Vec<SlotFeatures>> {
    let mut pipe = VolumetricPipeline::new(cfg.clone())?;
    Ok(volumetrics.iter().map(|v| pipe.push(*v)).collect())
}

/// Transition matrices after each classified slot of a stage sequence
/// (Launch entries skipped); entry `k` covers the first `k + 2` gameplay slots.
pub fn prefix_matrices(stages: &[StageLabel]) -> Result<Vec<TransitionMatrix>> {
    let mut out = Vec::new();
    let mut m = TransitionMatrix::default();
    let mut prev: Option<StageLabel> = None;
    for &s in stages.iter().filter(|s| **s != StageLabel::Launch) {
        if let Some(p) = prev {
            m.record(p, s)?;
            out.push(m);
        }
        prev = Some(s);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Direction, Endpoint, FlowKey, Transport};
    use std::net::{IpAddr, Ipv4Addr};
    use StageLabel::*;

    fn rec(dir: Direction, size: u32) -> PacketRecord {
        let a = Endpoint::new(IpAddr::V4(Ipv4Addr::new(10, 0, 0, 1)), 49004);
        let b = Endpoint::new(IpAddr::V4(Ipv4Addr::new(10, 0, 0, 2)), 50000);
        PacketRecord {
            timestamp: 0.5,
            direction: dir,
            payload_size: size,
            flow: FlowKey::new(a, b, Transport::Udp),
            lead_byte: None,
        }
    }

    #[test]
    fn volumetrics_arithmetic() {
        let s1 = SlotIndex { index: 0, width: 1.0 };
        let pk: Vec<_> = (0..1000).map(|_| rec(Direction::Downstream, 1250)).collect();
        assert_eq!(slot_volumetrics(&pk, s1).down_throughput, 10e6);
        assert_eq!(slot_volumetrics(&[], s1), SlotVolumetrics::zero(s1));
        let up: Vec<_> = (0..100).map(|_| rec(Direction::Upstream, 60)).collect();
        let s2 = SlotIndex { index: 0, width: 2.0 };
        assert_eq!(slot_volumetrics(&up, s2).up_pkt_rate, 50.0);
    }

    #[test]
    fn ema_cases() {
        assert_eq!(ema_update(3.0, 9.0, 1.0).unwrap(), 3.0);
        assert_eq!(ema_update(10.0, 6.0, 0.5).unwrap(), 8.0);
        assert!(ema_update(1.0, 1.0, 0.0).is_err());
        assert!(ema_update(1.0, 1.0, 1.5).is_err());
    }

    #[test]
    fn normalize_and_peak_update() {
        let s = SlotIndex { index: 9, width: 1.0 };
        let mut launch = SlotVolumetrics::zero(s);
        launch.down_throughput = 50e6;
        let mut peaks = RunningPeaks::from_launch(&[launch], 0.1);
        let mut cur = SlotVolumetrics::zero(s);
        cur.down_throughput = 25e6;
        assert_eq!(relative_normalize(&cur, &mut peaks).values[0], 0.5);
        cur.down_throughput = 60e6;
        assert_eq!(peaks.normalize(&cur).values[0], 1.0);
        assert_eq!(peaks.peaks[0], 60e6);
    }

    #[test]
    fn transition_counting() {
        let m = prefix_matrices(&[Launch, Active, Active, Idle, Passive]).unwrap();
        let last = m.last().unwrap();
        let mut want = [[0u64; 3]; 3];
        want[2][2] = 1;
        want[2][0] = 1;
        want[0][1] = 1;
        assert_eq!(last.counts, want);
        let p = last.probabilities();
        assert_eq!(p[2], [0.5, 0.0, 0.5]);
        assert_eq!(p[1], [1.0 / 3.0; 3]);
        assert_eq!(last.total(), 3);
        assert!(update_transitions(Launch, Idle, last).is_err());
    }

    #[test]
    fn latch_holds_first_decision() {
        let mut l = PatternLatch::default();
        l.offer(PatternInference::undecided(0.6));
        assert!(!l.is_decided());
        let d = PatternInference {
            pattern: ActivityPattern::ContinuousPlay,
            confidence: 0.8,
            decided_at: Some(30.0),
        };
        l.offer(d);
        let other = PatternInference {
            pattern: ActivityPattern::SpectateAndPlay,
            confidence: 0.99,
            decided_at: Some(40.0),
        };
        assert_eq!(l.offer(other), d);
    }

    #[test]
    fn launch_boundary_waits_for_floor() {
        let cfg = TrackerConfig {
            launch_window_s: 2.0,
            ..TrackerConfig::default()
        };
        let mut v: Vec<_> = (0..5u64).map(|i| SlotVolumetrics::zero(SlotIndex { index: i, width: 1.0 })).collect();
        v[0].down_throughput = 10e6;
        v[3].down_throughput = 2e6;
        let f = session_features(&v, &cfg).unwrap();
        let launch: Vec<bool> = f.iter().map(|x| x.launch).collect();
        assert_eq!(launch, [true, true, true, false, false]);
        assert_eq!(f[3].smoothed[0], 0.2);
        assert_eq!(f[4].smoothed[0], 0.1);
    }
}
