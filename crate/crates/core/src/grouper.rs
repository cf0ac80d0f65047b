//! Launch-window packet groups and the title feature vector.
//!
//! Downstream packets from the first `N` seconds are split into three
//! groups: *Full* (payload equals the session's maximum payload), *Steady*
//! (payload close to its time neighbours') and *Sparse* (everything else).
//! Per-slot count/size/inter-arrival statistics of each group form the
//! input of the title model.

use std::cmp::Ordering;
use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{PacketRecord, DEFAULT_MAX_PAYLOAD};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum GroupLabel {
    Full,
    Steady,
    Sparse,
}

impl GroupLabel {
    pub const ALL: [GroupLabel; 3] = [GroupLabel::Full, GroupLabel::Steady, GroupLabel::Sparse];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn as_str(self) -> &'static str {
        match self {
            GroupLabel::Full => "full",
            GroupLabel::Steady => "steady",
            GroupLabel::Sparse => "sparse",
        }
    }
}

/// Neighbours consulted on each side of a non-full packet.
pub const NEIGHBOURS_PER_SIDE: usize = 2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GrouperParams {
    /// Launch window `N` in seconds.
    pub window_s: f64,
    /// Slot width `T` in seconds.
    pub slot_s: f64,
    /// Relative payload variation band `V`.
    pub variation: f64,
    /// Payload size that marks a Full packet.
    pub max_payload: u32,
}

impl Default for GrouperParams {
    fn default() -> Self {
        GrouperParams {
            window_s: 5.0,
            slot_s: 1.0,
            variation: 0.10,
            max_payload: DEFAULT_MAX_PAYLOAD,
        }
    }
}

impl GrouperParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.slot_s > 0.0) || !(self.window_s > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "launch window ({}) and slot width ({}) must be positive",
                self.window_s, self.slot_s
            )));
        }
        let ratio = self.window_s / self.slot_s;
        if (ratio - ratio.round()).abs() > 1e-9 || ratio.round() < 1.0 {
            return Err(Error::InvalidArgument(format!(
                "launch window {} s is not a multiple of slot width {} s",
                self.window_s, self.slot_s
            )));
        }
        if !(self.variation > 0.0 && self.variation < 1.0) {
            return Err(Error::InvalidArgument(format!(
                "variation band must lie in (0, 1), got {}",
                self.variation
            )));
        }
        if self.max_payload == 0 {
            return Err(Error::InvalidArgument("max_payload must be positive".into()));
        }
        Ok(())
    }

    pub fn n_slots(&self) -> usize {
        (self.window_s / self.slot_s).round() as usize
    }

    /// Title feature length: 9 per slot plus 6 window aggregates.
    pub fn feature_len(&self) -> usize {
        9 * self.n_slots() + 6
    }

    fn slot(&self, t: f64) -> usize {
        ((t / self.slot_s).floor().max(0.0) as usize).min(self.n_slots().saturating_sub(1))
    }

    /// Whether `neighbour` lies within the relative ±V band around `size`.
    pub fn agrees(&self, size: u32, neighbour: u32) -> bool {
        (neighbour as f64 - size as f64).abs() <= self.variation * size as f64
    }
}

fn check_input(packets: &[PacketRecord], params: &GrouperParams) -> Result<()> {
    params.validate()?;
    for (i, p) in packets.iter().enumerate() {
        if !p.is_downstream() {
            return Err(Error::Contract(format!("packet {i} is not downstream")));
        }
        if !(p.timestamp >= 0.0 && p.timestamp < params.window_s) {
            return Err(Error::Contract(format!(
                "packet {i} at {} s lies outside the {} s launch window",
                p.timestamp, params.window_s
            )));
        }
    }
    Ok(())
}

/// Deterministic in-slot order: timestamp, then payload size, then input position.
fn slot_order(packets: &[PacketRecord], a: usize, b: usize) -> Ordering {
    packets[a]
        .timestamp
        .total_cmp(&packets[b].timestamp)
        .then(packets[a].payload_size.cmp(&packets[b].payload_size))
        .then(a.cmp(&b))
}

/// Input indices grouped per slot, each slot in [`slot_order`].
fn slots(packets: &[PacketRecord], params: &GrouperParams) -> Vec<Vec<usize>> {
    let mut out = vec![Vec::new(); params.n_slots()];
    for (i, p) in packets.iter().enumerate() {
        out[params.slot(p.timestamp)].push(i);
    }
    for s in &mut out {
        s.sort_by(|&a, &b| slot_order(packets, a, b));
    }
    out
}

/// The Full-packet size of a session: the most common per-slot maximum
/// payload (ties go to the larger size). Falls back to
/// `params.max_payload` when the window is empty.
pub fn learn_max_payload(packets: &[PacketRecord], params: &GrouperParams) -> u32 {
    let mut maxima: BTreeMap<usize, u32> = BTreeMap::new();
    for p in packets.iter().filter(|p| p.is_downstream() && p.timestamp >= 0.0 && p.timestamp < params.window_s) {
        let m = maxima.entry(params.slot(p.timestamp)).or_insert(0);
        *m = (*m).max(p.payload_size);
    }
    let mut votes: BTreeMap<u32, usize> = BTreeMap::new();
    for m in maxima.values() {
        *votes.entry(*m).or_insert(0) += 1;
    }
    votes
        .into_iter()
        .max_by(|a, b| a.1.cmp(&b.1).then(a.0.cmp(&b.0)))
        .map(|(size, _)| size)
        .unwrap_or(params.max_payload)
}

/// Label each launch-window downstream packet. Output is aligned with the input.
///
/// A non-full packet is Steady when strictly more of its nearest in-slot
/// non-full neighbours (up to two on each side) agree with it within ±V
/// than disagree; a tie, including having no neighbours, means Sparse.
pub fn label_groups(packets: &[PacketRecord], params: &GrouperParams) -> Result<Vec<(PacketRecord, GroupLabel)>> {
    check_input(packets, params)?;
    let mut labels = vec![GroupLabel::Sparse; packets.len()];
    for slot in slots(packets, params) {
        let mut others = Vec::with_capacity(slot.len());
        for &i in &slot {
            if packets[i].payload_size == params.max_payload {
                labels[i] = GroupLabel::Full;
            } else {
                others.push(i);
            }
        }
        for (j, &i) in others.iter().enumerate() {
            let size = packets[i].payload_size;
            let lo = j.saturating_sub(NEIGHBOURS_PER_SIDE);
            let hi = (j + NEIGHBOURS_PER_SIDE).min(others.len() - 1);
            let (mut agree, mut disagree) = (0usize, 0usize);
            for (k, &n) in others.iter().enumerate().take(hi + 1).skip(lo) {
                if k == j {
                    continue;
                }
                if params.agrees(size, packets[n].payload_size) {
                    agree += 1;
                } else {
                    disagree += 1;
                }
            }
            if agree > disagree {
                labels[i] = GroupLabel::Steady;
            }
        }
    }
    Ok(packets.iter().copied().zip(labels).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LaunchFeatureVector {
    pub values: Vec<f64>,
}

/// Position of a per-slot metric in the feature vector.
/// `metric`: 0 = packet count, 1 = mean payload, 2 = mean inter-arrival.
pub fn feature_index(slot: usize, group: GroupLabel, metric: usize) -> usize {
    slot * 9 + group.index() * 3 + metric
}

/// Position of a window aggregate. `metric`: 0 = total count, 1 = total bytes.
pub fn aggregate_index(params: &GrouperParams, group: GroupLabel, metric: usize) -> usize {
    params.n_slots() * 9 + group.index() * 2 + metric
}

pub fn feature_names(params: &GrouperParams) -> Vec<String> {
    let mut names = Vec::with_capacity(params.feature_len());
    for s in 0..params.n_slots() {
        for g in GroupLabel::ALL {
            for m in ["count", "size_mean", "iat_mean"] {
                names.push(format!("{}_{m}[{s}]", g.as_str()));
            }
        }
    }
    for g in GroupLabel::ALL {
        names.push(format!("{}_total_count", g.as_str()));
        names.push(format!("{}_total_bytes", g.as_str()));
    }
    names
}

/// Per (slot, group): packet count, mean payload, and mean gap between
/// consecutive same-group packets of that slot; then per-group totals.
/// Empty cells are 0.
pub fn extract_features(labeled: &[(PacketRecord, GroupLabel)], params: &GrouperParams) -> LaunchFeatureVector {
    let mut values = vec![0.0; params.feature_len()];
    let packets: Vec<PacketRecord> = labeled.iter().map(|(p, _)| *p).collect();
    for (s, slot) in slots(&packets, params).into_iter().enumerate() {
        for g in GroupLabel::ALL {
            let members: Vec<&PacketRecord> = slot
                .iter()
                .filter(|&&i| labeled[i].1 == g)
                .map(|&i| &labeled[i].0)
                .collect();
            if members.is_empty() {
                continue;
            }
            let count = members.len() as f64;
            let bytes: u64 = members.iter().map(|p| p.payload_size as u64).sum();
            values[feature_index(s, g, 0)] = count;
            values[feature_index(s, g, 1)] = bytes as f64 / count;
            if members.len() > 1 {
                let span: f64 = members.windows(2).map(|w| w[1].timestamp - w[0].timestamp).sum();
                values[feature_index(s, g, 2)] = span / (count - 1.0);
            }
            values[aggregate_index(params, g, 0)] += count;
            values[aggregate_index(params, g, 1)] += bytes as f64;
        }
    }
    LaunchFeatureVector { values }
}

/// Full title-feature path for one oriented flow: keep downstream packets
/// with `t < N`, learn the Full size, label, extract. Only packets inside
/// the launch window are ever read.
pub fn launch_features(flow_packets: &[PacketRecord], params: &GrouperParams) -> Result<(LaunchFeatureVector, u32)> {
    params.validate()?;
    let window: Vec<PacketRecord> = flow_packets
        .iter()
        .filter(|p| p.is_downstream() && p.timestamp >= 0.0 && p.timestamp < params.window_s)
        .copied()
        .collect();
    let learned = GrouperParams {
        max_payload: learn_max_payload(&window, params),
        ..params.clone()
    };
    let labeled = label_groups(&window, &learned)?;
    Ok((extract_features(&labeled, &learned), learned.max_payload))
}

/// Flow-volumetric comparison features: downstream packet rate (pkt/s)
/// and throughput (bit/s) per launch slot.
pub fn volumetric_baseline(flow_packets: &[PacketRecord], params: &GrouperParams) -> Result<Vec<f64>> {
    params.validate()?;
    let mut values = vec![0.0; 2 * params.n_slots()];
    for p in flow_packets
        .iter()
        .filter(|p| p.is_downstream() && p.timestamp >= 0.0 && p.timestamp < params.window_s)
    {
        let s = params.slot(p.timestamp);
        values[2 * s] += 1.0;
        values[2 * s + 1] += p.payload_size as f64 * 8.0;
    }
    for v in &mut values {
        *v /= params.slot_s;
    }
    Ok(values)
}

pub fn baseline_names(params: &GrouperParams) -> Vec<String> {
    (0..params.n_slots())
        .flat_map(|s| [format!("down_pkt_rate[{s}]"), format!("down_throughput[{s}]")])
        .collect()
}
