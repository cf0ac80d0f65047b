//! Label-preserving capture augmentation.
//!
//! Non-full packet sizes in a slot are scaled by one common factor, so
//! size ratios between packets move by far less than the grouper's V band.
//! Timestamps are nudged by a bounded number of nanoseconds that never
//! reorders packets of a flow nor moves one out of its slot. Full packets,
//! the first packet of every flow, and all labels are left untouched.

use std::collections::{HashMap, HashSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::capture::LabeledSession;
use crate::error::{Error, Result};
use crate::model::{FlowKey, PacketRecord};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentParams {
    /// Relative half-width of the per-slot size factor.
    pub size_jitter: f64,
    /// Maximum timestamp shift, seconds.
    pub time_jitter: f64,
    pub rng_seed: u64,
}

impl Default for AugmentParams {
    fn default() -> Self {
        AugmentParams {
            size_jitter: 0.03,
            time_jitter: 0.002,
            rng_seed: 0,
        }
    }
}

impl AugmentParams {
    /// `variation` is the grouper's V; the size factor must stay well inside it.
    pub fn validate(&self, variation: f64) -> Result<()> {
        if !(self.size_jitter >= 0.0 && self.size_jitter < variation / 2.0) {
            return Err(Error::Validation(format!(
                "size_jitter {} must be in [0, {})",
                self.size_jitter,
                variation / 2.0
            )));
        }
        if !(self.time_jitter >= 0.0 && self.time_jitter.is_finite()) {
            return Err(Error::Validation(format!("time_jitter {} must be >= 0", self.time_jitter)));
        }
        Ok(())
    }
}

fn to_ns(t: f64) -> i64 {
    (t * 1e9).round() as i64
}

/// Applies augmentation slot by slot to a time-ordered packet stream.
pub struct Augmenter {
    params: AugmentParams,
    rng: ChaCha8Rng,
    slot_ns: i64,
    max_payload: u32,
    seen: HashSet<FlowKey>,
}

impl Augmenter {
    pub fn new(params: AugmentParams, slot_s: f64, max_payload: u32) -> Self {
        let rng = ChaCha8Rng::seed_from_u64(params.rng_seed);
        Augmenter {
            params,
            rng,
            slot_ns: to_ns(slot_s),
            max_payload,
            seen: HashSet::new(),
        }
    }

    /// Augment the packets of one slot in place; the batch must hold every
    /// packet of that slot and nothing else, in time order.
    pub fn apply_slot(&mut self, batch: &mut [PacketRecord]) {
        if batch.is_empty() {
            return;
        }
        let slot = to_ns(batch[0].timestamp).div_euclid(self.slot_ns);
        let (start, end) = (slot * self.slot_ns, (slot + 1) * self.slot_ns - 1);

        let j = self.params.size_jitter;
        let factor = if j > 0.0 { 1.0 + self.rng.random_range(-j..=j) } else { 1.0 };
        if factor != 1.0 {
            let top = (self.max_payload - 1) as f64;
            for p in batch.iter_mut().filter(|p| p.payload_size > 0 && p.payload_size < self.max_payload) {
                p.payload_size = (p.payload_size as f64 * factor).round().clamp(1.0, top) as u32;
            }
        }

        let jit = to_ns(self.params.time_jitter);
        let mut ns: Vec<i64> = batch.iter().map(|p| to_ns(p.timestamp)).collect();
        if jit > 0 {
            let mut per_flow: HashMap<FlowKey, Vec<usize>> = HashMap::new();
            for (i, p) in batch.iter().enumerate() {
                per_flow.entry(p.flow).or_default().push(i);
            }
            let mut flows: Vec<(FlowKey, Vec<usize>)> = per_flow.into_iter().collect();
            flows.sort_by_key(|(_, idx)| idx[0]);
            let orig = ns.clone();
            for (flow, idx) in flows {
                let first_seen = self.seen.insert(flow);
                for (k, &i) in idx.iter().enumerate() {
                    if first_seen && k == 0 {
                        continue;
                    }
                    let t = orig[i];
                    let down = match k.checked_sub(1) {
                        Some(prev) => (t - orig[idx[prev]] - 1) / 2,
                        None => t - start,
                    };
                    let up = match idx.get(k + 1) {
                        Some(&next) => (orig[next] - t - 1) / 2,
                        None => end - t,
                    };
                    let (lo, hi) = (-down.clamp(0, jit), up.clamp(0, jit));
                    if lo < hi {
                        ns[i] = t + self.rng.random_range(lo..=hi);
                    }
                }
            }
        } else {
            for p in batch.iter() {
                self.seen.insert(p.flow);
            }
        }
        for (p, t) in batch.iter_mut().zip(&ns) {
            p.timestamp = *t as f64 / 1e9;
        }
        batch.sort_by(|a, b| a.timestamp.total_cmp(&b.timestamp));
    }
}

/// Augment a whole capture. Labels come back unchanged.
pub fn augment(
    packets: &[PacketRecord],
    labels: &LabeledSession,
    params: &AugmentParams,
    slot_s: f64,
    max_payload: u32,
) -> Result<(Vec<PacketRecord>, LabeledSession)> {
    if !(slot_s > 0.0) {
        return Err(Error::InvalidArgument(format!("slot width {slot_s} must be positive")));
    }
    if packets.windows(2).any(|w| w[1].timestamp < w[0].timestamp) {
        return Err(Error::Contract("augmentation input must be time-ordered".into()));
    }
    let mut aug = Augmenter::new(params.clone(), slot_s, max_payload);
    let slot_ns = aug.slot_ns;
    let mut out = packets.to_vec();
    let mut i = 0;
    while i < out.len() {
        let s = to_ns(out[i].timestamp).div_euclid(slot_ns);
        let mut j = i;
        while j < out.len() && to_ns(out[j].timestamp).div_euclid(slot_ns) == s {
            j += 1;
        }
        aug.apply_slot(&mut out[i..j]);
        i = j;
    }
    Ok((out, labels.clone()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Direction, Endpoint, Transport};
    use std::net::{IpAddr, Ipv4Addr};

    fn flow(port: u16) -> FlowKey {
        let a = Endpoint::new(IpAddr::V4(Ipv4Addr::new(10, 0, 0, 1)), port);
        let b = Endpoint::new(IpAddr::V4(Ipv4Addr::new(10, 0, 0, 2)), 60_000);
        crate::model::canonicalize(FlowKey::new(a, b, Transport::Udp))
    }

    fn pkt(t_ns: i64, size: u32, f: FlowKey) -> PacketRecord {
        PacketRecord {
            timestamp: t_ns as f64 / 1e9,
            direction: Direction::Downstream,
            payload_size: size,
            flow: f,
            lead_byte: Some(0x80),
        }
    }

    #[test]
    fn zero_jitter_is_identity() {
        let f = flow(5000);
        let pk: Vec<_> = (0..50).map(|i| pkt(i * 37_000_000, 200 + i as u32, f)).collect();
        let params = AugmentParams {
            size_jitter: 0.0,
            time_jitter: 0.0,
            rng_seed: 4,
        };
        let (out, _) = augment(&pk, &dummy_labels(), &params, 1.0, 1432).unwrap();
        assert_eq!(out, pk);
    }

    #[test]
    fn full_packets_first_packet_and_slots_preserved() {
        let f = flow(5000);
        let mut pk = Vec::new();
        for i in 0..400i64 {
            let size = if i % 3 == 0 { 1432 } else { 300 + (i % 500) as u32 };
            pk.push(pkt(i * 10_000_000 + (i % 7) * 1000, size, f));
        }
        let params = AugmentParams {
            size_jitter: 0.04,
            time_jitter: 0.004,
            rng_seed: 9,
        };
        let (out, _) = augment(&pk, &dummy_labels(), &params, 1.0, 1432).unwrap();
        assert_eq!(out[0], pk[0]);
        assert_eq!(out.len(), pk.len());
        for (a, b) in pk.iter().zip(&out) {
            assert_eq!(a.timestamp.floor(), b.timestamp.floor());
            assert_eq!(a.payload_size == 1432, b.payload_size == 1432);
        }
        assert!(out.windows(2).all(|w| w[0].timestamp < w[1].timestamp));
        assert_ne!(out, pk);
    }

    #[test]
    fn rejects_large_size_jitter() {
        let p = AugmentParams {
            size_jitter: 0.06,
            ..AugmentParams::default()
        };
        assert!(p.validate(0.10).is_err());
        assert!(AugmentParams::default().validate(0.10).is_ok());
    }

    fn dummy_labels() -> LabeledSession {
        LabeledSession {
            session_id: "s".into(),
            title: crate::model::GameTitle::Fortnite,
            genre: "shooter".into(),
            pattern: crate::model::ActivityPattern::SpectateAndPlay,
            stage_marks: vec![(0.0, crate::model::StageLabel::Launch)],
            config: Default::default(),
        }
    }
}
