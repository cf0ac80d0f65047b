//! Streaming-flow selection.
//!
//! Rule-based: a flow is accepted once its first `probe_window_s` seconds
//! look like an RTP game stream (UDP, RTP v2 lead bytes, sustained
//! downstream rate, persistent low-rate upstream companion). Packets seen
//! during the probe are buffered and released on acceptance, so nothing
//! from the launch window is lost.
//!
//! Input records follow the ingest convention: direction is relative to
//! [`provisional_server`]. Output records are re-oriented so `Downstream`
//! means server to client, and re-timed so the flow's first packet is 0.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::model::{provisional_server, Direction, Endpoint, FlowKey, PacketRecord, Transport};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DetectorConfig {
    pub probe_window_s: f64,
    /// Share of server-sent probe packets whose lead byte carries RTP version 2.
    pub min_rtp_fraction: f64,
    pub min_down_mbps: f64,
    pub min_down_pkt_rate: f64,
    /// Share of probe seconds in which the client sent at least one packet.
    pub min_upstream_presence: f64,
    /// Client bytes must stay below this share of server bytes.
    pub max_upstream_byte_share: f64,
    pub acceptance_score: f64,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        DetectorConfig {
            probe_window_s: 3.0,
            min_rtp_fraction: 0.95,
            min_down_mbps: 3.0,
            min_down_pkt_rate: 100.0,
            min_upstream_presence: 0.6,
            max_upstream_byte_share: 0.5,
            acceptance_score: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StreamingFlow {
    pub key: FlowKey,
    /// Capture-relative time of the flow's first packet.
    pub first_packet_at: f64,
    pub detector_score: f64,
    pub server_side: Endpoint,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DetectorStats {
    pub flows_seen: usize,
    pub accepted: usize,
    pub rejected: usize,
    pub packets_in: u64,
    pub packets_out: u64,
}

#[derive(Debug, Default, Clone, Copy)]
struct SenderProbe {
    bytes: u64,
    packets: u64,
    rtp_v2: u64,
    /// Bit i set when the sender transmitted during probe second i.
    seconds: u64,
}

#[derive(Debug)]
enum FlowState {
    Probing {
        first_at: f64,
        provisional: Endpoint,
        senders: [SenderProbe; 2],
        buffer: Vec<PacketRecord>,
    },
    Accepted {
        index: usize,
        first_at: f64,
        provisional: Endpoint,
        server: Endpoint,
    },
    Rejected,
}

/// Outcome of evaluating the probe statistics of one flow.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProbeVerdict {
    pub score: f64,
    pub server_is_src: bool,
    pub rules: [bool; 5],
}

/// Apply the five acceptance rules to probe statistics.
/// `senders[0]` belongs to the canonical `src` endpoint.
fn evaluate(cfg: &DetectorConfig, transport: Transport, senders: &[SenderProbe; 2]) -> ProbeVerdict {
    let server_is_src = senders[0].bytes >= senders[1].bytes;
    let (server, client) = if server_is_src {
        (&senders[0], &senders[1])
    } else {
        (&senders[1], &senders[0])
    };
    let window = cfg.probe_window_s;
    let probe_seconds = window.ceil().max(1.0) as u32;
    let udp = transport == Transport::Udp;
    let rtp = server.packets > 0 && server.rtp_v2 as f64 >= cfg.min_rtp_fraction * server.packets as f64;
    let mbps = server.bytes as f64 * 8.0 / window / 1e6;
    let throughput = mbps >= cfg.min_down_mbps;
    let rate = server.packets as f64 / window >= cfg.min_down_pkt_rate;
    let presence = (client.seconds.count_ones() as f64) / probe_seconds as f64;
    let companion = client.packets > 0
        && presence >= cfg.min_upstream_presence
        && (client.bytes as f64) <= cfg.max_upstream_byte_share * server.bytes as f64;
    let rules = [udp, rtp, throughput, rate, companion];
    let score = rules.iter().filter(|r| **r).count() as f64 / rules.len() as f64;
    ProbeVerdict {
        score,
        server_is_src,
        rules,
    }
}

/// Incremental detector; feed packets in time order with [`push`](Self::push).
#[derive(Debug)]
pub struct FlowDetector {
    cfg: DetectorConfig,
    flows: HashMap<FlowKey, FlowState>,
    accepted: Vec<StreamingFlow>,
    stats: DetectorStats,
}

impl FlowDetector {
    pub fn new(cfg: DetectorConfig) -> Self {
        FlowDetector {
            cfg,
            flows: HashMap::new(),
            accepted: Vec::new(),
            stats: DetectorStats::default(),
        }
    }

    pub fn flows(&self) -> &[StreamingFlow] {
        &self.accepted
    }

    pub fn stats(&self) -> DetectorStats {
        self.stats
    }

    fn orient(rec: &PacketRecord, first_at: f64, provisional: &Endpoint, server: &Endpoint) -> PacketRecord {
        let sender = rec.sender(provisional);
        PacketRecord {
            timestamp: rec.timestamp - first_at,
            direction: Direction::from_sender(&sender, server),
            ..*rec
        }
    }

    fn decide(&mut self, key: FlowKey, out: &mut Vec<(usize, PacketRecord)>) {
        let Some(state) = self.flows.remove(&key) else { return };
        let FlowState::Probing {
            first_at,
            provisional,
            senders,
            buffer,
        } = state
        else {
            self.flows.insert(key, state);
            return;
        };
        let verdict = evaluate(&self.cfg, key.transport, &senders);
        if verdict.rules[0] && verdict.score >= self.cfg.acceptance_score {
            let server = if verdict.server_is_src { key.src } else { key.dst };
            let index = self.accepted.len();
            self.accepted.push(StreamingFlow {
                key,
                first_packet_at: first_at,
                detector_score: verdict.score,
                server_side: server,
            });
            self.stats.accepted += 1;
            for rec in &buffer {
                out.push((index, Self::orient(rec, first_at, &provisional, &server)));
            }
            self.stats.packets_out += buffer.len() as u64;
            self.flows.insert(
                key,
                FlowState::Accepted {
                    index,
                    first_at,
                    provisional,
                    server,
                },
            );
        } else {
            self.stats.rejected += 1;
            self.flows.insert(key, FlowState::Rejected);
        }
    }

    /// Feed one packet; released packets of accepted flows are appended to
    /// `out` tagged with the flow's index in [`flows`](Self::flows).
    pub fn push(&mut self, rec: PacketRecord, out: &mut Vec<(usize, PacketRecord)>) {
        self.stats.packets_in += 1;
        let key = rec.flow;
        if !self.flows.contains_key(&key) {
            self.stats.flows_seen += 1;
            let state = if key.transport != Transport::Udp {
                self.stats.rejected += 1;
                FlowState::Rejected
            } else {
                FlowState::Probing {
                    first_at: rec.timestamp,
                    provisional: provisional_server(&key),
                    senders: Default::default(),
                    buffer: Vec::new(),
                }
            };
            self.flows.insert(key, state);
        }
        let window = self.cfg.probe_window_s;
        let expired = match self.flows.get(&key) {
            Some(FlowState::Probing { first_at, .. }) => rec.timestamp - first_at >= window,
            _ => false,
        };
        if expired {
            self.decide(key, out);
        }
        match self.flows.get_mut(&key) {
            Some(FlowState::Probing {
                first_at,
                provisional,
                senders,
                buffer,
            }) => {
                let sender = rec.sender(provisional);
                let s = &mut senders[usize::from(sender != key.src)];
                s.bytes += rec.payload_size as u64;
                s.packets += 1;
                if rec.lead_byte.is_some_and(|b| b >> 6 == 2) {
                    s.rtp_v2 += 1;
                }
                let sec = ((rec.timestamp - *first_at).max(0.0).floor() as u32).min(63);
                s.seconds |= 1 << sec;
                buffer.push(rec);
            }
            Some(FlowState::Accepted {
                index,
                first_at,
                provisional,
                server,
            }) => {
                out.push((*index, Self::orient(&rec, *first_at, provisional, server)));
                self.stats.packets_out += 1;
            }
            _ => {}
        }
    }

    /// Decide every flow still probing (end of input). Rates are computed
    /// over the full probe window, so short flows are judged conservatively.
    pub fn finish(&mut self, out: &mut Vec<(usize, PacketRecord)>) {
        let mut pending: Vec<(f64, FlowKey)> = self
            .flows
            .iter()
            .filter_map(|(k, s)| match s {
                FlowState::Probing { first_at, .. } => Some((*first_at, *k)),
                _ => None,
            })
            .collect();
        pending.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        for (_, key) in pending {
            self.decide(key, out);
        }
    }
}

/// Batch result of [`detect`].
#[derive(Debug, Clone)]
pub struct Detection {
    pub flows: Vec<StreamingFlow>,
    /// Oriented, flow-relative packets per accepted flow (same order as `flows`).
    pub packets: Vec<Vec<PacketRecord>>,
    pub stats: DetectorStats,
}

pub fn detect(cfg: &DetectorConfig, stream: impl IntoIterator<Item = PacketRecord>) -> Detection {
    let mut det = FlowDetector::new(cfg.clone());
    let mut out = Vec::new();
    let mut packets: Vec<Vec<PacketRecord>> = Vec::new();
    let drain = |out: &mut Vec<(usize, PacketRecord)>, packets: &mut Vec<Vec<PacketRecord>>| {
        for (i, rec) in out.drain(..) {
            if packets.len() <= i {
                packets.resize_with(i + 1, Vec::new);
            }
            packets[i].push(rec);
        }
    };
    for rec in stream {
        det.push(rec, &mut out);
        drain(&mut out, &mut packets);
    }
    det.finish(&mut out);
    drain(&mut out, &mut packets);
    packets.resize_with(det.flows().len(), Vec::new);
    Detection {
        flows: det.flows().to_vec(),
        packets,
        stats: det.stats(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::net::{IpAddr, Ipv4Addr};

    fn ep(a: [u8; 4], port: u16) -> Endpoint {
        Endpoint::new(IpAddr::V4(Ipv4Addr::from(a)), port)
    }

    fn rec(t: f64, flow: FlowKey, dir: Direction, size: u32, lead: u8) -> PacketRecord {
        PacketRecord {
            timestamp: t,
            direction: dir,
            payload_size: size,
            flow: crate::model::canonicalize(flow),
            lead_byte: Some(lead),
        }
    }

    /// 4 s of 400 pkt/s x 1200 B downstream RTP with 60 pkt/s upstream.
    fn stream_like(flow: FlowKey) -> Vec<PacketRecord> {
        let mut v = Vec::new();
        for i in 0..1600 {
            v.push(rec(0.5 + i as f64 / 400.0, flow, Direction::Downstream, 1200, 0x80));
            if i % 7 == 0 {
                v.push(rec(0.5 + i as f64 / 400.0 + 1e-4, flow, Direction::Upstream, 90, 0x80));
            }
        }
        v
    }

    #[test]
    fn rtp_stream_is_accepted_and_reoriented() {
        let server = ep([203, 0, 113, 7], 49004);
        let client = ep([10, 0, 0, 2], 51000);
        let flow = FlowKey::new(server, client, Transport::Udp);
        let det = detect(&DetectorConfig::default(), stream_like(flow));
        assert_eq!(det.flows.len(), 1);
        assert_eq!(det.flows[0].server_side, server);
        assert_eq!(det.flows[0].first_packet_at, 0.5);
        assert!(det.flows[0].detector_score >= 1.0);
        let pk = &det.packets[0];
        assert_eq!(pk.len(), 1600 + 229);
        assert_eq!(pk[0].timestamp, 0.0);
        assert!(pk.iter().filter(|p| p.payload_size == 1200).all(|p| p.is_downstream()));
    }

    #[test]
    fn server_on_high_port_is_found_by_volume() {
        // Provisional rule would pick the client (port 443) as server.
        let server = ep([203, 0, 113, 7], 50500);
        let client = ep([10, 0, 0, 2], 443);
        let flow = FlowKey::new(server, client, Transport::Udp);
        let prov = provisional_server(&flow);
        assert_eq!(prov, client);
        // Records oriented relative to the provisional server.
        let stream: Vec<_> = stream_like(flow)
            .into_iter()
            .map(|mut r| {
                r.direction = r.direction.flipped();
                r
            })
            .collect();
        let det = detect(&DetectorConfig::default(), stream);
        assert_eq!(det.flows[0].server_side, server);
        assert!(det.packets[0].iter().filter(|p| p.payload_size == 1200).all(|p| p.is_downstream()));
    }

    #[test]
    fn dns_like_flow_is_rejected() {
        let flow = FlowKey::new(ep([10, 0, 0, 2], 53001), ep([8, 8, 8, 8], 53), Transport::Udp);
        let stream: Vec<_> = (0..10)
            .map(|i| {
                let dir = if i % 2 == 0 { Direction::Upstream } else { Direction::Downstream };
                rec(i as f64 * 0.4, flow, dir, 60 + i, 0x12)
            })
            .collect();
        let mut senders = [SenderProbe::default(); 2];
        let prov = provisional_server(&flow);
        for r in &stream {
            let s = &mut senders[usize::from(r.sender(&prov) != flow.src.min(flow.dst))];
            s.bytes += r.payload_size as u64;
            s.packets += 1;
        }
        let v = evaluate(&DetectorConfig::default(), Transport::Udp, &senders);
        assert!(!v.rules[2] && !v.rules[3], "volume rules must not fire: {:?}", v.rules);
        let det = detect(&DetectorConfig::default(), stream);
        assert!(det.flows.is_empty());
        assert_eq!(det.stats.rejected, 1);
    }

    #[test]
    fn tcp_bulk_is_rejected_by_transport() {
        let flow = FlowKey::new(ep([10, 0, 0, 2], 40000), ep([93, 184, 216, 34], 443), Transport::Tcp);
        let stream: Vec<_> = (0..5000)
            .map(|i| rec(i as f64 / 1000.0, flow, Direction::Downstream, 1448, 0x80))
            .collect();
        let det = detect(&DetectorConfig::default(), stream);
        assert!(det.flows.is_empty());
        assert_eq!(det.stats.packets_out, 0);
    }

    #[test]
    fn detection_is_deterministic_and_monotone() {
        let flow = FlowKey::new(ep([203, 0, 113, 7], 49004), ep([10, 0, 0, 2], 51000), Transport::Udp);
        let mut stream = stream_like(flow);
        // After acceptance, a quiet tail does not retract the flow.
        stream.push(rec(30.0, flow, Direction::Downstream, 10, 0x00));
        let a = detect(&DetectorConfig::default(), stream.clone());
        let b = detect(&DetectorConfig::default(), stream);
        assert_eq!(a.flows, b.flows);
        assert_eq!(a.packets, b.packets);
        assert_eq!(a.packets[0].last().unwrap().payload_size, 10);
    }
}
