//! Labeled session synthesis.
//!
//! A session is planned up front (stage path, per-slot traffic levels, QoE
//! samples) and its packets are produced lazily one 1-second slot at a
//! time, so long sessions never sit in memory. Every timestamp is a whole
//! number of nanoseconds, which makes PCAP round trips exact.

use std::collections::VecDeque;
use std::net::{IpAddr, Ipv4Addr};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp1};

use crate::capture::{LabeledSession, StreamConfig};
use crate::error::{Error, Result};
use crate::model::{canonicalize, provisional_server, Direction, Endpoint, FlowKey, PacketRecord, SlotIndex, StageLabel, Transport};
use crate::qoe::QoESample;

use super::augment::{AugmentParams, Augmenter};
use super::profile::{QoeModel, Range, TitleProfile};

/// Generator slot width; launch schedules are specified per second.
pub const GEN_SLOT_S: f64 = 1.0;
const NS: i64 = 1_000_000_000;
const TRAIN_GAP_NS: i64 = 50_000;
const FRAME_PACKET_GAP_NS: i64 = 15_000;
pub const SERVER_PORT: u16 = 49004;
const RTP_LEAD: u8 = 0x80;

/// splitmix64 finalizer, used to derive independent seeds.
pub fn mix_seed(seed: u64, parts: &[u64]) -> u64 {
    let mut x = seed;
    for p in parts {
        x ^= p.wrapping_add(0x9E37_79B9_7F4A_7C15).wrapping_add(x << 6).wrapping_add(x >> 2);
        x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
        let mut z = x;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        x = z ^ (z >> 31);
    }
    x
}

fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(stream);
    r
}

fn uniform(rng: &mut impl Rng, r: Range) -> f64 {
    if r[0] >= r[1] {
        r[0]
    } else {
        rng.random_range(r[0]..=r[1])
    }
}

#[derive(Debug, Clone)]
pub struct SessionSpec {
    pub session_id: String,
    pub profile: TitleProfile,
    pub qoe: QoeModel,
    pub duration_s: f64,
    pub config: StreamConfig,
    pub seed: u64,
}

/// Traffic targets for one generator slot.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SlotPlan {
    pub stage: StageLabel,
    pub down_bps: f64,
    pub up_bps: f64,
    pub up_pps: f64,
    pub frame_rate: f64,
    /// Session-level jitter applied to launch steady band centres and rates.
    pub center_jitter: f64,
    pub rate_jitter: f64,
}

#[derive(Debug, Clone)]
pub struct SessionPlan {
    pub spec: SessionSpec,
    pub labels: LabeledSession,
    pub slots: Vec<SlotPlan>,
    pub qoe: Vec<QoESample>,
    pub peak_down_mbps: f64,
    pub server: Endpoint,
    pub client: Endpoint,
}

fn draw_stage_path(profile: &TitleProfile, rng: &mut ChaCha8Rng, launch_s: u64, total_s: u64) -> Vec<(f64, StageLabel)> {
    let mut marks = vec![(0.0, StageLabel::Launch)];
    let mut t = launch_s;
    let mut stage = StageLabel::Idle;
    let rows = profile.jump.rows();
    let dwell = profile.dwell_s.all();
    while t < total_s {
        marks.push((t as f64, stage));
        let i = stage.gameplay_index().expect("gameplay stage");
        let d = dwell[i];
        let e: f64 = Exp1.sample(rng);
        let secs = (d.min + (d.mean - d.min) * e).round().max(1.0) as u64;
        t += secs;
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut next = i;
        for (j, p) in rows[i].iter().enumerate() {
            acc += p;
            if u < acc && *p > 0.0 {
                next = j;
                break;
            }
        }
        if next == i {
            // Rounding left no mass above u; take the likeliest jump.
            next = (0..3).filter(|j| *j != i).max_by(|a, b| rows[i][*a].total_cmp(&rows[i][*b])).unwrap_or(i);
        }
        stage = StageLabel::from_gameplay_index(next).expect("index < 3");
    }
    marks
}

impl SessionSpec {
    pub fn launch_slots(&self) -> u64 {
        self.profile.launch.len() as u64
    }

    /// Draw the session plan. Deterministic in the spec.
    pub fn plan(&self) -> Result<SessionPlan> {
        let n = self.launch_slots();
        if !(self.duration_s > n as f64 * GEN_SLOT_S) {
            return Err(Error::Validation(format!(
                "duration {} s must exceed the {} s launch window",
                self.duration_s, n
            )));
        }
        self.config.validate()?;
        let p = &self.profile;
        let mut rng = rng_for(self.seed, 0);
        let total = self.duration_s.ceil() as u64;
        let bw = p.bandwidth_mbps.get(&self.config.resolution_class).copied().ok_or_else(|| {
            Error::Validation(format!("profile `{}` has no bandwidth for {}", p.id, self.config.resolution_class))
        })?;
        let peak_down = uniform(&mut rng, bw) * 1e6;
        let peak_up = uniform(&mut rng, p.up_peak_mbps) * 1e6;
        let peak_up_pps = uniform(&mut rng, p.up_peak_pps);
        let launch_level = uniform(&mut rng, p.launch_level);
        let launch_up = uniform(&mut rng, p.launch_up_level);
        let fps = self.config.frame_rate_setting as f64;

        let marks = draw_stage_path(p, &mut rng, n, total);
        let labels = LabeledSession {
            session_id: self.session_id.clone(),
            title: p.title,
            genre: p.title.genre().as_str().to_string(),
            pattern: p.pattern,
            stage_marks: marks,
            config: self.config.clone(),
        };

        let mut slots = Vec::with_capacity(total as usize);
        for k in 0..total {
            let stage = labels.stage_at(k as f64);
            let fr = uniform(&mut rng, self.qoe.frame_rate_fraction.get(stage));
            let plan = match p.stages.get(stage) {
                None => SlotPlan {
                    stage,
                    down_bps: launch_level * peak_down,
                    up_bps: launch_up * peak_up,
                    up_pps: launch_up * peak_up_pps * rng.random_range(0.9..=1.1),
                    frame_rate: (fps * fr).max(1.0),
                    center_jitter: rng.random_range(0.97..=1.03),
                    rate_jitter: rng.random_range(0.8..=1.2),
                },
                Some(level) => {
                    let up = uniform(&mut rng, level.up);
                    SlotPlan {
                        stage,
                        down_bps: uniform(&mut rng, level.down) * peak_down,
                        up_bps: up * peak_up,
                        up_pps: up * peak_up_pps * rng.random_range(0.9..=1.1),
                        frame_rate: (fps * fr).max(1.0),
                        center_jitter: 1.0,
                        rate_jitter: 1.0,
                    }
                }
            };
            slots.push(plan);
        }

        let q = &self.qoe;
        let qoe = slots
            .iter()
            .enumerate()
            .map(|(k, s)| {
                let impaired = rng.random::<f64>() < q.impairment_probability;
                let (lat, loss) = if impaired {
                    (q.impaired_latency_ms, q.impaired_loss_rate)
                } else {
                    (q.latency_ms, q.loss_rate)
                };
                QoESample {
                    frame_rate: s.frame_rate.round(),
                    throughput: s.down_bps.round(),
                    latency: uniform(&mut rng, lat),
                    loss_rate: uniform(&mut rng, loss),
                    interval: SlotIndex {
                        index: k as u64,
                        width: GEN_SLOT_S,
                    },
                }
            })
            .collect();

        let client_ip = IpAddr::V4(Ipv4Addr::new(192, 168, rng.random_range(0..=15), rng.random_range(2..=250)));
        let server_ip = IpAddr::V4(Ipv4Addr::new(198, 51, 100, rng.random_range(1..=199)));
        Ok(SessionPlan {
            spec: self.clone(),
            labels,
            slots,
            qoe,
            peak_down_mbps: peak_down / 1e6,
            server: Endpoint::new(server_ip, SERVER_PORT),
            client: Endpoint::new(client_ip, rng.random_range(49_152..=65_000)),
        })
    }
}

/// Non-stream traffic sharing the capture: DNS, an HTTPS download and a
/// sparse UDP keep-alive. None of it should pass the streaming detector.
#[derive(Debug, Clone, Copy)]
struct Background {
    dns: FlowKey,
    https: FlowKey,
    keepalive: FlowKey,
}

struct Emit {
    ns: i64,
    rec: PacketRecord,
}

fn record(ns: i64, flow: FlowKey, sender: Endpoint, size: u32, lead: Option<u8>) -> Emit {
    let canon = canonicalize(flow);
    let server = provisional_server(&canon);
    let direction = if sender == server {
        Direction::Downstream
    } else {
        Direction::Upstream
    };
    Emit {
        ns,
        rec: PacketRecord {
            timestamp: 0.0,
            direction,
            payload_size: size,
            flow: canon,
            lead_byte: lead,
        },
    }
}

/// Lazy packet stream of one planned session, in capture order.
pub struct SessionPackets {
    plan: SessionPlan,
    rng: ChaCha8Rng,
    slot: usize,
    stream: FlowKey,
    background: Background,
    augmenter: Option<Augmenter>,
    buffer: VecDeque<PacketRecord>,
    last_stream_ns: i64,
}

impl SessionPlan {
    pub fn packets(&self) -> SessionPackets {
        self.packets_with(None)
    }

    pub fn packets_with(&self, augment: Option<&AugmentParams>) -> SessionPackets {
        let mut rng = rng_for(self.spec.seed, 1);
        let c = self.client;
        let port = |rng: &mut ChaCha8Rng| rng.random_range(49_152..=65_000);
        let background = Background {
            dns: FlowKey::new(Endpoint::new(c.addr, port(&mut rng)), Endpoint::new(IpAddr::V4(Ipv4Addr::new(9, 9, 9, 9)), 53), Transport::Udp),
            https: FlowKey::new(
                Endpoint::new(c.addr, port(&mut rng)),
                Endpoint::new(IpAddr::V4(Ipv4Addr::new(203, 0, 113, 10)), 443),
                Transport::Tcp,
            ),
            keepalive: FlowKey::new(
                Endpoint::new(c.addr, port(&mut rng)),
                Endpoint::new(IpAddr::V4(Ipv4Addr::new(198, 51, 100, 250)), 3478),
                Transport::Udp,
            ),
        };
        let augmenter = augment.map(|a| Augmenter::new(a.clone(), GEN_SLOT_S, self.spec.profile.max_payload));
        SessionPackets {
            plan: self.clone(),
            rng,
            slot: 0,
            stream: FlowKey::new(self.server, self.client, Transport::Udp),
            background,
            augmenter,
            buffer: VecDeque::new(),
            last_stream_ns: -1,
        }
    }

    /// Materialize the whole session.
    pub fn collect_packets(&self) -> Vec<PacketRecord> {
        self.packets().collect()
    }
}

impl SessionPackets {
    fn launch_slot(&mut self, k: usize, base: i64, out: &mut Vec<Emit>) {
        let plan = self.plan.slots[k];
        let profile = &self.plan.spec.profile;
        let spec = &profile.launch[k];
        let max = profile.max_payload;
        let (server, client, flow) = (self.plan.server, self.plan.client, self.stream);
        let rng = &mut self.rng;
        let mut other_bits = 0.0;
        for band in &spec.steady {
            let center = band.center * plan.center_jitter;
            let count = (band.rate * plan.rate_jitter).round() as usize;
            let train = band.train as usize;
            let span = train as i64 * TRAIN_GAP_NS;
            let mut left = count;
            while left > 0 {
                let len = left.min(train);
                let start = rng.random_range(0..NS - span);
                for j in 0..len {
                    let dev = if band.spread > 0.0 {
                        rng.random_range(-band.spread..=band.spread)
                    } else {
                        0.0
                    };
                    let size = (center * (1.0 + dev)).round().clamp(1.0, (max - 1) as f64) as u32;
                    other_bits += size as f64 * 8.0;
                    out.push(record(base + start + j as i64 * TRAIN_GAP_NS, flow, server, size, Some(RTP_LEAD)));
                }
                left -= len;
            }
        }
        let sp = &spec.sparse;
        let sparse_n = (sp.rate * plan.rate_jitter).round() as usize;
        for _ in 0..sparse_n {
            let size = rng.random_range(sp.min..=sp.max);
            other_bits += size as f64 * 8.0;
            out.push(record(base + rng.random_range(0..NS), flow, server, size, Some(RTP_LEAD)));
        }
        let weights: f64 = profile.launch.iter().map(|s| s.full_weight).sum::<f64>() / profile.launch.len() as f64;
        let full_bits = plan.down_bps * spec.full_weight / weights - other_bits;
        let full_n = (full_bits / (max as f64 * 8.0)).round().max(1.0) as usize;
        for j in 0..full_n {
            let ns = if k == 0 && j == 0 { 0 } else { base + rng.random_range(0..NS) };
            out.push(record(ns, flow, server, max, Some(RTP_LEAD)));
        }
        Self::upstream(rng, &plan, base, flow, client, out);
    }

    fn upstream(rng: &mut ChaCha8Rng, plan: &SlotPlan, base: i64, flow: FlowKey, client: Endpoint, out: &mut Vec<Emit>) {
        let n = plan.up_pps.round().max(1.0) as usize;
        let mean = plan.up_bps / 8.0 / n as f64;
        for _ in 0..n {
            let size = (mean * rng.random_range(0.7..=1.3)).round().clamp(40.0, 1200.0) as u32;
            out.push(record(base + rng.random_range(1..NS), flow, client, size, Some(RTP_LEAD)));
        }
    }

    fn gameplay_slot(&mut self, k: usize, base: i64, out: &mut Vec<Emit>) {
        let plan = self.plan.slots[k];
        let max = self.plan.spec.profile.max_payload as f64;
        let (server, client, flow) = (self.plan.server, self.plan.client, self.stream);
        let rng = &mut self.rng;
        let frames = plan.frame_rate.round().max(1.0) as i64;
        let per_frame = plan.down_bps / 8.0 / frames as f64;
        let spacing = NS / frames;
        for f in 0..frames {
            let bytes = (per_frame * rng.random_range(0.8..=1.2)).round().max(1.0);
            let full = (bytes / max).floor() as i64;
            let rem = (bytes - full as f64 * max) as u32;
            let start = base + f * spacing + rng.random_range(0..spacing / 4);
            let limit = base + NS - 1;
            for j in 0..full {
                let ns = (start + j * FRAME_PACKET_GAP_NS).min(limit);
                out.push(record(ns, flow, server, max as u32, Some(RTP_LEAD)));
            }
            if rem > 0 {
                let ns = (start + full * FRAME_PACKET_GAP_NS).min(limit);
                out.push(record(ns, flow, server, rem, Some(RTP_LEAD)));
            }
        }
        Self::upstream(rng, &plan, base, flow, client, out);
    }

    fn background_slot(&mut self, k: usize, base: i64, out: &mut Vec<Emit>) {
        let c = self.plan.client;
        let bg = self.background;
        let rng = &mut self.rng;
        if k == 0 {
            for q in 0..4 {
                let t = base + 50_000_000 + q * 90_000_000;
                let lead = Some(rng.random());
                out.push(record(t, bg.dns, bg.dns.src, rng.random_range(30..=60), lead));
                out.push(record(t + 18_000_000, bg.dns, bg.dns.dst, rng.random_range(60..=200), lead));
            }
        }
        if k == 1 || k == 2 {
            let server = bg.https.dst;
            let client = Endpoint::new(c.addr, bg.https.src.port);
            for j in 0..600i64 {
                let t = base + 100_000 + j * 1_500_000;
                out.push(record(t, bg.https, server, 1448, Some(0x17)));
                if j % 2 == 0 {
                    out.push(record(t + 40_000, bg.https, client, 0, None));
                }
            }
        }
        if k % 15 == 3 {
            let t = base + rng.random_range(0..NS / 2);
            out.push(record(t, bg.keepalive, bg.keepalive.src, 20, Some(0x00)));
            out.push(record(t + 30_000_000, bg.keepalive, bg.keepalive.dst, 32, Some(0x01)));
        }
    }

    fn fill(&mut self) -> bool {
        if self.slot >= self.plan.slots.len() {
            return false;
        }
        let k = self.slot;
        self.slot += 1;
        let base = k as i64 * NS;
        let mut emits = Vec::new();
        if k < self.plan.spec.profile.launch.len() {
            self.launch_slot(k, base, &mut emits);
        } else {
            self.gameplay_slot(k, base, &mut emits);
        }
        let mut stream = emits;
        let mut background = Vec::new();
        self.background_slot(k, base, &mut background);
        background.retain(|e| e.rec.payload_size > 0);
        // Stream packets get strictly increasing nanosecond times.
        stream.sort_by_key(|e| e.ns);
        for e in &mut stream {
            e.ns = e.ns.max(self.last_stream_ns + 1);
            self.last_stream_ns = e.ns;
        }
        let mut all: Vec<Emit> = stream.into_iter().chain(background).collect();
        all.sort_by_key(|e| e.ns);
        let mut batch: Vec<PacketRecord> = all
            .into_iter()
            .map(|e| PacketRecord {
                timestamp: e.ns as f64 / NS as f64,
                ..e.rec
            })
            .collect();
        if let Some(aug) = &mut self.augmenter {
            aug.apply_slot(&mut batch);
        }
        self.buffer.extend(batch);
        true
    }
}

impl Iterator for SessionPackets {
    type Item = PacketRecord;

    fn next(&mut self) -> Option<PacketRecord> {
        while self.buffer.is_empty() {
            if !self.fill() {
                return None;
            }
        }
        self.buffer.pop_front()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::capture::ResolutionClass;
    use crate::synth::ProfileSet;

    pub(crate) fn spec(id: &str, duration: f64, seed: u64) -> SessionSpec {
        let set = ProfileSet::shipped();
        SessionSpec {
            session_id: format!("{id}-test"),
            profile: set.get(id).unwrap().clone(),
            qoe: set.qoe.clone(),
            duration_s: duration,
            config: StreamConfig {
                resolution_class: ResolutionClass::FHD,
                frame_rate_setting: 60,
                platform: "test".into(),
            },
            seed,
        }
    }

    #[test]
    fn deterministic_and_time_ordered() {
        let plan = spec("fortnite", 12.0, 3).plan().unwrap();
        let a = plan.collect_packets();
        let b = spec("fortnite", 12.0, 3).plan().unwrap().collect_packets();
        assert_eq!(a, b);
        assert!(a.windows(2).all(|w| w[0].timestamp <= w[1].timestamp));
        assert_eq!(a[0].timestamp, 0.0);
        assert_eq!(a[0].payload_size, 1432);
    }

    #[test]
    fn launch_marks_and_validation() {
        let plan = spec("genshin-impact", 60.0, 1).plan().unwrap();
        assert_eq!(plan.labels.stage_marks[0], (0.0, StageLabel::Launch));
        assert_eq!(plan.labels.stage_marks[1], (5.0, StageLabel::Idle));
        plan.labels.validate().unwrap();
        assert_eq!(plan.slots.len(), 60);
        assert_eq!(plan.qoe.len(), 60);
        assert!(spec("genshin-impact", 5.0, 1).plan().is_err());
    }

    #[test]
    fn launch_slot_zero_has_full_packets() {
        let plan = spec("dota-2", 8.0, 11).plan().unwrap();
        let full = plan
            .packets()
            .take_while(|p| p.timestamp < 1.0)
            .filter(|p| p.is_downstream() && p.payload_size == 1432)
            .count();
        assert!(full > 100, "{full}");
    }
}
