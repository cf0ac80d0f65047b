use std::net::{IpAddr, Ipv4Addr};

use proptest::prelude::*;

use cglens_core::capture::{CaptureReader, CaptureWriter};
use cglens_core::forest::{permutation_importance, train, Dataset, ForestParams};
use cglens_core::grouper::{label_groups, GroupLabel, GrouperParams};
use cglens_core::model::{canonicalize, slot_of, Direction, Endpoint, FlowKey, PacketRecord, SlotIndex, StageLabel, Transport};
use cglens_core::qoe::{
    effective_level, objective_level, verdicts, CalibrationTable, ContextSnapshot, HigherBetter, ObjectiveThresholds, QoESample,
};
use cglens_core::model::{ActivityPattern, GameTitle};
use cglens_core::synth::{augment, build_entries, AugmentParams, CorpusConfig, ProfileSet};
use cglens_core::tracker::{ema_update, prefix_matrices, session_features, SlotVolumetrics, TrackerConfig, TransitionMatrix};
use cglens_core::Exec;

fn endpoint(a: u8, port: u16) -> Endpoint {
    Endpoint::new(IpAddr::V4(Ipv4Addr::new(10, 0, 0, a)), port)
}

fn server() -> Endpoint {
    endpoint(1, 49004)
}

fn stream_flow() -> FlowKey {
    canonicalize(FlowKey::new(server(), endpoint(2, 50000), Transport::Udp))
}

fn down(t: f64, size: u32) -> PacketRecord {
    PacketRecord {
        timestamp: t,
        direction: Direction::Downstream,
        payload_size: size,
        flow: stream_flow(),
        lead_byte: Some(0x80),
    }
}

fn stage_strategy() -> impl Strategy<Value = StageLabel> {
    prop_oneof![Just(StageLabel::Idle), Just(StageLabel::Passive), Just(StageLabel::Active)]
}

/// Time order with ties broken by size, then input position; within each
/// slot a non-full packet is Steady when more of its (up to two per side)
/// non-full neighbours lie within 10% of its size than not.
fn grouping_oracle(packets: &[PacketRecord], params: &GrouperParams) -> Vec<GroupLabel> {
    let mut order: Vec<usize> = (0..packets.len()).collect();
    order.sort_by(|&a, &b| {
        packets[a]
            .timestamp
            .total_cmp(&packets[b].timestamp)
            .then(packets[a].payload_size.cmp(&packets[b].payload_size))
            .then(a.cmp(&b))
    });
    let mut out = vec![GroupLabel::Full; packets.len()];
    for slot in 0..params.n_slots() {
        let members: Vec<usize> = order
            .iter()
            .copied()
            .filter(|&i| (packets[i].timestamp / params.slot_s).floor() as usize == slot)
            .filter(|&i| packets[i].payload_size != params.max_payload)
            .collect();
        for (r, &i) in members.iter().enumerate() {
            let s = packets[i].payload_size;
            let (mut agree, mut total) = (0, 0);
            for (q, &j) in members.iter().enumerate() {
                if q != r && q.abs_diff(r) <= 2 {
                    total += 1;
                    agree += usize::from(10 * s.abs_diff(packets[j].payload_size) <= s);
                }
            }
            out[i] = if 2 * agree > total { GroupLabel::Steady } else { GroupLabel::Sparse };
        }
    }
    out
}

fn volumetrics(i: u64, v: [f64; 4]) -> SlotVolumetrics {
    SlotVolumetrics {
        down_throughput: v[0],
        up_throughput: v[1],
        down_pkt_rate: v[2],
        up_pkt_rate: v[3],
        slot: SlotIndex { index: i, width: 1.0 },
    }
}

proptest! {
    #[test]
    fn slot_of_is_monotone_and_contains_timestamp(a in 0.0f64..1e6, b in 0.0f64..1e6, w in 0.01f64..10.0) {
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        let (sl, sh) = (slot_of(lo, w).unwrap(), slot_of(hi, w).unwrap());
        prop_assert!(sl.index <= sh.index);
        prop_assert_eq!(sl.index, (lo / w).floor() as u64);
        prop_assert!(sl.start() <= lo * (1.0 + 1e-12) && lo < sl.end() * (1.0 + 1e-12));
    }

    #[test]
    fn canonical_key_ignores_direction(a in any::<u32>(), b in any::<u32>(), pa in any::<u16>(), pb in any::<u16>(), tcp in any::<bool>()) {
        let t = if tcp { Transport::Tcp } else { Transport::Udp };
        let k = FlowKey::new(
            Endpoint::new(IpAddr::V4(Ipv4Addr::from(a)), pa),
            Endpoint::new(IpAddr::V4(Ipv4Addr::from(b)), pb),
            t,
        );
        let c = canonicalize(k);
        prop_assert_eq!(c, canonicalize(k.reversed()));
        prop_assert_eq!(c, canonicalize(c));
        prop_assert!(c.is_canonical());
    }

    #[test]
    fn grouping_matches_oracle(
        pkts in prop::collection::vec(
            (0usize..5, 0u32..20, prop_oneof![Just(1432u32), 1u32..1432, Just(1000u32), Just(1050u32)]),
            0..60,
        ),
    ) {
        let params = GrouperParams::default();
        // Coarse in-slot offsets make equal timestamps common.
        let packets: Vec<PacketRecord> = pkts
            .iter()
            .map(|&(slot, off, size)| down(slot as f64 + off as f64 * 0.05, size))
            .collect();
        let got: Vec<GroupLabel> = label_groups(&packets, &params).unwrap().into_iter().map(|(_, l)| l).collect();
        prop_assert_eq!(got, grouping_oracle(&packets, &params));
    }

    #[test]
    fn ema_matches_closed_form(xs in prop::collection::vec(0.0f64..1.0, 1..60), alpha in 0.01f64..=1.0) {
        let mut s = xs[0];
        for &x in &xs[1..] {
            s = ema_update(x, s, alpha).unwrap();
        }
        // s_n = (1-a)^(n-1) x_1 + sum_{k>=2} a (1-a)^(n-k) x_k
        let n = xs.len();
        let mut closed = (1.0 - alpha).powi(n as i32 - 1) * xs[0];
        for (k, &x) in xs.iter().enumerate().skip(1) {
            closed += alpha * (1.0 - alpha).powi((n - 1 - k) as i32) * x;
        }
        prop_assert!((s - closed).abs() <= 1e-12, "{} vs {}", s, closed);
    }

    #[test]
    fn transition_rows_and_counts(seq in prop::collection::vec(stage_strategy(), 2..200), launch in 0usize..10) {
        let mut stages = vec![StageLabel::Launch; launch];
        stages.extend(&seq);
        let prefixes = prefix_matrices(&stages).unwrap();
        prop_assert_eq!(prefixes.len(), seq.len() - 1);
        for (k, m) in prefixes.iter().enumerate() {
            prop_assert_eq!(m.total(), k as u64 + 1);
            for row in m.probabilities() {
                prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
            }
        }
        let mut full = TransitionMatrix::default();
        for w in seq.windows(2) {
            full.record(w[0], w[1]).unwrap();
        }
        prop_assert_eq!(prefixes.last().copied().unwrap(), full);
        prop_assert!(full.record(StageLabel::Launch, StageLabel::Idle).is_err());
    }

    #[test]
    fn objective_level_is_monotone_in_frame_rate(f1 in 0.0f64..150.0, f2 in 0.0f64..150.0, thr in 0.0f64..4e7, lat in 0.0f64..200.0, loss in 0.0f64..0.05) {
        let t = ObjectiveThresholds::default();
        let s = |f| QoESample { frame_rate: f, throughput: thr, latency: lat, loss_rate: loss, interval: SlotIndex { index: 0, width: 1.0 } };
        let (lo, hi) = if f1 <= f2 { (f1, f2) } else { (f2, f1) };
        prop_assert!(objective_level(&s(lo), &t) <= objective_level(&s(hi), &t));
    }

    #[test]
    fn calibration_only_touches_frame_rate_and_throughput(
        fps in 0.0f64..150.0, thr in 0.0f64..4e7, lat in 0.0f64..200.0, loss in 0.0f64..0.05,
        b1 in 0.0f64..100.0, g1 in 0.0f64..100.0, b2 in 0.0f64..30.0, g2 in 0.0f64..30.0,
    ) {
        let t = ObjectiveThresholds::default();
        let s = QoESample { frame_rate: fps, throughput: thr, latency: lat, loss_rate: loss, interval: SlotIndex { index: 3, width: 1.0 } };
        let fb = HigherBetter { bad_below: b1.min(g1), good_from: b1.max(g1) };
        let tb = HigherBetter { bad_below: b2.min(g2), good_from: b2.max(g2) };
        let eff = verdicts(&s, &fb, &tb, &t);
        let obj = verdicts(&s, &t.frame_rate, &t.throughput_mbps, &t);
        prop_assert_eq!(&eff[2..], &obj[2..]);
    }

    #[test]
    fn shipped_calibration_never_lowers_a_verdict(
        fps in 0.0f64..150.0, thr in 0.0f64..4e7, lat in 0.0f64..200.0, loss in 0.0f64..0.05,
        title in 0usize..14, stage in 0usize..4, continuous in any::<bool>(),
    ) {
        let table = CalibrationTable::shipped();
        let t = ObjectiveThresholds::default();
        let titles: Vec<GameTitle> = GameTitle::catalog().chain([GameTitle::Unknown]).collect();
        let stages = [StageLabel::Launch, StageLabel::Idle, StageLabel::Passive, StageLabel::Active];
        let ctx = ContextSnapshot {
            title: titles[title % titles.len()],
            pattern: if continuous { ActivityPattern::ContinuousPlay } else { ActivityPattern::SpectateAndPlay },
            stage: stages[stage],
        };
        let s = QoESample { frame_rate: fps, throughput: thr, latency: lat, loss_rate: loss, interval: SlotIndex { index: 0, width: 1.0 } };
        prop_assert!(effective_level(&s, &ctx, &table, &t) >= objective_level(&s, &t));
    }

    #[test]
    fn relative_features_are_scale_invariant(
        launch in prop::collection::vec(prop::array::uniform4(1.0f64..1e7), 5),
        rest in prop::collection::vec(prop::array::uniform4(0.0f64..2e7), 1..40),
        c in prop_oneof![Just(0.5f64), Just(2.0), Just(10.0)],
    ) {
        let cfg = TrackerConfig::default();
        let vols: Vec<SlotVolumetrics> = launch.iter().chain(&rest).enumerate().map(|(i, v)| volumetrics(i as u64, *v)).collect();
        let scaled: Vec<SlotVolumetrics> = vols.iter().map(|v| v.scaled(c)).collect();
        let a = session_features(&vols, &cfg).unwrap();
        let b = session_features(&scaled, &cfg).unwrap();
        for (x, y) in a.iter().zip(&b) {
            prop_assert_eq!(x.launch, y.launch);
            for k in 0..4 {
                prop_assert!((x.relative.values[k] - y.relative.values[k]).abs() <= 1e-12);
                prop_assert!((x.smoothed[k] - y.smoothed[k]).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn pcap_roundtrip_preserves_records(
        pkts in prop::collection::vec((0u64..5_000_000_000, 1u32..1432, any::<bool>(), any::<u8>()), 1..50),
    ) {
        let mut pkts = pkts;
        pkts.sort_by_key(|p| p.0);
        let records: Vec<PacketRecord> = pkts
            .iter()
            .map(|&(ns, size, up, lead)| PacketRecord {
                timestamp: (ns - pkts[0].0) as f64 / 1e9,
                direction: if up { Direction::Upstream } else { Direction::Downstream },
                payload_size: size,
                flow: stream_flow(),
                lead_byte: Some(lead),
            })
            .collect();
        let mut w = CaptureWriter::new(Vec::new(), 96).unwrap();
        for r in &records {
            w.write_record(r, &server()).unwrap();
        }
        let bytes = w.finish().unwrap();
        let back: Vec<PacketRecord> = CaptureReader::new(&bytes[..]).unwrap().collect::<Result<_, _>>().unwrap();
        prop_assert_eq!(back.len(), records.len());
        for (a, b) in records.iter().zip(&back) {
            prop_assert!((a.timestamp - b.timestamp).abs() < 1e-9);
            prop_assert_eq!(a.payload_size, b.payload_size);
            prop_assert_eq!(a.flow, b.flow);
            prop_assert_eq!(a.lead_byte, b.lead_byte);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn forest_is_invariant_under_increasing_transforms(
        rows in prop::collection::vec(prop::array::uniform3(-10.0f64..10.0), 20..60),
        probe in prop::collection::vec(prop::array::uniform3(-10.0f64..10.0), 10),
        seed in any::<u64>(),
    ) {
        let labels: Vec<&str> = rows.iter().map(|r| if r[0] * r[1] > r[2] { "x" } else { "y" }).collect();
        prop_assume!(labels.contains(&"x") && labels.contains(&"y"));
        let f = |r: &[f64; 3]| vec![3.0 * r[0] + 1.0, r[1].powi(3), r[2].exp()];
        let params = ForestParams::new(7, 10, seed);
        let plain = train(&Dataset::from_labels(rows.iter().map(|r| r.to_vec()).collect(), &labels).unwrap(), &params, Exec::Sequential).unwrap();
        let warped = train(&Dataset::from_labels(rows.iter().map(f).collect(), &labels).unwrap(), &params, Exec::Sequential).unwrap();
        for p in probe.iter().chain(&rows) {
            let a = plain.predict(p).unwrap();
            let b = warped.predict(&f(p)).unwrap();
            prop_assert_eq!(a.label, b.label);
            prop_assert_eq!(a.votes, b.votes);
        }
    }

    #[test]
    fn constant_attribute_has_zero_importance(
        rows in prop::collection::vec(prop::array::uniform2(0.0f64..1.0), 30..120),
        constant in -5.0f64..5.0,
        at in 0usize..3,
        seed in any::<u64>(),
    ) {
        let data: Vec<Vec<f64>> = rows
            .iter()
            .map(|r| {
                let mut v = r.to_vec();
                v.insert(at, constant);
                v
            })
            .collect();
        let labels: Vec<&str> = rows.iter().map(|r| if r[0] > r[1] { "a" } else { "b" }).collect();
        prop_assume!(labels.contains(&"a") && labels.contains(&"b"));
        let ds = Dataset::from_labels(data.clone(), &labels).unwrap();
        let model = train(&ds, &ForestParams::new(9, 8, seed), Exec::Sequential).unwrap();
        let imp = permutation_importance(&model, &data, &ds.targets, seed, 3, Exec::Sequential).unwrap();
        prop_assert!(imp[at].abs() <= 1e-12);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(6))]

    #[test]
    fn augmentation_keeps_labels_slots_and_full_packets(seed in any::<u64>(), profile in 0usize..13) {
        let set = ProfileSet::shipped();
        let id = set.known()[profile].id.clone();
        let cc = CorpusConfig { profiles: vec![id], sessions_per_profile: 1, duration_s: [12.0, 12.0], seed, ..CorpusConfig::default() };
        let entry = build_entries(&set, &cc).unwrap().remove(0);
        let plan = entry.plan().unwrap();
        let packets = plan.collect_packets();
        let params = AugmentParams { rng_seed: seed, ..AugmentParams::default() };
        let (aug, labels) = augment(&packets, &plan.labels, &params, 1.0, 1432).unwrap();
        prop_assert_eq!(&labels, &plan.labels);
        prop_assert_eq!(aug.len(), packets.len());
        let mut a: Vec<(u64, u32, bool)> = Vec::new();
        let mut b: Vec<(u64, u32, bool)> = Vec::new();
        for p in &packets {
            a.push((p.timestamp.floor() as u64, p.payload_size, p.payload_size == 1432));
        }
        for p in &aug {
            b.push((p.timestamp.floor() as u64, p.payload_size, p.payload_size == 1432));
        }
        let slots = |v: &[(u64, u32, bool)]| {
            let mut s: Vec<(u64, bool)> = v.iter().map(|x| (x.0, x.2)).collect();
            s.sort();
            s
        };
        // Same packet count per slot, and the same number of full packets per slot.
        prop_assert_eq!(slots(&a), slots(&b));
        for w in aug.windows(2) {
            prop_assert!(w[0].timestamp <= w[1].timestamp);
        }
    }
}

#[test]
fn continuous_play_rarely_spectates() {
    let set = ProfileSet::shipped();
    let ids: Vec<String> = set
        .profiles
        .iter()
        .filter(|p| p.pattern == ActivityPattern::ContinuousPlay)
        .map(|p| p.id.clone())
        .collect();
    let (mut passive, mut gameplay) = (0.0, 0.0);
    for seed in 0..20 {
        let cc = CorpusConfig { profiles: ids.clone(), sessions_per_profile: 3, duration_s: [1800.0, 1800.0], seed, ..CorpusConfig::default() };
        for e in build_entries(&set, &cc).unwrap() {
            let plan = e.plan().unwrap();
            let marks = &plan.labels.stage_marks;
            for (k, (t, s)) in marks.iter().enumerate() {
                let end = marks.get(k + 1).map_or(plan.spec.duration_s, |m| m.0);
                if *s != StageLabel::Launch {
                    gameplay += end - t;
                    if *s == StageLabel::Passive {
                        passive += end - t;
                    }
                }
            }
        }
    }
    let share = passive / gameplay;
    assert!(share < 0.05 + 0.02, "continuous passive share {share:.3}");
    assert!(share > 0.0, "continuous sessions should still spectate occasionally");
}
