use std::net::{IpAddr, Ipv4Addr};

use cglens_core::capture::read_labels;
use cglens_core::config::Config;
use cglens_core::engine::summarize;
use cglens_core::harness::{collect_dir, collect_synth, split_sessions};
use cglens_core::model::{Direction, Endpoint, FlowKey, PacketRecord, Transport};
use cglens_core::synth::{build_entries, read_manifest, stationary_shares, write_corpus, CorpusConfig, ProfileSet};
use cglens_core::Exec;

fn small_corpus(duration: f64) -> Vec<cglens_core::synth::CorpusEntry> {
    let set = ProfileSet::shipped();
    let cc = CorpusConfig {
        profiles: vec!["fortnite".into(), "genshin-impact".into(), "unknown-spectate".into()],
        sessions_per_profile: 2,
        augmented_per_session: 1,
        duration_s: [duration, duration],
        seed: 4,
        ..CorpusConfig::default()
    };
    build_entries(&set, &cc).unwrap()
}

#[test]
fn disk_corpus_matches_in_memory_synthesis() {
    let cfg = Config::default();
    let entries = small_corpus(30.0);
    let dir = tempfile::tempdir().unwrap();
    let rows = write_corpus(&entries, dir.path(), Exec::Parallel).unwrap();
    assert_eq!(rows.len(), entries.len());
    assert_eq!(read_manifest(dir.path()).unwrap(), rows);

    let (mem, missing) = collect_synth(&entries, &cfg, Exec::Parallel).unwrap();
    assert_eq!(missing, 0);
    let (disk, missing) = collect_dir(dir.path(), &cfg, Exec::Parallel).unwrap();
    assert_eq!(missing, 0);
    assert_eq!(mem.len(), disk.len());
    for (m, d) in mem.iter().zip(&disk) {
        assert_eq!(m.session_id, d.session_id);
        assert_eq!(m.labels, d.labels);
        assert_eq!(m.summary.max_payload, d.summary.max_payload);
        assert_eq!(m.summary.packets, d.summary.packets);
        assert_eq!(m.summary.down_bytes, d.summary.down_bytes);
        assert_eq!(m.summary.volumetrics.len(), d.summary.volumetrics.len());
        for (a, b) in m.summary.title_features.iter().zip(&d.summary.title_features) {
            assert!((a - b).abs() <= 1e-6 * a.abs().max(1.0), "{}: {a} vs {b}", m.session_id);
        }
        assert_eq!(m.qoe.len(), d.qoe.len());
    }
    let labels = read_labels(rows[0].labels_path(dir.path())).unwrap();
    assert_eq!(labels.session_id, rows[0].session_id);
}

#[test]
fn augmented_copies_share_the_split_side() {
    let cfg = Config::default();
    let (data, _) = collect_synth(&small_corpus(8.0), &cfg, Exec::Parallel).unwrap();
    let (tr, te) = split_sessions(&data, 0.5, 3);
    for &i in &te {
        assert!(tr.iter().all(|&j| data[j].base_id != data[i].base_id));
    }
    assert_eq!(tr.len() + te.len(), data.len());
}

#[test]
fn sequential_and_parallel_summaries_agree() {
    let cfg = Config::default();
    let entries = small_corpus(12.0);
    let (a, _) = collect_synth(&entries, &cfg, Exec::Sequential).unwrap();
    let (b, _) = collect_synth(&entries, &cfg, Exec::Parallel).unwrap();
    for (x, y) in a.iter().zip(&b) {
        assert_eq!(x.summary, y.summary);
    }
}

#[test]
fn title_features_depend_only_on_the_launch_window() {
    let cfg = Config::default();
    for e in small_corpus(40.0) {
        let plan = e.plan().unwrap();
        let packets: Vec<PacketRecord> = e.packets(&plan).collect();
        let full = summarize(packets.iter().copied().map(Ok), &cfg).unwrap();
        let start = full.primary().unwrap().flow.first_packet_at;
        let cut = summarize(
            packets.iter().copied().filter(|p| p.timestamp - start < cfg.grouper.window_s).map(Ok),
            &cfg,
        )
        .unwrap();
        let (a, b) = (full.primary().unwrap(), cut.primary().unwrap());
        assert_eq!(a.title_features, b.title_features, "{}", e.session_id);
        assert_eq!(a.max_payload, b.max_payload);
        assert_eq!(a.baseline, b.baseline);
    }
}

#[test]
fn web_traffic_has_no_streaming_flow() {
    let cfg = Config::default();
    let client = Endpoint::new(IpAddr::V4(Ipv4Addr::new(192, 168, 1, 20)), 51000);
    let web = Endpoint::new(IpAddr::V4(Ipv4Addr::new(93, 184, 216, 34)), 443);
    let dns = Endpoint::new(IpAddr::V4(Ipv4Addr::new(1, 1, 1, 1)), 53);
    let mut packets = Vec::new();
    for i in 0..20_000u32 {
        let t = i as f64 * 0.0005;
        packets.push(PacketRecord {
            timestamp: t,
            direction: Direction::Downstream,
            payload_size: 1448,
            flow: FlowKey::new(web, client, Transport::Tcp),
            lead_byte: Some(0x17),
        });
        if i % 400 == 0 {
            packets.push(PacketRecord {
                timestamp: t,
                direction: Direction::Upstream,
                payload_size: 40,
                flow: FlowKey::new(dns, client, Transport::Udp),
                lead_byte: Some(0x12),
            });
        }
    }
    let s = summarize(packets.into_iter().map(Ok), &cfg).unwrap();
    assert!(s.flows.is_empty());
    assert_eq!(s.stats.accepted, 0);
    assert!(s.stats.flows_seen >= 2);
}

#[test]
fn generated_stage_shares_track_the_profile() {
    let set = ProfileSet::shipped();
    for id in ["genshin-impact", "fortnite"] {
        let p = set.get(id).unwrap();
        let expect = stationary_shares(&p.jump, &p.dwell_s);
        let cc = CorpusConfig {
            profiles: vec![id.into()],
            sessions_per_profile: 40,
            duration_s: [3600.0, 3600.0],
            seed: 12,
            ..CorpusConfig::default()
        };
        let mut time = [0.0f64; 3];
        for e in build_entries(&set, &cc).unwrap() {
            let plan = e.plan().unwrap();
            let marks = &plan.labels.stage_marks;
            for (k, (t, s)) in marks.iter().enumerate() {
                let end = marks.get(k + 1).map_or(plan.spec.duration_s, |m| m.0);
                if let Some(i) = s.gameplay_index() {
                    time[i] += end - t;
                }
            }
        }
        let total: f64 = time.iter().sum();
        for i in 0..3 {
            let got = time[i] / total;
            assert!((got - expect[i]).abs() < 0.05, "{id} stage {i}: {got:.3} vs {:.3}", expect[i]);
        }
    }
}
