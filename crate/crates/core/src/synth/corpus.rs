//! Corpora of synthesized sessions, on disk or described in memory.
//!
//! A [`CorpusEntry`] is just a recipe; packets are regenerated on demand,
//! so experiments over thousands of sessions never hold captures in memory.

use std::fs::{self, File};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::capture::{write_labels, CaptureWriter, ResolutionClass, StreamConfig};
use crate::error::{Error, Result};
use crate::harness::split_groups;
use crate::model::{provisional_server, ActivityPattern, GameTitle};
use crate::par::{map_slice, Exec};
use crate::qoe::write_samples;

use super::augment::AugmentParams;
use super::generate::{mix_seed, SessionPackets, SessionPlan, SessionSpec};
use super::profile::{ProfileSet, Range};

const PLATFORMS: [&str; 4] = ["windows-app", "macos-app", "browser", "android-app"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusConfig {
    /// Profile ids to draw from; empty means every profile in the set.
    pub profiles: Vec<String>,
    pub sessions_per_profile: usize,
    /// Augmented copies generated per base session.
    pub augmented_per_session: usize,
    pub duration_s: Range,
    pub seed: u64,
    pub augment: AugmentParams,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        CorpusConfig {
            profiles: Vec::new(),
            sessions_per_profile: 10,
            augmented_per_session: 0,
            duration_s: [600.0, 600.0],
            seed: 1,
            augment: AugmentParams::default(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct CorpusEntry {
    pub session_id: String,
    pub base_id: String,
    pub profile_id: String,
    pub spec: SessionSpec,
    pub augment: Option<AugmentParams>,
}

impl CorpusEntry {
    pub fn plan(&self) -> Result<SessionPlan> {
        let mut plan = self.spec.plan()?;
        plan.labels.session_id = self.session_id.clone();
        Ok(plan)
    }

    pub fn packets(&self, plan: &SessionPlan) -> SessionPackets {
        plan.packets_with(self.augment.as_ref())
    }
}

fn draw_config(rng: &mut ChaCha8Rng) -> StreamConfig {
    let resolution_class = ResolutionClass::ALL[rng.random_range(0..ResolutionClass::ALL.len())];
    let u: f64 = rng.random();
    let frame_rate_setting = if u < 0.25 {
        30
    } else if u < 0.8 {
        60
    } else {
        120
    };
    StreamConfig {
        resolution_class,
        frame_rate_setting,
        platform: PLATFORMS[rng.random_range(0..PLATFORMS.len())].to_string(),
    }
}

/// Expand a corpus configuration into session recipes.
pub fn build_entries(set: &ProfileSet, cfg: &CorpusConfig) -> Result<Vec<CorpusEntry>> {
    if !(cfg.duration_s[0] <= cfg.duration_s[1]) {
        return Err(Error::Validation(format!("duration range {:?} is not ordered", cfg.duration_s)));
    }
    let profiles: Vec<_> = if cfg.profiles.is_empty() {
        set.profiles.iter().collect()
    } else {
        cfg.profiles
            .iter()
            .map(|id| set.get(id).ok_or_else(|| Error::Validation(format!("unknown profile `{id}`"))))
            .collect::<Result<_>>()?
    };
    let mut out = Vec::new();
    for (pi, profile) in profiles.iter().enumerate() {
        for n in 0..cfg.sessions_per_profile {
            let seed = mix_seed(cfg.seed, &[pi as u64, n as u64]);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(7);
            let duration = if cfg.duration_s[0] < cfg.duration_s[1] {
                rng.random_range(cfg.duration_s[0]..=cfg.duration_s[1]).round()
            } else {
                cfg.duration_s[0]
            };
            let base_id = format!("{}-{:04}", profile.id, n);
            let spec = SessionSpec {
                session_id: base_id.clone(),
                profile: (*profile).clone(),
                qoe: set.qoe.clone(),
                duration_s: duration,
                config: draw_config(&mut rng),
                seed,
            };
            for a in 0..=cfg.augmented_per_session {
                let (session_id, augment) = if a == 0 {
                    (base_id.clone(), None)
                } else {
                    let params = AugmentParams {
                        rng_seed: mix_seed(seed, &[a as u64]),
                        ..cfg.augment.clone()
                    };
                    (format!("{base_id}-aug{a}"), Some(params))
                };
                out.push(CorpusEntry {
                    session_id,
                    base_id: base_id.clone(),
                    profile_id: profile.id.clone(),
                    spec: spec.clone(),
                    augment,
                });
            }
        }
    }
    Ok(out)
}

/// Train/test assignment grouped by base session, stratified by profile:
/// augmented copies always land with their original. Returns one flag per
/// entry, `true` for test.
pub fn split_by_base(entries: &[CorpusEntry], test_fraction: f64, seed: u64) -> Vec<bool> {
    let keys: Vec<(&str, &str)> = entries.iter().map(|e| (e.profile_id.as_str(), e.base_id.as_str())).collect();
    split_groups(&keys, test_fraction, seed)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestRow {
    pub session_id: String,
    pub base_id: String,
    pub profile: String,
    pub title: GameTitle,
    pub pattern: ActivityPattern,
    pub augmented: bool,
    pub duration_s: f64,
    pub seed: u64,
}

pub const MANIFEST: &str = "manifest.csv";

impl ManifestRow {
    pub fn capture_path(&self, dir: &Path) -> PathBuf {
        dir.join(format!("{}.pcap", self.session_id))
    }

    pub fn labels_path(&self, dir: &Path) -> PathBuf {
        dir.join(format!("{}.labels.csv", self.session_id))
    }

    pub fn qoe_path(&self, dir: &Path) -> PathBuf {
        dir.join(format!("{}.qoe.csv", self.session_id))
    }
}

fn write_entry(entry: &CorpusEntry, dir: &Path) -> Result<ManifestRow> {
    let plan = entry.plan()?;
    let row = ManifestRow {
        session_id: entry.session_id.clone(),
        base_id: entry.base_id.clone(),
        profile: entry.profile_id.clone(),
        title: plan.labels.title,
        pattern: plan.labels.pattern,
        augmented: entry.augment.is_some(),
        duration_s: entry.spec.duration_s,
        seed: entry.spec.seed,
    };
    let cap = row.capture_path(dir);
    let mut w = CaptureWriter::create(&cap)?;
    for rec in entry.packets(&plan) {
        w.write_record(&rec, &provisional_server(&rec.flow)).map_err(|e| Error::io(&cap, e))?;
    }
    w.finish().map_err(|e| Error::io(&cap, e))?;
    write_labels(dir, &entry.session_id, &plan.labels)?;
    let qp = row.qoe_path(dir);
    write_samples(&plan.qoe, File::create(&qp).map_err(|e| Error::io(&qp, e))?)?;
    Ok(row)
}

/// Write every entry (capture, labels, timeline, QoE samples) plus the
/// manifest into `dir`.
pub fn write_corpus(entries: &[CorpusEntry], dir: &Path, exec: Exec) -> Result<Vec<ManifestRow>> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let rows = map_slice(exec, entries, |e| write_entry(e, dir)).into_iter().collect::<Result<Vec<_>>>()?;
    let mp = dir.join(MANIFEST);
    let mut w = csv::Writer::from_writer(File::create(&mp).map_err(|e| Error::io(&mp, e))?);
    for r in &rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(&mp, e))?;
    Ok(rows)
}

pub fn read_manifest(dir: &Path) -> Result<Vec<ManifestRow>> {
    let mp = dir.join(MANIFEST);
    let f = File::open(&mp).map_err(|e| Error::io(&mp, e))?;
    csv::Reader::from_reader(f).deserialize().map(|r| r.map_err(Error::from)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn split_keeps_augmented_copies_with_base() {
        let set = ProfileSet::shipped();
        let cfg = CorpusConfig {
            profiles: vec!["fortnite".into(), "dota-2".into()],
            sessions_per_profile: 10,
            augmented_per_session: 2,
            duration_s: [10.0, 10.0],
            ..CorpusConfig::default()
        };
        let entries = build_entries(&set, &cfg).unwrap();
        assert_eq!(entries.len(), 60);
        let test = split_by_base(&entries, 0.2, 5);
        assert_eq!(test.iter().filter(|t| **t).count(), 12);
        for (e, t) in entries.iter().zip(&test) {
            for (f, u) in entries.iter().zip(&test) {
                if e.base_id == f.base_id {
                    assert_eq!(t, u);
                }
            }
        }
    }

    #[test]
    fn unknown_profile_rejected() {
        let cfg = CorpusConfig {
            profiles: vec!["nope".into()],
            ..CorpusConfig::default()
        };
        assert!(build_entries(&ProfileSet::shipped(), &cfg).is_err());
    }
}
