//! Title profiles: the generator's description of one game's traffic.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::capture::ResolutionClass;
use crate::error::{Error, Result};
use crate::model::{ActivityPattern, GameTitle, StageLabel};

pub const PROFILES_VERSION: u32 = 1;

/// The profile set shipped with the crate.
pub const DEFAULT_PROFILES: &str = include_str!("../../data/profiles.toml");

pub type Range = [f64; 2];

fn check_range(what: &str, r: &Range, lo: f64, hi: f64) -> Result<()> {
    if !(r[0] <= r[1] && r[0] >= lo && r[1] <= hi) {
        return Err(Error::Validation(format!("{what}: range {r:?} must be ordered within [{lo}, {hi}]")));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SteadyBand {
    /// Band centre in bytes.
    pub center: f64,
    /// Half-width relative to the centre.
    pub spread: f64,
    pub rate: f64,
    /// Packets per back-to-back train.
    pub train: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SparseSpec {
    pub rate: f64,
    pub min: u32,
    pub max: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LaunchSlot {
    /// Relative share of the launch throughput carried by Full packets in this slot.
    pub full_weight: f64,
    pub steady: Vec<SteadyBand>,
    pub sparse: SparseSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageLevel {
    pub down: Range,
    pub up: Range,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageLevels {
    pub idle: StageLevel,
    pub passive: StageLevel,
    pub active: StageLevel,
}

impl StageLevels {
    pub fn get(&self, stage: StageLabel) -> Option<&StageLevel> {
        match stage {
            StageLabel::Idle => Some(&self.idle),
            StageLabel::Passive => Some(&self.passive),
            StageLabel::Active => Some(&self.active),
            StageLabel::Launch => None,
        }
    }
}

/// Jump chain of the semi-Markov stage process; columns idle, passive, active.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JumpChain {
    pub idle: [f64; 3],
    pub passive: [f64; 3],
    pub active: [f64; 3],
}

impl JumpChain {
    pub fn rows(&self) -> [[f64; 3]; 3] {
        [self.idle, self.passive, self.active]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Dwell {
    pub mean: f64,
    pub min: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DwellTimes {
    pub idle: Dwell,
    pub passive: Dwell,
    pub active: Dwell,
}

impl DwellTimes {
    pub fn all(&self) -> [Dwell; 3] {
        [self.idle, self.passive, self.active]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TitleProfile {
    pub id: String,
    pub title: GameTitle,
    pub pattern: ActivityPattern,
    pub max_payload: u32,
    /// Launch downstream throughput as a fraction of the session peak.
    pub launch_level: Range,
    /// Launch upstream throughput as a fraction of the upstream peak.
    pub launch_up_level: Range,
    pub up_peak_mbps: Range,
    pub up_peak_pps: Range,
    /// Session peak downstream throughput per resolution class.
    pub bandwidth_mbps: BTreeMap<ResolutionClass, Range>,
    pub launch: Vec<LaunchSlot>,
    pub stages: StageLevels,
    pub jump: JumpChain,
    pub dwell_s: DwellTimes,
}

/// Long-run share of time per gameplay stage (idle, passive, active)
/// implied by a jump chain and mean dwell times.
pub fn stationary_shares(jump: &JumpChain, dwell: &DwellTimes) -> [f64; 3] {
    let p = jump.rows();
    let mut pi = [1.0 / 3.0; 3];
    for _ in 0..10_000 {
        let mut next = [0.0; 3];
        for (i, row) in p.iter().enumerate() {
            for j in 0..3 {
                next[j] += pi[i] * row[j];
            }
        }
        // Lazy step keeps periodic chains convergent.
        for j in 0..3 {
            next[j] = 0.5 * next[j] + 0.5 * pi[j];
        }
        pi = next;
    }
    let w: Vec<f64> = pi.iter().zip(dwell.all()).map(|(p, d)| p * d.mean).collect();
    let total: f64 = w.iter().sum();
    [w[0] / total, w[1] / total, w[2] / total]
}

impl TitleProfile {
    /// Check internal consistency. `variation` is the grouper's V band;
    /// steady spreads must stay inside it.
    pub fn validate(&self, launch_slots: usize, variation: f64) -> Result<()> {
        let ctx = |what: &str| format!("profile `{}`: {what}", self.id);
        if self.title.is_known() && self.pattern != self.title.pattern() {
            return Err(Error::Validation(ctx("pattern disagrees with the title catalog")));
        }
        if self.pattern == ActivityPattern::Undecided {
            return Err(Error::Validation(ctx("pattern must be decided")));
        }
        if self.launch.len() != launch_slots {
            return Err(Error::Validation(ctx(&format!(
                "{} launch slots, expected {launch_slots}",
                self.launch.len()
            ))));
        }
        check_range(&ctx("launch_level"), &self.launch_level, 0.0, 1.0)?;
        check_range(&ctx("launch_up_level"), &self.launch_up_level, 0.0, 1.0)?;
        check_range(&ctx("up_peak_mbps"), &self.up_peak_mbps, 0.0, 1e4)?;
        check_range(&ctx("up_peak_pps"), &self.up_peak_pps, 1.0, 1e5)?;
        for class in ResolutionClass::ALL {
            let r = self
                .bandwidth_mbps
                .get(&class)
                .ok_or_else(|| Error::Validation(ctx(&format!("no bandwidth for {}", class.as_str()))))?;
            check_range(&ctx("bandwidth_mbps"), r, 0.1, 1e4)?;
        }
        for (s, slot) in self.launch.iter().enumerate() {
            if !(slot.full_weight > 0.0) {
                return Err(Error::Validation(ctx(&format!("slot {s} full_weight must be positive"))));
            }
            for b in &slot.steady {
                if !(b.spread >= 0.0 && b.spread < variation) {
                    return Err(Error::Validation(ctx(&format!(
                        "slot {s} steady spread {} must be below V = {variation}",
                        b.spread
                    ))));
                }
                let top = b.center * (1.0 + b.spread);
                if !(b.center >= 1.0 && top < self.max_payload as f64) || b.rate < 0.0 || b.train == 0 {
                    return Err(Error::Validation(ctx(&format!("slot {s} steady band out of range"))));
                }
            }
            let sp = &slot.sparse;
            if sp.min == 0 || sp.min > sp.max || sp.max >= self.max_payload || sp.rate < 0.0 {
                return Err(Error::Validation(ctx(&format!("slot {s} sparse spec out of range"))));
            }
        }
        for stage in StageLabel::GAMEPLAY {
            let l = self.stages.get(stage).expect("gameplay stage");
            check_range(&ctx("stage down level"), &l.down, 0.0, 1.0)?;
            check_range(&ctx("stage up level"), &l.up, 0.0, 1.0)?;
        }
        for (i, row) in self.jump.rows().iter().enumerate() {
            let sum: f64 = row.iter().sum();
            if row[i] != 0.0 || row.iter().any(|p| *p < 0.0) || (sum - 1.0).abs() > 1e-9 {
                return Err(Error::Validation(ctx(&format!(
                    "jump row {i} must be a distribution with a zero diagonal"
                ))));
            }
        }
        for d in self.dwell_s.all() {
            if !(d.min >= 1.0 && d.mean >= d.min) {
                return Err(Error::Validation(ctx("dwell min must be >= 1 s and <= mean")));
            }
        }
        if self.pattern == ActivityPattern::ContinuousPlay {
            let share = stationary_shares(&self.jump, &self.dwell_s);
            if share[1] >= 0.05 {
                return Err(Error::Validation(ctx(&format!(
                    "continuous-play passive share {:.3} must stay below 0.05",
                    share[1]
                ))));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameRateFractions {
    pub launch: Range,
    pub idle: Range,
    pub passive: Range,
    pub active: Range,
}

impl FrameRateFractions {
    pub fn get(&self, stage: StageLabel) -> Range {
        match stage {
            StageLabel::Launch => self.launch,
            StageLabel::Idle => self.idle,
            StageLabel::Passive => self.passive,
            StageLabel::Active => self.active,
        }
    }
}

/// How generated QoE samples are drawn.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QoeModel {
    pub latency_ms: Range,
    pub loss_rate: Range,
    pub impairment_probability: f64,
    pub impaired_latency_ms: Range,
    pub impaired_loss_rate: Range,
    pub frame_rate_fraction: FrameRateFractions,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProfileSet {
    pub version: u32,
    pub qoe: QoeModel,
    #[serde(rename = "profile")]
    pub profiles: Vec<TitleProfile>,
}

impl ProfileSet {
    pub fn shipped() -> Self {
        ProfileSet::parse(DEFAULT_PROFILES).expect("shipped profiles parse")
    }

    pub fn parse(text: &str) -> Result<Self> {
        let set: ProfileSet = toml::from_str(text).map_err(|e| Error::Config(format!("profiles: {e}")))?;
        if set.version == 0 || set.version > PROFILES_VERSION {
            return Err(Error::Config(format!("profiles version {} is not supported", set.version)));
        }
        let mut ids: Vec<&str> = set.profiles.iter().map(|p| p.id.as_str()).collect();
        ids.sort_unstable();
        if ids.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::Validation("duplicate profile id".into()));
        }
        Ok(set)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        ProfileSet::parse(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(format!("profiles: {e}")))
    }

    pub fn validate(&self, launch_slots: usize, variation: f64) -> Result<()> {
        for p in &self.profiles {
            p.validate(launch_slots, variation)?;
        }
        Ok(())
    }

    pub fn get(&self, id: &str) -> Option<&TitleProfile> {
        self.profiles.iter().find(|p| p.id == id)
    }

    pub fn by_title(&self, title: GameTitle) -> Option<&TitleProfile> {
        self.profiles.iter().find(|p| p.title == title)
    }

    /// The catalog-title profiles, in catalog order.
    pub fn known(&self) -> Vec<&TitleProfile> {
        GameTitle::catalog().filter_map(|t| self.by_title(t)).collect()
    }

    pub fn unknown(&self) -> Vec<&TitleProfile> {
        self.profiles.iter().filter(|p| !p.title.is_known()).collect()
    }
}
