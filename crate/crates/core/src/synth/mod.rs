//! Synthetic labeled sessions: profiles, generator, augmentation, corpora.

mod augment;
mod corpus;
mod generate;
mod profile;

pub use augment::{augment, AugmentParams, Augmenter};
pub use corpus::{
    build_entries, read_manifest, split_by_base, write_corpus, CorpusConfig, CorpusEntry, ManifestRow, MANIFEST,
};
pub use generate::{mix_seed, SessionPackets, SessionPlan, SessionSpec, SlotPlan, GEN_SLOT_S, SERVER_PORT};
pub use profile::{
    stationary_shares, Dwell, DwellTimes, FrameRateFractions, JumpChain, LaunchSlot, ProfileSet, QoeModel, Range,
    SparseSpec, StageLevel, StageLevels, SteadyBand, TitleProfile, DEFAULT_PROFILES, PROFILES_VERSION,
};
