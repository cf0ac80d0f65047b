//! Shared domain vocabulary: packets, flows, titles, stages and time slots.

use std::fmt;
use std::net::IpAddr;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Largest transport payload observed on the reference streaming platform.
pub const DEFAULT_MAX_PAYLOAD: u32 = 1432;

/// Upper bound accepted for any single payload (jumbo-frame safe).
pub const DEFAULT_MTU_PAYLOAD_BOUND: u32 = 9000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Transport {
    Udp,
    Tcp,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Direction {
    /// Client to cloud server.
    Upstream,
    /// Cloud server to client.
    Downstream,
}

impl Direction {
    pub fn flipped(self) -> Self {
        match self {
            Direction::Upstream => Direction::Downstream,
            Direction::Downstream => Direction::Upstream,
        }
    }

    /// Direction of a packet travelling `from` the given endpoint, given
    /// which endpoint is the server.
    pub fn from_sender(sender: &Endpoint, server: &Endpoint) -> Self {
        if sender == server {
            Direction::Downstream
        } else {
            Direction::Upstream
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Endpoint {
    pub addr: IpAddr,
    pub port: u16,
}

impl Endpoint {
    pub fn new(addr: IpAddr, port: u16) -> Self {
        Endpoint { addr, port }
    }
}

impl fmt::Display for Endpoint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.addr {
            IpAddr::V4(a) => write!(f, "{a}:{}", self.port),
            IpAddr::V6(a) => write!(f, "[{a}]:{}", self.port),
        }
    }
}

/// Transport 5-tuple. Equality is exact field equality; use
/// [`canonicalize`] to fold both directions of a conversation onto one key.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct FlowKey {
    pub src: Endpoint,
    pub dst: Endpoint,
    pub transport: Transport,
}

impl FlowKey {
    pub fn new(src: Endpoint, dst: Endpoint, transport: Transport) -> Self {
        FlowKey {
            src,
            dst,
            transport,
        }
    }

    pub fn reversed(&self) -> Self {
        FlowKey {
            src: self.dst,
            dst: self.src,
            transport: self.transport,
        }
    }

    pub fn is_canonical(&self) -> bool {
        self.src <= self.dst
    }

    /// The endpoint that is not `ep`. Returns `dst` when `ep` is neither.
    pub fn peer_of(&self, ep: &Endpoint) -> Endpoint {
        if *ep == self.dst {
            self.src
        } else {
            self.dst
        }
    }
}

impl fmt::Display for FlowKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let proto = match self.transport {
            Transport::Udp => "udp",
            Transport::Tcp => "tcp",
        };
        write!(f, "{} -> {} {proto}", self.src, self.dst)
    }
}

/// Canonical orientation: the lexicographically smaller endpoint is `src`.
/// Forward and reverse tuples map to the same key.
pub fn canonicalize(flow: FlowKey) -> FlowKey {
    if flow.is_canonical() {
        flow
    } else {
        flow.reversed()
    }
}

/// Guess which endpoint of a flow is the server before any traffic
/// statistics exist: the lower port wins, ties go to the canonical `src`.
pub fn provisional_server(flow: &FlowKey) -> Endpoint {
    let k = canonicalize(*flow);
    if k.dst.port < k.src.port {
        k.dst
    } else {
        k.src
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PacketRecord {
    /// Seconds since the session epoch.
    pub timestamp: f64,
    pub direction: Direction,
    /// Transport payload length in bytes, headers excluded.
    pub payload_size: u32,
    /// Canonical flow key.
    pub flow: FlowKey,
    /// First transport payload byte, when captured.
    pub lead_byte: Option<u8>,
}

impl PacketRecord {
    pub fn is_downstream(&self) -> bool {
        self.direction == Direction::Downstream
    }

    /// Endpoint that sent this packet, given the flow's server side.
    pub fn sender(&self, server: &Endpoint) -> Endpoint {
        match self.direction {
            Direction::Downstream => *server,
            Direction::Upstream => self.flow.peer_of(server),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Genre {
    Shooter,
    RolePlaying,
    Sports,
    Moba,
    Card,
    Other,
}

impl Genre {
    pub fn as_str(self) -> &'static str {
        match self {
            Genre::Shooter => "Shooter",
            Genre::RolePlaying => "Role-playing",
            Genre::Sports => "Sports",
            Genre::Moba => "MOBA",
            Genre::Card => "Card",
            Genre::Other => "Other",
        }
    }
}

/// Version of the closed title catalog below. Bump whenever a title is
/// added or removed so trained title models can be matched to it.
pub const CATALOG_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(into = "String", from = "String")]
pub enum GameTitle {
    Fortnite,
    GenshinImpact,
    BaldursGate3,
    R6Siege,
    HonkaiStarRail,
    Destiny2,
    CallOfDuty,
    Cyberpunk2077,
    Overwatch2,
    RocketLeague,
    CsGo,
    Dota2,
    Hearthstone,
    Unknown,
}

struct CatalogEntry {
    title: GameTitle,
    name: &'static str,
    genre: Genre,
    pattern: ActivityPattern,
    aliases: &'static [&'static str],
}

const CATALOG: [CatalogEntry; 13] = [
    CatalogEntry {
        title: GameTitle::Fortnite,
        name: "Fortnite",
        genre: Genre::Shooter,
        pattern: ActivityPattern::SpectateAndPlay,
        aliases: &[],
    },
    CatalogEntry {
        title: GameTitle::GenshinImpact,
        name: "Genshin Impact",
        genre: Genre::RolePlaying,
        pattern: ActivityPattern::ContinuousPlay,
        aliases: &["Genshin"],
    },
    CatalogEntry {
        title: GameTitle::BaldursGate3,
        name: "Baldur's Gate 3",
        genre: Genre::RolePlaying,
        pattern: ActivityPattern::ContinuousPlay,
        aliases: &["Baldurs Gate 3", "Baldur's Gate"],
    },
    CatalogEntry {
        title: GameTitle::R6Siege,
        name: "R6: Siege",
        genre: Genre::Shooter,
        pattern: ActivityPattern::SpectateAndPlay,
        aliases: &["Rainbow Six Siege", "R6 Siege"],
    },
    CatalogEntry {
        title: GameTitle::HonkaiStarRail,
        name: "Honkai: Star Rail",
        genre: Genre::RolePlaying,
        pattern: ActivityPattern::ContinuousPlay,
        aliases: &["Honkai Star Rail"],
    },
    CatalogEntry {
        title: GameTitle::Destiny2,
        name: "Destiny 2",
        genre: Genre::Shooter,
        pattern: ActivityPattern::SpectateAndPlay,
        aliases: &[],
    },
    CatalogEntry {
        title: GameTitle::CallOfDuty,
        name: "Call of Duty",
        genre: Genre::Shooter,
        pattern: ActivityPattern::SpectateAndPlay,
        aliases: &[],
    },
    CatalogEntry {
        title: GameTitle::Cyberpunk2077,
        name: "Cyberpunk 2077",
        genre: Genre::RolePlaying,
        pattern: ActivityPattern::ContinuousPlay,
        aliases: &[],
    },
    CatalogEntry {
        title: GameTitle::Overwatch2,
        name: "Overwatch 2",
        genre: Genre::Shooter,
        pattern: ActivityPattern::SpectateAndPlay,
        aliases: &["Overwatch"],
    },
    CatalogEntry {
        title: GameTitle::RocketLeague,
        name: "Rocket League",
        genre: Genre::Sports,
        pattern: ActivityPattern::SpectateAndPlay,
        aliases: &[],
    },
    CatalogEntry {
        title: GameTitle::CsGo,
        name: "CS:GO/CS2",
        genre: Genre::Shooter,
        pattern: ActivityPattern::SpectateAndPlay,
        aliases: &["CS:GO", "CSGO", "CS2", "Counter-Strike"],
    },
    CatalogEntry {
        title: GameTitle::Dota2,
        name: "Dota 2",
        genre: Genre::Moba,
        pattern: ActivityPattern::SpectateAndPlay,
        aliases: &["DOTA 2"],
    },
    CatalogEntry {
        title: GameTitle::Hearthstone,
        name: "Hearthstone",
        genre: Genre::Card,
        pattern: ActivityPattern::SpectateAndPlay,
        aliases: &[],
    },
];

fn normalize_name(s: &str) -> String {
    s.chars()
        .filter(|c| c.is_alphanumeric())
        .flat_map(char::to_lowercase)
        .collect()
}

impl GameTitle {
    /// The 13 catalog titles in catalog order (Unknown excluded).
    pub fn catalog() -> impl Iterator<Item = GameTitle> {
        CATALOG.iter().map(|e| e.title)
    }

    fn entry(self) -> Option<&'static CatalogEntry> {
        CATALOG.iter().find(|e| e.title == self)
    }

    pub fn name(self) -> &'static str {
        self.entry().map_or("Unknown", |e| e.name)
    }

    pub fn genre(self) -> Genre {
        self.entry().map_or(Genre::Other, |e| e.genre)
    }

    /// Catalog activity pattern; `Undecided` for Unknown.
    pub fn pattern(self) -> ActivityPattern {
        self.entry()
            .map_or(ActivityPattern::Undecided, |e| e.pattern)
    }

    pub fn is_known(self) -> bool {
        self != GameTitle::Unknown
    }

    /// Titles whose graphics demand is low enough that throughput floors
    /// are relaxed for them during QoE calibration.
    pub fn is_low_demand(self) -> bool {
        matches!(self, GameTitle::Hearthstone | GameTitle::HonkaiStarRail)
    }

    /// Lenient lookup by display name or alias; `None` when unmatched.
    pub fn lookup(name: &str) -> Option<GameTitle> {
        let key = normalize_name(name);
        if key.is_empty() {
            return None;
        }
        CATALOG
            .iter()
            .find(|e| {
                normalize_name(e.name) == key || e.aliases.iter().any(|a| normalize_name(a) == key)
            })
            .map(|e| e.title)
    }
}

impl fmt::Display for GameTitle {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl From<GameTitle> for String {
    fn from(t: GameTitle) -> String {
        t.name().to_string()
    }
}

impl From<String> for GameTitle {
    fn from(s: String) -> GameTitle {
        GameTitle::lookup(&s).unwrap_or(GameTitle::Unknown)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StageLabel {
    Launch,
    Idle,
    Passive,
    Active,
}

impl StageLabel {
    /// The three gameplay stages in transition-matrix order.
    pub const GAMEPLAY: [StageLabel; 3] = [StageLabel::Idle, StageLabel::Passive, StageLabel::Active];

    /// Row/column index in a transition matrix; `None` for Launch.
    pub fn gameplay_index(self) -> Option<usize> {
        match self {
            StageLabel::Launch => None,
            StageLabel::Idle => Some(0),
            StageLabel::Passive => Some(1),
            StageLabel::Active => Some(2),
        }
    }

    pub fn from_gameplay_index(i: usize) -> Option<StageLabel> {
        StageLabel::GAMEPLAY.get(i).copied()
    }

    pub fn as_str(self) -> &'static str {
        match self {
            StageLabel::Launch => "launch",
            StageLabel::Idle => "idle",
            StageLabel::Passive => "passive",
            StageLabel::Active => "active",
        }
    }
}

impl fmt::Display for StageLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for StageLabel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "launch" => Ok(StageLabel::Launch),
            "idle" => Ok(StageLabel::Idle),
            "passive" => Ok(StageLabel::Passive),
            "active" => Ok(StageLabel::Active),
            other => Err(Error::Validation(format!("unknown stage label `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ActivityPattern {
    ContinuousPlay,
    SpectateAndPlay,
    Undecided,
}

impl ActivityPattern {
    pub const DECIDED: [ActivityPattern; 2] =
        [ActivityPattern::ContinuousPlay, ActivityPattern::SpectateAndPlay];

    pub fn as_str(self) -> &'static str {
        match self {
            ActivityPattern::ContinuousPlay => "continuous-play",
            ActivityPattern::SpectateAndPlay => "spectate-and-play",
            ActivityPattern::Undecided => "undecided",
        }
    }
}

impl fmt::Display for ActivityPattern {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ActivityPattern {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let key: String = s
            .chars()
            .filter(|c| c.is_alphanumeric())
            .flat_map(char::to_lowercase)
            .collect();
        match key.as_str() {
            "continuousplay" => Ok(ActivityPattern::ContinuousPlay),
            "spectateandplay" => Ok(ActivityPattern::SpectateAndPlay),
            "undecided" | "" => Ok(ActivityPattern::Undecided),
            _ => Err(Error::Validation(format!("unknown activity pattern `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SlotIndex {
    pub index: u64,
    pub width: f64,
}

impl SlotIndex {
    pub fn start(&self) -> f64 {
        self.index as f64 * self.width
    }

    pub fn end(&self) -> f64 {
        (self.index + 1) as f64 * self.width
    }
}

/// Map a timestamp onto its slot: `floor(timestamp / width)`.
pub fn slot_of(timestamp: f64, width: f64) -> Result<SlotIndex> {
    if !(width > 0.0) || !width.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "slot width must be positive, got {width}"
        )));
    }
    if !(timestamp >= 0.0) || !timestamp.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "timestamp must be finite and non-negative, got {timestamp}"
        )));
    }
    Ok(SlotIndex {
        index: (timestamp / width).floor() as u64,
        width,
    })
}
