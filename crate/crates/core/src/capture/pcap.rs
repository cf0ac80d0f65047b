//! Classic libpcap container: streaming reader and a minimal writer.
//!
//! Payload lengths are taken from the IP/UDP length fields rather than the
//! captured byte count, so captures written with a short snap length still
//! report full transport payload sizes.

use std::collections::HashMap;
use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::net::{IpAddr, Ipv4Addr, Ipv6Addr};
use std::path::Path;

use log::warn;

use crate::error::{Error, Result};
use crate::model::{canonicalize, provisional_server, Direction, Endpoint, FlowKey, PacketRecord, Transport};

const MAGIC_USEC: u32 = 0xA1B2_C3D4;
const MAGIC_NSEC: u32 = 0xA1B2_3C4D;

const LINKTYPE_NULL: u32 = 0;
const LINKTYPE_ETHERNET: u32 = 1;
const LINKTYPE_RAW: u32 = 101;
const LINKTYPE_LINUX_SLL: u32 = 113;
const LINKTYPE_IPV4: u32 = 228;
const LINKTYPE_IPV6: u32 = 229;

/// Sanity cap on a single record; anything larger means a corrupt header.
const MAX_RECORD_LEN: u32 = 256 * 1024;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Endian {
    Little,
    Big,
}

impl Endian {
    fn u32(self, b: &[u8]) -> u32 {
        let a = [b[0], b[1], b[2], b[3]];
        match self {
            Endian::Little => u32::from_le_bytes(a),
            Endian::Big => u32::from_be_bytes(a),
        }
    }
}

/// One decoded frame before session-relative timestamping.
#[derive(Debug, Clone, Copy)]
struct RawPacket {
    ts_ns: i128,
    sender: Endpoint,
    receiver: Endpoint,
    transport: Transport,
    payload_len: u32,
    lead_byte: Option<u8>,
}

#[derive(Debug, Default, Clone, Copy, PartialEq, Eq)]
pub struct ReaderStats {
    pub records: u64,
    pub emitted: u64,
    /// Frames that were not IPv4/IPv6 TCP/UDP with a non-empty payload.
    pub skipped: u64,
    pub truncated: bool,
}

/// Streaming reader over a classic PCAP capture yielding [`PacketRecord`]s.
///
/// Timestamps are relative to the first record in the file. Direction is
/// provisional (lower port = server); the flow detector re-orients
/// accepted flows.
pub struct CaptureReader<R> {
    inner: R,
    endian: Endian,
    nanos: bool,
    linktype: u32,
    offset: u64,
    epoch_ns: Option<i128>,
    servers: HashMap<FlowKey, Endpoint>,
    stats: ReaderStats,
    done: bool,
    buf: Vec<u8>,
}

impl CaptureReader<BufReader<File>> {
    pub fn open(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        CaptureReader::new(BufReader::with_capacity(1 << 16, file))
    }
}

fn read_full<R: Read>(r: &mut R, buf: &mut [u8]) -> io::Result<usize> {
    let mut filled = 0;
    while filled < buf.len() {
        match r.read(&mut buf[filled..]) {
            Ok(0) => break,
            Ok(n) => filled += n,
            Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
            Err(e) => return Err(e),
        }
    }
    Ok(filled)
}

impl<R: Read> CaptureReader<R> {
    pub fn new(mut inner: R) -> Result<Self> {
        let mut hdr = [0u8; 24];
        let n = read_full(&mut inner, &mut hdr).map_err(|e| Error::Parse {
            offset: 0,
            reason: e.to_string(),
        })?;
        let mut reader = CaptureReader {
            inner,
            endian: Endian::Little,
            nanos: false,
            linktype: LINKTYPE_ETHERNET,
            offset: n as u64,
            epoch_ns: None,
            servers: HashMap::new(),
            stats: ReaderStats::default(),
            done: false,
            buf: Vec::with_capacity(2048),
        };
        if n == 0 {
            warn!("capture is zero bytes long; treating as empty");
            reader.done = true;
            return Ok(reader);
        }
        if n < 24 {
            return Err(Error::Parse {
                offset: n as u64,
                reason: "file shorter than the 24-byte global header".into(),
            });
        }
        let le = u32::from_le_bytes([hdr[0], hdr[1], hdr[2], hdr[3]]);
        let be = u32::from_be_bytes([hdr[0], hdr[1], hdr[2], hdr[3]]);
        (reader.endian, reader.nanos) = match (le, be) {
            (MAGIC_USEC, _) => (Endian::Little, false),
            (MAGIC_NSEC, _) => (Endian::Little, true),
            (_, MAGIC_USEC) => (Endian::Big, false),
            (_, MAGIC_NSEC) => (Endian::Big, true),
            _ => {
                return Err(Error::Parse {
                    offset: 0,
                    reason: format!("unrecognised magic 0x{le:08x} (pcapng is not supported)"),
                })
            }
        };
        reader.linktype = reader.endian.u32(&hdr[20..24]) & 0x0FFF_FFFF;
        match reader.linktype {
            LINKTYPE_NULL | LINKTYPE_ETHERNET | LINKTYPE_RAW | LINKTYPE_LINUX_SLL | LINKTYPE_IPV4
            | LINKTYPE_IPV6 => {}
            other => {
                return Err(Error::Parse {
                    offset: 20,
                    reason: format!("unsupported link type {other}"),
                })
            }
        }
        Ok(reader)
    }

    pub fn stats(&self) -> ReaderStats {
        self.stats
    }

    /// Read the next record header and body; `Ok(None)` at clean EOF.
    fn next_raw(&mut self) -> Result<Option<Option<RawPacket>>> {
        let mut hdr = [0u8; 16];
        let start = self.offset;
        let n = read_full(&mut self.inner, &mut hdr).map_err(|e| Error::Parse {
            offset: start,
            reason: e.to_string(),
        })?;
        if n == 0 {
            return Ok(None);
        }
        if n < 16 {
            warn!("truncated record header at byte offset {start}; stopping");
            self.stats.truncated = true;
            return Ok(None);
        }
        let ts_sec = self.endian.u32(&hdr[0..4]) as i128;
        let ts_frac = self.endian.u32(&hdr[4..8]) as i128;
        let incl = self.endian.u32(&hdr[8..12]);
        let orig = self.endian.u32(&hdr[12..16]);
        let frac_limit = if self.nanos { 1_000_000_000 } else { 1_000_000 };
        if incl > MAX_RECORD_LEN || ts_frac >= frac_limit {
            return Err(Error::Parse {
                offset: start,
                reason: format!("corrupt record header (incl_len {incl}, orig_len {orig}, frac {ts_frac})"),
            });
        }
        self.offset += 16;
        self.buf.resize(incl as usize, 0);
        let got = read_full(&mut self.inner, &mut self.buf).map_err(|e| Error::Parse {
            offset: self.offset,
            reason: e.to_string(),
        })?;
        self.offset += got as u64;
        if got < incl as usize {
            warn!("truncated final record at byte offset {start}; stopping");
            self.stats.truncated = true;
            return Ok(None);
        }
        self.stats.records += 1;
        let ts_ns = ts_sec * 1_000_000_000 + if self.nanos { ts_frac } else { ts_frac * 1000 };
        Ok(Some(decode_frame(self.linktype, &self.buf, ts_ns)))
    }
}

impl<R: Read> Iterator for CaptureReader<R> {
    type Item = Result<PacketRecord>;

    fn next(&mut self) -> Option<Self::Item> {
        while !self.done {
            match self.next_raw() {
                Err(e) => {
                    self.done = true;
                    return Some(Err(e));
                }
                Ok(None) => self.done = true,
                Ok(Some(None)) => self.stats.skipped += 1,
                Ok(Some(Some(raw))) => {
                    let epoch = *self.epoch_ns.get_or_insert(raw.ts_ns);
                    let raw_key = FlowKey::new(raw.sender, raw.receiver, raw.transport);
                    let key = canonicalize(raw_key);
                    let server = *self
                        .servers
                        .entry(key)
                        .or_insert_with(|| provisional_server(&key));
                    self.stats.emitted += 1;
                    return Some(Ok(PacketRecord {
                        timestamp: (raw.ts_ns - epoch) as f64 / 1e9,
                        direction: Direction::from_sender(&raw.sender, &server),
                        payload_size: raw.payload_len,
                        flow: key,
                        lead_byte: raw.lead_byte,
                    }));
                }
            }
        }
        None
    }
}

/// Read a whole capture into memory. Prefer [`CaptureReader`] for large files.
pub fn read_capture(path: impl AsRef<Path>) -> Result<Vec<PacketRecord>> {
    CaptureReader::open(path)?.collect()
}

fn be16(b: &[u8], at: usize) -> Option<u16> {
    Some(u16::from_be_bytes([*b.get(at)?, *b.get(at + 1)?]))
}

fn decode_frame(linktype: u32, frame: &[u8], ts_ns: i128) -> Option<RawPacket> {
    let (ethertype, l3) = match linktype {
        LINKTYPE_ETHERNET => {
            let mut et = be16(frame, 12)?;
            let mut at = 14;
            while et == 0x8100 || et == 0x88A8 {
                et = be16(frame, at + 2)?;
                at += 4;
            }
            (et, at)
        }
        LINKTYPE_LINUX_SLL => (be16(frame, 14)?, 16),
        LINKTYPE_NULL => {
            let family = u32::from_le_bytes(frame.get(0..4)?.try_into().ok()?);
            let family = if family > 0xFFFF { family.swap_bytes() } else { family };
            match family {
                2 => (0x0800, 4),
                24 | 28 | 30 => (0x86DD, 4),
                _ => return None,
            }
        }
        LINKTYPE_IPV4 => (0x0800, 0),
        LINKTYPE_IPV6 => (0x86DD, 0),
        _ => match frame.first()? >> 4 {
            4 => (0x0800, 0),
            6 => (0x86DD, 0),
            _ => return None,
        },
    };
    let ip = frame.get(l3..)?;
    let (src, dst, proto, l4_len, l4) = match ethertype {
        0x0800 => {
            let ihl = ((ip.first()? & 0x0F) as usize) * 4;
            if ihl < 20 {
                return None;
            }
            let total = be16(ip, 2)? as usize;
            let frag = be16(ip, 6)? & 0x1FFF;
            if frag != 0 || total < ihl {
                return None;
            }
            let src = IpAddr::V4(Ipv4Addr::new(ip[12], ip[13], ip[14], ip[15]));
            let dst = IpAddr::V4(Ipv4Addr::new(ip[16], ip[17], ip[18], ip[19]));
            (src, dst, ip[9], total - ihl, ip.get(ihl..)?)
        }
        0x86DD => {
            if ip.len() < 40 {
                return None;
            }
            let mut next = ip[6];
            let mut remaining = be16(ip, 4)? as usize;
            let mut at = 40;
            let src = IpAddr::V6(Ipv6Addr::from(<[u8; 16]>::try_from(&ip[8..24]).ok()?));
            let dst = IpAddr::V6(Ipv6Addr::from(<[u8; 16]>::try_from(&ip[24..40]).ok()?));
            loop {
                match next {
                    0 | 43 | 60 => {
                        let len = (*ip.get(at + 1)? as usize + 1) * 8;
                        next = *ip.get(at)?;
                        at += len;
                        remaining = remaining.checked_sub(len)?;
                    }
                    44 => {
                        let frag = be16(ip, at + 2)? >> 3;
                        if frag != 0 {
                            return None;
                        }
                        next = *ip.get(at)?;
                        at += 8;
                        remaining = remaining.checked_sub(8)?;
                    }
                    _ => break,
                }
            }
            (src, dst, next, remaining, ip.get(at..)?)
        }
        _ => return None,
    };
    let (transport, hdr_len, payload_len) = match proto {
        17 => {
            let udp_len = be16(l4, 4)? as usize;
            if udp_len < 8 {
                return None;
            }
            (Transport::Udp, 8, udp_len.min(l4_len) - 8)
        }
        6 => {
            let off = ((*l4.get(12)? >> 4) as usize) * 4;
            if off < 20 || off > l4_len {
                return None;
            }
            (Transport::Tcp, off, l4_len - off)
        }
        _ => return None,
    };
    if payload_len == 0 {
        return None;
    }
    let sport = be16(l4, 0)?;
    let dport = be16(l4, 2)?;
    Some(RawPacket {
        ts_ns,
        sender: Endpoint::new(src, sport),
        receiver: Endpoint::new(dst, dport),
        transport,
        payload_len: payload_len as u32,
        lead_byte: l4.get(hdr_len).copied(),
    })
}

/// Writes Ethernet/IPv4/IPv6 + UDP/TCP frames into a nanosecond PCAP.
/// Frames are truncated to `snaplen`; length fields carry the true sizes.
pub struct CaptureWriter<W: Write> {
    out: W,
    snaplen: u32,
    epoch_ns: i128,
    frame: Vec<u8>,
}

/// Default snap length: headers plus a few payload bytes.
pub const DEFAULT_SNAPLEN: u32 = 96;

/// Absolute capture time assigned to session time zero.
pub const DEFAULT_EPOCH_NS: i128 = 1_733_011_200 * 1_000_000_000;

impl CaptureWriter<BufWriter<File>> {
    pub fn create(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        CaptureWriter::new(BufWriter::with_capacity(1 << 16, file), DEFAULT_SNAPLEN)
            .map_err(|e| Error::io(path, e))
    }
}

impl<W: Write> CaptureWriter<W> {
    pub fn new(mut out: W, snaplen: u32) -> io::Result<Self> {
        let snaplen = snaplen.max(64);
        let mut hdr = Vec::with_capacity(24);
        hdr.extend_from_slice(&MAGIC_NSEC.to_le_bytes());
        hdr.extend_from_slice(&2u16.to_le_bytes());
        hdr.extend_from_slice(&4u16.to_le_bytes());
        hdr.extend_from_slice(&0i32.to_le_bytes());
        hdr.extend_from_slice(&0u32.to_le_bytes());
        hdr.extend_from_slice(&snaplen.to_le_bytes());
        hdr.extend_from_slice(&LINKTYPE_ETHERNET.to_le_bytes());
        out.write_all(&hdr)?;
        Ok(CaptureWriter {
            out,
            snaplen,
            epoch_ns: DEFAULT_EPOCH_NS,
            frame: Vec::with_capacity(128),
        })
    }

    /// Write a record whose sender is derived from the record's direction
    /// and the given server endpoint.
    pub fn write_record(&mut self, rec: &PacketRecord, server: &Endpoint) -> io::Result<()> {
        let sender = rec.sender(server);
        let receiver = rec.flow.peer_of(&sender);
        self.write_packet(rec.timestamp, sender, receiver, rec.flow.transport, rec.payload_size, rec.lead_byte)
    }

    pub fn write_packet(
        &mut self,
        timestamp: f64,
        sender: Endpoint,
        receiver: Endpoint,
        transport: Transport,
        payload_len: u32,
        lead_byte: Option<u8>,
    ) -> io::Result<()> {
        let f = &mut self.frame;
        f.clear();
        f.extend_from_slice(&[0x02, 0, 0, 0, 0, 0x02, 0x02, 0, 0, 0, 0, 0x01]);
        let l4_hdr = match transport {
            Transport::Udp => 8usize,
            Transport::Tcp => 20,
        };
        let l4_len = l4_hdr + payload_len as usize;
        let proto = match transport {
            Transport::Udp => 17u8,
            Transport::Tcp => 6,
        };
        match (sender.addr, receiver.addr) {
            (IpAddr::V4(s), IpAddr::V4(d)) => {
                f.extend_from_slice(&0x0800u16.to_be_bytes());
                let total = (20 + l4_len).min(u16::MAX as usize) as u16;
                f.extend_from_slice(&[0x45, 0]);
                f.extend_from_slice(&total.to_be_bytes());
                f.extend_from_slice(&[0, 0, 0x40, 0, 64, proto, 0, 0]);
                f.extend_from_slice(&s.octets());
                f.extend_from_slice(&d.octets());
            }
            (s, d) => {
                let to6 = |a: IpAddr| match a {
                    IpAddr::V4(v4) => v4.to_ipv6_mapped(),
                    IpAddr::V6(v6) => v6,
                };
                f.extend_from_slice(&0x86DDu16.to_be_bytes());
                f.extend_from_slice(&[0x60, 0, 0, 0]);
                f.extend_from_slice(&(l4_len.min(u16::MAX as usize) as u16).to_be_bytes());
                f.extend_from_slice(&[proto, 64]);
                f.extend_from_slice(&to6(s).octets());
                f.extend_from_slice(&to6(d).octets());
            }
        }
        f.extend_from_slice(&sender.port.to_be_bytes());
        f.extend_from_slice(&receiver.port.to_be_bytes());
        match transport {
            Transport::Udp => {
                f.extend_from_slice(&(l4_len.min(u16::MAX as usize) as u16).to_be_bytes());
                f.extend_from_slice(&[0, 0]);
            }
            Transport::Tcp => {
                f.extend_from_slice(&[0, 0, 0, 1, 0, 0, 0, 0, 0x50, 0x18, 0xFF, 0xFF, 0, 0, 0, 0]);
            }
        }
        let orig_len = f.len() + payload_len as usize;
        let incl_payload = (payload_len as usize).min((self.snaplen as usize).saturating_sub(f.len()));
        if incl_payload > 0 {
            f.push(lead_byte.unwrap_or(0));
            f.resize(f.len() + incl_payload - 1, 0);
        }
        let ts_ns = self.epoch_ns + (timestamp * 1e9).round() as i128;
        let sec = (ts_ns / 1_000_000_000) as u32;
        let nsec = (ts_ns % 1_000_000_000) as u32;
        let mut rec = [0u8; 16];
        rec[0..4].copy_from_slice(&sec.to_le_bytes());
        rec[4..8].copy_from_slice(&nsec.to_le_bytes());
        rec[8..12].copy_from_slice(&(f.len() as u32).to_le_bytes());
        rec[12..16].copy_from_slice(&(orig_len as u32).to_le_bytes());
        self.out.write_all(&rec)?;
        self.out.write_all(f)
    }

    pub fn finish(mut self) -> io::Result<W> {
        self.out.flush()?;
        Ok(self.out)
    }
}
