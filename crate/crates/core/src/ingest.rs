//! Turning captures and crawl logs into traces and profiles.
//!
//! Packet captures are read from classic pcap files (Ethernet, IPv4/IPv6,
//! TCP/UDP). Both modalities also have a line-oriented JSON form, which is
//! the canonical interchange format for datasets.

use std::collections::HashMap;
use std::net::IpAddr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{
    Direction, HttpVersion, LogicProfile, PacketRecord, ResourceRecord, TrafficTrace, Transport,
};

/// TLS record content type for application data.
pub const TLS_APPLICATION_DATA: u8 = 0x17;

/// Identifies the connection a packet belongs to, from the server side.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct FlowKey {
    pub server_ip: String,
    pub server_port: u16,
    pub transport: Transport,
}

impl FlowKey {
    pub fn of(p: &PacketRecord) -> Self {
        FlowKey {
            server_ip: p.server_ip.clone(),
            server_port: p.server_port,
            transport: p.transport,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LinkType {
    Ethernet,
}

#[derive(Debug, Clone)]
pub struct CaptureConfig {
    /// Address of the observed client. When absent, the source of the first
    /// IP packet is taken as the client.
    pub client_hint: Option<IpAddr>,
    pub link_type: LinkType,
    pub tls_appdata_byte: u8,
}

impl Default for CaptureConfig {
    fn default() -> Self {
        CaptureConfig {
            client_hint: None,
            link_type: LinkType::Ethernet,
            tls_appdata_byte: TLS_APPLICATION_DATA,
        }
    }
}

/// Counters for packets that did not become records.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct CaptureStats {
    pub records: usize,
    pub truncated: usize,
    /// Non-IP frames, fragments, other L4 protocols, VLAN tags.
    pub unsupported: usize,
    /// TCP/UDP packets with no payload (handshakes, pure ACKs).
    pub empty_payload: usize,
    /// Packets where neither endpoint is the client.
    pub foreign: usize,
}

#[derive(Debug, Clone)]
pub struct Capture {
    /// `site_id` is left empty; callers attach the identity.
    pub trace: TrafficTrace,
    pub stats: CaptureStats,
}

const PCAP_MAGIC_US: u32 = 0xA1B2_C3D4;
const PCAP_MAGIC_NS: u32 = 0xA1B2_3C4D;
const PCAPNG_MAGIC: u32 = 0x0A0D_0D0A;
const LINKTYPE_ETHERNET: u32 = 1;

#[derive(Clone, Copy)]
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

fn be16(b: &[u8]) -> u16 {
    u16::from_be_bytes([b[0], b[1]])
}

struct Endpoints {
    src: IpAddr,
    dst: IpAddr,
    transport: Transport,
    src_port: u16,
    dst_port: u16,
    payload_len: usize,
    first_byte: Option<u8>,
}

enum Frame {
    Ok(Endpoints),
    Truncated,
    Unsupported,
}

fn parse_frame(frame: &[u8]) -> Frame {
    if frame.len() < 14 {
        return Frame::Truncated;
    }
    let ethertype = be16(&frame[12..14]);
    let ip = &frame[14..];
    let (src, dst, proto, l4) = match ethertype {
        0x0800 => {
            if ip.len() < 20 {
                return Frame::Truncated;
            }
            if ip[0] >> 4 != 4 {
                return Frame::Unsupported;
            }
            let ihl = (ip[0] & 0x0f) as usize * 4;
            let total = be16(&ip[2..4]) as usize;
            let frag = be16(&ip[6..8]);
            if ihl < 20 || total < ihl {
                return Frame::Unsupported;
            }
            if ip.len() < total {
                return Frame::Truncated;
            }
            // More-fragments flag or a non-zero offset.
            if frag & 0x3fff != 0 {
                return Frame::Unsupported;
            }
            let src = IpAddr::from([ip[12], ip[13], ip[14], ip[15]]);
            let dst = IpAddr::from([ip[16], ip[17], ip[18], ip[19]]);
            (src, dst, ip[9], &ip[ihl..total])
        }
        0x86DD => {
            if ip.len() < 40 {
                return Frame::Truncated;
            }
            let payload = be16(&ip[4..6]) as usize;
            if ip.len() < 40 + payload {
                return Frame::Truncated;
            }
            let mut s = [0u8; 16];
            let mut d = [0u8; 16];
            s.copy_from_slice(&ip[8..24]);
            d.copy_from_slice(&ip[24..40]);
            (
                IpAddr::from(s),
                IpAddr::from(d),
                ip[6],
                &ip[40..40 + payload],
            )
        }
        _ => return Frame::Unsupported,
    };
    match proto {
        6 => {
            if l4.len() < 20 {
                return Frame::Truncated;
            }
            let off = (l4[12] >> 4) as usize * 4;
            if off < 20 || l4.len() < off {
                return Frame::Truncated;
            }
            let payload = &l4[off..];
            Frame::Ok(Endpoints {
                src,
                dst,
                transport: Transport::Tcp,
                src_port: be16(&l4[0..2]),
                dst_port: be16(&l4[2..4]),
                payload_len: payload.len(),
                first_byte: payload.first().copied(),
            })
        }
        17 => {
            if l4.len() < 8 {
                return Frame::Truncated;
            }
            let udp_len = be16(&l4[4..6]) as usize;
            if udp_len < 8 || l4.len() < udp_len {
                return Frame::Truncated;
            }
            Frame::Ok(Endpoints {
                src,
                dst,
                transport: Transport::Udp,
                src_port: be16(&l4[0..2]),
                dst_port: be16(&l4[2..4]),
                payload_len: udp_len - 8,
                first_byte: None,
            })
        }
        _ => Frame::Unsupported,
    }
}

/// Reads a classic pcap capture into a packet trace.
pub fn parse_pcap(bytes: &[u8], cfg: &CaptureConfig) -> Result<Capture> {
    if bytes.len() < 24 {
        return Err(Error::Format(
            "file shorter than a pcap global header".into(),
        ));
    }
    let raw_magic = u32::from_le_bytes([bytes[0], bytes[1], bytes[2], bytes[3]]);
    let (endian, nanos) = match raw_magic {
        PCAP_MAGIC_US => (Endian::Little, false),
        PCAP_MAGIC_NS => (Endian::Little, true),
        m if m.swap_bytes() == PCAP_MAGIC_US => (Endian::Big, false),
        m if m.swap_bytes() == PCAP_MAGIC_NS => (Endian::Big, true),
        PCAPNG_MAGIC => return Err(Error::Unsupported("pcapng captures".into())),
        m => return Err(Error::Format(format!("bad pcap magic {m:#010x}"))),
    };
    let network = endian.u32(&bytes[20..24]);
    if network != LINKTYPE_ETHERNET || cfg.link_type != LinkType::Ethernet {
        return Err(Error::Unsupported(format!("link type {network}")));
    }

    let mut stats = CaptureStats::default();
    let mut client = cfg.client_hint;
    let mut packets = Vec::new();
    let mut pos = 24;
    while pos < bytes.len() {
        if bytes.len() - pos < 16 {
            stats.truncated += 1;
            break;
        }
        let hdr = &bytes[pos..pos + 16];
        let ts_sec = endian.u32(&hdr[0..4]) as f64;
        let ts_frac = endian.u32(&hdr[4..8]) as f64;
        let incl = endian.u32(&hdr[8..12]) as usize;
        pos += 16;
        if bytes.len() - pos < incl {
            stats.truncated += 1;
            break;
        }
        let frame = &bytes[pos..pos + incl];
        pos += incl;

        let ep = match parse_frame(frame) {
            Frame::Ok(ep) => ep,
            Frame::Truncated => {
                stats.truncated += 1;
                continue;
            }
            Frame::Unsupported => {
                stats.unsupported += 1;
                continue;
            }
        };
        let client_ip = *client.get_or_insert(ep.src);
        let (direction, server_ip, server_port) = if ep.src == client_ip {
            (Direction::ClientToServer, ep.dst, ep.dst_port)
        } else if ep.dst == client_ip {
            (Direction::ServerToClient, ep.src, ep.src_port)
        } else {
            stats.foreign += 1;
            continue;
        };
        if ep.payload_len == 0 {
            stats.empty_payload += 1;
            continue;
        }
        let scale = if nanos { 1e-9 } else { 1e-6 };
        packets.push(PacketRecord {
            timestamp: ts_sec + ts_frac * scale,
            direction,
            payload_len: ep.payload_len as u32,
            transport: ep.transport,
            server_ip: server_ip.to_string(),
            server_port,
            first_payload_byte: ep.first_byte,
        });
    }
    packets.sort_by(|a, b| a.timestamp.total_cmp(&b.timestamp));
    stats.records = packets.len();
    Ok(Capture {
        trace: TrafficTrace {
            packets,
            site_id: String::new(),
            label: None,
        },
        stats,
    })
}

/// One packet as a JSON object. Field order is the canonical (alphabetical)
/// key order used when writing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PacketLine {
    pub b0: Option<u8>,
    pub dir: String,
    pub len: i64,
    pub server_ip: String,
    pub server_port: u16,
    pub transport: String,
    pub ts: f64,
}

impl PacketLine {
    pub fn into_record(self) -> std::result::Result<PacketRecord, String> {
        let direction = match self.dir.as_str() {
            "c2s" => Direction::ClientToServer,
            "s2c" => Direction::ServerToClient,
            other => return Err(format!("unknown direction {other:?}")),
        };
        let transport = match self.transport.as_str() {
            "tcp" => Transport::Tcp,
            "udp" => Transport::Udp,
            other => return Err(format!("unknown transport {other:?}")),
        };
        if self.len < 0 || self.len > u32::MAX as i64 {
            return Err(format!("payload length {} out of range", self.len));
        }
        if self.b0.is_some() && self.len == 0 {
            return Err("b0 given for an empty payload".into());
        }
        if !self.ts.is_finite() {
            return Err("non-finite timestamp".into());
        }
        Ok(PacketRecord {
            timestamp: self.ts,
            direction,
            payload_len: self.len as u32,
            transport,
            server_ip: self.server_ip,
            server_port: self.server_port,
            first_payload_byte: self.b0,
        })
    }
}

impl From<&PacketRecord> for PacketLine {
    fn from(p: &PacketRecord) -> Self {
        PacketLine {
            b0: p.first_payload_byte,
            dir: match p.direction {
                Direction::ClientToServer => "c2s",
                Direction::ServerToClient => "s2c",
            }
            .into(),
            len: p.payload_len as i64,
            server_ip: p.server_ip.clone(),
            server_port: p.server_port,
            transport: match p.transport {
                Transport::Tcp => "tcp",
                Transport::Udp => "udp",
            }
            .into(),
            ts: p.timestamp,
        }
    }
}

/// One crawled resource as a JSON object; the Huffman length is derived.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ResourceLine {
    pub alt_svc_h3: bool,
    pub header_len: i64,
    pub http_version: String,
    pub mime_type: String,
    pub response_size: i64,
    pub server_ip: String,
    pub uri: String,
}

impl ResourceLine {
    pub fn into_record(self) -> Result<ResourceRecord> {
        if self.response_size < 0 || self.header_len < 0 {
            return Err(Error::Validation(format!(
                "negative size for {}: response_size={} header_len={}",
                self.uri, self.response_size, self.header_len
            )));
        }
        let http_version = match self.http_version.as_str() {
            "h1" => HttpVersion::H1,
            "h2" => HttpVersion::H2,
            "h3" => HttpVersion::H3,
            other => return Err(Error::Validation(format!("unknown http_version {other:?}"))),
        };
        Ok(ResourceRecord::new(
            self.uri,
            self.response_size as u64,
            self.header_len as u64,
            http_version,
            self.alt_svc_h3,
            self.mime_type,
            self.server_ip,
        ))
    }
}

impl From<&ResourceRecord> for ResourceLine {
    fn from(r: &ResourceRecord) -> Self {
        ResourceLine {
            alt_svc_h3: r.alt_svc_h3,
            header_len: r.header_len as i64,
            http_version: match r.http_version {
                HttpVersion::H1 => "h1",
                HttpVersion::H2 => "h2",
                HttpVersion::H3 => "h3",
            }
            .into(),
            mime_type: r.mime_type.clone(),
            response_size: r.response_size as i64,
            server_ip: r.server_ip.clone(),
            uri: r.uri.clone(),
        }
    }
}

fn non_blank_lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim()))
        .filter(|(_, l)| !l.is_empty())
}

/// Parses packet JSONL. Records are stably re-sorted by timestamp when the
/// input is out of order. An empty input yields an empty trace.
pub fn parse_packet_jsonl(text: &str) -> Result<TrafficTrace> {
    let mut packets = Vec::new();
    for (line, body) in non_blank_lines(text) {
        let wire: PacketLine = serde_json::from_str(body).map_err(|e| Error::Parse {
            line,
            message: e.to_string(),
        })?;
        let record = wire
            .into_record()
            .map_err(|message| Error::Parse { line, message })?;
        packets.push(record);
    }
    if packets.windows(2).any(|w| w[1].timestamp < w[0].timestamp) {
        packets.sort_by(|a, b| a.timestamp.total_cmp(&b.timestamp));
    }
    Ok(TrafficTrace {
        packets,
        site_id: String::new(),
        label: None,
    })
}

pub fn parse_resource_jsonl(text: &str) -> Result<LogicProfile> {
    let mut resources = Vec::new();
    for (line, body) in non_blank_lines(text) {
        let wire: ResourceLine = serde_json::from_str(body).map_err(|e| Error::Parse {
            line,
            message: e.to_string(),
        })?;
        resources.push(wire.into_record().map_err(|e| match e {
            Error::Validation(m) => Error::Validation(format!("line {line}: {m}")),
            other => other,
        })?);
    }
    if resources.is_empty() {
        return Err(Error::EmptyInput("resource log has no entries"));
    }
    Ok(LogicProfile {
        resources,
        site_id: String::new(),
    })
}

/// Per-packet HTTP version guess: UDP is HTTP/3; a TCP packet is HTTP/2 when
/// it and its neighbour in the same flow both start with a TLS
/// application-data byte; everything else is HTTP/1.1.
///
/// Zero-length packets never take part in a pair.
pub fn infer_http_versions(trace: &TrafficTrace) -> Vec<u8> {
    let mut versions = vec![1u8; trace.packets.len()];
    // Last payload-bearing TCP packet seen per flow: (index, starts with 0x17).
    let mut last: HashMap<FlowKey, (usize, bool)> = HashMap::new();
    for (i, p) in trace.packets.iter().enumerate() {
        match p.transport {
            Transport::Udp => versions[i] = 3,
            Transport::Tcp => {
                if p.payload_len == 0 {
                    continue;
                }
                let appdata = p.first_payload_byte == Some(TLS_APPLICATION_DATA);
                let key = FlowKey::of(p);
                if let Some(&(prev, prev_appdata)) = last.get(&key) {
                    if appdata && prev_appdata {
                        versions[prev] = 2;
                        versions[i] = 2;
                    }
                }
                last.insert(key, (i, appdata));
            }
        }
    }
    versions
}

/// Flow numbers 1, 2, ... in order of first appearance.
pub fn assign_flow_indices(trace: &TrafficTrace) -> Vec<usize> {
    let mut seen: HashMap<FlowKey, usize> = HashMap::new();
    trace
        .packets
        .iter()
        .map(|p| {
            let next = seen.len() + 1;
            *seen.entry(FlowKey::of(p)).or_insert(next)
        })
        .collect()
}
