//! Domain types for both modalities and their fixed-length matrix encodings.
//!
//! A visit is observed twice: as a packet trace (what an on-path observer
//! sees) and as a resource profile (what a crawler logs). Each side is
//! encoded into a zero-padded matrix whose rows are either packets or
//! resources.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::{assign_flow_indices, infer_http_versions};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Direction {
    ClientToServer,
    ServerToClient,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Transport {
    Tcp,
    Udp,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PacketRecord {
    /// Seconds; non-decreasing within a trace.
    pub timestamp: f64,
    pub direction: Direction,
    pub payload_len: u32,
    pub transport: Transport,
    pub server_ip: String,
    pub server_port: u16,
    /// First byte of the transport payload, when captured.
    pub first_payload_byte: Option<u8>,
}

impl PacketRecord {
    /// Payload length with the client-to-server direction positive.
    pub fn signed_len(&self) -> f64 {
        match self.direction {
            Direction::ClientToServer => self.payload_len as f64,
            Direction::ServerToClient => -(self.payload_len as f64),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrafficTrace {
    pub packets: Vec<PacketRecord>,
    pub site_id: String,
    pub label: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum HttpVersion {
    H1,
    H2,
    H3,
}

impl HttpVersion {
    /// 1, 2 or 3.
    pub fn index(self) -> u8 {
        match self {
            HttpVersion::H1 => 1,
            HttpVersion::H2 => 2,
            HttpVersion::H3 => 3,
        }
    }
}

/// Browser-devtools style resource buckets, in their fixed encoding order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum MimeCategory {
    Document,
    Script,
    Stylesheet,
    Image,
    Font,
    Media,
    Xhr,
    Other,
}

impl MimeCategory {
    pub const ALL: [MimeCategory; 8] = [
        MimeCategory::Document,
        MimeCategory::Script,
        MimeCategory::Stylesheet,
        MimeCategory::Image,
        MimeCategory::Font,
        MimeCategory::Media,
        MimeCategory::Xhr,
        MimeCategory::Other,
    ];

    /// Position in [`MimeCategory::ALL`], 0..=7.
    pub fn index(self) -> u8 {
        self as u8
    }

    pub fn from_mime(mime: &str) -> Self {
        let m = mime
            .split(';')
            .next()
            .unwrap_or("")
            .trim()
            .to_ascii_lowercase();
        if m == "text/html" {
            MimeCategory::Document
        } else if m.contains("javascript") {
            MimeCategory::Script
        } else if m == "text/css" {
            MimeCategory::Stylesheet
        } else if m.starts_with("image/") {
            MimeCategory::Image
        } else if m.starts_with("font/") {
            MimeCategory::Font
        } else if m.starts_with("audio/") || m.starts_with("video/") {
            MimeCategory::Media
        } else if m == "application/json" || m == "application/xml" {
            MimeCategory::Xhr
        } else {
            MimeCategory::Other
        }
    }

    /// A representative MIME string that maps back to this category.
    pub fn canonical_mime(self) -> &'static str {
        match self {
            MimeCategory::Document => "text/html",
            MimeCategory::Script => "application/javascript",
            MimeCategory::Stylesheet => "text/css",
            MimeCategory::Image => "image/png",
            MimeCategory::Font => "font/woff2",
            MimeCategory::Media => "video/mp4",
            MimeCategory::Xhr => "application/json",
            MimeCategory::Other => "application/octet-stream",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ResourceRecord {
    /// Path and query, no scheme or host.
    pub uri: String,
    pub uri_raw_len: u64,
    pub uri_huffman_len: u64,
    pub response_size: u64,
    pub header_len: u64,
    pub http_version: HttpVersion,
    pub alt_svc_h3: bool,
    pub mime_category: MimeCategory,
    /// The MIME string as logged; `mime_category` is derived from it.
    pub mime_type: String,
    pub server_ip: String,
}

impl ResourceRecord {
    /// Builds a record, deriving both URI lengths and the MIME bucket.
    pub fn new(
        uri: impl Into<String>,
        response_size: u64,
        header_len: u64,
        http_version: HttpVersion,
        alt_svc_h3: bool,
        mime_type: impl Into<String>,
        server_ip: impl Into<String>,
    ) -> Self {
        let uri = uri.into();
        let mime_type = mime_type.into();
        ResourceRecord {
            uri_raw_len: uri.len() as u64,
            uri_huffman_len: crate::huffman::huffman_encoded_len(uri.as_bytes()),
            uri,
            response_size,
            header_len,
            http_version,
            alt_svc_h3,
            mime_category: MimeCategory::from_mime(&mime_type),
            mime_type,
            server_ip: server_ip.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LogicProfile {
    pub resources: Vec<ResourceRecord>,
    pub site_id: String,
}

/// One site visit seen from both sides.
#[derive(Debug, Clone, PartialEq)]
pub struct PairedSample {
    pub logic: LogicProfile,
    pub traffic: TrafficTrace,
    pub site_id: String,
}

impl PairedSample {
    pub fn new(logic: LogicProfile, traffic: TrafficTrace) -> Result<Self> {
        if logic.site_id != traffic.site_id {
            return Err(Error::Validation(format!(
                "logic site {} does not match traffic site {}",
                logic.site_id, traffic.site_id
            )));
        }
        let site_id = logic.site_id.clone();
        Ok(PairedSample {
            logic,
            traffic,
            site_id,
        })
    }
}

/// Fixed matrix lengths for both modalities.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncodingParams {
    pub traffic_len: usize,
    pub logic_len: usize,
}

impl Default for EncodingParams {
    fn default() -> Self {
        EncodingParams {
            traffic_len: 5000,
            logic_len: 80,
        }
    }
}

pub const TRAFFIC_COLS: usize = 3;
pub const LOGIC_COLS: usize = 8;

/// `[directional_len_scaled, http_version, flow_index]` per packet.
#[derive(Debug, Clone, PartialEq)]
pub struct TrafficMatrix {
    pub rows: Vec<[f64; TRAFFIC_COLS]>,
    pub valid_len: usize,
}

impl TrafficMatrix {
    pub fn valid_rows(&self) -> &[[f64; TRAFFIC_COLS]] {
        &self.rows[..self.valid_len]
    }

    /// Same content with extra zero rows appended up to `len`.
    pub fn padded_to(&self, len: usize) -> Self {
        let mut rows = self.rows.clone();
        if rows.len() < len {
            rows.resize(len, [0.0; TRAFFIC_COLS]);
        }
        TrafficMatrix {
            rows,
            valid_len: self.valid_len,
        }
    }
}

/// Column layout of [`LogicMatrix`].
pub mod logic_col {
    pub const HUFFMAN_LEN: usize = 0;
    pub const RAW_LEN: usize = 1;
    pub const RESPONSE_SIZE: usize = 2;
    pub const HEADER_LEN: usize = 3;
    pub const HTTP_VERSION: usize = 4;
    pub const ALT_SVC: usize = 5;
    pub const MIME: usize = 6;
    pub const IP_INDEX: usize = 7;
}

#[derive(Debug, Clone, PartialEq)]
pub struct LogicMatrix {
    pub rows: Vec<[f64; LOGIC_COLS]>,
    pub valid_len: usize,
}

impl LogicMatrix {
    pub fn valid_rows(&self) -> &[[f64; LOGIC_COLS]] {
        &self.rows[..self.valid_len]
    }

    pub fn padded_to(&self, len: usize) -> Self {
        let mut rows = self.rows.clone();
        if rows.len() < len {
            rows.resize(len, [0.0; LOGIC_COLS]);
        }
        LogicMatrix {
            rows,
            valid_len: self.valid_len,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScaleKind {
    /// `sign(x) * ln(1 + |x|)`
    SignedLog,
    /// `ln(1 + x)`, defined for `x >= 0`
    Log,
    Identity,
}

pub fn normalize_scalar(x: f64, kind: ScaleKind) -> Result<f64> {
    match kind {
        ScaleKind::SignedLog => Ok(x.signum() * x.abs().ln_1p()),
        ScaleKind::Log => {
            if x < 0.0 || x.is_nan() {
                Err(Error::Domain {
                    what: "log scaling",
                    value: x,
                })
            } else {
                Ok(x.ln_1p())
            }
        }
        ScaleKind::Identity => Ok(x),
    }
}

fn log_scale(x: u64) -> f64 {
    (x as f64).ln_1p()
}

pub fn encode_traffic(trace: &TrafficTrace, params: &EncodingParams) -> Result<TrafficMatrix> {
    if trace.packets.is_empty() {
        return Err(Error::EmptyInput("traffic trace has no packets"));
    }
    if params.traffic_len == 0 {
        return Err(Error::Config("traffic_len must be at least 1".into()));
    }
    let versions = infer_http_versions(trace);
    let flows = assign_flow_indices(trace);
    let valid_len = trace.packets.len().min(params.traffic_len);
    let mut rows = vec![[0.0; TRAFFIC_COLS]; params.traffic_len];
    for (i, row) in rows.iter_mut().take(valid_len).enumerate() {
        let len = normalize_scalar(trace.packets[i].signed_len(), ScaleKind::SignedLog)?;
        *row = [len, versions[i] as f64, flows[i] as f64];
    }
    Ok(TrafficMatrix { rows, valid_len })
}

pub fn encode_logic(profile: &LogicProfile, params: &EncodingParams) -> Result<LogicMatrix> {
    if profile.resources.is_empty() {
        return Err(Error::EmptyInput("logic profile has no resources"));
    }
    if params.logic_len == 0 {
        return Err(Error::Config("logic_len must be at least 1".into()));
    }
    // Indexed over the whole profile so truncation never renumbers servers.
    let mut ip_index: HashMap<&str, usize> = HashMap::new();
    let valid_len = profile.resources.len().min(params.logic_len);
    let mut rows = vec![[0.0; LOGIC_COLS]; params.logic_len];
    for (row, r) in rows.iter_mut().zip(&profile.resources).take(valid_len) {
        let next = ip_index.len() + 1;
        let ip = *ip_index.entry(r.server_ip.as_str()).or_insert(next);
        *row = [
            log_scale(r.uri_huffman_len),
            log_scale(r.uri_raw_len),
            log_scale(r.response_size),
            log_scale(r.header_len),
            r.http_version.index() as f64,
            r.alt_svc_h3 as u8 as f64,
            r.mime_category.index() as f64,
            ip as f64,
        ];
    }
    Ok(LogicMatrix { rows, valid_len })
}
