//! Synthetic websites and paired visits.
//!
//! The generator plants the three cross-modal relationships directly:
//! each request packet is the URI's Huffman length plus a fixed header
//! block, the response packets of a resource sum to its size, and a
//! resource travels over UDP exactly when it is served over HTTP/3.
//! Noise knobs loosen each relationship.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Beta, Distribution};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::huffman::huffman_encoded_len;
use crate::model::{
    Direction, HttpVersion, LogicProfile, MimeCategory, PacketRecord, PairedSample, ResourceRecord,
    TrafficTrace, Transport,
};

const URI_ALPHABET: &[u8] = b"abcdefghijklmnopqrstuvwxyz0123456789/._-";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NoiseConfig {
    /// Request lengths get a uniform integer offset in `[-j, j]`.
    pub request_len_jitter_bytes: u32,
    /// Response bytes on the wire are `size * (1 + overhead)`, rounded up.
    pub response_overhead_frac: f64,
    pub packet_mtu: u32,
    /// Load resources in a per-visit random order instead of crawl order.
    pub shuffle_order: bool,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        NoiseConfig {
            request_len_jitter_bytes: 4,
            response_overhead_frac: 0.05,
            packet_mtu: 1460,
            shuffle_order: true,
        }
    }
}

impl NoiseConfig {
    pub fn zero() -> Self {
        NoiseConfig {
            request_len_jitter_bytes: 0,
            response_overhead_frac: 0.0,
            packet_mtu: 1460,
            shuffle_order: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenConfig {
    pub n_sites: usize,
    /// Inclusive `[min, max]`.
    pub resources_per_site: [usize; 2],
    /// Inclusive `[min, max]` URI length in bytes, leading slash included.
    pub uri_len: [usize; 2],
    /// Log-uniform `[min, max]` response size in bytes.
    pub response_size: [u64; 2],
    pub header_len: [u64; 2],
    /// Number of compressed request headers.
    pub header_count_h: u32,
    /// Bytes each compressed header contributes to a request.
    pub header_index_bytes_c: f64,
    /// Mean per-site share of HTTP/3 resources.
    pub h3_probability: f64,
    /// Concentration of the per-site HTTP/3 share around its mean; small
    /// values push sites toward all-or-nothing adoption.
    pub h3_site_concentration: f64,
    pub max_ips_per_site: usize,
    /// Host every resource on its own address (one resource per flow).
    pub dedicated_ip_per_resource: bool,
    pub noise: NoiseConfig,
    pub visits_per_site: usize,
    pub rng_seed: u64,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            n_sites: 100,
            resources_per_site: [6, 16],
            uri_len: [4, 48],
            response_size: [200, 8000],
            header_len: [150, 600],
            header_count_h: 8,
            header_index_bytes_c: 2.0,
            h3_probability: 0.3,
            h3_site_concentration: 0.5,
            max_ips_per_site: 4,
            dedicated_ip_per_resource: false,
            noise: NoiseConfig::default(),
            visits_per_site: 4,
            rng_seed: 7,
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.resources_per_site[0] == 0
            || self.resources_per_site[0] > self.resources_per_site[1]
        {
            return bad("resources_per_site must be a non-empty range starting at 1 or more");
        }
        if self.uri_len[0] == 0 || self.uri_len[0] > self.uri_len[1] {
            return bad("uri_len must be a non-empty range starting at 1 or more");
        }
        if self.response_size[0] == 0 || self.response_size[0] > self.response_size[1] {
            return bad("response_size must be a non-empty positive range");
        }
        if self.header_len[0] > self.header_len[1] {
            return bad("header_len must be a non-empty range");
        }
        if self.noise.packet_mtu < 64 {
            return bad("packet_mtu must be at least 64");
        }
        if !(0.0..=1.0).contains(&self.h3_probability) {
            return bad("h3_probability must lie in [0, 1]");
        }
        if self.h3_site_concentration <= 0.0 || !self.h3_site_concentration.is_finite() {
            return bad("h3_site_concentration must be positive");
        }
        if self.max_ips_per_site == 0 {
            return bad("max_ips_per_site must be at least 1");
        }
        if self.noise.response_overhead_frac < 0.0 || !self.header_index_bytes_c.is_finite() {
            return bad("overhead and header constants must be finite and non-negative");
        }
        Ok(())
    }

    /// Fixed request bytes beyond the URI: `C * H`, rounded.
    pub fn header_block_bytes(&self) -> u64 {
        (self.header_index_bytes_c * self.header_count_h as f64)
            .round()
            .max(0.0) as u64
    }
}

/// A synthetic site: its crawl-order resource list and a private seed.
#[derive(Debug, Clone, PartialEq)]
pub struct SiteSpec {
    pub site_id: String,
    pub resources: Vec<ResourceRecord>,
    pub rng_seed: u64,
}

impl SiteSpec {
    pub fn logic(&self) -> LogicProfile {
        LogicProfile {
            resources: self.resources.clone(),
            site_id: self.site_id.clone(),
        }
    }
}

fn pick_mime(rng: &mut impl Rng) -> MimeCategory {
    const WEIGHTS: [(MimeCategory, u32); 7] = [
        (MimeCategory::Image, 35),
        (MimeCategory::Script, 25),
        (MimeCategory::Stylesheet, 10),
        (MimeCategory::Xhr, 10),
        (MimeCategory::Font, 6),
        (MimeCategory::Media, 4),
        (MimeCategory::Other, 10),
    ];
    let total: u32 = WEIGHTS.iter().map(|w| w.1).sum();
    let mut x = rng.random_range(0..total);
    for (m, w) in WEIGHTS {
        if x < w {
            return m;
        }
        x -= w;
    }
    MimeCategory::Other
}

fn random_uri(rng: &mut impl Rng, len: usize) -> String {
    let mut s = String::with_capacity(len);
    s.push('/');
    for _ in 1..len {
        s.push(URI_ALPHABET[rng.random_range(0..URI_ALPHABET.len())] as char);
    }
    s
}

fn site_ip(site: usize, k: usize) -> String {
    format!("10.{}.{}.{}", (site >> 8) & 0xff, site & 0xff, k + 1)
}

fn gen_site(index: usize, seed: u64, cfg: &GenConfig) -> SiteSpec {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.random_range(cfg.resources_per_site[0]..=cfg.resources_per_site[1]);

    let mean = cfg.h3_probability;
    let h3_share = if mean <= 0.0 {
        0.0
    } else if mean >= 1.0 {
        1.0
    } else {
        let k = cfg.h3_site_concentration;
        Beta::new(k * mean, k * (1.0 - mean))
            .expect("validated beta parameters")
            .sample(&mut rng)
    };

    // Zipf-like hosting: address k gets weight 1/k.
    let n_ips = rng.random_range(1..=cfg.max_ips_per_site);
    let weights: Vec<f64> = (1..=n_ips).map(|k| 1.0 / k as f64).collect();
    let total_w: f64 = weights.iter().sum();

    let (size_lo, size_hi) = (
        (cfg.response_size[0] as f64).ln(),
        (cfg.response_size[1] as f64).ln(),
    );
    let resources = (0..n)
        .map(|j| {
            let uri_len = rng.random_range(cfg.uri_len[0]..=cfg.uri_len[1]);
            let uri = random_uri(&mut rng, uri_len);
            let size = rng.random_range(size_lo..=size_hi).exp().round() as u64;
            let header_len = rng.random_range(cfg.header_len[0]..=cfg.header_len[1]);
            let h3 = rng.random_bool(h3_share);
            let version = if h3 {
                HttpVersion::H3
            } else if rng.random_bool(0.8) {
                HttpVersion::H2
            } else {
                HttpVersion::H1
            };
            let alt_svc = h3 || rng.random_bool(0.1);
            let mime = if j == 0 {
                MimeCategory::Document
            } else {
                pick_mime(&mut rng)
            };
            let ip = if cfg.dedicated_ip_per_resource {
                site_ip(index, j)
            } else {
                let mut x = rng.random_range(0.0..total_w);
                let mut k = 0;
                while k + 1 < n_ips && x >= weights[k] {
                    x -= weights[k];
                    k += 1;
                }
                site_ip(index, k)
            };
            ResourceRecord::new(
                uri,
                size.max(1),
                header_len,
                version,
                alt_svc,
                mime.canonical_mime(),
                ip,
            )
        })
        .collect();
    SiteSpec {
        site_id: format!("site-{index:05}"),
        resources,
        rng_seed: seed,
    }
}

pub fn gen_sites(cfg: &GenConfig) -> Result<Vec<SiteSpec>> {
    cfg.validate()?;
    let mut master = ChaCha8Rng::seed_from_u64(cfg.rng_seed);
    Ok((0..cfg.n_sites)
        .map(|i| gen_site(i, master.random(), cfg))
        .collect())
}

fn mix_seed(a: u64, b: u64) -> u64 {
    // splitmix64 finalizer over the combined words
    let mut z = a ^ b.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Simulates one page load of `site`.
pub fn simulate_visit(site: &SiteSpec, cfg: &GenConfig, visit_seed: u64) -> PairedSample {
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(site.rng_seed, visit_seed));
    let mut order: Vec<usize> = (0..site.resources.len()).collect();
    if cfg.noise.shuffle_order {
        order.shuffle(&mut rng);
    }
    let header_block = cfg.header_block_bytes() as i64;
    let jitter = cfg.noise.request_len_jitter_bytes as i64;
    let mtu = cfg.noise.packet_mtu as u64;

    let mut t = 0.0f64;
    let mut packets = Vec::new();
    for &j in &order {
        let r = &site.resources[j];
        let (transport, port) = match r.http_version {
            HttpVersion::H3 => (Transport::Udp, 443),
            HttpVersion::H2 => (Transport::Tcp, 443),
            HttpVersion::H1 => (Transport::Tcp, 80),
        };
        // Cleartext HTTP/1.1 starts with the method or status line; the
        // other TCP traffic is TLS application data; QUIC bytes are not kept.
        let (req_b0, resp_b0) = match r.http_version {
            HttpVersion::H3 => (None, None),
            HttpVersion::H2 => (Some(0x17), Some(0x17)),
            HttpVersion::H1 => (Some(b'G'), Some(b'H')),
        };
        let offset = if jitter > 0 {
            rng.random_range(-jitter..=jitter)
        } else {
            0
        };
        let req_len = (huffman_encoded_len(r.uri.as_bytes()) as i64 + header_block + offset).max(1);
        t += rng.random_range(0.001..0.01);
        packets.push(PacketRecord {
            timestamp: t,
            direction: Direction::ClientToServer,
            payload_len: req_len as u32,
            transport,
            server_ip: r.server_ip.clone(),
            server_port: port,
            first_payload_byte: req_b0,
        });

        let mut remaining =
            (r.response_size as f64 * (1.0 + cfg.noise.response_overhead_frac)).ceil() as u64;
        t += rng.random_range(0.01..0.05);
        while remaining > 0 {
            let chunk = remaining.min(mtu);
            remaining -= chunk;
            t += rng.random_range(0.0001..0.001);
            packets.push(PacketRecord {
                timestamp: t,
                direction: Direction::ServerToClient,
                payload_len: chunk as u32,
                transport,
                server_ip: r.server_ip.clone(),
                server_port: port,
                first_payload_byte: resp_b0,
            });
        }
    }
    PairedSample {
        logic: site.logic(),
        traffic: TrafficTrace {
            packets,
            site_id: site.site_id.clone(),
            label: None,
        },
        site_id: site.site_id.clone(),
    }
}

/// `visits_per_site` visits of every site, traffic labelled by site position.
pub fn simulate_corpus(sites: &[SiteSpec], cfg: &GenConfig) -> Vec<PairedSample> {
    simulate_visits(sites, cfg, 0, cfg.visits_per_site)
}

/// Visits numbered `first..first + count` of every site.
pub fn simulate_visits(
    sites: &[SiteSpec],
    cfg: &GenConfig,
    first: usize,
    count: usize,
) -> Vec<PairedSample> {
    let mut out = Vec::with_capacity(sites.len() * count);
    for (label, site) in sites.iter().enumerate() {
        for v in first..first + count {
            let mut pair = simulate_visit(site, cfg, v as u64);
            pair.traffic.label = Some(label);
            out.push(pair);
        }
    }
    out
}
