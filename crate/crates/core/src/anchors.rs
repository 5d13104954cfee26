//! Measuring cross-modal alignment on paired samples.
//!
//! Three relationships are tested per visit or per site:
//!
//! * request: client-to-server packet lengths against Huffman-coded URI
//!   lengths, by Pearson correlation of the order-matched sequences;
//! * response: the distribution of per-flow response volume against the
//!   distribution of resource sizes, scored as `1 - W1` after scaling each
//!   side by its maximum;
//! * protocol: the UDP share of packets against the HTTP/3 share of
//!   resources, correlated across sites.
//!
//! Significance comes from permutation tests with `+1` smoothing.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::FlowKey;
use crate::model::{Direction, HttpVersion, PairedSample, Transport};

/// Sample Pearson correlation, clamped to `[-1, 1]`.
///
/// Both sequences are shifted by their first element before the two-pass
/// computation, so integer-valued data related by a pure offset yields
/// exactly `1.0`.
pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::Validation(format!(
            "pearson needs equal lengths, got {} and {}",
            x.len(),
            y.len()
        )));
    }
    if x.len() < 2 {
        return Err(Error::DegenerateInput("pearson needs at least two points"));
    }
    let n = x.len() as f64;
    let dx: Vec<f64> = x.iter().map(|v| v - x[0]).collect();
    let dy: Vec<f64> = y.iter().map(|v| v - y[0]).collect();
    let mx = dx.iter().sum::<f64>() / n;
    let my = dy.iter().sum::<f64>() / n;
    let (mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0);
    for (a, b) in dx.iter().zip(&dy) {
        let (a, b) = (a - mx, b - my);
        sxx += a * a;
        syy += b * b;
        sxy += a * b;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::DegenerateInput("pearson input is constant"));
    }
    Ok((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

/// Empirical 1-D Wasserstein-1 distance, integrating the absolute
/// difference of the two quantile functions.
pub fn wasserstein1(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::EmptyInput(
            "wasserstein1 needs two non-empty samples",
        ));
    }
    let mut a = a.to_vec();
    let mut b = b.to_vec();
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    let (n, m) = (a.len(), b.len());
    if n == m {
        let s: f64 = a.iter().zip(&b).map(|(x, y)| (x - y).abs()).sum();
        return Ok(s / n as f64);
    }
    // Quantile breakpoints are i/n and j/m; compare them as (i*m) vs (j*n).
    let (mut i, mut j) = (0usize, 0usize);
    let mut u = 0usize; // current position in units of 1/(n*m)
    let mut total = 0.0;
    while i < n && j < m {
        let next_a = (i + 1) * m;
        let next_b = (j + 1) * n;
        let next = next_a.min(next_b);
        total += (next - u) as f64 * (a[i] - b[j]).abs();
        u = next;
        if next_a == next {
            i += 1;
        }
        if next_b == next {
            j += 1;
        }
    }
    Ok(total / (n * m) as f64)
}

/// Two-sided permutation p-value of `stat(x, y)` under random re-pairings
/// of `y`: `(1 + #{|stat(x, perm y)| >= |stat(x, y)|}) / (n_perm + 1)`.
pub fn permutation_test<F>(stat: F, x: &[f64], y: &[f64], n_perm: usize, seed: u64) -> Result<f64>
where
    F: Fn(&[f64], &[f64]) -> Result<f64>,
{
    if n_perm == 0 {
        return Err(Error::Config("n_perm must be at least 1".into()));
    }
    let observed = stat(x, y)?.abs();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut shuffled = y.to_vec();
    let mut hits = 0usize;
    for _ in 0..n_perm {
        shuffled.shuffle(&mut rng);
        if stat(x, &shuffled)?.abs() >= observed {
            hits += 1;
        }
    }
    Ok((1 + hits) as f64 / (n_perm + 1) as f64)
}

fn request_sequences(pair: &PairedSample) -> (Vec<f64>, Vec<f64>) {
    let x: Vec<f64> = pair
        .traffic
        .packets
        .iter()
        .filter(|p| p.direction == Direction::ClientToServer && p.payload_len > 0)
        .map(|p| p.payload_len as f64)
        .collect();
    let y: Vec<f64> = pair
        .logic
        .resources
        .iter()
        .map(|r| r.uri_huffman_len as f64)
        .collect();
    let k = x.len().min(y.len());
    (x[..k].to_vec(), y[..k].to_vec())
}

/// Pearson r between request packet lengths and URI Huffman lengths,
/// matched by order of occurrence.
pub fn request_anchor(pair: &PairedSample) -> Result<f64> {
    let (x, y) = request_sequences(pair);
    if x.len() < 2 {
        return Err(Error::DegenerateInput(
            "request anchor needs two requests and two resources",
        ));
    }
    pearson(&x, &y)
}

fn response_distributions(pair: &PairedSample) -> Result<(Vec<f64>, Vec<f64>)> {
    let mut order: Vec<FlowKey> = Vec::new();
    let mut sums: HashMap<FlowKey, f64> = HashMap::new();
    for p in &pair.traffic.packets {
        if p.direction != Direction::ServerToClient {
            continue;
        }
        let key = FlowKey::of(p);
        if !sums.contains_key(&key) {
            order.push(key.clone());
        }
        *sums.entry(key).or_insert(0.0) += p.payload_len as f64;
    }
    let a: Vec<f64> = order.iter().map(|k| sums[k]).collect();
    let b: Vec<f64> = pair
        .logic
        .resources
        .iter()
        .map(|r| r.response_size as f64)
        .collect();
    if a.is_empty() || b.is_empty() {
        return Err(Error::DegenerateInput(
            "response anchor needs responses and resources",
        ));
    }
    let scale = |v: Vec<f64>| -> Result<Vec<f64>> {
        let max = v.iter().cloned().fold(0.0, f64::max);
        if max <= 0.0 {
            return Err(Error::DegenerateInput("response sizes are all zero"));
        }
        Ok(v.into_iter().map(|x| x / max).collect())
    };
    Ok((scale(a)?, scale(b)?))
}

/// `1 - W1` between max-scaled per-flow response volumes and max-scaled
/// resource sizes.
pub fn response_anchor(pair: &PairedSample) -> Result<f64> {
    let (a, b) = response_distributions(pair)?;
    Ok(1.0 - wasserstein1(&a, &b)?)
}

/// `(UDP packet share, HTTP/3 resource share)` for one visit.
pub fn protocol_ratios(pair: &PairedSample) -> Result<(f64, f64)> {
    let packets = &pair.traffic.packets;
    let resources = &pair.logic.resources;
    if packets.is_empty() || resources.is_empty() {
        return Err(Error::DegenerateInput(
            "protocol ratios need packets and resources",
        ));
    }
    let udp = packets
        .iter()
        .filter(|p| p.transport == Transport::Udp)
        .count();
    let h3 = resources
        .iter()
        .filter(|r| r.http_version == HttpVersion::H3)
        .count();
    Ok((
        udp as f64 / packets.len() as f64,
        h3 as f64 / resources.len() as f64,
    ))
}

/// Per-site protocol ratios, averaged over each site's visits; sites are
/// ordered by first appearance.
pub fn site_protocol_ratios(corpus: &[PairedSample]) -> Result<Vec<(String, f64, f64)>> {
    let mut order = Vec::new();
    let mut acc: HashMap<&str, (f64, f64, usize)> = HashMap::new();
    for pair in corpus {
        let (x, y) = protocol_ratios(pair)?;
        let e = acc.entry(pair.site_id.as_str()).or_insert_with(|| {
            order.push(pair.site_id.clone());
            (0.0, 0.0, 0)
        });
        e.0 += x;
        e.1 += y;
        e.2 += 1;
    }
    Ok(order
        .into_iter()
        .map(|s| {
            let (x, y, n) = acc[s.as_str()];
            (s, x / n as f64, y / n as f64)
        })
        .collect())
}

/// Pearson r, across sites, between UDP share and HTTP/3 share.
pub fn protocol_anchor(corpus: &[PairedSample]) -> Result<f64> {
    let sites = site_protocol_ratios(corpus)?;
    if sites.len() < 2 {
        return Err(Error::DegenerateInput("protocol anchor needs two sites"));
    }
    let x: Vec<f64> = sites.iter().map(|s| s.1).collect();
    let y: Vec<f64> = sites.iter().map(|s| s.2).collect();
    pearson(&x, &y)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnchorOptions {
    pub n_perm: usize,
    pub alpha: f64,
    pub seed: u64,
}

impl Default for AnchorOptions {
    fn default() -> Self {
        AnchorOptions {
            n_perm: 1000,
            alpha: 0.05,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SiteAnchors {
    pub site_id: String,
    pub request_r: Option<f64>,
    pub request_p: Option<f64>,
    pub response_score: Option<f64>,
    pub response_p: Option<f64>,
    pub udp_ratio: Option<f64>,
    pub h3_ratio: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnchorSummary {
    pub mean: f64,
    pub std: f64,
    pub mean_p: f64,
    pub median_p: f64,
    pub significant_fraction: f64,
    pub evaluated: usize,
    pub skipped: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProtocolSummary {
    pub r: Option<f64>,
    pub p: Option<f64>,
    pub sites: usize,
}

/// Mean, spread, p-value and significance share of one anchor on a
/// reference corpus, for side-by-side display.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferenceRow {
    pub anchor: String,
    pub metric: String,
    pub mean: f64,
    pub std: f64,
    pub p: f64,
    pub significant_pct: f64,
}

/// Alignment measurements over real top-1000 site crawls, for comparison.
pub fn reference_rows() -> Vec<ReferenceRow> {
    let row = |anchor: &str, metric: &str, mean, std, p, sig| ReferenceRow {
        anchor: anchor.into(),
        metric: metric.into(),
        mean,
        std,
        p,
        significant_pct: sig,
    };
    vec![
        row("request", "pearson_r", 0.3114, 0.0730, 0.0290, 86.0),
        row(
            "response",
            "one_minus_wasserstein",
            0.9109,
            0.0278,
            0.0124,
            96.0,
        ),
        row("protocol", "pearson_r", 0.5607, 0.1019, 0.0017, 100.0),
    ]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnchorReport {
    pub sites: Vec<SiteAnchors>,
    pub request: Option<AnchorSummary>,
    pub response: Option<AnchorSummary>,
    pub protocol: ProtocolSummary,
    pub options: AnchorOptions,
    pub reference: Vec<ReferenceRow>,
}

fn summarize(values: &[(f64, f64)], skipped: usize, alpha: f64) -> Option<AnchorSummary> {
    if values.is_empty() {
        return None;
    }
    let n = values.len() as f64;
    let mean = values.iter().map(|v| v.0).sum::<f64>() / n;
    let std = if values.len() > 1 {
        (values.iter().map(|v| (v.0 - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    let mut ps: Vec<f64> = values.iter().map(|v| v.1).collect();
    ps.sort_by(f64::total_cmp);
    let median_p = if ps.len() % 2 == 1 {
        ps[ps.len() / 2]
    } else {
        (ps[ps.len() / 2 - 1] + ps[ps.len() / 2]) / 2.0
    };
    Some(AnchorSummary {
        mean,
        std,
        mean_p: ps.iter().sum::<f64>() / n,
        median_p,
        significant_fraction: ps.iter().filter(|&&p| p < alpha).count() as f64 / n,
        evaluated: values.len(),
        skipped,
    })
}

/// One-sided p-value of a visit's response score against the scores its
/// traffic obtains when paired with other sites' logic.
fn response_pairing_p(
    corpus: &[PairedSample],
    index: usize,
    observed: f64,
    n_perm: usize,
    rng: &mut impl Rng,
) -> Option<f64> {
    let others: Vec<usize> = (0..corpus.len())
        .filter(|&j| corpus[j].site_id != corpus[index].site_id)
        .collect();
    if others.is_empty() {
        return None;
    }
    let traffic_side = &corpus[index];
    let mut hits = 0usize;
    for _ in 0..n_perm {
        let j = others[rng.random_range(0..others.len())];
        let swapped = PairedSample {
            logic: corpus[j].logic.clone(),
            traffic: traffic_side.traffic.clone(),
            site_id: traffic_side.site_id.clone(),
        };
        match response_anchor(&swapped) {
            Ok(s) if s >= observed => hits += 1,
            Ok(_) => {}
            Err(_) => hits += 1,
        }
    }
    Some((1 + hits) as f64 / (n_perm + 1) as f64)
}

/// Per-visit anchors and their aggregates. Visits where an anchor is
/// degenerate are excluded from that anchor's summary and counted as
/// skipped.
pub fn aggregate_report(corpus: &[PairedSample], opts: &AnchorOptions) -> Result<AnchorReport> {
    let distinct: std::collections::BTreeSet<&str> =
        corpus.iter().map(|p| p.site_id.as_str()).collect();
    if distinct.len() < 2 {
        return Err(Error::DegenerateInput(
            "anchor report needs at least two sites",
        ));
    }
    let mut seeds = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut sites = Vec::with_capacity(corpus.len());
    let (mut req, mut resp) = (Vec::new(), Vec::new());
    let (mut req_skip, mut resp_skip) = (0, 0);
    for (i, pair) in corpus.iter().enumerate() {
        let req_seed: u64 = seeds.random();
        let mut local = ChaCha8Rng::seed_from_u64(seeds.random());
        let mut rec = SiteAnchors {
            site_id: pair.site_id.clone(),
            request_r: None,
            request_p: None,
            response_score: None,
            response_p: None,
            udp_ratio: None,
            h3_ratio: None,
        };
        match request_anchor(pair) {
            Ok(r) => {
                let (x, y) = request_sequences(pair);
                let p = permutation_test(pearson, &x, &y, opts.n_perm, req_seed)?;
                rec.request_r = Some(r);
                rec.request_p = Some(p);
                req.push((r, p));
            }
            Err(_) => req_skip += 1,
        }
        match response_anchor(pair) {
            Ok(s) => {
                rec.response_score = Some(s);
                rec.response_p = response_pairing_p(corpus, i, s, opts.n_perm, &mut local);
                match rec.response_p {
                    Some(p) => resp.push((s, p)),
                    None => resp_skip += 1,
                }
            }
            Err(_) => resp_skip += 1,
        }
        if let Ok((x, y)) = protocol_ratios(pair) {
            rec.udp_ratio = Some(x);
            rec.h3_ratio = Some(y);
        }
        sites.push(rec);
    }

    let protocol = match site_protocol_ratios(corpus) {
        Ok(ratios) if ratios.len() >= 2 => {
            let x: Vec<f64> = ratios.iter().map(|s| s.1).collect();
            let y: Vec<f64> = ratios.iter().map(|s| s.2).collect();
            match pearson(&x, &y) {
                Ok(r) => ProtocolSummary {
                    r: Some(r),
                    p: Some(permutation_test(
                        pearson,
                        &x,
                        &y,
                        opts.n_perm,
                        seeds.random(),
                    )?),
                    sites: ratios.len(),
                },
                Err(_) => ProtocolSummary {
                    r: None,
                    p: None,
                    sites: ratios.len(),
                },
            }
        }
        _ => ProtocolSummary {
            r: None,
            p: None,
            sites: 0,
        },
    };

    Ok(AnchorReport {
        sites,
        request: summarize(&req, req_skip, opts.alpha),
        response: summarize(&resp, resp_skip, opts.alpha),
        protocol,
        options: *opts,
        reference: reference_rows(),
    })
}

impl AnchorReport {
    /// Aligned plain-text table of the aggregates next to the reference rows.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{:<9} {:<22} {:>18} {:>8} {:>8} {:>7} {:>8}   {:>18} {:>8} {:>5}",
            "anchor",
            "metric",
            "mean ± std",
            "mean p",
            "med p",
            "sig %",
            "n/skip",
            "reference",
            "ref p",
            "ref %"
        );
        let refs: BTreeMap<String, ReferenceRow> = self
            .reference
            .iter()
            .map(|r| (r.anchor.clone(), r.clone()))
            .collect();
        let fmt_ref = |name: &str| {
            refs.get(name)
                .map(|r| {
                    format!(
                        "{:>18} {:>8.4} {:>5.0}",
                        format!("{:.4} ± {:.4}", r.mean, r.std),
                        r.p,
                        r.significant_pct
                    )
                })
                .unwrap_or_default()
        };
        for (name, metric, summary) in [
            ("request", "pearson_r", &self.request),
            ("response", "one_minus_wasserstein", &self.response),
        ] {
            match summary {
                Some(s) => {
                    let _ = writeln!(
                        out,
                        "{:<9} {:<22} {:>18} {:>8.4} {:>8.4} {:>7.1} {:>8}   {}",
                        name,
                        metric,
                        format!("{:.4} ± {:.4}", s.mean, s.std),
                        s.mean_p,
                        s.median_p,
                        100.0 * s.significant_fraction,
                        format!("{}/{}", s.evaluated, s.skipped),
                        fmt_ref(name)
                    );
                }
                None => {
                    let _ = writeln!(out, "{name:<9} {metric:<22} {:>18}", "n/a");
                }
            }
        }
        let p = &self.protocol;
        let _ = writeln!(
            out,
            "{:<9} {:<22} {:>18} {:>8} {:>8} {:>7} {:>8}   {}",
            "protocol",
            "pearson_r",
            p.r.map(|r| format!("{r:.4}"))
                .unwrap_or_else(|| "n/a".into()),
            p.p.map(|v| format!("{v:.4}"))
                .unwrap_or_else(|| "n/a".into()),
            "",
            p.p.map(|v| if v < self.options.alpha {
                "100.0"
            } else {
                "0.0"
            }
            .to_string())
                .unwrap_or_default(),
            format!("{}/0", p.sites),
            fmt_ref("protocol")
        );
        out
    }
}
