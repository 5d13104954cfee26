//! Brute-force reference implementations and fixtures shared by the
//! integration tests.

#![allow(dead_code)]

use std::collections::BTreeMap;

use semalign::{
    Direction, HttpVersion, LogicProfile, PacketRecord, PairedSample, ResourceRecord, TrafficTrace,
    Transport,
};

/// Pearson r from pairwise differences:
/// `sum_{i<j} dx dy / sqrt(sum dx^2 * sum dy^2)`.
pub fn pearson_pairwise(x: &[f64], y: &[f64]) -> f64 {
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for i in 0..x.len() {
        for j in i + 1..x.len() {
            let (dx, dy) = (x[i] - x[j], y[i] - y[j]);
            sxy += dx * dy;
            sxx += dx * dx;
            syy += dy * dy;
        }
    }
    sxy / (sxx * syy).sqrt()
}

/// W1 as the integral of `|F_a - F_b|` over the merged support.
pub fn w1_cdf(a: &[f64], b: &[f64]) -> f64 {
    let mut pts: Vec<f64> = a.iter().chain(b).copied().collect();
    pts.sort_by(f64::total_cmp);
    let cdf = |s: &[f64], t: f64| s.iter().filter(|&&v| v <= t).count() as f64 / s.len() as f64;
    pts.windows(2)
        .map(|w| (cdf(a, w[0]) - cdf(b, w[0])).abs() * (w[1] - w[0]))
        .sum()
}

fn dist(p: &[f64], q: &[f64]) -> f64 {
    p.iter()
        .zip(q)
        .map(|(u, v)| (u - v).powi(2))
        .sum::<f64>()
        .sqrt()
}

/// Distance covariance from the triple-sum identity
/// `S1 + S2 - 2 S3` on raw distance matrices.
fn dcov2(x: &[Vec<f64>], y: &[Vec<f64>]) -> f64 {
    let n = x.len();
    let nf = n as f64;
    let a: Vec<Vec<f64>> = (0..n)
        .map(|i| (0..n).map(|j| dist(&x[i], &x[j])).collect())
        .collect();
    let b: Vec<Vec<f64>> = (0..n)
        .map(|i| (0..n).map(|j| dist(&y[i], &y[j])).collect())
        .collect();
    let mut s1 = 0.0;
    let (mut sa, mut sb) = (0.0, 0.0);
    for i in 0..n {
        for j in 0..n {
            s1 += a[i][j] * b[i][j];
            sa += a[i][j];
            sb += b[i][j];
        }
    }
    let mut s3 = 0.0;
    for i in 0..n {
        for j in 0..n {
            for k in 0..n {
                s3 += a[i][j] * b[i][k];
            }
        }
    }
    s1 / (nf * nf) + (sa / (nf * nf)) * (sb / (nf * nf)) - 2.0 * s3 / (nf * nf * nf)
}

pub fn dcor_triple(x: &[Vec<f64>], y: &[Vec<f64>]) -> f64 {
    let (vxy, vx, vy) = (dcov2(x, y), dcov2(x, x), dcov2(y, y));
    if vx <= 0.0 || vy <= 0.0 {
        return 0.0;
    }
    (vxy.max(0.0) / (vx * vy).sqrt()).sqrt()
}

fn outer_add(m: &mut [Vec<f64>], v: &[f64], w: f64) {
    for i in 0..v.len() {
        for j in 0..v.len() {
            m[i][j] += w * v[i] * v[j];
        }
    }
}

fn trace(m: &[Vec<f64>]) -> f64 {
    (0..m.len()).map(|i| m[i][i]).sum()
}

/// Fisher ratio from explicit scatter matrices. The global scale is
/// `tr(S_B + S_W) / (n d)`, the total variance per coordinate.
pub fn fdr_scatter(zs: &[Vec<f64>], labels: &[usize], eps: f64) -> Option<f64> {
    let d = zs[0].len();
    let n = zs.len() as f64;
    let mean: Vec<f64> = (0..d)
        .map(|k| zs.iter().map(|z| z[k]).sum::<f64>() / n)
        .collect();
    let mut by: BTreeMap<usize, Vec<&Vec<f64>>> = BTreeMap::new();
    for (z, &l) in zs.iter().zip(labels) {
        by.entry(l).or_default().push(z);
    }
    let mut sb = vec![vec![0.0; d]; d];
    let mut sw = vec![vec![0.0; d]; d];
    for members in by.values() {
        let nc = members.len() as f64;
        let mu: Vec<f64> = (0..d)
            .map(|k| members.iter().map(|z| z[k]).sum::<f64>() / nc)
            .collect();
        let diff: Vec<f64> = mu.iter().zip(&mean).map(|(a, b)| a - b).collect();
        outer_add(&mut sb, &diff, nc);
        for z in members {
            let dz: Vec<f64> = z.iter().zip(&mu).map(|(a, b)| a - b).collect();
            outer_add(&mut sw, &dz, 1.0);
        }
    }
    let (tb, tw) = (trace(&sb), trace(&sw));
    let var = (tb + tw) / (n * d as f64);
    let s = if var > 0.0 { var } else { 1.0 };
    let (tb, tw) = (tb / s, tw / s);
    if tw <= eps && tb > 0.0 {
        return None;
    }
    Some(tb / (tw + eps))
}

pub fn rel_close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * a.abs().max(b.abs()) + 1e-14
}

pub fn resource(uri: &str, size: u64, ip: &str) -> ResourceRecord {
    ResourceRecord::new(uri, size, 300, HttpVersion::H2, false, "text/html", ip)
}

pub fn packet(dir: Direction, len: u32, ip: &str, ts: f64) -> PacketRecord {
    PacketRecord {
        timestamp: ts,
        direction: dir,
        payload_len: len,
        transport: Transport::Tcp,
        server_ip: ip.into(),
        server_port: 443,
        first_payload_byte: Some(0x17),
    }
}

/// A pair whose resources are hosted on the given addresses; each resource
/// produces one request and one response packet to its address.
pub fn pair_on_ips(ips: &[&str]) -> PairedSample {
    let mut resources = Vec::new();
    let mut packets = Vec::new();
    for (i, ip) in ips.iter().enumerate() {
        resources.push(resource(&format!("/r{i}"), 100 + i as u64, ip));
        packets.push(packet(
            Direction::ClientToServer,
            60 + i as u32,
            ip,
            i as f64,
        ));
        packets.push(packet(
            Direction::ServerToClient,
            120 + i as u32,
            ip,
            i as f64 + 0.5,
        ));
    }
    PairedSample {
        logic: LogicProfile {
            resources,
            site_id: "fixture".into(),
        },
        traffic: TrafficTrace {
            packets,
            site_id: "fixture".into(),
            label: Some(0),
        },
        site_id: "fixture".into(),
    }
}

pub mod gradcheck {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use semalign::neural::{
        combined_loss, Batch, EncodedPair, LabeledTrace, ModelConfig, ModelParams, TrainConfig,
    };
    use semalign::synth::{gen_sites, simulate_visit, GenConfig};
    use semalign::EncodingParams;

    pub struct Report {
        pub checked: usize,
        pub worst: f64,
        pub worst_at: String,
    }

    /// `|a - n| / max(|a| + |n|, floor)`; the floor keeps vanishing
    /// gradients from turning rounding noise into a large ratio.
    pub fn rel_err(a: f64, n: f64) -> f64 {
        (a - n).abs() / (a.abs() + n.abs()).max(1e-7)
    }

    /// Compares the analytic gradient of the combined objective against
    /// central differences for one random draw of parameters and inputs.
    /// Up to `per_tensor` coordinates of every parameter tensor are checked.
    pub fn check_draw(draw: u64, per_tensor: usize) -> Report {
        let mut rng = ChaCha8Rng::seed_from_u64(draw);
        let cfg_model = ModelConfig {
            init_seed: draw,
            ..ModelConfig::tiny()
        };
        let mut params = ModelParams::init(&cfg_model).unwrap();
        // Perturb away from the zero biases and unit gains of a fresh model.
        for t in &mut params.store.tensors {
            for v in &mut t.data {
                *v += rng.random_range(-0.1..0.1);
            }
        }
        let enc = EncodingParams {
            traffic_len: 10,
            logic_len: 5,
        };
        let gen = GenConfig {
            n_sites: 3,
            resources_per_site: [2, 4],
            rng_seed: draw,
            ..GenConfig::default()
        };
        let sites = gen_sites(&gen).unwrap();
        let pairs: Vec<EncodedPair> = sites
            .iter()
            .map(|s| EncodedPair::from_sample(&simulate_visit(s, &gen, 0), &enc).unwrap())
            .collect();
        let labeled: Vec<LabeledTrace> = (0..4)
            .map(|i| LabeledTrace {
                label: i % 2,
                traffic: EncodedPair::from_sample(
                    &simulate_visit(&sites[i % 2], &gen, 10 + i as u64),
                    &enc,
                )
                .unwrap()
                .traffic,
            })
            .collect();
        let batch = Batch {
            cross: pairs.iter().collect(),
            labeled: labeled.iter().collect(),
        };
        let cfg = TrainConfig {
            tau: 0.5,
            lambda_sup: 1.0,
            lambda_cons: 0.5,
            ..TrainConfig::default()
        };
        let (_, grads) = combined_loss(&batch, &params, &cfg).unwrap();
        let h = 1e-4;
        let mut report = Report {
            checked: 0,
            worst: 0.0,
            worst_at: String::new(),
        };
        for ti in 0..params.store.tensors.len() {
            let len = params.store.tensors[ti].data.len();
            let picks: Vec<usize> = if len <= per_tensor {
                (0..len).collect()
            } else {
                (0..per_tensor).map(|_| rng.random_range(0..len)).collect()
            };
            for k in picks {
                let orig = params.store.tensors[ti].data[k];
                params.store.tensors[ti].data[k] = orig + h;
                let up = combined_loss(&batch, &params, &cfg).unwrap().0.total;
                params.store.tensors[ti].data[k] = orig - h;
                let down = combined_loss(&batch, &params, &cfg).unwrap().0.total;
                params.store.tensors[ti].data[k] = orig;
                let num = (up - down) / (2.0 * h);
                let e = rel_err(grads[ti].data[k], num);
                report.checked += 1;
                if e > report.worst {
                    report.worst = e;
                    report.worst_at = format!(
                        "{}[{k}] analytic {:e} numeric {:e}",
                        params.store.names[ti], grads[ti].data[k], num
                    );
                }
            }
        }
        report
    }
}

pub fn random_unit(rng: &mut impl rand::Rng, d: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-3 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

/// Tip-Adapter logits written out term by term.
pub fn tip_logits_oracle(
    anchors: &[Vec<f64>],
    keys: &[Vec<f64>],
    key_pos: &[usize],
    alpha: f64,
    beta: f64,
    z: &[f64],
) -> Vec<f64> {
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
    (0..anchors.len())
        .map(|c| {
            let cache: f64 = keys
                .iter()
                .zip(key_pos)
                .filter(|(_, &p)| p == c)
                .map(|(k, _)| (-beta * (1.0 - dot(z, k))).exp())
                .sum();
            dot(z, &anchors[c]) + alpha * cache
        })
        .collect()
}

/// ROC AUC as the Mann-Whitney statistic with ties counted as half.
pub fn auc_pairs(pos: &[f64], neg: &[f64]) -> f64 {
    let mut s = 0.0;
    for &p in pos {
        for &n in neg {
            s += if p > n {
                1.0
            } else if p == n {
                0.5
            } else {
                0.0
            };
        }
    }
    s / (pos.len() * neg.len()) as f64
}
