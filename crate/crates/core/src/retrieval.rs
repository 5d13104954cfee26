//! Gallery retrieval, few-shot heads and embedding-space metrics.

use std::collections::{BTreeMap, HashSet};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{LogicMatrix, TrafficMatrix};
use crate::neural::checkpoint::{params_digest, sha256_hex};
use crate::neural::tensor::dot;
use crate::neural::{embed_logic_batch, embed_traffic_batch, ModelParams};

/// One unit-norm logic embedding per class.
#[derive(Debug, Clone, PartialEq)]
pub struct Gallery {
    pub anchors: Vec<Vec<f64>>,
    pub class_ids: Vec<usize>,
    /// Digest of the parameters that produced the anchors.
    pub model_sha256: String,
}

impl Gallery {
    pub fn from_embeddings(
        anchors: Vec<Vec<f64>>,
        class_ids: Vec<usize>,
        model_sha256: String,
    ) -> Result<Self> {
        if anchors.len() != class_ids.len() {
            return Err(Error::Validation(
                "one class id per anchor is required".into(),
            ));
        }
        let mut seen = HashSet::new();
        for &c in &class_ids {
            if !seen.insert(c) {
                return Err(Error::DuplicateClass(c));
            }
        }
        Ok(Gallery {
            anchors,
            class_ids,
            model_sha256,
        })
    }

    pub fn len(&self) -> usize {
        self.anchors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.anchors.is_empty()
    }

    /// Cosine similarity to every anchor (inputs are unit norm).
    pub fn similarities(&self, z: &[f64]) -> Vec<f64> {
        self.anchors.iter().map(|a| dot(a, z)).collect()
    }

    /// Anchor positions by decreasing similarity; ties keep the lower
    /// position first.
    pub fn ranking(&self, z: &[f64]) -> Vec<usize> {
        rank(&self.similarities(z))
    }

    pub fn position(&self, class: usize) -> Option<usize> {
        self.class_ids.iter().position(|&c| c == class)
    }
}

fn rank(scores: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    idx
}

fn argmax(scores: &[f64]) -> usize {
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate() {
        if s > scores[best] {
            best = i;
        }
    }
    best
}

/// Embeds one logic profile per class.
pub fn build_gallery(
    params: &ModelParams,
    profiles: &[(usize, LogicMatrix)],
    threads: usize,
) -> Result<Gallery> {
    let mats: Vec<LogicMatrix> = profiles.iter().map(|p| p.1.clone()).collect();
    let ids: Vec<usize> = profiles.iter().map(|p| p.0).collect();
    let mut seen = HashSet::new();
    for &c in &ids {
        if !seen.insert(c) {
            return Err(Error::DuplicateClass(c));
        }
    }
    let anchors = embed_logic_batch(params, &mats, threads)?;
    Gallery::from_embeddings(anchors, ids, params_digest(params))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Prediction {
    Class { class: usize, score: f64 },
    Unknown { score: f64 },
}

impl Prediction {
    pub fn class(&self) -> Option<usize> {
        match self {
            Prediction::Class { class, .. } => Some(*class),
            Prediction::Unknown { .. } => None,
        }
    }

    pub fn score(&self) -> f64 {
        match self {
            Prediction::Class { score, .. } | Prediction::Unknown { score } => *score,
        }
    }
}

/// Nearest anchor if its similarity reaches `threshold`, otherwise Unknown.
/// Ties go to the lowest anchor position.
pub fn classify_embedding(gallery: &Gallery, z: &[f64], threshold: f64) -> Result<Prediction> {
    if gallery.is_empty() {
        return Err(Error::EmptyInput("gallery has no anchors"));
    }
    let sims = gallery.similarities(z);
    let best = argmax(&sims);
    let score = sims[best];
    Ok(if score >= threshold {
        Prediction::Class {
            class: gallery.class_ids[best],
            score,
        }
    } else {
        Prediction::Unknown { score }
    })
}

pub fn classify_zero_shot(
    params: &ModelParams,
    gallery: &Gallery,
    trace: &TrafficMatrix,
    threshold: f64,
) -> Result<Prediction> {
    let z = crate::neural::encode_traffic_embed(params, trace)?;
    classify_embedding(gallery, &z, threshold)
}

/// Share of embeddings whose true class is among the `k` most similar
/// anchors.
pub fn topk_accuracy_embeddings(
    gallery: &Gallery,
    zs: &[Vec<f64>],
    labels: &[usize],
    k: usize,
) -> Result<f64> {
    if zs.is_empty() || zs.len() != labels.len() {
        return Err(Error::Validation("need one label per embedding".into()));
    }
    let mut hits = 0;
    for (z, &label) in zs.iter().zip(labels) {
        let pos = gallery
            .position(label)
            .ok_or_else(|| Error::Validation(format!("class {label} is not in the gallery")))?;
        if gallery.ranking(z).iter().take(k).any(|&i| i == pos) {
            hits += 1;
        }
    }
    Ok(hits as f64 / zs.len() as f64)
}

pub fn topk_accuracy(
    params: &ModelParams,
    gallery: &Gallery,
    traces: &[(usize, TrafficMatrix)],
    k: usize,
    threads: usize,
) -> Result<f64> {
    let mats: Vec<TrafficMatrix> = traces.iter().map(|t| t.1.clone()).collect();
    let labels: Vec<usize> = traces.iter().map(|t| t.0).collect();
    let zs = embed_traffic_batch(params, &mats, threads)?;
    topk_accuracy_embeddings(gallery, &zs, &labels, k)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrPoint {
    pub threshold: f64,
    pub precision: f64,
    pub recall: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OpenWorldReport {
    pub auc: f64,
    pub best_f1: f64,
    pub best_threshold: f64,
    pub pr_curve: Vec<PrPoint>,
}

/// Monitored-vs-unmonitored detection from max-similarity scores.
///
/// Thresholds sweep every distinct score from high to low; a sample is
/// flagged as monitored when its score is at least the threshold. The ROC
/// curve steps through tied scores as one group, so the trapezoid area
/// counts ties as half.
pub fn open_world_eval(monitored: &[f64], unmonitored: &[f64]) -> Result<OpenWorldReport> {
    if monitored.is_empty() || unmonitored.is_empty() {
        return Err(Error::EmptyInput(
            "open-world evaluation needs both score sets",
        ));
    }
    let mut all: Vec<(f64, bool)> = monitored
        .iter()
        .map(|&s| (s, true))
        .chain(unmonitored.iter().map(|&s| (s, false)))
        .collect();
    all.sort_by(|a, b| b.0.total_cmp(&a.0));
    let (p, n) = (monitored.len() as f64, unmonitored.len() as f64);
    let (mut tp, mut fp) = (0.0, 0.0);
    let (mut prev_tpr, mut prev_fpr) = (0.0, 0.0);
    let mut auc = 0.0;
    let mut curve = Vec::new();
    let (mut best_f1, mut best_threshold) = (0.0, all[0].0);
    let mut i = 0;
    while i < all.len() {
        let s = all[i].0;
        while i < all.len() && all[i].0 == s {
            if all[i].1 {
                tp += 1.0;
            } else {
                fp += 1.0;
            }
            i += 1;
        }
        let (tpr, fpr) = (tp / p, fp / n);
        auc += (fpr - prev_fpr) * (tpr + prev_tpr) / 2.0;
        prev_tpr = tpr;
        prev_fpr = fpr;
        let precision = tp / (tp + fp);
        let recall = tp / p;
        curve.push(PrPoint {
            threshold: s,
            precision,
            recall,
        });
        let f1 = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        if f1 > best_f1 {
            best_f1 = f1;
            best_threshold = s;
        }
    }
    Ok(OpenWorldReport {
        auc,
        best_f1,
        best_threshold,
        pr_curve: curve,
    })
}

impl OpenWorldReport {
    pub fn pr_csv(&self) -> String {
        let mut out = String::from("threshold,precision,recall\n");
        for p in &self.pr_curve {
            let _ = writeln!(out, "{},{},{}", p.threshold, p.precision, p.recall);
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProbeConfig {
    pub epochs: usize,
    pub lr: f64,
    pub l2: f64,
    pub rng_seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            epochs: 300,
            lr: 0.5,
            l2: 1e-4,
            rng_seed: 0,
        }
    }
}

/// Multinomial logistic regression over embeddings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearProbe {
    pub classes: Vec<usize>,
    /// `K × d`
    pub weights: Vec<Vec<f64>>,
    pub bias: Vec<f64>,
}

impl LinearProbe {
    pub fn logits(&self, z: &[f64]) -> Vec<f64> {
        self.weights
            .iter()
            .zip(&self.bias)
            .map(|(w, b)| dot(w, z) + b)
            .collect()
    }

    pub fn predict(&self, z: &[f64]) -> usize {
        self.classes[argmax(&self.logits(z))]
    }
}

/// Fits a probe by full-batch gradient descent on the mean cross-entropy.
///
/// Weights start from each class's mean embedding scaled by `1/τ₀` with
/// `τ₀ = 0.1`, so the probe begins at nearest-class-mean and the fit is
/// fully determined by its inputs.
pub fn linear_probe_fit(
    zs: &[Vec<f64>],
    labels: &[usize],
    classes: &[usize],
    cfg: &ProbeConfig,
) -> Result<LinearProbe> {
    if zs.is_empty() || zs.len() != labels.len() {
        return Err(Error::Validation("need one label per embedding".into()));
    }
    let pos: BTreeMap<usize, usize> = classes.iter().enumerate().map(|(i, &c)| (c, i)).collect();
    if pos.len() != classes.len() {
        return Err(Error::Config("probe classes must be distinct".into()));
    }
    let d = zs[0].len();
    let k = classes.len();
    let mut counts = vec![0usize; k];
    let mut weights = vec![vec![0.0; d]; k];
    let mut targets = Vec::with_capacity(labels.len());
    for (z, l) in zs.iter().zip(labels) {
        let &c = pos
            .get(l)
            .ok_or_else(|| Error::Config(format!("label {l} is not a probe class")))?;
        counts[c] += 1;
        for (w, x) in weights[c].iter_mut().zip(z) {
            *w += x;
        }
        targets.push(c);
    }
    if let Some(missing) = counts.iter().position(|&n| n == 0) {
        return Err(Error::Config(format!(
            "class {} has no examples",
            classes[missing]
        )));
    }
    for (w, &n) in weights.iter_mut().zip(&counts) {
        for x in w.iter_mut() {
            *x /= n as f64 * 0.1;
        }
    }
    let mut bias = vec![0.0; k];
    let m = zs.len() as f64;
    for _ in 0..cfg.epochs {
        let mut gw = vec![vec![0.0; d]; k];
        let mut gb = vec![0.0; k];
        for (z, &t) in zs.iter().zip(&targets) {
            let logits: Vec<f64> = weights
                .iter()
                .zip(&bias)
                .map(|(w, b)| dot(w, z) + b)
                .collect();
            let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = logits.iter().map(|l| (l - mx).exp()).collect();
            let s: f64 = exps.iter().sum();
            for c in 0..k {
                let g = (exps[c] / s - if c == t { 1.0 } else { 0.0 }) / m;
                gb[c] += g;
                for (o, x) in gw[c].iter_mut().zip(z) {
                    *o += g * x;
                }
            }
        }
        for c in 0..k {
            for (w, g) in weights[c].iter_mut().zip(&gw[c]) {
                *w -= cfg.lr * (g + cfg.l2 * *w);
            }
            bias[c] -= cfg.lr * gb[c];
        }
    }
    Ok(LinearProbe {
        classes: classes.to_vec(),
        weights,
        bias,
    })
}

/// Cached few-shot traffic embeddings for the training-free adapter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FewShotMemory {
    pub keys: Vec<Vec<f64>>,
    /// Gallery position of each key's class.
    pub key_class: Vec<usize>,
    pub alpha: f64,
    pub beta: f64,
}

impl FewShotMemory {
    pub const DEFAULT_ALPHA: f64 = 1.0;
    pub const DEFAULT_BETA: f64 = 5.5;

    /// Builds memory from labeled embeddings; every class present must
    /// contribute the same number of keys.
    pub fn new(
        gallery: &Gallery,
        keys: Vec<Vec<f64>>,
        labels: &[usize],
        alpha: f64,
        beta: f64,
    ) -> Result<Self> {
        if keys.len() != labels.len() {
            return Err(Error::Validation("need one label per key".into()));
        }
        let mut per_class: BTreeMap<usize, usize> = BTreeMap::new();
        let mut key_class = Vec::with_capacity(labels.len());
        for &l in labels {
            let p = gallery
                .position(l)
                .ok_or_else(|| Error::Validation(format!("class {l} is not in the gallery")))?;
            *per_class.entry(p).or_default() += 1;
            key_class.push(p);
        }
        let counts: HashSet<usize> = per_class.values().copied().collect();
        if counts.len() > 1 {
            return Err(Error::Validation(
                "every class must contribute the same number of shots".into(),
            ));
        }
        Ok(FewShotMemory {
            keys,
            key_class,
            alpha,
            beta,
        })
    }

    pub fn empty() -> Self {
        FewShotMemory {
            keys: Vec::new(),
            key_class: Vec::new(),
            alpha: Self::DEFAULT_ALPHA,
            beta: Self::DEFAULT_BETA,
        }
    }
}

/// Gallery similarities plus `alpha` times exponential-kernel affinities
/// to the memory keys, summed per class.
pub fn tip_adapter_logits(gallery: &Gallery, memory: &FewShotMemory, z: &[f64]) -> Vec<f64> {
    let mut logits = gallery.similarities(z);
    for (key, &c) in memory.keys.iter().zip(&memory.key_class) {
        let affinity = (-memory.beta * (1.0 - dot(z, key))).exp();
        logits[c] += memory.alpha * affinity;
    }
    logits
}

pub fn tip_adapter_predict(gallery: &Gallery, memory: &FewShotMemory, z: &[f64]) -> usize {
    gallery.class_ids[argmax(&tip_adapter_logits(gallery, memory, z))]
}

/// Fisher discriminant ratio, or `Unbounded` when classes are separated
/// with no within-class spread.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "value", rename_all = "snake_case")]
pub enum FdrValue {
    Finite(f64),
    Unbounded,
}

pub const FDR_EPS: f64 = 1e-12;

/// `tr(S_B) / (tr(S_W) + ε)` after centring the embeddings and dividing
/// by their overall standard deviation. The single global scale keeps the
/// ratio invariant under rotations.
pub fn fdr(zs: &[Vec<f64>], labels: &[usize]) -> Result<FdrValue> {
    if zs.len() != labels.len() || zs.is_empty() {
        return Err(Error::Validation("need one label per embedding".into()));
    }
    let classes: BTreeMap<usize, Vec<usize>> =
        labels
            .iter()
            .enumerate()
            .fold(BTreeMap::new(), |mut m, (i, &l)| {
                m.entry(l).or_insert_with(Vec::new).push(i);
                m
            });
    if classes.len() < 2 {
        return Err(Error::DegenerateInput("fdr needs at least two classes"));
    }
    let n = zs.len() as f64;
    let d = zs[0].len();
    let mut mean = vec![0.0; d];
    for z in zs {
        for (m, x) in mean.iter_mut().zip(z) {
            *m += x / n;
        }
    }
    let total: f64 = zs
        .iter()
        .map(|z| {
            z.iter()
                .zip(&mean)
                .map(|(x, m)| (x - m).powi(2))
                .sum::<f64>()
        })
        .sum::<f64>()
        / (n * d as f64);
    let scale = if total > 0.0 { 1.0 / total.sqrt() } else { 1.0 };
    let std: Vec<Vec<f64>> = zs
        .iter()
        .map(|z| z.iter().zip(&mean).map(|(x, m)| (x - m) * scale).collect())
        .collect();
    let (mut sb, mut sw) = (0.0, 0.0);
    for members in classes.values() {
        let nc = members.len() as f64;
        let mut mu = vec![0.0; d];
        for &i in members {
            for (m, x) in mu.iter_mut().zip(&std[i]) {
                *m += x / nc;
            }
        }
        sb += nc * mu.iter().map(|x| x * x).sum::<f64>();
        for &i in members {
            sw += std[i]
                .iter()
                .zip(&mu)
                .map(|(x, m)| (x - m).powi(2))
                .sum::<f64>();
        }
    }
    if sw <= FDR_EPS && sb > 0.0 {
        return Ok(FdrValue::Unbounded);
    }
    Ok(FdrValue::Finite(sb / (sw + FDR_EPS)))
}

fn centred_distances(x: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let m = x.len();
    let mut a = vec![vec![0.0; m]; m];
    for i in 0..m {
        for j in i + 1..m {
            let d = x[i]
                .iter()
                .zip(&x[j])
                .map(|(p, q)| (p - q).powi(2))
                .sum::<f64>()
                .sqrt();
            a[i][j] = d;
            a[j][i] = d;
        }
    }
    let row: Vec<f64> = a.iter().map(|r| r.iter().sum::<f64>() / m as f64).collect();
    let grand = row.iter().sum::<f64>() / m as f64;
    for i in 0..m {
        for j in 0..m {
            a[i][j] += grand - row[i] - row[j];
        }
    }
    a
}

/// Sample distance correlation; zero when either side has no spread.
pub fn dcor(x: &[Vec<f64>], y: &[Vec<f64>]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::Validation(
            "dcor needs the same number of rows".into(),
        ));
    }
    if x.len() < 2 {
        return Err(Error::DegenerateInput("dcor needs at least two rows"));
    }
    let (a, b) = (centred_distances(x), centred_distances(y));
    let mean_prod = |p: &Vec<Vec<f64>>, q: &Vec<Vec<f64>>| {
        p.iter()
            .zip(q)
            .map(|(r, s)| r.iter().zip(s).map(|(u, v)| u * v).sum::<f64>())
            .sum::<f64>()
    };
    let (vxy, vx, vy) = (mean_prod(&a, &b), mean_prod(&a, &a), mean_prod(&b, &b));
    if vx <= 0.0 || vy <= 0.0 {
        return Ok(0.0);
    }
    Ok((vxy.max(0.0) / (vx * vy).sqrt()).sqrt().min(1.0))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GalleryManifest {
    pub format_version: u32,
    pub dim: usize,
    pub class_ids: Vec<usize>,
    pub model_sha256: String,
    pub blob: String,
    pub blob_sha256: String,
}

/// Writes the manifest at `path` and the anchors, little-endian `f64`, at
/// `path` with extension `bin`.
pub fn save_gallery(g: &Gallery, path: &Path) -> Result<()> {
    let mut bytes = Vec::new();
    for a in &g.anchors {
        for v in a {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    let blob = path.with_extension("bin");
    let manifest = GalleryManifest {
        format_version: 1,
        dim: g.anchors.first().map_or(0, Vec::len),
        class_ids: g.class_ids.clone(),
        model_sha256: g.model_sha256.clone(),
        blob: blob
            .file_name()
            .and_then(|s| s.to_str())
            .ok_or_else(|| Error::Validation("gallery path has no file name".into()))?
            .into(),
        blob_sha256: sha256_hex(&bytes),
    };
    fs::write(&blob, &bytes)?;
    fs::write(path, serde_json::to_string_pretty(&manifest)?)?;
    Ok(())
}

pub fn load_gallery(path: &Path) -> Result<Gallery> {
    let m: GalleryManifest = serde_json::from_str(&fs::read_to_string(path)?)?;
    if m.format_version != 1 {
        return Err(Error::Validation(format!(
            "unsupported gallery version {}",
            m.format_version
        )));
    }
    let bytes = fs::read(path.parent().unwrap_or(Path::new(".")).join(&m.blob))?;
    if sha256_hex(&bytes) != m.blob_sha256 {
        return Err(Error::Validation("gallery blob digest mismatch".into()));
    }
    if bytes.len() != m.dim * m.class_ids.len() * 8 {
        return Err(Error::Validation(
            "gallery blob size does not match manifest".into(),
        ));
    }
    let values: Vec<f64> = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect();
    let anchors = if m.dim == 0 {
        vec![Vec::new(); m.class_ids.len()]
    } else {
        values.chunks(m.dim).map(<[f64]>::to_vec).collect()
    };
    Gallery::from_embeddings(anchors, m.class_ids, m.model_sha256)
}
