//! Composite batches, the combined objective and the training loop.

use std::collections::{BTreeMap, HashSet};

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::encoders::{logic_forward, traffic_forward};
use super::losses::{consistency_with_grad, info_nce_with_grad, supcon_with_grad};
use super::params::ModelParams;
use super::tape::Tape;
use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::model::{
    encode_logic, encode_traffic, EncodingParams, LogicMatrix, PairedSample, TrafficMatrix,
    TrafficTrace,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub tau: f64,
    pub lambda_sup: f64,
    pub lambda_cons: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub lr: f64,
    /// Learning rate at the last step as a fraction of `lr`, reached by
    /// cosine decay; `1.0` keeps it constant.
    pub lr_min_frac: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// Relative share of cross-modal, augmented and labeled samples per
    /// batch.
    pub mix_ratio: [f64; 3],
    pub rng_seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            tau: 0.07,
            lambda_sup: 1.0,
            lambda_cons: 0.1,
            batch_size: 32,
            epochs: 20,
            lr: 1e-3,
            lr_min_frac: 0.1,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            mix_ratio: [10.0, 3.0, 3.0],
            rng_seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return bad("tau must be positive");
        }
        if self.lambda_sup < 0.0 || self.lambda_cons < 0.0 {
            return bad("loss weights must be non-negative");
        }
        if self.mix_ratio.iter().any(|&r| r < 0.0 || !r.is_finite())
            || self.mix_ratio.iter().sum::<f64>() <= 0.0
        {
            return bad("mix_ratio components must be non-negative and not all zero");
        }
        if self.batch_size < 2 {
            return bad("batch_size must be at least 2");
        }
        if !(0.0..=1.0).contains(&self.lr_min_frac) {
            return bad("lr_min_frac must lie in [0, 1]");
        }
        if !(self.lr > 0.0)
            || !(0.0..1.0).contains(&self.beta1)
            || !(0.0..1.0).contains(&self.beta2)
        {
            return bad("optimizer constants out of range");
        }
        Ok(())
    }

    /// Per-batch counts of cross-modal, augmented and labeled samples. The
    /// labeled count is even so every sampled class has a partner, and
    /// covers at least two classes so the supervised term has negatives.
    pub fn sub_batch_sizes(&self) -> (usize, usize, usize) {
        let s: f64 = self.mix_ratio.iter().sum();
        let b = self.batch_size as f64;
        let share = |r: f64| (b * r / s).round() as usize;
        let n_c = share(self.mix_ratio[0]).max(1);
        let n_a = share(self.mix_ratio[1]);
        let mut n_l = share(self.mix_ratio[2]) / 2 * 2;
        if self.mix_ratio[2] > 0.0 && n_l < 4 {
            n_l = 4;
        }
        (n_c, n_a, n_l)
    }
}

/// A cross-modal pair in matrix form.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodedPair {
    pub site_id: String,
    pub traffic: TrafficMatrix,
    pub logic: LogicMatrix,
}

impl EncodedPair {
    pub fn from_sample(s: &PairedSample, enc: &EncodingParams) -> Result<Self> {
        Ok(EncodedPair {
            site_id: s.site_id.clone(),
            traffic: encode_traffic(&s.traffic, enc)?,
            logic: encode_logic(&s.logic, enc)?,
        })
    }
}

/// A traffic trace with its class.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledTrace {
    pub label: usize,
    pub traffic: TrafficMatrix,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainSet {
    pub crossmodal: Vec<EncodedPair>,
    pub augmented: Vec<EncodedPair>,
    pub labeled: Vec<LabeledTrace>,
}

impl TrainSet {
    pub fn from_samples(
        crossmodal: &[PairedSample],
        augmented: &[PairedSample],
        labeled: &[TrafficTrace],
        enc: &EncodingParams,
    ) -> Result<Self> {
        let pairs = |v: &[PairedSample]| {
            v.iter()
                .map(|s| EncodedPair::from_sample(s, enc))
                .collect::<Result<Vec<_>>>()
        };
        let labeled = labeled
            .iter()
            .map(|t| {
                let label = t.label.ok_or_else(|| {
                    Error::Validation(format!("trace of {} has no label", t.site_id))
                })?;
                Ok(LabeledTrace {
                    label,
                    traffic: encode_traffic(t, enc)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(TrainSet {
            crossmodal: pairs(crossmodal)?,
            augmented: pairs(augmented)?,
            labeled,
        })
    }
}

/// One optimization step's inputs: cross-modal pairs from distinct sites
/// and labeled traffic.
#[derive(Debug, Clone, Default)]
pub struct Batch<'a> {
    pub cross: Vec<&'a EncodedPair>,
    pub labeled: Vec<&'a LabeledTrace>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub total: f64,
    pub info_nce: f64,
    pub supcon: f64,
    pub consistency: f64,
}

/// Combined objective and its gradient for every parameter, in storage
/// order.
pub fn combined_loss(
    batch: &Batch<'_>,
    params: &ModelParams,
    cfg: &TrainConfig,
) -> Result<(LossParts, Vec<Tensor>)> {
    if batch.cross.is_empty() {
        return Err(Error::Batch("cross-modal sub-batch is empty".into()));
    }
    let mut seen = HashSet::new();
    for p in &batch.cross {
        if !seen.insert(p.site_id.as_str()) {
            return Err(Error::Batch(format!(
                "site {} appears twice in the cross-modal sub-batch",
                p.site_id
            )));
        }
    }
    let store = &params.store;
    let mut t_tapes = Vec::with_capacity(batch.cross.len());
    let mut l_tapes = Vec::with_capacity(batch.cross.len());
    let (mut zt, mut zl) = (Vec::new(), Vec::new());
    for p in &batch.cross {
        let mut t = Tape::new(store);
        let (_, out) = traffic_forward(&mut t, params, &p.traffic)?;
        zt.push(t.value(out).data.clone());
        t_tapes.push((t, out));
        let mut l = Tape::new(store);
        let (_, out) = logic_forward(&mut l, params, &p.logic)?;
        zl.push(l.value(out).data.clone());
        l_tapes.push((l, out));
    }
    let (nce, gt, gl) = info_nce_with_grad(&zt, &zl, cfg.tau)?;
    let mut parts = LossParts {
        info_nce: nce,
        ..Default::default()
    };

    let use_labeled = !batch.labeled.is_empty() && (cfg.lambda_sup > 0.0 || cfg.lambda_cons > 0.0);
    let mut lab_tapes = Vec::new();
    let mut lab_grads: Vec<Vec<f64>> = Vec::new();
    if use_labeled {
        let mut zs = Vec::with_capacity(batch.labeled.len());
        let labels: Vec<usize> = batch.labeled.iter().map(|l| l.label).collect();
        for l in &batch.labeled {
            let mut t = Tape::new(store);
            let (_, out) = traffic_forward(&mut t, params, &l.traffic)?;
            zs.push(t.value(out).data.clone());
            lab_tapes.push((t, out));
        }
        lab_grads = zs.iter().map(|z| vec![0.0; z.len()]).collect();
        if cfg.lambda_sup > 0.0 {
            let (v, g) = supcon_with_grad(&zs, &labels, cfg.tau)?;
            parts.supcon = v;
            for (acc, gi) in lab_grads.iter_mut().zip(&g) {
                for (a, b) in acc.iter_mut().zip(gi) {
                    *a += cfg.lambda_sup * b;
                }
            }
        }
        if cfg.lambda_cons > 0.0 {
            let (v, g) = consistency_with_grad(&zs, &labels);
            parts.consistency = v;
            for (acc, gi) in lab_grads.iter_mut().zip(&g) {
                for (a, b) in acc.iter_mut().zip(gi) {
                    *a += cfg.lambda_cons * b;
                }
            }
        }
    }
    parts.total =
        parts.info_nce + cfg.lambda_sup * parts.supcon + cfg.lambda_cons * parts.consistency;

    let mut grads = store.zeros_like();
    let seed = |g: &Vec<f64>| Tensor::from_vec(1, g.len(), g.clone());
    for ((t, out), g) in t_tapes.iter().zip(&gt) {
        t.backward(*out, seed(g), &mut grads);
    }
    for ((t, out), g) in l_tapes.iter().zip(&gl) {
        t.backward(*out, seed(g), &mut grads);
    }
    for ((t, out), g) in lab_tapes.iter().zip(&lab_grads) {
        t.backward(*out, seed(g), &mut grads);
    }
    Ok((parts, grads))
}

/// Adaptive-moment optimizer state.
#[derive(Debug, Clone)]
pub struct Adam {
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    t: i32,
}

impl Adam {
    pub fn new(params: &ModelParams) -> Self {
        Adam {
            m: params.store.zeros_like(),
            v: params.store.zeros_like(),
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut ModelParams, grads: &[Tensor], lr: f64, cfg: &TrainConfig) {
        self.t += 1;
        let bc1 = 1.0 - cfg.beta1.powi(self.t);
        let bc2 = 1.0 - cfg.beta2.powi(self.t);
        for (i, p) in params.store.tensors.iter_mut().enumerate() {
            let (m, v, g) = (&mut self.m[i].data, &mut self.v[i].data, &grads[i].data);
            for k in 0..p.data.len() {
                m[k] = cfg.beta1 * m[k] + (1.0 - cfg.beta1) * g[k];
                v[k] = cfg.beta2 * v[k] + (1.0 - cfg.beta2) * g[k] * g[k];
                let mh = m[k] / bc1;
                let vh = v[k] / bc2;
                p.data[k] -= lr * mh / (vh.sqrt() + cfg.adam_eps);
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub steps: usize,
    pub mean: LossParts,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: ModelParams,
    pub history: Vec<EpochStats>,
}

/// Cross-modal batches for one epoch: a shuffled pass over `pairs`, each
/// batch holding at most `size` pairs from distinct sites.
fn epoch_batches(pairs: &[EncodedPair], size: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let mut pending: Vec<usize> = (0..pairs.len()).collect();
    pending.shuffle(rng);
    let mut out = Vec::new();
    while !pending.is_empty() {
        let mut sites = HashSet::new();
        let mut batch = Vec::with_capacity(size);
        let mut rest = Vec::with_capacity(pending.len());
        for &i in &pending {
            if batch.len() < size && sites.insert(pairs[i].site_id.as_str()) {
                batch.push(i);
            } else {
                rest.push(i);
            }
        }
        out.push(batch);
        pending = rest;
    }
    out
}

fn pick_augmented<'a>(
    pool: &'a [EncodedPair],
    taken: &mut HashSet<&'a str>,
    n: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<&'a EncodedPair> {
    let mut out = Vec::with_capacity(n);
    if pool.is_empty() {
        return out;
    }
    for _ in 0..n * 8 {
        if out.len() == n {
            break;
        }
        let p = &pool[rng.random_range(0..pool.len())];
        if taken.insert(p.site_id.as_str()) {
            out.push(p);
        }
    }
    out
}

fn pick_labeled<'a>(
    classes: &BTreeMap<usize, Vec<&'a LabeledTrace>>,
    keys: &[usize],
    n: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<&'a LabeledTrace> {
    let mut out = Vec::with_capacity(n);
    for &c in keys.choose_multiple(rng, n / 2) {
        out.extend(classes[&c].choose_multiple(rng, 2).copied());
    }
    out
}

/// Mini-batch training of both encoders on the combined objective.
///
/// Each step draws cross-modal pairs (one pass over `data.crossmodal` per
/// epoch), augmented pairs from sites not already in the step, and pairs
/// of same-class labeled traces, in the configured ratio.
pub fn train(mut params: ModelParams, data: &TrainSet, cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    if data.crossmodal.is_empty() {
        return Err(Error::EmptyInput("no cross-modal training pairs"));
    }
    let (n_c, n_a, n_l) = cfg.sub_batch_sizes();
    let mut classes: BTreeMap<usize, Vec<&LabeledTrace>> = BTreeMap::new();
    for l in &data.labeled {
        classes.entry(l.label).or_default().push(l);
    }
    classes.retain(|_, v| v.len() >= 2);
    let class_keys: Vec<usize> = classes.keys().copied().collect();

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.rng_seed);
    let mut adam = Adam::new(&params);
    let mut history = Vec::with_capacity(cfg.epochs);
    let planned = (cfg.epochs * data.crossmodal.len().div_ceil(n_c)).max(1) as f64;
    let mut global_step = 0usize;
    for epoch in 0..cfg.epochs {
        let mut sum = LossParts::default();
        let batches = epoch_batches(&data.crossmodal, n_c, &mut rng);
        let mut steps = 0;
        for (step, idx) in batches.iter().enumerate() {
            let mut cross: Vec<&EncodedPair> = idx.iter().map(|&i| &data.crossmodal[i]).collect();
            let mut taken: HashSet<&str> = cross.iter().map(|p| p.site_id.as_str()).collect();
            cross.extend(pick_augmented(&data.augmented, &mut taken, n_a, &mut rng));
            if cross.len() < 2 {
                continue;
            }
            let labeled = pick_labeled(&classes, &class_keys, n_l, &mut rng);
            let batch = Batch { cross, labeled };
            let (parts, grads) = combined_loss(&batch, &params, cfg)?;
            if !parts.total.is_finite() || !grads.iter().all(Tensor::is_finite) {
                return Err(Error::Diverged {
                    epoch,
                    step,
                    last_finite: Box::new(params),
                });
            }
            let before = params.clone();
            let progress = (global_step as f64 / planned).min(1.0);
            let decay = 0.5 * (1.0 + (std::f64::consts::PI * progress).cos());
            let lr = cfg.lr * (cfg.lr_min_frac + (1.0 - cfg.lr_min_frac) * decay);
            adam.step(&mut params, &grads, lr, cfg);
            global_step += 1;
            if !params.store.is_finite() {
                return Err(Error::Diverged {
                    epoch,
                    step,
                    last_finite: Box::new(before),
                });
            }
            sum.total += parts.total;
            sum.info_nce += parts.info_nce;
            sum.supcon += parts.supcon;
            sum.consistency += parts.consistency;
            steps += 1;
        }
        let k = steps.max(1) as f64;
        let mean = LossParts {
            total: sum.total / k,
            info_nce: sum.info_nce / k,
            supcon: sum.supcon / k,
            consistency: sum.consistency / k,
        };
        log::info!(
            "epoch {epoch}: loss {:.4} (nce {:.4}, supcon {:.4}, cons {:.4}) over {steps} steps",
            mean.total,
            mean.info_nce,
            mean.supcon,
            mean.consistency
        );
        history.push(EpochStats { epoch, steps, mean });
    }
    Ok(TrainOutcome { params, history })
}
