//! End-to-end runs: site-disjoint synthetic splits, training-set assembly
//! and the closed-world, open-world and few-shot evaluations.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::augment::augment_corpus;
use crate::dataset::RunConfig;
use crate::error::{Error, Result};
use crate::model::{
    encode_logic, encode_traffic, EncodingParams, LogicMatrix, PairedSample, TrafficMatrix,
};
use crate::neural::{embed_traffic_batch, ModelParams, TrainSet};
use crate::retrieval::{
    build_gallery, linear_probe_fit, open_world_eval, tip_adapter_predict,
    topk_accuracy_embeddings, FewShotMemory, Gallery, OpenWorldReport,
};
use crate::synth::{gen_sites, simulate_visits, GenConfig, SiteSpec};

/// Site-disjoint train, test and unmonitored samples.
#[derive(Debug, Clone, PartialEq)]
pub struct Split {
    pub train: Vec<PairedSample>,
    pub test: Vec<PairedSample>,
    pub unmonitored: Vec<PairedSample>,
}

/// Number of sites in each part of a split of `n` sites.
pub fn split_counts(
    n: usize,
    test_fraction: f64,
    unmonitored_fraction: f64,
) -> Result<(usize, usize, usize)> {
    if !(0.0..=1.0).contains(&test_fraction)
        || !(0.0..=1.0).contains(&unmonitored_fraction)
        || test_fraction + unmonitored_fraction > 1.0
    {
        return Err(Error::Config(
            "split fractions must lie in [0, 1] and sum to at most 1".into(),
        ));
    }
    let test = (n as f64 * test_fraction).round() as usize;
    let unmon = ((n as f64 * unmonitored_fraction).round() as usize).min(n - test);
    Ok((n - test - unmon, test, unmon))
}

fn relabel(mut samples: Vec<PairedSample>, labeled: bool) -> Vec<PairedSample> {
    for s in &mut samples {
        if !labeled {
            s.traffic.label = None;
        }
    }
    samples
}

/// Generates sites and splits them: the first part trains, the next is
/// evaluated as monitored, the rest serves as unmonitored. Labels are
/// positions within each part.
pub fn synth_split(cfg: &RunConfig) -> Result<(Split, Vec<SiteSpec>)> {
    let sites = gen_sites(&cfg.synth)?;
    let (n_train, n_test, _) = split_counts(
        sites.len(),
        cfg.split.test_fraction,
        cfg.split.unmonitored_fraction,
    )?;
    let v = cfg.synth.visits_per_site;
    let train = simulate_visits(&sites[..n_train], &cfg.synth, 0, v);
    let test = simulate_visits(&sites[n_train..n_train + n_test], &cfg.synth, 0, v);
    let unmonitored = relabel(
        simulate_visits(&sites[n_train + n_test..], &cfg.synth, 0, v),
        false,
    );
    Ok((
        Split {
            train,
            test,
            unmonitored,
        },
        sites,
    ))
}

/// Training set from cross-modal pairs: augmented copies are generated
/// when the mix uses them, and labeled traces are the pairs' traffic.
pub fn build_train_set(
    train: &[PairedSample],
    augmented: Option<&[PairedSample]>,
    cfg: &RunConfig,
) -> Result<TrainSet> {
    let generated;
    let aug: &[PairedSample] = match augmented {
        Some(a) => a,
        None if cfg.train.mix_ratio[1] > 0.0 => {
            generated = augment_corpus(train, &cfg.augment, cfg.augment_copies);
            &generated
        }
        None => &[],
    };
    let labeled: Vec<_> = if cfg.train.mix_ratio[2] > 0.0 {
        train
            .iter()
            .filter(|s| s.traffic.label.is_some())
            .map(|s| s.traffic.clone())
            .collect()
    } else {
        Vec::new()
    };
    TrainSet::from_samples(train, aug, &labeled, &cfg.encoding)
}

/// One logic matrix per class: the first sample seen for each label.
pub fn gallery_inputs(
    samples: &[PairedSample],
    enc: &EncodingParams,
) -> Result<Vec<(usize, LogicMatrix)>> {
    let mut seen = BTreeMap::new();
    let mut out = Vec::new();
    for s in samples {
        let label = s
            .traffic
            .label
            .ok_or_else(|| Error::Validation(format!("sample of {} has no label", s.site_id)))?;
        if seen.insert(label, ()).is_none() {
            out.push((label, encode_logic(&s.logic, enc)?));
        }
    }
    Ok(out)
}

fn labeled_queries(
    samples: &[PairedSample],
    enc: &EncodingParams,
) -> Result<(Vec<TrafficMatrix>, Vec<usize>)> {
    let mut mats = Vec::with_capacity(samples.len());
    let mut labels = Vec::with_capacity(samples.len());
    for s in samples {
        labels.push(
            s.traffic.label.ok_or_else(|| {
                Error::Validation(format!("sample of {} has no label", s.site_id))
            })?,
        );
        mats.push(encode_traffic(&s.traffic, enc)?);
    }
    Ok((mats, labels))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClosedWorld {
    pub top1: f64,
    pub top5: f64,
    pub classes: usize,
    pub queries: usize,
}

/// Zero-shot top-1/top-5 of `queries` against a gallery built from the
/// logic of `gallery_from`.
pub fn eval_closed(
    params: &ModelParams,
    gallery: &Gallery,
    queries: &[PairedSample],
    enc: &EncodingParams,
    threads: usize,
) -> Result<ClosedWorld> {
    let (mats, labels) = labeled_queries(queries, enc)?;
    let zs = embed_traffic_batch(params, &mats, threads)?;
    Ok(ClosedWorld {
        top1: topk_accuracy_embeddings(gallery, &zs, &labels, 1)?,
        top5: topk_accuracy_embeddings(gallery, &zs, &labels, 5)?,
        classes: gallery.len(),
        queries: zs.len(),
    })
}

pub fn make_gallery(
    params: &ModelParams,
    samples: &[PairedSample],
    enc: &EncodingParams,
    threads: usize,
) -> Result<Gallery> {
    build_gallery(params, &gallery_inputs(samples, enc)?, threads)
}

fn max_scores(
    params: &ModelParams,
    gallery: &Gallery,
    samples: &[PairedSample],
    enc: &EncodingParams,
    threads: usize,
) -> Result<Vec<f64>> {
    let mats = samples
        .iter()
        .map(|s| encode_traffic(&s.traffic, enc))
        .collect::<Result<Vec<_>>>()?;
    let zs = embed_traffic_batch(params, &mats, threads)?;
    Ok(zs
        .iter()
        .map(|z| {
            gallery
                .similarities(z)
                .into_iter()
                .fold(f64::NEG_INFINITY, f64::max)
        })
        .collect())
}

/// Monitored-vs-unmonitored detection using the best gallery similarity.
pub fn eval_open(
    params: &ModelParams,
    gallery: &Gallery,
    monitored: &[PairedSample],
    unmonitored: &[PairedSample],
    enc: &EncodingParams,
    threads: usize,
) -> Result<OpenWorldReport> {
    let m = max_scores(params, gallery, monitored, enc, threads)?;
    let u = max_scores(params, gallery, unmonitored, enc, threads)?;
    open_world_eval(&m, &u)
}

/// First `n` samples of each class in `pool`; errors if a class has fewer.
pub fn take_shots(pool: &[PairedSample], n: usize) -> Result<Vec<PairedSample>> {
    let mut per: BTreeMap<usize, usize> = BTreeMap::new();
    let mut out = Vec::new();
    for s in pool {
        let l = s
            .traffic
            .label
            .ok_or_else(|| Error::Validation(format!("sample of {} has no label", s.site_id)))?;
        let c = per.entry(l).or_default();
        if *c < n {
            *c += 1;
            out.push(s.clone());
        }
    }
    if let Some((l, c)) = per.iter().find(|(_, &c)| c < n) {
        return Err(Error::Config(format!(
            "class {l} has only {c} of the {n} requested shots"
        )));
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FewShot {
    pub shots: usize,
    pub zero_shot_top1: f64,
    pub tip_top1: f64,
    pub probe_top1: f64,
    pub support: usize,
    pub queries: usize,
}

/// Zero-shot, Tip-Adapter and linear-probe top-1 on the same queries, with
/// `support` as the labeled few-shot traces.
pub fn eval_fewshot(
    params: &ModelParams,
    gallery: &Gallery,
    support: &[PairedSample],
    queries: &[PairedSample],
    cfg: &RunConfig,
    threads: usize,
) -> Result<FewShot> {
    let enc = &cfg.encoding;
    let (smats, slabels) = labeled_queries(support, enc)?;
    let (qmats, qlabels) = labeled_queries(queries, enc)?;
    let sz = embed_traffic_batch(params, &smats, threads)?;
    let qz = embed_traffic_batch(params, &qmats, threads)?;
    let per_class = {
        let mut m: BTreeMap<usize, usize> = BTreeMap::new();
        for &l in &slabels {
            *m.entry(l).or_default() += 1;
        }
        m.values().copied().max().unwrap_or(0)
    };
    let memory = FewShotMemory::new(
        gallery,
        sz.clone(),
        &slabels,
        cfg.eval.tip_alpha,
        cfg.eval.tip_beta,
    )?;
    let probe = linear_probe_fit(&sz, &slabels, &gallery.class_ids, &cfg.eval.probe)?;
    let n = qz.len() as f64;
    let tip = qz
        .iter()
        .zip(&qlabels)
        .filter(|(z, &l)| tip_adapter_predict(gallery, &memory, z) == l)
        .count() as f64
        / n;
    let lin = qz
        .iter()
        .zip(&qlabels)
        .filter(|(z, &l)| probe.predict(z) == l)
        .count() as f64
        / n;
    Ok(FewShot {
        shots: per_class,
        zero_shot_top1: topk_accuracy_embeddings(gallery, &qz, &qlabels, 1)?,
        tip_top1: tip,
        probe_top1: lin,
        support: sz.len(),
        queries: qz.len(),
    })
}

/// Generator settings with the moderate noise used for benchmarks.
pub fn benchmark_gen(n_sites: usize, visits_per_site: usize, seed: u64) -> GenConfig {
    GenConfig {
        n_sites,
        visits_per_site,
        rng_seed: seed,
        ..GenConfig::default()
    }
}
