//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion
//! and exits non-zero if any fails.

mod common;

use std::io::Write;
use std::time::Instant;

use common::gradcheck::check_draw;
use common::{dcor_triple, fdr_scatter, pearson_pairwise, random_unit, rel_close, w1_cdf};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use semalign::anchors::{aggregate_report, pearson, wasserstein1, AnchorOptions};
use semalign::augment::{augment_pair, ip_groups, AugConfig};
use semalign::dataset::RunConfig;
use semalign::experiment::{
    benchmark_gen, build_train_set, eval_closed, eval_fewshot, eval_open, make_gallery, take_shots,
    ClosedWorld, FewShot,
};
use semalign::huffman::huffman_encoded_len;
use semalign::neural::{consistency, info_nce, train, ModelParams};
use semalign::retrieval::{
    classify_embedding, dcor, fdr, tip_adapter_predict, FdrValue, FewShotMemory, Gallery,
    OpenWorldReport, FDR_EPS,
};
use semalign::synth::{gen_sites, simulate_visit, simulate_visits, GenConfig, NoiseConfig};
use semalign::{PairedSample, Result};

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Verdict {
    Verdict {
        pass,
        detail: detail.into(),
    }
}

fn threads() -> usize {
    std::thread::available_parallelism().map_or(1, |n| n.get())
}

fn huffman_oracle() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(0x4855_4646);
    let t0 = Instant::now();
    let mut mismatches = 0;
    for _ in 0..1000 {
        let n = rng.random_range(0..96);
        let s: Vec<u8> = (0..n).map(|_| rng.random_range(0u8..128)).collect();
        let mut out = Vec::new();
        httlib_huffman::encode(&s, &mut out).expect("encodable");
        mismatches += usize::from(huffman_encoded_len(&s) != out.len() as u64);
    }
    let secs = t0.elapsed().as_secs_f64();
    verdict(
        mismatches == 0 && secs < 1.0,
        format!("{mismatches} mismatches in 1000 strings, {secs:.2}s"),
    )
}

fn stat_kernels() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let t0 = Instant::now();
    let vals = |rng: &mut ChaCha8Rng, n: usize| -> Vec<f64> {
        (0..n).map(|_| rng.random_range(-10.0..10.0)).collect()
    };
    let mut bad = [0usize; 4];
    for _ in 0..100 {
        let n = rng.random_range(2..30);
        let x = vals(&mut rng, n);
        let y: Vec<f64> = x
            .iter()
            .map(|v| 0.5 * v + rng.random_range(-8.0..8.0))
            .collect();
        bad[0] += usize::from(!rel_close(
            pearson(&x, &y).unwrap(),
            pearson_pairwise(&x, &y),
            1e-8,
        ));

        let (n, m) = (rng.random_range(1..25), rng.random_range(1..25));
        let (a, b) = (vals(&mut rng, n), vals(&mut rng, m));
        bad[1] += usize::from(!rel_close(
            wasserstein1(&a, &b).unwrap(),
            w1_cdf(&a, &b),
            1e-8,
        ));

        let n = rng.random_range(3..15);
        let (p, q) = (rng.random_range(1..5), rng.random_range(1..5));
        let xs: Vec<Vec<f64>> = (0..n).map(|_| vals(&mut rng, p)).collect();
        let ys: Vec<Vec<f64>> = xs
            .iter()
            .map(|r| {
                (0..q)
                    .map(|k| r[k % p].sin() + rng.random_range(-1.0..1.0))
                    .collect()
            })
            .collect();
        bad[2] += usize::from(!rel_close(
            dcor(&xs, &ys).unwrap(),
            dcor_triple(&xs, &ys),
            1e-8,
        ));

        let (classes, per, d) = (
            rng.random_range(2..5),
            rng.random_range(2..6),
            rng.random_range(1..6),
        );
        let mut zs = Vec::new();
        let mut labels = Vec::new();
        for c in 0..classes {
            let mu = vals(&mut rng, d);
            for _ in 0..per {
                zs.push(
                    mu.iter()
                        .map(|m| m + rng.random_range(-3.0..3.0))
                        .collect::<Vec<_>>(),
                );
                labels.push(c);
            }
        }
        let ok = match (
            fdr(&zs, &labels).unwrap(),
            fdr_scatter(&zs, &labels, FDR_EPS),
        ) {
            (FdrValue::Finite(a), Some(b)) => rel_close(a, b, 1e-8),
            _ => false,
        };
        bad[3] += usize::from(!ok);
    }
    let secs = t0.elapsed().as_secs_f64();
    verdict(
        bad == [0; 4] && secs < 10.0,
        format!("mismatches pearson/w1/dcor/fdr {bad:?} over 100 instances each, {secs:.2}s"),
    )
}

fn anchor_soundness() -> Verdict {
    let t0 = Instant::now();
    let gen = GenConfig {
        n_sites: 50,
        visits_per_site: 1,
        dedicated_ip_per_resource: true,
        noise: NoiseConfig::zero(),
        ..GenConfig::default()
    };
    let sites = gen_sites(&gen).unwrap();
    let corpus: Vec<PairedSample> = sites.iter().map(|s| simulate_visit(s, &gen, 0)).collect();
    let opts = AnchorOptions::default();
    let report = aggregate_report(&corpus, &opts).unwrap();
    let exact_r = report.sites.iter().all(|s| s.request_r == Some(1.0));
    let resp_ok = report
        .sites
        .iter()
        .all(|s| s.response_score.is_some_and(|v| (v - 1.0).abs() <= 1e-9));
    let all_sig = report
        .sites
        .iter()
        .all(|s| s.request_p.is_some_and(|p| p < 0.05) && s.response_p.is_some_and(|p| p < 0.05));
    let proto = report.protocol.r.unwrap_or(f64::NAN);

    // Traffic of each site against the logic of the next one.
    let shuffled: Vec<PairedSample> = (0..corpus.len())
        .map(|i| {
            let other = &corpus[(i + 1) % corpus.len()];
            let mut logic = other.logic.clone();
            logic.site_id = corpus[i].site_id.clone();
            PairedSample {
                logic,
                traffic: corpus[i].traffic.clone(),
                site_id: corpus[i].site_id.clone(),
            }
        })
        .collect();
    let mism = aggregate_report(&shuffled, &opts).unwrap();
    let req_sig = mism
        .request
        .as_ref()
        .map_or(1.0, |s| s.significant_fraction);
    let resp_sig = mism
        .response
        .as_ref()
        .map_or(1.0, |s| s.significant_fraction);
    let secs = t0.elapsed().as_secs_f64();
    verdict(
        exact_r && resp_ok && all_sig && proto >= 0.99 && req_sig <= 0.10 && resp_sig <= 0.10 && secs < 60.0,
        format!(
            "request r=1 on all: {exact_r}, response 1±1e-9: {resp_ok}, all p<0.05: {all_sig}, protocol r {proto:.4}; \
             mismatched significant request {req_sig:.2} response {resp_sig:.2}; {secs:.1}s"
        ),
    )
}

fn augmentation_invariants() -> Verdict {
    use std::collections::BTreeSet;
    let t0 = Instant::now();
    let gen = GenConfig {
        n_sites: 40,
        max_ips_per_site: 6,
        ..GenConfig::default()
    };
    let sites = gen_sites(&gen).unwrap();
    let ips = |rs: &mut dyn Iterator<Item = &String>| -> BTreeSet<String> { rs.cloned().collect() };
    let mut violations = 0;
    for seed in 0..1000u64 {
        let orig = simulate_visit(&sites[seed as usize % sites.len()], &gen, seed);
        let cfg = AugConfig {
            rng_seed: seed,
            ..AugConfig::default()
        };
        let Ok(a) = augment_pair(&orig, &cfg) else {
            continue;
        };
        let before = ips(&mut orig.logic.resources.iter().map(|r| &r.server_ip));
        let expected: BTreeSet<String> = before.difference(&a.deleted_ips).cloned().collect();
        violations +=
            usize::from(ips(&mut a.pair.logic.resources.iter().map(|r| &r.server_ip)) != expected);
        violations +=
            usize::from(ips(&mut a.pair.traffic.packets.iter().map(|p| &p.server_ip)) != expected);
        let (g0, g1) = (ip_groups(&orig.logic), ip_groups(&a.pair.logic));
        violations += g1.iter().filter(|(ip, g)| g0[*ip].len() != g.len()).count();
        violations += usize::from(a.pair.logic.resources.is_empty());
        violations += usize::from(augment_pair(&orig, &cfg).unwrap().pair != a.pair);
    }

    let mut ips10 = vec!["solo"];
    ips10.extend(std::iter::repeat_n("bulk", 9));
    let pair = common::pair_on_ips(&ips10);
    let solo = (0..10_000u64)
        .filter(|&seed| {
            let cfg = AugConfig {
                clamp: [0.1, 0.1],
                rng_seed: seed,
                ..AugConfig::default()
            };
            augment_pair(&pair, &cfg)
                .unwrap()
                .deleted_ips
                .contains("solo")
        })
        .count() as f64
        / 10_000.0;
    let secs = t0.elapsed().as_secs_f64();
    verdict(
        violations == 0 && (solo - 0.9).abs() <= 0.02 && secs < 30.0,
        format!("{violations} violations; singleton deleted with frequency {solo:.4} (expected 0.9); {secs:.1}s"),
    )
}

fn gradients() -> Verdict {
    let t0 = Instant::now();
    let mut worst = 0.0f64;
    let mut checked = 0;
    for draw in 0..20 {
        let r = check_draw(draw, 6);
        worst = worst.max(r.worst);
        checked += r.checked;
    }
    let secs = t0.elapsed().as_secs_f64();
    verdict(
        worst < 1e-4 && secs < 120.0,
        format!(
            "worst relative error {worst:.2e} over {checked} coordinates in 20 draws, {secs:.1}s"
        ),
    )
}

fn loss_identities() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let a = random_unit(&mut rng, 8);
    let b = random_unit(&mut rng, 8);
    let single = info_nce(std::slice::from_ref(&a), std::slice::from_ref(&b), 0.07).unwrap();

    let n = 5;
    let basis: Vec<Vec<f64>> = (0..n)
        .map(|i| (0..8).map(|k| f64::from(u8::from(k == i))).collect())
        .collect();
    let other: Vec<Vec<f64>> = (0..n)
        .map(|i| {
            (0..8)
                .map(|k| f64::from(u8::from(k == n + i % 3)))
                .collect()
        })
        .collect();
    let uniform = info_nce(&basis, &other, 0.07).unwrap();
    let cons = consistency(&[a.clone(), a.clone(), a], &[2, 2, 2]);

    let anchors: Vec<Vec<f64>> = (0..20).map(|_| random_unit(&mut rng, 16)).collect();
    let g = Gallery::from_embeddings(anchors, (0..20).collect(), "acceptance".into()).unwrap();
    let keys: Vec<Vec<f64>> = (0..80).map(|_| random_unit(&mut rng, 16)).collect();
    let labels: Vec<usize> = (0..80).map(|i| i % 20).collect();
    let mem = FewShotMemory::new(&g, keys, &labels, 0.0, 5.5).unwrap();
    let same = (0..100)
        .filter(|_| {
            let z = random_unit(&mut rng, 16);
            classify_embedding(&g, &z, -1.0).unwrap().class()
                == Some(tip_adapter_predict(&g, &mem, &z))
        })
        .count();
    verdict(
        single == 0.0 && (uniform - (n as f64).ln()).abs() <= 1e-9 && cons == 0.0 && same == 100,
        format!(
            "info_nce(N=1) {single}, uniform batch {uniform:.12} vs ln 5, consistency {cons}, \
             tip alpha=0 agrees on {same}/100"
        ),
    )
}

/// Metrics of the main synthetic benchmark run.
#[derive(Debug, Clone)]
struct MainRun {
    closed: ClosedWorld,
    open: OpenWorldReport,
    tip4: FewShot,
    probe1: FewShot,
    probe16: FewShot,
    secs: f64,
}

impl MainRun {
    fn bits(&self) -> Vec<u64> {
        let mut v = vec![
            self.closed.top1,
            self.closed.top5,
            self.open.auc,
            self.open.best_f1,
            self.open.best_threshold,
        ];
        for f in [&self.tip4, &self.probe1, &self.probe16] {
            v.extend([f.zero_shot_top1, f.tip_top1, f.probe_top1]);
        }
        for p in &self.open.pr_curve {
            v.extend([p.threshold, p.precision, p.recall]);
        }
        v.into_iter().map(f64::to_bits).collect()
    }
}

const TRAIN_SITES: usize = 200;
const TEST_SITES: usize = 50;

fn main_run() -> Result<MainRun> {
    let t0 = Instant::now();
    let mut cfg = RunConfig::default();
    cfg.set_seed(0);
    cfg.encoding.traffic_len = 512;
    cfg.model.d = 64;
    cfg.train.epochs = 15;
    cfg.synth = benchmark_gen(TRAIN_SITES + 2 * TEST_SITES, 16, 0);
    let sites = gen_sites(&cfg.synth)?;
    let (train_sites, rest) = sites.split_at(TRAIN_SITES);
    let (monitored, unmonitored) = rest.split_at(TEST_SITES);

    let train_pairs = simulate_visits(train_sites, &cfg.synth, 0, cfg.synth.visits_per_site);
    let set = build_train_set(&train_pairs, None, &cfg)?;
    let params = train(ModelParams::init(&cfg.model)?, &set, &cfg.train)?.params;

    let th = threads();
    let test = simulate_visits(monitored, &cfg.synth, 0, 4);
    let gallery = make_gallery(&params, &test, &cfg.encoding, th)?;
    let closed = eval_closed(&params, &gallery, &test, &cfg.encoding, th)?;
    let unmon = simulate_visits(unmonitored, &cfg.synth, 0, 4);
    let open = eval_open(&params, &gallery, &test, &unmon, &cfg.encoding, th)?;

    // Support shots come from the first 16 of 20 fresh visits, queries from the last 4.
    let pool = simulate_visits(monitored, &cfg.synth, 100, 20);
    let queries: Vec<PairedSample> = pool
        .iter()
        .enumerate()
        .filter(|(i, _)| i % 20 >= 16)
        .map(|(_, s)| s.clone())
        .collect();
    let fs = |n| -> Result<FewShot> {
        eval_fewshot(
            &params,
            &gallery,
            &take_shots(&pool, n)?,
            &queries,
            &cfg,
            th,
        )
    };
    Ok(MainRun {
        closed,
        open,
        tip4: fs(4)?,
        probe1: fs(1)?,
        probe16: fs(16)?,
        secs: t0.elapsed().as_secs_f64(),
    })
}

#[derive(Debug, Clone, Copy)]
enum Variant {
    Full,
    NoAugment,
    InfoNceOnly,
}

/// Zero-shot top-1 of one ablation variant on a smaller benchmark.
fn ablation_run(seed: u64, variant: Variant) -> Result<f64> {
    let mut cfg = RunConfig::default();
    cfg.set_seed(seed);
    cfg.encoding.traffic_len = 512;
    cfg.model.d = 64;
    cfg.train.epochs = 10;
    match variant {
        Variant::Full => {}
        Variant::NoAugment => cfg.train.mix_ratio = [10.0, 0.0, 3.0],
        Variant::InfoNceOnly => {
            cfg.train.mix_ratio = [10.0, 3.0, 0.0];
            cfg.train.lambda_sup = 0.0;
            cfg.train.lambda_cons = 0.0;
        }
    }
    cfg.synth = benchmark_gen(TRAIN_SITES + TEST_SITES, 4, seed);
    let sites = gen_sites(&cfg.synth)?;
    let train_pairs = simulate_visits(&sites[..TRAIN_SITES], &cfg.synth, 0, 4);
    let set = build_train_set(&train_pairs, None, &cfg)?;
    let params = train(ModelParams::init(&cfg.model)?, &set, &cfg.train)?.params;
    let test = simulate_visits(&sites[TRAIN_SITES..], &cfg.synth, 0, 4);
    let gallery = make_gallery(&params, &test, &cfg.encoding, threads())?;
    Ok(eval_closed(&params, &gallery, &test, &cfg.encoding, threads())?.top1)
}

const VARIANTS: [Variant; 3] = [Variant::Full, Variant::NoAugment, Variant::InfoNceOnly];

fn ablation() -> Result<Vec<[f64; 3]>> {
    (0..3u64)
        .map(|seed| {
            let mut row = [0.0; 3];
            for (k, v) in VARIANTS.iter().enumerate() {
                row[k] = ablation_run(seed, *v)?;
            }
            Ok(row)
        })
        .collect()
}

fn zero_shot(run: &MainRun) -> Verdict {
    let c = &run.closed;
    verdict(
        c.top1 >= 0.40 && c.top5 >= 0.70,
        format!(
            "top-1 {:.3} top-5 {:.3} over {} queries on {} unseen sites (chance {:.2}/{:.2}); run {:.0}s",
            c.top1,
            c.top5,
            c.queries,
            c.classes,
            1.0 / c.classes as f64,
            5.0 / c.classes as f64,
            run.secs
        ),
    )
}

fn open_world(run: &MainRun) -> Verdict {
    let path = std::path::Path::new(env!("CARGO_TARGET_TMPDIR")).join("acceptance_pr_curve.csv");
    let written = std::fs::write(&path, run.open.pr_csv()).is_ok();
    let rows = std::fs::read_to_string(&path).map_or(0, |t| t.lines().count().saturating_sub(1));
    verdict(
        run.open.auc >= 0.85 && written && rows == run.open.pr_curve.len() && rows > 0,
        format!(
            "AUC {:.4}, best F1 {:.4} at {:.4}; {rows} PR points in {}",
            run.open.auc,
            run.open.best_f1,
            run.open.best_threshold,
            path.display()
        ),
    )
}

fn few_shot(run: &MainRun) -> Verdict {
    let (t, p1, p16) = (&run.tip4, &run.probe1, &run.probe16);
    verdict(
        t.tip_top1 >= t.zero_shot_top1 && p16.probe_top1 >= p1.probe_top1,
        format!(
            "4-shot Tip-Adapter {:.3} vs zero-shot {:.3}; probe 16-shot {:.3} vs 1-shot {:.3}",
            t.tip_top1, t.zero_shot_top1, p16.probe_top1, p1.probe_top1
        ),
    )
}

fn ablation_direction(rows: &[[f64; 3]]) -> Verdict {
    let mean = |k: usize| rows.iter().map(|r| r[k]).sum::<f64>() / rows.len() as f64;
    let (full, no_aug, nce) = (mean(0), mean(1), mean(2));
    verdict(
        full >= no_aug - 0.02 && full >= nce - 0.02,
        format!(
            "mean top-1 over 3 seeds: 10:3:3 hybrid {full:.3}, 10:0:3 {no_aug:.3}, InfoNCE-only {nce:.3}; per seed {rows:?}"
        ),
    )
}

fn print_line(id: usize, name: &str, v: &Verdict) {
    let mut out = std::io::stdout().lock();
    let _ = writeln!(
        out,
        "criterion {id:>2} {name}: {} ({})",
        if v.pass { "PASS" } else { "FAIL" },
        v.detail
    );
    let _ = out.flush();
}

fn main() {
    let mut failed = 0;
    let mut record = |id: usize, name: &str, v: Verdict| {
        failed += usize::from(!v.pass);
        print_line(id, name, &v);
    };
    record(1, "huffman oracle", huffman_oracle());
    record(2, "statistical kernels", stat_kernels());
    record(3, "anchor soundness", anchor_soundness());
    record(4, "augmentation invariants", augmentation_invariants());
    record(5, "gradient correctness", gradients());
    record(6, "loss identities", loss_identities());

    let run = main_run();
    let abl = ablation();
    match &run {
        Ok(r) => {
            record(7, "zero-shot retrieval", zero_shot(r));
            record(8, "open world", open_world(r));
            record(9, "few-shot", few_shot(r));
        }
        Err(e) => {
            for (id, name) in [
                (7, "zero-shot retrieval"),
                (8, "open world"),
                (9, "few-shot"),
            ] {
                record(
                    id,
                    name,
                    verdict(false, format!("benchmark run failed: {e}")),
                );
            }
        }
    }
    match &abl {
        Ok(rows) => record(10, "ablation direction", ablation_direction(rows)),
        Err(e) => record(
            10,
            "ablation direction",
            verdict(false, format!("ablation failed: {e}")),
        ),
    }

    let t0 = Instant::now();
    let determinism = match (&run, &abl, main_run(), ablation()) {
        (Ok(a), Ok(x), Ok(b), Ok(y)) => {
            let bits = |rows: &[[f64; 3]]| -> Vec<u64> {
                rows.iter().flatten().map(|v| v.to_bits()).collect()
            };
            let same_main = a.bits() == b.bits();
            let same_abl = bits(x) == bits(&y);
            verdict(
                same_main && same_abl,
                format!(
                    "rerun metrics bit-identical: benchmark {same_main}, ablation {same_abl}; {:.0}s",
                    t0.elapsed().as_secs_f64()
                ),
            )
        }
        _ => verdict(false, "a run failed"),
    };
    record(11, "determinism", determinism);

    if failed > 0 {
        eprintln!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
