use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use clap::ValueEnum;
use log::info;
use serde::Serialize;
use serde_json::{json, Value};

use semalign::anchors::aggregate_report;
use semalign::augment::augment_corpus;
use semalign::dataset::{read_dataset, write_dataset, RunConfig};
use semalign::experiment::{self, build_train_set, synth_split};
use semalign::ingest::{parse_packet_jsonl, parse_pcap, parse_resource_jsonl, CaptureConfig};
use semalign::neural::checkpoint::{self, sha256_hex};
use semalign::neural::{embed_logic_batch, embed_traffic_batch, train, ModelParams};
use semalign::retrieval::{classify_embedding, load_gallery, save_gallery, Gallery, Prediction};
use semalign::{
    encode_logic, encode_traffic, EncodingParams, LogicProfile, PairedSample, TrafficTrace,
};

use crate::{
    AugmentArgs, ClassifyArgs, Cli, Command, DatasetArg, EmbedArgs, EvalArgs, EvalMode,
    ExtractArgs, Modality, ModelDataset, TrainArgs,
};

pub const EXIT_USAGE: u8 = 2;
pub const EXIT_DATA: u8 = 3;
pub const EXIT_NUMERIC: u8 = 4;

#[derive(Debug)]
pub struct CliError {
    pub code: u8,
    pub msg: String,
}

impl CliError {
    fn usage(msg: impl Into<String>) -> Self {
        CliError {
            code: EXIT_USAGE,
            msg: msg.into(),
        }
    }

    fn data(msg: impl Into<String>) -> Self {
        CliError {
            code: EXIT_DATA,
            msg: msg.into(),
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.msg)
    }
}

impl From<semalign::Error> for CliError {
    fn from(e: semalign::Error) -> Self {
        use semalign::Error as E;
        let code = match e {
            E::Config(_) => EXIT_USAGE,
            E::Diverged { .. } | E::Numeric(_) => EXIT_NUMERIC,
            _ => EXIT_DATA,
        };
        CliError {
            code,
            msg: e.to_string(),
        }
    }
}

type Result<T> = std::result::Result<T, CliError>;

struct Ctx {
    cfg: RunConfig,
    threads: usize,
    force: bool,
    out: Option<PathBuf>,
}

impl Ctx {
    fn out_or(&self, default: &str) -> PathBuf {
        self.out.clone().unwrap_or_else(|| PathBuf::from(default))
    }

    /// Refuses to replace an existing output unless `--force` was given.
    fn claim(&self, path: &Path) -> Result<()> {
        if path.exists() && !self.force {
            return Err(CliError::usage(format!(
                "{} already exists; pass --force to overwrite",
                path.display()
            )));
        }
        Ok(())
    }
}

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| CliError::data(format!("{}: {e}", path.display())))
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| CliError::data(format!("{}: {e}", path.display())))
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| CliError::data(format!("{}: {e}", dir.display())))?;
    }
    fs::write(path, contents).map_err(|e| CliError::data(format!("{}: {e}", path.display())))
}

fn write_json(path: &Path, v: &impl Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(v).map_err(|e| CliError::data(e.to_string()))?;
    write(path, text + "\n")
}

fn load_dataset(path: &Path) -> Result<(Vec<PairedSample>, String)> {
    let text = read_text(path)?;
    let samples =
        read_dataset(&text).map_err(|e| CliError::data(format!("{}: {e}", path.display())))?;
    Ok((samples, sha256_hex(text.as_bytes())))
}

fn load_model(path: &Path, cfg: &RunConfig) -> Result<(ModelParams, EncodingParams, String)> {
    let (params, manifest) =
        checkpoint::load(path).map_err(|e| CliError::data(format!("{}: {e}", path.display())))?;
    let enc = match manifest.extra.get("encoding") {
        Some(v) => serde_json::from_value(v.clone()).map_err(|e| CliError::data(e.to_string()))?,
        None => cfg.encoding,
    };
    Ok((params, enc, manifest.blob_sha256))
}

fn split_pair(s: &str, flag: &str) -> Result<(String, String)> {
    match s.split_once('=') {
        Some((a, b)) if !a.is_empty() && !b.is_empty() => Ok((a.to_string(), b.to_string())),
        _ => Err(CliError::usage(format!(
            "--{flag} expects SITE=VALUE, got {s:?}"
        ))),
    }
}

pub fn run(cli: &Cli) -> Result<()> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::from_json(&read_text(p)?)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.set_seed(seed);
    }
    let threads = cli
        .threads
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));
    if threads == 0 {
        return Err(CliError::usage("--threads must be positive"));
    }
    let ctx = Ctx {
        cfg,
        threads,
        force: cli.force,
        out: cli.out.clone(),
    };
    match &cli.command {
        Command::Synth => synth(&ctx),
        Command::Extract(a) => extract(&ctx, a),
        Command::Augment(a) => augment(&ctx, a),
        Command::Anchors(a) => anchors(&ctx, a),
        Command::Train(a) => train_cmd(&ctx, a),
        Command::Embed(a) => embed(&ctx, a),
        Command::Gallery(a) => gallery(&ctx, a),
        Command::Classify(a) => classify(&ctx, a),
        Command::Eval(a) => eval(&ctx, a),
    }
}

fn synth(ctx: &Ctx) -> Result<()> {
    let dir = ctx.out_or("data");
    let (split, _) = synth_split(&ctx.cfg)?;
    let mut files = vec![("train.jsonl", &split.train), ("test.jsonl", &split.test)];
    if !split.unmonitored.is_empty() {
        files.push(("unmonitored.jsonl", &split.unmonitored));
    }
    for (name, _) in &files {
        ctx.claim(&dir.join(name))?;
    }
    for (name, samples) in files {
        write(&dir.join(name), write_dataset(samples))?;
        info!(
            "wrote {} samples to {}",
            samples.len(),
            dir.join(name).display()
        );
    }
    Ok(())
}

fn read_trace(path: &Path, client: Option<std::net::IpAddr>) -> Result<TrafficTrace> {
    let bytes = read_bytes(path)?;
    let first = bytes.iter().find(|b| !b.is_ascii_whitespace());
    let parsed = if first.is_none() || first == Some(&b'{') {
        let text = String::from_utf8(bytes)
            .map_err(|e| CliError::data(format!("{}: {e}", path.display())))?;
        parse_packet_jsonl(&text)
    } else {
        let cap = CaptureConfig {
            client_hint: client,
            ..CaptureConfig::default()
        };
        parse_pcap(&bytes, &cap).map(|c| {
            info!("{}: {:?}", path.display(), c.stats);
            c.trace
        })
    };
    parsed.map_err(|e| CliError::data(format!("{}: {e}", path.display())))
}

fn extract(ctx: &Ctx, a: &ExtractArgs) -> Result<()> {
    let out = ctx.out_or("dataset.jsonl");
    ctx.claim(&out)?;
    let mut logic: BTreeMap<String, LogicProfile> = BTreeMap::new();
    for spec in &a.resources {
        let (site, path) = split_pair(spec, "resources")?;
        let path = PathBuf::from(path);
        let mut profile = parse_resource_jsonl(&read_text(&path)?)
            .map_err(|e| CliError::data(format!("{}: {e}", path.display())))?;
        profile.site_id = site.clone();
        if logic.insert(site.clone(), profile).is_some() {
            return Err(CliError::usage(format!("resources for {site} given twice")));
        }
    }
    let mut labels: BTreeMap<String, usize> = BTreeMap::new();
    for spec in &a.label {
        let (site, n) = split_pair(spec, "label")?;
        let n = n.parse().map_err(|_| {
            CliError::usage(format!("label for {site} is not a non-negative integer"))
        })?;
        labels.insert(site, n);
    }
    let mut visits: BTreeMap<String, Vec<TrafficTrace>> = BTreeMap::new();
    for spec in &a.traffic {
        let (site, path) = split_pair(spec, "traffic")?;
        let mut trace = read_trace(Path::new(&path), a.client_ip)?;
        trace.site_id = site.clone();
        trace.label = labels.get(&site).copied();
        visits.entry(site).or_default().push(trace);
    }
    let mut samples = Vec::new();
    for (site, traces) in visits {
        let profile = logic
            .get(&site)
            .ok_or_else(|| CliError::data(format!("no resource log for site {site}")))?;
        for traffic in traces {
            samples.push(PairedSample {
                logic: profile.clone(),
                traffic,
                site_id: site.clone(),
            });
        }
    }
    write(&out, write_dataset(&samples))?;
    info!("wrote {} samples to {}", samples.len(), out.display());
    Ok(())
}

fn augment(ctx: &Ctx, a: &AugmentArgs) -> Result<()> {
    let out = ctx.out_or("augmented.jsonl");
    ctx.claim(&out)?;
    let (samples, _) = load_dataset(&a.dataset)?;
    ctx.cfg.augment.validate()?;
    let copies = a.copies.unwrap_or(ctx.cfg.augment_copies);
    let aug = augment_corpus(&samples, &ctx.cfg.augment, copies);
    write(&out, write_dataset(&aug))?;
    info!("wrote {} augmented samples to {}", aug.len(), out.display());
    Ok(())
}

fn anchors(ctx: &Ctx, a: &DatasetArg) -> Result<()> {
    let dir = ctx.out_or("anchors");
    let (json_path, text_path) = (dir.join("anchors.json"), dir.join("anchors.txt"));
    ctx.claim(&json_path)?;
    ctx.claim(&text_path)?;
    let (samples, digest) = load_dataset(&a.dataset)?;
    if samples.is_empty() {
        return Err(CliError::data(format!(
            "{} holds no samples",
            a.dataset.display()
        )));
    }
    let report = aggregate_report(&samples, &ctx.cfg.anchors)?;
    write_json(
        &json_path,
        &json!({ "config": ctx.cfg, "inputs": { a.dataset.display().to_string(): digest }, "report": report }),
    )?;
    write(&text_path, report.to_text())?;
    info!("wrote {} and {}", json_path.display(), text_path.display());
    Ok(())
}

fn train_cmd(ctx: &Ctx, a: &TrainArgs) -> Result<()> {
    let out = ctx.out_or("model.json");
    ctx.claim(&out)?;
    let mut cfg = ctx.cfg.clone();
    if let Some(e) = a.epochs {
        cfg.train.epochs = e;
    }
    let (samples, digest) = load_dataset(&a.dataset)?;
    let mut inputs = BTreeMap::from([(a.dataset.display().to_string(), digest)]);
    let augmented = match &a.augmented {
        Some(p) => {
            let (s, d) = load_dataset(p)?;
            inputs.insert(p.display().to_string(), d);
            Some(s)
        }
        None => None,
    };
    let data = build_train_set(&samples, augmented.as_deref(), &cfg)?;
    let init = ModelParams::init(&cfg.model)?;
    let extra = |history: Value, diverged: Value| {
        json!({
            "config": cfg,
            "diverged": diverged,
            "encoding": cfg.encoding,
            "history": history,
            "inputs": inputs,
        })
    };
    match train(init, &data, &cfg.train) {
        Ok(outcome) => {
            let history = serde_json::to_value(&outcome.history)
                .map_err(|e| CliError::data(e.to_string()))?;
            checkpoint::save(&outcome.params, &out, extra(history, Value::Null))?;
            info!("wrote checkpoint {}", out.display());
            Ok(())
        }
        Err(semalign::Error::Diverged {
            epoch,
            step,
            last_finite,
        }) => {
            checkpoint::save(
                &last_finite,
                &out,
                extra(Value::Null, json!({ "epoch": epoch, "step": step })),
            )?;
            Err(CliError {
                code: EXIT_NUMERIC,
                msg: format!(
                    "training diverged at epoch {epoch}, step {step}; last finite parameters written to {}",
                    out.display()
                ),
            })
        }
        Err(e) => Err(e.into()),
    }
}

fn embed(ctx: &Ctx, a: &EmbedArgs) -> Result<()> {
    let out = ctx.out_or("embeddings.jsonl");
    ctx.claim(&out)?;
    let (params, enc, _) = load_model(&a.input.checkpoint, &ctx.cfg)?;
    let (samples, _) = load_dataset(&a.input.dataset)?;
    let zs = match a.modality {
        Modality::Traffic => {
            let ms = samples
                .iter()
                .map(|s| encode_traffic(&s.traffic, &enc))
                .collect::<semalign::Result<Vec<_>>>()?;
            embed_traffic_batch(&params, &ms, ctx.threads)?
        }
        Modality::Logic => {
            let ms = samples
                .iter()
                .map(|s| encode_logic(&s.logic, &enc))
                .collect::<semalign::Result<Vec<_>>>()?;
            embed_logic_batch(&params, &ms, ctx.threads)?
        }
    };
    let mut text = String::new();
    for (s, z) in samples.iter().zip(zs) {
        text.push_str(
            &json!({ "embedding": z, "label": s.traffic.label, "site_id": s.site_id }).to_string(),
        );
        text.push('\n');
    }
    write(&out, text)
}

fn make_gallery(
    ctx: &Ctx,
    params: &ModelParams,
    enc: &EncodingParams,
    samples: &[PairedSample],
) -> Result<Gallery> {
    Ok(experiment::make_gallery(params, samples, enc, ctx.threads)?)
}

fn gallery(ctx: &Ctx, a: &ModelDataset) -> Result<()> {
    let out = ctx.out_or("gallery.json");
    ctx.claim(&out)?;
    let (params, enc, _) = load_model(&a.checkpoint, &ctx.cfg)?;
    let (samples, _) = load_dataset(&a.dataset)?;
    let g = make_gallery(ctx, &params, &enc, &samples)?;
    save_gallery(&g, &out)?;
    info!("wrote gallery of {} classes to {}", g.len(), out.display());
    Ok(())
}

fn open_gallery(path: &Path, model_sha: &str) -> Result<Gallery> {
    let g = load_gallery(path).map_err(|e| CliError::data(format!("{}: {e}", path.display())))?;
    if g.model_sha256 != model_sha {
        return Err(CliError::data(format!(
            "{} was built with a different checkpoint",
            path.display()
        )));
    }
    Ok(g)
}

fn classify(ctx: &Ctx, a: &ClassifyArgs) -> Result<()> {
    let out = ctx.out_or("predictions.jsonl");
    ctx.claim(&out)?;
    let (params, enc, sha) = load_model(&a.input.checkpoint, &ctx.cfg)?;
    let g = open_gallery(&a.gallery, &sha)?;
    let (samples, _) = load_dataset(&a.input.dataset)?;
    let threshold = a.threshold.unwrap_or(ctx.cfg.eval.threshold);
    let ms = samples
        .iter()
        .map(|s| encode_traffic(&s.traffic, &enc))
        .collect::<semalign::Result<Vec<_>>>()?;
    let zs = embed_traffic_batch(&params, &ms, ctx.threads)?;
    let mut text = String::new();
    for (s, z) in samples.iter().zip(&zs) {
        let p = classify_embedding(&g, z, threshold)?;
        let class = match p {
            Prediction::Class { class, .. } => Some(class),
            Prediction::Unknown { .. } => None,
        };
        text.push_str(
            &json!({ "class": class, "label": s.traffic.label, "score": p.score(), "site_id": s.site_id }).to_string(),
        );
        text.push('\n');
    }
    write(&out, text)
}

/// Splits `samples` into the first `n` per class and the rest.
fn support_split(
    samples: &[PairedSample],
    n: usize,
) -> Result<(Vec<PairedSample>, Vec<PairedSample>)> {
    let support = experiment::take_shots(samples, n)?;
    let mut taken: BTreeMap<usize, usize> = BTreeMap::new();
    let mut queries = Vec::new();
    for s in samples {
        let c = taken
            .entry(s.traffic.label.unwrap_or(usize::MAX))
            .or_default();
        if *c < n {
            *c += 1;
        } else {
            queries.push(s.clone());
        }
    }
    if queries.is_empty() {
        return Err(CliError::data(format!(
            "no query traces remain after taking {n} shots per class"
        )));
    }
    Ok((support, queries))
}

fn eval(ctx: &Ctx, a: &EvalArgs) -> Result<()> {
    let dir = ctx.out_or("eval");
    let metrics_path = dir.join("metrics.json");
    ctx.claim(&metrics_path)?;
    let pr_path = dir.join("pr_curve.csv");
    if a.mode == EvalMode::Open {
        ctx.claim(&pr_path)?;
    }
    let (params, enc, sha) = load_model(&a.input.checkpoint, &ctx.cfg)?;
    let (samples, digest) = load_dataset(&a.input.dataset)?;
    if samples.is_empty() {
        return Err(CliError::data(format!(
            "{} holds no samples",
            a.input.dataset.display()
        )));
    }
    let mut inputs = BTreeMap::from([
        (a.input.dataset.display().to_string(), digest),
        (a.input.checkpoint.display().to_string(), sha.clone()),
    ]);
    let g = match &a.gallery {
        Some(p) => open_gallery(p, &sha)?,
        None => make_gallery(ctx, &params, &enc, &samples)?,
    };
    let mut cfg = ctx.cfg.clone();
    cfg.encoding = enc;
    let mode = a.mode.to_possible_value().map(|v| v.get_name().to_string());
    let metrics = match a.mode {
        EvalMode::Closed => {
            let r = experiment::eval_closed(&params, &g, &samples, &enc, ctx.threads)?;
            json!({ "top1": r.top1, "top5": r.top5, "classes": r.classes, "queries": r.queries })
        }
        EvalMode::Open => {
            let path = a
                .unmonitored
                .as_ref()
                .ok_or_else(|| CliError::usage("open mode needs --unmonitored"))?;
            let (unmon, d) = load_dataset(path)?;
            inputs.insert(path.display().to_string(), d);
            let known: BTreeSet<&str> = samples.iter().map(|s| s.site_id.as_str()).collect();
            if unmon.iter().any(|s| known.contains(s.site_id.as_str())) {
                return Err(CliError::data(
                    "unmonitored traces share sites with the monitored set",
                ));
            }
            let r = experiment::eval_open(&params, &g, &samples, &unmon, &enc, ctx.threads)?;
            write(&pr_path, r.pr_csv())?;
            json!({
                "auc": r.auc,
                "best_f1": r.best_f1,
                "best_threshold": r.best_threshold,
                "monitored": samples.len(),
                "unmonitored": unmon.len(),
            })
        }
        EvalMode::FewshotLinear | EvalMode::FewshotTip => {
            let n = a.shots.unwrap_or(cfg.eval.shots);
            if n == 0 {
                return Err(CliError::usage("--shots must be positive"));
            }
            let (support, queries) = support_split(&samples, n)?;
            let r = experiment::eval_fewshot(&params, &g, &support, &queries, &cfg, ctx.threads)?;
            let top1 = if a.mode == EvalMode::FewshotTip {
                r.tip_top1
            } else {
                r.probe_top1
            };
            json!({
                "shots": r.shots,
                "support": r.support,
                "queries": r.queries,
                "top1": top1,
                "zero_shot_top1": r.zero_shot_top1,
            })
        }
    };
    write_json(
        &metrics_path,
        &json!({ "config": cfg, "inputs": inputs, "metrics": metrics, "mode": mode }),
    )?;
    info!("{}: {}", metrics_path.display(), metrics);
    Ok(())
}
