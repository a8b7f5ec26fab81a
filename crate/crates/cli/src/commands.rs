use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::Serialize;
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use relgen_core::archive::{AdapterSet, Archive};
use relgen_core::config::RunConfig;
use relgen_core::data::{
    build_dataset, ingest_staged, load_manifest, packaged_relation_set, CommandClient, GenerativeClient, MockClient,
    RelationsFile, RetryPolicy,
};
use relgen_core::embedding::{EmbeddingBackend, LookupBackend, MeanColorBackend, StubJointBackend, StubVisionBackend};
use relgen_core::evaluation::{format_table, run_benchmark, Aggregates, BenchManifest, MetricReport, RelationBench};
use relgen_core::generation::{generate_batch, grid_report, GenerationRequest, RequestFile, SubjectSpec};
use relgen_core::id_extractor::InjectionMethod;
use relgen_core::image::Image;
use relgen_core::local_encoder::{self, principal_components, synthetic_images};
use relgen_core::pipeline::Pipeline;
use relgen_core::trainer::{self, AblationMode, TrainReport};

use crate::{
    AblateArgs, BackendChoice, BenchBuildArgs, BenchRunArgs, ClientKind, ConfigArgs, DataBuildArgs, DataIngestArgs,
    DistillArgs, EvaluateArgs, GenerateArgs, InspectArgs, TrainArgs, UsageError,
};

const MAX_ABLATION_RUNS: usize = 32;

fn resolve(args: &ConfigArgs) -> Result<RunConfig> {
    Ok(RunConfig::resolve(args.config.as_deref(), &args.set)?)
}

/// Like [`resolve`], but falls back to the `run_config.json` saved next to
/// an adapter archive when no config file is given.
fn resolve_near(args: &ConfigArgs, adapters: Option<&Path>) -> Result<RunConfig> {
    if args.config.is_none() {
        if let Some(saved) = adapters.and_then(Path::parent).map(|d| d.join("run_config.json")) {
            if saved.is_file() {
                log::info!("using model settings from {}", saved.display());
                return Ok(RunConfig::resolve(Some(&saved), &args.set)?);
            }
        }
    }
    resolve(args)
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value)? + "\n";
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

/// Files written by one command, listed with their digests in
/// `artifacts.json` under the run's `resolved_hash`.
struct Artifacts {
    dir: PathBuf,
    resolved_hash: String,
    files: Vec<PathBuf>,
}

impl Artifacts {
    fn start(dir: &Path, cfg: &RunConfig) -> Result<Self> {
        create_dir(dir)?;
        cfg.save_record(dir.join("run_config.json"))?;
        Ok(Self { dir: dir.to_path_buf(), resolved_hash: cfg.resolved_hash(), files: vec![dir.join("run_config.json")] })
    }

    fn add(&mut self, path: impl Into<PathBuf>) {
        self.files.push(path.into());
    }

    fn finish(self) -> Result<()> {
        let mut files = BTreeMap::new();
        for f in &self.files {
            let bytes = std::fs::read(f).with_context(|| format!("reading {}", f.display()))?;
            let name = f.strip_prefix(&self.dir).unwrap_or(f).to_string_lossy().replace('\\', "/");
            files.insert(name, hex(&Sha256::digest(&bytes)));
        }
        write_json(&self.dir.join("artifacts.json"), &json!({ "resolved_hash": self.resolved_hash, "files": files }))
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn build_pipeline(cfg: &RunConfig, encoder: Option<&Path>) -> Result<Pipeline> {
    let mut p = Pipeline::new(cfg.model.clone())?;
    if let Some(path) = encoder {
        let n = p.load_encoder(&Archive::load(path)?)?;
        log::info!("loaded {n} encoder tensors from {}", path.display());
    }
    Ok(p)
}

fn attach(p: &mut Pipeline, adapters: &Path, cfg: &RunConfig) -> Result<()> {
    let set = AdapterSet::load(adapters)?;
    p.attach_adapters(&set)?;
    trainer::configure(p, &cfg.train)?;
    Ok(())
}

pub fn data_build(a: DataBuildArgs) -> Result<()> {
    let cfg = resolve(&a.cfg)?;
    let relations = match &a.relations {
        Some(p) => RelationsFile::load(p)?,
        None => RelationsFile::packaged(cfg.data.per_relation),
    };
    let mut client: Box<dyn GenerativeClient> = match a.client {
        ClientKind::Mock => Box::new(MockClient::new(cfg.data.seed)),
        ClientKind::External => Box::new(CommandClient::from_env()?),
    };
    let mut art = Artifacts::start(&a.out, &cfg)?;
    let summary = build_dataset(&relations, client.as_mut(), &RetryPolicy::default(), &a.out)?;
    println!(
        "{} triplets in manifest, {} staged for annotation, {} failed",
        summary.triplets,
        summary.staged.len(),
        summary.failed.len()
    );
    if summary.triplets == 0 && summary.staged.is_empty() {
        anyhow::bail!("every triplet failed: {}", summary.failed.join("; "));
    }
    if summary.triplets > 0 {
        art.add(a.out.join("manifest.jsonl"));
    }
    art.finish()
}

pub fn data_ingest(a: DataIngestArgs) -> Result<()> {
    let cfg = resolve(&a.cfg)?;
    let n = ingest_staged(&a.out)?;
    println!("{n} triplets ingested into {}", a.out.join("manifest.jsonl").display());
    let mut art = Artifacts::start(&a.out, &cfg)?;
    art.add(a.out.join("manifest.jsonl"));
    art.finish()
}

fn train_one(cfg: &RunConfig, manifest: Option<&Path>, encoder: Option<&Path>, out: &Path) -> Result<(Pipeline, TrainReport)> {
    let triplets = match manifest {
        Some(p) => load_manifest(p)?,
        None => packaged_relation_set(cfg.data.per_relation, cfg.data.seed),
    };
    let mut pipeline = build_pipeline(cfg, encoder)?;
    log::info!("training on {} triplets for {} steps ({})", triplets.len(), cfg.train.steps, cfg.train.ablation_mode);
    let report = trainer::finetune(&mut pipeline, &triplets, &cfg.train)?;

    let mut art = Artifacts::start(out, cfg)?;
    let adapters = out.join("adapters.rlta");
    report.adapters.save(&adapters)?;
    art.add(adapters);
    let log_path = out.join("train_log.jsonl");
    report.write_log(&log_path)?;
    art.add(log_path);
    let summary = out.join("train_summary.json");
    let n = report.log.len();
    write_json(
        &summary,
        &json!({
            "resolved_hash": cfg.resolved_hash(),
            "triplets": triplets.len(),
            "steps": n,
            "loss_start": trainer::trailing_mean(&report.log, 10, 10),
            "loss_end": trainer::trailing_mean(&report.log, n, 10),
            "adapter_parameters": report.adapters.parameter_count(),
            "frozen_checksum": report.frozen_checksum,
            "kml_warnings": report.kml_warnings,
        }),
    )?;
    art.add(summary);
    art.finish()?;
    Ok((pipeline, report))
}

pub fn train(a: TrainArgs) -> Result<()> {
    let cfg = resolve(&a.cfg)?;
    let (_, report) = train_one(&cfg, a.manifest.as_deref(), a.encoder.as_deref(), &a.out)?;
    let n = report.log.len();
    println!(
        "loss {:.5} -> {:.5} over {n} steps; adapters in {}",
        trainer::trailing_mean(&report.log, 10, 10),
        trainer::trailing_mean(&report.log, n, 10),
        a.out.join("adapters.rlta").display()
    );
    Ok(())
}

pub fn generate(a: GenerateArgs) -> Result<()> {
    let cfg = resolve_near(&a.cfg, a.adapters.as_deref())?;
    let mut requests = RequestFile::load(&a.manifest)?;
    if requests.is_empty() {
        return Err(UsageError(format!("{} holds no requests", a.manifest.display())).into());
    }
    let base = a.manifest.parent().unwrap_or(Path::new(".")).to_path_buf();
    for (i, r) in requests.iter_mut().enumerate() {
        if let Some(s) = a.seed {
            r.seed = s.wrapping_add(i as u64);
        }
        if let Some(p) = &a.adapters {
            r.adapter_archive = Some(p.to_string_lossy().into_owned());
        }
        r.validate()?;
    }

    // One pipeline per distinct adapter archive.
    let mut groups: BTreeMap<Option<String>, Vec<usize>> = BTreeMap::new();
    for (i, r) in requests.iter().enumerate() {
        groups.entry(r.adapter_archive.clone()).or_default().push(i);
    }
    let base_pipeline = build_pipeline(&cfg, a.encoder.as_deref())?;
    let mut outputs = vec![None; requests.len()];
    for (archive, idx) in groups {
        let mut p = base_pipeline.clone();
        if let Some(path) = &archive {
            let path = if a.adapters.is_some() { PathBuf::from(path) } else { base.join(path) };
            attach(&mut p, &path, &cfg)?;
        }
        let jobs = idx
            .iter()
            .map(|&i| Ok((requests[i].clone(), requests[i].load_references(&base)?)))
            .collect::<Result<Vec<_>>>()?;
        for (&i, out) in idx.iter().zip(generate_batch(&p, &jobs)?) {
            outputs[i] = Some(out);
        }
    }
    let outputs: Vec<_> = outputs.into_iter().map(|o| o.expect("every request generated")).collect();

    let mut art = Artifacts::start(&a.out, &cfg)?;
    for (i, out) in outputs.iter().enumerate() {
        let png = a.out.join(format!("{i:03}.png"));
        out.image.save_png(&png)?;
        art.add(png);
        let meta = a.out.join(format!("{i:03}.json"));
        write_json(&meta, &json!({ "resolved_hash": cfg.resolved_hash(), "metadata": out.metadata }))?;
        art.add(meta);
    }
    let (png, sidecar) = grid_report(&requests, &outputs, &a.out, "grid")?;
    art.add(png);
    art.add(sidecar);
    art.finish()?;
    println!("{} images written to {}", outputs.len(), a.out.display());
    Ok(())
}

fn external_backend(path: Option<&Path>, which: &str) -> Result<LookupBackend> {
    let path = path.ok_or_else(|| UsageError(format!("--backend external needs --{which}-table")))?;
    Ok(LookupBackend::load(path)?)
}

fn write_report(report: &MetricReport, method: &str, out: &Path, art: &mut Artifacts) -> Result<()> {
    let json_path = out.join("report.json");
    std::fs::write(&json_path, report.to_json()).with_context(|| format!("writing {}", json_path.display()))?;
    art.add(json_path);
    let table = report.table(method);
    let txt = out.join("report.txt");
    std::fs::write(&txt, &table).with_context(|| format!("writing {}", txt.display()))?;
    art.add(txt);
    print!("{table}");
    for f in &report.failed {
        log::warn!("case {} failed: {}", f.id, f.reason);
    }
    Ok(())
}

pub fn evaluate(a: EvaluateArgs) -> Result<()> {
    let cfg = resolve(&a.cfg)?;
    let manifest = BenchManifest::load(&a.manifest)?;
    let manifest_dir = a.manifest.parent().unwrap_or(Path::new("."));
    let (joint, vision): (Box<dyn EmbeddingBackend>, Box<dyn EmbeddingBackend>) = match a.backend {
        BackendChoice::Stub => (Box::new(StubJointBackend), Box::new(StubVisionBackend)),
        BackendChoice::External => (
            Box::new(external_backend(a.joint_table.as_deref(), "joint")?),
            Box::new(external_backend(a.vision_table.as_deref(), "vision")?),
        ),
    };
    let report = run_benchmark(&manifest, manifest_dir, &a.outputs, joint.as_ref(), vision.as_ref(), cfg.eval)?;
    let mut art = Artifacts::start(&a.out, &cfg)?;
    write_report(&report, &a.method, &a.out, &mut art)?;
    art.finish()
}

pub fn distill(a: DistillArgs) -> Result<()> {
    let cfg = resolve(&a.cfg)?;
    let mut p = build_pipeline(&cfg, None)?;
    for id in local_encoder::LocalEncoder::param_ids(&p.params) {
        p.params.set_trainable(id, true);
    }
    let enc = &cfg.model.encoder;
    let images = synthetic_images(cfg.distill.num_images, enc.image_size, cfg.distill.seed);
    let teacher = MeanColorBackend::new(enc.out_dim);
    let report = local_encoder::distill(&mut p.params, &p.encoder, &teacher, &images, &cfg.distill)?;

    let mut art = Artifacts::start(&a.out, &cfg)?;
    let archive = a.out.join("encoder.rlta");
    Archive::from_params(&p.params, &format!("{}/", local_encoder::NAMESPACE)).save(&archive)?;
    art.add(archive);
    let log_path = a.out.join("distill_log.json");
    write_json(
        &log_path,
        &json!({
            "resolved_hash": cfg.resolved_hash(),
            "teacher": teacher.name(),
            "losses": report.losses,
            "final_loss": report.final_loss,
        }),
    )?;
    art.add(log_path);
    art.finish()?;
    println!("distillation loss {:.5} after {} steps", report.final_loss, report.losses.len());
    Ok(())
}

pub fn bench_build(a: BenchBuildArgs) -> Result<()> {
    let cfg = resolve(&a.cfg)?;
    let cases = a.cases.unwrap_or(cfg.bench.cases);
    if cases == 0 {
        return Err(UsageError("--cases must be positive".into()).into());
    }
    let mut art = Artifacts::start(&a.out, &cfg)?;
    let (_, path) = RelationBench::packaged().build_manifest(&a.out, cases)?;
    art.add(&path);
    art.finish()?;
    println!("{cases} cases written to {}", path.display());
    Ok(())
}

/// Generates `outputs/{case id}.png` for every case, then scores them with
/// the stub backends.
fn run_cases(
    pipeline: &Pipeline,
    cfg: &RunConfig,
    manifest_path: &Path,
    out: &Path,
    art: &mut Artifacts,
) -> Result<MetricReport> {
    let manifest = BenchManifest::load(manifest_path)?;
    let manifest_dir = manifest_path.parent().unwrap_or(Path::new("."));
    let jobs = manifest
        .cases
        .iter()
        .enumerate()
        .map(|(i, case)| {
            let req = GenerationRequest {
                text_prompt: case.prompt.clone(),
                subjects: case
                    .subjects
                    .iter()
                    .map(|s| SubjectSpec {
                        image: s.ref_image.clone(),
                        class: s.class.clone(),
                        bbox: s.bbox.unwrap_or([0.0, 0.0, 1.0, 1.0]),
                    })
                    .collect(),
                adapter_archive: None,
                seed: i as u64,
                num_steps: cfg.sampler.num_steps,
                gamma: None,
            };
            let refs = req.load_references(manifest_dir)?;
            Ok((req, refs))
        })
        .collect::<Result<Vec<_>>>()?;
    let generated = generate_batch(pipeline, &jobs)?;
    let outputs = out.join("outputs");
    create_dir(&outputs)?;
    for (case, g) in manifest.cases.iter().zip(&generated) {
        let png = outputs.join(format!("{}.png", case.id));
        g.image.save_png(&png)?;
        art.add(png);
    }
    Ok(run_benchmark(&manifest, manifest_dir, &outputs, &StubJointBackend, &StubVisionBackend, cfg.eval)?)
}

pub fn bench_run(a: BenchRunArgs) -> Result<()> {
    let cfg = resolve_near(&a.cfg, a.adapters.as_deref())?;
    let mut p = build_pipeline(&cfg, a.encoder.as_deref())?;
    if let Some(path) = &a.adapters {
        attach(&mut p, path, &cfg)?;
    }
    let mut art = Artifacts::start(&a.out, &cfg)?;
    let report = run_cases(&p, &cfg, &a.manifest, &a.out, &mut art)?;
    write_report(&report, &a.method, &a.out, &mut art)?;
    art.finish()
}

pub fn inspect_local_tokens(a: InspectArgs) -> Result<()> {
    let cfg = resolve(&a.cfg)?;
    let p = build_pipeline(&cfg, a.encoder.as_deref())?;
    let img = Image::load(&a.image)?;
    let size = cfg.model.encoder.image_size;
    let bundle = p.token_bundle(&img)?;
    let dense = p.encoder.projected_dense_map(&p.params, &img.resized(size, size))?;
    let pca = principal_components(&dense.features, 2)?;
    let rows = |m: &relgen_core::tensor::Mat| (0..m.rows()).map(|r| m.row(r).to_vec()).collect::<Vec<_>>();
    let cells: Vec<Value> = (0..dense.height * dense.width)
        .map(|i| json!({ "y": i / dense.width, "x": i % dense.width, "pc": pca.coords.row(i) }))
        .collect();
    let dump = json!({
        "resolved_hash": cfg.resolved_hash(),
        "image": a.image.to_string_lossy(),
        "grid": cfg.model.encoder.grid,
        "local_tokens": rows(&bundle.tok_l),
        "image_token": rows(&bundle.tok_i),
        "dense": { "height": dense.height, "width": dense.width, "dim": dense.features.cols(), "features": rows(&dense.features) },
        "pca": { "components": rows(&pca.components), "variances": pca.variances, "mean": pca.mean, "cells": cells },
    });
    let text = serde_json::to_string_pretty(&dump)? + "\n";
    match &a.out {
        Some(path) => {
            if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
                create_dir(dir)?;
            }
            std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))?;
        }
        None => print!("{text}"),
    }
    Ok(())
}

/// One ablation axis: its name and, per value, a display label plus the
/// config override it stands for.
#[derive(Debug, Clone, PartialEq)]
pub struct Axis {
    pub name: String,
    pub values: Vec<(String, String)>,
}

fn token_grid(v: &str) -> Option<usize> {
    let v = v.trim();
    if let Some((a, b)) = v.split_once(['x', '×']) {
        let (a, b) = (a.trim().parse::<usize>().ok()?, b.trim().parse::<usize>().ok()?);
        return (a == b && a > 0).then_some(a);
    }
    let n: usize = v.parse().ok()?;
    let g = (n as f64).sqrt().round() as usize;
    (g > 0 && g * g == n).then_some(g)
}

pub fn parse_axis(spec: &str) -> std::result::Result<Axis, UsageError> {
    let bad = |msg: String| UsageError(format!("axis {spec:?}: {msg}"));
    let (name, list) = spec.split_once('=').ok_or_else(|| bad("expected NAME=V1,V2,...".into()))?;
    let name = name.trim();
    let raw: Vec<&str> = list.split(',').map(str::trim).filter(|s| !s.is_empty()).collect();
    if raw.is_empty() {
        return Err(bad("no values".into()));
    }
    let values = raw
        .iter()
        .map(|v| {
            let set = match name {
                "lambda" => {
                    let x: f64 = v.parse().map_err(|_| bad(format!("{v:?} is not a number")))?;
                    format!("train.lambda_kml={x:e}")
                }
                "num_local_tokens" => {
                    let g = token_grid(v).ok_or_else(|| bad(format!("{v:?} is not N×N or a square count")))?;
                    format!("model.encoder.grid={g}")
                }
                "injection_method" => {
                    let m: InjectionMethod = v.parse().map_err(|e| bad(format!("{e}")))?;
                    format!("model.extractor.injection={}", serde_json::to_string(&m).expect("json"))
                }
                "ablation_mode" => {
                    let m: AblationMode = v.parse().map_err(|e| bad(format!("{e}")))?;
                    format!("train.ablation_mode={}", serde_json::to_string(&m).expect("json"))
                }
                other => {
                    return Err(bad(format!(
                        "unknown axis {other:?}; use lambda, num_local_tokens, injection_method or ablation_mode"
                    )))
                }
            };
            Ok((format!("{name}={v}"), set))
        })
        .collect::<std::result::Result<Vec<_>, _>>()?;
    Ok(Axis { name: name.to_string(), values })
}

/// Every combination, first axis slowest. Fails past the run budget.
pub fn combinations(axes: &[Axis]) -> std::result::Result<Vec<Vec<(String, String)>>, UsageError> {
    let mut seen = std::collections::BTreeSet::new();
    for a in axes {
        if !seen.insert(a.name.as_str()) {
            return Err(UsageError(format!("axis {} given twice", a.name)));
        }
    }
    let total = axes.iter().try_fold(1usize, |n, a| n.checked_mul(a.values.len())).unwrap_or(usize::MAX);
    if total > MAX_ABLATION_RUNS {
        return Err(UsageError(format!("{total} runs requested; the limit is {MAX_ABLATION_RUNS}")));
    }
    let mut combos = vec![Vec::new()];
    for a in axes {
        combos = combos
            .into_iter()
            .flat_map(|c| {
                a.values.iter().map(move |v| {
                    let mut c = c.clone();
                    c.push(v.clone());
                    c
                })
            })
            .collect();
    }
    Ok(combos)
}

#[derive(Serialize)]
struct AblationRun {
    label: String,
    dir: String,
    resolved_hash: String,
    final_loss: f64,
    aggregates: Aggregates,
}

pub fn ablate(a: AblateArgs) -> Result<()> {
    let axes = a.axes.iter().map(|s| parse_axis(s)).collect::<std::result::Result<Vec<_>, _>>()?;
    let combos = combinations(&axes)?;
    let base = resolve(&a.cfg)?;
    let mut art = Artifacts::start(&a.out, &base)?;
    let bench_dir = a.out.join("bench");
    let (_, manifest_path) = RelationBench::packaged().build_manifest(&bench_dir, base.bench.cases)?;
    art.add(&manifest_path);

    let mut runs = Vec::with_capacity(combos.len());
    let mut rows = Vec::with_capacity(combos.len());
    for (i, combo) in combos.iter().enumerate() {
        let label = combo.iter().map(|(l, _)| l.as_str()).collect::<Vec<_>>().join(" ");
        let mut overrides = a.cfg.set.clone();
        overrides.extend(combo.iter().map(|(_, s)| s.clone()));
        let cfg = RunConfig::resolve(a.cfg.config.as_deref(), &overrides)?;
        let dir = a.out.join("runs").join(format!("{i:02}"));
        log::info!("run {}/{}: {label}", i + 1, combos.len());
        let (pipeline, report) = train_one(&cfg, a.manifest.as_deref(), a.encoder.as_deref(), &dir)?;
        let mut run_art = Artifacts::start(&dir.join("eval"), &cfg)?;
        let metrics = run_cases(&pipeline, &cfg, &manifest_path, &dir.join("eval"), &mut run_art)?;
        let json_path = dir.join("eval").join("report.json");
        std::fs::write(&json_path, metrics.to_json())?;
        run_art.add(json_path);
        run_art.finish()?;
        rows.push((label.clone(), metrics.aggregates));
        runs.push(AblationRun {
            label,
            dir: format!("runs/{i:02}"),
            resolved_hash: cfg.resolved_hash(),
            final_loss: trainer::trailing_mean(&report.log, report.log.len(), 10),
            aggregates: metrics.aggregates,
        });
    }
    let table = format_table(&rows);
    let txt = a.out.join("ablation.txt");
    std::fs::write(&txt, &table)?;
    art.add(txt);
    let json_path = a.out.join("ablation.json");
    write_json(&json_path, &json!({ "resolved_hash": base.resolved_hash(), "runs": runs }))?;
    art.add(json_path);
    art.finish()?;
    print!("{table}");
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn token_counts_parse_as_grids() {
        assert_eq!(token_grid("4x4"), Some(4));
        assert_eq!(token_grid("2×2"), Some(2));
        assert_eq!(token_grid("16"), Some(4));
        assert_eq!(token_grid("3x2"), None);
        assert_eq!(token_grid("5"), None);
    }

    #[test]
    fn budget_is_enforced() {
        let big = parse_axis("lambda=1,2,3,4,5,6").unwrap();
        let modes = parse_axis("ablation_mode=full,no_kml,blank_image_prompt,no_local_tokens").unwrap();
        let grids = parse_axis("num_local_tokens=2x2,4x4").unwrap();
        assert_eq!(combinations(&[big.clone(), grids.clone()]).unwrap().len(), 12);
        assert!(combinations(&[big, modes, grids]).is_err());
    }

    #[test]
    fn single_value_gives_one_run() {
        let c = combinations(&[parse_axis("lambda=1e-3").unwrap()]).unwrap();
        assert_eq!(c, vec![vec![("lambda=1e-3".to_string(), "train.lambda_kml=1e-3".to_string())]]);
    }

    #[test]
    fn unknown_axis_is_a_usage_error() {
        assert!(parse_axis("depth=1,2").is_err());
        assert!(parse_axis("lambda=").is_err());
        assert!(parse_axis("injection_method=sideways").is_err());
    }
}
