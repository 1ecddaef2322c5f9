use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{anyhow, Context};
use serde_json::json;

use careloop_core::agents::{Engine, RiskVocabulary};
use careloop_core::backend::{Backend, HttpBackend, Metered, MockBackend, MockScript, TemplateId, TemplateSet};
use careloop_core::bundler::{serialize_stay, stream_stats, SerializedStream};
use careloop_core::corpus::{corpus_bytes, corpus_digest, read_corpus_jsonl};
use careloop_core::eval::{prequential_run, report_table, write_traces_jsonl, EvalError, EvalOptions};
use careloop_core::ingest::{parse_event_jsonl, parse_tables, write_events_jsonl, ClinicalEvent, StayId, TableInput, TableKind};
use careloop_core::memory::{GlobalProtocol, WhitespaceTokenizer};
use careloop_core::reflector::phase1_run;
use careloop_core::synth;

use crate::config::{BackendKind, RunConfig, API_KEY_ENV};
use crate::manifest::{file_digest, RunManifest, Staged, MANIFEST_FILE};
use crate::Failure;

pub struct Ctx {
    pub config: RunConfig,
    pub out: PathBuf,
    pub overwrite: bool,
}

type Meter = Metered<Box<dyn Backend>>;

fn build_backend(cfg: &RunConfig) -> anyhow::Result<Meter> {
    let inner: Box<dyn Backend> = match cfg.backend.kind {
        BackendKind::Mock => {
            let path = cfg
                .backend
                .mock_script
                .as_ref()
                .ok_or_else(|| Failure::Config("the mock backend needs --mock-script or backend.mock_script".into()))?;
            let script = MockScript::load(path).map_err(|e| Failure::Config(format!("{}: {e}", path.display())))?;
            Box::new(MockBackend::new(script))
        }
        BackendKind::Http => {
            let mut http = cfg.backend.http.clone();
            http.api_key = std::env::var(API_KEY_ENV).ok().filter(|k| !k.is_empty());
            Box::new(HttpBackend::new(http).map_err(|e| Failure::Config(e.to_string()))?)
        }
    };
    Ok(Metered::new(inner))
}

fn build_engine<'a>(cfg: &RunConfig, backend: &'a Meter) -> anyhow::Result<Engine<'a>> {
    let mut templates = TemplateSet::default();
    if let Some(dir) = &cfg.paths.templates {
        templates = templates.with_overrides(dir).map_err(|e| Failure::Config(e.to_string()))?;
    }
    let risk = match &cfg.paths.risk_vocab {
        Some(p) => RiskVocabulary::load(p).map_err(|e| Failure::Config(e.to_string()))?,
        None => RiskVocabulary::default(),
    };
    Engine::with_parts(backend, cfg.agents.clone(), templates, risk, Box::new(WhitespaceTokenizer))
        .map_err(|e| Failure::Config(e.to_string()).into())
}

fn calls(backend: &Meter) -> BTreeMap<String, u64> {
    backend.snapshot().into_iter().map(|(id, n)| (id.to_string(), n)).collect()
}

fn load_corpus(path: &Path) -> anyhow::Result<Vec<SerializedStream>> {
    let file = fs::File::open(path).with_context(|| format!("opening {}", path.display()))?;
    read_corpus_jsonl(std::io::BufReader::new(file)).with_context(|| format!("reading {}", path.display()))
}

fn load_events(path: &Path) -> anyhow::Result<BTreeMap<StayId, Vec<ClinicalEvent>>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    parse_event_jsonl(&text).with_context(|| format!("parsing {}", path.display()))
}

fn events_bytes(events: &BTreeMap<StayId, Vec<ClinicalEvent>>) -> Vec<u8> {
    let mut buf = Vec::new();
    write_events_jsonl(&mut buf, events).expect("writing to a Vec cannot fail");
    buf
}

fn serialize_all(cfg: &RunConfig, events: &BTreeMap<StayId, Vec<ClinicalEvent>>) -> anyhow::Result<Vec<SerializedStream>> {
    events
        .iter()
        .map(|(stay, ev)| serialize_stay(stay.clone(), ev, &cfg.bundler).with_context(|| format!("bundling {stay}")))
        .collect()
}

fn pretty(value: &impl serde::Serialize) -> Vec<u8> {
    let mut v = serde_json::to_vec_pretty(value).expect("serializes");
    v.push(b'\n');
    v
}

pub struct IngestArgs<'a> {
    pub diagnoses: Option<&'a Path>,
    pub medications: Option<&'a Path>,
    pub labs: Option<&'a Path>,
    pub procedures: Option<&'a Path>,
    pub events: Option<&'a Path>,
    pub tsv: bool,
}

pub fn ingest(ctx: &Ctx, args: IngestArgs<'_>) -> anyhow::Result<()> {
    let mut stage = Staged::begin(&ctx.out, ctx.overwrite)?;
    let mut manifest = stage.manifest("ingest", ctx.config.snapshot());
    let sources = [
        (TableKind::Diagnoses, args.diagnoses),
        (TableKind::Medications, args.medications),
        (TableKind::Labs, args.labs),
        (TableKind::Procedures, args.procedures),
    ];
    let mut raw = Vec::new();
    for (kind, path) in sources {
        if let Some(path) = path {
            raw.push((kind, fs::read(path).with_context(|| format!("reading {}", path.display()))?));
            manifest.inputs.insert(kind.to_string(), file_digest(path)?);
        }
    }
    if raw.is_empty() && args.events.is_none() {
        return Err(Failure::Config("ingest needs at least one table or --events".into()).into());
    }
    let tables: Vec<TableInput<'_>> = raw
        .iter()
        .map(|(kind, data)| if args.tsv { TableInput::tsv(*kind, data) } else { TableInput::csv(*kind, data) })
        .collect();
    let report = parse_tables(&tables, &ctx.config.schema);
    let mut events = report.events;
    if let Some(path) = args.events {
        manifest.inputs.insert("events".into(), file_digest(path)?);
        for (stay, mut extra) in load_events(path)? {
            let list = events.entry(stay).or_default();
            list.append(&mut extra);
            list.sort_by_key(|e| e.timestamp);
        }
    }
    for e in &report.table_errors {
        tracing::error!(error = %e, "table skipped");
    }
    let count: usize = events.values().map(Vec::len).sum();
    stage.write("events.jsonl", &events_bytes(&events))?;
    manifest.summary = json!({
        "stays": events.len(),
        "events": count,
        "row_errors": report.row_errors,
        "table_errors": report.table_errors.iter().map(|e| e.to_string()).collect::<Vec<_>>(),
    });
    let out = stage.commit(manifest)?;
    println!("ingested {count} events over {} stays into {}", events.len(), out.display());
    Ok(())
}

pub fn bundle(ctx: &Ctx, events_path: &Path) -> anyhow::Result<()> {
    let mut stage = Staged::begin(&ctx.out, ctx.overwrite)?;
    let mut manifest = stage.manifest("bundle", ctx.config.snapshot());
    manifest.inputs.insert("events".into(), file_digest(events_path)?);
    let streams = serialize_all(&ctx.config, &load_events(events_path)?)?;
    let stats = stream_stats(&streams).context("computing corpus statistics")?;
    stage.write("corpus.jsonl", &corpus_bytes(&streams))?;
    stage.write("stats.json", &pretty(&stats))?;
    manifest.corpus_digest = Some(corpus_digest(&streams));
    manifest.summary = serde_json::to_value(&stats)?;
    let out = stage.commit(manifest)?;
    println!(
        "{} stays, {} bundles, {} events ({:.2} events/bundle) into {}",
        stats.stays,
        stats.bundles,
        stats.events,
        stats.events_per_bundle,
        out.display()
    );
    Ok(())
}

pub fn phase1(ctx: &Ctx, corpus_path: &Path, seed_protocol: Option<&Path>) -> anyhow::Result<()> {
    let corpus = load_corpus(corpus_path)?;
    let seed = match seed_protocol {
        Some(p) => GlobalProtocol::load(p).map_err(|e| anyhow!("{}: {e}", p.display()))?,
        None => GlobalProtocol::new(),
    };
    if seed.is_frozen() {
        return Err(Failure::Config("seed protocol is frozen; phase 1 needs an open protocol".into()).into());
    }
    let backend = build_backend(&ctx.config)?;
    let engine = build_engine(&ctx.config, &backend)?;
    let mut stage = Staged::begin(&ctx.out, ctx.overwrite)?;
    let mut manifest = stage.manifest("phase1", ctx.config.snapshot());
    manifest.inputs.insert("corpus".into(), file_digest(corpus_path)?);
    if let Some(p) = &ctx.config.backend.mock_script {
        manifest.inputs.insert("mock_script".into(), file_digest(p)?);
    }
    let out = phase1_run(&corpus, &engine, seed, &ctx.config.phase1_config()).map_err(|e| anyhow!("phase 1: {e}"))?;

    let mut log = Vec::new();
    for rec in &out.log {
        serde_json::to_writer(&mut log, rec)?;
        log.push(b'\n');
    }
    stage.write("protocol.json", (out.protocol.to_json() + "\n").as_bytes())?;
    stage.write("induction_log.jsonl", &log)?;
    manifest.protocol_hash = Some(out.protocol.version_hash().to_string());
    manifest.corpus_digest = Some(corpus_digest(&corpus));
    manifest.calls = calls(&backend);
    manifest.summary = json!({
        "trajectories": out.trajectories,
        "steps": out.steps,
        "failures": out.failures,
        "rules": out.protocol.len(),
        "admitted": out.log.iter().filter(|r| r.admitted).count(),
    });
    let dir = stage.commit(manifest)?;
    println!(
        "{} failures, {} rules, protocol {} into {}",
        out.failures,
        out.protocol.len(),
        out.protocol.version_hash(),
        dir.display()
    );
    Ok(())
}

pub fn eval(ctx: &Ctx, corpus_path: &Path, protocol_path: &Path, train_manifest: Option<&Path>) -> anyhow::Result<()> {
    let protocol = GlobalProtocol::load(protocol_path).map_err(|e| anyhow!("{}: {e}", protocol_path.display()))?;
    if !protocol.is_frozen() {
        return Err(Failure::NotFrozen(protocol_path.display().to_string()).into());
    }
    let corpus = load_corpus(corpus_path)?;
    let digest = corpus_digest(&corpus);
    let sibling = protocol_path.with_file_name(MANIFEST_FILE);
    let train = train_manifest.map(Path::to_path_buf).or_else(|| sibling.exists().then_some(sibling));
    if let Some(path) = &train {
        let m = RunManifest::load(path)?;
        if m.corpus_digest.as_deref() == Some(digest.as_str()) {
            return Err(Failure::Invariant(format!(
                "{} is the phase-1 training corpus recorded in {}",
                corpus_path.display(),
                path.display()
            ))
            .into());
        }
    }

    let backend = build_backend(&ctx.config)?;
    let engine = build_engine(&ctx.config, &backend)?;
    let mut stage = Staged::begin(&ctx.out, ctx.overwrite)?;
    let mut manifest = stage.manifest("eval", ctx.config.snapshot());
    manifest.inputs.insert("corpus".into(), file_digest(corpus_path)?);
    manifest.inputs.insert("protocol".into(), file_digest(protocol_path)?);
    if let Some(p) = &ctx.config.backend.mock_script {
        manifest.inputs.insert("mock_script".into(), file_digest(p)?);
    }
    let opts = EvalOptions {
        workers: ctx.config.workers,
        aliases: ctx.config.eval.aliases.clone(),
        judge: ctx.config.eval.judge.then_some(&backend as &dyn Backend),
    };
    let out = prequential_run(&corpus, &engine, Arc::new(protocol), &opts).map_err(|e| match e {
        EvalError::ProtocolNotFrozen => Failure::NotFrozen(protocol_path.display().to_string()).into(),
        EvalError::ProtocolMutated { .. } | EvalError::Leakage { .. } => anyhow::Error::from(Failure::Invariant(e.to_string())),
        other => anyhow!("evaluation: {other}"),
    })?;
    if backend.calls(TemplateId::Reflector) > 0 {
        return Err(Failure::Invariant("reflector invoked during evaluation".into()).into());
    }

    let mut traces = Vec::new();
    write_traces_jsonl(&out.traces, &mut traces)?;
    let table = report_table(&out.report);
    stage.write("report.json", &pretty(&out.report))?;
    stage.write("report.txt", table.as_bytes())?;
    stage.write("traces.jsonl", &traces)?;
    manifest.protocol_hash = Some(out.protocol_hash.clone());
    manifest.corpus_digest = Some(digest);
    manifest.calls = calls(&backend);
    manifest.incidents = out.report.incidents;
    manifest.summary = json!({
        "certified_steps": out.certified_steps,
        "train_manifest": train.map(|p| p.display().to_string()),
        "report": out.report,
    });
    let dir = stage.commit(manifest)?;
    print!("{table}");
    println!("wrote {}", dir.display());
    Ok(())
}

pub fn inspect_listing(protocol: &GlobalProtocol) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "protocol {}  rules={}  frozen={}",
        protocol.version_hash(),
        protocol.len(),
        protocol.is_frozen()
    );
    let mut by_category: BTreeMap<&str, Vec<_>> = BTreeMap::new();
    for r in protocol.rules() {
        by_category.entry(r.category.as_str()).or_default().push(r);
    }
    for (category, rules) in by_category {
        let _ = writeln!(out, "\n{category} ({})", rules.len());
        for r in rules {
            let _ = writeln!(out, "  [{}] {}", r.rule_id, r.rule_text);
            let _ = writeln!(out, "      trigger: {}", r.trigger_condition);
            let _ = writeln!(out, "      action:  {}", r.action_directive);
        }
    }
    out
}

pub fn inspect(protocol_path: &Path) -> anyhow::Result<()> {
    let protocol = GlobalProtocol::load(protocol_path).map_err(|e| anyhow!("{}: {e}", protocol_path.display()))?;
    print!("{}", inspect_listing(&protocol));
    Ok(())
}

const SEPSIS_TOML: &str = "# Steward after every bundle, as in the stepwise sepsis replay.\n[agents]\nl_limit = 0\n";

pub fn synth_cmd(ctx: &Ctx, stays: usize) -> anyhow::Result<()> {
    let cfg = &ctx.config;
    let mut stage = Staged::begin(&ctx.out, ctx.overwrite)?;
    let mut manifest = stage.manifest("synth", cfg.snapshot());

    let events = synth::demo_events(cfg.seed, stays);
    let corpus = serialize_all(cfg, &events)?;
    let sepsis = vec![synth::sepsis_stream()];
    let glucose = synth::glucose_fixture(20);

    let mut mock = synth::sepsis_script();
    for entry in synth::generic_script().entries {
        mock.push(entry);
    }

    stage.write("events.jsonl", &events_bytes(&events))?;
    stage.write("corpus.jsonl", &corpus_bytes(&corpus))?;
    stage.write("sepsis_corpus.jsonl", &corpus_bytes(&sepsis))?;
    stage.write("sepsis_protocol.json", (synth::sepsis_protocol().to_json() + "\n").as_bytes())?;
    stage.write("protocol.json", (synth::demo_protocol().to_json() + "\n").as_bytes())?;
    stage.write("mock_script.jsonl", mock.to_jsonl().as_bytes())?;
    stage.write("sepsis.toml", SEPSIS_TOML.as_bytes())?;
    stage.write("glucose_corpus.jsonl", &corpus_bytes(&glucose.corpus))?;
    stage.write("glucose_mock.jsonl", glucose.script.to_jsonl().as_bytes())?;

    manifest.corpus_digest = Some(corpus_digest(&corpus));
    manifest.protocol_hash = Some(synth::demo_protocol().version_hash().to_string());
    manifest.summary = json!({
        "seed": cfg.seed,
        "stays": corpus.len(),
        "bundles": corpus.iter().map(SerializedStream::len).sum::<usize>(),
        "sepsis_digest": corpus_digest(&sepsis),
        "glucose_digest": corpus_digest(&glucose.corpus),
    });
    let dir = stage.commit(manifest)?;
    println!("synthetic corpus of {} stays into {}", corpus.len(), dir.display());
    Ok(())
}
