use std::path::{Path, PathBuf};
use std::time::{Duration, SystemTime, UNIX_EPOCH};

use serde::Serialize;
use serde_json::json;
use tbg_core::codec::{sha256_hex, write_atomic};
use tbg_core::eval::MetricsReport;
use tbg_core::ingest::{
    build_prompts, build_universe, fetch_embeddings, parse_interactions, read_embedding_matrix, records_checksum,
    temporal_split, write_embedding_matrix, write_interactions, DelimitedFormat, EmbeddingProvider, FetchConfig,
    HashingProvider, HttpProvider, PromptSet,
};
use tbg_core::pipeline::Dataset;
use tbg_core::protocol::{run_protocol, ProtocolName, ProtocolReport};
use tbg_core::semantic::{
    build_semantic_edges, mode_neighbors, read_neighbor_cache, write_neighbor_cache, DomainLabels, EdgeMode,
    SearchBackend,
};
use tbg_core::training::{
    evaluate_checkpoint, finetune, pretrain, scratch_baseline, training_free_infer, Checkpoint, EpochLog, EvalSplit,
    TrainOutcome,
};
use tbg_core::{generate, Error, RecallMode};

use crate::config::{ExperimentConfig, ProviderKind, Resolved};
use crate::{Cli, CliError, Command, ModeArg, Overrides, ProtocolArg, SplitArg, BUILD_ID};

struct Ctx {
    cfg: ExperimentConfig,
    paths: Resolved,
    hash: String,
}

fn apply_overrides(cfg: &mut ExperimentConfig, o: &Overrides, fine_tuning: bool) {
    if let Some(seed) = o.seed {
        cfg.train.seed = seed;
        cfg.synth.seed = seed;
    }
    if let Some(g) = o.gamma {
        if fine_tuning {
            cfg.train.finetune_gamma = Some(g);
        } else {
            cfg.train.gamma = g;
        }
    }
    if let Some(lr) = o.lr {
        cfg.train.lr = lr;
    }
    if let Some(l) = o.layers {
        cfg.train.layers = l;
    }
    if let Some(e) = o.epochs {
        cfg.train.epochs = e;
        cfg.train.finetune_epochs = e;
    }
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    let mut cfg = match &cli.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    let fine_tuning = matches!(cli.command, Command::Finetune { .. } | Command::Zeroshot { .. });
    apply_overrides(&mut cfg, &cli.overrides, fine_tuning);
    cfg.validate()?;
    let paths = cfg.resolve(cli.out.as_deref())?;
    let hash = cfg.hash()?;
    let ctx = Ctx { cfg, paths, hash };
    match cli.command {
        Command::Synth => synth(&ctx),
        Command::Prompts => prompts(&ctx),
        Command::Embed => embed(&ctx),
        Command::Edges { mode } => edges(&ctx, mode),
        Command::Pretrain => {
            let ds = load_dataset(&ctx)?;
            finish_training(&ctx, "pretrain", pretrain(&ds, &ctx.cfg.train, &mut progress)?)
        }
        Command::Finetune { from } => {
            let ds = load_dataset(&ctx)?;
            let pre = load_checkpoint(&from.unwrap_or_else(|| ctx.paths.checkpoints.join("pretrain.tbgc")))?;
            finish_training(&ctx, "finetune", finetune(&ds, &pre, &ctx.cfg.train, &mut progress)?)
        }
        Command::Zeroshot { from } => {
            let ds = load_dataset(&ctx)?;
            let pre = load_checkpoint(&from.unwrap_or_else(|| ctx.paths.checkpoints.join("pretrain.tbgc")))?;
            finish_training(&ctx, "zeroshot", training_free_infer(&ds, &pre, &ctx.cfg.train)?)
        }
        Command::Scratch => {
            let ds = load_dataset(&ctx)?;
            finish_training(&ctx, "scratch", scratch_baseline(&ds, &ctx.cfg.train, &mut progress)?)
        }
        Command::Eval { checkpoint, split, hit_rate } => eval(&ctx, checkpoint, split, hit_rate),
        Command::Protocol { name } => protocol(&ctx, name),
    }
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::new("IO", format!("{}: {e}", path.display()))
}

fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    write_atomic(path, text.as_bytes()).map_err(|e| io_err(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| io_err(path, e))?;
    text.push('\n');
    write_text(path, &text)
}

/// Provenance written next to artifacts whose format has no metadata slot.
fn write_sidecar(ctx: &Ctx, artifact: &Path, extra: serde_json::Value) -> Result<(), CliError> {
    let mut name = artifact.file_name().unwrap_or_default().to_os_string();
    name.push(".meta.json");
    let mut meta = json!({ "config_hash": ctx.hash, "build_id": BUILD_ID });
    if let (Some(m), serde_json::Value::Object(e)) = (meta.as_object_mut(), extra) {
        m.extend(e);
    }
    write_json(&artifact.with_file_name(name), &meta)
}

fn emit(value: serde_json::Value) {
    println!("{value}");
}

fn timestamp() -> String {
    let secs = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0);
    format!("unix:{secs}")
}

fn require(path: &Path, code: &str) -> Result<(), CliError> {
    if path.is_file() {
        Ok(())
    } else {
        Err(CliError::new(code, format!("{} not found", path.display())))
    }
}

fn load_records(ctx: &Ctx) -> Result<Vec<tbg_core::InteractionRecord>, CliError> {
    require(&ctx.paths.data, "MISSING_DATA")?;
    let parsed = parse_interactions(&ctx.paths.data, &DelimitedFormat::default())?;
    if parsed.skipped_missing + parsed.skipped_bad_timestamp > 0 {
        eprintln!(
            "{}",
            json!({ "warning": "skipped rows", "missing": parsed.skipped_missing, "bad_timestamp": parsed.skipped_bad_timestamp })
        );
    }
    Ok(parsed.records)
}

fn load_dataset(ctx: &Ctx) -> Result<Dataset, CliError> {
    let records = load_records(ctx)?;
    require(&ctx.paths.embeddings, "MISSING_EMBEDDINGS")?;
    let text = read_embedding_matrix(&ctx.paths.embeddings)?;
    let d = ctx.cfg.domains();
    Ok(Dataset::new(records, &d.sources, d.target.as_deref(), &text, ctx.cfg.fractions)?)
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint, CliError> {
    require(path, "MISSING_CHECKPOINT")?;
    Ok(Checkpoint::load(path)?)
}

fn synth(ctx: &Ctx) -> Result<(), CliError> {
    let out = generate(&ctx.cfg.synth)?;
    write_text(&ctx.paths.data, &write_interactions(&out.records, &DelimitedFormat::default()))?;
    write_embedding_matrix(&ctx.paths.embeddings, &out.text)?;
    let checksum = records_checksum(&out.records);
    write_sidecar(
        ctx,
        &ctx.paths.data,
        json!({ "records": out.records.len(), "key_checksum": checksum, "spec": out.spec }),
    )?;
    write_sidecar(ctx, &ctx.paths.embeddings, json!({ "rows": out.text.len(), "dim": out.text.dim() }))?;
    emit(
        json!({ "command": "synth", "records": out.records.len(), "text_rows": out.text.len(), "data": ctx.paths.data, "embeddings": ctx.paths.embeddings }),
    );
    Ok(())
}

fn prompts_path(ctx: &Ctx) -> PathBuf {
    ctx.paths.output.join("prompts.json")
}

fn prompts(ctx: &Ctx) -> Result<(), CliError> {
    let records = load_records(ctx)?;
    let d = ctx.cfg.domains();
    let mut universe = build_universe(&records, &d.sources, d.target.as_deref())?;
    let split = temporal_split(&records, &universe, ctx.cfg.fractions)?;
    split.install_train_graphs(&mut universe)?;
    let set = build_prompts(&records, &split, &universe, &ctx.cfg.prompts, None)?;
    let path = prompts_path(ctx);
    write_json(&path, &set)?;
    write_sidecar(ctx, &path, json!({ "prompts": set.prompts.len() }))?;
    emit(
        json!({ "command": "prompts", "prompts": set.prompts.len(), "user_cap": set.user_cap, "item_cap": set.item_cap, "path": path }),
    );
    Ok(())
}

fn embed(ctx: &Ctx) -> Result<(), CliError> {
    let path = prompts_path(ctx);
    require(&path, "MISSING_PROMPTS")?;
    let text = std::fs::read_to_string(&path).map_err(|e| io_err(&path, e))?;
    let set: PromptSet =
        serde_json::from_str(&text).map_err(|e| CliError::new("PARSE", format!("{}: {e}", path.display())))?;
    let p = &ctx.cfg.provider;
    let provider: Box<dyn EmbeddingProvider> = match p.kind {
        ProviderKind::Hashing => Box::new(HashingProvider { dim: p.hashing_dim, seed: ctx.cfg.train.seed }),
        ProviderKind::Http => {
            let url = p.url.clone().ok_or_else(|| CliError::new("CONFIG", "provider.url is required for http"))?;
            Box::new(HttpProvider::from_env(url, Duration::from_millis(p.timeout_ms)))
        }
    };
    let fetch = FetchConfig {
        batch_size: p.batch_size,
        max_retries: p.max_retries,
        cache_path: Some(ctx.paths.output.join("embed_cache.tbge")),
        ..FetchConfig::default()
    };
    let (matrix, stats) = fetch_embeddings(provider.as_ref(), &set, &fetch)?;
    write_embedding_matrix(&ctx.paths.embeddings, &matrix)?;
    write_sidecar(
        ctx,
        &ctx.paths.embeddings,
        json!({ "rows": matrix.len(), "dim": matrix.dim(), "provider": provider.id() }),
    )?;
    emit(
        json!({ "command": "embed", "rows": matrix.len(), "dim": matrix.dim(), "requests": stats.requests, "retries": stats.retries, "cache_hits": stats.cache_hits }),
    );
    Ok(())
}

fn edge_mode(m: ModeArg) -> EdgeMode {
    match m {
        ModeArg::PretrainCrossDomain => EdgeMode::PretrainCrossDomain,
        ModeArg::FinetuneSrcTgt => EdgeMode::FinetuneSrcTgt,
        ModeArg::FinetuneTgtGlobal => EdgeMode::FinetuneTgtGlobal,
    }
}

fn edges(ctx: &Ctx, mode: Option<ModeArg>) -> Result<(), CliError> {
    let ds = load_dataset(ctx)?;
    let labels = DomainLabels::from_universe(&ds.universe);
    let modes: Vec<EdgeMode> = match mode {
        Some(m) => vec![edge_mode(m)],
        None if ds.universe.target().is_some() => {
            vec![EdgeMode::PretrainCrossDomain, EdgeMode::FinetuneSrcTgt, EdgeMode::FinetuneTgtGlobal]
        }
        None => vec![EdgeMode::PretrainCrossDomain],
    };
    let emb_hash = sha256_hex(&std::fs::read(&ctx.paths.embeddings).map_err(|e| io_err(&ctx.paths.embeddings, e))?);
    let t = &ctx.cfg.train;
    let mut summary = serde_json::Map::new();
    for mode in modes {
        let cache = ctx.paths.output.join(format!("neighbors_{}.tbgn", mode.name()));
        let context = format!("{}|{emb_hash}|{}", mode.name(), ds.universe.num_nodes());
        let lists = match read_neighbor_cache(&cache, &context, t.k_cap) {
            Ok(lists) => lists,
            Err(Error::Io(_) | Error::StaleCache(_)) => {
                let lists = mode_neighbors(&ds.text, &labels, mode, t.k_cap, &SearchBackend::Exact)?;
                write_neighbor_cache(&cache, &context, t.k_cap, &lists)?;
                lists
            }
            Err(e) => return Err(e.into()),
        };
        let gamma = if mode == EdgeMode::PretrainCrossDomain { t.gamma } else { t.fine_gamma() };
        let set = build_semantic_edges(&lists, gamma, mode, &labels, t.k_cap)?;
        let mut csv = String::from("a,b,cosine\n");
        for &(a, b, s) in &set.edges {
            csv.push_str(&format!(
                "{},{},{s}\n",
                ds.universe.key(tbg_core::NodeId(a)),
                ds.universe.key(tbg_core::NodeId(b))
            ));
        }
        write_text(&ctx.paths.output.join(format!("edges_{}.csv", mode.name())), &csv)?;
        summary.insert(mode.name().into(), json!({ "edges": set.len(), "gamma": gamma, "k_cap": t.k_cap }));
    }
    let path = ctx.paths.output.join("edges.json");
    let report = json!({ "modes": summary, "config_hash": ctx.hash, "build_id": BUILD_ID });
    write_json(&path, &report)?;
    emit(json!({ "command": "edges", "modes": report["modes"] }));
    Ok(())
}

fn progress(e: &EpochLog) {
    eprintln!("{}", serde_json::to_string(e).expect("epoch log serialises"));
}

fn finish_training(ctx: &Ctx, name: &str, mut out: TrainOutcome) -> Result<(), CliError> {
    out.checkpoint.build_id = BUILD_ID.to_string();
    let path = ctx.paths.checkpoints.join(format!("{name}.tbgc"));
    out.checkpoint.save(&path)?;
    let mut log = String::new();
    for e in &out.log {
        log.push_str(&serde_json::to_string(e).map_err(|e| CliError::new("JSON", e.to_string()))?);
        log.push('\n');
    }
    write_text(&ctx.paths.output.join(format!("{name}.log.jsonl")), &log)?;
    let ck = &out.checkpoint;
    emit(json!({
        "command": name,
        "checkpoint": path,
        "epoch": ck.epoch,
        "val_auc": ck.history.get(ck.epoch),
        "edge_counts": ck.edge_counts,
        "config_hash": ck.config_hash()?,
    }));
    Ok(())
}

fn write_metrics(ctx: &Ctx, stem: &str, report: &MetricsReport) -> Result<PathBuf, CliError> {
    let path = ctx.paths.output.join(format!("{stem}.json"));
    write_text(&path, &(report.to_json_pretty() + "\n"))?;
    write_text(&ctx.paths.output.join(format!("{stem}.csv")), &report.to_csv())?;
    Ok(path)
}

fn eval(ctx: &Ctx, checkpoint: Option<PathBuf>, split: SplitArg, hit_rate: bool) -> Result<(), CliError> {
    let path = checkpoint.ok_or_else(|| CliError::new("MISSING_CHECKPOINT", "no --checkpoint given"))?;
    let ckpt = load_checkpoint(&path)?;
    let ds = load_dataset(ctx)?;
    let split = match split {
        SplitArg::Valid => EvalSplit::Valid,
        SplitArg::Test => EvalSplit::Test,
    };
    let mode = if hit_rate { RecallMode::HitRate } else { RecallMode::PerUser };
    let mut report = evaluate_checkpoint(&ds, &ckpt, split, ckpt.stage.name(), mode)?;
    report.timestamp = Some(timestamp());
    let suffix = if split == EvalSplit::Valid { "_valid" } else { "" };
    let out = write_metrics(ctx, &format!("metrics_{}{suffix}", ckpt.stage.name()), &report)?;
    emit(
        json!({ "command": "eval", "metrics": out, "auc": report.auc, "recall@10": report.recall_at_10, "precision@10": report.precision_at_10 }),
    );
    Ok(())
}

fn protocol_csv(report: &ProtocolReport) -> String {
    let mut out = String::from(
        "setting,gamma,mask_type,mask_rate,target_train_edges,auc,recall@10,recall@20,precision@10,precision@20\n",
    );
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for r in &report.rows {
        let m = &r.metrics;
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{}\n",
            r.setting,
            opt(r.gamma),
            r.mask_type.map(|t| t.to_string()).unwrap_or_default(),
            opt(r.mask_rate),
            r.target_train_edges,
            m.auc,
            m.recall_at_10,
            m.recall_at_20,
            m.precision_at_10,
            m.precision_at_20
        ));
    }
    out
}

fn protocol(ctx: &Ctx, name: ProtocolArg) -> Result<(), CliError> {
    let name = match name {
        ProtocolArg::GammaSweep => ProtocolName::GammaSweep,
        ProtocolArg::Masking => ProtocolName::Masking,
        ProtocolArg::ColdStart => ProtocolName::ColdStart,
    };
    let ds = load_dataset(ctx)?;
    let mut report = run_protocol(name, &ds, &ctx.cfg.train, &ctx.cfg.protocols, &mut |row| {
        eprintln!("{}", json!({ "protocol": name.name(), "setting": row.setting, "auc": row.metrics.auc }));
    })?;
    let stamp = timestamp();
    for row in &mut report.rows {
        row.metrics.timestamp = Some(stamp.clone());
        row.metrics.build_id = BUILD_ID.to_string();
    }
    let path = ctx.paths.output.join(format!("protocol_{}.json", name.name()));
    write_json(&path, &report)?;
    write_text(&ctx.paths.output.join(format!("protocol_{}.csv", name.name())), &protocol_csv(&report))?;
    emit(json!({ "command": "protocol", "protocol": name.name(), "rows": report.rows.len(), "report": path }));
    Ok(())
}
