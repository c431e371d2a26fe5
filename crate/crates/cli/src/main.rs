use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Parser, Subcommand};
use serde_json::json;
use vla_core::attention::{export_heatmap, fuse_attention_map};
use vla_core::data::{attach_parsed_traces, load_episodes, save_episodes, Episode};
use vla_core::model::Model;
use vla_core::policy::{decode_step, ModelPolicy};
use vla_core::sim::{generate_demonstrations, rollout, TaskFamily};
use vla_core::teacher::{annotate_dataset_with, RemoteTeacher, RuleBasedTeacher, TeacherBackend};
use vla_core::tokenizer::{build_vocabulary, corpus_words, Segment};
use vla_core::trainer::{evaluate_offline, train};
use vla_core::PolicyModel;

use vla_cli::config::{Overrides, RunConfig};
use vla_cli::plot;

/// Reasoning-supervised action policies on a toy tabletop.
#[derive(Debug, Parser)]
#[command(name = "vla", version)]
struct Cli {
    #[command(flatten)]
    overrides: Overrides,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Debug, Subcommand)]
enum Cmd {
    /// Generate scripted expert episodes into <out>/episodes.jsonl
    GenData {
        /// Episodes to generate
        #[arg(long, default_value_t = 500)]
        n: usize,
        /// Comma-separated task families
        #[arg(long, default_value = "move_near,pick")]
        families: String,
    },
    /// Attach teacher reasoning to every step, one JSON file per episode
    Annotate {
        /// Episode file [default: <out>/episodes.jsonl]
        #[arg(long)]
        data: Option<PathBuf>,
        /// Trace directory [default: <out>/traces]
        #[arg(long)]
        traces: Option<PathBuf>,
    },
    /// Fine-tune a fresh model; writes checkpoints, metrics.jsonl and eval.jsonl
    Train {
        /// Episode file [default: <out>/episodes.jsonl]
        #[arg(long)]
        data: Option<PathBuf>,
        /// Trace directory [default: <out>/traces]
        #[arg(long)]
        traces: Option<PathBuf>,
    },
    /// Teacher-forced metrics of a checkpoint on an episode file
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        /// Episode file [default: <out>/episodes.jsonl]
        #[arg(long)]
        data: Option<PathBuf>,
        /// Trace directory [default: <out>/traces]
        #[arg(long)]
        traces: Option<PathBuf>,
    },
    /// Closed-loop episodes in the simulator
    Rollout {
        #[arg(long)]
        ckpt: PathBuf,
        /// Task family
        #[arg(long, default_value = "move_near")]
        family: String,
        /// Episodes to run
        #[arg(long, default_value_t = 100)]
        n: usize,
    },
    /// Fused attention heatmaps for the action tokens of one step
    VizAttn {
        #[arg(long)]
        ckpt: PathBuf,
        /// Episode file [default: <out>/episodes.jsonl]
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        episode: String,
        #[arg(long)]
        step: usize,
    },
    /// SVG curves from a training run's metrics.jsonl and eval.jsonl
    Plot {
        /// Run directory holding metrics.jsonl [default: <out>]
        #[arg(long)]
        run: Option<PathBuf>,
    },
}

fn emit(value: serde_json::Value) {
    println!("{value}");
}

fn data_path(cfg: &RunConfig, data: &Option<PathBuf>) -> PathBuf {
    data.clone().unwrap_or_else(|| cfg.out.join("episodes.jsonl"))
}

fn traces_path(cfg: &RunConfig, traces: &Option<PathBuf>) -> PathBuf {
    traces.clone().unwrap_or_else(|| cfg.out.join("traces"))
}

fn parse_families(list: &str) -> Result<Vec<TaskFamily>> {
    list.split(',')
        .map(|s| TaskFamily::parse(s.trim()).map_err(Into::into))
        .collect()
}

/// Episodes with traces from `traces` where available. Episodes whose traces
/// are missing or unparseable are dropped when `need_traces`.
fn load_with_traces(path: &Path, traces: &Path, need_traces: bool) -> Result<Vec<Episode>> {
    let episodes = load_episodes(path)?;
    if episodes.iter().all(Episode::is_enriched) || (!need_traces && !traces.exists()) {
        return Ok(episodes);
    }
    let (kept, dropped) = attach_parsed_traces(&episodes, traces);
    if !dropped.is_empty() {
        emit(json!({"dropped_episodes": dropped.len(), "first_reason": dropped[0].1.to_string()}));
    }
    if kept.is_empty() {
        bail!("no episode in {} has usable traces in {}", path.display(), traces.display());
    }
    Ok(kept)
}

fn run(cli: Cli) -> Result<()> {
    let cfg = RunConfig::resolve(&cli.overrides)?;
    emit(json!({ "resolved_config": cfg }));
    match &cli.cmd {
        Cmd::GenData { n, families } => {
            let families = parse_families(families)?;
            let episodes = generate_demonstrations(*n, &families, cfg.seed, &cfg.sim())?;
            fs::create_dir_all(&cfg.out).with_context(|| format!("creating {}", cfg.out.display()))?;
            let path = cfg.out.join("episodes.jsonl");
            save_episodes(&path, &episodes)?;
            let mut per_family = serde_json::Map::new();
            for f in &families {
                let count = episodes.iter().filter(|e| e.task_name == f.name()).count();
                per_family.insert(f.name().to_string(), json!(count));
            }
            let stats = json!({
                "episodes": episodes.len(),
                "requested": n,
                "steps": episodes.iter().map(|e| e.steps.len()).sum::<usize>(),
                "per_family": per_family,
                "seed": cfg.seed,
                "grid_size": cfg.grid_size,
            });
            let stats_path = cfg.out.join("stats.json");
            fs::write(&stats_path, serde_json::to_string_pretty(&stats)?)
                .with_context(|| format!("writing {}", stats_path.display()))?;
            emit(json!({"episodes_path": path, "stats": stats}));
        }
        Cmd::Annotate { data, traces } => {
            let episodes = load_episodes(&data_path(&cfg, data))?;
            let backend: Box<dyn TeacherBackend> = match cfg.teacher.as_str() {
                "remote" => Box::new(RemoteTeacher::from_env()?),
                _ => Box::new(RuleBasedTeacher),
            };
            let report = annotate_dataset_with(backend.as_ref(), &episodes, &traces_path(&cfg, traces), &cfg.annotate_options())?;
            emit(json!({ "report": report }));
        }
        Cmd::Train { data, traces } => {
            let need = cfg.lambda_r > 0.0;
            let mut episodes = load_with_traces(&data_path(&cfg, data), &traces_path(&cfg, traces), need)?;
            let vocab = build_vocabulary(cfg.bins, &corpus_words(&episodes))?;
            let held = cfg.eval_episodes.min(episodes.len().saturating_sub(1));
            let eval = episodes.split_off(episodes.len() - held);
            fs::create_dir_all(&cfg.out).with_context(|| format!("creating {}", cfg.out.display()))?;
            vocab.save(&cfg.out.join("vocab.json"))?;
            let model = PolicyModel::new(cfg.model(&vocab))?;
            let out = train(model, &vocab, &episodes, &eval, &cfg.train())?;
            emit(json!({
                "steps": out.steps,
                "metrics": out.metrics_path,
                "eval": out.eval_path,
                "checkpoints": out.checkpoints,
                "final_eval": out.evals.last(),
                "stopped_early": out.stopped_early,
                "checksum": out.model.checksum(),
            }));
        }
        Cmd::Eval { ckpt, data, traces } => {
            let (model, vocab) = PolicyModel::load(ckpt)?;
            let episodes = load_with_traces(&data_path(&cfg, data), &traces_path(&cfg, traces), false)?;
            let m = evaluate_offline(&model, &vocab, &episodes, cfg.reasoning_budget)?;
            emit(json!({ "metrics": m }));
        }
        Cmd::Rollout { ckpt, family, n } => {
            let (model, vocab) = PolicyModel::load(ckpt)?;
            let family = TaskFamily::parse(family)?;
            let sim = sim_for(&cfg, &model);
            let mut policy = ModelPolicy::new(&model, &vocab, cfg.reasoning_budget);
            let summary = rollout(&mut policy, family, *n, cfg.seed, &sim)?;
            fs::create_dir_all(&cfg.out).with_context(|| format!("creating {}", cfg.out.display()))?;
            let path = cfg.out.join(format!("rollout_{}.json", family.name()));
            let detail = json!({ "summary": &summary, "results": &summary.results });
            fs::write(&path, serde_json::to_string(&detail)?).with_context(|| format!("writing {}", path.display()))?;
            emit(json!({ "summary": summary, "detail": path }));
        }
        Cmd::VizAttn { ckpt, data, episode, step } => {
            let (model, vocab) = PolicyModel::load(ckpt)?;
            let episodes = load_episodes(&data_path(&cfg, data))?;
            let ep = episodes
                .iter()
                .find(|e| &e.episode_id == episode)
                .ok_or_else(|| anyhow!("episode `{episode}` not found"))?;
            let obs = &ep
                .steps
                .get(*step)
                .ok_or_else(|| anyhow!("episode `{episode}` has {} steps", ep.steps.len()))?
                .observation;
            let decoded = decode_step(&model, &vocab, obs, cfg.reasoning_budget, true)?;
            let record = decoded.record.as_ref().expect("recording requested");
            let targets: Vec<usize> = (0..record.len()).filter(|&p| record.segments[p] == Segment::Action).collect();
            let available = model.cfg.n_layers * model.cfg.n_heads;
            let k = cfg.k.min(available);
            if k < cfg.k {
                emit(json!({"note": format!("k lowered from {} to {k}, the number of layer-head pairs", cfg.k)}));
            }
            let maps = fuse_attention_map(record, &targets, k, cfg.method)?;
            fs::create_dir_all(&cfg.out).with_context(|| format!("creating {}", cfg.out.display()))?;
            let mut files = Vec::new();
            for m in &maps {
                let stem = cfg.out.join(format!("attn_{episode}_{step}_t{}", m.target));
                let (j, p) = export_heatmap(m, &obs.images, &stem)?;
                files.push(json!({"target": m.target, "json": j, "overlay": p, "flat": m.flat, "argmax": m.argmax_cell()}));
            }
            emit(json!({
                "reasoning": decoded.reasoning_text(&vocab),
                "action": decoded.action,
                "maps": files,
            }));
        }
        Cmd::Plot { run } => {
            let dir = run.clone().unwrap_or_else(|| cfg.out.clone());
            let written = plot::plot_run(&dir)?;
            emit(json!({ "written": written }));
        }
    }
    Ok(())
}

/// Simulator settings matching the checkpoint's image geometry.
fn sim_for(cfg: &RunConfig, model: &Model<f32>) -> vla_core::sim::SimConfig {
    vla_core::sim::SimConfig {
        grid_size: model.cfg.grid_size,
        views: model.cfg.views,
        max_steps: cfg.max_steps,
    }
}

fn error_line(kind: &str, message: &str) -> String {
    json!({ "error": kind, "message": message.replace('\n', " ").trim() }).to_string()
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return ExitCode::SUCCESS;
            }
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("").trim_start_matches("error: ");
            eprintln!("{}", error_line("usage", first));
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", error_line("runtime", &format!("{e:#}")));
            ExitCode::FAILURE
        }
    }
}
