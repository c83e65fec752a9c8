//! `kinesim` command-line pipelines.

mod config;

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, CommandFactory, Parser, Subcommand};
use serde::Serialize;
use serde_json::json;
use sha2::{Digest, Sha256};

use kinesim::dataset::{load_token_dataset, save_token_dataset, tokenize_scenario, TokenRecord};
use kinesim::metrics::evaluate;
use kinesim::model::{load_checkpoint, save_checkpoint, sequences_for_agent, train, Model, ModelConfig, Sampler, Sequence, TrainConfig};
use kinesim::plot::{render_svg, PlotOptions};
use kinesim::preference::{build_pairs, dpo_finetune, prepare_examples, save_pairs, DpoConfig, DriverProfile};
use kinesim::rollout::{batch_rollouts, history_tokens, load_simulated, save_simulated, sidecar_path, RolloutConfig, SimulatedScenario};
use kinesim::scene::synth::{generate_synthetic, GenConfig};
use kinesim::scene::{load_scenario, save_scenario, MapIndex, Scenario, SceneConfig};
use kinesim::{ActionToken, TokenizerConfig};

#[derive(Parser)]
#[command(name = "kinesim", version, about = "Kinematic action tokens, autoregressive driving models and closed-loop simulation")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate synthetic scenarios from scripted policies.
    GenScenes(GenArgs),
    /// Recover action tokens for every track of a scene directory.
    Tokenize(TokenizeArgs),
    /// Train a model with teacher forcing.
    Train(TrainArgs),
    /// Closed-loop rollouts of a trained model.
    Rollout(RolloutArgs),
    /// Metrics over a rollout directory.
    Eval(EvalArgs),
    /// Preference fine-tuning toward a driver profile.
    Dpo(DpoArgs),
    /// Draw a scenario or rollout as SVG.
    Plot(PlotArgs),
}

#[derive(Args, Serialize)]
struct Common {
    /// Flat `key = value` file of flags for this subcommand.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Print a JSON summary record on stdout.
    #[arg(long)]
    json_summary: bool,
}

#[derive(Args, Serialize)]
struct GenArgs {
    #[command(flatten)]
    common: Common,
    /// Generator settings file (`straight_follow = 100`, ...).
    #[arg(long)]
    gen_config: Option<PathBuf>,
    /// Generator overrides as key=value.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[arg(long)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Serialize)]
struct TokenizeArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    scenes: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Rolling window length.
    #[arg(long, default_value_t = 3)]
    k: usize,
    /// Step length in seconds; defaults to each scenario's own.
    #[arg(long)]
    dt: Option<f64>,
}

#[derive(Args, Serialize)]
struct ModelArgs {
    #[arg(long, default_value_t = 64)]
    d_model: usize,
    #[arg(long, default_value_t = 4)]
    heads: usize,
    #[arg(long, default_value_t = 3)]
    enc_layers: usize,
    #[arg(long, default_value_t = 3)]
    dec_layers: usize,
    #[arg(long, default_value_t = 0.0)]
    dropout: f64,
    #[arg(long)]
    no_causal: bool,
    #[arg(long)]
    no_usr: bool,
    #[arg(long)]
    no_u_embedding: bool,
    #[arg(long, default_value_t = 64)]
    max_steps: usize,
}

impl ModelArgs {
    fn config(&self) -> ModelConfig {
        ModelConfig {
            d_model: self.d_model,
            n_heads: self.heads,
            enc_layers: self.enc_layers,
            dec_layers: self.dec_layers,
            dropout: self.dropout,
            causal_attention: !self.no_causal,
            unified_spatial_repr: !self.no_usr,
            u_embedding: !self.no_u_embedding,
            max_steps: self.max_steps,
            ..ModelConfig::default()
        }
    }
}

#[derive(Clone, Copy, PartialEq, Serialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
enum AgentSet {
    Ego,
    All,
}

#[derive(Args, Serialize)]
struct TrainArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    scenes: PathBuf,
    /// Token dataset; without it tokens come from the scenes.
    #[arg(long)]
    tokens: Option<PathBuf>,
    /// Held-out scenes; without it every tenth scene is held out.
    #[arg(long)]
    val_scenes: Option<PathBuf>,
    /// Output checkpoint.
    #[arg(long)]
    out: PathBuf,
    /// Loss curve CSV; defaults to `<out>.loss.csv`.
    #[arg(long)]
    loss_curve: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = AgentSet::All)]
    agents: AgentSet,
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long, default_value_t = 10)]
    epochs: usize,
    #[arg(long, default_value_t = 256)]
    batch_size: usize,
    #[arg(long, default_value_t = 2e-4)]
    lr: f64,
    #[arg(long, default_value_t = 0.3)]
    pct_start: f64,
    /// Global gradient norm clip; 0 disables.
    #[arg(long, default_value_t = 0.0)]
    clip_norm: f64,
    #[arg(long)]
    seed: u64,
    #[arg(long, default_value_t = 1)]
    workers: usize,
}

#[derive(Args, Serialize)]
struct RolloutArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    scenes: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// argmax, top-p:P or temperature:T.
    #[arg(long, default_value = "argmax")]
    sampler: String,
    #[arg(long, default_value_t = 1)]
    samples: usize,
    #[arg(long, default_value_t = 16)]
    horizon: usize,
    /// Controlled agent ids; default the ego.
    #[arg(long, value_delimiter = ',')]
    controlled: Vec<u32>,
    /// Agents that must replay their log.
    #[arg(long, value_delimiter = ',')]
    replayed: Vec<u32>,
    #[arg(long)]
    seed: u64,
    #[arg(long, default_value_t = 1)]
    workers: usize,
}

#[derive(Args, Serialize)]
struct EvalArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    rollouts: PathBuf,
    /// Logged scenes for minADE.
    #[arg(long)]
    ground_truth: Option<PathBuf>,
    /// Text report; a JSON record is written next to it.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Serialize)]
struct DpoArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    scenes: PathBuf,
    #[arg(long)]
    profile: DriverProfile,
    #[arg(long)]
    out: PathBuf,
    /// Candidate rollouts per scene.
    #[arg(long, default_value_t = 8)]
    samples: usize,
    #[arg(long, default_value = "top-p:0.9")]
    sampler: String,
    #[arg(long, default_value_t = 16)]
    horizon: usize,
    #[arg(long, default_value_t = 1.0)]
    beta: f64,
    #[arg(long, default_value_t = 1e-5)]
    lr: f64,
    #[arg(long, default_value_t = 50)]
    steps: usize,
    /// Pairs per step; 0 uses all.
    #[arg(long, default_value_t = 0)]
    batch_size: usize,
    #[arg(long)]
    seed: u64,
    #[arg(long, default_value_t = 1)]
    workers: usize,
}

#[derive(Args, Serialize)]
struct PlotArgs {
    #[command(flatten)]
    common: Common,
    /// Scenario or rollout file.
    #[arg(long)]
    scene: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Agents drawn in red; default the ego or the controlled agents.
    #[arg(long, value_delimiter = ',')]
    highlight: Vec<u32>,
    #[arg(long, default_value_t = 800.0)]
    width: f64,
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    if let Err(e) = run() {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}

fn run() -> Result<()> {
    let argv = config::expand(&Cli::command(), std::env::args().collect())?;
    let cli = Cli::parse_from(argv);
    let (summary, json_summary) = match &cli.command {
        Cmd::GenScenes(a) => (gen_scenes(a)?, a.common.json_summary),
        Cmd::Tokenize(a) => (tokenize(a)?, a.common.json_summary),
        Cmd::Train(a) => (train_cmd(a)?, a.common.json_summary),
        Cmd::Rollout(a) => (rollout(a)?, a.common.json_summary),
        Cmd::Eval(a) => (eval(a)?, a.common.json_summary),
        Cmd::Dpo(a) => (dpo(a)?, a.common.json_summary),
        Cmd::Plot(a) => (plot(a)?, a.common.json_summary),
    };
    if json_summary {
        println!("{}", serde_json::to_string(&summary)?);
    } else if let Some(obj) = summary.as_object() {
        for (k, v) in obj {
            println!("{k}: {v}");
        }
    }
    Ok(())
}

/// Writes the effective settings of a run as JSON.
fn echo_config(path: &Path, command: &str, args: &impl Serialize, extra: serde_json::Value) -> Result<()> {
    let record = json!({ "command": command, "args": args, "resolved": extra });
    fs::write(path, serde_json::to_string_pretty(&record)? + "\n").with_context(|| format!("writing {}", path.display()))
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn is_scene_file(p: &Path) -> bool {
    let name = p.file_name().and_then(|n| n.to_str()).unwrap_or("");
    name.ends_with(".jsonl") && !name.ends_with(".tokens.jsonl") && p.is_file()
}

fn scene_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .with_context(|| format!("reading directory {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| is_scene_file(p))
        .collect();
    files.sort();
    if files.is_empty() {
        bail!("no scenario files in {}", dir.display());
    }
    Ok(files)
}

fn load_scenes(dir: &Path) -> Result<Vec<Scenario>> {
    scene_files(dir)?.iter().map(|p| load_scenario(p).with_context(|| format!("loading {}", p.display()))).collect()
}

fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

fn gen_scenes(a: &GenArgs) -> Result<serde_json::Value> {
    let mut cfg = match &a.gen_config {
        Some(p) => GenConfig::parse(&fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?)?,
        None => GenConfig::empty(),
    };
    for kv in &a.set {
        let (k, v) = kv.split_once('=').with_context(|| format!("--set expects KEY=VALUE, got `{kv}`"))?;
        cfg.set(k.trim(), v.trim())?;
    }
    cfg.validate()?;
    let scenes = generate_synthetic(&cfg, a.seed)?;
    fs::create_dir_all(&a.out)?;
    let mut manifest = String::new();
    for s in &scenes {
        let name = format!("{}.jsonl", s.id);
        let path = a.out.join(&name);
        save_scenario(s, &path)?;
        manifest.push_str(&format!("{name}\t{}\n", sha256_hex(&fs::read(&path)?)));
    }
    fs::write(a.out.join("manifest.tsv"), &manifest)?;
    fs::write(a.out.join("gen_config.txt"), cfg.to_kv())?;
    echo_config(&a.out.join("run_config.json"), "gen-scenes", a, serde_json::to_value(&cfg)?)?;
    Ok(json!({ "scenes": scenes.len(), "out": a.out, "manifest_sha256": sha256_hex(manifest.as_bytes()) }))
}

fn tokenize(a: &TokenizeArgs) -> Result<serde_json::Value> {
    let files = scene_files(&a.scenes)?;
    let mut records: Vec<TokenRecord> = vec![];
    let mut skipped = 0usize;
    for p in &files {
        let s = match load_scenario(p) {
            Ok(s) => s,
            Err(e) => {
                log::warn!("skipping {}: {e}", p.display());
                skipped += 1;
                continue;
            }
        };
        let cfg = TokenizerConfig { window: a.k, dt: a.dt.unwrap_or(s.dt), ..TokenizerConfig::default() };
        records.extend(tokenize_scenario(&s, &cfg)?);
    }
    if records.is_empty() {
        bail!("no tracks could be tokenized in {}", a.scenes.display());
    }
    save_token_dataset(&records, &a.out)?;
    let n = records.len() as f64;
    let residual_mean = records.iter().map(|r| r.residual_mean).sum::<f64>() / n;
    let residual_max = records.iter().map(|r| r.residual_max).fold(0.0, f64::max);
    let with_truth: Vec<f64> = records.iter().filter_map(|r| r.recovered).collect();
    let recovery = (!with_truth.is_empty()).then(|| with_truth.iter().sum::<f64>() / with_truth.len() as f64);
    let tokens: usize = records.iter().map(|r| r.tokens.len()).sum();
    echo_config(&with_suffix(&a.out, ".config.json"), "tokenize", a, json!({ "files": files.len() }))?;
    Ok(json!({
        "tracks": records.len(),
        "tokens": tokens,
        "skipped_files": skipped,
        "residual_mean": residual_mean,
        "residual_max": residual_max,
        "recovery_rate": recovery,
    }))
}

fn sequences(scenes: &[Scenario], tokens: Option<&HashMap<(String, u32), Vec<ActionToken>>>, agents: AgentSet, unified: bool) -> Result<Vec<Sequence>> {
    let mut out = vec![];
    for s in scenes {
        let index = MapIndex::new(s, SceneConfig::default());
        for tr in &s.tracks {
            if agents == AgentSet::Ego && s.ego != Some(tr.id()) {
                continue;
            }
            if tr.valid.iter().filter(|v| **v).count() < 2 {
                continue;
            }
            let toks = match tokens {
                Some(map) => match map.get(&(s.id.clone(), tr.id())) {
                    Some(t) => t.clone(),
                    None => continue,
                },
                None => history_tokens(tr, s.dt)?,
            };
            out.extend(sequences_for_agent(s, &index, tr.id(), &toks, unified)?);
        }
    }
    Ok(out)
}

fn train_cmd(a: &TrainArgs) -> Result<serde_json::Value> {
    let model_cfg = a.model.config();
    model_cfg.validate()?;
    let cfg = TrainConfig {
        epochs: a.epochs,
        batch_size: a.batch_size,
        lr: a.lr,
        pct_start: a.pct_start,
        clip_norm: a.clip_norm,
        seed: a.seed,
        workers: a.workers,
        ..TrainConfig::default()
    };
    cfg.validate()?;
    let scenes = load_scenes(&a.scenes)?;
    let (train_scenes, val_scenes) = match &a.val_scenes {
        Some(dir) => (scenes, load_scenes(dir)?),
        None => {
            let (mut tr, mut va) = (vec![], vec![]);
            for (i, s) in scenes.into_iter().enumerate() {
                if i % 10 == 9 { va.push(s) } else { tr.push(s) }
            }
            (tr, va)
        }
    };
    let token_map = match &a.tokens {
        Some(p) => Some(load_token_dataset(p)?.into_iter().map(|r| ((r.scenario, r.agent), r.tokens)).collect::<HashMap<_, _>>()),
        None => None,
    };
    let unified = model_cfg.unified_spatial_repr;
    let train_set = sequences(&train_scenes, token_map.as_ref(), a.agents, unified)?;
    let val_set = sequences(&val_scenes, token_map.as_ref(), a.agents, unified)?;
    if train_set.is_empty() {
        bail!("training set is empty");
    }
    let mut model = Model::new(model_cfg.clone(), a.seed)?;
    let curve = train(&mut model, &train_set, &val_set, &cfg)?;
    save_checkpoint(&model, &a.out)?;
    let curve_path = a.loss_curve.clone().unwrap_or_else(|| with_suffix(&a.out, ".loss.csv"));
    curve.save(&curve_path)?;
    echo_config(
        &with_suffix(&a.out, ".config.json"),
        "train",
        a,
        json!({ "model": model_cfg, "train": cfg, "train_sequences": train_set.len(), "val_sequences": val_set.len() }),
    )?;
    let last = curve.epochs.last();
    Ok(json!({
        "parameters": model.num_weights(),
        "train_sequences": train_set.len(),
        "val_sequences": val_set.len(),
        "final_train_loss": last.map(|e| e.train_loss),
        "final_val_ce": curve.final_val_ce(),
        "checkpoint": a.out,
        "loss_curve": curve_path,
    }))
}

fn rollout(a: &RolloutArgs) -> Result<serde_json::Value> {
    let sampler: Sampler = a.sampler.parse()?;
    let cfg = RolloutConfig {
        horizon: a.horizon,
        sampler,
        controlled: a.controlled.clone(),
        replayed: a.replayed.clone(),
        seed: a.seed,
        samples: a.samples,
        workers: a.workers,
    };
    cfg.validate()?;
    let model = load_checkpoint(&a.checkpoint)?;
    let scenes = load_scenes(&a.scenes)?;
    fs::create_dir_all(&a.out)?;
    let mut written = 0;
    let mut infeasible = 0;
    for s in &scenes {
        for (k, sim) in batch_rollouts(s, &model, &cfg)?.iter().enumerate() {
            if !sim.is_feasible() {
                infeasible += 1;
            }
            save_simulated(sim, a.out.join(format!("{}_k{k:03}.jsonl", s.id)))?;
            written += 1;
        }
    }
    echo_config(&a.out.join("run_config.json"), "rollout", a, serde_json::to_value(&cfg)?)?;
    Ok(json!({ "scenes": scenes.len(), "rollouts": written, "infeasible": infeasible, "out": a.out }))
}

fn eval(a: &EvalArgs) -> Result<serde_json::Value> {
    let mut groups: BTreeMap<String, Vec<SimulatedScenario>> = BTreeMap::new();
    for p in scene_files(&a.rollouts)? {
        if !sidecar_path(&p).exists() {
            continue;
        }
        let sim = load_simulated(&p).with_context(|| format!("loading {}", p.display()))?;
        groups.entry(sim.scenario.id.clone()).or_default().push(sim);
    }
    if groups.is_empty() {
        bail!("no rollouts in {}", a.rollouts.display());
    }
    let gt = match &a.ground_truth {
        Some(dir) => {
            let by_id: HashMap<String, Scenario> = load_scenes(dir)?.into_iter().map(|s| (s.id.clone(), s)).collect();
            let ordered = groups
                .keys()
                .map(|id| by_id.get(id).cloned().with_context(|| format!("no ground truth for scenario {id}")))
                .collect::<Result<Vec<_>>>()?;
            Some(ordered)
        }
        None => None,
    };
    let groups: Vec<Vec<SimulatedScenario>> = groups.into_values().collect();
    let report = evaluate(&groups, gt.as_deref())?;
    if let Some(out) = &a.out {
        fs::write(out, report.to_text())?;
        fs::write(with_suffix(out, ".json"), serde_json::to_string_pretty(&report)? + "\n")?;
        echo_config(&with_suffix(out, ".config.json"), "eval", a, json!({}))?;
    } else {
        eprint!("{}", report.to_text());
    }
    Ok(serde_json::to_value(&report)?)
}

fn dpo(a: &DpoArgs) -> Result<serde_json::Value> {
    let sampler: Sampler = a.sampler.parse()?;
    let reference = load_checkpoint(&a.checkpoint)?;
    let scenes = load_scenes(&a.scenes)?;
    let rcfg = RolloutConfig { horizon: a.horizon, sampler, seed: a.seed, samples: a.samples, workers: a.workers, ..RolloutConfig::default() };
    rcfg.validate()?;
    let mut pairs = vec![];
    for s in &scenes {
        let Some(ego) = s.ego else { continue };
        let rollouts = batch_rollouts(s, &reference, &rcfg)?;
        pairs.extend(build_pairs(&rollouts, ego, a.profile)?);
    }
    if pairs.is_empty() {
        bail!("no preference pairs for profile {}", a.profile);
    }
    let examples = prepare_examples(&reference, &pairs, &scenes, a.workers)?;
    let cfg = DpoConfig { beta: a.beta, lr: a.lr, steps: a.steps, batch_size: a.batch_size, seed: a.seed, workers: a.workers };
    let (model, report) = dpo_finetune(&reference, &examples, &cfg)?;
    save_checkpoint(&model, &a.out)?;
    save_pairs(&pairs, with_suffix(&a.out, ".pairs.jsonl"))?;
    echo_config(&with_suffix(&a.out, ".config.json"), "dpo", a, json!({ "rollout": rcfg, "dpo": cfg }))?;
    Ok(json!({
        "profile": a.profile.name(),
        "pairs": report.pairs,
        "initial_loss": report.losses.first(),
        "final_loss": report.final_loss,
        "initial_margin": report.initial_margin,
        "final_margin": report.final_margin,
        "checkpoint": a.out,
    }))
}

fn plot(a: &PlotArgs) -> Result<serde_json::Value> {
    let (scenario, start, default_hl) = if sidecar_path(&a.scene).exists() {
        let sim = load_simulated(&a.scene)?;
        let c = sim.controlled();
        (sim.scenario, sim.start, c)
    } else {
        let s = load_scenario(&a.scene)?;
        let hl = s.ego.into_iter().collect();
        let start = s.current_step();
        (s, start, hl)
    };
    let highlight = if a.highlight.is_empty() { default_hl } else { a.highlight.clone() };
    let opts = PlotOptions { width: a.width, ..PlotOptions::default() };
    fs::write(&a.out, render_svg(&scenario, start, &highlight, &opts))?;
    Ok(json!({ "scenario": scenario.id, "out": a.out }))
}
