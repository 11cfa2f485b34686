use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use boxprompt::api::PromptRequest;
use boxprompt::experiments::{self, CorpusSettings, SPS_VALUES};
use boxprompt::Service;
use boxprompt_core::checkpoint;
use boxprompt_core::config::Config;
use boxprompt_core::image::Image;
use boxprompt_core::pipeline::train::fit;
use boxprompt_core::pipeline::Model;
use boxprompt_core::synthlab::{self, io, GeneratorProfile, InformationBudgetParams, Scene, BIN_EDGES};
use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "boxprompt", version, about = "Box-promptable instance segmentation at desk scale")]
struct Cli {
    /// TOML configuration file; defaults apply to every key it leaves out.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override any configuration key, e.g. `--set model.gpm.loops=3`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Synthesize a scene corpus from a generator profile.
    Gen(GenArgs),
    /// Foreground-ratio histogram of a corpus.
    Stats(StatsArgs),
    /// Train a model and write a checkpoint.
    Train(TrainArgs),
    /// AP report of a checkpoint, or the with/without prompt modules comparison.
    Eval(EvalArgs),
    /// Sweep the region crop side and emit the AP curve as CSV.
    AblateSps(SweepArgs),
    /// Start the HTTP session service.
    Serve(ServeArgs),
    /// One-shot box-prompted segmentation of an image.
    Prompt(PromptArgs),
    /// Per-stage information budget table.
    Budget(BudgetArgs),
}

/// Corpus flags shared by commands that can generate scenes on the fly.
#[derive(Args, Clone)]
struct DataArgs {
    /// Generator profile (`ssdd-like` or `coco-like`).
    #[arg(long)]
    profile: Option<String>,
    /// Number of scenes.
    #[arg(long)]
    count: Option<usize>,
    /// Scene side in pixels.
    #[arg(long)]
    size: Option<usize>,
    /// Corpus seed.
    #[arg(long = "data-seed")]
    data_seed: Option<u64>,
}

#[derive(Args)]
struct GenArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct StatsArgs {
    /// Corpus directory written by `gen`; without it scenes are generated.
    #[arg(long)]
    data: Option<PathBuf>,
    #[command(flatten)]
    gen: DataArgs,
    #[arg(long)]
    json: bool,
}

/// Model and training flags; each overrides its configuration key.
#[derive(Args, Clone)]
struct ModelArgs {
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long = "frac-gt")]
    frac_gt: Option<f64>,
    #[arg(long)]
    jitter: Option<f64>,
    /// Region crop side of the prompt encoders.
    #[arg(long = "s-ps")]
    s_ps: Option<usize>,
    #[arg(long)]
    loops: Option<usize>,
    #[arg(long)]
    heads: Option<usize>,
    /// Denominator guard of the area loss.
    #[arg(long)]
    eps: Option<f64>,
    /// Train without the prompt encoders and area loss.
    #[arg(long = "no-prompts")]
    no_prompts: bool,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    seed: u64,
    #[arg(long)]
    data: Option<PathBuf>,
    #[command(flatten)]
    gen: DataArgs,
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long, default_value = "model.bxpt")]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    /// Checkpoint to evaluate; omit together with `--ablation`.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    data: Option<PathBuf>,
    #[command(flatten)]
    gen: DataArgs,
    /// Also report AP with ground-truth boxes as prompts.
    #[arg(long)]
    prompted: bool,
    /// Train with and without prompt modules on fresh corpora and compare.
    #[arg(long)]
    ablation: bool,
    #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
    seeds: Vec<u64>,
    #[arg(long, default_value_t = 200)]
    train_scenes: usize,
    #[arg(long, default_value_t = 50)]
    val_scenes: usize,
    #[command(flatten)]
    model: ModelArgs,
    /// Write ablation rows as CSV.
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Args)]
struct SweepArgs {
    #[arg(long, value_delimiter = ',', default_values_t = SPS_VALUES)]
    values: Vec<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 200)]
    train_scenes: usize,
    #[arg(long, default_value_t = 50)]
    val_scenes: usize,
    #[command(flatten)]
    model: ModelArgs,
    /// CSV destination; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ServeArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    addr: Option<String>,
    #[arg(long = "max-sessions")]
    max_sessions: Option<usize>,
    #[arg(long = "max-image-side")]
    max_image_side: Option<usize>,
}

#[derive(Args)]
struct PromptArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    image: PathBuf,
    /// JSON file: `{"boxes": [[x0, y0, x1, y1], ...]}` or a bare list of boxes.
    #[arg(long)]
    boxes: PathBuf,
}

#[derive(Args)]
struct BudgetArgs {
    #[arg(long, default_value_t = 0.5)]
    beta: f64,
    #[arg(long, default_value_t = 0.05)]
    alpha: f64,
    #[arg(long, default_value_t = 1.0)]
    gamma: f64,
    /// Number of downsampling stages.
    #[arg(long, default_value_t = 4)]
    stages: usize,
    /// Stage whose value is singled out.
    #[arg(long, default_value_t = 2)]
    stage: usize,
    #[arg(long, default_value_t = 1.0)]
    signal: f64,
    #[arg(long)]
    json: bool,
}

fn main() -> Result<()> {
    tracing_subscriber::fmt()
        .with_env_filter(tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "info".into()))
        .with_writer(std::io::stderr)
        .init();
    let cli = Cli::parse();
    let mut cfg = match &cli.config {
        Some(p) => Config::load(p).with_context(|| format!("loading {}", p.display()))?,
        None => Config::default(),
    };
    for o in &cli.overrides {
        let (k, v) = o.split_once('=').with_context(|| format!("`{o}` is not KEY=VALUE"))?;
        cfg.set(k.trim(), v.trim())?;
    }
    match cli.command {
        Command::Gen(a) => gen(cfg, a),
        Command::Stats(a) => stats(cfg, a),
        Command::Train(a) => train(cfg, a),
        Command::Eval(a) => eval(cfg, a),
        Command::AblateSps(a) => sweep(cfg, a),
        Command::Serve(a) => serve(cfg, a),
        Command::Prompt(a) => prompt(a),
        Command::Budget(a) => budget(a),
    }
}

fn apply_data(cfg: &mut Config, a: &DataArgs) -> Result<()> {
    if let Some(p) = &a.profile {
        cfg.set("data.profile", &format!("\"{p}\""))?;
    }
    for (key, v) in [("data.count", a.count), ("data.size", a.size)] {
        if let Some(v) = v {
            cfg.set(key, &v.to_string())?;
        }
    }
    if let Some(s) = a.data_seed {
        cfg.set("data.seed", &s.to_string())?;
    }
    Ok(())
}

fn apply_model(cfg: &mut Config, a: &ModelArgs) -> Result<()> {
    let pairs: [(&str, Option<String>); 8] = [
        ("train.steps", a.steps.map(|v| v.to_string())),
        ("train.lr", a.lr.map(|v| format!("{v:?}"))),
        ("train.frac_gt", a.frac_gt.map(|v| format!("{v:?}"))),
        ("train.jitter", a.jitter.map(|v| format!("{v:?}"))),
        ("model.lpm.roi_size", a.s_ps.map(|v| v.to_string())),
        ("model.gpm.loops", a.loops.map(|v| v.to_string())),
        ("model.gpm.heads", a.heads.map(|v| v.to_string())),
        ("model.area_eps", a.eps.map(|v| format!("{v:?}"))),
    ];
    for (k, v) in pairs {
        if let Some(v) = v {
            cfg.set(k, &v)?;
        }
    }
    if a.no_prompts {
        cfg.model = cfg.model.baseline();
    }
    Ok(())
}

fn generated(cfg: &Config) -> Result<Vec<Scene>> {
    let p = GeneratorProfile::by_name(&cfg.data.profile)?;
    Ok(experiments::corpus(&p, cfg.data.size, cfg.data.count, 0, cfg.data.seed)?.0)
}

fn scenes(cfg: &Config, dir: Option<&Path>) -> Result<Vec<Scene>> {
    match dir {
        Some(d) => io::read_corpus(d).with_context(|| format!("reading corpus {}", d.display())),
        None => generated(cfg),
    }
}

fn gen(mut cfg: Config, a: GenArgs) -> Result<()> {
    apply_data(&mut cfg, &a.data)?;
    let s = generated(&cfg)?;
    let m = io::write_corpus(&a.out, &s, &cfg.data.profile)?;
    println!("wrote {} scenes ({}) to {}", m.scenes.len(), m.profile, a.out.display());
    Ok(())
}

fn stats(mut cfg: Config, a: StatsArgs) -> Result<()> {
    apply_data(&mut cfg, &a.gen)?;
    let s = scenes(&cfg, a.data.as_deref())?;
    let st = synthlab::foreground_ratio_stats(&s);
    if a.json {
        println!("{}", serde_json::to_string_pretty(&st)?);
        return Ok(());
    }
    let fr = st.fractions();
    println!("foreground ratio   images   share");
    for (i, (c, f)) in st.counts.iter().zip(fr).enumerate() {
        let hi = BIN_EDGES.get(i + 1).map_or("1.0]".to_string(), |e| format!("{e:.1})"));
        println!("[{:.1}, {:<5}       {:>6}   {:>5.1}%", BIN_EDGES[i], hi, c, 100.0 * f);
    }
    println!("total              {:>6}", s.len());
    Ok(())
}

fn train(mut cfg: Config, a: TrainArgs) -> Result<()> {
    apply_data(&mut cfg, &a.gen)?;
    apply_model(&mut cfg, &a.model)?;
    cfg.set("train.seed", &a.seed.to_string())?;
    let s = scenes(&cfg, a.data.as_deref())?;
    let mut model = Model::init(cfg.model.clone(), a.seed)?;
    let every = cfg.train.log_every.max(1);
    let t = std::time::Instant::now();
    let mut window = Vec::new();
    fit(&mut model, &s, &cfg.train, a.seed, |i, b| {
        window.push(b.l_total);
        if (i + 1) % every == 0 {
            let mean = window.iter().sum::<f64>() / window.len() as f64;
            tracing::info!(step = i + 1, loss = format!("{mean:.4}"), "training");
            window.clear();
        }
    })?;
    let fp = checkpoint::save(&a.out, &model, a.seed, cfg.train.steps as u64)?;
    println!(
        "trained {} steps in {:.1}s; wrote {} (fingerprint {fp})",
        cfg.train.steps,
        t.elapsed().as_secs_f64(),
        a.out.display()
    );
    Ok(())
}

fn eval(mut cfg: Config, a: EvalArgs) -> Result<()> {
    apply_data(&mut cfg, &a.gen)?;
    apply_model(&mut cfg, &a.model)?;
    if a.ablation {
        let data = CorpusSettings {
            profile: cfg.data.profile.clone(),
            size: cfg.data.size,
            train: a.train_scenes,
            val: a.val_scenes,
        };
        println!("seed,variant,mask_ap,train_seconds");
        let rows = experiments::ablation(&cfg.model, &cfg.train, &data, &a.seeds, |r| {
            println!("{},{},{:.4},{:.1}", r.seed, r.variant, r.mask_ap, r.train_seconds);
        })?;
        if let Some(g) = experiments::mean_gain(&rows) {
            println!("mean mask AP gain of the prompt modules: {:+.2} points", 100.0 * g);
        }
        if let Some(p) = a.csv {
            std::fs::write(&p, experiments::to_csv(&rows)?)?;
        }
        return Ok(());
    }
    let Some(path) = a.checkpoint else {
        bail!("pass --checkpoint, or --ablation to train and compare");
    };
    let ck = checkpoint::load(&path)?;
    let s = scenes(&cfg, a.data.as_deref())?;
    let mut out = serde_json::json!({
        "checkpoint_fingerprint": ck.fingerprint,
        "scenes": s.len(),
        "automatic": experiments::evaluate_automatic(&ck.model, &s)?,
    });
    if a.prompted {
        out["prompted"] = serde_json::to_value(experiments::evaluate_prompted(&ck.model, &s)?)?;
    }
    println!("{}", serde_json::to_string_pretty(&out)?);
    Ok(())
}

fn sweep(mut cfg: Config, a: SweepArgs) -> Result<()> {
    apply_model(&mut cfg, &a.model)?;
    let data = CorpusSettings {
        profile: cfg.data.profile.clone(),
        size: cfg.data.size,
        train: a.train_scenes,
        val: a.val_scenes,
    };
    let points = experiments::crop_side_sweep(&cfg.model, &cfg.train, &data, &a.values, a.seed, |p| {
        tracing::info!(s_ps = p.s_ps, mask_ap = format!("{:.4}", p.mask_ap), "sweep point");
    })?;
    let text = experiments::to_csv(&points)?;
    match a.out {
        Some(p) => std::fs::write(&p, text)?,
        None => print!("{text}"),
    }
    Ok(())
}

fn serve(mut cfg: Config, a: ServeArgs) -> Result<()> {
    if let Some(v) = a.addr {
        cfg.set("serve.addr", &format!("\"{v}\""))?;
    }
    if let Some(v) = a.max_sessions {
        cfg.set("serve.max_sessions", &v.to_string())?;
    }
    if let Some(v) = a.max_image_side {
        cfg.set("serve.max_image_side", &v.to_string())?;
    }
    let ck = checkpoint::load(&a.checkpoint).with_context(|| format!("loading {}", a.checkpoint.display()))?;
    let svc = Arc::new(Service::from_checkpoint(ck, &cfg.serve));
    let rt = tokio::runtime::Runtime::new()?;
    rt.block_on(boxprompt::http::serve(svc, &cfg.serve.addr))?;
    Ok(())
}

fn prompt(a: PromptArgs) -> Result<()> {
    let ck = checkpoint::load(&a.checkpoint)?;
    let text = std::fs::read_to_string(&a.boxes)?;
    let req: PromptRequest = match serde_json::from_str(&text) {
        Ok(r) => r,
        Err(_) => PromptRequest {
            boxes: serde_json::from_str(&text).context("boxes file is neither {\"boxes\": [...]} nor a list")?,
        },
    };
    let svc = Service::from_checkpoint(ck, &Config::default().serve);
    let image = Image::load(&a.image)?;
    let created = svc.encode_image(image)?;
    let resp = svc.prompt(&created.session_id, &req)?;
    println!("{}", serde_json::to_string_pretty(&resp)?);
    Ok(())
}

fn budget(a: BudgetArgs) -> Result<()> {
    let p = InformationBudgetParams {
        beta: a.beta,
        alpha: a.alpha,
        gamma: a.gamma,
        stage: a.stage,
        downsample: a.stage as f64,
        stages: a.stages,
    };
    let b = synthlab::information_budget(&p, a.signal)?;
    if a.json {
        println!("{}", serde_json::to_string_pretty(&b)?);
        return Ok(());
    }
    println!("stage  downsample      value  undecayed");
    for s in &b.per_stage {
        println!("{:>5}  {:>10.2}  {:>9.4}  {:>9.4}", s.stage, s.downsample, s.value, s.undecayed);
    }
    println!("stage {} value: {:.4}", a.stage, b.focus);
    println!("decoder input (sum): {:.4} of {:.4} undecayed", b.decoder_input, b.undecayed_input);
    println!("prompt value: {:.4}", b.prompt);
    Ok(())
}
