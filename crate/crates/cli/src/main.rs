use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};

use eagle_forge::checkpoint;
use eagle_forge::eval::{evaluate, EvalItem};
use eagle_forge::geo::{read_corpus, write_dataset, DatasetSpec, Family, QaRecord, EVAL_FILE};
use eagle_forge::model::{encode_image, Group, ModelParams};
use eagle_forge::rollout::{patch_saliency, render_heatmap, rollout};
use eagle_forge::tensor::Rng;
use eagle_forge::train::{
    ablation_matrix, checkpoint_path, run_pipeline, run_stages, AblationSetup, Corpora, Preset, RunConfig,
    StageObserver,
};
use eagle_forge::{Error, Result};

#[derive(Parser)]
#[command(name = "eagle-forge", version, about = "Two-stage visual instruction tuning on synthetic geometry")]
struct Cli {
    /// Root seed; overrides the config file's seed when given.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Run configuration: a TOML file or a preset name (desk, large).
    #[arg(long, global = true)]
    config: Option<String>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Overwrite a non-empty output directory.
    #[arg(long, global = true)]
    force: bool,
    /// Worker threads (default: all cores).
    #[arg(long, global = true, env = "EAGLE_FORGE_THREADS")]
    threads: Option<usize>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate caption, QA and held-out evaluation corpora.
    GenData(GenData),
    /// Run both stages, or a single one.
    Train(Train),
    /// Train and evaluate every ablation configuration.
    Ablate(Ablate),
    /// Zero-shot multiple-choice evaluation of a checkpoint.
    Eval(Eval),
    /// Attention-rollout heatmaps for a few images.
    Rollout(Rollout),
    /// Print a checkpoint's tensors, groups and checksums.
    Inspect(Inspect),
}

#[derive(Args)]
struct GenData {
    #[arg(long, default_value_t = 2000)]
    captions: usize,
    #[arg(long, default_value_t = 4000)]
    qa: usize,
    #[arg(long, default_value_t = 400)]
    eval: usize,
    /// Comma-separated diagram families (default: all).
    #[arg(long, value_delimiter = ',')]
    families: Vec<String>,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum StageSel {
    All,
    Preliminary,
    Advanced,
}

#[derive(Args)]
struct DataArg {
    /// Directory holding the generated corpora (used with preset configs).
    #[arg(long, default_value = "data")]
    data: PathBuf,
}

#[derive(Args)]
struct Train {
    #[command(flatten)]
    data: DataArg,
    #[arg(long, value_enum, default_value_t = StageSel::All)]
    stage: StageSel,
    /// Start from this checkpoint instead of a fresh initialization.
    #[arg(long)]
    from: Option<PathBuf>,
}

#[derive(Args)]
struct Ablate {
    #[command(flatten)]
    data: DataArg,
    /// Optimizer steps per stage for every row.
    #[arg(long, default_value_t = 50)]
    steps: usize,
    /// Evaluation items per row.
    #[arg(long, default_value_t = 100)]
    eval_items: usize,
}

#[derive(Args)]
struct Eval {
    #[command(flatten)]
    data: DataArg,
    /// Checkpoint to evaluate; omitted means a fresh random initialization.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Evaluation corpus (default: <data>/eval.jsonl).
    #[arg(long)]
    items: Option<PathBuf>,
    #[arg(long)]
    limit: Option<usize>,
}

#[derive(Args)]
struct Rollout {
    #[command(flatten)]
    data: DataArg,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Corpus whose images are visualized (default: <data>/eval.jsonl).
    #[arg(long)]
    items: Option<PathBuf>,
    #[arg(long, default_value_t = 4)]
    limit: usize,
    /// Vision token whose attribution row is drawn (default: the last one).
    #[arg(long)]
    query: Option<usize>,
}

#[derive(Args)]
struct Inspect {
    checkpoint: PathBuf,
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Usage(_) | Error::Config(_) | Error::Rank { .. } => 2,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: cannot start {n} threads: {e}");
            return ExitCode::from(2);
        }
    }
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn run(cli: &Cli) -> Result<()> {
    match &cli.cmd {
        Cmd::GenData(a) => gen_data(cli, a),
        Cmd::Train(a) => train(cli, a),
        Cmd::Ablate(a) => ablate(cli, a),
        Cmd::Eval(a) => eval(cli, a),
        Cmd::Rollout(a) => rollout_cmd(cli, a),
        Cmd::Inspect(a) => inspect(a),
    }
}

/// Creates `dir`, refusing to reuse a non-empty one unless `--force`.
fn prepare_out(dir: &Path, force: bool) -> Result<()> {
    if let Ok(mut entries) = std::fs::read_dir(dir) {
        if entries.next().is_some() && !force {
            return Err(Error::Usage(format!(
                "{} is not empty; pass --force to overwrite",
                dir.display()
            )));
        }
    }
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn out_dir(cli: &Cli, default: &str) -> PathBuf {
    cli.out.clone().unwrap_or_else(|| PathBuf::from(default))
}

fn gen_data(cli: &Cli, a: &GenData) -> Result<()> {
    let families = if a.families.is_empty() {
        Family::ALL.to_vec()
    } else {
        a.families
            .iter()
            .map(|f| f.parse::<Family>().map_err(|_| Error::Usage(format!("unknown family {f:?}"))))
            .collect::<Result<_>>()?
    };
    let dir = out_dir(cli, "data");
    prepare_out(&dir, cli.force)?;
    let spec = DatasetSpec {
        captions: a.captions,
        qa: a.qa,
        eval: a.eval,
        families,
    };
    let m = write_dataset(&dir, &spec, cli.seed.unwrap_or(0))?;
    println!(
        "wrote {} captions, {} qa, {} eval records to {}",
        spec.captions,
        spec.qa,
        spec.eval,
        dir.display()
    );
    println!("checksum={}", m.checksum);
    Ok(())
}

/// Resolves `--config` as a file or a preset name, then applies flag overrides.
fn load_config(cli: &Cli, data: &DataArg, default_out: &str) -> Result<RunConfig> {
    let mut cfg = match cli.config.as_deref() {
        Some(c) if Path::new(c).is_file() => RunConfig::load(Path::new(c))?,
        Some(c) => match c.parse::<Preset>() {
            Ok(p) => RunConfig {
                preset: p,
                ..RunConfig::with_data_dir(&data.data, Path::new(default_out))
            },
            Err(_) => return Err(Error::Config(format!("{c}: no such config file or preset"))),
        },
        None => RunConfig::with_data_dir(&data.data, Path::new(default_out)),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(o) = &cli.out {
        cfg.out_dir = o.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

struct Progress {
    start: Instant,
    every: usize,
}

impl StageObserver for Progress {
    fn step(&mut self, step: usize, total: usize, loss: f64) {
        if step % self.every == 0 || step + 1 == total {
            eprintln!(
                "  step {:>5}/{total}  loss {loss:.4}  {:.0}s",
                step + 1,
                self.start.elapsed().as_secs_f64()
            );
        }
    }
}

fn progress() -> Progress {
    Progress {
        start: Instant::now(),
        every: 25,
    }
}

/// Saves the resolved config as `run.toml` with absolute paths, so it can be
/// passed back with `--config` from anywhere.
fn write_run_config(cfg: &RunConfig) -> Result<()> {
    let abs = |p: &Path| std::path::absolute(p).map_err(|e| Error::io(p, e));
    let mut saved = cfg.clone();
    saved.out_dir = abs(&cfg.out_dir)?;
    saved.data.captions = abs(&cfg.data.captions)?;
    saved.data.qa = abs(&cfg.data.qa)?;
    saved.data.eval = cfg.data.eval.as_deref().map(abs).transpose()?;
    let path = cfg.out_dir.join("run.toml");
    std::fs::write(&path, saved.to_toml()?).map_err(|e| Error::io(&path, e))
}

fn train(cli: &Cli, a: &Train) -> Result<()> {
    let mut cfg = load_config(cli, &a.data, "runs/train")?;
    if a.stage == StageSel::Advanced {
        cfg.skip_preliminary = true;
    }
    cfg.check_paths(false)?;
    let mut plans = cfg.plans();
    if a.stage == StageSel::Preliminary {
        plans.truncate(1);
    }
    prepare_out(&cfg.out_dir, cli.force)?;
    write_run_config(&cfg)?;
    let corpora = Corpora::load(&cfg.data)?;
    let reports = match &a.from {
        Some(ckpt) => {
            let mut params = checkpoint::load(ckpt)?;
            let rng = Rng::new(cfg.seed).split("train");
            run_stages(&mut params, &plans, &corpora, &rng, Some(&cfg.out_dir), &mut progress())?
        }
        None if a.stage == StageSel::Preliminary => {
            let rng = Rng::new(cfg.seed);
            let mut params = ModelParams::new(cfg.model.clone(), &rng.split("init"))?;
            run_stages(&mut params, &plans, &corpora, &rng.split("train"), Some(&cfg.out_dir), &mut progress())?
        }
        None => run_pipeline(&cfg, &corpora, &mut progress())?.1,
    };
    for r in &reports {
        print!("{}", r.summary());
        println!("  checkpoint {}", checkpoint_path(&cfg.out_dir, &r.stage).display());
        let bad = r.frozen_violations();
        if !bad.is_empty() {
            return Err(Error::Internal(format!("frozen groups changed in {}: {bad:?}", r.stage)));
        }
    }
    Ok(())
}

fn eval_items(path: &Path, limit: Option<usize>) -> Result<Vec<EvalItem>> {
    let records: Vec<QaRecord> = read_corpus(path)?;
    let n = limit.unwrap_or(records.len()).min(records.len());
    records[..n].iter().map(EvalItem::from_record).collect()
}

fn ablate(cli: &Cli, a: &Ablate) -> Result<()> {
    let cfg = load_config(cli, &a.data, "runs/ablate")?;
    cfg.check_paths(true)?;
    prepare_out(&cfg.out_dir, cli.force)?;
    let corpora = Corpora::load(&cfg.data)?;
    let items = eval_items(cfg.data.eval.as_ref().expect("checked"), Some(a.eval_items))?;
    let setup = AblationSetup {
        model: cfg.model.clone(),
        preset: cfg.preset,
        seed: cfg.seed,
        max_steps: Some(a.steps),
    };
    let table = ablation_matrix(&setup, &corpora, &items, |r| {
        eprintln!("  {:<28} accuracy {:.4}", r.row.label(), r.accuracy);
    })?;
    let text = table.render();
    let path = cfg.out_dir.join("ablation.txt");
    std::fs::write(&path, &text).map_err(|e| Error::io(&path, e))?;
    print!("{text}");
    if !table.all_frozen_intact() {
        return Err(Error::Internal("a frozen group changed during the ablation".into()));
    }
    Ok(())
}

/// A checkpoint, or a fresh model from the configured seed.
fn model_for(cli: &Cli, data: &DataArg, ckpt: Option<&Path>) -> Result<(ModelParams, RunConfig)> {
    let cfg = load_config(cli, data, "runs/eval")?;
    let params = match ckpt {
        Some(p) => checkpoint::load(p)?,
        None => ModelParams::new(cfg.model.clone(), &Rng::new(cfg.seed).split("init"))?,
    };
    Ok((params, cfg))
}

fn eval(cli: &Cli, a: &Eval) -> Result<()> {
    let (params, cfg) = model_for(cli, &a.data, a.checkpoint.as_deref())?;
    let path = a.items.clone().unwrap_or_else(|| a.data.data.join(EVAL_FILE));
    let items = eval_items(&path, a.limit)?;
    std::fs::create_dir_all(&cfg.out_dir).map_err(|e| Error::io(&cfg.out_dir, e))?;
    let report = evaluate(&params, &items)?;
    let out = cfg.out_dir.join("eval_report.txt");
    report.write(&out)?;
    print!("{}", report.footer());
    println!("report {}", out.display());
    Ok(())
}

fn rollout_cmd(cli: &Cli, a: &Rollout) -> Result<()> {
    let (params, cfg) = model_for(cli, &a.data, a.checkpoint.as_deref())?;
    let path = a.items.clone().unwrap_or_else(|| a.data.data.join(EVAL_FILE));
    let records: Vec<QaRecord> = read_corpus(&path)?;
    std::fs::create_dir_all(&cfg.out_dir).map_err(|e| Error::io(&cfg.out_dir, e))?;
    for r in records.iter().take(a.limit) {
        let (_, record) = encode_image(&params, &r.image)?;
        let map = rollout(&record)?;
        let weights = patch_saliency(&map, a.query, 0..record.tokens)?;
        let heat = render_heatmap(&r.image, &weights)?;
        println!("{}", heat.write(&cfg.out_dir, &r.id)?.display());
    }
    Ok(())
}

fn inspect(a: &Inspect) -> Result<()> {
    let bytes = std::fs::read(&a.checkpoint).map_err(|e| Error::io(&a.checkpoint, e))?;
    let (header, _) = checkpoint::read_header(&bytes)?;
    let params = checkpoint::from_bytes(&bytes)?;
    println!("parameters {}", params.num_parameters());
    for g in Group::ALL {
        println!("group {:<9} mode {:<6} sha256 {}", g.as_str(), params.mode(g).as_str(), params.group_checksum(g));
    }
    for t in &header.tensors {
        let shape: Vec<String> = t.shape.iter().map(usize::to_string).collect();
        println!("tensor {:<40} {:<9} {}", t.name, t.group, shape.join("x"));
    }
    Ok(())
}
