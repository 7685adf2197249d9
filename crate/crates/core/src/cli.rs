//! Subcommands of the `featadv` binary.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use crate::checkpoint::{load_checkpoint, save_checkpoint};
use crate::config::RunConfig;
use crate::data::{category_distribution, generate_dataset, load_dataset, save_dataset, Dataset};
use crate::error::{Error, Result};
use crate::eval::{self, Benchmark, IouReport};
use crate::perturb::read_intensity_csv;
use crate::train::{self, Baseline, Phase, TrainState};

#[derive(Debug, Parser)]
#[command(name = "featadv", version, about = "Feature-space adversarial perturbation for domain-adaptive segmentation")]
pub struct Cli {
    /// TOML run configuration; every key is optional.
    #[arg(long, short, global = true)]
    pub config: Option<PathBuf>,

    /// Dotted-path override, e.g. `--set perturb.method=I-FGSM`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    pub overrides: Vec<String>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the source, target and target-evaluation datasets.
    GenData,
    /// Train G and F on labeled source data.
    Pretrain(PhaseArgs),
    /// Alternate perturbation and classifier/discriminator updates.
    Adapt(PhaseArgs),
    /// Train the baseline named by `train.baseline`.
    Baseline,
    /// Evaluate every available checkpoint on the target evaluation split.
    Eval,
    /// Train and evaluate an ablation grid.
    Ablate,
    /// Plot gradient log-intensities recorded during adaptation.
    Plot,
}

#[derive(Debug, Clone, Default, clap::Args)]
pub struct PhaseArgs {
    /// Continue from this phase's checkpoint instead of starting over.
    #[arg(long)]
    pub resume: bool,
    /// Stop after this many completed iterations (the schedule still spans
    /// the configured total).
    #[arg(long)]
    pub until: Option<usize>,
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::GenData => "gen-data",
            Command::Pretrain(_) => "pretrain",
            Command::Adapt(_) => "adapt",
            Command::Baseline => "baseline",
            Command::Eval => "eval",
            Command::Ablate => "ablate",
            Command::Plot => "plot",
        }
    }
}

/// Exclusive claim on an output directory, released on drop.
struct RunLock(PathBuf);

impl RunLock {
    fn acquire(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(".lock");
        fs::OpenOptions::new()
            .write(true)
            .create_new(true)
            .open(&path)
            .map_err(|e| match e.kind() {
                std::io::ErrorKind::AlreadyExists => Error::Contract(format!(
                    "{} is locked by another run (remove {} if stale)",
                    dir.display(),
                    path.display()
                )),
                _ => Error::io(&path, e),
            })?;
        Ok(Self(path))
    }
}

impl Drop for RunLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.0);
    }
}

fn write(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn checkpoint_path(out: &Path, name: &str) -> PathBuf {
    out.join("checkpoints").join(format!("{name}.json"))
}

fn load_split(dir: &Path) -> Result<Dataset> {
    if !dir.join("manifest.json").is_file() {
        return Err(Error::Missing {
            what: "dataset (run gen-data first)",
            path: dir.to_owned(),
        });
    }
    load_dataset(dir)
}

fn load_phase_checkpoint(out: &Path, name: &str, phase: Phase) -> Result<TrainState> {
    let (state, _) = load_checkpoint(&checkpoint_path(out, name))?;
    if state.phase != phase {
        return Err(Error::contract(format!(
            "checkpoint `{name}` holds a {:?} state, expected {phase:?}",
            state.phase
        )));
    }
    Ok(state)
}

/// Runs one subcommand. Every artifact goes under the configured output
/// directory, next to `effective_config.toml`.
pub fn run(cli: &Cli) -> Result<()> {
    let cfg = match &cli.config {
        Some(p) => RunConfig::load(p, &cli.overrides)?,
        None => RunConfig::from_toml_str("", &cli.overrides)?,
    };
    run_command(&cfg, &cli.command)
}

/// Runs one subcommand with an already resolved configuration.
pub fn run_command(cfg: &RunConfig, command: &Command) -> Result<()> {
    let out = cfg.output_dir();
    let _lock = RunLock::acquire(&out)?;
    write(&out.join("effective_config.toml"), &cfg.to_toml())?;
    let hash = cfg.hash();
    eprintln!("featadv {}: output in {}", command.name(), out.display());

    match command {
        Command::GenData => gen_data(cfg, &out),
        Command::Pretrain(args) => pretrain(cfg, &out, &hash, args),
        Command::Adapt(args) => adapt(cfg, &out, &hash, args),
        Command::Baseline => baseline(cfg, &out, &hash),
        Command::Eval => evaluate(cfg, &out),
        Command::Ablate => ablate(cfg, &out),
        Command::Plot => plot(&out),
    }
}

fn gen_data(cfg: &RunConfig, out: &Path) -> Result<()> {
    let splits = [
        ("source", &cfg.data.source, cfg.data.n_source, cfg.source_dir()),
        ("target", &cfg.data.target, cfg.data.n_target, cfg.target_dir()),
        ("target_eval", &cfg.target_eval_spec(), cfg.data.n_target_eval, cfg.target_eval_dir()),
    ];
    let mut csv = String::from("split,class,ratio\n");
    for (name, spec, n, dir) in splits {
        let ds = generate_dataset(spec, n, name)?;
        save_dataset(&ds, &dir)?;
        for (c, r) in category_distribution(&ds)?.iter().enumerate() {
            csv.push_str(&format!("{name},{},{r}\n", ds.class_names[c]));
        }
        eprintln!("  {name}: {n} scenes in {}", dir.display());
    }
    write(&out.join("category_distribution.csv"), &csv)
}

fn pretrain(cfg: &RunConfig, out: &Path, hash: &str, args: &PhaseArgs) -> Result<()> {
    let source = load_split(&cfg.source_dir())?;
    let mut state = if args.resume {
        load_phase_checkpoint(out, "pretrain", Phase::Pretrain)?
    } else {
        TrainState::init(&cfg.model, &cfg.perturb, &cfg.train, source.classes())?
    };
    train::run_pretrain(&mut state, &source, &cfg.train, args.until)?;
    save_checkpoint(&state, hash, &checkpoint_path(out, "pretrain"))?;
    train::write_metrics_csv(&out.join("metrics_pretrain.csv"), &state.metrics)?;
    eprintln!("  pretrain: {} iterations", state.iter);
    Ok(())
}

fn adapt(cfg: &RunConfig, out: &Path, hash: &str, args: &PhaseArgs) -> Result<()> {
    let source = load_split(&cfg.source_dir())?;
    let target = load_split(&cfg.target_dir())?;
    let mut state = if args.resume {
        load_phase_checkpoint(out, "adapt", Phase::Adapt)?
    } else {
        let mut s = load_phase_checkpoint(out, "pretrain", Phase::Pretrain)?;
        train::begin_adapt(&mut s, &cfg.perturb, &cfg.train)?;
        s
    };
    train::continue_adapt(&mut state, &source, &target, &cfg.perturb, &cfg.train, args.until)?;
    save_checkpoint(&state, hash, &checkpoint_path(out, "adapt"))?;
    train::write_metrics_csv(&out.join("metrics_adapt.csv"), &state.metrics)?;
    crate::perturb::write_intensity_csv(&out.join("gradient_intensity.csv"), &state.intensities)?;
    eprintln!("  adapt: {} iterations", state.iter);
    Ok(())
}

fn baseline(cfg: &RunConfig, out: &Path, hash: &str) -> Result<()> {
    if cfg.train.baseline == Baseline::None {
        return Err(Error::Config(
            "set train.baseline to source_only, asn, asn_weighted_ce or asn_lovasz".into(),
        ));
    }
    let name = cfg.train.baseline.name();
    let base = load_phase_checkpoint(out, "pretrain", Phase::Pretrain)?;
    let state = match cfg.train.baseline {
        Baseline::None => unreachable!("rejected above"),
        Baseline::SourceOnly => base,
        _ => {
            let source = load_split(&cfg.source_dir())?;
            let target = load_split(&cfg.target_dir())?;
            train::train_asn_baseline(base, &source, &target, &cfg.train, cfg.train.max_iter)?
        }
    };
    save_checkpoint(&state, hash, &checkpoint_path(out, &format!("baseline_{name}")))?;
    train::write_metrics_csv(&out.join(format!("metrics_baseline_{name}.csv")), &state.metrics)?;
    Ok(())
}

fn evaluate(cfg: &RunConfig, out: &Path) -> Result<()> {
    let eval_ds = load_split(&cfg.target_eval_dir())?;
    let mut names = vec![("source_only".to_owned(), "pretrain".to_owned())];
    for b in &Baseline::ALL[2..] {
        names.push((b.name().to_owned(), format!("baseline_{}", b.name())));
    }
    names.push(("adapted".to_owned(), "adapt".to_owned()));

    let mut results: Vec<(String, IouReport)> = Vec::new();
    for (label, file) in names {
        let path = checkpoint_path(out, &file);
        if !path.is_file() {
            continue;
        }
        let (state, _) = load_checkpoint(&path)?;
        results.push((label, eval::iou(&eval::evaluate(&state.model, &eval_ds)?)?));
    }
    if results.is_empty() {
        return Err(Error::Missing {
            what: "checkpoint (run pretrain first)",
            path: checkpoint_path(out, "pretrain"),
        });
    }

    let classes = &eval_ds.class_names;
    let mut csv = String::from("config,class,iou\n");
    let mut table = format!("{:<16}", "config");
    for n in classes {
        table.push_str(&format!(" {n:>9}"));
    }
    table.push_str(&format!(" {:>9}\n", "mIoU"));
    for (label, r) in &results {
        table.push_str(&format!("{label:<16}"));
        for (c, v) in r.per_class.iter().enumerate() {
            let cell = v.map_or_else(String::new, |x| x.to_string());
            csv.push_str(&format!("{label},{},{cell}\n", classes[c]));
            table.push_str(&format!(" {:>9}", v.map_or("-".into(), |x| format!("{x:.4}"))));
        }
        csv.push_str(&format!("{label},mIoU,{}\n", r.miou));
        table.push_str(&format!(" {:>9.4}\n", r.miou));
    }
    write(&out.join("iou.csv"), &csv)?;
    write(&out.join("iou_table.txt"), &table)?;

    let tail: Vec<String> = cfg
        .data
        .source
        .tail_classes()
        .into_iter()
        .map(|c| classes[c].clone())
        .collect();
    if results.iter().any(|(n, _)| n == "source_only") {
        let rows = eval::tail_report(&results, classes, &tail, "source_only")?;
        write(&out.join("tail_report.txt"), &eval::format_tail_report(&rows, &tail))?;
    }
    print!("{table}");
    Ok(())
}

fn ablate(cfg: &RunConfig, out: &Path) -> Result<()> {
    let bench = Benchmark {
        source: load_split(&cfg.source_dir())?,
        target: load_split(&cfg.target_dir())?,
        target_eval: load_split(&cfg.target_eval_dir())?,
    };
    let grid = cfg.eval.resolve_grid(cfg.model.encoder_channels.len())?;
    let seeds = if cfg.eval.seeds.is_empty() {
        vec![cfg.seed]
    } else {
        cfg.eval.seeds.clone()
    };
    let tail = cfg.data.source.tail_classes();
    let results = eval::ablation_run(
        &grid,
        &bench,
        &cfg.model,
        &cfg.perturb,
        &cfg.train,
        &seeds,
        &tail,
    );
    let names = &bench.source.class_names;
    write(&out.join("ablation.csv"), &eval::ablation_csv(&results, names))?;
    let table = eval::ablation_table(&results, names);
    write(&out.join("ablation.txt"), &table)?;
    print!("{table}");
    Ok(())
}

fn plot(out: &Path) -> Result<()> {
    let path = out.join("gradient_intensity.csv");
    if !path.is_file() {
        return Err(Error::Missing {
            what: "gradient-intensity log (run adapt first)",
            path,
        });
    }
    let records = read_intensity_csv(&path)?;
    eval::plot_gradient_intensity(&records, &out.join("plots"))
}
