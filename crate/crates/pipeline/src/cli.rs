use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};

use crate::config::RunConfig;
use crate::dataset::{self, Dataset};
use crate::error::{Error, Result};
use crate::evaluate::{evaluate_params, train_and_evaluate, ResultRow, Variant};
use crate::experiment::{variants, Axis, Experiment};
use crate::generate::{GenSettings, Generated, Generator};
use crate::stage1::{self, accepted};
use crate::store::OutDir;

#[derive(Debug, Parser)]
#[command(name = "uvforge", version, about = "Three-stage volumetric domain adaptation on synthetic phantoms")]
struct Cli {
    /// Run configuration file, or `default` for the built-in defaults.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true, value_name = "N")]
    seed: Option<u64>,
    #[arg(long, global = true, value_name = "DIR", default_value = "out")]
    out: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Render the phantom dataset and write manifest.json.
    Phantom,
    /// Adapt on source vs target and write pseudo-labels.
    Stage1,
    /// Train the conditional generator and sample the generated set.
    Stage2,
    /// Retrain on source plus generated data and evaluate.
    Stage3 {
        #[arg(long, value_enum, default_value_t = Mode::All)]
        mode: Mode,
    },
    /// Run every stage and the baselines.
    RunAll,
    /// Score a segmenter checkpoint on the target test split.
    Eval {
        #[arg(long, value_name = "PATH")]
        checkpoint: Option<PathBuf>,
    },
    /// Sweep one ablation axis and append its rows to results.csv.
    Ablate {
        /// components, scale-up, deform, source-masks, target-masks or asc.
        #[arg(long)]
        axis: String,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Mode {
    All,
    Adapted,
    LowerBound,
    UpperBound,
}

/// Parses `args` (including the program name), runs the command and
/// returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn load_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn execute(cli: Cli) -> Result<()> {
    let cfg = load_config(&cli)?;
    let out = OutDir::new(&cli.out);
    match cli.command {
        Command::Phantom => phantom(&cfg, &out),
        Command::Stage1 => run_stage1(&cfg, &out),
        Command::Stage2 => run_stage2(&cfg, &out),
        Command::Stage3 { mode } => run_stage3(&cfg, &out, mode),
        Command::RunAll => {
            if cfg.data_dir.is_none() {
                phantom(&cfg, &out)?;
            }
            run_stage1(&cfg, &out)?;
            run_stage2(&cfg, &out)?;
            run_stage3(&cfg, &out, Mode::All)
        }
        Command::Eval { checkpoint } => eval(&cfg, &out, checkpoint.as_deref()),
        Command::Ablate { axis } => ablate(&cfg, &out, axis.parse()?),
    }
}

fn load_data(cfg: &RunConfig, out: &OutDir) -> Result<Dataset> {
    let dir = cfg.data_dir.as_deref().unwrap_or(&out.root);
    let data = dataset::load(dir)?;
    if data.num_classes != cfg.num_classes {
        return Err(Error::ConfigInvalid(format!(
            "num_classes = {} but the dataset in {} has {}",
            cfg.num_classes,
            dir.display(),
            data.num_classes
        )));
    }
    Ok(data)
}

fn phantom(cfg: &RunConfig, out: &OutDir) -> Result<()> {
    let data = dataset::generate(cfg)?;
    let manifest = dataset::write(&data, cfg, &out.root)?;
    println!("phantom: {} subjects written to {}", manifest.subjects.len(), out.root.display());
    Ok(())
}

fn run_stage1(cfg: &RunConfig, out: &OutDir) -> Result<()> {
    let data = load_data(cfg, out)?;
    let result = stage1::run(cfg, &data)?;
    out.save_pseudo(&result.pseudo)?;
    out.save_checkpoint("stage1_student", &result.student)?;
    out.save_checkpoint("stage1_teacher", &result.teacher)?;
    println!(
        "stage1: accepted {}/{} pseudo-labels at tau {}",
        accepted(&result.pseudo).count(),
        result.pseudo.len(),
        cfg.tau
    );
    Ok(())
}

/// Reuses stored samples whose provenance matches the planned one.
fn load_cached(exp: &mut Experiment, out: &OutDir, settings: GenSettings) -> Result<()> {
    let keys = exp.plan(settings)?;
    if keys.is_empty() {
        return Ok(());
    }
    let seed = exp.cfg.seed;
    let generator = exp.generator()?;
    let mut cached = Vec::new();
    for key in &keys {
        if let Some(g) = out.cached_sample(&generator.provenance(key, seed))? {
            cached.push(g);
        }
    }
    log::info!("reusing {} of {} stored samples", cached.len(), keys.len());
    exp.insert_samples(cached);
    Ok(())
}

fn save_samples(out: &OutDir, samples: &[&Generated]) -> Result<()> {
    for g in samples {
        if out.cached_sample(&g.provenance)?.is_none() {
            out.save_sample(g)?;
        }
    }
    Ok(())
}

fn run_stage2(cfg: &RunConfig, out: &OutDir) -> Result<()> {
    let data = load_data(cfg, out)?;
    let pseudo = out.load_pseudo(&data)?;
    let settings = GenSettings::from_config(cfg);
    let mut exp = Experiment::new(cfg.clone(), data).with_pseudo(pseudo);
    // fail on missing masks before paying for generator training
    exp.plan(settings)?;
    let params = exp.generator()?.params().clone();
    out.save_checkpoint("denoiser", &params)?;
    load_cached(&mut exp, out, settings)?;
    let samples = exp.generated(settings)?;
    save_samples(out, &samples)?;
    out.save_index(&samples)?;
    println!("stage2: {} generated volumes", samples.len());
    Ok(())
}

fn run_stage3(cfg: &RunConfig, out: &OutDir, mode: Mode) -> Result<()> {
    let data = load_data(cfg, out)?;
    let mut jobs: Vec<(&str, Variant)> = Vec::new();
    if matches!(mode, Mode::All | Mode::LowerBound) {
        jobs.push(("lower_bound", Variant::LowerBound));
    }
    if matches!(mode, Mode::All | Mode::UpperBound) {
        jobs.push(("upper_bound", Variant::UpperBound));
    }
    let generated = if matches!(mode, Mode::All | Mode::Adapted) {
        jobs.push(("adapted", Variant::Adapted(GenSettings::from_config(cfg))));
        out.load_index()?
    } else {
        Vec::new()
    };
    let gens: Vec<&Generated> = generated.iter().collect();
    let mut rows = Vec::new();
    for (name, variant) in jobs {
        log::info!("stage 3: {name}");
        let outcome = train_and_evaluate(cfg, &data, &variant, &gens)?;
        out.save_checkpoint(&format!("stage3_{name}"), &outcome.student)?;
        out.save_metrics(name, &outcome.report)?;
        let row = ResultRow::new(name, cfg, &variant, &outcome);
        println!("stage3: {name} mean DSC {}", row.mean_dsc.map_or("n/a".into(), |d| format!("{d:.4}")));
        rows.push(row);
    }
    out.upsert_results(&rows)?;
    Ok(())
}

fn eval(cfg: &RunConfig, out: &OutDir, checkpoint: Option<&Path>) -> Result<()> {
    let data = load_data(cfg, out)?;
    let params = match checkpoint {
        Some(path) => {
            if !path.is_file() {
                return Err(Error::MissingInput {
                    path: path.to_path_buf(),
                    hint: "checkpoint not found",
                });
            }
            uvforge_core::model::load_params(path)?
        }
        None => out.load_checkpoint("stage3_adapted", "run stage3 first or pass --checkpoint")?,
    };
    let report = evaluate_params(cfg, &data, &params)?;
    out.save_metrics("eval", &report)?;
    println!("{}", serde_json::to_string_pretty(&report)?);
    Ok(())
}

fn ablate(cfg: &RunConfig, out: &OutDir, axis: Axis) -> Result<()> {
    let data = load_data(cfg, out)?;
    let list = variants(axis, cfg);
    let needs_generator = list.iter().any(|(_, v)| !v.settings().is_empty());
    let mut exp = Experiment::new(cfg.clone(), data);
    if needs_generator {
        let pseudo = out.load_pseudo(&exp.data)?;
        let params = out.load_checkpoint("denoiser", "run stage2 first")?;
        exp = exp.with_pseudo(pseudo).with_generator(Generator::new(cfg, params)?);
        for (_, v) in &list {
            load_cached(&mut exp, out, v.settings())?;
        }
    }
    let mut rows = Vec::new();
    for (name, variant) in &list {
        let row = exp.row(name, variant)?;
        println!("ablate: {name} mean DSC {}", row.mean_dsc.map_or("n/a".into(), |d| format!("{d:.4}")));
        rows.push(row);
    }
    let samples: Vec<&Generated> = exp.samples().collect();
    save_samples(out, &samples)?;
    out.upsert_results(&rows)?;
    Ok(())
}
