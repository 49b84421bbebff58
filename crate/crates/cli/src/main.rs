use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use nodet::cascade::load_candidates;
use nodet::config::PipelineConfig;
use nodet::ct_data::load_annotations;
use nodet::eval::{save_froc, CpmReport};
use nodet::fprnet::{Pooling, Variant};
use nodet::pipeline::{self, Layout, Split};
use nodet::sampler::Strategy;

/// Two-stage pulmonary nodule detection: phantom data, segmentation cascade,
/// false-positive reduction and FROC evaluation.
#[derive(Parser, Debug)]
#[command(name = "nodet", version)]
struct Cli {
    /// Pipeline config (`key = value` lines with `[section]` headers).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override the run seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Log verbosity: -v info, -vv debug.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Work {
    /// Work directory holding the stage outputs.
    #[arg(long)]
    work: PathBuf,
    /// Dataset directory; defaults to `<work>/data`.
    #[arg(long)]
    data: Option<PathBuf>,
}

impl Work {
    fn layout(&self) -> Layout {
        match &self.data {
            Some(d) => Layout::with_data(d, &self.work),
            None => Layout::new(&self.work),
        }
    }
}

#[derive(Args, Debug)]
struct ClfFlags {
    /// Classifier variants: seres, dense, incep or all.
    #[arg(long, value_delimiter = ',')]
    variant: Vec<String>,
    /// Pooling: max, central or dual.
    #[arg(long)]
    pooling: Option<Pooling>,
    /// Random-mask augmentation on or off.
    #[arg(long)]
    random_mask: Option<bool>,
    /// Rotation and translation copies of the positives on or off.
    #[arg(long)]
    geometric_augment: Option<bool>,
    /// Single-slice (2D) classifiers.
    #[arg(long)]
    planar: Option<bool>,
}

impl ClfFlags {
    fn apply(&self, config: &mut PipelineConfig) -> Result<()> {
        if !self.variant.is_empty() {
            config.clf.variants = parse_variants(&self.variant)?;
        }
        if let Some(p) = self.pooling {
            config.clf.model.pooling = p;
        }
        if let Some(v) = self.random_mask {
            config.clf.random_mask = v;
        }
        if let Some(v) = self.geometric_augment {
            config.clf.geometric_augment = v;
        }
        if let Some(v) = self.planar {
            config.clf.model.planar = v;
        }
        Ok(config.validate()?)
    }
}

fn parse_variants(items: &[String]) -> Result<Vec<Variant>> {
    if items.iter().any(|v| v == "all") {
        return Ok(Variant::ALL.to_vec());
    }
    items.iter().map(|v| Ok(v.parse::<Variant>()?)).collect()
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the phantom dataset.
    Synth {
        /// Dataset directory to write.
        #[arg(long)]
        out: PathBuf,
    },
    /// Draw stage-1 patch centers on the training scans.
    Sample {
        #[command(flatten)]
        work: Work,
        /// Sampling strategy: proposed or uniform.
        #[arg(long)]
        strategy: Option<Strategy>,
    },
    /// Train the segmentation network.
    TrainSeg {
        #[command(flatten)]
        work: Work,
    },
    /// Hard-mining rounds with fine-tuning.
    Mine {
        #[command(flatten)]
        work: Work,
    },
    /// Run the two-pass cascade and write candidate CSVs.
    Detect {
        #[command(flatten)]
        work: Work,
        /// Use the model without hard mining.
        #[arg(long)]
        no_mining: bool,
    },
    /// Train false-positive reduction classifiers.
    TrainClf {
        #[command(flatten)]
        work: Work,
        #[command(flatten)]
        flags: ClfFlags,
    },
    /// Score candidates and write FROC curves and the CPM report.
    Evaluate {
        /// Work directory of a pipeline run.
        #[arg(long, required_unless_present = "candidates")]
        work: Option<PathBuf>,
        /// Dataset directory; defaults to `<work>/data`.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Classifier variants to ensemble.
        #[arg(long, value_delimiter = ',')]
        variant: Vec<String>,
        /// Already scored candidates CSV (skips the classifiers).
        #[arg(long, requires_all = ["annotations", "out"])]
        candidates: Option<PathBuf>,
        /// Annotation CSV for the scored candidates.
        #[arg(long)]
        annotations: Option<PathBuf>,
        /// Split file; only its test scans are evaluated.
        #[arg(long)]
        split: Option<PathBuf>,
        /// Output directory for the scored-candidates mode.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run every stage in order.
    Run {
        #[command(flatten)]
        work: Work,
    },
    /// Run the pipeline over a grid of ablation flags.
    Ablate {
        #[command(flatten)]
        work: Work,
        /// Pooling values to try, comma separated.
        #[arg(long, value_delimiter = ',', default_value = "dual")]
        pooling: Vec<Pooling>,
        /// Random-mask settings to try.
        #[arg(long, value_delimiter = ',', default_value = "true")]
        random_mask: Vec<bool>,
        /// Hard-mining settings to try.
        #[arg(long, value_delimiter = ',', default_value = "true")]
        hard_mining: Vec<bool>,
        /// Sampling strategies to try.
        #[arg(long, value_delimiter = ',', default_value = "proposed")]
        strategy: Vec<Strategy>,
    },
}

fn load_config(cli: &Cli) -> Result<PipelineConfig> {
    let mut config = match &cli.config {
        Some(path) => PipelineConfig::load(path)?,
        None => PipelineConfig::default(),
    };
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    Ok(config)
}

/// Scans evaluated in scored-candidates mode: the test split when given,
/// else every scan seen in either file.
fn scored_scans(split: Option<&Path>, ids: impl Iterator<Item = String>) -> Result<Vec<String>> {
    if let Some(s) = split {
        let dir = s.parent().unwrap_or(Path::new("."));
        if s.file_name().and_then(|f| f.to_str()) != Some("split.csv") {
            bail!("split file must be named split.csv");
        }
        return Ok(pipeline::load_split(dir)?.into_iter().filter(|(_, sp)| *sp == Split::Test).map(|(id, _)| id).collect());
    }
    let set: std::collections::BTreeSet<String> = ids.collect();
    Ok(set.into_iter().collect())
}

fn run(cli: Cli) -> Result<()> {
    let mut config = load_config(&cli)?;
    match cli.command {
        Command::Synth { out } => pipeline::synth(&config, &out)?,
        Command::Sample { work, strategy } => {
            if let Some(s) = strategy {
                config.sampling.strategy = s;
            }
            let centers = pipeline::sample::<f32>(&config, &work.layout())?;
            println!("{} centers", centers.len());
        }
        Command::TrainSeg { work } => {
            let h = pipeline::train_seg::<f32>(&config, &work.layout())?;
            println!("best epoch {} of {}", h.best_epoch, h.records.len());
        }
        Command::Mine { work } => {
            config.mining.enabled = true;
            let mined = pipeline::mine::<f32>(&config, &work.layout())?;
            println!("{} mined samples", mined.len());
        }
        Command::Detect { work, no_mining } => {
            if no_mining {
                config.mining.enabled = false;
            }
            for s in pipeline::detect::<f32>(&config, &work.layout())? {
                println!("{} {}: {:.2} FP/scan, sensitivity {:.3}", s.split.name(), s.pass, s.fp_per_scan(), s.sensitivity());
            }
        }
        Command::TrainClf { work, flags } => {
            flags.apply(&mut config)?;
            for (v, h) in pipeline::train_clf::<f32>(&config, &work.layout(), &config.clf.variants)? {
                let last = h.records.last().context("empty history")?;
                println!("{v}: final loss {:.4}, accuracy {:.3}", last.loss, last.accuracy);
            }
        }
        Command::Evaluate { work, data, variant, candidates, annotations, split, out } => {
            if let Some(cands) = candidates {
                let (anns, out) = (annotations.context("--annotations is required")?, out.context("--out is required")?);
                let cands = load_candidates(&cands)?;
                let anns = load_annotations(&anns)?;
                let ids = cands.iter().map(|c| c.scan_id.clone()).chain(anns.iter().map(|a| a.scan_id.clone()));
                let scans = scored_scans(split.as_deref(), ids)?;
                let r = pipeline::score_candidates("candidates", &cands, &anns, &scans)?;
                std::fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
                save_froc(&out.join("froc.csv"), &r.froc)?;
                let table = CpmReport::table(&[(r.name.as_str(), &r.cpm)]);
                std::fs::write(out.join("cpm.txt"), &table)?;
                print!("{table}");
            } else {
                let work = work.context("--work is required")?;
                let layout = match data {
                    Some(d) => Layout::with_data(d, work),
                    None => Layout::new(work),
                };
                if !variant.is_empty() {
                    config.clf.variants = parse_variants(&variant)?;
                }
                let report = pipeline::evaluate::<f32>(&config, &layout)?;
                let rows: Vec<_> = report.methods.iter().map(|m| (m.name.as_str(), &m.cpm)).collect();
                print!("{}", CpmReport::table(&rows));
            }
        }
        Command::Run { work } => {
            let report = pipeline::run_all::<f32>(&config, &work.layout())?;
            let rows: Vec<_> = report.eval.methods.iter().map(|m| (m.name.as_str(), &m.cpm)).collect();
            print!("{}", CpmReport::table(&rows));
        }
        Command::Ablate { work, pooling, random_mask, hard_mining, strategy } => {
            let layout = work.layout();
            let grid = pipeline::ablation_configs(&config, &pooling, &random_mask, &hard_mining, &strategy);
            let rows = pipeline::ablate::<f32>(&grid, &layout.data, &layout.work)?;
            let refs: Vec<_> = rows.iter().map(|(n, r)| (n.as_str(), r)).collect();
            print!("{}", CpmReport::table(&refs));
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
