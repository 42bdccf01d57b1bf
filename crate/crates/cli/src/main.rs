use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use mvt_core::backend::{self, sim, Backend, OpenOptions};
use mvt_core::error::{Error, ErrorKind, Result};
use mvt_core::evaluate::{metrics, ood, study};
use mvt_core::io::{self, FinetuneRow, Manifest, PredictionTable, SupportLabelRow};
use mvt_core::sampler::{self, rank_by_predicted_class, support_from_rows, SupportSet};
use mvt_core::seeding::sha256_hex;
use mvt_core::transition::{estimate_transition, Provenance, TransitionFile, TransitionMatrix};
use mvt_core::{run_mvt, Engine, MvtConfig};

const MANIFEST: &str = "manifest.jsonl";
const PREDICTIONS: &str = "predictions.jsonl";
const SIM_SPEC: &str = "sim.json";
const SUPPORT: &str = "support.jsonl";
const TRANSITION: &str = "transition.json";
const RECTIFIED: &str = "rectified.jsonl";
const FAILURES: &str = "failures.jsonl";
const FINETUNE: &str = "finetune.jsonl";
const RESULTS: &str = "results.jsonl";
const SUMMARY: &str = "summary.txt";
const OOD_ROWS: &str = "ood.jsonl";
const OOD_CURVES: &str = "ood_curves.json";
const OOD_PLOT: &str = "ood.svg";

/// Rectify noisy classifier predictions with in-context diagnosis and
/// therapy.
#[derive(Parser)]
#[command(name = "mvt", version)]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Global {
    /// Run configuration (JSON); defaults apply to missing keys.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads; defaults to the number of logical cores.
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// `sim` or `remote:<endpoint>`.
    #[arg(long, global = true, default_value = "sim")]
    backend: String,
    /// Simulator spec for the sim backend; defaults to <data>/sim.json.
    #[arg(long, global = true)]
    sim_spec: Option<PathBuf>,
    /// Bound on concurrent remote requests.
    #[arg(long, global = true)]
    max_in_flight: Option<usize>,
    /// Directory holding the pipeline artifacts.
    #[arg(long, global = true, default_value = ".")]
    data: PathBuf,
    /// Output directory; defaults to the data directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Log progress (repeat for more detail).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a labelled manifest and classifier predictions from a simulator spec.
    Simulate {
        #[arg(long)]
        spec: PathBuf,
    },
    /// Pick the support set to annotate; labels are filled from the manifest when known.
    SampleSupport {
        #[arg(long, default_value = "stratified")]
        sampler: String,
    },
    /// Estimate the transition matrix from the annotated support set.
    EstimateT,
    /// Diagnose every item and relabel those that fail.
    Therapy,
    /// Export rectified labels for fine-tuning.
    ExportFt {
        /// Also export items whose prediction was accepted.
        #[arg(long)]
        include_accepted: bool,
        /// Send the export to the backend's fine-tune endpoint.
        #[arg(long)]
        submit: bool,
        #[arg(long, default_value_t = 3)]
        epochs: usize,
        #[arg(long, default_value_t = 5e-7)]
        learning_rate: f64,
    },
    /// Score rectified labels against the manifest's ground truth.
    Evaluate,
    /// Open-class detection F1 sweeps for confidence, scorer probability and their mean.
    OodDetect {
        /// Fraction of classes treated as closed.
        #[arg(long, default_value_t = ood::DEFAULT_CLOSED_FRACTION)]
        closed_fraction: f64,
        /// Comma-separated closed class indices; overrides the seeded split.
        #[arg(long, value_delimiter = ',')]
        closed: Option<Vec<usize>>,
        #[arg(long, default_value_t = ood::DEFAULT_GRID_POINTS)]
        grid_points: usize,
        /// Also write an SVG plot of the curves.
        #[arg(long)]
        plot: bool,
    },
    /// Run an ablation grid described by a study spec.
    Study {
        #[arg(long)]
        spec: PathBuf,
    },
    /// Serve the simulators over the wire protocol.
    ServeSim {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long, default_value = "127.0.0.1:8080")]
        addr: SocketAddr,
    },
}

struct Ctx {
    global: Global,
    config: MvtConfig,
}

impl Ctx {
    fn new(global: Global) -> Result<Self> {
        let mut config = match &global.config {
            Some(p) => MvtConfig::load(p)?,
            None => MvtConfig::default(),
        };
        if let Some(seed) = global.seed {
            config.seed = seed;
        }
        config.validate()?;
        Ok(Ctx { global, config })
    }

    fn input(&self, name: &str) -> PathBuf {
        self.global.data.join(name)
    }

    fn output(&self, name: &str) -> Result<PathBuf> {
        let dir = self.global.out.as_ref().unwrap_or(&self.global.data);
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        Ok(dir.join(name))
    }

    fn workers(&self) -> usize {
        self.global
            .workers
            .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
    }

    fn manifest(&self) -> Result<Manifest> {
        io::load_manifest(&self.input(MANIFEST))
    }

    fn predictions(&self, manifest: &Manifest) -> Result<PredictionTable> {
        io::load_prediction_table(&self.input(PREDICTIONS), manifest)
    }

    fn support(&self, table: &PredictionTable) -> Result<SupportSet> {
        support_from_rows(&io::read_support_labels(&self.input(SUPPORT))?, table)
    }

    fn transition(&self) -> Result<TransitionMatrix> {
        TransitionFile::read(&self.input(TRANSITION))?.matrix()
    }

    fn backend(&self) -> Result<Arc<dyn Backend>> {
        let sim_spec = self.global.sim_spec.clone().unwrap_or_else(|| self.input(SIM_SPEC));
        backend::open(
            &self.global.backend,
            &OpenOptions {
                sim_spec: Some(sim_spec),
                max_in_flight: self.global.max_in_flight,
            },
        )
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::Invariant(e.to_string()))?;
    text.push('\n');
    io::write_atomic(path, text.as_bytes())
}

fn simulate(ctx: &Ctx, spec_path: &Path) -> Result<()> {
    let spec = sim::SimSpec::load(spec_path)?;
    let world = sim::SimBackend::new(spec.clone())?;
    let (manifest, table) = world.generate()?;
    io::write_atomic(&ctx.output(MANIFEST)?, manifest.to_jsonl().as_bytes())?;
    io::write_atomic(&ctx.output(PREDICTIONS)?, table.to_jsonl().as_bytes())?;
    write_json(&ctx.output(SIM_SPEC)?, &spec)?;
    println!("simulated {} items over {} classes", manifest.len(), manifest.num_classes());
    Ok(())
}

fn sample_support(ctx: &Ctx, sampler_name: &str) -> Result<()> {
    let manifest = ctx.manifest()?;
    let table = ctx.predictions(&manifest)?;
    let sampler = sampler::registry().get(sampler_name)?;
    let selection = sampler.select(&rank_by_predicted_class(&table), ctx.config.rho, ctx.config.seed);
    let labels = manifest.labels();
    let rows: Vec<SupportLabelRow> = selection
        .iter()
        .flatten()
        .map(|id| SupportLabelRow {
            item_id: id.clone(),
            clean_label: labels.get(id).copied(),
        })
        .collect();
    let pending = rows.iter().filter(|r| r.clean_label.is_none()).count();
    io::write_support_labels(&rows, &ctx.output(SUPPORT)?)?;
    println!("selected {} support items ({pending} awaiting annotation)", rows.len());
    Ok(())
}

fn estimate(ctx: &Ctx) -> Result<()> {
    let manifest = ctx.manifest()?;
    let table = ctx.predictions(&manifest)?;
    let support_path = ctx.input(SUPPORT);
    let bytes = std::fs::read(&support_path).map_err(|e| Error::io(&support_path, e))?;
    let support = ctx.support(&table)?;
    let eps = ctx.config.smoothing_epsilon;
    let t = estimate_transition(&support, manifest.num_classes(), eps);
    let file = TransitionFile::new(
        &t,
        Provenance {
            support_sha256: sha256_hex(&bytes),
            epsilon: eps,
        },
    );
    file.write(&ctx.output(TRANSITION)?)?;
    println!("estimated a {0}x{0} transition matrix from {1} support items", t.num_classes(), support.len());
    Ok(())
}

fn therapy(ctx: &Ctx) -> Result<()> {
    let manifest = ctx.manifest()?;
    let table = ctx.predictions(&manifest)?;
    let support = ctx.support(&table)?;
    let t = ctx.transition()?;
    let backend = ctx.backend()?;
    let run = run_mvt(&manifest, &table, &support, &t, backend.as_ref(), &ctx.config, ctx.workers())?;
    let records = run.records();
    io::write_rectified(&records, &ctx.output(RECTIFIED)?)?;
    let failures: Vec<_> = run
        .failures
        .iter()
        .map(|f| serde_json::json!({"item_id": f.item_id, "error": f.message}))
        .collect();
    io::write_atomic(&ctx.output(FAILURES)?, io::to_jsonl(&failures).as_bytes())?;
    let changed = records.iter().filter(|r| r.rectified_label != r.original_pred).count();
    println!(
        "rectified {} items: {} accepted, {changed} relabelled, {} failed",
        records.len(),
        records.iter().filter(|r| r.accepted).count(),
        failures.len()
    );
    if !failures.is_empty() && records.is_empty() {
        return Err(Error::backend(None, "every item failed; see failures.jsonl"));
    }
    Ok(())
}

fn export_ft(ctx: &Ctx, include_accepted: bool, submit: bool, epochs: usize, learning_rate: f64) -> Result<()> {
    let records = io::read_rectified(&ctx.input(RECTIFIED))?;
    let rows: Vec<FinetuneRow> = records
        .iter()
        .filter(|r| include_accepted || !r.accepted)
        .map(|r| FinetuneRow {
            item_id: r.item_id.clone(),
            label: r.rectified_label,
        })
        .collect();
    io::write_atomic(&ctx.output(FINETUNE)?, io::to_jsonl(&rows).as_bytes())?;
    println!("exported {} fine-tuning rows", rows.len());
    if submit {
        match ctx.backend()?.request_finetune(&rows, epochs, learning_rate) {
            Ok(ack) => println!("fine-tune epoch losses: {:?}", ack.epoch_losses),
            Err(Error::Capability(m)) => log::warn!("fine-tuning skipped: {m}"),
            Err(e) => return Err(e),
        }
    }
    Ok(())
}

fn evaluate(ctx: &Ctx) -> Result<()> {
    let manifest = ctx.manifest()?;
    let table = ctx.predictions(&manifest)?;
    let records = io::read_rectified(&ctx.input(RECTIFIED))?;
    let m = metrics::run_metrics(&manifest, &table, &records)?;
    io::write_atomic(&ctx.output(RESULTS)?, io::json_line(&m).as_bytes())?;
    println!(
        "accuracy {:.4} -> {:.4} over {} items ({} failures)",
        m.accuracy_before, m.accuracy_after, m.n_items, m.failures
    );
    Ok(())
}

fn ood_detect(ctx: &Ctx, fraction: f64, closed: Option<Vec<usize>>, points: usize, plot: bool) -> Result<()> {
    let manifest = ctx.manifest()?;
    let table = ctx.predictions(&manifest)?;
    let support = ctx.support(&table)?;
    let t = ctx.transition()?;
    let backend = ctx.backend()?;
    let c = manifest.num_classes();
    let split = match closed {
        Some(list) => ood::OodSplit::new(c, list.into_iter().map(mvt_core::ClassId))?,
        None => ood::OodSplit::seeded(c, ctx.config.seed, fraction)?,
    };
    let engine = Engine::new(&support, &t, backend.as_ref(), &ctx.config, &manifest.class_names)?;
    let items = split
        .partition(&manifest)
        .into_iter()
        .map(|(id, is_closed)| {
            table
                .get(&id)
                .map(|r| (r, is_closed))
                .ok_or(Error::MissingPredictions(vec![id]))
        })
        .collect::<Result<Vec<_>>>()?;
    let (rows, failed) = ood::detection_scores(&engine, &items, ctx.workers())?;
    for (id, e) in &failed {
        log::warn!("item={id} phase=diagnose error={e}");
    }
    let sweep = ood::DetectionSweep::from_rows(&rows, points)?;
    io::write_atomic(&ctx.output(OOD_ROWS)?, io::to_jsonl(&rows).as_bytes())?;
    write_json(&ctx.output(OOD_CURVES)?, &sweep)?;
    if plot {
        io::write_atomic(&ctx.output(OOD_PLOT)?, ood::render_svg(&sweep).as_bytes())?;
    }
    let closed_names: Vec<usize> = split.closed_classes().iter().map(|c| c.index()).collect();
    println!("closed classes {closed_names:?}; {} items scored", rows.len());
    for (name, curve) in sweep.curves() {
        let (thr, f1) = curve.best();
        println!("{name:>10}: best F1 {f1:.4} at threshold {thr:.2}");
    }
    Ok(())
}

fn run_study(ctx: &Ctx, spec_path: &Path) -> Result<()> {
    let mut spec = study::StudySpec::load(spec_path)?;
    if let Some(seed) = ctx.global.seed {
        spec.seed = seed;
    }
    if let Some(cfg) = &ctx.global.config {
        spec.base = MvtConfig::load(cfg)?;
    }
    let manifest = ctx.manifest()?;
    let table = ctx.predictions(&manifest)?;
    let backend = ctx.backend()?;
    let rows = study::run_study(&spec, &manifest, &table, backend.as_ref(), ctx.workers())?;
    io::write_atomic(&ctx.output(RESULTS)?, io::to_jsonl(&rows).as_bytes())?;
    let summary = study::summary_text(&rows);
    io::write_atomic(&ctx.output(SUMMARY)?, summary.as_bytes())?;
    print!("{summary}");
    Ok(())
}

fn serve_sim(spec_path: &Path, addr: SocketAddr) -> Result<()> {
    let sim = sim::SimBackend::new(sim::SimSpec::load(spec_path)?)?;
    backend::server::serve(Arc::new(sim), addr, |bound| {
        println!("listening on http://{bound}");
    })
}

fn dispatch(cli: Cli) -> Result<()> {
    let ctx = Ctx::new(cli.global)?;
    match cli.command {
        Command::Simulate { spec } => simulate(&ctx, &spec),
        Command::SampleSupport { sampler } => sample_support(&ctx, &sampler),
        Command::EstimateT => estimate(&ctx),
        Command::Therapy => therapy(&ctx),
        Command::ExportFt {
            include_accepted,
            submit,
            epochs,
            learning_rate,
        } => export_ft(&ctx, include_accepted, submit, epochs, learning_rate),
        Command::Evaluate => evaluate(&ctx),
        Command::OodDetect {
            closed_fraction,
            closed,
            grid_points,
            plot,
        } => ood_detect(&ctx, closed_fraction, closed, grid_points, plot),
        Command::Study { spec } => run_study(&ctx, &spec),
        Command::ServeSim { spec, addr } => serve_sim(&spec, addr),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.global.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(match e.kind() {
                ErrorKind::Config => 2,
                ErrorKind::Data => 3,
                ErrorKind::Backend => 4,
            })
        }
    }
}
