mod config;

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use reid_core::backbone::Mode;
use reid_core::checkpoint;
use reid_core::dataset::{self, PersonImageRecord, Source};
use reid_core::eval;
use reid_core::gradcheck;
use reid_core::image::ImageBuffer;
use reid_core::trainer;
use reid_core::Error;

use config::{parse_scales, Preset, RunConfig};

const EXIT_OTHER: u8 = 1;
const EXIT_CONFIG: u8 = 2;
const EXIT_IO: u8 = 3;
const EXIT_NUMERIC: u8 = 4;

#[derive(Parser, Debug)]
#[command(name = "reid", version, about = "Multi-scale person re-identification toolkit")]
struct Cli {
    /// TOML file overriding preset values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true, value_enum, default_value = "toy")]
    preset: Preset,
    /// full, fusion_only, resnext or resnet.
    #[arg(long, global = true)]
    mode: Option<Mode>,
    /// Branch input sizes, e.g. "64x32,48x24".
    #[arg(long, global = true)]
    scales: Option<String>,
    /// Deterministic mode: no background augmentation thread.
    #[arg(long, global = true)]
    single_thread: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum EvalSplit {
    /// Query split against the gallery split.
    Query,
    /// Training images against themselves (fit sanity check).
    Train,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic dataset as train/query/gallery PNG directories.
    Synth {
        #[arg(long)]
        out: PathBuf,
    },
    /// Train on a dataset directory; writes checkpoints and a CSV log.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "run")]
        out: PathBuf,
        /// Continue from this checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Rank-1 and mAP of a checkpoint; writes per-query AP as CSV.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Defaults to the checkpoint path with an `eval.csv` extension.
        #[arg(long)]
        report: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "query")]
        split: EvalSplit,
    },
    /// Descriptors for every image of a directory.
    Embed {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        images: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Finite-difference check of every tensor op and the toy network.
    Gradcheck,
}

#[derive(Debug)]
enum Failure {
    Core(Error),
    GradCheck(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Core(e)
    }
}

impl Failure {
    fn exit_code(&self) -> u8 {
        match self {
            Failure::GradCheck(_) => EXIT_NUMERIC,
            Failure::Core(e) => match e {
                Error::Config(_) => EXIT_CONFIG,
                Error::Io(_) | Error::Load { .. } | Error::Image(_) | Error::Checkpoint { .. } => EXIT_IO,
                Error::NonFinite { .. } => EXIT_NUMERIC,
                _ => EXIT_OTHER,
            },
        }
    }
}

impl std::fmt::Display for Failure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Failure::Core(e) => write!(f, "{e}"),
            Failure::GradCheck(m) => write!(f, "{m}"),
        }
    }
}

type Outcome = std::result::Result<(), Failure>;

fn run_config(cli: &Cli) -> reid_core::Result<RunConfig> {
    let base = RunConfig::preset(cli.preset);
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(&base, path)?,
        None => base,
    };
    if let Some(seed) = cli.seed {
        cfg.set_seed(seed);
    }
    if let Some(mode) = cli.mode {
        cfg.set_mode(mode);
    }
    if let Some(s) = &cli.scales {
        cfg.set_scales(parse_scales(s)?);
    }
    if cli.single_thread {
        cfg.train.deterministic = true;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn synth(cfg: &RunConfig, out: &Path) -> Outcome {
    let split = dataset::generate_synthetic(&cfg.synth)?;
    dataset::export(&split, out)?;
    println!(
        "train {}  query {}  gallery {}  ({} identities, {} cameras)",
        split.train.len(),
        split.query.len(),
        split.gallery.len(),
        cfg.synth.n_id,
        cfg.synth.cameras
    );
    Ok(())
}

fn train(cfg: &RunConfig, data: &Path, out: &Path, resume: Option<&Path>) -> Outcome {
    let split = dataset::load_directory(data)?;
    let n_id = split.train.iter().map(|r| r.identity).collect::<BTreeSet<_>>().len();
    let model = cfg.model.consensus(n_id);
    model.validate()?;
    let mut tc = cfg.train.clone();
    tc.checkpoint_dir = Some(out.to_path_buf());
    if tc.log_path.is_none() {
        tc.log_path = Some(out.join("train_log.csv"));
    }
    fs::create_dir_all(out).map_err(Error::from)?;
    fs::write(out.join("config.toml"), cfg.to_toml()?).map_err(Error::from)?;
    log::info!("{} training images, {} identities", split.train.len(), n_id);
    let log = match resume {
        Some(ck) => trainer::resume::<f32>(ck, &split.train, &tc)?.1,
        None => {
            let mut net = trainer::init_model::<f32>(&model, &tc)?;
            trainer::fit(&mut net, &split.train, &tc, 0)?
        }
    };
    match log.rows.last() {
        Some(last) => println!(
            "epoch {}  loss {:.4}  checkpoint {}",
            last.epoch,
            last.total_loss,
            trainer::checkpoint_path(out, last.epoch).display()
        ),
        None => println!("nothing to do: checkpoint already at {} epochs", tc.epochs),
    }
    Ok(())
}

fn evaluate(ckpt: &Path, data: &Path, report: Option<&Path>, which: EvalSplit, batch: usize) -> Outcome {
    let ck = checkpoint::load::<f32>(ckpt)?;
    let split = dataset::load_directory(data)?;
    let (query, gallery) = match which {
        EvalSplit::Query => (&split.query, &split.gallery),
        EvalSplit::Train => (&split.train, &split.train),
    };
    let r = eval::evaluate(&ck.net, query, gallery, batch)?;
    let path = report.map_or_else(|| ckpt.with_extension("eval.csv"), Path::to_path_buf);
    r.write_ap_csv(&path)?;
    println!("Rank-1  mAP");
    println!("{:.4}  {:.4}", r.rank1(), r.map);
    if r.unanswerable > 0 {
        println!("({} of {} queries had no valid match and were skipped)", r.unanswerable, query.len());
    }
    Ok(())
}

/// Images of `dir`; names that do not follow the dataset convention get
/// identity and camera 0 in the sidecar.
fn images_in(dir: &Path) -> reid_core::Result<Vec<PersonImageRecord>> {
    let load_err = |e: std::io::Error| Error::Load {
        path: dir.to_path_buf(),
        reason: e.to_string(),
    };
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(load_err)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension()
                .and_then(|e| e.to_str())
                .is_some_and(|e| matches!(e.to_ascii_lowercase().as_str(), "png" | "jpg" | "jpeg"))
        })
        .collect();
    paths.sort();
    paths
        .into_iter()
        .map(|path| {
            let name = path.file_name().and_then(|n| n.to_str()).unwrap_or_default();
            let (identity, camera) = dataset::parse_filename(name).unwrap_or((0, 0));
            Ok(PersonImageRecord {
                identity,
                camera,
                image: ImageBuffer::load(&path)?,
                source: Source::File(path),
            })
        })
        .collect()
}

fn embed(ckpt: &Path, images: &Path, out: &Path, batch: usize) -> Outcome {
    let ck = checkpoint::load::<f32>(ckpt)?;
    let records = images_in(images)?;
    if records.is_empty() {
        return Err(Error::Load {
            path: images.to_path_buf(),
            reason: "no images".into(),
        }
        .into());
    }
    let descriptors = eval::embed_records(&ck.net, &records, batch)?;
    eval::write_embeddings(out, &descriptors, &records)?;
    println!(
        "{} descriptors of length {} written to {}",
        descriptors.len(),
        ck.net.config.descriptor_len(),
        out.display()
    );
    Ok(())
}

fn run_gradcheck(seed: u64) -> Outcome {
    let mut failed = Vec::new();
    for (name, report) in gradcheck::op_suite(seed)? {
        let ok = report.passes(gradcheck::SUITE_RTOL);
        println!("{:<6} {name:<36} max rel error {:.2e}", if ok { "ok" } else { "FAIL" }, report.max_rel_error());
        if !ok {
            failed.push(name);
        }
    }
    let net = gradcheck::network_check(&gradcheck::toy_check_config(), seed, 16, gradcheck::DEFAULT_STEP)?;
    let ok = net.passes(gradcheck::SUITE_RTOL);
    println!(
        "{:<6} {:<36} max rel error {:.2e} over {} samples",
        if ok { "ok" } else { "FAIL" },
        "toy network",
        net.max_rel_error(),
        net.len()
    );
    if !ok {
        if let Some(w) = net.worst() {
            println!("       worst: {} [{}] analytic {:e} numeric {:e}", w.tensor, w.index, w.analytic, w.numeric);
        }
        failed.push("toy network".into());
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Failure::GradCheck(format!("gradient check failed: {}", failed.join(", "))))
    }
}

fn run(cli: &Cli) -> Outcome {
    let cfg = run_config(cli)?;
    let batch = cfg.train.batch_size;
    match &cli.command {
        Command::Synth { out } => synth(&cfg, out),
        Command::Train { data, out, resume } => train(&cfg, data, out, resume.as_deref()),
        Command::Eval {
            checkpoint,
            data,
            report,
            split,
        } => evaluate(checkpoint, data, report.as_deref(), *split, batch),
        Command::Embed { checkpoint, images, out } => embed(checkpoint, images, out, batch),
        Command::Gradcheck => run_gradcheck(cfg.train.seed),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
