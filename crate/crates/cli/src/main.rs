//! `usegmix` command-line tool.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::{Arc, Mutex};
use std::time::Duration;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand};

use usegmix::backend::{fixtures::FixtureMode, fixtures::FixtureService, serve, BackendHandle, Capability};
use usegmix::blend::Inpainter;
use usegmix::config::RunConfig;
use usegmix::pipeline::{
    fresh_targets, generate_dataset, indexed_targets, load_corpus, phase1_index, phase2_augment, triptych,
    ImageStore, InpaintBackendKind,
};
use usegmix::pool::{load_pools, save_pools, CorpusImage, SegmentPool};
use usegmix::raster::{decode_image, EncodePng};
use usegmix::seed::derive_seed;
use usegmix::segmenter::{SegmenterBackend, SharedBackend};

#[derive(Parser)]
#[command(name = "usegmix", version, about = "Segment-replacement augmentation for histology image classification")]
struct Cli {
    /// More log output (-v info, -vv debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct Common {
    /// JSON run configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Master seed; overrides the config.
    #[arg(long, env = "USEGMIX_SEED")]
    seed: Option<u64>,
    /// External backend command; overrides the config.
    #[arg(long, env = "USEGMIX_BACKEND")]
    backend: Option<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Build per-class segment pools from a corpus.
    Index {
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// External feature file to use instead of the builtin descriptor.
        #[arg(long)]
        features: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Synthesize augmented images from indexed pools.
    Augment {
        corpus: PathBuf,
        #[arg(long)]
        pools: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Images per class; overrides the config.
        #[arg(long)]
        count: Option<usize>,
        /// Write the updated penalty weights back to the pools.
        #[arg(long)]
        save_weights: bool,
        #[command(flatten)]
        common: Common,
    },
    /// Summarize pools.
    PoolStats { pools: PathBuf },
    /// Augment one image and write a source/composite/result triptych.
    Preview {
        image: PathBuf,
        #[arg(long)]
        pools: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Class of the image; defaults to its parent directory name.
        #[arg(long)]
        class: Option<String>,
        #[command(flatten)]
        common: Common,
    },
    /// Run built-in sanity checks.
    Selfcheck,
    /// Write a synthetic three-class corpus.
    ToyCorpus {
        out: PathBuf,
        #[arg(long, default_value_t = 4)]
        per_class: usize,
        #[arg(long, default_value_t = 128)]
        size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Serve a canned backend on stdin/stdout.
    #[command(hide = true)]
    FixtureBackend {
        #[arg(long)]
        mode: FixtureMode,
        /// Append every received request line to this file.
        #[arg(long)]
        log: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => e.exit(),
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            for cause in e.chain().skip(1) {
                eprintln!("  caused by: {cause}");
            }
            ExitCode::from(1)
        }
    }
}

/// Config file, then flag and environment overrides.
fn resolve_config(common: &Common) -> anyhow::Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.phase2.master_seed = seed;
    }
    if let Some(cmd) = &common.backend {
        cfg.backend = Some(cmd.clone()).filter(|c| !c.trim().is_empty());
    }
    Ok(cfg)
}

fn spawn_shared(cfg: &RunConfig) -> anyhow::Result<Option<SharedBackend>> {
    let Some(cmd) = &cfg.backend else { return Ok(None) };
    let argv: Vec<String> = cmd.split_whitespace().map(str::to_owned).collect();
    let handle = BackendHandle::spawn(&argv, Duration::from_secs_f64(cfg.backend_timeout_secs))
        .with_context(|| format!("starting backend `{cmd}`"))?;
    log::info!("backend {} ready", handle.name());
    Ok(Some(Arc::new(Mutex::new(handle))))
}

fn has(backend: &SharedBackend, cap: Capability) -> bool {
    backend.lock().unwrap_or_else(|e| e.into_inner()).has(cap)
}

fn segmenter(cfg: &RunConfig, backend: &Option<SharedBackend>) -> SegmenterBackend {
    match backend {
        Some(b) if has(b, Capability::Segment) => SegmenterBackend::External(b.clone()),
        Some(_) => {
            log::warn!("backend cannot segment; using the builtin flood fill");
            SegmenterBackend::FloodFill(cfg.floodfill.clone())
        }
        None => SegmenterBackend::FloodFill(cfg.floodfill.clone()),
    }
}

fn inpainter(cfg: &RunConfig, backend: &Option<SharedBackend>) -> anyhow::Result<Inpainter> {
    match cfg.phase2.inpaint_backend {
        InpaintBackendKind::Builtin => Ok(Inpainter::Builtin),
        InpaintBackendKind::External => match backend {
            Some(b) if has(b, Capability::Inpaint) => Ok(Inpainter::External(b.clone())),
            Some(_) => bail!("inpaint_backend is external but the backend cannot inpaint"),
            None => bail!("inpaint_backend is external but no backend command is configured"),
        },
    }
}

fn run(command: Command) -> anyhow::Result<()> {
    match command {
        Command::Index { corpus, out, features, common } => {
            let cfg = resolve_config(&common)?;
            let backend = spawn_shared(&cfg)?;
            let features = features.or(cfg.paths.features.clone());
            let pools = phase1_index(
                &corpus,
                &out,
                &cfg.phase1(),
                &segmenter(&cfg, &backend),
                cfg.phase2.master_seed,
                features.as_deref(),
            )?;
            for (class, pool) in &pools {
                println!("{class}: {} segments", pool.len());
            }
            Ok(())
        }
        Command::Augment { corpus, pools: pools_dir, out, count, save_weights, common } => {
            let mut cfg = resolve_config(&common)?;
            if let Some(n) = count {
                cfg.phase2.per_class_count = n;
            }
            let backend = spawn_shared(&cfg)?;
            let inpainter = inpainter(&cfg, &backend)?;
            let mut pools = load_pools(&pools_dir)?;
            let images = load_corpus(&corpus)?;
            let mut store = ImageStore::new(Some(corpus.clone()));
            let report = generate_dataset(&images, &mut pools, &mut store, &cfg.phase2, &cfg.blend, &inpainter, &out)?;
            if save_weights {
                save_pools(&pools, &pools_dir)?;
            }
            println!(
                "wrote {} images to {} ({} failed)",
                report.records.len(),
                out.display(),
                report.failures.len()
            );
            Ok(())
        }
        Command::PoolStats { pools } => {
            let pools = load_pools(&pools)?;
            print_stats(&pools)?;
            Ok(())
        }
        Command::Preview { image, pools: pools_dir, out, class, common } => {
            let cfg = resolve_config(&common)?;
            let backend = spawn_shared(&cfg)?;
            let inpainter = inpainter(&cfg, &backend)?;
            let mut pools = load_pools(&pools_dir)?;
            let class = match class {
                Some(c) => c,
                None => image
                    .parent()
                    .and_then(Path::file_name)
                    .map(|n| n.to_string_lossy().into_owned())
                    .context("cannot infer the class; pass --class")?,
            };
            let pool = pools.get_mut(&class).with_context(|| format!("no pool for class {class:?}"))?;
            let bytes = std::fs::read(&image).with_context(|| format!("reading {}", image.display()))?;
            let src = decode_image(&bytes)?;
            let (id, targets) = preview_targets(&image, &class, &src, pool, &cfg, &backend)?;
            let seed = derive_seed(cfg.phase2.master_seed, &["preview", &id]);
            let mut store = ImageStore::new(pool.corpus_root.clone().map(PathBuf::from));
            store.insert(id.clone(), src.clone());
            let aug = phase2_augment(&src, &targets, pool, &mut store, &cfg.phase2, &cfg.blend, &inpainter, seed)?;
            std::fs::write(&out, triptych(&src, &aug)?.encode_png())
                .with_context(|| format!("writing {}", out.display()))?;
            println!(
                "{}: replaced {} segment(s), new-area ratio {:.3}",
                out.display(),
                aug.replaced.len(),
                aug.ratio
            );
            Ok(())
        }
        Command::Selfcheck => {
            let mut failed = 0;
            for (name, outcome) in usegmix::selfcheck::run_all() {
                match outcome {
                    Ok(()) => println!("ok    {name}"),
                    Err(e) => {
                        failed += 1;
                        println!("FAIL  {name}: {e}");
                    }
                }
            }
            if failed > 0 {
                bail!("{failed} check(s) failed");
            }
            Ok(())
        }
        Command::ToyCorpus { out, per_class, size, seed } => {
            let paths = usegmix::toy::write_toy_corpus(&out, per_class, size, seed)?;
            println!("wrote {} images to {}", paths.len(), out.display());
            Ok(())
        }
        Command::FixtureBackend { mode, log } => {
            let stdout = std::io::stdout();
            let mut service = FixtureService { mode };
            match log {
                None => serve(std::io::stdin().lock(), stdout.lock(), &mut service)?,
                Some(path) => {
                    let file = std::fs::File::create(&path).with_context(|| format!("creating {}", path.display()))?;
                    let tee = Tee { inner: std::io::stdin(), copy: file };
                    serve(std::io::BufReader::new(tee), stdout.lock(), &mut service)?
                }
            }
            Ok(())
        }
    }
}

/// Reader that copies everything it reads into `copy`.
struct Tee<R, W> {
    inner: R,
    copy: W,
}

impl<R: std::io::Read, W: Write> std::io::Read for Tee<R, W> {
    fn read(&mut self, buf: &mut [u8]) -> std::io::Result<usize> {
        let n = self.inner.read(buf)?;
        self.copy.write_all(&buf[..n])?;
        self.copy.flush()?;
        Ok(n)
    }
}

/// Uses the pool's own segments when the image was indexed, fresh ones
/// otherwise.
fn preview_targets(
    image: &Path,
    class: &str,
    src: &usegmix::raster::ImageRgb,
    pool: &SegmentPool,
    cfg: &RunConfig,
    backend: &Option<SharedBackend>,
) -> anyhow::Result<(String, Vec<usegmix::sampler::TargetSelection>)> {
    let abs = std::fs::canonicalize(image).with_context(|| format!("resolving {}", image.display()))?;
    let indexed_id = pool
        .corpus_root
        .as_ref()
        .and_then(|root| abs.strip_prefix(root).ok())
        .map(|rel| rel.to_string_lossy().replace('\\', "/"));
    if let Some(id) = indexed_id {
        let targets = indexed_targets(pool, &id);
        if !targets.is_empty() {
            return Ok((id, targets));
        }
    }
    let name = image.file_name().map_or_else(|| "image".into(), |n| n.to_string_lossy().into_owned());
    let id = format!("{class}/{name}");
    let img = CorpusImage { id: id.clone(), class_label: class.to_owned(), image: src.clone() };
    let targets = fresh_targets(&img, pool, &cfg.phase1(), &segmenter(cfg, backend), cfg.phase2.master_seed)?;
    Ok((id, targets))
}

fn print_stats(pools: &BTreeMap<String, SegmentPool>) -> anyhow::Result<()> {
    let mut out = std::io::stdout().lock();
    writeln!(out, "{:<20} {:>8} {:>5} {:>9} {:>11} {:>10}", "class", "segments", "dim", "features", "mean_weight", "mean_area")?;
    for (class, pool) in pools {
        let n = pool.len() as f64;
        let mean_weight = pool.entries.iter().map(|e| e.weight).sum::<f64>() / n;
        let mean_area = pool
            .entries
            .iter()
            .map(|e| e.anchor.mask.count() as f64 / (e.anchor.mask.width() * e.anchor.mask.height()) as f64)
            .sum::<f64>()
            / n;
        let source = match pool.feature_source {
            usegmix::pool::FeatureSource::Builtin => "builtin",
            usegmix::pool::FeatureSource::External => "external",
        };
        writeln!(
            out,
            "{class:<20} {:>8} {:>5} {source:>9} {mean_weight:>11.3} {mean_area:>10.3}",
            pool.len(),
            pool.dim()
        )?;
    }
    Ok(())
}
