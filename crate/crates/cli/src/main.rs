use std::fs;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use iterlabel::crowdgate::CrowdSession;
use iterlabel::detector::{HiddenWorld, WorldConfig};
use iterlabel::labelstore::{AnnotationState, BoxDocument, ClassCatalog, PersistentStore, StoreHandle};
use iterlabel::orchestrator::{render_table, LoopReport, Simulation};
use iterlabel_cli::service::{router, system_clock, AppState};
use iterlabel_cli::RunConfig;

#[derive(Parser)]
#[command(name = "iterlabel", version, about = "Iterative crowd-assisted bounding-box labeling")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Create an empty label store.
    Init {
        #[arg(long)]
        store: PathBuf,
        /// Comma-separated class names.
        #[arg(long, value_delimiter = ',', required = true)]
        classes: Vec<String>,
    },
    /// Import a box-JSON file as seed labels.
    ImportBoxes {
        #[arg(long)]
        store: PathBuf,
        file: PathBuf,
    },
    /// Import a dot CSV (image_id,x,y,class_label) as boxes awaiting review.
    ImportDots {
        #[arg(long)]
        store: PathBuf,
        file: PathBuf,
        #[arg(long, default_value_t = iterlabel::geometry::DEFAULT_HALF_EXTENT)]
        half_extent: f64,
        /// Size for images not yet in the store, as WIDTHxHEIGHT.
        #[arg(long, value_parser = parse_extent)]
        default_extent: Option<(u32, u32)>,
    },
    /// Run a full simulated labeling campaign.
    RunSim {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print the per-loop results table of a run directory.
    Report {
        #[arg(long)]
        run: PathBuf,
        /// Also recompute every report from the event log and compare.
        #[arg(long)]
        verify: bool,
    },
    /// Export annotations in the given states as box-JSON.
    Export {
        #[arg(long)]
        store: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "seed,approved")]
        states: Vec<String>,
        #[arg(long)]
        include_background: bool,
        /// Output file; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Serve the HIT API over HTTP.
    Serve {
        #[arg(long)]
        store: PathBuf,
        /// Run file whose seed and [crowd] section configure the service.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value = "127.0.0.1:8080")]
        addr: SocketAddr,
    },
}

fn parse_extent(s: &str) -> Result<(u32, u32), String> {
    let (w, h) = s.split_once('x').ok_or("expected WIDTHxHEIGHT")?;
    let w = w.parse().map_err(|e| format!("width: {e}"))?;
    let h = h.parse().map_err(|e| format!("height: {e}"))?;
    Ok((w, h))
}

fn load_config(path: &Path) -> Result<RunConfig> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut cfg = RunConfig::from_toml(&text).with_context(|| format!("parsing {}", path.display()))?;
    cfg.resolve_paths(path.parent().unwrap_or(Path::new(".")));
    Ok(cfg)
}

fn parse_states(names: &[String]) -> Result<Vec<AnnotationState>> {
    names
        .iter()
        .map(|n| AnnotationState::parse(n).with_context(|| format!("unknown annotation state {n:?}")))
        .collect()
}

fn run_sim(config: &Path, out: Option<PathBuf>) -> Result<()> {
    let cfg = load_config(config)?;
    let Some(out) = out.or_else(|| cfg.output_dir.clone()) else {
        bail!("no output directory: pass --out or set output_dir");
    };
    let sim_cfg = cfg.sim();
    let mut sim = match &cfg.world_file {
        Some(path) => {
            if cfg.world != WorldConfig::default() {
                bail!("config sets both world_file and a [world] section");
            }
            let world = HiddenWorld::load(path).with_context(|| format!("loading {}", path.display()))?;
            Simulation::with_world(sim_cfg, world)?
        }
        None => Simulation::new(sim_cfg)?,
    };
    sim.run()?;
    sim.write_outputs(&out)?;
    print!("{}", render_table(sim.reports()));
    let last = sim.reports().last().context("run produced no reports")?;
    println!(
        "loops: {}  converged: {}  coverage: {:.4}  outputs: {}",
        sim.next_loop(),
        sim.converged(),
        last.coverage,
        out.display()
    );
    if let Some(r) = sim.undotted_recovery() {
        println!("undotted objects recovered: {r:.4}");
    }
    Ok(())
}

fn report(run: &Path, verify: bool) -> Result<()> {
    let dir = run.join("reports");
    let mut reports: Vec<(u32, String, LoopReport)> = Vec::new();
    for entry in fs::read_dir(&dir).with_context(|| format!("reading {}", dir.display()))? {
        let path = entry?.path();
        let Some(n) = path
            .file_name()
            .and_then(|n| n.to_str())
            .and_then(|n| n.strip_prefix("loop_"))
            .and_then(|n| n.strip_suffix(".json"))
            .and_then(|n| n.parse().ok())
        else {
            continue;
        };
        let text = fs::read_to_string(&path)?;
        let r: LoopReport = serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
        reports.push((n, text, r));
    }
    reports.sort_by_key(|(n, ..)| *n);
    if reports.is_empty() {
        bail!("no loop reports under {}", dir.display());
    }
    let rows: Vec<LoopReport> = reports.iter().map(|(.., r)| r.clone()).collect();
    print!("{}", render_table(&rows));
    if verify {
        let (_, replayed) = Simulation::replay_dir(run)?;
        if replayed.len() != reports.len() {
            bail!("replay produced {} reports, run has {}", replayed.len(), reports.len());
        }
        for ((n, text, _), r) in reports.iter().zip(&replayed) {
            if serde_json::to_string_pretty(r)? + "\n" != *text {
                bail!("replayed report for loop {n} differs");
            }
        }
        println!("replay: {} reports identical", replayed.len());
    }
    Ok(())
}

async fn serve(store_dir: &Path, config: Option<&Path>, addr: SocketAddr) -> Result<()> {
    let cfg = match config {
        Some(p) => load_config(p)?,
        None => RunConfig::default(),
    };
    let store = PersistentStore::open(store_dir).with_context(|| format!("opening store {}", store_dir.display()))?;
    let handle = StoreHandle::new(store);
    let state = AppState {
        store: handle.clone(),
        session: Arc::new(CrowdSession::new(cfg.crowd.clone(), cfg.seed)),
        clock: system_clock(),
        example_limit: 12,
    };
    let listener = tokio::net::TcpListener::bind(addr)
        .await
        .with_context(|| format!("binding {addr}"))?;
    log::info!("serving on http://{}", listener.local_addr()?);
    axum::serve(listener, router(state))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await?;
    handle.checkpoint()?;
    log::info!("store flushed; shutting down");
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Init { store, classes } => {
            let catalog = ClassCatalog::new(classes)?;
            PersistentStore::create(&store, catalog)?;
            println!("initialised {}", store.display());
        }
        Command::ImportBoxes { store, file } => {
            let text = fs::read_to_string(&file).with_context(|| format!("reading {}", file.display()))?;
            let doc = BoxDocument::from_json(&text)?;
            let mut ps = PersistentStore::open(&store)?;
            let summary = ps.store_mut().import_boxes(&doc)?;
            ps.flush()?;
            println!("{}", serde_json::to_string(&summary)?);
        }
        Command::ImportDots {
            store,
            file,
            half_extent,
            default_extent,
        } => {
            let reader = fs::File::open(&file).with_context(|| format!("opening {}", file.display()))?;
            let mut ps = PersistentStore::open(&store)?;
            let summary = ps.store_mut().import_dots(reader, half_extent, default_extent)?;
            ps.flush()?;
            println!("{}", serde_json::to_string(&summary)?);
        }
        Command::RunSim { config, out } => run_sim(&config, out)?,
        Command::Report { run, verify } => report(&run, verify)?,
        Command::Export {
            store,
            states,
            include_background,
            out,
        } => {
            let states = parse_states(&states)?;
            let ps = PersistentStore::open(&store)?;
            let json = ps.store().dataset().export_boxes(&states, include_background).to_json();
            match out {
                Some(p) => fs::write(&p, json + "\n").with_context(|| format!("writing {}", p.display()))?,
                None => println!("{json}"),
            }
        }
        Command::Serve { store, config, addr } => {
            let rt = tokio::runtime::Runtime::new()?;
            rt.block_on(serve(&store, config.as_deref(), addr))?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let body = serde_json::json!({
                "error": e.to_string(),
                "causes": e.chain().skip(1).map(ToString::to_string).collect::<Vec<_>>(),
            });
            eprintln!("{body}");
            ExitCode::FAILURE
        }
    }
}
