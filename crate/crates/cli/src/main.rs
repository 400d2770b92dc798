mod local;

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;
use std::time::Duration;

use clap::{Args, Parser, Subcommand, ValueEnum};
use exac_core::analysis::{
    self, cohorts_by_prefix, compute_metrics, session_report, write_report, ModelSpec,
};
use exac_core::api::ApiClient;
use exac_core::assembly::{AssemblyConfig, AssemblyService, LocalDirStorage, TrialStatus};
use exac_core::clientsim::{run_cohort, SimAgentConfig};
use exac_core::management::{
    poll_health, AssignmentStrategy, HealthPoller, HealthState, Management, MockRecruitmentClient,
    Registry, RewardPolicy,
};
use exac_core::manifest::lifecycle::{self, Executor, MockExecutor, StateFile};
use exac_core::manifest::{
    default_services, parse_manifest, parse_services, validate_manifest, ExperimentManifest,
};
use exac_core::server::{
    now_ms, serve, spawn_background, AppState, BackgroundConfig, VerifyResponse,
};
use serde_json::json;

use local::LocalExecutor;

#[derive(Parser, Debug)]
#[command(
    name = "exac",
    version,
    about = "Run an online experiment from its manifest"
)]
struct Cli {
    #[command(flatten)]
    cfg: CliConfig,
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Args, Debug, Clone)]
struct CliConfig {
    #[arg(long, global = true, default_value = "experiment.json")]
    manifest: PathBuf,
    #[arg(long, global = true, default_value = "exac.state.json")]
    state: PathBuf,
    #[arg(
        long,
        global = true,
        env = "EXAC_ENDPOINT",
        default_value = "http://127.0.0.1:8750"
    )]
    endpoint: String,
    #[arg(long, global = true, default_value = "registry.jsonl")]
    registry: PathBuf,
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Working directory of the local driver; defaults to `exac-data` next
    /// to the state file.
    #[arg(long, global = true)]
    data_dir: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Validate the manifest, plan and apply the infrastructure.
    Deploy {
        #[arg(long, value_enum, default_value_t = Driver::Local)]
        executor: Driver,
        #[arg(long)]
        services: Option<PathBuf>,
        #[arg(long, default_value_t = 1)]
        hit_batches: u32,
        /// Sleep before each mock driver call.
        #[arg(long, hide = true, default_value_t = 0)]
        mock_delay_ms: u64,
    },
    /// Run the assembly and management service until interrupted.
    Serve {
        #[arg(long, default_value = "127.0.0.1:8750")]
        listen: String,
        #[arg(long, default_value = "bucket")]
        storage: PathBuf,
        #[arg(long, default_value = "balanced")]
        assignment: AssignmentStrategy,
        /// Services polled for `/v1/mgmt/health`.
        #[arg(long = "health-target")]
        health_targets: Vec<String>,
        #[arg(long, default_value_t = 2000)]
        interval_ms: u64,
    },
    /// Drive simulated participants against the service.
    Simulate {
        #[arg(short = 'n', long = "participants", default_value_t = 100)]
        participants: u64,
        #[arg(long, default_value_t = 8)]
        parallelism: usize,
        #[arg(long, default_value_t = 0.0)]
        fault_rate: f64,
        /// Keep each client-side trajectory payload here.
        #[arg(long)]
        record_dir: Option<PathBuf>,
    },
    /// Poll service health and print the funnel.
    Monitor {
        #[arg(long, default_value_t = 2000)]
        interval_ms: u64,
        #[arg(long, default_value_t = 3)]
        threshold: u32,
        /// Stop after this many polls; runs until interrupted otherwise.
        #[arg(long)]
        ticks: Option<u64>,
    },
    /// Verify a completion code and pay the reward.
    Verify {
        #[arg(long)]
        session: String,
        #[arg(long)]
        code: String,
    },
    /// Download reconstructed trajectories and event logs.
    Export,
    /// Export, compute metrics and fit the mixed model per cohort.
    Analyze {
        #[arg(long, default_value = "path_length_m")]
        response: String,
        #[arg(long, default_value = "Control")]
        reference: String,
        /// Use trajectories already in the output directory.
        #[arg(long)]
        offline: bool,
    },
    /// Destroy everything deploy created.
    Teardown {
        #[arg(long, value_enum, default_value_t = Driver::Local)]
        executor: Driver,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Driver {
    Local,
    Mock,
}

struct Failure(String);

impl<E: std::fmt::Display> From<E> for Failure {
    fn from(e: E) -> Self {
        Failure(e.to_string())
    }
}

type CmdResult = Result<(), Failure>;

fn main() -> ExitCode {
    let cli = Cli::parse();
    init_logging();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
    }
}

fn init_logging() {
    let filter = tracing_subscriber::EnvFilter::try_from_env("EXAC_LOG")
        .unwrap_or_else(|_| tracing_subscriber::EnvFilter::new("info"));
    let _ = tracing_subscriber::fmt()
        .with_env_filter(filter)
        .with_writer(std::io::stderr)
        .try_init();
}

fn run(cli: Cli) -> CmdResult {
    let cfg = cli.cfg;
    match cli.command {
        Cmd::Deploy {
            executor,
            services,
            hit_batches,
            mock_delay_ms,
        } => {
            let driver = DriverOpts {
                driver: executor,
                hit_batches,
                mock_delay: Duration::from_millis(mock_delay_ms),
            };
            deploy(&cfg, driver, services.as_deref())
        }
        Cmd::Teardown { executor } => teardown(
            &cfg,
            DriverOpts {
                driver: executor,
                hit_batches: 0,
                mock_delay: Duration::ZERO,
            },
        ),
        cmd => {
            let rt = tokio::runtime::Runtime::new()?;
            rt.block_on(run_async(cfg, cmd))
        }
    }
}

async fn run_async(cfg: CliConfig, cmd: Cmd) -> CmdResult {
    match cmd {
        Cmd::Serve {
            listen,
            storage,
            assignment,
            health_targets,
            interval_ms,
        } => {
            serve_cmd(
                &cfg,
                &listen,
                &storage,
                assignment,
                health_targets,
                interval_ms,
            )
            .await
        }
        Cmd::Simulate {
            participants,
            parallelism,
            fault_rate,
            record_dir,
        } => simulate(&cfg, participants, parallelism, fault_rate, record_dir).await,
        Cmd::Monitor {
            interval_ms,
            threshold,
            ticks,
        } => monitor(&cfg, interval_ms, threshold, ticks).await,
        Cmd::Verify { session, code } => verify(&cfg, &session, &code).await,
        Cmd::Export => export(&cfg)
            .await
            .map(|n| eprintln!("exported {n} trajectories")),
        Cmd::Analyze {
            response,
            reference,
            offline,
        } => {
            analyze(
                &cfg,
                ModelSpec {
                    response,
                    reference,
                },
                offline,
            )
            .await
        }
        Cmd::Deploy { .. } | Cmd::Teardown { .. } => unreachable!("handled synchronously"),
    }
}

fn load_manifest(path: &Path) -> Result<ExperimentManifest, Failure> {
    let bytes =
        fs::read(path).map_err(|e| Failure(format!("reading manifest {}: {e}", path.display())))?;
    parse_manifest(&bytes).map_err(|e| Failure(format!("{}: {e}", path.display())))
}

fn print_json(v: &impl serde::Serialize) -> CmdResult {
    let mut out = std::io::stdout().lock();
    serde_json::to_writer(&mut out, v)?;
    writeln!(out)?;
    Ok(())
}

fn data_dir(cfg: &CliConfig) -> PathBuf {
    cfg.data_dir.clone().unwrap_or_else(|| {
        cfg.state
            .parent()
            .filter(|p| !p.as_os_str().is_empty())
            .unwrap_or(Path::new("."))
            .join("exac-data")
    })
}

struct DriverOpts {
    driver: Driver,
    hit_batches: u32,
    mock_delay: Duration,
}

fn executor(
    cfg: &CliConfig,
    opts: &DriverOpts,
    manifest: ExperimentManifest,
) -> Result<Box<dyn Executor>, Failure> {
    Ok(match opts.driver {
        Driver::Mock => Box::new(MockExecutor {
            delay: (!opts.mock_delay.is_zero()).then_some(opts.mock_delay),
            ..MockExecutor::new()
        }),
        Driver::Local => Box::new(LocalExecutor {
            manifest,
            manifest_path: cfg.manifest.clone(),
            data_dir: data_dir(cfg),
            registry: cfg.registry.clone(),
            endpoint: cfg.endpoint.clone(),
            seed: cfg.seed,
            hit_batches: opts.hit_batches,
            exe: std::env::current_exe()?,
            ready_timeout: Duration::from_secs(10),
        }),
    })
}

fn deploy(cfg: &CliConfig, driver: DriverOpts, services: Option<&Path>) -> CmdResult {
    let m = load_manifest(&cfg.manifest)?;
    let services = match services {
        Some(p) => {
            parse_services(&fs::read(p)?).map_err(|e| Failure(format!("{}: {e}", p.display())))?
        }
        None => default_services(),
    };
    let report = validate_manifest(&m, &services);
    for w in &report.warnings {
        eprintln!("warning: {w}");
    }
    if !report.errors.is_empty() {
        return Err(Failure(report.errors.join("; ")));
    }
    let mut sink = StateFile::open(&cfg.state)?;
    let state = sink.load()?;
    let plan = lifecycle::plan(&m, &state)?;
    if plan.is_empty() {
        println!("no changes");
        return Ok(());
    }
    for a in &plan {
        eprintln!("{a}");
    }
    let mut exec = executor(cfg, &driver, m)?;
    let state = lifecycle::apply(&plan, state, exec.as_mut(), &mut sink)
        .map_err(|f| Failure(f.to_string()))?;
    print_json(&state)
}

fn teardown(cfg: &CliConfig, driver: DriverOpts) -> CmdResult {
    let mut sink = StateFile::open(&cfg.state)?;
    let state = sink.load()?;
    if state.created().next().is_none() {
        println!("no changes");
        return Ok(());
    }
    let m = load_manifest(&cfg.manifest)
        .unwrap_or_else(|_| ExperimentManifest::with_defaults("exac", "-"));
    let mut exec = executor(cfg, &driver, m)?;
    let state =
        lifecycle::teardown(state, exec.as_mut(), &mut sink).map_err(|f| Failure(f.to_string()))?;
    print_json(&state)
}

async fn shutdown_signal() {
    use tokio::signal::unix::{signal, SignalKind};
    let mut term = signal(SignalKind::terminate()).expect("installing SIGTERM handler");
    tokio::select! {
        _ = tokio::signal::ctrl_c() => {}
        _ = term.recv() => {}
    }
}

async fn serve_cmd(
    cfg: &CliConfig,
    listen: &str,
    storage: &Path,
    assignment: AssignmentStrategy,
    health_targets: Vec<String>,
    interval_ms: u64,
) -> CmdResult {
    let m = load_manifest(&cfg.manifest)?;
    let storage = LocalDirStorage::new(storage)?;
    let assembly = Arc::new(AssemblyService::new(
        AssemblyConfig {
            salt: m.salt.clone(),
            ..AssemblyConfig::default()
        },
        Arc::new(storage),
    ));
    let recovered = assembly.recover()?;
    let registry = Arc::new(Registry::open(
        &cfg.registry,
        m.treatments.clone(),
        assignment,
        cfg.seed,
    )?);
    let mgmt = Arc::new(Management::new(
        registry,
        Arc::new(MockRecruitmentClient::new()),
        RewardPolicy::from_manifest(&m),
        &m.salt,
    ));
    let state = AppState::new(assembly, mgmt);
    let listener = tokio::net::TcpListener::bind(listen).await?;
    tracing::info!(addr = %listener.local_addr()?, recovered, "serving");
    let tasks = spawn_background(
        &state,
        BackgroundConfig {
            health_targets,
            health_interval: Duration::from_millis(interval_ms),
            ..BackgroundConfig::default()
        },
    );
    serve(listener, state, shutdown_signal()).await?;
    for t in tasks {
        t.abort();
    }
    tracing::info!("stopped");
    Ok(())
}

async fn simulate(
    cfg: &CliConfig,
    n: u64,
    parallelism: usize,
    fault_rate: f64,
    record_dir: Option<PathBuf>,
) -> CmdResult {
    let m = load_manifest(&cfg.manifest)?;
    let api = ApiClient::new(&cfg.endpoint)?;
    let prefix = format!("p{}-", cfg.seed);
    let first_index = api
        .participants()
        .await?
        .iter()
        .filter(|p| p.participant_id.starts_with(&prefix))
        .count() as u64;
    let sim = SimAgentConfig {
        seed: cfg.seed,
        fault_rate,
        record_dir,
        ..SimAgentConfig::with_manifest(&m)
    };
    let result = run_cohort(&api, &sim, &m, n, first_index, parallelism).await?;
    fs::create_dir_all(&cfg.out)?;
    let path = cfg
        .out
        .join(format!("simulate_{}_{first_index}.json", cfg.seed));
    fs::write(&path, serde_json::to_vec_pretty(&result.outcomes)?)?;
    print_json(&result.report)?;
    if result.report.errors > 0 {
        return Err(Failure(format!(
            "{} of {n} sessions failed; see {}",
            result.report.errors,
            path.display()
        )));
    }
    Ok(())
}

async fn monitor(
    cfg: &CliConfig,
    interval_ms: u64,
    threshold: u32,
    ticks: Option<u64>,
) -> CmdResult {
    let api = ApiClient::with_timeout(&cfg.endpoint, Duration::from_millis(interval_ms.max(100)))?;
    let print_funnel = |f| print_json(&json!({ "event": "funnel", "funnel": f }));
    if let Ok(f) = api.funnel().await {
        print_funnel(f)?;
    }
    let timeout = Duration::from_millis(interval_ms.clamp(100, 2000));
    let mut poller = HealthPoller::new(&[cfg.endpoint.clone()], threshold, timeout)?;
    let mut last = HealthState::Healthy;
    let mut out_err = None;
    let polling = poll_health(
        &mut poller,
        interval_ms,
        ticks,
        now_ms,
        |statuses, alarms| {
            for a in alarms {
                eprint!("\x07");
                if let Err(e) = print_json(&json!({ "event": "alarm", "alarm": a })) {
                    out_err.get_or_insert(e);
                }
            }
            if let Some(s) = statuses.first() {
                if s.state == HealthState::Healthy && last != HealthState::Healthy {
                    if let Err(e) = print_json(&json!({ "event": "recovered", "status": s })) {
                        out_err.get_or_insert(e);
                    }
                }
                last = s.state;
            }
        },
    );
    tokio::select! {
        r = polling => r?,
        _ = shutdown_signal() => {}
    }
    if let Some(e) = out_err {
        return Err(e);
    }
    if let Ok(f) = api.funnel().await {
        print_funnel(f)?;
    }
    Ok(())
}

async fn verify(cfg: &CliConfig, session: &str, code: &str) -> CmdResult {
    let api = ApiClient::new(&cfg.endpoint)?;
    let resp = api.verify(session, code).await?;
    print_json(&resp)?;
    match resp {
        VerifyResponse::Rewarded { .. } => Ok(()),
        VerifyResponse::Rejected { reason } => {
            Err(Failure(format!("verification rejected: {reason}")))
        }
    }
}

fn trajectories_dir(cfg: &CliConfig) -> PathBuf {
    cfg.out.join("trajectories")
}

/// Writes `trajectories/{session}/trial_{k}.csv` and `events/{session}.csv`.
async fn export(cfg: &CliConfig) -> Result<usize, Failure> {
    let api = ApiClient::new(&cfg.endpoint)?;
    let mut count = 0;
    for s in api.sessions().await? {
        let events = cfg.out.join("events");
        fs::create_dir_all(&events)?;
        fs::write(
            events.join(format!("{}.csv", s.session_id)),
            api.events_csv(&s.session_id).await?,
        )?;
        for (trial, status) in &s.trials {
            if *status != TrialStatus::Reconstructed {
                continue;
            }
            let dir = trajectories_dir(cfg).join(&s.session_id);
            fs::create_dir_all(&dir)?;
            fs::write(
                dir.join(format!("trial_{trial}.csv")),
                api.trial_csv(&s.session_id, *trial).await?,
            )?;
            count += 1;
        }
    }
    Ok(count)
}

fn read_trajectories(dir: &Path) -> Result<Vec<(String, Vec<u8>)>, Failure> {
    let mut files = Vec::new();
    if !dir.exists() {
        return Ok(files);
    }
    let mut sessions: Vec<_> = fs::read_dir(dir)?.collect::<Result<_, _>>()?;
    sessions.sort_by_key(|e| e.file_name());
    for s in sessions {
        let mut trials: Vec<_> = fs::read_dir(s.path())?.collect::<Result<_, _>>()?;
        trials.sort_by_key(|e| e.file_name());
        for t in trials {
            let path = t.path();
            if path.extension().is_some_and(|e| e == "csv") {
                files.push((path.display().to_string(), fs::read(&path)?));
            }
        }
    }
    Ok(files)
}

async fn analyze(cfg: &CliConfig, spec: ModelSpec, offline: bool) -> CmdResult {
    if !offline {
        export(cfg).await?;
    }
    let files = read_trajectories(&trajectories_dir(cfg))?;
    if files.is_empty() {
        return Err(Failure("no reconstructed trajectories to analyze".into()));
    }
    let metrics = compute_metrics(&files)?;
    let cohorts = cohorts_by_prefix(metrics);
    let report = session_report(&cohorts, &spec)?;
    write_report(&cfg.out, &cohorts, &report)?;
    eprintln!("{}", analysis::COHORT_SIZE_NOTE);
    print_json(&json!({
        "cohorts": report.cohorts.iter().map(|c| json!({
            "cohort": c.cohort,
            "n_obs": c.fit.n_obs,
            "n_participants": c.fit.n_participants,
            "wald": c.wald,
        })).collect::<Vec<_>>(),
        "agreement": report.agreement,
        "report": cfg.out.join("report.json"),
    }))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_simulate_flags() {
        let cli = Cli::try_parse_from(["exac", "simulate", "-n", "462", "--seed", "7"]).unwrap();
        assert_eq!(cli.cfg.seed, 7);
        assert!(matches!(
            cli.command,
            Cmd::Simulate {
                participants: 462,
                ..
            }
        ));
    }

    #[test]
    fn deploy_defaults() {
        let cli = Cli::try_parse_from(["exac", "deploy", "--manifest", "experiment.json"]).unwrap();
        assert_eq!(cli.cfg.manifest, PathBuf::from("experiment.json"));
        assert_eq!(cli.cfg.state, PathBuf::from("exac.state.json"));
        assert!(matches!(
            cli.command,
            Cmd::Deploy {
                executor: Driver::Local,
                ..
            }
        ));
    }

    #[test]
    fn unknown_flag_is_usage_error() {
        let e = Cli::try_parse_from(["exac", "deploy", "--bogus"]).unwrap_err();
        assert_eq!(e.exit_code(), 2);
    }

    #[test]
    fn data_dir_next_to_state() {
        let cli = Cli::try_parse_from(["exac", "export", "--state", "/tmp/x/s.json"]).unwrap();
        assert_eq!(data_dir(&cli.cfg), PathBuf::from("/tmp/x/exac-data"));
    }
}
