use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand, ValueEnum};
use serde_json::json;

use vaultcredit::ingest::{self, check_data_depth, write_atomic};
use vaultcredit::pipeline::{self, EngineConfig, MetricReport};
use vaultcredit::scenarios::ScenarioSpec;
use vaultcredit::simkit::{self, WorldConfig};

#[derive(Parser, Debug)]
#[command(name = "vce", version, about = "Vault credit-risk engine")]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// Engine config (JSON). For `simulate`, a world config.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Overrides the seed in the config.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,

    /// Worker threads. Does not change results.
    #[arg(long, global = true)]
    workers: Option<usize>,

    /// Allow data-depth requirements below the defaults.
    #[arg(long, global = true)]
    force: bool,

    /// all, historical, parametric, adversarial, or a scenarios.json path.
    #[arg(long, global = true)]
    scenario_set: Option<String>,

    #[arg(long, global = true, value_enum, default_value_t = Format::Json)]
    format: Format,
}

#[derive(Subcommand, Debug, Clone, Copy)]
enum Command {
    /// Load and validate a bundle; write the data-depth report.
    Ingest,
    /// Fit λ, oracle latency, ρ_G, utilization dynamics and CLR.
    Estimate,
    /// Build the scenario set.
    Stress,
    /// Full pipeline; writes report.json.
    Score,
    /// V1 backtest and Gap diagnostic.
    Backtest,
    /// Generate a synthetic bundle with a truth sidecar.
    Simulate,
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq)]
enum Format {
    Json,
    Csv,
}

#[derive(Debug)]
struct Failure(vaultcredit::Error);

impl std::fmt::Display for Failure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        self.0.fmt(f)
    }
}

impl std::error::Error for Failure {}

fn engine<T>(r: vaultcredit::Result<T>) -> anyhow::Result<T> {
    r.map_err(|e| Failure(e).into())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("VCE_LOG", "warn")).init();
    let cli = Cli::parse();
    let workers = cli.workers.unwrap_or_else(|| std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1));
    let pool = match rayon::ThreadPoolBuilder::new().num_threads(workers.max(1)).build() {
        Ok(p) => p,
        Err(e) => return fail("config", &e.to_string()),
    };
    match pool.install(|| run(&cli)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let code = e.downcast_ref::<Failure>().map(|f| f.0.code()).unwrap_or("cli");
            fail(code, &format!("{e:#}"))
        }
    }
}

fn fail(code: &str, message: &str) -> ExitCode {
    println!("{}", json!({ "error": { "code": code, "message": message } }));
    ExitCode::FAILURE
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> anyhow::Result<T> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn pretty<T: serde::Serialize>(v: &T) -> anyhow::Result<Vec<u8>> {
    let mut b = serde_json::to_vec_pretty(v)?;
    b.push(b'\n');
    Ok(b)
}

/// Config with CLI overrides applied, plus the bundle directory.
fn resolve(cli: &Cli) -> anyhow::Result<(EngineConfig, PathBuf)> {
    let path = cli.config.as_ref().context("--config is required")?;
    let base = path.parent().unwrap_or(Path::new("."));
    let mut raw: serde_json::Value = read_json(path)?;
    // "normalization" may name a spec file instead of holding it inline
    if let Some(rel) = raw.get("normalization").and_then(|v| v.as_str()).map(str::to_owned) {
        raw["normalization"] = read_json(&base.join(rel))?;
    }
    let mut cfg: EngineConfig = serde_json::from_value(raw).with_context(|| format!("parsing {}", path.display()))?;
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(set) = &cli.scenario_set {
        if ["all", "historical", "parametric", "adversarial"].contains(&set.as_str()) {
            cfg.scenarios.set = set.clone();
        } else {
            let list: Vec<ScenarioSpec> = read_json(Path::new(set))?;
            cfg.scenarios.custom = Some(list);
        }
    }
    engine(cfg.validate())?;
    engine(cfg.ingest.depth_requirements.check(cli.force))?;
    let data = base.join(&cfg.data);
    eprintln!("{}", serde_json::to_string_pretty(&cfg)?);
    Ok((cfg, data))
}

fn run(cli: &Cli) -> anyhow::Result<()> {
    if let Command::Simulate = cli.command {
        return simulate(cli);
    }
    let (cfg, data) = resolve(cli)?;
    let bundle = engine(ingest::load_bundle(&data, &cfg.ingest))?;
    let mut files: Vec<(&str, Vec<u8>)> = Vec::new();
    match cli.command {
        Command::Ingest => {
            let cov = check_data_depth(&bundle, &cfg.ingest.depth_requirements);
            files.push(("coverage.json", pretty(&cov)?));
        }
        Command::Estimate => {
            let (est, warnings) = pipeline::estimates(&bundle, &cfg);
            files.push(("estimates.json", pretty(&json!({ "estimates": est, "warnings": warnings }))?));
        }
        Command::Stress => {
            let (set, warnings) = engine(pipeline::stress(&bundle, &cfg))?;
            for w in &warnings {
                log::warn!("{w}");
            }
            files.push(("scenarios.json", pretty(&set)?));
        }
        Command::Backtest => {
            let (v, warnings) = pipeline::backtest(&bundle, &cfg);
            files.push(("validation.json", pretty(&json!({ "validation": v, "warnings": warnings }))?));
        }
        Command::Score => {
            let report = engine(pipeline::score(&bundle, &cfg))?;
            files.push(("report.json", pretty(&report)?));
            if cli.format == Format::Csv {
                files.extend(csv_tables(&report)?);
            }
            print!("{}", pipeline::summary(&report));
        }
        Command::Simulate => unreachable!(),
    }
    std::fs::create_dir_all(&cli.out).with_context(|| format!("creating {}", cli.out.display()))?;
    for (name, bytes) in files {
        let p = cli.out.join(name);
        engine(write_atomic(&p, &bytes))?;
        log::info!("wrote {}", p.display());
    }
    Ok(())
}

fn simulate(cli: &Cli) -> anyhow::Result<()> {
    let cfg: WorldConfig = match &cli.config {
        Some(p) => read_json(p)?,
        None => WorldConfig::default(),
    };
    let seed = cli.seed.unwrap_or(0);
    eprintln!("{}", serde_json::to_string_pretty(&json!({ "seed": seed, "world": cfg }))?);
    let (bundle, truth) = engine(simkit::generate(&cfg, seed))?;
    engine(simkit::write_world(&bundle, &truth, &cli.out))?;
    println!("wrote {}", cli.out.display());
    Ok(())
}

fn table(header: &[&str], rows: Vec<Vec<String>>) -> anyhow::Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header)?;
    for r in rows {
        w.write_record(&r)?;
    }
    Ok(w.into_inner()?)
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn csv_tables(r: &MetricReport) -> anyhow::Result<Vec<(&'static str, Vec<u8>)>> {
    let metrics = r
        .metrics
        .iter()
        .map(|m| {
            vec![
                format!("{:?}", m.name),
                m.scenario_id.clone().unwrap_or_default(),
                opt(m.value),
                serde_json::to_value(m.units).map(|v| v.as_str().unwrap_or_default().to_string()).unwrap_or_default(),
            ]
        })
        .collect();
    let scen = r
        .per_scenario
        .iter()
        .map(|s| {
            vec![
                s.id.clone(),
                format!("{:?}", s.kind).to_lowercase(),
                s.flagged.to_string(),
                opt(s.v1),
                opt(s.v2.as_ref().map(|v| v.v2)),
                opt(s.v2.as_ref().map(|v| v.loss_rate)),
                s.exec_cost.to_string(),
            ]
        })
        .collect();
    let vcs = r
        .normalized
        .iter()
        .map(|(k, n)| vec![k.clone(), n.score.to_string(), n.worst_case.to_string()])
        .chain([
            vec!["VCS_mult".into(), r.vcs.vcs_mult.to_string(), String::new()],
            vec!["VCS_add".into(), r.vcs.vcs_add.to_string(), String::new()],
        ])
        .collect();
    let warn = r.warnings.iter().map(|w| vec![w.clone()]).collect();
    Ok(vec![
        ("metrics.csv", table(&["metric", "scenario", "value", "units"], metrics)?),
        ("scenarios.csv", table(&["id", "kind", "flagged", "v1", "v2", "loss_rate", "exec_cost"], scen)?),
        ("vcs.csv", table(&["component", "score", "worst_case"], vcs)?),
        ("warnings.csv", table(&["warning"], warn)?),
    ])
}
