//! Command-line surface: data and workload generation, device bootstrap and
//! the drift and federation experiments.
//!
//! Every setting is a key of a flat `key = value` document (`#` starts a
//! comment). A `--config` file is read first, then each flag overrides the
//! key of the same name (`--segment-len` sets `segment_len`). One file may
//! serve all commands: each command reads the keys it knows and ignores
//! keys of the others, while keys known to no command are rejected. Input
//! and output paths are relative to `--out`.
//!
//! Exit codes: 0 success, 2 configuration or validation error (including
//! missing inputs), 3 runtime failure.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::str::FromStr;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::adm::AffiliateRule;
use crate::cdm::GammaFit;
use crate::datamodel::{AggFn, AggregateSpec, DataTable};
use crate::engine::{to_pairs, AnalystDevice, EngineConfig, Scaling};
use crate::error::Error;
use crate::regressors::ModelSpec;
use crate::simulator::{
    self, federation_scripts, measure_offline_convergence_on, run_federation, spaces_engine, BetaPoint, DriftConfig,
    DriftInputs, FederationConfig, FederationSummary, OfflineConfig, QuerySpaces, SpacesConfig,
};
use crate::workloads::{self, CenterMode, QueryGenConfig, SyntheticDataConfig};

/// Accepted range of the detection threshold multiplier.
pub const H_SIGMAS_RANGE: (f64, f64) = (3.0, 5.0);

/// Failure of a command, classified by exit code.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Engine(#[from] Error),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Engine(e) if e.is_config() => 2,
            CliError::Engine(_) => 3,
        }
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

fn config_err(e: Error) -> CliError {
    match e {
        Error::Config(m) => CliError::Config(m),
        other => CliError::Config(other.to_string()),
    }
}

// ---------------------------------------------------------------------------
// Flat key/value configuration

/// A flat `key = value` document. Keys are normalized to snake case.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Config {
    values: BTreeMap<String, String>,
}

impl Config {
    pub fn parse(text: &str) -> CliResult<Self> {
        let mut cfg = Config::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| CliError::Config(format!("line {}: expected `key = value`", i + 1)))?;
            let key = normalize_key(k);
            if key.is_empty()
                || !key
                    .chars()
                    .all(|c| c.is_ascii_lowercase() || c.is_ascii_digit() || c == '_')
            {
                return Err(CliError::Config(format!("line {}: invalid key `{}`", i + 1, k.trim())));
            }
            if cfg.values.insert(key.clone(), v.trim().to_string()).is_some() {
                return Err(CliError::Config(format!("line {}: duplicate key `{key}`", i + 1)));
            }
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> CliResult<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn set(&mut self, key: &str, value: impl Into<String>) {
        self.values.insert(normalize_key(key), value.into());
    }

    pub fn raw(&self, key: &str) -> Option<&str> {
        self.values.get(key).map(String::as_str)
    }

    /// Parses `key`, or returns `default` when it is absent.
    pub fn get<T>(&self, key: &str, default: T) -> CliResult<T>
    where
        T: FromStr,
        T::Err: Display,
    {
        Ok(self.get_opt(key)?.unwrap_or(default))
    }

    pub fn get_opt<T>(&self, key: &str) -> CliResult<Option<T>>
    where
        T: FromStr,
        T::Err: Display,
    {
        self.raw(key)
            .map(|v| v.parse().map_err(|e| CliError::Config(format!("`{key} = {v}`: {e}"))))
            .transpose()
    }

    /// Comma-separated list.
    pub fn get_list<T>(&self, key: &str, default: &[T]) -> CliResult<Vec<T>>
    where
        T: FromStr + Clone,
        T::Err: Display,
    {
        match self.raw(key) {
            None => Ok(default.to_vec()),
            Some(v) => v
                .split(',')
                .map(|s| {
                    s.trim()
                        .parse()
                        .map_err(|e| CliError::Config(format!("`{key} = {v}`: {e}")))
                })
                .collect(),
        }
    }

    /// Rejects keys no command understands.
    pub fn check_known(&self) -> CliResult<()> {
        match self.values.keys().find(|k| !known_key(k)) {
            Some(k) => Err(CliError::Config(format!("unknown key `{k}`"))),
            None => Ok(()),
        }
    }
}

fn normalize_key(k: &str) -> String {
    k.trim().to_ascii_lowercase().replace('-', "_")
}

fn known_key(k: &str) -> bool {
    [
        GenDataFlags::KEYS,
        GenWorkloadFlags::KEYS,
        BootstrapFlags::KEYS,
        DriftFlags::KEYS,
        FederationFlags::KEYS,
        EngineFlags::KEYS,
    ]
    .iter()
    .any(|keys| keys.contains(&k))
}

// ---------------------------------------------------------------------------
// Arguments

/// Declares a flag group: one optional string flag per key.
macro_rules! flag_group {
    ($(#[$m:meta])* $name:ident { $($(#[$fm:meta])* $field:ident),* $(,)? }) => {
        $(#[$m])*
        #[derive(Debug, Clone, Default, Args)]
        pub struct $name {
            $($(#[$fm])* #[arg(long)] pub $field: Option<String>,)*
        }

        impl $name {
            pub const KEYS: &'static [&'static str] = &[$(stringify!($field)),*];

            fn apply(&self, cfg: &mut Config) {
                $(if let Some(v) = &self.$field {
                    cfg.set(stringify!($field), v.as_str());
                })*
            }
        }
    };
}

flag_group!(
    /// `gen-data` settings.
    GenDataFlags {
        /// Output CSV [data.csv]
        data,
        /// Number of columns [10]
        columns,
        /// Number of rows [100000]
        rows,
        /// Lower bound of cell values [0]
        lo,
        /// Upper bound of cell values [1e6]
        hi,
        /// RNG seed [7]
        seed,
    }
);

flag_group!(
    /// `gen-workload` settings.
    GenWorkloadFlags {
        /// Output JSON Lines workload [workload.jsonl]
        workload,
        /// Number of queries [10000]
        queries,
        /// Predicates per query [2]
        predicates,
        /// Mean range size as a fraction of the domain width [0.5]
        sel,
        /// Range size sd as a fraction of the domain width [0.01]
        range_noise_sd,
        /// uniform | domain_edge | data_normal [uniform]
        center_mode,
        /// COUNT | SUM | AVG | MIN | MAX [COUNT]
        agg,
        /// Aggregated column [0]
        target,
    }
);

flag_group!(
    /// `bootstrap` settings.
    BootstrapFlags {
        /// Output device state [device.json]
        device,
    }
);

flag_group!(
    /// Drift experiment settings; the four input keys are given together or
    /// not at all, in which case the standard scenario is generated.
    DriftFlags {
        /// Input table CSV
        drift_data,
        /// Input bootstrap workload
        drift_bootstrap,
        /// Input known-pattern segment, streamed first
        drift_known,
        /// Input novel-pattern segment, streamed after the known one
        drift_novel,
        /// Base level of the value column [100]
        base_value,
        /// Level inside the hot region [1000]
        hot_value,
        /// Noise sd of the value column [10]
        noise_sd,
        /// Bootstrap queries of the generated scenario [2000]
        bootstrap_queries,
        /// Known-pattern queries before the drift point [66]
        pre_drift,
        /// Novel-pattern queries after it [600]
        post_drift,
    }
);

flag_group!(
    /// Federation and offline-convergence settings.
    FederationFlags {
        /// Federation sizes to run, comma separated [1,2,4,8]
        devices,
        /// Probability that a segment drifts away from home [0.3]
        beta,
        /// Segments per device [20]
        segments,
        /// Queries per segment [500]
        segment_len,
        /// Home spaces per device [2]
        home_spaces,
        /// Bootstrap queries per home space [300]
        home_bootstrap,
        /// Offset devices' segment boundaries (true | false) [true]
        stagger,
        /// Step devices on worker threads (true | false) [false]
        parallel,
        /// Federation script seed [5]
        federation_seed,
        /// Number of query spaces [16]
        k_spaces,
        /// Rows of the spaces table [20000]
        space_rows,
        /// Level of the spaces table's value column [100]
        space_value,
        /// Noise sd of that column [10]
        space_noise_sd,
        /// Labelled queries per space [2400]
        pool_per_space,
        /// Pool head reserved for bootstrapping [800]
        bootstrap_share,
        /// Pool tail reserved for probing [400]
        probe_share,
        /// Smallest box half-width, fraction of column sd [0.125]
        min_range_fraction,
        /// Largest box half-width, fraction of column sd [0.25]
        range_fraction,
        /// Spaces generation seed [11]
        spaces_seed,
        /// Bootstrap queries of the offline device [600]
        offline_bootstrap,
        /// Queries streamed per space before giving up [1500]
        segment_budget,
        /// Probe windows per space [4]
        probe_windows,
        /// Queries per probe window [50]
        probe_len,
        /// Offline visiting-order seed [3]
        offline_seed,
    }
);

flag_group!(
    /// Device settings shared by `bootstrap`, `run-drift` and `run-federation`.
    EngineFlags {
        /// Quantizer spawn threshold, standardized units, or `auto`
        vigilance,
        /// Quantizer learning rate [0.05]
        learn_rate,
        /// training | domain
        scaling,
        /// ridge | sgd_linear | knn [ridge]
        model,
        /// Ridge penalty [1.0]
        ridge_alpha,
        /// Neighbours of the KNN model [5]
        knn_k,
        /// SGD step size [0.5]
        sgd_step,
        /// SGD epochs [30]
        sgd_epochs,
        /// Detection threshold in proxy standard deviations, 3 to 5
        h_sigmas,
        /// mle | moments [mle]
        gamma_fit,
        /// Forwarding factor [3]
        lambda,
        /// Convergence threshold [0.008]
        c,
        /// Buffered pairs before convergence may be declared [20]
        min_buffer,
        /// Local answers before an idle session is abandoned [100]
        patience,
        /// literal | inverted [literal]
        affiliate_rule,
        /// Bootstrap holdout fraction for cluster EPE [0.2]
        holdout,
        /// Device seed [0]
        engine_seed,
    }
);

/// Options shared by every command.
#[derive(Debug, Clone, Args)]
pub struct Common {
    /// Output directory; relative paths of inputs and outputs resolve here
    #[arg(long, default_value = ".")]
    pub out: PathBuf,
    /// Flat key = value config file, read before flags are applied
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Clone, Parser)]
#[command(
    name = "querydrift",
    version,
    about = "Query-driven answer prediction with drift detection and adaptation"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

// parsed once per process, so variant size does not matter
#[allow(clippy::large_enum_variant)]
#[derive(Debug, Clone, Subcommand)]
pub enum Command {
    /// Uniform synthetic table as CSV.
    GenData {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        flags: GenDataFlags,
    },
    /// Labelled range-query workload over a table, as JSON Lines.
    GenWorkload {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        flags: GenWorkloadFlags,
        /// Input table CSV [data.csv]
        #[arg(long)]
        data: Option<String>,
        /// RNG seed [7]
        #[arg(long)]
        seed: Option<String>,
    },
    /// Trains a device on a table and workload and saves its state.
    Bootstrap {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        flags: BootstrapFlags,
        #[command(flatten)]
        engine: EngineFlags,
        /// Input table CSV [data.csv]
        #[arg(long)]
        data: Option<String>,
        /// Input workload [workload.jsonl]
        #[arg(long)]
        workload: Option<String>,
    },
    /// Known-then-novel stream through an adaptive device and a
    /// no-adaptation ablation.
    RunDrift {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        flags: DriftFlags,
        #[command(flatten)]
        engine: EngineFlags,
        /// Rows of the generated table [100000]
        #[arg(long)]
        rows: Option<String>,
        /// Scenario seed [7]
        #[arg(long)]
        seed: Option<String>,
    },
    /// Offline convergence over the query spaces and federation runs.
    RunFederation {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        flags: FederationFlags,
        #[command(flatten)]
        engine: EngineFlags,
    },
}

/// Files written by `run-federation`.
pub const FEDERATION_FILES: [&str; 4] = [
    "beta_curve.csv",
    "federation_rounds.csv",
    "execution_rate.csv",
    "federation_summary.json",
];
/// Files written by `run-drift`.
pub const DRIFT_FILES: [&str; 2] = ["drift_trace.csv", "drift_summary.json"];

/// Runs the binary: parses nothing, reports errors on stderr and maps them
/// to exit codes.
pub fn main_with(cli: Cli) -> ExitCode {
    match run(cli) {
        Ok(files) => {
            for f in files {
                println!("wrote {}", f.display());
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

/// Executes one command; returns the files written.
pub fn run(cli: Cli) -> CliResult<Vec<PathBuf>> {
    match cli.command {
        Command::GenData { common, flags } => {
            let cfg = settings(&common, |c| flags.apply(c))?;
            gen_data(&common.out, &cfg)
        }
        Command::GenWorkload {
            common,
            flags,
            data,
            seed,
        } => {
            let cfg = settings(&common, |c| {
                flags.apply(c);
                set_opt(c, "data", &data);
                set_opt(c, "seed", &seed);
            })?;
            gen_workload(&common.out, &cfg)
        }
        Command::Bootstrap {
            common,
            flags,
            engine,
            data,
            workload,
        } => {
            let cfg = settings(&common, |c| {
                flags.apply(c);
                engine.apply(c);
                set_opt(c, "data", &data);
                set_opt(c, "workload", &workload);
            })?;
            bootstrap(&common.out, &cfg)
        }
        Command::RunDrift {
            common,
            flags,
            engine,
            rows,
            seed,
        } => {
            let cfg = settings(&common, |c| {
                flags.apply(c);
                engine.apply(c);
                set_opt(c, "rows", &rows);
                set_opt(c, "seed", &seed);
            })?;
            run_drift(&common.out, &cfg)
        }
        Command::RunFederation { common, flags, engine } => {
            let cfg = settings(&common, |c| {
                flags.apply(c);
                engine.apply(c);
            })?;
            run_federation_cmd(&common.out, &cfg)
        }
    }
}

fn set_opt(cfg: &mut Config, key: &str, v: &Option<String>) {
    if let Some(v) = v {
        cfg.set(key, v.as_str());
    }
}

fn settings(common: &Common, overrides: impl FnOnce(&mut Config)) -> CliResult<Config> {
    let mut cfg = match &common.config {
        Some(p) => Config::load(p)?,
        None => Config::default(),
    };
    overrides(&mut cfg);
    cfg.check_known()?;
    Ok(cfg)
}

// ---------------------------------------------------------------------------
// Commands

/// `gen-data`: writes the table to `data` (default `data.csv`).
pub fn gen_data(out: &Path, cfg: &Config) -> CliResult<Vec<PathBuf>> {
    let data = SyntheticDataConfig {
        columns: cfg.get("columns", 10)?,
        rows: cfg.get("rows", 100_000)?,
        value_range: (cfg.get("lo", 0.0)?, cfg.get("hi", 1e6)?),
        seed: cfg.get("seed", 7)?,
    };
    data.validate().map_err(config_err)?;
    let path = out_path(out, &cfg.get("data", "data.csv".to_string())?)?;
    let table = workloads::gen_uniform_table(&data)?;
    write_with(&path, |w| table.write_csv(w))?;
    Ok(vec![path])
}

/// `gen-workload`: labels queries over `data`, writes `workload`.
pub fn gen_workload(out: &Path, cfg: &Config) -> CliResult<Vec<PathBuf>> {
    let mut q = QueryGenConfig::new(
        cfg.get("queries", 10_000)?,
        cfg.get("predicates", 2)?,
        cfg.get("seed", 7)?,
    );
    q.sel = cfg.get("sel", q.sel)?;
    q.range_noise_sd = cfg.get("range_noise_sd", q.range_noise_sd)?;
    q.center_mode = parse_choice(
        cfg,
        "center_mode",
        CenterMode::Uniform,
        &[
            ("uniform", CenterMode::Uniform),
            ("domain_edge", CenterMode::DomainEdge),
            ("data_normal", CenterMode::DataNormal),
        ],
    )?;
    let agg = AggregateSpec::new(cfg.get::<AggFn>("agg", AggFn::Count)?, cfg.get("target", 0)?);
    let table = load_table(out, &cfg.get("data", "data.csv".to_string())?)?;
    q.validate(table.n_cols()).map_err(config_err)?;
    agg.validate(table.n_cols()).map_err(config_err)?;
    let path = out_path(out, &cfg.get("workload", "workload.jsonl".to_string())?)?;
    let queries = workloads::gen_query_workload(&table, &q, &agg)?;
    write_with(&path, |w| workloads::write_workload(w, &queries))?;
    Ok(vec![path])
}

/// `bootstrap`: trains a device on `workload` over `data`, writes `device`.
pub fn bootstrap(out: &Path, cfg: &Config) -> CliResult<Vec<PathBuf>> {
    let engine = engine_config(cfg, EngineConfig::default())?;
    let table = load_table(out, &cfg.get("data", "data.csv".to_string())?)?;
    let queries = load_workload(out, &cfg.get("workload", "workload.jsonl".to_string())?, table.n_cols())?;
    let path = out_path(out, &cfg.get("device", "device.json".to_string())?)?;
    let domain = table.domain().to_vec();
    let pairs = to_pairs(queries.iter().map(|q| (&q.predicates, q.answer)), &domain)?;
    let device = AnalystDevice::bootstrap(domain, &pairs, engine)?;
    let json = device.to_json()?;
    write_with(&path, |w| Ok(w.write_all(json.as_bytes())?))?;
    Ok(vec![path])
}

/// `run-drift`: writes [`DRIFT_FILES`].
pub fn run_drift(out: &Path, cfg: &Config) -> CliResult<Vec<PathBuf>> {
    let defaults = DriftConfig::default();
    let drift = DriftConfig {
        rows: cfg.get("rows", defaults.rows)?,
        base_value: cfg.get("base_value", defaults.base_value)?,
        hot_value: cfg.get("hot_value", defaults.hot_value)?,
        noise_sd: cfg.get("noise_sd", defaults.noise_sd)?,
        bootstrap_queries: cfg.get("bootstrap_queries", defaults.bootstrap_queries)?,
        pre_drift: cfg.get("pre_drift", defaults.pre_drift)?,
        post_drift: cfg.get("post_drift", defaults.post_drift)?,
        engine: engine_config(cfg, defaults.engine)?,
        seed: cfg.get("seed", defaults.seed)?,
    };
    drift.validate().map_err(config_err)?;

    let input_keys = ["drift_data", "drift_bootstrap", "drift_known", "drift_novel"];
    let given: Vec<&str> = input_keys.iter().filter_map(|k| cfg.raw(k)).collect();
    let inputs = match given.len() {
        0 => simulator::drift_inputs(&drift)?,
        4 => {
            let table = load_table(out, given[0])?;
            let d = table.n_cols();
            let inputs = DriftInputs {
                bootstrap: load_workload(out, given[1], d)?,
                known: load_workload(out, given[2], d)?,
                novel: load_workload(out, given[3], d)?,
                table,
            };
            if inputs.bootstrap.is_empty() || inputs.known.is_empty() || inputs.novel.is_empty() {
                return Err(CliError::Config("drift input workloads must be non-empty".into()));
            }
            inputs
        }
        _ => {
            return Err(CliError::Config(format!(
                "give all of {} or none",
                input_keys.join(", ")
            )))
        }
    };
    let paths = DRIFT_FILES.map(|f| out.join(f));
    ensure_dir(out)?;
    let run = simulator::run_drift(&inputs, drift.engine)?;
    write_with(&paths[0], |w| simulator::write_drift_trace(&run, w))?;
    write_json(&paths[1], &run.summary)?;
    Ok(paths.to_vec())
}

/// Everything `run-federation` reports, as written to its summary JSON.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FederationReport {
    pub k_spaces: usize,
    pub offline: Vec<BetaPoint>,
    pub federations: Vec<FederationSummary>,
}

/// `run-federation`: writes [`FEDERATION_FILES`].
pub fn run_federation_cmd(out: &Path, cfg: &Config) -> CliResult<Vec<PathBuf>> {
    let s = SpacesConfig::default();
    let spaces = SpacesConfig {
        k_spaces: cfg.get("k_spaces", s.k_spaces)?,
        rows: cfg.get("space_rows", s.rows)?,
        value: cfg.get("space_value", s.value)?,
        noise_sd: cfg.get("space_noise_sd", s.noise_sd)?,
        pool_per_space: cfg.get("pool_per_space", s.pool_per_space)?,
        bootstrap_share: cfg.get("bootstrap_share", s.bootstrap_share)?,
        probe_share: cfg.get("probe_share", s.probe_share)?,
        min_range_fraction: cfg.get("min_range_fraction", s.min_range_fraction)?,
        range_fraction: cfg.get("range_fraction", s.range_fraction)?,
        seed: cfg.get("spaces_seed", s.seed)?,
    };
    let engine = engine_config(cfg, spaces_engine())?;
    let o = OfflineConfig::default();
    let offline = OfflineConfig {
        spaces: spaces.clone(),
        engine,
        bootstrap_queries: cfg.get("offline_bootstrap", o.bootstrap_queries)?,
        segment_budget: cfg.get("segment_budget", o.segment_budget)?,
        probe_windows: cfg.get("probe_windows", o.probe_windows)?,
        probe_len: cfg.get("probe_len", o.probe_len)?,
        seed: cfg.get("offline_seed", o.seed)?,
    };
    offline.validate().map_err(config_err)?;
    let f = FederationConfig::default();
    let sizes: Vec<usize> = cfg.get_list("devices", &[1, 2, 4, 8])?;
    let feds = sizes
        .iter()
        .map(|&n| {
            let fed = FederationConfig {
                n,
                beta: cfg.get("beta", f.beta)?,
                segments: cfg.get("segments", f.segments)?,
                segment_len: cfg.get("segment_len", f.segment_len)?,
                home_spaces: cfg.get("home_spaces", f.home_spaces)?,
                bootstrap_queries: cfg.get("home_bootstrap", f.bootstrap_queries)?,
                spaces: spaces.clone(),
                engine,
                stagger: cfg.get("stagger", f.stagger)?,
                parallel: cfg.get("parallel", f.parallel)?,
                seed: cfg.get("federation_seed", f.seed)?,
            };
            fed.validate().map_err(config_err)?;
            Ok(fed)
        })
        .collect::<CliResult<Vec<_>>>()?;

    let paths = FEDERATION_FILES.map(|f| out.join(f));
    ensure_dir(out)?;
    let generated = QuerySpaces::generate(&spaces)?;
    let curve = measure_offline_convergence_on(&generated, &offline)?;
    let mut runs = Vec::with_capacity(feds.len());
    for fed in &feds {
        let scripts = federation_scripts(fed)?;
        runs.push(run_federation(&generated, &scripts, fed)?.stats);
    }

    write_with(&paths[0], |w| simulator::write_beta_curve(&curve, w))?;
    write_with(&paths[1], |w| {
        simulator::write_rounds_csv(&runs.iter().collect::<Vec<_>>(), w)
    })?;
    write_with(&paths[2], |w| {
        let mut csv = csv::Writer::from_writer(w);
        csv.write_record([
            "n",
            "lambda",
            "queries",
            "executions",
            "beta_hat",
            "execution_rate",
            "bound",
            "affiliates_accepted",
            "reciprocity_ok",
        ])?;
        for r in &runs {
            let s = &r.summary;
            csv.write_record([
                s.n.to_string(),
                s.lambda.to_string(),
                s.queries.to_string(),
                s.executions.to_string(),
                s.beta_hat.to_string(),
                s.execution_rate.to_string(),
                s.bound.to_string(),
                s.affiliates_accepted.to_string(),
                s.reciprocity_ok.to_string(),
            ])?;
        }
        csv.flush()?;
        Ok(())
    })?;
    let report = FederationReport {
        k_spaces: spaces.k_spaces,
        offline: curve,
        federations: runs.into_iter().map(|r| r.summary).collect(),
    };
    write_json(&paths[3], &report)?;
    Ok(paths.to_vec())
}

// ---------------------------------------------------------------------------
// Helpers

/// Device settings from the engine keys over `base`.
pub fn engine_config(cfg: &Config, base: EngineConfig) -> CliResult<EngineConfig> {
    let mut e = base;
    match cfg.raw("vigilance") {
        Some("auto") => e.vigilance = None,
        Some(_) => e.vigilance = cfg.get_opt("vigilance")?,
        None => {}
    }
    e.learn_rate = cfg.get("learn_rate", e.learn_rate)?;
    e.scaling = parse_choice(
        cfg,
        "scaling",
        e.scaling,
        &[("training", Scaling::Training), ("domain", Scaling::Domain)],
    )?;
    e.holdout = cfg.get("holdout", e.holdout)?;
    e.seed = cfg.get("engine_seed", e.seed)?;
    e.model = match cfg.raw("model").unwrap_or(e.model.name()).to_ascii_lowercase().as_str() {
        "ridge" => ModelSpec::Ridge {
            alpha: cfg.get("ridge_alpha", 1.0)?,
        },
        "knn" => ModelSpec::Knn {
            k: cfg.get("knn_k", 5)?,
        },
        "sgd_linear" | "sgd" => {
            let ModelSpec::SgdLinear { step, epochs, .. } = ModelSpec::sgd() else {
                unreachable!("sgd() builds an SGD spec")
            };
            ModelSpec::SgdLinear {
                step: cfg.get("sgd_step", step)?,
                epochs: cfg.get("sgd_epochs", epochs)?,
                seed: e.seed,
            }
        }
        other => return Err(CliError::Config(format!("unknown model `{other}`"))),
    };
    e.cdm.h_sigmas = cfg.get("h_sigmas", e.cdm.h_sigmas)?;
    let (lo, hi) = H_SIGMAS_RANGE;
    if !(lo..=hi).contains(&e.cdm.h_sigmas) {
        return Err(CliError::Config(format!(
            "h_sigmas must be in [{lo}, {hi}], got {}",
            e.cdm.h_sigmas
        )));
    }
    e.cdm.fit = parse_choice(
        cfg,
        "gamma_fit",
        e.cdm.fit,
        &[("mle", GammaFit::MaxLikelihood), ("moments", GammaFit::Moments)],
    )?;
    e.adm.lambda = cfg.get("lambda", e.adm.lambda)?;
    e.adm.c = cfg.get("c", e.adm.c)?;
    e.adm.min_buffer = cfg.get("min_buffer", e.adm.min_buffer)?;
    e.adm.patience = cfg.get("patience", e.adm.patience)?;
    e.adm.affiliate_rule = parse_choice(
        cfg,
        "affiliate_rule",
        e.adm.affiliate_rule,
        &[
            ("literal", AffiliateRule::Literal),
            ("inverted", AffiliateRule::Inverted),
        ],
    )?;
    e.validate().map_err(config_err)?;
    Ok(e)
}

fn parse_choice<T: Copy>(cfg: &Config, key: &str, default: T, choices: &[(&str, T)]) -> CliResult<T> {
    let Some(v) = cfg.raw(key) else {
        return Ok(default);
    };
    choices
        .iter()
        .find(|(name, _)| name.eq_ignore_ascii_case(v))
        .map(|(_, t)| *t)
        .ok_or_else(|| {
            let names: Vec<&str> = choices.iter().map(|(n, _)| *n).collect();
            CliError::Config(format!("`{key} = {v}`: expected one of {}", names.join(", ")))
        })
}

fn resolve(out: &Path, p: &str) -> PathBuf {
    out.join(p)
}

fn input_path(out: &Path, p: &str) -> CliResult<PathBuf> {
    let path = resolve(out, p);
    if path.is_file() {
        Ok(path)
    } else {
        Err(CliError::Config(format!("missing input {}", path.display())))
    }
}

fn out_path(out: &Path, p: &str) -> CliResult<PathBuf> {
    if p.is_empty() {
        return Err(CliError::Config("empty output path".into()));
    }
    ensure_dir(out)?;
    Ok(resolve(out, p))
}

fn ensure_dir(dir: &Path) -> CliResult<()> {
    fs::create_dir_all(dir).map_err(|e| CliError::Engine(e.into()))
}

fn load_table(out: &Path, p: &str) -> CliResult<DataTable> {
    let path = input_path(out, p)?;
    DataTable::load_csv(&path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
}

fn load_workload(out: &Path, p: &str, columns: usize) -> CliResult<Vec<workloads::LabeledQuery>> {
    let path = input_path(out, p)?;
    let file = File::open(&path).map_err(|e| CliError::Engine(e.into()))?;
    workloads::read_workload(BufReader::new(file), Some(columns))
        .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
}

fn write_with(path: &Path, f: impl FnOnce(&mut BufWriter<File>) -> crate::Result<()>) -> CliResult<()> {
    let mut w = BufWriter::new(File::create(path).map_err(Error::from)?);
    f(&mut w)?;
    w.flush().map_err(Error::from)?;
    Ok(())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    write_with(path, |w| {
        serde_json::to_writer_pretty(&mut *w, value)?;
        w.write_all(b"\n")?;
        Ok(())
    })
}
