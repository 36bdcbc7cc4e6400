//! Command-line frontend.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fmt::Write as _;
use std::io::Write;
use std::path::PathBuf;
use std::time::Duration;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use crate::env::{self, EnvRecord};
use crate::error::Error;
use crate::registry::{self, AssetId, AssetKind, AssetRecord, Registry, Triple};
use crate::run::{self, ParamValue, Params, RunOutcome, RunRecord, RunSummary};
use crate::store::Store;

pub const HOME_VAR: &str = "SAUCER_HOME";
pub const SHIM_VAR: &str = "SAUCER_SHIM";

/// Process exit status.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExitCode {
    /// Success, or verdict pass.
    Success = 0,
    VerdictFail = 1,
    Usage = 2,
    /// Environment provisioning or store failure.
    Environment = 3,
    /// Incompatible or invalid selection.
    Selection = 4,
    /// Runner failure, invalid result, or a stage error.
    Runner = 5,
}

impl ExitCode {
    pub fn code(self) -> i32 {
        self as i32
    }
}

pub fn exit_code_for_error(err: &Error) -> ExitCode {
    match err {
        Error::InvalidArgument(_) => ExitCode::Usage,
        Error::ProvisionFailed { .. }
        | Error::LockTimeout(_)
        | Error::SpawnError { .. }
        | Error::StoreLocked(_)
        | Error::CorruptRegistry { .. }
        | Error::Io { .. } => ExitCode::Environment,
        Error::FileNotReadable { .. }
        | Error::DuplicateName { .. }
        | Error::UnknownAsset(_)
        | Error::AmbiguousAsset(_)
        | Error::KindMismatch(_)
        | Error::Unassociated(_)
        | Error::IncompatibleEnvironments(_)
        | Error::HashMismatch { .. }
        | Error::UnknownRun(_) => ExitCode::Selection,
        Error::InvalidResult(_) | Error::RunnerFailure { .. } => ExitCode::Runner,
    }
}

pub fn exit_code_for_outcome(outcome: RunOutcome) -> ExitCode {
    match outcome {
        RunOutcome::Pass => ExitCode::Success,
        RunOutcome::Fail => ExitCode::VerdictFail,
        RunOutcome::StageError | RunOutcome::RunnerFailure => ExitCode::Runner,
        RunOutcome::SpawnFailure => ExitCode::Environment,
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "saucer",
    version,
    about = "Reusable verification scripts and their environments"
)]
struct Cli {
    /// Store root (default: $SAUCER_HOME, then ~/.deepsaucer)
    #[arg(long, global = true, value_name = "PATH")]
    store: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum KindArg {
    #[value(name = "model-load")]
    ModelLoad,
    #[value(name = "dataset-load")]
    DatasetLoad,
    #[value(name = "verification")]
    Verification,
    #[value(name = "env-setup")]
    EnvSetup,
}

impl From<KindArg> for AssetKind {
    fn from(k: KindArg) -> Self {
        match k {
            KindArg::ModelLoad => AssetKind::ModelLoad,
            KindArg::DatasetLoad => AssetKind::DatasetLoad,
            KindArg::Verification => AssetKind::Verification,
            KindArg::EnvSetup => AssetKind::EnvSetup,
        }
    }
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Register a script as an asset
    Register {
        #[arg(long)]
        kind: KindArg,
        #[arg(long)]
        name: String,
        path: PathBuf,
    },
    /// Associate a functional script with an environment-setup script
    Associate {
        #[arg(long, value_name = "NAME_OR_ID")]
        asset: String,
        #[arg(long, value_name = "NAME_OR_ID")]
        env: String,
    },
    /// List registered assets
    List {
        #[arg(long)]
        kind: Option<KindArg>,
        #[arg(long)]
        json: bool,
    },
    /// Remove an asset from the registry
    Remove {
        #[arg(long)]
        kind: Option<KindArg>,
        #[arg(value_name = "NAME_OR_ID")]
        asset: String,
    },
    /// Show runnable model/dataset/verification selections per environment
    Triples {
        #[arg(long)]
        json: bool,
    },
    /// Manage provisioned environments
    #[command(subcommand)]
    Env(EnvCommand),
    /// Run a verification
    Run(RunArgs),
    /// Inspect past runs
    #[command(subcommand)]
    History(HistoryCommand),
}

#[derive(Debug, Subcommand)]
enum EnvCommand {
    /// Provision the environment of an env-setup asset (no-op when ready)
    Provision {
        #[arg(long, value_name = "NAME_OR_ID")]
        env: String,
    },
    /// Show environment states
    Status {
        #[arg(long)]
        json: bool,
    },
    /// Remove environments no registered env-setup script maps to
    Gc,
}

#[derive(Debug, Args)]
struct RunArgs {
    #[arg(long)]
    model: String,
    #[arg(long)]
    dataset: String,
    #[arg(long)]
    verify: String,
    /// Parameter handed to all three scripts (repeatable)
    #[arg(long = "param", value_name = "KEY=VALUE")]
    params: Vec<String>,
    /// Runner timeout in seconds (0 = unlimited)
    #[arg(long, value_name = "SECONDS", default_value_t = 0.0)]
    timeout: f64,
    /// Fail if any selected script changed since registration
    #[arg(long)]
    strict_hash: bool,
    #[arg(long)]
    json: bool,
}

#[derive(Debug, Subcommand)]
enum HistoryCommand {
    List {
        #[arg(long)]
        json: bool,
    },
    Show {
        run_id: String,
        #[arg(long)]
        json: bool,
    },
}

fn store_root(flag: Option<PathBuf>) -> PathBuf {
    if let Some(p) = flag {
        return p;
    }
    if let Some(p) = std::env::var_os(HOME_VAR).filter(|v| !v.is_empty()) {
        return PathBuf::from(p);
    }
    let home = std::env::var_os("HOME")
        .map(PathBuf::from)
        .unwrap_or_default();
    home.join(".deepsaucer")
}

/// Runner entry point: `$SAUCER_SHIM`, else `<store_root>/runner/shim.py`.
pub fn shim_path(store: &Store) -> PathBuf {
    match std::env::var_os(SHIM_VAR).filter(|v| !v.is_empty()) {
        Some(p) => {
            let p = PathBuf::from(p);
            if p.is_absolute() {
                p
            } else {
                std::env::current_dir().map(|c| c.join(&p)).unwrap_or(p)
            }
        }
        None => store.root().join("runner").join("shim.py"),
    }
}

/// Parses `argv` (including the program name) and runs the command.
pub fn dispatch<I, T>(argv: I, out: &mut dyn Write, err: &mut dyn Write) -> ExitCode
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let text = e.render().to_string();
            return match e.kind() {
                ErrorKind::DisplayHelp
                | ErrorKind::DisplayVersion
                | ErrorKind::DisplayHelpOnMissingArgumentOrSubcommand => {
                    let _ = write!(out, "{text}");
                    if e.kind() == ErrorKind::DisplayHelpOnMissingArgumentOrSubcommand {
                        ExitCode::Usage
                    } else {
                        ExitCode::Success
                    }
                }
                _ => {
                    let _ = write!(err, "{text}");
                    ExitCode::Usage
                }
            };
        }
    };
    let store = Store::new(store_root(cli.store));
    match execute(&store, cli.command, out, err) {
        Ok(code) => code,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            exit_code_for_error(&e)
        }
    }
}

fn print_json<T: Serialize + ?Sized>(out: &mut dyn Write, value: &T) -> Result<(), Error> {
    let text = serde_json::to_string_pretty(value).expect("serializable");
    writeln!(out, "{text}").map_err(|e| Error::io("writing output", e))
}

fn print(out: &mut dyn Write, text: &str) -> Result<(), Error> {
    out.write_all(text.as_bytes())
        .map_err(|e| Error::io("writing output", e))
}

fn kinds_or_all(kind: Option<KindArg>) -> Vec<AssetKind> {
    match kind {
        Some(k) => vec![k.into()],
        None => AssetKind::ALL.to_vec(),
    }
}

fn parse_params(raw: &[String]) -> Result<Params, Error> {
    let mut params = Params::new();
    for item in raw {
        let (key, value) = item.split_once('=').ok_or_else(|| {
            Error::InvalidArgument(format!("--param expects KEY=VALUE, got '{item}'"))
        })?;
        if key.is_empty() {
            return Err(Error::InvalidArgument(format!(
                "empty key in --param '{item}'"
            )));
        }
        params.insert(key.to_owned(), ParamValue::parse_cli(value));
    }
    Ok(params)
}

fn execute(
    store: &Store,
    command: Command,
    out: &mut dyn Write,
    err: &mut dyn Write,
) -> Result<ExitCode, Error> {
    match command {
        Command::Register { kind, name, path } => {
            let rec = registry::register_asset(store, &path, kind.into(), &name)?;
            print(
                out,
                &format!(
                    "registered {} '{}' as {} (sha256 {})\n",
                    rec.kind, rec.name, rec.id, rec.content_hash
                ),
            )?;
        }
        Command::Associate { asset, env } => {
            let reg = registry::load_registry(store.root())?;
            let functional = [
                AssetKind::ModelLoad,
                AssetKind::DatasetLoad,
                AssetKind::Verification,
            ];
            let asset_id = reg.resolve(&asset, &functional)?.id.clone();
            let env_id = reg.resolve(&env, &[AssetKind::EnvSetup])?.id.clone();
            let rec = registry::associate(store, &asset_id, &env_id)?;
            print(
                out,
                &format!(
                    "associated {} '{}' with env-setup '{}'\n",
                    rec.kind,
                    rec.name,
                    reg.env_label(&env_id)
                ),
            )?;
        }
        Command::List { kind, json } => {
            let reg = registry::load_registry(store.root())?;
            let records = registry::list_assets(&reg, kind.map(Into::into));
            if json {
                print_json(out, &records)?;
            } else {
                print(out, &render_assets(&records, &reg))?;
            }
        }
        Command::Remove { kind, asset } => {
            let reg = registry::load_registry(store.root())?;
            let rec = reg.resolve(&asset, &kinds_or_all(kind))?.clone();
            registry::remove_asset(store, &rec.id)?;
            print(
                out,
                &format!("removed {} '{}' ({})\n", rec.kind, rec.name, rec.id),
            )?;
        }
        Command::Triples { json } => {
            let reg = registry::load_registry(store.root())?;
            let triples = registry::compatible_triples(&reg);
            if json {
                print_json(out, &triples)?;
            } else {
                print(out, &render_triples(&triples, &reg))?;
            }
        }
        Command::Env(cmd) => return env_command(store, cmd, out),
        Command::Run(args) => return run_command(store, args, out, err),
        Command::History(HistoryCommand::List { json }) => {
            let runs = run::list_history(store)?;
            if json {
                print_json(out, &runs)?;
            } else {
                print(out, &render_history(&runs))?;
            }
        }
        Command::History(HistoryCommand::Show { run_id, json }) => {
            let record = run::show_run(store, &run_id)?;
            if json {
                print_json(out, &record)?;
            } else {
                print(out, &render_record(&record))?;
            }
        }
    }
    Ok(ExitCode::Success)
}

#[derive(Serialize)]
struct EnvStatusRow {
    asset_id: Option<AssetId>,
    asset_name: Option<String>,
    #[serde(flatten)]
    env: EnvRecord,
}

fn env_command(store: &Store, cmd: EnvCommand, out: &mut dyn Write) -> Result<ExitCode, Error> {
    match cmd {
        EnvCommand::Provision { env: reference } => {
            let reg = registry::load_registry(store.root())?;
            let asset = reg.resolve(&reference, &[AssetKind::EnvSetup])?;
            let rec = env::ensure_ready(store, asset)?;
            print(
                out,
                &format!(
                    "environment {} for '{}' is {} (interpreter {})\n",
                    rec.env_id,
                    asset.name,
                    rec.state,
                    rec.interpreter
                        .as_deref()
                        .map(|p| p.display().to_string())
                        .unwrap_or_default()
                ),
            )?;
        }
        EnvCommand::Status { json } => {
            let reg = registry::load_registry(store.root())?;
            let mut rows = Vec::new();
            let mut seen = std::collections::HashSet::new();
            for asset in registry::list_assets(&reg, Some(AssetKind::EnvSetup)) {
                let id = env::current_env_id(&asset);
                seen.insert(id.clone());
                rows.push(EnvStatusRow {
                    asset_id: Some(asset.id.clone()),
                    asset_name: Some(asset.name.clone()),
                    env: env::env_record(store, &id),
                });
            }
            for id in env::list_env_ids(store) {
                if seen.insert(id.clone()) {
                    rows.push(EnvStatusRow {
                        asset_id: None,
                        asset_name: None,
                        env: env::env_record(store, &id),
                    });
                }
            }
            if json {
                print_json(out, &rows)?;
            } else {
                print(out, &render_env_status(&rows))?;
            }
        }
        EnvCommand::Gc => {
            let reg = registry::load_registry(store.root())?;
            let removed = env::gc(store, &reg)?;
            if removed.is_empty() {
                print(out, "no orphaned environments\n")?;
            }
            for id in removed {
                print(out, &format!("removed environment {id}\n"))?;
            }
        }
    }
    Ok(ExitCode::Success)
}

fn run_command(
    store: &Store,
    args: RunArgs,
    out: &mut dyn Write,
    err: &mut dyn Write,
) -> Result<ExitCode, Error> {
    let params = parse_params(&args.params)?;
    if !args.timeout.is_finite() || args.timeout < 0.0 {
        return Err(Error::InvalidArgument(
            "--timeout must be a nonnegative number of seconds".into(),
        ));
    }
    let timeout = (args.timeout > 0.0).then(|| Duration::from_secs_f64(args.timeout));
    let plan = run::plan_run_by_reference(
        store,
        &args.model,
        &args.dataset,
        &args.verify,
        params,
        args.strict_hash,
    )?;
    let shim = shim_path(store);

    // with --json, keep stdout for the record alone
    let console: &mut dyn Write = if args.json { &mut *err } else { &mut *out };
    let executed = run::execute_run(&plan, &shim, timeout, console);
    let record = match executed {
        Ok(record) => record,
        Err(e @ (Error::RunnerFailure { .. } | Error::SpawnError { .. })) => {
            let _ = writeln!(err, "error: {e}");
            match run::show_run(store, &plan.manifest.run_id) {
                Ok(record) => record,
                Err(_) => return Ok(exit_code_for_error(&e)),
            }
        }
        Err(e) => return Err(e),
    };
    if args.json {
        print_json(out, &record)?;
    } else {
        print(out, &render_run_outcome(&record))?;
    }
    Ok(exit_code_for_outcome(record.outcome()))
}

/// Left-aligned columns separated by two spaces.
fn table(header: &[&str], rows: &[Vec<String>]) -> String {
    let mut widths: Vec<usize> = header.iter().map(|h| h.chars().count()).collect();
    for row in rows {
        for (w, cell) in widths.iter_mut().zip(row) {
            *w = (*w).max(cell.chars().count());
        }
    }
    let mut s = String::new();
    let line = |s: &mut String, cells: &mut dyn Iterator<Item = &str>| {
        let mut buf = String::new();
        for (i, (cell, w)) in cells.zip(&widths).enumerate() {
            if i > 0 {
                buf.push_str("  ");
            }
            let _ = write!(buf, "{cell:<w$}");
        }
        s.push_str(buf.trim_end());
        s.push('\n');
    };
    line(&mut s, &mut header.iter().copied());
    for row in rows {
        line(&mut s, &mut row.iter().map(String::as_str));
    }
    s
}

/// Asset table with each asset's environment association ("-" when none).
pub fn render_assets(records: &[AssetRecord], registry: &Registry) -> String {
    let header = ["ID", "KIND", "NAME", "ENV", "PATH"];
    if records.is_empty() {
        return table(&header, &[]) + "no assets\n";
    }
    let rows: Vec<Vec<String>> = records
        .iter()
        .map(|r| {
            let env = match &r.env_setup_ref {
                Some(e) => registry.env_label(e),
                None => "-".to_owned(),
            };
            let mut path = r.path.display().to_string();
            if !r.file_present() {
                path.push_str(" (missing)");
            }
            vec![
                r.id.to_string(),
                r.kind.to_string(),
                r.name.clone(),
                env,
                path,
            ]
        })
        .collect();
    table(&header, &rows)
}

/// Runnable selections grouped under one heading per environment.
pub fn render_triples(triples: &BTreeMap<AssetId, Vec<Triple>>, registry: &Registry) -> String {
    if triples.is_empty() {
        return "no environments registered\n".to_owned();
    }
    let name = |id: &AssetId| {
        registry
            .get(id)
            .map(|r| r.name.clone())
            .unwrap_or_else(|| id.to_string())
    };
    let mut groups: Vec<(&AssetId, &Vec<Triple>)> = triples.iter().collect();
    groups.sort_by_key(|(id, _)| (name(id), (*id).clone()));
    let mut s = String::new();
    for (i, (env, list)) in groups.into_iter().enumerate() {
        if i > 0 {
            s.push('\n');
        }
        let _ = writeln!(s, "environment {} ({env}):", name(env));
        if list.is_empty() {
            s.push_str("  (no runnable selections)\n");
            continue;
        }
        let rows: Vec<Vec<String>> = list
            .iter()
            .map(|t| vec![name(&t.model), name(&t.dataset), name(&t.verification)])
            .collect();
        for line in table(&["MODEL", "DATASET", "VERIFICATION"], &rows).lines() {
            let _ = writeln!(s, "  {line}");
        }
    }
    s
}

fn render_env_status(rows: &[EnvStatusRow]) -> String {
    let header = ["ENV-SETUP", "ENV ID", "STATE", "INTERPRETER"];
    if rows.is_empty() {
        return table(&header, &[]) + "no environments\n";
    }
    let rows: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            vec![
                r.asset_name.clone().unwrap_or_else(|| "-".into()),
                r.env.env_id.to_string(),
                r.env.state.to_string(),
                r.env
                    .interpreter
                    .as_deref()
                    .map(|p| p.display().to_string())
                    .unwrap_or_else(|| "-".into()),
            ]
        })
        .collect();
    table(&header, &rows)
}

fn render_history(runs: &[RunSummary]) -> String {
    let header = [
        "RUN",
        "STARTED",
        "OUTCOME",
        "MODEL",
        "DATASET",
        "VERIFICATION",
        "ENV",
    ];
    if runs.is_empty() {
        return table(&header, &[]) + "no runs\n";
    }
    let rows: Vec<Vec<String>> = runs
        .iter()
        .map(|r| {
            vec![
                r.run_id.clone(),
                r.started_at.format("%Y-%m-%d %H:%M:%S").to_string(),
                r.outcome.clone(),
                r.model_load.clone(),
                r.dataset_load.clone(),
                r.verification.clone(),
                r.env_id.to_string(),
            ]
        })
        .collect();
    table(&header, &rows)
}

fn render_run_outcome(record: &RunRecord) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "run {}: {}", record.run_id(), record.outcome());
    if let Some(result) = &record.result {
        if let Some(stage) = result.failed_stage {
            let _ = writeln!(
                s,
                "  failed stage: {}",
                serde_json::to_value(stage).unwrap().as_str().unwrap_or("")
            );
        }
        for (label, value) in &result.metrics {
            let _ = writeln!(s, "  {label} = {value}");
        }
        for msg in &result.messages {
            let _ = writeln!(s, "  {msg}");
        }
    }
    if let Some(e) = &record.runner_error {
        let _ = writeln!(s, "  runner: {}", e.message);
    }
    let _ = writeln!(s, "  log: {}", record.output_log.display());
    s
}

fn render_record(record: &RunRecord) -> String {
    let snap = &record.asset_snapshot;
    let mut s = String::new();
    let _ = writeln!(s, "run:          {}", record.run_id());
    let _ = writeln!(s, "outcome:      {}", record.outcome());
    let _ = writeln!(s, "started:      {}", record.started_at.to_rfc3339());
    let _ = writeln!(s, "finished:     {}", record.finished_at.to_rfc3339());
    let _ = writeln!(s, "exit code:    {}", record.runner_exit_code);
    let _ = writeln!(
        s,
        "environment:  {} ({})",
        snap.env_setup.name, record.env_id
    );
    for (label, rec) in [
        ("model-load:  ", &snap.model_load),
        ("dataset-load:", &snap.dataset_load),
        ("verification:", &snap.verification),
    ] {
        let _ = writeln!(s, "{label} {} [{}]", rec.name, short(&rec.content_hash));
    }
    if !record.manifest.params.is_empty() {
        let params = serde_json::to_string(&record.manifest.params).unwrap_or_default();
        let _ = writeln!(s, "params:       {params}");
    }
    if let Some(result) = &record.result {
        for (stage, secs) in &result.stage_timings {
            let stage = serde_json::to_value(stage).unwrap();
            let _ = writeln!(s, "  {:<13} {secs:.3}s", stage.as_str().unwrap_or(""));
        }
    }
    s.push_str(
        render_run_outcome(record)
            .split_once('\n')
            .map_or("", |x| x.1),
    );
    s
}

fn short(hash: &str) -> &str {
    &hash[..hash.len().min(12)]
}
