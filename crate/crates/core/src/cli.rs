//! `twinbeam` command-line front end.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use serde_json::{json, Value};

use crate::detection::{compound_photocounts_series, constituting_photocounts, DetectorSpec};
use crate::error::{Category, Error, Result};
use crate::formats::{self, Encoding, Manifest};
use crate::ingest::{group_histogram, GroupMode, GroupingPolicy, JointHistogram};
use crate::metrology::{
    effective_efficiency, effective_efficiency_model, effective_efficiency_moments, optimal_postselection,
    precision_improvement, DEFAULT_MIN_EVENTS,
};
use crate::model::{JointDist, TwbParams};
use crate::moments::{fano_nrp_cov, intensity_moments, moments, ncd, Nci};
use crate::presets;
use crate::quasidist::{grid_moments, quasi_distribution, GridSpec, DEFAULT_STEPS};
use crate::reconstruct::{em_histogram, EmConfig};
use crate::simulate::{sample_stream, ClickStream, PumpCorrelation};

pub const THREADS_ENV: &str = "TWINBEAM_THREADS";
pub const DEFAULT_GROUPS: &[usize] = &[1, 2, 3, 5, 10, 20, 30, 50, 100, 200, 300, 500, 1000];

#[derive(Parser, Debug)]
#[command(name = "twinbeam", version, about = "Compound twin-beam photocount simulation and analysis")]
struct Cli {
    /// TOML file with flag values; explicit flags win.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Worker threads (also TWINBEAM_THREADS).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Sample a click stream.
    Simulate(SimulateArgs),
    /// Group a click stream into a joint photocount histogram.
    Analyze(AnalyzeArgs),
    /// EM reconstruction of the photon-number distribution behind a histogram.
    Reconstruct(ReconstructArgs),
    /// Non-classicality identifiers and depths.
    Ncd(NcdArgs),
    /// Quasi-distribution of integrated intensities on a grid.
    Quasidist(QuasidistArgs),
    /// Sub-shot-noise precision of reference and conditioned sequences.
    Metrology(MetrologyArgs),
    /// Tabulate a quantity over group sizes N.
    Sweep(SweepArgs),
}

#[derive(Args, Debug, Clone, Serialize)]
struct BeamArgs {
    /// JSON or TOML file with m_p, m_s, m_i, b_p, b_s, b_i.
    #[arg(long)]
    params: Option<PathBuf>,
    #[arg(long, default_value_t = presets::MODES)]
    m_p: f64,
    #[arg(long, default_value_t = presets::MODES)]
    m_s: f64,
    #[arg(long, default_value_t = presets::MODES)]
    m_i: f64,
    #[arg(long, default_value_t = presets::B_PAIR)]
    b_p: f64,
    #[arg(long, default_value_t = presets::B_SIGNAL)]
    b_s: f64,
    #[arg(long, default_value_t = presets::B_IDLER)]
    b_i: f64,
}

impl BeamArgs {
    fn resolve(&self) -> Result<TwbParams> {
        let p = match &self.params {
            Some(path) => {
                let text = std::fs::read_to_string(path)?;
                if path.extension().is_some_and(|e| e == "toml") {
                    toml::from_str(&text).map_err(|e| Error::Format(e.to_string()))?
                } else {
                    serde_json::from_str(&text)?
                }
            }
            None => TwbParams::new(self.m_p, self.m_s, self.m_i, self.b_p, self.b_s, self.b_i),
        };
        p.validate()?;
        Ok(p)
    }
}

#[derive(Args, Debug, Clone, Serialize)]
struct DetectorArgs {
    #[arg(long, default_value_t = presets::ETA_S)]
    eta_s: f64,
    #[arg(long, default_value_t = presets::ETA_I)]
    eta_i: f64,
    #[arg(long, default_value_t = presets::DARK_S)]
    dark_s: f64,
    #[arg(long, default_value_t = presets::DARK_I)]
    dark_i: f64,
}

impl DetectorArgs {
    fn specs(&self) -> Result<(DetectorSpec, DetectorSpec)> {
        let s = DetectorSpec::new(self.eta_s, self.dark_s, 1);
        let i = DetectorSpec::new(self.eta_i, self.dark_i, 1);
        s.validate()?;
        i.validate()?;
        Ok((s, i))
    }
}

#[derive(Args, Debug, Clone, Serialize)]
struct PumpArgs {
    /// Relative variance K of the common pump fluctuation.
    #[arg(long, default_value_t = 0.0)]
    k_pump: f64,
    /// Windows sharing one pump draw.
    #[arg(long, default_value_t = 10_000)]
    block_len: usize,
}

impl PumpArgs {
    fn pump(&self) -> PumpCorrelation {
        if self.k_pump == 0.0 {
            PumpCorrelation::none()
        } else {
            PumpCorrelation { k: self.k_pump, block_len: self.block_len }
        }
    }
}

#[derive(Args, Debug, Serialize)]
struct SimulateArgs {
    #[arg(long)]
    windows: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[command(flatten)]
    beam: BeamArgs,
    #[command(flatten)]
    det: DetectorArgs,
    #[command(flatten)]
    pump: PumpArgs,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug, Serialize)]
struct AnalyzeArgs {
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    group_n: usize,
    #[arg(long, value_enum, default_value_t = ModeArg::Sliding)]
    mode: ModeArg,
    #[arg(long)]
    out: PathBuf,
}

#[derive(ValueEnum, Debug, Clone, Copy, Serialize)]
#[serde(rename_all = "lowercase")]
enum ModeArg {
    Sliding,
    Disjoint,
}

impl From<ModeArg> for GroupMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Sliding => GroupMode::Sliding,
            ModeArg::Disjoint => GroupMode::Disjoint,
        }
    }
}

#[derive(Args, Debug, Serialize)]
struct ReconstructArgs {
    #[arg(long)]
    hist: PathBuf,
    #[command(flatten)]
    det: DetectorArgs,
    /// Must agree with the histogram when given.
    #[arg(long)]
    group_n: Option<usize>,
    #[arg(long, default_value_t = 1e-9)]
    tol: f64,
    #[arg(long, default_value_t = 10_000)]
    max_iters: usize,
    #[arg(long)]
    n_max: Option<usize>,
    #[arg(long, value_enum, default_value_t = EncodingArg::Csv)]
    encoding: EncodingArg,
    #[arg(long)]
    out: PathBuf,
}

#[derive(ValueEnum, Debug, Clone, Copy, Serialize)]
#[serde(rename_all = "lowercase")]
enum EncodingArg {
    Csv,
    Binary,
}

impl From<EncodingArg> for Encoding {
    fn from(e: EncodingArg) -> Self {
        match e {
            EncodingArg::Csv => Encoding::Csv,
            EncodingArg::Binary => Encoding::Binary,
        }
    }
}

#[derive(Args, Debug, Serialize)]
struct NcdArgs {
    /// jdist-v1 or jhist-v1 file.
    #[arg(long)]
    dist: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "E001,E101,E111,E211,M1001,M001001")]
    identifiers: Vec<String>,
    /// Arm used by the single-arm identifiers.
    #[arg(long, value_enum, default_value_t = ArmArg::I)]
    arm: ArmArg,
    #[arg(long)]
    out: PathBuf,
}

#[derive(ValueEnum, Debug, Clone, Copy, Serialize)]
#[serde(rename_all = "lowercase")]
enum ArmArg {
    S,
    I,
}

impl From<ArmArg> for crate::ingest::Arm {
    fn from(a: ArmArg) -> Self {
        match a {
            ArmArg::S => crate::ingest::Arm::S,
            ArmArg::I => crate::ingest::Arm::I,
        }
    }
}

#[derive(Args, Debug, Serialize)]
struct QuasidistArgs {
    #[arg(long)]
    dist: PathBuf,
    #[arg(long, allow_hyphen_values = true)]
    s: f64,
    #[arg(long, default_value_t = DEFAULT_STEPS)]
    steps: usize,
    #[arg(long)]
    w_max_s: Option<f64>,
    #[arg(long)]
    w_max_i: Option<f64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug, Serialize)]
struct MetrologyArgs {
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    group_n: usize,
    #[arg(long, default_value_t = 500)]
    nm: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
enum Metric {
    /// Fano factors, noise reduction and correlation.
    Fano,
    Nrp,
    Cov,
    /// Effective efficiencies with their model values.
    EtaEff,
    /// Non-classicality depths of the photocount moments.
    Ncd,
    /// Optimal post-selection (simulated source only).
    Postselect,
    /// Sub-shot-noise precision (simulated source only).
    Precision,
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
enum Source {
    Model,
    Sim,
}

#[derive(Args, Debug, Serialize)]
struct SweepArgs {
    #[arg(long, value_enum)]
    metric: Metric,
    #[arg(long, value_delimiter = ',')]
    groups: Option<Vec<usize>>,
    #[arg(long, value_enum, default_value_t = Source::Model)]
    source: Source,
    /// Click stream to analyze instead of simulating one.
    #[arg(long = "in")]
    input: Option<PathBuf>,
    #[arg(long, default_value_t = 10_000_000)]
    windows: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[command(flatten)]
    beam: BeamArgs,
    #[command(flatten)]
    det: DetectorArgs,
    #[command(flatten)]
    pump: PumpArgs,
    #[arg(long, default_value_t = 500)]
    nm: usize,
    #[arg(long, default_value_t = DEFAULT_MIN_EVENTS)]
    min_events: u64,
    #[arg(long)]
    out: PathBuf,
}

/// Exit code of an error category.
pub fn exit_code(c: Category) -> i32 {
    match c {
        Category::Usage => 2,
        Category::Data => 3,
        Category::Numeric => 4,
    }
}

const SUBCOMMANDS: &[&str] = &["simulate", "analyze", "reconstruct", "ncd", "quasidist", "metrology", "sweep"];

fn config_path(argv: &[String]) -> Option<PathBuf> {
    let mut it = argv.iter();
    while let Some(a) = it.next() {
        if a == "--config" {
            return it.next().map(PathBuf::from);
        }
        if let Some(v) = a.strip_prefix("--config=") {
            return Some(PathBuf::from(v));
        }
    }
    None
}

fn toml_flag_value(v: &toml::Value) -> Option<String> {
    Some(match v {
        toml::Value::String(s) => s.clone(),
        toml::Value::Integer(i) => i.to_string(),
        toml::Value::Float(f) => f.to_string(),
        toml::Value::Array(a) => a.iter().map(toml_flag_value).collect::<Option<Vec<_>>>()?.join(","),
        _ => return None,
    })
}

/// Inserts config entries (top level and the subcommand's table) as flags
/// right after the subcommand, skipping flags already on the command line.
pub fn merge_config(argv: &[String], config: &str) -> Result<Vec<String>> {
    let table: toml::Table = config.parse().map_err(|e: toml::de::Error| Error::Format(e.to_string()))?;
    let Some(pos) = argv.iter().position(|a| SUBCOMMANDS.contains(&a.as_str())) else {
        return Ok(argv.to_vec());
    };
    let sub = argv[pos].as_str();
    let present = |flag: &str| argv.iter().any(|a| a == flag || a.starts_with(&format!("{flag}=")));
    let mut extra = Vec::new();
    let mut add = |key: &str, v: &toml::Value| -> Result<()> {
        let flag = format!("--{}", key.replace('_', "-"));
        if flag == "--config" || present(&flag) {
            return Ok(());
        }
        match v {
            toml::Value::Boolean(true) => extra.push(flag),
            toml::Value::Boolean(false) => {}
            other => {
                let val = toml_flag_value(other)
                    .ok_or_else(|| Error::InvalidParameter(format!("config key {key} has an unsupported type")))?;
                extra.push(format!("{flag}={val}"));
            }
        }
        Ok(())
    };
    for (k, v) in &table {
        if !v.is_table() {
            add(k, v)?;
        }
    }
    if let Some(toml::Value::Table(t)) = table.get(sub) {
        for (k, v) in t {
            add(k, v)?;
        }
    }
    let mut out = argv[..=pos].to_vec();
    out.extend(extra);
    out.extend_from_slice(&argv[pos + 1..]);
    Ok(out)
}

fn init_threads(flag: Option<usize>) -> Result<()> {
    let n = match flag {
        Some(n) => Some(n),
        None => match std::env::var(THREADS_ENV) {
            Ok(v) => Some(v.trim().parse::<usize>().map_err(|_| Error::InvalidParameter(format!("{THREADS_ENV}={v:?}")))?),
            Err(_) => None,
        },
    };
    if let Some(n) = n {
        // a second initialization in the same process keeps the first pool
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    Ok(())
}

/// Runs the CLI on `argv` (program name first) and returns the exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString>,
{
    let argv: Vec<String> = argv.into_iter().map(|a| a.into().to_string_lossy().into_owned()).collect();
    match run_inner(&argv) {
        Ok(()) => 0,
        Err(Failure::Clap(e)) => {
            let code = e.exit_code();
            let _ = e.print();
            code
        }
        Err(Failure::Core(e)) => {
            eprintln!("twinbeam: {e}");
            exit_code(e.category())
        }
    }
}

enum Failure {
    Clap(clap::Error),
    Core(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Core(e)
    }
}

fn run_inner(argv: &[String]) -> std::result::Result<(), Failure> {
    let argv = match config_path(argv) {
        Some(p) => merge_config(argv, &std::fs::read_to_string(&p).map_err(Error::from)?)?,
        None => argv.to_vec(),
    };
    let cli = Cli::try_parse_from(&argv).map_err(Failure::Clap)?;
    init_threads(cli.threads)?;
    let ctx = Ctx { argv: argv.clone() };
    match cli.cmd {
        Command::Simulate(a) => ctx.simulate(a)?,
        Command::Analyze(a) => ctx.analyze(a)?,
        Command::Reconstruct(a) => ctx.reconstruct(a)?,
        Command::Ncd(a) => ctx.ncd(a)?,
        Command::Quasidist(a) => ctx.quasidist(a)?,
        Command::Metrology(a) => ctx.metrology(a)?,
        Command::Sweep(a) => ctx.sweep(a)?,
    }
    Ok(())
}

struct Ctx {
    argv: Vec<String>,
}

fn path_str(p: &Path) -> String {
    p.display().to_string()
}

impl Ctx {
    fn manifest<T: Serialize>(&self, cmd: &str, args: &T, inputs: &[&Path], out: &Path, seed: Option<u64>) -> Result<()> {
        formats::write_manifest(
            out,
            &Manifest {
                tool: "twinbeam".into(),
                version: env!("CARGO_PKG_VERSION").into(),
                command: cmd.into(),
                argv: self.argv.clone(),
                inputs: inputs.iter().map(|p| path_str(p)).collect(),
                outputs: vec![path_str(out)],
                parameters: serde_json::to_value(args)?,
                seed,
            },
        )
    }

    fn simulate(&self, a: SimulateArgs) -> Result<()> {
        let params = a.beam.resolve()?;
        let (s, i) = a.det.specs()?;
        let stream = sample_stream(&params, &s, &i, &a.pump.pump(), a.windows, a.seed)?;
        formats::write_clicks(&a.out, &stream)?;
        self.manifest("simulate", &a, &[], &a.out, Some(a.seed))
    }

    fn analyze(&self, a: AnalyzeArgs) -> Result<()> {
        let stream = formats::read_clicks(&a.input)?;
        let pol = GroupingPolicy::new(a.group_n, a.mode.into());
        let h = group_histogram(&stream, &pol)?;
        formats::write_histogram(&a.out, &h)?;
        let m = moments(&h.to_dist(), 2)?;
        let summary = json!({
            "n_groups": h.n_groups,
            "mean_s": m.get(1, 0),
            "mean_i": m.get(0, 1),
            "stats": fano_nrp_cov(&m).ok(),
            "eta_eff_s": effective_efficiency_moments(&m, crate::ingest::Arm::S, 0.0).ok(),
            "eta_eff_i": effective_efficiency_moments(&m, crate::ingest::Arm::I, 0.0).ok(),
        });
        println!("{}", serde_json::to_string_pretty(&summary)?);
        self.manifest("analyze", &a, &[&a.input], &a.out, None)
    }

    fn reconstruct(&self, a: ReconstructArgs) -> Result<()> {
        let h = formats::read_histogram(&a.hist)?;
        if let Some(n) = a.group_n {
            if n != h.policy.n {
                return Err(Error::InvalidParameter(format!("--group-n {n} but histogram has N = {}", h.policy.n)));
            }
        }
        let (s, i) = a.det.specs()?;
        let cfg = EmConfig { max_iters: a.max_iters, tol: a.tol, n_max: a.n_max };
        let out = em_histogram(&h, &s, &i, &cfg)?;
        formats::write_dist(&a.out, &out.dist, a.encoding.into())?;
        let report = json!({
            "iterations": out.iterations,
            "converged": out.converged,
            "max_change": out.max_change,
            "loglik_final": out.loglik.last(),
            "worst_loglik_drop": out.worst_loglik_drop(),
        });
        println!("{}", serde_json::to_string_pretty(&report)?);
        self.manifest("reconstruct", &a, &[&a.hist], &a.out, None)
    }

    fn ncd(&self, a: NcdArgs) -> Result<()> {
        let d = load_dist(&a.dist)?;
        let ids: Vec<Nci> = a.identifiers.iter().map(|s| s.parse()).collect::<Result<_>>()?;
        let order = ids.iter().map(Nci::order).max().unwrap_or(2);
        let w = intensity_moments(&d, order)?;
        let results: Vec<_> = ids.iter().map(|&id| ncd(&w, id, Some(a.arm.into()))).collect::<Result<_>>()?;
        formats::write_json(&a.out, &json!({ "kind": d.kind, "results": results }))?;
        self.manifest("ncd", &a, &[&a.dist], &a.out, None)
    }

    fn quasidist(&self, a: QuasidistArgs) -> Result<()> {
        let d = load_dist(&a.dist)?;
        let g = quasi_distribution(&d, a.s, GridSpec { steps: a.steps, w_max_s: a.w_max_s, w_max_i: a.w_max_i })?;
        if g.divergent {
            eprintln!("twinbeam: warning: series flagged divergent (edge ratio {:e}, grid mass {:.4})", g.edge_ratio, grid_moments(&g, 0, 0));
        }
        formats::write_grid(&a.out, &g)?;
        self.manifest("quasidist", &a, &[&a.dist], &a.out, None)
    }

    fn metrology(&self, a: MetrologyArgs) -> Result<()> {
        let stream = formats::read_clicks(&a.input)?;
        let r = precision_improvement(&stream, a.group_n, a.nm)?;
        formats::write_json(&a.out, &r)?;
        self.manifest("metrology", &a, &[&a.input], &a.out, None)
    }

    fn sweep(&self, a: SweepArgs) -> Result<()> {
        let mut groups = a.groups.clone().unwrap_or_else(|| DEFAULT_GROUPS.to_vec());
        groups.sort_unstable();
        groups.dedup();
        if groups.first() == Some(&0) {
            return Err(Error::InvalidParameter("group sizes must be >= 1".into()));
        }
        let params = a.beam.resolve()?;
        let (s, i) = a.det.specs()?;
        let needs_sim = matches!(a.metric, Metric::Postselect | Metric::Precision);
        let source = if needs_sim || a.input.is_some() { Source::Sim } else { a.source };
        let mut csv = String::new();
        match source {
            Source::Model => {
                let f_w = constituting_photocounts(&params, &s, &i)?;
                let dists = compound_photocounts_series(&f_w, &groups)?;
                header(&mut csv, a.metric);
                for (&n, d) in groups.iter().zip(&dists) {
                    model_row(&mut csv, a.metric, n, d, &params, &s, &i, a.pump.k_pump)?;
                }
            }
            Source::Sim => {
                let stream = match &a.input {
                    Some(p) => formats::read_clicks(p)?,
                    None => sample_stream(&params, &s, &i, &a.pump.pump(), a.windows, a.seed)?,
                };
                header(&mut csv, a.metric);
                for &n in &groups {
                    sim_row(&mut csv, &a, n, &stream, &params, &s, &i)?;
                }
            }
        }
        formats::write_atomic(&a.out, csv.as_bytes())?;
        let inputs: Vec<&Path> = a.input.iter().map(PathBuf::as_path).collect();
        self.manifest("sweep", &a, &inputs, &a.out, Some(a.seed))
    }
}

/// Reads a jdist-v1 file, or a jhist-v1 file as its normalized photocount distribution.
pub fn load_dist(path: &Path) -> Result<JointDist> {
    let bytes = std::fs::read(path)?;
    let first = bytes.split(|&b| b == b'\n').next().unwrap_or_default();
    let h: Value = serde_json::from_slice(first)?;
    match h.get("format").and_then(Value::as_str) {
        Some("jdist-v1") => formats::decode_dist(&bytes),
        Some("jhist-v1") => Ok(formats::decode_histogram(&bytes)?.to_dist()),
        other => Err(Error::Format(format!("expected jdist-v1 or jhist-v1, found {other:?}"))),
    }
}

const NCD_IDS: [Nci; 5] = [Nci::E001, Nci::E101, Nci::E111, Nci::E211, Nci::M1001];

fn header(csv: &mut String, m: Metric) {
    let h = match m {
        Metric::Fano | Metric::Nrp | Metric::Cov => "n,fano_s,fano_i,nrp,cov",
        Metric::EtaEff => "n,eta_eff_s,eta_eff_i,eta_eff_s_dark_sub,eta_eff_i_dark_sub,model_s,model_i",
        Metric::Ncd => "n,tau_e001,tau_e101,tau_e111,tau_e211,tau_m1001",
        Metric::Postselect => "n,c_s_opt,fano_min,mean_conditional,p_success,events",
        Metric::Precision => "n,dr_ref_s,dr_ref_i,dr_cond_s,dr_cond_i,s_cs,s_ci,mean_ref_i,mean_cond_i",
    };
    csv.push_str(h);
    csv.push('\n');
}

fn push_row(csv: &mut String, n: usize, vals: &[f64]) {
    let _ = write!(csv, "{n}");
    for v in vals {
        let _ = write!(csv, ",{v}");
    }
    csv.push('\n');
}

fn moment_row(csv: &mut String, m: Metric, n: usize, d: &JointDist, eta_pair: [f64; 4], model: [f64; 2]) -> Result<()> {
    match m {
        Metric::Fano | Metric::Nrp | Metric::Cov => {
            let r = fano_nrp_cov(&moments(d, 2)?)?;
            push_row(csv, n, &[r.f_s, r.f_i, r.r, r.c]);
        }
        Metric::EtaEff => push_row(csv, n, &[eta_pair[0], eta_pair[1], eta_pair[2], eta_pair[3], model[0], model[1]]),
        Metric::Ncd => {
            let w = intensity_moments(d, 5)?;
            let taus: Vec<f64> = NCD_IDS.iter().map(|&id| ncd(&w, id, None).map(|r| r.tau)).collect::<Result<_>>()?;
            push_row(csv, n, &taus);
        }
        Metric::Postselect | Metric::Precision => unreachable!("simulated-only metrics"),
    }
    Ok(())
}

fn eta_values(d: &JointDist, n: usize, s: &DetectorSpec, i: &DetectorSpec) -> Result<[f64; 4]> {
    use crate::ingest::Arm;
    let m = moments(d, 2)?;
    Ok([
        effective_efficiency_moments(&m, Arm::S, 0.0)?,
        effective_efficiency_moments(&m, Arm::I, 0.0)?,
        effective_efficiency_moments(&m, Arm::S, n as f64 * i.dark)?,
        effective_efficiency_moments(&m, Arm::I, n as f64 * s.dark)?,
    ])
}

#[allow(clippy::too_many_arguments)]
fn model_row(
    csv: &mut String,
    m: Metric,
    n: usize,
    d: &JointDist,
    params: &TwbParams,
    s: &DetectorSpec,
    i: &DetectorSpec,
    k: f64,
) -> Result<()> {
    use crate::ingest::Arm;
    let eta = if m == Metric::EtaEff { eta_values(d, n, s, i)? } else { [0.0; 4] };
    let model = [effective_efficiency_model(params, Arm::S, s.eta, k, n), effective_efficiency_model(params, Arm::I, i.eta, k, n)];
    moment_row(csv, m, n, d, eta, model)
}

fn sim_row(
    csv: &mut String,
    a: &SweepArgs,
    n: usize,
    stream: &ClickStream,
    params: &TwbParams,
    s: &DetectorSpec,
    i: &DetectorSpec,
) -> Result<()> {
    use crate::ingest::Arm;
    match a.metric {
        Metric::Precision => {
            let r = precision_improvement(stream, n, a.nm)?;
            push_row(
                csv,
                n,
                &[
                    r.reference_s.normalized,
                    r.reference_i.normalized,
                    r.conditioned_s.normalized,
                    r.conditioned_i.normalized,
                    r.s_cs,
                    r.s_ci,
                    r.reference_i.mean,
                    r.conditioned_i.mean,
                ],
            );
        }
        Metric::Postselect => {
            let h = group_histogram(stream, &GroupingPolicy::disjoint(n))?;
            let r = optimal_postselection(&h, a.min_events)?;
            push_row(csv, n, &[r.c_s_opt as f64, r.fano_min, r.mean_conditional, r.p_success, r.events as f64]);
        }
        m => {
            let h: JointHistogram = group_histogram(stream, &GroupingPolicy::disjoint(n))?;
            let eta = if m == Metric::EtaEff {
                [
                    effective_efficiency(&h, Arm::S, None)?,
                    effective_efficiency(&h, Arm::I, None)?,
                    effective_efficiency(&h, Arm::S, Some(i))?,
                    effective_efficiency(&h, Arm::I, Some(s))?,
                ]
            } else {
                [0.0; 4]
            };
            let k = a.pump.k_pump;
            let model =
                [effective_efficiency_model(params, Arm::S, s.eta, k, n), effective_efficiency_model(params, Arm::I, i.eta, k, n)];
            moment_row(csv, m, n, &h.to_dist(), eta, model)?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn v(xs: &[&str]) -> Vec<String> {
        xs.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn config_fills_missing_flags_only() {
        let cfg = "seed = 3\n[simulate]\nwindows = 100\nk_pump = 0.001\n[analyze]\ngroup_n = 9\n";
        let argv = v(&["twinbeam", "--config", "c.toml", "simulate", "--seed", "7", "--out", "x"]);
        let got = merge_config(&argv, cfg).unwrap();
        assert!(got.contains(&"--windows=100".to_string()));
        assert!(got.contains(&"--k-pump=0.001".to_string()));
        assert!(!got.iter().any(|a| a.starts_with("--seed=")));
        assert!(!got.iter().any(|a| a.starts_with("--group-n")));
        let cli = Cli::try_parse_from(&got).unwrap();
        let Command::Simulate(a) = cli.cmd else { panic!() };
        assert_eq!((a.seed, a.windows), (7, 100));
    }

    #[test]
    fn exit_codes() {
        assert_eq!(exit_code(Category::Usage), 2);
        assert_eq!(exit_code(Category::Data), 3);
        assert_eq!(exit_code(Category::Numeric), 4);
        assert_eq!(run(["twinbeam", "bogus"]), 2);
        assert_eq!(run(["twinbeam", "analyze", "--in", "/nonexistent/x", "--group-n", "2", "--out", "/tmp/unused"]), 3);
    }
}
