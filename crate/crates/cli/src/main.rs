mod config;

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use secregion::certifier::{maximize, Certificate};
use secregion::model::Part;
use secregion::network::parse_matpower;
use secregion::powerflow::RayOptions;
use secregion::setup::{Setup, Study};
use secregion::validator::{
    covering_ratio, default_plane, monte_carlo_soundness, tightness, trace_cross_section, CrossSection, PlaneAxis,
    ValidationReport,
};
use secregion::Error;

use config::{ObjectiveKind, Preset, RunConfig};

#[derive(Parser)]
#[command(name = "secregion", version, about = "Certified inner approximations of power network security regions")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Compute a certificate and write `<case>.certificate.json`.
    Certify(Common),
    /// Check a certificate by sampling; writes `<case>.validation.json`.
    Validate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        certificate: PathBuf,
    },
    /// Trace a 2-D cross section; writes `<case>.section.{csv,json}`.
    Section {
        #[command(flatten)]
        common: Common,
        /// Certificate to draw; computed from the configuration when absent.
        #[arg(long)]
        certificate: Option<PathBuf>,
        /// Plane as `BUS[:p|q],BUS[:p|q]`; defaults to the free inputs.
        #[arg(long)]
        buses: Option<String>,
    },
}

#[derive(Args, Clone, Default)]
struct Common {
    /// TOML run configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    /// MATPOWER case file.
    #[arg(long)]
    case: Option<PathBuf>,
    #[arg(long, value_enum)]
    preset: Option<Preset>,
    #[arg(long, value_enum)]
    objective: Option<ObjectiveKind>,
    /// Relative voltage band around the base point.
    #[arg(long)]
    band: Option<f64>,
    /// Stop at the linear relaxation.
    #[arg(long)]
    lp_only: bool,
    #[arg(long)]
    rays: Option<usize>,
    #[arg(long)]
    samples: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

enum Failure {
    Error(String),
    Zero(String),
    Unsound(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::ZeroCertificate(_) => Failure::Zero(e.to_string()),
            e => Failure::Error(e.to_string()),
        }
    }
}

impl From<String> for Failure {
    fn from(e: String) -> Self {
        Failure::Error(e)
    }
}

type Outcome = std::result::Result<(), Failure>;

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Certify(common) => cmd_certify(&common),
        Command::Validate { common, certificate } => cmd_validate(&common, &certificate),
        Command::Section {
            common,
            certificate,
            buses,
        } => cmd_section(&common, certificate.as_deref(), buses.as_deref()),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Error(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
        Err(Failure::Zero(m)) => {
            eprintln!("no certificate: {m}");
            ExitCode::from(2)
        }
        Err(Failure::Unsound(m)) => {
            eprintln!("validation failed: {m}");
            ExitCode::from(3)
        }
    }
}

fn resolve(common: &Common) -> Result<RunConfig, String> {
    let mut c = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(v) = &common.case {
        c.case = Some(v.clone());
    }
    if let Some(v) = common.preset {
        c.preset = Some(v);
    }
    if let Some(v) = common.objective {
        c.objective.kind = Some(v);
    }
    if let Some(v) = common.band {
        c.setup.band = Some(v);
    }
    if common.lp_only {
        c.search.lp_only = Some(true);
    }
    if let Some(v) = common.rays {
        c.validate.rays = Some(v);
    }
    if let Some(v) = common.samples {
        c.validate.samples = Some(v);
    }
    if let Some(v) = common.seed {
        c.seed = Some(v);
    }
    if let Some(v) = &common.out {
        c.out = Some(v.clone());
    }
    Ok(c)
}

fn case_stem(path: &Path) -> String {
    path.file_stem().map_or_else(|| "case".into(), |s| s.to_string_lossy().into_owned())
}

fn load_study(config: &RunConfig, setup: Option<&Setup>) -> Result<Study, Failure> {
    let path = config.case_path()?;
    let text = std::fs::read_to_string(path).map_err(|e| format!("cannot read {}: {e}", path.display()))?;
    let network = parse_matpower(&text)?;
    let setup = setup.cloned().unwrap_or_else(|| config.setup_for(&network));
    Ok(Study::prepare(network, &setup)?)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), String> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| e.to_string())?;
    text.push('\n');
    write_file(path, text.as_bytes())
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), String> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| format!("cannot create {}: {e}", dir.display()))?;
    }
    std::fs::write(path, bytes).map_err(|e| format!("cannot write {}: {e}", path.display()))
}

fn read_certificate(path: &Path) -> Result<Certificate, String> {
    let text = std::fs::read_to_string(path).map_err(|e| format!("cannot read {}: {e}", path.display()))?;
    serde_json::from_str(&text).map_err(|e| format!("{}: {e}", path.display()))
}

fn certify(config: &RunConfig, study: &Study) -> Result<Certificate, Failure> {
    let objective = config.objective_for(study.free.len());
    let start = Instant::now();
    let cert = maximize(study, &objective, &config.search_options())?;
    eprintln!(
        "{}: {:?} value {:.6e} in {:.2?}",
        cert.case,
        cert.status,
        cert.value,
        start.elapsed()
    );
    Ok(cert)
}

fn cmd_certify(common: &Common) -> Outcome {
    let config = resolve(common)?;
    let study = load_study(&config, None)?;
    let cert = certify(&config, &study)?;
    let path = config.out_dir().join(format!("{}.certificate.json", case_stem(config.case_path()?)));
    write_json(&path, &cert)?;
    println!("{}", path.display());
    Ok(())
}

fn cmd_validate(common: &Common, certificate: &Path) -> Outcome {
    let config = resolve(common)?;
    let cert = read_certificate(certificate)?;
    let study = load_study(&config, Some(&cert.setup))?;
    if cert.case != study.network.name {
        return Err(Failure::Error(format!(
            "certificate is for case `{}`, not `{}`",
            cert.case, study.network.name
        )));
    }

    let start = Instant::now();
    let soundness = monte_carlo_soundness(&study, &cert, config.samples(), config.seed())?;
    eprintln!(
        "soundness: {} samples, {} failures in {:.2?}",
        soundness.samples,
        soundness.failures,
        start.elapsed()
    );
    let (mut covering, mut tight) = (None, None);
    if config.rays() > 0 {
        let start = Instant::now();
        let plane = default_plane(&study, &cert)?;
        let section = trace_cross_section(&study, Some(&cert), plane, config.rays(), &RayOptions::default())?;
        covering = covering_ratio(&section).ok();
        tight = tightness(&section).ok();
        eprintln!(
            "section: covering {:?} tightness {:?} in {:.2?}",
            covering,
            tight,
            start.elapsed()
        );
    }
    let failures = soundness.failures;
    let report = ValidationReport {
        case: cert.case.clone(),
        soundness,
        covering_ratio: covering,
        tightness: tight,
        runtime: None,
    };
    let path = config.out_dir().join(format!("{}.validation.json", case_stem(config.case_path()?)));
    write_json(&path, &report)?;
    println!("{}", path.display());
    if failures > 0 {
        let first = report.soundness.details.first().map_or(String::new(), |d| format!(": {}", d.reason));
        return Err(Failure::Unsound(format!("{failures} of {} samples failed{first}", report.soundness.samples)));
    }
    Ok(())
}

fn parse_plane(text: &str) -> Result<[PlaneAxis; 2], String> {
    let axes: Vec<PlaneAxis> = text
        .split(',')
        .map(|item| {
            let (bus, part) = match item.trim().split_once(':') {
                Some((b, p)) => (b, p.trim()),
                None => (item.trim(), "p"),
            };
            let bus: u32 = bus.trim().parse().map_err(|_| format!("bad bus id `{bus}`"))?;
            let part = match part {
                "p" | "g" => Part::G,
                "q" | "b" => Part::B,
                other => return Err(format!("unknown injection part `{other}` (use p or q)")),
            };
            Ok(PlaneAxis { bus, part })
        })
        .collect::<Result<_, String>>()?;
    match axes.as_slice() {
        [a, b] if a != b => Ok([*a, *b]),
        _ => Err(format!("plane `{text}` must name two distinct coordinates")),
    }
}

#[derive(Serialize)]
struct CsvRow {
    angle: f64,
    r_true: f64,
    r_cert: f64,
}

fn section_csv(section: &CrossSection) -> Result<Vec<u8>, String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in &section.rays {
        w.serialize(CsvRow {
            angle: r.angle,
            r_true: r.r_true,
            r_cert: r.r_cert,
        })
        .map_err(|e| e.to_string())?;
    }
    w.into_inner().map_err(|e| e.to_string())
}

fn cmd_section(common: &Common, certificate: Option<&Path>, buses: Option<&str>) -> Outcome {
    let config = resolve(common)?;
    let plane = buses.map(parse_plane).transpose()?;
    let (study, cert) = match certificate {
        Some(p) => {
            let cert = read_certificate(p)?;
            (load_study(&config, Some(&cert.setup))?, cert)
        }
        None => {
            let study = load_study(&config, None)?;
            let cert = certify(&config, &study)?;
            (study, cert)
        }
    };
    let plane = match plane {
        Some(p) => p,
        None => default_plane(&study, &cert)?,
    };
    let section = trace_cross_section(&study, Some(&cert), plane, config.rays(), &RayOptions::default())?;
    let stem = case_stem(config.case_path()?);
    let csv_path = config.out_dir().join(format!("{stem}.section.csv"));
    let json_path = config.out_dir().join(format!("{stem}.section.json"));
    write_file(&csv_path, &section_csv(&section)?)?;
    write_json(&json_path, &section)?;
    println!("{}\n{}", csv_path.display(), json_path.display());
    Ok(())
}
