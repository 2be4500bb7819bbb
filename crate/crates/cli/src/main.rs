use clap::{Parser, Subcommand, ValueEnum};
use hitchtrack::io;
use hitchtrack::powertrain::fit_map;
use hitchtrack::scenario::{load_scenario, parse_override};
use hitchtrack::sim::{lyapunov_audit, run_closed_loop, AuditConfig, RunSummary, SimError};
use hitchtrack::trajectory::{make_generator, GeneratorSpec, SpeedProfile};
use hitchtrack::vehicle::TractorParams;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

const EXIT_CONFIG: u8 = 2;
const EXIT_PLANT: u8 = 3;
const EXIT_AUDIT: u8 = 4;

#[derive(Parser)]
#[command(name = "hitchtrack", version, about = "Tractor-trailer trajectory tracking simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit a propulsion map to `u1,v,F` measurements.
    FitMap { input: PathBuf, output: PathBuf },
    /// Run a scenario. Trailing `--key.path=value` arguments override
    /// scenario entries.
    Simulate {
        scenario: PathBuf,
        #[arg(trailing_var_arg = true, allow_hyphen_values = true, value_name = "--KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Write a reference trajectory as `t,x,y,theta,v` rows.
    GenTraj(GenTraj),
    /// Re-run the Lyapunov audit on an existing log.
    Audit {
        log: PathBuf,
        #[arg(long)]
        max_relative_residual: Option<f64>,
        #[arg(long)]
        max_increases: Option<usize>,
        #[arg(long, default_value_t = 1e-6)]
        monotonic_tol: f64,
        #[arg(long, default_value_t = 1e-9)]
        residual_floor: f64,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Kind {
    Line,
    Circle,
    FigureEight,
    SCurve,
}

#[derive(clap::Args)]
struct GenTraj {
    kind: Kind,
    #[arg(short, long)]
    output: PathBuf,
    #[arg(long, default_value_t = 10.0)]
    radius: f64,
    #[arg(long, default_value_t = 1.0)]
    speed: f64,
    #[arg(long, default_value_t = 60.0)]
    duration: f64,
    /// Samples per second.
    #[arg(long, default_value_t = 100.0)]
    rate: f64,
    #[arg(long, default_value_t = 0.0)]
    heading: f64,
    #[arg(long)]
    clockwise: bool,
    /// Arc angle of each s-curve half [rad].
    #[arg(long, default_value_t = std::f64::consts::FRAC_PI_3)]
    angle: f64,
    /// Straight lead-in of the s-curve [m].
    #[arg(long, default_value_t = 5.0)]
    lead: f64,
    #[arg(long, default_value_t = 2.0)]
    wheelbase: f64,
    #[arg(long, default_value_t = 0.55)]
    psi_max: f64,
}

fn fail(code: u8, msg: impl std::fmt::Display) -> ExitCode {
    eprintln!("error: {msg}");
    ExitCode::from(code)
}

fn fit_map_cmd(input: &Path, output: &Path) -> ExitCode {
    let samples = match io::read_map_samples(input) {
        Ok(s) => s,
        Err(e) => return fail(EXIT_CONFIG, e),
    };
    let report = match fit_map(&samples) {
        Ok(r) => r,
        Err(e) => return fail(EXIT_CONFIG, format!("{}: {e}", input.display())),
    };
    if let Err(e) = io::write_fit_report(output, &report) {
        return fail(EXIT_CONFIG, e);
    }
    for (i, c) in report.map.coeffs.iter().enumerate() {
        println!("b{} = {c:.6}", i + 1);
    }
    println!("rms_residual = {:.6}", report.rms_residual);
    println!("samples = {}", report.samples);
    ExitCode::SUCCESS
}

fn print_summary(s: &RunSummary) {
    println!("completed = {}", s.completed);
    println!("t_end = {}", s.t_end);
    println!("max_abs_e_p = {:.6}", s.max_abs_e_p);
    println!("settled_max_abs_e_p = {:.6e}", s.settled_max_abs_e_p);
    println!("final_e_p = {:.6e}", s.final_e_p);
    println!("v2_increases_outside_saturation = {}", s.v2_increases_outside_saturation);
    println!("saturation_fraction = {:.4}", s.saturation_fraction);
    println!("audit_passed = {}", s.audit_passed);
    if let Some(a) = &s.abort {
        println!("abort = \"{}\"", a.reason);
    }
}

fn simulate_cmd(scenario: &Path, raw: &[String]) -> ExitCode {
    let overrides = match raw.iter().map(|a| parse_override(a)).collect::<Result<Vec<_>, _>>() {
        Ok(o) => o,
        Err(e) => return fail(EXIT_CONFIG, e),
    };
    let sc = match load_scenario(scenario, &overrides) {
        Ok(s) => s,
        Err(e) => return fail(EXIT_CONFIG, e),
    };
    let out = match run_closed_loop(&sc.config) {
        Ok(o) => o,
        Err(e @ SimError::Config(_)) => return fail(EXIT_CONFIG, e),
        Err(e) => return fail(EXIT_PLANT, e),
    };
    if let Err(e) = io::write_log(&sc.log_path, &out.records) {
        return fail(EXIT_CONFIG, e);
    }
    if let Err(e) = io::write_summary(&sc.summary_path, &out.summary) {
        return fail(EXIT_CONFIG, e);
    }
    print_summary(&out.summary);
    if !out.summary.completed {
        ExitCode::from(EXIT_PLANT)
    } else if !out.summary.audit_passed {
        ExitCode::from(EXIT_AUDIT)
    } else {
        ExitCode::SUCCESS
    }
}

fn gen_traj_cmd(g: &GenTraj) -> ExitCode {
    let spec = match g.kind {
        Kind::Line => GeneratorSpec::Line { heading: g.heading },
        Kind::Circle => GeneratorSpec::Circle { radius: g.radius, clockwise: g.clockwise },
        Kind::FigureEight => GeneratorSpec::FigureEight { radius: g.radius },
        Kind::SCurve => GeneratorSpec::SCurve { radius: g.radius, angle: g.angle, lead: g.lead },
    };
    if !(g.rate > 0.0 && g.duration > 0.0) {
        return fail(EXIT_CONFIG, "rate and duration must be > 0");
    }
    let tractor =
        TractorParams { a: 0.5 * g.wheelbase, b: 0.5 * g.wheelbase, psi_max: g.psi_max, ..TractorParams::default() };
    if let Err(e) = tractor.validate() {
        return fail(EXIT_CONFIG, e);
    }
    let traj = match make_generator(&spec, SpeedProfile::constant(g.speed), tractor.min_turning_radius()) {
        Ok(t) => t,
        Err(e) => return fail(EXIT_CONFIG, e),
    };
    let n = (g.duration * g.rate).round() as usize;
    let rows: Vec<io::TrajectoryRow> = (0..=n)
        .map(|k| {
            let t = k as f64 / g.rate;
            let r = traj.sample(t);
            io::TrajectoryRow { t, x: r.x_d, y: r.y_d, theta: r.theta_d, v: r.v_d }
        })
        .collect();
    if let Err(e) = io::write_trajectory(&g.output, &rows) {
        return fail(EXIT_CONFIG, e);
    }
    println!("rows = {}", rows.len());
    ExitCode::SUCCESS
}

fn audit_cmd(log: &Path, cfg: AuditConfig) -> ExitCode {
    let records = match io::read_log(log) {
        Ok(r) => r,
        Err(e) => return fail(EXIT_CONFIG, e),
    };
    let report = lyapunov_audit(&records, &cfg);
    println!("stencils_checked = {}", report.stencils_checked);
    println!("stencils_excluded = {}", report.stencils_excluded);
    println!("v1_max_relative_residual = {:.6e}", report.v1_max_relative_residual);
    println!("v2_max_relative_residual = {:.6e}", report.v2_max_relative_residual);
    println!("v2_increases = {}", report.v2_increases);
    println!("v2_increases_outside_saturation = {}", report.v2_increases_outside_saturation);
    if report.passes(&cfg) {
        ExitCode::SUCCESS
    } else {
        fail(EXIT_AUDIT, "audit thresholds exceeded")
    }
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "warn".into()))
        .with_writer(std::io::stderr)
        .without_time()
        .init();
    let cli = Cli::parse();
    match &cli.command {
        Command::FitMap { input, output } => fit_map_cmd(input, output),
        Command::Simulate { scenario, overrides } => simulate_cmd(scenario, overrides),
        Command::GenTraj(g) => gen_traj_cmd(g),
        Command::Audit { log, max_relative_residual, max_increases, monotonic_tol, residual_floor } => audit_cmd(
            log,
            AuditConfig {
                monotonic_tol: *monotonic_tol,
                residual_floor: *residual_floor,
                max_relative_residual: *max_relative_residual,
                max_increases_outside_saturation: *max_increases,
            },
        ),
    }
}
