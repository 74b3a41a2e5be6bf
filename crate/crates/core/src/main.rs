//! `fvflow` command-line driver.
//!
//! A case directory holds `mesh.txt` and `case.toml`. `run` writes its outputs
//! to `<case>/output` unless `--out` is given.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand};
use log::info;
use serde::Serialize;

use fvflow::cases::{self, Case};
use fvflow::config::CaseConfig;
use fvflow::coupling::{Algorithm, Counters, OuterResiduals, Simulation};
use fvflow::fvm::FvMesh;
use fvflow::io::{self, VtkField};
use fvflow::profile::{ProfileData, ProfileReport};
use fvflow::{Error, Vec3};

const MESH_FILE: &str = "mesh.txt";
const CONFIG_FILE: &str = "case.toml";

#[derive(Parser)]
#[command(name = "fvflow", version, about = "Finite-volume incompressible flow solver")]
struct Cli {
    /// Worker threads; defaults to the available parallelism.
    #[arg(long, global = true)]
    workers: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a case directory.
    Gen {
        #[command(subcommand)]
        case: GenCase,
    },
    /// Run a case.
    Run {
        case_dir: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Override coupling.max_outer.
        #[arg(long)]
        max_outer: Option<usize>,
        /// Override coupling.end_time.
        #[arg(long)]
        end_time: Option<f64>,
        /// Override coupling.algorithm.
        #[arg(long)]
        algorithm: Option<Algorithm>,
    },
    /// Sample a field of a finished run along a line.
    Sample {
        case_dir: PathBuf,
        /// Run output directory; defaults to `<case>/output`.
        #[arg(long)]
        run: Option<PathBuf>,
        /// `U` or `p`.
        #[arg(long, default_value = "U")]
        field: String,
        #[arg(long, value_parser = parse_point)]
        start: Vec3,
        #[arg(long, value_parser = parse_point)]
        end: Vec3,
        #[arg(long, default_value_t = 100)]
        points: usize,
        /// Output CSV; defaults to stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print the timing breakdown of a run.
    ProfileReport {
        run_dir: PathBuf,
        /// Print JSON instead of tables.
        #[arg(long)]
        json: bool,
    },
}

#[derive(Subcommand)]
enum GenCase {
    /// Lid-driven cavity with `n^3` cells.
    Cavity {
        #[arg(long)]
        n: usize,
        #[arg(long, default_value = "cavity")]
        out: PathBuf,
    },
    /// One-cell-thick channel with an oscillating inlet.
    Channel {
        #[arg(long)]
        nx: usize,
        #[arg(long)]
        ny: usize,
        #[arg(long, default_value_t = cases::CHANNEL_LENGTH)]
        length: f64,
        #[arg(long, default_value_t = cases::CHANNEL_HEIGHT)]
        height: f64,
        #[arg(long, default_value = "channel")]
        out: PathBuf,
    },
    /// Sheared duct whose internal faces are nonorthogonal by `skew` degrees.
    Duct {
        #[arg(long)]
        nx: usize,
        #[arg(long)]
        ny: usize,
        #[arg(long, default_value_t = 0.0)]
        skew: f64,
        #[arg(long, default_value = "duct")]
        out: PathBuf,
    },
}

fn parse_point(s: &str) -> Result<Vec3, String> {
    let v: Vec<f64> = s
        .split(',')
        .map(|t| t.trim().parse::<f64>().map_err(|_| format!("invalid coordinate `{t}`")))
        .collect::<Result<_, _>>()?;
    match v.as_slice() {
        [x, y, z] => Ok(Vec3::new(*x, *y, *z)),
        _ => Err(format!("expected `x,y,z`, got `{s}`")),
    }
}

enum Failure {
    Usage(String),
    Runtime(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Case(cases::CaseError::InvalidParameter(m)) => Failure::Usage(m),
            e => Failure::Runtime(e),
        }
    }
}

/// Contents of `report.json`.
#[derive(Serialize)]
struct RunReport {
    case: String,
    algorithm: Algorithm,
    converged: bool,
    outer_iterations: usize,
    t_final: f64,
    residuals: OuterResiduals,
    counters: Counters,
    continuity_error: f64,
    cells: usize,
    workers: usize,
    /// Seconds from process start, including case input.
    wall_time: f64,
    error: Option<String>,
}

fn main() -> ExitCode {
    let start = Instant::now();
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match dispatch(cli, start) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}

fn dispatch(cli: Cli, start: Instant) -> Result<(), Failure> {
    let workers = match cli.workers {
        Some(0) => return Err(Failure::Usage("--workers must be at least 1".into())),
        Some(n) => n,
        None => std::thread::available_parallelism().map_or(1, |n| n.get()),
    };
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build_global()
        .map_err(|e| Failure::Usage(format!("cannot start {workers} workers: {e}")))?;
    match cli.command {
        Command::Gen { case } => gen(case),
        Command::Run { case_dir, out, max_outer, end_time, algorithm } => {
            let out = out.unwrap_or_else(|| case_dir.join("output"));
            run(&case_dir, &out, max_outer, end_time, algorithm, workers, start)
        }
        Command::Sample { case_dir, run, field, start: p0, end: p1, points, out } => {
            let run = run.unwrap_or_else(|| case_dir.join("output"));
            sample(&case_dir, &run, &field, p0, p1, points, out.as_deref())
        }
        Command::ProfileReport { run_dir, json } => profile_report(&run_dir, json),
    }
}

fn gen(case: GenCase) -> Result<(), Failure> {
    let (built, out) = match case {
        GenCase::Cavity { n, out } => (cases::gen_cavity(n), out),
        GenCase::Channel { nx, ny, length, height, out } => (cases::gen_channel(nx, ny, length, height), out),
        GenCase::Duct { nx, ny, skew, out } => (cases::gen_skewed_duct(nx, ny, skew), out),
    };
    let Case { mesh, config } = built.map_err(Error::from)?;
    fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
    io::write_mesh(&mesh, &out.join(MESH_FILE))?;
    config.save(&out.join(CONFIG_FILE))?;
    info!("wrote {} ({} cells, {} faces)", out.display(), mesh.n_cells(), mesh.n_faces());
    Ok(())
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<(), Error> {
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<(), Error> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::Data(e.to_string()))?;
    write(path, text + "\n")
}

fn write_vtk(sim: &Simulation, path: &Path) -> Result<(), Error> {
    let state = &sim.state;
    io::write_vtk(
        &sim.problem.fv.mesh,
        &[VtkField::Vector("U", &state.u.values), VtkField::Scalar("p", &state.p.values)],
        path,
    )
}

fn run(
    case_dir: &Path,
    out: &Path,
    max_outer: Option<usize>,
    end_time: Option<f64>,
    algorithm: Option<Algorithm>,
    workers: usize,
    start: Instant,
) -> Result<(), Failure> {
    let mesh = io::read_mesh(&case_dir.join(MESH_FILE))?;
    let mut config = CaseConfig::load(&case_dir.join(CONFIG_FILE))?;
    if let Some(n) = max_outer {
        config.coupling.max_outer = n;
    }
    if let Some(t) = end_time {
        config.coupling.end_time = Some(t);
    }
    if let Some(a) = algorithm {
        config.coupling.algorithm = a;
    }
    let mut sim = Simulation::new(mesh, &config)?;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    info!("{}: {} cells, {} workers", config.name, sim.problem.fv.mesh.n_cells(), workers);

    let interval = config.io.write_interval;
    let result = sim.run(|sim, r| {
        let k = sim.state.outer_iter;
        if k % 50 == 0 {
            info!("iter {k}: momentum {:.3e} continuity {:.3e}", r.momentum, r.continuity);
        }
        if interval > 0 && k % interval == 0 {
            write_vtk(sim, &out.join(format!("fields_{k:06}.vtk")))?;
        }
        Ok(())
    });

    // Outputs are written even when the run fails.
    let fv = &sim.problem.fv;
    write(&out.join("residuals.csv"), sim.log.to_csv())?;
    write(&out.join("fields.csv"), io::fields_csv(fv, &sim.state.u.values, &sim.state.p.values))?;
    write_vtk(&sim, &out.join("fields.vtk"))?;
    for line in &config.io.sample {
        let (p0, p1) = (Vec3::from(line.start), Vec3::from(line.end));
        let csv = match line.field.as_str() {
            "U" => {
                io::line_sample_csv(&io::sample_line(fv, &sim.state.u.values, p0, p1, line.points), &["Ux", "Uy", "Uz"])
            }
            _ => io::line_sample_csv(&io::sample_line(fv, &sim.state.p.values, p0, p1, line.points), &["p"]),
        };
        write(&out.join(format!("sample_{}.csv", line.name)), csv)?;
    }

    let wall_time = start.elapsed().as_secs_f64();
    let cells = fv.mesh.n_cells();
    let (summary, error) = match &result {
        Ok(s) => (Some(s), None),
        Err(e) => (None, Some(e.to_string())),
    };
    let report = RunReport {
        case: config.name.clone(),
        algorithm: config.coupling.algorithm,
        converged: summary.is_some_and(|s| s.converged),
        outer_iterations: sim.state.outer_iter,
        t_final: sim.state.t,
        residuals: summary.map(|s| s.residuals).unwrap_or_default(),
        counters: sim.state.counters,
        continuity_error: fvflow::fvm::continuity_error(fv, sim.state.flux()),
        cells,
        workers,
        wall_time,
        error,
    };
    write_json(&out.join("report.json"), &report)?;
    let profile = ProfileData {
        case: config.name.clone(),
        workers,
        cells,
        total_time: wall_time,
        profiler: sim.profiler.clone(),
    };
    write_json(&out.join("profile.json"), &profile)?;
    let summary = result?;
    info!(
        "{} after {} iterations in {wall_time:.3} s ({} CG / {} BiCGStab inner iterations)",
        if summary.converged { "converged" } else { "stopped" },
        summary.outer_iterations,
        summary.counters.cg_iterations,
        summary.counters.bicgstab_iterations
    );
    Ok(())
}

fn sample(
    case_dir: &Path,
    run_dir: &Path,
    field: &str,
    p0: Vec3,
    p1: Vec3,
    points: usize,
    out: Option<&Path>,
) -> Result<(), Failure> {
    if field != "U" && field != "p" {
        return Err(Failure::Usage(format!("unknown field `{field}`; expected `U` or `p`")));
    }
    if points == 0 {
        return Err(Failure::Usage("--points must be at least 1".into()));
    }
    let fv = FvMesh::new(io::read_mesh(&case_dir.join(MESH_FILE))?).map_err(Error::from)?;
    let path = run_dir.join("fields.csv");
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let (u, p) = io::parse_fields_csv(&text).map_err(|e| Error::from(e).context(path.display().to_string()))?;
    if u.len() != fv.mesh.n_cells() {
        return Err(Failure::Runtime(Error::Data(format!(
            "{} has {} cells, the mesh has {}",
            path.display(),
            u.len(),
            fv.mesh.n_cells()
        ))));
    }
    let (csv, outside, total) = if field == "U" {
        let s = io::sample_line(&fv, &u, p0, p1, points);
        (io::line_sample_csv(&s, &["Ux", "Uy", "Uz"]), s.outside, s.rows.len())
    } else {
        let s = io::sample_line(&fv, &p, p0, p1, points);
        (io::line_sample_csv(&s, &["p"]), s.outside, s.rows.len())
    };
    if total == 0 {
        return Err(Failure::Runtime(Error::Data("sample line lies outside the mesh".into())));
    }
    if outside > 0 {
        log::warn!("{outside} of {points} sample points lie outside the mesh");
    }
    match out {
        Some(path) => write(path, csv)?,
        None => print!("{csv}"),
    }
    Ok(())
}

fn profile_report(run_dir: &Path, json: bool) -> Result<(), Failure> {
    let path = run_dir.join("profile.json");
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let data: ProfileData = serde_json::from_str(&text).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    let report = ProfileReport::from_data(&data).map_err(Error::from)?;
    if json {
        println!("{}", serde_json::to_string_pretty(&report).map_err(|e| Error::Data(e.to_string()))?);
    } else {
        print!("{}", report.render());
    }
    Ok(())
}
