//! Experiment runners. Each writes its tables into the output directory and
//! finishes with `meta.json`.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use rte_core::analysis::{
    fit_order, local_errors, martingale_check, mean_and_se, strong_error, write_local_errors_csv, ErrorReport,
    LocalErrorSample, ReferenceSolver, SolverFamily, StrongErrorSetup,
};
use rte_core::exact::{check_hook_consistency, exact_trajectory, reference_trajectory};
use rte_core::model::RteModel;
use rte_core::par::{map_replications, with_threads, Execution};
use rte_core::poisson::PathBundle;
use rte_core::stepper::{solve_trajectory, step_count};
use serde::Serialize;

use crate::config::{resolve_seed, validate, Experiment, Finding, RunConfig, SeedSource, SCHEMA_VERSION, SEED_ENV};
use crate::CliError;

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    pub seed: Option<u64>,
    /// Value of `RTE_SIM_SEED`, if set.
    pub env_seed: Option<String>,
    /// Worker count; `None` uses the available parallelism.
    pub threads: Option<usize>,
    pub timestamp: bool,
    pub output: Option<PathBuf>,
}

impl RunOptions {
    /// Options as the binary sees them: seed from the environment, timestamp on.
    pub fn from_env() -> Self {
        RunOptions {
            env_seed: std::env::var(SEED_ENV).ok(),
            timestamp: true,
            ..RunOptions::default()
        }
    }
}

#[derive(Clone, Debug)]
pub struct RunSummary {
    pub output: PathBuf,
    pub files: Vec<String>,
    pub findings: Vec<Finding>,
    pub seed: u64,
    pub config_hash: String,
}

#[derive(Serialize)]
struct Meta<'a> {
    schema: u32,
    tool: &'static str,
    version: &'static str,
    experiment: &'static str,
    config_sha256: &'a str,
    seed: u64,
    seed_source: SeedSource,
    model: &'a str,
    files: &'a [String],
    findings: &'a [Finding],
    #[serde(skip_serializing_if = "Option::is_none")]
    unix_time: Option<u64>,
}

struct Output {
    dir: PathBuf,
    header: String,
    files: Vec<String>,
}

impl Output {
    fn write(&mut self, name: &str, body: impl FnOnce(&mut Vec<u8>) -> Result<(), CliError>) -> Result<(), CliError> {
        let mut buf = Vec::new();
        buf.extend_from_slice(self.header.as_bytes());
        body(&mut buf)?;
        self.write_raw(name, &buf)
    }

    fn write_raw(&mut self, name: &str, bytes: &[u8]) -> Result<(), CliError> {
        let path = self.dir.join(name);
        let io = |e| CliError::Io {
            path: path.clone(),
            source: e,
        };
        let mut w = BufWriter::new(File::create(&path).map_err(io)?);
        w.write_all(bytes).map_err(io)?;
        w.flush().map_err(io)?;
        self.files.push(name.to_string());
        Ok(())
    }
}

fn io_err(e: std::io::Error) -> CliError {
    CliError::Config(format!("write failed: {e}"))
}

/// Validates `config`, runs `experiment` and writes its outputs.
pub fn run(config: &RunConfig, experiment: Experiment, opts: &RunOptions) -> Result<RunSummary, CliError> {
    let findings = validate(config, experiment);
    let errors: Vec<String> = findings.iter().filter(|f| f.is_error()).map(|f| f.message.clone()).collect();
    if !errors.is_empty() {
        return Err(CliError::Config(errors.join("; ")));
    }
    let (seed, seed_source) = resolve_seed(opts.seed, opts.env_seed.as_deref(), config.seed)?;
    let config_hash = config.hash(experiment, seed);
    let dir = opts.output.clone().unwrap_or_else(|| config.output.clone());
    fs::create_dir_all(&dir).map_err(|e| CliError::Io {
        path: dir.clone(),
        source: e,
    })?;
    let model = config.build_model()?;
    let mut out = Output {
        dir: dir.clone(),
        header: format!("# rte-sim {VERSION} experiment={experiment} config_sha256={config_hash} seed={seed}\n"),
        files: Vec::new(),
    };

    with_threads(opts.threads, || match experiment {
        Experiment::Simulate => simulate(config, &model, seed, &mut out),
        Experiment::Converge => converge(config, &model, seed, &mut out),
        Experiment::LocalError => local_error(config, &model, seed, &mut out),
        Experiment::Diagnose => diagnose(config, &model, seed, &mut out),
    })??;

    let unix_time = opts
        .timestamp
        .then(|| SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0));
    let mut files = out.files.clone();
    files.push("meta.json".into());
    let meta = Meta {
        schema: SCHEMA_VERSION,
        tool: "rte-sim",
        version: VERSION,
        experiment: experiment.name(),
        config_sha256: &config_hash,
        seed,
        seed_source,
        model: model.name(),
        files: &files,
        findings: &findings,
        unix_time,
    };
    let mut json = serde_json::to_vec_pretty(&meta).expect("meta serializes");
    json.push(b'\n');
    out.write_raw("meta.json", &json)?;

    Ok(RunSummary {
        output: dir,
        files,
        findings,
        seed,
        config_hash,
    })
}

fn variant_name(fam: &SolverFamily, h: f64) -> String {
    format!("{}-h{h}", fam.label)
}

fn simulate(config: &RunConfig, model: &RteModel, seed: u64, out: &mut Output) -> Result<(), CliError> {
    let families = config.families()?;
    let p = model.jump_count();
    let rep = config.replication;
    let mut diag = Vec::new();
    writeln!(diag, "variant,steps,phi3_clamps,negativity_resets,picard_iterations,max_picard_iterations").map_err(io_err)?;
    let mut finest = f64::INFINITY;
    for fam in &families {
        for cfg in fam.configs() {
            finest = finest.min(cfg.h);
            let mut paths = PathBundle::new(seed, rep, p);
            let traj = solve_trajectory(model, &cfg, &mut paths, &config.x0, config.horizon)?;
            let name = variant_name(fam, cfg.h);
            out.write(&format!("traj_{name}.csv"), |w| traj.write_csv(w).map_err(io_err))?;
            let d = &traj.diagnostics;
            writeln!(
                diag,
                "{name},{},{},{},{},{}",
                traj.step_count(),
                d.phi3_clamps,
                d.negativity_resets,
                d.picard_iterations,
                d.max_picard_iterations
            )
            .map_err(io_err)?;
        }
    }
    out.write("diagnostics.csv", |w| {
        w.extend_from_slice(&diag);
        Ok(())
    })?;

    let mut paths = PathBundle::new(seed, rep, p);
    match config.reference_solver(model)? {
        ReferenceSolver::Exact if model.analytic().is_some() => {
            let exact = exact_trajectory(model, &mut paths, &config.x0, config.horizon)?;
            let grid = config.sample_grid.unwrap_or(finest);
            out.write("traj_exact.csv", |w| Ok(exact.write_sampled_csv(grid, w)?))?;
            out.write("jumps_exact.csv", |w| exact.write_jumps_csv(w).map_err(io_err))?;
            out.write("segments_exact.csv", |w| exact.write_segments_csv(w).map_err(io_err))?;
        }
        ReferenceSolver::Exact => {}
        ReferenceSolver::Fine(spec) => {
            let traj = reference_trajectory(model, &spec, &mut paths, &config.x0, config.horizon)?;
            out.write("traj_reference.csv", |w| traj.write_csv(w).map_err(io_err))?;
        }
    }
    Ok(())
}

fn converge(config: &RunConfig, model: &RteModel, seed: u64, out: &mut Output) -> Result<(), CliError> {
    let families = config.families()?;
    let mut setup = StrongErrorSetup::new(
        config.reference_solver(model)?,
        config.x0.clone(),
        config.horizon,
        config.replications,
        seed,
    );
    setup.norm = config.norm;
    setup.metric = config.metric;
    setup.execution = Execution::Parallel;
    let reports = strong_error(model, &setup, &families)?;

    out.write("report.csv", |w| write_combined_report(&reports, w))?;
    for r in &reports {
        out.write(&format!("report_{}.csv", r.label), |w| r.write_csv(w).map_err(io_err))?;
    }
    out.write("fit.txt", |w| {
        for r in &reports {
            match fit_order(r) {
                Ok(f) => writeln!(w, "{} slope={} intercept={} r2={}", r.label, f.slope, f.intercept, f.r_squared),
                Err(e) => writeln!(w, "{} fit unavailable: {e}", r.label),
            }
            .map_err(io_err)?;
        }
        Ok(())
    })
}

fn write_combined_report(reports: &[ErrorReport], w: &mut Vec<u8>) -> Result<(), CliError> {
    writeln!(w, "solver,theta,quadrature,h,mean_abs_error,std_error,M").map_err(io_err)?;
    for r in reports {
        for row in &r.rows {
            writeln!(
                w,
                "{},{},{},{},{},{},{}",
                r.label, r.theta, r.quadrature, row.h, row.mean_abs_error, row.std_error, row.replications
            )
            .map_err(io_err)?;
        }
    }
    Ok(())
}

fn local_error(config: &RunConfig, model: &RteModel, seed: u64, out: &mut Output) -> Result<(), CliError> {
    let families = config.families()?;
    let p = model.jump_count();
    let configs: Vec<(String, rte_core::SolverConfig)> = families
        .iter()
        .flat_map(|fam| fam.configs().map(move |c| (variant_name(fam, c.h), c)))
        .collect();

    // samples[replication][variant] -> all steps of that variant
    let per_rep = map_replications(Execution::Parallel, config.replications, |i| {
        let rep = config.replication + i;
        let mut paths = PathBundle::new(seed, rep, p);
        let exact = exact_trajectory(model, &mut paths, &config.x0, config.horizon)?;
        configs
            .iter()
            .map(|(_, cfg)| {
                let steps = step_count(config.horizon, cfg.h)?;
                (0..steps).map(|n| local_errors(model, &exact, cfg, n)).collect()
            })
            .collect::<rte_core::Result<Vec<Vec<LocalErrorSample>>>>()
    });
    let per_rep = per_rep.into_iter().collect::<rte_core::Result<Vec<_>>>()?;

    for (v, (name, _)) in configs.iter().enumerate() {
        out.write(&format!("local_{name}.csv"), |w| write_local_errors_csv(&per_rep[0][v], w).map_err(io_err))?;
    }
    out.write("local_summary.csv", |w| {
        writeln!(w, "variant,h,samples,mean_L_abs,se_L_abs,mean_K_abs,se_K_abs,steps_with_jumps").map_err(io_err)?;
        for (v, (name, cfg)) in configs.iter().enumerate() {
            let all: Vec<&LocalErrorSample> = per_rep.iter().flat_map(|r| r[v].iter()).collect();
            let n = all.len() as u64;
            let (ml, sl) = mean_and_se(all.iter().map(|s| s.l_abs), n);
            let (mk, sk) = mean_and_se(all.iter().map(|s| s.k_abs), n);
            let jumps = all.iter().filter(|s| s.jumps > 0).count();
            writeln!(w, "{name},{},{n},{ml},{sl},{mk},{sk},{jumps}", cfg.h).map_err(io_err)?;
        }
        Ok(())
    })
}

fn diagnose(config: &RunConfig, model: &RteModel, seed: u64, out: &mut Output) -> Result<(), CliError> {
    let obs = config.observable(model.dim())?;
    let probes: Vec<(f64, Vec<f64>)> = [0.01, 0.1, 0.5, 1.0]
        .iter()
        .map(|&f| (f * config.horizon, config.x0.clone()))
        .collect();
    let hook_residual = check_hook_consistency(model, &probes)?;
    let s = martingale_check(
        model,
        &obs,
        &config.x0,
        config.horizon,
        config.replications,
        seed,
        Execution::Parallel,
    )?;
    out.write("diagnose.csv", |w| {
        let rows: [(&str, String); 12] = [
            ("observable", obs.name.clone()),
            ("M", s.replications.to_string()),
            ("mean", s.mean.to_string()),
            ("std_error", s.std_error.to_string()),
            ("z", s.z.to_string()),
            ("second_moment_lhs", s.second_moment_lhs.to_string()),
            ("lhs_std_error", s.lhs_std_error.to_string()),
            ("second_moment_rhs", s.second_moment_rhs.to_string()),
            ("rhs_std_error", s.rhs_std_error.to_string()),
            ("second_moment_z", s.second_moment_z().to_string()),
            ("hook_residual", hook_residual.to_string()),
            ("rate_clamp_events", model.clamp_events().to_string()),
        ];
        writeln!(w, "quantity,value").map_err(io_err)?;
        for (k, v) in rows {
            writeln!(w, "{k},{v}").map_err(io_err)?;
        }
        Ok(())
    })
}

/// Reads a CSV written by this tool, skipping `#` comment lines.
pub fn read_table(path: &Path) -> Result<Vec<Vec<String>>, CliError> {
    let text = fs::read_to_string(path).map_err(|e| CliError::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    Ok(text
        .lines()
        .filter(|l| !l.starts_with('#') && !l.is_empty())
        .map(|l| l.split(',').map(str::to_string).collect())
        .collect())
}
