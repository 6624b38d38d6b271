//! The four subcommands. Each returns a printable summary and an exit code,
//! or a [`CliError`] whose exit code the caller uses.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use log::{info, warn};
use mesenchymal_core::characteristics::{
    constant_q_solution_grid, explicit_solution_nodes, CharError, ConstantFibre, GridDatum,
};
use mesenchymal_core::kinetic::{CellField, FibreField, KineticSolver, SimState};
use mesenchymal_core::limit::{LimitError, LimitExperiment};
use mesenchymal_core::steady::{classify_intersection, validate_patchy_network};
use mesenchymal_core::kinetic::SolverError;
use mesenchymal_core::Exec;

use crate::config::{ExactMethod, Preset, RunConfig};
use crate::output::{self, Manifest, MetricsWriter, SnapshotRecord};
use crate::specfile::{self, SteadySpec};
use crate::CliError;

/// Options shared by every subcommand.
#[derive(Clone, Debug)]
pub struct Options {
    pub config: PathBuf,
    pub out: PathBuf,
    pub seed: Option<u64>,
    pub exec: Exec,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Outcome {
    pub summary: String,
    pub exit_code: i32,
}

impl Outcome {
    fn ok(summary: String) -> Self {
        Self { summary, exit_code: 0 }
    }
}

const Q_NORM_TOL: f64 = 1e-12;

fn load(opts: &Options) -> Result<(RunConfig, String), CliError> {
    let text = fs::read_to_string(&opts.config).map_err(|e| CliError::io(&opts.config, e))?;
    let cfg = RunConfig::from_toml(&text)
        .map_err(|e| CliError::Config(format!("{}: {}", opts.config.display(), strip(e))))?;
    output::ensure_dir(&opts.out)?;
    Ok((cfg, text))
}

fn strip(e: CliError) -> String {
    match e {
        CliError::Config(m) => m,
        other => other.to_string(),
    }
}

fn seed_used(cfg: &RunConfig, opts: &Options) -> Option<u64> {
    (cfg.initial.preset == Preset::UniformNoise)
        .then(|| opts.seed.or(cfg.initial.seed))
        .flatten()
}

fn common_manifest(command: &str, cfg: &RunConfig, text: &str, opts: &Options) -> Manifest {
    let mut m = Manifest::new(command, text);
    m.set("config_path", opts.config.display());
    m.set(
        "seed",
        seed_used(cfg, opts).map_or_else(|| "none".to_string(), |s| s.to_string()),
    );
    m.set("q_normalization_tol", Q_NORM_TOL);
    m.set("singularity_guard", mesenchymal_core::characteristics::SINGULARITY_GUARD);
    m
}

struct SnapshotSink<'a> {
    dir: &'a Path,
    prefix: &'a str,
    binary: bool,
    csv: bool,
    exec: Exec,
    index: String,
    count: usize,
    last_csv: Option<String>,
}

impl<'a> SnapshotSink<'a> {
    fn new(dir: &'a Path, prefix: &'a str, cfg: &RunConfig, exec: Exec) -> Self {
        Self {
            dir,
            prefix,
            binary: cfg.output.binary,
            csv: cfg.output.csv,
            exec,
            index: String::from("index,time,file\n"),
            count: 0,
            last_csv: None,
        }
    }

    fn write_named(&mut self, stem: &str, time: f64, p: &CellField, q: &FibreField) -> Result<(), CliError> {
        if self.csv {
            let name = format!("{stem}.csv");
            let rec = SnapshotRecord::new(time, p, q, self.exec);
            output::write_text(&self.dir.join(&name), &rec.to_csv())?;
            self.last_csv = Some(name);
        }
        if self.binary {
            output::write_dump(&self.dir.join(format!("{stem}.bin")), p, time)?;
        }
        let _ = writeln!(self.index, "{},{:.16e},{stem}", self.count, time);
        self.count += 1;
        Ok(())
    }

    fn write(&mut self, time: f64, p: &CellField, q: &FibreField) -> Result<(), CliError> {
        let stem = format!("{}_{:05}", self.prefix, self.count);
        self.write_named(&stem, time, p, q)
    }

    fn finish(&self, cfg: &RunConfig, title: &str) -> Result<(), CliError> {
        output::write_text(&self.dir.join(format!("{}_index.csv", self.prefix)), &self.index)?;
        if let Some(last) = &self.last_csv {
            output::write_text(&self.dir.join("plot.gp"), &output::plot_script(last, &cfg.grid(), title))?;
        }
        Ok(())
    }
}

/// `run`: integrates the coupled system and writes snapshots and metrics.
pub fn run(opts: &Options) -> Result<Outcome, CliError> {
    let (cfg, text) = load(opts)?;
    let state = cfg.initial_state(opts.seed)?;
    let solver = KineticSolver::new(cfg.sim_params(), opts.exec);
    let mut metrics = MetricsWriter::create(&opts.out.join("metrics.csv"))?;
    let mut sink = SnapshotSink::new(&opts.out, "snap", &cfg, opts.exec);
    let mut io_error: Option<CliError> = None;
    info!(
        "run: {}x{} cells, {} bins, {} speeds, t_end = {}",
        cfg.grid.nx,
        cfg.grid.ny,
        cfg.grid.n_theta,
        cfg.speeds().len(),
        cfg.params.t_end
    );
    let result = solver.run(state, cfg.params.t_end, cfg.output.every, |s: &SimState| {
        if io_error.is_some() {
            return;
        }
        let r = sink
            .write(s.time, &s.p, &s.q)
            .and_then(|_| metrics.row(s.time, &s.invariants()));
        if let Err(e) = r {
            io_error = Some(e);
        }
        info!("t = {:.6}, step {}", s.time, s.step);
    });
    if let Some(e) = io_error {
        return Err(e);
    }
    let mut manifest = common_manifest("run", &cfg, &text, opts);
    match result {
        Ok(end) => {
            metrics.flush()?;
            sink.finish(&cfg, "mesenchymal run")?;
            let inv = end.invariants();
            manifest.set("status", "completed");
            manifest.set("final_time", end.time);
            manifest.set("steps", end.step);
            manifest.set("snapshots", sink.count);
            manifest.write(&opts.out.join("manifest.txt"))?;
            let mean_order = mean(&end.q.order_parameter());
            Ok(Outcome::ok(format!(
                "run completed: t = {}, {} steps, {} snapshots\ntotal mass {:.16e}\nq normalization [{:.16e}, {:.16e}]\nmin p {:.6e}\nmean order parameter {:.6e}\n",
                end.time, end.step, sink.count, inv.total_mass, inv.q_norm_min, inv.q_norm_max, inv.p_min, mean_order
            )))
        }
        Err(aborted) => {
            let good = &aborted.last_good;
            warn!("numerical abort; flushing last good state at t = {}", good.time);
            let csv = sink.csv;
            sink.csv = true;
            sink.binary = true;
            sink.write_named("snap_lastgood", good.time, &good.p, &good.q)?;
            sink.csv = csv;
            metrics.row(good.time, &good.invariants())?;
            metrics.flush()?;
            sink.finish(&cfg, "mesenchymal run (aborted)")?;
            manifest.set("status", "aborted");
            manifest.set("abort", &aborted.error);
            manifest.set("last_good_time", good.time);
            manifest.write(&opts.out.join("manifest.txt"))?;
            Err(CliError::Numerical(aborted.error.to_string()))
        }
    }
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len().max(1) as f64
}

fn char_error(e: CharError) -> CliError {
    match e {
        CharError::Singular { .. } => CliError::Numerical(e.to_string()),
        other => CliError::Config(other.to_string()),
    }
}

/// `exact`: evaluates the characteristic solution on the grid.
pub fn exact(opts: &Options) -> Result<Outcome, CliError> {
    let (cfg, text) = load(opts)?;
    let ex = cfg
        .exact
        .clone()
        .ok_or_else(|| CliError::Config("the `exact` command needs an [exact] section".into()))?;
    let grid = cfg.grid();
    let speeds = cfg.speeds();
    let p0 = cfg.initial_state(opts.seed)?.p;
    let qm = cfg.fibre_measure().normalized();
    let qfield = FibreField::from_measure(grid, &qm);
    let datum = GridDatum::new(&p0);
    let mu = cfg.params.mu;
    let mut sink = SnapshotSink::new(&opts.out, "exact", &cfg, opts.exec);
    let mut summary = String::from("time,total_mass\n");
    for &t in &ex.times {
        let field = match ex.method {
            ExactMethod::ConstantQ => {
                constant_q_solution_grid(&grid, t, &datum, &qm, mu, &speeds, opts.exec).map_err(char_error)?
            }
            ExactMethod::Explicit => {
                let fibre = ConstantFibre::new(qm.clone());
                let per_cell = opts.exec.map_collect(grid.cells(), |c| {
                    explicit_solution_nodes(grid.center(c), t, &datum, &fibre, mu, &speeds, ex.quad)
                });
                let cells = grid.cells();
                let mut data = vec![0.0; cells * speeds.len() * qm.n_theta()];
                for (c, vals) in per_cell.into_iter().enumerate() {
                    for (s, v) in vals.map_err(char_error)?.into_iter().enumerate() {
                        data[s * cells + c] = v;
                    }
                }
                CellField::from_data(grid, speeds.len(), qm.n_theta(), data)
                    .map_err(|e| CliError::Config(e.to_string()))?
            }
        };
        sink.write(t, &field, &qfield)?;
        let _ = writeln!(summary, "{t:.16e},{:.16e}", field.total_mass());
    }
    sink.finish(&cfg, "characteristic solution")?;
    let mut manifest = common_manifest("exact", &cfg, &text, opts);
    manifest.set("method", format!("{:?}", ex.method));
    manifest.set("quad", ex.quad);
    manifest.set("times", ex.times.len());
    manifest.write(&opts.out.join("manifest.txt"))?;
    Ok(Outcome::ok(summary))
}

/// `steady-check`: classifies an intersection or validates a patchy network.
/// `opts.config` names the spec file.
pub fn steady_check(opts: &Options) -> Result<Outcome, CliError> {
    let text = fs::read_to_string(&opts.config).map_err(|e| CliError::io(&opts.config, e))?;
    let spec = specfile::parse(&text)
        .map_err(|e| CliError::Config(format!("{}: {}", opts.config.display(), strip(e))))?;
    output::ensure_dir(&opts.out)?;
    let mut report = String::new();
    let mut kv = String::new();
    let admissible = match spec {
        SteadySpec::Intersection { spec, tolerance } => {
            let r = classify_intersection(&spec, tolerance).map_err(|e| CliError::Config(e.to_string()))?;
            report.push_str(&r.to_string());
            let list = |v: &[f64]| v.iter().map(|x| format!("{x:.16e}")).collect::<Vec<_>>().join(" ");
            let _ = writeln!(kv, "kind = intersection");
            let _ = writeln!(kv, "n = {}", r.n);
            let _ = writeln!(kv, "symmetric = {}", r.symmetric);
            let _ = writeln!(kv, "tolerance = {tolerance:e}");
            let _ = writeln!(kv, "balanced = {}", r.balanced);
            let _ = writeln!(kv, "row_sums = {}", list(&r.row_sums));
            let _ = writeln!(kv, "weighted_projection = {}", list(&r.weighted_projection));
            r.admissible
        }
        SteadySpec::Network(net) => {
            let r = validate_patchy_network(&net).map_err(|e| CliError::Config(e.to_string()))?;
            let _ = writeln!(
                report,
                "network of {} curves and {} patches: {}",
                net.curves.len(),
                net.patches.len(),
                if r.is_valid() { "admissible" } else { "inadmissible" }
            );
            let _ = writeln!(report, "  vertices checked: {}", r.vertices_checked);
            for (pos, ir) in &r.intersections {
                let _ = write!(report, "  at ({}, {}): {ir}", pos[0], pos[1]);
            }
            for v in &r.violations {
                let _ = writeln!(report, "  violation: {v}");
            }
            let _ = writeln!(kv, "kind = network");
            let _ = writeln!(kv, "tolerance = {:e}", net.tolerance);
            let _ = writeln!(kv, "vertices_checked = {}", r.vertices_checked);
            let _ = writeln!(kv, "intersections = {}", r.intersections.len());
            let _ = writeln!(kv, "violations = {}", r.violations.len());
            r.is_valid()
        }
    };
    let _ = writeln!(kv, "admissible = {admissible}");
    output::write_text(&opts.out.join("report.txt"), &report)?;
    output::write_text(&opts.out.join("report.kv"), &kv)?;
    let mut manifest = Manifest::new("steady-check", &text);
    manifest.set("spec_path", opts.config.display());
    manifest.set("admissible", admissible);
    manifest.write(&opts.out.join("manifest.txt"))?;
    Ok(Outcome { summary: report, exit_code: if admissible { 0 } else { 3 } })
}

fn limit_error(e: LimitError) -> CliError {
    match e {
        LimitError::Solver(SolverError::NumericalAbort { .. }) => CliError::Numerical(e.to_string()),
        other => CliError::Config(other.to_string()),
    }
}

/// `limit-study`: the ε ladder against the diffusion reference.
pub fn limit_study(opts: &Options) -> Result<Outcome, CliError> {
    let (cfg, text) = load(opts)?;
    let l = cfg
        .limit
        .clone()
        .ok_or_else(|| CliError::Config("the `limit-study` command needs a [limit] section".into()))?;
    let grid = cfg.grid();
    let exp = LimitExperiment {
        grid,
        q: cfg.fibre_measure(),
        mu: cfg.params.mu,
        speeds: cfg.speeds(),
        eps_list: l.eps.clone(),
        t_end: cfg.params.t_end,
        center: [l.center_x.unwrap_or(0.5 * grid.lx()), l.center_y.unwrap_or(0.5 * grid.ly())],
        width: l.width,
        mass: 1.0,
        relax_fraction: l.relax_fraction,
        splitting: cfg.sim_params().splitting,
        diffusion_cfl: l.diffusion_cfl,
    };
    let report = exp.run(opts.exec).map_err(limit_error)?;
    output::write_text(&opts.out.join("limit.csv"), &report.to_csv())?;
    output::write_text(
        &opts.out.join("limit.gp"),
        "set datafile separator ','\n\
         set terminal pngcairo size 800,560\n\
         set output 'limit.png'\n\
         set logscale xy\n\
         set xlabel 'epsilon'\n\
         set ylabel 'error'\n\
         set key left top\n\
         plot 'limit.csv' skip 1 using 1:4 with linespoints title 'L1 density', \\\n\
         \x20    '' skip 1 using 1:5 with linespoints title 'weak pairing'\n",
    )?;
    let d = report.tensor.0;
    let mut manifest = common_manifest("limit-study", &cfg, &text, opts);
    manifest.set("diffusion_tensor", format!("{:.16e} {:.16e} {:.16e}", d.xx, d.xy, d.yy));
    manifest.set("reference_rel_l1", report.reference_rel_l1);
    manifest.set("relax_fraction", l.relax_fraction);
    manifest.set("diffusion_cfl", l.diffusion_cfl);
    manifest.write(&opts.out.join("manifest.txt"))?;
    let mut s = report.to_csv();
    let _ = writeln!(s, "reference vs heat kernel (relative L1): {:.3e}", report.reference_rel_l1);
    let _ = writeln!(s, "L1 decreasing: {}", report.l1_decreasing());
    let _ = writeln!(s, "weak error decreasing: {}", report.weak_decreasing());
    Ok(Outcome::ok(s))
}
