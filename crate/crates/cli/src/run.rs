//! Subcommand implementations. Every artifact starts with the same metadata
//! record, so a file alone is enough to reproduce it.

use std::fs;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};

use affine_lab::noise::{NoiseGenerator, TimeGrid, RNG_ID};
use affine_lab::sde::{AffineScheme, Decomposition, PathBundle, ReactantMode, SdeError};
use affine_lab::transform::{self, TransformError};
use affine_lab::validate::{
    check_affine_formula, check_generator_catalog, check_moments, fluctuation_experiment,
    fluctuation_rate_check, run_paths, sc_semigroup_check, uniqueness_experiment, ExperimentReport,
    GeneratorKind, MonteCarlo, ValidateError,
};
use affine_lab::AdmissibleParams;
use serde_json::{json, Value};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::config::{Check, ConfigError, Format, Kind, Mode, RunConfig, System};

pub const ARTIFACT_VERSION: &str = concat!("affine-lab/", env!("CARGO_PKG_VERSION"));

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    Transform,
    Simulate,
    Validate,
    Limit,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::Transform => "transform",
            Command::Simulate => "simulate",
            Command::Validate => "validate",
            Command::Limit => "limit",
        }
    }
}

#[derive(Debug, Error)]
pub enum RunError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("limit requires beta22 < 0 (mean-reverting second coordinate), got beta22 = {0}")]
    Beta22(f64),
    #[error(transparent)]
    Transform(#[from] TransformError),
    #[error(transparent)]
    Sde(#[from] SdeError),
    #[error(transparent)]
    Validate(#[from] ValidateError),
    #[error("writing {path}: {source}")]
    Io { path: PathBuf, source: io::Error },
}

/// What a run produced.
#[derive(Debug, Default)]
pub struct Outcome {
    pub files: Vec<PathBuf>,
    pub reports: Vec<ExperimentReport>,
}

impl Outcome {
    pub fn pass(&self) -> bool {
        self.reports.iter().all(|r| r.pass)
    }

    /// `report: row` for the first failing row, if any.
    pub fn first_failure(&self) -> Option<String> {
        self.reports.iter().find_map(|r| {
            r.first_failure().map(|row| {
                format!(
                    "{}: {} (predicted {}, observed {}, deviation {:e} > tolerance {:e})",
                    r.name, row.quantity, row.predicted, row.observed, row.deviation, row.tolerance
                )
            })
        })
    }
}

/// Runs `command`. Table output goes to `log`; artifacts go under `out`.
pub fn run(
    command: Command,
    cfg: &RunConfig,
    out: &Path,
    workers: Option<usize>,
    log: &mut dyn Write,
) -> Result<Outcome, RunError> {
    let params = cfg.admissible()?;
    if command == Command::Limit && !(params.beta22() < 0.0) {
        return Err(RunError::Beta22(params.beta22()));
    }
    fs::create_dir_all(out).map_err(|source| RunError::Io {
        path: out.into(),
        source,
    })?;
    let mut ctx = Ctx {
        cfg,
        params,
        out,
        workers,
        meta: metadata(command, cfg),
        outcome: Outcome::default(),
    };
    match command {
        Command::Transform => ctx.transform()?,
        Command::Simulate => ctx.simulate()?,
        Command::Validate => ctx.validate(log)?,
        Command::Limit => ctx.limit(log)?,
    }
    if cfg.output.formats.contains(&Format::Json) {
        let files: Vec<String> = ctx
            .outcome
            .files
            .iter()
            .map(|p| {
                p.file_name()
                    .unwrap_or_default()
                    .to_string_lossy()
                    .into_owned()
            })
            .collect();
        let manifest = json!({
            "metadata": ctx.meta,
            "config": cfg,
            "files": files,
            "pass": ctx.outcome.pass(),
        });
        ctx.write_json("run.json", &manifest)?;
    }
    Ok(ctx.outcome)
}

fn metadata(command: Command, cfg: &RunConfig) -> Value {
    let digest = Sha256::digest(serde_json::to_vec(cfg).expect("config serializes"));
    let hex = digest
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect::<String>();
    json!({
        "artifact_version": ARTIFACT_VERSION,
        "command": command.name(),
        "config_digest": hex,
        "seed": cfg.mc.seed,
        "dt": cfg.grid.dt,
        "eps": cfg.mc.eps,
        "u_bound": cfg.mc.u_bound,
        "rng": RNG_ID,
    })
}

struct Ctx<'a> {
    cfg: &'a RunConfig,
    params: AdmissibleParams,
    out: &'a Path,
    workers: Option<usize>,
    meta: Value,
    outcome: Outcome,
}

impl Ctx<'_> {
    fn mc(&self) -> MonteCarlo {
        let c = &self.cfg.mc;
        MonteCarlo {
            n_paths: c.n_paths,
            seed: c.seed,
            dt: self.cfg.grid.dt,
            eps: c.eps,
            u_bound: c.u_bound,
            workers: self.workers,
        }
    }

    fn csv_enabled(&self) -> bool {
        self.cfg.output.formats.contains(&Format::Csv)
    }

    fn json_enabled(&self) -> bool {
        self.cfg.output.formats.contains(&Format::Json)
    }

    fn create(&mut self, name: &str) -> Result<(PathBuf, BufWriter<fs::File>), RunError> {
        let path = self.out.join(name);
        let f = fs::File::create(&path).map_err(|source| RunError::Io {
            path: path.clone(),
            source,
        })?;
        self.outcome.files.push(path.clone());
        Ok((path, BufWriter::new(f)))
    }

    /// Writes a CSV whose first lines are `# key: value` metadata comments.
    fn write_csv(
        &mut self,
        name: &str,
        body: impl FnOnce(&mut dyn Write) -> io::Result<()>,
    ) -> Result<(), RunError> {
        let (path, mut w) = self.create(name)?;
        let meta = self
            .meta
            .as_object()
            .expect("metadata is an object")
            .clone();
        let res = (|| {
            for (k, v) in &meta {
                match v {
                    Value::String(s) => writeln!(w, "# {k}: {s}")?,
                    other => writeln!(w, "# {k}: {other}")?,
                }
            }
            body(&mut w)?;
            w.flush()
        })();
        res.map_err(|source| RunError::Io { path, source })
    }

    fn write_json(&mut self, name: &str, value: &Value) -> Result<(), RunError> {
        let (path, mut w) = self.create(name)?;
        let text = serde_json::to_string_pretty(value).expect("JSON value serializes");
        writeln!(w, "{text}")
            .and_then(|_| w.flush())
            .map_err(|source| RunError::Io { path, source })
    }

    fn record(&mut self, report: ExperimentReport, log: &mut dyn Write) -> Result<(), RunError> {
        let _ = write!(log, "{}", report.table());
        let _ = writeln!(log, "  ({:.2?})", report.runtime);
        if self.json_enabled() {
            let name = format!("report_{}.json", report.name);
            let value = json!({ "metadata": self.meta, "report": report });
            self.write_json(&name, &value)?;
        }
        self.outcome.reports.push(report);
        Ok(())
    }

    fn transform(&mut self) -> Result<(), RunError> {
        let grid = TimeGrid::new(self.cfg.grid.t_max, self.cfg.grid.dt)
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        let times = grid.times();
        for (i, &u) in self.cfg.transform.u_list.iter().enumerate() {
            let sol = transform::solve_transform(&self.params, u, &times, self.cfg.transform.tol)?;
            if self.csv_enabled() {
                let u_line = format!("# u: {u}\n");
                self.write_csv(&format!("transform_u{i}.csv"), |w| {
                    w.write_all(u_line.as_bytes())?;
                    sol.write_csv(w)
                })?;
            }
        }
        Ok(())
    }

    fn simulate(&mut self) -> Result<(), RunError> {
        let s = &self.cfg.simulate;
        let grid = TimeGrid::new(self.cfg.grid.t_max, self.cfg.grid.dt)
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        let mut mc = self.mc();
        mc.n_paths = s.n_paths.max(2);
        let p = &self.params;
        let scheme = AffineScheme::new(p, mc.eps)?;
        let generator = NoiseGenerator::new(p.m(), p.mu(), grid, 3, mc.u_bound, mc.eps)
            .map_err(ValidateError::from)?;
        let mode = match s.mode {
            Mode::Single => ReactantMode::Single,
            Mode::Pair => ReactantMode::Pair(
                self.cfg
                    .limit
                    .decomposition
                    .unwrap_or_else(|| Decomposition::positive_parts(p)),
            ),
        };
        let (paths, _) = run_paths(&mc, &generator, |noise| -> Result<PathBundle, SdeError> {
            match s.system {
                System::Affine => scheme.simulate_affine(s.x0, s.z0[0], noise),
                System::Catalytic => scheme.simulate_catalytic(s.x0, s.z0[0], s.l, noise),
                System::Reactant => {
                    let y0 = [s.theta + s.z0[0], s.theta + s.z0[1]];
                    scheme.simulate_reactant(mode, s.theta, s.x0, y0, noise)
                }
                System::Limit => {
                    let z = match mode {
                        ReactantMode::Single => s.z0[0],
                        ReactantMode::Pair(_) => s.z0[0] - s.z0[1],
                    };
                    scheme.simulate_limit(mode, s.x0, z, noise)
                }
            }
        })?;
        let paths: Vec<PathBundle> = paths.into_iter().take(s.n_paths).collect();
        if self.csv_enabled() {
            self.write_csv("paths.csv", |w| {
                writeln!(w, "{}", paths[0].csv_header())?;
                for (i, b) in paths.iter().enumerate() {
                    b.write_csv_rows(&mut *w, i)?;
                }
                Ok(())
            })?;
        }
        Ok(())
    }

    fn validate(&mut self, log: &mut dyn Write) -> Result<(), RunError> {
        let v = &self.cfg.validate;
        let p = self.params.clone();
        let mc = self.mc();
        for check in &v.checks {
            match check {
                Check::Semigroup => {
                    let [r, t] = v.semigroup_rt;
                    let rep = timed(|| sc_semigroup_check(&p, r, t, &v.u_list, v.tol))?;
                    self.record(rep, log)?;
                }
                Check::AffineFormula => {
                    let rep = timed(|| {
                        check_affine_formula(&p, v.x0[0], v.x0[1], &v.t_list, &v.u_list, &mc)
                    })?;
                    self.record(rep, log)?;
                }
                Check::Moments => {
                    let rep = timed(|| check_moments(&p, v.x0[0], v.x0[1], &v.t_list, &mc))?;
                    self.record(rep, log)?;
                }
                Check::Uniqueness => {
                    let [a, b] = v.uniqueness_x0;
                    let rep = timed(|| uniqueness_experiment(&p, a, b, self.cfg.grid.t_max, &mc))?;
                    self.record(rep, log)?;
                }
                Check::Generator => {
                    let funcs = self.cfg.generator_functions()?;
                    let g = &v.generator;
                    for &kind in &g.kinds {
                        let gk = match kind {
                            Kind::Affine => GeneratorKind::Affine,
                            Kind::Cbi => GeneratorKind::Cbi,
                            Kind::Catalytic => GeneratorKind::Catalytic { l: g.l },
                        };
                        for (i, &state) in g.states.iter().enumerate() {
                            let mut rep = timed(|| {
                                check_generator_catalog(&p, state, &funcs, g.delta_t, &mc, gk)
                            })?;
                            rep.name = format!("{}_s{i}", rep.name);
                            self.record(rep, log)?;
                        }
                    }
                }
            }
        }
        Ok(())
    }

    fn limit(&mut self, log: &mut dyn Write) -> Result<(), RunError> {
        let l = &self.cfg.limit;
        let p = self.params.clone();
        let mc = self.mc();
        let t_max = self.cfg.grid.t_max;
        for &m in &l.modes {
            let (mode, label) = match m {
                Mode::Single => (ReactantMode::Single, "single"),
                Mode::Pair => (
                    ReactantMode::Pair(
                        l.decomposition
                            .unwrap_or_else(|| Decomposition::positive_parts(&p)),
                    ),
                    "pair",
                ),
            };
            let mut rep = timed(|| {
                fluctuation_experiment(&p, mode, &l.theta_ladder, l.x0, l.z0, t_max, &mc)
            })?;
            rep.name = format!("{}_{label}", rep.name);
            if self.csv_enabled() {
                let e = rep.extra.get("e_theta").cloned().unwrap_or(Value::Null);
                self.write_csv(&format!("e_theta_{label}.csv"), |w| {
                    writeln!(w, "theta,e_theta")?;
                    for row in e.as_array().into_iter().flatten() {
                        let theta = row["theta"].as_f64().unwrap_or(f64::NAN);
                        let v = row["e"].as_f64().unwrap_or(f64::NAN);
                        writeln!(
                            w,
                            "{},{}",
                            affine_lab::io::fmt_f64(theta),
                            affine_lab::io::fmt_f64(v)
                        )?;
                    }
                    Ok(())
                })?;
            }
            self.record(rep, log)?;
            if let Some(tol) = l.rate_rel_tol {
                let mut rep = timed(|| {
                    fluctuation_rate_check(&p, mode, &l.theta_ladder, l.x0, l.z0, t_max, &mc, tol)
                })?;
                rep.name = format!("{}_{label}", rep.name);
                self.record(rep, log)?;
            }
        }
        Ok(())
    }
}

fn timed(
    f: impl FnOnce() -> Result<ExperimentReport, ValidateError>,
) -> Result<ExperimentReport, ValidateError> {
    let start = std::time::Instant::now();
    let mut r = f()?;
    r.runtime = start.elapsed();
    Ok(r)
}
