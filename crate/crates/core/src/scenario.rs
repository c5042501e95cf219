//! Scenario configs: one JSON document describing the plant, solver knobs,
//! simulation grid, certification weight, and initial data. Parsing walks
//! the document by hand so schema errors can name the exact field path.

use crate::gains::{Plant, PlantError};
use crate::kernels::KernelSolveOptions;
use crate::linops::{sym_eig_bounds, Mat, Vector};
use crate::sim::SimConfig;
use crate::transform::grid_x;
use serde_json::{Map, Value};
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("cannot read config: {0}")]
    Io(#[from] std::io::Error),
    #[error("config is not valid JSON: {0}")]
    Parse(String),
    #[error("config field `{path}`: {message}")]
    Schema { path: String, message: String },
    #[error(transparent)]
    Plant(#[from] PlantError),
}

fn schema(path: impl Into<String>, message: impl Into<String>) -> ScenarioError {
    ScenarioError::Schema {
        path: path.into(),
        message: message.into(),
    }
}

/// Initial condition for the evolved field.
#[derive(Debug, Clone, PartialEq)]
pub enum InitField {
    Zero,
    GaussBump {
        center: f64,
        width: f64,
        amplitude: f64,
    },
    Samples(Vec<f64>),
}

#[derive(Debug, Clone)]
pub struct Scenario {
    pub plant: Plant,
    pub kernel: KernelSolveOptions,
    pub sim: SimConfig,
    pub q: Mat,
    pub envelope_tol: f64,
    pub x0: Vector,
    pub init: InitField,
}

fn as_obj<'a>(v: &'a Value, path: &str) -> Result<&'a Map<String, Value>, ScenarioError> {
    v.as_object()
        .ok_or_else(|| schema(path, "expected an object"))
}

fn get_f64(m: &Map<String, Value>, path: &str, key: &str) -> Result<Option<f64>, ScenarioError> {
    match m.get(key) {
        None => Ok(None),
        Some(v) => v
            .as_f64()
            .map(Some)
            .ok_or_else(|| schema(format!("{path}.{key}"), "expected a number")),
    }
}

fn req_f64(m: &Map<String, Value>, path: &str, key: &str) -> Result<f64, ScenarioError> {
    get_f64(m, path, key)?.ok_or_else(|| schema(format!("{path}.{key}"), "missing"))
}

fn get_usize(
    m: &Map<String, Value>,
    path: &str,
    key: &str,
) -> Result<Option<usize>, ScenarioError> {
    match m.get(key) {
        None => Ok(None),
        Some(v) => v
            .as_u64()
            .map(|u| Some(u as usize))
            .ok_or_else(|| schema(format!("{path}.{key}"), "expected a nonnegative integer")),
    }
}

fn number_list(v: &Value, path: &str) -> Result<Vec<f64>, ScenarioError> {
    let arr = v
        .as_array()
        .ok_or_else(|| schema(path, "expected an array of numbers"))?;
    arr.iter()
        .enumerate()
        .map(|(i, x)| {
            x.as_f64()
                .ok_or_else(|| schema(format!("{path}[{i}]"), "expected a number"))
        })
        .collect()
}

/// Row-major nested arrays -> matrix; all rows must have equal length.
fn matrix(v: &Value, path: &str) -> Result<Mat, ScenarioError> {
    let rows = v
        .as_array()
        .ok_or_else(|| schema(path, "expected a nested array (matrix rows)"))?;
    if rows.is_empty() {
        return Err(schema(path, "matrix has no rows"));
    }
    let mut data: Vec<Vec<f64>> = Vec::with_capacity(rows.len());
    for (i, row) in rows.iter().enumerate() {
        data.push(number_list(row, &format!("{path}[{i}]"))?);
    }
    let ncols = data[0].len();
    if ncols == 0 {
        return Err(schema(format!("{path}[0]"), "matrix row is empty"));
    }
    if let Some(i) = data.iter().position(|r| r.len() != ncols) {
        return Err(schema(
            format!("{path}[{i}]"),
            format!("row has {} entries, expected {ncols}", data[i].len()),
        ));
    }
    Ok(Mat::from_fn(data.len(), ncols, |i, j| data[i][j]))
}

impl Scenario {
    pub fn load(path: &Path) -> Result<Scenario, ScenarioError> {
        let text = std::fs::read_to_string(path)?;
        Scenario::from_json(&text)
    }

    pub fn from_json(text: &str) -> Result<Scenario, ScenarioError> {
        let root: Value =
            serde_json::from_str(text).map_err(|e| ScenarioError::Parse(e.to_string()))?;
        let root = as_obj(&root, "(root)")?;

        let plant_v = root
            .get("plant")
            .ok_or_else(|| schema("plant", "missing"))?;
        let pm = as_obj(plant_v, "plant")?;
        let a = matrix(
            pm.get("a").ok_or_else(|| schema("plant.a", "missing"))?,
            "plant.a",
        )?;
        let b = matrix(
            pm.get("b").ok_or_else(|| schema("plant.b", "missing"))?,
            "plant.b",
        )?;
        let k = matrix(
            pm.get("k").ok_or_else(|| schema("plant.k", "missing"))?,
            "plant.k",
        )?;
        let l = req_f64(pm, "plant", "l")?;
        let lambda = req_f64(pm, "plant", "lambda")?;
        let plant = Plant::new(a, b, k, l, lambda)?;
        let n_ode = plant.n();

        let mut kernel = KernelSolveOptions::default();
        if let Some(kv) = root.get("kernel") {
            let km = as_obj(kv, "kernel")?;
            if let Some(d) = get_usize(km, "kernel", "degree_cap")? {
                kernel.degree_cap = d;
            }
            if let Some(t) = get_f64(km, "kernel", "tol")? {
                kernel.tol = t;
            }
            if let Some(mi) = get_usize(km, "kernel", "max_iter")? {
                kernel.max_iter = mi;
            }
        }

        let (mut n, mut dt, mut t_final, mut record_every) = (128usize, 1e-3, 10.0, 10usize);
        if let Some(sv) = root.get("sim") {
            let sm = as_obj(sv, "sim")?;
            if let Some(v) = get_usize(sm, "sim", "n")? {
                n = v;
            }
            if let Some(v) = get_f64(sm, "sim", "dt")? {
                dt = v;
            }
            if let Some(v) = get_f64(sm, "sim", "t_final")? {
                t_final = v;
            }
            if let Some(v) = get_usize(sm, "sim", "record_every")? {
                record_every = v;
            }
        }
        let sim = SimConfig::new(n, dt, t_final, record_every)
            .map_err(|e| schema("sim", e.to_string()))?;

        let mut q = Mat::identity(n_ode, n_ode);
        let mut envelope_tol = 0.05;
        if let Some(cv) = root.get("certify") {
            let cm = as_obj(cv, "certify")?;
            if let Some(qv) = cm.get("q") {
                q = matrix(qv, "certify.q")?;
                if q.nrows() != n_ode || q.ncols() != n_ode {
                    return Err(schema(
                        "certify.q",
                        format!("expected {n_ode}x{n_ode} to match the plant"),
                    ));
                }
                let q_min = sym_eig_bounds(&q)
                    .map_err(|e| schema("certify.q", e.to_string()))?
                    .0;
                if q_min <= 0.0 {
                    return Err(schema("certify.q", "not positive definite"));
                }
            }
            if let Some(t) = get_f64(cm, "certify", "envelope_tol")? {
                if !(t >= 0.0) {
                    return Err(schema("certify.envelope_tol", "must be nonnegative"));
                }
                envelope_tol = t;
            }
        }

        let mut x0 = Vector::zeros(n_ode);
        let mut init = InitField::Zero;
        if let Some(iv) = root.get("init") {
            let im = as_obj(iv, "init")?;
            if let Some(xv) = im.get("x0") {
                let vals = number_list(xv, "init.x0")?;
                if vals.len() != n_ode {
                    return Err(schema(
                        "init.x0",
                        format!("expected {n_ode} entries, got {}", vals.len()),
                    ));
                }
                x0 = Vector::from_vec(vals);
            }
            if let Some(uv) = im.get("u0") {
                init = parse_init(uv, sim.n)?;
            }
        }

        Ok(Scenario {
            plant,
            kernel,
            sim,
            q,
            envelope_tol,
            x0,
            init,
        })
    }

    /// Materializes the initial field on the simulation grid (N+1 samples).
    pub fn initial_field(&self) -> Vec<f64> {
        match &self.init {
            InitField::Zero => vec![0.0; self.sim.n + 1],
            InitField::GaussBump {
                center,
                width,
                amplitude,
            } => (0..=self.sim.n)
                .map(|j| {
                    let x = grid_x(self.plant.l(), self.sim.n, j);
                    let z = (x - center) / width;
                    amplitude * (-z * z).exp()
                })
                .collect(),
            InitField::Samples(s) => s.clone(),
        }
    }

    /// Applies a JSON tolerance overlay (same shape as the config subsections;
    /// only solver and certification tolerances may be overridden).
    pub fn apply_overlay(&mut self, text: &str) -> Result<(), ScenarioError> {
        let root: Value =
            serde_json::from_str(text).map_err(|e| ScenarioError::Parse(e.to_string()))?;
        let root = as_obj(&root, "(overlay)")?;
        if let Some(kv) = root.get("kernel") {
            let km = as_obj(kv, "kernel")?;
            if let Some(d) = get_usize(km, "kernel", "degree_cap")? {
                self.kernel.degree_cap = d;
            }
            if let Some(t) = get_f64(km, "kernel", "tol")? {
                self.kernel.tol = t;
            }
            if let Some(mi) = get_usize(km, "kernel", "max_iter")? {
                self.kernel.max_iter = mi;
            }
        }
        if let Some(t) = get_f64(root, "(overlay)", "envelope_tol")? {
            self.envelope_tol = t;
        }
        Ok(())
    }

    /// Rebuilds the scenario with one swept parameter replaced.
    pub fn with_param(&self, param: &str, value: f64) -> Result<Scenario, ScenarioError> {
        let mut out = self.clone();
        match param {
            "lambda" => {
                out.plant = Plant::new(
                    self.plant.a().clone(),
                    self.plant.b().clone(),
                    self.plant.k().clone(),
                    self.plant.l(),
                    value,
                )?;
            }
            "n" => {
                let n = value as usize;
                if value.fract() != 0.0 || value < 0.0 {
                    return Err(schema("sweep.n", "expected an integer value"));
                }
                out.sim = SimConfig::new(n, self.sim.dt, self.sim.t_final, self.sim.record_every)
                    .map_err(|e| schema("sweep.n", e.to_string()))?;
                if let InitField::Samples(_) = self.init {
                    return Err(schema(
                        "sweep.n",
                        "cannot resample explicit initial samples onto a new grid",
                    ));
                }
            }
            "dt" => {
                out.sim =
                    SimConfig::new(self.sim.n, value, self.sim.t_final, self.sim.record_every)
                        .map_err(|e| schema("sweep.dt", e.to_string()))?;
            }
            other => {
                return Err(schema(
                    "sweep.param",
                    format!("unknown parameter `{other}` (expected lambda, n, or dt)"),
                ));
            }
        }
        Ok(out)
    }
}

fn parse_init(v: &Value, n: usize) -> Result<InitField, ScenarioError> {
    if let Some(s) = v.as_str() {
        return match s {
            "zero" => Ok(InitField::Zero),
            other => Err(schema(
                "init.u0",
                format!("unknown variant `{other}` (expected \"zero\", gauss_bump, or samples)"),
            )),
        };
    }
    let m = as_obj(v, "init.u0")?;
    if let Some(gv) = m.get("gauss_bump") {
        let gm = as_obj(gv, "init.u0.gauss_bump")?;
        let center = req_f64(gm, "init.u0.gauss_bump", "center")?;
        let width = req_f64(gm, "init.u0.gauss_bump", "width")?;
        let amplitude = req_f64(gm, "init.u0.gauss_bump", "amplitude")?;
        if !(width > 0.0) {
            return Err(schema("init.u0.gauss_bump.width", "must be positive"));
        }
        return Ok(InitField::GaussBump {
            center,
            width,
            amplitude,
        });
    }
    if let Some(sv) = m.get("samples") {
        let vals = number_list(sv, "init.u0.samples")?;
        if vals.len() != n + 1 {
            return Err(schema(
                "init.u0.samples",
                format!("expected {} samples for n = {n}, got {}", n + 1, vals.len()),
            ));
        }
        return Ok(InitField::Samples(vals));
    }
    Err(schema(
        "init.u0",
        "expected \"zero\", {\"gauss_bump\": ...}, or {\"samples\": [...]}",
    ))
}
