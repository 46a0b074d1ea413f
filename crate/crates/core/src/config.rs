//! Run configuration for the `rzoro` command line tool.
//!
//! A configuration is a TOML document; every table and key is optional and
//! unknown keys are rejected. Individual keys can be overridden with dotted
//! paths, e.g. `problem.sigma=0.1` or `algo.nominal.kkt_tol=1e-8`.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Mat;
use crate::model::TubeOcp;
use crate::nominal::NominalSolveOptions;
use crate::problems::{build_problem, ProblemParams};
use crate::tube::{StageWeight, StageWeights, DEFAULT_BARRIER_CLAMP, DEFAULT_SIRO_BACKOFF_FLOOR};
use crate::zoro::{AlgoOptions, InnerMode, NoiseMode, WeightMode};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Algorithm {
    /// Nominal problem only, no backoffs.
    Nominal,
    /// Constant weights, gains frozen at `algo.zoro_gain`.
    Zoro,
    RiccatiZoroConstant,
    RiccatiZoroAdaptive,
    RiccatiZoroSiro,
}

impl Algorithm {
    pub const ALL: [Algorithm; 5] = [
        Algorithm::Nominal,
        Algorithm::Zoro,
        Algorithm::RiccatiZoroConstant,
        Algorithm::RiccatiZoroAdaptive,
        Algorithm::RiccatiZoroSiro,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Algorithm::Nominal => "nominal",
            Algorithm::Zoro => "zoro",
            Algorithm::RiccatiZoroConstant => "riccati_zoro_constant",
            Algorithm::RiccatiZoroAdaptive => "riccati_zoro_adaptive",
            Algorithm::RiccatiZoroSiro => "riccati_zoro_siro",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| Error::InvalidParameter(format!("unknown algorithm `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AlgoConfig {
    pub kind: Algorithm,
    /// Row-major `nu x nx` gain used at every stage by `zoro`; empty means zero.
    pub zoro_gain: Vec<f64>,
    pub adaptive_delta: f64,
    pub siro_eps_b: f64,
    /// Diagonal of the base state weight.
    pub weight_q: f64,
    pub weight_r: f64,
    pub weight_qn: f64,
    pub max_outer_iters: usize,
    pub backoff_tol: f64,
    pub inner_mode: InnerMode,
    pub relaxation: f64,
    pub compute_stationarity: bool,
    pub nominal: NominalSolveOptions,
}

impl Default for AlgoConfig {
    fn default() -> Self {
        let d = AlgoOptions::default();
        AlgoConfig {
            kind: Algorithm::RiccatiZoroAdaptive,
            zoro_gain: Vec::new(),
            adaptive_delta: DEFAULT_BARRIER_CLAMP,
            siro_eps_b: DEFAULT_SIRO_BACKOFF_FLOOR,
            weight_q: 1.0,
            weight_r: 1e-2,
            weight_qn: 1.0,
            max_outer_iters: d.max_outer_iters,
            backoff_tol: d.backoff_tol,
            inner_mode: d.inner_mode,
            relaxation: d.relaxation,
            compute_stationarity: d.compute_stationarity,
            nominal: d.nominal,
        }
    }
}

impl AlgoConfig {
    /// Solver options for `ocp`. `Nominal` maps to `sigma = 0` handled by the caller.
    pub fn options(&self, ocp: &TubeOcp) -> Result<AlgoOptions> {
        let d = ocp.dims();
        let base = StageWeights {
            stages: vec![
                StageWeight {
                    q: Mat::identity(d.nx, d.nx) * self.weight_q,
                    s: Mat::zeros(d.nu, d.nx),
                    r: Mat::identity(d.nu, d.nu) * self.weight_r,
                };
                ocp.horizon()
            ],
            terminal: Mat::identity(d.nx, d.nx) * self.weight_qn,
        };
        let weight_mode = match self.kind {
            Algorithm::Nominal | Algorithm::Zoro | Algorithm::RiccatiZoroConstant => WeightMode::Constant,
            Algorithm::RiccatiZoroAdaptive => WeightMode::Adaptive {
                delta: self.adaptive_delta,
            },
            Algorithm::RiccatiZoroSiro => WeightMode::Siro { eps_b: self.siro_eps_b },
        };
        let fixed_gains = match self.kind {
            Algorithm::Zoro => {
                let k = if self.zoro_gain.is_empty() {
                    Mat::zeros(d.nu, d.nx)
                } else if self.zoro_gain.len() == d.nu * d.nx {
                    Mat::from_row_slice(d.nu, d.nx, &self.zoro_gain)
                } else {
                    return Err(Error::DimensionMismatch {
                        what: "algo.zoro_gain".into(),
                        expected: d.nu * d.nx,
                        got: self.zoro_gain.len(),
                    });
                };
                Some(vec![k; ocp.horizon()])
            }
            _ => None,
        };
        Ok(AlgoOptions {
            weight_mode,
            base_weights: Some(base),
            fixed_gains,
            max_outer_iters: self.max_outer_iters,
            backoff_tol: self.backoff_tol,
            inner_mode: self.inner_mode,
            relaxation: self.relaxation,
            nominal: self.nominal,
            compute_stationarity: self.compute_stationarity,
            ..Default::default()
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimulationConfig {
    pub steps: usize,
    pub runs: usize,
    pub noise: NoiseMode,
    /// SQP iterations per step (real-time iteration); 0 solves to convergence.
    pub rti_sqp_iters: usize,
}

impl Default for SimulationConfig {
    fn default() -> Self {
        SimulationConfig {
            steps: 40,
            runs: 1,
            noise: NoiseMode::Set,
            rti_sqp_iters: 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScalingConfig {
    /// Numbers of masses; `n_x = 2 M`.
    pub masses: Vec<usize>,
    /// Timed iterations per size and algorithm.
    pub iterations: usize,
    /// Horizon of every scaling instance.
    pub horizon: usize,
}

impl Default for ScalingConfig {
    fn default() -> Self {
        ScalingConfig {
            masses: vec![2, 3, 4, 6, 8, 12, 16],
            iterations: 10,
            horizon: 10,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub out: String,
    pub problem: ProblemParams,
    pub algo: AlgoConfig,
    pub simulation: SimulationConfig,
    pub scaling: ScalingConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            out: "rzoro_out".into(),
            problem: ProblemParams::default(),
            algo: AlgoConfig::default(),
            simulation: SimulationConfig::default(),
            scaling: ScalingConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::InvalidParameter(format!("config: {}", e.to_string().trim_end())))
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::InvalidParameter(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::InvalidParameter(m) => Error::InvalidParameter(format!("{}: {m}", path.display())),
            e => e,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// Applies `key=value` overrides with dotted keys; values are TOML literals,
    /// bare words are taken as strings.
    pub fn with_overrides<S: AsRef<str>>(self, sets: &[S]) -> Result<Self> {
        if sets.is_empty() {
            return Ok(self);
        }
        let mut root = toml::Table::try_from(&self).expect("config serializes");
        for set in sets {
            let set = set.as_ref();
            let (key, raw) = set
                .split_once('=')
                .ok_or_else(|| Error::InvalidParameter(format!("override `{set}` is not key=value")))?;
            let key = key.trim();
            let path: Vec<&str> = key.split('.').collect();
            if path.iter().any(|p| p.is_empty()) {
                return Err(Error::InvalidParameter(format!("bad override key `{key}`")));
            }
            let value = parse_value(raw.trim());
            let mut table = &mut root;
            for part in &path[..path.len() - 1] {
                let entry = table
                    .entry(part.to_string())
                    .or_insert_with(|| toml::Value::Table(toml::Table::new()));
                table = entry
                    .as_table_mut()
                    .ok_or_else(|| Error::InvalidParameter(format!("`{part}` in `{key}` is not a table")))?;
            }
            table.insert(path[path.len() - 1].to_string(), value);
        }
        toml::Value::Table(root)
            .try_into()
            .map_err(|e: toml::de::Error| Error::InvalidParameter(format!("override: {}", e.message())))
    }

    pub fn build_problem(&self) -> Result<TubeOcp> {
        let mut params = self.problem.clone();
        if self.algo.kind == Algorithm::Nominal {
            params.sigma = 0.0;
        }
        build_problem(&params)
    }
}

fn parse_value(raw: &str) -> toml::Value {
    let doc = format!("v = {raw}");
    match doc.parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("parsed key"),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_round_trips_through_toml() {
        let c = RunConfig::default();
        assert_eq!(RunConfig::from_toml(&c.to_toml()).unwrap(), c);
    }

    #[test]
    fn unknown_key_is_named() {
        let err = RunConfig::from_toml("[problem]\nsigmaa = 1.0\n").unwrap_err().to_string();
        assert!(err.contains("sigmaa"), "{err}");
        assert!(err.contains("line 2"), "{err}");
        let err = RunConfig::default().with_overrides(&["algo.bogus=1"]).unwrap_err().to_string();
        assert!(err.contains("bogus"), "{err}");
    }

    #[test]
    fn overrides_parse_literals_and_words() {
        let c = RunConfig::default()
            .with_overrides(&[
                "problem.sigma=0.25",
                "problem.name=pendulum",
                "algo.kind=zoro",
                "algo.zoro_gain=[-1.0, -0.5]",
                "algo.nominal.hessian_mode=exact_regularized",
                "seed=7",
            ])
            .unwrap();
        assert_eq!(c.problem.sigma, 0.25);
        assert_eq!(c.problem.name, "pendulum");
        assert_eq!(c.algo.kind, Algorithm::Zoro);
        assert_eq!(c.algo.zoro_gain, vec![-1.0, -0.5]);
        assert_eq!(c.seed, 7);
        let ocp = c.build_problem().unwrap();
        let opts = c.algo.options(&ocp).unwrap();
        assert_eq!(opts.fixed_gains.unwrap()[0][(0, 1)], -0.5);
    }

    #[test]
    fn wrong_gain_length_is_rejected() {
        let c = RunConfig::default().with_overrides(&["algo.kind=zoro", "algo.zoro_gain=[1.0]"]).unwrap();
        let ocp = c.build_problem().unwrap();
        assert!(matches!(c.algo.options(&ocp), Err(Error::DimensionMismatch { .. })));
    }
}
