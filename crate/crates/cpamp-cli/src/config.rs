//! Experiment configuration.
//!
//! A config is one JSON file. Any key can be overridden from the environment
//! with `CPAMP__<KEY>__<SUBKEY>=<value>`, e.g. `CPAMP__AMP__MAX_ITER=5`; the
//! value is read as JSON and falls back to a plain string.
//!
//! Seeds are derived from the master seed with `derive_seed(seed, indices)`:
//! trial k at grid point i uses `[0, i, k]`, the state evolution at i uses
//! `[1, i]`, a sampled truth `[2, i]`, and the reduced state evolution behind
//! exact posteriors `[3, i]`.

use crate::error::{CliError, CliResult};
use cpamp::experiment::Scenario;
use cpamp::inference::Estimator;
use cpamp::model::{ChangePointVector, ModelKind};
use cpamp::priors::{default_grid_stride, ChangePointPrior, PriorSpec, SignalPrior};
use cpamp::rng::derive_seed;
use cpamp::se::SeConfig;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use std::fs;
use std::path::{Path, PathBuf};

pub const ENV_PREFIX: &str = "CPAMP__";

const TRIAL_STREAM: u64 = 0;
const SE_STREAM: u64 = 1;
const TRUTH_STREAM: u64 = 2;
const EXACT_SE_STREAM: u64 = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub model: ModelKind,
    pub p: usize,
    /// Give either `n` or a grid of sampling ratios `deltas` (n = round(delta p)).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub deltas: Option<Vec<f64>>,
    /// Number of signal columns.
    pub l: usize,
    pub signal_prior: SignalPrior,
    /// Multiply the signal prior's second moment by delta at each grid point.
    #[serde(default)]
    pub scale_signal_by_delta: bool,
    pub changepoint_prior: ChangePointSpec,
    pub truth: TruthSpec,
    #[serde(default)]
    pub amp: AmpSection,
    #[serde(default)]
    pub se: SeSection,
    #[serde(default)]
    pub estimation: EstimationSection,
    #[serde(default = "one")]
    pub trials: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output: Option<PathBuf>,
}

fn one() -> usize {
    1
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CountLaw {
    Exactly,
    UniformOverConfigs,
    UniformOverCounts,
    Custom,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChangePointSpec {
    pub kind: CountLaw,
    /// Number of change points for `exactly`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub count: Option<usize>,
    /// Probabilities of 0..L-1 change points for `custom`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub count_weights: Option<Vec<f64>>,
    /// Minimum segment length in rows, or as a fraction of n; default n / 10.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub min_separation: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub min_separation_frac: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TruthKeyword {
    Sample,
}

/// Either `"sample"` (one draw from the change-point prior per grid point)
/// or `{"fractions": [...]}` with change points at round(alpha n) + 1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum TruthSpec {
    Keyword(TruthKeyword),
    Fractions { fractions: Vec<f64> },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AmpSection {
    pub max_iter: usize,
    /// Stop once the relative change of B_hat falls below tol (0 disables).
    pub tol: f64,
    pub onsager: bool,
}

impl Default for AmpSection {
    fn default() -> Self {
        AmpSection { max_iter: 15, tol: 0.0, onsager: true }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SeSection {
    pub mc_samples: usize,
    pub max_strata: usize,
}

impl Default for SeSection {
    fn default() -> Self {
        SeSection { mc_samples: 1000, max_strata: 64 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PosteriorKind {
    Approximate,
    Exact,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EstimationSection {
    pub method: Estimator,
    /// Candidate change points lie on (eta - 1) % grid_stride == 0; default max(1, n / 200).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub grid_stride: Option<usize>,
    /// Posterior written by `run` and compared by `evaluate`.
    pub posterior: PosteriorKind,
    pub exact_mc_samples: usize,
    pub exact_max_strata: usize,
    pub write_posterior: bool,
}

impl Default for EstimationSection {
    fn default() -> Self {
        EstimationSection {
            method: Estimator::PosteriorArgmax,
            grid_stride: None,
            posterior: PosteriorKind::Approximate,
            exact_mc_samples: 300,
            exact_max_strata: 16,
            write_posterior: true,
        }
    }
}

/// One resolved grid point.
#[derive(Debug, Clone)]
pub struct Point {
    pub index: usize,
    /// Nominal sampling ratio (n / p for a fixed n).
    pub delta: f64,
    pub scenario: Scenario,
}

/// A validation failure at a config key such as `model.noise_sd`.
#[derive(Debug, Clone, PartialEq)]
pub struct Issue {
    pub key: String,
    pub message: String,
}

fn issue<T>(key: &str, message: impl Into<String>) -> Result<T, Issue> {
    Err(Issue { key: key.into(), message: message.into() })
}

impl ExperimentConfig {
    pub fn trial_seed(&self, point: usize, trial: usize) -> u64 {
        derive_seed(self.seed, &[TRIAL_STREAM, point as u64, trial as u64])
    }

    pub fn exact_se_config(&self, point: usize) -> SeConfig {
        SeConfig {
            mc_samples: self.estimation.exact_mc_samples,
            max_strata: self.estimation.exact_max_strata,
            seed: derive_seed(self.seed, &[EXACT_SE_STREAM, point as u64]),
        }
    }

    fn grid(&self) -> Result<Vec<(f64, usize)>, Issue> {
        if self.p == 0 {
            return issue("p", "must be positive");
        }
        match (self.n, &self.deltas) {
            (Some(_), Some(_)) => issue("deltas", "give either n or deltas, not both"),
            (None, None) => issue("n", "missing: give n or deltas"),
            (Some(0), None) => issue("n", "must be positive"),
            (Some(n), None) => Ok(vec![(n as f64 / self.p as f64, n)]),
            (None, Some(ds)) => {
                if ds.is_empty() {
                    return issue("deltas", "must not be empty");
                }
                ds.iter()
                    .map(|&d| {
                        if !(d > 0.0 && d.is_finite()) {
                            return issue("deltas", format!("{d} is not a positive number"));
                        }
                        let n = (d * self.p as f64).round() as usize;
                        if n == 0 {
                            return issue("deltas", format!("delta {d} gives n = 0"));
                        }
                        Ok((d, n))
                    })
                    .collect()
            }
        }
    }

    fn changepoint_prior(&self, n: usize) -> Result<ChangePointPrior, Issue> {
        let spec = &self.changepoint_prior;
        let key = "changepoint_prior";
        let min_sep = match (spec.min_separation, spec.min_separation_frac) {
            (Some(_), Some(_)) => return issue(key, "give min_separation or min_separation_frac, not both"),
            (Some(d), None) => d,
            (None, Some(f)) => {
                if !(f > 0.0 && f <= 1.0) {
                    return issue("changepoint_prior.min_separation_frac", format!("{f} outside (0, 1]"));
                }
                ((f * n as f64).round() as usize).max(1)
            }
            (None, None) => (n / 10).max(1),
        };
        let stride = match self.estimation.grid_stride {
            Some(0) => return issue("estimation.grid_stride", "must be at least 1"),
            Some(s) => s,
            None => default_grid_stride(n),
        };
        let l = self.l;
        let built = match spec.kind {
            CountLaw::Exactly => match spec.count {
                Some(k) if k < l => ChangePointPrior::exactly(n, l, k, min_sep, stride),
                Some(k) => return issue("changepoint_prior.count", format!("{k} change points need l > {k}")),
                None => return issue(key, "kind exactly needs count"),
            },
            CountLaw::UniformOverConfigs => ChangePointPrior::uniform_over_configs(n, l, min_sep, stride),
            CountLaw::UniformOverCounts => ChangePointPrior::uniform_over_counts(n, l, min_sep, stride),
            CountLaw::Custom => match &spec.count_weights {
                Some(w) => ChangePointPrior::new(n, l, min_sep, w.clone(), stride),
                None => return issue(key, "kind custom needs count_weights"),
            },
        };
        let prior = built.or_else(|e| issue(key, e.to_string()))?;
        if prior.class_counts().iter().zip(&prior.count_weights).all(|(c, w)| *c == 0.0 || *w == 0.0) {
            return issue(key, format!("no admissible configuration at n = {n}"));
        }
        Ok(prior)
    }

    fn truth(&self, index: usize, n: usize, prior: &ChangePointPrior) -> Result<ChangePointVector, Issue> {
        match &self.truth {
            TruthSpec::Keyword(TruthKeyword::Sample) => {
                prior.sample(derive_seed(self.seed, &[TRUTH_STREAM, index as u64])).or_else(|e| issue("truth", e.to_string()))
            }
            TruthSpec::Fractions { fractions } => {
                if fractions.len() >= self.l {
                    return issue("truth", format!("{} change points need l > {}", fractions.len(), fractions.len()));
                }
                if fractions.windows(2).any(|w| w[0] >= w[1]) {
                    return issue("truth", "fractions must be strictly increasing");
                }
                ChangePointVector::from_fractions(fractions, n).or_else(|e| issue("truth", e.to_string()))
            }
        }
    }

    /// Validates everything and resolves the grid points.
    pub fn points(&self) -> Result<Vec<Point>, Issue> {
        self.model.validate().or_else(|e| issue(model_key(&self.model), e.to_string()))?;
        if self.l == 0 {
            return issue("l", "must be at least 1");
        }
        if let Err(e) = self.signal_prior.mixture(self.l) {
            return issue("signal_prior", e.to_string());
        }
        if self.amp.max_iter == 0 {
            return issue("amp.max_iter", "must be at least 1");
        }
        if !(self.amp.tol >= 0.0) {
            return issue("amp.tol", "must be non-negative");
        }
        if self.se.mc_samples < 10 {
            return issue("se.mc_samples", "must be at least 10");
        }
        if self.se.max_strata == 0 {
            return issue("se.max_strata", "must be at least 1");
        }
        if self.estimation.exact_mc_samples < 10 {
            return issue("estimation.exact_mc_samples", "must be at least 10");
        }
        if self.estimation.exact_max_strata == 0 {
            return issue("estimation.exact_max_strata", "must be at least 1");
        }
        if self.estimation.method == Estimator::L2Match && !matches!(self.model, ModelKind::Linear { .. }) {
            return issue("estimation.method", "l2_match needs the linear model");
        }
        if self.trials == 0 {
            return issue("trials", "must be at least 1");
        }
        let grid = self.grid()?;
        grid.into_iter()
            .enumerate()
            .map(|(index, (delta, n))| {
                let changepoint = self.changepoint_prior(n)?;
                let truth = self.truth(index, n, &changepoint)?;
                let signal = if self.scale_signal_by_delta { self.signal_prior.scaled(delta) } else { self.signal_prior.clone() };
                let scenario = Scenario {
                    n,
                    p: self.p,
                    model: self.model,
                    prior: PriorSpec { signal, changepoint },
                    truth,
                    iterations: self.amp.max_iter,
                    tol: self.amp.tol,
                    estimator: self.estimation.method,
                    se: SeConfig {
                        mc_samples: self.se.mc_samples,
                        max_strata: self.se.max_strata,
                        seed: derive_seed(self.seed, &[SE_STREAM, index as u64]),
                    },
                    onsager: self.amp.onsager,
                };
                scenario.validate().or_else(|e| issue("truth", e.to_string()))?;
                Ok(Point { index, delta, scenario })
            })
            .collect()
    }
}

fn model_key(model: &ModelKind) -> &'static str {
    match model {
        ModelKind::Logistic => "model",
        _ => "model.noise_sd",
    }
}

/// A parsed config with what is needed to point errors back at their source.
#[derive(Debug, Clone)]
pub struct LoadedConfig {
    pub config: ExperimentConfig,
    pub path: PathBuf,
    text: String,
    /// (variable, dotted key) for every environment override applied.
    overrides: Vec<(String, String)>,
}

/// Reads `path` and applies `CPAMP__` overrides from `env`.
pub fn load(path: &Path, env: impl IntoIterator<Item = (String, String)>) -> CliResult<LoadedConfig> {
    let text = fs::read_to_string(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
    let shown = path.display();
    let config: ExperimentConfig = serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{shown}:{}:{}: {}", e.line(), e.column(), strip_position(&e))))?;
    let mut overrides: Vec<(String, String, String)> = env
        .into_iter()
        .filter_map(|(k, v)| {
            let rest = k.strip_prefix(ENV_PREFIX)?;
            let key = rest.split("__").map(|s| s.to_ascii_lowercase()).collect::<Vec<_>>().join(".");
            Some((k, key, v))
        })
        .collect();
    overrides.sort();
    if overrides.is_empty() {
        return Ok(LoadedConfig { config, path: path.to_path_buf(), text, overrides: Vec::new() });
    }
    let mut value: Value = serde_json::from_str(&text).expect("already parsed");
    for (var, key, raw) in &overrides {
        if key.split('.').any(str::is_empty) {
            return Err(CliError::Config(format!("{var}: malformed key")));
        }
        set_path(&mut value, key, serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.clone())))
            .map_err(|m| CliError::Config(format!("{var}: {m}")))?;
    }
    let names = overrides.iter().map(|o| o.0.as_str()).collect::<Vec<_>>().join(", ");
    let config = serde_json::from_value(value).map_err(|e| CliError::Config(format!("{shown} with {names}: {e}")))?;
    Ok(LoadedConfig { config, path: path.to_path_buf(), text, overrides: overrides.into_iter().map(|(v, k, _)| (v, k)).collect() })
}

fn strip_position(e: &serde_json::Error) -> String {
    let s = e.to_string();
    match s.rsplit_once(" at line ") {
        Some((head, _)) => head.to_string(),
        None => s,
    }
}

fn set_path(root: &mut Value, key: &str, value: Value) -> Result<(), String> {
    let parts: Vec<&str> = key.split('.').collect();
    let mut cur = root;
    for part in &parts[..parts.len() - 1] {
        let obj = cur.as_object_mut().ok_or_else(|| format!("cannot set {key}: {part} is inside a non-object"))?;
        cur = obj.entry(part.to_string()).or_insert_with(|| Value::Object(Default::default()));
    }
    match cur.as_object_mut() {
        Some(obj) => {
            obj.insert(parts[parts.len() - 1].to_string(), value);
            Ok(())
        }
        None => Err(format!("cannot set {key}: parent is not an object")),
    }
}

/// 1-based line of the dotted key in JSON text, following each segment in order.
pub fn locate(text: &str, key: &str) -> Option<usize> {
    let mut pos = 0;
    for part in key.split('.') {
        let needle = format!("\"{part}\"");
        let mut from = pos;
        loop {
            let at = from + text[from..].find(&needle)?;
            let after = text[at + needle.len()..].trim_start();
            if after.starts_with(':') {
                pos = at;
                break;
            }
            from = at + needle.len();
        }
    }
    Some(text[..pos].matches('\n').count() + 1)
}

impl LoadedConfig {
    /// Validated grid points; failures name the file line or the overriding variable.
    pub fn points(&self) -> CliResult<Vec<Point>> {
        self.config.points().map_err(|i| CliError::Config(self.anchor(&i)))
    }

    fn anchor(&self, i: &Issue) -> String {
        let overridden = self.overrides.iter().rev().find(|(_, k)| i.key == *k || i.key.starts_with(&format!("{k}.")) || k.starts_with(&format!("{}.", i.key)));
        if let Some((var, _)) = overridden {
            return format!("{var}: {}: {}", i.key, i.message);
        }
        let top = i.key.split('.').next().unwrap_or_default();
        match locate(&self.text, &i.key).or_else(|| locate(&self.text, top)) {
            Some(line) => format!("{}:{line}: {}: {}", self.path.display(), i.key, i.message),
            None => format!("{}: {}: {}", self.path.display(), i.key, i.message),
        }
    }

    /// The config as it will be used, with defaults filled in.
    pub fn resolved_json(&self) -> CliResult<String> {
        let mut s = serde_json::to_string_pretty(&self.config)?;
        s.push('\n');
        Ok(s)
    }
}
