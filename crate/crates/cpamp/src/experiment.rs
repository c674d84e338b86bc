//! Repeated synthetic trials: data, AMP, and a matching draw from the
//! state-evolution limit, evaluated with the same change-point estimator.

use crate::amp::{run_amp_along, AmpConfig, AmpRun};
use crate::denoise::ThetaChannel;
use crate::error::{invalid, Result};
use crate::inference::{estimate, hausdorff, Estimator};
use crate::model::{generate_dataset, ChangePointVector, Dataset, ModelKind};
use crate::priors::{sample_signal_matrix, PriorSpec};
use crate::rng::derive_seed;
use crate::se::{sample_limit_iterates, LimitSample, SeConfig, SeTrajectory, StateEvolution};
use serde::{Deserialize, Serialize};

/// A synthetic setting: dimensions, model, prior and true change points.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub n: usize,
    pub p: usize,
    pub model: ModelKind,
    pub prior: PriorSpec,
    pub truth: ChangePointVector,
    pub iterations: usize,
    /// Early-stopping threshold on the relative change of B_hat (0 runs every iteration).
    #[serde(default)]
    pub tol: f64,
    pub estimator: Estimator,
    pub se: SeConfig,
    pub onsager: bool,
}

impl Scenario {
    pub fn delta(&self) -> f64 {
        self.n as f64 / self.p as f64
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.n == 0 || self.p == 0 {
            return invalid("n and p must be positive");
        }
        if self.iterations == 0 {
            return invalid("iterations must be at least 1");
        }
        if !(self.tol >= 0.0) {
            return invalid("tol must be non-negative");
        }
        if self.prior.changepoint.n != self.n {
            return invalid(format!("change-point prior is for n={}, scenario has n={}", self.prior.changepoint.n, self.n));
        }
        if self.truth.n != self.n || self.truth.len() + 1 > self.prior.l() {
            return invalid("true change points do not fit n and L");
        }
        Ok(())
    }
}

/// Serializable summary of one trial.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialSummary {
    pub seed: u64,
    pub amp_estimate: Vec<usize>,
    pub se_estimate: Vec<usize>,
    /// Hausdorff distances divided by n.
    pub amp_hausdorff: f64,
    pub se_hausdorff: f64,
    /// Final empirical signal MSE, ||B_hat - B||^2 / p.
    pub amp_mse: f64,
    pub se_mse: f64,
}

/// The data of trial `seed`: signal from derive_seed(seed, [0]), design and noise from [1].
pub fn synthetic_dataset(scenario: &Scenario, seed: u64) -> Result<Dataset> {
    let signal = sample_signal_matrix(&scenario.prior.signal, scenario.p, scenario.prior.l(), derive_seed(seed, &[0]))?;
    generate_dataset(scenario.n, scenario.p, scenario.model, &signal, &scenario.truth, derive_seed(seed, &[1]))
}

/// Everything one trial produced.
#[derive(Debug, Clone)]
pub struct Trial {
    pub dataset: Dataset,
    pub run: AmpRun,
    pub limit: LimitSample,
    pub summary: TrialSummary,
}

/// A scenario with its ensemble and oracle state evolution, shared by all trials.
pub struct Experiment {
    pub scenario: Scenario,
    pub se: StateEvolution,
    pub ensemble: SeTrajectory,
    pub oracle: SeTrajectory,
}

impl Experiment {
    pub fn new(scenario: Scenario) -> Result<Self> {
        scenario.validate()?;
        let se = StateEvolution::new(&scenario.prior, scenario.model, scenario.delta(), scenario.se)?;
        let ensemble = se.run_ensemble(scenario.iterations)?;
        let oracle = se.run_oracle(&ensemble, &scenario.truth)?;
        Ok(Experiment { scenario, se, ensemble, oracle })
    }

    /// Ensemble channel at the final iteration.
    pub fn channel(&self) -> Result<ThetaChannel> {
        self.channel_at(self.scenario.iterations)
    }

    /// Ensemble channel for Theta after `t` cycles.
    pub fn channel_at(&self, t: usize) -> Result<ThetaChannel> {
        match self.ensemble.params.get(t) {
            Some(params) => self.se.channel(params),
            None => invalid(format!("no state-evolution parameters for iteration {t}")),
        }
    }

    /// One trial. The signal, data, AMP start and limit draw use
    /// derive_seed(seed, [0]), [1], [2] and [3]. When AMP stops early the
    /// estimator and the limit draw use the iteration it stopped at.
    pub fn trial(&self, seed: u64) -> Result<Trial> {
        let sc = &self.scenario;
        let dataset = synthetic_dataset(sc, seed)?;
        let truth = dataset.truth.as_ref().expect("generated data carries its truth");
        let signal = &truth.signal;
        let config = AmpConfig { max_iter: sc.iterations, tol: sc.tol, seed: derive_seed(seed, &[2]), se: sc.se, onsager: sc.onsager };
        let run = run_amp_along(&dataset, &sc.prior, &config, &self.se, &self.ensemble)?;
        let t = run.state.t;
        let channel = self.channel_at(t)?;
        let cp = &sc.prior.changepoint;
        let amp_estimate = estimate(sc.estimator, &run.state.theta, &dataset.response, &channel, cp, sc.model)?;
        let limit = sample_limit_iterates(&self.oracle.params[t], &signal.entries, &truth.config.psi, sc.model, derive_seed(seed, &[3]))?;
        let se_estimate = estimate(sc.estimator, &limit.v_theta, &limit.y, &channel, cp, sc.model)?;
        let n = sc.n as f64;
        let amp_mse = (&run.state.b_hat - &signal.entries).norm_squared() / sc.p as f64;
        let summary = TrialSummary {
            seed,
            amp_hausdorff: hausdorff(&amp_estimate, &sc.truth)? as f64 / n,
            se_hausdorff: hausdorff(&se_estimate, &sc.truth)? as f64 / n,
            amp_estimate: amp_estimate.eta,
            se_estimate: se_estimate.eta,
            amp_mse,
            se_mse: self.oracle.params[t].mse,
        };
        Ok(Trial { dataset, run, limit, summary })
    }

    /// `trials` trials with seeds derive_seed(master, [k]).
    pub fn run(&self, trials: usize, master: u64) -> Result<Vec<TrialSummary>> {
        (0..trials).map(|k| self.trial(derive_seed(master, &[k as u64])).map(|t| t.summary)).collect()
    }
}

/// Mean of a slice (NaN when empty).
pub fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}
