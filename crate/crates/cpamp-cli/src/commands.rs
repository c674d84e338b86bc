use crate::config::{LoadedConfig, Point, PosteriorKind};
use crate::error::{CliError, CliResult};
use crate::output::{
    create_dir, join, mean_sd, read_jsonl, write_csv, write_json, write_jsonl, write_posterior_csv, write_text, SeDocument, SeMode,
    TrialRecord, SE_FORMAT,
};
use cpamp::amp::{run_amp_with, AmpConfig};
use cpamp::experiment::{synthetic_dataset, Experiment, Trial};
use cpamp::inference::{approximate_posterior, estimate, hausdorff, ExactLikelihood, PosteriorTable};
use cpamp::io::{load_dataset, save_dataset};
use cpamp::model::{ChangePointVector, Dataset};
use cpamp::rng::derive_seed;
use cpamp::se::{SeTrajectory, StateEvolution};
use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::Serialize;
use std::path::{Path, PathBuf};

/// AMP start for `posterior` on a saved dataset: derive_seed(seed, [4]).
const POSTERIOR_AMP_STREAM: u64 = 4;

pub struct Context {
    pub loaded: LoadedConfig,
    pub out: PathBuf,
    pub dry_run: bool,
}

impl Context {
    fn start(&self, command: &str) -> CliResult<Option<Vec<Point>>> {
        let points = self.loaded.points()?;
        if self.dry_run {
            print_plan(command, self, &points);
            return Ok(None);
        }
        create_dir(&self.out)?;
        write_text(&self.out.join("config.resolved.json"), &self.loaded.resolved_json()?)?;
        Ok(Some(points))
    }
}

fn print_plan(command: &str, ctx: &Context, points: &[Point]) {
    let c = &ctx.loaded.config;
    println!("plan: {command}");
    println!("config: {}", ctx.loaded.path.display());
    println!("output: {}", ctx.out.display());
    println!("model: {}, p = {}, L = {}, trials = {}, seed = {}", c.model.name(), c.p, c.l, c.trials, c.seed);
    for pt in points {
        let sc = &pt.scenario;
        let cp = &sc.prior.changepoint;
        let candidates: f64 = cp.class_counts().iter().zip(&cp.count_weights).filter(|(_, w)| **w > 0.0).map(|(c, _)| c).sum();
        println!(
            "point {}: delta {} n {} truth [{}] candidates {} stride {} min_separation {} iterations {} mc_samples {} estimator {}",
            pt.index,
            pt.delta,
            sc.n,
            join(&sc.truth.eta),
            candidates,
            cp.grid_stride,
            cp.min_separation,
            sc.iterations,
            sc.se.mc_samples,
            sc.estimator.name()
        );
    }
    println!("dry run: nothing computed");
}

fn point_dir(out: &Path, pt: &Point) -> PathBuf {
    out.join(format!("delta_{}", pt.index))
}

fn at_trial(pt: &Point, k: usize) -> impl FnOnce(CliError) -> CliError {
    let what = format!("delta {} trial {k}", pt.delta);
    move |e| e.context(what)
}

/// One dataset per grid point and trial, written where `run` would draw the same data.
pub fn generate(ctx: &Context) -> CliResult<()> {
    let Some(points) = ctx.start("generate")? else { return Ok(()) };
    let cfg = &ctx.loaded.config;
    let mut rows = Vec::new();
    for pt in &points {
        for k in 0..cfg.trials {
            let seed = cfg.trial_seed(pt.index, k);
            let ds = synthetic_dataset(&pt.scenario, seed).map_err(|e| at_trial(pt, k)(e.into()))?;
            let dir = point_dir(&ctx.out, pt).join(format!("trial_{k}"));
            save_dataset(&dir, &ds).map_err(|e| CliError::from(e).context(dir.display()))?;
            rows.push(vec![
                pt.index.to_string(),
                pt.delta.to_string(),
                pt.scenario.n.to_string(),
                cfg.p.to_string(),
                k.to_string(),
                seed.to_string(),
                join(&pt.scenario.truth.eta),
                dir.strip_prefix(&ctx.out).unwrap_or(&dir).display().to_string(),
            ]);
        }
    }
    write_csv(&ctx.out.join("datasets.csv"), &["delta_index", "delta", "n", "p", "trial", "seed", "truth", "path"], &rows)?;
    println!("wrote {} datasets to {}", rows.len(), ctx.out.display());
    Ok(())
}

fn se_document(pt: &Point, mode: SeMode, trajectory: &SeTrajectory) -> SeDocument {
    let sc = &pt.scenario;
    SeDocument {
        format: SE_FORMAT.into(),
        mode,
        delta: pt.delta,
        n: sc.n,
        p: sc.p,
        l: sc.prior.l(),
        model: sc.model,
        truth: (mode == SeMode::Oracle).then(|| sc.truth.eta.clone()),
        trajectory: trajectory.clone(),
    }
}

/// State evolution only, no data.
pub fn se(ctx: &Context, mode: SeMode) -> CliResult<()> {
    let Some(points) = ctx.start("se")? else { return Ok(()) };
    let mut rows = Vec::new();
    for pt in &points {
        let sc = &pt.scenario;
        let engine = StateEvolution::new(&sc.prior, sc.model, sc.delta(), sc.se)?;
        let ensemble = engine.run_ensemble(sc.iterations)?;
        let traj = match mode {
            SeMode::Ensemble => ensemble,
            SeMode::Oracle => engine.run_oracle(&ensemble, &sc.truth)?,
        };
        let dir = point_dir(&ctx.out, pt);
        create_dir(&dir)?;
        let name = match mode {
            SeMode::Ensemble => "se_ensemble.json",
            SeMode::Oracle => "se_oracle.json",
        };
        write_json(&dir.join(name), &se_document(pt, mode, &traj))?;
        for p in &traj.params {
            let stats = p.t.checked_sub(1).map(|s| &traj.stats[s]);
            rows.push(vec![
                pt.delta.to_string(),
                format!("{mode:?}").to_lowercase(),
                p.t.to_string(),
                p.mse.to_string(),
                stats.map(|s| s.nu_b_minus_kappa_b.max_z().to_string()).unwrap_or_default(),
                stats.map(|s| s.kappa_theta_identity.max_z().to_string()).unwrap_or_default(),
            ]);
        }
    }
    write_csv(
        &ctx.out.join("se_summary.csv"),
        &["delta", "mode", "t", "mse", "nu_b_minus_kappa_b_max_z", "kappa_theta_identity_max_z"],
        &rows,
    )?;
    Ok(())
}

/// Reduced state-evolution engine behind exact posteriors (None for approximate ones).
fn exact_engine(ctx: &Context, pt: &Point) -> CliResult<Option<StateEvolution>> {
    let cfg = &ctx.loaded.config;
    let sc = &pt.scenario;
    Ok(match cfg.estimation.posterior {
        PosteriorKind::Approximate => None,
        PosteriorKind::Exact => Some(StateEvolution::new(&sc.prior, sc.model, sc.delta(), cfg.exact_se_config(pt.index))?),
    })
}

/// The posterior the config asks for, at the iteration a trial stopped.
/// Exact likelihoods at the planned iteration share one oracle memo.
struct PosteriorMaker<'a> {
    reduced: Option<&'a StateEvolution>,
    shared: Option<ExactLikelihood<'a>>,
}

impl<'a> PosteriorMaker<'a> {
    fn new(reduced: Option<&'a StateEvolution>, ensemble: &SeTrajectory, t: usize) -> CliResult<Self> {
        let shared = reduced.map(|se| ExactLikelihood::new(se, ensemble, t)).transpose()?;
        Ok(PosteriorMaker { reduced, shared })
    }

    fn posterior(&self, exp: &Experiment, t: usize, theta: &DMatrix<f64>, y: &[f64]) -> CliResult<PosteriorTable> {
        let cp = &exp.scenario.prior.changepoint;
        Ok(match (self.reduced, &self.shared) {
            (None, _) => approximate_posterior(theta, y, &exp.channel_at(t)?, cp)?,
            (Some(_), Some(ex)) if ex.iteration() == t => ex.posterior(theta, y, cp)?,
            (Some(se), _) => ExactLikelihood::new(se, &exp.ensemble, t)?.posterior(theta, y, cp)?,
        })
    }
}

fn record(pt: &Point, k: usize, tr: &Trial) -> TrialRecord {
    TrialRecord {
        delta_index: pt.index,
        delta: pt.delta,
        trial: k,
        n: pt.scenario.n,
        truth: pt.scenario.truth.eta.clone(),
        iterations_run: tr.run.state.t,
        summary: tr.summary.clone(),
    }
}

/// Trials with per-trial diagnostics, posteriors and estimates, plus summary tables.
pub fn run(ctx: &Context) -> CliResult<()> {
    let Some(points) = ctx.start("run")? else { return Ok(()) };
    let cfg = &ctx.loaded.config;
    let mut all = Vec::new();
    let (mut fig1, mut table1, mut trials) = (Vec::new(), Vec::new(), Vec::new());
    for pt in &points {
        let exp = Experiment::new(pt.scenario.clone())?;
        let dir = point_dir(&ctx.out, pt);
        create_dir(&dir)?;
        write_json(&dir.join("se_ensemble.json"), &se_document(pt, SeMode::Ensemble, &exp.ensemble))?;
        write_json(&dir.join("se_oracle.json"), &se_document(pt, SeMode::Oracle, &exp.oracle))?;
        let reduced = exact_engine(ctx, pt)?;
        let maker = PosteriorMaker::new(reduced.as_ref(), &exp.ensemble, pt.scenario.iterations)?;
        let records = (0..cfg.trials)
            .into_par_iter()
            .map(|k| {
                let tr = exp.trial(cfg.trial_seed(pt.index, k)).map_err(|e| at_trial(pt, k)(e.into()))?;
                let tdir = dir.join(format!("trial_{k}"));
                create_dir(&tdir)?;
                write_jsonl(&tdir.join("diagnostics.jsonl"), &tr.run.diagnostics.records)?;
                if cfg.estimation.write_posterior {
                    let post = maker.posterior(&exp, tr.run.state.t, &tr.run.state.theta, &tr.dataset.response).map_err(at_trial(pt, k))?;
                    write_posterior_csv(&tdir.join("posterior.csv"), &post, cfg.l)?;
                }
                let rec = record(pt, k, &tr);
                write_json(&tdir.join("estimate.json"), &rec)?;
                Ok(rec)
            })
            .collect::<CliResult<Vec<_>>>()?;
        let col = |f: &dyn Fn(&TrialRecord) -> f64| records.iter().map(f).collect::<Vec<_>>();
        let (h_mean, h_sd) = mean_sd(&col(&|r| r.summary.amp_hausdorff));
        let (se_h, _) = mean_sd(&col(&|r| r.summary.se_hausdorff));
        let (c_mean, c_sd) = mean_sd(&col(&|r| r.summary.amp_estimate.len() as f64));
        let (c_theory, _) = mean_sd(&col(&|r| r.summary.se_estimate.len() as f64));
        fig1.push(vec![pt.delta.to_string(), h_mean.to_string(), h_sd.to_string(), se_h.to_string()]);
        table1.push(vec![pt.delta.to_string(), c_theory.to_string(), c_mean.to_string(), c_sd.to_string()]);
        for r in &records {
            let s = &r.summary;
            trials.push(vec![
                r.delta_index.to_string(),
                r.delta.to_string(),
                r.n.to_string(),
                r.trial.to_string(),
                s.seed.to_string(),
                r.iterations_run.to_string(),
                join(&r.truth),
                join(&s.amp_estimate),
                join(&s.se_estimate),
                s.amp_hausdorff.to_string(),
                s.se_hausdorff.to_string(),
                s.amp_mse.to_string(),
                s.se_mse.to_string(),
            ]);
        }
        all.extend(records);
    }
    write_csv(&ctx.out.join("fig1.csv"), &["delta", "hausdorff_mean", "hausdorff_sd", "se_prediction"], &fig1)?;
    write_csv(&ctx.out.join("table1.csv"), &["delta", "count_theory", "count_mean", "count_sd"], &table1)?;
    write_csv(
        &ctx.out.join("trials.csv"),
        &[
            "delta_index",
            "delta",
            "n",
            "trial",
            "seed",
            "iterations_run",
            "truth",
            "amp_estimate",
            "se_estimate",
            "amp_hausdorff",
            "se_hausdorff",
            "amp_mse",
            "se_mse",
        ],
        &trials,
    )?;
    write_jsonl(&ctx.out.join("trials.jsonl"), &all)?;
    println!("wrote {} trials to {}", all.len(), ctx.out.display());
    Ok(())
}

/// Posterior over change points for a saved dataset.
pub fn posterior(ctx: &Context, data: &Path) -> CliResult<()> {
    let points = ctx.loaded.points()?;
    let cfg = &ctx.loaded.config;
    if ctx.dry_run {
        print_plan("posterior", ctx, &points);
        return Ok(());
    }
    let dataset: Dataset = load_dataset(data).map_err(|e| CliError::from(e).context(data.display()))?;
    let Some(pt) = points.iter().find(|pt| pt.scenario.n == dataset.n() && pt.scenario.p == dataset.p()) else {
        let ns: Vec<String> = points.iter().map(|pt| pt.scenario.n.to_string()).collect();
        return Err(CliError::Config(format!(
            "dataset is {} x {}, config resolves to p = {} and n in [{}]",
            dataset.n(),
            dataset.p(),
            cfg.p,
            ns.join(", ")
        )));
    };
    if dataset.model != cfg.model {
        return Err(CliError::Config(format!("dataset model {:?} differs from config model {:?}", dataset.model, cfg.model)));
    }
    create_dir(&ctx.out)?;
    write_text(&ctx.out.join("config.resolved.json"), &ctx.loaded.resolved_json()?)?;
    let sc = &pt.scenario;
    let engine = StateEvolution::new(&sc.prior, sc.model, dataset.delta(), sc.se)?;
    let amp = AmpConfig {
        max_iter: sc.iterations,
        tol: sc.tol,
        seed: derive_seed(cfg.seed, &[POSTERIOR_AMP_STREAM]),
        se: sc.se,
        onsager: sc.onsager,
    };
    let run = run_amp_with(&dataset, &sc.prior, &amp, &engine)?;
    let t = run.state.t;
    let cp = &sc.prior.changepoint;
    let post = match cfg.estimation.posterior {
        PosteriorKind::Approximate => approximate_posterior(&run.state.theta, &dataset.response, &engine.channel(&run.se.params[t])?, cp)?,
        PosteriorKind::Exact => {
            let reduced = StateEvolution::new(&sc.prior, sc.model, dataset.delta(), cfg.exact_se_config(pt.index))?;
            ExactLikelihood::new(&reduced, &run.se, t)?.posterior(&run.state.theta, &dataset.response, cp)?
        }
    };
    write_posterior_csv(&ctx.out.join("posterior.csv"), &post, cfg.l)?;
    write_jsonl(&ctx.out.join("diagnostics.jsonl"), &run.diagnostics.records)?;
    write_json(&ctx.out.join("se_ensemble.json"), &se_document(pt, SeMode::Ensemble, &run.se))?;
    let est = estimate(sc.estimator, &run.state.theta, &dataset.response, &engine.channel(&run.se.params[t])?, cp, sc.model)?;
    let truth = dataset.truth.as_ref().map(|tr| tr.eta.clone());
    let distance = truth.as_ref().map(|tr| hausdorff(&est, tr)).transpose()?;
    #[derive(Serialize)]
    struct PosteriorEstimate<'a> {
        n: usize,
        p: usize,
        iterations_run: usize,
        estimator: &'static str,
        estimate: &'a [usize],
        posterior_mode: &'a [usize],
        posterior_mode_prob: f64,
        count_probs: Vec<f64>,
        truth: Option<Vec<usize>>,
        hausdorff: Option<usize>,
    }
    let mode = post.argmax();
    write_json(
        &ctx.out.join("estimate.json"),
        &PosteriorEstimate {
            n: dataset.n(),
            p: dataset.p(),
            iterations_run: t,
            estimator: sc.estimator.name(),
            estimate: &est.eta,
            posterior_mode: &mode.eta,
            posterior_mode_prob: post.prob_of(mode),
            count_probs: post.count_probs(),
            truth: truth.map(|tr| tr.eta),
            hausdorff: distance,
        },
    )?;
    println!("estimate [{}] after {t} iterations; posterior over {} configurations in {}", join(&est.eta), post.len(), ctx.out.display());
    Ok(())
}

#[derive(Debug, Clone, Serialize)]
struct EvaluatedTrial {
    record: TrialRecord,
    posterior_gap: f64,
    posterior_tv: f64,
    truth_mass_amp: f64,
    truth_mass_se: f64,
}

/// AMP against draws from its state-evolution limit: estimates, errors and posteriors.
pub fn evaluate(ctx: &Context) -> CliResult<()> {
    let Some(points) = ctx.start("evaluate")? else { return Ok(()) };
    let cfg = &ctx.loaded.config;
    let mut rows = Vec::new();
    let mut details = Vec::new();
    for pt in &points {
        let exp = Experiment::new(pt.scenario.clone())?;
        let reduced = exact_engine(ctx, pt)?;
        let maker = PosteriorMaker::new(reduced.as_ref(), &exp.ensemble, pt.scenario.iterations)?;
        let truth: &ChangePointVector = &pt.scenario.truth;
        let evaluated = (0..cfg.trials)
            .into_par_iter()
            .map(|k| {
                let tr = exp.trial(cfg.trial_seed(pt.index, k)).map_err(|e| at_trial(pt, k)(e.into()))?;
                let t = tr.run.state.t;
                let amp_post = maker.posterior(&exp, t, &tr.run.state.theta, &tr.dataset.response).map_err(at_trial(pt, k))?;
                let se_post = maker.posterior(&exp, t, &tr.limit.v_theta, &tr.limit.y).map_err(at_trial(pt, k))?;
                Ok(EvaluatedTrial {
                    record: record(pt, k, &tr),
                    posterior_gap: amp_post.mean_abs_gap(&se_post)?,
                    posterior_tv: amp_post.total_variation(&se_post)?,
                    truth_mass_amp: amp_post.prob_of(truth),
                    truth_mass_se: se_post.prob_of(truth),
                })
            })
            .collect::<CliResult<Vec<_>>>()?;
        let col = |f: &dyn Fn(&EvaluatedTrial) -> f64| evaluated.iter().map(f).collect::<Vec<_>>();
        let (ha, ha_sd) = mean_sd(&col(&|e| e.record.summary.amp_hausdorff));
        let (hs, hs_sd) = mean_sd(&col(&|e| e.record.summary.se_hausdorff));
        let (ca, _) = mean_sd(&col(&|e| e.record.summary.amp_estimate.len() as f64));
        let (cs, _) = mean_sd(&col(&|e| e.record.summary.se_estimate.len() as f64));
        let (ma, _) = mean_sd(&col(&|e| e.record.summary.amp_mse));
        let (gap, _) = mean_sd(&col(&|e| e.posterior_gap));
        let (tv, _) = mean_sd(&col(&|e| e.posterior_tv));
        let (qa, _) = mean_sd(&col(&|e| e.truth_mass_amp));
        let (qs, _) = mean_sd(&col(&|e| e.truth_mass_se));
        let empty = evaluated.iter().filter(|e| e.record.summary.amp_estimate.is_empty() || e.record.summary.se_estimate.is_empty()).count();
        let se_mse = exp.oracle.params[pt.scenario.iterations].mse;
        rows.push(
            [
                pt.delta,
                pt.scenario.n as f64,
                cfg.trials as f64,
                ha,
                ha_sd,
                hs,
                hs_sd,
                ca,
                cs,
                ma,
                se_mse,
                gap,
                tv,
                qa,
                qs,
                empty as f64,
            ]
            .iter()
            .map(|x| x.to_string())
            .collect::<Vec<_>>(),
        );
        details.extend(evaluated);
    }
    let header = [
        "delta",
        "n",
        "trials",
        "hausdorff_amp_mean",
        "hausdorff_amp_sd",
        "hausdorff_se_mean",
        "hausdorff_se_sd",
        "count_amp_mean",
        "count_se_mean",
        "mse_amp_mean",
        "mse_se",
        "posterior_gap_mean",
        "posterior_tv_mean",
        "truth_mass_amp_mean",
        "truth_mass_se_mean",
        "empty_estimates",
    ];
    write_csv(&ctx.out.join("report.csv"), &header, &rows)?;
    #[derive(Serialize)]
    struct Report<'a> {
        posterior: PosteriorKind,
        columns: &'a [&'a str],
        rows: &'a [Vec<String>],
        trials: &'a [EvaluatedTrial],
    }
    write_json(&ctx.out.join("report.json"), &Report { posterior: cfg.estimation.posterior, columns: &header, rows: &rows, trials: &details })?;
    println!("wrote report for {} grid points to {}", rows.len(), ctx.out.display());
    Ok(())
}

/// Re-runs one recorded trial of a results directory and compares it with the record.
pub fn verify(loaded: &LoadedConfig, results: &Path, delta_index: usize, trial: usize) -> CliResult<()> {
    let recorded: Vec<TrialRecord> = read_jsonl(&results.join("trials.jsonl"))?;
    let Some(want) = recorded.iter().find(|r| r.delta_index == delta_index && r.trial == trial) else {
        return Err(CliError::Config(format!("{} has no trial {trial} at delta index {delta_index}", results.display())));
    };
    let points = loaded.points()?;
    let pt = points.get(delta_index).ok_or_else(|| CliError::Config(format!("config has no delta index {delta_index}")))?;
    let exp = Experiment::new(pt.scenario.clone())?;
    let tr = exp.trial(loaded.config.trial_seed(delta_index, trial))?;
    let got = record(pt, trial, &tr);
    if &got == want {
        println!("verified: delta index {delta_index} trial {trial} reproduces {}", results.display());
        return Ok(());
    }
    let a = serde_json::to_value(want)?;
    let b = serde_json::to_value(&got)?;
    let mut diffs = Vec::new();
    diff_values("", &a, &b, &mut diffs);
    Err(CliError::Mismatch(format!("delta index {delta_index} trial {trial} differs:\n{}", diffs.join("\n"))))
}

fn diff_values(path: &str, a: &serde_json::Value, b: &serde_json::Value, out: &mut Vec<String>) {
    match (a, b) {
        (serde_json::Value::Object(x), serde_json::Value::Object(y)) => {
            for (k, v) in x {
                let sub = if path.is_empty() { k.clone() } else { format!("{path}.{k}") };
                match y.get(k) {
                    Some(w) => diff_values(&sub, v, w, out),
                    None => out.push(format!("  {sub}: recorded {v}, missing now")),
                }
            }
        }
        _ if a != b => out.push(format!("  {path}: recorded {a}, now {b}")),
        _ => {}
    }
}
