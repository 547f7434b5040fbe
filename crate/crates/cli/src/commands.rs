//! One function per subcommand. Each reads its inputs, writes its artifacts
//! and a manifest into its output directory, and returns what the pipeline
//! needs from it.

use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use susmap_core::evaluate::{
    evaluate_model, ordering_checks, run_benchmark, summarize, train_test_split, EvalInput, EvalReport,
};
use susmap_core::mcmc::{fit_ism, fit_sdsm_full, posterior_summary, ModelKind, PosteriorSummary};
use susmap_core::modelchoice::{dependence_heuristic, HeuristicConfig, Verdict};
use susmap_core::picar::{build_basis, fit_sdsm_picar};
use susmap_core::rng::StreamKey;
use susmap_core::simulate::{
    clustered_units, grid_units, simulate, uniform_units, FieldSpec, GpHyperparams, InitialCondition, IsmPrior,
    SimScenario,
};
use susmap_core::spatial::pairwise_distances;
use susmap_core::twostep::{run_step1, PhiGrid, QuietWindow, Step1Config, Step1Report, WindowChoice};
use susmap_core::{BackgroundRate, DistanceMatrix, KernelParams, OutbreakPanel, SpatialUnits};

use crate::config::{FieldKind, Layout, RunConfig};
use crate::error::{CliError, CliResult};
use crate::io;
use crate::manifest::ManifestBuilder;

pub fn ensure_dir(dir: &Path) -> CliResult<()> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))
}

/// Units and panel, digested and checked against upstream manifests.
struct Data {
    units: SpatialUnits,
    panel: OutbreakPanel,
    d: DistanceMatrix,
}

fn load_data(m: &mut ManifestBuilder, units: &Path, panel: &Path) -> CliResult<Data> {
    m.input("units", units)?;
    m.input("panel", panel)?;
    let units = io::read_units(units)?;
    let p = io::read_panel(panel, &units)?;
    let d = pairwise_distances(&units)?;
    Ok(Data { units, panel: p, d })
}

/// Where the kernel range and background rate come from.
#[derive(Debug, Clone)]
pub enum Stage1Source {
    Report(PathBuf),
    Known { phi: f64, gamma: f64, b0: f64 },
}

impl Stage1Source {
    /// `--step1` wins; otherwise `fit.phi` and `fit.gamma` from the config.
    pub fn from_args(step1: Option<PathBuf>, cfg: &RunConfig) -> Option<Self> {
        match (step1, cfg.fit.phi, cfg.fit.gamma) {
            (Some(p), _, _) => Some(Stage1Source::Report(p)),
            (None, Some(phi), Some(gamma)) => Some(Stage1Source::Known { phi, gamma, b0: cfg.step1.b0 }),
            _ => None,
        }
    }

    fn resolve(&self, m: &mut ManifestBuilder) -> CliResult<(KernelParams, BackgroundRate)> {
        match self {
            Stage1Source::Report(p) => {
                m.input("step1", p)?;
                let r: Step1Report = io::read_json(p)?;
                let k = r.kernel().map_err(|e| CliError::format(p, e.to_string()))?;
                let g = r.background().map_err(|e| CliError::format(p, e.to_string()))?;
                m.decision("phi", r.phi);
                m.decision("gamma", r.gamma);
                Ok((k, g))
            }
            Stage1Source::Known { phi, gamma, b0 } => {
                m.decision("phi", phi);
                m.decision("gamma", gamma);
                Ok((KernelParams::new(*phi, *b0)?, BackgroundRate::new(*gamma)?))
            }
        }
    }
}

pub struct SimulateOutputs {
    pub units: PathBuf,
    pub panel: PathBuf,
    pub beta: PathBuf,
}

pub fn simulate_cmd(cfg: &RunConfig, units_in: Option<&Path>, out: &Path) -> CliResult<SimulateOutputs> {
    let seed = cfg.require_seed()?;
    let s = &cfg.simulate;
    ensure_dir(out)?;
    let mut m = ManifestBuilder::new("simulate", cfg);
    let units = match units_in {
        Some(p) => {
            m.input("units", p)?;
            io::read_units(p)?
        }
        None => {
            let mut rng = StreamKey::new(seed, "units").rng();
            match s.layout {
                Layout::Uniform => uniform_units(s.n_units, s.width_km, s.height_km, &mut rng)?,
                Layout::Grid => grid_units(s.grid_nx, s.grid_ny, s.grid_spacing_km)?,
                Layout::Clustered => clustered_units(
                    s.n_units,
                    s.width_km,
                    s.height_km,
                    s.n_clusters,
                    s.cluster_spread_km,
                    &mut rng,
                )?,
            }
        }
    };
    let field = match s.field {
        FieldKind::Independent => FieldSpec::Independent(IsmPrior::new(s.alpha)?),
        FieldKind::Gp => FieldSpec::Gp(GpHyperparams::new(s.omega, s.sigma2, s.rho)?),
        FieldKind::Constant => FieldSpec::Constant { beta: s.beta },
    };
    let scenario = SimScenario {
        units: units.clone(),
        kernel: KernelParams::new(s.phi, s.b0)?,
        gamma: s.gamma,
        n_times: s.n_times,
        field,
        seed: StreamKey::new(seed, "simulate").value(),
        initial: InitialCondition::Random { p0: s.p0 },
        transmission_off: s.transmission_off.map(|[a, b]| (a, b)),
    };
    let (beta, panel) = simulate(&scenario)?;

    let o = SimulateOutputs {
        units: out.join("units.csv"),
        panel: out.join("panel.csv"),
        beta: out.join("beta_true.csv"),
    };
    let scen = out.join("scenario.json");
    io::write_units(&o.units, &units)?;
    io::write_panel(&o.panel, &units, &panel)?;
    io::write_beta(&o.beta, &units, beta.values())?;
    io::write_json(&scen, &scenario)?;
    m.decision("n_units", units.len());
    m.decision("total_outbreaks", panel.total_outbreaks());
    m.finish(
        out,
        &[("units", o.units.clone()), ("panel", o.panel.clone()), ("beta_true", o.beta.clone()), ("scenario", scen)],
    )?;
    println!(
        "simulated {} units x {} times, {} outbreaks -> {}",
        units.len(),
        panel.n_times(),
        panel.total_outbreaks(),
        out.display()
    );
    Ok(o)
}

pub fn step1_config(cfg: &RunConfig) -> CliResult<Step1Config> {
    let s = &cfg.step1;
    let window = match (s.window_start, s.window_end) {
        (Some(a), Some(b)) => WindowChoice::Fixed(QuietWindow::new(a, b)?),
        _ => WindowChoice::Auto { width: s.window_width },
    };
    let grid = match (s.grid_min, s.grid_max) {
        (Some(lo), Some(hi)) => Some(PhiGrid::log_spaced(lo, hi, s.grid_size)?),
        (None, None) => None,
        _ => return Err(CliError::Config("step1.grid_min and step1.grid_max go together".into())),
    };
    Ok(Step1Config { window, grid, b0: s.b0 })
}

pub fn estimate_background_cmd(cfg: &RunConfig, units: &Path, panel: &Path, out: &Path) -> CliResult<PathBuf> {
    ensure_dir(out)?;
    let mut m = ManifestBuilder::new("estimate-background", cfg);
    let data = load_data(&mut m, units, panel)?;
    let report = run_step1(&data.panel, &data.d, &step1_config(cfg)?)?;
    let path = out.join("step1.json");
    io::write_json(&path, &report)?;
    m.decision("gamma", report.gamma);
    m.decision("phi", report.phi);
    m.decision("window", report.window);
    m.finish(out, &[("step1", path.clone())])?;
    println!(
        "gamma = {:.6}, phi = {:.3} km (window {}..{}) -> {}",
        report.gamma,
        report.phi,
        report.window.t1,
        report.window.t2,
        path.display()
    );
    Ok(path)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerdictRecord {
    pub verdict: Verdict,
    pub recommended_model: ModelKind,
    pub flagged_bins: Vec<usize>,
    pub first_bins: usize,
    pub min_exceed: usize,
    pub n_units: usize,
}

/// Recommended model for a verdict, honouring the dense-size limit.
pub fn recommend(verdict: Verdict, n_units: usize, dense_limit: usize) -> ModelKind {
    match verdict.model() {
        ModelKind::Sdsm if n_units > dense_limit => ModelKind::SdsmPicar,
        m => m,
    }
}

pub fn choose_model_cmd(
    cfg: &RunConfig,
    units: &Path,
    panel: &Path,
    stage1: &Stage1Source,
    out: &Path,
) -> CliResult<VerdictRecord> {
    let seed = cfg.require_seed()?;
    ensure_dir(out)?;
    let mut m = ManifestBuilder::new("choose-model", cfg);
    let data = load_data(&mut m, units, panel)?;
    let (k, g) = stage1.resolve(&mut m)?;
    let key = StreamKey::new(seed, "choose-model");
    let mut mcmc = cfg.mcmc.clone();
    mcmc.seed = key.labeled("mcmc").value();
    let hc = HeuristicConfig {
        mcmc,
        correlogram: cfg.heuristic.correlogram(key.labeled("permutations").value()),
        rule: cfg.heuristic.rule(),
    };
    let res = dependence_heuristic(&data.panel, &data.d, &k, g, &hc)?;
    let rec = VerdictRecord {
        verdict: res.decision.verdict,
        recommended_model: recommend(res.decision.verdict, data.units.len(), cfg.pipeline.dense_limit),
        flagged_bins: res.decision.flagged_bins.clone(),
        first_bins: res.decision.rule.first_bins,
        min_exceed: res.decision.rule.min_exceed,
        n_units: data.units.len(),
    };
    let cp = out.join("correlogram.csv");
    let lp = out.join("losses.csv");
    let vp = out.join("verdict.json");
    io::write_correlogram(&cp, &res.correlogram)?;
    io::write_losses(&lp, &data.units, &res.losses)?;
    let mut line = serde_json::to_string(&rec).map_err(|e| CliError::Internal(e.to_string()))?;
    line.push('\n');
    std::fs::write(&vp, line).map_err(|e| CliError::io(&vp, e))?;
    m.decision("verdict", rec.verdict);
    m.decision("recommended_model", rec.recommended_model);
    m.finish(out, &[("correlogram", cp), ("losses", lp), ("verdict", vp)])?;
    println!("verdict: {} -> {}", rec.verdict.as_str(), rec.recommended_model);
    Ok(rec)
}

pub fn fit_cmd(
    cfg: &RunConfig,
    units: &Path,
    panel: &Path,
    stage1: &Stage1Source,
    model: ModelKind,
    out: &Path,
) -> CliResult<PosteriorSummary> {
    let seed = cfg.require_seed()?;
    ensure_dir(out)?;
    let mut m = ManifestBuilder::new("fit", cfg);
    let data = load_data(&mut m, units, panel)?;
    let (k, g) = stage1.resolve(&mut m)?;
    let mut mcmc = cfg.mcmc.clone();
    mcmc.seed = StreamKey::new(seed, "fit").value();
    let mut outputs: Vec<(&str, PathBuf)> = Vec::new();
    let chain = match model {
        ModelKind::Ism => fit_ism(&data.panel, &data.d, &k, g, &mcmc)?,
        ModelKind::Sdsm => fit_sdsm_full(&data.panel, &data.d, &k, g, &mcmc)?,
        ModelKind::SdsmPicar => {
            let basis = build_basis(&data.units, cfg.picar.buffer_km, cfg.picar.rank)?;
            let files = io::write_basis(out, &data.units, &basis)?;
            outputs.extend(["basis_vertices", "basis_moran", "basis_projector"].into_iter().zip(files));
            m.decision("rank", basis.rank());
            fit_sdsm_picar(&data.panel, &data.d, &k, g, &basis, &mcmc)?
        }
    };
    let summary = posterior_summary(&chain)?;
    let pp = out.join("posterior_summary.csv");
    let hp = out.join("hyper_summary.csv");
    let ap = out.join("acceptance.csv");
    io::write_posterior_summary(&pp, &data.units, &summary)?;
    io::write_hyper_summary(&hp, &summary)?;
    io::write_acceptance(&ap, &chain.acceptance)?;
    outputs.extend([("posterior_summary", pp), ("hyper_summary", hp), ("acceptance", ap)]);
    if cfg.fit.write_chain {
        let cp = out.join(if cfg.fit.gzip_chain { "chain.csv.gz" } else { "chain.csv" });
        io::write_chain(&cp, &data.units, &chain)?;
        outputs.push(("chain", cp));
    }
    m.decision("model", model);
    m.decision("draws", chain.n_draws());
    m.finish(out, &outputs)?;
    println!("fitted {model} to {} units, {} draws -> {}", data.units.len(), chain.n_draws(), out.display());
    for h in &summary.hyper {
        println!(
            "  {:<8} mean {:>10.4}  95% [{:.4}, {:.4}]  ess {:.0}  split-rhat {:.3}",
            h.name, h.summary.mean, h.summary.q025, h.summary.q975, h.summary.ess, h.split_rhat
        );
    }
    Ok(summary)
}

/// Fits every configured model on a random training subset and scores the
/// held-out units against the true field. Without a stage-1 source the
/// background rate and kernel range are estimated from the training units.
pub fn evaluate_cmd(
    cfg: &RunConfig,
    units: &Path,
    panel: &Path,
    beta_true: &Path,
    stage1: Option<&Stage1Source>,
    models: &[ModelKind],
    out: &Path,
) -> CliResult<Vec<EvalReport>> {
    let seed = cfg.require_seed()?;
    ensure_dir(out)?;
    let mut m = ManifestBuilder::new("evaluate", cfg);
    let data = load_data(&mut m, units, panel)?;
    m.input("beta_true", beta_true)?;
    let truth = io::read_beta(beta_true, &data.units)?;
    let split = train_test_split(data.units.len(), cfg.evaluate.train_fraction, StreamKey::new(seed, "split"))?;
    let (kernel, gamma) = match stage1 {
        Some(s) => s.resolve(&mut m)?,
        None => {
            let tp = data.panel.subset_units(&split.train)?;
            let r = run_step1(&tp, &data.d.subset(&split.train), &step1_config(cfg)?)?;
            m.decision("phi", r.phi);
            m.decision("gamma", r.gamma);
            (r.kernel()?, r.background()?)
        }
    };
    let input = EvalInput {
        units: &data.units,
        d: &data.d,
        panel: &data.panel,
        beta_true: truth.values(),
        split: &split,
        kernel,
        gamma,
    };
    let mut mcmc = cfg.mcmc.clone();
    mcmc.seed = StreamKey::new(seed, "evaluate").value();
    let mut reports = Vec::with_capacity(models.len());
    for &model in models {
        let t0 = Instant::now();
        let (mut r, _) = evaluate_model(&input, model, &mcmc, cfg.picar.rank, cfg.picar.buffer_km)?;
        r.scenario = cfg.evaluate.label.clone();
        r.seconds = cfg.evaluate.timing.then(|| t0.elapsed().as_secs_f64());
        reports.push(r);
    }
    let sp = out.join("split.csv");
    let rp = out.join("report.csv");
    io::write_split(&sp, &data.units, &split)?;
    io::write_reports(&rp, &reports)?;
    m.decision("n_train", split.train.len());
    m.decision("n_test", split.test.len());
    m.finish(out, &[("split", sp), ("report", rp)])?;
    for r in &reports {
        println!(
            "{:<10} mspe {:.5}  spearman {:.3} (incidence {:.3})  oos-ce {:.5}",
            r.model.as_str(),
            r.mspe,
            r.spearman_model,
            r.spearman_incidence,
            r.oos_ce
        );
    }
    Ok(reports)
}

pub fn bench_cmd(cfg: &RunConfig, out: &Path) -> CliResult<()> {
    let seed = cfg.require_seed()?;
    ensure_dir(out)?;
    let mut m = ManifestBuilder::new("bench-table1", cfg);
    let mut bench = cfg.bench.clone();
    bench.seed = seed;
    let outcomes = run_benchmark(&bench)?;
    let reports: Vec<EvalReport> = outcomes.iter().flat_map(|o| o.reports.iter().cloned()).collect();
    let skipped: Vec<String> = outcomes
        .iter()
        .filter(|o| o.skipped.is_some())
        .map(|o| format!("{}#{}", o.scenario, o.replicate))
        .collect();
    let rows = summarize(&bench, &outcomes);
    let checks = ordering_checks(&rows);
    let rp = out.join("report.csv");
    let tp = out.join("table1.csv");
    let cp = out.join("checks.csv");
    io::write_reports(&rp, &reports)?;
    io::write_table(&tp, &rows)?;
    io::write_checks(&cp, &checks)?;
    m.decision("skipped", &skipped);
    m.decision("checks_passed", checks.iter().filter(|c| c.pass).count());
    m.decision("checks_total", checks.len());
    m.finish(out, &[("report", rp), ("table1", tp), ("checks", cp)])?;
    println!("{:<12} {:<11} {:>4} {:>12} {:>9} {:>9} {:>10}", "scenario", "model", "reps", "median mspe", "rho_s", "rho_inc", "oos-ce");
    for r in &rows {
        println!(
            "{:<12} {:<11} {:>4} {:>12.5} {:>9.3} {:>9.3} {:>10.5}{}",
            r.scenario,
            r.model.as_str(),
            r.n_replicates,
            r.median_mspe,
            r.median_spearman_model,
            r.median_spearman_incidence,
            r.median_oos_ce,
            if r.complete { "" } else { "  (incomplete)" }
        );
    }
    for c in &checks {
        println!("[{}] {}: {}", if c.pass { "ok" } else { "FAIL" }, c.scenario, c.claim);
    }
    if !skipped.is_empty() {
        println!("{} replicate(s) skipped by the time budget", skipped.len());
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineReport {
    pub n_units: usize,
    pub n_times: usize,
    pub gamma: f64,
    pub phi: f64,
    pub verdict: Verdict,
    pub model: ModelKind,
    pub evaluation: Option<EvalReport>,
}

/// estimate-background, choose-model, fit and (given the true field)
/// evaluate, each in its own subdirectory of `out`.
pub fn pipeline_cmd(
    cfg: &RunConfig,
    units: &Path,
    panel: &Path,
    beta_true: Option<&Path>,
    out: &Path,
) -> CliResult<PipelineReport> {
    cfg.require_seed()?;
    ensure_dir(out)?;
    let mut m = ManifestBuilder::new("pipeline", cfg);
    m.input("units", units)?;
    m.input("panel", panel)?;

    let s1_path = estimate_background_cmd(cfg, units, panel, &out.join("step1"))
        .map_err(|e| e.in_stage("estimate-background"))?;
    let s1: Step1Report = io::read_json(&s1_path)?;
    let src = Stage1Source::Report(s1_path);
    let verdict = choose_model_cmd(cfg, units, panel, &src, &out.join("choose-model"))
        .map_err(|e| e.in_stage("choose-model"))?;
    let model = verdict.recommended_model;
    fit_cmd(cfg, units, panel, &src, model, &out.join("fit")).map_err(|e| e.in_stage("fit"))?;
    let evaluation = match beta_true {
        Some(b) => {
            let r = evaluate_cmd(cfg, units, panel, b, Some(&src), &[model], &out.join("evaluate"))
                .map_err(|e| e.in_stage("evaluate"))?;
            r.into_iter().next()
        }
        None => None,
    };
    let u = io::read_units(units)?;
    let report = PipelineReport {
        n_units: u.len(),
        n_times: io::read_panel(panel, &u)?.n_times(),
        gamma: s1.gamma,
        phi: s1.phi,
        verdict: verdict.verdict,
        model,
        evaluation,
    };
    let rp = out.join("report.json");
    io::write_json(&rp, &report)?;
    m.decision("verdict", report.verdict);
    m.decision("model", model);
    m.finish(out, &[("report", rp)])?;
    Ok(report)
}
