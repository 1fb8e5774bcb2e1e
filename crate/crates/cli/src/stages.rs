//! In-memory pipeline stages. Commands wrap these with file I/O; tests call
//! them directly.

use adacal::calibration::SIM_CHUNK;
use adacal::{
    apply_plan, argmax, build_calibration_cache, build_table, convert, energy_of, fit_exit_policy, infer_adaptive,
    load_csv, load_idx, make_synthetic_with, measure_unevenness, pareto_search, run_snn_chunked, train_reference,
    CalibrationCache, ConversionMetrics, ConvertOptions, DatasetF32, EnergyModel, ExitParams, ExitPolicy, ExitTrace,
    LayerPlan, ModelBuilder, ModelF32, ParamKind, SearchBudget, SearchOutcome, SensitivityTable, SimOptions,
    SnnConfigF32, SyntheticSpec, ThresholdFit, TrainOptions, TrainReport,
};
use serde::Serialize;

use crate::config::{DataSource, EnergyTarget, RunConfig, SensitivityTarget};
use crate::error::{CliError, Stage, StageExt};

pub fn sim_options(cfg: &RunConfig) -> SimOptions {
    SimOptions {
        initial_membrane: cfg.calibration.initial_membrane,
        ..SimOptions::default()
    }
}

/// Training and evaluation splits.
pub fn load_data(cfg: &RunConfig) -> Result<(DatasetF32, DatasetF32), CliError> {
    let data = match &cfg.data.source {
        DataSource::Synthetic {
            kind,
            count,
            classes,
            sample_shape,
            noise,
        } => make_synthetic_with(&SyntheticSpec {
            kind: *kind,
            count: *count,
            seed: cfg.data_seed(),
            classes: *classes,
            sample_shape: sample_shape.clone(),
            noise: *noise,
        }),
        DataSource::Idx { images, labels } => load_idx(images, labels),
        DataSource::Csv {
            path,
            sample_shape,
            classes,
        } => load_csv(path, sample_shape, *classes),
    }
    .stage(Stage::Data)?;
    if cfg.data.train >= data.len() {
        return Err(CliError::user(
            Stage::Data,
            format!("train split {} leaves no evaluation samples out of {}", cfg.data.train, data.len()),
        ));
    }
    data.split_at(cfg.data.train).stage(Stage::Data)
}

pub fn train(cfg: &RunConfig, data: &DatasetF32) -> Result<(ModelF32, TrainReport), CliError> {
    let init = ModelBuilder::mlp(data.sample_shape(), &cfg.model.hidden, data.class_count())
        .build::<f32>(cfg.init_seed())
        .stage(Stage::Train)?;
    let opts = TrainOptions {
        epochs: cfg.model.epochs,
        lr: cfg.model.lr,
        seed: cfg.train_seed(),
        batch_size: cfg.model.batch_size,
    };
    train_reference(&init, data, &opts).stage(Stage::Train)
}

pub fn ann_accuracy(model: &ModelF32, data: &DatasetF32, stage: Stage) -> Result<f64, CliError> {
    let preds = model.predict(data.images()).stage(stage)?;
    Ok(data.accuracy(&preds))
}

pub fn calibration_cache(cfg: &RunConfig, model: &ModelF32, data: &DatasetF32) -> Result<CalibrationCache<f32>, CliError> {
    let n = cfg.calibration.samples.min(data.len());
    build_calibration_cache(model, data, n, cfg.cache_seed()).stage(Stage::Convert)
}

/// A converted network with the calibration cache of its (possibly bias
/// corrected) weights.
pub struct Converted {
    pub model: ModelF32,
    pub configs: Vec<SnnConfigF32>,
    pub fits: Vec<ThresholdFit<f32>>,
    pub cache: CalibrationCache<f32>,
}

pub fn convert_model(cfg: &RunConfig, model: &ModelF32, data: &DatasetF32) -> Result<Converted, CliError> {
    let cache = calibration_cache(cfg, model, data)?;
    let opts = ConvertOptions {
        timesteps: cfg.timesteps,
        grid: cfg.grid(),
        calibrate_bias: cfg.calibration.calibrate_bias,
        initial_membrane: cfg.calibration.initial_membrane,
    };
    let conv = convert(model, &cache, &opts).stage(Stage::Convert)?;
    let cache = if cfg.calibration.calibrate_bias {
        calibration_cache(cfg, &conv.model, data)?
    } else {
        cache
    };
    Ok(Converted {
        model: conv.model,
        configs: conv.configs,
        fits: conv.fits,
        cache,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LayerReport {
    pub layer: usize,
    pub v_th: f64,
    /// Threshold fit of the conversion, absent for searched configurations.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub fit_mse: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub degenerate: Option<bool>,
    pub error: f64,
    pub clipping: f64,
    pub quantization: f64,
    pub unevenness: f64,
    pub propagated: f64,
    pub local: f64,
}

/// Per-layer thresholds and mean absolute error components at `timesteps`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CalibrationReport {
    pub timesteps: usize,
    pub samples: usize,
    pub model_digest: String,
    pub mean_abs_error: f64,
    pub mean_abs_unevenness: f64,
    pub layers: Vec<LayerReport>,
}

pub fn layer_reports(configs: &[SnnConfigF32], metrics: &ConversionMetrics<f32>) -> Vec<LayerReport> {
    metrics
        .summary
        .iter()
        .zip(configs)
        .map(|(s, c)| LayerReport {
            layer: s.layer,
            v_th: c.v_th() as f64,
            fit_mse: None,
            degenerate: None,
            error: s.error.mean_abs,
            clipping: s.clipping.mean_abs,
            quantization: s.quantization.mean_abs,
            unevenness: s.unevenness.mean_abs,
            propagated: s.propagated.mean_abs,
            local: s.local.mean_abs,
        })
        .collect()
}

pub fn calibration_report(cfg: &RunConfig, conv: &Converted) -> Result<CalibrationReport, CliError> {
    let metrics = measure_unevenness(&conv.model, &conv.configs, &conv.cache, cfg.timesteps, &sim_options(cfg))
        .stage(Stage::Convert)?;
    let mut layers = layer_reports(&conv.configs, &metrics);
    for (l, f) in layers.iter_mut().zip(&conv.fits) {
        l.fit_mse = Some(f.best_mse());
        l.degenerate = Some(f.degenerate);
    }
    Ok(CalibrationReport {
        timesteps: cfg.timesteps,
        samples: conv.cache.len(),
        model_digest: conv.cache.model_digest().to_string(),
        mean_abs_error: metrics.mean_abs_error(),
        mean_abs_unevenness: metrics.mean_abs_unevenness(),
        layers,
    })
}

/// A table, the search over it and the configurations it produced.
pub struct Search {
    pub table: SensitivityTable,
    pub budget: SearchBudget,
    pub outcome: SearchOutcome,
    pub configs: Vec<SnnConfigF32>,
}

impl Search {
    pub fn plan(&self) -> &LayerPlan {
        self.outcome.plan()
    }
}

fn run_search(
    table: SensitivityTable,
    budget: SearchBudget,
    base: &[SnnConfigF32],
    stage: Stage,
) -> Result<Search, CliError> {
    let outcome = pareto_search(&table, budget).stage(stage)?;
    if !outcome.is_feasible() {
        log::warn!(
            "{stage}: no plan meets the cap {:e}; using the cheapest plan {:?}",
            budget.cap(),
            outcome.plan().choice
        );
    }
    let configs = apply_plan(base, outcome.plan()).stage(stage)?;
    Ok(Search {
        table,
        budget,
        outcome,
        configs,
    })
}

/// Burst search at `cfg.timesteps` under the energy target.
pub fn search_phi(
    cfg: &RunConfig,
    model: &ModelF32,
    base: &[SnnConfigF32],
    cache: &CalibrationCache<f32>,
) -> Result<Search, CliError> {
    let em = cfg.energy_model()?;
    let table = build_table(
        model,
        base,
        cache,
        cfg.timesteps,
        ParamKind::Phi,
        &cfg.search.phi_candidates,
        &em,
        &sim_options(cfg),
    )
    .stage(Stage::SearchPhi)?;
    let cap = match cfg.search.e_target {
        EnergyTarget::Absolute(v) => v,
        EnergyTarget::UniformPhi(p) => table.uniform_energy(p).stage(Stage::SearchPhi)?,
    };
    run_search(table, SearchBudget::EnergyCap(cap), base, Stage::SearchPhi)
}

/// Compression search on top of the burst configurations.
pub fn search_rho(
    cfg: &RunConfig,
    model: &ModelF32,
    phi_configs: &[SnnConfigF32],
    cache: &CalibrationCache<f32>,
) -> Result<Search, CliError> {
    let em = cfg.energy_model()?;
    let table = build_table(
        model,
        phi_configs,
        cache,
        cfg.timesteps,
        ParamKind::Rho,
        &cfg.search.rho_candidates,
        &em,
        &sim_options(cfg),
    )
    .stage(Stage::SearchRho)?;
    let cap = match cfg.search.s_target {
        SensitivityTarget::Absolute(v) => v,
        SensitivityTarget::Relative(m) => m * table.uniform_sensitivity(1).stage(Stage::SearchRho)?,
    };
    run_search(table, SearchBudget::SensitivityCap(cap), phi_configs, Stage::SearchRho)
}

/// Per-layer error components of several configurations at the unevenness
/// timestep count.
pub fn unevenness_rows(
    cfg: &RunConfig,
    model: &ModelF32,
    cache: &CalibrationCache<f32>,
    named: &[(&str, &[SnnConfigF32])],
) -> Result<Vec<(String, f64, Vec<LayerReport>)>, CliError> {
    let mut rows = Vec::new();
    for (name, configs) in named {
        let m = measure_unevenness(model, configs, cache, cfg.calibration.unevenness_timesteps, &sim_options(cfg))
            .stage(Stage::SearchPhi)?;
        rows.push((name.to_string(), m.mean_abs_unevenness(), layer_reports(configs, &m)));
    }
    Ok(rows)
}

pub fn fit_exit(
    cfg: &RunConfig,
    model: &ModelF32,
    configs: &[SnnConfigF32],
    cache: &CalibrationCache<f32>,
    params: ExitParams,
) -> Result<ExitPolicy, CliError> {
    fit_exit_policy(model, configs, cache, cfg.t_max(), params, &sim_options(cfg)).stage(Stage::FitExit)
}

/// Accuracy and per-sample cost of one configuration on a dataset.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Evaluation {
    pub accuracy: f64,
    pub mean_t: f64,
    pub spike_count: u64,
    /// Mean energy per sample.
    pub energy: f64,
}

pub fn evaluate_fixed(
    cfg: &RunConfig,
    model: &ModelF32,
    configs: &[SnnConfigF32],
    data: &DatasetF32,
    timesteps: usize,
    stage: Stage,
) -> Result<Evaluation, CliError> {
    let em = cfg.energy_model()?;
    let run = run_snn_chunked(model, configs, data.images(), timesteps, &sim_options(cfg), SIM_CHUNK).stage(stage)?;
    let preds: Vec<usize> = run.scores.rows().map(argmax).collect();
    Ok(Evaluation {
        accuracy: data.accuracy(&preds),
        mean_t: timesteps as f64,
        spike_count: run.stats.spike_count,
        energy: energy_of(&run.stats, &em) / data.len() as f64,
    })
}

pub fn evaluate_adaptive(
    cfg: &RunConfig,
    model: &ModelF32,
    configs: &[SnnConfigF32],
    policy: &ExitPolicy,
    data: &DatasetF32,
    stage: Stage,
) -> Result<(Evaluation, ExitTrace), CliError> {
    let em = cfg.energy_model()?;
    let trace = infer_adaptive(model, configs, policy, data.images(), Some(data.labels()), &sim_options(cfg))
        .stage(stage)?;
    Ok((evaluation_of(&trace, &em, data.len()), trace))
}

pub fn evaluation_of(trace: &ExitTrace, em: &EnergyModel, n: usize) -> Evaluation {
    Evaluation {
        accuracy: trace.accuracy(),
        mean_t: trace.mean_t(),
        spike_count: trace.spike_count(),
        energy: trace.energy(em) / n as f64,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AblationRow {
    pub name: String,
    pub adafire: bool,
    pub ssc: bool,
    pub iat: bool,
    pub accuracy_pct: f64,
    pub energy: f64,
    pub mean_t: f64,
    pub spike_count: u64,
    /// Relative energy change against the first row, in percent.
    pub energy_delta_pct: f64,
}

/// The five technique combinations, each evaluated on `data`: baseline,
/// +AdaFire, +AdaFire+SSC, +AdaFire+IAT and all three.
#[allow(clippy::too_many_arguments)]
pub fn ablate(
    cfg: &RunConfig,
    model: &ModelF32,
    base: &[SnnConfigF32],
    phi: &[SnnConfigF32],
    rho: &[SnnConfigF32],
    cache: &CalibrationCache<f32>,
    params: ExitParams,
    data: &DatasetF32,
) -> Result<Vec<AblationRow>, CliError> {
    let combos: [(&str, bool, bool, bool, &[SnnConfigF32]); 5] = [
        ("baseline", false, false, false, base),
        ("+adafire", true, false, false, phi),
        ("+adafire+ssc", true, true, false, rho),
        ("+adafire+iat", true, false, true, phi),
        ("adafire+ssc+iat", true, true, true, rho),
    ];
    let mut rows = Vec::with_capacity(combos.len());
    for (name, adafire, ssc, iat, configs) in combos {
        let eval = if iat {
            let policy = fit_exit(cfg, model, configs, cache, params)?;
            evaluate_adaptive(cfg, model, configs, &policy, data, Stage::Ablate)?.0
        } else {
            evaluate_fixed(cfg, model, configs, data, cfg.timesteps, Stage::Ablate)?
        };
        rows.push(AblationRow {
            name: name.to_string(),
            adafire,
            ssc,
            iat,
            accuracy_pct: 100.0 * eval.accuracy,
            energy: eval.energy,
            mean_t: eval.mean_t,
            spike_count: eval.spike_count,
            energy_delta_pct: 0.0,
        });
    }
    let baseline = rows[0].energy;
    if !(baseline > 0.0) {
        return Err(CliError::user(Stage::Ablate, "baseline emitted no spikes; energy deltas are undefined"));
    }
    for r in &mut rows {
        r.energy_delta_pct = 100.0 * (r.energy - baseline) / baseline;
    }
    Ok(rows)
}
