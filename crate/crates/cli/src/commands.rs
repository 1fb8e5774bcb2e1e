//! The eight commands. Each reads its inputs from the run directory, calls the
//! matching stage and writes its outputs atomically.

use std::path::{Path, PathBuf};

use adacal::store::write_atomic;
use adacal::{
    load_model, run_snn_chunked, save_model, CalibrationCache, ExitPolicy, LayerPlan, LayerSnnConfig, ModelF32,
    SearchBudget, SnnConfigF32,
};
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{CliError, Stage, StageExt};
use crate::stages::{self, AblationRow, CalibrationReport, Evaluation, Search};

/// File names inside the run directory.
pub mod files {
    pub const MODEL: &str = "model.bin";
    pub const TRAIN_REPORT: &str = "train_report.toml";
    pub const CONVERTED: &str = "converted.bin";
    pub const CACHE: &str = "calibration_cache.bin";
    pub const CONFIGS_BASE: &str = "configs_base.toml";
    pub const CALIBRATION_REPORT: &str = "calibration_report.toml";
    pub const PHI_TABLE: &str = "phi_table.csv";
    pub const PHI_PLAN: &str = "phi_plan.toml";
    pub const CONFIGS_PHI: &str = "configs_phi.toml";
    pub const UNEVENNESS: &str = "unevenness.csv";
    pub const RHO_TABLE: &str = "rho_table.csv";
    pub const RHO_PLAN: &str = "rho_plan.toml";
    pub const CONFIGS_RHO: &str = "configs_rho.toml";
    pub const EXIT_POLICY: &str = "exit_policy.toml";
    pub const EVAL: &str = "eval.csv";
    pub const EXIT_TRACE: &str = "exit_trace.csv";
    pub const ABLATION: &str = "ablation.csv";
    pub const ACCURACY_VS_T: &str = "accuracy_vs_t.csv";
    pub const FRONTIER_PHI: &str = "frontier_phi.csv";
    pub const FRONTIER_RHO: &str = "frontier_rho.csv";
    pub const EXIT_HISTOGRAM: &str = "exit_histogram.csv";

    /// Inputs of the report command.
    pub const REPORT_INPUTS: [&str; 9] = [
        CONVERTED,
        CACHE,
        CONFIGS_BASE,
        CONFIGS_PHI,
        CONFIGS_RHO,
        PHI_PLAN,
        RHO_PLAN,
        EXIT_POLICY,
        EXIT_TRACE,
    ];
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Command {
    Train,
    Convert,
    SearchPhi,
    SearchRho,
    FitExit,
    Eval,
    Ablate,
    Report,
}

impl Command {
    pub const ALL: [Command; 8] = [
        Command::Train,
        Command::Convert,
        Command::SearchPhi,
        Command::SearchRho,
        Command::FitExit,
        Command::Eval,
        Command::Ablate,
        Command::Report,
    ];

    pub fn stage(self) -> Stage {
        match self {
            Command::Train => Stage::Train,
            Command::Convert => Stage::Convert,
            Command::SearchPhi => Stage::SearchPhi,
            Command::SearchRho => Stage::SearchRho,
            Command::FitExit => Stage::FitExit,
            Command::Eval => Stage::Eval,
            Command::Ablate => Stage::Ablate,
            Command::Report => Stage::Report,
        }
    }
}

pub fn run(cmd: Command, cfg: &RunConfig) -> Result<(), CliError> {
    cfg.validate()?;
    let run = RunDir::new(&cfg.out, cmd.stage());
    match cmd {
        Command::Train => cmd_train(cfg, &run),
        Command::Convert => cmd_convert(cfg, &run),
        Command::SearchPhi => cmd_search_phi(cfg, &run),
        Command::SearchRho => cmd_search_rho(cfg, &run),
        Command::FitExit => cmd_fit_exit(cfg, &run),
        Command::Eval => cmd_eval(cfg, &run),
        Command::Ablate => cmd_ablate(cfg, &run),
        Command::Report => cmd_report(cfg, &run),
    }
}

/// Run directory bound to the stage that reads and writes it.
struct RunDir<'a> {
    root: &'a Path,
    stage: Stage,
}

impl<'a> RunDir<'a> {
    fn new(root: &'a Path, stage: Stage) -> Self {
        RunDir { root, stage }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    /// Path of an input that an earlier command should have produced.
    fn input(&self, name: &str) -> Result<PathBuf, CliError> {
        let p = self.path(name);
        if p.is_file() {
            Ok(p)
        } else {
            Err(CliError::user(
                self.stage,
                format!("missing {} (run the command that produces it first)", p.display()),
            ))
        }
    }

    fn write(&self, name: &str, bytes: &[u8]) -> Result<(), CliError> {
        write_atomic(&self.path(name), bytes).stage(self.stage)
    }

    fn write_toml<T: Serialize>(&self, name: &str, value: &T) -> Result<(), CliError> {
        let text = toml::to_string(value)
            .map_err(|e| CliError::internal(self.stage, format!("cannot serialize {name}: {e}")))?;
        self.write(name, text.as_bytes())
    }

    fn read_toml<T: for<'de> Deserialize<'de>>(&self, name: &str) -> Result<T, CliError> {
        let p = self.input(name)?;
        let text = std::fs::read_to_string(&p)
            .map_err(|e| CliError::user(self.stage, format!("cannot read {}: {e}", p.display())))?;
        toml::from_str(&text).map_err(|e| CliError::user(self.stage, format!("{}: {e}", p.display())))
    }

    fn write_csv<F>(&self, name: &str, fill: F) -> Result<(), CliError>
    where
        F: FnOnce(&mut Vec<u8>) -> adacal::Result<()>,
    {
        let mut buf = Vec::new();
        fill(&mut buf).stage(self.stage)?;
        self.write(name, &buf)
    }

    fn model(&self, name: &str) -> Result<ModelF32, CliError> {
        load_model(&self.input(name)?).stage(self.stage)
    }

    fn cache(&self) -> Result<CalibrationCache<f32>, CliError> {
        CalibrationCache::load(&self.input(files::CACHE)?).stage(self.stage)
    }

    fn configs(&self, name: &str) -> Result<Vec<SnnConfigF32>, CliError> {
        let file: ConfigsFile = self.read_toml(name)?;
        file.layer
            .into_iter()
            .map(|c| LayerSnnConfig::new(c.v_th, c.rho, c.phi))
            .collect::<adacal::Result<Vec<_>>>()
            .stage(self.stage)
    }

    fn write_configs(&self, name: &str, configs: &[SnnConfigF32]) -> Result<(), CliError> {
        let file = ConfigsFile {
            layer: configs
                .iter()
                .map(|c| ConfigRow {
                    v_th: c.v_th(),
                    rho: c.rho(),
                    phi: c.phi(),
                })
                .collect(),
        };
        self.write_toml(name, &file)
    }
}

#[derive(Serialize, Deserialize)]
struct ConfigRow {
    v_th: f32,
    rho: u32,
    phi: u32,
}

/// Per-layer spiking configuration file.
#[derive(Serialize, Deserialize)]
struct ConfigsFile {
    layer: Vec<ConfigRow>,
}

#[derive(Serialize)]
struct TrainSummary {
    epochs: usize,
    train_accuracy: f64,
    eval_accuracy: f64,
    parameters: usize,
    model_digest: String,
    epoch_loss: Vec<f64>,
}

/// Search result as written to disk.
#[derive(Serialize, Deserialize)]
pub struct PlanFile {
    pub feasible: bool,
    pub budget: SearchBudget,
    pub plan: LayerPlan,
}

#[derive(Serialize, Deserialize)]
struct PolicyFile {
    /// Which configuration file the policy was fitted on.
    configs: String,
    policy: ExitPolicy,
}

fn cmd_train(cfg: &RunConfig, run: &RunDir) -> Result<(), CliError> {
    let (train, test) = stages::load_data(cfg)?;
    let (model, report) = stages::train(cfg, &train)?;
    let summary = TrainSummary {
        epochs: cfg.model.epochs,
        train_accuracy: stages::ann_accuracy(&model, &train, Stage::Train)?,
        eval_accuracy: stages::ann_accuracy(&model, &test, Stage::Train)?,
        parameters: model.param_count(),
        model_digest: adacal::model_digest(&model),
        epoch_loss: report.epoch_loss,
    };
    log::info!(
        "trained {} parameters: train accuracy {:.4}, eval accuracy {:.4}",
        summary.parameters,
        summary.train_accuracy,
        summary.eval_accuracy
    );
    save_model(&model, &run.path(files::MODEL)).stage(Stage::Train)?;
    run.write_toml(files::TRAIN_REPORT, &summary)
}

fn cmd_convert(cfg: &RunConfig, run: &RunDir) -> Result<(), CliError> {
    let model = run.model(files::MODEL)?;
    let (train, _) = stages::load_data(cfg)?;
    let conv = stages::convert_model(cfg, &model, &train)?;
    let report: CalibrationReport = stages::calibration_report(cfg, &conv)?;
    if report.layers.len() != conv.model.spiking_layers().len() {
        return Err(CliError::internal(Stage::Convert, "report misses spiking layers"));
    }
    for l in &report.layers {
        log::info!("layer {}: v_th {:.5}, mean |error| {:.5}", l.layer, l.v_th, l.error);
    }
    save_model(&conv.model, &run.path(files::CONVERTED)).stage(Stage::Convert)?;
    conv.cache.save(&run.path(files::CACHE)).stage(Stage::Convert)?;
    run.write_configs(files::CONFIGS_BASE, &conv.configs)?;
    run.write_toml(files::CALIBRATION_REPORT, &report)
}

fn write_search(run: &RunDir, search: &Search, table: &str, plan: &str, configs: &str) -> Result<(), CliError> {
    run.write_csv(table, |b| search.table.write_csv(b))?;
    run.write_toml(
        plan,
        &PlanFile {
            feasible: search.outcome.is_feasible(),
            budget: search.budget,
            plan: search.plan().clone(),
        },
    )?;
    run.write_configs(configs, &search.configs)
}

fn cmd_search_phi(cfg: &RunConfig, run: &RunDir) -> Result<(), CliError> {
    let model = run.model(files::CONVERTED)?;
    let cache = run.cache()?;
    let base = run.configs(files::CONFIGS_BASE)?;
    let search = stages::search_phi(cfg, &model, &base, &cache)?;
    log::info!("burst plan {:?}", search.plan().choice);
    let rows = stages::unevenness_rows(cfg, &model, &cache, &[("base", &base), ("phi_plan", &search.configs)])?;
    write_search(run, &search, files::PHI_TABLE, files::PHI_PLAN, files::CONFIGS_PHI)?;
    run.write_csv(files::UNEVENNESS, |b| {
        let mut w = csv::Writer::from_writer(b);
        w.write_record([
            "config",
            "timesteps",
            "layer",
            "error",
            "clipping",
            "quantization",
            "unevenness",
            "propagated",
            "local",
        ])?;
        for (name, _, layers) in &rows {
            for l in layers {
                w.write_record([
                    name.clone(),
                    cfg.calibration.unevenness_timesteps.to_string(),
                    l.layer.to_string(),
                    l.error.to_string(),
                    l.clipping.to_string(),
                    l.quantization.to_string(),
                    l.unevenness.to_string(),
                    l.propagated.to_string(),
                    l.local.to_string(),
                ])?;
            }
        }
        w.flush().map_err(|e| adacal::Error::io(files::UNEVENNESS, e))
    })
}

fn cmd_search_rho(cfg: &RunConfig, run: &RunDir) -> Result<(), CliError> {
    let model = run.model(files::CONVERTED)?;
    let cache = run.cache()?;
    let phi = run.configs(files::CONFIGS_PHI)?;
    let search = stages::search_rho(cfg, &model, &phi, &cache)?;
    log::info!("compression plan {:?}", search.plan().choice);
    write_search(run, &search, files::RHO_TABLE, files::RHO_PLAN, files::CONFIGS_RHO)
}

/// The most processed configuration file present: compressed, burst, base.
fn final_configs(run: &RunDir) -> Result<(&'static str, Vec<SnnConfigF32>), CliError> {
    for name in [files::CONFIGS_RHO, files::CONFIGS_PHI] {
        if run.path(name).is_file() {
            return Ok((name, run.configs(name)?));
        }
    }
    Ok((files::CONFIGS_BASE, run.configs(files::CONFIGS_BASE)?))
}

fn cmd_fit_exit(cfg: &RunConfig, run: &RunDir) -> Result<(), CliError> {
    let model = run.model(files::CONVERTED)?;
    let cache = run.cache()?;
    let (name, configs) = final_configs(run)?;
    let policy = stages::fit_exit(cfg, &model, &configs, &cache, cfg.exit_params())?;
    log::info!("exit boundaries {:?}", policy.alphas);
    run.write_toml(
        files::EXIT_POLICY,
        &PolicyFile {
            configs: name.to_string(),
            policy,
        },
    )
}

fn cmd_eval(cfg: &RunConfig, run: &RunDir) -> Result<(), CliError> {
    let model = run.model(files::CONVERTED)?;
    let (_, test) = stages::load_data(cfg)?;
    let policy_file: PolicyFile = run.read_toml(files::EXIT_POLICY)?;
    let mut rows: Vec<(String, Evaluation)> = Vec::new();
    rows.push((
        "ann".into(),
        Evaluation {
            accuracy: stages::ann_accuracy(&model, &test, Stage::Eval)?,
            mean_t: 0.0,
            spike_count: 0,
            energy: 0.0,
        },
    ));
    for name in [files::CONFIGS_BASE, files::CONFIGS_PHI, files::CONFIGS_RHO] {
        if run.path(name).is_file() {
            let configs = run.configs(name)?;
            let e = stages::evaluate_fixed(cfg, &model, &configs, &test, cfg.timesteps, Stage::Eval)?;
            rows.push((config_label(name).to_string(), e));
        }
    }
    let configs = run.configs(&policy_file.configs)?;
    let (e, trace) = stages::evaluate_adaptive(cfg, &model, &configs, &policy_file.policy, &test, Stage::Eval)?;
    rows.push((format!("{}+exit", config_label(&policy_file.configs)), e));
    for (name, e) in &rows {
        log::info!("{name}: accuracy {:.4}, mean T {:.3}", e.accuracy, e.mean_t);
    }
    run.write_csv(files::EVAL, |b| {
        let mut w = csv::Writer::from_writer(b);
        w.write_record(["config", "accuracy", "mean_t", "spike_count", "energy"])?;
        for (name, e) in &rows {
            w.write_record([
                name.clone(),
                e.accuracy.to_string(),
                e.mean_t.to_string(),
                e.spike_count.to_string(),
                e.energy.to_string(),
            ])?;
        }
        w.flush().map_err(|e| adacal::Error::io(files::EVAL, e))
    })?;
    run.write_csv(files::EXIT_TRACE, |b| trace.write_csv(b))
}

fn config_label(file: &str) -> &str {
    file.trim_start_matches("configs_").trim_end_matches(".toml")
}

pub const ABLATION_HEADER: [&str; 9] = [
    "combination",
    "adafire",
    "ssc",
    "iat",
    "accuracy_pct",
    "energy",
    "mean_t",
    "spike_count",
    "energy_delta_pct",
];

pub fn write_ablation(rows: &[AblationRow], out: &mut Vec<u8>) -> adacal::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(ABLATION_HEADER)?;
    for r in rows {
        w.write_record([
            r.name.clone(),
            r.adafire.to_string(),
            r.ssc.to_string(),
            r.iat.to_string(),
            r.accuracy_pct.to_string(),
            r.energy.to_string(),
            r.mean_t.to_string(),
            r.spike_count.to_string(),
            r.energy_delta_pct.to_string(),
        ])?;
    }
    w.flush().map_err(|e| adacal::Error::io(files::ABLATION, e))
}

fn cmd_ablate(cfg: &RunConfig, run: &RunDir) -> Result<(), CliError> {
    let model = run.model(files::CONVERTED)?;
    let cache = run.cache()?;
    let base = run.configs(files::CONFIGS_BASE)?;
    let phi = run.configs(files::CONFIGS_PHI)?;
    let rho = run.configs(files::CONFIGS_RHO)?;
    let (_, test) = stages::load_data(cfg)?;
    let rows = stages::ablate(cfg, &model, &base, &phi, &rho, &cache, cfg.exit_params(), &test)?;
    if rows[0].energy_delta_pct != 0.0 {
        return Err(CliError::internal(Stage::Ablate, "baseline energy delta is not zero"));
    }
    for r in &rows {
        log::info!(
            "{:16} accuracy {:6.2}% energy {:+.2}% mean T {:.2}",
            r.name,
            r.accuracy_pct,
            r.energy_delta_pct,
            r.mean_t
        );
    }
    run.write_csv(files::ABLATION, |b| write_ablation(&rows, b))
}

/// Input files of the report command that are absent from `dir`.
pub fn missing_report_inputs(dir: &Path) -> Vec<&'static str> {
    files::REPORT_INPUTS
        .iter()
        .copied()
        .filter(|f| !dir.join(f).is_file())
        .collect()
}

fn cmd_report(cfg: &RunConfig, run: &RunDir) -> Result<(), CliError> {
    let missing = missing_report_inputs(run.root);
    if !missing.is_empty() {
        return Err(CliError::user(
            Stage::Report,
            format!("{} lacks {}", run.root.display(), missing.join(", ")),
        ));
    }
    let model = run.model(files::CONVERTED)?;
    let (_, test) = stages::load_data(cfg)?;
    let em = cfg.energy_model()?;
    let sim = stages::sim_options(cfg);

    let mut curves = Vec::new();
    for name in [files::CONFIGS_BASE, files::CONFIGS_PHI, files::CONFIGS_RHO] {
        let configs = run.configs(name)?;
        for &t in &cfg.report.timesteps {
            let r = run_snn_chunked(&model, &configs, test.images(), t, &sim, adacal::calibration::SIM_CHUNK)
                .stage(Stage::Report)?;
            let preds: Vec<usize> = r.scores.rows().map(adacal::argmax).collect();
            curves.push((
                config_label(name),
                t,
                test.accuracy(&preds),
                r.stats.spike_count,
                adacal::energy_of(&r.stats, &em) / test.len() as f64,
            ));
        }
    }
    run.write_csv(files::ACCURACY_VS_T, |b| {
        let mut w = csv::Writer::from_writer(b);
        w.write_record(["config", "timesteps", "accuracy", "spike_count", "energy"])?;
        for (name, t, acc, spikes, energy) in &curves {
            w.write_record([
                name.to_string(),
                t.to_string(),
                acc.to_string(),
                spikes.to_string(),
                energy.to_string(),
            ])?;
        }
        w.flush().map_err(|e| adacal::Error::io(files::ACCURACY_VS_T, e))
    })?;

    for (plan, out) in [(files::PHI_PLAN, files::FRONTIER_PHI), (files::RHO_PLAN, files::FRONTIER_RHO)] {
        let file: PlanFile = run.read_toml(plan)?;
        check_nondominated(&file.plan)?;
        run.write_csv(out, |b| write_frontier(&file.plan, b))?;
    }

    let policy: PolicyFile = run.read_toml(files::EXIT_POLICY)?;
    let counts = exit_histogram(&run.input(files::EXIT_TRACE)?, policy.policy.t_max)?;
    run.write_csv(files::EXIT_HISTOGRAM, |b| {
        let mut w = csv::Writer::from_writer(b);
        w.write_record(["exit_t", "count"])?;
        for (t, c) in counts.iter().enumerate() {
            w.write_record([(t + 1).to_string(), c.to_string()])?;
        }
        w.flush().map_err(|e| adacal::Error::io(files::EXIT_HISTOGRAM, e))
    })
}

/// Rows `s_sum,e_sum,choice,chosen`; the choice is `;`-separated.
pub fn write_frontier(plan: &LayerPlan, out: &mut Vec<u8>) -> adacal::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["s_sum", "e_sum", "choice", "chosen"])?;
    for p in &plan.frontier {
        let choice: Vec<String> = p.choice.iter().map(u32::to_string).collect();
        w.write_record([
            p.s_sum.to_string(),
            p.e_sum.to_string(),
            choice.join(";"),
            (p.choice == plan.choice).to_string(),
        ])?;
    }
    w.flush().map_err(|e| adacal::Error::io("frontier", e))
}

fn check_nondominated(plan: &LayerPlan) -> Result<(), CliError> {
    let f = &plan.frontier;
    for a in f {
        for b in f {
            let dominates = b.s_sum <= a.s_sum && b.e_sum <= a.e_sum && (b.s_sum < a.s_sum || b.e_sum < a.e_sum);
            if dominates {
                return Err(CliError::internal(
                    Stage::Report,
                    format!("frontier point {:?} is dominated by {:?}", a.choice, b.choice),
                ));
            }
        }
    }
    Ok(())
}

fn exit_histogram(path: &Path, t_max: usize) -> Result<Vec<usize>, CliError> {
    let bad = |msg: String| CliError::user(Stage::Report, format!("{}: {msg}", path.display()));
    let mut r = csv::Reader::from_path(path).map_err(|e| bad(e.to_string()))?;
    let col = r
        .headers()
        .map_err(|e| bad(e.to_string()))?
        .iter()
        .position(|h| h == "exit_t")
        .ok_or_else(|| bad("no exit_t column".into()))?;
    let mut counts = vec![0usize; t_max];
    for rec in r.records() {
        let rec = rec.map_err(|e| bad(e.to_string()))?;
        let t: usize = rec[col].parse().map_err(|_| bad(format!("bad exit_t {:?}", &rec[col])))?;
        if t == 0 || t > t_max {
            return Err(bad(format!("exit_t {t} outside 1..={t_max}")));
        }
        counts[t - 1] += 1;
    }
    Ok(counts)
}

#[cfg(test)]
mod tests {
    use super::*;
    use adacal::search::FrontierPoint;
    use adacal::ParamKind;

    fn point(s: f64, e: f64, c: u32) -> FrontierPoint {
        FrontierPoint {
            s_sum: s,
            e_sum: e,
            choice: vec![c],
        }
    }

    #[test]
    fn empty_dir_lists_every_report_input() {
        let dir = tempfile::tempdir().unwrap();
        assert_eq!(missing_report_inputs(dir.path()), files::REPORT_INPUTS.to_vec());
        let cfg = RunConfig {
            out: dir.path().to_path_buf(),
            ..RunConfig::default()
        };
        let err = run(Command::Report, &cfg).unwrap_err();
        assert_eq!(err.exit_code(), 1);
        for f in files::REPORT_INPUTS {
            assert!(err.to_string().contains(f), "{err}");
        }
        assert!(err.to_string().starts_with("report: "));
    }

    #[test]
    fn missing_model_is_a_tagged_user_error() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = RunConfig {
            out: dir.path().to_path_buf(),
            ..RunConfig::default()
        };
        let err = run(Command::Convert, &cfg).unwrap_err();
        assert_eq!(err.exit_code(), 1);
        assert!(err.to_string().starts_with("convert: missing "), "{err}");
    }

    #[test]
    fn frontier_csv_and_dominance_check() {
        let plan = LayerPlan {
            kind: ParamKind::Phi,
            choice: vec![2],
            s_sum: 0.5,
            e_sum: 2.0,
            frontier: vec![point(1.0, 1.0, 1), point(0.5, 2.0, 2)],
        };
        check_nondominated(&plan).unwrap();
        let mut buf = Vec::new();
        write_frontier(&plan, &mut buf).unwrap();
        assert_eq!(
            String::from_utf8(buf).unwrap(),
            "s_sum,e_sum,choice,chosen\n1,1,1,false\n0.5,2,2,true\n"
        );
        let bad = LayerPlan {
            frontier: vec![point(1.0, 1.0, 1), point(1.0, 2.0, 2)],
            ..plan
        };
        assert_eq!(check_nondominated(&bad).unwrap_err().exit_code(), 2);
    }

    #[test]
    fn configs_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let run = RunDir::new(dir.path(), Stage::Convert);
        let configs = vec![
            LayerSnnConfig::new(0.3f32, 1, 2).unwrap(),
            LayerSnnConfig::new(1.7f32, 4, 1).unwrap(),
        ];
        run.write_configs("c.toml", &configs).unwrap();
        assert_eq!(run.configs("c.toml").unwrap(), configs);
        std::fs::write(dir.path().join("bad.toml"), "[[layer]]\nv_th = 1.0\nrho = 0\nphi = 1\n").unwrap();
        assert!(run.configs("bad.toml").is_err());
    }
}
