//! Budgeted per-layer searches over burst counts (`phi`) and compression
//! ratios (`rho`), driven by a KL sensitivity table and a spike energy model.

use std::fmt;
use std::io::{Read, Write};
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::calibration::SIM_CHUNK;
use crate::engine::{run_snn_chunked, LayerSnnConfig, RunStats, SimOptions};
use crate::error::{Error, Result};
use crate::model::ModelGraph;
use crate::scalar::Scalar;
use crate::store::CalibrationCache;

/// Default energy per spike, 77 fJ.
pub const DEFAULT_MU: f64 = 77e-15;

/// Probability floor used by [`kl_divergence`].
pub const KL_EPS: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EnergyMode {
    /// Every unit spike costs `mu`.
    SpikeCount,
    /// Every unit spike costs `mu` per synapse it reaches.
    Synop,
}

impl FromStr for EnergyMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "spike_count" | "spike-count" => Ok(EnergyMode::SpikeCount),
            "synop" => Ok(EnergyMode::Synop),
            other => Err(Error::InvalidArgument(format!("unknown energy mode {other:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnergyModel {
    /// Joules per spike.
    pub mu: f64,
    pub mode: EnergyMode,
}

impl Default for EnergyModel {
    fn default() -> Self {
        EnergyModel {
            mu: DEFAULT_MU,
            mode: EnergyMode::SpikeCount,
        }
    }
}

impl EnergyModel {
    pub fn new(mu: f64, mode: EnergyMode) -> Result<Self> {
        if !(mu > 0.0 && mu.is_finite()) {
            return Err(Error::InvalidArgument(format!("energy per spike {mu} must be > 0")));
        }
        Ok(EnergyModel { mu, mode })
    }

    /// `spikes * mu / 1e-3`, with spikes weighted by `fan_out` in synop mode.
    pub fn energy(&self, spikes: u64, fan_out: f64) -> f64 {
        let weight = match self.mode {
            EnergyMode::SpikeCount => 1.0,
            EnergyMode::Synop => fan_out,
        };
        spikes as f64 * weight * self.mu / 1e-3
    }
}

/// Energy of a whole run, summed over layers and samples.
pub fn energy_of<S>(stats: &RunStats<S>, em: &EnergyModel) -> f64 {
    (0..stats.per_layer.len()).map(|l| layer_energy(stats, l, em)).sum()
}

/// Energy attributed to spiking layer `layer`, summed over samples.
pub fn layer_energy<S>(stats: &RunStats<S>, layer: usize, em: &EnergyModel) -> f64 {
    em.energy(stats.per_layer[layer], stats.fan_out.get(layer).copied().unwrap_or(1.0))
}

/// Energy of a single sample of the run.
pub fn sample_energy<S>(stats: &RunStats<S>, sample: usize, em: &EnergyModel) -> f64 {
    stats.per_sample[sample]
        .iter()
        .enumerate()
        .map(|(l, &n)| em.energy(n, stats.fan_out.get(l).copied().unwrap_or(1.0)))
        .sum()
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&v| (v - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

fn floored(p: &[f64]) -> Vec<f64> {
    let f: Vec<f64> = p.iter().map(|&v| v.max(KL_EPS)).collect();
    let sum: f64 = f.iter().sum();
    f.into_iter().map(|v| v / sum).collect()
}

/// `KL(p || q)` in nats. Both distributions are floored at [`KL_EPS`] and
/// renormalized; the result is clamped at zero.
pub fn kl_divergence(p: &[f64], q: &[f64]) -> f64 {
    let p = floored(p);
    let q = floored(q);
    let kl: f64 = p.iter().zip(&q).map(|(&a, &b)| a * (a / b).ln()).sum();
    kl.max(0.0)
}

/// Which spiking parameter a table or plan varies.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ParamKind {
    Phi,
    Rho,
}

impl ParamKind {
    pub fn default_candidates(self) -> Vec<u32> {
        match self {
            ParamKind::Phi => vec![1, 2, 3, 4],
            ParamKind::Rho => vec![1, 2, 4],
        }
    }

    fn apply<S: Scalar>(self, cfg: LayerSnnConfig<S>, value: u32) -> Result<LayerSnnConfig<S>> {
        match self {
            ParamKind::Phi => cfg.with_phi(value),
            ParamKind::Rho => cfg.with_rho(value),
        }
    }
}

impl fmt::Display for ParamKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ParamKind::Phi => "phi",
            ParamKind::Rho => "rho",
        })
    }
}

impl FromStr for ParamKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "phi" => Ok(ParamKind::Phi),
            "rho" => Ok(ParamKind::Rho),
            other => Err(Error::InvalidArgument(format!("unknown parameter kind {other:?}"))),
        }
    }
}

/// Sensitivity and energy of setting one layer to one candidate.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Measurement {
    pub sensitivity: f64,
    /// Per-sample energy attributed to the layer.
    pub energy: f64,
}

/// Mean KL between the ANN and the SNN with `configs`, plus per-layer
/// per-sample energies of that SNN.
pub fn measure_configs<S: Scalar>(
    model: &ModelGraph<S>,
    configs: &[LayerSnnConfig<S>],
    cache: &CalibrationCache<S>,
    timesteps: usize,
    em: &EnergyModel,
    opts: &SimOptions,
) -> Result<(f64, Vec<f64>)> {
    if cache.is_empty() {
        return Err(Error::EmptyCache);
    }
    let classes = cache.logits().row_len();
    if classes != model.class_count() {
        return Err(Error::ClassCount {
            model: model.class_count(),
            expected: classes,
        });
    }
    let run = run_snn_chunked(model, configs, cache.inputs(), timesteps, opts, SIM_CHUNK)?;
    let n = cache.len() as f64;
    let kl: f64 = cache
        .logits()
        .rows()
        .zip(run.scores.rows())
        .map(|(a, s)| {
            let p = softmax(&a.iter().map(|v| v.as_f64()).collect::<Vec<_>>());
            let q = softmax(&s.iter().map(|v| v.as_f64()).collect::<Vec<_>>());
            kl_divergence(&p, &q)
        })
        .sum();
    let energies = (0..run.stats.per_layer.len())
        .map(|l| layer_energy(&run.stats, l, em) / n)
        .collect();
    Ok((kl / n, energies))
}

/// `S_i(k)` and `E_i(k)`: layer `layer` set to `candidate`, every other layer
/// left at `base`.
#[allow(clippy::too_many_arguments)]
pub fn layer_sensitivity<S: Scalar>(
    model: &ModelGraph<S>,
    base: &[LayerSnnConfig<S>],
    layer: usize,
    kind: ParamKind,
    candidate: u32,
    cache: &CalibrationCache<S>,
    timesteps: usize,
    em: &EnergyModel,
    opts: &SimOptions,
) -> Result<Measurement> {
    if layer >= base.len() {
        return Err(Error::PlanMismatch(format!(
            "layer {layer} out of range for {} configs",
            base.len()
        )));
    }
    let mut configs = base.to_vec();
    configs[layer] = kind.apply(configs[layer], candidate)?;
    let (sensitivity, energies) = measure_configs(model, &configs, cache, timesteps, em, opts)?;
    Ok(Measurement {
        sensitivity,
        energy: energies[layer],
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct CsvRow {
    layer: usize,
    candidate: u32,
    kind: ParamKind,
    #[serde(rename = "S")]
    s: f64,
    #[serde(rename = "E")]
    e: f64,
    #[serde(rename = "N")]
    n: usize,
}

/// `S_i(k)` and `E_i(k)` for every layer and candidate.
#[derive(Clone, Debug, PartialEq)]
pub struct SensitivityTable {
    pub kind: ParamKind,
    pub candidates: Vec<u32>,
    pub samples: usize,
    /// `[layer][candidate]`
    pub sensitivity: Vec<Vec<f64>>,
    /// `[layer][candidate]`
    pub energy: Vec<Vec<f64>>,
}

impl SensitivityTable {
    pub fn new(
        kind: ParamKind,
        candidates: Vec<u32>,
        samples: usize,
        sensitivity: Vec<Vec<f64>>,
        energy: Vec<Vec<f64>>,
    ) -> Result<Self> {
        let n = candidates.len();
        if n == 0 || sensitivity.is_empty() || sensitivity.len() != energy.len() {
            return Err(Error::InvalidArgument("table needs layers and candidates".into()));
        }
        for (s, e) in sensitivity.iter().zip(&energy) {
            if s.len() != n || e.len() != n {
                return Err(Error::InvalidArgument("every layer needs every candidate".into()));
            }
            if s.iter().chain(e).any(|v| !(v.is_finite() && *v >= 0.0)) {
                return Err(Error::InvalidArgument("table values must be finite and >= 0".into()));
            }
        }
        Ok(SensitivityTable {
            kind,
            candidates,
            samples,
            sensitivity,
            energy,
        })
    }

    pub fn layers(&self) -> usize {
        self.sensitivity.len()
    }

    /// Table sums of a per-layer choice of candidate indices.
    pub fn sums(&self, choice: &[usize]) -> (f64, f64) {
        let mut s = 0.0;
        let mut e = 0.0;
        for (l, &c) in choice.iter().enumerate() {
            s += self.sensitivity[l][c];
            e += self.energy[l][c];
        }
        (s, e)
    }

    /// Energy sum when every layer uses `value`.
    pub fn uniform_energy(&self, value: u32) -> Result<f64> {
        let idx = self.candidate_index(value)?;
        Ok(self.sums(&vec![idx; self.layers()]).1)
    }

    /// Sensitivity sum when every layer uses `value`.
    pub fn uniform_sensitivity(&self, value: u32) -> Result<f64> {
        let idx = self.candidate_index(value)?;
        Ok(self.sums(&vec![idx; self.layers()]).0)
    }

    fn candidate_index(&self, value: u32) -> Result<usize> {
        self.candidates
            .iter()
            .position(|&c| c == value)
            .ok_or_else(|| Error::InvalidArgument(format!("{value} is not a table candidate")))
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        for l in 0..self.layers() {
            for (c, &cand) in self.candidates.iter().enumerate() {
                w.serialize(CsvRow {
                    layer: l,
                    candidate: cand,
                    kind: self.kind,
                    s: self.sensitivity[l][c],
                    e: self.energy[l][c],
                    n: self.samples,
                })?;
            }
        }
        w.flush().map_err(|e| Error::io("<table>", e))
    }

    pub fn read_csv<R: Read>(input: R) -> Result<Self> {
        let mut rows = Vec::new();
        for r in csv::Reader::from_reader(input).deserialize() {
            let row: CsvRow = r?;
            rows.push(row);
        }
        let first = rows
            .first()
            .ok_or_else(|| Error::InvalidArgument("empty sensitivity table".into()))?;
        let (kind, samples) = (first.kind, first.n);
        let mut candidates: Vec<u32> = Vec::new();
        for r in &rows {
            if !candidates.contains(&r.candidate) {
                candidates.push(r.candidate);
            }
        }
        let layers = rows.iter().map(|r| r.layer).max().unwrap_or(0) + 1;
        let mut s = vec![vec![f64::NAN; candidates.len()]; layers];
        let mut e = s.clone();
        for r in &rows {
            if r.kind != kind || r.n != samples {
                return Err(Error::InvalidArgument("mixed kinds or sample counts in table".into()));
            }
            let c = candidates.iter().position(|&x| x == r.candidate).unwrap_or(0);
            s[r.layer][c] = r.s;
            e[r.layer][c] = r.e;
        }
        Self::new(kind, candidates, samples, s, e)
    }
}

/// Measures every `(layer, candidate)` pair against `base`.
#[allow(clippy::too_many_arguments)]
pub fn build_table<S: Scalar>(
    model: &ModelGraph<S>,
    base: &[LayerSnnConfig<S>],
    cache: &CalibrationCache<S>,
    timesteps: usize,
    kind: ParamKind,
    candidates: &[u32],
    em: &EnergyModel,
    opts: &SimOptions,
) -> Result<SensitivityTable> {
    cache.ensure_matches(model)?;
    if candidates.is_empty() {
        return Err(Error::InvalidArgument("no candidates to measure".into()));
    }
    let layers = base.len();
    let pairs: Vec<(usize, usize)> = (0..layers)
        .flat_map(|l| (0..candidates.len()).map(move |c| (l, c)))
        .collect();
    let measured = pairs
        .par_iter()
        .map(|&(l, c)| layer_sensitivity(model, base, l, kind, candidates[c], cache, timesteps, em, opts))
        .collect::<Result<Vec<_>>>()?;
    let mut s = vec![vec![0.0; candidates.len()]; layers];
    let mut e = s.clone();
    for (&(l, c), m) in pairs.iter().zip(&measured) {
        s[l][c] = m.sensitivity;
        e[l][c] = m.energy;
    }
    SensitivityTable::new(kind, candidates.to_vec(), cache.len(), s, e)
}

/// Constraint of a search. The energy cap minimizes total sensitivity, the
/// sensitivity cap minimizes total energy.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SearchBudget {
    EnergyCap(f64),
    SensitivityCap(f64),
}

impl SearchBudget {
    pub fn cap(&self) -> f64 {
        match *self {
            SearchBudget::EnergyCap(c) | SearchBudget::SensitivityCap(c) => c,
        }
    }

    fn check(&self) -> Result<()> {
        let c = self.cap();
        if c.is_nan() || c <= 0.0 {
            return Err(Error::InvalidArgument(format!("budget cap {c} must be > 0")));
        }
        Ok(())
    }

    /// `(objective, constraint)` of a plan with the given sums.
    fn split(&self, s: f64, e: f64) -> (f64, f64) {
        match self {
            SearchBudget::EnergyCap(_) => (s, e),
            SearchBudget::SensitivityCap(_) => (e, s),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrontierPoint {
    pub s_sum: f64,
    pub e_sum: f64,
    pub choice: Vec<u32>,
}

/// Chosen candidate per layer with its table sums and the explored frontier.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerPlan {
    pub kind: ParamKind,
    pub choice: Vec<u32>,
    pub s_sum: f64,
    pub e_sum: f64,
    /// Mutually nondominated plans, by ascending energy.
    pub frontier: Vec<FrontierPoint>,
}

#[derive(Clone, Debug, PartialEq)]
pub enum SearchOutcome {
    Feasible(LayerPlan),
    /// No plan meets the cap; carries the plan with the smallest constrained sum.
    Infeasible { cheapest: LayerPlan, cap: f64 },
}

impl SearchOutcome {
    pub fn plan(&self) -> &LayerPlan {
        match self {
            SearchOutcome::Feasible(p) => p,
            SearchOutcome::Infeasible { cheapest, .. } => cheapest,
        }
    }

    pub fn is_feasible(&self) -> bool {
        matches!(self, SearchOutcome::Feasible(_))
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Solver {
    /// Lagrangian sweep over the trade-off multiplier.
    #[default]
    LambdaSweep,
    /// Enumerates every plan; limited to small tables.
    Exhaustive,
}

/// Largest table the exhaustive solver accepts.
pub const EXHAUSTIVE_MAX_LAYERS: usize = 8;
pub const EXHAUSTIVE_MAX_CANDIDATES: usize = 4;

/// Multipliers swept by the Lagrangian solver before breakpoints are added.
pub fn lambda_grid() -> Vec<f64> {
    let mut grid = vec![0.0];
    grid.extend((0..61).map(|i| 10f64.powf(-6.0 + i as f64 * 0.2)));
    grid.push(f64::INFINITY);
    grid
}

pub fn pareto_search(table: &SensitivityTable, budget: SearchBudget) -> Result<SearchOutcome> {
    pareto_search_with(table, budget, Solver::LambdaSweep)
}

pub fn pareto_search_with(table: &SensitivityTable, budget: SearchBudget, solver: Solver) -> Result<SearchOutcome> {
    budget.check()?;
    let plans = match solver {
        Solver::LambdaSweep => sweep_plans(table, budget),
        Solver::Exhaustive => {
            if table.layers() > EXHAUSTIVE_MAX_LAYERS || table.candidates.len() > EXHAUSTIVE_MAX_CANDIDATES {
                return Err(Error::InvalidArgument(format!(
                    "exhaustive search supports at most {EXHAUSTIVE_MAX_LAYERS} layers and {EXHAUSTIVE_MAX_CANDIDATES} candidates"
                )));
            }
            all_plans(table)
        }
    };
    Ok(choose(table, budget, plans))
}

/// Per-layer argmin of `objective + lambda * constraint`. Ties go to lower
/// energy, then to the earlier candidate.
fn lagrangian_choice(table: &SensitivityTable, budget: SearchBudget, lambda: f64) -> Vec<usize> {
    (0..table.layers())
        .map(|l| {
            let score = |c: usize| {
                let (obj, con) = budget.split(table.sensitivity[l][c], table.energy[l][c]);
                if lambda.is_infinite() {
                    (con, obj)
                } else {
                    (obj + lambda * con, 0.0)
                }
            };
            let mut best = 0;
            for c in 1..table.candidates.len() {
                let (a, b) = (score(c), score(best));
                let better = a.0 < b.0
                    || (a.0 == b.0
                        && (table.energy[l][c] < table.energy[l][best]
                            || (table.energy[l][c] == table.energy[l][best] && a.1 < b.1)));
                if better {
                    best = c;
                }
            }
            best
        })
        .collect()
}

/// Plans from the log grid plus every multiplier at which some layer's
/// argmin can change, and the midpoints between those, so that every vertex
/// of the lower convex hull is visited regardless of the value scales.
fn sweep_plans(table: &SensitivityTable, budget: SearchBudget) -> Vec<Vec<usize>> {
    let mut lambdas = lambda_grid();
    let mut breaks = Vec::new();
    for l in 0..table.layers() {
        let n = table.candidates.len();
        for a in 0..n {
            for b in (a + 1)..n {
                let (oa, ca) = budget.split(table.sensitivity[l][a], table.energy[l][a]);
                let (ob, cb) = budget.split(table.sensitivity[l][b], table.energy[l][b]);
                if ca != cb {
                    let lam = (ob - oa) / (ca - cb);
                    if lam.is_finite() && lam > 0.0 {
                        breaks.push(lam);
                    }
                }
            }
        }
    }
    breaks.sort_by(|a, b| a.total_cmp(b));
    breaks.dedup();
    for w in breaks.windows(2) {
        lambdas.push(0.5 * (w[0] + w[1]));
    }
    if let (Some(&lo), Some(&hi)) = (breaks.first(), breaks.last()) {
        lambdas.push(0.5 * lo);
        lambdas.push(2.0 * hi);
    }
    lambdas.extend(breaks);
    let mut plans: Vec<Vec<usize>> = lambdas.iter().map(|&lam| lagrangian_choice(table, budget, lam)).collect();
    plans.sort();
    plans.dedup();
    plans
}

fn all_plans(table: &SensitivityTable) -> Vec<Vec<usize>> {
    let n = table.candidates.len();
    let total = n.pow(table.layers() as u32);
    (0..total)
        .map(|mut code| {
            (0..table.layers())
                .map(|_| {
                    let c = code % n;
                    code /= n;
                    c
                })
                .collect()
        })
        .collect()
}

fn nondominated(points: &[(f64, f64, Vec<usize>)]) -> Vec<(f64, f64, Vec<usize>)> {
    let dominated = |p: &(f64, f64, Vec<usize>)| {
        points
            .iter()
            .any(|q| q.0 <= p.0 && q.1 <= p.1 && (q.0 < p.0 || q.1 < p.1))
    };
    let mut front: Vec<_> = points.iter().filter(|p| !dominated(p)).cloned().collect();
    front.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.total_cmp(&b.0)).then(a.2.cmp(&b.2)));
    front.dedup_by(|a, b| a.0 == b.0 && a.1 == b.1);
    front
}

fn choose(table: &SensitivityTable, budget: SearchBudget, plans: Vec<Vec<usize>>) -> SearchOutcome {
    let points: Vec<(f64, f64, Vec<usize>)> = plans
        .into_iter()
        .map(|c| {
            let (s, e) = table.sums(&c);
            (s, e, c)
        })
        .collect();
    let front = nondominated(&points);
    let to_values = |c: &[usize]| c.iter().map(|&i| table.candidates[i]).collect::<Vec<u32>>();
    let frontier: Vec<FrontierPoint> = front
        .iter()
        .map(|(s, e, c)| FrontierPoint {
            s_sum: *s,
            e_sum: *e,
            choice: to_values(c),
        })
        .collect();
    let plan_of = |p: &(f64, f64, Vec<usize>)| LayerPlan {
        kind: table.kind,
        choice: to_values(&p.2),
        s_sum: p.0,
        e_sum: p.1,
        frontier: frontier.clone(),
    };
    // (objective, energy, sensitivity) ordering
    let key = |p: &(f64, f64, Vec<usize>)| {
        let (obj, _) = budget.split(p.0, p.1);
        (obj, p.1, p.0)
    };
    let cap = budget.cap();
    let best = front
        .iter()
        .filter(|p| budget.split(p.0, p.1).1 <= cap)
        .min_by(|a, b| {
            let (ka, kb) = (key(a), key(b));
            ka.0.total_cmp(&kb.0).then(ka.1.total_cmp(&kb.1)).then(ka.2.total_cmp(&kb.2))
        });
    match best {
        Some(p) => SearchOutcome::Feasible(plan_of(p)),
        None => {
            let cheapest = front
                .iter()
                .min_by(|a, b| {
                    let (ca, cb) = (budget.split(a.0, a.1), budget.split(b.0, b.1));
                    ca.1.total_cmp(&cb.1).then(ca.0.total_cmp(&cb.0))
                })
                .expect("at least one plan");
            SearchOutcome::Infeasible {
                cheapest: plan_of(cheapest),
                cap,
            }
        }
    }
}

/// Overwrites each layer's `phi` or `rho` with the plan's choice.
pub fn apply_plan<S: Scalar>(configs: &[LayerSnnConfig<S>], plan: &LayerPlan) -> Result<Vec<LayerSnnConfig<S>>> {
    if configs.len() != plan.choice.len() {
        return Err(Error::PlanMismatch(format!(
            "plan covers {} layers, model has {}",
            plan.choice.len(),
            configs.len()
        )));
    }
    configs
        .iter()
        .zip(&plan.choice)
        .map(|(cfg, &v)| plan.kind.apply(*cfg, v))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn table(kind: ParamKind, cands: Vec<u32>, s: Vec<Vec<f64>>, e: Vec<Vec<f64>>) -> SensitivityTable {
        SensitivityTable::new(kind, cands, 10, s, e).unwrap()
    }

    #[test]
    fn energy_hand_values() {
        let em = EnergyModel::new(1e-12, EnergyMode::SpikeCount).unwrap();
        assert_eq!(em.energy(0, 3.0), 0.0);
        assert!((em.energy(1_000_000, 1.0) - 1e-3).abs() < 1e-15);
        assert_eq!(em.energy(2_000_000, 1.0), 2.0 * em.energy(1_000_000, 1.0));
        let syn = EnergyModel::new(1e-12, EnergyMode::Synop).unwrap();
        assert!((syn.energy(1_000_000, 10.0) - 1e-2).abs() < 1e-14);
        assert!(EnergyModel::new(0.0, EnergyMode::Synop).is_err());
    }

    #[test]
    fn energy_of_run_stats() {
        let stats = RunStats::<f64> {
            spike_count: 30,
            per_layer: vec![10, 20],
            per_sample: vec![vec![4, 5], vec![6, 15]],
            residual: vec![],
            timesteps: 4,
            fan_out: vec![2.0, 3.0],
        };
        let spikes = EnergyModel::new(1e-3, EnergyMode::SpikeCount).unwrap();
        let synop = EnergyModel::new(1e-3, EnergyMode::Synop).unwrap();
        assert!((energy_of(&stats, &spikes) - 30.0).abs() < 1e-12);
        assert!((energy_of(&stats, &synop) - 80.0).abs() < 1e-12);
        assert!((sample_energy(&stats, 1, &synop) - 57.0).abs() < 1e-12);
    }

    #[test]
    fn kl_hand_values() {
        assert_eq!(kl_divergence(&[0.3, 0.7], &[0.3, 0.7]), 0.0);
        assert!((kl_divergence(&[1.0, 0.0], &[0.5, 0.5]) - std::f64::consts::LN_2).abs() < 1e-6);
        let p = softmax(&[1.0, 2.0, 3.0]);
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        assert_eq!(softmax(&[1000.0, 1000.0]), vec![0.5, 0.5]);
    }

    #[test]
    fn single_feasible_choice() {
        let t = table(ParamKind::Phi, vec![1, 2], vec![vec![1.0, 0.2]], vec![vec![1.0, 3.0]]);
        let out = pareto_search(&t, SearchBudget::EnergyCap(2.0)).unwrap();
        assert!(out.is_feasible());
        assert_eq!(out.plan().choice, vec![1]);
        assert_eq!((out.plan().s_sum, out.plan().e_sum), (1.0, 1.0));
    }

    #[test]
    fn unconstrained_picks_min_sensitivity() {
        let t = table(
            ParamKind::Phi,
            vec![1, 2, 3],
            vec![vec![0.5, 0.1, 0.3], vec![0.9, 0.4, 0.05]],
            vec![vec![1.0, 2.0, 3.0], vec![1.0, 2.0, 3.0]],
        );
        let out = pareto_search(&t, SearchBudget::EnergyCap(f64::INFINITY)).unwrap();
        assert_eq!(out.plan().choice, vec![2, 3]);
    }

    #[test]
    fn infeasible_carries_cheapest() {
        let t = table(ParamKind::Phi, vec![1, 2], vec![vec![1.0, 0.2]], vec![vec![1.0, 3.0]]);
        match pareto_search(&t, SearchBudget::EnergyCap(0.5)).unwrap() {
            SearchOutcome::Infeasible { cheapest, cap } => {
                assert_eq!(cheapest.choice, vec![1]);
                assert_eq!(cap, 0.5);
            }
            other => panic!("expected infeasible, got {other:?}"),
        }
        assert!(pareto_search(&t, SearchBudget::EnergyCap(0.0)).is_err());
    }

    #[test]
    fn sensitivity_cap_minimizes_energy() {
        let t = table(
            ParamKind::Rho,
            vec![1, 2, 4],
            vec![vec![0.0, 0.1, 0.5], vec![0.0, 0.05, 0.3]],
            vec![vec![8.0, 4.0, 2.0], vec![6.0, 3.0, 1.5]],
        );
        let out = pareto_search(&t, SearchBudget::SensitivityCap(0.2)).unwrap();
        assert_eq!(out.plan().choice, vec![2, 2]);
        assert!(out.plan().s_sum <= 0.2);
    }

    #[test]
    fn csv_round_trip_and_columns() {
        let t = table(
            ParamKind::Rho,
            vec![1, 2],
            vec![vec![0.0, 0.25], vec![0.5, 0.125]],
            vec![vec![1.5, 0.75], vec![2.0, 1.0]],
        );
        let mut buf = Vec::new();
        t.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("layer,candidate,kind,S,E,N\n0,1,rho,0.0,1.5,10\n"));
        assert_eq!(SensitivityTable::read_csv(buf.as_slice()).unwrap(), t);
    }

    #[test]
    fn apply_plan_contracts() {
        let base = vec![LayerSnnConfig::<f64>::baseline(0.5).unwrap(); 3];
        let ident = LayerPlan {
            kind: ParamKind::Rho,
            choice: vec![1, 1, 1],
            s_sum: 0.0,
            e_sum: 0.0,
            frontier: vec![],
        };
        assert_eq!(apply_plan(&base, &ident).unwrap(), base);
        let rho = LayerPlan {
            choice: vec![1, 2, 1],
            ..ident.clone()
        };
        let out = apply_plan(&base, &rho).unwrap();
        assert_eq!(out[1].threshold(), 2.0 * base[1].threshold());
        let phi = LayerPlan {
            kind: ParamKind::Phi,
            choice: vec![3, 1, 2],
            ..ident.clone()
        };
        let out = apply_plan(&base, &phi).unwrap();
        assert!(out.iter().zip(&base).all(|(a, b)| a.threshold() == b.threshold()));
        assert_eq!(out[0].phi(), 3);
        let short = LayerPlan {
            choice: vec![1],
            ..ident
        };
        assert!(matches!(apply_plan(&base, &short), Err(Error::PlanMismatch(_))));
    }

    fn table_strategy() -> impl Strategy<Value = SensitivityTable> {
        (1usize..=3, 1usize..=4).prop_flat_map(|(l, n)| {
            (
                proptest::collection::vec(proptest::collection::vec(0.0f64..1.0, n), l),
                proptest::collection::vec(proptest::collection::vec(0.0f64..1.0, n), l),
            )
                .prop_map(move |(s, e)| {
                    SensitivityTable::new(ParamKind::Phi, (1..=n as u32).collect(), 8, s, e).unwrap()
                })
        })
    }

    proptest! {
        #[test]
        fn kl_is_nonnegative(a in proptest::collection::vec(-5.0f64..5.0, 2..6), b in proptest::collection::vec(-5.0f64..5.0, 2..6)) {
            let n = a.len().min(b.len());
            let kl = kl_divergence(&softmax(&a[..n]), &softmax(&b[..n]));
            prop_assert!(kl >= 0.0);
        }

        #[test]
        fn frontier_is_nondominated_and_budget_respected(t in table_strategy(), cap in 0.01f64..3.0) {
            for budget in [SearchBudget::EnergyCap(cap), SearchBudget::SensitivityCap(cap)] {
                let out = pareto_search(&t, budget).unwrap();
                let f = &out.plan().frontier;
                for p in f {
                    for q in f {
                        prop_assert!(!(q.s_sum < p.s_sum && q.e_sum < p.e_sum));
                    }
                }
                let plan = out.plan();
                let idx: Vec<usize> = plan.choice.iter().map(|v| (*v - 1) as usize).collect();
                prop_assert_eq!(t.sums(&idx), (plan.s_sum, plan.e_sum));
                if out.is_feasible() {
                    prop_assert!(budget.split(plan.s_sum, plan.e_sum).1 <= cap);
                }
            }
        }

        #[test]
        fn exhaustive_solver_is_optimal(t in table_strategy(), cap in 0.01f64..3.0) {
            let out = pareto_search_with(&t, SearchBudget::EnergyCap(cap), Solver::Exhaustive).unwrap();
            let best = all_plans(&t)
                .iter()
                .map(|c| t.sums(c))
                .filter(|&(_, e)| e <= cap)
                .map(|(s, _)| s)
                .fold(f64::INFINITY, f64::min);
            if best.is_finite() {
                prop_assert!(out.is_feasible());
                prop_assert_eq!(out.plan().s_sum, best);
            } else {
                prop_assert!(!out.is_feasible());
            }
        }
    }
}
