//! Input-aware adaptive timesteps: each input stops simulating as soon as the
//! confidence of its running output passes a per-timestep boundary.

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::calibration::SIM_CHUNK;
use crate::engine::{LayerSnnConfig, SimOptions, Simulation};
use crate::error::{Error, Result};
use crate::model::{argmax, ModelGraph};
use crate::scalar::Scalar;
use crate::search::{softmax, EnergyModel};
use crate::store::CalibrationCache;
use crate::tensor::Tensor;

/// Floor on the normalizing sum in [`entropy`].
pub const ENTROPY_EPS: f64 = 1e-12;

/// Nonnegative Shannon entropy in nats. The input is renormalized first and
/// zero entries contribute nothing.
pub fn entropy(p: &[f64]) -> Result<f64> {
    if p.is_empty() {
        return Err(Error::InvalidArgument("entropy of an empty distribution".into()));
    }
    let sum: f64 = p.iter().map(|v| v.max(0.0)).sum::<f64>().max(ENTROPY_EPS);
    let h: f64 = p
        .iter()
        .map(|&v| v.max(0.0) / sum)
        .filter(|&q| q > 0.0)
        .map(|q| -q * q.ln())
        .sum();
    Ok(h.clamp(0.0, (p.len() as f64).ln()))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConfidenceKind {
    /// `1 - H(softmax(scores)) / ln |Y|`
    #[default]
    Entropy,
    /// Largest softmax probability.
    MaxProb,
}

/// Confidence in `[0, 1]` of a score vector.
pub fn confidence(scores: &[f64], kind: ConfidenceKind) -> f64 {
    if scores.len() < 2 {
        return 1.0;
    }
    let p = softmax(scores);
    match kind {
        ConfidenceKind::Entropy => {
            let h = entropy(&p).unwrap_or(0.0);
            (1.0 - h / (scores.len() as f64).ln()).clamp(0.0, 1.0)
        }
        ConfidenceKind::MaxProb => p.iter().copied().fold(0.0, f64::max),
    }
}

/// User-facing exit parameters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExitParams {
    pub alpha_base: f64,
    pub beta: f64,
    pub delta: f64,
    #[serde(default)]
    pub confidence: ConfidenceKind,
}

impl Default for ExitParams {
    fn default() -> Self {
        ExitParams {
            alpha_base: 0.7,
            beta: 0.2,
            delta: 1.0,
            confidence: ConfidenceKind::Entropy,
        }
    }
}

/// Parameter settings tried when tuning the exit rule.
pub fn default_exit_grid() -> Vec<ExitParams> {
    let mut grid = Vec::new();
    for alpha_base in [0.5, 0.6, 0.7, 0.8, 0.9] {
        for beta in [0.0, 0.1, 0.2] {
            for delta in [0.1, 1.0] {
                grid.push(ExitParams {
                    alpha_base,
                    beta,
                    delta,
                    confidence: ConfidenceKind::Entropy,
                });
            }
        }
    }
    grid
}

/// Per-timestep exit boundaries fitted on calibration entropies.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExitPolicy {
    pub params: ExitParams,
    pub t_max: usize,
    /// Mean output entropy after each timestep, `t = 1..=t_max`.
    pub mean_entropy: Vec<f64>,
    pub min_entropy: f64,
    /// `alpha_base + beta * exp(-(mean_entropy[t] - min_entropy) / delta)`
    pub alphas: Vec<f64>,
}

impl ExitPolicy {
    pub fn new(params: ExitParams, mean_entropy: Vec<f64>) -> Result<Self> {
        if !(params.delta > 0.0 && params.delta.is_finite()) {
            return Err(Error::InvalidArgument(format!("delta {} must be > 0", params.delta)));
        }
        if !(params.alpha_base.is_finite() && params.beta.is_finite()) {
            return Err(Error::InvalidArgument("alpha_base and beta must be finite".into()));
        }
        if mean_entropy.is_empty() || mean_entropy.iter().any(|e| !(e.is_finite() && *e >= 0.0)) {
            return Err(Error::InvalidArgument("mean entropies must be finite and >= 0".into()));
        }
        let min_entropy = mean_entropy.iter().copied().fold(f64::INFINITY, f64::min);
        let alphas = mean_entropy
            .iter()
            .map(|&e| params.alpha_base + params.beta * (-(e - min_entropy) / params.delta).exp())
            .collect();
        Ok(ExitPolicy {
            params,
            t_max: mean_entropy.len(),
            mean_entropy,
            min_entropy,
            alphas,
        })
    }

    /// Boundary after timestep `t` (1-based).
    pub fn alpha(&self, t: usize) -> f64 {
        self.alphas[t - 1]
    }
}

fn sample_scores_f64<S: Scalar>(sim: &Simulation<'_, S>, b: usize) -> Vec<f64> {
    sim.sample_scores(b).iter().map(|v| v.as_f64()).collect()
}

fn chunk_rows(n: usize) -> Vec<Vec<usize>> {
    (0..n)
        .step_by(SIM_CHUNK)
        .map(|s| (s..(s + SIM_CHUNK).min(n)).collect())
        .collect()
}

/// Runs the calibration subset for `t_max` steps and derives the boundaries
/// from the mean entropy of the running output after each step.
pub fn fit_exit_policy<S: Scalar>(
    model: &ModelGraph<S>,
    configs: &[LayerSnnConfig<S>],
    cache: &CalibrationCache<S>,
    t_max: usize,
    params: ExitParams,
    opts: &SimOptions,
) -> Result<ExitPolicy> {
    if cache.is_empty() {
        return Err(Error::EmptyCache);
    }
    if t_max == 0 {
        return Err(Error::InvalidArgument("t_max must be >= 1".into()));
    }
    let per_chunk = chunk_rows(cache.len())
        .par_iter()
        .map(|rows| {
            let batch = cache.inputs().select_rows(rows)?;
            let mut sim = Simulation::new(model, configs, &batch, opts)?;
            let mut sums = Vec::with_capacity(t_max);
            for _ in 0..t_max {
                sim.step()?;
                let mut s = 0.0;
                for b in 0..rows.len() {
                    s += entropy(&softmax(&sample_scores_f64(&sim, b)))?;
                }
                sums.push(s);
            }
            Ok(sums)
        })
        .collect::<Result<Vec<Vec<f64>>>>()?;
    let n = cache.len() as f64;
    let mean = (0..t_max)
        .map(|t| per_chunk.iter().map(|c| c[t]).sum::<f64>() / n)
        .collect();
    ExitPolicy::new(params, mean)
}

/// Where and how one input stopped.
#[derive(Clone, Debug, PartialEq)]
pub struct ExitRecord {
    pub input_index: usize,
    pub exit_t: usize,
    pub confidence: f64,
    pub predicted: usize,
    pub label: Option<usize>,
    pub scores: Vec<f64>,
    /// Unit spikes per layer up to the exit.
    pub spikes: Vec<u64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExitTrace {
    pub t_max: usize,
    pub records: Vec<ExitRecord>,
    pub fan_out: Vec<f64>,
}

impl ExitTrace {
    pub fn mean_t(&self) -> f64 {
        self.records.iter().map(|r| r.exit_t as f64).sum::<f64>() / self.records.len().max(1) as f64
    }

    /// Fraction correct over labelled records.
    pub fn accuracy(&self) -> f64 {
        let labelled: Vec<_> = self.records.iter().filter_map(|r| r.label.map(|l| (r.predicted, l))).collect();
        if labelled.is_empty() {
            return 0.0;
        }
        labelled.iter().filter(|(p, l)| p == l).count() as f64 / labelled.len() as f64
    }

    pub fn spike_count(&self) -> u64 {
        self.records.iter().map(|r| r.spikes.iter().sum::<u64>()).sum()
    }

    /// Total energy over all inputs.
    pub fn energy(&self, em: &EnergyModel) -> f64 {
        self.records
            .iter()
            .flat_map(|r| r.spikes.iter().enumerate())
            .map(|(l, &n)| em.energy(n, self.fan_out.get(l).copied().unwrap_or(1.0)))
            .sum()
    }

    /// Count of inputs exiting at each `t = 1..=t_max`.
    pub fn histogram(&self) -> Vec<usize> {
        let mut h = vec![0; self.t_max];
        for r in &self.records {
            h[r.exit_t - 1] += 1;
        }
        h
    }

    /// Rows `input_index,exit_t,confidence,predicted,label`; unlabelled inputs
    /// leave the label empty.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["input_index", "exit_t", "confidence", "predicted", "label"])?;
        for r in &self.records {
            w.write_record([
                r.input_index.to_string(),
                r.exit_t.to_string(),
                r.confidence.to_string(),
                r.predicted.to_string(),
                r.label.map(|l| l.to_string()).unwrap_or_default(),
            ])?;
        }
        w.flush().map_err(|e| Error::io("<exit trace>", e))
    }
}

fn check_labels(labels: Option<&[usize]>, n: usize) -> Result<()> {
    match labels {
        Some(l) if l.len() != n => Err(Error::CountMismatch {
            images: n,
            labels: l.len(),
        }),
        _ => Ok(()),
    }
}

/// Steps every input until its confidence reaches the policy's boundary or
/// `t_max` is hit. Finished chunks stop simulating.
pub fn infer_adaptive<S: Scalar>(
    model: &ModelGraph<S>,
    configs: &[LayerSnnConfig<S>],
    policy: &ExitPolicy,
    batch: &Tensor<S>,
    labels: Option<&[usize]>,
    opts: &SimOptions,
) -> Result<ExitTrace> {
    check_labels(labels, batch.batch())?;
    let kind = policy.params.confidence;
    let chunks = chunk_rows(batch.batch())
        .par_iter()
        .map(|rows| {
            let sub = batch.select_rows(rows)?;
            let mut sim = Simulation::new(model, configs, &sub, opts)?;
            let mut done: Vec<Option<ExitRecord>> = vec![None; rows.len()];
            let mut remaining = rows.len();
            for t in 1..=policy.t_max {
                sim.step()?;
                for (b, slot) in done.iter_mut().enumerate() {
                    if slot.is_some() {
                        continue;
                    }
                    let scores = sample_scores_f64(&sim, b);
                    let c = confidence(&scores, kind);
                    if c >= policy.alpha(t) || t == policy.t_max {
                        *slot = Some(ExitRecord {
                            input_index: rows[b],
                            exit_t: t,
                            confidence: c,
                            predicted: argmax(&scores),
                            label: labels.map(|l| l[rows[b]]),
                            scores,
                            spikes: sim.sample_spikes(b).to_vec(),
                        });
                        remaining -= 1;
                    }
                }
                if remaining == 0 {
                    break;
                }
            }
            Ok(done.into_iter().map(|r| r.expect("every input exits")).collect::<Vec<_>>())
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ExitTrace {
        t_max: policy.t_max,
        records: chunks.into_iter().flatten().collect(),
        fan_out: model.fan_outs(),
    })
}

/// Reference early exit with one constant boundary: simulates the whole batch
/// for `t_max` steps and reads each input's first crossing afterwards.
#[allow(clippy::too_many_arguments)]
pub fn infer_fixed_boundary<S: Scalar>(
    model: &ModelGraph<S>,
    configs: &[LayerSnnConfig<S>],
    alpha: f64,
    kind: ConfidenceKind,
    t_max: usize,
    batch: &Tensor<S>,
    labels: Option<&[usize]>,
    opts: &SimOptions,
) -> Result<ExitTrace> {
    check_labels(labels, batch.batch())?;
    if t_max == 0 {
        return Err(Error::InvalidArgument("t_max must be >= 1".into()));
    }
    let n = batch.batch();
    let mut sim = Simulation::new(model, configs, batch, opts)?;
    let mut history: Vec<Vec<(Vec<f64>, Vec<u64>)>> = vec![Vec::with_capacity(t_max); n];
    for _ in 0..t_max {
        sim.step()?;
        for (b, h) in history.iter_mut().enumerate() {
            h.push((sample_scores_f64(&sim, b), sim.sample_spikes(b).to_vec()));
        }
    }
    let records = history
        .into_iter()
        .enumerate()
        .map(|(b, h)| {
            let confs: Vec<f64> = h.iter().map(|(s, _)| confidence(s, kind)).collect();
            let t = confs.iter().position(|&c| c >= alpha).map_or(t_max, |i| i + 1);
            let (scores, spikes) = h[t - 1].clone();
            ExitRecord {
                input_index: b,
                exit_t: t,
                confidence: confs[t - 1],
                predicted: argmax(&scores),
                label: labels.map(|l| l[b]),
                scores,
                spikes,
            }
        })
        .collect();
    Ok(ExitTrace {
        t_max,
        records,
        fan_out: model.fan_outs(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::run_snn;
    use crate::model::ModelBuilder;
    use proptest::prelude::*;

    #[test]
    fn entropy_hand_values() {
        assert_eq!(entropy(&[0.0, 1.0, 0.0]).unwrap(), 0.0);
        assert!((entropy(&[0.1; 10]).unwrap() - 10f64.ln()).abs() < 1e-12);
        assert!((entropy(&[0.5, 0.5]).unwrap() - std::f64::consts::LN_2).abs() < 1e-12);
        assert!(entropy(&[]).is_err());
    }

    #[test]
    fn confidence_hand_values() {
        // logits whose softmax is (0.9, 0.1)
        let c = confidence(&[9f64.ln(), 0.0], ConfidenceKind::Entropy);
        let h = -(0.9f64 * 0.9f64.ln() + 0.1 * 0.1f64.ln());
        assert!((h - 0.3251).abs() < 1e-4);
        assert!((c - (1.0 - h / std::f64::consts::LN_2)).abs() < 1e-9);
        assert!((c - 0.531).abs() < 1e-3);
        assert_eq!(confidence(&[0.0; 4], ConfidenceKind::Entropy), 0.0);
        assert!((confidence(&[1000.0, 0.0, 0.0], ConfidenceKind::Entropy) - 1.0).abs() < 1e-12);
        assert!((confidence(&[9f64.ln(), 0.0], ConfidenceKind::MaxProb) - 0.9).abs() < 1e-12);
    }

    #[test]
    fn boundary_hand_values() {
        let params = ExitParams {
            alpha_base: 0.6,
            beta: 0.3,
            delta: 0.5,
            ..ExitParams::default()
        };
        let p = ExitPolicy::new(params, vec![1.0, 0.5, 0.4]).unwrap();
        assert_eq!(p.min_entropy, 0.4);
        assert_eq!(p.alpha(3), 0.6 + 0.3);
        let at_delta = ExitPolicy::new(params, vec![0.9, 0.4]).unwrap();
        assert!((at_delta.alpha(1) - (0.6 + 0.3 * (-1f64).exp())).abs() < 1e-12);
        assert!((at_delta.alpha(1) - (0.6 + 0.3679 * 0.3)).abs() < 1e-4);
        let flat = ExitPolicy::new(ExitParams { beta: 0.0, ..params }, vec![1.0, 0.2, 3.0]).unwrap();
        assert!(flat.alphas.iter().all(|&a| a == 0.6));
        assert!(ExitPolicy::new(ExitParams { delta: 0.0, ..params }, vec![1.0]).is_err());
    }

    fn fixture() -> (ModelGraph<f64>, Vec<LayerSnnConfig<f64>>, Tensor<f64>) {
        let m = ModelBuilder::mlp(&[3], &[8, 6], 3).build::<f64>(7).unwrap();
        let cfg = vec![LayerSnnConfig::new(0.5, 1, 1).unwrap(); 2];
        let x = Tensor::new(vec![6, 3], (0..18).map(|i| (i % 5) as f64 * 0.4 - 0.3).collect()).unwrap();
        (m, cfg, x)
    }

    fn policy_with(alpha: f64, t_max: usize) -> ExitPolicy {
        ExitPolicy::new(
            ExitParams {
                alpha_base: alpha,
                beta: 0.0,
                ..ExitParams::default()
            },
            vec![0.5; t_max],
        )
        .unwrap()
    }

    #[test]
    fn unreachable_and_trivial_boundaries() {
        let (m, cfg, x) = fixture();
        let opts = SimOptions::default();
        let never = infer_adaptive(&m, &cfg, &policy_with(1.5, 6), &x, None, &opts).unwrap();
        assert!(never.records.iter().all(|r| r.exit_t == 6));
        let full = run_snn(&m, &cfg, &x, 6, &opts).unwrap();
        for (r, row) in never.records.iter().zip(full.scores.rows()) {
            assert_eq!(r.scores, row.to_vec());
            assert_eq!(r.predicted, argmax(row));
        }
        assert_eq!(never.spike_count(), full.stats.spike_count);
        let always = infer_adaptive(&m, &cfg, &policy_with(0.0, 6), &x, None, &opts).unwrap();
        assert!(always.records.iter().all(|r| r.exit_t == 1));
        assert_eq!(always.histogram()[0], 6);
    }

    #[test]
    fn flat_policy_matches_fixed_boundary() {
        let (m, cfg, x) = fixture();
        let opts = SimOptions::default();
        let labels = vec![0, 1, 2, 0, 1, 2];
        for alpha in [0.0, 0.05, 0.2, 0.6, 1.1] {
            let a = infer_adaptive(&m, &cfg, &policy_with(alpha, 8), &x, Some(&labels), &opts).unwrap();
            let b = infer_fixed_boundary(&m, &cfg, alpha, ConfidenceKind::Entropy, 8, &x, Some(&labels), &opts).unwrap();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn trace_csv_columns() {
        let (m, cfg, x) = fixture();
        let tr = infer_adaptive(&m, &cfg, &policy_with(0.0, 2), &x, None, &SimOptions::default()).unwrap();
        let mut buf = Vec::new();
        tr.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("input_index,exit_t,confidence,predicted,label\n0,1,"));
        assert_eq!(text.lines().count(), 7);
    }

    proptest! {
        #[test]
        fn entropy_and_confidence_bounds(v in proptest::collection::vec(-8.0f64..8.0, 2..12)) {
            let p = softmax(&v);
            let h = entropy(&p).unwrap();
            prop_assert!(h >= 0.0 && h <= (v.len() as f64).ln() + 1e-12);
            let c = confidence(&v, ConfidenceKind::Entropy);
            prop_assert!((0.0..=1.0).contains(&c));
        }

        #[test]
        fn boundary_decreases_with_entropy(e in proptest::collection::vec(0.0f64..3.0, 2..10),
                                           base in 0.0f64..1.0, beta in 0.01f64..1.0, delta in 0.5f64..3.0) {
            let p = ExitPolicy::new(ExitParams { alpha_base: base, beta, delta, ..ExitParams::default() }, e.clone()).unwrap();
            for i in 0..e.len() {
                prop_assert!(p.alphas[i] > base && p.alphas[i] <= base + beta);
                for j in 0..e.len() {
                    if e[i] < e[j] {
                        prop_assert!(p.alphas[i] > p.alphas[j]);
                    }
                }
            }
        }

        #[test]
        fn early_exit_never_adds_spikes(alpha in 0.0f64..1.0) {
            let (m, cfg, x) = fixture();
            let opts = SimOptions::default();
            let tr = infer_adaptive(&m, &cfg, &policy_with(alpha, 5), &x, None, &opts).unwrap();
            let full = run_snn(&m, &cfg, &x, 5, &opts).unwrap();
            for (b, r) in tr.records.iter().enumerate() {
                prop_assert!(r.spikes.iter().sum::<u64>() <= full.stats.sample_total(b));
            }
        }
    }
}
