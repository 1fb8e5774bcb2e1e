//! Training-free conversion: threshold fitting, light bias calibration and
//! conversion-error measurement.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::engine::{run_snn_chunked, step_layer, LayerSnnConfig, NeuronState, SimOptions};
use crate::error::{Error, Result};
use crate::model::ModelGraph;
use crate::scalar::Scalar;
use crate::store::CalibrationCache;
use crate::tensor::Tensor;

/// Samples per parallel simulation chunk.
pub const SIM_CHUNK: usize = 64;

fn check_quantizer<S: Scalar>(timesteps: usize, v_th: S, phi: u32) -> Result<()> {
    if timesteps == 0 {
        return Err(Error::InvalidArgument("timesteps must be >= 1".into()));
    }
    if !(v_th > S::zero() && v_th.is_finite()) {
        return Err(Error::InvalidArgument(format!("threshold {v_th} must be > 0")));
    }
    if phi == 0 {
        return Err(Error::InvalidArgument("phi must be >= 1".into()));
    }
    Ok(())
}

#[inline]
fn clip_floor_value<S: Scalar>(x: S, t: S, v_th: S, cap: S) -> S {
    let mut n = (t * x / v_th).floor();
    if n < S::zero() {
        n = S::zero();
    } else if n > cap {
        n = cap;
    }
    n * v_th / t
}

/// `(v_th / T) * clip(floor(T * x / v_th), 0, T * phi)` elementwise.
pub fn clip_floor<S: Scalar>(x: &Tensor<S>, timesteps: usize, v_th: S, phi: u32) -> Result<Tensor<S>> {
    check_quantizer(timesteps, v_th, phi)?;
    if x.data().iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("clip_floor input".into()));
    }
    let t = S::lit(timesteps as f64);
    let cap = S::lit(timesteps as f64 * phi as f64);
    Ok(x.map(|v| clip_floor_value(v, t, v_th, cap)))
}

/// Candidate thresholds searched by [`fit_threshold`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GridSpec {
    /// Geometric grid between two percentiles of the positive activations.
    /// A high percentile of 1.0 means the maximum.
    Geometric {
        count: usize,
        low_percentile: f64,
        high_percentile: f64,
    },
    Explicit(Vec<f64>),
}

impl Default for GridSpec {
    fn default() -> Self {
        GridSpec::Geometric {
            count: 64,
            low_percentile: 0.5,
            high_percentile: 1.0,
        }
    }
}

/// Nearest-rank percentile of an ascending slice.
fn percentile(sorted: &[f64], q: f64) -> f64 {
    let idx = ((sorted.len() - 1) as f64 * q.clamp(0.0, 1.0)).round() as usize;
    sorted[idx]
}

impl GridSpec {
    /// Ascending, deduplicated candidates. `None` when no candidate can be
    /// derived (geometric grid over all-zero activations).
    fn candidates(&self, activations: &[f64]) -> Result<Option<Vec<f64>>> {
        let mut grid = match self {
            GridSpec::Explicit(values) => {
                if values.is_empty() || values.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
                    return Err(Error::InvalidArgument(
                        "threshold grid must be nonempty with positive finite values".into(),
                    ));
                }
                values.clone()
            }
            GridSpec::Geometric {
                count,
                low_percentile,
                high_percentile,
            } => {
                if *count == 0 || !(low_percentile <= high_percentile) {
                    return Err(Error::InvalidArgument(format!(
                        "bad geometric grid: count {count}, percentiles {low_percentile}..{high_percentile}"
                    )));
                }
                let mut positive: Vec<f64> = activations.iter().copied().filter(|&a| a > 0.0).collect();
                if positive.is_empty() {
                    return Ok(None);
                }
                positive.sort_by(|a, b| a.total_cmp(b));
                let lo = percentile(&positive, *low_percentile);
                let hi = percentile(&positive, *high_percentile);
                if *count == 1 || hi <= lo {
                    vec![hi]
                } else {
                    let ratio = hi / lo;
                    (0..*count)
                        .map(|i| lo * ratio.powf(i as f64 / (*count - 1) as f64))
                        .collect()
                }
            }
        };
        grid.sort_by(|a, b| a.total_cmp(b));
        grid.dedup();
        Ok(Some(grid))
    }
}

/// Result of the per-layer threshold search.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ThresholdFit<S> {
    /// Index of the spiking layer.
    pub layer: usize,
    pub v_th: S,
    pub grid: Vec<S>,
    /// Mean squared error of each candidate, aligned with `grid`.
    pub mse: Vec<f64>,
    /// Set when every activation was zero and the fit carries no information.
    pub degenerate: bool,
}

impl<S: Scalar> ThresholdFit<S> {
    pub fn best_mse(&self) -> f64 {
        self.grid
            .iter()
            .position(|&g| g == self.v_th)
            .map_or(f64::NAN, |i| self.mse[i])
    }
}

/// Picks the grid threshold whose ClipFloor reconstruction of `activations`
/// has the smallest mean squared error. Ties go to the smaller threshold.
pub fn fit_threshold<S: Scalar>(
    activations: &Tensor<S>,
    timesteps: usize,
    phi: u32,
    grid: &GridSpec,
) -> Result<ThresholdFit<S>> {
    check_quantizer(timesteps, S::one(), phi)?;
    let acts: Vec<f64> = activations.data().iter().map(|v| v.as_f64()).collect();
    if acts.iter().any(|&a| a < 0.0) {
        return Err(Error::InvalidArgument("activations must be post-relu (>= 0)".into()));
    }
    let all_zero = acts.iter().all(|&a| a == 0.0);
    let candidates = match grid.candidates(&acts)? {
        Some(g) => g,
        None => vec![1.0],
    };
    let t = timesteps as f64;
    let cap = t * phi as f64;
    let mse: Vec<f64> = candidates
        .iter()
        .map(|&v| {
            let sum: f64 = acts
                .iter()
                .map(|&a| {
                    let d = clip_floor_value(a, t, v, cap) - a;
                    d * d
                })
                .sum();
            sum / acts.len() as f64
        })
        .collect();
    let mut best = 0;
    for i in 1..mse.len() {
        if mse[i] < mse[best] {
            best = i;
        }
    }
    if all_zero {
        log::warn!("all activations are zero; threshold fit is degenerate");
    }
    Ok(ThresholdFit {
        layer: 0,
        v_th: S::lit(candidates[best]),
        grid: candidates.iter().map(|&v| S::lit(v)).collect(),
        mse,
        degenerate: all_zero,
    })
}

/// Options of [`convert`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConvertOptions {
    pub timesteps: usize,
    pub grid: GridSpec,
    pub calibrate_bias: bool,
    pub initial_membrane: f64,
}

impl Default for ConvertOptions {
    fn default() -> Self {
        ConvertOptions {
            timesteps: 4,
            grid: GridSpec::default(),
            calibrate_bias: false,
            initial_membrane: 0.5,
        }
    }
}

/// A converted network: possibly bias-calibrated weights plus per-layer
/// single-spike configurations.
#[derive(Clone, Debug)]
pub struct Conversion<S: Scalar> {
    pub model: ModelGraph<S>,
    pub configs: Vec<LayerSnnConfig<S>>,
    pub fits: Vec<ThresholdFit<S>>,
}

/// Fits every layer's threshold on the cached taps (`phi = 1`, `rho = 1`),
/// then optionally calibrates biases.
pub fn convert<S: Scalar>(
    model: &ModelGraph<S>,
    cache: &CalibrationCache<S>,
    opts: &ConvertOptions,
) -> Result<Conversion<S>> {
    cache.ensure_matches(model)?;
    let fits = cache
        .taps()
        .par_iter()
        .enumerate()
        .map(|(k, (_, tap))| {
            let mut fit = fit_threshold(tap, opts.timesteps, 1, &opts.grid)?;
            fit.layer = k;
            Ok(fit)
        })
        .collect::<Result<Vec<_>>>()?;
    let configs = fits
        .iter()
        .map(|f| LayerSnnConfig::baseline(f.v_th))
        .collect::<Result<Vec<_>>>()?;
    let sim = SimOptions {
        initial_membrane: opts.initial_membrane,
        ..SimOptions::default()
    };
    let model = if opts.calibrate_bias {
        calibrate_biases(model, &configs, cache, opts.timesteps, &sim)?
    } else {
        model.clone()
    };
    Ok(Conversion { model, configs, fits })
}

/// Channel count and elements per channel per sample of a `[batch, C, ...]`
/// activation.
fn channel_layout(shape: &[usize]) -> (usize, usize) {
    let c = shape.get(1).copied().unwrap_or(1);
    let spatial: usize = shape.iter().skip(2).product();
    (c, spatial)
}

/// Per-channel mean of `ann_tap - snn_rate`.
pub fn bias_corrections<S: Scalar>(ann_tap: &Tensor<S>, snn_rate: &Tensor<S>) -> Result<Vec<S>> {
    if ann_tap.shape() != snn_rate.shape() {
        return Err(Error::Shape(format!(
            "tap {:?} and rate {:?} differ",
            ann_tap.shape(),
            snn_rate.shape()
        )));
    }
    let (c, spatial) = channel_layout(ann_tap.shape());
    let mut sums = vec![0.0f64; c];
    for (i, (a, r)) in ann_tap.data().iter().zip(snn_rate.data()).enumerate() {
        sums[(i / spatial) % c] += a.as_f64() - r.as_f64();
    }
    let n = (ann_tap.batch() * spatial) as f64;
    Ok(sums.into_iter().map(|s| S::lit(s / n)).collect())
}

/// Layer by layer from the input, shifts each spiking layer's bias by the
/// per-channel mean gap between the ANN taps and the SNN rates on the
/// calibration subset.
pub fn calibrate_biases<S: Scalar>(
    model: &ModelGraph<S>,
    configs: &[LayerSnnConfig<S>],
    cache: &CalibrationCache<S>,
    timesteps: usize,
    opts: &SimOptions,
) -> Result<ModelGraph<S>> {
    cache.ensure_matches(model)?;
    let spiking = model.spiking_layers();
    let mut calibrated = model.clone();
    for (k, &relu) in spiking.iter().enumerate() {
        let run = run_snn_chunked(&calibrated, configs, cache.inputs(), timesteps, opts, SIM_CHUNK)?;
        let corr = bias_corrections(cache.tap(k), &run.rates[k])?;
        let bias = calibrated.layers_mut()[relu - 1]
            .bias_mut()
            .ok_or_else(|| Error::InvalidModel(format!("layer {} before relu has no bias", relu - 1)))?;
        for (b, c) in bias.data_mut().iter_mut().zip(corr) {
            *b += c;
        }
    }
    Ok(calibrated)
}

/// Mean and max absolute value plus the share of total squared error.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct ErrorStats {
    pub mean_abs: f64,
    pub max_abs: f64,
    pub sum_sq: f64,
    /// Fraction of the layer's summed squared component errors.
    pub share: f64,
}

fn stats_of<S: Scalar>(t: &Tensor<S>) -> ErrorStats {
    let mut sum_abs = 0.0;
    let mut max_abs = 0.0f64;
    let mut sum_sq = 0.0;
    for v in t.data() {
        let a = v.as_f64().abs();
        sum_abs += a;
        max_abs = max_abs.max(a);
        sum_sq += a * a;
    }
    ErrorStats {
        mean_abs: sum_abs / t.len() as f64,
        max_abs,
        sum_sq,
        share: 0.0,
    }
}

/// Error tensors of one spiking layer. `clipping + quantization + unevenness`
/// equals `error`, and `propagated + local` equals `unevenness`.
///
/// * `clipping`: tap saturated at `phi * V_th`, minus the tap.
/// * `quantization`: rounding of the clipped tap to the spike grid.
/// * `unevenness`: SNN rate minus the quantized tap.
/// * `propagated`: part of the unevenness inherited from earlier layers, the
///   shift of the quantized value when the SNN's own input rates replace the
///   ANN input.
/// * `local`: SNN rate minus the quantized mean current it received, caused
///   purely by the timing of the incoming spikes.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerErrors<S> {
    pub error: Tensor<S>,
    pub clipping: Tensor<S>,
    pub quantization: Tensor<S>,
    pub unevenness: Tensor<S>,
    pub propagated: Tensor<S>,
    pub local: Tensor<S>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LayerSummary {
    pub layer: usize,
    pub error: ErrorStats,
    pub clipping: ErrorStats,
    pub quantization: ErrorStats,
    pub unevenness: ErrorStats,
    pub propagated: ErrorStats,
    pub local: ErrorStats,
}

/// Conversion error of every spiking layer, `E = rate - tap`.
#[derive(Clone, Debug)]
pub struct ConversionMetrics<S> {
    pub layers: Vec<LayerErrors<S>>,
    pub summary: Vec<LayerSummary>,
}

impl<S> ConversionMetrics<S> {
    /// Mean over layers of the mean absolute unevenness component.
    pub fn mean_abs_unevenness(&self) -> f64 {
        let n = self.summary.len().max(1) as f64;
        self.summary.iter().map(|s| s.unevenness.mean_abs).sum::<f64>() / n
    }

    pub fn mean_abs_error(&self) -> f64 {
        let n = self.summary.len().max(1) as f64;
        self.summary.iter().map(|s| s.error.mean_abs).sum::<f64>() / n
    }
}

fn summarize<S: Scalar>(layer: usize, e: &LayerErrors<S>) -> LayerSummary {
    let mut parts = [stats_of(&e.clipping), stats_of(&e.quantization), stats_of(&e.unevenness)];
    let total: f64 = parts.iter().map(|p| p.sum_sq).sum();
    if total > 0.0 {
        for p in &mut parts {
            p.share = p.sum_sq / total;
        }
    }
    let mut sub = [stats_of(&e.propagated), stats_of(&e.local)];
    let sub_total: f64 = sub.iter().map(|p| p.sum_sq).sum();
    if sub_total > 0.0 {
        for p in &mut sub {
            p.share = p.sum_sq / sub_total;
        }
    }
    LayerSummary {
        layer,
        error: stats_of(&e.error),
        clipping: parts[0],
        quantization: parts[1],
        unevenness: parts[2],
        propagated: sub[0],
        local: sub[1],
    }
}

/// Simulates the calibration subset and decomposes each layer's error.
pub fn measure_unevenness<S: Scalar>(
    model: &ModelGraph<S>,
    configs: &[LayerSnnConfig<S>],
    cache: &CalibrationCache<S>,
    timesteps: usize,
    opts: &SimOptions,
) -> Result<ConversionMetrics<S>> {
    cache.ensure_matches(model)?;
    let run = run_snn_chunked(model, configs, cache.inputs(), timesteps, opts, SIM_CHUNK)?;
    let spiking = model.spiking_layers();
    let t = S::lit(timesteps as f64);
    let mut layers = Vec::with_capacity(spiking.len());
    for (k, &relu) in spiking.iter().enumerate() {
        let cfg = &configs[k];
        let vth = cfg.threshold();
        let offset = S::lit(opts.initial_membrane) * vth / t;
        let tap = cache.tap(k);
        let rate = &run.rates[k];

        // Mean current into this layer given the SNN's own input rates.
        let (mut current, start) = if k == 0 {
            (cache.inputs().clone(), 0)
        } else {
            (run.rates[k - 1].clone(), spiking[k - 1] + 1)
        };
        for i in start..relu {
            current = model.apply_layer(i, &current)?;
        }

        let cap = S::lit(cfg.phi() as f64) * vth;
        let clipped = tap.map(|a| if a > cap { cap } else { a });
        let q_tap = clip_floor(&tap.map(|a| a + offset), timesteps, vth, cfg.phi())?;
        let q_local = clip_floor(&current.map(|a| a + offset), timesteps, vth, cfg.phi())?;
        let errors = LayerErrors {
            error: rate.zip_map(tap, |r, a| r - a)?,
            clipping: clipped.zip_map(tap, |c, a| c - a)?,
            quantization: q_tap.zip_map(&clipped, |q, c| q - c)?,
            unevenness: rate.zip_map(&q_tap, |r, q| r - q)?,
            propagated: q_local.zip_map(&q_tap, |l, q| l - q)?,
            local: rate.zip_map(&q_local, |r, l| r - l)?,
        };
        layers.push(errors);
    }
    let summary = layers.iter().enumerate().map(|(k, e)| summarize(k, e)).collect();
    Ok(ConversionMetrics { layers, summary })
}

/// Outcome of driving one neuron with an explicit current sequence.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct SequenceOutcome {
    pub input_total: f64,
    pub emitted_total: f64,
    pub residual: f64,
    /// `emitted_total - input_total`: negative when charge is left behind.
    pub gap: f64,
}

/// Feeds `currents` to a single neuron starting from membrane `v0`.
pub fn sequence_unevenness<S: Scalar>(currents: &[S], cfg: &LayerSnnConfig<S>, v0: S) -> Result<SequenceOutcome> {
    let mut state = NeuronState::new(&[1], v0);
    let mut emitted = 0.0;
    let mut input = 0.0;
    for &c in currents {
        let e = step_layer(&mut state, &Tensor::from_vec(vec![c])?, cfg)?;
        emitted += e.data()[0].as_f64();
        input += c.as_f64();
    }
    Ok(SequenceOutcome {
        input_total: input,
        emitted_total: emitted,
        residual: state.v.data()[0].as_f64(),
        gap: emitted - input,
    })
}
