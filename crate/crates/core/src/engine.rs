//! Clocked integrate-and-fire simulation of converted networks.
//!
//! Every relu of the source graph becomes a layer of IF neurons with
//! reset-by-subtraction. A neuron may emit up to `phi` spikes in one timestep
//! (burst firing) and each spike carries the amplitude `rho * v_th`
//! (threshold compression). The analog input is injected as a constant
//! current every timestep, and the classifier layer integrates its input
//! without spiking.

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{LayerSpec, ModelGraph};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Spiking parameters of one layer.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerSnnConfig<S> {
    v_th: S,
    rho: u32,
    phi: u32,
}

impl<S: Scalar> LayerSnnConfig<S> {
    pub fn new(v_th: S, rho: u32, phi: u32) -> Result<Self> {
        if !(v_th > S::zero() && v_th.is_finite()) {
            return Err(Error::InvalidArgument(format!("base threshold {v_th} must be > 0")));
        }
        if rho == 0 || phi == 0 {
            return Err(Error::InvalidArgument(format!(
                "rho ({rho}) and phi ({phi}) must be >= 1"
            )));
        }
        Ok(LayerSnnConfig { v_th, rho, phi })
    }

    /// Single-spike, uncompressed neuron with threshold `v_th`.
    pub fn baseline(v_th: S) -> Result<Self> {
        Self::new(v_th, 1, 1)
    }

    pub fn v_th(&self) -> S {
        self.v_th
    }

    pub fn rho(&self) -> u32 {
        self.rho
    }

    pub fn phi(&self) -> u32 {
        self.phi
    }

    /// Effective threshold `rho * v_th`, also the amplitude of one spike.
    pub fn threshold(&self) -> S {
        S::lit(self.rho as f64) * self.v_th
    }

    pub fn with_phi(self, phi: u32) -> Result<Self> {
        Self::new(self.v_th, self.rho, phi)
    }

    pub fn with_rho(self, rho: u32) -> Result<Self> {
        Self::new(self.v_th, rho, self.phi)
    }

    pub fn with_v_th(self, v_th: S) -> Result<Self> {
        Self::new(v_th, self.rho, self.phi)
    }
}

/// Membrane potentials of one layer: `u` before and `v` after spike emission.
#[derive(Clone, Debug, PartialEq)]
pub struct NeuronState<S> {
    pub u: Tensor<S>,
    pub v: Tensor<S>,
}

impl<S: Scalar> NeuronState<S> {
    pub fn new(shape: &[usize], v0: S) -> Self {
        NeuronState {
            u: Tensor::full(shape, v0),
            v: Tensor::full(shape, v0),
        }
    }
}

/// Integrates one timestep of input and fires. Returns the emitted amplitude
/// `k * V_th` per neuron, with `k = clamp(floor(u / V_th), 0, phi)`.
pub fn step_layer<S: Scalar>(
    state: &mut NeuronState<S>,
    input_current: &Tensor<S>,
    cfg: &LayerSnnConfig<S>,
) -> Result<Tensor<S>> {
    if input_current.shape() != state.v.shape() {
        return Err(Error::Shape(format!(
            "input current {:?} does not match neuron state {:?}",
            input_current.shape(),
            state.v.shape()
        )));
    }
    let mut emitted = Tensor::zeros(state.v.shape());
    fire(
        state.u.data_mut(),
        state.v.data_mut(),
        input_current.data(),
        emitted.data_mut(),
        cfg,
    );
    Ok(emitted)
}

/// Core update over flat slices. Returns the per-neuron fire counts' sum.
#[inline]
fn fire<S: Scalar>(u: &mut [S], v: &mut [S], input: &[S], out: &mut [S], cfg: &LayerSnnConfig<S>) -> u64 {
    let vth = cfg.threshold();
    let phi = S::lit(cfg.phi as f64);
    let mut count = 0u64;
    for i in 0..v.len() {
        let ui = v[i] + input[i];
        u[i] = ui;
        let mut k = (ui / vth).floor();
        if k < S::zero() {
            k = S::zero();
        } else if k > phi {
            k = phi;
        }
        let e = k * vth;
        out[i] = e;
        v[i] = ui - e;
        count += k.to_u64().unwrap_or(0);
    }
    count
}

/// Emitted amplitudes of one layer, one tensor per timestep.
#[derive(Clone, Debug, PartialEq)]
pub struct SpikeTrain<S> {
    pub steps: Vec<Tensor<S>>,
}

impl<S: Scalar> SpikeTrain<S> {
    pub fn timesteps(&self) -> usize {
        self.steps.len()
    }
}

/// Mean emitted amplitude per neuron over the train. Amplitudes already carry
/// the compression ratio, so no further scaling applies.
pub fn rate_output<S: Scalar>(train: &SpikeTrain<S>) -> Result<Tensor<S>> {
    let first = train
        .steps
        .first()
        .ok_or_else(|| Error::InvalidArgument("empty spike train".into()))?;
    let mut sum = vec![0.0f64; first.len()];
    for step in &train.steps {
        if step.shape() != first.shape() {
            return Err(Error::Shape("spike train steps differ in shape".into()));
        }
        for (s, v) in sum.iter_mut().zip(step.data()) {
            *s += v.as_f64();
        }
    }
    let t = train.steps.len() as f64;
    Ok(Tensor::from_parts(
        first.shape().to_vec(),
        sum.into_iter().map(|s| S::lit(s / t)).collect(),
    ))
}

/// Per-neuron charge bookkeeping of one spiking layer, accumulated in f64.
#[derive(Clone, Debug, PartialEq)]
pub struct ChargeLedger {
    pub input: Vec<f64>,
    pub emitted: Vec<f64>,
    pub initial: Vec<f64>,
    pub residual: Vec<f64>,
}

impl ChargeLedger {
    /// Largest `|sum(input) - (sum(emitted) + v(T) - v(0))|` over neurons.
    pub fn max_violation(&self) -> f64 {
        (0..self.input.len())
            .map(|i| (self.input[i] - (self.emitted[i] + self.residual[i] - self.initial[i])).abs())
            .fold(0.0, f64::max)
    }
}

/// Spike statistics of a run.
#[derive(Clone, Debug, PartialEq)]
pub struct RunStats<S> {
    /// Unit spikes over all layers and samples: a burst of `k` counts `k`, a
    /// compressed spike counts once.
    pub spike_count: u64,
    pub per_layer: Vec<u64>,
    /// `[sample][layer]` unit spikes.
    pub per_sample: Vec<Vec<u64>>,
    /// Membrane `v` of each spiking layer after the last timestep.
    pub residual: Vec<Tensor<S>>,
    pub timesteps: usize,
    /// Synaptic targets per spike of each layer, for synop energy.
    pub fan_out: Vec<f64>,
}

impl<S> RunStats<S> {
    pub fn batch(&self) -> usize {
        self.per_sample.len()
    }

    pub fn sample_total(&self, b: usize) -> u64 {
        self.per_sample[b].iter().sum()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SimOptions {
    /// Initial membrane as a fraction of each layer's effective threshold.
    pub initial_membrane: f64,
    pub record_trains: bool,
    pub record_charge: bool,
}

impl Default for SimOptions {
    fn default() -> Self {
        SimOptions {
            initial_membrane: 0.5,
            record_trains: false,
            record_charge: false,
        }
    }
}

/// Output of [`run_snn`].
#[derive(Clone, Debug)]
pub struct SnnRun<S> {
    /// Accumulated classifier membrane divided by `T`, `[batch, classes]`.
    pub scores: Tensor<S>,
    pub stats: RunStats<S>,
    /// Mean emitted amplitude of each spiking layer.
    pub rates: Vec<Tensor<S>>,
    /// One train per spiking layer when requested.
    pub trains: Option<Vec<SpikeTrain<S>>>,
    pub charge: Option<Vec<ChargeLedger>>,
}

/// Dense layer with weights transposed to `[in, out]` so that silent inputs
/// can be skipped.
struct SparseDense<S> {
    weight_t: Vec<S>,
    bias: Vec<S>,
    n_in: usize,
    n_out: usize,
}

impl<S: Scalar> SparseDense<S> {
    fn apply(&self, x: &Tensor<S>) -> Tensor<S> {
        let batch = x.batch();
        let mut out = Vec::with_capacity(batch * self.n_out);
        for row in x.rows() {
            let start = out.len();
            out.extend_from_slice(&self.bias);
            let acc = &mut out[start..];
            for (i, &xi) in row.iter().enumerate() {
                if xi == S::zero() {
                    continue;
                }
                let w = &self.weight_t[i * self.n_out..(i + 1) * self.n_out];
                for (a, &wv) in acc.iter_mut().zip(w) {
                    *a += xi * wv;
                }
            }
        }
        let _ = self.n_in;
        Tensor::from_parts(vec![batch, self.n_out], out)
    }
}

/// Step-by-step simulator over a batch.
pub struct Simulation<'m, S: Scalar> {
    model: &'m ModelGraph<S>,
    configs: Vec<LayerSnnConfig<S>>,
    /// Output of the layers before the first relu; constant over time.
    constant_prefix: Tensor<S>,
    /// First graph index processed every timestep.
    dynamic_start: usize,
    sparse: Vec<Option<SparseDense<S>>>,
    states: Vec<NeuronState<S>>,
    /// Emitted amplitude summed over time, per spiking layer.
    emitted_sum: Vec<Vec<f64>>,
    out_acc: Vec<S>,
    t: usize,
    per_sample: Vec<Vec<u64>>,
    per_layer: Vec<u64>,
    trains: Option<Vec<SpikeTrain<S>>>,
    charge: Option<Vec<ChargeLedger>>,
}

impl<'m, S: Scalar> Simulation<'m, S> {
    pub fn new(
        model: &'m ModelGraph<S>,
        configs: &[LayerSnnConfig<S>],
        batch: &Tensor<S>,
        opts: &SimOptions,
    ) -> Result<Self> {
        model.check_batch(batch)?;
        let spiking = model.spiking_layers();
        if configs.len() != spiking.len() {
            return Err(Error::MissingConfig {
                expected: spiking.len(),
                found: configs.len(),
            });
        }
        if !(opts.initial_membrane.is_finite()) {
            return Err(Error::InvalidArgument("initial membrane must be finite".into()));
        }
        let dynamic_start = spiking.first().copied().unwrap_or(model.layers().len());
        let mut prefix = batch.clone();
        for i in 0..dynamic_start {
            prefix = model.apply_layer(i, &prefix)?;
        }

        let shapes = model.shapes();
        let b = batch.batch();
        let states: Vec<NeuronState<S>> = spiking
            .iter()
            .zip(configs)
            .map(|(&li, cfg)| {
                let mut shape = vec![b];
                shape.extend_from_slice(&shapes[li + 1]);
                NeuronState::new(&shape, S::lit(opts.initial_membrane) * cfg.threshold())
            })
            .collect();

        let sparse = model
            .layers()
            .iter()
            .enumerate()
            .map(|(i, l)| match l {
                LayerSpec::Dense(d) if i > dynamic_start => {
                    let (n_in, n_out) = (d.in_features(), d.out_features());
                    let w = d.weight.data();
                    let mut weight_t = vec![S::zero(); n_in * n_out];
                    for o in 0..n_out {
                        for k in 0..n_in {
                            weight_t[k * n_out + o] = w[o * n_in + k];
                        }
                    }
                    Some(SparseDense {
                        weight_t,
                        bias: d.bias.data().to_vec(),
                        n_in,
                        n_out,
                    })
                }
                _ => None,
            })
            .collect();

        let trains = opts
            .record_trains
            .then(|| spiking.iter().map(|_| SpikeTrain { steps: Vec::new() }).collect());
        let charge = opts.record_charge.then(|| {
            states
                .iter()
                .map(|s| {
                    let initial: Vec<f64> = s.v.data().iter().map(|v| v.as_f64()).collect();
                    ChargeLedger {
                        input: vec![0.0; initial.len()],
                        emitted: vec![0.0; initial.len()],
                        residual: initial.clone(),
                        initial,
                    }
                })
                .collect()
        });

        let emitted_sum = states.iter().map(|s| vec![0.0; s.v.len()]).collect();
        Ok(Simulation {
            model,
            configs: configs.to_vec(),
            constant_prefix: prefix,
            dynamic_start,
            sparse,
            states,
            emitted_sum,
            out_acc: vec![S::zero(); b * model.class_count()],
            t: 0,
            per_sample: vec![vec![0; spiking.len()]; b],
            per_layer: vec![0; spiking.len()],
            trains,
            charge,
        })
    }

    pub fn timestep(&self) -> usize {
        self.t
    }

    /// Advances one timestep.
    pub fn step(&mut self) -> Result<()> {
        let layers = self.model.layers();
        let mut x = self.constant_prefix.clone();
        let mut spiking_idx = 0;
        for i in self.dynamic_start..layers.len() {
            x = match &layers[i] {
                LayerSpec::Relu => {
                    let k = spiking_idx;
                    spiking_idx += 1;
                    self.fire_layer(k, &x)
                }
                _ => match &self.sparse[i] {
                    Some(sd) => sd.apply(&x),
                    None => self.model.apply_layer(i, &x)?,
                },
            };
        }
        for (acc, &v) in self.out_acc.iter_mut().zip(x.data()) {
            *acc += v;
        }
        self.t += 1;
        Ok(())
    }

    fn fire_layer(&mut self, k: usize, current: &Tensor<S>) -> Tensor<S> {
        let cfg = self.configs[k];
        let state = &mut self.states[k];
        let mut out = Tensor::zeros(current.shape());
        let row = current.row_len();
        for b in 0..current.batch() {
            let range = b * row..(b + 1) * row;
            let n = fire(
                &mut state.u.data_mut()[range.clone()],
                &mut state.v.data_mut()[range.clone()],
                &current.data()[range.clone()],
                &mut out.data_mut()[range],
                &cfg,
            );
            self.per_sample[b][k] += n;
            self.per_layer[k] += n;
        }
        for (acc, e) in self.emitted_sum[k].iter_mut().zip(out.data()) {
            *acc += e.as_f64();
        }
        if let Some(ledgers) = &mut self.charge {
            let ledger = &mut ledgers[k];
            for (i, ((c, e), v)) in current
                .data()
                .iter()
                .zip(out.data())
                .zip(state.v.data())
                .enumerate()
            {
                ledger.input[i] += c.as_f64();
                ledger.emitted[i] += e.as_f64();
                ledger.residual[i] = v.as_f64();
            }
        }
        if let Some(trains) = &mut self.trains {
            trains[k].steps.push(out.clone());
        }
        out
    }

    /// Accumulated classifier membrane divided by the timesteps run so far.
    pub fn scores(&self) -> Tensor<S> {
        let t = S::lit(self.t.max(1) as f64);
        Tensor::from_parts(
            vec![self.per_sample.len(), self.model.class_count()],
            self.out_acc.iter().map(|&v| v / t).collect(),
        )
    }

    /// Mean emitted amplitude of every spiking layer so far.
    pub fn rates(&self) -> Vec<Tensor<S>> {
        let t = self.t.max(1) as f64;
        self.states
            .iter()
            .zip(&self.emitted_sum)
            .map(|(st, sum)| {
                Tensor::from_parts(st.v.shape().to_vec(), sum.iter().map(|&v| S::lit(v / t)).collect())
            })
            .collect()
    }

    /// Scores of a single sample.
    pub fn sample_scores(&self, b: usize) -> Vec<S> {
        let c = self.model.class_count();
        let t = S::lit(self.t.max(1) as f64);
        self.out_acc[b * c..(b + 1) * c].iter().map(|&v| v / t).collect()
    }

    /// Unit spikes emitted so far by sample `b`, per layer.
    pub fn sample_spikes(&self, b: usize) -> &[u64] {
        &self.per_sample[b]
    }

    pub fn stats(&self) -> RunStats<S> {
        RunStats {
            spike_count: self.per_layer.iter().sum(),
            per_layer: self.per_layer.clone(),
            per_sample: self.per_sample.clone(),
            residual: self.states.iter().map(|s| s.v.clone()).collect(),
            timesteps: self.t,
            fan_out: self.model.fan_outs(),
        }
    }

    pub fn finish(self) -> SnnRun<S> {
        SnnRun {
            scores: self.scores(),
            stats: self.stats(),
            rates: self.rates(),
            trains: self.trains,
            charge: self.charge,
        }
    }
}

/// Simulates `timesteps` steps of the converted network on `batch`.
pub fn run_snn<S: Scalar>(
    model: &ModelGraph<S>,
    configs: &[LayerSnnConfig<S>],
    batch: &Tensor<S>,
    timesteps: usize,
    opts: &SimOptions,
) -> Result<SnnRun<S>> {
    if timesteps == 0 {
        return Err(Error::InvalidArgument("timesteps must be >= 1".into()));
    }
    let mut sim = Simulation::new(model, configs, batch, opts)?;
    for _ in 0..timesteps {
        sim.step()?;
    }
    Ok(sim.finish())
}

/// [`run_snn`] over fixed-size chunks of the batch in parallel. Trains and
/// charge ledgers are not collected. Results do not depend on the thread count.
pub fn run_snn_chunked<S: Scalar>(
    model: &ModelGraph<S>,
    configs: &[LayerSnnConfig<S>],
    batch: &Tensor<S>,
    timesteps: usize,
    opts: &SimOptions,
    chunk: usize,
) -> Result<SnnRun<S>> {
    let opts = SimOptions {
        record_trains: false,
        record_charge: false,
        ..opts.clone()
    };
    let n = batch.batch();
    let chunk = chunk.max(1);
    let starts: Vec<usize> = (0..n).step_by(chunk).collect();
    let parts = starts
        .par_iter()
        .map(|&s| {
            let rows: Vec<usize> = (s..(s + chunk).min(n)).collect();
            run_snn(model, configs, &batch.select_rows(&rows)?, timesteps, &opts)
        })
        .collect::<Result<Vec<_>>>()?;
    merge_runs(parts)
}

fn merge_runs<S: Scalar>(parts: Vec<SnnRun<S>>) -> Result<SnnRun<S>> {
    let cat = |get: &dyn Fn(&SnnRun<S>) -> &Tensor<S>| Tensor::concat_batch(&parts.iter().map(get).collect::<Vec<_>>());
    let scores = cat(&|r| &r.scores)?;
    let layers = parts[0].rates.len();
    let rates = (0..layers).map(|k| cat(&|r| &r.rates[k])).collect::<Result<Vec<_>>>()?;
    let residual = (0..layers)
        .map(|k| cat(&|r| &r.stats.residual[k]))
        .collect::<Result<Vec<_>>>()?;
    let mut per_layer = vec![0u64; layers];
    let mut per_sample = Vec::new();
    for p in &parts {
        for (a, b) in per_layer.iter_mut().zip(&p.stats.per_layer) {
            *a += b;
        }
        per_sample.extend(p.stats.per_sample.iter().cloned());
    }
    let first = &parts[0].stats;
    let stats = RunStats {
        spike_count: per_layer.iter().sum(),
        per_layer,
        per_sample,
        residual,
        timesteps: first.timesteps,
        fan_out: first.fan_out.clone(),
    };
    Ok(SnnRun {
        scores,
        stats,
        rates,
        trains: None,
        charge: None,
    })
}

/// Writes nonzero emissions as `layer,timestep,neuron_index,emitted_amplitude`
/// rows. Timesteps count from 1; the neuron index is flattened over the batch.
pub fn write_trace_csv<S: Scalar, W: Write>(trains: &[SpikeTrain<S>], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["layer", "timestep", "neuron_index", "emitted_amplitude"])?;
    for (layer, train) in trains.iter().enumerate() {
        for (t, step) in train.steps.iter().enumerate() {
            for (n, &v) in step.data().iter().enumerate() {
                if v != S::zero() {
                    w.write_record([
                        layer.to_string(),
                        (t + 1).to_string(),
                        n.to_string(),
                        v.to_string(),
                    ])?;
                }
            }
        }
    }
    w.flush().map_err(|e| Error::io("<trace>", e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Dense;

    fn scalar_state(v: f64) -> NeuronState<f64> {
        NeuronState::new(&[1], v)
    }

    fn drive(seq: &[f64], cfg: &LayerSnnConfig<f64>) -> (f64, f64) {
        let mut st = scalar_state(0.0);
        let mut total = 0.0;
        for &c in seq {
            let e = step_layer(&mut st, &Tensor::from_vec(vec![c]).unwrap(), cfg).unwrap();
            total += e.data()[0];
        }
        (total, st.v.data()[0])
    }

    #[test]
    fn uneven_input_single_spike() {
        let cfg = LayerSnnConfig::new(1.0, 1, 1).unwrap();
        let mut st = scalar_state(0.0);
        let mut emitted = Vec::new();
        let mut after = Vec::new();
        for c in [1.5, 1.5, 1.0] {
            let e = step_layer(&mut st, &Tensor::from_vec(vec![c]).unwrap(), &cfg).unwrap();
            emitted.push(e.data()[0]);
            after.push(st.v.data()[0]);
        }
        assert_eq!(emitted, vec![1.0, 1.0, 1.0]);
        assert_eq!(after, vec![0.5, 1.0, 1.0]);
    }

    #[test]
    fn uneven_input_burst() {
        let cfg = LayerSnnConfig::new(1.0, 1, 2).unwrap();
        assert_eq!(drive(&[1.5, 1.5, 1.0], &cfg), (4.0, 0.0));
    }

    #[test]
    fn silent_neuron() {
        let cfg = LayerSnnConfig::new(1.0, 1, 3).unwrap();
        assert_eq!(drive(&[0.0; 10], &cfg), (0.0, 0.0));
    }

    #[test]
    fn compressed_burst() {
        let cfg = LayerSnnConfig::new(1.0, 2, 2).unwrap();
        assert_eq!(cfg.threshold(), 2.0);
        let mut st = scalar_state(0.0);
        let e = step_layer(&mut st, &Tensor::from_vec(vec![5.0]).unwrap(), &cfg).unwrap();
        assert_eq!(e.data()[0], 4.0);
        assert_eq!(st.v.data()[0], 1.0);
        assert_eq!(st.u.data()[0], 5.0);
    }

    #[test]
    fn shape_mismatch() {
        let cfg = LayerSnnConfig::new(1.0, 1, 1).unwrap();
        let mut st = NeuronState::new(&[2], 0.0);
        assert!(step_layer(&mut st, &Tensor::from_vec(vec![1.0]).unwrap(), &cfg).is_err());
    }

    #[test]
    fn config_validation() {
        assert!(LayerSnnConfig::<f32>::new(0.0, 1, 1).is_err());
        assert!(LayerSnnConfig::<f32>::new(1.0, 0, 1).is_err());
        assert!(LayerSnnConfig::<f32>::new(1.0, 1, 0).is_err());
        let c = LayerSnnConfig::<f32>::new(0.3, 4, 1).unwrap();
        assert_eq!(c.threshold(), 4.0f32 * 0.3);
    }

    #[test]
    fn rate_of_trains() {
        let t = |v: Vec<f64>| SpikeTrain {
            steps: v.into_iter().map(|x| Tensor::from_vec(vec![x]).unwrap()).collect(),
        };
        assert_eq!(rate_output(&t(vec![1.0, 0.0, 1.0, 0.0])).unwrap().data(), &[0.5]);
        assert_eq!(rate_output(&t(vec![0.0; 4])).unwrap().data(), &[0.0]);
        let compressed = rate_output(&t(vec![2.0, 0.0, 2.0, 0.0])).unwrap();
        let regular = rate_output(&t(vec![1.0, 1.0, 1.0, 1.0])).unwrap();
        assert_eq!(compressed.data(), &[1.0]);
        assert_eq!(compressed, regular);
        assert!(rate_output(&SpikeTrain::<f64> { steps: vec![] }).is_err());
    }

    fn one_neuron_net(w: f64) -> ModelGraph<f64> {
        let hidden = Dense::new(Tensor::new(vec![1, 1], vec![w]).unwrap(), Tensor::zeros(&[1])).unwrap();
        let head = Dense::new(Tensor::new(vec![2, 1], vec![1.0, -1.0]).unwrap(), Tensor::zeros(&[2])).unwrap();
        ModelGraph::new(
            vec![1],
            2,
            vec![LayerSpec::Dense(hidden), LayerSpec::Relu, LayerSpec::Dense(head)],
        )
        .unwrap()
    }

    #[test]
    fn constant_current_hand_simulation() {
        // v(0) = 0: u walks 0.6, 1.2 -> fire, 0.8, 1.4 -> fire.
        let m = one_neuron_net(1.0);
        let cfg = [LayerSnnConfig::new(1.0, 1, 1).unwrap()];
        let x = Tensor::new(vec![1, 1], vec![0.6]).unwrap();
        let opts = SimOptions {
            initial_membrane: 0.0,
            record_trains: true,
            ..SimOptions::default()
        };
        let run = run_snn(&m, &cfg, &x, 4, &opts).unwrap();
        assert_eq!(run.stats.spike_count, 2);
        let rate = rate_output(&run.trains.unwrap()[0]).unwrap();
        assert_eq!(rate.data(), &[0.5]);
        assert_eq!(run.scores.data(), &[0.5, -0.5]);
    }

    #[test]
    fn zero_input_is_silent() {
        let m = one_neuron_net(1.0);
        let cfg = [LayerSnnConfig::new(1.0, 1, 1).unwrap()];
        let run = run_snn(&m, &cfg, &Tensor::zeros(&[3, 1]), 8, &SimOptions::default()).unwrap();
        assert_eq!(run.stats.spike_count, 0);
        assert!(run.scores.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn missing_config_and_zero_timesteps() {
        let m = one_neuron_net(1.0);
        let x = Tensor::zeros(&[1, 1]);
        assert!(matches!(
            run_snn(&m, &[], &x, 4, &SimOptions::default()),
            Err(Error::MissingConfig { expected: 1, found: 0 })
        ));
        let cfg = [LayerSnnConfig::new(1.0, 1, 1).unwrap()];
        assert!(run_snn(&m, &cfg, &x, 0, &SimOptions::default()).is_err());
    }

    #[test]
    fn trace_csv_lists_nonzero_emissions() {
        let m = one_neuron_net(1.0);
        let cfg = [LayerSnnConfig::new(1.0, 1, 1).unwrap()];
        let x = Tensor::new(vec![1, 1], vec![0.6]).unwrap();
        let opts = SimOptions {
            initial_membrane: 0.0,
            record_trains: true,
            ..SimOptions::default()
        };
        let run = run_snn(&m, &cfg, &x, 4, &opts).unwrap();
        let mut buf = Vec::new();
        write_trace_csv(&run.trains.unwrap(), &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(
            text,
            "layer,timestep,neuron_index,emitted_amplitude\n0,2,0,1\n0,4,0,1\n"
        );
    }

    #[test]
    fn chunked_matches_whole_batch() {
        let m = crate::model::ModelBuilder::mlp(&[3], &[7, 5], 3).build::<f64>(2).unwrap();
        let cfg = vec![LayerSnnConfig::new(0.4, 1, 2).unwrap(); 2];
        let data: Vec<f64> = (0..30).map(|i| ((i * 7) % 11) as f64 / 5.0 - 0.5).collect();
        let x = Tensor::new(vec![10, 3], data).unwrap();
        let whole = run_snn(&m, &cfg, &x, 6, &SimOptions::default()).unwrap();
        let parts = run_snn_chunked(&m, &cfg, &x, 6, &SimOptions::default(), 3).unwrap();
        assert_eq!(whole.scores, parts.scores);
        assert_eq!(whole.rates, parts.rates);
        assert_eq!(whole.stats, parts.stats);
    }
}
