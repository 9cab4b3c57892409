//! Minibatch Adam ascent on the bound, supervision wiring and filter evaluation.

use rand::seq::index::sample as sample_indices;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::elbo::elbo_gradients;
use crate::environments::{Dataset, IMAGE_SENSOR};
use crate::error::{Result, VssfError};
use crate::gaussian::{Matrix, Vector};
use crate::lgssm::{spectral_radius, DynamicsParams};
use crate::model::{Model, NamedSensor, SensorModel, SensorObservations, TrajectoryBatch};
use crate::sensors::{LinearSensor, NonlinearSensor, DEFAULT_DECODER_NOISE};

/// Name of the linear sensor that reads ground-truth states during supervised training.
pub const SUPERVISION_SENSOR: &str = "supervision";
pub const SUPERVISION_VARIANCE: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Supervision {
    #[default]
    None,
    Partial,
    Full,
}

impl std::str::FromStr for Supervision {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "none" => Ok(Self::None),
            "partial" => Ok(Self::Partial),
            "full" => Ok(Self::Full),
            other => Err(format!("unknown supervision `{other}` (none|partial|full)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_epsilon: f64,
    pub clip_norm: f64,
    pub batch_size: usize,
    pub steps: usize,
    pub sample_count: usize,
    pub seed: u64,
    pub supervision: Supervision,
    pub learn_dynamics: bool,
    pub log_every: usize,
    /// Isotropic variance of the image decoder at initialisation.
    pub decoder_noise: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            adam_epsilon: 1e-8,
            clip_norm: 10.0,
            batch_size: 32,
            steps: 3000,
            sample_count: 1,
            seed: 0,
            supervision: Supervision::None,
            learn_dynamics: false,
            log_every: 100,
            decoder_noise: DEFAULT_DECODER_NOISE,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("learning_rate", self.learning_rate),
            ("adam_epsilon", self.adam_epsilon),
            ("clip_norm", self.clip_norm),
            ("decoder_noise", self.decoder_noise),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(VssfError::ConfigMismatch(format!("{name} must be positive")));
            }
        }
        for (name, v) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&v) {
                return Err(VssfError::ConfigMismatch(format!("{name} must lie in [0, 1)")));
            }
        }
        for (name, v) in [
            ("batch_size", self.batch_size),
            ("sample_count", self.sample_count),
            ("log_every", self.log_every),
        ] {
            if v == 0 {
                return Err(VssfError::ConfigMismatch(format!("{name} must be positive")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<Matrix>,
    pub v: Vec<Matrix>,
}

impl AdamState {
    pub fn zeros_like(params: &[Matrix]) -> Self {
        let zeros: Vec<Matrix> = params.iter().map(|p| Matrix::zeros(p.nrows(), p.ncols())).collect();
        Self {
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }
}

/// One bias-corrected Adam descent step on `params` given loss gradients.
pub fn adam_step(params: &mut [Matrix], grads: &[Matrix], state: &mut AdamState, config: &TrainConfig) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() || params.len() != state.v.len() {
        return Err(VssfError::ShapeMismatch("parameter, gradient and moment counts differ".into()));
    }
    for ((p, g), m) in params.iter().zip(grads).zip(&state.m) {
        if p.shape() != g.shape() || p.shape() != m.shape() {
            return Err(VssfError::ShapeMismatch(format!("{:?} vs {:?}", p.shape(), g.shape())));
        }
    }
    if grads.iter().any(|g| g.iter().any(|v| !v.is_finite())) {
        return Err(VssfError::NonFinite("gradient".into()));
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - config.beta1.powi(t);
    let c2 = 1.0 - config.beta2.powi(t);
    for ((p, g), (m, v)) in params.iter_mut().zip(grads).zip(state.m.iter_mut().zip(state.v.iter_mut())) {
        for i in 0..p.len() {
            m[i] = config.beta1 * m[i] + (1.0 - config.beta1) * g[i];
            v[i] = config.beta2 * v[i] + (1.0 - config.beta2) * g[i] * g[i];
            let m_hat = m[i] / c1;
            let v_hat = v[i] / c2;
            p[i] -= config.learning_rate * m_hat / (v_hat.sqrt() + config.adam_epsilon);
        }
    }
    Ok(())
}

/// Rescales `grads` in place so their joint norm is at most `max_norm`; returns the original norm.
pub fn clip_global_norm(grads: &mut [Matrix], max_norm: f64) -> f64 {
    let norm = grads.iter().map(|g| g.norm_squared()).sum::<f64>().sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        for g in grads.iter_mut() {
            *g *= s;
        }
    }
    norm
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub step: u64,
    pub elbo: f64,
    pub kl: f64,
    pub recon: f64,
    pub rho_a: f64,
}

impl TraceRow {
    pub fn progress_line(&self) -> String {
        format!(
            "step={} elbo={} kl={} recon={} rho_A={}",
            self.step, self.elbo, self.kl, self.recon, self.rho_a
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CollapseDiagnostics {
    pub step: u64,
    pub spectral_radius_a: f64,
    pub mean_posterior_trace: f64,
    pub evidence_norm: f64,
}

impl CollapseDiagnostics {
    pub fn collapsed(&self) -> bool {
        self.spectral_radius_a < 0.01 || self.mean_posterior_trace < 1e-6
    }
}

pub enum TrainEvent<'a> {
    Step(&'a TraceRow),
    Diagnostics(&'a CollapseDiagnostics),
}

/// Components a supervision sensor observes.
pub fn supervised_components(dataset: &Dataset, supervision: Supervision) -> Vec<usize> {
    match supervision {
        Supervision::None => Vec::new(),
        Supervision::Partial => dataset.env.supervised_components(),
        Supervision::Full => (0..dataset.env.state_dim()).collect(),
    }
}

/// Model for a generated dataset: learned image encoder/decoder and, when supervised,
/// a fixed linear sensor on the ground-truth states.
pub fn initial_model(dataset: &Dataset, config: &TrainConfig) -> Result<Model> {
    let truth = dataset.dynamics_params()?;
    let m = truth.state_dim();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let dynamics = if config.learn_dynamics {
        DynamicsParams::new(
            Matrix::identity(m, m) * 0.9,
            Matrix::zeros(m, truth.input_dim()),
            Matrix::identity(m, m) * 0.1,
            truth.sigma_z.clone(),
        )?
    } else {
        truth
    };
    let image = dataset.observation(IMAGE_SENSOR)?;
    let mut sensors = vec![NamedSensor {
        name: IMAGE_SENSOR.to_string(),
        model: SensorModel::Nonlinear(NonlinearSensor::random(image.shape[2], m, config.decoder_noise, &mut rng)),
    }];
    let coords = supervised_components(dataset, config.supervision);
    if !coords.is_empty() {
        sensors.push(NamedSensor {
            name: SUPERVISION_SENSOR.to_string(),
            model: SensorModel::Linear(LinearSensor::select(m, &coords, SUPERVISION_VARIANCE)?),
        });
    }
    let mut model = Model::new(dynamics, sensors)?;
    model.learn_dynamics = config.learn_dynamics;
    Ok(model)
}

/// Batch holding every sensor of `model`; the supervision sensor reads ground truth.
pub fn model_batch(model: &Model, dataset: &Dataset, indices: &[usize], len: Option<usize>) -> Result<TrajectoryBatch> {
    let names: Vec<&str> = model
        .sensors
        .iter()
        .map(|s| s.name.as_str())
        .filter(|&n| n != SUPERVISION_SENSOR)
        .collect();
    let mut batch = dataset.batch(indices, &names, len)?;
    if let Ok(sup) = model.sensor(SUPERVISION_SENSOR) {
        let SensorModel::Linear(l) = &sup.model else {
            return Err(VssfError::ConfigMismatch("supervision sensor must be linear".into()));
        };
        let steps = (0..batch.len)
            .map(|t| dataset.states.step_rows(indices, t) * l.c.transpose())
            .collect();
        batch.observations.push(SensorObservations {
            sensor: SUPERVISION_SENSOR.to_string(),
            steps,
        });
    }
    batch.validate()?;
    Ok(batch)
}

fn step_rng(seed: u64, step: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(step);
    rng
}

/// Resumable training state. Everything a step depends on is stored here or
/// derived from `(config.seed, step)`, so interrupted runs continue exactly.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub model: Model,
    pub adam: AdamState,
    pub config: TrainConfig,
    pub trace: Vec<TraceRow>,
}

impl Trainer {
    pub fn new(model: Model, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let adam = AdamState::zeros_like(&model.trainable_values());
        Ok(Self {
            model,
            adam,
            config,
            trace: Vec::new(),
        })
    }

    pub fn step(&self) -> u64 {
        self.adam.step
    }

    fn check_dataset(&self, dataset: &Dataset) -> Result<()> {
        if dataset.is_empty() {
            return Err(VssfError::ConfigMismatch("training dataset is empty".into()));
        }
        let psi = dataset.dynamics_params()?;
        if psi.state_dim() != self.model.state_dim() || psi.input_dim() != self.model.dynamics.input_dim() {
            return Err(VssfError::ConfigMismatch("dataset dimensions differ from the model".into()));
        }
        Ok(())
    }

    /// Runs one ascent step on a fresh minibatch.
    pub fn train_step(&mut self, dataset: &Dataset) -> Result<TraceRow> {
        let step = self.adam.step;
        let mut rng = step_rng(self.config.seed, step);
        let n = dataset.count();
        let mut indices = sample_indices(&mut rng, n, self.config.batch_size.min(n)).into_vec();
        indices.sort_unstable();
        let batch = model_batch(&self.model, dataset, &indices, None)?;
        let (bound, mut grads) = elbo_gradients(&self.model, &batch, self.config.sample_count, &mut rng)?;
        if !bound.total.is_finite() {
            return Err(VssfError::NonFinite(format!("elbo at step {step}")));
        }
        // ascend the bound by descending its negation
        for g in grads.iter_mut() {
            g.neg_mut();
        }
        clip_global_norm(&mut grads, self.config.clip_norm);
        let mut params = self.model.trainable_values();
        let mut adam = self.adam.clone();
        adam_step(&mut params, &grads, &mut adam, &self.config)?;
        let mut updated = self.model.clone();
        updated.set_trainable_values(&params)?;
        if updated.learn_dynamics && spectral_radius(&updated.dynamics.a).is_nan() {
            return Err(VssfError::NonFinite(format!("transition matrix at step {step}")));
        }
        self.model = updated;
        self.adam = adam;
        let row = TraceRow {
            step: self.adam.step,
            elbo: bound.total,
            kl: bound.kl_term,
            recon: bound.recon_term,
            rho_a: spectral_radius(&self.model.dynamics.a),
        };
        self.trace.push(row.clone());
        Ok(row)
    }

    /// Trains until `config.steps` have been taken. On error the trainer keeps the last good state.
    pub fn run(&mut self, dataset: &Dataset, mut on_event: impl FnMut(TrainEvent<'_>)) -> Result<()> {
        self.check_dataset(dataset)?;
        while (self.adam.step as usize) < self.config.steps {
            let row = self.train_step(dataset)?;
            on_event(TrainEvent::Step(&row));
            if row.step % self.config.log_every as u64 == 0 {
                let diag = self.diagnostics(dataset)?;
                on_event(TrainEvent::Diagnostics(&diag));
            }
        }
        Ok(())
    }

    pub fn diagnostics(&self, dataset: &Dataset) -> Result<CollapseDiagnostics> {
        let count = dataset.count().min(self.config.batch_size);
        let indices: Vec<usize> = (0..count).collect();
        let batch = model_batch(&self.model, dataset, &indices, None)?;
        let names: Vec<&str> = self.model.sensors.iter().map(|s| s.name.as_str()).collect();
        let beliefs = self.model.filter_batch(&batch, &names)?;
        let mut trace_sum = 0.0;
        let mut k = 0usize;
        for traj in &beliefs {
            for b in traj {
                trace_sum += b.posterior.cov.trace();
                k += 1;
            }
        }
        let mut evidence_norm = 0.0;
        for obs in &batch.observations {
            let sensor = &self.model.sensor(&obs.sensor)?.model;
            let (eta, _) = sensor.batch_evidence(&obs.steps[0], &self.model.dynamics.sigma_z)?;
            evidence_norm += eta.norm() / (count as f64).sqrt();
        }
        Ok(CollapseDiagnostics {
            step: self.adam.step,
            spectral_radius_a: spectral_radius(&self.model.dynamics.a),
            mean_posterior_trace: trace_sum / k.max(1) as f64,
            evidence_norm,
        })
    }
}

/// Trains a fresh model on `dataset`.
pub fn train(model: Model, dataset: &Dataset, config: TrainConfig, on_event: impl FnMut(TrainEvent<'_>)) -> Result<Trainer> {
    let mut trainer = Trainer::new(model, config)?;
    trainer.run(dataset, on_event)?;
    Ok(trainer)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub horizon: usize,
    /// Mean squared error of each state component over all steps and trajectories.
    pub component_mse: Vec<f64>,
    /// Components the headline number is taken over.
    pub scored_components: Vec<usize>,
    pub mse: f64,
    /// Mean squared error over scored components at each step.
    pub step_error: Vec<f64>,
}

/// Filters the first `horizon` steps of every trajectory with only the
/// non-supervision sensors and scores the posterior means against ground truth.
pub fn evaluate_filter(model: &Model, dataset: &Dataset, horizon: usize, scored: &[usize]) -> Result<EvalReport> {
    if dataset.is_empty() {
        return Err(VssfError::MissingGroundTruth("dataset has no trajectories".into()));
    }
    if dataset.len() < horizon || horizon == 0 {
        return Err(VssfError::MissingGroundTruth(format!(
            "need {horizon} steps of ground truth, dataset has {}",
            dataset.len()
        )));
    }
    let m = model.state_dim();
    if dataset.states.shape[2] != m {
        return Err(VssfError::ConfigMismatch("ground-truth width differs from the model".into()));
    }
    if scored.is_empty() || scored.iter().any(|&c| c >= m) {
        return Err(VssfError::ConfigMismatch("scored components out of range".into()));
    }
    let names: Vec<&str> = model
        .sensors
        .iter()
        .map(|s| s.name.as_str())
        .filter(|&n| n != SUPERVISION_SENSOR)
        .collect();
    let n = dataset.count();
    let mut comp = vec![0.0; m];
    let mut step_error = vec![0.0; horizon];
    let chunk = 256;
    let mut start = 0;
    while start < n {
        let indices: Vec<usize> = (start..(start + chunk).min(n)).collect();
        let batch = dataset.batch(&indices, &names, Some(horizon))?;
        let beliefs = model.filter_batch(&batch, &names)?;
        for (k, &i) in indices.iter().enumerate() {
            for (t, b) in beliefs[k].iter().enumerate() {
                let truth = Vector::from_iterator(m, dataset.states.get(i, t).iter().map(|&v| v as f64));
                let err = &b.posterior.mean - truth;
                for c in 0..m {
                    comp[c] += err[c] * err[c];
                }
                step_error[t] += scored.iter().map(|&c| err[c] * err[c]).sum::<f64>() / scored.len() as f64;
            }
        }
        start += chunk;
    }
    let total = (n * horizon) as f64;
    let component_mse: Vec<f64> = comp.iter().map(|v| v / total).collect();
    let mse = scored.iter().map(|&c| component_mse[c]).sum::<f64>() / scored.len() as f64;
    Ok(EvalReport {
        horizon,
        component_mse,
        scored_components: scored.to_vec(),
        mse,
        step_error: step_error.iter().map(|v| v / n as f64).collect(),
    })
}
