//! A complete filter model: dynamics plus a named sensor suite, and the
//! batched trajectory layout consumed by the objective.

use serde::{Deserialize, Serialize};
use vssf_autodiff::{Activation, MlpParams};

use crate::error::{check_dim, Result, VssfError};
use crate::filtering::{filter_forward, EvidenceBundle, FilterBelief};
use crate::gaussian::{cholesky, spd_inverse, Matrix, Vector};
use crate::lgssm::DynamicsParams;
use crate::sensors::{LinearSensor, NonlinearSensor, SensorEvidence};

#[derive(Debug, Clone, PartialEq)]
pub enum SensorModel {
    Linear(LinearSensor),
    Nonlinear(NonlinearSensor),
}

impl SensorModel {
    pub fn obs_dim(&self) -> usize {
        match self {
            Self::Linear(s) => s.obs_dim(),
            Self::Nonlinear(s) => s.obs_dim(),
        }
    }

    pub fn state_dim(&self) -> usize {
        match self {
            Self::Linear(s) => s.state_dim(),
            Self::Nonlinear(s) => s.state_dim(),
        }
    }

    /// Evidence for each row of `xs` (`[n, obs_dim]`), as `(eta [m, n], lambda)`.
    pub fn batch_evidence(&self, xs: &Matrix, sigma_z: &Matrix) -> Result<(Matrix, Matrix)> {
        check_dim("observation width", self.obs_dim(), xs.ncols())?;
        match self {
            Self::Linear(s) => {
                let gain = s.gain()?;
                Ok((&gain * xs.transpose(), &gain * &s.c))
            }
            Self::Nonlinear(s) => {
                let lambda = s.evidence_precision()?;
                let eta = (&lambda + spd_inverse(sigma_z)?) * s.encode_means(xs)?;
                Ok((eta, lambda))
            }
        }
    }

    pub fn log_density(&self, x: &Vector, z: &Vector) -> Result<f64> {
        match self {
            Self::Linear(s) => s.log_density(x, z),
            Self::Nonlinear(s) => s.decode_log_density(x, z),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NamedSensor {
    pub name: String,
    pub model: SensorModel,
}

/// Structural description of a sensor, enough to rebuild it before loading tensors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SensorLayout {
    Linear {
        name: String,
        obs_dim: usize,
        trainable: bool,
    },
    Nonlinear {
        name: String,
        obs_dim: usize,
        hidden: Vec<usize>,
        epsilon: f64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelLayout {
    pub state_dim: usize,
    pub input_dim: usize,
    pub learn_dynamics: bool,
    pub sensors: Vec<SensorLayout>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub dynamics: DynamicsParams,
    /// Lower-triangular `F` with `sigma_w = F F^T`; the trainable form of the process noise.
    pub sigma_w_factor: Matrix,
    pub learn_dynamics: bool,
    pub sensors: Vec<NamedSensor>,
}

impl Model {
    pub fn new(dynamics: DynamicsParams, sensors: Vec<NamedSensor>) -> Result<Self> {
        let m = dynamics.state_dim();
        for s in &sensors {
            check_dim("sensor state dimension", m, s.model.state_dim())?;
        }
        let sigma_w_factor = cholesky(&dynamics.sigma_w)?.l();
        let mut model = Self {
            dynamics,
            sigma_w_factor,
            learn_dynamics: false,
            sensors,
        };
        model.sync_sigma_w();
        Ok(model)
    }

    pub fn state_dim(&self) -> usize {
        self.dynamics.state_dim()
    }

    pub fn sensor_index(&self, name: &str) -> Result<usize> {
        self.sensors
            .iter()
            .position(|s| s.name == name)
            .ok_or_else(|| VssfError::UnknownSensor(name.to_string()))
    }

    pub fn sensor(&self, name: &str) -> Result<&NamedSensor> {
        Ok(&self.sensors[self.sensor_index(name)?])
    }

    pub fn layout(&self) -> ModelLayout {
        ModelLayout {
            state_dim: self.state_dim(),
            input_dim: self.dynamics.input_dim(),
            learn_dynamics: self.learn_dynamics,
            sensors: self
                .sensors
                .iter()
                .map(|s| match &s.model {
                    SensorModel::Linear(l) => SensorLayout::Linear {
                        name: s.name.clone(),
                        obs_dim: l.obs_dim(),
                        trainable: l.trainable,
                    },
                    SensorModel::Nonlinear(n) => {
                        let sizes = n.encoder.sizes();
                        SensorLayout::Nonlinear {
                            name: s.name.clone(),
                            obs_dim: n.obs_dim(),
                            hidden: sizes[1..sizes.len() - 1].to_vec(),
                            epsilon: n.epsilon,
                        }
                    }
                })
                .collect(),
        }
    }

    /// A zero-filled model with the given layout; every tensor is then overwritten by [`Model::set_tensors`].
    pub fn from_layout(layout: &ModelLayout) -> Result<Self> {
        let m = layout.state_dim;
        let eye = Matrix::identity(m, m);
        let dynamics = DynamicsParams {
            a: Matrix::zeros(m, m),
            b: Matrix::zeros(m, layout.input_dim),
            sigma_w: eye.clone(),
            sigma_z: eye.clone(),
        };
        let sensors = layout
            .sensors
            .iter()
            .map(|s| match s {
                SensorLayout::Linear {
                    name,
                    obs_dim,
                    trainable,
                } => NamedSensor {
                    name: name.clone(),
                    model: SensorModel::Linear(LinearSensor {
                        c: Matrix::zeros(*obs_dim, m),
                        sigma_x: Matrix::identity(*obs_dim, *obs_dim),
                        trainable: *trainable,
                    }),
                },
                SensorLayout::Nonlinear {
                    name,
                    obs_dim,
                    hidden,
                    epsilon,
                } => {
                    let mut enc = vec![*obs_dim];
                    enc.extend(hidden);
                    enc.push(m);
                    let mut dec = vec![m];
                    dec.extend(hidden);
                    dec.push(*obs_dim);
                    NamedSensor {
                        name: name.clone(),
                        model: SensorModel::Nonlinear(NonlinearSensor {
                            encoder: MlpParams::zeros(&enc, Activation::Gelu),
                            evidence_factor: eye.clone(),
                            epsilon: *epsilon,
                            decoder: MlpParams::zeros(&dec, Activation::Gelu),
                            decoder_sigma_x: Matrix::identity(*obs_dim, *obs_dim),
                        }),
                    }
                }
            })
            .collect();
        Ok(Self {
            dynamics,
            sigma_w_factor: eye,
            learn_dynamics: layout.learn_dynamics,
            sensors,
        })
    }

    /// Every tensor (trainable or not) with a stable name, for checkpoints.
    pub fn tensors(&self) -> Vec<(String, &Matrix)> {
        let mut out: Vec<(String, &Matrix)> = vec![
            ("dynamics.a".into(), &self.dynamics.a),
            ("dynamics.b".into(), &self.dynamics.b),
            ("dynamics.sigma_w_factor".into(), &self.sigma_w_factor),
            ("dynamics.sigma_z".into(), &self.dynamics.sigma_z),
        ];
        for s in &self.sensors {
            let p = format!("sensor.{}", s.name);
            match &s.model {
                SensorModel::Linear(l) => {
                    out.push((format!("{p}.c"), &l.c));
                    out.push((format!("{p}.sigma_x"), &l.sigma_x));
                }
                SensorModel::Nonlinear(n) => {
                    for (k, t) in n.encoder.tensors().into_iter().enumerate() {
                        out.push((format!("{p}.encoder.{k}"), t));
                    }
                    out.push((format!("{p}.evidence_factor"), &n.evidence_factor));
                    for (k, t) in n.decoder.tensors().into_iter().enumerate() {
                        out.push((format!("{p}.decoder.{k}"), t));
                    }
                    out.push((format!("{p}.decoder_sigma_x"), &n.decoder_sigma_x));
                }
            }
        }
        out
    }

    fn tensors_mut(&mut self) -> Vec<&mut Matrix> {
        let mut out: Vec<&mut Matrix> = vec![
            &mut self.dynamics.a,
            &mut self.dynamics.b,
            &mut self.sigma_w_factor,
            &mut self.dynamics.sigma_z,
        ];
        for s in &mut self.sensors {
            match &mut s.model {
                SensorModel::Linear(l) => {
                    out.push(&mut l.c);
                    out.push(&mut l.sigma_x);
                }
                SensorModel::Nonlinear(n) => {
                    out.extend(n.encoder.tensors_mut());
                    out.push(&mut n.evidence_factor);
                    out.extend(n.decoder.tensors_mut());
                    out.push(&mut n.decoder_sigma_x);
                }
            }
        }
        out
    }

    /// Overwrites every tensor in [`Model::tensors`] order.
    pub fn set_tensors(&mut self, values: &[Matrix]) -> Result<()> {
        let slots = self.tensors_mut();
        check_dim("tensor count", slots.len(), values.len())?;
        for (slot, v) in slots.into_iter().zip(values) {
            if slot.shape() != v.shape() {
                return Err(VssfError::ShapeMismatch(format!(
                    "expected {:?}, got {:?}",
                    slot.shape(),
                    v.shape()
                )));
            }
            slot.copy_from(v);
        }
        self.sync_sigma_w();
        Ok(())
    }

    fn sync_sigma_w(&mut self) {
        let f = self.sigma_w_factor.lower_triangle();
        self.sigma_w_factor = f.clone();
        self.dynamics.sigma_w = &f * f.transpose();
    }

    /// Names of the trainable tensors, in the order used by gradients and the optimizer.
    pub fn trainable_names(&self) -> Vec<String> {
        let all = self.tensors();
        self.trainable_mask()
            .into_iter()
            .zip(all)
            .filter(|(keep, _)| *keep)
            .map(|(_, (name, _))| name)
            .collect()
    }

    pub fn trainable_values(&self) -> Vec<Matrix> {
        let all = self.tensors();
        self.trainable_mask()
            .into_iter()
            .zip(all)
            .filter(|(keep, _)| *keep)
            .map(|(_, (_, t))| t.clone())
            .collect()
    }

    pub fn set_trainable_values(&mut self, values: &[Matrix]) -> Result<()> {
        let mask = self.trainable_mask();
        let slots: Vec<&mut Matrix> = self
            .tensors_mut()
            .into_iter()
            .zip(mask)
            .filter(|(_, keep)| *keep)
            .map(|(t, _)| t)
            .collect();
        check_dim("trainable tensor count", slots.len(), values.len())?;
        for (slot, v) in slots.into_iter().zip(values) {
            check_dim("trainable tensor rows", slot.nrows(), v.nrows())?;
            check_dim("trainable tensor cols", slot.ncols(), v.ncols())?;
            slot.copy_from(v);
        }
        self.sync_sigma_w();
        Ok(())
    }

    fn trainable_mask(&self) -> Vec<bool> {
        let d = self.learn_dynamics;
        let mut mask = vec![d, d, d, false];
        for s in &self.sensors {
            match &s.model {
                SensorModel::Linear(l) => mask.extend([l.trainable, false]),
                SensorModel::Nonlinear(n) => {
                    mask.extend(vec![true; n.encoder.tensors().len() + 1 + n.decoder.tensors().len()]);
                    mask.push(false);
                }
            }
        }
        mask
    }

    /// Filters every trajectory of `batch` using only the named sensors.
    pub fn filter_batch(&self, batch: &TrajectoryBatch, use_sensors: &[&str]) -> Result<Vec<Vec<FilterBelief>>> {
        let mut per_step: Vec<Vec<Vec<SensorEvidence>>> = vec![vec![Vec::new(); batch.len]; batch.count];
        for obs in &batch.observations {
            if !use_sensors.contains(&obs.sensor.as_str()) {
                continue;
            }
            let sensor = &self.sensor(&obs.sensor)?.model;
            for (t, xs) in obs.steps.iter().enumerate() {
                let (eta, lambda) = sensor.batch_evidence(xs, &self.dynamics.sigma_z)?;
                for (n, slot) in per_step.iter_mut().enumerate() {
                    slot[t].push(SensorEvidence {
                        eta_e: eta.column(n).into_owned(),
                        lambda_e: lambda.clone(),
                    });
                }
            }
        }
        per_step
            .into_iter()
            .enumerate()
            .map(|(n, steps)| {
                let ev: Vec<EvidenceBundle> = steps.into_iter().map(EvidenceBundle::new).collect();
                filter_forward(&self.dynamics, &ev, &batch.inputs_for(n))
            })
            .collect()
    }
}

/// Readings of one sensor: `steps[t]` is `[count, obs_dim]`, one row per trajectory.
#[derive(Debug, Clone, PartialEq)]
pub struct SensorObservations {
    pub sensor: String,
    pub steps: Vec<Matrix>,
}

/// `count` trajectories of `len` steps. `inputs[t]` is `[input_dim, count]` and
/// drives the transition from step `t` to `t + 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryBatch {
    pub count: usize,
    pub len: usize,
    pub inputs: Vec<Matrix>,
    pub observations: Vec<SensorObservations>,
}

impl TrajectoryBatch {
    pub fn validate(&self) -> Result<()> {
        check_dim("batch input steps", self.len.saturating_sub(1), self.inputs.len())?;
        for u in &self.inputs {
            check_dim("batch input columns", self.count, u.ncols())?;
        }
        for o in &self.observations {
            check_dim("batch observation steps", self.len, o.steps.len())?;
            for x in &o.steps {
                check_dim("batch observation rows", self.count, x.nrows())?;
            }
        }
        Ok(())
    }

    pub fn inputs_for(&self, n: usize) -> Vec<Vector> {
        self.inputs.iter().map(|u| u.column(n).into_owned()).collect()
    }

    /// Readings of trajectory `n` as `(sensor, per-step vectors)`.
    pub fn observations_for(&self, n: usize) -> Vec<(String, Vec<Vector>)> {
        self.observations
            .iter()
            .map(|o| {
                (
                    o.sensor.clone(),
                    o.steps.iter().map(|x| x.row(n).transpose()).collect(),
                )
            })
            .collect()
    }

    /// Trajectories `start..start + count`.
    pub fn slice(&self, start: usize, count: usize) -> TrajectoryBatch {
        TrajectoryBatch {
            count,
            len: self.len,
            inputs: self.inputs.iter().map(|u| u.columns(start, count).into_owned()).collect(),
            observations: self
                .observations
                .iter()
                .map(|o| SensorObservations {
                    sensor: o.sensor.clone(),
                    steps: o.steps.iter().map(|x| x.rows(start, count).into_owned()).collect(),
                })
                .collect(),
        }
    }

    /// Keeps only the named sensors.
    pub fn restrict(&self, keep: &[&str]) -> TrajectoryBatch {
        TrajectoryBatch {
            count: self.count,
            len: self.len,
            inputs: self.inputs.clone(),
            observations: self
                .observations
                .iter()
                .filter(|o| keep.contains(&o.sensor.as_str()))
                .cloned()
                .collect(),
        }
    }
}
