//! Monte-Carlo evidence lower bound with pathwise gradients.
//!
//! For each trajectory the estimate is `log p(x | z) - (log q(z) - log p(z))`
//! at smoothing samples `z ~ q`, averaged over samples and trajectories. The
//! whole forward filter and backward sampler are recorded on a tape so that
//! gradients reach every trainable tensor.
//!
//! Trajectories are processed in fixed-size chunks, one tape per chunk.
//! Covariance recursions do not depend on the observations, so within a chunk
//! they are computed once and the means are carried as `[m, count]` matrices.
//! Sample `s` of trajectory `n` occupies column `s * count + n`.

use rand::Rng;
use rayon::prelude::*;
use vssf_autodiff::{BoundMlp, Tape, Var};

use crate::error::{check_dim, Result, VssfError};
use crate::gaussian::{log_det, spd_inverse, standard_normal_vector, GaussianMoment, Matrix, Vector, HALF_LN_2PI};
use crate::lgssm::DynamicsParams;
use crate::model::{Model, NamedSensor, SensorModel, TrajectoryBatch};

/// Trajectories per tape.
pub const CHUNK_SIZE: usize = 16;

#[derive(Debug, Clone, PartialEq)]
pub struct ElboBreakdown {
    pub total: f64,
    pub kl_term: f64,
    pub recon_term: f64,
    pub per_sensor_recon: Vec<(String, f64)>,
    pub sample_count: usize,
}

/// Standard-normal draws for every chunk: `chunks[c][t]` is `[m, count_c * samples]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ElboNoise {
    pub samples: usize,
    pub chunks: Vec<Vec<Matrix>>,
}

impl ElboNoise {
    pub fn draw<R: Rng + ?Sized>(state_dim: usize, batch: &TrajectoryBatch, samples: usize, rng: &mut R) -> Self {
        let chunks = chunk_ranges(batch.count)
            .map(|(_, count)| {
                (0..batch.len)
                    .map(|_| {
                        let cols = count * samples;
                        let flat = standard_normal_vector(state_dim * cols, rng);
                        Matrix::from_column_slice(state_dim, cols, flat.as_slice())
                    })
                    .collect()
            })
            .collect();
        Self { samples, chunks }
    }
}

fn chunk_ranges(count: usize) -> impl Iterator<Item = (usize, usize)> {
    (0..count)
        .step_by(CHUNK_SIZE)
        .map(move |start| (start, CHUNK_SIZE.min(count - start)))
}

/// `log p(z_1) + sum_t log p(z_{t+1} | z_t, u_t)`.
pub fn prior_log_density(psi: &DynamicsParams, trajectory: &[Vector], u_seq: &[Vector]) -> Result<f64> {
    check_dim("input sequence length", trajectory.len().saturating_sub(1), u_seq.len())?;
    let Some(first) = trajectory.first() else {
        return Ok(0.0);
    };
    let mut total = psi.prior_belief().log_density(first)?;
    for (t, u) in u_seq.iter().enumerate() {
        total += psi.transition_log_density(&trajectory[t], u, &trajectory[t + 1])?;
    }
    Ok(total)
}

/// `sum_t sum_j log p(x_t^j | z_t)` with the per-sensor split, in the order of `observations`.
pub fn reconstruction_log_density(
    sensors: &[NamedSensor],
    observations: &[(String, Vec<Vector>)],
    trajectory: &[Vector],
) -> Result<(f64, Vec<(String, f64)>)> {
    let mut split = Vec::with_capacity(observations.len());
    for (name, xs) in observations {
        let sensor = sensors
            .iter()
            .find(|s| &s.name == name)
            .ok_or_else(|| VssfError::UnknownSensor(name.clone()))?;
        check_dim("observation steps", trajectory.len(), xs.len())?;
        let mut v = 0.0;
        for (x, z) in xs.iter().zip(trajectory) {
            v += sensor.model.log_density(x, z)?;
        }
        split.push((name.clone(), v));
    }
    Ok((split.iter().map(|(_, v)| v).sum(), split))
}

/// Sums over one chunk (not yet averaged).
#[derive(Debug, Clone)]
struct ChunkSums {
    recon: Vec<f64>,
    log_q: f64,
    log_prior: f64,
    columns: usize,
    grads: Option<Vec<Matrix>>,
}

enum BoundSensor<'t> {
    Linear {
        c: Var<'t>,
        sigma_x_inv: Var<'t>,
        log_det_sigma_x: f64,
        gain: Var<'t>,
        lambda: Var<'t>,
    },
    Nonlinear {
        encoder: BoundMlp<'t>,
        decoder: BoundMlp<'t>,
        lambda: Var<'t>,
        info_scale: Var<'t>,
        sigma_x_inv: Var<'t>,
        log_det_sigma_x: f64,
    },
}

fn spd_inv<'t>(m: Var<'t>, eye: Var<'t>) -> Result<Var<'t>> {
    let l = m.cholesky()?;
    Ok(l.solve_lower_t(&l.solve_lower(&eye)?)?)
}

fn pair_layers<'t>(vars: &[Var<'t>]) -> Vec<(Var<'t>, Var<'t>)> {
    vars.chunks(2).map(|p| (p[0], p[1])).collect()
}

fn row_block<'t>(tape: &'t Tape, x: &Matrix) -> Var<'t> {
    tape.constant(x.transpose())
}

fn chunk_graph(model: &Model, batch: &TrajectoryBatch, noise: &[Matrix], samples: usize, want_grads: bool) -> Result<ChunkSums> {
    let tape = Tape::new();
    let m = model.state_dim();
    let big_t = batch.len;
    let count = batch.count;
    let cols = count * samples;
    let ns = cols as f64;
    let psi = &model.dynamics;
    let eye = tape.constant(Matrix::identity(m, m));

    let mut leaves: Vec<Var<'_>> = Vec::new();
    let mut param = |value: &Matrix, trainable: bool| {
        if trainable {
            let v = tape.leaf(value.clone());
            leaves.push(v);
            v
        } else {
            tape.constant(value.clone())
        }
    };

    let learn = model.learn_dynamics;
    let a = param(&psi.a, learn);
    let b = param(&psi.b, learn);
    let factor = param(&model.sigma_w_factor, learn);
    let mask = tape.constant(Matrix::from_fn(m, m, |i, j| if j <= i { 1.0 } else { 0.0 }));
    let factor = factor.mul(&mask)?;
    let sigma_w = factor.matmul(&factor.transpose())?;
    let w_inv = spd_inv(sigma_w, eye)?;
    let log_det_w = sigma_w.logdet()?;
    let sigma_z = tape.constant(psi.sigma_z.clone());
    let sigma_z_inv_value = spd_inverse(&psi.sigma_z)?;
    let sigma_z_inv = tape.constant(sigma_z_inv_value.clone());

    let mut bound: Vec<BoundSensor<'_>> = Vec::with_capacity(model.sensors.len());
    for s in &model.sensors {
        match &s.model {
            SensorModel::Linear(l) => {
                let c = param(&l.c, l.trainable);
                let sx_inv = tape.constant(spd_inverse(&l.sigma_x)?);
                let gain = c.transpose().matmul(&sx_inv)?;
                let lambda = gain.matmul(&c)?;
                bound.push(BoundSensor::Linear {
                    c,
                    sigma_x_inv: sx_inv,
                    log_det_sigma_x: log_det(&l.sigma_x)?,
                    gain,
                    lambda,
                });
            }
            SensorModel::Nonlinear(n) => {
                let encoder_vals = n.encoder.tensors();
                let encoder_vars: Vec<Var<'_>> = encoder_vals.iter().map(|t| param(t, true)).collect();
                let factor = param(&n.evidence_factor, true);
                let decoder_vals = n.decoder.tensors();
                let decoder_vars: Vec<Var<'_>> = decoder_vals.iter().map(|t| param(t, true)).collect();
                let encoder = BoundMlp {
                    layers: pair_layers(&encoder_vars),
                    activation: n.encoder.activation,
                };
                let decoder = BoundMlp {
                    layers: pair_layers(&decoder_vars),
                    activation: n.decoder.activation,
                };
                let k = factor
                    .transpose()
                    .matmul(&factor)?
                    .add(&tape.constant(Matrix::identity(m, m) * n.epsilon))?;
                let lambda = spd_inv(k, eye)?;
                let info_scale = lambda.add(&sigma_z_inv)?;
                bound.push(BoundSensor::Nonlinear {
                    encoder,
                    decoder,
                    lambda,
                    info_scale,
                    sigma_x_inv: tape.constant(spd_inverse(&n.decoder_sigma_x)?),
                    log_det_sigma_x: log_det(&n.decoder_sigma_x)?,
                });
            }
        }
    }

    let observed: Vec<usize> = batch
        .observations
        .iter()
        .map(|o| model.sensor_index(&o.sensor))
        .collect::<Result<_>>()?;
    for (o, &j) in batch.observations.iter().zip(&observed) {
        check_dim("observation width", model.sensors[j].model.obs_dim(), o.steps[0].ncols())?;
    }
    let inputs: Vec<Var<'_>> = batch.inputs.iter().map(|u| tape.constant(u.clone())).collect();

    // forward filter
    let mut post_cov = Vec::with_capacity(big_t);
    let mut post_prec = Vec::with_capacity(big_t);
    let mut post_eta = Vec::with_capacity(big_t);
    let mut post_mean = Vec::with_capacity(big_t);
    let mut pred_cov = sigma_z;
    let mut pred_mean = tape.constant(Matrix::zeros(m, count));
    for t in 0..big_t {
        let pred_prec = spd_inv(pred_cov, eye)?;
        let mut prec = pred_prec;
        let mut eta = pred_prec.matmul(&pred_mean)?;
        for (o, &j) in batch.observations.iter().zip(&observed) {
            match &bound[j] {
                BoundSensor::Linear { gain, lambda, .. } => {
                    prec = prec.add(lambda)?;
                    eta = eta.add(&gain.matmul(&row_block(&tape, &o.steps[t]))?)?;
                }
                BoundSensor::Nonlinear {
                    encoder,
                    lambda,
                    info_scale,
                    ..
                } => {
                    let r_h = encoder.apply(tape.constant(o.steps[t].clone()))?.transpose();
                    prec = prec.add(lambda)?;
                    eta = eta.add(&info_scale.matmul(&r_h)?)?;
                }
            }
        }
        let cov = spd_inv(prec, eye)?;
        let mean = cov.matmul(&eta)?;
        if t + 1 < big_t {
            pred_mean = a.matmul(&mean)?.add(&b.matmul(&inputs[t])?)?;
            pred_cov = a.matmul(&cov)?.matmul(&a.transpose())?.add(&sigma_w)?;
        }
        post_cov.push(cov);
        post_prec.push(prec);
        post_eta.push(eta);
        post_mean.push(mean);
    }

    // backward sampling
    let mut z: Vec<Option<Var<'_>>> = vec![None; big_t];
    let noise_vars: Vec<Var<'_>> = noise.iter().map(|e| tape.constant(e.clone())).collect();
    let noise_sq: f64 = noise.iter().map(|e| e.norm_squared()).sum();
    let last = big_t - 1;
    let chol_last = post_cov[last].cholesky()?;
    z[last] = Some(post_mean[last].tile_cols(samples).add(&chol_last.matmul(&noise_vars[last])?)?);
    let mut log_q = post_cov[last].logdet()?.scale(-0.5 * ns);
    let at_w_inv = a.transpose().matmul(&w_inv)?;
    let at_w_inv_a = at_w_inv.matmul(&a)?;
    for t in (0..last).rev() {
        let kernel_cov = spd_inv(post_prec[t].add(&at_w_inv_a)?, eye)?;
        let gain = kernel_cov.matmul(&at_w_inv)?;
        let offset = kernel_cov.matmul(&post_eta[t].sub(&at_w_inv.matmul(&b.matmul(&inputs[t])?)?)?)?;
        let chol = kernel_cov.cholesky()?;
        let next = z[t + 1].unwrap();
        z[t] = Some(
            gain.matmul(&next)?
                .add(&offset.tile_cols(samples))?
                .add(&chol.matmul(&noise_vars[t])?)?,
        );
        log_q = log_q.add(&kernel_cov.logdet()?.scale(-0.5 * ns))?;
    }
    let z: Vec<Var<'_>> = z.into_iter().map(|v| v.unwrap()).collect();
    let log_q_const = -(big_t as f64) * ns * m as f64 * HALF_LN_2PI - 0.5 * noise_sq;
    let log_q = log_q.add_scalar(log_q_const);

    // latent prior
    let mut log_prior = z[0].quadratic_form(&sigma_z_inv)?.scale(-0.5);
    let prior_const = -ns * (m as f64 * HALF_LN_2PI + 0.5 * log_det(&psi.sigma_z)?);
    for t in 0..last {
        let resid = z[t + 1]
            .sub(&a.matmul(&z[t])?)?
            .sub(&b.matmul(&inputs[t])?.tile_cols(samples))?;
        log_prior = log_prior
            .add(&resid.quadratic_form(&w_inv)?.scale(-0.5))?
            .add(&log_det_w.scale(-0.5 * ns))?;
    }
    let log_prior = log_prior.add_scalar(prior_const - (last as f64) * ns * m as f64 * HALF_LN_2PI);

    // reconstruction
    let mut recon_parts = Vec::with_capacity(observed.len());
    for (o, &j) in batch.observations.iter().zip(&observed) {
        let p = model.sensors[j].model.obs_dim() as f64;
        let mut acc: Option<Var<'_>> = None;
        let constant;
        match &bound[j] {
            BoundSensor::Linear {
                c,
                sigma_x_inv,
                log_det_sigma_x,
                ..
            } => {
                for (t, zt) in z.iter().enumerate() {
                    let x = row_block(&tape, &o.steps[t]).tile_cols(samples);
                    let q = x.sub(&c.matmul(zt)?)?.quadratic_form(sigma_x_inv)?;
                    acc = Some(match acc {
                        None => q,
                        Some(prev) => prev.add(&q)?,
                    });
                }
                constant = -(big_t as f64) * ns * (p * HALF_LN_2PI + 0.5 * log_det_sigma_x);
            }
            BoundSensor::Nonlinear {
                decoder,
                sigma_x_inv,
                log_det_sigma_x,
                ..
            } => {
                for (t, zt) in z.iter().enumerate() {
                    let x = row_block(&tape, &o.steps[t]).tile_cols(samples);
                    let nu = decoder.apply(zt.transpose())?.transpose();
                    let q = x.sub(&nu)?.quadratic_form(sigma_x_inv)?;
                    acc = Some(match acc {
                        None => q,
                        Some(prev) => prev.add(&q)?,
                    });
                }
                constant = -(big_t as f64) * ns * (p * HALF_LN_2PI + 0.5 * log_det_sigma_x);
            }
        }
        recon_parts.push(acc.unwrap().scale(-0.5).add_scalar(constant));
    }

    let mut objective = log_prior.sub(&log_q)?;
    for r in &recon_parts {
        objective = objective.add(r)?;
    }
    let recon: Vec<f64> = recon_parts.iter().map(|r| r.item()).collect();
    let sums = ChunkSums {
        recon,
        log_q: log_q.item(),
        log_prior: log_prior.item(),
        columns: cols,
        grads: None,
    };
    if !objective.item().is_finite() {
        return Err(VssfError::NonFinite("evidence lower bound".into()));
    }
    if !want_grads {
        return Ok(sums);
    }
    let g = tape.backward(objective)?;
    Ok(ChunkSums {
        grads: Some(leaves.iter().map(|v| g.wrt(*v)).collect()),
        ..sums
    })
}

/// Evaluates the bound (and optionally its gradient) for explicit noise draws.
pub fn elbo_with_noise(
    model: &Model,
    batch: &TrajectoryBatch,
    noise: &ElboNoise,
    want_grads: bool,
) -> Result<(ElboBreakdown, Option<Vec<Matrix>>)> {
    batch.validate()?;
    if batch.count == 0 || batch.len == 0 || noise.samples == 0 {
        return Err(VssfError::DimensionMismatch {
            context: "empty batch or zero samples",
            expected: 1,
            got: 0,
        });
    }
    let ranges: Vec<(usize, usize)> = chunk_ranges(batch.count).collect();
    check_dim("noise chunks", ranges.len(), noise.chunks.len())?;
    let parts: Vec<Result<ChunkSums>> = ranges
        .par_iter()
        .zip(noise.chunks.par_iter())
        .map(|(&(start, count), eps)| {
            chunk_graph(model, &batch.slice(start, count), eps, noise.samples, want_grads)
        })
        .collect();
    let mut recon = vec![0.0; batch.observations.len()];
    let (mut log_q, mut log_prior, mut columns) = (0.0, 0.0, 0usize);
    let mut grads: Option<Vec<Matrix>> = None;
    for part in parts {
        let part = part?;
        for (r, v) in recon.iter_mut().zip(&part.recon) {
            *r += v;
        }
        log_q += part.log_q;
        log_prior += part.log_prior;
        columns += part.columns;
        if let Some(g) = part.grads {
            grads = Some(match grads {
                None => g,
                Some(mut acc) => {
                    for (a, b) in acc.iter_mut().zip(&g) {
                        *a += b;
                    }
                    acc
                }
            });
        }
    }
    let scale = 1.0 / columns as f64;
    let per_sensor_recon: Vec<(String, f64)> = batch
        .observations
        .iter()
        .zip(&recon)
        .map(|(o, r)| (o.sensor.clone(), r * scale))
        .collect();
    let recon_term = recon.iter().sum::<f64>() * scale;
    let kl_term = (log_q - log_prior) * scale;
    let breakdown = ElboBreakdown {
        total: recon_term - kl_term,
        kl_term,
        recon_term,
        per_sensor_recon,
        sample_count: noise.samples,
    };
    if let Some(g) = grads.as_mut() {
        for m in g.iter_mut() {
            *m *= scale;
        }
    }
    Ok((breakdown, grads))
}

/// Monte-Carlo estimate of the bound with `samples` smoothing draws per trajectory.
pub fn elbo_estimate<R: Rng + ?Sized>(
    model: &Model,
    batch: &TrajectoryBatch,
    samples: usize,
    rng: &mut R,
) -> Result<ElboBreakdown> {
    let noise = ElboNoise::draw(model.state_dim(), batch, samples, rng);
    Ok(elbo_with_noise(model, batch, &noise, false)?.0)
}

/// The estimate together with its gradient with respect to [`Model::trainable_values`].
pub fn elbo_gradients<R: Rng + ?Sized>(
    model: &Model,
    batch: &TrajectoryBatch,
    samples: usize,
    rng: &mut R,
) -> Result<(ElboBreakdown, Vec<Matrix>)> {
    let noise = ElboNoise::draw(model.state_dim(), batch, samples, rng);
    let (b, g) = elbo_with_noise(model, batch, &noise, true)?;
    Ok((b, g.unwrap_or_default()))
}

/// Per-trajectory estimates computed with the plain (untaped) filter and sampler,
/// using the same noise layout. `out[n][s]` is the estimate for sample `s` of trajectory `n`.
pub fn elbo_samples_untaped(model: &Model, batch: &TrajectoryBatch, noise: &ElboNoise) -> Result<Vec<Vec<f64>>> {
    let names: Vec<&str> = batch.observations.iter().map(|o| o.sensor.as_str()).collect();
    let mut out = Vec::with_capacity(batch.count);
    for ((start, count), eps) in chunk_ranges(batch.count).zip(&noise.chunks) {
        let chunk = batch.slice(start, count);
        let beliefs = model.filter_batch(&chunk, &names)?;
        for (n, bel) in beliefs.iter().enumerate() {
            let us = chunk.inputs_for(n);
            let obs = chunk.observations_for(n);
            let kernels = crate::smoothing::backward_kernels(&model.dynamics, bel, &us)?;
            let mut per_sample = Vec::with_capacity(noise.samples);
            for s in 0..noise.samples {
                let col = s * count + n;
                let mut traj = vec![Vector::zeros(model.state_dim()); chunk.len];
                let last = chunk.len - 1;
                traj[last] = bel[last].posterior.transform(&eps[last].column(col).into_owned())?;
                for t in (0..last).rev() {
                    let cond: GaussianMoment = kernels[t].conditional(&traj[t + 1])?;
                    traj[t] = cond.transform(&eps[t].column(col).into_owned())?;
                }
                let log_q = crate::smoothing::smoothing_log_density(&model.dynamics, bel, &us, &traj)?;
                let log_p = prior_log_density(&model.dynamics, &traj, &us)?;
                let (recon, _) = reconstruction_log_density(&model.sensors, &obs, &traj)?;
                per_sample.push(recon - (log_q - log_p));
            }
            out.push(per_sample);
        }
    }
    Ok(out)
}
