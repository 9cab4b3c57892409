//! Reference implementations used only as test oracles. Everything here is
//! written in plain covariance form and shares no numerics with the library.

#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

pub type M = DMatrix<f64>;
pub type V = DVector<f64>;

pub struct System {
    pub a: M,
    pub b: M,
    pub sigma_w: M,
    pub sigma_z: M,
    /// `(C, R)` per sensor.
    pub sensors: Vec<(M, M)>,
}

pub fn randn<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> M {
    M::from_fn(rows, cols, |_, _| rng.sample(StandardNormal))
}

pub fn randv<R: Rng + ?Sized>(n: usize, rng: &mut R) -> V {
    V::from_fn(n, |_, _| rng.sample(StandardNormal))
}

/// `G G^T / k + floor I`.
pub fn random_spd<R: Rng + ?Sized>(n: usize, floor: f64, rng: &mut R) -> M {
    let g = randn(n, n, rng);
    &g * g.transpose() / n as f64 + M::identity(n, n) * floor
}

fn spectral_radius(a: &M) -> f64 {
    a.complex_eigenvalues().iter().map(|c| c.norm()).fold(0.0, f64::max)
}

/// Fixed point of `S = A S A^T + Q` by plain iteration.
pub fn stationary(a: &M, q: &M) -> M {
    let mut s = q.clone();
    for _ in 0..20_000 {
        let next = a * &s * a.transpose() + q;
        let done = (&next - &s).norm() <= 1e-15 * next.norm();
        s = next;
        if done {
            break;
        }
    }
    (&s + s.transpose()) * 0.5
}

pub fn random_system<R: Rng + ?Sized>(m: usize, d: usize, sensors: usize, rng: &mut R) -> System {
    let raw = randn(m, m, rng);
    let target = rng.random_range(0.3..0.9);
    let rho = spectral_radius(&raw).max(1e-3);
    let a = raw * (target / rho);
    let b = randn(m, d, rng) * 0.5;
    let sigma_w = random_spd(m, 0.05, rng);
    let sigma_z = stationary(&a, &sigma_w);
    let sensors = (0..sensors)
        .map(|_| {
            let p = rng.random_range(1..=m);
            (randn(p, m, rng), random_spd(p, 0.1, rng))
        })
        .collect();
    System {
        a,
        b,
        sigma_w,
        sigma_z,
        sensors,
    }
}

/// Draws a trajectory and one reading per sensor per step. `inputs[t]` drives `t -> t + 1`.
pub fn simulate<R: Rng + ?Sized>(sys: &System, len: usize, rng: &mut R) -> (Vec<V>, Vec<V>, Vec<Vec<V>>) {
    let m = sys.a.nrows();
    let d = sys.b.ncols();
    let lz = sys.sigma_z.clone().cholesky().unwrap().l();
    let lw = sys.sigma_w.clone().cholesky().unwrap().l();
    let inputs: Vec<V> = (0..len.saturating_sub(1)).map(|_| randv(d, rng)).collect();
    let mut states = vec![&lz * randv(m, rng)];
    for t in 1..len {
        let next = &sys.a * &states[t - 1] + &sys.b * &inputs[t - 1] + &lw * randv(m, rng);
        states.push(next);
    }
    let readings = states
        .iter()
        .map(|z| {
            sys.sensors
                .iter()
                .map(|(c, r)| c * z + r.clone().cholesky().unwrap().l() * randv(c.nrows(), rng))
                .collect()
        })
        .collect();
    (states, inputs, readings)
}

pub struct KalmanStep {
    pub pred_mean: V,
    pub pred_cov: M,
    pub mean: V,
    pub cov: M,
}

/// Covariance-form Kalman filter with all sensors stacked into one Joseph-form update.
pub fn kalman(sys: &System, readings: &[Vec<V>], inputs: &[V]) -> Vec<KalmanStep> {
    let m = sys.a.nrows();
    let p_tot: usize = sys.sensors.iter().map(|(c, _)| c.nrows()).sum();
    let mut c = M::zeros(p_tot, m);
    let mut r = M::zeros(p_tot, p_tot);
    let mut row = 0;
    for (ci, ri) in &sys.sensors {
        let p = ci.nrows();
        c.view_mut((row, 0), (p, m)).copy_from(ci);
        r.view_mut((row, row), (p, p)).copy_from(ri);
        row += p;
    }
    let mut out: Vec<KalmanStep> = Vec::new();
    for (t, xs) in readings.iter().enumerate() {
        let (pm, pc) = match out.last() {
            None => (V::zeros(m), sys.sigma_z.clone()),
            Some(prev) => (
                &sys.a * &prev.mean + &sys.b * &inputs[t - 1],
                &sys.a * &prev.cov * sys.a.transpose() + &sys.sigma_w,
            ),
        };
        let mut x = V::zeros(p_tot);
        let mut row = 0;
        for xi in xs {
            x.rows_mut(row, xi.len()).copy_from(xi);
            row += xi.len();
        }
        let s = &c * &pc * c.transpose() + &r;
        let k = &pc * c.transpose() * s.try_inverse().unwrap();
        let mean = &pm + &k * (x - &c * &pm);
        let ikc = M::identity(m, m) - &k * &c;
        let cov = &ikc * &pc * ikc.transpose() + &k * &r * k.transpose();
        out.push(KalmanStep {
            pred_mean: pm,
            pred_cov: pc,
            mean,
            cov: (&cov + cov.transpose()) * 0.5,
        });
    }
    out
}

pub fn normal_pdf(x: f64, mean: f64, var: f64) -> f64 {
    (-(x - mean).powi(2) / (2.0 * var)).exp() / (2.0 * std::f64::consts::PI * var).sqrt()
}

/// Grid approximation of a scalar linear-Gaussian model.
pub struct Grid {
    pub points: Vec<f64>,
    pub step: f64,
}

impl Grid {
    pub fn new(half_width: f64, count: usize) -> Self {
        let step = 2.0 * half_width / (count - 1) as f64;
        Self {
            points: (0..count).map(|i| -half_width + i as f64 * step).collect(),
            step,
        }
    }

    fn normalize(&self, w: &mut [f64]) {
        let s: f64 = w.iter().sum::<f64>() * self.step;
        w.iter_mut().for_each(|v| *v /= s);
    }

    /// Filtering densities and smoothing densities on the grid for
    /// `z_{t+1} = a z_t + b u_t + w`, `x_t = c z_t + v`.
    #[allow(clippy::too_many_arguments)]
    pub fn filter_smooth(
        &self,
        a: f64,
        b: f64,
        q: f64,
        s0: f64,
        c: f64,
        r: f64,
        xs: &[f64],
        us: &[f64],
    ) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
        let n = self.points.len();
        let kernel = |from: f64, to: f64, u: f64| normal_pdf(to, a * from + b * u, q);
        let mut filt: Vec<Vec<f64>> = Vec::new();
        let mut preds: Vec<Vec<f64>> = Vec::new();
        for (t, &x) in xs.iter().enumerate() {
            let pred: Vec<f64> = match filt.last() {
                None => self.points.iter().map(|&z| normal_pdf(z, 0.0, s0)).collect(),
                Some(prev) => self
                    .points
                    .iter()
                    .map(|&to| {
                        self.points
                            .iter()
                            .zip(prev)
                            .map(|(&from, &p)| kernel(from, to, us[t - 1]) * p)
                            .sum::<f64>()
                            * self.step
                    })
                    .collect(),
            };
            let mut post: Vec<f64> = self
                .points
                .iter()
                .zip(&pred)
                .map(|(&z, &p)| p * normal_pdf(x, c * z, r))
                .collect();
            self.normalize(&mut post);
            preds.push(pred);
            filt.push(post);
        }
        let big_t = xs.len();
        let mut smooth = vec![Vec::new(); big_t];
        smooth[big_t - 1] = filt[big_t - 1].clone();
        for t in (0..big_t - 1).rev() {
            let ratio: Vec<f64> = smooth[t + 1]
                .iter()
                .zip(&preds[t + 1])
                .map(|(s, p)| if *p > 0.0 { s / p } else { 0.0 })
                .collect();
            let mut cur: Vec<f64> = (0..n)
                .map(|i| {
                    let from = self.points[i];
                    let back: f64 = self
                        .points
                        .iter()
                        .zip(&ratio)
                        .map(|(&to, &w)| kernel(from, to, us[t]) * w)
                        .sum::<f64>()
                        * self.step;
                    filt[t][i] * back
                })
                .collect();
            self.normalize(&mut cur);
            smooth[t] = cur;
        }
        (filt, smooth)
    }

    /// Total-variation distance between a grid density and `N(mean, var)`.
    pub fn tv_to_normal(&self, density: &[f64], mean: f64, var: f64) -> f64 {
        let mut reference: Vec<f64> = self.points.iter().map(|&z| normal_pdf(z, mean, var)).collect();
        self.normalize(&mut reference);
        0.5 * density
            .iter()
            .zip(&reference)
            .map(|(p, q)| (p - q).abs())
            .sum::<f64>()
            * self.step
    }
}
