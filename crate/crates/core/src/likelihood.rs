//! Exact log-likelihood through the probability-flow ODE.
//!
//! Flow time runs from noise at `t = 0` to data at `t = 1`. The state and the
//! divergence integral are stepped backwards together with fixed-step Euler,
//! and `log p(x) = log N(z0; 0, I) - int_0^1 div v dt`.

use serde::{Deserialize, Serialize};

use crate::cfm::{cfg_fuse, Condition, VelocityModel};
use crate::error::{arg_err, dim_err, Error, Result};
use crate::numerics::rng::{rademacher_vec, Rng};
use crate::numerics::Tensor;

/// A time-dependent vector field with input vector-Jacobian products.
pub trait VelocityField {
    fn dim(&self) -> usize;
    fn velocity(&self, x: &[f64], t: f64) -> Result<Vec<f64>>;
    /// `v^T dG/dx` at `(x, t)`.
    fn vjp(&self, x: &[f64], t: f64, v: &[f64]) -> Result<Vec<f64>>;

    /// One VJP per row of `vs`.
    fn vjp_many(&self, x: &[f64], t: f64, vs: &Tensor) -> Result<Tensor> {
        let mut out = Vec::with_capacity(vs.len());
        for i in 0..vs.rows() {
            out.extend(self.vjp(x, t, vs.row(i))?);
        }
        Tensor::new(vs.shape().to_vec(), out)
    }
}

/// `G(z) = A z`.
#[derive(Debug, Clone)]
pub struct LinearField {
    pub a: Tensor,
}

impl LinearField {
    pub fn new(a: Tensor) -> Result<Self> {
        if a.ndim() != 2 || a.rows() != a.cols() {
            return dim_err(format!("linear field needs a square matrix, got {:?}", a.shape()));
        }
        Ok(Self { a })
    }

    pub fn scaled_identity(dim: usize, s: f64) -> Self {
        Self {
            a: Tensor::identity(dim).scale(s),
        }
    }
}

impl VelocityField for LinearField {
    fn dim(&self) -> usize {
        self.a.rows()
    }

    fn velocity(&self, x: &[f64], _t: f64) -> Result<Vec<f64>> {
        check_len(x, self.dim())?;
        Ok((0..self.dim()).map(|i| crate::numerics::tensor::dot(self.a.row(i), x)).collect())
    }

    fn vjp(&self, x: &[f64], _t: f64, v: &[f64]) -> Result<Vec<f64>> {
        check_len(x, self.dim())?;
        check_len(v, self.dim())?;
        let n = self.dim();
        let mut out = vec![0.0; n];
        for i in 0..n {
            crate::numerics::tensor::axpy(&mut out, v[i], self.a.row(i));
        }
        Ok(out)
    }
}

/// Constant field.
#[derive(Debug, Clone)]
pub struct ConstantField {
    pub value: Vec<f64>,
}

impl VelocityField for ConstantField {
    fn dim(&self) -> usize {
        self.value.len()
    }

    fn velocity(&self, x: &[f64], _t: f64) -> Result<Vec<f64>> {
        check_len(x, self.dim())?;
        Ok(self.value.clone())
    }

    fn vjp(&self, x: &[f64], _t: f64, _v: &[f64]) -> Result<Vec<f64>> {
        check_len(x, self.dim())?;
        Ok(vec![0.0; self.dim()])
    }
}

fn check_len(x: &[f64], n: usize) -> Result<()> {
    if x.len() != n {
        return dim_err(format!("vector of length {} for field of dim {n}", x.len()));
    }
    Ok(())
}

/// A trained velocity model at one condition, optionally guided.
pub struct FlowField<'a> {
    pub model: &'a VelocityModel,
    /// Single-sample condition.
    pub condition: Condition,
    pub cfg_scale: f64,
}

impl<'a> FlowField<'a> {
    pub fn new(model: &'a VelocityModel, condition: Condition, cfg_scale: f64) -> Result<Self> {
        if condition.batch() != 1 {
            return dim_err("flow field takes a single-sample condition");
        }
        Ok(Self {
            model,
            condition,
            cfg_scale,
        })
    }

    fn repeated(&self, n: usize) -> Result<Condition> {
        self.condition.select(&vec![0; n])
    }
}

impl VelocityField for FlowField<'_> {
    fn dim(&self) -> usize {
        self.model.state_len()
    }

    fn velocity(&self, x: &[f64], t: f64) -> Result<Vec<f64>> {
        let xt = Tensor::new(vec![1, x.len()], x.to_vec())?;
        let v = crate::cfm::guided_velocity(self.model, &xt, t, &self.condition, self.cfg_scale)?;
        Ok(v.into_data())
    }

    fn vjp(&self, x: &[f64], t: f64, v: &[f64]) -> Result<Vec<f64>> {
        let vs = Tensor::new(vec![1, v.len()], v.to_vec())?;
        Ok(self.vjp_many(x, t, &vs)?.into_data())
    }

    fn vjp_many(&self, x: &[f64], t: f64, vs: &Tensor) -> Result<Tensor> {
        check_len(x, self.dim())?;
        let n = vs.rows();
        let mut xs = Vec::with_capacity(n * x.len());
        for _ in 0..n {
            xs.extend_from_slice(x);
        }
        let xs = Tensor::new(vec![n, x.len()], xs)?;
        let ts = vec![t; n];
        let cond = self.repeated(n)?;
        let gc = self.model.input_vjp(&xs, &ts, &cond, vs)?;
        if self.cfg_scale == 0.0 {
            return Ok(gc);
        }
        let gu = self.model.input_vjp(&xs, &ts, &cond.nulled(), vs)?;
        cfg_fuse(&gc, &gu, self.cfg_scale)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OdeConfig {
    pub step: f64,
    /// Recorded for reports; fixed-step Euler does not use them.
    pub rtol: f64,
    pub atol: f64,
}

impl Default for OdeConfig {
    fn default() -> Self {
        Self {
            step: 0.02,
            rtol: 1e-5,
            atol: 1e-5,
        }
    }
}

const MAX_STEPS: f64 = 1e7;

impl OdeConfig {
    /// Step count `round(1 / step)`; the actual step is `1 / n`.
    pub fn n_steps(&self) -> Result<usize> {
        if !(self.step > 0.0) || self.step > 1.0 {
            return arg_err(format!("ode step {} outside (0, 1]", self.step));
        }
        let n = (1.0 / self.step).round();
        if n > MAX_STEPS {
            return arg_err(format!("{n} ode steps exceeds the limit"));
        }
        Ok(n.max(1.0) as usize)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Divergence {
    /// Dense trace from one VJP per coordinate.
    Exact,
    /// Rademacher probes, drawn fresh at every step.
    Hutchinson { n_probes: usize },
}

/// `tr(dG/dx)` from `D` unit-vector VJPs.
pub fn divergence_exact(field: &dyn VelocityField, x: &[f64], t: f64) -> Result<f64> {
    let n = field.dim();
    let rows = field.vjp_many(x, t, &Tensor::identity(n))?;
    if !rows.is_finite() {
        return Err(Error::NonFinite("jacobian entries".into()));
    }
    Ok((0..n).map(|i| rows.get2(i, i)).sum())
}

/// Mean of `v^T (dG/dx) v` over `n_probes` Rademacher vectors.
pub fn divergence_hutchinson(
    field: &dyn VelocityField,
    x: &[f64],
    t: f64,
    n_probes: usize,
    rng: &mut Rng,
) -> Result<f64> {
    if n_probes == 0 {
        return arg_err("need at least one probe");
    }
    let n = field.dim();
    let mut probes = Vec::with_capacity(n_probes * n);
    for _ in 0..n_probes {
        probes.extend(rademacher_vec(rng, n));
    }
    let probes = Tensor::new(vec![n_probes, n], probes)?;
    let rows = field.vjp_many(x, t, &probes)?;
    let total: f64 = (0..n_probes)
        .map(|i| crate::numerics::tensor::dot(rows.row(i), probes.row(i)))
        .sum();
    Ok(total / n_probes as f64)
}

/// `log N(z; 0, I)`.
pub fn base_logprob(z0: &[f64]) -> f64 {
    let sq: f64 = z0.iter().map(|v| v * v).sum();
    -0.5 * (sq + z0.len() as f64 * (2.0 * std::f64::consts::PI).ln())
}

/// `-logp / (D ln 2)`.
pub fn bits_per_dim(logp: f64, dim: usize) -> Result<f64> {
    if dim == 0 {
        return arg_err("bits per dim of a zero-dimensional sample");
    }
    Ok(-logp / (dim as f64 * std::f64::consts::LN_2))
}

#[derive(Debug, Clone, PartialEq)]
pub struct LogProb {
    pub logp: f64,
    pub z0: Vec<f64>,
    /// `int_0^1 div v dt`.
    pub divergence_integral: f64,
    pub n_steps: usize,
}

impl LogProb {
    pub fn bpd(&self) -> f64 {
        bits_per_dim(self.logp, self.z0.len()).expect("nonzero dim")
    }
}

/// Backward coupled Euler from `t = 1` to `0`. `rng` is drawn from only for
/// Hutchinson probes.
pub fn solve_logprob(
    field: &dyn VelocityField,
    x: &[f64],
    ode: &OdeConfig,
    divergence: Divergence,
    rng: &mut Rng,
) -> Result<LogProb> {
    check_len(x, field.dim())?;
    if !x.iter().all(|v| v.is_finite()) {
        return Err(Error::NonFinite("likelihood input".into()));
    }
    let n = ode.n_steps()?;
    let h = 1.0 / n as f64;
    let mut state = x.to_vec();
    let mut acc = 0.0;
    for k in 0..n {
        let t = 1.0 - k as f64 * h;
        let v = field.velocity(&state, t)?;
        let div = match divergence {
            Divergence::Exact => divergence_exact(field, &state, t)?,
            Divergence::Hutchinson { n_probes } => divergence_hutchinson(field, &state, t, n_probes, rng)?,
        };
        crate::numerics::tensor::axpy(&mut state, -h, &v);
        acc += h * div;
        if !state.iter().all(|s| s.is_finite()) || !acc.is_finite() {
            return Err(Error::Divergence {
                step: k,
                detail: "non-finite likelihood state".into(),
            });
        }
    }
    Ok(LogProb {
        logp: base_logprob(&state) - acc,
        z0: state,
        divergence_integral: acc,
        n_steps: n,
    })
}

/// Forward Euler from `t = 0` to `1` with the same step grid.
pub fn integrate_forward(field: &dyn VelocityField, z0: &[f64], ode: &OdeConfig) -> Result<Vec<f64>> {
    check_len(z0, field.dim())?;
    let n = ode.n_steps()?;
    let h = 1.0 / n as f64;
    let mut x = z0.to_vec();
    for k in 0..n {
        let v = field.velocity(&x, k as f64 * h)?;
        crate::numerics::tensor::axpy(&mut x, h, &v);
    }
    Ok(x)
}

/// Linearly spaced per-bin variances of a variance-preserving diffusion.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DdpmSchedule {
    pub betas: Vec<f64>,
}

impl DdpmSchedule {
    pub fn linear(n: usize, beta_min: f64, beta_max: f64) -> Result<Self> {
        if n < 2 {
            return arg_err("schedule needs at least two bins");
        }
        if !(0.0 < beta_min && beta_min < beta_max && beta_max < 1.0) {
            return arg_err(format!("betas [{beta_min}, {beta_max}] must satisfy 0 < min < max < 1"));
        }
        let betas = (0..n)
            .map(|k| beta_min + (beta_max - beta_min) * k as f64 / (n - 1) as f64)
            .collect();
        Ok(Self { betas })
    }

    pub fn constant(n: usize, beta: f64) -> Result<Self> {
        if n < 2 || !(0.0 < beta && beta < 1.0) {
            return arg_err("constant schedule needs n >= 2 and 0 < beta < 1");
        }
        Ok(Self { betas: vec![beta; n] })
    }

    fn bin_width(&self) -> f64 {
        1.0 / (self.betas.len() - 1) as f64
    }

    /// `beta_k` on `[k/(N-1), (k+1)/(N-1))`, right-continuous at the edges.
    pub fn beta_at(&self, t: f64) -> Result<f64> {
        if !(0.0..=1.0).contains(&t) {
            return arg_err(format!("t = {t} outside [0, 1]"));
        }
        let n = self.betas.len();
        let k = ((t * (n - 1) as f64) + 1e-9).floor() as usize;
        Ok(self.betas[k.min(n - 1)])
    }

    /// `int_0^t beta(s) ds`.
    pub fn integral(&self, t: f64) -> f64 {
        let w = self.bin_width();
        let mut acc = 0.0;
        for (k, b) in self.betas.iter().enumerate() {
            let lo = k as f64 * w;
            if lo >= t {
                break;
            }
            acc += b * ((lo + w).min(t) - lo);
        }
        acc
    }

    /// Marginal noise std `sqrt(1 - exp(-int beta))`.
    pub fn sigma(&self, t: f64) -> f64 {
        (1.0 - (-self.integral(t)).exp()).sqrt()
    }
}

/// Noise prediction `eps_hat(x, t)` with input VJPs.
pub trait NoisePredictor {
    fn predict(&self, x: &[f64], t: f64) -> Result<Vec<f64>>;
    fn vjp(&self, x: &[f64], t: f64, v: &[f64]) -> Result<Vec<f64>>;
}

/// Predicts zero noise everywhere.
#[derive(Debug, Clone, Copy)]
pub struct ZeroPredictor;

impl NoisePredictor for ZeroPredictor {
    fn predict(&self, x: &[f64], _t: f64) -> Result<Vec<f64>> {
        Ok(vec![0.0; x.len()])
    }

    fn vjp(&self, x: &[f64], _t: f64, _v: &[f64]) -> Result<Vec<f64>> {
        Ok(vec![0.0; x.len()])
    }
}

/// Probability-flow drift `-beta/2 x - beta/2 s` with `s = -eps_hat / sigma`,
/// in diffusion time (`0` = data).
pub fn ddpm_velocity(
    schedule: &DdpmSchedule,
    predictor: &dyn NoisePredictor,
    x: &[f64],
    t: f64,
) -> Result<Vec<f64>> {
    let beta = schedule.beta_at(t)?;
    let eps = predictor.predict(x, t)?;
    check_len(&eps, x.len())?;
    let sigma = schedule.sigma(t);
    Ok(x
        .iter()
        .zip(&eps)
        .map(|(&xi, &ei)| {
            let score_term = if ei == 0.0 { 0.0 } else { 0.5 * beta * ei / sigma };
            -0.5 * beta * xi + score_term
        })
        .collect())
}

/// A diffusion model viewed as a flow field: flow time `t` maps to diffusion
/// time `max(1 - t, tau_min)`, and the drift changes sign.
pub struct DdpmField<'a> {
    pub schedule: &'a DdpmSchedule,
    pub predictor: &'a dyn NoisePredictor,
    pub dim: usize,
    /// Smallest diffusion time evaluated, keeping `sigma` away from zero.
    pub tau_min: f64,
}

impl DdpmField<'_> {
    fn tau(&self, t: f64) -> f64 {
        (1.0 - t).max(self.tau_min)
    }
}

impl VelocityField for DdpmField<'_> {
    fn dim(&self) -> usize {
        self.dim
    }

    fn velocity(&self, x: &[f64], t: f64) -> Result<Vec<f64>> {
        Ok(ddpm_velocity(self.schedule, self.predictor, x, self.tau(t))?
            .into_iter()
            .map(|g| -g)
            .collect())
    }

    fn vjp(&self, x: &[f64], t: f64, v: &[f64]) -> Result<Vec<f64>> {
        let tau = self.tau(t);
        let beta = self.schedule.beta_at(tau)?;
        let sigma = self.schedule.sigma(tau);
        let pv = self.predictor.vjp(x, tau, v)?;
        Ok(v.iter()
            .zip(&pv)
            .map(|(&vi, &pi)| {
                let score = if pi == 0.0 { 0.0 } else { 0.5 * beta * pi / sigma };
                0.5 * beta * vi - score
            })
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cfm::FlowConfig;
    use crate::numerics::rng::{normal_tensor, normal_vec, seeded, uniform};

    #[test]
    fn linear_divergences() {
        let f = LinearField::new(Tensor::from_rows(&[vec![2.0, 0.0], vec![0.0, 3.0]]).unwrap()).unwrap();
        assert_eq!(divergence_exact(&f, &[0.4, -1.0], 0.3).unwrap(), 5.0);
        let mut rng = seeded(1);
        for _ in 0..10 {
            assert_eq!(divergence_hutchinson(&f, &[0.4, -1.0], 0.3, 1, &mut rng).unwrap(), 5.0);
        }
        let c = ConstantField { value: vec![1.0, -2.0, 0.5] };
        assert_eq!(divergence_exact(&c, &[0.0; 3], 0.0).unwrap(), 0.0);
    }

    #[test]
    fn hutchinson_unbiased_on_dense_matrix() {
        let mut rng = seeded(2);
        let a = normal_tensor(&mut rng, &[4, 4]);
        let f = LinearField::new(a.clone()).unwrap();
        let n = 100_000;
        let mut samples = Vec::with_capacity(n);
        for _ in 0..n {
            samples.push(divergence_hutchinson(&f, &[0.0; 4], 0.0, 1, &mut rng).unwrap());
        }
        let mean = samples.iter().sum::<f64>() / n as f64;
        let var = samples.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        let se = (var / n as f64).sqrt();
        assert!((mean - a.trace().unwrap()).abs() < 3.0 * se);
    }

    #[test]
    fn exact_divergence_matches_fd_jacobian_of_mlp_field() {
        let mut rng = seeded(3);
        let cfg = FlowConfig {
            history: 1,
            horizon: 1,
            hidden: vec![9],
            time_embed: 4,
            traj_embed: 2,
            ..FlowConfig::default()
        };
        let model = VelocityModel::init(4, &cfg, &mut rng).unwrap();
        let cond = Condition::new(normal_tensor(&mut rng, &[1, 4]), normal_tensor(&mut rng, &[1, 3])).unwrap();
        for s in [0.0, 2.0] {
            let field = FlowField::new(&model, cond.clone(), s).unwrap();
            let x = normal_vec(&mut rng, 4);
            let t = 0.37;
            let h = 1e-6;
            let mut tr = 0.0;
            for i in 0..4 {
                let mut xp = x.clone();
                xp[i] += h;
                let (vp, v0) = (field.velocity(&xp, t).unwrap(), field.velocity(&x, t).unwrap());
                tr += (vp[i] - v0[i]) / h;
            }
            let exact = divergence_exact(&field, &x, t).unwrap();
            assert!((exact - tr).abs() < 1e-6 * (1.0 + exact.abs()) * 10.0, "{exact} vs {tr}");
        }
    }

    #[test]
    fn identity_flow_matches_analytic() {
        let f = ConstantField { value: vec![0.0, 0.0] };
        let r = solve_logprob(&f, &[0.0, 0.0], &OdeConfig::default(), Divergence::Exact, &mut seeded(0)).unwrap();
        let two_pi = 2.0 * std::f64::consts::PI;
        assert!((r.logp + two_pi.ln()).abs() < 1e-12);
        assert!((r.bpd() - two_pi.log2() / 2.0).abs() < 1e-12);
        assert!((r.bpd() - 1.3257).abs() < 1e-4);
        let mut rng = seeded(4);
        let x = normal_vec(&mut rng, 2);
        let r = solve_logprob(&f, &x, &OdeConfig::default(), Divergence::Exact, &mut rng).unwrap();
        assert!((r.logp - base_logprob(&x)).abs() < 1e-12);
    }

    #[test]
    fn linear_flow_closed_form() {
        let f = LinearField::scaled_identity(2, 0.3);
        let mut rng = seeded(5);
        for _ in 0..20 {
            let x = [uniform(&mut rng, -2.0, 2.0), uniform(&mut rng, -2.0, 2.0)];
            let r = solve_logprob(&f, &x, &OdeConfig::default(), Divergence::Exact, &mut rng).unwrap();
            let z = [x[0] * (-0.3f64).exp(), x[1] * (-0.3f64).exp()];
            let want = base_logprob(&z) - 0.6;
            assert!((r.logp - want).abs() < 5e-3, "{} vs {want}", r.logp);
        }
    }

    #[test]
    fn round_trip_within_tolerance() {
        let f = LinearField::new(Tensor::from_rows(&[vec![0.2, -0.5], vec![0.4, 0.1]]).unwrap()).unwrap();
        let x = [0.7, -1.2];
        let ode = OdeConfig::default();
        let r = solve_logprob(&f, &x, &ode, Divergence::Exact, &mut seeded(0)).unwrap();
        let back = integrate_forward(&f, &r.z0, &ode).unwrap();
        for i in 0..2 {
            assert!((back[i] - x[i]).abs() < 10.0 * ode.step);
        }
    }

    #[test]
    fn base_logprob_examples() {
        assert!((base_logprob(&[0.0]) + 0.918_938_533_204_672_7).abs() < 1e-15);
        let two_pi = 2.0 * std::f64::consts::PI;
        assert!((base_logprob(&[1.0, 1.0]) + (1.0 + two_pi.ln())).abs() < 1e-14);
        let z = normal_vec(&mut seeded(6), 7);
        let prod: f64 = z.iter().map(|v| (-(v * v) / 2.0).exp() / two_pi.sqrt()).product();
        assert!((base_logprob(&z) - prod.ln()).abs() / prod.ln().abs() < 1e-12);
    }

    #[test]
    fn bpd_examples() {
        assert!((bits_per_dim(-3.0 * std::f64::consts::LN_2, 3).unwrap() - 1.0).abs() < 1e-15);
        assert!(bits_per_dim(-1.0, 0).is_err());
    }

    #[test]
    fn step_count() {
        assert_eq!(OdeConfig::default().n_steps().unwrap(), 50);
        assert!(OdeConfig { step: 1e-9, ..Default::default() }.n_steps().is_err());
        assert!(OdeConfig { step: 0.0, ..Default::default() }.n_steps().is_err());
    }

    #[test]
    fn ddpm_reductions() {
        let s = DdpmSchedule::linear(100, 0.01, 0.5).unwrap();
        let x = [1.0, -2.0];
        let g = ddpm_velocity(&s, &ZeroPredictor, &x, 0.3).unwrap();
        let b = s.beta_at(0.3).unwrap();
        assert_eq!(g, vec![-0.5 * b * 1.0, -0.5 * b * -2.0]);
        // right-continuous at bin edges
        for k in [0usize, 1, 50, 98] {
            let t = k as f64 / 99.0;
            assert_eq!(s.beta_at(t).unwrap(), s.betas[k]);
        }
        assert_eq!(s.beta_at(1.0).unwrap(), s.betas[99]);
        assert!(s.beta_at(1.1).is_err());
        assert!(DdpmSchedule::linear(10, 0.5, 0.1).is_err());
    }

    #[test]
    fn ddpm_constant_beta_decay() {
        let beta = 0.4;
        let s = DdpmSchedule::constant(100, beta).unwrap();
        let mut x = vec![1.5, -0.5];
        let n = 1000;
        let h = 1.0 / n as f64;
        for k in 0..n {
            let g = ddpm_velocity(&s, &ZeroPredictor, &x, k as f64 * h).unwrap();
            crate::numerics::tensor::axpy(&mut x, h, &g);
        }
        let want = (-beta / 2.0f64).exp();
        assert!((x[0] / 1.5 - want).abs() < 2.0 * beta * beta * h);
        assert!((x[1] / -0.5 - want).abs() < 2.0 * beta * beta * h);
    }

    #[test]
    fn ddpm_field_plugs_into_solver() {
        let s = DdpmSchedule::constant(50, 0.4).unwrap();
        let field = DdpmField {
            schedule: &s,
            predictor: &ZeroPredictor,
            dim: 2,
            tau_min: 1e-3,
        };
        // flow velocity is +beta/2 x, so the divergence is beta
        assert!((divergence_exact(&field, &[0.3, 0.1], 0.5).unwrap() - 0.4).abs() < 1e-15);
        let r = solve_logprob(&field, &[0.3, 0.1], &OdeConfig::default(), Divergence::Exact, &mut seeded(0)).unwrap();
        assert!((r.divergence_integral - 0.4).abs() < 1e-12);
    }
}
