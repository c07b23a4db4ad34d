//! Time stepping for the deterministic and stochastic dynamics.
//!
//! Schemes: classical RK4 for the deterministic drift
//! `J grad E + K grad S`; Euler-Maruyama for the Ito form
//! `dX = (J grad E + K grad S + div_nu K) dt + sqrt(2) sum_i A_i dW^i`;
//! and a Heun predictor-corrector for the Stratonovich form
//! `dX = B0 dt + sqrt(2) sum_i A_i o dW^i`. Temperature-scaled runs use
//! the decomposition `S = S~/T`, `K = T K~`: the gradient drift is
//! T-independent while the frame-divergence drift carries a factor T and
//! the noise amplitude is `sqrt(2T)`.
//!
//! Every noise increment is drawn from the counter-based stream keyed by
//! (seed, trajectory, step, channel), so ensembles are bit-reproducible
//! regardless of worker count or execution order.

use nalgebra::DVector;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::fields::{MatrixField, Point, ScalarField};
use crate::frames::{div_nu_cometric, Frame};
use crate::rng::CounterRng;
use crate::system::GenericSystem;

/// Integration scheme selector.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Scheme {
    DetRk4,
    ItoEm,
    StratHeun,
}

impl std::str::FromStr for Scheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "det_rk4" => Ok(Scheme::DetRk4),
            "ito_em" => Ok(Scheme::ItoEm),
            "strat_heun" => Ok(Scheme::StratHeun),
            other => Err(Error::Config(format!("unknown scheme '{other}'"))),
        }
    }
}

impl Scheme {
    pub fn name(&self) -> &'static str {
        match self {
            Scheme::DetRk4 => "det_rk4",
            Scheme::ItoEm => "ito_em",
            Scheme::StratHeun => "strat_heun",
        }
    }
}

/// Simulation parameters.
#[derive(Clone, Debug)]
pub struct SimConfig {
    pub dt: f64,
    pub steps: usize,
    pub n_traj: usize,
    pub seed: u64,
    pub scheme: Scheme,
    pub project_energy: bool,
    pub record_every: usize,
    /// `Some(T)` runs the temperature-scaled dynamics; requires the
    /// system to carry a scaling decomposition.
    pub temperature: Option<f64>,
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.dt > 0.0) || !(self.dt * self.steps as f64).is_finite() {
            return Err(Error::Config("dt * steps must be positive and finite".into()));
        }
        if self.record_every == 0 {
            return Err(Error::Config("record_every must be >= 1".into()));
        }
        if let Some(t) = self.temperature {
            if t < 0.0 {
                return Err(Error::Config("temperature must be >= 0".into()));
            }
        }
        Ok(())
    }
}

/// Why a trajectory stopped.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum ExitFlag {
    Completed,
    LeftBounds { step: usize },
}

impl ExitFlag {
    pub fn as_csv(&self) -> String {
        match self {
            ExitFlag::Completed => "completed".into(),
            ExitFlag::LeftBounds { step } => format!("left_bounds:{step}"),
        }
    }
}

/// One trajectory: recorded states with E and S observables.
#[derive(Clone, Debug)]
pub struct Trajectory {
    pub record_steps: Vec<usize>,
    pub times: Vec<f64>,
    pub states: Vec<Point>,
    pub energy: Vec<f64>,
    pub entropy: Vec<f64>,
    pub exit: ExitFlag,
    /// Set when a step error aborted this trajectory; the ensemble keeps
    /// running.
    pub error: Option<String>,
    /// Max |E(x_s) - E(x_0)| over every step taken (not just records).
    pub energy_drift: f64,
}

/// Per-record-time mean/variance of the observables over the alive
/// trajectories.
#[derive(Clone, Debug)]
pub struct RecordStat {
    pub time: f64,
    pub n_alive: usize,
    pub mean_energy: f64,
    pub var_energy: f64,
    pub mean_entropy: f64,
    pub var_entropy: f64,
}

/// Deterministic function of (system, config, initial state).
#[derive(Clone, Debug)]
pub struct EnsembleResult {
    pub trajectories: Vec<Trajectory>,
    pub summary: Vec<RecordStat>,
    pub max_energy_drift: f64,
}

/// Initial condition: a fixed point or an isotropic Gaussian ball
/// sampled per trajectory from the reserved init stream.
#[derive(Clone, Debug)]
pub enum InitialState {
    Fixed(Point),
    GaussianBall { center: Point, std: f64 },
}

const INIT_STEP: u64 = 1 << 48;

impl InitialState {
    fn sample(&self, rng: &CounterRng, traj: u64) -> Point {
        match self {
            InitialState::Fixed(x) => x.clone(),
            InitialState::GaussianBall { center, std } => {
                let mut x = center.clone();
                for k in 0..x.len() {
                    x[k] += std * rng.trajectory_normal(traj, INIT_STEP, k as u32);
                }
                x
            }
        }
    }
}

/// The fields actually integrated, after resolving the optional
/// temperature scaling.
struct Dynamics<'a> {
    sys: &'a GenericSystem,
    entropy: &'a ScalarField,
    cometric: &'a MatrixField,
    frame: Option<&'a Frame>,
    /// Multiplies the frame-divergence / div_nu K drift.
    div_scale: f64,
    /// sqrt(2 T): multiplies A_i xi_i sqrt(dt).
    noise_amp: f64,
}

impl<'a> Dynamics<'a> {
    fn resolve(sys: &'a GenericSystem, temperature: Option<f64>) -> Result<Dynamics<'a>> {
        match temperature {
            None => Ok(Dynamics {
                sys,
                entropy: sys.entropy(),
                cometric: sys.k(),
                frame: sys.frame(),
                div_scale: 1.0,
                noise_amp: std::f64::consts::SQRT_2,
            }),
            Some(t) => {
                let scaling = sys.scaling().ok_or_else(|| {
                    Error::Config(
                        "temperature run requested but the system has no scaling decomposition"
                            .into(),
                    )
                })?;
                Ok(Dynamics {
                    sys,
                    entropy: &scaling.entropy_tilde,
                    cometric: &scaling.k_tilde,
                    frame: scaling.frame_tilde.as_ref(),
                    div_scale: t,
                    noise_amp: (2.0 * t).sqrt(),
                })
            }
        }
    }

    /// `J grad E + K grad S` (temperature-invariant).
    fn gradient_drift(&self, x: &Point) -> Result<DVector<f64>> {
        let ge = self.sys.energy().gradient(x)?;
        let gs = self.entropy.gradient(x)?;
        Ok(self.sys.j().value(x)? * ge + self.cometric.value(x)? * gs)
    }

    fn frame_or_err(&self) -> Result<&Frame> {
        self.frame.ok_or_else(|| {
            Error::Config("stochastic scheme needs a frame; none available".into())
        })
    }

    /// Stratonovich drift including the scaled frame-divergence term.
    fn b0(&self, x: &Point) -> Result<DVector<f64>> {
        let frame = self.frame_or_err()?;
        frame.check_consistency(self.cometric, x)?;
        let mut b = self.gradient_drift(x)?;
        for i in 0..frame.rank() {
            let div = frame.divergence_nu(i, self.sys.nu(), x)?;
            b += frame.field(i).value(x)? * (self.div_scale * div);
        }
        Ok(b)
    }

    /// Ito drift with the scaled `div_nu K` term.
    fn ito(&self, x: &Point) -> Result<DVector<f64>> {
        Ok(self.gradient_drift(x)?
            + div_nu_cometric(self.cometric, self.sys.nu(), x)? * self.div_scale)
    }
}

fn ensure_finite(x: &Point, stage: usize) -> Result<()> {
    if x.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::StepFailed { stage })
    }
}

fn rk4(dyn_: &Dynamics, x: &Point, dt: f64) -> Result<Point> {
    let k1 = dyn_.gradient_drift(x)?;
    ensure_finite(&k1, 1)?;
    let k2 = dyn_.gradient_drift(&(x + &k1 * (dt / 2.0)))?;
    ensure_finite(&k2, 2)?;
    let k3 = dyn_.gradient_drift(&(x + &k2 * (dt / 2.0)))?;
    ensure_finite(&k3, 3)?;
    let k4 = dyn_.gradient_drift(&(x + &k3 * dt))?;
    ensure_finite(&k4, 4)?;
    let out = x + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (dt / 6.0);
    ensure_finite(&out, 5)?;
    Ok(out)
}

fn em_step(dyn_: &Dynamics, x: &Point, dt: f64, xi: &mut dyn FnMut(usize) -> f64) -> Result<Point> {
    let mut out = x + dyn_.ito(x)? * dt;
    let amp = dyn_.noise_amp * dt.sqrt();
    match dyn_.frame {
        Some(frame) => {
            frame.check_consistency(dyn_.cometric, x)?;
            for i in 0..frame.rank() {
                out += frame.field(i).value(x)? * (amp * xi(i));
            }
        }
        None => {
            // factorize the co-metric on the fly
            let k = dyn_.cometric.value(x)?;
            let fields = crate::frames::factorize_cometric(&k, crate::frames::DEFAULT_RANK_TOL)?;
            for (i, a) in fields.iter().enumerate() {
                out += a * (amp * xi(i));
            }
        }
    }
    ensure_finite(&out, 1)?;
    Ok(out)
}

fn heun_step(
    dyn_: &Dynamics,
    x: &Point,
    dt: f64,
    xi: &mut dyn FnMut(usize) -> f64,
) -> Result<Point> {
    let frame = dyn_.frame_or_err()?;
    let r = frame.rank();
    let draws: Vec<f64> = (0..r).map(|i| xi(i)).collect();
    let amp = dyn_.noise_amp * dt.sqrt();

    let b_here = dyn_.b0(x)?;
    let a_here = frame.evaluate(x)?;
    let mut predictor = x + &b_here * dt;
    for i in 0..r {
        predictor += &a_here[i] * (amp * draws[i]);
    }
    ensure_finite(&predictor, 1)?;

    let b_there = dyn_.b0(&predictor)?;
    let a_there = frame.evaluate(&predictor)?;
    let mut out = x + (b_here + b_there) * (dt / 2.0);
    for i in 0..r {
        out += (&a_here[i] + &a_there[i]) * (0.5 * amp * draws[i]);
    }
    ensure_finite(&out, 2)?;
    Ok(out)
}

/// One RK4 step of the deterministic drift `J grad E + K grad S`.
pub fn step_deterministic(sys: &GenericSystem, x: &Point, dt: f64) -> Result<Point> {
    let dyn_ = Dynamics::resolve(sys, None)?;
    rk4(&dyn_, x, dt)
}

/// One Euler-Maruyama step of the Ito form. `xi` supplies one standard
/// normal per noise channel; the frame (system frame, or an on-the-fly
/// spectral factorization when absent) defines the channels.
pub fn step_ito(sys: &GenericSystem, x: &Point, dt: f64, xi: &[f64]) -> Result<Point> {
    let dyn_ = Dynamics::resolve(sys, None)?;
    em_step(&dyn_, x, dt, &mut |i| {
        xi.get(i).copied().expect("xi shorter than frame rank")
    })
}

/// One Stratonovich Heun step (predictor-corrector, derivative-free).
pub fn step_stratonovich(
    sys: &GenericSystem,
    frame: &Frame,
    x: &Point,
    dt: f64,
    xi: &[f64],
) -> Result<Point> {
    let dyn_ = Dynamics {
        frame: Some(frame),
        ..Dynamics::resolve(sys, None)?
    };
    heun_step(&dyn_, x, dt, &mut |i| {
        xi.get(i).copied().expect("xi shorter than frame rank")
    })
}

/// Newton projection back onto the shell `E(x) = e0`. Requires a
/// non-vanishing energy gradient; systems with constant E must disable
/// projection.
pub fn project_energy(sys: &GenericSystem, x: &Point, e0: f64) -> Result<Point> {
    let mut y = x.clone();
    for _ in 0..10 {
        let g = sys.energy().gradient(&y)?;
        let gn2 = g.norm_squared();
        if gn2 < 1e-24 {
            return Err(Error::ProjectionFailed {
                point: y.iter().copied().collect(),
                message: "energy gradient vanishes".into(),
            });
        }
        let e = sys.energy().value(&y)?;
        if (e - e0).abs() <= 1e-12 {
            return Ok(y);
        }
        y -= g * ((e - e0) / gn2);
    }
    let e = sys.energy().value(&y)?;
    if (e - e0).abs() <= 1e-12 {
        Ok(y)
    } else {
        Err(Error::ProjectionFailed {
            point: y.iter().copied().collect(),
            message: format!("|E - E0| = {:.3e} after 10 iterations", (e - e0).abs()),
        })
    }
}

fn record_schedule(steps: usize, record_every: usize) -> Vec<usize> {
    let mut out: Vec<usize> = (0..=steps).step_by(record_every).collect();
    if *out.last().unwrap() != steps {
        out.push(steps);
    }
    out
}

fn run_single(
    sys: &GenericSystem,
    cfg: &SimConfig,
    init: &InitialState,
    traj_index: usize,
) -> Trajectory {
    let rng = CounterRng::new(cfg.seed);
    let schedule = record_schedule(cfg.steps, cfg.record_every);
    let mut x = init.sample(&rng, traj_index as u64);
    let mut traj = Trajectory {
        record_steps: vec![],
        times: vec![],
        states: vec![],
        energy: vec![],
        entropy: vec![],
        exit: ExitFlag::Completed,
        error: None,
        energy_drift: 0.0,
    };
    let e0 = match sys.energy().value(&x) {
        Ok(v) => v,
        Err(e) => {
            traj.error = Some(e.to_string());
            return traj;
        }
    };
    let dyn_ = match Dynamics::resolve(sys, cfg.temperature) {
        Ok(d) => d,
        Err(e) => {
            traj.error = Some(e.to_string());
            return traj;
        }
    };

    let mut schedule_pos = 0;
    let record = |step: usize, x: &Point, traj: &mut Trajectory| -> Result<()> {
        traj.record_steps.push(step);
        traj.times.push(step as f64 * cfg.dt);
        traj.states.push(x.clone());
        traj.energy.push(sys.energy().value(x)?);
        traj.entropy.push(sys.entropy().value(x)?);
        Ok(())
    };
    if let Err(e) = record(0, &x, &mut traj) {
        traj.error = Some(e.to_string());
        return traj;
    }
    schedule_pos += 1;

    for step in 0..cfg.steps {
        let step_result = (|| -> Result<Point> {
            let mut xi = |channel: usize| {
                rng.trajectory_normal(traj_index as u64, step as u64, channel as u32)
            };
            let mut next = match cfg.scheme {
                Scheme::DetRk4 => rk4(&dyn_, &x, cfg.dt)?,
                Scheme::ItoEm => em_step(&dyn_, &x, cfg.dt, &mut xi)?,
                Scheme::StratHeun => heun_step(&dyn_, &x, cfg.dt, &mut xi)?,
            };
            if cfg.project_energy {
                next = project_energy(sys, &next, e0)?;
            }
            Ok(next)
        })();
        match step_result {
            Ok(next) => x = next,
            Err(e) => {
                traj.error = Some(e.to_string());
                break;
            }
        }
        let completed_step = step + 1;
        if let Ok(e) = sys.energy().value(&x) {
            traj.energy_drift = traj.energy_drift.max((e - e0).abs());
        }
        if !sys.patch().contains(&x) {
            traj.exit = ExitFlag::LeftBounds {
                step: completed_step,
            };
            break;
        }
        if schedule_pos < schedule.len() && schedule[schedule_pos] == completed_step {
            if let Err(e) = record(completed_step, &x, &mut traj) {
                traj.error = Some(e.to_string());
                break;
            }
            schedule_pos += 1;
        }
    }
    traj
}

/// Run `cfg.n_traj` independent trajectories. Trajectory i draws from the
/// noise stream keyed by (seed, i); results are identical for any worker
/// count. Step errors mark the trajectory and do not abort the ensemble.
pub fn run_ensemble(
    sys: &GenericSystem,
    cfg: &SimConfig,
    init: &InitialState,
) -> Result<EnsembleResult> {
    cfg.validate()?;
    if cfg.temperature.is_some() && sys.scaling().is_none() {
        return Err(Error::Config(
            "temperature run requested but the system has no scaling decomposition".into(),
        ));
    }
    let trajectories: Vec<Trajectory> = (0..cfg.n_traj)
        .into_par_iter()
        .map(|i| run_single(sys, cfg, init, i))
        .collect();

    let schedule = record_schedule(cfg.steps, cfg.record_every);
    let mut summary = Vec::with_capacity(schedule.len());
    for (pos, &step) in schedule.iter().enumerate() {
        let mut es = Vec::new();
        let mut ss = Vec::new();
        for t in &trajectories {
            if t.record_steps.len() > pos && t.record_steps[pos] == step {
                es.push(t.energy[pos]);
                ss.push(t.entropy[pos]);
            }
        }
        let n = es.len();
        let stat = |v: &[f64]| -> (f64, f64) {
            if v.is_empty() {
                return (f64::NAN, f64::NAN);
            }
            let mean = crate::quad::pairwise_sum(v) / v.len() as f64;
            let sq: Vec<f64> = v.iter().map(|x| (x - mean) * (x - mean)).collect();
            (mean, crate::quad::pairwise_sum(&sq) / v.len() as f64)
        };
        let (me, ve) = stat(&es);
        let (ms, vs) = stat(&ss);
        summary.push(RecordStat {
            time: step as f64 * cfg.dt,
            n_alive: n,
            mean_energy: me,
            var_energy: ve,
            mean_entropy: ms,
            var_entropy: vs,
        });
    }
    let max_energy_drift = trajectories
        .iter()
        .map(|t| t.energy_drift)
        .fold(0.0, f64::max);
    Ok(EnsembleResult {
        trajectories,
        summary,
        max_energy_drift,
    })
}

/// One row of the zero-noise sweep.
#[derive(Clone, Debug)]
pub struct SweepRow {
    pub temperature: f64,
    pub deviation: f64,
    pub deviation_over_sqrt_t: f64,
}

/// For each temperature, the RMS (over the ensemble and components)
/// distance between the stochastic trajectories and the deterministic
/// RK4 path, maximized over recorded times.
pub fn zero_noise_sweep(
    sys: &GenericSystem,
    t_list: &[f64],
    cfg: &SimConfig,
    init: &InitialState,
) -> Result<Vec<SweepRow>> {
    if sys.scaling().is_none() {
        return Err(Error::Config("zero-noise sweep needs a scaling decomposition".into()));
    }
    let x0 = match init {
        InitialState::Fixed(x) => x.clone(),
        InitialState::GaussianBall { center, .. } => center.clone(),
    };
    // Deterministic reference on the same record schedule.
    let det_cfg = SimConfig {
        scheme: Scheme::DetRk4,
        n_traj: 1,
        temperature: None,
        project_energy: false,
        ..cfg.clone()
    };
    let reference = run_ensemble(sys, &det_cfg, &InitialState::Fixed(x0.clone()))?;
    let ref_traj = &reference.trajectories[0];
    if let Some(err) = &ref_traj.error {
        return Err(Error::Config(format!("deterministic reference failed: {err}")));
    }

    let dim = sys.dim() as f64;
    let mut rows = Vec::new();
    for &t in t_list {
        let run_cfg = SimConfig {
            temperature: Some(t),
            ..cfg.clone()
        };
        let ensemble = run_ensemble(sys, &run_cfg, init)?;
        let mut deviation = 0.0f64;
        for (pos, &step) in ref_traj.record_steps.iter().enumerate() {
            let mut sq = Vec::new();
            for traj in &ensemble.trajectories {
                if traj.record_steps.len() > pos && traj.record_steps[pos] == step {
                    sq.push((&traj.states[pos] - &ref_traj.states[pos]).norm_squared());
                }
            }
            if !sq.is_empty() {
                let mean_sq = crate::quad::pairwise_sum(&sq) / sq.len() as f64;
                deviation = deviation.max((mean_sq / dim).sqrt());
            }
        }
        rows.push(SweepRow {
            temperature: t,
            deviation,
            deviation_over_sqrt_t: if t > 0.0 {
                deviation / t.sqrt()
            } else {
                f64::NAN
            },
        });
    }
    Ok(rows)
}
