//! Noise schedule, forward corruption of the joint image/mask sample,
//! prediction-target algebra and the tunable Lp objective.
//!
//! Timesteps are 1-based. `alpha_bar(0) == 1` is the clean boundary used as
//! the final DDIM target, and every conversion below accepts `t == 0`.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::real::Real;

/// Upper bound applied to every per-step beta.
pub const MAX_BETA: f64 = 0.999;

/// Precomputed cosine noise schedule.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    timesteps: usize,
    offset: f64,
    /// Length `T + 1`, `alpha_bar[0] == 1`.
    alpha_bar: Vec<f64>,
    /// Length `T`; entry `t - 1` holds alpha_t.
    alpha: Vec<f64>,
    /// Length `T`; entry `t - 1` holds beta_t.
    beta: Vec<f64>,
}

/// Builds the cosine schedule `f(t) = cos²(((t/T + s)/(1 + s))·π/2)`.
///
/// Betas come from consecutive ratios of `f`, are clipped at [`MAX_BETA`],
/// and `alpha_bar` is re-accumulated from the clipped betas so the
/// `alpha = alpha_bar[t] / alpha_bar[t-1]` identity holds exactly. Only the
/// final step is affected by the clip for the usual `s = 0.008`.
pub fn cosine_schedule(timesteps: usize, offset: f64) -> Result<NoiseSchedule> {
    if timesteps == 0 {
        return Err(Error::Config("cosine schedule needs at least one timestep".into()));
    }
    if !(offset >= 0.0 && offset.is_finite()) {
        return Err(Error::Config(format!("schedule offset must be >= 0, got {offset}")));
    }
    let n = timesteps as f64;
    let f = |t: f64| {
        let arg = (t / n + offset) / (1.0 + offset) * std::f64::consts::FRAC_PI_2;
        arg.cos().powi(2)
    };
    let mut alpha_bar = Vec::with_capacity(timesteps + 1);
    let mut alpha = Vec::with_capacity(timesteps);
    let mut beta = Vec::with_capacity(timesteps);
    alpha_bar.push(1.0);
    let mut prev_f = f(0.0);
    let mut acc = 1.0f64;
    for t in 1..=timesteps {
        let cur_f = f(t as f64);
        let b = (1.0 - cur_f / prev_f).clamp(f64::MIN_POSITIVE, MAX_BETA);
        prev_f = cur_f;
        let a = 1.0 - b;
        acc *= a;
        alpha.push(a);
        beta.push(b);
        alpha_bar.push(acc);
    }
    Ok(NoiseSchedule {
        timesteps,
        offset,
        alpha_bar,
        alpha,
        beta,
    })
}

impl NoiseSchedule {
    pub fn timesteps(&self) -> usize {
        self.timesteps
    }

    pub fn offset(&self) -> f64 {
        self.offset
    }

    /// `alpha_bar` for `t` in `0..=T`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar[t]
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bar
    }

    /// Per-step alpha for `t` in `1..=T`.
    pub fn alpha(&self, t: usize) -> f64 {
        self.alpha[t - 1]
    }

    /// Per-step beta for `t` in `1..=T`.
    pub fn beta(&self, t: usize) -> f64 {
        self.beta[t - 1]
    }

    pub(crate) fn check_t(&self, t: usize) -> Result<()> {
        if t > self.timesteps {
            return Err(Error::range("timestep", t, format!("[0, {}]", self.timesteps)));
        }
        Ok(())
    }

    /// Signal and noise coefficients `(√ᾱ_t, √(1−ᾱ_t))`.
    pub fn coefficients(&self, t: usize) -> Result<(f64, f64)> {
        self.check_t(t)?;
        let ab = self.alpha_bar[t];
        Ok((ab.sqrt(), (1.0 - ab).sqrt()))
    }
}

/// One clean (or in-flight) two-channel sample, channel-major.
#[derive(Debug, Clone, PartialEq)]
pub struct JointSample<T = f32> {
    pub height: usize,
    pub width: usize,
    pub image: Vec<T>,
    pub mask: Vec<T>,
}

impl<T: Real> JointSample<T> {
    pub fn new(height: usize, width: usize, image: Vec<T>, mask: Vec<T>) -> Result<Self> {
        let n = height * width;
        if image.len() != n || mask.len() != n {
            return Err(Error::Shape(format!(
                "joint sample {height}x{width} needs {n} pixels per channel, got image {} mask {}",
                image.len(),
                mask.len()
            )));
        }
        Ok(Self {
            height,
            width,
            image,
            mask,
        })
    }

    pub fn pixels(&self) -> usize {
        self.height * self.width
    }

    /// Both channels stacked as a `2×H×W` buffer.
    pub fn to_planar(&self) -> Vec<T> {
        let mut out = Vec::with_capacity(2 * self.pixels());
        out.extend_from_slice(&self.image);
        out.extend_from_slice(&self.mask);
        out
    }

    pub fn from_planar(height: usize, width: usize, planar: &[T]) -> Result<Self> {
        let n = height * width;
        if planar.len() != 2 * n {
            return Err(Error::Shape(format!(
                "planar buffer of {} values cannot hold 2x{height}x{width}",
                planar.len()
            )));
        }
        Self::new(height, width, planar[..n].to_vec(), planar[n..].to_vec())
    }

    /// Checks the data-space contract: image in [−1, 1], mask in {−1, +1}.
    pub fn validate_data(&self) -> Result<()> {
        let one = T::ONE;
        if let Some(v) = self.image.iter().find(|v| !(**v >= -one && **v <= one)) {
            return Err(Error::Validation(format!("image value {v} outside [-1, 1]")));
        }
        if let Some(v) = self.mask.iter().find(|v| **v != one && **v != -one) {
            return Err(Error::Validation(format!("mask value {v} is not -1 or +1")));
        }
        Ok(())
    }
}

/// What the denoiser is trained to output.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PredictionTarget {
    Epsilon,
    Velocity,
    X0,
}

impl PredictionTarget {
    pub const ALL: [PredictionTarget; 3] = [Self::Epsilon, Self::Velocity, Self::X0];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Epsilon => "epsilon",
            Self::Velocity => "velocity",
            Self::X0 => "x0",
        }
    }
}

impl fmt::Display for PredictionTarget {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for PredictionTarget {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "epsilon" | "eps" => Ok(Self::Epsilon),
            "velocity" | "v" => Ok(Self::Velocity),
            "x0" | "sample" => Ok(Self::X0),
            other => Err(Error::Config(format!("unknown prediction target '{other}'"))),
        }
    }
}

fn check_noise_field(pixels: usize, eps: &[impl Real]) -> Result<()> {
    if eps.len() != pixels {
        return Err(Error::Shape(format!(
            "noise field has {} values, expected one H×W field of {pixels}",
            eps.len()
        )));
    }
    Ok(())
}

/// Samples `q(x_t | x_0)` with one noise field shared by both channels.
///
/// Returns the `2×H×W` planar state.
pub fn forward_diffuse<T: Real>(
    x0: &JointSample<T>,
    t: usize,
    eps: &[T],
    sched: &NoiseSchedule,
) -> Result<Vec<T>> {
    check_noise_field(x0.pixels(), eps)?;
    let (sa, sn) = sched.coefficients(t)?;
    let (sa, sn) = (T::from_f64(sa), T::from_f64(sn));
    let mut out = Vec::with_capacity(2 * x0.pixels());
    for channel in [&x0.image, &x0.mask] {
        out.extend(channel.iter().zip(eps).map(|(&x, &e)| sa * x + sn * e));
    }
    Ok(out)
}

/// Regression target for the given parameterization, planar `2×H×W`.
pub fn compute_target<T: Real>(
    x0: &JointSample<T>,
    eps: &[T],
    t: usize,
    sched: &NoiseSchedule,
    target: PredictionTarget,
) -> Result<Vec<T>> {
    check_noise_field(x0.pixels(), eps)?;
    let (sa, sn) = sched.coefficients(t)?;
    let (sa, sn) = (T::from_f64(sa), T::from_f64(sn));
    let mut out = Vec::with_capacity(2 * x0.pixels());
    for channel in [&x0.image, &x0.mask] {
        match target {
            PredictionTarget::Epsilon => out.extend_from_slice(eps),
            PredictionTarget::X0 => out.extend_from_slice(channel),
            PredictionTarget::Velocity => {
                out.extend(channel.iter().zip(eps).map(|(&x, &e)| sa * e - sn * x))
            }
        }
    }
    Ok(out)
}

fn check_pair<T>(a: &[T], b: &[T], what: &str) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!(
            "{what}: model output has {} values, state has {}",
            a.len(),
            b.len()
        )));
    }
    Ok(())
}

/// Recovers the clean-sample estimate from a model output.
pub fn predict_x0<T: Real>(
    model_out: &[T],
    x_t: &[T],
    t: usize,
    sched: &NoiseSchedule,
    target: PredictionTarget,
) -> Result<Vec<T>> {
    check_pair(model_out, x_t, "predict_x0")?;
    let (sa, sn) = sched.coefficients(t)?;
    Ok(match target {
        PredictionTarget::X0 => model_out.to_vec(),
        PredictionTarget::Epsilon => {
            if sa == 0.0 {
                return Err(Error::Singularity(format!(
                    "alpha_bar({t}) = 0: cannot recover x0 from an epsilon prediction"
                )));
            }
            let inv = T::from_f64(1.0 / sa);
            let sn = T::from_f64(sn);
            model_out
                .iter()
                .zip(x_t)
                .map(|(&m, &x)| (x - sn * m) * inv)
                .collect()
        }
        PredictionTarget::Velocity => {
            let (sa, sn) = (T::from_f64(sa), T::from_f64(sn));
            model_out
                .iter()
                .zip(x_t)
                .map(|(&m, &x)| sa * x - sn * m)
                .collect()
        }
    })
}

/// Recovers the noise estimate from a model output.
pub fn predict_eps<T: Real>(
    model_out: &[T],
    x_t: &[T],
    t: usize,
    sched: &NoiseSchedule,
    target: PredictionTarget,
) -> Result<Vec<T>> {
    check_pair(model_out, x_t, "predict_eps")?;
    let (sa, sn) = sched.coefficients(t)?;
    Ok(match target {
        PredictionTarget::Epsilon => model_out.to_vec(),
        PredictionTarget::X0 => {
            if sn == 0.0 {
                return Err(Error::Singularity(format!(
                    "alpha_bar({t}) = 1: cannot recover epsilon from an x0 prediction"
                )));
            }
            let inv = T::from_f64(1.0 / sn);
            let sa = T::from_f64(sa);
            model_out
                .iter()
                .zip(x_t)
                .map(|(&m, &x)| (x - sa * m) * inv)
                .collect()
        }
        PredictionTarget::Velocity => {
            let (sa, sn) = (T::from_f64(sa), T::from_f64(sn));
            model_out
                .iter()
                .zip(x_t)
                .map(|(&m, &x)| sn * x + sa * m)
                .collect()
        }
    })
}

/// Exponent of the Lp objective; reduction is the mean over every element.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LpConfig {
    pub p: f64,
}

impl LpConfig {
    pub fn new(p: f64) -> Result<Self> {
        if !(p > 0.0 && p.is_finite()) {
            return Err(Error::Config(format!("Lp exponent must be > 0, got {p}")));
        }
        Ok(Self { p })
    }
}

fn check_loss_inputs<T: Real>(pred: &[T], target: &[T]) -> Result<()> {
    if pred.len() != target.len() {
        return Err(Error::Shape(format!(
            "lp_loss: prediction has {} values, target has {}",
            pred.len(),
            target.len()
        )));
    }
    if pred.is_empty() {
        return Err(Error::Shape("lp_loss on empty arrays".into()));
    }
    if let Some(i) = pred
        .iter()
        .zip(target)
        .position(|(a, b)| !a.is_finite() || !b.is_finite())
    {
        return Err(Error::Numeric(format!("lp_loss: non-finite input at element {i}")));
    }
    Ok(())
}

/// `mean |pred − target|^p`.
pub fn lp_loss<T: Real>(pred: &[T], target: &[T], cfg: LpConfig) -> Result<f64> {
    check_loss_inputs(pred, target)?;
    let sum: f64 = pred
        .iter()
        .zip(target)
        .map(|(&a, &b)| (a - b).to_f64().abs().powf(cfg.p))
        .sum();
    Ok(sum / pred.len() as f64)
}

/// Loss value together with its gradient w.r.t. `pred`.
///
/// The gradient is `p·|r|^(p−1)·sign(r)/N` and is 0 where `r == 0`.
pub fn lp_loss_with_grad<T: Real>(pred: &[T], target: &[T], cfg: LpConfig) -> Result<(f64, Vec<T>)> {
    let loss = lp_loss(pred, target, cfg)?;
    let n = pred.len() as f64;
    let grad = pred
        .iter()
        .zip(target)
        .map(|(&a, &b)| {
            let r = (a - b).to_f64();
            if r == 0.0 {
                T::ZERO
            } else {
                T::from_f64(cfg.p * r.abs().powf(cfg.p - 1.0) * r.signum() / n)
            }
        })
        .collect();
    Ok((loss, grad))
}
