//! Conditional DDIM sampling with stochasticity η.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::conditioning::ConditionToken;
use crate::data::SliceRecord;
use crate::diffusion::{predict_eps, predict_x0, JointSample, NoiseSchedule, PredictionTarget};
use crate::error::{Error, Result};
use crate::nn::{Act, Params};
use crate::real::Real;
use crate::unet::{JointDenoiser, IN_CHANNELS};

/// How sampler noise is laid over the image and mask channels.
///
/// Training corrupts both channels with one shared field, so the channel
/// difference of a training input is noise-free. `Shared` keeps sampler
/// states on that subspace, `Independent` draws the usual `N(0, I)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChannelNoise {
    Shared,
    #[default]
    Independent,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplerConfig {
    pub steps: usize,
    pub eta: f64,
    pub seed: u64,
    /// Trajectories advanced together through the network.
    pub batch_size: usize,
    /// Applies to both the start state and the per-step σ noise.
    pub noise: ChannelNoise,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            steps: 300,
            eta: 0.2,
            seed: 0,
            batch_size: 32,
            noise: ChannelNoise::Independent,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self, timesteps: usize) -> Result<()> {
        if self.steps < 1 || self.steps > timesteps {
            return Err(Error::Config(format!("sampler steps {} must lie in [1, {timesteps}]", self.steps)));
        }
        if !(0.0..=1.0).contains(&self.eta) {
            return Err(Error::range("eta", self.eta, "[0, 1]"));
        }
        if self.batch_size < 1 {
            return Err(Error::range("batch_size", self.batch_size, ">= 1"));
        }
        Ok(())
    }
}

/// Anything that maps noisy states to a model output of the same shape.
pub trait Denoiser<T: Real> {
    fn image_size(&self) -> usize;
    fn predict(&self, x_t: &Act<T>, ts: &[usize], tokens: &[ConditionToken]) -> Result<Act<T>>;
}

/// A trained network bound to a parameter set (normally the EMA weights).
pub struct NetDenoiser<'a> {
    pub net: &'a JointDenoiser,
    pub params: &'a Params<f32>,
}

impl Denoiser<f32> for NetDenoiser<'_> {
    fn image_size(&self) -> usize {
        self.net.config().image_size
    }

    fn predict(&self, x_t: &Act<f32>, ts: &[usize], tokens: &[ConditionToken]) -> Result<Act<f32>> {
        Ok(self.net.forward(self.params, x_t, ts, tokens)?.0)
    }
}

/// `τ_i = T − ⌊i·T/steps⌋`: starts at `T`, strictly decreasing.
pub fn timestep_subsequence(timesteps: usize, steps: usize) -> Result<Vec<usize>> {
    if steps == 0 || steps > timesteps {
        return Err(Error::Config(format!("cannot take {steps} sampling steps from T = {timesteps}")));
    }
    Ok((0..steps).map(|i| timesteps - i * timesteps / steps).collect())
}

pub fn ddim_sigma(alpha_bar_t: f64, alpha_bar_prev: f64, eta: f64) -> Result<f64> {
    if !(0.0 < alpha_bar_t && alpha_bar_t < alpha_bar_prev && alpha_bar_prev <= 1.0) {
        return Err(Error::range(
            "(alpha_bar_t, alpha_bar_prev)",
            format!("({alpha_bar_t}, {alpha_bar_prev})"),
            "0 < alpha_bar_t < alpha_bar_prev <= 1",
        ));
    }
    Ok(eta * ((1.0 - alpha_bar_prev) / (1.0 - alpha_bar_t)).sqrt() * (1.0 - alpha_bar_t / alpha_bar_prev).sqrt())
}

/// Moves `x_t` to `t_prev` (0 is the clean boundary, `ᾱ_0 = 1`).
///
/// `z` supplies the fresh noise and is only read when σ > 0.
#[allow(clippy::too_many_arguments)]
pub fn ddim_step<T: Real>(
    x_t: &[T],
    model_out: &[T],
    t: usize,
    t_prev: usize,
    eta: f64,
    sched: &NoiseSchedule,
    target: PredictionTarget,
    z: &mut dyn FnMut() -> f64,
) -> Result<Vec<T>> {
    if t_prev >= t {
        return Err(Error::range("t_prev", t_prev, format!("[0, {t})")));
    }
    let ab_t = sched.alpha_bar(t);
    let ab_prev = sched.alpha_bar(t_prev);
    let sigma = ddim_sigma(ab_t, ab_prev, eta)?;
    let mut dir2 = 1.0 - ab_prev - sigma * sigma;
    if dir2 < 0.0 {
        if dir2 < -1e-12 {
            return Err(Error::Numeric(format!("1 - alpha_bar_prev - sigma^2 = {dir2} < 0 at t = {t}")));
        }
        dir2 = 0.0;
    }
    let x0 = predict_x0(model_out, x_t, t, sched, target)?;
    let eps = predict_eps(model_out, x_t, t, sched, target)?;
    let (ca, cd) = (T::from_f64(ab_prev.sqrt()), T::from_f64(dir2.sqrt()));
    let lim = T::ONE;
    Ok(x0
        .iter()
        .zip(&eps)
        .map(|(&x, &e)| {
            let x = if x > lim { lim } else if x < T::ZERO - lim { T::ZERO - lim } else { x };
            let mut v = ca * x + cd * e;
            if sigma > 0.0 {
                v += T::from_f64(sigma * z());
            }
            v
        })
        .collect())
}

/// Maps mask values onto `{−1, +1}` at threshold 0.
pub fn binarize_mask<T: Real>(v: T) -> T {
    if v > T::ZERO {
        T::ONE
    } else {
        T::ZERO - T::ONE
    }
}

#[derive(Debug, Clone)]
pub struct GeneratedSample<T = f32> {
    pub token: ConditionToken,
    pub seed: u64,
    /// Mask binarized, image clamped to `[−1, 1]`.
    pub sample: JointSample<T>,
    /// Final state before post-processing, planar `2×H×W`.
    pub raw: Vec<T>,
}

/// Standard normal values for a planar `2×H×W` state.
fn noise_field(rng: &mut ChaCha8Rng, hw: usize, mode: ChannelNoise) -> Vec<f64> {
    match mode {
        ChannelNoise::Shared => {
            let f: Vec<f64> = (0..hw).map(|_| rng.sample(StandardNormal)).collect();
            f.repeat(IN_CHANNELS)
        }
        ChannelNoise::Independent => (0..IN_CHANNELS * hw).map(|_| rng.sample(StandardNormal)).collect(),
    }
}

/// Runs one DDIM trajectory per `(seed, token)` request.
///
/// Each trajectory owns a generator seeded by its request, so results do not
/// depend on how requests are batched.
pub fn sample<T: Real, D: Denoiser<T>>(
    model: &D,
    requests: &[(u64, ConditionToken)],
    cfg: &SamplerConfig,
    sched: &NoiseSchedule,
    target: PredictionTarget,
) -> Result<Vec<GeneratedSample<T>>> {
    if requests.is_empty() {
        return Err(Error::Usage("sampling requires at least one condition token".into()));
    }
    cfg.validate(sched.timesteps())?;
    let taus = timestep_subsequence(sched.timesteps(), cfg.steps)?;
    let s = model.image_size();
    let hw = s * s;
    let mut out = Vec::with_capacity(requests.len());
    for chunk in requests.chunks(cfg.batch_size) {
        let mut rngs: Vec<ChaCha8Rng> = chunk.iter().map(|&(seed, _)| ChaCha8Rng::seed_from_u64(seed)).collect();
        let tokens: Vec<ConditionToken> = chunk.iter().map(|&(_, t)| t).collect();
        let mut states: Vec<Vec<T>> = rngs
            .iter_mut()
            .map(|r| noise_field(r, hw, cfg.noise).into_iter().map(T::from_f64).collect())
            .collect();
        for (i, &t) in taus.iter().enumerate() {
            let t_prev = taus.get(i + 1).copied().unwrap_or(0);
            let views: Vec<&[T]> = states.iter().map(Vec::as_slice).collect();
            let x = Act::stack(IN_CHANNELS, s, s, &views);
            let y = model.predict(&x, &vec![t; chunk.len()], &tokens)?;
            for (b, (state, rng)) in states.iter_mut().zip(rngs.iter_mut()).enumerate() {
                let mo = y.item(b);
                let z = if cfg.eta > 0.0 { noise_field(rng, hw, cfg.noise) } else { Vec::new() };
                let mut zs = z.into_iter();
                let next = ddim_step(state, &mo, t, t_prev, cfg.eta, sched, target, &mut || zs.next().expect("one draw per element"))?;
                if next.iter().any(|v| !v.is_finite()) {
                    return Err(Error::Numeric(format!("non-finite sampler state at t = {t}")));
                }
                *state = next;
            }
        }
        for (state, &(seed, token)) in states.into_iter().zip(chunk) {
            let one = T::ONE;
            let image: Vec<T> = state[..hw]
                .iter()
                .map(|&v| if v > one { one } else if v < T::ZERO - one { T::ZERO - one } else { v })
                .collect();
            let mask: Vec<T> = state[hw..].iter().map(|&v| binarize_mask(v)).collect();
            out.push(GeneratedSample {
                token,
                seed,
                sample: JointSample::new(s, s, image, mask)?,
                raw: state,
            });
        }
    }
    Ok(out)
}

/// Converts generated samples into archive records (`gen00000`, …).
///
/// Slice position is encoded as `z_index = z_bin` out of `z_total = n_z`.
pub fn samples_to_records(samples: &[GeneratedSample<f32>]) -> Vec<SliceRecord> {
    samples
        .iter()
        .enumerate()
        .map(|(i, g)| SliceRecord {
            subject_id: format!("gen{i:05}"),
            z_index: g.token.z_bin,
            z_total: g.token.n_z,
            z_bin: g.token.z_bin,
            pathology: g.sample.mask.iter().any(|&m| m > 0.0) as u8,
            height: g.sample.height,
            width: g.sample.width,
            image: g.sample.image.clone(),
            mask: g.sample.mask.clone(),
        })
        .collect()
}
