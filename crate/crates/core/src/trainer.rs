//! Training loop: Lp objective, AdamW, cosine learning-rate annealing,
//! global-norm clipping, EMA, early stopping and lesion oversampling.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::checkpoint::{write_atomic, Array, Checkpoint, ModelHeader};
use crate::conditioning::ConditionToken;
use crate::data::{check_disjoint, subjects, SliceRecord};
use crate::diffusion::{compute_target, forward_diffuse, lp_loss_with_grad, LpConfig, NoiseSchedule, PredictionTarget};
use crate::error::{Error, Result};
use crate::nn::{Act, Params};
use crate::unet::{JointDenoiser, IN_CHANNELS};

pub const METRICS_LOG: &str = "metrics.tsv";
pub const LAST_CHECKPOINT: &str = "last.ckpt";
pub const BEST_CHECKPOINT: &str = "best.ckpt";
const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr: f64,
    pub lr_floor: f64,
    /// `f64::INFINITY` disables clipping.
    pub clip_norm: f64,
    pub ema_decay: f64,
    pub weight_decay: f64,
    pub patience: usize,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub seed: u64,
    pub target: PredictionTarget,
    pub loss: LpConfig,
    /// Draw subjects so lesion and control subjects get equal mass.
    pub oversample: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            lr_floor: 1e-6,
            clip_norm: 1.0,
            ema_decay: 0.999,
            weight_decay: 0.01,
            patience: 25,
            batch_size: 32,
            max_epochs: 100,
            seed: 0,
            target: PredictionTarget::X0,
            loss: LpConfig { p: 2.0 },
            oversample: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let nonneg = |what: &'static str, v: f64| {
            if v >= 0.0 && !v.is_nan() {
                Ok(())
            } else {
                Err(Error::range(what, v, ">= 0"))
            }
        };
        nonneg("lr", self.lr)?;
        nonneg("lr_floor", self.lr_floor)?;
        nonneg("weight_decay", self.weight_decay)?;
        if !(self.lr.is_finite() && self.lr_floor <= self.lr) {
            return Err(Error::range("lr_floor", self.lr_floor, format!("[0, lr = {}]", self.lr)));
        }
        if !(self.clip_norm > 0.0) {
            return Err(Error::range("clip_norm", self.clip_norm, "> 0"));
        }
        if !(0.0..=1.0).contains(&self.ema_decay) {
            return Err(Error::range("ema_decay", self.ema_decay, "[0, 1]"));
        }
        if self.patience < 1 {
            return Err(Error::range("patience", self.patience, ">= 1"));
        }
        if self.batch_size < 1 || self.max_epochs < 1 {
            return Err(Error::Config("batch_size and max_epochs must be >= 1".into()));
        }
        LpConfig::new(self.loss.p)?;
        Ok(())
    }

    fn digest_words(&self) -> Vec<u64> {
        let d = Sha256::digest(serde_json::to_vec(self).expect("config serializes"));
        d.chunks_exact(8).map(|c| u64::from_le_bytes(c.try_into().unwrap())).collect()
    }
}

pub fn cosine_lr(step: usize, total_steps: usize, lr0: f64, lr_floor: f64) -> f64 {
    if total_steps == 0 || step >= total_steps {
        return lr_floor;
    }
    let frac = step as f64 / total_steps as f64;
    lr_floor + 0.5 * (lr0 - lr_floor) * (1.0 + (std::f64::consts::PI * frac).cos())
}

/// Exponential moving average of the live weights.
#[derive(Debug, Clone, PartialEq)]
pub struct EmaState {
    pub shadow: Params<f32>,
    pub decay: f64,
}

impl EmaState {
    pub fn new(params: &Params<f32>, decay: f64) -> Self {
        Self {
            shadow: params.clone(),
            decay,
        }
    }
}

/// `shadow ← decay·shadow + (1 − decay)·params`.
pub fn ema_update(ema: &mut EmaState, params: &Params<f32>) -> Result<()> {
    ema.shadow.check_layout(params, "ema_update")?;
    let d = ema.decay as f32;
    let keep = 1.0 - d;
    for (s, p) in ema.shadow.values_mut().zip(params.values()) {
        for (a, &b) in s.iter_mut().zip(p) {
            *a = d * *a + keep * b;
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopDecision {
    Continue,
    Stop { best_epoch: usize },
}

/// Stops once the last `patience` epochs brought no new minimum.
pub fn early_stop_check(history: &[f64], patience: usize) -> StopDecision {
    let Some(best) = argmin(history) else {
        return StopDecision::Continue;
    };
    if history.len() - 1 - best >= patience {
        StopDecision::Stop { best_epoch: best }
    } else {
        StopDecision::Continue
    }
}

/// Index of the first minimum.
pub fn argmin(xs: &[f64]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, &x) in xs.iter().enumerate() {
        if best.is_none_or(|b| x < xs[b]) {
            best = Some(i);
        }
    }
    best
}

/// Per-subject draw weights giving lesion and control subjects equal total mass.
pub fn oversample_weights(subjects: &[(String, bool)]) -> Result<Vec<f64>> {
    let lesions = subjects.iter().filter(|(_, l)| *l).count();
    let controls = subjects.len() - lesions;
    if lesions == 0 || controls == 0 {
        return Err(Error::Config(format!(
            "oversampling needs both lesion and control subjects (found {lesions} lesion, {controls} control)"
        )));
    }
    Ok(subjects
        .iter()
        .map(|(_, l)| 0.5 / if *l { lesions } else { controls } as f64)
        .collect())
}

/// AdamW moments in the layout of the parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Params<f32>,
    pub v: Params<f32>,
    pub step: u64,
}

impl AdamState {
    pub fn new(params: &Params<f32>) -> Self {
        Self {
            m: params.zeros_like(),
            v: params.zeros_like(),
            step: 0,
        }
    }
}

/// Rescales `g` in place so its global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm(g: &mut Params<f32>, max_norm: f64) -> f64 {
    let norm = g.l2_norm();
    if norm.is_finite() && norm > max_norm {
        g.scale((max_norm / norm) as f32);
    }
    norm
}

fn adamw_step(p: &mut Params<f32>, g: &Params<f32>, st: &mut AdamState, lr: f64, weight_decay: f64) {
    st.step += 1;
    let bc1 = 1.0 - ADAM_BETA1.powi(st.step as i32);
    let bc2 = 1.0 - ADAM_BETA2.powi(st.step as i32);
    let (b1, b2) = (ADAM_BETA1 as f32, ADAM_BETA2 as f32);
    let step_size = (lr / bc1) as f32;
    let inv_bc2 = (1.0 / bc2) as f32;
    let decay = (lr * weight_decay) as f32;
    let eps = ADAM_EPS as f32;
    let groups = p.values_mut().zip(g.values()).zip(st.m.values_mut().zip(st.v.values_mut()));
    for ((pv, gv), (mv, vv)) in groups {
        for i in 0..pv.len() {
            let gi = gv[i];
            mv[i] = b1 * mv[i] + (1.0 - b1) * gi;
            vv[i] = b2 * vv[i] + (1.0 - b2) * gi * gi;
            let denom = (vv[i] * inv_bc2).sqrt() + eps;
            pv[i] -= step_size * mv[i] / denom + decay * pv[i];
        }
    }
}

/// Live weights plus optimizer and EMA state.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub params: Params<f32>,
    pub adam: AdamState,
    pub ema: EmaState,
}

impl TrainState {
    pub fn new(params: Params<f32>, ema_decay: f64) -> Self {
        let adam = AdamState::new(&params);
        let ema = EmaState::new(&params, ema_decay);
        Self { params, adam, ema }
    }
}

/// Noisy inputs and regression targets for one batch, in `C×B×H×W` layout.
pub struct DiffusionBatch {
    pub x_t: Act<f32>,
    pub target: Act<f32>,
    pub ts: Vec<usize>,
    pub tokens: Vec<ConditionToken>,
}

/// Draws `t ~ U[1, T]` and one shared noise field per item.
pub fn make_batch<R: Rng + ?Sized>(
    items: &[(&SliceRecord, ConditionToken)],
    sched: &NoiseSchedule,
    target: PredictionTarget,
    rng: &mut R,
) -> Result<DiffusionBatch> {
    let first = items.first().ok_or_else(|| Error::Input("empty batch".into()))?.0;
    let (h, w) = (first.height, first.width);
    let mut xs = Vec::with_capacity(items.len());
    let mut ys = Vec::with_capacity(items.len());
    let mut ts = Vec::with_capacity(items.len());
    for (rec, _) in items {
        let x0 = rec.joint()?;
        let t = rng.random_range(1..=sched.timesteps());
        let eps: Vec<f32> = (0..x0.pixels()).map(|_| rng.sample::<f64, _>(StandardNormal) as f32).collect();
        xs.push(forward_diffuse(&x0, t, &eps, sched)?);
        ys.push(compute_target(&x0, &eps, t, sched, target)?);
        ts.push(t);
    }
    let xr: Vec<&[f32]> = xs.iter().map(Vec::as_slice).collect();
    let yr: Vec<&[f32]> = ys.iter().map(Vec::as_slice).collect();
    Ok(DiffusionBatch {
        x_t: Act::stack(IN_CHANNELS, h, w, &xr),
        target: Act::stack(IN_CHANNELS, h, w, &yr),
        ts,
        tokens: items.iter().map(|(_, t)| *t).collect(),
    })
}

/// One optimizer step. Returns the batch loss.
#[allow(clippy::too_many_arguments)]
pub fn train_step<R: Rng + ?Sized>(
    net: &JointDenoiser,
    state: &mut TrainState,
    items: &[(&SliceRecord, ConditionToken)],
    sched: &NoiseSchedule,
    cfg: &TrainConfig,
    lr: f64,
    step_index: u64,
    rng: &mut R,
) -> Result<f64> {
    let batch = make_batch(items, sched, cfg.target, rng)?;
    let nonfinite = |what: &str| Error::Numeric(format!("{what} at step {step_index} (t = {:?})", batch.ts));
    let (out, tape) = net.forward(&state.params, &batch.x_t, &batch.ts, &batch.tokens).map_err(|e| match e {
        Error::Numeric(m) => nonfinite(&m),
        other => other,
    })?;
    let (loss, grad) = lp_loss_with_grad(&out.data, &batch.target.data, cfg.loss).map_err(|e| match e {
        Error::Numeric(m) => nonfinite(&m),
        other => other,
    })?;
    if !loss.is_finite() {
        return Err(nonfinite("non-finite loss"));
    }
    let dy = Act::from_vec(out.c, out.b, out.h, out.w, grad);
    let mut g = net.backward(&state.params, &tape, &dy).map_err(|e| match e {
        Error::Numeric(m) => nonfinite(&m),
        other => other,
    })?;
    clip_global_norm(&mut g, cfg.clip_norm);
    adamw_step(&mut state.params, &g, &mut state.adam, lr, cfg.weight_decay);
    ema_update(&mut state.ema, &state.params)?;
    Ok(loss)
}

/// Lp loss of `params` on `records` with a fixed draw seeded by `(seed, epoch)`.
pub fn validation_loss(
    net: &JointDenoiser,
    params: &Params<f32>,
    records: &[SliceRecord],
    sched: &NoiseSchedule,
    cfg: &TrainConfig,
    epoch: usize,
) -> Result<f64> {
    let n_z = net.config().z_bins;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(epoch as u64 + 1);
    let mut sum = 0.0;
    let mut count = 0usize;
    for chunk in records.chunks(cfg.batch_size) {
        let items = chunk.iter().map(|r| Ok((r, r.token(n_z)?))).collect::<Result<Vec<_>>>()?;
        let batch = make_batch(&items, sched, cfg.target, &mut rng)?;
        let (out, _) = net.forward(params, &batch.x_t, &batch.ts, &batch.tokens)?;
        let n = out.data.len();
        sum += crate::diffusion::lp_loss(&out.data, &batch.target.data, cfg.loss)? * n as f64;
        count += n;
    }
    Ok(sum / count as f64)
}

/// One line of the metrics log.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub lr: f64,
    pub ema_applied: bool,
}

pub fn format_metrics_log(rows: &[EpochRecord]) -> String {
    let mut s = String::from("epoch\ttrain_loss\tval_loss\tlr\tema_applied\n");
    for r in rows {
        let _ = writeln!(s, "{}\t{}\t{}\t{}\t{}", r.epoch, r.train_loss, r.val_loss, r.lr, r.ema_applied as u8);
    }
    s
}

pub fn parse_metrics_log(path: &Path) -> Result<Vec<EpochRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let perr = |line: usize, msg: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        msg,
    };
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate().skip(1) {
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != 5 {
            return Err(perr(i + 1, format!("expected 5 fields, found {}", f.len())));
        }
        let num = |k: usize| f[k].parse::<f64>().map_err(|e| perr(i + 1, format!("field {k}: {e}")));
        rows.push(EpochRecord {
            epoch: f[0].parse().map_err(|e| perr(i + 1, format!("epoch: {e}")))?,
            train_loss: num(1)?,
            val_loss: num(2)?,
            lr: num(3)?,
            ema_applied: f[4] == "1",
        });
    }
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub epochs_run: usize,
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub stopped_early: bool,
    pub history: Vec<EpochRecord>,
    pub best_checkpoint: PathBuf,
    pub metrics_log: PathBuf,
}

/// Draws training items by subject weight, then a uniform slice of the subject.
struct Sampler {
    by_subject: Vec<Vec<usize>>,
    dist: WeightedIndex<f64>,
}

impl Sampler {
    fn new(records: &[SliceRecord], oversample: bool) -> Result<Self> {
        let subs = subjects(records);
        let weights = if oversample {
            oversample_weights(&subs)?
        } else {
            let total = records.len() as f64;
            subs.iter()
                .map(|(s, _)| records.iter().filter(|r| &r.subject_id == s).count() as f64 / total)
                .collect()
        };
        let by_subject = subs
            .iter()
            .map(|(s, _)| records.iter().enumerate().filter(|(_, r)| &r.subject_id == s).map(|(i, _)| i).collect())
            .collect();
        let dist = WeightedIndex::new(&weights).map_err(|e| Error::Config(format!("draw weights: {e}")))?;
        Ok(Self { by_subject, dist })
    }

    fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        let s = &self.by_subject[self.dist.sample(rng)];
        s[rng.random_range(0..s.len())]
    }
}

/// Everything carried across epochs, persisted in `last.ckpt`.
struct RunState {
    state: TrainState,
    rng: ChaCha8Rng,
    history: Vec<EpochRecord>,
}

impl RunState {
    fn save(&self, header: &ModelHeader, cfg: &TrainConfig, path: &Path) -> Result<()> {
        let mut ck = Checkpoint::new(header.clone());
        ck.put_params("params", &self.state.params);
        ck.put_params("ema", &self.state.ema.shadow);
        ck.put_params("adam_m", &self.state.adam.m);
        ck.put_params("adam_v", &self.state.adam.v);
        ck.insert("adam_step", Array::U64(vec![self.state.adam.step]));
        let seed = self.rng.get_seed();
        let mut words: Vec<u64> = seed.chunks_exact(8).map(|c| u64::from_le_bytes(c.try_into().unwrap())).collect();
        let pos = self.rng.get_word_pos();
        words.extend([self.rng.get_stream(), pos as u64, (pos >> 64) as u64]);
        ck.insert("rng", Array::U64(words));
        ck.insert("epoch", Array::U64(vec![self.history.len() as u64]));
        ck.insert("train_config", Array::U64(cfg.digest_words()));
        ck.insert("history/train_loss", Array::F64(self.history.iter().map(|r| r.train_loss).collect()));
        ck.insert("history/val_loss", Array::F64(self.history.iter().map(|r| r.val_loss).collect()));
        ck.insert("history/lr", Array::F64(self.history.iter().map(|r| r.lr).collect()));
        ck.save(path)
    }

    fn load(path: &Path, header: &ModelHeader, cfg: &TrainConfig, like: &Params<f32>) -> Result<Self> {
        let ck = Checkpoint::load(path)?;
        if ck.header.config_hash() != header.config_hash() {
            return Err(Error::Config(format!("{}: checkpoint was written for a different model config", path.display())));
        }
        if ck.u64s("train_config")? != cfg.digest_words().as_slice() {
            return Err(Error::Config(format!("{}: checkpoint was written with a different training config", path.display())));
        }
        let params = ck.params("params", like)?;
        let state = TrainState {
            adam: AdamState {
                m: ck.params("adam_m", like)?,
                v: ck.params("adam_v", like)?,
                step: *ck.u64s("adam_step")?.first().unwrap_or(&0),
            },
            ema: EmaState {
                shadow: ck.params("ema", like)?,
                decay: cfg.ema_decay,
            },
            params,
        };
        let words = ck.u64s("rng")?;
        if words.len() != 7 {
            return Err(Error::Integrity {
                record: path.display().to_string(),
                msg: "rng state has wrong length".into(),
            });
        }
        let mut seed = [0u8; 32];
        for (i, w) in words[..4].iter().enumerate() {
            seed[i * 8..(i + 1) * 8].copy_from_slice(&w.to_le_bytes());
        }
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(words[4]);
        rng.set_word_pos(words[5] as u128 | (words[6] as u128) << 64);
        let (tl, vl, lr) = (ck.f64s("history/train_loss")?, ck.f64s("history/val_loss")?, ck.f64s("history/lr")?);
        let history = (0..vl.len())
            .map(|i| EpochRecord {
                epoch: i,
                train_loss: tl[i],
                val_loss: vl[i],
                lr: lr[i],
                ema_applied: true,
            })
            .collect();
        Ok(Self { state, rng, history })
    }
}

/// Writes the EMA and live weights of a finished model.
pub fn save_model(header: &ModelHeader, params: &Params<f32>, ema: &Params<f32>, epoch: usize, path: &Path) -> Result<()> {
    let mut ck = Checkpoint::new(header.clone());
    ck.put_params("params", params);
    ck.put_params("ema", ema);
    ck.insert("epoch", Array::U64(vec![epoch as u64]));
    ck.save(path)
}

/// Loads the EMA weights of a model checkpoint (the live weights when no
/// EMA is stored), together with its architecture.
pub fn load_model(path: &Path) -> Result<(ModelHeader, JointDenoiser, Params<f32>)> {
    let ck = Checkpoint::load(path)?;
    let (net, like) = JointDenoiser::layout(&ck.header.unet, ck.header.timesteps)?;
    let prefix = if ck.has_params("ema") { "ema" } else { "params" };
    let p = ck.params(prefix, &like)?;
    Ok((ck.header, net, p))
}

/// Full training run writing the metrics log and checkpoints to `out_dir`.
///
/// With `resume`, continues from `out_dir/last.ckpt` when present; the
/// resumed run's log is identical to an uninterrupted one.
pub fn train(
    header: &ModelHeader,
    cfg: &TrainConfig,
    sched: &NoiseSchedule,
    train_set: &[SliceRecord],
    val_set: &[SliceRecord],
    out_dir: &Path,
    resume: bool,
) -> Result<TrainOutcome> {
    train_until(header, cfg, sched, train_set, val_set, out_dir, resume, None)
}

/// [`train`], but returns after `stop_after` epochs as if interrupted.
#[allow(clippy::too_many_arguments)]
fn train_until(
    header: &ModelHeader,
    cfg: &TrainConfig,
    sched: &NoiseSchedule,
    train_set: &[SliceRecord],
    val_set: &[SliceRecord],
    out_dir: &Path,
    resume: bool,
    stop_after: Option<usize>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if header.target != cfg.target || header.loss_p != cfg.loss.p {
        return Err(Error::Config("model header and training config disagree on target or loss".into()));
    }
    if header.timesteps != sched.timesteps() {
        return Err(Error::Config("model header and schedule disagree on T".into()));
    }
    if train_set.is_empty() || val_set.is_empty() {
        return Err(Error::Config("training and validation sets must be non-empty".into()));
    }
    check_disjoint(train_set, val_set)?;
    let n_z = header.unet.z_bins;
    let size = header.unet.image_size;
    for r in train_set.iter().chain(val_set) {
        if r.height != size || r.width != size {
            return Err(Error::Shape(format!("{}: {}x{} slice for a {size}x{size} model", r.key(), r.height, r.width)));
        }
        r.token(n_z)?;
    }
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let last_path = out_dir.join(LAST_CHECKPOINT);
    let best_path = out_dir.join(BEST_CHECKPOINT);
    let log_path = out_dir.join(METRICS_LOG);

    let mut init_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (net, params) = JointDenoiser::build::<f32, _>(&header.unet, header.timesteps, &mut init_rng)?;
    let sampler = Sampler::new(train_set, cfg.oversample)?;
    let mut run = if resume && last_path.exists() {
        log::info!("resuming from {}", last_path.display());
        RunState::load(&last_path, header, cfg, &params)?
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(0);
        RunState {
            state: TrainState::new(params, cfg.ema_decay),
            rng,
            history: Vec::new(),
        }
    };

    let steps_per_epoch = train_set.len().div_ceil(cfg.batch_size);
    let total_steps = steps_per_epoch * cfg.max_epochs;
    let vals = |h: &[EpochRecord]| h.iter().map(|r| r.val_loss).collect::<Vec<_>>();
    let mut stopped_early = matches!(early_stop_check(&vals(&run.history), cfg.patience), StopDecision::Stop { .. });
    while !stopped_early && run.history.len() < cfg.max_epochs {
        let epoch = run.history.len();
        let mut loss_sum = 0.0;
        let mut lr = cfg.lr;
        for s in 0..steps_per_epoch {
            let step = epoch * steps_per_epoch + s;
            lr = cosine_lr(step, total_steps, cfg.lr, cfg.lr_floor);
            let picks: Vec<usize> = (0..cfg.batch_size).map(|_| sampler.draw(&mut run.rng)).collect();
            let items = picks
                .iter()
                .map(|&i| Ok((&train_set[i], train_set[i].token(n_z)?)))
                .collect::<Result<Vec<_>>>()?;
            loss_sum += train_step(&net, &mut run.state, &items, sched, cfg, lr, step as u64, &mut run.rng)?;
        }
        let val_loss = validation_loss(&net, &run.state.ema.shadow, val_set, sched, cfg, epoch)?;
        let rec = EpochRecord {
            epoch,
            train_loss: loss_sum / steps_per_epoch as f64,
            val_loss,
            lr,
            ema_applied: true,
        };
        log::info!("epoch {epoch}: train {:.5} val {:.5} lr {:.3e}", rec.train_loss, rec.val_loss, rec.lr);
        run.history.push(rec);
        let history = vals(&run.history);
        if argmin(&history) == Some(epoch) {
            save_model(header, &run.state.params, &run.state.ema.shadow, epoch, &best_path)?;
        }
        write_atomic(&log_path, format_metrics_log(&run.history).as_bytes())?;
        run.save(header, cfg, &last_path)?;
        if stop_after.is_some_and(|n| run.history.len() >= n) {
            break;
        }
        stopped_early = matches!(early_stop_check(&history, cfg.patience), StopDecision::Stop { .. });
    }
    write_atomic(&log_path, format_metrics_log(&run.history).as_bytes())?;
    let history = vals(&run.history);
    let best_epoch = argmin(&history).expect("at least one epoch");
    Ok(TrainOutcome {
        epochs_run: run.history.len(),
        best_epoch,
        best_val_loss: history[best_epoch],
        stopped_early,
        history: run.history,
        best_checkpoint: best_path,
        metrics_log: log_path,
    })
}
