//! Condition tokens and the embedding pathway `e = t_emb + c_emb`.
//!
//! `c_emb = Linear([E_p[pathology] ‖ SinPE(z_bin)])` and
//! `t_emb = MLP(SinPE(t))`, where the MLP is two dense layers with a SiLU
//! between them. SinPE puts sines in the first half and cosines in the
//! second half with frequencies `1/10000^(2i/d_pe)`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{silu, silu_backward, Init, Linear, ParamId, Params};
use crate::real::Real;

pub const DEFAULT_Z_BINS: usize = 30;

/// Axial position bin plus pathology flag.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ConditionToken {
    pub z_bin: usize,
    pub pathology: u8,
    pub n_z: usize,
}

/// Flat token `z_bin + pathology·n_z`.
pub fn make_token(z_bin: usize, pathology: u8, n_z: usize) -> Result<usize> {
    Ok(ConditionToken::new(z_bin, pathology, n_z)?.token())
}

impl ConditionToken {
    pub fn new(z_bin: usize, pathology: u8, n_z: usize) -> Result<Self> {
        if n_z == 0 {
            return Err(Error::Config("z bin count must be positive".into()));
        }
        if z_bin >= n_z {
            return Err(Error::range("z_bin", z_bin, format!("[0, {n_z})")));
        }
        if pathology > 1 {
            return Err(Error::range("pathology", pathology, "{0, 1}"));
        }
        Ok(Self { z_bin, pathology, n_z })
    }

    pub fn token(&self) -> usize {
        self.z_bin + self.pathology as usize * self.n_z
    }

    /// Inverse of [`token`](Self::token).
    pub fn decode(token: usize, n_z: usize) -> Result<Self> {
        if n_z == 0 || token >= 2 * n_z {
            return Err(Error::range("token", token, format!("[0, {})", 2 * n_z)));
        }
        Self::new(token % n_z, (token / n_z) as u8, n_z)
    }

    /// Every valid token for `n_z` bins, in token order.
    pub fn all(n_z: usize) -> Vec<Self> {
        (0..2 * n_z).map(|t| Self::decode(t, n_z).expect("in range")).collect()
    }
}

/// Sinusoidal encoding of a scalar position.
pub fn sinpe(position: f64, d_pe: usize) -> Result<Vec<f64>> {
    if d_pe == 0 || !d_pe.is_multiple_of(2) {
        return Err(Error::Config(format!("positional encoding width must be even and positive, got {d_pe}")));
    }
    let half = d_pe / 2;
    let mut out = vec![0.0; d_pe];
    for i in 0..half {
        let omega = 1.0 / 10000f64.powf(2.0 * i as f64 / d_pe as f64);
        out[i] = (position * omega).sin();
        out[half + i] = (position * omega).cos();
    }
    Ok(out)
}

/// Elementwise sum of the time and condition embeddings.
pub fn combine_embeddings<T: Real>(t_emb: &[T], c_emb: &[T]) -> Result<Vec<T>> {
    if t_emb.len() != c_emb.len() {
        return Err(Error::Shape(format!(
            "embedding widths differ: {} vs {}",
            t_emb.len(),
            c_emb.len()
        )));
    }
    Ok(t_emb.iter().zip(c_emb).map(|(&a, &b)| a + b).collect())
}

/// Learnable part of the embedding pathway: the pathology table, the
/// condition projection and the two-layer time MLP.
#[derive(Debug, Clone)]
pub struct Embedder {
    pub width: usize,
    pub pe_width: usize,
    pub n_z: usize,
    pub timesteps: usize,
    pub pathology_table: ParamId,
    pub cond_proj: Linear,
    pub time_fc1: Linear,
    pub time_fc2: Linear,
}

#[derive(Debug, Clone)]
pub struct EmbeddingCache<T> {
    rows: usize,
    pathology: Vec<u8>,
    cond_in: Vec<T>,
    time_pe: Vec<T>,
    time_hidden: Vec<T>,
    time_act: Vec<T>,
}

impl Embedder {
    pub fn new<T: Real, R: Rng + ?Sized>(
        p: &mut Params<T>,
        width: usize,
        pe_width: usize,
        n_z: usize,
        timesteps: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if pe_width == 0 || !pe_width.is_multiple_of(2) {
            return Err(Error::Config(format!("pe_width must be even and positive, got {pe_width}")));
        }
        let init = Init::Normal(0.02);
        let pathology_table = p.add("embed.pathology", &[2, width], init, rng);
        let cond_proj = Linear::new(p, "embed.cond", width + pe_width, width, init, rng);
        let time_fc1 = Linear::new(p, "embed.time.fc1", pe_width, width, init, rng);
        let time_fc2 = Linear::new(p, "embed.time.fc2", width, width, init, rng);
        Ok(Self {
            width,
            pe_width,
            n_z,
            timesteps,
            pathology_table,
            cond_proj,
            time_fc1,
            time_fc2,
        })
    }

    pub fn param_count(width: usize, pe_width: usize) -> usize {
        2 * width
            + Linear::param_count(width + pe_width, width)
            + Linear::param_count(pe_width, width)
            + Linear::param_count(width, width)
    }

    fn check_token(&self, tok: &ConditionToken) -> Result<()> {
        if tok.n_z != self.n_z {
            return Err(Error::Shape(format!(
                "token built for {} z bins, model expects {}",
                tok.n_z, self.n_z
            )));
        }
        ConditionToken::new(tok.z_bin, tok.pathology, tok.n_z).map(|_| ())
    }

    fn check_t(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.timesteps {
            return Err(Error::range("timestep", t, format!("[1, {}]", self.timesteps)));
        }
        Ok(())
    }

    fn cond_input<T: Real>(&self, p: &Params<T>, tokens: &[ConditionToken]) -> Result<Vec<T>> {
        let table = p.get(self.pathology_table);
        let mut rows = Vec::with_capacity(tokens.len() * (self.width + self.pe_width));
        for tok in tokens {
            self.check_token(tok)?;
            let off = tok.pathology as usize * self.width;
            rows.extend_from_slice(&table[off..off + self.width]);
            rows.extend(sinpe(tok.z_bin as f64, self.pe_width)?.into_iter().map(T::from_f64));
        }
        Ok(rows)
    }

    fn time_input<T: Real>(&self, ts: &[usize]) -> Result<Vec<T>> {
        let mut rows = Vec::with_capacity(ts.len() * self.pe_width);
        for &t in ts {
            self.check_t(t)?;
            rows.extend(sinpe(t as f64, self.pe_width)?.into_iter().map(T::from_f64));
        }
        Ok(rows)
    }

    /// Condition embedding for each token, row-major `[n, width]`.
    pub fn cond_embedding<T: Real>(&self, p: &Params<T>, tokens: &[ConditionToken]) -> Result<Vec<T>> {
        let input = self.cond_input(p, tokens)?;
        Ok(self.cond_proj.forward(p, &input, tokens.len()))
    }

    /// Timestep embedding for each `t`, row-major `[n, width]`.
    pub fn time_embedding<T: Real>(&self, p: &Params<T>, ts: &[usize]) -> Result<Vec<T>> {
        let pe = self.time_input(ts)?;
        let hidden = self.time_fc1.forward(p, &pe, ts.len());
        Ok(self.time_fc2.forward(p, &silu(&hidden), ts.len()))
    }

    /// Full embedding `e` for a batch, with the cache for [`backward`](Self::backward).
    pub fn forward<T: Real>(
        &self,
        p: &Params<T>,
        ts: &[usize],
        tokens: &[ConditionToken],
    ) -> Result<(Vec<T>, EmbeddingCache<T>)> {
        if ts.len() != tokens.len() {
            return Err(Error::Shape(format!("{} timesteps for {} tokens", ts.len(), tokens.len())));
        }
        let rows = ts.len();
        let cond_in = self.cond_input(p, tokens)?;
        let c_emb = self.cond_proj.forward(p, &cond_in, rows);
        let time_pe = self.time_input(ts)?;
        let time_hidden = self.time_fc1.forward(p, &time_pe, rows);
        let time_act = silu(&time_hidden);
        let t_emb = self.time_fc2.forward(p, &time_act, rows);
        let e = combine_embeddings(&t_emb, &c_emb)?;
        Ok((
            e,
            EmbeddingCache {
                rows,
                pathology: tokens.iter().map(|t| t.pathology).collect(),
                cond_in,
                time_pe,
                time_hidden,
                time_act,
            },
        ))
    }

    /// Accumulates gradients of every embedding parameter given `de`.
    pub fn backward<T: Real>(&self, p: &Params<T>, cache: &EmbeddingCache<T>, de: &[T], g: &mut Params<T>) {
        let rows = cache.rows;
        let dcond = self.cond_proj.backward(p, &cache.cond_in, de, rows, g);
        let table = g.get_mut(self.pathology_table);
        let stride = self.width + self.pe_width;
        for (r, &path) in cache.pathology.iter().enumerate() {
            let off = path as usize * self.width;
            for k in 0..self.width {
                table[off + k] += dcond[r * stride + k];
            }
        }
        let dact = self.time_fc2.backward(p, &cache.time_act, de, rows, g);
        let dhidden = silu_backward(&cache.time_hidden, &dact);
        self.time_fc1.backward(p, &cache.time_pe, &dhidden, rows, g);
    }
}
