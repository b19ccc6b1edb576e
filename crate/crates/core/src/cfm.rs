//! Conditional flow matching on optimal-transport paths, the conditional
//! vector-field network and the Euler sampler.

use emovc_numerics::nn::{sinusoidal_row, Activation, Linear, Mlp2, MultiHeadAttention, LN_EPS};
use emovc_numerics::rng::normal_vec;
use emovc_numerics::{Graph, ParamStore, SeedStream, Segments, Tensor, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};

pub const SIGMA_MIN: f64 = 1e-4;

/// Scale applied to `t` before the sinusoidal time encoding.
const TIME_SCALE: f64 = 1000.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CfmConfig {
    pub mel_dim: usize,
    /// Width of the fused condition `f`.
    pub cond_dim: usize,
    pub emb_dim: usize,
    pub channels: usize,
    pub blocks: usize,
    pub heads: usize,
    pub time_dim: usize,
    pub sigma_min: f64,
    /// Probability of dropping the emotion condition per item in training.
    pub p_uncond: f64,
}

impl Default for CfmConfig {
    fn default() -> Self {
        Self {
            mel_dim: 16,
            cond_dim: 32,
            emb_dim: 32,
            channels: 32,
            blocks: 6,
            heads: 4,
            time_dim: 32,
            sigma_min: SIGMA_MIN,
            p_uncond: 0.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerConfig {
    pub steps: usize,
    pub guidance_scale: f64,
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            steps: 25,
            guidance_scale: 1.0,
            seed: 0,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(CoreError::Config("sampler needs at least one step".into()));
        }
        if !(self.guidance_scale >= 0.0) {
            return Err(CoreError::Config("guidance scale must be non-negative".into()));
        }
        Ok(())
    }
}

fn same_shape(a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(CoreError::Data(format!("shapes {:?} and {:?} differ", a.shape(), b.shape())));
    }
    Ok(())
}

/// `ψ_t = t·x1 + (1 − (1−σ)t)·x0`
pub fn ot_path(x0: &Tensor, x1: &Tensor, t: f64, sigma_min: f64) -> Result<Tensor> {
    same_shape(x0, x1)?;
    if !(0.0..=1.0).contains(&t) {
        return Err(CoreError::Input(format!("path time {t} outside [0, 1]")));
    }
    let a = 1.0 - (1.0 - sigma_min) * t;
    let data = x0.data().iter().zip(x1.data()).map(|(&z0, &z1)| t * z1 + a * z0).collect();
    Ok(Tensor::new(x0.shape().to_vec(), data)?)
}

/// `x1 − (1−σ)·x0`, the time derivative of [`ot_path`].
pub fn cfm_target(x0: &Tensor, x1: &Tensor, sigma_min: f64) -> Result<Tensor> {
    same_shape(x0, x1)?;
    let data = x0.data().iter().zip(x1.data()).map(|(&z0, &z1)| z1 - (1.0 - sigma_min) * z0).collect();
    Ok(Tensor::new(x0.shape().to_vec(), data)?)
}

/// One draw of the path and its regression target.
#[derive(Debug, Clone, PartialEq)]
pub struct OtPathSample {
    pub x0: Tensor,
    pub x1: Tensor,
    pub t: f64,
    pub psi_t: Tensor,
    pub target: Tensor,
}

impl OtPathSample {
    pub fn new(x0: Tensor, x1: Tensor, t: f64, sigma_min: f64) -> Result<Self> {
        let psi_t = ot_path(&x0, &x1, t, sigma_min)?;
        let target = cfm_target(&x0, &x1, sigma_min)?;
        Ok(Self { x0, x1, t, psi_t, target })
    }
}

#[derive(Debug, Clone, Copy)]
pub struct Film {
    pub scale: Linear,
    pub shift: Linear,
}

impl Film {
    fn new(store: &mut ParamStore, name: &str, cond: usize, width: usize, rng: &mut impl Rng) -> Self {
        let std = 0.5 / (cond as f64).sqrt();
        Self {
            scale: Linear::with_init(store, &format!("{name}.scale"), cond, width, std, 1.0, rng),
            shift: Linear::with_init(store, &format!("{name}.shift"), cond, width, std, 0.0, rng),
        }
    }

    /// `scale(c)⊙x + shift(c)` with one condition row per sequence.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var, cond: Var, segs: &Segments) -> Result<Var> {
        let owners = segs.owners();
        let s = self.scale.forward(g, store, cond)?;
        let s = g.gather_rows(s, &owners)?;
        let b = self.shift.forward(g, store, cond)?;
        let b = g.gather_rows(b, &owners)?;
        let y = g.mul(s, x)?;
        Ok(g.add(y, b)?)
    }
}

/// Kernel-3 convolution over frames as a linear map of
/// `[x_{t−1}, x_t, x_{t+1}]`, zero-padded at sequence edges.
fn conv3(g: &mut Graph, store: &ParamStore, lin: &Linear, x: Var, segs: &Segments) -> Result<Var> {
    let prev = g.shift_rows(x, segs, 1)?;
    let next = g.shift_rows(x, segs, -1)?;
    let cat = g.concat_cols(prev, x)?;
    let cat = g.concat_cols(cat, next)?;
    Ok(lin.forward(g, store, cat)?)
}

#[derive(Debug, Clone, Copy)]
pub struct CfmBlock {
    pub time_proj: Linear,
    pub conv1: Linear,
    pub conv2: Linear,
    pub attn: MultiHeadAttention,
    pub film: Film,
}

impl CfmBlock {
    /// Time injection, residual convolution, pre-norm attention, FiLM.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var, temb: Var, cond: Var, segs: &Segments) -> Result<Var> {
        let owners = segs.owners();
        let tb = self.time_proj.forward(g, store, temb)?;
        let tb = g.gather_rows(tb, &owners)?;
        let x = g.add(x, tb)?;

        let r = conv3(g, store, &self.conv1, x, segs)?;
        let r = g.silu(r);
        let r = conv3(g, store, &self.conv2, r, segs)?;
        let x = g.add(x, r)?;

        let n = g.layer_norm_rows(x, LN_EPS);
        let a = self.attn.forward(g, store, n, segs)?;
        let x = g.add(x, a)?;

        self.film.forward(g, store, x, cond, segs)
    }
}

#[derive(Debug, Clone)]
pub struct CfmDecoder {
    pub config: CfmConfig,
    pub in_proj: Linear,
    pub time_mlp: Mlp2,
    pub blocks: Vec<CfmBlock>,
    pub out_proj: Linear,
}

impl CfmDecoder {
    pub fn new(store: &mut ParamStore, config: CfmConfig, rng: &mut impl Rng) -> Result<Self> {
        let c = config;
        if c.blocks == 0 {
            return Err(CoreError::Config("decoder needs at least one block".into()));
        }
        if !(c.sigma_min > 0.0 && c.sigma_min < 1.0) {
            return Err(CoreError::Config(format!("sigma_min {} outside (0, 1)", c.sigma_min)));
        }
        if !(0.0..1.0).contains(&c.p_uncond) {
            return Err(CoreError::Config("p_uncond must lie in [0, 1)".into()));
        }
        if !c.time_dim.is_multiple_of(2) {
            return Err(CoreError::Config("time embedding width must be even".into()));
        }
        let w = c.channels;
        let in_proj = Linear::new(store, "cfm.in", c.mel_dim + c.cond_dim, w, rng);
        let time_mlp = Mlp2::new(store, "cfm.time", (c.time_dim, w, w), Activation::Silu, rng);
        let mut blocks = Vec::with_capacity(c.blocks);
        for k in 0..c.blocks {
            let name = format!("cfm.block{k}");
            let block = CfmBlock {
                time_proj: Linear::new(store, &format!("{name}.time"), w, w, rng),
                conv1: Linear::new(store, &format!("{name}.conv1"), 3 * w, w, rng),
                conv2: Linear::new(store, &format!("{name}.conv2"), 3 * w, w, rng),
                attn: MultiHeadAttention::new(store, &format!("{name}.attn"), w, c.heads, rng)?,
                film: Film::new(store, &format!("{name}.film"), c.emb_dim, w, rng),
            };
            // residual branches start closed
            block.conv2.zero_weight(store);
            block.attn.out.zero_weight(store);
            blocks.push(block);
        }
        let out_proj = Linear::new(store, "cfm.out", w, c.mel_dim, rng);
        Ok(Self {
            config,
            in_proj,
            time_mlp,
            blocks,
            out_proj,
        })
    }

    /// Sinusoidal encoding of `1000·t` per item through the time MLP.
    pub fn time_embedding(&self, g: &mut Graph, store: &ParamStore, ts: &[f64]) -> Result<Var> {
        let mut data = Vec::with_capacity(ts.len() * self.config.time_dim);
        for &t in ts {
            if !(0.0..=1.0).contains(&t) {
                return Err(CoreError::Input(format!("time {t} outside [0, 1]")));
            }
            data.extend(sinusoidal_row(TIME_SCALE * t, self.config.time_dim)?);
        }
        let x = g.constant_from(ts.len(), self.config.time_dim, data);
        Ok(self.time_mlp.forward(g, store, x)?)
    }

    /// `v_t(x_t | f, h)` for packed frames; `ts` and `cond` have one entry
    /// per sequence.
    pub fn vector_field(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        x_t: Var,
        ts: &[f64],
        f: Var,
        cond: Var,
        segs: &Segments,
    ) -> Result<Var> {
        let c = &self.config;
        let rows = segs.total_rows();
        if g.shape(x_t) != (rows, c.mel_dim) || g.shape(f) != (rows, c.cond_dim) {
            return Err(CoreError::Data(format!(
                "x_t {:?} and f {:?} must be {rows}×{} and {rows}×{}",
                g.shape(x_t),
                g.shape(f),
                c.mel_dim,
                c.cond_dim
            )));
        }
        if ts.len() != segs.count() || g.shape(cond) != (segs.count(), c.emb_dim) {
            return Err(CoreError::Data("time or condition count differs from sequence count".into()));
        }
        let temb = self.time_embedding(g, store, ts)?;
        let inp = g.concat_cols(x_t, f)?;
        let mut x = self.in_proj.forward(g, store, inp)?;
        for block in &self.blocks {
            x = block.forward(g, store, x, temb, cond, segs)?;
        }
        Ok(self.out_proj.forward(g, store, x)?)
    }

    /// Mean squared error between the field at a random path point and the
    /// path's regression target. `t` and `x0` are drawn from `seed`.
    pub fn cfm_loss(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        x1: &Tensor,
        f: Var,
        cond: Var,
        segs: &Segments,
        seed: SeedStream,
    ) -> Result<Var> {
        let c = &self.config;
        if x1.dims2() != (segs.total_rows(), c.mel_dim) {
            return Err(CoreError::Data(format!("target {:?} does not match packed frames", x1.shape())));
        }
        let mut rng = seed.named("cfm.loss").rng();
        let ts: Vec<f64> = (0..segs.count()).map(|_| rng.random::<f64>()).collect();
        let x0 = Tensor::matrix(x1.rows(), x1.cols(), normal_vec(&mut rng, x1.len()))?;
        let mut psi = Tensor::zeros(&[x1.rows(), x1.cols()]);
        let target = cfm_target(&x0, x1, c.sigma_min)?;
        for (item, range) in segs.iter().enumerate() {
            let t = ts[item];
            let a = 1.0 - (1.0 - c.sigma_min) * t;
            let lo = range.start * c.mel_dim;
            let hi = range.end * c.mel_dim;
            for i in lo..hi {
                psi.data_mut()[i] = t * x1.data()[i] + a * x0.data()[i];
            }
        }
        let cond = if c.p_uncond > 0.0 {
            let keep: Vec<f64> = (0..segs.count())
                .flat_map(|_| {
                    let k = if rng.random::<f64>() < c.p_uncond { 0.0 } else { 1.0 };
                    std::iter::repeat_n(k, c.emb_dim)
                })
                .collect();
            let mask = g.constant_from(segs.count(), c.emb_dim, keep);
            g.mul(cond, mask)?
        } else {
            cond
        };
        let x_t = g.constant(&psi);
        let v = self.vector_field(g, store, x_t, &ts, f, cond, segs)?;
        let tgt = g.constant(&target);
        let d = g.sub(v, tgt)?;
        let sq = g.mul(d, d)?;
        Ok(g.mean(sq))
    }

    /// Integrate the learned field from seeded noise. `f` is `ΣT × cond_dim`
    /// and `cond` is `B × emb_dim`. Each sequence draws its starting noise
    /// from its own key, so samples do not depend on batch composition.
    pub fn euler_sample(
        &self,
        store: &ParamStore,
        f: &Tensor,
        cond: &Tensor,
        segs: &Segments,
        keys: &[u64],
        config: &SamplerConfig,
    ) -> Result<Tensor> {
        config.validate()?;
        if keys.len() != segs.count() {
            return Err(CoreError::Data(format!("{} noise keys for {} sequences", keys.len(), segs.count())));
        }
        let mel = self.config.mel_dim;
        let root = SeedStream::new(config.seed).named("euler.x0");
        let mut noise = Vec::with_capacity(segs.total_rows() * mel);
        for (i, &key) in keys.iter().enumerate() {
            noise.extend(normal_vec(&mut root.child(key).rng(), segs.len_of(i) * mel));
        }
        let x0 = Tensor::matrix(segs.total_rows(), mel, noise)?;
        let guided = self.config.p_uncond > 0.0;
        let null = Tensor::zeros(&[cond.rows(), cond.cols()]);
        euler_integrate(x0, config.steps, |x, t| {
            let ts = vec![t; segs.count()];
            let v_cond = self.eval_field(store, x, &ts, f, cond, segs)?;
            if !guided {
                return Ok(v_cond);
            }
            let v_unc = self.eval_field(store, x, &ts, f, &null, segs)?;
            let s = config.guidance_scale;
            Ok(Tensor::matrix(
                v_cond.rows(),
                v_cond.cols(),
                v_unc.data().iter().zip(v_cond.data()).map(|(u, c)| u + s * (c - u)).collect(),
            )?)
        })
    }

    fn eval_field(&self, store: &ParamStore, x: &Tensor, ts: &[f64], f: &Tensor, cond: &Tensor, segs: &Segments) -> Result<Tensor> {
        let mut g = Graph::new();
        let xv = g.constant(x);
        let fv = g.constant(f);
        let cv = g.constant(cond);
        let v = self.vector_field(&mut g, store, xv, ts, fv, cv, segs)?;
        Ok(g.to_tensor(v))
    }
}

/// Explicit Euler: `x ← x + v(x, k/steps)/steps` for `k = 0..steps`.
pub fn euler_integrate<F>(x0: Tensor, steps: usize, mut field: F) -> Result<Tensor>
where
    F: FnMut(&Tensor, f64) -> Result<Tensor>,
{
    if steps == 0 {
        return Err(CoreError::Config("sampler needs at least one step".into()));
    }
    let dt = 1.0 / steps as f64;
    let mut x = x0;
    for k in 0..steps {
        let v = field(&x, k as f64 * dt)?;
        same_shape(&x, &v)?;
        for (xi, vi) in x.data_mut().iter_mut().zip(v.data()) {
            *xi += dt * vi;
        }
    }
    Ok(x)
}

/// Closed-form field of the path towards a single datum `z`:
/// `(z − (1−σ)x) / (1 − (1−σ)t)`.
pub fn single_datum_field(z: &Tensor, x: &Tensor, t: f64, sigma_min: f64) -> Result<Tensor> {
    same_shape(z, x)?;
    let denom = 1.0 - (1.0 - sigma_min) * t;
    let data = z.data().iter().zip(x.data()).map(|(&zi, &xi)| (zi - (1.0 - sigma_min) * xi) / denom).collect();
    Ok(Tensor::new(z.shape().to_vec(), data)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ot_path_examples() {
        let x0 = Tensor::from_fn(2, 3, |i, j| (i * 3 + j) as f64 - 2.0);
        let x1 = Tensor::from_fn(2, 3, |i, j| 0.5 * (i + j) as f64);
        assert_eq!(ot_path(&x0, &x1, 0.0, SIGMA_MIN).unwrap(), x0);
        let end = ot_path(&x0, &x1, 1.0, SIGMA_MIN).unwrap();
        for i in 0..6 {
            assert!((end.data()[i] - (x1.data()[i] + SIGMA_MIN * x0.data()[i])).abs() < 1e-15);
        }
        assert!(ot_path(&x0, &x1, 1.5, SIGMA_MIN).is_err());
    }

    #[test]
    fn target_examples() {
        let x1 = Tensor::from_fn(1, 3, |_, j| j as f64);
        let zero = Tensor::zeros(&[1, 3]);
        assert_eq!(cfm_target(&zero, &x1, SIGMA_MIN).unwrap(), x1);
        assert_eq!(cfm_target(&x1, &x1, 0.0).unwrap(), zero);
    }

    #[test]
    fn single_step_is_one_euler_update() {
        let x0 = Tensor::from_fn(1, 2, |_, j| j as f64 + 1.0);
        let out = euler_integrate(x0.clone(), 1, |x, t| Ok(x.map(|v| v * (t + 2.0)))).unwrap();
        assert_eq!(out.data(), &[1.0 + 2.0, 2.0 + 4.0]);
    }

    #[test]
    fn sampler_rejects_zero_steps() {
        let cfg = SamplerConfig { steps: 0, ..Default::default() };
        assert!(cfg.validate().is_err());
    }
}
