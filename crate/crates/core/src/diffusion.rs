//! DDPM forward process, ε-prediction loss and DDIM sampling with guidance.

use std::io::Write;
use std::path::Path;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use ditlab_numerics::{Graph, Scalar, Tensor, Var};

use crate::text::TextBatch;
use crate::{Error, Result};

/// Probability of replacing a caption with the null caption during training.
pub const P_UNCOND: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    /// β interpolated linearly in √β.
    ScaledLinear,
}

/// β and ᾱ tables indexed by timestep `t` in `1..=T`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiffusionSchedule {
    pub kind: ScheduleKind,
    pub beta_start: f64,
    pub beta_end: f64,
    /// SNR divisor applied on top of the base schedule.
    pub shift: f64,
    betas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

impl Default for DiffusionSchedule {
    fn default() -> Self {
        Self::scaled_linear(1000, 8.5e-4, 1.2e-2)
    }
}

impl DiffusionSchedule {
    pub fn scaled_linear(t_train: usize, beta_start: f64, beta_end: f64) -> Self {
        let (a, b) = (beta_start.sqrt(), beta_end.sqrt());
        let betas: Vec<f64> = (0..t_train)
            .map(|i| {
                let f = if t_train > 1 { i as f64 / (t_train - 1) as f64 } else { 0.0 };
                let s = a + (b - a) * f;
                s * s
            })
            .collect();
        let mut acc = 1.0;
        let alpha_bars = betas
            .iter()
            .map(|b| {
                acc *= 1.0 - b;
                acc
            })
            .collect();
        Self {
            kind: ScheduleKind::ScaledLinear,
            beta_start,
            beta_end,
            shift: 1.0,
            betas,
            alpha_bars,
        }
    }

    pub fn t_train(&self) -> usize {
        self.betas.len()
    }

    fn check(&self, t: usize) -> Result<usize> {
        if t == 0 || t > self.t_train() {
            return Err(Error::Input(format!("timestep {t} outside [1, {}]", self.t_train())));
        }
        Ok(t - 1)
    }

    pub fn beta(&self, t: usize) -> Result<f64> {
        Ok(self.betas[self.check(t)?])
    }

    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        Ok(self.alpha_bars[self.check(t)?])
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    /// `ᾱ_t / (1 - ᾱ_t)`.
    pub fn snr(&self, t: usize) -> Result<f64> {
        let a = self.alpha_bar(t)?;
        Ok(a / (1.0 - a))
    }
}

/// Resolutions with a defined schedule shift.
pub const SUPPORTED_RESOLUTIONS: [usize; 3] = [256, 512, 1024];

/// Divides the SNR at every timestep by `(resolution / 256)^2`.
///
/// This is a stand-in rule for high-resolution training; 256 px returns `base`.
pub fn shifted_schedule(base: &DiffusionSchedule, resolution: usize) -> Result<DiffusionSchedule> {
    if !SUPPORTED_RESOLUTIONS.contains(&resolution) {
        return Err(Error::Resolution {
            resolution,
            reason: format!("schedule shift defined for {SUPPORTED_RESOLUTIONS:?}"),
        });
    }
    if resolution == 256 {
        return Ok(base.clone());
    }
    let s = (resolution as f64 / 256.0).powi(2);
    let alpha_bars: Vec<f64> = base.alpha_bars.iter().map(|&a| a / (a + s * (1.0 - a))).collect();
    let mut prev = 1.0;
    let betas = alpha_bars
        .iter()
        .map(|&a| {
            let b = 1.0 - a / prev;
            prev = a;
            b
        })
        .collect();
    Ok(DiffusionSchedule {
        shift: base.shift * s,
        betas,
        alpha_bars,
        ..base.clone()
    })
}

fn check_batch<T: Scalar>(x: &Tensor<T>, t: &[usize]) -> Result<usize> {
    let b = *x.shape().first().ok_or_else(|| Error::Input("scalar latent".into()))?;
    if t.len() != b {
        return Err(Error::Input(format!("{} timesteps for batch {b}", t.len())));
    }
    Ok(x.numel() / b.max(1))
}

/// `x_t = √ᾱ_t x0 + √(1 - ᾱ_t) noise`, one timestep per batch row.
pub fn q_sample<T: Scalar>(
    x0: &Tensor<T>,
    t: &[usize],
    noise: &Tensor<T>,
    schedule: &DiffusionSchedule,
) -> Result<Tensor<T>> {
    if x0.shape() != noise.shape() {
        return Err(Error::Input(format!(
            "noise {:?} does not match x0 {:?}",
            noise.shape(),
            x0.shape()
        )));
    }
    let per = check_batch(x0, t)?;
    let mut out = x0.data().to_vec();
    for (b, &tb) in t.iter().enumerate() {
        let a = schedule.alpha_bar(tb)?;
        let (sa, sn) = (T::from_f64(a.sqrt()), T::from_f64((1.0 - a).sqrt()));
        for (o, &n) in out[b * per..(b + 1) * per]
            .iter_mut()
            .zip(&noise.data()[b * per..(b + 1) * per])
        {
            *o = sa * *o + sn * n;
        }
    }
    Ok(Tensor::new(x0.shape().to_vec(), out)?)
}

/// Anything that predicts ε for a noisy latent on a graph.
pub trait EpsPredictor<T: Scalar = f32> {
    fn predict_eps(
        &self,
        g: &mut Graph<T>,
        x_t: Var,
        timesteps: &[f64],
        text: &TextBatch,
        condition: Option<Var>,
    ) -> Result<Var>;
}

/// Loss and the draws behind it.
#[derive(Clone, Debug)]
pub struct LossDraw {
    pub loss: Var,
    pub timesteps: Vec<usize>,
    pub dropped: Vec<bool>,
}

/// Mean squared error between sampled ε and its prediction.
///
/// Draws `t ~ U{1..T}`, `ε ~ N(0, I)` and, per row, whether the caption is
/// replaced by the null caption (probability `p_uncond`).
#[allow(clippy::too_many_arguments)]
pub fn training_loss<T: Scalar, P: EpsPredictor<T> + ?Sized, R: Rng + ?Sized>(
    g: &mut Graph<T>,
    model: &P,
    x0: &Tensor<T>,
    text: &TextBatch,
    condition: Option<Var>,
    schedule: &DiffusionSchedule,
    p_uncond: f64,
    rng: &mut R,
) -> Result<LossDraw> {
    let b = x0.shape().first().copied().unwrap_or(0);
    if text.batch != b {
        return Err(Error::Input(format!("{} captions for batch {b}", text.batch)));
    }
    let timesteps: Vec<usize> = (0..b).map(|_| rng.random_range(1..=schedule.t_train())).collect();
    let noise = Tensor::<T>::randn(x0.shape().to_vec(), rng);
    let dropped: Vec<bool> = (0..b).map(|_| rng.random::<f64>() < p_uncond).collect();
    let x_t = q_sample(x0, &timesteps, &noise, schedule)?;
    let text = text.with_dropped(&dropped);
    let xv = g.constant(x_t);
    let tf: Vec<f64> = timesteps.iter().map(|&t| t as f64).collect();
    let eps = model.predict_eps(g, xv, &tf, &text, condition)?;
    let target = g.constant(noise);
    let loss = g.mse(eps, target)?;
    Ok(LossDraw {
        loss,
        timesteps,
        dropped,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SamplerConfig {
    pub ddim_steps: usize,
    pub cfg_scale: f64,
    pub seed: u64,
    pub eta: f64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            ddim_steps: 50,
            cfg_scale: 7.5,
            seed: 0,
            eta: 0.0,
        }
    }
}

impl SamplerConfig {
    pub fn check(&self, schedule: &DiffusionSchedule) -> Result<()> {
        if self.ddim_steps == 0 || self.ddim_steps > schedule.t_train() {
            return Err(Error::Input(format!(
                "ddim_steps {} outside [1, {}]",
                self.ddim_steps,
                schedule.t_train()
            )));
        }
        if !(self.cfg_scale >= 0.0) {
            return Err(Error::Input(format!("cfg_scale {} must be >= 0", self.cfg_scale)));
        }
        if !(self.eta >= 0.0) {
            return Err(Error::Input(format!("eta {} must be >= 0", self.eta)));
        }
        Ok(())
    }
}

/// Descending timesteps `T - floor(k T / steps)` for `k = 0..steps`.
pub fn ddim_timesteps(t_train: usize, steps: usize) -> Vec<usize> {
    (0..steps).map(|k| t_train - k * t_train / steps).collect()
}

/// One ε evaluation on a throwaway graph.
pub fn eval_eps<T: Scalar, P: EpsPredictor<T> + ?Sized>(
    model: &P,
    x: &Tensor<T>,
    timesteps: &[f64],
    text: &TextBatch,
    condition: Option<&Tensor<T>>,
) -> Result<Tensor<T>> {
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let cv = condition.map(|c| g.constant(c.clone()));
    let eps = model.predict_eps(&mut g, xv, timesteps, text, cv)?;
    Ok(g.value(eps).clone())
}

/// `ε_uncond + scale (ε_cond - ε_uncond)`. Scale 1 evaluates only the
/// conditional branch and scale 0 only the unconditional one.
pub fn guided_epsilon<T: Scalar, P: EpsPredictor<T> + ?Sized>(
    model: &P,
    x: &Tensor<T>,
    timesteps: &[f64],
    text: &TextBatch,
    condition: Option<&Tensor<T>>,
    scale: f64,
) -> Result<Tensor<T>> {
    if scale == 1.0 {
        return eval_eps(model, x, timesteps, text, condition);
    }
    let null = TextBatch::null(text.batch, text.len);
    let uncond = eval_eps(model, x, timesteps, &null, condition)?;
    if scale == 0.0 {
        return Ok(uncond);
    }
    let cond = eval_eps(model, x, timesteps, text, condition)?;
    let s = T::from_f64(scale);
    Ok(uncond.zip_map(&cond, |u, c| u + s * (c - u))?)
}

/// DDIM from Gaussian noise of `shape`. Deterministic when `eta == 0`; the
/// last step lands on ᾱ = 1.
pub fn ddim_sample<T: Scalar, P: EpsPredictor<T> + ?Sized>(
    model: &P,
    text: &TextBatch,
    condition: Option<&Tensor<T>>,
    config: &SamplerConfig,
    schedule: &DiffusionSchedule,
    shape: &[usize],
) -> Result<Tensor<T>> {
    config.check(schedule)?;
    if shape.first() != Some(&text.batch) {
        return Err(Error::Input(format!("shape {shape:?} for {} captions", text.batch)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let x = Tensor::<T>::randn(shape.to_vec(), &mut rng);
    ddim_from(model, x, text, condition, config, schedule, &mut rng)
}

/// DDIM starting from a given `x_T`; `rng` only feeds `eta > 0` noise.
pub fn ddim_from<T: Scalar, P: EpsPredictor<T> + ?Sized, R: Rng + ?Sized>(
    model: &P,
    mut x: Tensor<T>,
    text: &TextBatch,
    condition: Option<&Tensor<T>>,
    config: &SamplerConfig,
    schedule: &DiffusionSchedule,
    rng: &mut R,
) -> Result<Tensor<T>> {
    config.check(schedule)?;
    let seq = ddim_timesteps(schedule.t_train(), config.ddim_steps);
    let b = text.batch;
    for (k, &t) in seq.iter().enumerate() {
        let a = schedule.alpha_bar(t)?;
        let a_prev = match seq.get(k + 1) {
            Some(&tp) => schedule.alpha_bar(tp)?,
            None => 1.0,
        };
        let eps = guided_epsilon(model, &x, &vec![t as f64; b], text, condition, config.cfg_scale)?;
        let sigma = config.eta * ((1.0 - a_prev) / (1.0 - a) * (1.0 - a / a_prev)).max(0.0).sqrt();
        let dir = (1.0 - a_prev - sigma * sigma).max(0.0).sqrt();
        let (ra, rn) = (T::from_f64(a.sqrt()), T::from_f64((1.0 - a).sqrt()));
        let (rap, dirt, sig) = (T::from_f64(a_prev.sqrt()), T::from_f64(dir), T::from_f64(sigma));
        let mut next = x.zip_map(&eps, |xv, e| {
            let x0 = (xv - rn * e) / ra;
            rap * x0 + dirt * e
        })?;
        if sigma > 0.0 {
            let z = Tensor::<T>::randn(x.shape().to_vec(), rng);
            next = next.zip_map(&z, |v, zv| v + sig * zv)?;
        }
        x = next;
    }
    Ok(x)
}

// ----------------------------------------------------------------- previews

/// Colours of the four latent channels in previews.
const CHANNEL_COLOURS: [[f32; 3]; 4] = [[1.0, 0.1, 0.1], [0.1, 0.8, 0.1], [0.15, 0.3, 1.0], [1.0, 0.85, 0.1]];

/// Writes a `[C, H, W]` (or `[1, C, H, W]`) latent as a binary PPM, each
/// latent pixel drawn as a `scale x scale` block. Channel `k` contributes its
/// colour weighted by `clamp((x_k + 0.5) / 2, 0, 1)`.
pub fn write_ppm(path: &Path, latent: &Tensor, scale: usize) -> Result<()> {
    let s = latent.shape();
    let (c, h, w) = match s {
        [c, h, w] | [1, c, h, w] => (*c, *h, *w),
        _ => return Err(Error::Input(format!("cannot preview latent of shape {s:?}"))),
    };
    let scale = scale.max(1);
    let d = latent.data();
    let mut img = Vec::with_capacity(h * w * scale * scale * 3);
    for i in 0..h * scale {
        for j in 0..w * scale {
            let (r, col) = (i / scale, j / scale);
            let mut rgb = [0.0f32; 3];
            for ch in 0..c.min(CHANNEL_COLOURS.len()) {
                let v = ((d[(ch * h + r) * w + col] + 0.5) / 2.0).clamp(0.0, 1.0);
                for (o, k) in rgb.iter_mut().zip(CHANNEL_COLOURS[ch]) {
                    *o += v * k;
                }
            }
            img.extend(rgb.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
        }
    }
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    write!(f, "P6\n{} {}\n255\n", w * scale, h * scale)?;
    f.write_all(&img)?;
    Ok(())
}
