//! Adversarial, feature-matching and multi-resolution mel losses.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::dsp::{mel_filterbank, Padding, StftPlan, Waveform};
use crate::error::{Error, Result};
use crate::numerics::nn::Ctx;
use crate::numerics::{Graph, ParameterStore, Var};
use crate::stage2::discriminator::{BranchOutput, Discriminator};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GanLossWeights {
    pub adv: f32,
    pub feature_match: f32,
    pub mel: f32,
}

impl Default for GanLossWeights {
    fn default() -> Self {
        Self {
            adv: 1.0,
            feature_match: 2.0,
            mel: 15.0,
        }
    }
}

impl GanLossWeights {
    pub fn validate(&self) -> Result<()> {
        if [self.adv, self.feature_match, self.mel].iter().any(|&w| !(w >= 0.0)) {
            return Err(Error::Config("GAN loss weights must be non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GanObjective {
    /// Real scores pushed to 1, fake to 0 (squared error).
    #[default]
    LeastSquares,
    Hinge,
}

/// Log-mel L1 summed over several STFT resolutions.
pub struct MelLoss {
    scales: Vec<(Arc<StftPlan>, Vec<f32>, usize)>,
}

pub const MEL_LOG_FLOOR: f32 = 1e-5;

impl MelLoss {
    /// One scale per `(fft_size, n_mels)`; hop is a quarter of the FFT.
    pub fn new(sample_rate: u32, scales: &[(usize, usize)]) -> Result<Self> {
        if scales.is_empty() {
            return Err(Error::Config("mel loss needs at least one scale".into()));
        }
        let scales = scales
            .iter()
            .map(|&(fft, n_mels)| {
                let plan = StftPlan::new(fft, fft / 4, fft, Padding::Center)?;
                let fb = mel_filterbank(sample_rate, fft, n_mels, 0.0, sample_rate as f32 / 2.0)?;
                Ok((Arc::new(plan), fb, n_mels))
            })
            .collect::<Result<_>>()?;
        Ok(Self { scales })
    }

    pub fn min_length(&self) -> usize {
        self.scales.iter().map(|s| s.0.fft_size() / 2 + 1).max().unwrap_or(1)
    }

    /// Log-mel graph `[frames, n_mels]` of scale `i`.
    pub fn log_mel(&self, g: &mut Graph, i: usize, x: Var) -> Result<Var> {
        let (plan, fb, n_mels) = &self.scales[i];
        let mag = g.stft_magnitude(x, plan)?;
        let fb = g.constant(&[*n_mels, plan.bins()], fb.clone())?;
        let mel = g.linear(mag, fb, None)?;
        g.log_clamp(mel, MEL_LOG_FLOOR)
    }

    pub fn loss(&self, g: &mut Graph, real: Var, fake: Var) -> Result<Var> {
        let mut parts = Vec::with_capacity(self.scales.len());
        for i in 0..self.scales.len() {
            let r = self.log_mel(g, i, real)?;
            let r = g.detach(r)?;
            let f = self.log_mel(g, i, fake)?;
            parts.push(g.l1_loss(f, r, None)?);
        }
        g.sum_scalars(&parts)
    }
}

fn filled(g: &mut Graph, like: Var, v: f32) -> Result<Var> {
    let shape = g.shape(like).to_vec();
    let n = g.value(like).len();
    g.constant(&shape, vec![v; n])
}

/// Critic objective over all branches; `fake` should be detached.
pub fn discriminator_loss(g: &mut Graph, real: &[BranchOutput], fake: &[BranchOutput], obj: GanObjective) -> Result<Var> {
    let mut parts = Vec::with_capacity(2 * real.len());
    for (r, f) in real.iter().zip(fake) {
        match obj {
            GanObjective::LeastSquares => {
                let one = filled(g, r.score, 1.0)?;
                parts.push(g.mse_loss(r.score, one, None)?);
                let zero = filled(g, f.score, 0.0)?;
                parts.push(g.mse_loss(f.score, zero, None)?);
            }
            GanObjective::Hinge => {
                let one = filled(g, r.score, 1.0)?;
                let neg = g.scale(r.score, -1.0)?;
                let m = g.add(neg, one)?;
                let m = g.relu(m)?;
                parts.push(g.mean(m)?);
                let one = filled(g, f.score, 1.0)?;
                let m = g.add(f.score, one)?;
                let m = g.relu(m)?;
                parts.push(g.mean(m)?);
            }
        }
    }
    g.sum_scalars(&parts)
}

/// Generator adversarial term summed over branches.
pub fn generator_adv_loss(g: &mut Graph, fake: &[BranchOutput], obj: GanObjective) -> Result<Var> {
    let mut parts = Vec::with_capacity(fake.len());
    for f in fake {
        match obj {
            GanObjective::LeastSquares => {
                let one = filled(g, f.score, 1.0)?;
                parts.push(g.mse_loss(f.score, one, None)?);
            }
            GanObjective::Hinge => {
                let m = g.mean(f.score)?;
                parts.push(g.scale(m, -1.0)?);
            }
        }
    }
    g.sum_scalars(&parts)
}

/// Mean over every feature map of the mean absolute difference.
pub fn feature_matching_loss(g: &mut Graph, real: &[BranchOutput], fake: &[BranchOutput]) -> Result<Var> {
    let mut parts = Vec::new();
    for (r, f) in real.iter().zip(fake) {
        for (&rm, &fm) in r.features.iter().zip(&f.features) {
            let rm = g.detach(rm)?;
            parts.push(g.l1_loss(fm, rm, None)?);
        }
    }
    let n = parts.len().max(1) as f32;
    let s = g.sum_scalars(&parts)?;
    g.scale(s, 1.0 / n)
}

/// Scalar loss values for one (real, fake) pair.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct GanLosses {
    pub gen_total: f32,
    pub disc_total: f32,
    pub adv_g: f32,
    pub adv_d: f32,
    pub fm: f32,
    pub mel: f32,
}

/// Graph handles of the generator objective.
pub struct GenLossVars {
    pub total: Var,
    pub adv: Var,
    pub fm: Var,
    pub mel: Var,
}

/// Generator objective `w_adv·adv + w_fm·fm + w_mel·mel` with the critic
/// frozen; `real` is a constant and `fake` carries gradients.
pub fn generator_loss(
    g: &mut Graph,
    disc: &dyn Discriminator,
    d_store: &ParameterStore,
    mel: &MelLoss,
    real: Var,
    fake: Var,
    weights: GanLossWeights,
    obj: GanObjective,
) -> Result<GenLossVars> {
    let ctx = Ctx::frozen(d_store);
    let r_out = disc.forward(g, ctx, real)?;
    let f_out = disc.forward(g, ctx, fake)?;
    let adv = generator_adv_loss(g, &f_out, obj)?;
    let fm = feature_matching_loss(g, &r_out, &f_out)?;
    let mel_l = mel.loss(g, real, fake)?;
    let parts = [g.scale(adv, weights.adv)?, g.scale(fm, weights.feature_match)?, g.scale(mel_l, weights.mel)?];
    let total = g.sum_scalars(&parts)?;
    Ok(GenLossVars { total, adv, fm, mel: mel_l })
}

/// Evaluates both objectives for a (real, fake) pair without updating
/// anything.
pub fn gan_losses(
    real: &Waveform,
    fake: &Waveform,
    disc: &dyn Discriminator,
    d_store: &ParameterStore,
    mel: &MelLoss,
    weights: GanLossWeights,
    obj: GanObjective,
) -> Result<GanLosses> {
    if real.len() != fake.len() {
        return Err(Error::Shape(format!("real has {} samples, fake {}", real.len(), fake.len())));
    }
    weights.validate()?;
    let mut g = Graph::new();
    let n = real.len();
    let r = g.constant(&[1, 1, n], real.samples().to_vec())?;
    let f = g.constant(&[1, 1, n], fake.samples().to_vec())?;
    let gl = generator_loss(&mut g, disc, d_store, mel, r, f, weights, obj)?;
    let ctx = Ctx::frozen(d_store);
    let r_out = disc.forward(&mut g, ctx, r)?;
    let f_out = disc.forward(&mut g, ctx, f)?;
    let d = discriminator_loss(&mut g, &r_out, &f_out, obj)?;
    Ok(GanLosses {
        gen_total: g.scalar(gl.total),
        disc_total: g.scalar(d),
        adv_g: g.scalar(gl.adv),
        adv_d: g.scalar(d),
        fm: g.scalar(gl.fm),
        mel: g.scalar(gl.mel),
    })
}
