//! Multi-period and sub-band spectral critics.

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dsp::{subband_edges, Padding, StftPlan};
use crate::error::{Error, Result};
use crate::numerics::nn::{self, Ctx};
use crate::numerics::{Graph, ParameterStore, Var};

const SLOPE: f32 = 0.1;
const LOG_FLOOR: f32 = 1e-5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiscriminatorConfig {
    pub periods: Vec<usize>,
    /// FFT sizes of the spectral branches; hop is a quarter of each.
    pub fft_sizes: Vec<usize>,
    pub n_bands: usize,
    /// Channel widths of the period branch convolutions.
    pub period_channels: Vec<usize>,
    pub spectral_channels: usize,
}

impl Default for DiscriminatorConfig {
    fn default() -> Self {
        Self {
            periods: vec![2, 3, 5, 7, 11],
            fft_sizes: vec![256, 512, 1024],
            n_bands: 2,
            period_channels: vec![8, 16, 32],
            spectral_channels: 16,
        }
    }
}

fn is_prime(n: usize) -> bool {
    n >= 2 && (2..).take_while(|d| d * d <= n).all(|d| n % d != 0)
}

impl DiscriminatorConfig {
    pub fn validate(&self) -> Result<()> {
        let mut seen = self.periods.clone();
        seen.sort_unstable();
        seen.dedup();
        if seen.len() != self.periods.len() || !self.periods.iter().all(|&p| is_prime(p)) {
            return Err(Error::Config(format!("discriminator periods {:?} must be distinct primes", self.periods)));
        }
        if self.fft_sizes.iter().any(|&f| !f.is_power_of_two() || f < 16) {
            return Err(Error::Config("spectral FFT sizes must be powers of two >= 16".into()));
        }
        if self.n_bands == 0 || self.period_channels.is_empty() || self.period_channels.contains(&0) || self.spectral_channels == 0 {
            return Err(Error::Config("discriminator sizes must be positive".into()));
        }
        Ok(())
    }

    pub fn n_branches(&self) -> usize {
        self.periods.len() + self.fft_sizes.len() * self.n_bands
    }

    fn band_edges(&self, fft: usize) -> Result<Vec<usize>> {
        subband_edges(fft / 2 + 1, self.n_bands)
    }

    /// Closed-form parameter count (weight-normalised convolutions).
    pub fn param_count(&self) -> Result<usize> {
        let conv = |cin: usize, cout: usize, k: usize| cin * cout * k + 2 * cout;
        let mut n = 0;
        let mut per = 0;
        let mut cin = 1;
        for &c in &self.period_channels {
            per += conv(cin, c, 5);
            cin = c;
        }
        per += conv(cin, cin, 5) + conv(cin, 1, 3);
        n += per * self.periods.len();
        let c = self.spectral_channels;
        for &fft in &self.fft_sizes {
            let edges = self.band_edges(fft)?;
            for b in 0..self.n_bands {
                let width = edges[b + 1] - edges[b];
                n += conv(width, c, 3) + conv(c, c, 3) + conv(c, 1, 3);
            }
        }
        Ok(n)
    }
}

/// Score map and pre-activation feature maps of one branch.
pub struct BranchOutput {
    pub score: Var,
    pub features: Vec<Var>,
}

/// A critic with several branches over a mono signal.
pub trait Discriminator {
    fn n_branches(&self) -> usize;
    fn forward(&self, g: &mut Graph, ctx: Ctx, x: Var) -> Result<Vec<BranchOutput>>;
    fn min_length(&self) -> usize {
        1
    }
}

/// Period branches (signal folded into `period` columns, convolved along
/// time with shared weights) plus log-magnitude sub-band branches at
/// several STFT resolutions.
pub struct MultiDiscriminator {
    pub cfg: DiscriminatorConfig,
    plans: Vec<(Arc<StftPlan>, Vec<usize>)>,
}

impl MultiDiscriminator {
    pub fn new(cfg: DiscriminatorConfig) -> Result<Self> {
        cfg.validate()?;
        let plans = cfg
            .fft_sizes
            .iter()
            .map(|&f| Ok((Arc::new(StftPlan::new(f, f / 4, f, Padding::Center)?), cfg.band_edges(f)?)))
            .collect::<Result<_>>()?;
        Ok(Self { cfg, plans })
    }

    pub fn init_params(&self, seed: u64) -> Result<ParameterStore> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut s = ParameterStore::new();
        for &p in &self.cfg.periods {
            let mut cin = 1;
            for (i, &c) in self.cfg.period_channels.iter().enumerate() {
                nn::add_conv1d(&mut s, &mut rng, &format!("mpd{p}.conv{i}"), cin, c, 5, true, None)?;
                cin = c;
            }
            nn::add_conv1d(&mut s, &mut rng, &format!("mpd{p}.mid"), cin, cin, 5, true, None)?;
            nn::add_conv1d(&mut s, &mut rng, &format!("mpd{p}.post"), cin, 1, 3, true, None)?;
        }
        let c = self.cfg.spectral_channels;
        for (fft, edges) in self.cfg.fft_sizes.iter().zip(self.plans.iter().map(|p| &p.1)) {
            for b in 0..self.cfg.n_bands {
                let p = format!("sbd{fft}.{b}");
                nn::add_conv1d(&mut s, &mut rng, &format!("{p}.conv0"), edges[b + 1] - edges[b], c, 3, true, None)?;
                nn::add_conv1d(&mut s, &mut rng, &format!("{p}.conv1"), c, c, 3, true, None)?;
                nn::add_conv1d(&mut s, &mut rng, &format!("{p}.post"), c, 1, 3, true, None)?;
            }
        }
        Ok(s)
    }
}

impl Discriminator for MultiDiscriminator {
    fn n_branches(&self) -> usize {
        self.cfg.n_branches()
    }

    fn min_length(&self) -> usize {
        let max_p = self.cfg.periods.iter().copied().max().unwrap_or(1);
        let max_half = self.cfg.fft_sizes.iter().map(|f| f / 2 + 1).max().unwrap_or(1);
        max_p.max(max_half)
    }

    fn forward(&self, g: &mut Graph, ctx: Ctx, x: Var) -> Result<Vec<BranchOutput>> {
        let len = g.value(x).len();
        if len < self.min_length() {
            return Err(Error::TooShort(format!("discriminator input of {len} samples, need {}", self.min_length())));
        }
        let mut out = Vec::with_capacity(self.n_branches());
        for &p in &self.cfg.periods {
            let mut h = g.period_fold(x, p)?;
            let mut features = Vec::new();
            for i in 0..self.cfg.period_channels.len() {
                h = nn::conv1d(g, ctx, &format!("mpd{p}.conv{i}"), h, 3, 2, 1)?;
                features.push(h);
                h = g.leaky_relu(h, SLOPE)?;
            }
            h = nn::conv1d(g, ctx, &format!("mpd{p}.mid"), h, 1, 2, 1)?;
            features.push(h);
            h = g.leaky_relu(h, SLOPE)?;
            let score = nn::conv1d(g, ctx, &format!("mpd{p}.post"), h, 1, 1, 1)?;
            out.push(BranchOutput { score, features });
        }
        for (fft, (plan, edges)) in self.cfg.fft_sizes.iter().zip(&self.plans) {
            let mag = g.stft_magnitude(x, plan)?;
            let logmag = g.log_clamp(mag, LOG_FLOOR)?;
            for b in 0..self.cfg.n_bands {
                let p = format!("sbd{fft}.{b}");
                let band = g.slice_cols(logmag, edges[b], edges[b + 1])?;
                let mut h = nn::rows_to_seq(g, band)?;
                let mut features = Vec::new();
                for (i, dil) in [(0, 1), (1, 2)] {
                    h = nn::conv1d_same(g, ctx, &format!("{p}.conv{i}"), h, 3, dil)?;
                    features.push(h);
                    h = g.leaky_relu(h, SLOPE)?;
                }
                let score = nn::conv1d_same(g, ctx, &format!("{p}.post"), h, 3, 1)?;
                out.push(BranchOutput { score, features });
            }
        }
        Ok(out)
    }
}
