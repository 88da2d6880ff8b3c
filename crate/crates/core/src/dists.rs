//! Diagonal Gaussians: reparameterized sampling, closed-form KL and the pixel
//! reconstruction term.

use crate::diffcore::{Graph, Real, Tensor, Var};
use crate::{Error, Result};

/// Log-variances are clamped into this range wherever a Gaussian is built.
pub const LOGVAR_MIN: f64 = -10.0;
pub const LOGVAR_MAX: f64 = 10.0;

/// Mean and log-variance of a diagonal Normal, as recorded graph values.
#[derive(Clone, Copy, Debug)]
pub struct Gaussian {
    pub mean: Var,
    pub logvar: Var,
}

impl Gaussian {
    /// Clamps `logvar` into `[LOGVAR_MIN, LOGVAR_MAX]`.
    pub fn new<R: Real>(g: &mut Graph<R>, mean: Var, logvar: Var) -> Result<Self> {
        if g.shape(mean) != g.shape(logvar) {
            return Err(Error::contract(
                "Gaussian::new",
                format!("mean {:?} and logvar {:?} differ in shape", g.shape(mean), g.shape(logvar)),
            ));
        }
        let logvar = g.clamp(logvar, LOGVAR_MIN, LOGVAR_MAX)?;
        Ok(Self { mean, logvar })
    }

    /// Split a `[B, 2C, ...]` tensor into mean (first C channels) and logvar.
    pub fn from_stacked<R: Real>(g: &mut Graph<R>, stacked: Var) -> Result<Self> {
        let parts = g.chunk(stacked, 2, 1)?;
        Self::new(g, parts[0], parts[1])
    }

    pub fn params<R: Real>(&self, g: &Graph<R>) -> GaussianParams<R> {
        GaussianParams { mean: g.value(self.mean).clone(), logvar: g.value(self.logvar).clone() }
    }
}

/// Detached Gaussian parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianParams<R: Real = f32> {
    pub mean: Tensor<R>,
    pub logvar: Tensor<R>,
}

impl<R: Real> GaussianParams<R> {
    /// Clamps `logvar` into `[LOGVAR_MIN, LOGVAR_MAX]`.
    pub fn new(mean: Tensor<R>, logvar: Tensor<R>) -> Result<Self> {
        if mean.shape() != logvar.shape() {
            return Err(Error::contract(
                "GaussianParams::new",
                format!("mean {:?} and logvar {:?} differ in shape", mean.shape(), logvar.shape()),
            ));
        }
        let (lo, hi) = (R::lit(LOGVAR_MIN), R::lit(LOGVAR_MAX));
        let logvar = logvar.map(|v| v.max(lo).min(hi));
        Ok(Self { mean, logvar })
    }

    pub fn std(&self) -> Tensor<R> {
        self.logvar.map(|v| (v * R::lit(0.5)).exp())
    }

    fn record(&self, g: &mut Graph<R>) -> Gaussian {
        Gaussian { mean: g.constant(self.mean.clone()), logvar: g.constant(self.logvar.clone()) }
    }

    /// `mean + std * noise`.
    pub fn sample(&self, noise: &Tensor<R>) -> Result<Tensor<R>> {
        let mut g = Graph::new();
        let q = self.record(&mut g);
        let n = g.constant(noise.clone());
        let z = reparam_sample(&mut g, &q, n)?;
        Ok(g.value(z).clone())
    }

    /// Per-element `KL(self || p)`.
    pub fn kl(&self, p: &GaussianParams<R>) -> Result<Tensor<R>> {
        let mut g = Graph::new();
        let q = self.record(&mut g);
        let p = p.record(&mut g);
        let kl = gaussian_kl(&mut g, &q, &p)?;
        Ok(g.value(kl).clone())
    }
}

/// `mean + exp(0.5 * logvar) * noise`.
pub fn reparam_sample<R: Real>(g: &mut Graph<R>, q: &Gaussian, noise: Var) -> Result<Var> {
    if g.shape(noise) != g.shape(q.mean) {
        return Err(Error::contract(
            "reparam_sample",
            format!("noise {:?} does not match parameters {:?}", g.shape(noise), g.shape(q.mean)),
        ));
    }
    let half = g.scale(q.logvar, 0.5)?;
    let std = g.exp(half)?;
    let scaled = g.mul(std, noise)?;
    g.add(q.mean, scaled)
}

/// Per-element `KL(q || p)` between diagonal Gaussians, clamped at zero.
///
/// Written as `0.5 (lv_p - lv_q) + 0.5 (exp(lv_q - lv_p) + (m_q - m_p)^2 exp(-lv_p)) - 0.5`
/// so that identical arguments give exactly zero.
pub fn gaussian_kl<R: Real>(g: &mut Graph<R>, q: &Gaussian, p: &Gaussian) -> Result<Var> {
    if g.shape(q.mean) != g.shape(p.mean) {
        return Err(Error::contract(
            "gaussian_kl",
            format!("q {:?} and p {:?} differ in shape", g.shape(q.mean), g.shape(p.mean)),
        ));
    }
    let dlv = g.sub(p.logvar, q.logvar)?;
    let log_term = g.scale(dlv, 0.5)?;
    let neg = g.scale(dlv, -1.0)?;
    let ratio = g.exp(neg)?;
    let dm = g.sub(q.mean, p.mean)?;
    let dm2 = g.square(dm)?;
    let neg_lvp = g.scale(p.logvar, -1.0)?;
    let inv_var_p = g.exp(neg_lvp)?;
    let maha = g.mul(dm2, inv_var_p)?;
    let inner = g.add(ratio, maha)?;
    let inner = g.scale(inner, 0.5)?;
    let kl = g.add(log_term, inner)?;
    let kl = g.add_scalar(kl, -0.5)?;
    g.clamp_min(kl, 0.0)
}

/// `0.5 * sum((prediction - target)^2) / batch` with the batch on axis 0.
pub fn recon_nll<R: Real>(g: &mut Graph<R>, prediction: Var, target: Var) -> Result<Var> {
    if g.shape(prediction) != g.shape(target) {
        return Err(Error::contract(
            "recon_nll",
            format!("prediction {:?} and target {:?} differ in shape", g.shape(prediction), g.shape(target)),
        ));
    }
    let batch = g.shape(prediction)[0] as f64;
    let d = g.sub(prediction, target)?;
    let d2 = g.square(d)?;
    let s = g.sum(d2)?;
    g.scale(s, 0.5 / batch)
}
