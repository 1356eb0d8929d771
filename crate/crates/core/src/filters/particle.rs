use rand::Rng;

use super::GaussianBelief;
use crate::numerics::{cholesky, Mat};
use crate::ssm::{draw, noise_factor, NominalModel};
use crate::{Error, Result};

/// Weighted particle cloud.
#[derive(Clone, Debug, PartialEq)]
pub struct ParticleBelief {
    pub particles: Vec<Mat>,
    pub weights: Vec<f64>,
}

impl ParticleBelief {
    pub fn from_gaussian(b: &GaussianBelief, n: usize, rng: &mut impl Rng) -> Result<Self> {
        if n < 2 {
            return Err(Error::Config(format!(
                "particle filter needs N >= 2, got {n}"
            )));
        }
        let factor = noise_factor(&b.cov)?;
        let particles = (0..n)
            .map(|_| b.mean.add(&draw(rng, &factor)))
            .collect::<std::result::Result<Vec<_>, _>>()?;
        Ok(Self {
            particles,
            weights: vec![1.0 / n as f64; n],
        })
    }

    pub fn len(&self) -> usize {
        self.particles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.particles.is_empty()
    }

    pub fn mean(&self) -> Mat {
        let mut out = Mat::zeros(self.particles[0].rows(), 1);
        for (p, w) in self.particles.iter().zip(&self.weights) {
            out.add_assign(&p.scale(*w));
        }
        out
    }

    pub fn effective_sample_size(&self) -> f64 {
        1.0 / self.weights.iter().map(|w| w * w).sum::<f64>()
    }
}

/// Bootstrap particle filter step. The incoming cloud is first resampled
/// systematically if its effective sample size is below `N/2`; particles
/// are then propagated with process noise and weighted by the Gaussian
/// measurement likelihood. The returned cloud is weighted, so its mean is
/// the estimate before any resampling noise.
pub fn pf_step(
    b: &ParticleBelief,
    m: &NominalModel,
    z: &Mat,
    rng: &mut impl Rng,
) -> Result<ParticleBelief> {
    let n = b.len();
    if n < 2 {
        return Err(Error::Config(format!(
            "particle filter needs N >= 2, got {n}"
        )));
    }
    let w_factor = noise_factor(&m.q)?;
    let r_factor = cholesky(m.r.as_mat(), "R")?;

    let resampled;
    let b = if b.effective_sample_size() < n as f64 / 2.0 {
        resampled = systematic_resample(b, rng);
        &resampled
    } else {
        b
    };

    let mut particles = Vec::with_capacity(n);
    let mut log_w = Vec::with_capacity(n);
    for (p, w) in b.particles.iter().zip(&b.weights) {
        let x = m.f(p)?.add(&draw(rng, &w_factor))?;
        let resid = z.sub(&m.h(&x)?)?;
        let white = forward_substitute(&r_factor, &resid);
        let lw = w.ln() - 0.5 * white.sum_squares();
        // particles that left the finite range get zero weight
        log_w.push(if lw.is_nan() { f64::NEG_INFINITY } else { lw });
        particles.push(x);
    }
    let max = log_w.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return Err(Error::DegenerateLikelihood);
    }
    let mut weights: Vec<f64> = log_w.iter().map(|l| (l - max).exp()).collect();
    let total: f64 = weights.iter().sum();
    if !(total > 0.0) || !total.is_finite() {
        return Err(Error::DegenerateLikelihood);
    }
    weights.iter_mut().for_each(|w| *w /= total);

    Ok(ParticleBelief { particles, weights })
}

fn forward_substitute(l: &Mat, b: &Mat) -> Mat {
    let n = l.rows();
    let mut x = b.clone();
    for i in 0..n {
        let mut s = x[(i, 0)];
        for k in 0..i {
            s -= l[(i, k)] * x[(k, 0)];
        }
        x[(i, 0)] = s / l[(i, i)];
    }
    x
}

/// Systematic resampling: one uniform offset, `N` evenly spaced pointers.
pub fn systematic_resample(b: &ParticleBelief, rng: &mut impl Rng) -> ParticleBelief {
    let n = b.len();
    let u0: f64 = rng.random::<f64>() / n as f64;
    let mut particles = Vec::with_capacity(n);
    let mut cumulative = b.weights[0];
    let mut i = 0;
    for j in 0..n {
        let u = u0 + j as f64 / n as f64;
        while u > cumulative && i < n - 1 {
            i += 1;
            cumulative += b.weights[i];
        }
        particles.push(b.particles[i].clone());
    }
    ParticleBelief {
        particles,
        weights: vec![1.0 / n as f64; n],
    }
}
