//! Effective best solution and augmented expected improvement, plus the
//! sampling-based search for the next configuration.
//!
//! The augmented expected improvement multiplies the classic expected
//! improvement against the effective best by a noise correction
//! `1 - sigma / sqrt(sigma^2 + s^2)`, which stops the search from
//! revisiting regions whose posterior uncertainty is already at the
//! noise floor.

use rand::Rng;

use crate::design_space::{encode, sample_around, sample_one, DesignPoint, EncodedPoint};
use crate::stats::{norm_cdf, norm_pdf};
use crate::surrogate::GpModel;

/// Shrinking-box schedule of the focus rounds.
const FOCUS_WIDTHS: [f64; 3] = [0.25, 0.125, 0.0625];
const UNIFORM_CANDIDATES: usize = 2000;
const FOCUS_CANDIDATES: usize = 500;

/// Model plus the constants steering the acquisition.
#[derive(Debug, Clone)]
pub struct AcquisitionContext<'m> {
    pub model: &'m GpModel,
    /// Pessimism constant of the effective best; usually 1.
    pub c: f64,
    /// Observation noise standard deviation, `sqrt(nugget)`.
    pub sigma: f64,
}

impl<'m> AcquisitionContext<'m> {
    pub fn new(model: &'m GpModel) -> Self {
        AcquisitionContext {
            model,
            c: 1.0,
            sigma: model.nugget.sqrt(),
        }
    }

    /// Effective best solution over the evaluated design: the training
    /// point maximizing `mean - c * sd`, returned with its posterior mean.
    pub fn effective_best(&self) -> (Vec<f64>, f64) {
        let mut best_idx = 0usize;
        let mut best_score = f64::NEG_INFINITY;
        let mut best_mean = 0.0;
        for i in 0..self.model.len() {
            let row = self.model.training_row(i);
            let post = self.model.predict_slice(&row);
            let score = post.mean - self.c * post.sd;
            if score > best_score {
                best_score = score;
                best_mean = post.mean;
                best_idx = i;
            }
        }
        (self.model.training_row(best_idx), best_mean)
    }

    /// Augmented expected improvement of a candidate point.
    pub fn aei(&self, point: &EncodedPoint) -> f64 {
        let (_, best_mean) = self.effective_best();
        self.aei_against(point, best_mean)
    }

    /// AEI against a pre-computed effective-best mean; used by the search
    /// loop to avoid rescanning the design per candidate.
    pub fn aei_against(&self, point: &EncodedPoint, best_mean: f64) -> f64 {
        let post = self.model.predict(point);
        aei_value(post.mean, post.sd, best_mean, self.sigma)
    }

    /// Searches the design space for the candidate maximizing the AEI:
    /// uniform samples followed by shrinking focus boxes around the
    /// incumbent. Deterministic given the RNG stream; ties keep the
    /// earliest candidate.
    pub fn propose_next<R: Rng + ?Sized>(&self, rng: &mut R) -> DesignPoint {
        let (_, best_mean) = self.effective_best();
        let mut incumbent: Option<(f64, DesignPoint)> = None;

        let consider = |p: DesignPoint, incumbent: &mut Option<(f64, DesignPoint)>| {
            let a = aei_value_from(self, &p, best_mean);
            match incumbent {
                Some((best, _)) if a <= *best => {}
                _ => *incumbent = Some((a, p)),
            }
        };

        for _ in 0..UNIFORM_CANDIDATES {
            consider(sample_one(rng), &mut incumbent);
        }
        for width in FOCUS_WIDTHS {
            let center = incumbent.as_ref().expect("candidates sampled").1;
            for _ in 0..FOCUS_CANDIDATES {
                consider(sample_around(&center, width, rng), &mut incumbent);
            }
        }
        incumbent.expect("candidates sampled").1
    }
}

fn aei_value_from(ctx: &AcquisitionContext, p: &DesignPoint, best_mean: f64) -> f64 {
    let post = ctx.model.predict(&encode(p));
    aei_value(post.mean, post.sd, best_mean, ctx.sigma)
}

/// Augmented expected improvement of a Gaussian posterior `(mean, sd)`
/// against the effective-best mean, with observation noise `sigma`.
///
/// With `sigma = 0` this is the classic expected improvement. A vanished
/// posterior sd degenerates to the plain improvement `max(0, mean - best)`.
pub fn aei_value(mean: f64, sd: f64, best_mean: f64, sigma: f64) -> f64 {
    let diff = mean - best_mean;
    if sd < 1e-12 {
        return diff.max(0.0);
    }
    let u = diff / sd;
    let ei = diff * norm_cdf(u) + sd * norm_pdf(u);
    let correction = if sigma == 0.0 {
        1.0
    } else {
        1.0 - sigma / (sigma * sigma + sd * sd).sqrt()
    };
    (ei * correction).max(0.0)
}
