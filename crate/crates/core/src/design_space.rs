//! The hierarchical search space of trial designs and its numeric
//! encoding for the surrogate.
//!
//! A design point is a selection strategy, a stage ratio `r`, and the
//! strategy's rule parameter when it has one. The numeric encoding is
//! one-hot over the six strategies followed by `r` and the two parameter
//! slots. Inactive parameter slots are filled with twice their active
//! maximum; combined with unscaled inputs and a kernel that decays within
//! a distance of 4, inactive values stay out of the surrogate's reach.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::trial_sim::SelectionRule;

pub const EPS_MAX: f64 = 4.0;
pub const TAU_MAX: f64 = 10.0;
pub const EPS_INACTIVE: f64 = 2.0 * EPS_MAX;
pub const TAU_INACTIVE: f64 = 2.0 * TAU_MAX;
/// One-hot block plus `r` plus the two parameter slots.
pub const ENCODED_DIM: usize = 9;

/// Interim selection strategies of the search space.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Strategy {
    #[serde(rename = "1-best")]
    OneBest,
    #[serde(rename = "2-best")]
    TwoBest,
    #[serde(rename = "3-best")]
    ThreeBest,
    #[serde(rename = "all")]
    All,
    #[serde(rename = "eps")]
    Eps,
    #[serde(rename = "thresh")]
    Thresh,
}

impl Strategy {
    pub const ALL: [Strategy; 6] = [
        Strategy::OneBest,
        Strategy::TwoBest,
        Strategy::ThreeBest,
        Strategy::All,
        Strategy::Eps,
        Strategy::Thresh,
    ];

    /// Position in the one-hot block.
    pub fn index(self) -> usize {
        Strategy::ALL.iter().position(|&s| s == self).unwrap()
    }

    pub fn from_index(i: usize) -> Option<Strategy> {
        Strategy::ALL.get(i).copied()
    }

    pub fn label(self) -> &'static str {
        match self {
            Strategy::OneBest => "1-best",
            Strategy::TwoBest => "2-best",
            Strategy::ThreeBest => "3-best",
            Strategy::All => "all",
            Strategy::Eps => "eps",
            Strategy::Thresh => "thresh",
        }
    }

    pub fn parse(label: &str) -> Option<Strategy> {
        Strategy::ALL.iter().copied().find(|s| s.label() == label)
    }

    pub fn has_eps(self) -> bool {
        self == Strategy::Eps
    }

    pub fn has_tau(self) -> bool {
        self == Strategy::Thresh
    }
}

/// One candidate trial design.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DesignPoint {
    pub strategy: Strategy,
    /// Per-arm stage-1 share of the per-arm total, in (0, 1).
    pub r: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub eps: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub tau: Option<f64>,
}

impl DesignPoint {
    pub fn fixed(strategy: Strategy, r: f64) -> Result<DesignPoint> {
        let p = DesignPoint {
            strategy,
            r,
            eps: None,
            tau: None,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn with_eps(r: f64, eps: f64) -> Result<DesignPoint> {
        let p = DesignPoint {
            strategy: Strategy::Eps,
            r,
            eps: Some(eps),
            tau: None,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn with_tau(r: f64, tau: f64) -> Result<DesignPoint> {
        let p = DesignPoint {
            strategy: Strategy::Thresh,
            r,
            eps: None,
            tau: Some(tau),
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.r > 0.0 && self.r < 1.0) {
            return Err(Error::InvalidInput(format!(
                "r must lie in (0, 1), got {}",
                self.r
            )));
        }
        if self.eps.is_some() != self.strategy.has_eps() {
            return Err(Error::InvalidInput(format!(
                "eps must be present exactly for the eps strategy ({})",
                self.strategy.label()
            )));
        }
        if self.tau.is_some() != self.strategy.has_tau() {
            return Err(Error::InvalidInput(format!(
                "tau must be present exactly for the thresh strategy ({})",
                self.strategy.label()
            )));
        }
        if let Some(e) = self.eps {
            if !(0.0..=EPS_MAX).contains(&e) {
                return Err(Error::InvalidInput(format!(
                    "eps must lie in [0, {EPS_MAX}], got {e}"
                )));
            }
        }
        if let Some(t) = self.tau {
            if !(0.0..=TAU_MAX).contains(&t) {
                return Err(Error::InvalidInput(format!(
                    "tau must lie in [0, {TAU_MAX}], got {t}"
                )));
            }
        }
        Ok(())
    }

    /// The rule parameter active for this strategy, if any.
    pub fn active_param(&self) -> Option<f64> {
        self.eps.or(self.tau)
    }

    /// Selection rule realised by this point for `arm_count` arms.
    pub fn rule(&self, arm_count: usize) -> SelectionRule {
        match self.strategy {
            Strategy::OneBest => SelectionRule::KappaBest(1),
            Strategy::TwoBest => SelectionRule::KappaBest(2.min(arm_count)),
            Strategy::ThreeBest => SelectionRule::KappaBest(3.min(arm_count)),
            Strategy::All => SelectionRule::KappaBest(arm_count),
            Strategy::Eps => SelectionRule::Epsilon(self.eps.unwrap()),
            Strategy::Thresh => SelectionRule::Threshold(self.tau.unwrap()),
        }
    }

    /// Stage-2 arm count (incl. control) when the strategy fixes it.
    pub fn fixed_k2(&self, arm_count: usize) -> Option<usize> {
        match self.strategy {
            Strategy::OneBest => Some(2),
            Strategy::TwoBest => Some(2.min(arm_count) + 1),
            Strategy::ThreeBest => Some(3.min(arm_count) + 1),
            Strategy::All => Some(arm_count + 1),
            Strategy::Eps | Strategy::Thresh => None,
        }
    }
}

/// Numeric image of a design point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EncodedPoint(pub [f64; ENCODED_DIM]);

impl EncodedPoint {
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

/// Encodes a design point; inactive parameter slots get their fill value.
pub fn encode(p: &DesignPoint) -> EncodedPoint {
    let mut v = [0.0; ENCODED_DIM];
    v[p.strategy.index()] = 1.0;
    v[6] = p.r;
    v[7] = p.eps.unwrap_or(EPS_INACTIVE);
    v[8] = p.tau.unwrap_or(TAU_INACTIVE);
    EncodedPoint(v)
}

/// Inverse of [`encode`]; rejects malformed one-hot blocks and
/// out-of-range active values.
pub fn decode(v: &EncodedPoint) -> Result<DesignPoint> {
    let mut hot = None;
    for (i, &x) in v.0[..6].iter().enumerate() {
        if (x - 1.0).abs() < 1e-9 {
            if hot.is_some() {
                return Err(Error::Decode("multiple strategy indicators set".into()));
            }
            hot = Some(i);
        } else if x.abs() > 1e-9 {
            return Err(Error::Decode(format!(
                "strategy indicator {i} is {x}, expected 0 or 1"
            )));
        }
    }
    let strategy = hot
        .and_then(Strategy::from_index)
        .ok_or_else(|| Error::Decode("no strategy indicator set".into()))?;
    let p = DesignPoint {
        strategy,
        r: v.0[6],
        eps: strategy.has_eps().then_some(v.0[7]),
        tau: strategy.has_tau().then_some(v.0[8]),
    };
    p.validate().map_err(|e| Error::Decode(e.to_string()))?;
    Ok(p)
}

fn open_unit<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    loop {
        let x: f64 = rng.gen();
        if x > 0.0 {
            return x;
        }
    }
}

/// Samples one design point uniformly over the hierarchical space.
pub fn sample_one<R: Rng + ?Sized>(rng: &mut R) -> DesignPoint {
    let strategy = Strategy::from_index(rng.gen_range(0..Strategy::ALL.len())).unwrap();
    let r = open_unit(rng);
    DesignPoint {
        strategy,
        r,
        eps: strategy.has_eps().then(|| rng.gen_range(0.0..=EPS_MAX)),
        tau: strategy.has_tau().then(|| rng.gen_range(0.0..=TAU_MAX)),
    }
}

/// Samples `n` design points uniformly: strategy uniform over the six
/// categories, `r` uniform on (0, 1), the rule parameter uniform over its
/// range when active.
pub fn sample_uniform<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Vec<DesignPoint> {
    (0..n).map(|_| sample_one(rng)).collect()
}

/// Samples a point near `center` within a box of the given fractional
/// width per active dimension, keeping the strategy fixed.
pub fn sample_around<R: Rng + ?Sized>(
    center: &DesignPoint,
    width: f64,
    rng: &mut R,
) -> DesignPoint {
    let boxed = |c: f64, lo: f64, hi: f64, range: f64, rng: &mut R| {
        let half = width * range / 2.0;
        let a = (c - half).max(lo);
        let b = (c + half).min(hi);
        rng.gen_range(a..=b)
    };
    let r = boxed(center.r, f64::MIN_POSITIVE, 1.0 - 1e-12, 1.0, rng);
    DesignPoint {
        strategy: center.strategy,
        r,
        eps: center.eps.map(|e| boxed(e, 0.0, EPS_MAX, EPS_MAX, rng)),
        tau: center.tau.map(|t| boxed(t, 0.0, TAU_MAX, TAU_MAX, rng)),
    }
}

/// Full grid with `l` points per numeric dimension: `l` ratios for each
/// fixed-count strategy and an `l x l` lattice for eps and thresh, so
/// `4l + 2l^2` points in total. Ratios are placed at `i/(l+1)` to stay
/// strictly inside (0, 1); rule parameters span their range inclusively.
pub fn make_grid(l: usize) -> Vec<DesignPoint> {
    assert!(l >= 2, "grid needs at least 2 points per dimension");
    let r_at = |i: usize| (i + 1) as f64 / (l + 1) as f64;
    let param_at = |j: usize, max: f64| max * j as f64 / (l - 1) as f64;

    let mut grid = Vec::with_capacity(4 * l + 2 * l * l);
    for strategy in [
        Strategy::OneBest,
        Strategy::TwoBest,
        Strategy::ThreeBest,
        Strategy::All,
    ] {
        for i in 0..l {
            grid.push(DesignPoint {
                strategy,
                r: r_at(i),
                eps: None,
                tau: None,
            });
        }
    }
    for i in 0..l {
        for j in 0..l {
            grid.push(DesignPoint {
                strategy: Strategy::Eps,
                r: r_at(i),
                eps: Some(param_at(j, EPS_MAX)),
                tau: None,
            });
        }
    }
    for i in 0..l {
        for j in 0..l {
            grid.push(DesignPoint {
                strategy: Strategy::Thresh,
                r: r_at(i),
                eps: None,
                tau: Some(param_at(j, TAU_MAX)),
            });
        }
    }
    grid
}
