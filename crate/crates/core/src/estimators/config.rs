use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::EstimatorError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum EstimatorKind {
    Reinforce,
    StNaive,
    Stgs,
    GrMck,
    Gst,
    NzGst,
}

impl EstimatorKind {
    pub fn as_str(self) -> &'static str {
        match self {
            EstimatorKind::Reinforce => "REINFORCE",
            EstimatorKind::StNaive => "ST_NAIVE",
            EstimatorKind::Stgs => "STGS",
            EstimatorKind::GrMck => "GR_MCK",
            EstimatorKind::Gst => "GST",
            EstimatorKind::NzGst => "NZ_GST",
        }
    }
}

impl FromStr for EstimatorKind {
    type Err = EstimatorError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ok(match s.trim().to_ascii_uppercase().replace('-', "_").as_str() {
            "REINFORCE" => EstimatorKind::Reinforce,
            "ST_NAIVE" | "ST" => EstimatorKind::StNaive,
            "STGS" => EstimatorKind::Stgs,
            "GR_MCK" | "GR_MC" => EstimatorKind::GrMck,
            "GST" => EstimatorKind::Gst,
            "NZ_GST" => EstimatorKind::NzGst,
            other => return Err(EstimatorError::Config(format!("unknown estimator kind {other:?}"))),
        })
    }
}

/// Gap size used by the gapped estimators.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Gap {
    Const(f64),
    /// Per-sample gap equal to the expected top-2 gap of Gumbel-perturbed
    /// logits given the selected category: `-log(1 - p_i) / p_i`.
    Pi,
}

impl fmt::Display for Gap {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Gap::Const(g) => write!(f, "{g:.1}"),
            Gap::Pi => f.write_str("pi"),
        }
    }
}

impl FromStr for Gap {
    type Err = EstimatorError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let s = s.trim();
        if s.eq_ignore_ascii_case("pi") {
            return Ok(Gap::Pi);
        }
        s.parse::<f64>()
            .map(Gap::Const)
            .map_err(|_| EstimatorError::Config(format!("gap must be a number or 'pi', got {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Mode {
    Hard,
    Soft,
}

impl FromStr for Mode {
    type Err = EstimatorError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "hard" => Ok(Mode::Hard),
            "soft" => Ok(Mode::Soft),
            other => Err(EstimatorError::Config(format!("unknown mode {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EstimatorConfig {
    pub kind: EstimatorKind,
    pub tau: f64,
    pub gap: Gap,
    /// Conditional Monte-Carlo draws per sample (GR-MCK only).
    pub mc_samples: usize,
    pub mode: Mode,
}

impl EstimatorConfig {
    pub fn new(kind: EstimatorKind, tau: f64) -> Self {
        Self {
            kind,
            tau,
            gap: Gap::Const(1.0),
            mc_samples: 1,
            mode: Mode::Hard,
        }
    }

    pub fn reinforce() -> Self {
        Self::new(EstimatorKind::Reinforce, 1.0)
    }

    pub fn st_naive(tau: f64) -> Self {
        Self::new(EstimatorKind::StNaive, tau)
    }

    pub fn stgs(tau: f64) -> Self {
        Self::new(EstimatorKind::Stgs, tau)
    }

    pub fn gr_mck(k: usize, tau: f64) -> Self {
        Self {
            mc_samples: k,
            ..Self::new(EstimatorKind::GrMck, tau)
        }
    }

    pub fn gst(gap: Gap, tau: f64) -> Self {
        Self {
            gap,
            ..Self::new(EstimatorKind::Gst, tau)
        }
    }

    pub fn nz_gst(gap: Gap, tau: f64) -> Self {
        Self {
            gap,
            ..Self::new(EstimatorKind::NzGst, tau)
        }
    }

    pub fn with_mode(mut self, mode: Mode) -> Self {
        self.mode = mode;
        self
    }

    pub fn with_tau(mut self, tau: f64) -> Self {
        self.tau = tau;
        self
    }

    pub fn validate(&self) -> Result<(), EstimatorError> {
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(EstimatorError::Config(format!(
                "tau must be positive, got {}",
                self.tau
            )));
        }
        if let Gap::Const(g) = self.gap {
            if !(g >= 0.0 && g.is_finite()) {
                return Err(EstimatorError::Config(format!("gap must be >= 0, got {g}")));
            }
        }
        if self.mc_samples == 0 {
            return Err(EstimatorError::Config("mc_samples must be >= 1".into()));
        }
        Ok(())
    }

    /// Short name in the style `GST-1.0`, `GR-MC100`, `NZ-GST-0.0`, `STGS`.
    pub fn label(&self) -> String {
        match self.kind {
            EstimatorKind::Reinforce => "REINFORCE".into(),
            EstimatorKind::StNaive => "ST".into(),
            EstimatorKind::Stgs => "STGS".into(),
            EstimatorKind::GrMck => format!("GR-MC{}", self.mc_samples),
            EstimatorKind::Gst => format!("GST-{}", self.gap),
            EstimatorKind::NzGst => format!("NZ-GST-{}", self.gap),
        }
    }

    /// Parses a label produced by [`EstimatorConfig::label`] (also accepts
    /// the plain kind names) at temperature `tau`.
    pub fn from_label(label: &str, tau: f64) -> Result<Self, EstimatorError> {
        let up = label.trim().to_ascii_uppercase();
        let cfg = if let Some(k) = up.strip_prefix("GR-MC") {
            let k = k
                .parse()
                .map_err(|_| EstimatorError::Config(format!("bad GR-MC count in {label:?}")))?;
            Self::gr_mck(k, tau)
        } else if let Some(g) = up.strip_prefix("NZ-GST-") {
            Self::nz_gst(g.parse()?, tau)
        } else if let Some(g) = up.strip_prefix("GST-") {
            Self::gst(g.parse()?, tau)
        } else {
            Self::new(up.parse()?, tau)
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Gap value for this config.
    pub fn gap_value(&self) -> Option<f64> {
        match self.gap {
            Gap::Const(g) => Some(g),
            Gap::Pi => None,
        }
    }
}
