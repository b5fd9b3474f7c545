use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{NcuError, Result};
use crate::hn_losses::HnLossConfig;
use crate::ot::SinkhornConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    #[default]
    Ncu,
    GradientAscent,
    ContinuedInfonce,
}

impl Mode {
    pub fn name(self) -> &'static str {
        match self {
            Mode::Ncu => "ncu",
            Mode::GradientAscent => "gradient_ascent",
            Mode::ContinuedInfonce => "continued_infonce",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s.replace('-', "_").as_str() {
            "ncu" => Ok(Mode::Ncu),
            "gradient_ascent" | "ga" => Ok(Mode::GradientAscent),
            "continued_infonce" => Ok(Mode::ContinuedInfonce),
            other => Err(NcuError::Mode(format!("unknown mode {other:?}"))),
        }
    }
}

/// Everything a run needs besides the data. Loaded from TOML; absent keys take defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub batch_size: usize,

    pub pretrain_epochs: usize,
    pub hn_epochs: usize,
    pub ul_epochs: usize,
    pub lr_pretrain: f64,
    pub lr_hn: f64,
    pub lr_ul: f64,

    pub hidden: usize,
    pub embed: usize,
    /// Shared context vectors in the negative head.
    pub neg_context: usize,

    /// Percentage of each batch placed in the forget set.
    pub p_percent: f64,
    pub alpha: f64,
    pub beta: f64,
    pub lambda: f64,
    pub epsilon: f64,
    pub gamma: f64,
    pub sinkhorn_max_iters: usize,
    pub sinkhorn_tol: f64,
    /// Label smoothing on the retain side of gradient ascent.
    pub smoothing: f64,

    pub mode: Mode,
    pub fp_only: bool,
    pub fn_only: bool,
    pub l2_opposite: bool,
    pub data_fraction: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        let hn = HnLossConfig::default();
        let sk = SinkhornConfig::default();
        Self {
            seed: 0,
            batch_size: 256,
            pretrain_epochs: 30,
            hn_epochs: 2,
            ul_epochs: 8,
            lr_pretrain: 1e-3,
            lr_hn: 1e-4,
            lr_ul: 1e-4,
            hidden: 64,
            embed: 32,
            neg_context: 4,
            p_percent: 10.0,
            alpha: hn.alpha,
            beta: hn.beta,
            lambda: hn.lambda,
            epsilon: 0.1,
            gamma: 0.5,
            sinkhorn_max_iters: sk.max_iters,
            sinkhorn_tol: sk.tol,
            smoothing: 0.1,
            mode: Mode::Ncu,
            fp_only: false,
            fn_only: false,
            l2_opposite: false,
            data_fraction: 1.0,
        }
    }
}

impl RunConfig {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(s).map_err(|e| NcuError::InvalidConfig(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("run config is always representable in TOML")
    }

    pub fn hn_loss(&self) -> HnLossConfig {
        HnLossConfig { alpha: self.alpha, beta: self.beta, lambda: self.lambda }
    }

    pub fn sinkhorn(&self) -> SinkhornConfig {
        SinkhornConfig { max_iters: self.sinkhorn_max_iters, tol: self.sinkhorn_tol }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(NcuError::InvalidConfig(msg));
        if self.batch_size < 2 {
            return bad(format!("batch_size must be at least 2, got {}", self.batch_size));
        }
        if self.hidden == 0 || self.embed == 0 || self.neg_context == 0 {
            return bad("hidden, embed and neg_context must be at least 1".into());
        }
        for (name, lr) in [("lr_pretrain", self.lr_pretrain), ("lr_hn", self.lr_hn), ("lr_ul", self.lr_ul)] {
            if !(lr > 0.0 && lr.is_finite()) {
                return bad(format!("{name} must be positive, got {lr}"));
            }
        }
        if !(self.p_percent > 0.0 && self.p_percent < 100.0) {
            return bad(format!("p_percent must lie in (0, 100), got {}", self.p_percent));
        }
        self.hn_loss().validate()?;
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return bad(format!("epsilon must be positive, got {}", self.epsilon));
        }
        if !(0.0..=1.0).contains(&self.gamma) {
            return bad(format!("gamma must lie in [0, 1], got {}", self.gamma));
        }
        if self.sinkhorn_max_iters == 0 || !(self.sinkhorn_tol > 0.0) {
            return bad("sinkhorn_max_iters and sinkhorn_tol must be positive".into());
        }
        if !(0.0..1.0).contains(&self.smoothing) {
            return bad(format!("smoothing must lie in [0, 1), got {}", self.smoothing));
        }
        if !(self.data_fraction > 0.0 && self.data_fraction <= 1.0) {
            return bad(format!("data_fraction must lie in (0, 1], got {}", self.data_fraction));
        }
        if self.fp_only && self.fn_only {
            return Err(NcuError::Mode("fp_only and fn_only are mutually exclusive".into()));
        }
        if self.mode != Mode::Ncu && (self.fp_only || self.fn_only) {
            return Err(NcuError::Mode(format!("ablation flags only apply to ncu mode, not {}", self.mode.name())));
        }
        Ok(())
    }
}
