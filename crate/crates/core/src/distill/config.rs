use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::netkit::NetSpec;

/// Architecture fields shared by the epsilon network and the discriminator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetConfig {
    pub hidden: Vec<usize>,
    pub time_freqs: usize,
    pub time_max_period: f64,
    pub time_scale: f64,
    pub class_dim: usize,
}

impl Default for NetConfig {
    fn default() -> Self {
        let s = NetSpec::epsilon(1);
        Self {
            hidden: s.hidden,
            time_freqs: s.time_freqs,
            time_max_period: s.time_max_period,
            time_scale: s.time_scale,
            class_dim: s.class_dim,
        }
    }
}

impl NetConfig {
    pub fn spec(&self, classes: usize, out_dim: usize) -> NetSpec {
        NetSpec {
            data_dim: 2,
            hidden: self.hidden.clone(),
            out_dim,
            time_freqs: self.time_freqs,
            time_max_period: self.time_max_period,
            time_scale: self.time_scale,
            class_dim: self.class_dim,
            classes,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TeacherConfig {
    pub iterations: usize,
    pub batch: usize,
    pub lr: f64,
    /// Probability of replacing the condition by the null condition.
    pub cond_dropout: f64,
    /// Weight-averaging decay; 0 keeps the last iterate.
    pub ema_mu: f64,
    pub net: NetConfig,
}

impl Default for TeacherConfig {
    fn default() -> Self {
        Self {
            iterations: 5000,
            batch: 256,
            lr: 1e-3,
            cond_dropout: 0.1,
            ema_mu: 0.999,
            net: NetConfig::default(),
        }
    }
}

impl TeacherConfig {
    pub fn validate(&self) -> Result<()> {
        check_batch_lr(self.batch, self.lr)?;
        check_unit("teacher.cond_dropout", self.cond_dropout)?;
        if !(0.0..1.0).contains(&self.ema_mu) {
            return Err(Error::config(format!("teacher.ema_mu = {} must lie in [0, 1)", self.ema_mu)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    /// Guided teacher solver with `w ~ U[w_min, w_max]`.
    Pcd,
    /// Plain teacher solver with condition dropout.
    PcdStar,
}

impl std::str::FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pcd" => Ok(Mode::Pcd),
            "pcd-star" => Ok(Mode::PcdStar),
            _ => Err(Error::config(format!("unknown mode {s:?} (expected pcd or pcd-star)"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Metric {
    SquaredL2,
    /// Pseudo-Huber `sqrt(|d|^2 + delta^2) - delta` with `huber_delta`.
    Huber,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Weighting {
    Constant,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DistillConfig {
    pub mode: Mode,
    pub phases: usize,
    /// Teacher solver steps per loss sample.
    pub solver_steps: usize,
    pub w_min: f64,
    pub w_max: f64,
    pub drop_ratio: f64,
    pub metric: Metric,
    pub huber_delta: f64,
    pub weighting: Weighting,
    pub lambda_adv: f64,
    pub batch: usize,
    pub iterations: usize,
    pub lr: f64,
    pub disc_lr: f64,
    pub ema_mu: f64,
    /// Floor the data-prediction divisor at `clip_floor` for targets at `t_min`.
    pub clip: bool,
    pub clip_floor: f64,
    pub disc: NetConfig,
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self {
            mode: Mode::Pcd,
            phases: 4,
            solver_steps: 1,
            w_min: 1.0,
            w_max: 2.0,
            drop_ratio: 0.1,
            metric: Metric::SquaredL2,
            huber_delta: 0.1,
            weighting: Weighting::Constant,
            lambda_adv: 0.1,
            batch: 256,
            iterations: 5000,
            lr: 2e-4,
            disc_lr: 2e-4,
            ema_mu: 0.99,
            clip: false,
            clip_floor: 0.5,
            disc: NetConfig {
                hidden: vec![64, 64],
                ..NetConfig::default()
            },
        }
    }
}

impl DistillConfig {
    pub fn validate(&self) -> Result<()> {
        check_batch_lr(self.batch, self.lr)?;
        if self.phases == 0 {
            return Err(Error::config("distill.phases must be at least 1"));
        }
        if self.solver_steps == 0 {
            return Err(Error::config("distill.solver_steps must be at least 1"));
        }
        if !(self.w_min >= 1.0 && self.w_max >= self.w_min && self.w_max.is_finite()) {
            return Err(Error::config(format!(
                "distill guidance range [{}, {}] must satisfy 1 <= w_min <= w_max",
                self.w_min, self.w_max
            )));
        }
        check_unit("distill.drop_ratio", self.drop_ratio)?;
        check_unit("distill.ema_mu", self.ema_mu)?;
        if !(self.lambda_adv >= 0.0 && self.lambda_adv.is_finite()) {
            return Err(Error::config("distill.lambda_adv must be >= 0"));
        }
        if !(self.huber_delta > 0.0) {
            return Err(Error::config("distill.huber_delta must be positive"));
        }
        if !(self.clip_floor > 0.0 && self.clip_floor <= 1.0) {
            return Err(Error::config("distill.clip_floor must lie in (0, 1]"));
        }
        if self.lambda_adv > 0.0 && !(self.disc_lr > 0.0 && self.disc_lr.is_finite()) {
            return Err(Error::config("distill.disc_lr must be positive"));
        }
        Ok(())
    }

    pub fn clip_floor(&self) -> Option<f64> {
        self.clip.then_some(self.clip_floor)
    }
}

fn check_batch_lr(batch: usize, lr: f64) -> Result<()> {
    if batch == 0 {
        return Err(Error::config("batch size must be at least 1"));
    }
    if !(lr > 0.0 && lr.is_finite()) {
        return Err(Error::config(format!("learning rate must be positive, got {lr}")));
    }
    Ok(())
}

fn check_unit(name: &str, v: f64) -> Result<()> {
    if (0.0..=1.0).contains(&v) {
        Ok(())
    } else {
        Err(Error::config(format!("{name} must lie in [0, 1], got {v}")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        TeacherConfig::default().validate().unwrap();
        DistillConfig::default().validate().unwrap();
    }

    #[test]
    fn rejects_bad_fields() {
        let bad = DistillConfig { w_min: 0.5, ..Default::default() };
        assert!(bad.validate().is_err());
        let bad = DistillConfig { lambda_adv: -0.1, ..Default::default() };
        assert!(bad.validate().is_err());
        let bad = TeacherConfig { cond_dropout: 1.5, ..Default::default() };
        assert!(bad.validate().is_err());
        assert!("pcd-plus".parse::<Mode>().is_err());
        assert_eq!("pcd-star".parse::<Mode>().unwrap(), Mode::PcdStar);
    }
}
