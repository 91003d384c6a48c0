use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::distill::{DistillConfig, TeacherConfig};
use crate::error::{Error, Result};
use crate::schedule::{NoiseSchedule, PhasePartition};
use crate::toydata::MixtureSpec;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleConfig {
    pub t_min: f64,
    pub t_max: f64,
    pub beta_min: f64,
    pub beta_max: f64,
    /// Number of teacher grid intervals `N`.
    pub intervals: usize,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        let s = NoiseSchedule::<f64>::default();
        Self { t_min: s.t_min, t_max: s.t_max, beta_min: s.beta_min, beta_max: s.beta_max, intervals: 50 }
    }
}

impl ScheduleConfig {
    pub fn schedule(&self) -> Result<NoiseSchedule<f64>> {
        NoiseSchedule::new(self.t_min, self.t_max, self.beta_min, self.beta_max)
    }

    pub fn partition(&self, phases: usize) -> Result<PhasePartition<f64>> {
        crate::distill::make_partition(&self.schedule()?, self.intervals, phases)
    }
}

/// Ring mixture: `modes` isotropic components on a circle, assigned to
/// classes round-robin.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub modes: usize,
    pub radius: f64,
    pub std: f64,
    pub classes: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self { modes: 8, radius: 2.0, std: 0.1, classes: 2 }
    }
}

impl DataConfig {
    pub fn mixture(&self) -> Result<MixtureSpec<f64>> {
        MixtureSpec::ring(self.modes, self.radius, self.std, self.classes)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplerSection {
    pub steps: usize,
    pub r: f64,
    /// Inference guidance scale; 1 disables guidance.
    pub cfg: f64,
    /// Negative class for guidance; the null condition when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub neg_class: Option<usize>,
    /// Class to generate.
    pub class: usize,
    pub n: usize,
    pub clip: bool,
}

impl Default for SamplerSection {
    fn default() -> Self {
        Self { steps: 4, r: 1.0, cfg: 1.0, neg_class: None, class: 0, n: 1024, clip: false }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub schedule: ScheduleConfig,
    pub data: DataConfig,
    pub teacher: TeacherConfig,
    pub distill: DistillConfig,
    pub sampler: SamplerSection,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn to_toml(&self) -> String {
        let mut s = toml::to_string(self).expect("config serializes");
        if self.sampler.neg_class.is_none() {
            s.push_str("# neg_class = 1\n");
        }
        s
    }

    pub fn validate(&self) -> Result<()> {
        self.schedule.schedule()?;
        if self.schedule.intervals == 0 {
            return Err(Error::Config("schedule.intervals must be positive".into()));
        }
        self.data.mixture()?;
        self.teacher.validate()?;
        self.distill.validate()?;
        if let Some(k) = self.sampler.neg_class {
            if k >= self.data.classes {
                return Err(Error::Config(format!("sampler.neg_class {k} out of range")));
            }
        }
        if self.sampler.class >= self.data.classes {
            return Err(Error::Config(format!("sampler.class {} out of range", self.sampler.class)));
        }
        Ok(())
    }
}
