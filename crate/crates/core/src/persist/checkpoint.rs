use std::path::Path;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::distill::Mode;
use crate::error::{Error, Result};
use crate::netkit::{CondNet, NetSpec};
use crate::schedule::{NoiseSchedule, PhasePartition};

pub const FORMAT_VERSION: u32 = 1;

/// `f64` written with 17 significant digits.
#[derive(Debug, Clone, Copy, PartialEq)]
struct Num(f64);

impl Serialize for Num {
    fn serialize<Z: Serializer>(&self, z: Z) -> std::result::Result<Z::Ok, Z::Error> {
        if !self.0.is_finite() {
            return Err(serde::ser::Error::custom("non-finite value in checkpoint"));
        }
        let raw = serde_json::value::RawValue::from_string(format!("{:.16e}", self.0))
            .map_err(serde::ser::Error::custom)?;
        raw.serialize(z)
    }
}

impl<'de> Deserialize<'de> for Num {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        f64::deserialize(d).map(Num)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Kind {
    Teacher,
    Student,
    Discriminator,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerRecord {
    /// `out x in`, row-major.
    w: Vec<Vec<Num>>,
    b: Vec<Num>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Embeddings {
    time_freqs: usize,
    time_max_period: f64,
    time_scale: f64,
    /// One row per class, the null condition last.
    class_table: Vec<Vec<Num>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetRecord {
    widths: Vec<usize>,
    classes: usize,
    layers: Vec<LayerRecord>,
    embeddings: Embeddings,
}

impl NetRecord {
    pub fn from_net(net: &CondNet<f64>) -> Self {
        let spec = net.spec();
        let widths = spec.widths();
        let layers = (0..net.num_layers())
            .map(|l| {
                let (w, b) = net.layer(l);
                let (inp, out) = (widths[l], widths[l + 1]);
                LayerRecord {
                    w: (0..out).map(|o| (0..inp).map(|i| Num(w[i * out + o])).collect()).collect(),
                    b: b.iter().map(|&v| Num(v)).collect(),
                }
            })
            .collect();
        let e = spec.class_dim;
        let class_table = net.params()[..spec.table_len()].chunks(e.max(1)).map(|r| r.iter().map(|&v| Num(v)).collect()).collect();
        Self {
            widths,
            classes: spec.classes,
            layers,
            embeddings: Embeddings {
                time_freqs: spec.time_freqs,
                time_max_period: spec.time_max_period,
                time_scale: spec.time_scale,
                class_table: if e == 0 { Vec::new() } else { class_table },
            },
        }
    }

    pub fn to_net(&self) -> Result<CondNet<f64>> {
        let bad = |m: &str| Error::Format(format!("network record: {m}"));
        let w = &self.widths;
        if w.len() < 2 || self.layers.len() != w.len() - 1 {
            return Err(bad("layer count does not match widths"));
        }
        let emb = &self.embeddings;
        let class_dim = emb.class_table.first().map_or(0, Vec::len);
        if emb.class_table.len() != self.classes + 1 && class_dim > 0 {
            return Err(bad("class table must have classes + 1 rows"));
        }
        let data_dim = w[0]
            .checked_sub(2 * emb.time_freqs + class_dim)
            .ok_or_else(|| bad("input width too small"))?;
        let spec = NetSpec {
            data_dim,
            hidden: w[1..w.len() - 1].to_vec(),
            out_dim: w[w.len() - 1],
            time_freqs: emb.time_freqs,
            time_max_period: emb.time_max_period,
            time_scale: emb.time_scale,
            class_dim,
            classes: self.classes,
        };
        let mut params = Vec::with_capacity(spec.num_params());
        for row in &emb.class_table {
            if row.len() != class_dim {
                return Err(bad("ragged class table"));
            }
            params.extend(row.iter().map(|v| v.0));
        }
        for (l, layer) in self.layers.iter().enumerate() {
            let (inp, out) = (w[l], w[l + 1]);
            if layer.w.len() != out || layer.w.iter().any(|r| r.len() != inp) || layer.b.len() != out {
                return Err(bad(&format!("layer {l} shape")));
            }
            for i in 0..inp {
                params.extend((0..out).map(|o| layer.w[o][i].0));
            }
            params.extend(layer.b.iter().map(|v| v.0));
        }
        CondNet::from_params(spec, params)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainRecord {
    pub step: u64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub ema_mu: Option<f64>,
    pub seed: u64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub mode: Option<Mode>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub version: u32,
    pub kind: Kind,
    pub schedule: NoiseSchedule<f64>,
    /// Grid times, `t_0 = t_min` first.
    grid: Vec<Num>,
    /// Phase edge indices into the grid; empty for teachers.
    pub partition: Vec<usize>,
    pub net: NetRecord,
    /// EMA target of a student.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub target: Option<NetRecord>,
    pub train: TrainRecord,
}

impl Checkpoint {
    pub fn new(
        kind: Kind,
        schedule: NoiseSchedule<f64>,
        partition: &PhasePartition<f64>,
        net: &CondNet<f64>,
        train: TrainRecord,
    ) -> Self {
        let edges = if kind == Kind::Teacher { Vec::new() } else { partition.edges().to_vec() };
        Self {
            version: FORMAT_VERSION,
            kind,
            schedule,
            grid: partition.grid().times().iter().map(|&t| Num(t)).collect(),
            partition: edges,
            net: NetRecord::from_net(net),
            target: None,
            train,
        }
    }

    pub fn with_target(mut self, target: &CondNet<f64>) -> Self {
        self.target = Some(NetRecord::from_net(target));
        self
    }

    pub fn grid_intervals(&self) -> usize {
        self.grid.len().saturating_sub(1)
    }

    /// The stored partition, or a single phase over the grid for teachers.
    pub fn partition(&self) -> Result<PhasePartition<f64>> {
        let times = self.grid.iter().map(|v| v.0).collect();
        let grid = crate::schedule::TimestepGrid::from_times(&self.schedule, times)?;
        if self.partition.is_empty() {
            PhasePartition::from_indices(grid.clone(), vec![0, grid.intervals()])
        } else {
            PhasePartition::from_indices(grid, self.partition.clone())
        }
    }

    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string(self).map_err(|e| Error::Numeric(e.to_string()))?;
        s.push('\n');
        Ok(s)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let c: Self = serde_json::from_str(text).map_err(|e| Error::Format(e.to_string()))?;
        if c.version != FORMAT_VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {}", c.version)));
        }
        c.partition()?;
        Ok(c)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        super::write_atomic(path, self.to_json()?.as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Format(format!("cannot read {}: {e}", path.display())))?;
        Self::from_json(&text)
    }
}
