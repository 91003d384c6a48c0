//! Run configuration, checkpoints, CSV and SVG emission.

mod checkpoint;
mod config;
mod output;

pub use checkpoint::{Checkpoint, Kind, LayerRecord, NetRecord, TrainRecord, FORMAT_VERSION};
pub use config::{DataConfig, RunConfig, SamplerSection, ScheduleConfig};
pub use output::{render_svg, write_atomic, write_samples_csv, LossCsv, TeacherCsv};
