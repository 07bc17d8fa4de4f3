//! The MAC network: an input unit (word embeddings, biLSTM, knowledge-base
//! stem), `p` recurrent cells of control, read and write units, and a
//! two-layer classifier over the question and final memory.

mod cell;
mod config;
mod kb;
mod network;
mod trace;

pub use cell::{CellParams, ControlOut, ControlParams, ReadOut, ReadParams, WriteOut, WriteParams};
pub use config::{ConfigError, ControlVariant, MacConfig, WriteVariant};
pub use kb::{scene_features, KbStem, CELL_FEATURES};
pub use network::{argmax, Example, Forward, MacLayout, MacModel, Mode, ModelError, ModelResult, CELL_PREFIX};
pub use trace::{CellTrace, ParamSource, StepTrace};
