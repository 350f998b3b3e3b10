//! Trajectory tables: loading, writing, windowing, splitting and synthesis.

mod split;
mod synth;
mod table;
mod window;

pub use split::{split, NamedTable, Split, SplitProtocol};
pub use synth::{synth, synthetic_corpus, Scenario, SynthSpec};
pub use table::{load_table, write_whitespace4, ClassMap, Format, Row, TrajectoryTable};
pub use window::{window_span, windows};
