mod batches;
pub mod mmds;
mod sample;
mod summary;
pub mod synth;

pub use batches::split_batches;
pub use sample::{Dataset, Label, Modality, MultimodalSample, Task};
pub use summary::{summary_records, to_jsonl};
pub use synth::{generate, SignalReport, SynthOutput, SynthSpec};
