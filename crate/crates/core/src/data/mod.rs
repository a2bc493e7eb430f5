//! Interaction logs, per-user sequences, splits and batching.

mod batching;
mod parse;
mod sequences;
mod split;
mod synthetic;

pub use batching::{batch_iterator, BatchIter, LabeledBatch};
pub use parse::{parse_interactions, parse_str, DataFormat, InteractionEvent};
pub use sequences::{build_sequences, DatasetStats, ItemRemap, SequenceSet, UserSequence};
pub use split::{split_leave_last, DatasetSplit, Example};
pub use synthetic::{gap_class_of, synthesize_dataset, GapClass, GapRule, SyntheticSpec};
