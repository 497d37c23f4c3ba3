//! Greedy decoding, edit alignment and the evaluation metrics built on them.

pub mod align;
pub mod decode;
pub mod scores;
pub mod timeline;

pub use align::{align, per, AlignOp, AlignmentResult};
pub use decode::{collapse, greedy_decode, greedy_decode_rows, Decoded, Segment};
pub use scores::{class_stats, confusion, f1_macro, gp, ClassStats, Confusion, GpTally, MetricsAccumulator, MetricsReport};
pub use timeline::{timeline_export, timeline_read, Timeline};
