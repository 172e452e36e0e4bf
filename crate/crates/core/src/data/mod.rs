//! Record I/O, the RLE codec, dataset conversion, synthetic scenes,
//! filtering, splitting and statistics.

pub mod convert;
pub mod filter;
pub mod record;
pub mod rle;
pub mod split;
pub mod stats;
pub mod synth;

pub use convert::{convert_multi_referring, ConversionReport, ImageAnnotations, InstanceAnnotation};
pub use filter::{filter_records, FilterRules, Rejection};
pub use record::{load_records, save_records, MuseRecord, MuseTarget, PLACEHOLDER};
pub use rle::RleMask;
pub use split::{split_items, Partition, TargetSplit};
pub use stats::{compute_statistics, StatsReport};
pub use synth::{gen_synthetic, generate_scene, SynthConfig, SyntheticScene};
