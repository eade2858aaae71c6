//! File formats, the toy block stack, guidance sweeps and the CLI commands.

pub mod analyze;
pub mod bench;
pub mod bundle;
pub mod config;
pub mod conformance;
pub mod guidance;
pub mod npy;
pub mod sweep;
pub mod toy;

pub use analyze::{
    analyze_bundle, apply_to_bundle, capture_toy_bundle, AnalysisSummary, SegmentSummary,
};
pub use bench::{run_bench, BenchConfig, BenchReport};
pub use bundle::{
    load_dump_bundle, write_dump_bundle, DumpBundle, EntryKey, Manifest, ManifestEntry, TensorName,
};
pub use config::{read_json, write_json, GragConfigFile, SCHEMA_VERSION};
pub use conformance::{check_bundle, default_cases, generate_bundle, ConformanceReport};
pub use guidance::{cfg_combine, segment_attention_mass};
pub use npy::{read_any, read_tensor, write_any, write_tensor, AnyTensor};
pub use sweep::{
    run_sweep_to_dir, sweep, GridPoint, SweepConfig, SweepMode, SweepReport, SweepRow, SweepSpec,
};
pub use toy::{
    build_toy_model, run_edit_pass, run_edit_pass_with, EditInputs, EditTrace, PassOptions,
    ToyBlock, ToyModel, ToyModelConfig,
};
