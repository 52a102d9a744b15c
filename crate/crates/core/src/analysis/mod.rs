//! Score distributions, before/after deltas, needle accuracy, and the
//! report bundle built from them.

mod concentration;
mod delta;
mod niah;
mod report;

pub use concentration::{concentration, gini, ConcentrationSummary, TauCount, TopKMass};
pub use delta::{delta_report, DeltaReport, HeadDelta};
pub use niah::{eval_niah, InstanceVerdict, NiahEval};
pub use report::{
    build_manifest, compare_manifests, distribution_svg, layout, render_report, scatter_svg,
    write_bundle, ConcentrationNumbers, EvalSummary, Manifest, NiahResult, TOP_K, Y_TICKS,
};
