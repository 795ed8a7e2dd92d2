//! Splits, metrics, efficiency profiling and attention export.

mod attention;
mod metrics;
mod profile;
mod splits;

pub use attention::{export_attention, AttentionSummary, Moments};
pub use metrics::{auc, average_precision, fit_line, macro_f1, micro_f1};
pub use profile::{profile_run, EfficiencyReport, PhaseTiming, TargetProfile};
pub use splits::{
    build_splits, link_split, node_split, LinkPart, LinkSplit, NodeLabels, NodeSplit, SplitSpec, Task,
    LINK_NEGATIVE_RATIO, LINK_POSITIVE_SHARE, NODES_PER_CLASS,
};
