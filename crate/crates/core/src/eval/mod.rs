//! Metric kernels, synthetic benchmarks and model evaluation.

mod harness;
mod metrics;
mod tasks;

pub use harness::{
    combine_seeds, comparison_table, evaluate_model, median, read_samples, write_samples, EvalResult, Metric,
    OracleModel, RandomModel, SeedResult, VqaModel, INDEX_FILE,
};
pub use metrics::{binary_prf, exact_match_accuracy, f1_score, parse_yes_no, pope_aggregate, Prf};
pub use tasks::{
    generate_coherence_task, generate_detail_task, glyph_family, CoherenceTask, DetailTask, Glyph, Layout, Placement,
    PopeSubset, PopeTask, Pos, Relation, SyntheticSample, TaskKind, TaskSource, TaskSpec, CAPTION_PROMPT,
};
