//! Gallery indexing, two-stage search, and the retrieval evaluation
//! harness (recall at K and mean average precision).

pub mod eval;
pub mod index;

pub use eval::{
    evaluate, mean_average_precision, recall_at_k, EvalReport, MetricCounts, QueryResult, EVAL_KS,
};
pub use index::{
    build_index, read_index, read_index_file, rerank, search, shortlist, shortlist_global,
    write_index, write_index_file, GalleryIndex, IndexEntry, RankedEntry, RankedList,
    ShortlistHit,
};
