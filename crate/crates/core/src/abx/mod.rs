//! Machine ABX discriminability: DTW over frame distances, triple construction and scoring.

mod distance;
mod dtw;
mod score;
mod triples;

pub use distance::{
    frame_distance, frame_distance_cosine, frame_distance_skl, Distance, PreparedFrames,
};
pub use dtw::{dtw, dtw_prepared, dtw_with};
pub use score::{score, score_with, triple_error, AbxReport, AbxRow, REPORT_HEADER};
pub use triples::{
    build_triples, triple_is_valid, AbxCondition, AbxLimits, AbxTriple, CellKey, TripleSet,
};
