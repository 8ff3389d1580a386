//! CTC phone probe over frozen representations: loss, prefix beam search,
//! phone error rate and the limited-label training protocol.

mod decode;
mod loss;
mod per;
mod probe;
mod train;


pub use decode::{beam_decode, collapse, greedy_decode};
pub use loss::{ctc_loss, ctc_loss_var, log_add, min_frames, BLANK};
pub use per::{edit_distance, per, PerReport, PerRow, PER_REPORT_HEADER};
pub use probe::{im2col, Probe, ProbeConfig, PROBE_CHECKPOINT_KIND};
pub use train::{
    evaluate_probe, run_probe, train_probe, transcript_labels, write_probe_curve, LabeledRep,
    ProbeData, ProbeLossRow, ProbeOutcome, ProbeRun, HELDOUT_POOLED, HELDOUT_SUBSETS,
    PROBE_CURVE_HEADER,
};
