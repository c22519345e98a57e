//! Paired healthy/unhealthy execution: mismatch metrics and the experiment
//! protocols built on them.

mod metrics;
mod protocols;
mod sink;

pub use metrics::{
    aggregate, layer_metric, mismatch_count, mismatch_frequency, mismatch_severity, rank_severity,
    site_report, wcnts, LayerMetric, SeverityMode, SiteReport, SubmoduleCapture,
};
pub use protocols::{
    run_abft, run_calibrate, run_rq1, run_rq2, run_rq3, run_shadow, Experiment, Outcome, Status,
};
pub use sink::{
    CalibrationRow, EventRow, MemorySink, Rq1LayerRow, Rq1Row, Rq2Row, Rq3Row, ShadowRow, Sink,
};
