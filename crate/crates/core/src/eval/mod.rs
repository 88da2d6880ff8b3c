//! Evaluation: frame metrics, the best-of-N protocol and per-channel KL
//! activity.

mod best_of_n;
mod features;
mod kl;
mod metrics;

pub use best_of_n::{
    best_of_n, write_metrics_csv, write_summary, Aggregate, BestOfNReport, CopyLastFrame, EvalConfig, MetricReport,
    ModelPredictor, Predictor, SequenceScore,
};
pub use features::{registered_extractors, FeatureExtractor};
pub use kl::{kl_activity, ChannelActivity, KlActivityReport, ACTIVE_THRESHOLD, MAXIMAL_THRESHOLD};
pub use metrics::{mse, psnr, ssim, Metric, PSNR_CAP};
