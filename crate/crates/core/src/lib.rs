pub mod changegraph;
pub mod diff;
pub mod purifier;
pub mod backend;
pub mod intent;
pub mod grouping;
pub mod review;
pub mod dataset;
pub mod metrics;
pub mod pipeline;

/// Floating-point score report.
pub type MetricsReport = metrics::MetricsReport<f64>;
/// Exact score report.
pub type ExactMetricsReport = metrics::MetricsReport<num_rational::Ratio<i64>>;
pub type Aggregate = metrics::Aggregate<f64>;
pub type ExactAggregate = metrics::Aggregate<num_rational::Ratio<i64>>;
