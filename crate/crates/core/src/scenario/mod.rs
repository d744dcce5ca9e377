//! Inputs of a run: recorded or synthetic drivers and scripted events.

mod events;
mod preprocess;
mod synthetic;
mod timeseries;

pub use events::{schedule_events, Scenario};
pub use preprocess::{
    preprocess, preprocess_with_stats, regularize, write_features, FeatureSeries, FeatureTable, NormalizationStats, PreprocessConfig, Scaling,
    VARIABLES,
};
pub use synthetic::{generate_drivers, DriverTable, SyntheticParams};
pub use timeseries::{load_timeseries, parse_timeseries, parse_timestamp, write_timeseries, Record, TimeSeries, COLUMNS};
