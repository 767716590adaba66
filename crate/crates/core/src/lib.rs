//! Hypoglycemia-onset classification pipeline for CGM data.
//!
//! Raw CSV files are ingested into [`GlucoseSeries`], cleaned and imputed
//! ([`preprocess`]), labeled by minutes-before-onset ([`labeling`]), cut into
//! normalized windows ([`windowing`]) and fed to the FCN classifier of
//! [`glyconet_nn`] under the population, age-segmented and fine-tuning
//! protocols of [`experiments`].

pub mod artifacts;
pub mod cohort_stats;
pub mod domain;
pub mod error;
pub mod experiments;
pub mod ingestion;
pub mod labeling;
pub mod metrics;
pub mod preprocess;
pub mod stineman;
pub mod synth;
pub mod windowing;

pub use domain::{
    age_group_of, class_set, AgeGroup, ClassSetName, ClassSetSpec, GlucoseSeries, PointLabel, Reading, Sex, Subject,
    WindowSample,
};
pub use error::{Error, Result};
pub use glyconet_nn as nn;

/// Version string written into every artifact.
pub const PIPELINE_VERSION: &str = concat!("glyconet ", env!("CARGO_PKG_VERSION"));
