//! On-disk formats: slide feature containers and cohort manifests.

pub(crate) mod binary;
mod feature_file;
mod manifest;

pub use feature_file::{
    read_feature_file, write_feature_file, SlideFeatureFile, FEATURE_HEADER_LEN, FEATURE_MAGIC,
    FEATURE_VERSION,
};
pub use manifest::{
    load_cohort, parse_manifest, write_manifest, Cohort, CohortFilter, PatientRecord, SlideRecord,
    Split,
};
