//! Persistence formats for patch features and cohort metadata, and the
//! synthetic cohort generator.

pub(crate) mod bytes;
mod manifest;
mod slide;
mod synthetic;
mod tensor;

pub use manifest::{CohortManifest, SlideEntry};
pub use slide::{
    decode_slide, encode_slide, read_slide_features, read_slide_header, validate_records,
    write_slide_features, PatchRecord, SLIDE_HEADER_LEN, SLIDE_MAGIC, SLIDE_VERSION,
};
pub use synthetic::{
    generate_synthetic_cohort, Layout, SyntheticClass, SyntheticCohort, SyntheticSpec,
};
pub use tensor::{Tensor, TensorFile, TENSOR_MAGIC};
