//! Model-based image-to-event synthesis.
//!
//! The crate covers the deterministic half of the toolkit: dense fields,
//! the linearized event generation model and its brute-force two-frame
//! counterpart, flow samplers and augmentation, the loss kernels used in
//! training, and the raster/event file formats.

pub mod error;
pub mod events;
pub mod field;
pub mod flow;
pub mod io;
pub mod losses;
pub mod scenes;

pub use error::{Error, Result};
pub use events::{
    count_events, histogram_from_stream, initial_event_guess, log_intensity_change,
    pseudo_flow_counts, two_frame_oracle, ContrastThreshold, Event, EventHistogram, EventStream,
    SignedEventCount,
};
pub use field::{dot_field, log_transform, spatial_gradient, ScalarField, VectorField};
pub use flow::{
    augment_flow, charbonnier_smoothness, sample_epipolar_flow, sample_translational_flow,
    FlowKind, FlowSampler, FlowSamplerSpec,
};
