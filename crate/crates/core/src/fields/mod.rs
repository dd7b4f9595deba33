//! Positional encoding and the two field networks.

mod encoding;
mod layer;
mod radiance_field;
mod sample_field;

pub use encoding::EncodingConfig;
pub use layer::{flat_values, Linear, LinearVars, Module};
pub use radiance_field::{RadianceField, RadianceFieldConfig};
pub use sample_field::{SampleField, SampleFieldConfig};

pub(crate) use radiance_field::encode_rows;
pub(crate) use sample_field::checked_unit;
