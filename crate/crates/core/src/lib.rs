//! Active multimodal few-shot inference over paired RGB-role and flow-role
//! embeddings.
//!
//! The numeric core is generic over [`Scalar`] (`f32` or `f64`); the aliases
//! below fix it to `f64`, which is what the file formats and the CLI use.

/// `FromStr`/`Display` for option enums, accepting `-` or `_` separators.
macro_rules! option_names {
    ($ty:ty { $($variant:ident => $name:literal $(| $alias:literal)*),+ $(,)? }) => {
        impl std::str::FromStr for $ty {
            type Err = String;

            fn from_str(s: &str) -> std::result::Result<Self, String> {
                match s.trim().replace('-', "_").as_str() {
                    $($name $(| $alias)* => Ok(<$ty>::$variant),)+
                    other => Err(format!(
                        "unknown value `{other}` (expected one of: {})",
                        [$($name),+].join(", ")
                    )),
                }
            }
        }

        impl std::fmt::Display for $ty {
            fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
                f.write_str(match self { $(<$ty>::$variant => $name,)+ })
            }
        }
    };
}

pub mod amd;
pub mod ami;
pub mod asi;
pub mod dataset;
pub mod encoder;
pub mod error;
pub mod matrix;
pub mod metric;
pub mod pipeline;
pub mod rng;
pub mod scalar;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Dataset = dataset::MultimodalDataset<f64>;
pub type Record = dataset::EmbeddingRecord<f64>;
pub type Model = encoder::ModelBundle<f64>;
pub type Head = encoder::HeadParams<f64>;
pub type Losses = amd::LossBreakdown<f64>;
pub type Gradients = amd::GradientSet<f64>;
pub type EpisodeResult = ami::EpisodeResult<f64>;

pub type DatasetF32 = dataset::MultimodalDataset<f32>;
pub type ModelF32 = encoder::ModelBundle<f32>;
