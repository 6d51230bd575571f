//! Seeded synthetic try-on data whose garment-to-body warps are known exactly.

pub mod compose;
pub mod dataset;
pub mod garment;
pub mod glyphs;
pub mod person;
pub mod shapes;
pub mod truth;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use compose::{compose_sample, SamplePair};
pub use dataset::{build_dataset, generate_sample, DatasetConfig, DatasetManifest, ManifestRecord, UnpairedEntry};
pub use garment::{gen_garment, GarmentSpec, PatternKind};
pub use person::{gen_person, person_context, PersonContext, PersonSpec};
pub use truth::{gen_truth_warp, TruthWarp};

/// Value written over the try-on region of the clothes-agnostic person.
pub const AGNOSTIC_FILL: f32 = 0.5;

/// Canvas size in pixels; height:width is always 4:3.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Canvas {
    pub height: usize,
    pub width: usize,
}

impl Canvas {
    pub const fn new(height: usize, width: usize) -> Self {
        Self { height, width }
    }

    pub fn validate(&self) -> Result<()> {
        if self.height == 0 || self.height * 3 != self.width * 4 {
            return Err(Error::ParameterRange(format!(
                "canvas {}x{} is not 4:3 (height:width)",
                self.height, self.width
            )));
        }
        Ok(())
    }
}
