//! Surface-based morphometry of knee cartilage from segmentation label maps.
//!
//! The crate turns bone and cartilage masks into triangle surfaces, measures
//! cartilage thickness along SVD surface normals, reconstructs the
//! pseudo-healthy cartilage footprint on the subchondral bone to quantify
//! full-thickness cartilage loss, splits the cartilage plates into 20
//! subregions with geometric rules, and reports per-region statistics.

pub mod error;
pub mod fcl;
pub mod metrics;
pub mod morphology;
pub mod parcellation;
pub mod phantom;
pub mod pipeline;
pub mod raycast;
pub mod spatial;
pub mod surface;
pub mod thickness;
pub mod warp;
pub mod volume;

pub use error::{Error, Result};
pub use fcl::{Compartment, FclParams, FclResult};
pub use metrics::RegionalReport;
pub use parcellation::{Plate, Region, SurfaceParcellation};
pub use pipeline::{run_pipeline, PipelineConfig, PipelineError};
pub use surface::{Surface, SurfacePatch};
pub use thickness::{ThicknessMap, ThicknessParams};
pub use volume::{BinaryMask, Geometry, KneeSide, LabelSchema, LabelVolume, ScalarVolume, Volume};
