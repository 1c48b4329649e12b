//! Non-rigid registration with learned local spatial consistency: outlier
//! rejection over a deformation graph, followed by an embedded-deformation
//! non-rigid ICP fit.

pub mod consistency;
pub mod defgraph;
pub mod error;
pub mod geometry;
pub mod io;
pub mod metrics;
pub mod nicp;
pub mod par;
pub mod scnet;
pub mod synth;
pub mod training;

pub use consistency::{Correspondence, CorrespondenceSet};
pub use defgraph::DeformationGraph;
pub use error::{Error, ErrorClass, Result};
pub use geometry::{Point3, PointCloud, RigidTransform};
