pub mod confidence;
pub mod geom;
pub mod io;
pub mod metrics;
pub mod motion;
pub mod pipeline;
pub mod pyramid;
pub mod raster;
pub mod registration;
pub mod solver;
pub mod synthgen;
pub mod warpfield;
