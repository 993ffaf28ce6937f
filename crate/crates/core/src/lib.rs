pub mod backbone;
pub mod error;
pub mod gapblocks;
pub mod layers;
pub mod params;
pub mod model;
pub mod labels;
pub mod losses;
pub mod metrics;
pub mod dataio;
pub mod pipeline;
pub mod cli;
