pub mod dataset;
pub mod diffmath;
pub mod error;
pub mod evaluator;
pub mod experiment;
pub mod geometry;
pub mod model;
pub mod pseudo_query;
pub mod scene;
pub mod seeds;
pub mod semantic_prior;
pub mod trainer;
pub mod vocab;
