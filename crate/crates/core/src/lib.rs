pub mod error;
pub mod numerics;
pub mod graph;
pub mod gcca;
pub mod contrastive;
pub mod data;
pub mod pipeline;
pub mod baselines;
pub mod evaluation;
