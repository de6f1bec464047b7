//! Geometrized cartoon line inbetweening.
//!
//! Line drawings are converted to graphs of endpoint vertices, vertices of
//! two key frames are matched with an attention + optimal-transport
//! correspondence module, and the graphs are repositioned and fused into an
//! intermediate frame. The crate also ships a procedural synthetic dataset
//! generator with exact vertex-level correspondence labels, a from-scratch
//! reverse-mode differentiation engine used to train the pipeline, and a
//! chamfer-distance evaluation harness.

pub mod autodiff;
pub mod correspond;
pub mod embed;
pub mod eval;
pub mod geom;
pub mod learn;
pub mod model;
pub mod pipeline;
pub mod reposefuse;
pub mod synth;
pub mod tensor;
pub mod vectorize;
