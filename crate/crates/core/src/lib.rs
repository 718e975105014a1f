//! Taxonomy-guided generation of biological-analogy mechanisms for
//! engineering design problems.
//!
//! The pipeline runs in stages that share one [`model::Dataset`]:
//! seeding from strategy pages ([`ingest`]), taxonomy-tree-guided expansion
//! ([`expansion`]), semantic clustering ([`clustering`]) and image lookup
//! ([`imagery`]). [`service`] serves the result over HTTP together with the
//! explain/compare/combine/critique features, and [`evaluation`] scores
//! taxonomy accuracy and organism diversity.

pub mod clustering;
pub mod evaluation;
pub mod expansion;
pub mod gateway;
pub mod imagery;
pub mod ingest;
pub mod model;
pub mod service;
pub mod taxonomy;
