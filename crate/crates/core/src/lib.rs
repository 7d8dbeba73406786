//! Persona dialogue engine grounded in habitual event schemas.

pub mod corpus;
pub mod digest;
pub mod schema;
pub mod gateway;
pub mod generation;
pub mod induction;
pub mod metrics;
pub mod par;
pub mod retrieval;
