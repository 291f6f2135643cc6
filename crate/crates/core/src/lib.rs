pub mod chem;
pub mod egnn;
pub mod graph;
pub mod metrics;
pub mod model;
pub mod ode;
pub mod toy;
