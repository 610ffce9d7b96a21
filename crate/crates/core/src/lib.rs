pub mod cli;
pub mod error;
pub mod givens;
pub mod hmc;
pub mod ingest;
pub mod io;
pub mod metrics;
pub mod model;
pub mod pipeline;
pub mod sim;
pub mod spd;
pub mod special;
