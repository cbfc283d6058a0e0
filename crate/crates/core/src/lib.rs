pub mod cell_corrector;
pub mod cli_io;
pub mod error;
pub mod linalg;
pub mod microgeometry;
pub mod regimes;
pub mod sbv_lattice;
pub mod surface_mincut;

pub use error::{Error, Result};
