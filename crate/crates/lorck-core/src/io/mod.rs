//! On-disk formats: the `LORCK1` tensor file, checkpoint archives, and
//! PGM/PPM image export.

pub mod archive;
pub mod lorck1;
pub mod pnm;

pub use archive::Archive;
