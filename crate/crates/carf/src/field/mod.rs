//! Neural field model: multiresolution hash-grid encoding, spherical-harmonics
//! direction encoding, MLP heads, the quantizable-component registry, and the
//! tape wiring that connects them.

pub mod forward;
pub mod hash;
pub mod model;
pub mod registry;
pub mod sh;
