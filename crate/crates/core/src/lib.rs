pub mod constraints;
pub mod dynamics;
pub mod error;
pub mod expr;
pub mod fd;
pub mod hamilton;
pub mod linalg;
pub mod presym;
pub mod sampling;
pub mod scalar;
pub mod system;

pub use error::{Error, Result};
pub use presym::Tolerances;
pub use scalar::Real;
pub use system::LagrangianSystem;

pub type Tableau64 = system::Tableau<f64>;
pub type KernelData64 = presym::KernelData<f64>;
pub type Tableau32 = system::Tableau<f32>;
pub type KernelData32 = presym::KernelData<f32>;
