//! Numeric substrate for the thermal-to-visible reconstruction pipeline:
//! tensors, a small reverse-mode autograd engine, seeded random streams,
//! checkpoints, PNG I/O and the Adam optimizer.

pub mod checkpoint;
mod error;
pub mod graph;
pub mod image;
mod kernels;
pub mod real;
pub mod optim;
pub mod params;
pub mod rng;
pub mod tensor;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
pub use error::{Error, Result};
pub use graph::{Gradients, Graph, GraphOf, Var};
pub use image::{load_image, save_image, ColorSpace, Image};
pub use optim::Adam;
pub use params::{Bound, ParamStore};
pub use rng::{make_rng, RngStream};
pub use real::Real;
pub use tensor::{Array, Tensor};
