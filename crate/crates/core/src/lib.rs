pub mod config;
pub mod error;
pub mod flow;
pub mod io;
pub mod losses;
pub mod metrics;
pub mod net;
pub mod scene;
pub mod tensor;
pub mod train;

pub use error::{Result, SvdcError};
pub use tensor::{Graph, Tensor, Var};
