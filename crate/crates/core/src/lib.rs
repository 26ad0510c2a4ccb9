//! Split execution of a decoder transformer: frozen affine layers live in a
//! shared, stateless base executor; adapters, attention, norms and runtime
//! state live in independent clients.

pub mod client;
pub mod executor;
pub mod kv;
pub mod ledger;
pub mod model;
pub mod optim;
pub mod oracle;
pub mod privacy;
pub mod protocol;
pub mod sim;
pub mod tensor;
pub mod transport;

pub use kv::{KVCache, Placement};
pub use ledger::{Category, MemoryLedger, Owner};
pub use model::{BaseModel, LayerAddress, ModelConfig, Role, TokenBatch};
pub use tensor::{AffineParams, Tensor};
