pub mod chain;
pub mod consensus;
pub mod contracts;
pub mod net;
pub mod node;
pub mod runtime;
pub mod sim;
pub mod store;
pub mod wire;
