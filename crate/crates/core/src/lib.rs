pub mod bench;
pub mod coherence;
pub mod index;
pub mod pool;
pub mod rpc;
pub mod sched;
pub mod stats;
pub mod transfer;
pub mod verify;
pub mod workers;
