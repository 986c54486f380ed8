//! Two-party secure inference engine over the ring Z_2^L: transport, a
//! trusted dealer for correlated randomness, and the online protocol.

pub mod dealer;
pub mod protocol;
pub mod transport;

pub use dealer::{Dealer, Planner, Preprocessing, Request, Tape};
pub use protocol::{BinaryShareTensor, ProtocolError, Session, ShareTensor};
pub use transport::{Channel, Counters, PartyId, Phase, TransportError};
