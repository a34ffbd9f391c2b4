//! Transaction dissemination substrates: a replicated data-availability
//! layer, Bracha reliable broadcast, and push gossip with anti-entropy.

pub mod da;
pub mod gossip;
pub mod rbc;

pub use da::{DaParams, Dispersal, RetrievabilityCertificate, RetrieveSession, StorageNode};
pub use gossip::{GossipConfig, GossipState};
pub use rbc::{RbcAction, RbcInstance, RbcMessage, RbcTag};
