pub mod channel;
pub mod cli;
pub mod crypto;
pub mod enclave;
pub mod ledger;
pub mod matching;
pub mod protocol;
