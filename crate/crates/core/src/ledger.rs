//! Simulated settlement layer: accounts, escrow contracts, hash-locks,
//! time-outs and a flat per-transaction fee.
//!
//! The ledger is a single global chain with instant finality. Every
//! transition is appended to an ordered log, and a closed escrow publishes
//! the preimages it was closed with so any party can read them back.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::crypto::{self, Digest, Preimage, PublicKey, Signature};

pub const DEFAULT_FEE: u64 = 1;

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct PartyId(pub String);

impl PartyId {
    pub fn new(id: impl Into<String>) -> Self {
        Self(id.into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for PartyId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<&str> for PartyId {
    fn from(s: &str) -> Self {
        Self(s.to_string())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct EscrowId(pub u64);

impl fmt::Display for EscrowId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "escrow-{}", self.0)
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum LedgerError {
    #[error("insufficient funds: need {need}, have {have}")]
    InsufficientFunds { need: u64, have: u64 },
    #[error("time-out {timeout} is not after current height {height}")]
    InvalidTimeout { timeout: u64, height: u64 },
    #[error("deposit {deposit} must be positive and cover the fee {fee}")]
    InvalidDeposit { deposit: u64, fee: u64 },
    #[error("an escrow carries at most two static hash-locks, got {0}")]
    InvalidLocks(usize),
    #[error("unknown escrow {0}")]
    UnknownEscrow(EscrowId),
    #[error("a preimage does not open its hash-lock")]
    WrongPreimage,
    #[error("escrow expired at height {timeout}")]
    Expired { timeout: u64 },
    #[error("escrow already closed or refunded")]
    AlreadyClosed,
    #[error("claim {claim} exceeds deposit {deposit}")]
    OverClaim { claim: u64, deposit: u64 },
    #[error("claim {claim} does not cover the fee {fee}")]
    ClaimBelowFee { claim: u64, fee: u64 },
    #[error("claim is not signed by the payer")]
    BadSignature,
    #[error("escrow has not expired (time-out {timeout}, height {height})")]
    NotExpired { timeout: u64, height: u64 },
    #[error("escrow is not closed")]
    NotClosed,
    #[error("height can only advance by at least one block")]
    ZeroAdvance,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EscrowState {
    Open,
    Closed,
    Refunded,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EscrowContract {
    pub id: EscrowId,
    pub payer: PartyId,
    pub payee: PartyId,
    pub payer_key: PublicKey,
    pub deposit: u64,
    pub timeout: u64,
    /// Static hash-locks fixed at creation. Empty for channel escrows, whose
    /// locks are carried by the signed claim instead.
    pub locks: Vec<Digest>,
    pub state: EscrowState,
    pub opened_at: u64,
    pub revealed: Vec<Preimage>,
    pub claimed: Option<u64>,
}

/// A payer-signed authorization to transfer `value` out of an escrow once
/// every lock is opened.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Claim {
    pub sequence: u64,
    pub value: u64,
    pub locks: Vec<Digest>,
    pub signature: Signature,
}

/// Canonical bytes covered by a claim signature: fixed field order, decimal
/// integers, lowercase hex digests.
pub fn claim_message(escrow: EscrowId, sequence: u64, value: u64, locks: &[Digest]) -> Vec<u8> {
    let locks = locks.iter().map(Digest::to_hex).collect::<Vec<_>>().join(",");
    format!("payment-promise:v1;channel={};sequence={sequence};value={value};locks={locks}", escrow.0).into_bytes()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TxKind {
    OpenEscrow {
        escrow: EscrowId,
        payer: PartyId,
        payee: PartyId,
        deposit: u64,
        locks: Vec<Digest>,
        timeout: u64,
    },
    CloseEscrow {
        escrow: EscrowId,
        sequence: u64,
        value: u64,
        preimages: Vec<Preimage>,
        payee_credit: u64,
        payer_refund: u64,
    },
    Refund {
        escrow: EscrowId,
        amount: u64,
    },
}

impl TxKind {
    pub fn escrow(&self) -> EscrowId {
        match self {
            TxKind::OpenEscrow { escrow, .. } | TxKind::CloseEscrow { escrow, .. } | TxKind::Refund { escrow, .. } => {
                *escrow
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LedgerTx {
    pub index: u64,
    pub height: u64,
    pub fee: u64,
    #[serde(flatten)]
    pub kind: TxKind,
}

/// Aggregate view used for conservation checks.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LedgerSnapshot {
    pub height: u64,
    pub balances: BTreeMap<PartyId, u64>,
    pub open_deposits: u64,
    pub fee_sink: u64,
    pub total: u64,
}

#[derive(Debug, Clone)]
pub struct Ledger {
    height: u64,
    fee: u64,
    accounts: BTreeMap<PartyId, u64>,
    escrows: BTreeMap<EscrowId, EscrowContract>,
    fee_sink: u64,
    log: Vec<LedgerTx>,
    next_escrow: u64,
    genesis_total: u64,
}

impl Ledger {
    pub fn new(fee: u64, genesis: impl IntoIterator<Item = (PartyId, u64)>) -> Self {
        let accounts: BTreeMap<PartyId, u64> = genesis.into_iter().collect();
        let genesis_total = accounts.values().sum();
        Self {
            height: 0,
            fee,
            accounts,
            escrows: BTreeMap::new(),
            fee_sink: 0,
            log: Vec::new(),
            next_escrow: 0,
            genesis_total,
        }
    }

    pub fn height(&self) -> u64 {
        self.height
    }

    pub fn fee(&self) -> u64 {
        self.fee
    }

    pub fn balance(&self, party: &PartyId) -> u64 {
        self.accounts.get(party).copied().unwrap_or(0)
    }

    pub fn accounts(&self) -> &BTreeMap<PartyId, u64> {
        &self.accounts
    }

    pub fn fee_sink(&self) -> u64 {
        self.fee_sink
    }

    pub fn escrow(&self, id: EscrowId) -> Option<&EscrowContract> {
        self.escrows.get(&id)
    }

    pub fn escrows(&self) -> impl Iterator<Item = &EscrowContract> {
        self.escrows.values()
    }

    pub fn log(&self) -> &[LedgerTx] {
        &self.log
    }

    pub fn genesis_total(&self) -> u64 {
        self.genesis_total
    }

    pub fn open_deposits(&self) -> u64 {
        self.escrows.values().filter(|e| e.state == EscrowState::Open).map(|e| e.deposit).sum()
    }

    pub fn total_value(&self) -> u64 {
        self.accounts.values().sum::<u64>() + self.open_deposits() + self.fee_sink
    }

    pub fn is_conserved(&self) -> bool {
        self.total_value() == self.genesis_total
    }

    pub fn snapshot(&self) -> LedgerSnapshot {
        LedgerSnapshot {
            height: self.height,
            balances: self.accounts.clone(),
            open_deposits: self.open_deposits(),
            fee_sink: self.fee_sink,
            total: self.total_value(),
        }
    }

    pub fn open_escrow(
        &mut self,
        payer: &PartyId,
        payee: &PartyId,
        payer_key: PublicKey,
        deposit: u64,
        locks: Vec<Digest>,
        timeout: u64,
    ) -> Result<EscrowId, LedgerError> {
        if locks.len() > 2 {
            return Err(LedgerError::InvalidLocks(locks.len()));
        }
        if deposit == 0 || deposit < self.fee {
            return Err(LedgerError::InvalidDeposit { deposit, fee: self.fee });
        }
        if timeout <= self.height {
            return Err(LedgerError::InvalidTimeout { timeout, height: self.height });
        }
        let need = deposit + self.fee;
        let have = self.balance(payer);
        if have < need {
            return Err(LedgerError::InsufficientFunds { need, have });
        }
        *self.accounts.entry(payer.clone()).or_insert(0) -= need;
        self.fee_sink += self.fee;

        let id = EscrowId(self.next_escrow);
        self.next_escrow += 1;
        self.escrows.insert(
            id,
            EscrowContract {
                id,
                payer: payer.clone(),
                payee: payee.clone(),
                payer_key,
                deposit,
                timeout,
                locks: locks.clone(),
                state: EscrowState::Open,
                opened_at: self.height,
                revealed: Vec::new(),
                claimed: None,
            },
        );
        self.append(TxKind::OpenEscrow {
            escrow: id,
            payer: payer.clone(),
            payee: payee.clone(),
            deposit,
            locks,
            timeout,
        });
        Ok(id)
    }

    /// Settle an escrow with a payer-signed claim. The payee receives the
    /// claimed value minus the fee and the payer gets back the remainder.
    pub fn close_escrow(&mut self, id: EscrowId, claim: &Claim, preimages: &[Preimage]) -> Result<(), LedgerError> {
        let fee = self.fee;
        let height = self.height;
        let escrow = self.escrows.get(&id).ok_or(LedgerError::UnknownEscrow(id))?;
        if escrow.state != EscrowState::Open {
            return Err(LedgerError::AlreadyClosed);
        }
        if height >= escrow.timeout {
            return Err(LedgerError::Expired { timeout: escrow.timeout });
        }
        let message = claim_message(id, claim.sequence, claim.value, &claim.locks);
        if !crypto::verify(&escrow.payer_key, &message, &claim.signature) {
            return Err(LedgerError::BadSignature);
        }
        if claim.locks.is_empty() || claim.locks.len() > 2 {
            return Err(LedgerError::InvalidLocks(claim.locks.len()));
        }
        if !escrow.locks.is_empty() && escrow.locks != claim.locks {
            return Err(LedgerError::WrongPreimage);
        }
        if preimages.len() != claim.locks.len() || !preimages.iter().zip(&claim.locks).all(|(p, l)| p.opens(l)) {
            return Err(LedgerError::WrongPreimage);
        }
        if claim.value > escrow.deposit {
            return Err(LedgerError::OverClaim { claim: claim.value, deposit: escrow.deposit });
        }
        if claim.value < fee {
            return Err(LedgerError::ClaimBelowFee { claim: claim.value, fee });
        }

        let payee_credit = claim.value - fee;
        let payer_refund = escrow.deposit - claim.value;
        let (payer, payee) = (escrow.payer.clone(), escrow.payee.clone());
        *self.accounts.entry(payee).or_insert(0) += payee_credit;
        *self.accounts.entry(payer).or_insert(0) += payer_refund;
        self.fee_sink += fee;

        let escrow = self.escrows.get_mut(&id).expect("checked above");
        escrow.state = EscrowState::Closed;
        escrow.revealed = preimages.to_vec();
        escrow.claimed = Some(claim.value);
        self.append(TxKind::CloseEscrow {
            escrow: id,
            sequence: claim.sequence,
            value: claim.value,
            preimages: preimages.to_vec(),
            payee_credit,
            payer_refund,
        });
        Ok(())
    }

    /// Return the deposit to the payer once the time-out has passed. The
    /// refund transaction pays the flat fee out of the deposit.
    pub fn refund_after_timeout(&mut self, id: EscrowId) -> Result<(), LedgerError> {
        let fee = self.fee;
        let height = self.height;
        let escrow = self.escrows.get_mut(&id).ok_or(LedgerError::UnknownEscrow(id))?;
        if escrow.state != EscrowState::Open {
            return Err(LedgerError::AlreadyClosed);
        }
        if height < escrow.timeout {
            return Err(LedgerError::NotExpired { timeout: escrow.timeout, height });
        }
        escrow.state = EscrowState::Refunded;
        let amount = escrow.deposit - fee;
        let payer = escrow.payer.clone();
        *self.accounts.entry(payer).or_insert(0) += amount;
        self.fee_sink += fee;
        self.append(TxKind::Refund { escrow: id, amount });
        Ok(())
    }

    pub fn advance_height(&mut self, blocks: u64) -> Result<(), LedgerError> {
        if blocks == 0 {
            return Err(LedgerError::ZeroAdvance);
        }
        self.height += blocks;
        Ok(())
    }

    pub fn read_revealed_preimages(&self, id: EscrowId) -> Result<Vec<Preimage>, LedgerError> {
        let escrow = self.escrows.get(&id).ok_or(LedgerError::UnknownEscrow(id))?;
        match escrow.state {
            EscrowState::Closed => Ok(escrow.revealed.clone()),
            _ => Err(LedgerError::NotClosed),
        }
    }

    /// Every preimage published by any close so far, in log order.
    pub fn all_revealed_preimages(&self) -> impl Iterator<Item = &Preimage> {
        self.log.iter().flat_map(|tx| match &tx.kind {
            TxKind::CloseEscrow { preimages, .. } => preimages.as_slice(),
            _ => &[],
        })
    }

    pub fn transactions_for(&self, id: EscrowId) -> usize {
        self.log.iter().filter(|tx| tx.kind.escrow() == id).count()
    }

    fn append(&mut self, kind: TxKind) {
        let index = self.log.len() as u64;
        self.log.push(LedgerTx { index, height: self.height, fee: self.fee, kind });
    }
}
