//! Unidirectional payment channels and the per-task promise schedule.
//!
//! A task worth `v` is split into a work portion `v_c = floor(alpha * v)`
//! paid out through `n` cumulative compute promises, each locked by one
//! settling-data digest, and a delivery promise worth the full `v` locked by
//! two digests. Promise values are cumulative on top of the channel's
//! unsettled balance (`debt_P` on client channels, `cred_C` on node channels).

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::crypto::{self, Digest, KeyPair, Preimage, PublicKey, Signature};
use crate::ledger::{self, Claim, EscrowId, Ledger, LedgerError, PartyId};

pub const DEFAULT_PROMISE_COUNT: u32 = 10;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ChannelError {
    #[error("channel is not active")]
    NotActive,
    #[error("promise value {requested} exceeds channel capacity {capacity}")]
    CapacityExceeded { requested: u64, capacity: u64 },
    #[error("client promise rejected: {0}")]
    BadClientPromise(String),
    #[error("no issued promise is claimable with the revealed preimages")]
    NoClaimablePromise,
    #[error("invalid payment plan: {0}")]
    InvalidPlan(String),
    #[error("promise does not validate against this channel")]
    InvalidPromise,
    #[error(transparent)]
    Ledger(#[from] LedgerError),
}

/// Fraction in [0, 1] stored in parts per million so that `floor(alpha * v)`
/// is exact integer arithmetic.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Alpha(u32);

impl Alpha {
    pub const SCALE: u32 = 1_000_000;

    pub fn from_ppm(ppm: u32) -> Option<Self> {
        (ppm <= Self::SCALE).then_some(Self(ppm))
    }

    /// Rounds to the nearest part per million.
    pub fn from_f64(alpha: f64) -> Option<Self> {
        if !(0.0..=1.0).contains(&alpha) {
            return None;
        }
        Self::from_ppm((alpha * Self::SCALE as f64).round() as u32)
    }

    pub fn ppm(self) -> u32 {
        self.0
    }

    pub fn as_f64(self) -> f64 {
        self.0 as f64 / Self::SCALE as f64
    }

    pub fn apply(self, total: u64) -> u64 {
        (total as u128 * self.0 as u128 / Self::SCALE as u128) as u64
    }
}

/// Cumulative value of the `index`-th compute promise (1-based).
pub fn compute_promise_value(base: u64, index: u64, work_value: u64, count: u64) -> u64 {
    base + (index as u128 * work_value as u128 / count as u128) as u64
}

/// The preimages a client picks for one task, one per compute promise.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SettlingData(pub Vec<Preimage>);

impl SettlingData {
    pub fn generate<R: rand::RngCore + ?Sized>(rng: &mut R, count: usize) -> Self {
        Self((0..count).map(|_| Preimage::random(rng)).collect())
    }

    pub fn locks(&self) -> Vec<Digest> {
        self.0.iter().map(Preimage::lock).collect()
    }

    /// The preimage unlocking compute promise `index` (1-based).
    pub fn for_index(&self, index: usize) -> Option<Preimage> {
        index.checked_sub(1).and_then(|i| self.0.get(i)).copied()
    }
}

/// Payment parameters of one task as seen on one channel.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PaymentPlan {
    pub total: u64,
    pub alpha: Alpha,
    pub locks: Vec<Digest>,
    /// `h_P`, the client's delivery lock.
    pub client_lock: Digest,
    /// `h_B` on the client channel, `h_C` on the node channel.
    pub counterparty_lock: Digest,
}

impl PaymentPlan {
    pub fn new(
        total: u64,
        alpha: Alpha,
        locks: Vec<Digest>,
        client_lock: Digest,
        counterparty_lock: Digest,
    ) -> Result<Self, ChannelError> {
        if locks.is_empty() {
            return Err(ChannelError::InvalidPlan("at least one compute promise is required".into()));
        }
        if total == 0 {
            return Err(ChannelError::InvalidPlan("task value must be positive".into()));
        }
        Ok(Self { total, alpha, locks, client_lock, counterparty_lock })
    }

    pub fn count(&self) -> u64 {
        self.locks.len() as u64
    }

    /// `v_c`
    pub fn work_value(&self) -> u64 {
        self.alpha.apply(self.total)
    }

    /// `v_d`
    pub fn delivery_value(&self) -> u64 {
        self.total - self.work_value()
    }

    pub fn delivery_locks(&self) -> Vec<Digest> {
        vec![self.client_lock, self.counterparty_lock]
    }

    /// Same schedule with a different second delivery lock; used by the
    /// broker when re-issuing the client's schedule to a node.
    pub fn with_counterparty_lock(&self, lock: Digest) -> Self {
        Self { counterparty_lock: lock, ..self.clone() }
    }

    /// Promise value for compute index `i` (1-based) over `base`.
    pub fn compute_value(&self, base: u64, index: u64) -> u64 {
        compute_promise_value(base, index, self.work_value(), self.count())
    }
}

/// Signed, hash-locked, cumulative transfer on one channel.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PaymentPromise {
    pub channel: EscrowId,
    pub sequence: u64,
    pub value: u64,
    pub locks: Vec<Digest>,
    pub signature: Signature,
}

impl PaymentPromise {
    pub fn sign(signer: &KeyPair, channel: EscrowId, sequence: u64, value: u64, locks: Vec<Digest>) -> Self {
        let signature = signer.sign(&ledger::claim_message(channel, sequence, value, &locks));
        Self { channel, sequence, value, locks, signature }
    }

    pub fn signed_bytes(&self) -> Vec<u8> {
        ledger::claim_message(self.channel, self.sequence, self.value, &self.locks)
    }

    pub fn verify_signature(&self, payer: &PublicKey) -> bool {
        crypto::verify(payer, &self.signed_bytes(), &self.signature)
    }

    pub fn is_delivery(&self) -> bool {
        self.locks.len() == 2
    }

    pub fn claim(&self) -> Claim {
        Claim { sequence: self.sequence, value: self.value, locks: self.locks.clone(), signature: self.signature }
    }

    /// Preimages for every lock in lock order, if all are known.
    pub fn opening(&self, known: &KnownPreimages) -> Option<Vec<Preimage>> {
        self.locks.iter().map(|l| known.get(l)).collect()
    }
}

/// Preimages a party has learned, indexed by the lock they open.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct KnownPreimages(BTreeMap<Digest, Preimage>);

impl KnownPreimages {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, preimage: Preimage) {
        self.0.insert(preimage.lock(), preimage);
    }

    pub fn extend<'a>(&mut self, preimages: impl IntoIterator<Item = &'a Preimage>) {
        for p in preimages {
            self.insert(*p);
        }
    }

    pub fn get(&self, lock: &Digest) -> Option<Preimage> {
        self.0.get(lock).copied()
    }

    pub fn contains(&self, lock: &Digest) -> bool {
        self.0.contains_key(lock)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

impl<'a> FromIterator<&'a Preimage> for KnownPreimages {
    fn from_iter<I: IntoIterator<Item = &'a Preimage>>(iter: I) -> Self {
        let mut k = Self::new();
        k.extend(iter);
        k
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChannelState {
    Active,
    Closing,
    Closed,
}

/// One direction of value flow backed by an on-ledger escrow.
///
/// Promises are grouped into rounds, one per task. Monotonicity is enforced
/// within a round; a settled round fixes `balance` and the next round builds
/// on it.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PaymentChannel {
    pub escrow: EscrowId,
    pub payer: PartyId,
    pub payee: PartyId,
    pub payer_key: PublicKey,
    pub capacity: u64,
    /// `debt_P` or `cred_C`: value settled off-chain and not yet closed.
    pub balance: u64,
    pub issued: Vec<PaymentPromise>,
    pub state: ChannelState,
    round_start: usize,
    next_sequence: u64,
}

impl PaymentChannel {
    /// Open the backing escrow and return the active channel.
    pub fn open(
        ledger: &mut Ledger,
        payer: &PartyId,
        payee: &PartyId,
        payer_key: PublicKey,
        capacity: u64,
        timeout: u64,
    ) -> Result<Self, ChannelError> {
        let escrow = ledger.open_escrow(payer, payee, payer_key, capacity, Vec::new(), timeout)?;
        Ok(Self {
            escrow,
            payer: payer.clone(),
            payee: payee.clone(),
            payer_key,
            capacity,
            balance: 0,
            issued: Vec::new(),
            state: ChannelState::Active,
            round_start: 0,
            next_sequence: 0,
        })
    }

    /// Payee's copy of a channel the payer opened.
    pub fn watch(escrow: EscrowId, payer: PartyId, payee: PartyId, payer_key: PublicKey, capacity: u64) -> Self {
        Self {
            escrow,
            payer,
            payee,
            payer_key,
            capacity,
            balance: 0,
            issued: Vec::new(),
            state: ChannelState::Active,
            round_start: 0,
            next_sequence: 0,
        }
    }

    pub fn is_active(&self) -> bool {
        self.state == ChannelState::Active
    }

    pub fn current_round(&self) -> &[PaymentPromise] {
        &self.issued[self.round_start..]
    }

    pub fn headroom(&self) -> u64 {
        self.capacity.saturating_sub(self.balance)
    }

    fn ensure_room(&self, total: u64) -> Result<(), ChannelError> {
        if !self.is_active() {
            return Err(ChannelError::NotActive);
        }
        let requested = self.balance + total;
        if requested > self.capacity {
            return Err(ChannelError::CapacityExceeded { requested, capacity: self.capacity });
        }
        Ok(())
    }

    fn push(&mut self, signer: &KeyPair, value: u64, locks: Vec<Digest>) -> PaymentPromise {
        let promise = PaymentPromise::sign(signer, self.escrow, self.next_sequence, value, locks);
        self.next_sequence += 1;
        self.issued.push(promise.clone());
        promise
    }

    /// Start a new round and issue the `n` compute promises of `plan`.
    pub fn issue_compute_promises(
        &mut self,
        signer: &KeyPair,
        plan: &PaymentPlan,
    ) -> Result<Vec<PaymentPromise>, ChannelError> {
        self.ensure_room(plan.total)?;
        self.round_start = self.issued.len();
        let base = self.balance;
        Ok(plan
            .locks
            .iter()
            .enumerate()
            .map(|(i, lock)| self.push(signer, plan.compute_value(base, i as u64 + 1), vec![*lock]))
            .collect())
    }

    pub fn issue_delivery_promise(
        &mut self,
        signer: &KeyPair,
        plan: &PaymentPlan,
    ) -> Result<PaymentPromise, ChannelError> {
        self.ensure_room(plan.total)?;
        let value = self.balance + plan.total;
        Ok(self.push(signer, value, plan.delivery_locks()))
    }

    /// Re-issue a client's schedule on this (broker to node) channel.
    ///
    /// `client_promises` holds the `n` compute promises optionally followed
    /// by the delivery promise; the output has the same shape with values
    /// rebased onto this channel's balance and `h_B` replaced by `h_C`.
    pub fn mirror_promises(
        &mut self,
        signer: &KeyPair,
        client_key: &PublicKey,
        client_base: u64,
        client_promises: &[PaymentPromise],
        client_plan: &PaymentPlan,
        node_lock: Digest,
    ) -> Result<Vec<PaymentPromise>, ChannelError> {
        check_client_schedule(client_key, client_base, client_promises, client_plan)?;
        let plan = client_plan.with_counterparty_lock(node_lock);
        let mut out = self.issue_compute_promises(signer, &plan)?;
        if client_promises.len() > plan.locks.len() {
            out.push(self.issue_delivery_promise(signer, &plan)?);
        }
        Ok(out)
    }

    /// Signature valid, within capacity, and not below any earlier promise of
    /// the same round.
    pub fn validate_promise(&self, promise: &PaymentPromise) -> bool {
        if promise.channel != self.escrow || !promise.verify_signature(&self.payer_key) {
            return false;
        }
        if promise.value > self.capacity {
            return false;
        }
        self.current_round().iter().filter(|p| p.sequence < promise.sequence).all(|p| p.value <= promise.value)
    }

    /// Highest-valued issued promise whose every lock is opened by `known`.
    pub fn select_closing_promise(&self, known: &KnownPreimages) -> Option<(PaymentPromise, Vec<Preimage>)> {
        self.claimable(known).max_by_key(|(p, _)| (p.value, p.sequence))
    }

    /// Lowest-valued claimable promise. Only a misbehaving payee closes with it.
    pub fn select_lowest_promise(&self, known: &KnownPreimages) -> Option<(PaymentPromise, Vec<Preimage>)> {
        self.claimable(known).min_by_key(|(p, _)| (p.value, p.sequence))
    }

    fn claimable<'a>(
        &'a self,
        known: &'a KnownPreimages,
    ) -> impl Iterator<Item = (PaymentPromise, Vec<Preimage>)> + 'a {
        self.issued.iter().filter_map(move |p| p.opening(known).map(|pre| (p.clone(), pre)))
    }

    pub fn claimable_value(&self, known: &KnownPreimages) -> u64 {
        self.select_closing_promise(known).map_or(0, |(p, _)| p.value)
    }

    /// Post `promise` on the ledger and close the channel.
    pub fn close(
        &mut self,
        ledger: &mut Ledger,
        promise: &PaymentPromise,
        preimages: &[Preimage],
    ) -> Result<(), ChannelError> {
        if !self.validate_promise(promise) {
            return Err(ChannelError::InvalidPromise);
        }
        self.state = ChannelState::Closing;
        match ledger.close_escrow(self.escrow, &promise.claim(), preimages) {
            Ok(()) => {
                self.state = ChannelState::Closed;
                self.balance = 0;
                Ok(())
            }
            Err(LedgerError::AlreadyClosed) => {
                self.state = ChannelState::Closed;
                Err(LedgerError::AlreadyClosed.into())
            }
            Err(e) => {
                self.state = ChannelState::Active;
                Err(e.into())
            }
        }
    }

    /// Fold the current round into the balance using preimages passed back
    /// off-chain. Returns the new balance.
    pub fn settle_off_chain(&mut self, revealed: &KnownPreimages) -> Result<u64, ChannelError> {
        if !self.is_active() {
            return Err(ChannelError::NotActive);
        }
        let best = self
            .current_round()
            .iter()
            .filter(|p| p.opening(revealed).is_some())
            .map(|p| p.value)
            .max()
            .ok_or(ChannelError::NoClaimablePromise)?;
        self.balance = self.balance.max(best);
        self.end_round();
        Ok(self.balance)
    }

    /// Payee side: accept a round of promises issued by the payer. Every
    /// promise must validate and sequences must continue the channel's.
    pub fn receive_round(&mut self, promises: &[PaymentPromise]) -> Result<(), ChannelError> {
        if !self.is_active() {
            return Err(ChannelError::NotActive);
        }
        let start = self.issued.len();
        self.round_start = start;
        let mut expected = self.next_sequence;
        for p in promises {
            if p.sequence != expected || !self.validate_promise(p) {
                self.issued.truncate(start);
                return Err(ChannelError::InvalidPromise);
            }
            self.issued.push(p.clone());
            expected += 1;
        }
        self.next_sequence = expected;
        Ok(())
    }

    /// Base value the current round builds on.
    pub fn round_base(&self) -> u64 {
        self.balance
    }

    /// Abandon the current round without changing the balance.
    pub fn end_round(&mut self) {
        self.round_start = self.issued.len();
    }
}

/// Check that a client's promises follow the schedule of `plan` over `base`.
pub fn check_client_schedule(
    client_key: &PublicKey,
    base: u64,
    promises: &[PaymentPromise],
    plan: &PaymentPlan,
) -> Result<(), ChannelError> {
    let n = plan.locks.len();
    if promises.len() != n && promises.len() != n + 1 {
        return Err(ChannelError::BadClientPromise(format!(
            "expected {n} or {} promises, got {}",
            n + 1,
            promises.len()
        )));
    }
    let mut last = 0;
    for (i, p) in promises.iter().enumerate() {
        if !p.verify_signature(client_key) {
            return Err(ChannelError::BadClientPromise(format!("promise {i} has an invalid signature")));
        }
        if p.value < last {
            return Err(ChannelError::BadClientPromise(format!("promise {i} decreases in value")));
        }
        last = p.value;
        let (expected_value, expected_locks) = if i < n {
            (plan.compute_value(base, i as u64 + 1), vec![plan.locks[i]])
        } else {
            (base + plan.total, plan.delivery_locks())
        };
        if p.value != expected_value || p.locks != expected_locks {
            return Err(ChannelError::BadClientPromise(format!("promise {i} does not match the schedule")));
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    struct Fixture {
        ledger: Ledger,
        payer_key: KeyPair,
        channel: PaymentChannel,
        settling: SettlingData,
        rand_p: Preimage,
        rand_x: Preimage,
    }

    fn fixture(capacity: u64, n: usize) -> Fixture {
        let mut rng = ChaCha20Rng::seed_from_u64(11);
        let payer = PartyId::from("client");
        let payee = PartyId::from("broker");
        let payer_key = KeyPair::generate(&mut rng);
        let mut ledger = Ledger::new(1, [(payer.clone(), 10_000), (payee.clone(), 0)]);
        let channel = PaymentChannel::open(&mut ledger, &payer, &payee, payer_key.public(), capacity, 1000).unwrap();
        Fixture {
            ledger,
            payer_key,
            channel,
            settling: SettlingData::generate(&mut rng, n),
            rand_p: Preimage::random(&mut rng),
            rand_x: Preimage::random(&mut rng),
        }
    }

    fn plan(f: &Fixture, total: u64, alpha: f64) -> PaymentPlan {
        PaymentPlan::new(total, Alpha::from_f64(alpha).unwrap(), f.settling.locks(), f.rand_p.lock(), f.rand_x.lock())
            .unwrap()
    }

    fn values(ps: &[PaymentPromise]) -> Vec<u64> {
        ps.iter().map(|p| p.value).collect()
    }

    #[test]
    fn compute_promises_follow_the_schedule() {
        let mut f = fixture(1000, 3);
        let p = plan(&f, 100, 0.6);
        let ps = f.channel.issue_compute_promises(&f.payer_key, &p).unwrap();
        assert_eq!(values(&ps), vec![20, 40, 60]);
        assert!(ps.iter().zip(f.settling.locks()).all(|(p, l)| p.locks == vec![l]));

        let mut f = fixture(1000, 3);
        f.channel.balance = 100;
        let p = plan(&f, 100, 0.6);
        let ps = f.channel.issue_compute_promises(&f.payer_key, &p).unwrap();
        assert_eq!(values(&ps), vec![120, 140, 160]);
    }

    #[test]
    fn uneven_division_floors_each_step_and_lands_on_the_work_value() {
        let mut f = fixture(1000, 3);
        let p = plan(&f, 10, 1.0);
        let ps = f.channel.issue_compute_promises(&f.payer_key, &p).unwrap();
        assert_eq!(values(&ps), vec![3, 6, 10]);
    }

    #[test]
    fn schedule_matches_brute_force_partition() {
        // Oracle: hand out v_c one unit at a time to n equal slots; the
        // cumulative value after slot i is the number of units whose
        // position (scaled by n) falls within the first i slots.
        for work in 0u64..60 {
            for n in 1u64..12 {
                for i in 0..=n {
                    let oracle = (0..work).filter(|unit| (unit + 1) * n <= i * work).count() as u64;
                    assert_eq!(compute_promise_value(0, i, work, n), oracle, "work={work} n={n} i={i}");
                }
                assert_eq!(compute_promise_value(7, n, work, n), 7 + work);
            }
        }
    }

    #[test]
    fn delivery_promise_carries_two_locks_and_full_value() {
        let mut f = fixture(1000, 3);
        let p = plan(&f, 100, 0.6);
        let d = f.channel.issue_delivery_promise(&f.payer_key, &p).unwrap();
        assert_eq!(d.value, 100);
        assert_eq!(d.locks, vec![f.rand_p.lock(), f.rand_x.lock()]);

        let mut f = fixture(1000, 3);
        f.channel.balance = 50;
        let p = plan(&f, 100, 0.6);
        assert_eq!(f.channel.issue_delivery_promise(&f.payer_key, &p).unwrap().value, 150);

        let mut f = fixture(120, 3);
        f.channel.balance = 50;
        let p = plan(&f, 100, 0.6);
        assert_eq!(
            f.channel.issue_delivery_promise(&f.payer_key, &p),
            Err(ChannelError::CapacityExceeded { requested: 150, capacity: 120 })
        );
    }

    fn node_channel(f: &mut Fixture, broker_key: &KeyPair) -> PaymentChannel {
        let broker = PartyId::from("broker");
        let node = PartyId::from("node");
        f.ledger = Ledger::new(1, [(broker.clone(), 10_000)]);
        PaymentChannel::open(&mut f.ledger, &broker, &node, broker_key.public(), 1000, 1000).unwrap()
    }

    #[test]
    fn mirrored_promises_share_compute_locks_and_rebase() {
        let mut f = fixture(1000, 3);
        let p = plan(&f, 100, 0.6);
        let mut client_ps = f.channel.issue_compute_promises(&f.payer_key, &p).unwrap();
        client_ps.push(f.channel.issue_delivery_promise(&f.payer_key, &p).unwrap());
        let broker_key = KeyPair::from_seed([5; 32]);
        let h_c = Preimage([77; 32]).lock();

        let mut node = node_channel(&mut f, &broker_key);
        let mirrored = node.mirror_promises(&broker_key, &f.payer_key.public(), 0, &client_ps[..3], &p, h_c).unwrap();
        assert_eq!(values(&mirrored), vec![20, 40, 60]);
        assert!(mirrored.iter().zip(&client_ps).all(|(m, c)| m.locks == c.locks));

        let mut node = node_channel(&mut f, &broker_key);
        node.balance = 7;
        let mirrored = node.mirror_promises(&broker_key, &f.payer_key.public(), 0, &client_ps, &p, h_c).unwrap();
        assert_eq!(values(&mirrored), vec![27, 47, 67, 107]);
        assert_eq!(mirrored[3].locks, vec![f.rand_p.lock(), h_c]);
    }

    #[test]
    fn mirroring_rejects_forged_client_promises() {
        let mut f = fixture(1000, 3);
        let p = plan(&f, 100, 0.6);
        let mut client_ps = f.channel.issue_compute_promises(&f.payer_key, &p).unwrap();
        client_ps[1].signature.0[0] ^= 1;
        let broker_key = KeyPair::from_seed([5; 32]);
        let mut node = node_channel(&mut f, &broker_key);
        assert!(matches!(
            node.mirror_promises(&broker_key, &f.payer_key.public(), 0, &client_ps, &p, Preimage([1; 32]).lock()),
            Err(ChannelError::BadClientPromise(_))
        ));
    }

    #[test]
    fn validation_checks_signature_monotonicity_and_capacity() {
        let mut f = fixture(1000, 3);
        let p = plan(&f, 100, 0.6);
        let ps = f.channel.issue_compute_promises(&f.payer_key, &p).unwrap();
        assert!(ps.iter().all(|p| f.channel.validate_promise(p)));

        let lower = f.channel.push(&f.payer_key, 30, vec![f.settling.locks()[0]]);
        assert!(!f.channel.validate_promise(&lower));

        let over = PaymentPromise::sign(&f.payer_key, f.channel.escrow, 99, 1001, vec![f.settling.locks()[0]]);
        assert!(!f.channel.validate_promise(&over));
    }

    #[test]
    fn closing_selection_picks_highest_claimable() {
        let mut f = fixture(1000, 3);
        let p = plan(&f, 100, 0.6);
        f.channel.issue_compute_promises(&f.payer_key, &p).unwrap();
        f.channel.issue_delivery_promise(&f.payer_key, &p).unwrap();

        let known: KnownPreimages = f.settling.0[..2].iter().collect();
        assert_eq!(f.channel.select_closing_promise(&known).unwrap().0.value, 40);

        let mut all: KnownPreimages = f.settling.0.iter().collect();
        all.insert(f.rand_p);
        all.insert(f.rand_x);
        let (best, pre) = f.channel.select_closing_promise(&all).unwrap();
        assert_eq!(best.value, 100);
        assert_eq!(pre, vec![f.rand_p, f.rand_x]);

        assert!(f.channel.select_closing_promise(&KnownPreimages::new()).is_none());
    }

    #[test]
    fn closing_selection_agrees_with_subset_enumeration() {
        let mut f = fixture(1000, 3);
        let p = plan(&f, 100, 0.6);
        f.channel.issue_compute_promises(&f.payer_key, &p).unwrap();
        f.channel.issue_delivery_promise(&f.payer_key, &p).unwrap();
        let secrets: Vec<Preimage> = f.settling.0.iter().copied().chain([f.rand_p, f.rand_x]).collect();
        for mask in 0u32..(1 << secrets.len()) {
            let subset: Vec<Preimage> =
                (0..secrets.len()).filter(|i| mask & (1 << i) != 0).map(|i| secrets[i]).collect();
            let known: KnownPreimages = subset.iter().collect();
            let oracle = f
                .channel
                .issued
                .iter()
                .filter(|p| p.locks.iter().all(|l| subset.iter().any(|s| s.lock() == *l)))
                .map(|p| p.value)
                .max();
            assert_eq!(f.channel.select_closing_promise(&known).map(|(p, _)| p.value), oracle);
        }
    }

    #[test]
    fn close_pays_the_promise_value_once() {
        let mut f = fixture(1000, 3);
        let p = plan(&f, 100, 0.6);
        let ps = f.channel.issue_compute_promises(&f.payer_key, &p).unwrap();
        let s2 = f.settling.0[1];
        f.channel.close(&mut f.ledger, &ps[1], &[s2]).unwrap();
        assert_eq!(f.ledger.balance(&PartyId::from("broker")), 39);
        assert_eq!(f.ledger.balance(&PartyId::from("client")), 10_000 - 1001 + 960);
        assert_eq!(f.channel.state, ChannelState::Closed);
        assert_eq!(
            f.channel.close(&mut f.ledger, &ps[1], &[s2]),
            Err(ChannelError::Ledger(LedgerError::AlreadyClosed))
        );
        assert!(f.ledger.is_conserved());
    }

    #[test]
    fn delivery_close_needs_both_preimages() {
        let mut f = fixture(1000, 3);
        let p = plan(&f, 100, 0.6);
        let d = f.channel.issue_delivery_promise(&f.payer_key, &p).unwrap();
        assert_eq!(
            f.channel.close(&mut f.ledger, &d, &[f.rand_p]),
            Err(ChannelError::Ledger(LedgerError::WrongPreimage))
        );
        assert!(f.channel.is_active());
    }

    #[test]
    fn off_chain_settlement_moves_the_balance() {
        let mut f = fixture(1000, 3);
        let p = plan(&f, 100, 0.6);
        f.channel.issue_compute_promises(&f.payer_key, &p).unwrap();
        f.channel.issue_delivery_promise(&f.payer_key, &p).unwrap();
        let known: KnownPreimages = f.settling.0.iter().collect();
        assert_eq!(f.channel.settle_off_chain(&known).unwrap(), 60);

        let mut f = fixture(1000, 3);
        let p = plan(&f, 100, 0.6);
        f.channel.issue_compute_promises(&f.payer_key, &p).unwrap();
        f.channel.issue_delivery_promise(&f.payer_key, &p).unwrap();
        let mut known: KnownPreimages = [f.settling.0[2]].iter().collect();
        known.insert(f.rand_p);
        known.insert(f.rand_x);
        assert_eq!(f.channel.settle_off_chain(&known).unwrap(), 100);

        let mut f = fixture(1000, 3);
        let p = plan(&f, 100, 0.6);
        f.channel.issue_compute_promises(&f.payer_key, &p).unwrap();
        assert_eq!(f.channel.settle_off_chain(&KnownPreimages::new()), Err(ChannelError::NoClaimablePromise));
    }

    #[test]
    fn rounds_build_on_the_settled_balance() {
        let mut f = fixture(1000, 3);
        let p = plan(&f, 100, 0.6);
        f.channel.issue_compute_promises(&f.payer_key, &p).unwrap();
        let known: KnownPreimages = f.settling.0.iter().collect();
        f.channel.settle_off_chain(&known).unwrap();
        let next = f.channel.issue_compute_promises(&f.payer_key, &p).unwrap();
        assert_eq!(values(&next), vec![80, 100, 120]);
        assert!(next.iter().all(|p| f.channel.validate_promise(p)));
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(64))]

            #[test]
            fn rounds_are_monotone_and_collateralized(
                total in 1u64..500,
                ppm in 0u32..=1_000_000,
                n in 1usize..16,
                base in 0u64..400,
            ) {
                let mut f = fixture(1000, n);
                f.channel.balance = base;
                let p = PaymentPlan::new(total, Alpha::from_ppm(ppm).unwrap(), f.settling.locks(), f.rand_p.lock(), f.rand_x.lock()).unwrap();
                match f.channel.issue_compute_promises(&f.payer_key, &p) {
                    Ok(ps) => {
                        let d = f.channel.issue_delivery_promise(&f.payer_key, &p).unwrap();
                        let all: Vec<_> = ps.iter().chain([&d]).collect();
                        prop_assert!(all.windows(2).all(|w| w[0].value <= w[1].value));
                        prop_assert!(all.iter().all(|p| p.value <= f.channel.capacity));
                        prop_assert_eq!(ps.last().unwrap().value, base + p.work_value());
                        prop_assert_eq!(p.work_value() + p.delivery_value(), total);
                    }
                    Err(ChannelError::CapacityExceeded { .. }) => prop_assert!(base + total > 1000),
                    Err(e) => prop_assert!(false, "{e}"),
                }
            }
        }
    }
}
