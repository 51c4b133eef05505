//! Open two escrows on the toy ledger: one closed with a hash-locked claim,
//! one refunded after its timeout. Conservation holds after every step.

use fairmarket::channel::PaymentPromise;
use fairmarket::crypto::{KeyPair, Preimage};
use fairmarket::ledger::{EscrowId, Ledger, PartyId};
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

fn main() {
    let mut rng = ChaCha20Rng::seed_from_u64(1);
    let (alice, bob) = (PartyId::new("alice"), PartyId::new("bob"));
    let mut ledger = Ledger::new(2, [(alice.clone(), 500), (bob.clone(), 0)]);
    let key = KeyPair::generate(&mut rng);

    let paid = ledger.open_escrow(&alice, &bob, key.public(), 100, Vec::new(), 10).unwrap();
    let secret = Preimage::random(&mut rng);
    let promise = PaymentPromise::sign(&key, paid, 0, 60, vec![secret.lock()]);
    ledger.close_escrow(paid, &promise.claim(), &[secret]).unwrap();
    report(&ledger, "after close");

    let refunded: EscrowId =
        ledger.open_escrow(&alice, &bob, key.public(), 50, Vec::new(), ledger.height() + 3).unwrap();
    assert!(ledger.refund_after_timeout(refunded).is_err(), "too early");
    ledger.advance_height(3).unwrap();
    ledger.refund_after_timeout(refunded).unwrap();
    report(&ledger, "after refund");

    println!("preimage revealed on-chain: {}", ledger.read_revealed_preimages(paid).unwrap().len());
}

fn report(ledger: &Ledger, when: &str) {
    let s = ledger.snapshot();
    println!(
        "{when:<13} balances {:?} open {} fees {} total {} conserved {}",
        s.balances.iter().map(|(p, v)| format!("{p}={v}")).collect::<Vec<_>>(),
        s.open_deposits,
        s.fee_sink,
        s.total,
        ledger.is_conserved()
    );
}
