//! One channel, three tasks, two on-chain transactions.
//!
//! Each task gets `n` compute promises and a delivery promise. The payee
//! folds every round into its balance off-chain and closes once at the end.

use fairmarket::channel::{Alpha, KnownPreimages, PaymentChannel, PaymentPlan, SettlingData};
use fairmarket::crypto::{KeyPair, Preimage};
use fairmarket::ledger::{Ledger, PartyId};
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

fn main() {
    let mut rng = ChaCha20Rng::seed_from_u64(2);
    let (client, broker) = (PartyId::new("client"), PartyId::new("broker"));
    let mut ledger = Ledger::new(1, [(client.clone(), 1_000)]);
    let key = KeyPair::generate(&mut rng);

    let mut payer = PaymentChannel::open(&mut ledger, &client, &broker, key.public(), 600, 100).unwrap();
    let mut payee = PaymentChannel::watch(payer.escrow, client.clone(), broker.clone(), key.public(), 600);
    let mut last = None;

    for task in 0..3 {
        let settling = SettlingData::generate(&mut rng, 4);
        let (h_p, h_b) = (Preimage::random(&mut rng), Preimage::random(&mut rng));
        let plan =
            PaymentPlan::new(150, Alpha::from_f64(0.6).unwrap(), settling.locks(), h_p.lock(), h_b.lock()).unwrap();
        let mut round = payer.issue_compute_promises(&key, &plan).unwrap();
        round.push(payer.issue_delivery_promise(&key, &plan).unwrap());
        payee.receive_round(&round).unwrap();
        println!("task {task}: promises {:?}", round.iter().map(|p| p.value).collect::<Vec<_>>());

        // The first task stops after two compute steps; the rest deliver.
        let mut known = KnownPreimages::new();
        if task == 0 {
            known.insert(settling.for_index(2).unwrap());
        } else {
            known.extend([&h_p, &h_b]);
        }
        last = payee.select_closing_promise(&known);
        payer.settle_off_chain(&known).unwrap();
        println!("        settled balance {}", payee.settle_off_chain(&known).unwrap());
    }

    let (promise, preimages) = last.unwrap();
    payee.close(&mut ledger, &promise, &preimages).unwrap();
    println!("closed at {}; on-chain txs for the channel: {}", promise.value, ledger.transactions_for(payer.escrow));
    println!("broker now holds {}", ledger.balance(&broker));
}
