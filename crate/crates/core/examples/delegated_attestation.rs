//! Delegated attestation: the attestation service is consulted once for the
//! broker's manager and once for the node's key handler. Every later task key
//! moves by local attestation only. A tampered execution enclave gets nothing.

use fairmarket::crypto::{KeyPair, SymmetricKey};
use fairmarket::enclave::vm::SUM_PROGRAM;
use fairmarket::enclave::{kh_measurement, AttestationService, GuestProgram, KeyBundle, Platform, AM_CODE, KH_CODE};
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

fn main() {
    let mut rng = ChaCha20Rng::seed_from_u64(3);
    let mut ias = AttestationService::new(KeyPair::from_seed([9; 32]));
    let mut broker = Platform::new("broker", &mut rng);
    let mut node = Platform::new("node", &mut rng);
    ias.register(&broker);
    ias.register(&node);

    let (am, _) = broker.instantiate_enclave(AM_CODE);
    let (kh, _) = node.instantiate_enclave(KH_CODE);
    let am_cert = ias.verify(&broker.remote_attest(am).unwrap());
    let kh_cert = ias.verify(&node.remote_attest(kh).unwrap());
    println!("service calls after setup: {}", ias.verifications());

    let guest = GuestProgram::assemble(SUM_PROGRAM, 100).unwrap();
    for task in 1..=3 {
        let key = SymmetricKey::random(&mut rng);
        let bundle = KeyBundle { task, key, expected_execution: guest.measurement() };
        let env = bundle.envelope_for(&mut rng, &am_cert.enclave_keys().exchange);
        let held = broker.am_receive_key(am, &env).unwrap();
        let env = broker.am_provision_key(am, held, &kh_cert, &kh_measurement(), &ias.public_key()).unwrap();
        let kh_key = node.kh_receive_key(kh, &env).unwrap();

        // Task 3 runs on a host that flipped one byte of the wrapper.
        let mut image = guest.image();
        if task == 3 {
            let last = image.len() - 2;
            image[last] ^= 1;
        }
        let (prog, _) = node.instantiate_enclave(&image);
        let report = node.local_attest(prog, kh).unwrap();
        match node.kh_send_key_local(kh, kh_key, &report) {
            Ok(()) => println!("task {task}: key released to the execution enclave"),
            Err(e) => println!("task {task}: refused ({e})"),
        }
        node.destroy_enclave(prog);
    }
    println!("service calls after 3 tasks: {}", ias.verifications());
}
