//! Meter a guest inside the execution wrapper, interrupting it at several
//! points. Each stop reveals the settling-data index the counter unlocks.

use fairmarket::channel::SettlingData;
use fairmarket::crypto::{KeyPair, Preimage, SymmetricKey};
use fairmarket::enclave::vm::SUM_PROGRAM;
use fairmarket::enclave::{
    decrypt_output, encrypt_input, encrypt_settling, kh_measurement, AttestationService, ExecutionRequest,
    GuestProgram, KeyBundle, Platform, AM_CODE, KH_CODE,
};
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

fn main() {
    let mut rng = ChaCha20Rng::seed_from_u64(4);
    let input: Vec<i64> = (1..=10).collect();
    // 12 steps per word plus 8.
    let guest = GuestProgram::assemble(SUM_PROGRAM, 128).unwrap();
    let n = 8;

    for (task, stop) in [(1u64, Some(0)), (2, Some(37)), (3, Some(100)), (4, None)] {
        let mut broker = Platform::new("broker", &mut rng);
        let mut node = Platform::new("node", &mut rng);
        let mut ias = AttestationService::new(KeyPair::from_seed([1; 32]));
        ias.register(&node);
        let (am, _) = broker.instantiate_enclave(AM_CODE);
        let (kh, _) = node.instantiate_enclave(KH_CODE);
        let key = SymmetricKey::random(&mut rng);
        let bundle = KeyBundle { task, key, expected_execution: guest.measurement() };
        let env = bundle.envelope_for(&mut rng, &broker.enclave(am).unwrap().keys().exchange);
        let held = broker.am_receive_key(am, &env).unwrap();
        let cert = ias.verify(&node.remote_attest(kh).unwrap());
        let env = broker.am_provision_key(am, held, &cert, &kh_measurement(), &ias.public_key()).unwrap();
        let kh_key = node.kh_receive_key(kh, &env).unwrap();
        let (prog, _) = node.instantiate_enclave(&guest.image());
        let report = node.local_attest(prog, kh).unwrap();
        node.kh_send_key_local(kh, kh_key, &report).unwrap();

        let settling = SettlingData::generate(&mut rng, n);
        let rand_c = Preimage::random(&mut rng);
        let req = ExecutionRequest {
            task,
            encrypted_input: encrypt_input(&key, task, &input),
            encrypted_settling: encrypt_settling(&key, task, &settling),
            locks: settling.locks(),
            node_lock: rand_c.lock(),
            node_secret: rand_c,
        };
        let out = node.run_prog_kt(prog, &req, stop).unwrap();
        let r = out.report;
        print!("stop {stop:>9?}: counter {:>3} unlocks {}/{n} completed {}", r.counter, r.unlocked_index, r.completed);
        if let Some(o) = &out.output {
            print!(" output {:?}", decrypt_output(&key, &rand_c, task, o).unwrap());
        }
        println!();
    }
}
