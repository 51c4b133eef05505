//! Independent oracles for the integration tests. Nothing here calls into the
//! crate's interpreter or matcher.

#![allow(dead_code)]

use rand::Rng;

/// Reference interpreter over assembly text. Returns the number of
/// instructions that completed before halt, fault or `budget`.
pub fn reference_steps(source: &str, input: &[i64], budget: u64) -> u64 {
    let mut labels = std::collections::HashMap::new();
    let mut prog: Vec<(String, Option<String>)> = Vec::new();
    for raw in source.lines() {
        let text = raw.split('#').next().unwrap().trim();
        if text.is_empty() {
            continue;
        }
        if let Some(l) = text.strip_suffix(':') {
            labels.insert(l.trim().to_string(), prog.len());
            continue;
        }
        let mut it = text.split_whitespace();
        prog.push((it.next().unwrap().to_string(), it.next().map(str::to_string)));
    }
    let target = |o: &Option<String>| -> usize {
        let o = o.as_deref().unwrap();
        o.parse().unwrap_or_else(|_| labels[o])
    };

    let mut stack: Vec<i64> = Vec::new();
    let (mut pc, mut steps) = (0usize, 0u64);
    while steps < budget {
        let Some((op, arg)) = prog.get(pc) else { break };
        let need = match op.as_str() {
            "pop" | "dup" | "jz" | "load" | "store" => 1,
            "over" | "swap" | "add" | "sub" | "mul" | "eq" | "lt" => 2,
            _ => 0,
        };
        let grows = matches!(op.as_str(), "push" | "dup" | "over" | "inlen");
        if stack.len() < need || (grows && stack.len() >= 1 << 16) {
            break;
        }
        let mut next = pc + 1;
        let n = stack.len();
        match op.as_str() {
            "push" => stack.push(arg.as_ref().unwrap().parse().unwrap()),
            "pop" | "store" => {
                stack.pop();
            }
            "dup" => stack.push(stack[n - 1]),
            "over" => stack.push(stack[n - 2]),
            "swap" => stack.swap(n - 1, n - 2),
            "add" | "sub" | "mul" | "eq" | "lt" => {
                let (a, b) = (stack[n - 2], stack[n - 1]);
                stack.truncate(n - 2);
                stack.push(match op.as_str() {
                    "add" => a.wrapping_add(b),
                    "sub" => a.wrapping_sub(b),
                    "mul" => a.wrapping_mul(b),
                    "eq" => i64::from(a == b),
                    _ => i64::from(a < b),
                });
            }
            "jmp" => next = target(arg),
            "jz" => {
                if stack.pop().unwrap() == 0 {
                    next = target(arg);
                }
            }
            "load" => {
                let i = stack.pop().unwrap();
                match usize::try_from(i).ok().and_then(|i| input.get(i)) {
                    Some(&v) => stack.push(v),
                    None => break,
                }
            }
            "inlen" => stack.push(input.len() as i64),
            "halt" => return steps + 1,
            other => panic!("unknown op {other}"),
        }
        // Control may not leave the program.
        if next >= prog.len() {
            break;
        }
        pc = next;
        steps += 1;
    }
    steps
}

const SOUP: [&str; 15] =
    ["push", "pop", "dup", "over", "swap", "add", "sub", "mul", "eq", "lt", "jmp", "jz", "load", "inlen", "store"];

const NEUTRAL_BODIES: [&str; 6] = [
    "inlen\npop",
    "push 7\nstore",
    "dup\ndup\nmul\npop",
    "push 3\npush -4\nmul\npop",
    "push 0\nload\npop",
    "dup\nstore",
];

/// A random guest program and input. Half are counted loops with random
/// stack-neutral bodies (long runs), half are instruction soup with random
/// jumps (early faults, short cycles).
pub fn fuzz_program<R: Rng>(rng: &mut R) -> (String, Vec<i64>) {
    let input: Vec<i64> = (0..rng.gen_range(0..6)).map(|_| rng.gen_range(-9..=9)).collect();
    let mut src = String::new();
    if rng.gen_bool(0.5) {
        let iterations = rng.gen_range(0..1500);
        src.push_str(&format!("push {iterations}\ntop:\ndup\njz out\n"));
        for _ in 0..rng.gen_range(0..4) {
            src.push_str(NEUTRAL_BODIES[rng.gen_range(0..NEUTRAL_BODIES.len())]);
            src.push('\n');
        }
        src.push_str("push 1\nsub\njmp top\nout:\n");
        if rng.gen_bool(0.8) {
            src.push_str("halt\n");
        } else {
            src.push_str("pop\npop\nhalt\n");
        }
    } else {
        let len = rng.gen_range(1..40);
        for _ in 0..len {
            let op = if rng.gen_bool(0.1) { "halt" } else { SOUP[rng.gen_range(0..SOUP.len())] };
            match op {
                "push" => src.push_str(&format!("push {}\n", rng.gen_range(-3..=8))),
                "jmp" | "jz" => src.push_str(&format!("{op} {}\n", rng.gen_range(0..len))),
                _ => src.push_str(&format!("{op}\n")),
            }
        }
    }
    (src, input)
}

/// Maximum matching size by DP over subsets of right vertices.
pub fn brute_force_matching_size(left: usize, right: usize, edges: &[(usize, usize)]) -> usize {
    assert!(right <= 16);
    let mut adj = vec![0u32; left];
    for &(l, r) in edges {
        adj[l] |= 1 << r;
    }
    // best[mask] = most left vertices matched so far using exactly the rights in mask.
    let mut best = vec![-1i32; 1 << right];
    best[0] = 0;
    for &a in &adj {
        let mut next = best.clone();
        for (mask, &have) in best.iter().enumerate() {
            if have < 0 {
                continue;
            }
            let mut free = a & !(mask as u32);
            while free != 0 {
                let bit = free & free.wrapping_neg();
                free ^= bit;
                let m = mask | bit as usize;
                next[m] = next[m].max(have + 1);
            }
        }
        best = next;
    }
    best.into_iter().max().unwrap() as usize
}

#[test]
fn oracles_sanity() {
    assert_eq!(reference_steps("halt", &[], 10), 1);
    assert_eq!(reference_steps("pop\nhalt", &[], 10), 0);
    assert_eq!(reference_steps("top:\njmp top", &[], 10), 10);
    assert_eq!(brute_force_matching_size(3, 3, &[(0, 0), (1, 0), (2, 0)]), 1);
    assert_eq!(brute_force_matching_size(2, 2, &[(0, 0), (0, 1), (1, 0)]), 2);
}
