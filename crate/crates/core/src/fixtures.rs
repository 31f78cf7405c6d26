//! Synthetic KDD-shaped traffic for smoke tests, demos and benchmarks.
//!
//! Each attack family gets its own cluster of feature values so that a
//! working pipeline separates them easily; nothing here resembles real
//! traffic statistics.

use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::ingest::{AttackClass, SchemaName};

/// Tags emitted by [`synthetic_kdd`], with their expected class.
pub const SYNTHETIC_TAGS: [(&str, AttackClass); 10] = [
    ("normal", AttackClass::Benign),
    ("neptune", AttackClass::DoS),
    ("smurf", AttackClass::DoS),
    ("nmap", AttackClass::Probe),
    ("ipsweep", AttackClass::Probe),
    ("portsweep", AttackClass::Probe),
    ("guess_passwd", AttackClass::R2L),
    ("warezclient", AttackClass::R2L),
    ("buffer_overflow", AttackClass::U2R),
    ("rootkit", AttackClass::U2R),
];

/// One record's 41 feature cells for `tag`.
pub fn synthetic_features(tag: &str, rng: &mut ChaCha8Rng) -> Vec<String> {
    let mut f = [0.0f64; 41];
    let (proto, service, flag);
    let jitter = |rng: &mut ChaCha8Rng, v: f64, spread: f64| (v + rng.random_range(-spread..=spread)).max(0.0);
    let rate = |rng: &mut ChaCha8Rng, v: f64| (v + rng.random_range(-0.05..=0.05)).clamp(0.0, 1.0);
    match tag {
        "neptune" => {
            (proto, service, flag) = ("tcp", "private", "S0");
            f[22] = jitter(rng, 200.0, 60.0);
            f[23] = jitter(rng, 15.0, 10.0);
            for i in [24, 25, 37, 38] {
                f[i] = rate(rng, 0.98);
            }
            f[28] = rate(rng, 0.08);
            f[31] = 255.0;
            f[32] = jitter(rng, 15.0, 10.0);
        }
        "smurf" => {
            (proto, service, flag) = ("icmp", "ecr_i", "SF");
            f[4] = jitter(rng, 1032.0, 500.0);
            f[22] = jitter(rng, 480.0, 30.0);
            f[23] = f[22];
            f[28] = 1.0;
            f[31] = 255.0;
            f[32] = 255.0;
            f[33] = 1.0;
            f[35] = rate(rng, 0.95);
        }
        "nmap" | "ipsweep" | "portsweep" => {
            proto = if tag == "ipsweep" { "icmp" } else { "tcp" };
            service = if tag == "ipsweep" { "eco_i" } else { "private" };
            flag = if tag == "portsweep" { "REJ" } else { "SF" };
            f[0] = jitter(rng, 0.0, 2.0);
            f[22] = jitter(rng, 2.0, 2.0);
            f[26] = rate(rng, if tag == "portsweep" { 0.9 } else { 0.1 });
            f[29] = rate(rng, 0.8);
            f[30] = rate(rng, 0.6);
            f[31] = jitter(rng, 40.0, 30.0);
            f[34] = rate(rng, 0.85);
            f[35] = rate(rng, 0.7);
            f[39] = rate(rng, if tag == "portsweep" { 0.9 } else { 0.2 });
        }
        "guess_passwd" | "warezclient" => {
            proto = "tcp";
            service = if tag == "guess_passwd" { "telnet" } else { "ftp_data" };
            flag = if tag == "guess_passwd" { "RSTO" } else { "SF" };
            f[0] = jitter(rng, 30.0, 25.0);
            f[4] = jitter(rng, 300.0, 200.0);
            f[5] = jitter(rng, 8000.0, 4000.0);
            f[9] = jitter(rng, 4.0, 3.0);
            f[10] = if tag == "guess_passwd" { 1.0 } else { 0.0 };
            f[11] = if tag == "warezclient" { 1.0 } else { 0.0 };
            f[21] = if tag == "warezclient" { 1.0 } else { 0.0 };
            f[31] = jitter(rng, 8.0, 5.0);
            f[36] = rate(rng, 0.5);
        }
        "buffer_overflow" | "rootkit" => {
            (proto, service, flag) = ("tcp", "telnet", "SF");
            f[0] = jitter(rng, 150.0, 100.0);
            f[4] = jitter(rng, 1500.0, 800.0);
            f[5] = jitter(rng, 4000.0, 2000.0);
            f[9] = jitter(rng, 2.0, 2.0);
            f[11] = 1.0;
            f[12] = jitter(rng, 2.0, 1.0);
            f[13] = 1.0;
            f[15] = jitter(rng, 3.0, 2.0);
            f[16] = jitter(rng, 2.0, 1.0);
            f[17] = 1.0;
            f[31] = jitter(rng, 3.0, 2.0);
        }
        _ => {
            (proto, service, flag) = ("tcp", "http", "SF");
            f[4] = jitter(rng, 250.0, 150.0);
            f[5] = jitter(rng, 3000.0, 2500.0);
            f[11] = 1.0;
            f[22] = jitter(rng, 8.0, 6.0);
            f[23] = jitter(rng, 10.0, 8.0);
            f[28] = 1.0;
            f[31] = jitter(rng, 150.0, 100.0);
            f[32] = 255.0;
            f[33] = 1.0;
            f[35] = rate(rng, 0.05);
        }
    }
    f.iter()
        .enumerate()
        .map(|(i, v)| match i {
            1 => proto.to_string(),
            2 => service.to_string(),
            3 => flag.to_string(),
            24..=30 | 33..=40 => format!("{:.2}", v),
            _ => format!("{}", v.round() as i64),
        })
        .collect()
}

/// `per_tag` records for every tag in [`SYNTHETIC_TAGS`], shuffled, as file
/// text for `schema` (KDD99 gets the trailing '.', NSL-KDD a difficulty cell).
pub fn synthetic_kdd(schema: SchemaName, per_tag: &[usize], seed: u64) -> String {
    assert_eq!(per_tag.len(), SYNTHETIC_TAGS.len(), "one count per tag");
    assert!(schema.is_kdd_family(), "KDD-family schemas only");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rows = Vec::new();
    for (&(tag, _), &n) in SYNTHETIC_TAGS.iter().zip(per_tag) {
        for _ in 0..n {
            let mut cells = synthetic_features(tag, &mut rng);
            match schema {
                SchemaName::NslKdd => {
                    cells.push(tag.to_string());
                    cells.push(rng.random_range(5..=21).to_string());
                }
                _ => cells.push(format!("{tag}.")),
            }
            rows.push(cells.join(","));
        }
    }
    rand::seq::SliceRandom::shuffle(rows.as_mut_slice(), &mut rng);
    let mut s = String::new();
    for r in rows {
        writeln!(s, "{r}").unwrap();
    }
    s
}
