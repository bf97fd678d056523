//! Generates the reference synthetic benchmark: four Gaussian blobs in four
//! dimensions, written as train/dev/test JSONL files ready for `lnl run`.
//!
//! Usage: `cargo run --example gen_blobs -- [OUT_DIR] [SEED]`
//! Defaults: `data` and seed 0.

use std::path::Path;

use lnl::data::write_jsonl;
use lnl::synth::{generate_blobs, BlobSpec};

fn centers() -> Vec<Vec<f64>> {
    vec![
        vec![2.0, 2.0, 1.0, 0.0],
        vec![-2.0, 2.0, 0.0, 1.0],
        vec![-2.0, -2.0, -1.0, 0.0],
        vec![2.0, -2.0, 0.0, -1.0],
    ]
}

fn main() {
    let mut args = std::env::args().skip(1);
    let out_dir = args.next().unwrap_or_else(|| "data".into());
    let seed: u64 = args
        .next()
        .map(|s| s.parse().expect("seed must be an unsigned integer"))
        .unwrap_or(0);

    std::fs::create_dir_all(&out_dir).expect("create output directory");

    let splits = [("train.jsonl", 2000usize, 1u64), ("dev.jsonl", 400, 2), ("test.jsonl", 400, 3)];
    for (name, n, salt) in splits {
        let spec = BlobSpec {
            n,
            centers: centers(),
            sigma: 1.5,
            seed: seed.wrapping_mul(1000).wrapping_add(salt),
        };
        let ds = generate_blobs(&spec).expect("blob generation");
        let path = Path::new(&out_dir).join(name);
        write_jsonl(&ds, &path).expect("write JSONL");
        println!("wrote {} samples to {}", ds.len(), path.display());
    }
}
