//! Enhances a PNG with a trained checkpoint.
//!
//! Usage: `cargo run --example enhance_image -- model.ckpt in.png out.png`

use std::path::PathBuf;

use wavenhance::checkpoint::Checkpoint;
use wavenhance::cli::enhance_padded;
use wavenhance::dataio::{load_image, save_image};

fn main() {
    let args: Vec<PathBuf> = std::env::args_os().skip(1).map(PathBuf::from).collect();
    let [ck, input, output] = args.as_slice() else {
        eprintln!("usage: enhance_image <checkpoint> <input.png> <output.png>");
        std::process::exit(2);
    };
    let ck = Checkpoint::load(ck).expect("cannot read checkpoint");
    let x = load_image(input).expect("cannot read input");
    let y = enhance_padded(&x, &ck).expect("enhancement failed");
    save_image(&y, output).expect("cannot write output");
    println!("{} -> {}", input.display(), output.display());
}
