//! Regenerates the bundled training corpus.
//!
//! ```text
//! cargo run --example make_corpus -- data/corpus.txt
//! ```

use std::path::PathBuf;

use affattn::data::synth::generate_text;
use affattn::fsutil::write_atomic;

const CORPUS_SEED: u64 = 0;
const CORPUS_BYTES: usize = 1 << 20;

fn main() -> affattn::Result<()> {
    let out = std::env::args()
        .nth(1)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("data/corpus.txt"));
    write_atomic(&out, generate_text(CORPUS_SEED, CORPUS_BYTES).as_bytes())?;
    println!("wrote {} bytes to {}", CORPUS_BYTES, out.display());
    Ok(())
}
