//! Writes a fresh toy bundle: model manifest and tensors, token stream,
//! validity mask and frequency table.
//!
//!     cargo run --release --example make_toy -- OUT_DIR [SEED]

use rtn::toy::{write_toy_bundle, TOY_SEED};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut args = std::env::args().skip(1);
    let dir = args.next().ok_or("usage: make_toy OUT_DIR [SEED]")?;
    let seed = args.next().map(|s| s.parse()).transpose()?.unwrap_or(TOY_SEED);
    let bundle = write_toy_bundle(&dir, seed)?;
    println!("model     {}", bundle.manifest.display());
    println!("tokens    {}", bundle.stream.display());
    println!("mask      {}", bundle.mask.display());
    println!("freq      {}", bundle.frequencies.display());
    Ok(())
}
