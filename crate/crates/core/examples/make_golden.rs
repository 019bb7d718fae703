//! Regenerates the committed reference instance under `golden/attention_n64/`
//! from the dense path. Only needed when the operator's definition changes.

use std::path::PathBuf;

use sla2::golden::GoldenInstance;

fn main() -> sla2::Result<()> {
    let dir = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("golden/attention_n64");
    let mut g = GoldenInstance::generate(2024, 64, 16, 8, 8, 25.0)?;
    g.write(&dir)?;
    println!(
        "wrote {} ({} of {} block pairs kept per row)",
        dir.display(),
        g.mask.keep_per_row(),
        g.mask.tn()
    );
    Ok(())
}
