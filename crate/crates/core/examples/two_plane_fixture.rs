//! Regenerates the two-plane fixture: `cargo run --example two_plane_fixture -- <dir>`.

use defocus::synthetic::{TwoPlaneScene, FIXTURE_STACKS};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let dir = std::env::args()
        .nth(1)
        .unwrap_or_else(|| concat!(env!("CARGO_MANIFEST_DIR"), "/fixtures/two_plane").to_string());
    TwoPlaneScene::fixture().write_fixture(&dir, &FIXTURE_STACKS)?;
    println!("wrote {dir}");
    Ok(())
}
