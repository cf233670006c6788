//! Renders a synthetic scene, saves it as a manifest plus rasters and loads
//! it back.
//!
//! Run with `cargo run --example scene_roundtrip -- [out_dir]`.

use restyle::scene::{load_scene, save_scene, synth_scene, SynthConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let dir = std::env::args()
        .nth(1)
        .map(std::path::PathBuf::from)
        .unwrap_or_else(|| std::env::temp_dir().join("restyle_scene_example"));
    let (scene, truth) = synth_scene(&SynthConfig::pan(48, 32, 4, 8), 8)?;
    let manifest = save_scene(&scene, &dir)?;
    let loaded = load_scene(&manifest)?;
    assert_eq!(loaded, scene);
    println!("{} frames, labels {:?}", loaded.len(), loaded.labels);
    for (&(i, j), pair) in truth.pairs.iter().filter(|((i, _), _)| *i == 0) {
        let covis = pair.covisible.iter().filter(|v| **v).count();
        println!("frame {i} -> {j}: {covis} co-visible pixels");
    }
    println!("manifest at {}", manifest.display());
    Ok(())
}
