// Procedural scenes: boxes on a ground plane, a pinhole camera, the
// rendered depth and image, and the voxelized labels.

use frontier_ssc::synth::{load_sample, make_sample, save_sample, SceneSpec};

pub fn run_example() -> Result<(), Box<dyn std::error::Error>> {
    let spec = SceneSpec::bench();
    let dir = tempfile::tempdir()?;
    for seed in 0..3 {
        let sample = make_sample(&spec, seed)?;
        let hist = sample.grid.histogram();
        let occupied: usize = hist[1..].iter().sum();
        let finite = sample.depth.values.iter().filter(|d| d.is_finite()).count();
        println!(
            "scene {seed}: {occupied} occupied voxels, {finite}/{} pixels hit geometry",
            sample.depth.values.len()
        );
        let path = save_sample(dir.path(), &sample)?;
        let back = load_sample(&path)?;
        if back != sample {
            return Err("saved scene did not reload identically".into());
        }
    }
    Ok(())
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    run_example()
}
