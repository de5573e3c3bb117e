// Splits the grid into visible, occluded and out-of-view voxels and
// compares the fast classifier with the ray-marching oracle.

use frontier_ssc::synth::{make_sample, SceneSpec};
use frontier_ssc::visibility::{classify_visibility, visibility_oracle, VisClass, DEFAULT_THETA_D};

pub fn run_example() -> Result<(), Box<dyn std::error::Error>> {
    let spec = SceneSpec::bench();
    let sample = make_sample(&spec, 7)?;
    let mask = classify_visibility(&spec.meta, &sample.camera, &sample.depth, DEFAULT_THETA_D)?;
    let oracle = visibility_oracle(&spec.meta, &sample.camera, &sample.depth)?;
    for (class, n) in VisClass::ALL.iter().zip(mask.counts()) {
        println!("{:<11} {n}", class.name());
    }
    let agree = mask.classes.iter().zip(&oracle.classes).filter(|(a, b)| a == b).count();
    println!("agreement with oracle: {agree}/{}", mask.classes.len());

    // Without the depth band only the camera frustum decides.
    let oov_only = classify_visibility(&spec.meta, &sample.camera, &sample.depth, f64::INFINITY)?;
    println!("visible with no depth band: {}", oov_only.counts()[0]);
    if oov_only.counts()[0] < mask.counts()[0] {
        return Err("dropping the depth band cannot shrink the visible set".into());
    }
    Ok(())
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    run_example()
}
