// Distance-to-frontier cue: close to 2 on the observed surface, decaying
// to 0 one meter behind it.

use frontier_ssc::synth::{make_sample, SceneSpec};
use frontier_ssc::visibility::{compute_udistance, hard_lift_voxels, udistance_value, DEFAULT_GAMMA, DEFAULT_THETA};

pub fn run_example() -> Result<(), Box<dyn std::error::Error>> {
    for d in [0.0, 0.1, 0.5, 0.99, 1.0, 2.0] {
        println!("u({d:.2}) = {:.4}", udistance_value(d, DEFAULT_GAMMA, DEFAULT_THETA));
    }
    let spec = SceneSpec::bench();
    let sample = make_sample(&spec, 3)?;
    let field = compute_udistance(&spec.meta, &sample.camera, &sample.depth, DEFAULT_GAMMA, DEFAULT_THETA)?;
    let surface = hard_lift_voxels(&spec.meta, &sample.camera, &sample.depth)?;
    let mean_on_surface = surface.iter().map(|&i| field.values[i] as f64).sum::<f64>() / surface.len().max(1) as f64;
    println!(
        "{} voxels carry a nonzero cue; mean on the {} surface voxels: {mean_on_surface:.3}",
        field.nonzero_count(),
        surface.len()
    );
    Ok(())
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    run_example()
}
