// Scores a prediction against ground truth: geometric IoU, semantic mIoU
// and the same split by visibility class.

use frontier_ssc::eval::{compute_iou, compute_miou, evaluate};
use frontier_ssc::grid::{GridMeta, VoxelGrid};
use frontier_ssc::synth::{make_sample, SceneSpec};
use frontier_ssc::visibility::{classify_visibility, DEFAULT_THETA_D};

pub fn run_example() -> Result<(), Box<dyn std::error::Error>> {
    // Six voxels; two shared occupied, two false positives, two misses.
    let meta = GridMeta::new([0.0; 3], 1.0, [6, 1, 1])?;
    let gt = VoxelGrid::new(meta, vec![1, 1, 1, 1, 0, 0])?;
    let pred = VoxelGrid::new(meta, vec![1, 1, 0, 0, 2, 2])?;
    println!("toy IoU {:.4}", compute_iou(&pred, &gt)?);

    let spec = SceneSpec::bench();
    let sample = make_sample(&spec, 5)?;
    let mask = classify_visibility(&spec.meta, &sample.camera, &sample.depth, DEFAULT_THETA_D)?;
    // An observer that only keeps what it saw.
    let mut seen = sample.grid.clone();
    for (i, l) in seen.labels.iter_mut().enumerate() {
        if !mask.is_visible(i) {
            *l = 0;
        }
    }
    let (miou, per_class) = compute_miou(&seen, &sample.grid, spec.num_classes)?;
    println!("visible-only prediction: mIoU {miou:.4} over {} classes", per_class.len());
    let report = evaluate(&seen, &sample.grid, Some(&mask), spec.num_classes)?;
    print!("{}", report.to_text());
    Ok(())
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    run_example()
}
