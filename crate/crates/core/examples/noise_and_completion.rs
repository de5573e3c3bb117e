// Perturbs visible labels along the image plane and the viewing direction,
// then trains the completion network to recover the full grid.

use frontier_ssc::mae::{add_noise, argmax_grid, depth_axis, train_mae, MaeConfig, MaeItem, MaeNet, NoiseSpec};
use frontier_ssc::stage1::TrainOptions;
use frontier_ssc::synth::{make_sample, SceneSpec};
use frontier_ssc::visibility::{classify_visibility, DEFAULT_THETA_D};

pub fn run_example() -> Result<(), Box<dyn std::error::Error>> {
    let spec = SceneSpec::bench();
    let sample = make_sample(&spec, 0)?;
    let mask = classify_visibility(&spec.meta, &sample.camera, &sample.depth, DEFAULT_THETA_D)?;
    let axis = depth_axis(&sample.camera);
    let noise = NoiseSpec::new(1, 3);
    for t in 0..noise.levels() {
        let noisy = add_noise(&sample.grid, &mask, &noise, t, 42, axis)?;
        let changed = noisy.labels.iter().zip(&sample.grid.labels).filter(|(a, b)| a != b).count();
        println!("level {t}: ranges {:?}, {changed} visible voxels changed", noise.ranges(t)?);
    }

    let mut visible_labels = sample.grid.clone();
    for (i, l) in visible_labels.labels.iter_mut().enumerate() {
        if !mask.is_visible(i) {
            *l = 0;
        }
    }
    let item = MaeItem { visible_labels, mask: mask.clone(), gt: sample.grid.clone(), context: None, depth_axis: axis };
    let cfg = MaeConfig { context_channels: 0, ..Default::default() };
    let mut net = MaeNet::new(cfg, 0);
    let trace = train_mae(std::slice::from_ref(&item), &mut net, &noise, &TrainOptions { steps: 40, ..Default::default() })?;
    println!("completion loss {:.3} -> {:.3}", trace.losses[0], trace.losses[trace.losses.len() - 1]);

    let logits = net.forward(&item.visible_labels, &mask, noise.highest_level(), None)?;
    let completed = argmax_grid(&logits, &item.gt);
    let correct = completed.labels.iter().zip(&item.gt.labels).filter(|(a, b)| a == b).count();
    println!("voxel accuracy on the training scene: {:.1}%", 100.0 * correct as f64 / item.gt.labels.len() as f64);
    Ok(())
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    run_example()
}
