// Trains the visible-region network for a few steps on two scenes and
// reports the loss terms and visible-voxel accuracy.

use frontier_ssc::stage1::{prepare_sample, train_stage1, visible_accuracy, Stage1Config, Stage1Net, TrainOptions};
use frontier_ssc::synth::{make_corpus, SceneSpec};

pub fn run_example() -> Result<(), Box<dyn std::error::Error>> {
    let spec = SceneSpec::bench();
    let cfg = Stage1Config { depth_range: (0.2, 8.0), ..Default::default() };
    let inputs = make_corpus(&spec, 0..2)?
        .iter()
        .map(|s| prepare_sample(&cfg, &spec.meta, s))
        .collect::<Result<Vec<_>, _>>()?;
    let mut net = Stage1Net::new(cfg, 0);
    let trace = train_stage1(&inputs, &mut net, &TrainOptions { steps: 12, ..Default::default() })?;
    for (step, p) in trace.parts.iter().enumerate().step_by(4) {
        println!(
            "step {step:>2}  ce {:.3}  geo {:.3}  sem {:.3}  depth {:.3}",
            p.ce, p.geo, p.sem, p.depth
        );
    }
    for input in &inputs {
        let out = net.forward(input)?;
        let acc = visible_accuracy(&out, input.target.as_deref().unwrap_or_default());
        println!("{} visible voxels, accuracy {:.1}%", out.visible.len(), 100.0 * acc);
    }
    Ok(())
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    run_example()
}
