// Lifts a 2D feature map into the voxel grid through a per-pixel depth
// distribution, then samples the lifted volume at fractional positions.

use frontier_ssc::lifting::{lift_scatter, trilinear_sample, DepthProbVolume};
use frontier_ssc::synth::{make_sample, SceneSpec};
use frontier_ssc::tensor::Tensor;
use frontier_ssc::visibility::hard_lift_voxels;

pub fn run_example() -> Result<(), Box<dyn std::error::Error>> {
    let spec = SceneSpec::bench();
    let sample = make_sample(&spec, 11)?;
    let stride = 4;
    let (fw, fh) = (sample.depth.width / stride, sample.depth.height / stride);
    let edges = DepthProbVolume::uniform_edges(0.2, 8.0, 32);
    let nbins = edges.len() - 1;

    // A sharp distribution at the rendered depth of each cell center.
    let mut point = Tensor::zeros(&[1, 1, nbins]);
    point.data[0] = 1.0;
    let binning = DepthProbVolume::new(1, 1, edges.clone(), point)?;
    let mut probs = Tensor::zeros(&[fh, fw, nbins]);
    for y in 0..fh {
        for x in 0..fw {
            let d = sample.depth.at(x * stride + stride / 2, y * stride + stride / 2) as f64;
            let bin = if d.is_finite() { binning.bin_of(d) } else { nbins - 1 };
            probs.data[(y * fw + x) * nbins + bin] = 1.0;
        }
    }
    let dp = DepthProbVolume::new(fw, fh, edges, probs)?;

    let features = Tensor::full(&[2, fh, fw], 1.0);
    let lifted = lift_scatter(&features, &dp, &spec.meta, &sample.camera)?;
    let touched: Vec<usize> = (0..lifted.hits.len()).filter(|&i| lifted.hits[i] > 0.0).collect();
    let surface = hard_lift_voxels(&spec.meta, &sample.camera, &sample.depth)?;
    let shared = touched.iter().filter(|i| surface.contains(i)).count();
    println!("{} voxels received features, {shared} of them on the observed surface", touched.len());

    let samples = trilinear_sample(&lifted.volume, &[[3.5, 10.25, 1.5], [16.0, 16.0, 2.0]])?;
    println!("trilinear samples: {:?}", samples.channel(0));
    Ok(())
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    run_example()
}
