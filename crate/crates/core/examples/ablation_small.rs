// A miniature ablation: few scenes, one seed, short schedules. The full
// presets use the same runner with larger settings.

use frontier_ssc::ablation::{AblationConfig, AblationRunner, Preset};
use frontier_ssc::stage1::TrainOptions;

pub fn run_example() -> Result<(), Box<dyn std::error::Error>> {
    let cfg = AblationConfig {
        train_scenes: 3,
        eval_scenes: 2,
        seeds: vec![0],
        stage1_opts: TrainOptions { steps: 4, ..Default::default() },
        mae_opts: TrainOptions { steps: 4, ..Default::default() },
        ..Default::default()
    };
    let mut runner = AblationRunner::new(cfg)?;
    let report = runner.run(Preset::Table3)?;
    print!("{}", report.to_text());
    print!("{}", report.to_csv());
    if report.rows.iter().any(|r| r.failed()) {
        return Err("an ablation row failed".into());
    }
    Ok(())
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    run_example()
}
