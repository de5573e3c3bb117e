// Reads a run configuration, overrides a few keys and shows that the
// printed form parses back to the same settings.

use frontier_ssc::config::RunConfig;

const TEXT: &str = "
[scene]
preset = bench

[visibility]
theta_d = inf   # out-of-view split only

[stage2]
r_h = 1
r_d = 3
steps = 50

[run]
seeds = 0, 1, 2
";

pub fn run_example() -> Result<(), Box<dyn std::error::Error>> {
    let cfg = RunConfig::parse(TEXT)?;
    println!(
        "grid {:?}, theta_d {}, noise ({}, {}), {} seeds",
        cfg.scene.meta.dims,
        cfg.stage1.theta_d,
        cfg.noise.r_h,
        cfg.noise.r_d,
        cfg.seeds.len()
    );
    if RunConfig::parse(&cfg.to_text())? != cfg {
        return Err("printed configuration did not parse back".into());
    }
    match RunConfig::parse("[stage1]\nlearning_rate = 0.1\n") {
        Err(e) => println!("rejected: {e}"),
        Ok(_) => return Err("unknown key accepted".into()),
    }
    Ok(())
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    run_example()
}
