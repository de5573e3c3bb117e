// The command-line workflow end to end, driven in-process: generate data,
// train both stages, predict and score.

use frontier_ssc::cli::cli_main;

const CONFIG: &str = "
[scene]
preset = bench

[stage1]
steps = 3

[stage2]
steps = 3
";

pub fn run_example() -> Result<(), Box<dyn std::error::Error>> {
    let dir = tempfile::tempdir()?;
    let p = |name: &str| dir.path().join(name).to_string_lossy().into_owned();
    std::fs::write(p("run.cfg"), CONFIG)?;
    let (cfg, data, models, preds, report) = (p("run.cfg"), p("data"), p("models"), p("preds"), p("report"));
    let s1 = format!("{models}/stage1.ckpt");
    let s2 = format!("{models}/stage2.ckpt");
    let steps: [Vec<&str>; 5] = [
        vec!["gen-data", "--seeds", "0..2", "--out", &data],
        vec!["train-stage1", "--data", &data, "--out", &models],
        vec!["train-stage2", "--data", &data, "--stage1", &s1, "--out", &models],
        vec!["infer", "--data", &data, "--stage1", &s1, "--stage2", &s2, "--out", &preds],
        vec!["eval", "--pred", &preds, "--gt", &data, "--out", &report],
    ];
    for args in steps {
        let argv = ["ssc", args[0], "--config", &cfg].into_iter().chain(args[1..].iter().copied());
        let code = cli_main(argv);
        if code != 0 {
            return Err(format!("`ssc {}` exited with {code}", args.join(" ")).into());
        }
    }
    println!("{}", std::fs::read_to_string(dir.path().join("report/report.csv"))?);
    Ok(())
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    run_example()
}
