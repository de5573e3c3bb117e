//! Every example under `examples/` runs to completion.

#[allow(dead_code)]
mod generate_scenes_example {
    include!(concat!(env!("CARGO_MANIFEST_DIR"), "/examples/generate_scenes.rs"));
}

#[test]
fn generate_scenes_example_runs() {
    generate_scenes_example::run_example().expect("generate_scenes example should run");
}

#[allow(dead_code)]
mod visibility_partition_example {
    include!(concat!(env!("CARGO_MANIFEST_DIR"), "/examples/visibility_partition.rs"));
}

#[test]
fn visibility_partition_example_runs() {
    visibility_partition_example::run_example().expect("visibility_partition example should run");
}

#[allow(dead_code)]
mod udistance_field_example {
    include!(concat!(env!("CARGO_MANIFEST_DIR"), "/examples/udistance_field.rs"));
}

#[test]
fn udistance_field_example_runs() {
    udistance_field_example::run_example().expect("udistance_field example should run");
}

#[allow(dead_code)]
mod lift_features_example {
    include!(concat!(env!("CARGO_MANIFEST_DIR"), "/examples/lift_features.rs"));
}

#[test]
fn lift_features_example_runs() {
    lift_features_example::run_example().expect("lift_features example should run");
}

#[allow(dead_code)]
mod gradient_check_example {
    include!(concat!(env!("CARGO_MANIFEST_DIR"), "/examples/gradient_check.rs"));
}

#[test]
fn gradient_check_example_runs() {
    gradient_check_example::run_example().expect("gradient_check example should run");
}

#[allow(dead_code)]
mod train_stage1_example {
    include!(concat!(env!("CARGO_MANIFEST_DIR"), "/examples/train_stage1.rs"));
}

#[test]
fn train_stage1_example_runs() {
    train_stage1_example::run_example().expect("train_stage1 example should run");
}

#[allow(dead_code)]
mod noise_and_completion_example {
    include!(concat!(env!("CARGO_MANIFEST_DIR"), "/examples/noise_and_completion.rs"));
}

#[test]
fn noise_and_completion_example_runs() {
    noise_and_completion_example::run_example().expect("noise_and_completion example should run");
}

#[allow(dead_code)]
mod evaluate_example {
    include!(concat!(env!("CARGO_MANIFEST_DIR"), "/examples/evaluate.rs"));
}

#[test]
fn evaluate_example_runs() {
    evaluate_example::run_example().expect("evaluate example should run");
}

#[allow(dead_code)]
mod checkpoint_roundtrip_example {
    include!(concat!(env!("CARGO_MANIFEST_DIR"), "/examples/checkpoint_roundtrip.rs"));
}

#[test]
fn checkpoint_roundtrip_example_runs() {
    checkpoint_roundtrip_example::run_example().expect("checkpoint_roundtrip example should run");
}

#[allow(dead_code)]
mod config_file_example {
    include!(concat!(env!("CARGO_MANIFEST_DIR"), "/examples/config_file.rs"));
}

#[test]
fn config_file_example_runs() {
    config_file_example::run_example().expect("config_file example should run");
}

#[allow(dead_code)]
mod ablation_small_example {
    include!(concat!(env!("CARGO_MANIFEST_DIR"), "/examples/ablation_small.rs"));
}

#[test]
fn ablation_small_example_runs() {
    ablation_small_example::run_example().expect("ablation_small example should run");
}

#[allow(dead_code)]
mod cli_pipeline_example {
    include!(concat!(env!("CARGO_MANIFEST_DIR"), "/examples/cli_pipeline.rs"));
}

#[test]
fn cli_pipeline_example_runs() {
    cli_pipeline_example::run_example().expect("cli_pipeline example should run");
}
