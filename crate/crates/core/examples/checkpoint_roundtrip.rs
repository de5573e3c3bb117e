// Saves network parameters to a checkpoint file and restores them into a
// freshly initialized network.

use frontier_ssc::checkpoint::{decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint};
use frontier_ssc::mae::{MaeConfig, MaeNet};
use frontier_ssc::stage1::{Stage1Config, Stage1Net};

pub fn run_example() -> Result<(), Box<dyn std::error::Error>> {
    let dir = tempfile::tempdir()?;
    let trained = Stage1Net::new(Stage1Config::default(), 1);
    let path = dir.path().join("stage1.ckpt");
    save_checkpoint(&trained, &path)?;
    let params = decode_checkpoint(&std::fs::read(&path)?)?;
    let floats: usize = params.iter().map(|p| p.data.len()).sum();
    println!("{} tensors, {floats} values", params.len());

    let mut fresh = Stage1Net::new(Stage1Config::default(), 2);
    load_checkpoint(&mut fresh, &path)?;
    if encode_checkpoint(&fresh)? != encode_checkpoint(&trained)? {
        return Err("restored parameters differ".into());
    }

    // A network of a different shape refuses the file.
    let mut other = MaeNet::new(MaeConfig::default(), 0);
    match load_checkpoint(&mut other, &path) {
        Err(e) => println!("mismatched network rejected: {e}"),
        Ok(()) => return Err("mismatched checkpoint was accepted".into()),
    }
    Ok(())
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    run_example()
}
