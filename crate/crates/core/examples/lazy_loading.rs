//! Opening a checkpoint reads only its header; tensors load on demand.
//!
//! cargo run --example lazy_loading

use fusionkit::{open_lazy, save_map, synth};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let dir = tempfile::tempdir()?;
    let cp = save_map(&synth::generate(0).base, dir.path().join("base.safetensors"))?;

    let lazy = open_lazy(&cp)?;
    println!("header: {} bytes, metadata {:?}", lazy.header_size(), lazy.metadata());
    for key in lazy.keys() {
        let info = lazy.info(key).unwrap();
        println!("  {key:<16} {} {:?} bytes {:?}", info.dtype, info.shape, info.range);
    }
    let bias = lazy.load_tensor("layers.1.bias")?;
    println!("layers.1.bias = {:?}", bias.to_f64_vec());
    Ok(())
}
