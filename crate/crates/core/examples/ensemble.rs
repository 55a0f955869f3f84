//! Ensembles over stored predictions, written to and read back from disk.
//!
//! cargo run --example ensemble

use fusionkit::ensemble::{ensemble, EnsembleMethod};
use fusionkit::{accuracy, mlp_forward, synth, PredictionMatrix};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let fx = synth::generate(7);
    let dir = tempfile::tempdir()?;
    let (task, data) = &fx.datasets[0];

    let mut paths = Vec::new();
    for (name, model) in &fx.experts {
        let path = dir.path().join(format!("{name}.safetensors"));
        mlp_forward(model, &data.features)?.save(&path)?;
        paths.push(path);
    }
    let preds = paths.iter().map(PredictionMatrix::load).collect::<Result<Vec<_>, _>>()?;
    for p in &preds {
        println!("{} alone on {task}: {:.3}", p.name, accuracy(p, &data.labels)?);
    }
    for (method, weights) in [
        (EnsembleMethod::Simple, None),
        (EnsembleMethod::Weighted, Some(vec![0.8, 0.2])),
        (EnsembleMethod::MaxModel, None),
    ] {
        let out = ensemble(method, &preds, weights.as_deref())?;
        println!("{method:?} on {task}: {:.3}", accuracy(&out, &data.labels)?);
    }
    Ok(())
}
