//! Saves a model to the binary checkpoint format, loads it back and
//! confirms the predictions are bit-identical, for both heads and for a
//! model with the deblurring head removed.

use dfdnet::model::{Head, Model, ModelConfig};
use dfdnet::Tensor;

fn main() -> dfdnet::Result<()> {
    let dir = std::env::temp_dir().join("dfdnet_checkpoint_example");
    std::fs::create_dir_all(&dir).map_err(|e| dfdnet::Error::io(&dir, e))?;
    let image = Tensor::<f32>::from_fn(vec![1, 3, 64, 64], |i| ((i * 31) % 97) as f32 / 97.0);

    let both = Model::<f32>::build(&ModelConfig::tiny(), 4)?;
    for (label, model) in [
        ("both heads", both.clone()),
        ("depth head only", both.without_head(Head::Aif)?),
    ] {
        let path = dir.join(format!("{}.2hde", label.replace(' ', "_")));
        model.save(&path)?;
        let loaded = Model::<f32>::load(&path)?;
        let before = model.predict(&image)?;
        let after = loaded.predict(&image)?;
        let bytes = std::fs::metadata(&path)
            .map_err(|e| dfdnet::Error::io(&path, e))?
            .len();
        println!(
            "{label}: {} tensors, {bytes} bytes, predictions identical: {}",
            model.state().count(),
            before == after
        );
    }
    Ok(())
}
