//! Builds the desk-scale two-headed network, runs one training-mode forward
//! and backward pass and prints the output shapes, parameter count and
//! timing.

use std::time::Instant;

use dfdnet::autodiff::Tape;
use dfdnet::model::{Head, Mode, Model, ModelConfig};
use dfdnet::Tensor;

fn main() -> dfdnet::Result<()> {
    let cfg = ModelConfig::tiny();
    let mut model = Model::<f32>::build(&cfg, 0)?;
    println!("parameters: {}", model.count_params());
    println!("encoder stages (in, out): {:?}", model.encoder_channels());
    println!(
        "depth decoder (in, out): {:?}",
        model.decoder_channels(Head::Depth)
    );
    println!(
        "deblur decoder (in, out): {:?}",
        model.decoder_channels(Head::Aif)
    );

    let (h, w) = cfg.input_size;
    let batch = 8;
    let image = Tensor::from_fn(vec![batch, 3, h, w], |i| ((i * 7919) % 255) as f32 / 255.0);

    let start = Instant::now();
    let mut tape = Tape::new();
    let vars = model.bind(&mut tape, true);
    let x = tape.constant(image.clone());
    let out = model.forward(&mut tape, &vars, x, x, Mode::Train)?;
    let (depth, aif) = (out.depth.unwrap(), out.aif.unwrap());
    println!("depth output: {:?}", tape.shape(depth)?);
    println!("deblur output: {:?}", tape.shape(aif)?);
    let forward = start.elapsed();
    let a = tape.reduce_mean(depth)?;
    let b = tape.reduce_mean(aif)?;
    let loss = tape.add(a, b)?;
    tape.backward(loss)?;
    model.accumulate_grads(&tape, &vars)?;
    println!(
        "batch {batch}: forward {:.1} ms, forward+backward {:.1} ms",
        forward.as_secs_f64() * 1e3,
        start.elapsed().as_secs_f64() * 1e3
    );
    Ok(())
}
