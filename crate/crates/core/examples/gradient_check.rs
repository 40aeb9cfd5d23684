//! Runs the finite-difference gradient suite over every operator and loss,
//! then again with one backward rule deliberately broken.

use dfdnet::autodiff::OpKind;
use dfdnet::gradcheck::{run_matching, run_suite, GradcheckConfig};

fn main() -> dfdnet::Result<()> {
    let report = run_suite(&GradcheckConfig::default())?;
    print!("{}", report.to_text());

    let broken = GradcheckConfig {
        fault: Some(OpKind::Conv2d),
        instances: 1,
        ..GradcheckConfig::default()
    };
    println!("\nwith the conv2d rule scaled by 1.01:");
    print!("{}", run_matching(&broken, "conv2d")?.to_text());
    Ok(())
}
