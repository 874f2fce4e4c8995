mod common;

use common::{discriminator_gradient_error, generator_gradient_error};

#[test]
fn generator_loss_gradients_match_finite_differences() {
    let worst = generator_gradient_error(11, 100);
    println!("worst relative error {worst:.3e}");
    assert!(worst < 1e-3, "worst relative error {worst}");
}

#[test]
fn discriminator_loss_gradients_match_finite_differences() {
    let worst = discriminator_gradient_error(12, 100);
    println!("worst relative error {worst:.3e}");
    assert!(worst < 1e-3, "worst relative error {worst}");
}
