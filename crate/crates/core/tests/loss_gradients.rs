use splatmap::gradcheck::{geo, l1, ms_ssim_term, rgb, ssim_term, total, TOLERANCE};
use splatmap::losses::EdgeWeighting;

fn check(name: &str, worst: f64) {
    println!("{name}: worst relative error {worst:.3e}");
    assert!(worst < TOLERANCE, "{name}: {worst:.3e}");
}

#[test]
fn l1_gradient() {
    check("l1", l1(1));
}

#[test]
fn ssim_gradient() {
    check("ssim", ssim_term(2));
    check("ssim", ssim_term(3));
}

#[test]
fn ms_ssim_gradient() {
    check("ms_ssim", ms_ssim_term(4));
}

#[test]
fn rgb_loss_gradient() {
    check("rgb", rgb(5));
}

#[test]
fn geo_loss_gradient_power() {
    check("geo power", geo(6, EdgeWeighting::Power { q: 2.0 }));
}

#[test]
fn geo_loss_gradient_smooth() {
    check("geo smooth", geo(7, EdgeWeighting::Smooth { sigma: 0.5 }));
}

#[test]
fn total_loss_gradients() {
    let (c, d) = total(8);
    check("total color", c);
    check("total depth", d);
}
