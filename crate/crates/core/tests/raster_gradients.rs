use splatmap::gradcheck::{rasterizer, TOLERANCE};

#[test]
fn every_parameter_gradient_matches_central_differences() {
    for seed in [1u64, 2, 3] {
        let worst = rasterizer(seed);
        assert!(worst < TOLERANCE, "seed {seed}: worst relative error {worst:e}");
    }
}
