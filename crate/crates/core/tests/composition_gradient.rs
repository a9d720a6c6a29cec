use spikedepth::train::composition_grad_check;

#[test]
fn end_to_end_loss_gradient_matches_finite_differences() {
    for seed in 0..4 {
        let r = composition_grad_check(seed).unwrap();
        println!("seed {seed}: max rel error {:.3e} over {} coords", r.max_rel_error, r.coords_checked);
        assert!(r.passes(1e-3), "{r:?}");
    }
}
