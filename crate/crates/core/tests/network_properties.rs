use autodiff::{Graph, Mode, ParamStore, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use spikedepth::net::*;
use spikedepth::spike::{pack_voxel, SpikeVoxel};

fn toy() -> NetConfig {
    NetConfig {
        height: 16,
        width: 32,
        base_channels: 8,
        max_disp: 4,
        hourglass_count: 3,
        window_width: 4,
        fft_k: 3,
        hidden_rnn_channels: 3,
    }
}

fn random_voxel(rng: &mut ChaCha8Rng, t: usize, h: usize, w: usize) -> SpikeVoxel {
    let bits: Vec<u8> = (0..t * h * w).map(|_| rng.random_bool(0.4) as u8).collect();
    pack_voxel(t, h, w, &bits).unwrap()
}

fn zero_params(store: &mut ParamStore, prefix: &str) {
    let names: Vec<String> = store.iter().map(|(n, _)| n.to_string()).filter(|n| n.starts_with(prefix)).collect();
    assert!(!names.is_empty(), "no parameter under {prefix}");
    for n in names {
        store.get_mut(&n).unwrap().data_mut().fill(0.0);
    }
}

fn run(cfg: &NetConfig, store: &ParamStore, left: &SpikeVoxel, right: &SpikeVoxel) -> (Graph, NetOutput) {
    let li = prepare_input(std::slice::from_ref(left), cfg).unwrap();
    let ri = prepare_input(std::slice::from_ref(right), cfg).unwrap();
    let mut g = Graph::new(Mode::Eval);
    let out = {
        let mut ctx = Ctx::new(&mut g, store);
        forward(&mut ctx, cfg, &li, &ri).unwrap()
    };
    (g, out)
}

#[test]
fn both_views_share_the_encoder() {
    let cfg = toy();
    let store = init_params(&cfg, 3).unwrap();
    let v = random_voxel(&mut ChaCha8Rng::seed_from_u64(1), 8, 16, 32);
    let (g, out) = run(&cfg, &store, &v, &v);
    assert_eq!(g.value(out.left_unary), g.value(out.right_unary));
    assert_eq!(g.shape(out.left_unary), &[1, 8, 2, 4]);
}

#[test]
fn zero_heads_give_one_half() {
    let cfg = toy();
    let mut store = init_params(&cfg, 3).unwrap();
    zero_params(&mut store, "mono.head");
    zero_params(&mut store, "su.c2");
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (l, r) = (random_voxel(&mut rng, 8, 16, 32), random_voxel(&mut rng, 8, 16, 32));
    let (g, out) = run(&cfg, &store, &l, &r);
    for v in [out.mono_depth, out.sigma_m, out.sigma_s] {
        assert!(g.value(v).data().iter().all(|&x| (x - 0.5).abs() < 1e-15));
    }
}

#[test]
fn zero_weights_give_zero_costs() {
    let cfg = toy();
    let mut store = init_params(&cfg, 3).unwrap();
    for prefix in ["cv.", "hg"] {
        zero_params(&mut store, prefix);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (l, r) = (random_voxel(&mut rng, 8, 16, 32), random_voxel(&mut rng, 8, 16, 32));
    let li = prepare_input(&[l], &cfg).unwrap();
    let ri = prepare_input(&[r], &cfg).unwrap();
    let mut g = Graph::new(Mode::Eval);
    let mut ctx = Ctx::new(&mut g, &store);
    let (lv, rv) = (li.constants(ctx.g), ri.constants(ctx.g));
    let lu = encode_spikes(&mut ctx, &lv, &cfg).unwrap();
    let ru = encode_spikes(&mut ctx, &rv, &cfg).unwrap();
    let lu = shared_encoder(&mut ctx, lu).unwrap();
    let ru = shared_encoder(&mut ctx, ru).unwrap();
    let cv = right_reference_volume(ctx.g, lu, ru, cfg.max_disp).unwrap();
    let costs = hourglass_stack(&mut ctx, cv, 3).unwrap();
    assert_eq!(costs.len(), 3);
    for c in costs {
        assert_eq!(ctx.g.shape(c), &[1, 4, 2, 4]);
        assert!(ctx.g.value(c).data().iter().all(|&x| x == 0.0));
    }
}

#[test]
fn identical_windows_unroll_one_step() {
    let cfg = toy();
    let store = init_params(&cfg, 5).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let window = random_voxel(&mut rng, 4, 16, 32);
    // Four copies of the same 4-frame window.
    let bits: Vec<u8> = (0..4).flat_map(|_| spikedepth::spike::unpack_voxel(&window)).collect();
    let voxel = pack_voxel(16, 16, 32, &bits).unwrap();
    let input = prepare_input(&[voxel], &cfg).unwrap();
    assert_eq!(input.windows.len(), 4);

    let mut g = Graph::new(Mode::Eval);
    let mut ctx = Ctx::new(&mut g, &store);
    let vars = input.constants(ctx.g);
    let encoded = encode_spikes(&mut ctx, &vars, &cfg).unwrap();

    let x = ctx.g.constant(input.windows[0].clone());
    let mut h = ctx.g.constant(Tensor::zeros(&[1, 3, 16, 32]));
    for _ in 0..4 {
        h = gru_step(&mut ctx, x, h, 3).unwrap();
    }
    let hf = ctx.g.concat(&[h, vars.frequency], 1).unwrap();
    let w = ctx.g.param(&store, "enc.merge.w").unwrap();
    let b = ctx.g.param(&store, "enc.merge.b").ok();
    let manual = ctx.g.conv2d(hf, w, b, 1, 0).unwrap();
    assert_eq!(ctx.g.value(encoded), ctx.g.value(manual));
    assert_eq!(ctx.g.shape(encoded)[2..], [16, 32]);
}

#[test]
fn silent_input_encodes_to_finite_constant_trajectory() {
    let cfg = toy();
    let store = init_params(&cfg, 5).unwrap();
    let v = SpikeVoxel::zeros(8, 16, 32);
    let (g1, o1) = run(&cfg, &store, &v, &v);
    let (g2, o2) = run(&cfg, &store, &v, &v);
    assert!(g1.value(o1.right_unary).is_finite());
    assert_eq!(g1.value(o1.right_unary), g2.value(o2.right_unary));
}

#[test]
fn soft_argmin_stays_in_range() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for _ in 0..200 {
        let d = rng.random_range(1..12);
        let scale = rng.random_range(0.1..500.0);
        let data: Vec<f64> = (0..d * 6).map(|_| rng.random_range(-1.0..1.0) * scale).collect();
        let mut g = Graph::default();
        let c = g.constant(Tensor::new(&[1, d, 2, 3], data).unwrap());
        let (disp, p) = soft_argmin(&mut g, c).unwrap();
        assert!(g.value(disp).data().iter().all(|&x| (0.0..=(d - 1) as f64).contains(&x)));
        let pd = g.value(p).data();
        for px in 0..6 {
            let s: f64 = (0..d).map(|k| pd[k * 6 + px]).sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
        let up = upscale_disparity(&mut g, disp).unwrap();
        assert!(g.value(up).data().iter().all(|&x| (-1e-9..=8.0 * (d - 1) as f64 + 1e-9).contains(&x)));
    }
}

#[test]
fn stereo_uncertainty_sees_the_probability_shape() {
    let cfg = toy();
    let store = init_params(&cfg, 9).unwrap();
    let mut g = Graph::new(Mode::Eval);
    let mut ctx = Ctx::new(&mut g, &store);
    let uniform = ctx.g.constant(Tensor::full(&[1, 4, 2, 4], 0.25));
    let mut one_hot = vec![0.0; 32];
    one_hot[16..24].fill(1.0);
    let one_hot = ctx.g.constant(Tensor::new(&[1, 4, 2, 4], one_hot).unwrap());
    let a = stereo_uncertainty_head(&mut ctx, uniform).unwrap();
    let b = stereo_uncertainty_head(&mut ctx, one_hot).unwrap();
    assert_eq!(ctx.g.shape(a), &[1, 1, 16, 32]);
    let diff = ctx.g.value(a).zip_map(ctx.g.value(b), |x, y| (x - y).abs()).max_abs();
    assert!(diff > 1e-6, "{diff}");
}

// Translating both views by a multiple of the network's total stride
// translates the 1/8-resolution disparity field. The hourglasses downsample
// the 1/8 grid twice more, so exact equivariance needs 4 columns there
// (32 pixels); an 8-pixel shift changes the stride-2 sampling phase.
#[test]
fn disparity_field_follows_a_32_pixel_translation() {
    let cfg = NetConfig {
        height: 16,
        width: 512,
        hourglass_count: 1,
        ..toy()
    };
    let weights = init_params(&cfg, 12).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let (l, r) = (random_voxel(&mut rng, 8, 16, 512), random_voxel(&mut rng, 8, 16, 512));
    let low_res = |l: &SpikeVoxel, r: &SpikeVoxel| -> Vec<f64> {
        let (mut g, out) = run(&cfg, &weights, l, r);
        let c = g.constant(g.value(out.prob).map(|p| -p.ln()));
        let (d, _) = soft_argmin(&mut g, c).unwrap();
        g.value(d).data().to_vec()
    };
    let base = low_res(&l, &r);
    let moved = low_res(&l.shift_columns(32), &r.shift_columns(32));
    let (rows, cols, shift, margin) = (2, 64, 4, 24);
    let mut worst: f64 = 0.0;
    for y in 0..rows {
        for x in margin..cols - margin {
            worst = worst.max((moved[y * cols + x + shift] - base[y * cols + x]).abs());
        }
    }
    assert!(worst < 1e-9, "interior deviation {worst}");
}
