//! The dual-branch depth network.
//!
//! Both views go through the same spike encoding front end and the same
//! 3-stage encoder, which yields unary features at 1/8 resolution. The
//! stereo branch builds a concatenation cost volume referenced on the right
//! view, regularizes it with stacked 3D hourglasses and regresses disparity
//! by soft-argmin. The monocular branch decodes the right unary features to
//! normalized depth and an uncertainty map.

use autodiff::{BatchStats, Graph, ParamStore, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::loss::{SIGMA_MAX, SIGMA_MIN};
use crate::spike::{chunk_windows, temporal_frequency_features, SpikeVoxel};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NetConfig {
    pub height: usize,
    pub width: usize,
    /// Unary feature channels.
    pub base_channels: usize,
    /// Disparity levels at 1/8 resolution.
    pub max_disp: usize,
    pub hourglass_count: usize,
    pub window_width: usize,
    pub fft_k: usize,
    pub hidden_rnn_channels: usize,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self {
            height: 64,
            width: 128,
            base_channels: 32,
            max_disp: 16,
            hourglass_count: 3,
            window_width: 24,
            fft_k: 8,
            hidden_rnn_channels: 8,
        }
    }
}

impl NetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.height == 0 || self.width == 0 || self.height % 8 != 0 || self.width % 8 != 0 {
            return Err(invalid(
                "net config",
                format!("{}x{} must be nonzero multiples of 8", self.height, self.width),
            ));
        }
        if self.max_disp == 0 || self.max_disp > self.width / 8 {
            return Err(invalid(
                "net config",
                format!("max_disp {} must lie in [1, W/8 = {}]", self.max_disp, self.width / 8),
            ));
        }
        if self.base_channels < 4 || self.base_channels % 4 != 0 {
            return Err(invalid("net config", "base_channels must be a positive multiple of 4"));
        }
        if self.hourglass_count == 0 || self.window_width == 0 || self.fft_k == 0 || self.hidden_rnn_channels == 0 {
            return Err(invalid(
                "net config",
                "hourglass_count, window_width, fft_k and hidden_rnn_channels must be at least 1",
            ));
        }
        Ok(())
    }

    fn stage_widths(&self) -> [usize; 3] {
        let c = self.base_channels;
        [c / 4, c / 2, c]
    }

    /// Channels of the 3D aggregation network.
    fn volume_channels(&self) -> usize {
        (self.base_channels / 2).max(2)
    }

    fn mono_widths(&self) -> [usize; 3] {
        let c = self.base_channels;
        [c / 2, c / 4, c / 4]
    }

    fn unc_hidden(&self) -> usize {
        8
    }
}

enum Init {
    /// He-normal over the given fan-in.
    He(usize),
    Normal(f64),
    Const(f64),
}

fn param_specs(cfg: &NetConfig) -> Vec<(String, Vec<usize>, Init)> {
    let mut specs: Vec<(String, Vec<usize>, Init)> = Vec::new();
    let conv = |specs: &mut Vec<_>, name: &str, cout: usize, cin: usize, k: usize, dims: usize, bias: bool| {
        let mut shape = vec![cout, cin];
        shape.extend(std::iter::repeat_n(k, dims));
        let fan_in = cin * k.pow(dims as u32);
        specs.push((format!("{name}.w"), shape, Init::He(fan_in)));
        if bias {
            specs.push((format!("{name}.b"), vec![cout], Init::Const(0.0)));
        }
    };
    let bn = |specs: &mut Vec<(String, Vec<usize>, Init)>, name: &str, c: usize| {
        specs.push((format!("{name}.gamma"), vec![c], Init::Const(1.0)));
        specs.push((format!("{name}.beta"), vec![c], Init::Const(0.0)));
    };
    let (n, hid, k) = (cfg.window_width, cfg.hidden_rnn_channels, cfg.fft_k);
    conv(&mut specs, "enc.gru.gates", 2 * hid, n + hid, 3, 2, true);
    conv(&mut specs, "enc.gru.cand", hid, n + hid, 3, 2, true);
    conv(&mut specs, "enc.merge", hid, hid + k, 1, 2, true);

    let mut cin = hid;
    for (i, c) in cfg.stage_widths().into_iter().enumerate() {
        for part in ["down", "res1", "res2"] {
            let name = format!("encoder.s{i}.{part}");
            let from = if part == "down" { cin } else { c };
            conv(&mut specs, &name, c, from, 3, 2, false);
            bn(&mut specs, &name, c);
        }
        cin = c;
    }

    let (c, v) = (cfg.base_channels, cfg.volume_channels());
    conv(&mut specs, "cv.c0", v, 2 * c, 3, 3, false);
    bn(&mut specs, "cv.c0", v);
    conv(&mut specs, "cv.c1", v, v, 3, 3, false);
    bn(&mut specs, "cv.c1", v);
    for i in 0..cfg.hourglass_count {
        let p = format!("hg{i}");
        conv(&mut specs, &format!("{p}.down1"), 2 * v, v, 3, 3, false);
        bn(&mut specs, &format!("{p}.down1"), 2 * v);
        conv(&mut specs, &format!("{p}.down2"), 2 * v, 2 * v, 3, 3, false);
        bn(&mut specs, &format!("{p}.down2"), 2 * v);
        // Transposed kernels are [Cin, Cout, k, k, k].
        specs.push((format!("{p}.up1.w"), vec![2 * v, 2 * v, 3, 3, 3], Init::He(2 * v * 27)));
        bn(&mut specs, &format!("{p}.up1"), 2 * v);
        specs.push((format!("{p}.up2.w"), vec![2 * v, v, 3, 3, 3], Init::He(2 * v * 27)));
        bn(&mut specs, &format!("{p}.up2"), v);
        conv(&mut specs, &format!("{p}.out1"), v, v, 3, 3, false);
        bn(&mut specs, &format!("{p}.out1"), v);
        conv(&mut specs, &format!("{p}.out2"), 1, v, 3, 3, true);
    }

    let h = cfg.unc_hidden();
    conv(&mut specs, "su.c1", h, cfg.max_disp, 3, 2, true);
    conv(&mut specs, "su.c2", 1, h, 3, 2, true);

    let mut cin = c;
    for (i, w) in cfg.mono_widths().into_iter().enumerate() {
        for part in ["c1", "c2"] {
            let name = format!("mono.u{i}.{part}");
            let from = if part == "c1" { cin } else { w };
            conv(&mut specs, &name, w, from, 3, 2, false);
            bn(&mut specs, &name, w);
        }
        cin = w;
    }
    specs.push(("mono.head.w".into(), vec![2, cin, 1, 1], Init::Normal(0.01)));
    specs.push(("mono.head.b".into(), vec![2], Init::Const(0.0)));
    specs
}

/// Freshly initialized parameters plus zero-mean, unit-variance running
/// statistics for every normalization layer.
pub fn init_params(cfg: &NetConfig, seed: u64) -> Result<ParamStore> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::default();
    for (name, shape, init) in param_specs(cfg) {
        let t = match init {
            Init::He(fan_in) => Tensor::randn(&shape, (2.0 / fan_in as f64).sqrt(), &mut rng),
            Init::Normal(std) => Tensor::randn(&shape, std, &mut rng),
            Init::Const(v) => Tensor::full(&shape, v),
        };
        let t = if name == "cv.c0.w" { difference_init(t) } else { t };
        if let Some(layer) = name.strip_suffix(".gamma") {
            store.insert_buffer(format!("{layer}.running_mean"), Tensor::zeros(&shape));
            store.insert_buffer(format!("{layer}.running_var"), Tensor::ones(&shape));
        }
        store.insert(name, t);
    }
    Ok(store)
}

// First cost-volume conv starts as a filter on (reference - target) so early
// training already sees a matching signal.
fn difference_init(mut w: Tensor) -> Tensor {
    let s = w.shape().to_vec();
    let half = s[1] / 2;
    let k: usize = s[2..].iter().product();
    let data = w.data_mut();
    for o in 0..s[0] {
        for c in 0..half {
            for i in 0..k {
                let a = (o * s[1] + c) * k + i;
                data[a + half * k] = -data[a];
            }
        }
    }
    w
}

/// Number of trainable scalars at a configuration.
pub fn parameter_count(cfg: &NetConfig) -> usize {
    param_specs(cfg).iter().map(|(_, s, _)| s.iter().product::<usize>()).sum()
}

/// Forward-pass state: the graph, the parameters it reads, and the batch
/// statistics observed by normalization layers in training mode.
pub struct Ctx<'a> {
    pub g: &'a mut Graph,
    pub store: &'a ParamStore,
    pub stats: Vec<(String, BatchStats)>,
}

impl<'a> Ctx<'a> {
    pub fn new(g: &'a mut Graph, store: &'a ParamStore) -> Self {
        Self {
            g,
            store,
            stats: Vec::new(),
        }
    }

    fn p(&mut self, name: &str) -> Result<Var> {
        Ok(self.g.param(self.store, name)?)
    }

    fn bias(&mut self, name: &str) -> Result<Option<Var>> {
        let b = format!("{name}.b");
        Ok(if self.store.contains(&b) { Some(self.p(&b)?) } else { None })
    }

    fn conv2d(&mut self, name: &str, x: Var, stride: usize, pad: usize) -> Result<Var> {
        let w = self.p(&format!("{name}.w"))?;
        let b = self.bias(name)?;
        Ok(self.g.conv2d(x, w, b, stride, pad)?)
    }

    fn conv3d(&mut self, name: &str, x: Var, stride: usize) -> Result<Var> {
        let w = self.p(&format!("{name}.w"))?;
        let b = self.bias(name)?;
        Ok(self.g.conv3d(x, w, b, stride, 1)?)
    }

    /// Stride-2 transposed conv cropped to the `target` extents, which undoes
    /// a stride-2 conv for both even and odd inputs.
    fn up3d(&mut self, name: &str, x: Var, target: &[usize]) -> Result<Var> {
        let w = self.p(&format!("{name}.w"))?;
        let mut y = self.g.conv_transpose3d(x, w, None, 2, 1, 1)?;
        for a in 2..5 {
            if self.g.shape(y)[a] != target[a] {
                y = self.g.narrow(y, a, 0, target[a])?;
            }
        }
        Ok(y)
    }

    fn bn(&mut self, name: &str, x: Var) -> Result<Var> {
        let gamma = self.p(&format!("{name}.gamma"))?;
        let beta = self.p(&format!("{name}.beta"))?;
        let rm = self.store.get(&format!("{name}.running_mean"))?;
        let rv = self.store.get(&format!("{name}.running_var"))?;
        let (y, stats) = self.g.batch_norm(x, gamma, beta, rm, rv)?;
        if let Some(s) = stats {
            self.stats.push((name.to_string(), s));
        }
        Ok(y)
    }

    fn conv_bn_mish(&mut self, name: &str, x: Var, stride: usize) -> Result<Var> {
        let y = self.conv2d(name, x, stride, 1)?;
        let y = self.bn(name, y)?;
        Ok(self.g.mish(y))
    }

    fn conv3d_bn(&mut self, name: &str, x: Var, stride: usize) -> Result<Var> {
        let y = self.conv3d(name, x, stride)?;
        self.bn(name, y)
    }
}

/// Stacks a batch of `[C, H, W]` tensors into `[N, C, H, W]`.
fn stack(items: &[Tensor]) -> Result<Tensor> {
    let shape = items[0].shape().to_vec();
    let mut data = Vec::with_capacity(items.len() * items[0].numel());
    for t in items {
        if t.shape() != shape.as_slice() {
            return Err(invalid("batch", format!("shape {:?} differs from {shape:?}", t.shape())));
        }
        data.extend_from_slice(t.data());
    }
    let mut full = vec![items.len()];
    full.extend(shape);
    Ok(Tensor::new(&full, data)?)
}

/// Network inputs derived from a batch of voxels of one view.
pub struct EncodedInput {
    /// One `[N, n, H, W]` tensor per time window.
    pub windows: Vec<Tensor>,
    /// `[N, fft_k, H, W]`.
    pub frequency: Tensor,
}

pub fn prepare_input(voxels: &[SpikeVoxel], cfg: &NetConfig) -> Result<EncodedInput> {
    if voxels.is_empty() {
        return Err(invalid("input", "empty batch"));
    }
    for v in voxels {
        if (v.height(), v.width()) != (cfg.height, cfg.width) {
            return Err(invalid(
                "input",
                format!("voxel is {}x{}, network expects {}x{}", v.height(), v.width(), cfg.height, cfg.width),
            ));
        }
    }
    let sets = voxels
        .iter()
        .map(|v| chunk_windows(v, cfg.window_width))
        .collect::<Result<Vec<_>>>()?;
    let windows = (0..sets[0].count())
        .map(|s| stack(&sets.iter().map(|set| set.sequences[s].to_tensor()).collect::<Vec<_>>()))
        .collect::<Result<Vec<_>>>()?;
    let freq = voxels
        .iter()
        .map(|v| temporal_frequency_features(v, cfg.fft_k))
        .collect::<Result<Vec<_>>>()?;
    Ok(EncodedInput {
        windows,
        frequency: stack(&freq)?,
    })
}

/// One convolutional GRU step.
pub fn gru_step(ctx: &mut Ctx, x: Var, h: Var, hidden: usize) -> Result<Var> {
    let xh = ctx.g.concat(&[x, h], 1)?;
    let gates = ctx.conv2d("enc.gru.gates", xh, 1, 1)?;
    let gates = ctx.g.sigmoid(gates);
    let z = ctx.g.narrow(gates, 1, 0, hidden)?;
    let r = ctx.g.narrow(gates, 1, hidden, hidden)?;
    let rh = ctx.g.mul(r, h)?;
    let xrh = ctx.g.concat(&[x, rh], 1)?;
    let cand = ctx.conv2d("enc.gru.cand", xrh, 1, 1)?;
    let cand = ctx.g.tanh(cand);
    let delta = ctx.g.sub(cand, h)?;
    let step = ctx.g.mul(z, delta)?;
    Ok(ctx.g.add(h, step)?)
}

/// Graph handles of one view's inputs.
pub struct InputVars {
    pub windows: Vec<Var>,
    pub frequency: Var,
}

impl EncodedInput {
    pub fn constants(&self, g: &mut Graph) -> InputVars {
        InputVars {
            windows: self.windows.iter().map(|w| g.constant(w.clone())).collect(),
            frequency: g.constant(self.frequency.clone()),
        }
    }
}

/// Final GRU state over the windows, concatenated with the frequency
/// features and merged by a 1x1 conv. Keeps full resolution.
pub fn encode_spikes(ctx: &mut Ctx, input: &InputVars, cfg: &NetConfig) -> Result<Var> {
    let s = ctx.g.shape(input.frequency).to_vec();
    let hidden = cfg.hidden_rnn_channels;
    let mut h = ctx.g.constant(Tensor::zeros(&[s[0], hidden, s[2], s[3]]));
    for &x in &input.windows {
        h = gru_step(ctx, x, h, hidden)?;
    }
    let hf = ctx.g.concat(&[h, input.frequency], 1)?;
    ctx.conv2d("enc.merge", hf, 1, 0)
}

/// Three stride-2 stages, each followed by a residual block.
pub fn shared_encoder(ctx: &mut Ctx, x: Var) -> Result<Var> {
    let s = ctx.g.shape(x).to_vec();
    if s[2] % 8 != 0 || s[3] % 8 != 0 {
        return Err(invalid("encoder", format!("{}x{} is not divisible by 8", s[2], s[3])));
    }
    let mut x = x;
    for i in 0..3 {
        x = ctx.conv_bn_mish(&format!("encoder.s{i}.down"), x, 2)?;
        let y = ctx.conv_bn_mish(&format!("encoder.s{i}.res1"), x, 1)?;
        let y = ctx.conv2d(&format!("encoder.s{i}.res2"), y, 1, 1)?;
        let y = ctx.bn(&format!("encoder.s{i}.res2"), y)?;
        let sum = ctx.g.add(x, y)?;
        x = ctx.g.mish(sum);
    }
    Ok(x)
}

/// Concatenation volume `[N, 2C, D, h, w]`: at disparity `d`, column `x`
/// holds `reference[x]` then `target[x - d]`, zero where `x - d < 0`.
pub fn build_cost_volume(g: &mut Graph, reference: Var, target: Var, max_disp: usize) -> Result<Var> {
    let s = g.shape(reference).to_vec();
    if s.len() != 4 || g.shape(target) != s.as_slice() {
        return Err(invalid(
            "cost volume",
            format!("feature shapes {:?} and {:?} must be equal and rank 4", s, g.shape(target)),
        ));
    }
    let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
    if max_disp == 0 || max_disp > w {
        return Err(invalid("cost volume", format!("max_disp {max_disp} must lie in [1, {w}]")));
    }
    let d_len = max_disp;
    let at = move |b: usize, ch: usize, d: usize, y: usize, x: usize| (((b * 2 * c + ch) * d_len + d) * h + y) * w + x;
    let src = move |b: usize, ch: usize, y: usize, x: usize| ((b * c + ch) * h + y) * w + x;
    let (rv, tv) = (g.value(reference).data(), g.value(target).data());
    let mut out = vec![0.0; n * 2 * c * d_len * h * w];
    for b in 0..n {
        for ch in 0..c {
            for d in 0..d_len {
                for y in 0..h {
                    for x in 0..w {
                        out[at(b, ch, d, y, x)] = rv[src(b, ch, y, x)];
                        if x >= d {
                            out[at(b, c + ch, d, y, x)] = tv[src(b, ch, y, x - d)];
                        }
                    }
                }
            }
        }
    }
    let value = Tensor::new(&[n, 2 * c, d_len, h, w], out)?;
    Ok(g.custom(
        value,
        &[reference, target],
        Box::new(move |grad, _, _, needs| {
            let gd = grad.data();
            let mut gr = vec![0.0; n * c * h * w];
            let mut gt = vec![0.0; n * c * h * w];
            for b in 0..n {
                for ch in 0..c {
                    for d in 0..d_len {
                        for y in 0..h {
                            for x in 0..w {
                                gr[src(b, ch, y, x)] += gd[at(b, ch, d, y, x)];
                                if x >= d {
                                    gt[src(b, ch, y, x - d)] += gd[at(b, c + ch, d, y, x)];
                                }
                            }
                        }
                    }
                }
            }
            let shape = [n, c, h, w];
            vec![
                needs[0].then(|| Tensor::new(&shape, gr).expect("shape")),
                needs[1].then(|| Tensor::new(&shape, gt).expect("shape")),
            ]
        }),
    ))
}

/// Volume referenced on the right view: the right pixel at column `x`
/// matches the left pixel at `x + d`. Built by mirroring both views.
pub fn right_reference_volume(g: &mut Graph, left: Var, right: Var, max_disp: usize) -> Result<Var> {
    let fr = g.flip(right, 3)?;
    let fl = g.flip(left, 3)?;
    let cv = build_cost_volume(g, fr, fl, max_disp)?;
    Ok(g.flip(cv, 4)?)
}

fn hourglass(ctx: &mut Ctx, i: usize, x: Var) -> Result<Var> {
    let p = format!("hg{i}");
    let d1 = ctx.conv3d_bn(&format!("{p}.down1"), x, 2)?;
    let d1 = ctx.g.relu(d1);
    let d2 = ctx.conv3d_bn(&format!("{p}.down2"), d1, 2)?;
    let d2 = ctx.g.relu(d2);
    let t1 = ctx.g.shape(d1).to_vec();
    let u1 = ctx.up3d(&format!("{p}.up1"), d2, &t1)?;
    let u1 = ctx.bn(&format!("{p}.up1"), u1)?;
    let u1 = ctx.g.add(u1, d1)?;
    let u1 = ctx.g.relu(u1);
    let t0 = ctx.g.shape(x).to_vec();
    let u2 = ctx.up3d(&format!("{p}.up2"), u1, &t0)?;
    let u2 = ctx.bn(&format!("{p}.up2"), u2)?;
    Ok(ctx.g.add(u2, x)?)
}

/// Stacked hourglasses; returns `M` cost maps `[N, D, h, w]`.
pub fn hourglass_stack(ctx: &mut Ctx, cv: Var, m: usize) -> Result<Vec<Var>> {
    let x = ctx.conv3d_bn("cv.c0", cv, 1)?;
    let x = ctx.g.relu(x);
    let x = ctx.conv3d_bn("cv.c1", x, 1)?;
    let mut x = ctx.g.relu(x);
    let mut costs = Vec::with_capacity(m);
    for i in 0..m {
        x = hourglass(ctx, i, x)?;
        let y = ctx.conv3d_bn(&format!("hg{i}.out1"), x, 1)?;
        let y = ctx.g.relu(y);
        let c = ctx.conv3d(&format!("hg{i}.out2"), y, 1)?;
        let s = ctx.g.shape(c).to_vec();
        costs.push(ctx.g.reshape(c, &[s[0], s[2], s[3], s[4]])?);
    }
    Ok(costs)
}

/// `p = softmax(-c)` over the disparity axis of `[N, D, h, w]` costs and
/// the expected disparity `[N, 1, h, w]`.
pub fn soft_argmin(g: &mut Graph, costs: Var) -> Result<(Var, Var)> {
    let s = g.shape(costs).to_vec();
    if s.len() != 4 {
        return Err(invalid("soft argmin", format!("costs must be [N, D, h, w], got {s:?}")));
    }
    if !g.value(costs).is_finite() {
        return Err(invalid("soft argmin", "non-finite cost"));
    }
    let neg = g.neg(costs);
    let p = g.softmax(neg, 1)?;
    let plane = s[2] * s[3];
    let levels: Vec<f64> = (0..s[0] * s[1] * plane).map(|i| ((i / plane) % s[1]) as f64).collect();
    let levels = g.constant(Tensor::new(&s, levels)?);
    let weighted = g.mul(p, levels)?;
    let disp = g.sum_axis(weighted, 1)?;
    let disp = g.reshape(disp, &[s[0], 1, s[2], s[3]])?;
    Ok((disp, p))
}

/// Low-resolution disparity to full resolution: bilinear x8, times 8.
pub fn upscale_disparity(g: &mut Graph, disp: Var) -> Result<Var> {
    let up = g.upsample_bilinear(disp, 8)?;
    Ok(g.scale(up, 8.0))
}

fn clamp_sigma(g: &mut Graph, logits: Var) -> Var {
    let s = g.sigmoid(logits);
    g.clamp(s, SIGMA_MIN, SIGMA_MAX)
}

/// Two 3x3 convs over the probability volume, sigmoid, clamp, x8.
pub fn stereo_uncertainty_head(ctx: &mut Ctx, prob: Var) -> Result<Var> {
    let y = ctx.conv2d("su.c1", prob, 1, 1)?;
    let y = ctx.g.relu(y);
    let y = ctx.conv2d("su.c2", y, 1, 1)?;
    let s = clamp_sigma(ctx.g, y);
    Ok(ctx.g.upsample_bilinear(s, 8)?)
}

/// Normalized depth and `sigma_m`, both `[N, 1, H, W]`.
pub fn mono_decoder(ctx: &mut Ctx, unary: Var) -> Result<(Var, Var)> {
    let mut x = unary;
    for i in 0..3 {
        x = ctx.g.upsample_bilinear_2x(x)?;
        x = ctx.conv_bn_mish(&format!("mono.u{i}.c1"), x, 1)?;
        x = ctx.conv_bn_mish(&format!("mono.u{i}.c2"), x, 1)?;
    }
    let head = ctx.conv2d("mono.head", x, 1, 0)?;
    let d = ctx.g.narrow(head, 1, 0, 1)?;
    let depth = ctx.g.sigmoid(d);
    let s = ctx.g.narrow(head, 1, 1, 1)?;
    Ok((depth, clamp_sigma(ctx.g, s)))
}

/// Every branch output of one forward pass.
pub struct NetOutput {
    /// Full-resolution disparity per hourglass, `[N, 1, H, W]`.
    pub disparities: Vec<Var>,
    /// Last hourglass probability volume `[N, D, h, w]`.
    pub prob: Var,
    pub sigma_s: Var,
    /// Normalized depth in (0, 1).
    pub mono_depth: Var,
    pub sigma_m: Var,
    pub left_unary: Var,
    pub right_unary: Var,
}

pub fn forward(ctx: &mut Ctx, cfg: &NetConfig, left: &EncodedInput, right: &EncodedInput) -> Result<NetOutput> {
    let l = left.constants(ctx.g);
    let r = right.constants(ctx.g);
    forward_vars(ctx, cfg, &l, &r)
}

/// `forward` over inputs already on the graph.
pub fn forward_vars(ctx: &mut Ctx, cfg: &NetConfig, left: &InputVars, right: &InputVars) -> Result<NetOutput> {
    let l = encode_spikes(ctx, left, cfg)?;
    let r = encode_spikes(ctx, right, cfg)?;
    let left_unary = shared_encoder(ctx, l)?;
    let right_unary = shared_encoder(ctx, r)?;
    let cv = right_reference_volume(ctx.g, left_unary, right_unary, cfg.max_disp)?;
    let costs = hourglass_stack(ctx, cv, cfg.hourglass_count)?;
    let mut disparities = Vec::with_capacity(costs.len());
    let mut prob = None;
    for c in costs {
        let (d, p) = soft_argmin(ctx.g, c)?;
        disparities.push(upscale_disparity(ctx.g, d)?);
        prob = Some(p);
    }
    let prob = prob.expect("at least one hourglass");
    let sigma_s = stereo_uncertainty_head(ctx, prob)?;
    let (mono_depth, sigma_m) = mono_decoder(ctx, right_unary)?;
    Ok(NetOutput {
        disparities,
        prob,
        sigma_s,
        mono_depth,
        sigma_m,
        left_unary,
        right_unary,
    })
}

/// Exponential moving average of normalization statistics.
pub fn update_running_stats(store: &mut ParamStore, stats: &[(String, BatchStats)], momentum: f64) -> Result<()> {
    for (name, s) in stats {
        for (suffix, values) in [("running_mean", &s.mean), ("running_var", &s.var)] {
            let t = store.get_mut(&format!("{name}.{suffix}"))?;
            for (r, v) in t.data_mut().iter_mut().zip(values.iter()) {
                *r = (1.0 - momentum) * *r + momentum * v;
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy() -> NetConfig {
        NetConfig {
            height: 16,
            width: 32,
            base_channels: 8,
            max_disp: 4,
            hourglass_count: 2,
            window_width: 4,
            fft_k: 3,
            hidden_rnn_channels: 2,
        }
    }

    #[test]
    fn default_parameter_budget() {
        let cfg = NetConfig::default();
        let store = init_params(&cfg, 0).unwrap();
        assert_eq!(store.trainable_count(), parameter_count(&cfg));
        assert!(parameter_count(&cfg) < 5_000_000);
    }

    #[test]
    fn config_rejects_bad_disparity_range() {
        let cfg = NetConfig {
            max_disp: 17,
            ..Default::default()
        };
        assert!(cfg.validate().is_err());
        let cfg = NetConfig {
            height: 60,
            ..Default::default()
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn soft_argmin_fixtures() {
        let mut g = Graph::default();
        let c = g.constant(Tensor::zeros(&[1, 4, 1, 1]));
        let (d, _) = soft_argmin(&mut g, c).unwrap();
        assert!((g.value(d).item() - 1.5).abs() < 1e-12);
        let c = g.constant(Tensor::new(&[1, 4, 1, 1], vec![0.0, 0.0, -1000.0, 0.0]).unwrap());
        let (d, _) = soft_argmin(&mut g, c).unwrap();
        assert!((g.value(d).item() - 2.0).abs() < 1e-6);
        let c = g.constant(Tensor::new(&[1, 2, 1, 1], vec![0.0, 3f64.ln()]).unwrap());
        let (d, p) = soft_argmin(&mut g, c).unwrap();
        assert!((g.value(d).item() - 0.25).abs() < 1e-12);
        assert!((g.value(p).data()[0] - 0.75).abs() < 1e-12);
    }

    #[test]
    fn cost_volume_slices() {
        let mut g = Graph::default();
        let l = g.constant(Tensor::new(&[1, 1, 1, 3], vec![1.0, 2.0, 3.0]).unwrap());
        let r = g.constant(Tensor::new(&[1, 1, 1, 3], vec![4.0, 5.0, 6.0]).unwrap());
        let cv = build_cost_volume(&mut g, l, r, 3).unwrap();
        let v = g.value(cv).data().to_vec();
        // [2C=2, D=3, 1, 3]
        assert_eq!(&v[0..3], &[1.0, 2.0, 3.0]);
        assert_eq!(&v[9..12], &[4.0, 5.0, 6.0]);
        assert_eq!(&v[12..15], &[0.0, 4.0, 5.0]);
        assert_eq!(&v[15..18], &[0.0, 0.0, 4.0]);
        assert!(build_cost_volume(&mut g, l, r, 4).is_err());
    }

    #[test]
    fn right_reference_matches_left_at_plus_d() {
        let mut g = Graph::default();
        let l = g.constant(Tensor::new(&[1, 1, 1, 3], vec![1.0, 2.0, 3.0]).unwrap());
        let r = g.constant(Tensor::new(&[1, 1, 1, 3], vec![4.0, 5.0, 6.0]).unwrap());
        let cv = right_reference_volume(&mut g, l, r, 2).unwrap();
        let v = g.value(cv).data().to_vec();
        // Reference half holds the right view, target half the left view.
        assert_eq!(&v[0..3], &[4.0, 5.0, 6.0]);
        assert_eq!(&v[6..9], &[1.0, 2.0, 3.0]);
        assert_eq!(&v[9..12], &[2.0, 3.0, 0.0]);
    }

    #[test]
    fn forward_shapes() {
        let cfg = toy();
        let store = init_params(&cfg, 1).unwrap();
        let vox = SpikeVoxel::zeros(8, 16, 32);
        // The deepest hourglass level is 1x1x1 here, so training-mode
        // normalization needs two samples.
        let input = prepare_input(&[vox.clone(), vox], &cfg).unwrap();
        let mut g = Graph::default();
        let mut ctx = Ctx::new(&mut g, &store);
        let out = forward(&mut ctx, &cfg, &input, &input).unwrap();
        assert_eq!(out.disparities.len(), 2);
        assert_eq!(ctx.g.shape(out.disparities[1]), &[2, 1, 16, 32]);
        assert_eq!(ctx.g.shape(out.prob), &[2, 4, 2, 4]);
        assert_eq!(ctx.g.shape(out.sigma_s), &[2, 1, 16, 32]);
        assert_eq!(ctx.g.shape(out.mono_depth), &[2, 1, 16, 32]);
        assert_eq!(ctx.g.shape(out.left_unary), &[2, 8, 2, 4]);
        assert!(!ctx.stats.is_empty());
    }
}
