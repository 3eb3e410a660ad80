//! The three-branch fusion network: a fusion trunk producing weight maps,
//! two reconstruction branches trained against their own inputs, and the
//! per-stage bidirectional feature exchange wiring them together.

use crate::adam::{AdamHyper, AdamState};
use crate::error::{Error, Result};
use crate::loss::{total_loss, LossConfig, LossTerms};
use crate::tensor::{
    concat_channels, conv2d_backward, conv2d_forward_cached, gaussian_filter2d, slice_channels,
    Activation, ConvLayer, Tensor,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    /// Bidirectional exchange: branch features split from the fused feature,
    /// then merged back into the next trunk stage.
    Full,
    /// Branch features evolve from the source images only; the merge into
    /// the trunk is kept but nothing is delivered back to the branches.
    NoIfem,
    /// Full wiring plus each stage's fused feature adapted and concatenated
    /// into the inputs of every later stage.
    HierConnect,
}

impl Variant {
    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoIfem => "no_ifem",
            Variant::HierConnect => "hc",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(Variant::Full),
            "no_ifem" => Ok(Variant::NoIfem),
            "hc" => Ok(Variant::HierConnect),
            other => Err(Error::Config(format!(
                "unknown variant '{other}' (expected full|no_ifem|hc)"
            ))),
        }
    }
}

/// Stage widths: 64, 128, 256, then capped at 256, divided by `scale`.
fn stage_widths(stages: usize, scale: usize) -> Vec<usize> {
    (0..stages)
        .map(|n| {
            let base = 64usize << n.min(2);
            (base / scale).max(1)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NetConfig {
    pub stages: usize,
    pub scale: usize,
    pub variant: Variant,
    pub seed: u64,
    /// Trunk channels: two entries per stage, then the four weight-map head
    /// channels ending in 1.
    pub ivif_channels: Vec<usize>,
    /// Branch channels: one entry per stage, then the three reconstruction
    /// head channels ending in 1.
    pub shfe_channels: Vec<usize>,
}

impl NetConfig {
    pub fn new(stages: usize, scale: usize, variant: Variant, seed: u64) -> Result<Self> {
        if stages == 0 {
            return Err(Error::Config("stages must be at least 1".into()));
        }
        if scale == 0 {
            return Err(Error::Config("scale must be at least 1".into()));
        }
        let w = stage_widths(stages, scale);
        let last = w[stages - 1];
        let mut ivif_channels = Vec::new();
        for &wi in &w {
            ivif_channels.push(wi);
            ivif_channels.push(wi);
        }
        ivif_channels.extend([last, (last / 2).max(1), (last / 4).max(1), 1]);
        let mut shfe_channels = w.clone();
        shfe_channels.extend([(last / 2).max(1), (last / 4).max(1), 1]);
        Ok(NetConfig {
            stages,
            scale,
            variant,
            seed,
            ivif_channels,
            shfe_channels,
        })
    }

    pub fn validate(&self) -> Result<()> {
        let expected = NetConfig::new(self.stages, self.scale, self.variant, self.seed)?;
        if self.ivif_channels != expected.ivif_channels
            || self.shfe_channels != expected.shfe_channels
        {
            return Err(Error::Config(format!(
                "channel lists inconsistent with stages={} scale={}: expected trunk {:?} and branch {:?}, got trunk {:?} and branch {:?}",
                self.stages,
                self.scale,
                expected.ivif_channels,
                expected.shfe_channels,
                self.ivif_channels,
                self.shfe_channels,
            )));
        }
        Ok(())
    }

    fn widths(&self) -> Vec<usize> {
        stage_widths(self.stages, self.scale)
    }
}

/// Indices into `Network::layers` for each architectural role, in the
/// declaration order used by checkpoints and the optimizer:
/// trunk (stage-major, two per stage), stems, branch-ir, branch-vis,
/// adapters, weight-map head 1, weight-map head 2, recon head ir,
/// recon head vis.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Layout {
    pub trunk: Vec<[usize; 2]>,
    pub stem_ir: Option<usize>,
    pub stem_vis: Option<usize>,
    pub branch_ir: Vec<usize>,
    pub branch_vis: Vec<usize>,
    pub adapters: Vec<usize>,
    pub whead1: Vec<usize>,
    pub whead2: Vec<usize>,
    pub rhead_ir: Vec<usize>,
    pub rhead_vis: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct Network {
    pub layers: Vec<ConvLayer>,
    pub layout: Layout,
    pub config: NetConfig,
}

/// One stage's feature triple.
#[derive(Debug, Clone)]
pub struct StageState {
    pub fused: Tensor,
    pub ir: Tensor,
    pub vis: Tensor,
    /// 1-based stage index.
    pub stage: usize,
}

struct TapeEntry {
    input: Tensor,
    pre: Tensor,
}

/// Forward results plus the cached intermediates the backward pass needs.
pub struct ForwardOutput {
    pub i_f: Tensor,
    pub w1: Tensor,
    pub w2: Tensor,
    pub i_r1: Tensor,
    pub i_r2: Tensor,
    pub stages: Vec<StageState>,
    tape: Vec<Option<TapeEntry>>,
}

/// Per-layer parameter gradients, in layer declaration order.
pub struct ParamGrads {
    pub weights: Vec<Tensor>,
    pub bias: Vec<Vec<f64>>,
}

/// Builds the network with seeded He-style normal weights and zero biases.
pub fn build_network(config: NetConfig) -> Result<Network> {
    config.validate()?;
    let widths = config.widths();
    let s = config.stages;
    let last = widths[s - 1];

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut layers = Vec::new();
    let mut add = |in_ch: usize, out_ch: usize, act: Activation, rng: &mut ChaCha8Rng| {
        let std = (2.0 / (in_ch as f64 * 9.0)).sqrt();
        let n = out_ch * in_ch * 9;
        let mut data = Vec::with_capacity(n);
        while data.len() < n {
            // Box-Muller keeps initialization stable across dependency versions.
            let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
            let u2: f64 = rng.gen();
            let r = (-2.0 * u1.ln()).sqrt();
            let theta = 2.0 * std::f64::consts::PI * u2;
            data.push(std * r * theta.cos());
            if data.len() < n {
                data.push(std * r * theta.sin());
            }
        }
        let weights = Tensor::from_vec(out_ch, in_ch, 3, 3, data).unwrap();
        layers.push(ConvLayer::new(weights, vec![0.0; out_ch], act).unwrap());
        layers.len() - 1
    };

    let mut trunk = Vec::with_capacity(s);
    for n in 0..s {
        let in_ch = if n == 0 {
            2
        } else {
            let mut c = 2 * widths[n - 1];
            if config.variant == Variant::HierConnect {
                c += widths[..n].iter().sum::<usize>();
            }
            c
        };
        let a = add(in_ch, widths[n], Activation::ReLU, &mut rng);
        let b = add(widths[n], widths[n], Activation::ReLU, &mut rng);
        trunk.push([a, b]);
    }

    let (stem_ir, stem_vis) = if config.variant == Variant::NoIfem {
        (
            Some(add(1, widths[0], Activation::ReLU, &mut rng)),
            Some(add(1, widths[0], Activation::ReLU, &mut rng)),
        )
    } else {
        (None, None)
    };

    let branch_in = |n: usize| -> usize {
        match config.variant {
            Variant::NoIfem => {
                if n == 0 {
                    widths[0]
                } else {
                    widths[n - 1]
                }
            }
            _ => widths[n],
        }
    };
    let branch_ir: Vec<usize> = (0..s)
        .map(|n| add(branch_in(n), widths[n], Activation::ReLU, &mut rng))
        .collect();
    let branch_vis: Vec<usize> = (0..s)
        .map(|n| add(branch_in(n), widths[n], Activation::ReLU, &mut rng))
        .collect();

    let adapters: Vec<usize> = if config.variant == Variant::HierConnect && s > 1 {
        (0..s - 1)
            .map(|n| add(widths[n], widths[n], Activation::ReLU, &mut rng))
            .collect()
    } else {
        Vec::new()
    };

    let head_ch = &config.ivif_channels[2 * s..];
    let mut whead = |rng: &mut ChaCha8Rng| -> Vec<usize> {
        let mut prev = last;
        let mut idxs = Vec::with_capacity(4);
        for (i, &ch) in head_ch.iter().enumerate() {
            let act = if i + 1 == head_ch.len() {
                Activation::Sigmoid
            } else {
                Activation::ReLU
            };
            idxs.push(add(prev, ch, act, rng));
            prev = ch;
        }
        idxs
    };
    let whead1 = whead(&mut rng);
    let whead2 = whead(&mut rng);

    let rhead_ch = &config.shfe_channels[s..];
    let mut rhead = |rng: &mut ChaCha8Rng| -> Vec<usize> {
        let mut prev = last;
        let mut idxs = Vec::with_capacity(3);
        for (i, &ch) in rhead_ch.iter().enumerate() {
            let act = if i + 1 == rhead_ch.len() {
                Activation::Linear
            } else {
                Activation::ReLU
            };
            idxs.push(add(prev, ch, act, rng));
            prev = ch;
        }
        idxs
    };
    let rhead_ir = rhead(&mut rng);
    let rhead_vis = rhead(&mut rng);

    Ok(Network {
        layers,
        layout: Layout {
            trunk,
            stem_ir,
            stem_vis,
            branch_ir,
            branch_vis,
            adapters,
            whead1,
            whead2,
            rhead_ir,
            rhead_vis,
        },
        config,
    })
}

impl Network {
    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.param_count()).sum()
    }

    /// All parameters flattened in declaration order (weights then bias per
    /// layer), for gradient checking.
    pub fn param_vec(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.param_count());
        for l in &self.layers {
            v.extend_from_slice(&l.weights.data);
            v.extend_from_slice(&l.bias);
        }
        v
    }

    pub fn set_param_vec(&mut self, params: &[f64]) -> Result<()> {
        if params.len() != self.param_count() {
            return Err(Error::dimension(
                "parameter vector",
                self.param_count(),
                params.len(),
            ));
        }
        let mut off = 0;
        for l in &mut self.layers {
            let wn = l.weights.len();
            l.weights.data.copy_from_slice(&params[off..off + wn]);
            off += wn;
            let bn = l.bias.len();
            l.bias.copy_from_slice(&params[off..off + bn]);
            off += bn;
        }
        Ok(())
    }
}

impl ParamGrads {
    fn zeros(net: &Network) -> Self {
        ParamGrads {
            weights: net
                .layers
                .iter()
                .map(|l| {
                    Tensor::zeros(
                        l.weights.batch,
                        l.weights.channels,
                        l.weights.height,
                        l.weights.width,
                    )
                })
                .collect(),
            bias: net.layers.iter().map(|l| vec![0.0; l.bias.len()]).collect(),
        }
    }

    /// Flattened in the same order as `Network::param_vec`.
    pub fn to_vec(&self) -> Vec<f64> {
        let mut v = Vec::new();
        for (w, b) in self.weights.iter().zip(&self.bias) {
            v.extend_from_slice(&w.data);
            v.extend_from_slice(b);
        }
        v
    }
}

fn check_inputs(i1: &Tensor, i2: &Tensor) -> Result<()> {
    if i1.channels != 1 || i2.channels != 1 {
        return Err(Error::dimension_ctx(
            "channels",
            1,
            i1.channels.max(i2.channels),
            "forward inputs must be single-channel",
        ));
    }
    if !i1.same_shape(i2) {
        return Err(Error::dimension_ctx(
            "shape",
            i1.len(),
            i2.len(),
            "source pair must be registered to the same size",
        ));
    }
    Ok(())
}

struct ForwardCtx<'a> {
    net: &'a Network,
    tape: Vec<Option<TapeEntry>>,
}

impl<'a> ForwardCtx<'a> {
    fn apply(&mut self, idx: usize, input: &Tensor) -> Result<Tensor> {
        let fwd = conv2d_forward_cached(input, &self.net.layers[idx])?;
        self.tape[idx] = Some(TapeEntry {
            input: input.clone(),
            pre: fwd.pre_activation,
        });
        Ok(fwd.output)
    }

    fn chain(&mut self, idxs: &[usize], input: &Tensor) -> Result<Tensor> {
        let mut x = input.clone();
        for &i in idxs {
            x = self.apply(i, &x)?;
        }
        Ok(x)
    }
}

/// One interaction stage without tape recording: splits the fused feature
/// into the two branch features through the stage's branch layers.
pub fn ifem_stage(net: &Network, fused: &Tensor, stage: usize) -> Result<StageState> {
    if stage == 0 || stage > net.config.stages {
        return Err(Error::Parameter {
            name: "stage",
            message: format!(
                "stage {stage} outside configured range 1..={}",
                net.config.stages
            ),
        });
    }
    let n = stage - 1;
    let ir = crate::tensor::conv2d_forward(fused, &net.layers[net.layout.branch_ir[n]])?;
    let vis = crate::tensor::conv2d_forward(fused, &net.layers[net.layout.branch_vis[n]])?;
    Ok(StageState {
        fused: fused.clone(),
        ir,
        vis,
        stage,
    })
}

pub fn forward(net: &Network, i1: &Tensor, i2: &Tensor) -> Result<ForwardOutput> {
    check_inputs(i1, i2)?;
    let s = net.config.stages;
    let lay = &net.layout;
    let mut ctx = ForwardCtx {
        net,
        tape: (0..net.layers.len()).map(|_| None).collect(),
    };

    let x0 = concat_channels(i1, i2)?;
    let mut fused = ctx.chain(&lay.trunk[0], &x0)?;

    let mut prev_ir = match lay.stem_ir {
        Some(idx) => Some(ctx.apply(idx, i1)?),
        None => None,
    };
    let mut prev_vis = match lay.stem_vis {
        Some(idx) => Some(ctx.apply(idx, i2)?),
        None => None,
    };

    let mut stages: Vec<StageState> = Vec::with_capacity(s);
    let mut adapter_outs: Vec<Tensor> = Vec::new();

    for n in 0..s {
        let (f_ir, f_vis) = match net.config.variant {
            Variant::NoIfem => {
                let in_ir = prev_ir.take().expect("stem output present");
                let in_vis = prev_vis.take().expect("stem output present");
                (
                    ctx.apply(lay.branch_ir[n], &in_ir)?,
                    ctx.apply(lay.branch_vis[n], &in_vis)?,
                )
            }
            _ => (
                ctx.apply(lay.branch_ir[n], &fused)?,
                ctx.apply(lay.branch_vis[n], &fused)?,
            ),
        };
        if net.config.variant == Variant::NoIfem {
            prev_ir = Some(f_ir.clone());
            prev_vis = Some(f_vis.clone());
        }
        if net.config.variant == Variant::HierConnect && n < s - 1 {
            adapter_outs.push(ctx.apply(lay.adapters[n], &fused)?);
        }
        stages.push(StageState {
            fused: fused.clone(),
            ir: f_ir.clone(),
            vis: f_vis.clone(),
            stage: n + 1,
        });
        if n + 1 < s {
            let mut xin = concat_channels(&f_ir, &f_vis)?;
            if net.config.variant == Variant::HierConnect {
                for a in adapter_outs.iter().take(n + 1) {
                    xin = concat_channels(&xin, a)?;
                }
            }
            fused = ctx.chain(&lay.trunk[n + 1], &xin)?;
        }
    }

    let w1 = ctx.chain(&lay.whead1, &fused)?;
    let w2 = ctx.chain(&lay.whead2, &fused)?;
    let mut i_f = w1.mul(i1)?;
    i_f.add_assign(&w2.mul(i2)?)?;

    let last = stages.last().expect("at least one stage");
    let i_r1 = ctx.chain(&lay.rhead_ir, &last.ir)?;
    let i_r2 = ctx.chain(&lay.rhead_vis, &last.vis)?;

    Ok(ForwardOutput {
        i_f,
        w1,
        w2,
        i_r1,
        i_r2,
        stages,
        tape: ctx.tape,
    })
}

/// Applies the fusion rule I_f = W_1*I_1 + W_2*I_2, optionally smoothing
/// both maps first with a variance-2, 5x5 Gaussian.
pub fn fuse_with_weight_maps(
    w1: &Tensor,
    w2: &Tensor,
    i1: &Tensor,
    i2: &Tensor,
    smooth: bool,
) -> Result<Tensor> {
    if !w1.same_shape(w2) || !w1.same_shape(i1) || !w1.same_shape(i2) {
        return Err(Error::dimension_ctx(
            "shape",
            w1.len(),
            i1.len(),
            "fuse_with_weight_maps",
        ));
    }
    let (w1s, w2s) = if smooth {
        (
            gaussian_filter2d(w1, 2.0, 5)?,
            gaussian_filter2d(w2, 2.0, 5)?,
        )
    } else {
        (w1.clone(), w2.clone())
    };
    let mut out = w1s.mul(i1)?;
    out.add_assign(&w2s.mul(i2)?)?;
    Ok(out)
}

struct BackwardCtx<'a> {
    net: &'a Network,
    out: &'a ForwardOutput,
    grads: ParamGrads,
}

impl<'a> BackwardCtx<'a> {
    fn back_layer(&mut self, idx: usize, grad_out: &Tensor) -> Result<Tensor> {
        let entry = self.out.tape[idx]
            .as_ref()
            .ok_or_else(|| Error::Training(format!("missing forward cache for layer {idx}")))?;
        let g = conv2d_backward(&entry.input, &self.net.layers[idx], &entry.pre, grad_out)?;
        self.grads.weights[idx].add_assign(&g.grad_weights)?;
        for (a, b) in self.grads.bias[idx].iter_mut().zip(&g.grad_bias) {
            *a += b;
        }
        Ok(g.grad_input)
    }

    fn back_chain(&mut self, idxs: &[usize], grad_out: &Tensor) -> Result<Tensor> {
        let mut g = grad_out.clone();
        for &i in idxs.iter().rev() {
            g = self.back_layer(i, &g)?;
        }
        Ok(g)
    }
}

fn accumulate(slot: &mut Option<Tensor>, g: Tensor) -> Result<()> {
    match slot {
        Some(t) => t.add_assign(&g),
        None => {
            *slot = Some(g);
            Ok(())
        }
    }
}

/// Full backward pass from the loss gradients to all parameter gradients.
pub fn backward(
    net: &Network,
    out: &ForwardOutput,
    terms: &LossTerms,
    i1: &Tensor,
    i2: &Tensor,
) -> Result<ParamGrads> {
    let s = net.config.stages;
    let lay = &net.layout;
    let mut ctx = BackwardCtx {
        net,
        out,
        grads: ParamGrads::zeros(net),
    };

    // I_f = W_1*I_1 + W_2*I_2, so dL/dW_i gains grad_if * I_i.
    let mut g_w1 = terms.grad_w1.clone();
    g_w1.add_assign(&terms.grad_if.mul(i1)?)?;
    let mut g_w2 = terms.grad_w2.clone();
    g_w2.add_assign(&terms.grad_if.mul(i2)?)?;

    let mut g_fused: Vec<Option<Tensor>> = (0..s).map(|_| None).collect();
    let mut g_ir: Vec<Option<Tensor>> = (0..s).map(|_| None).collect();
    let mut g_vis: Vec<Option<Tensor>> = (0..s).map(|_| None).collect();
    let mut g_adapter: Vec<Option<Tensor>> = (0..lay.adapters.len()).map(|_| None).collect();

    accumulate(&mut g_fused[s - 1], ctx.back_chain(&lay.whead1, &g_w1)?)?;
    accumulate(&mut g_fused[s - 1], ctx.back_chain(&lay.whead2, &g_w2)?)?;
    accumulate(&mut g_ir[s - 1], ctx.back_chain(&lay.rhead_ir, &terms.grad_ir1)?)?;
    accumulate(&mut g_vis[s - 1], ctx.back_chain(&lay.rhead_vis, &terms.grad_ir2)?)?;

    let widths = net.config.widths();

    for n in (0..s).rev() {
        // Branch convolutions consume the fused feature (or the previous
        // branch feature in the non-reciprocal variant).
        let gi = g_ir[n].take().expect("branch ir grad");
        let gv = g_vis[n].take().expect("branch vis grad");
        match net.config.variant {
            Variant::NoIfem => {
                let gin_ir = ctx.back_layer(lay.branch_ir[n], &gi)?;
                let gin_vis = ctx.back_layer(lay.branch_vis[n], &gv)?;
                if n > 0 {
                    accumulate(&mut g_ir[n - 1], gin_ir)?;
                    accumulate(&mut g_vis[n - 1], gin_vis)?;
                } else {
                    // Stems: source images are constants, input grads dropped.
                    ctx.back_layer(lay.stem_ir.expect("stem"), &gin_ir)?;
                    ctx.back_layer(lay.stem_vis.expect("stem"), &gin_vis)?;
                }
            }
            _ => {
                let a = ctx.back_layer(lay.branch_ir[n], &gi)?;
                accumulate(&mut g_fused[n], a)?;
                let b = ctx.back_layer(lay.branch_vis[n], &gv)?;
                accumulate(&mut g_fused[n], b)?;
            }
        }

        if net.config.variant == Variant::HierConnect && n < s - 1 {
            if let Some(ga) = g_adapter[n].take() {
                let g = ctx.back_layer(lay.adapters[n], &ga)?;
                accumulate(&mut g_fused[n], g)?;
            }
        }

        let gf = match g_fused[n].take() {
            Some(g) => g,
            // A one-sided variant may leave a stage's fused feature unused;
            // nothing to propagate through its trunk in that case only if it
            // also feeds nothing. The trunk always produced it, so a zero
            // gradient is the correct contribution.
            None => {
                let st = &out.stages[n];
                Tensor::zeros(st.fused.batch, st.fused.channels, st.fused.height, st.fused.width)
            }
        };
        let gx = ctx.back_chain(&lay.trunk[n], &gf)?;
        if n > 0 {
            let wprev = widths[n - 1];
            accumulate(&mut g_ir[n - 1], slice_channels(&gx, 0, wprev)?)?;
            accumulate(&mut g_vis[n - 1], slice_channels(&gx, wprev, wprev)?)?;
            if net.config.variant == Variant::HierConnect {
                let mut off = 2 * wprev;
                for k in 0..n {
                    accumulate(&mut g_adapter[k], slice_channels(&gx, off, widths[k])?)?;
                    off += widths[k];
                }
            }
        }
        // n == 0: gradient with respect to cat(I_1, I_2) is dropped.
    }

    Ok(ctx.grads)
}

/// Optimizer state paired with a network: one (weights, bias) moment block
/// per layer, in declaration order.
pub fn optimizer_for(net: &Network, hyper: AdamHyper) -> AdamState {
    let mut sizes = Vec::with_capacity(net.layers.len() * 2);
    for l in &net.layers {
        sizes.push(l.weights.len());
        sizes.push(l.bias.len());
    }
    AdamState::new(&sizes, hyper)
}

fn block_labels(net: &Network) -> Vec<String> {
    let mut labels = Vec::with_capacity(net.layers.len() * 2);
    for i in 0..net.layers.len() {
        labels.push(format!("layer {i} weights"));
        labels.push(format!("layer {i} bias"));
    }
    labels
}

/// Forward, loss, backward, and one Adam update. Returns the loss terms and
/// the forward output for logging.
pub fn train_step(
    net: &mut Network,
    opt: &mut AdamState,
    i1: &Tensor,
    i2: &Tensor,
    loss_cfg: &LossConfig,
) -> Result<LossTerms> {
    let out = forward(net, i1, i2)?;
    let terms = total_loss(
        &out.i_r1, &out.i_r2, &out.i_f, &out.w1, &out.w2, i1, i2, loss_cfg,
    )?;
    if let Some(name) = terms.first_non_finite() {
        return Err(Error::Training(format!("loss term {name}")));
    }
    let grads = backward(net, &out, &terms, i1, i2)?;

    let labels = block_labels(net);
    let mut param_refs: Vec<&mut [f64]> = Vec::with_capacity(net.layers.len() * 2);
    for l in &mut net.layers {
        param_refs.push(&mut l.weights.data);
        param_refs.push(&mut l.bias);
    }
    let mut grad_refs: Vec<&[f64]> = Vec::with_capacity(grads.weights.len() * 2);
    for (w, b) in grads.weights.iter().zip(&grads.bias) {
        grad_refs.push(&w.data);
        grad_refs.push(b);
    }
    opt.step(&mut param_refs, &grad_refs, &labels)?;
    Ok(terms)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn tiny_config(variant: Variant) -> NetConfig {
        NetConfig::new(3, 16, variant, 42).unwrap()
    }

    fn random_pair(seed: u64, h: usize, w: usize) -> (Tensor, Tensor) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = Tensor::from_vec(1, 1, h, w, (0..h * w).map(|_| rng.gen_range(0.0..1.0)).collect())
            .unwrap();
        let b = Tensor::from_vec(1, 1, h, w, (0..h * w).map(|_| rng.gen_range(0.0..1.0)).collect())
            .unwrap();
        (a, b)
    }

    #[test]
    fn default_config_matches_published_channel_lists() {
        let cfg = NetConfig::new(3, 1, Variant::Full, 0).unwrap();
        assert_eq!(
            cfg.ivif_channels,
            vec![64, 64, 128, 128, 256, 256, 256, 128, 64, 1]
        );
        assert_eq!(cfg.shfe_channels, vec![64, 128, 256, 128, 64, 1]);
    }

    #[test]
    fn scale_eight_config() {
        let cfg = NetConfig::new(3, 8, Variant::Full, 0).unwrap();
        assert_eq!(cfg.ivif_channels, vec![8, 8, 16, 16, 32, 32, 32, 16, 8, 1]);
        assert_eq!(cfg.shfe_channels, vec![8, 16, 32, 16, 8, 1]);
    }

    #[test]
    fn inconsistent_channel_lists_rejected() {
        let mut cfg = NetConfig::new(3, 8, Variant::Full, 0).unwrap();
        cfg.ivif_channels[0] = 99;
        let err = build_network(cfg).unwrap_err();
        assert!(err.to_string().contains("expected trunk"));
    }

    #[test]
    fn default_config_layer_counts() {
        let net = build_network(NetConfig::new(3, 8, Variant::Full, 1).unwrap()).unwrap();
        // 6 trunk + 3+3 branch + 4+4 weight heads + 3+3 recon heads
        assert_eq!(net.layers.len(), 26);
        assert_eq!(net.layout.whead1.len(), 4);
        assert_eq!(net.layout.rhead_ir.len(), 3);
    }

    #[test]
    fn same_seed_builds_identical_parameters() {
        let a = build_network(tiny_config(Variant::Full)).unwrap();
        let b = build_network(tiny_config(Variant::Full)).unwrap();
        assert_eq!(a.param_vec(), b.param_vec());
    }

    #[test]
    fn stage_shapes_match_channel_lists() {
        let net = build_network(NetConfig::new(3, 8, Variant::Full, 2).unwrap()).unwrap();
        let (i1, i2) = random_pair(3, 8, 8);
        let out = forward(&net, &i1, &i2).unwrap();
        // stage 2 (1-based): fused and branch features have 16 channels
        assert_eq!(out.stages[1].fused.channels, 16);
        assert_eq!(out.stages[1].ir.channels, 16);
        assert_eq!(out.stages[1].vis.channels, 16);
        // spatial size preserved everywhere
        for st in &out.stages {
            assert_eq!((st.fused.height, st.fused.width), (8, 8));
            assert_eq!((st.ir.height, st.ir.width), (8, 8));
        }
        assert_eq!(out.i_f.shape(), (1, 1, 8, 8));
        assert_eq!(out.i_r1.shape(), (1, 1, 8, 8));
    }

    #[test]
    fn ifem_stage_zero_input_gives_zero_triple() {
        let net = build_network(tiny_config(Variant::Full)).unwrap();
        let zero = Tensor::zeros(1, net.config.widths()[1], 4, 4);
        let st = ifem_stage(&net, &zero, 2).unwrap();
        assert!(st.ir.data.iter().all(|&v| v == 0.0));
        assert!(st.vis.data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn ifem_stage_rejects_out_of_range() {
        let net = build_network(tiny_config(Variant::Full)).unwrap();
        let zero = Tensor::zeros(1, 4, 4, 4);
        assert!(ifem_stage(&net, &zero, 0).is_err());
        assert!(ifem_stage(&net, &zero, 4).is_err());
    }

    #[test]
    fn zero_inputs_give_zero_outputs() {
        // zero biases at init, ReLU(0)=0, sigmoid(0)=0.5, but I_f = W*0 = 0
        let net = build_network(tiny_config(Variant::Full)).unwrap();
        let z = Tensor::zeros(1, 1, 6, 6);
        let out = forward(&net, &z, &z).unwrap();
        assert!(out.i_f.data.iter().all(|&v| v == 0.0));
        assert!(out.i_r1.data.iter().all(|&v| v == 0.0));
        assert!(out.i_r2.data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn fusion_identity_holds_bitwise() {
        for variant in [Variant::Full, Variant::NoIfem, Variant::HierConnect] {
            let net = build_network(tiny_config(variant)).unwrap();
            let (i1, i2) = random_pair(7, 8, 8);
            let out = forward(&net, &i1, &i2).unwrap();
            let mut recomputed = out.w1.mul(&i1).unwrap();
            recomputed.add_assign(&out.w2.mul(&i2).unwrap()).unwrap();
            assert_eq!(out.i_f.data, recomputed.data);
            // weight maps bounded by the sigmoid
            assert!(out.w1.data.iter().all(|&v| (0.0..=1.0).contains(&v)));
            assert!(out.w2.data.iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }

    #[test]
    fn forward_succeeds_for_all_stage_counts() {
        for stages in 1..=4 {
            for variant in [Variant::Full, Variant::NoIfem, Variant::HierConnect] {
                let cfg = NetConfig::new(stages, 16, variant, 5).unwrap();
                let net = build_network(cfg).unwrap();
                let (i1, i2) = random_pair(9, 6, 6);
                let out = forward(&net, &i1, &i2).unwrap();
                assert_eq!(out.stages.len(), stages);
                assert!(out.i_f.all_finite());
            }
        }
    }

    #[test]
    fn fuse_with_weight_maps_selector_and_convexity() {
        let (i1, i2) = random_pair(11, 6, 6);
        let ones = Tensor::from_vec(1, 1, 6, 6, vec![1.0; 36]).unwrap();
        let zeros = Tensor::zeros(1, 1, 6, 6);
        let f = fuse_with_weight_maps(&ones, &zeros, &i1, &i2, false).unwrap();
        assert_eq!(f.data, i1.data);

        let half = Tensor::from_vec(1, 1, 6, 6, vec![0.5; 36]).unwrap();
        let f = fuse_with_weight_maps(&half, &half, &i1, &i1, false).unwrap();
        for (a, b) in f.data.iter().zip(&i1.data) {
            assert!((a - b).abs() < 1e-15);
        }

        // constant maps: smoothing is a no-op
        let fs = fuse_with_weight_maps(&half, &half, &i1, &i2, true).unwrap();
        let fn_ = fuse_with_weight_maps(&half, &half, &i1, &i2, false).unwrap();
        for (a, b) in fs.data.iter().zip(&fn_.data) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn mismatched_pair_is_rejected() {
        let net = build_network(tiny_config(Variant::Full)).unwrap();
        let a = Tensor::zeros(1, 1, 6, 6);
        let b = Tensor::zeros(1, 1, 5, 6);
        assert!(forward(&net, &a, &b).is_err());
    }

    fn gradcheck_variant(variant: Variant, seed: u64) {
        use crate::gradcheck::{finite_diff_check, sample_coords};
        let cfg = NetConfig::new(2, 32, variant, seed).unwrap();
        let mut net = build_network(cfg).unwrap();
        // Zero-initialized biases put ReLU pre-activations exactly on the
        // kink wherever an input patch is all zero; jitter to a generic
        // point so central differences are well-defined.
        let mut jitter = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37);
        let mut p = net.param_vec();
        for v in &mut p {
            *v += jitter.gen_range(-0.1..0.1);
        }
        net.set_param_vec(&p).unwrap();
        let (i1, i2) = random_pair(seed + 100, 6, 6);
        let loss_cfg = LossConfig {
            window: 3,
            ..LossConfig::default()
        };

        let out = forward(&net, &i1, &i2).unwrap();
        let terms = total_loss(
            &out.i_r1, &out.i_r2, &out.i_f, &out.w1, &out.w2, &i1, &i2, &loss_cfg,
        )
        .unwrap();
        let grads = backward(&net, &out, &terms, &i1, &i2).unwrap();

        let params = net.param_vec();
        let analytic = grads.to_vec();
        let coords = sample_coords(params.len(), 60);
        let err = finite_diff_check(
            |p| {
                net.set_param_vec(p).unwrap();
                let out = forward(&net, &i1, &i2).unwrap();
                total_loss(
                    &out.i_r1, &out.i_r2, &out.i_f, &out.w1, &out.w2, &i1, &i2, &loss_cfg,
                )
                .unwrap()
                .total
            },
            &params,
            &analytic,
            1e-5,
            &coords,
        )
        .unwrap();
        assert!(err < 1e-5, "{variant:?}: max relative error {err}");
    }

    #[test]
    fn end_to_end_gradient_full() {
        gradcheck_variant(Variant::Full, 21);
    }

    #[test]
    fn end_to_end_gradient_no_ifem() {
        gradcheck_variant(Variant::NoIfem, 22);
    }

    #[test]
    fn end_to_end_gradient_hier_connect() {
        gradcheck_variant(Variant::HierConnect, 23);
    }

    #[test]
    fn training_reduces_loss_and_is_deterministic() {
        let run = || -> Vec<f64> {
            let mut net = build_network(tiny_config(Variant::Full)).unwrap();
            let mut opt = optimizer_for(&net, AdamHyper::default());
            let (i1, i2) = random_pair(55, 16, 16);
            let cfg = LossConfig {
                window: 8,
                ..LossConfig::default()
            };
            (0..30)
                .map(|_| train_step(&mut net, &mut opt, &i1, &i2, &cfg).unwrap().total)
                .collect()
        };
        let a = run();
        let b = run();
        assert_eq!(a, b, "training must be bitwise deterministic");
        assert!(a.last().unwrap() < a.first().unwrap());
    }


}
