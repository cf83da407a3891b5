//! The stylized generator: mapping network, per-site affine style heads,
//! upsampling blocks (original and light), channel gates between distant
//! layers, and the full assembly.

mod config;

pub use config::{AdainLayer, BlockKind, GeneratorConfig, RootKind, SleVariant};

use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;

use crate::error::{Error, Result};
use crate::layers::{
    adain, batch_norm, draw_noise_map, inject_noise, instance_norm, BatchNormState, NoiseParams,
    NORM_EPS,
};
use crate::params::{group_counts, Binder};
use crate::tensor::{Node, Tensor};

pub const LEAKY_SLOPE: f32 = 0.2;

#[derive(Debug, Clone)]
pub struct LinearParams {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl LinearParams {
    fn he(d_out: usize, d_in: usize, rng: &mut impl Rng) -> Self {
        let std = (2.0 / d_in as f32).sqrt();
        LinearParams {
            weight: Tensor::randn(&[d_out, d_in], std, rng),
            bias: Tensor::zeros(&[d_out]),
        }
    }

    pub fn numel(&self) -> usize {
        self.weight.numel() + self.bias.numel()
    }
}

#[derive(Debug, Clone)]
pub struct ConvParams {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl ConvParams {
    fn he(c_out: usize, c_in: usize, k: usize, rng: &mut impl Rng) -> Self {
        let std = (2.0 / (c_in * k * k) as f32).sqrt();
        ConvParams {
            weight: Tensor::randn(&[c_out, c_in, k, k], std, rng),
            bias: Tensor::zeros(&[c_out]),
        }
    }

    fn scaled(c_out: usize, c_in: usize, k: usize, gain: f32, rng: &mut impl Rng) -> Self {
        let std = gain / ((c_in * k * k) as f32).sqrt();
        ConvParams {
            weight: Tensor::randn(&[c_out, c_in, k, k], std, rng),
            bias: Tensor::zeros(&[c_out]),
        }
    }

    pub fn numel(&self) -> usize {
        self.weight.numel() + self.bias.numel()
    }
}

#[derive(Debug, Clone)]
pub enum RootParams {
    Const(Tensor),
    Projected(LinearParams),
}

/// One upsampling block of the synthesis path.
#[derive(Debug, Clone)]
pub struct BlockParams {
    pub kind: BlockKind,
    pub res: usize,
    pub conv1: ConvParams,
    pub noise1: NoiseParams,
    pub bn1: Option<BatchNormState>,
    pub conv2: Option<ConvParams>,
    pub noise2: Option<NoiseParams>,
    pub bn2: Option<BatchNormState>,
}

impl BlockParams {
    pub fn new(kind: BlockKind, res: usize, c_in: usize, c_out: usize, rng: &mut impl Rng) -> Self {
        let conv1 = ConvParams::he(c_out, c_in, 3, rng);
        match kind {
            BlockKind::Light => BlockParams {
                kind,
                res,
                conv1,
                noise1: NoiseParams::new(c_out),
                bn1: None,
                conv2: None,
                noise2: None,
                bn2: None,
            },
            BlockKind::Original => BlockParams {
                kind,
                res,
                conv1,
                noise1: NoiseParams::new(c_out),
                bn1: Some(BatchNormState::new(c_out)),
                conv2: Some(ConvParams::he(c_out, c_out, 3, rng)),
                noise2: Some(NoiseParams::new(c_out)),
                bn2: Some(BatchNormState::new(c_out)),
            },
        }
    }

    /// Trainable parameter count (running stats excluded).
    pub fn param_count(&self) -> usize {
        let mut n = self.conv1.numel() + self.noise1.scale.numel();
        if let Some(bn) = &self.bn1 {
            n += bn.gamma.numel() + bn.beta.numel();
        }
        if let Some(c) = &self.conv2 {
            n += c.numel();
        }
        if let Some(p) = &self.noise2 {
            n += p.scale.numel();
        }
        if let Some(bn) = &self.bn2 {
            n += bn.gamma.numel() + bn.beta.numel();
        }
        n
    }
}

/// Gate block between a low-res and a high-res layer.
#[derive(Debug, Clone)]
pub struct SleBinding {
    pub low_res: usize,
    pub high_res: usize,
    pub variant: SleVariant,
    pub conv_pool: ConvParams,
    pub conv_gate: ConvParams,
}

impl SleBinding {
    fn new(
        low_res: usize,
        high_res: usize,
        c_low: usize,
        c_high: usize,
        variant: SleVariant,
        rng: &mut impl Rng,
    ) -> Self {
        SleBinding {
            low_res,
            high_res,
            variant,
            conv_pool: ConvParams::he(c_low, c_low, 4, rng),
            conv_gate: ConvParams::he(c_high, c_low, 1, rng),
        }
    }

    /// Diagnostic: pins the sigmoid gate at exactly 1, making the block a
    /// pass-through of the high-res input.
    pub fn force_unit_gate(&mut self) {
        self.conv_gate.weight = Tensor::zeros(self.conv_gate.weight.shape());
        self.conv_gate.bias = Tensor::full(self.conv_gate.bias.shape(), 100.0);
    }

    fn name(&self) -> String {
        format!("sle.{}x{}", self.low_res, self.high_res)
    }
}

/// Every trainable tensor of one generator, plus its architecture.
#[derive(Debug, Clone)]
pub struct GeneratorParams {
    pub config: GeneratorConfig,
    pub mapping: Vec<LinearParams>,
    pub root: RootParams,
    pub blocks: Vec<BlockParams>,
    pub affines: BTreeMap<usize, LinearParams>,
    pub sles: Vec<SleBinding>,
    pub to_rgb: ConvParams,
}

impl GeneratorParams {
    pub fn init(config: &GeneratorConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let mapping = if config.uses_mapping() {
            (0..config.mapping_depth)
                .map(|i| {
                    let d_in = if i == 0 { config.z_dim } else { config.w_dim };
                    LinearParams::he(config.w_dim, d_in, rng)
                })
                .collect()
        } else {
            Vec::new()
        };
        let c0 = config.channels_at(4);
        let root = match config.root {
            RootKind::Const => RootParams::Const(Tensor::randn(&[c0, 4, 4], 1.0, rng)),
            RootKind::NoiseProjected => {
                RootParams::Projected(LinearParams::he(c0 * 16, config.z_dim, rng))
            }
        };
        let kinds = config.effective_blocks();
        let blocks = config
            .layer_resolutions()
            .iter()
            .zip(kinds)
            .map(|(&res, kind)| {
                BlockParams::new(kind, res, config.channels_at(res / 2), config.channels_at(res), rng)
            })
            .collect();
        let mut affines = BTreeMap::new();
        for res in config.style_sites() {
            let c = config.channels_at(res);
            // Near-inert start: styles sit close to (1, 0).
            let head = LinearParams {
                weight: Tensor::randn(&[2 * c, config.w_dim], 0.01, rng),
                bias: Tensor::zeros(&[2 * c]),
            };
            affines.insert(res, head);
        }
        let sles = config
            .effective_sle_pairs()
            .iter()
            .map(|&(low, high)| {
                SleBinding::new(
                    low,
                    high,
                    config.channels_at(low),
                    config.channels_at(high),
                    config.sle_variant,
                    rng,
                )
            })
            .collect();
        let to_rgb = ConvParams::scaled(3, config.channels_at(config.out_res), 3, 1.0, rng);
        Ok(GeneratorParams { config: config.clone(), mapping, root, blocks, affines, sles, to_rgb })
    }

    /// Visits every trainable tensor in a stable order.
    pub fn visit_params(&self, f: &mut dyn FnMut(&str, &Tensor)) {
        for (i, lin) in self.mapping.iter().enumerate() {
            f(&format!("mapping.{i}.weight"), &lin.weight);
            f(&format!("mapping.{i}.bias"), &lin.bias);
        }
        match &self.root {
            RootParams::Const(c) => f("root.const", c),
            RootParams::Projected(lin) => {
                f("root.proj.weight", &lin.weight);
                f("root.proj.bias", &lin.bias);
            }
        }
        for b in &self.blocks {
            let p = format!("block.{}", b.res);
            f(&format!("{p}.conv1.weight"), &b.conv1.weight);
            f(&format!("{p}.conv1.bias"), &b.conv1.bias);
            f(&format!("{p}.noise1.scale"), &b.noise1.scale);
            if let Some(bn) = &b.bn1 {
                f(&format!("{p}.bn1.gamma"), &bn.gamma);
                f(&format!("{p}.bn1.beta"), &bn.beta);
            }
            if let Some(c) = &b.conv2 {
                f(&format!("{p}.conv2.weight"), &c.weight);
                f(&format!("{p}.conv2.bias"), &c.bias);
            }
            if let Some(np) = &b.noise2 {
                f(&format!("{p}.noise2.scale"), &np.scale);
            }
            if let Some(bn) = &b.bn2 {
                f(&format!("{p}.bn2.gamma"), &bn.gamma);
                f(&format!("{p}.bn2.beta"), &bn.beta);
            }
        }
        for (res, head) in &self.affines {
            f(&format!("affine.{res}.weight"), &head.weight);
            f(&format!("affine.{res}.bias"), &head.bias);
        }
        for s in &self.sles {
            let p = s.name();
            f(&format!("{p}.pool.weight"), &s.conv_pool.weight);
            f(&format!("{p}.pool.bias"), &s.conv_pool.bias);
            f(&format!("{p}.gate.weight"), &s.conv_gate.weight);
            f(&format!("{p}.gate.bias"), &s.conv_gate.bias);
        }
        f("to_rgb.weight", &self.to_rgb.weight);
        f("to_rgb.bias", &self.to_rgb.bias);
    }

    /// Mutable visit in the same order as [`visit_params`].
    pub fn visit_params_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        for (i, lin) in self.mapping.iter_mut().enumerate() {
            f(&format!("mapping.{i}.weight"), &mut lin.weight);
            f(&format!("mapping.{i}.bias"), &mut lin.bias);
        }
        match &mut self.root {
            RootParams::Const(c) => f("root.const", c),
            RootParams::Projected(lin) => {
                f("root.proj.weight", &mut lin.weight);
                f("root.proj.bias", &mut lin.bias);
            }
        }
        for b in &mut self.blocks {
            let p = format!("block.{}", b.res);
            f(&format!("{p}.conv1.weight"), &mut b.conv1.weight);
            f(&format!("{p}.conv1.bias"), &mut b.conv1.bias);
            f(&format!("{p}.noise1.scale"), &mut b.noise1.scale);
            if let Some(bn) = &mut b.bn1 {
                f(&format!("{p}.bn1.gamma"), &mut bn.gamma);
                f(&format!("{p}.bn1.beta"), &mut bn.beta);
            }
            if let Some(c) = &mut b.conv2 {
                f(&format!("{p}.conv2.weight"), &mut c.weight);
                f(&format!("{p}.conv2.bias"), &mut c.bias);
            }
            if let Some(np) = &mut b.noise2 {
                f(&format!("{p}.noise2.scale"), &mut np.scale);
            }
            if let Some(bn) = &mut b.bn2 {
                f(&format!("{p}.bn2.gamma"), &mut bn.gamma);
                f(&format!("{p}.bn2.beta"), &mut bn.beta);
            }
        }
        for (res, head) in &mut self.affines {
            f(&format!("affine.{res}.weight"), &mut head.weight);
            f(&format!("affine.{res}.bias"), &mut head.bias);
        }
        for s in &mut self.sles {
            let p = s.name();
            f(&format!("{p}.pool.weight"), &mut s.conv_pool.weight);
            f(&format!("{p}.pool.bias"), &mut s.conv_pool.bias);
            f(&format!("{p}.gate.weight"), &mut s.conv_gate.weight);
            f(&format!("{p}.gate.bias"), &mut s.conv_gate.bias);
        }
        f("to_rgb.weight", &mut self.to_rgb.weight);
        f("to_rgb.bias", &mut self.to_rgb.bias);
    }

    /// Non-trainable buffers (batch-norm running statistics).
    pub fn visit_buffers(&self, f: &mut dyn FnMut(&str, &Tensor)) {
        for b in &self.blocks {
            let p = format!("block.{}", b.res);
            if let Some(bn) = &b.bn1 {
                f(&format!("{p}.bn1.running_mean"), &bn.running_mean);
                f(&format!("{p}.bn1.running_var"), &bn.running_var);
            }
            if let Some(bn) = &b.bn2 {
                f(&format!("{p}.bn2.running_mean"), &bn.running_mean);
                f(&format!("{p}.bn2.running_var"), &bn.running_var);
            }
        }
    }

    pub fn visit_buffers_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        for b in &mut self.blocks {
            let p = format!("block.{}", b.res);
            if let Some(bn) = &mut b.bn1 {
                f(&format!("{p}.bn1.running_mean"), &mut bn.running_mean);
                f(&format!("{p}.bn1.running_var"), &mut bn.running_var);
            }
            if let Some(bn) = &mut b.bn2 {
                f(&format!("{p}.bn2.running_mean"), &mut bn.running_mean);
                f(&format!("{p}.bn2.running_var"), &mut bn.running_var);
            }
        }
    }

    /// Per-component and total trainable counts from an exact tree walk.
    pub fn param_counts(&self) -> ParamCounts {
        let mut flat = Vec::new();
        self.visit_params(&mut |name, t| flat.push((name.to_string(), t.numel())));
        let groups = group_counts(&flat);
        let total = flat.iter().map(|(_, n)| n).sum();
        ParamCounts { groups, total }
    }
}

#[derive(Debug, Clone)]
pub struct ParamCounts {
    pub groups: Vec<(String, usize)>,
    pub total: usize,
}

/// Exact trainable-parameter counts for a config.
pub fn count_params(config: &GeneratorConfig) -> Result<ParamCounts> {
    // Counts depend only on shapes; any seed builds the same tree.
    let params = GeneratorParams::init(config, &mut ChaCha8Rng::seed_from_u64(0))?;
    Ok(params.param_counts())
}

/// Options for one generator forward pass.
#[derive(Debug, Clone, Copy)]
pub struct ForwardOpts {
    /// Register parameters as trainable leaves.
    pub trainable: bool,
    /// Batch-norm in batch-statistics mode (updates running stats).
    pub training: bool,
    /// Inject per-site noise.
    pub noise: bool,
    /// Diagnostic: run plain instance norm at style sites instead of the
    /// affine-driven renormalization.
    pub instance_norm_only: bool,
}

impl ForwardOpts {
    pub fn sampling() -> Self {
        ForwardOpts { trainable: false, training: false, noise: true, instance_norm_only: false }
    }

    pub fn training() -> Self {
        ForwardOpts { trainable: true, training: true, noise: true, instance_norm_only: false }
    }
}

/// Mapping MLP: z -> style vector w, leaky activations between layers.
pub fn map_latent(binder: &mut Binder, mapping: &[LinearParams], z: Node) -> Result<Node> {
    if mapping.is_empty() {
        return Err(Error::config("map_latent: mapping network has no layers".to_string()));
    }
    let mut h = z;
    for (i, lin) in mapping.iter().enumerate() {
        let w = binder.bind(format!("mapping.{i}.weight"), &lin.weight);
        let b = binder.bind(format!("mapping.{i}.bias"), &lin.bias);
        h = binder.tape.linear(h, w, Some(b))?;
        if i + 1 < mapping.len() {
            h = binder.tape.leaky_relu(h, LEAKY_SLOPE)?;
        }
    }
    Ok(h)
}

/// Per-site style head: one linear layer producing 2C outputs; the first C
/// (plus the +1 offset) are the scales, the last C the biases.
pub fn affine(
    binder: &mut Binder,
    head: &LinearParams,
    name: &str,
    w: Node,
    channels: usize,
) -> Result<(Node, Node)> {
    let (d_out, _) = head.weight.dims2()?;
    if d_out != 2 * channels {
        return Err(Error::config(format!(
            "affine: head produces {d_out} outputs, site needs {}",
            2 * channels
        )));
    }
    let wn = binder.bind(format!("{name}.weight"), &head.weight);
    let bn = binder.bind(format!("{name}.bias"), &head.bias);
    let out = binder.tape.linear(w, wn, Some(bn))?;
    let raw_scale = binder.tape.slice_cols(out, 0, channels)?;
    let y_scale = binder.tape.add_scalar(raw_scale, 1.0)?;
    let y_bias = binder.tape.slice_cols(out, channels, channels)?;
    Ok((y_scale, y_bias))
}

/// One synthesis block; doubles the spatial size.
pub fn fg_block(
    binder: &mut Binder,
    block: &mut BlockParams,
    name: &str,
    x: Node,
    rng: &mut impl Rng,
    opts: &ForwardOpts,
) -> Result<Node> {
    let up = binder.tape.upsample_nearest(x, 2)?;
    let w1 = binder.bind(format!("{name}.conv1.weight"), &block.conv1.weight);
    let b1 = binder.bind(format!("{name}.conv1.bias"), &block.conv1.bias);
    let mut y = binder.tape.conv2d(up, w1, Some(b1), 1, 1)?;
    if opts.noise {
        let (n, _, h, w) = binder.tape.value(y).dims4()?;
        let eps = draw_noise_map(n, h, w, rng);
        let s1 = binder.bind(format!("{name}.noise1.scale"), &block.noise1.scale);
        y = inject_noise(binder.tape, y, s1, &eps)?;
    }
    if block.kind == BlockKind::Light {
        return Ok(y);
    }
    let bn1 = block.bn1.as_mut().expect("original block has bn1");
    let g1 = binder.bind(format!("{name}.bn1.gamma"), &bn1.gamma);
    let be1 = binder.bind(format!("{name}.bn1.beta"), &bn1.beta);
    y = batch_norm(binder.tape, y, g1, be1, bn1, opts.training)?;
    y = binder.tape.leaky_relu(y, LEAKY_SLOPE)?;

    let conv2 = block.conv2.as_ref().expect("original block has conv2");
    let w2 = binder.bind(format!("{name}.conv2.weight"), &conv2.weight);
    let b2 = binder.bind(format!("{name}.conv2.bias"), &conv2.bias);
    y = binder.tape.conv2d(y, w2, Some(b2), 1, 1)?;
    if opts.noise {
        let (n, _, h, w) = binder.tape.value(y).dims4()?;
        let eps = draw_noise_map(n, h, w, rng);
        let noise2 = block.noise2.as_ref().expect("original block has noise2");
        let s2 = binder.bind(format!("{name}.noise2.scale"), &noise2.scale);
        y = inject_noise(binder.tape, y, s2, &eps)?;
    }
    let bn2 = block.bn2.as_mut().expect("original block has bn2");
    let g2 = binder.bind(format!("{name}.bn2.gamma"), &bn2.gamma);
    let be2 = binder.bind(format!("{name}.bn2.beta"), &bn2.beta);
    y = batch_norm(binder.tape, y, g2, be2, bn2, opts.training)?;
    binder.tape.leaky_relu(y, LEAKY_SLOPE)
}

/// Channel gate: squeeze x_low to a per-channel sigmoid gate and multiply it
/// onto x_high.
pub fn sle(binder: &mut Binder, s: &SleBinding, x_low: Node, x_high: Node) -> Result<Node> {
    let (_, _, hl, _) = binder.tape.value(x_low).dims4()?;
    let (n, c_high, hh, _) = binder.tape.value(x_high).dims4()?;
    if hl >= hh {
        return Err(Error::config(format!(
            "sle: low-res input ({hl}) must be smaller than high-res input ({hh})"
        )));
    }
    let name = s.name();
    let pooled = binder.tape.adaptive_avg_pool(x_low, 4)?;
    let pw = binder.bind(format!("{name}.pool.weight"), &s.conv_pool.weight);
    let pb = binder.bind(format!("{name}.pool.bias"), &s.conv_pool.bias);
    let mut h = binder.tape.conv2d(pooled, pw, Some(pb), 1, 0)?;
    if s.variant == SleVariant::Deep {
        h = binder.tape.leaky_relu(h, LEAKY_SLOPE)?;
    }
    let gw = binder.bind(format!("{name}.gate.weight"), &s.conv_gate.weight);
    let gb = binder.bind(format!("{name}.gate.bias"), &s.conv_gate.bias);
    let logits = binder.tape.conv2d(h, gw, Some(gb), 1, 0)?;
    let gate = binder.tape.sigmoid(logits)?;
    let gate = binder.tape.reshape(gate, &[n, c_high])?;
    binder.tape.scale_nc(x_high, gate)
}

/// Full synthesis: z -> image in [-1, 1] of shape [N, 3, out_res, out_res].
pub fn generate(
    binder: &mut Binder,
    params: &mut GeneratorParams,
    z: Node,
    rng: &mut impl Rng,
    opts: &ForwardOpts,
) -> Result<Node> {
    let config = params.config.clone();
    let (n, z_dim) = binder.tape.value(z).dims2()?;
    if z_dim != config.z_dim {
        return Err(Error::config(format!(
            "generate: z has {z_dim} dims, config wants {}",
            config.z_dim
        )));
    }

    let style = if config.uses_mapping() {
        Some(map_latent(binder, &params.mapping, z)?)
    } else {
        None
    };

    let mut x = match &params.root {
        RootParams::Const(c) => {
            let root = binder.bind("root.const".to_string(), c);
            binder.tape.broadcast_batch(root, n)?
        }
        RootParams::Projected(lin) => {
            let w = binder.bind("root.proj.weight".to_string(), &lin.weight);
            let b = binder.bind("root.proj.bias".to_string(), &lin.bias);
            let y = binder.tape.linear(z, w, Some(b))?;
            let y = binder.tape.leaky_relu(y, LEAKY_SLOPE)?;
            binder.tape.reshape(y, &[n, config.channels_at(4), 4, 4])?
        }
    };

    let style_sites = config.style_sites();
    let mut by_res: BTreeMap<usize, Node> = BTreeMap::new();
    by_res.insert(4, x);

    for (i, &res) in config.layer_resolutions().iter().enumerate() {
        let name = format!("block.{res}");
        x = fg_block(binder, &mut params.blocks[i], &name, x, rng, opts)?;
        for s in &params.sles {
            if s.high_res == res {
                let x_low = *by_res.get(&s.low_res).ok_or_else(|| {
                    Error::config(format!("sle gate source {} not yet synthesized", s.low_res))
                })?;
                x = sle(binder, s, x_low, x)?;
            }
        }
        if style_sites.contains(&res) {
            if opts.instance_norm_only {
                x = instance_norm(binder.tape, x, NORM_EPS)?;
            } else {
                let w_node = style.ok_or_else(|| {
                    Error::config("style site present but mapping network is empty".to_string())
                })?;
                let head = params.affines.get(&res).ok_or_else(|| {
                    Error::config(format!("no affine head for style site {res}"))
                })?;
                let c = config.channels_at(res);
                let (ys, yb) = affine(binder, head, &format!("affine.{res}"), w_node, c)?;
                x = adain(binder.tape, x, ys, yb, NORM_EPS)?;
            }
        }
        by_res.insert(res, x);
    }

    let wr = binder.bind("to_rgb.weight".to_string(), &params.to_rgb.weight);
    let br = binder.bind("to_rgb.bias".to_string(), &params.to_rgb.bias);
    let img = binder.tape.conv2d(x, wr, Some(br), 1, 1)?;
    binder.tape.tanh(img)
}
