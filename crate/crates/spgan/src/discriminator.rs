//! Fixed multi-scale feature projections and the independent critic heads
//! that read them, plus the adversarial losses.
//!
//! The projection network is drawn once from a seed and never trained;
//! gradients pass through it to the generator but its weights are recorded
//! on the tape as constants.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::generator::{ConvParams, LEAKY_SLOPE};
use crate::params::Binder;
use crate::tensor::{conv2d_out_hw, Node, Tape, Tensor};

/// Number of pyramid scales and independent heads.
pub const PYRAMID_LEVELS: usize = 4;

/// Channel width after cross-channel mixing; every head reads this many.
pub const MIXED_CHANNELS: usize = 32;

const BACKBONE_CHANNELS: [usize; PYRAMID_LEVELS] = [16, 32, 64, 64];
const HEAD_CHANNELS: usize = 64;

/// Heads emit spatial patch logit maps, not pooled scalars.
pub const PATCH_LOGITS: bool = true;

fn draw_conv(c_out: usize, c_in: usize, k: usize, rng: &mut impl Rng) -> ConvParams {
    // Scaled Gaussian, gain sqrt(2).
    let std = (2.0f32).sqrt() / ((c_in * k * k) as f32).sqrt();
    ConvParams {
        weight: Tensor::randn(&[c_out, c_in, k, k], std, rng),
        bias: Tensor::zeros(&[c_out]),
    }
}

/// Frozen projection pyramid: a stride-2 backbone tapped at four scales,
/// per-scale 1x1 channel mixing, and a top-down upsample-and-add pass with
/// 3x3 smoothing convs.
#[derive(Debug, Clone)]
pub struct ProjectionNet {
    pub seed: u64,
    pub resolution: usize,
    stages: Vec<ConvParams>,
    ccm: Vec<ConvParams>,
    csm: Vec<ConvParams>,
}

impl ProjectionNet {
    pub fn new(seed: u64, resolution: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut stages = Vec::new();
        let mut c_in = 3;
        for &c_out in BACKBONE_CHANNELS.iter() {
            // 4x4 stride-2 pad-1 halves even extents exactly.
            stages.push(draw_conv(c_out, c_in, 4, &mut rng));
            c_in = c_out;
        }
        let ccm = BACKBONE_CHANNELS
            .iter()
            .map(|&c| draw_conv(MIXED_CHANNELS, c, 1, &mut rng))
            .collect();
        let csm = (0..PYRAMID_LEVELS)
            .map(|_| draw_conv(MIXED_CHANNELS, MIXED_CHANNELS, 3, &mut rng))
            .collect();
        ProjectionNet { seed, resolution, stages, ccm, csm }
    }

    /// Spatial sizes of the pyramid, largest first: R/2 .. R/16.
    pub fn scale_sizes(&self) -> [usize; PYRAMID_LEVELS] {
        let r = self.resolution;
        [r / 2, r / 4, r / 8, r / 16]
    }

    fn visit_weights(&self, f: &mut dyn FnMut(&Tensor)) {
        for group in [&self.stages, &self.ccm, &self.csm] {
            for conv in group {
                f(&conv.weight);
                f(&conv.bias);
            }
        }
    }

    /// Fingerprint of all weight bytes; pinned across training to prove the
    /// projections stay fixed.
    pub fn checksum(&self) -> u64 {
        let mut hash = crate::util::Fnv64::new();
        self.visit_weights(&mut |t| {
            for v in t.data() {
                hash.write(&v.to_le_bytes());
            }
        });
        hash.finish()
    }

    /// Maps images [N,3,R,R] to the feature pyramid, largest scale first.
    pub fn project(&self, tape: &mut Tape, images: Node) -> Result<Vec<Node>> {
        let (_, c, h, w) = tape.value(images).dims4()?;
        if c != 3 || h != self.resolution || w != self.resolution {
            return Err(Error::config(format!(
                "project: expected [N,3,{r},{r}] input, got {:?}",
                tape.value(images).shape(),
                r = self.resolution
            )));
        }
        // Backbone taps.
        let mut taps = Vec::with_capacity(PYRAMID_LEVELS);
        let mut x = images;
        for conv in &self.stages {
            let wn = tape.constant(&conv.weight);
            let bn = tape.constant(&conv.bias);
            x = tape.conv2d(x, wn, Some(bn), 2, 1)?;
            x = tape.leaky_relu(x, LEAKY_SLOPE)?;
            taps.push(x);
        }
        // Cross-channel mixing to a common width.
        let mut mixed = Vec::with_capacity(PYRAMID_LEVELS);
        for (tap, conv) in taps.iter().zip(&self.ccm) {
            let wn = tape.constant(&conv.weight);
            let bn = tape.constant(&conv.bias);
            mixed.push(tape.conv2d(*tap, wn, Some(bn), 1, 0)?);
        }
        // Cross-scale mixing: top-down upsample-and-add, then smooth.
        let mut pyramid = vec![Node::default(); PYRAMID_LEVELS];
        let mut carry: Option<Node> = None;
        for m in (0..PYRAMID_LEVELS).rev() {
            let fused = match carry {
                None => mixed[m],
                Some(above) => {
                    let up = tape.upsample_nearest(above, 2)?;
                    tape.add(mixed[m], up)?
                }
            };
            let wn = tape.constant(&self.csm[m].weight);
            let bn = tape.constant(&self.csm[m].bias);
            let smoothed = tape.conv2d(fused, wn, Some(bn), 1, 1)?;
            pyramid[m] = smoothed;
            carry = Some(smoothed);
        }
        Ok(pyramid)
    }
}

/// One critic head: stride-2 conv stack ending in a 1-channel conv. As many
/// stride-2 stages as the scale admits, capped at two.
#[derive(Debug, Clone)]
pub struct HeadParams {
    pub convs: Vec<ConvParams>,
    pub out: ConvParams,
}

/// Independent trainable heads, one per pyramid scale; no shared tensors.
#[derive(Debug, Clone)]
pub struct DiscriminatorHeads {
    pub resolution: usize,
    pub heads: Vec<HeadParams>,
}

impl DiscriminatorHeads {
    pub fn init(resolution: usize, rng: &mut impl Rng) -> Self {
        let sizes = [resolution / 2, resolution / 4, resolution / 8, resolution / 16];
        let heads = sizes
            .iter()
            .map(|&s| {
                let mut convs = Vec::new();
                let mut size = s;
                let mut c_in = MIXED_CHANNELS;
                while size >= 2 && convs.len() < 2 {
                    convs.push(draw_conv(HEAD_CHANNELS, c_in, 4, rng));
                    c_in = HEAD_CHANNELS;
                    size /= 2;
                }
                // Near-zero logits at init keep the adversarial losses at
                // their analytic starting values.
                let out = ConvParams {
                    weight: Tensor::randn(&[1, c_in, 1, 1], 0.02, rng),
                    bias: Tensor::zeros(&[1]),
                };
                HeadParams { convs, out }
            })
            .collect();
        DiscriminatorHeads { resolution, heads }
    }

    pub fn visit_params(&self, f: &mut dyn FnMut(&str, &Tensor)) {
        for (m, head) in self.heads.iter().enumerate() {
            for (i, conv) in head.convs.iter().enumerate() {
                f(&format!("head.{m}.conv{i}.weight"), &conv.weight);
                f(&format!("head.{m}.conv{i}.bias"), &conv.bias);
            }
            f(&format!("head.{m}.out.weight"), &head.out.weight);
            f(&format!("head.{m}.out.bias"), &head.out.bias);
        }
    }

    pub fn visit_params_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        for (m, head) in self.heads.iter_mut().enumerate() {
            for (i, conv) in head.convs.iter_mut().enumerate() {
                f(&format!("head.{m}.conv{i}.weight"), &mut conv.weight);
                f(&format!("head.{m}.conv{i}.bias"), &mut conv.bias);
            }
            f(&format!("head.{m}.out.weight"), &mut head.out.weight);
            f(&format!("head.{m}.out.bias"), &mut head.out.bias);
        }
    }
}

/// Applies each head to its pyramid level; returns one patch logit map per
/// scale.
pub fn discriminate(
    binder: &mut Binder,
    heads: &DiscriminatorHeads,
    pyramid: &[Node],
) -> Result<Vec<Node>> {
    if pyramid.len() != heads.heads.len() {
        return Err(Error::config(format!(
            "discriminate: {} pyramid levels vs {} heads",
            pyramid.len(),
            heads.heads.len()
        )));
    }
    let mut logits = Vec::with_capacity(pyramid.len());
    for (m, (head, &level)) in heads.heads.iter().zip(pyramid).enumerate() {
        let mut x = level;
        for (i, conv) in head.convs.iter().enumerate() {
            let (_, _, h, _) = binder.tape.value(x).dims4()?;
            conv2d_out_hw(h, 4, 2, 1)?;
            let wn = binder.bind(format!("head.{m}.conv{i}.weight"), &conv.weight);
            let bn = binder.bind(format!("head.{m}.conv{i}.bias"), &conv.bias);
            x = binder.tape.conv2d(x, wn, Some(bn), 2, 1)?;
            x = binder.tape.leaky_relu(x, LEAKY_SLOPE)?;
        }
        let wn = binder.bind(format!("head.{m}.out.weight"), &head.out.weight);
        let bn = binder.bind(format!("head.{m}.out.bias"), &head.out.bias);
        x = binder.tape.conv2d(x, wn, Some(bn), 1, 0)?;
        logits.push(x);
    }
    Ok(logits)
}

/// Critic loss, summed over scales: mean softplus(-real) + mean softplus(fake).
pub fn loss_d(tape: &mut Tape, real_logits: &[Node], fake_logits: &[Node]) -> Result<Node> {
    if real_logits.is_empty() || real_logits.len() != fake_logits.len() {
        return Err(Error::usage(format!(
            "loss_d: got {} real and {} fake logit maps",
            real_logits.len(),
            fake_logits.len()
        )));
    }
    let mut total: Option<Node> = None;
    for (&real, &fake) in real_logits.iter().zip(fake_logits) {
        let neg_real = tape.neg(real)?;
        let sp_real = tape.softplus(neg_real)?;
        let term_real = tape.mean_all(sp_real)?;
        let sp_fake = tape.softplus(fake)?;
        let term_fake = tape.mean_all(sp_fake)?;
        let scale_term = tape.add(term_real, term_fake)?;
        total = Some(match total {
            None => scale_term,
            Some(t) => tape.add(t, scale_term)?,
        });
    }
    Ok(total.expect("non-empty logit list"))
}

/// Generator loss (non-saturating): sum over scales of mean softplus(-fake).
pub fn loss_g(tape: &mut Tape, fake_logits: &[Node]) -> Result<Node> {
    if fake_logits.is_empty() {
        return Err(Error::usage("loss_g: empty logit list".to_string()));
    }
    let mut total: Option<Node> = None;
    for &fake in fake_logits {
        let neg = tape.neg(fake)?;
        let sp = tape.softplus(neg)?;
        let term = tape.mean_all(sp)?;
        total = Some(match total {
            None => term,
            Some(t) => tape.add(t, term)?,
        });
    }
    Ok(total.expect("non-empty logit list"))
}

#[cfg(test)]
mod tests {
    use super::*;

    const LN2: f32 = std::f32::consts::LN_2;

    #[test]
    fn pyramid_shapes_at_64() {
        let net = ProjectionNet::new(7, 64);
        let mut tape = Tape::new();
        let x = tape.constant(&Tensor::zeros(&[2, 3, 64, 64]));
        let pyr = net.project(&mut tape, x).unwrap();
        let sizes: Vec<usize> = pyr.iter().map(|&n| tape.value(n).shape()[2]).collect();
        assert_eq!(sizes, vec![32, 16, 8, 4]);
        for &n in &pyr {
            assert_eq!(tape.value(n).shape()[1], MIXED_CHANNELS);
        }
    }

    #[test]
    fn projection_is_deterministic_per_seed() {
        let a = ProjectionNet::new(11, 32);
        let b = ProjectionNet::new(11, 32);
        assert_eq!(a.checksum(), b.checksum());
        let c = ProjectionNet::new(12, 32);
        assert_ne!(a.checksum(), c.checksum());

        use rand::SeedableRng;
        let img = Tensor::randn(&[1, 3, 32, 32], 0.5, &mut ChaCha8Rng::seed_from_u64(1));
        let mut tape = Tape::new();
        let x = tape.constant(&img);
        let p1 = a.project(&mut tape, x).unwrap();
        let p2 = a.project(&mut tape, x).unwrap();
        for (&u, &v) in p1.iter().zip(&p2) {
            assert_eq!(tape.value(u).data(), tape.value(v).data());
        }
    }

    #[test]
    fn gradient_flows_through_but_not_into_projection() {
        use rand::SeedableRng;
        let net = ProjectionNet::new(3, 32);
        let img = Tensor::randn(&[1, 3, 32, 32], 0.5, &mut ChaCha8Rng::seed_from_u64(2));
        let mut tape = Tape::new();
        let x = tape.param(&img);
        let pyr = net.project(&mut tape, x).unwrap();
        let mut loss = tape.sum_all(pyr[0]).unwrap();
        for &level in &pyr[1..] {
            let s = tape.sum_all(level).unwrap();
            loss = tape.add(loss, s).unwrap();
        }
        let grads = tape.backward(loss).unwrap();
        let gx = grads.get(x);
        assert!(gx.data().iter().any(|v| v.abs() > 0.0));
    }

    #[test]
    fn resolution_mismatch_is_config_error() {
        let net = ProjectionNet::new(3, 64);
        let mut tape = Tape::new();
        let x = tape.constant(&Tensor::zeros(&[1, 3, 32, 32]));
        assert!(matches!(net.project(&mut tape, x), Err(Error::Config(_))));
    }

    fn logits_for(seed: u64, res: usize, heads: &DiscriminatorHeads) -> Vec<Tensor> {
        use rand::SeedableRng;
        let net = ProjectionNet::new(5, res);
        let img = Tensor::randn(&[2, 3, res, res], 0.5, &mut ChaCha8Rng::seed_from_u64(seed));
        let mut tape = Tape::new();
        let mut binder = Binder::new(&mut tape, false);
        let x = binder.tape.constant(&img);
        let pyr = net.project(binder.tape, x).unwrap();
        let logits = discriminate(&mut binder, heads, &pyr).unwrap();
        logits.iter().map(|&n| tape.detach(n)).collect()
    }

    #[test]
    fn four_logit_maps_with_sane_values() {
        use rand::SeedableRng;
        let heads = DiscriminatorHeads::init(32, &mut ChaCha8Rng::seed_from_u64(6));
        let logits = logits_for(7, 32, &heads);
        assert_eq!(logits.len(), PYRAMID_LEVELS);
        for map in &logits {
            assert!(map.data().iter().all(|v| v.is_finite() && v.abs() < 100.0));
        }
    }

    #[test]
    fn heads_are_independent() {
        use rand::SeedableRng;
        let mut heads = DiscriminatorHeads::init(32, &mut ChaCha8Rng::seed_from_u64(8));
        let before = logits_for(9, 32, &heads);
        // Perturb head 2 only.
        for v in heads.heads[2].out.weight.data_mut() {
            *v += 0.5;
        }
        let after = logits_for(9, 32, &heads);
        for m in 0..PYRAMID_LEVELS {
            if m == 2 {
                assert_ne!(before[m].data(), after[m].data());
            } else {
                assert_eq!(before[m].data(), after[m].data());
            }
        }
    }

    fn const_logit_maps(tape: &mut Tape, value: f32) -> Vec<Node> {
        (0..PYRAMID_LEVELS)
            .map(|_| tape.constant(&Tensor::full(&[1, 1, 2, 2], value)))
            .collect()
    }

    #[test]
    fn zero_logit_losses_hit_analytic_values() {
        let mut tape = Tape::new();
        let real = const_logit_maps(&mut tape, 0.0);
        let fake = const_logit_maps(&mut tape, 0.0);
        let ld = loss_d(&mut tape, &real, &fake).unwrap();
        let lg = loss_g(&mut tape, &fake).unwrap();
        let m = PYRAMID_LEVELS as f32;
        assert!((tape.value(ld).data()[0] - 2.0 * m * LN2).abs() < 1e-6);
        assert!((tape.value(lg).data()[0] - m * LN2).abs() < 1e-6);
    }

    #[test]
    fn perfect_discriminator_drives_loss_to_zero() {
        let mut tape = Tape::new();
        let real = const_logit_maps(&mut tape, 1e3);
        let fake = const_logit_maps(&mut tape, -1e3);
        let ld = loss_d(&mut tape, &real, &fake).unwrap();
        assert!(tape.value(ld).data()[0].abs() < 1e-6);
    }

    #[test]
    fn softplus_neg_equals_neg_log_sigmoid() {
        // Identity oracle over a [-10, 10] grid.
        for i in 0..=200 {
            let t = -10.0 + 0.1 * i as f32;
            let softplus_neg = {
                let x = -t;
                x.max(0.0) + (-x.abs()).exp().ln_1p()
            };
            let neg_log_sigmoid = -(1.0 / (1.0 + (-t as f64).exp())).ln() as f32;
            assert!(
                (softplus_neg - neg_log_sigmoid).abs() < 1e-6,
                "t={t}: {softplus_neg} vs {neg_log_sigmoid}"
            );
        }
    }

    #[test]
    fn per_scale_losses_sum_to_joint_loss() {
        use rand::SeedableRng;
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let mut tape = Tape::new();
        let real: Vec<Node> =
            (0..4).map(|_| tape.constant(&Tensor::randn(&[1, 1, 3, 3], 2.0, &mut rng))).collect();
        let fake: Vec<Node> =
            (0..4).map(|_| tape.constant(&Tensor::randn(&[1, 1, 3, 3], 2.0, &mut rng))).collect();
        let joint = loss_d(&mut tape, &real, &fake).unwrap();
        let mut sum = 0.0f64;
        for m in 0..4 {
            let per = loss_d(&mut tape, &real[m..=m], &fake[m..=m]).unwrap();
            sum += tape.value(per).data()[0] as f64;
        }
        assert!((tape.value(joint).data()[0] as f64 - sum).abs() < 1e-6);
    }

    #[test]
    fn losses_are_nonnegative() {
        use rand::SeedableRng;
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..10 {
            let mut tape = Tape::new();
            let real: Vec<Node> = (0..4)
                .map(|_| tape.constant(&Tensor::randn(&[2, 1, 2, 2], 3.0, &mut rng)))
                .collect();
            let fake: Vec<Node> = (0..4)
                .map(|_| tape.constant(&Tensor::randn(&[2, 1, 2, 2], 3.0, &mut rng)))
                .collect();
            let ld = loss_d(&mut tape, &real, &fake).unwrap();
            let lg = loss_g(&mut tape, &fake).unwrap();
            assert!(tape.value(ld).data()[0] >= 0.0);
            assert!(tape.value(lg).data()[0] >= 0.0);
        }
    }

    #[test]
    fn empty_logit_list_is_usage_error() {
        let mut tape = Tape::new();
        assert!(matches!(loss_g(&mut tape, &[]), Err(Error::Usage(_))));
        assert!(matches!(loss_d(&mut tape, &[], &[]), Err(Error::Usage(_))));
    }
}
