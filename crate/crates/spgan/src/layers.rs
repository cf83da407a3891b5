//! Normalization and noise-injection layers, composed from tape primitives
//! so their gradients come for free.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::tensor::{Node, Tape, Tensor};

pub const BATCH_NORM_MOMENTUM: f32 = 0.1;
pub const NORM_EPS: f32 = 1e-5;

/// Per-channel affine batch normalization with running statistics.
#[derive(Debug, Clone)]
pub struct BatchNormState {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub running_mean: Tensor,
    pub running_var: Tensor,
    pub momentum: f32,
    pub eps: f32,
}

impl BatchNormState {
    pub fn new(channels: usize) -> Self {
        BatchNormState {
            gamma: Tensor::ones(&[channels]),
            beta: Tensor::zeros(&[channels]),
            running_mean: Tensor::zeros(&[channels]),
            running_var: Tensor::ones(&[channels]),
            momentum: BATCH_NORM_MOMENTUM,
            eps: NORM_EPS,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.numel()
    }
}

/// Batch norm forward. `gamma`/`beta` are the tape nodes holding this
/// state's parameters. Training mode normalizes with batch statistics over
/// (N,H,W) per channel and folds them into the running stats; eval mode
/// normalizes with the running stats.
pub fn batch_norm(
    tape: &mut Tape,
    x: Node,
    gamma: Node,
    beta: Node,
    state: &mut BatchNormState,
    training: bool,
) -> Result<Node> {
    let (n, c, h, w) = tape.value(x).dims4()?;
    if c != state.channels() {
        return Err(Error::config(format!(
            "batch_norm: state has {} channels, input has {c}",
            state.channels()
        )));
    }
    let normalized = if training {
        if n < 2 {
            return Err(Error::usage(format!(
                "batch_norm: training mode needs a batch of at least 2, got {n}"
            )));
        }
        let mean = tape.channel_mean(x)?;
        let mean_b = tape.broadcast_channel(mean, n, h, w)?;
        let centered = tape.sub(x, mean_b)?;
        let sq = tape.mul(centered, centered)?;
        let var = tape.channel_mean(sq)?;
        let rstd = tape.rsqrt_eps(var, state.eps)?;

        // Fold the detached batch statistics into the running estimates
        // (unbiased variance, matching the usual EMA convention).
        let count = (n * h * w) as f32;
        let m = state.momentum;
        let batch_mean = tape.detach(mean);
        let batch_var = tape.detach(var);
        for i in 0..c {
            let rm = state.running_mean.data_mut();
            rm[i] = (1.0 - m) * rm[i] + m * batch_mean.data()[i];
            let unbiased = batch_var.data()[i] * count / (count - 1.0);
            let rv = state.running_var.data_mut();
            rv[i] = (1.0 - m) * rv[i] + m * unbiased;
        }
        tape.scale_c(centered, rstd)?
    } else {
        let mean = tape.constant(&state.running_mean);
        let rstd_data: Vec<f32> = state
            .running_var
            .data()
            .iter()
            .map(|&v| 1.0 / (v + state.eps).sqrt())
            .collect();
        let rstd = tape.constant(&Tensor::new(vec![c], rstd_data)?);
        let mean_b = tape.broadcast_channel(mean, n, h, w)?;
        let centered = tape.sub(x, mean_b)?;
        tape.scale_c(centered, rstd)?
    };
    let scaled = tape.scale_c(normalized, gamma)?;
    tape.shift_c(scaled, beta)
}

/// Per-(sample, channel) spatial normalization, no trainable parameters.
pub fn instance_norm(tape: &mut Tape, x: Node, eps: f32) -> Result<Node> {
    let (_, _, h, w) = tape.value(x).dims4()?;
    if h * w < 2 {
        return Err(Error::usage(format!(
            "instance_norm: spatial extent {h}x{w} too small to normalize"
        )));
    }
    let mean = tape.spatial_mean(x)?;
    let mean_b = tape.broadcast_spatial(mean, h, w)?;
    let centered = tape.sub(x, mean_b)?;
    let sq = tape.mul(centered, centered)?;
    let var = tape.spatial_mean(sq)?;
    let rstd = tape.rsqrt_eps(var, eps)?;
    tape.scale_nc(centered, rstd)
}

/// Style-conditioned renormalization: spatially normalize each (n, c) map,
/// then scale by y_scale[n,c] and shift by y_bias[n,c].
pub fn adain(tape: &mut Tape, x: Node, y_scale: Node, y_bias: Node, eps: f32) -> Result<Node> {
    let (n, c, _, _) = tape.value(x).dims4()?;
    for (name, node) in [("y_scale", y_scale), ("y_bias", y_bias)] {
        if tape.value(node).shape() != [n, c] {
            return Err(Error::config(format!(
                "adain: {name} shape {:?} does not match [{n}, {c}]",
                tape.value(node).shape()
            )));
        }
    }
    let normalized = instance_norm(tape, x, eps)?;
    let scaled = tape.scale_nc(normalized, y_scale)?;
    tape.shift_nc(scaled, y_bias)
}

/// Per-channel trainable scales for noise injection; zero-initialized so the
/// layer starts inert.
#[derive(Debug, Clone)]
pub struct NoiseParams {
    pub scale: Tensor,
}

impl NoiseParams {
    pub fn new(channels: usize) -> Self {
        NoiseParams { scale: Tensor::zeros(&[channels]) }
    }
}

/// Draws the per-site noise map shared across channels: one standard normal
/// value per (n, h, w).
pub fn draw_noise_map(n: usize, h: usize, w: usize, rng: &mut impl Rng) -> Tensor {
    let data = (0..n * h * w).map(|_| rng.sample::<f32, _>(StandardNormal)).collect();
    Tensor::new(vec![n, 1, h, w], data).expect("noise map shape")
}

/// out = x + scale[c] * eps, eps broadcast over channels.
pub fn inject_noise(tape: &mut Tape, x: Node, scale: Node, eps_map: &Tensor) -> Result<Node> {
    let (n, c, h, w) = tape.value(x).dims4()?;
    if eps_map.shape() != [n, 1, h, w] {
        return Err(Error::config(format!(
            "inject_noise: noise map shape {:?} does not match [{n}, 1, {h}, {w}]",
            eps_map.shape()
        )));
    }
    if tape.value(scale).shape() != [c] {
        return Err(Error::config(format!(
            "inject_noise: scale shape {:?} does not match [{c}]",
            tape.value(scale).shape()
        )));
    }
    let hw = h * w;
    let mut full = vec![0.0f32; n * c * hw];
    for ni in 0..n {
        let src = &eps_map.data()[ni * hw..(ni + 1) * hw];
        for ci in 0..c {
            full[(ni * c + ci) * hw..(ni * c + ci + 1) * hw].copy_from_slice(src);
        }
    }
    let eps_node = tape.constant(&Tensor::new(vec![n, c, h, w], full)?);
    let term = tape.scale_c(eps_node, scale)?;
    tape.add(x, term)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn spatial_stats(t: &Tensor) -> Vec<(f64, f64)> {
        let (n, c, h, w) = t.dims4().unwrap();
        let hw = h * w;
        (0..n * c)
            .map(|nc| {
                let vals = &t.data()[nc * hw..(nc + 1) * hw];
                let mean = vals.iter().map(|&v| v as f64).sum::<f64>() / hw as f64;
                let var =
                    vals.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / hw as f64;
                (mean, var.sqrt())
            })
            .collect()
    }

    #[test]
    fn batch_norm_zeroes_constant_channels_in_training() {
        let mut state = BatchNormState::new(2);
        let mut tape = Tape::new();
        let mut data = vec![3.0f32; 2 * 2 * 4];
        data[16..].fill(-1.5); // channel 1 constant at a different level
        let x = tape.constant(&Tensor::new(vec![2, 2, 2, 2], data).unwrap());
        let (g, b) = (tape.constant(&state.gamma.clone()), tape.constant(&state.beta.clone()));
        let y = batch_norm(&mut tape, x, g, b, &mut state, true).unwrap();
        assert!(tape.value(y).data().iter().all(|&v| v.abs() < 1e-6));
    }

    #[test]
    fn batch_norm_gamma_zero_gives_beta() {
        let mut state = BatchNormState::new(2);
        state.gamma = Tensor::zeros(&[2]);
        state.beta = Tensor::new(vec![2], vec![0.5, -2.0]).unwrap();
        let mut tape = Tape::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = tape.constant(&Tensor::randn(&[2, 2, 3, 3], 1.0, &mut rng));
        let (g, b) = (tape.constant(&state.gamma.clone()), tape.constant(&state.beta.clone()));
        let y = batch_norm(&mut tape, x, g, b, &mut state, true).unwrap();
        let out = tape.value(y);
        for ni in 0..2 {
            for ci in 0..2 {
                let expect = state.beta.data()[ci];
                for i in 0..9 {
                    assert_eq!(out.data()[(ni * 2 + ci) * 9 + i], expect);
                }
            }
        }
    }

    #[test]
    fn batch_norm_training_statistics() {
        // Statistics oracle: per-channel mean ~ 0, biased variance ~ 1.
        let mut state = BatchNormState::new(3);
        let mut tape = Tape::new();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let xt = Tensor::randn(&[2, 3, 4, 4], 1.7, &mut rng);
        let x = tape.constant(&xt);
        let (g, b) = (tape.constant(&state.gamma.clone()), tape.constant(&state.beta.clone()));
        let y = batch_norm(&mut tape, x, g, b, &mut state, true).unwrap();
        let out = tape.value(y);
        for ci in 0..3 {
            let mut vals = Vec::new();
            for ni in 0..2 {
                vals.extend_from_slice(&out.data()[(ni * 3 + ci) * 16..(ni * 3 + ci + 1) * 16]);
            }
            let mean = vals.iter().map(|&v| v as f64).sum::<f64>() / vals.len() as f64;
            let var = vals.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>()
                / vals.len() as f64;
            assert!(mean.abs() < 1e-5, "channel {ci} mean {mean}");
            assert!((var - 1.0).abs() < 1e-4, "channel {ci} var {var}");
        }
    }

    #[test]
    fn batch_norm_training_needs_batch_of_two() {
        let mut state = BatchNormState::new(1);
        let mut tape = Tape::new();
        let x = tape.constant(&Tensor::ones(&[1, 1, 4, 4]));
        let (g, b) = (tape.constant(&state.gamma.clone()), tape.constant(&state.beta.clone()));
        let r = batch_norm(&mut tape, x, g, b, &mut state, true);
        assert!(matches!(r, Err(Error::Usage(_))));
    }

    #[test]
    fn batch_norm_eval_uses_running_stats() {
        let mut state = BatchNormState::new(1);
        state.running_mean = Tensor::new(vec![1], vec![2.0]).unwrap();
        state.running_var = Tensor::new(vec![1], vec![4.0]).unwrap();
        let mut tape = Tape::new();
        let x = tape.constant(&Tensor::full(&[1, 1, 2, 2], 4.0));
        let (g, b) = (tape.constant(&state.gamma.clone()), tape.constant(&state.beta.clone()));
        let y = batch_norm(&mut tape, x, g, b, &mut state, false).unwrap();
        // (4 - 2) / sqrt(4 + eps) ~ 1.0
        for &v in tape.value(y).data() {
            assert!((v - 1.0).abs() < 1e-5);
        }
    }

    #[test]
    fn instance_norm_constant_map_is_zero() {
        let mut tape = Tape::new();
        let x = tape.constant(&Tensor::full(&[1, 2, 3, 3], 7.25));
        let y = instance_norm(&mut tape, x, NORM_EPS).unwrap();
        assert!(tape.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn instance_norm_statistics() {
        let mut tape = Tape::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = tape.constant(&Tensor::randn(&[2, 3, 6, 6], 2.3, &mut rng));
        let y = instance_norm(&mut tape, x, NORM_EPS).unwrap();
        for (mean, std) in spatial_stats(tape.value(y)) {
            assert!(mean.abs() < 1e-6, "mean {mean}");
            assert!((std - 1.0).abs() < 1e-3, "std {std}");
        }
    }

    #[test]
    fn instance_norm_is_scale_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let base = Tensor::randn(&[1, 2, 6, 6], 2.0, &mut rng);
        let scaled = Tensor::new(
            base.shape().to_vec(),
            base.data().iter().map(|v| v * 3.7).collect(),
        )
        .unwrap();
        let mut tape = Tape::new();
        let a = tape.constant(&base);
        let b = tape.constant(&scaled);
        let ya = instance_norm(&mut tape, a, NORM_EPS).unwrap();
        let yb = instance_norm(&mut tape, b, NORM_EPS).unwrap();
        for (u, v) in tape.value(ya).data().iter().zip(tape.value(yb).data()) {
            assert!((u - v).abs() < 1e-5);
        }
    }

    #[test]
    fn instance_norm_rejects_single_site() {
        let mut tape = Tape::new();
        let x = tape.constant(&Tensor::ones(&[1, 1, 1, 1]));
        assert!(matches!(instance_norm(&mut tape, x, NORM_EPS), Err(Error::Usage(_))));
    }

    #[test]
    fn adain_with_unit_style_equals_instance_norm() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let xt = Tensor::randn(&[2, 3, 4, 4], 1.0, &mut rng);
        let mut tape = Tape::new();
        let x = tape.constant(&xt);
        let ones = tape.constant(&Tensor::ones(&[2, 3]));
        let zeros = tape.constant(&Tensor::zeros(&[2, 3]));
        let a = adain(&mut tape, x, ones, zeros, NORM_EPS).unwrap();
        let i = instance_norm(&mut tape, x, NORM_EPS).unwrap();
        for (u, v) in tape.value(a).data().iter().zip(tape.value(i).data()) {
            assert!((u - v).abs() < 1e-6);
        }
    }

    #[test]
    fn adain_output_statistics_match_style() {
        // Defining property: spatial mean lands on y_bias, spatial std on
        // |y_scale|.
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..20 {
            let xt = Tensor::randn(&[2, 2, 8, 8], 1.4, &mut rng);
            let ys = Tensor::randn(&[2, 2], 1.0, &mut rng);
            let yb = Tensor::randn(&[2, 2], 1.0, &mut rng);
            let mut tape = Tape::new();
            let x = tape.constant(&xt);
            let s = tape.constant(&ys);
            let b = tape.constant(&yb);
            let y = adain(&mut tape, x, s, b, NORM_EPS).unwrap();
            for (nc, (mean, std)) in spatial_stats(tape.value(y)).into_iter().enumerate() {
                assert!((mean - yb.data()[nc] as f64).abs() < 1e-4, "mean {mean}");
                assert!((std - ys.data()[nc].abs() as f64).abs() < 1e-3, "std {std}");
            }
        }
    }

    #[test]
    fn adain_constant_map_gives_bias() {
        let mut tape = Tape::new();
        let x = tape.constant(&Tensor::full(&[1, 2, 3, 3], 5.0));
        let s = tape.constant(&Tensor::ones(&[1, 2]));
        let b = tape.constant(&Tensor::new(vec![1, 2], vec![0.25, -1.5]).unwrap());
        let y = adain(&mut tape, x, s, b, NORM_EPS).unwrap();
        let out = tape.value(y);
        for ci in 0..2 {
            let expect = [0.25f32, -1.5][ci];
            for i in 0..9 {
                assert!((out.data()[ci * 9 + i] - expect).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn adain_shape_mismatch_is_config_error() {
        let mut tape = Tape::new();
        let x = tape.constant(&Tensor::ones(&[1, 2, 3, 3]));
        let s = tape.constant(&Tensor::ones(&[1, 3]));
        let b = tape.constant(&Tensor::zeros(&[1, 2]));
        assert!(matches!(adain(&mut tape, x, s, b, NORM_EPS), Err(Error::Config(_))));
    }

    #[test]
    fn zero_noise_scale_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let xt = Tensor::rand_uniform(&[2, 3, 4, 4], 0.1, 1.0, &mut rng);
        let eps_map = draw_noise_map(2, 4, 4, &mut rng);
        let params = NoiseParams::new(3);
        let mut tape = Tape::new();
        let x = tape.constant(&xt);
        let s = tape.constant(&params.scale);
        let y = inject_noise(&mut tape, x, s, &eps_map).unwrap();
        assert_eq!(tape.value(y).data(), xt.data());
    }

    #[test]
    fn noise_is_seed_deterministic() {
        let a = draw_noise_map(2, 3, 3, &mut ChaCha8Rng::seed_from_u64(11));
        let b = draw_noise_map(2, 3, 3, &mut ChaCha8Rng::seed_from_u64(11));
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn noise_scale_gradient_matches_hand_sum() {
        // d loss / d scale[c] = sum over (n,h,w) of eps * upstream grad; with
        // loss = sum(out) the upstream grad is all ones.
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let xt = Tensor::randn(&[2, 2, 3, 3], 1.0, &mut rng);
        let eps_map = draw_noise_map(2, 3, 3, &mut rng);
        let scale_t = Tensor::new(vec![2], vec![0.3, -0.7]).unwrap();
        let mut tape = Tape::new();
        let x = tape.constant(&xt);
        let s = tape.param(&scale_t);
        let y = inject_noise(&mut tape, x, s, &eps_map).unwrap();
        let loss = tape.sum_all(y).unwrap();
        let grads = tape.backward(loss).unwrap();
        let gs = grads.get(s);
        let expect: f32 = eps_map.data().iter().sum();
        for ci in 0..2 {
            assert!((gs.data()[ci] - expect).abs() < 1e-3, "{} vs {expect}", gs.data()[ci]);
        }
    }
}
