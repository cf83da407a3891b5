//! Adversarial training: alternating critic and generator Adam steps over
//! the frozen projection pyramid, with checkpoint/resume and a
//! fully seed-determined event stream.

use std::collections::BTreeMap;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::{read_checkpoint, write_checkpoint, CheckpointMeta};
use crate::config::RunConfig;
use crate::dataset::Dataset;
use crate::discriminator::{discriminate, loss_d, loss_g, DiscriminatorHeads, ProjectionNet};
use crate::error::{Error, Result};
use crate::generator::{generate, ForwardOpts, GeneratorParams};
use crate::optim::{Adam, AdamConfig};
use crate::params::Binder;
use crate::tensor::{Tape, Tensor};
use crate::util::stream_seed;

fn stream_rng(seed: u64, label: &str, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(stream_seed(seed, label, index))
}

/// Full training state.
pub struct Trainer {
    pub run: RunConfig,
    pub gen: GeneratorParams,
    pub heads: DiscriminatorHeads,
    pub proj: ProjectionNet,
    pub adam_g: Adam,
    pub adam_d: Adam,
    pub ema: Option<GeneratorParams>,
    pub step: u64,
    pub samples_shown: u64,
    pub last_loss_d: f32,
    pub last_loss_g: f32,
}

impl Trainer {
    pub fn new(run: RunConfig) -> Result<Self> {
        run.validate()?;
        let seed = run.training.seed;
        let mut init_rng = stream_rng(seed, "init.gen", 0);
        let gen = GeneratorParams::init(&run.generator, &mut init_rng)?;
        let mut disc_rng = stream_rng(seed, "init.disc", 0);
        let heads = DiscriminatorHeads::init(run.generator.out_res, &mut disc_rng);
        let proj = ProjectionNet::new(run.proj_seed(), run.generator.out_res);
        let adam_g = Adam::new(AdamConfig {
            lr: run.training.lr_g,
            beta1: run.training.beta1,
            beta2: run.training.beta2,
            eps: run.training.adam_eps,
        });
        let adam_d = Adam::new(AdamConfig {
            lr: run.training.lr_d,
            beta1: run.training.beta1,
            beta2: run.training.beta2,
            eps: run.training.adam_eps,
        });
        let ema = run.training.ema_beta.map(|_| gen.clone());
        Ok(Trainer {
            run,
            gen,
            heads,
            proj,
            adam_g,
            adam_d,
            ema,
            step: 0,
            samples_shown: 0,
            last_loss_d: f32::NAN,
            last_loss_g: f32::NAN,
        })
    }

    /// Steps needed to show total_kimg thousand generated samples.
    pub fn total_steps(&self) -> u64 {
        let total = self.run.training.total_kimg * 1000;
        let batch = self.run.training.batch_size as u64;
        total.div_ceil(batch)
    }

    pub fn kimg_done(&self) -> f64 {
        self.samples_shown as f64 / 1000.0
    }

    /// Parameters used for sampling: the EMA shadow when enabled.
    pub fn sampling_params(&mut self) -> &mut GeneratorParams {
        match &mut self.ema {
            Some(ema) => ema,
            None => &mut self.gen,
        }
    }

    fn check_scalar_finite(&self, v: f32, what: &str) -> Result<()> {
        if !v.is_finite() {
            return Err(Error::numeric(format!(
                "{what} is {v} at step {} ({} kimg)",
                self.step,
                self.kimg_done()
            )));
        }
        Ok(())
    }

    /// One critic update then one generator update, each on a fresh latent
    /// batch; returns (loss_d, loss_g).
    pub fn train_step(&mut self, real: &Tensor) -> Result<(f32, f32)> {
        let seed = self.run.training.seed;
        let step = self.step;
        let batch = self.run.training.batch_size;
        let z_dim = self.run.generator.z_dim;
        let (n, _, h, _) = real.dims4()?;
        if n != batch || h != self.run.generator.out_res {
            return Err(Error::config(format!(
                "train_step: real batch {:?} does not match batch_size {batch} at res {}",
                real.shape(),
                self.run.generator.out_res
            )));
        }

        // ---- critic update ------------------------------------------------
        let z_d = Tensor::randn(&[batch, z_dim], 1.0, &mut stream_rng(seed, "z_d", step));
        let fake_images = {
            let mut tape = Tape::new();
            let mut binder = Binder::new(&mut tape, false);
            let zn = binder.tape.constant(&z_d);
            let mut noise_rng = stream_rng(seed, "noise_d", step);
            let opts = ForwardOpts {
                trainable: false,
                training: true,
                noise: true,
                instance_norm_only: false,
            };
            let img = generate(&mut binder, &mut self.gen, zn, &mut noise_rng, &opts)?;
            tape.detach(img)
        };

        let ld_val = {
            let mut tape = Tape::new();
            let mut binder = Binder::new(&mut tape, true);
            let real_node = binder.tape.constant(real);
            let fake_node = binder.tape.constant(&fake_images);
            let pyr_real = self.proj.project(binder.tape, real_node)?;
            let pyr_fake = self.proj.project(binder.tape, fake_node)?;
            let logits_real = discriminate(&mut binder, &self.heads, &pyr_real)?;
            let logits_fake = discriminate(&mut binder, &self.heads, &pyr_fake)?;
            let bindings = binder.into_bindings();
            let ld = loss_d(&mut tape, &logits_real, &logits_fake)?;
            let ld_val = tape.value(ld).item()?;
            self.check_scalar_finite(ld_val, "critic loss")?;
            let grads = tape.backward(ld)?;
            let mut by_name: BTreeMap<String, Tensor> = BTreeMap::new();
            for (name, node) in bindings {
                by_name.insert(name, grads.get(node));
            }
            self.adam_d.begin_step();
            let adam = &mut self.adam_d;
            let mut update_err: Option<Error> = None;
            self.heads.visit_params_mut(&mut |name, t| {
                if update_err.is_some() {
                    return;
                }
                if let Some(g) = by_name.get(name) {
                    if let Err(e) = adam.update(name, t, g) {
                        update_err = Some(e);
                    }
                }
            });
            if let Some(e) = update_err {
                return Err(e);
            }
            ld_val
        };

        // ---- generator update ---------------------------------------------
        let z_g = Tensor::randn(&[batch, z_dim], 1.0, &mut stream_rng(seed, "z_g", step));
        let lg_val = {
            let mut tape = Tape::new();
            let mut binder = Binder::new(&mut tape, true);
            let zn = binder.tape.constant(&z_g);
            let mut noise_rng = stream_rng(seed, "noise_g", step);
            let opts = ForwardOpts {
                trainable: true,
                training: true,
                noise: true,
                instance_norm_only: false,
            };
            let img = generate(&mut binder, &mut self.gen, zn, &mut noise_rng, &opts)?;
            let bindings = binder.into_bindings();
            let mut frozen = Binder::new(&mut tape, false);
            let pyr = self.proj.project(frozen.tape, img)?;
            let logits = discriminate(&mut frozen, &self.heads, &pyr)?;
            drop(frozen);
            let lg = loss_g(&mut tape, &logits)?;
            let lg_val = tape.value(lg).item()?;
            self.check_scalar_finite(lg_val, "generator loss")?;
            let grads = tape.backward(lg)?;
            let mut by_name: BTreeMap<String, Tensor> = BTreeMap::new();
            for (name, node) in bindings {
                by_name.insert(name, grads.get(node));
            }
            self.adam_g.begin_step();
            let adam = &mut self.adam_g;
            let mut update_err: Option<Error> = None;
            self.gen.visit_params_mut(&mut |name, t| {
                if update_err.is_some() {
                    return;
                }
                if let Some(g) = by_name.get(name) {
                    if let Err(e) = adam.update(name, t, g) {
                        update_err = Some(e);
                    }
                }
            });
            if let Some(e) = update_err {
                return Err(e);
            }
            lg_val
        };

        if let (Some(ema), Some(beta)) = (&mut self.ema, self.run.training.ema_beta) {
            let mut current: BTreeMap<String, Tensor> = BTreeMap::new();
            self.gen.visit_params(&mut |name, t| {
                current.insert(name.to_string(), t.clone());
            });
            ema.visit_params_mut(&mut |name, t| {
                let src = &current[name];
                for (e, p) in t.data_mut().iter_mut().zip(src.data()) {
                    *e = beta * *e + (1.0 - beta) * p;
                }
            });
            let mut buffers: BTreeMap<String, Tensor> = BTreeMap::new();
            self.gen.visit_buffers(&mut |name, t| {
                buffers.insert(name.to_string(), t.clone());
            });
            ema.visit_buffers_mut(&mut |name, t| {
                *t = buffers[name].clone();
            });
        }

        self.step += 1;
        self.samples_shown += batch as u64;
        self.last_loss_d = ld_val;
        self.last_loss_g = lg_val;
        Ok((ld_val, lg_val))
    }

    fn meta(&self) -> CheckpointMeta {
        CheckpointMeta {
            run_config_toml: self.run.canonical_toml(),
            config_digest: self.run.digest(),
            seed: self.run.training.seed,
            proj_seed: self.run.proj_seed(),
            step: self.step,
            samples_shown: self.samples_shown,
            adam_g_step: self.adam_g.step_count(),
            adam_d_step: self.adam_d.step_count(),
            last_loss_d: self.last_loss_d,
            last_loss_g: self.last_loss_g,
            has_ema: self.ema.is_some(),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut arrays: Vec<(String, Tensor)> = Vec::new();
        self.gen.visit_params(&mut |name, t| arrays.push((format!("gen.{name}"), t.clone())));
        self.gen
            .visit_buffers(&mut |name, t| arrays.push((format!("genbuf.{name}"), t.clone())));
        self.heads.visit_params(&mut |name, t| arrays.push((format!("disc.{name}"), t.clone())));
        self.adam_g.visit_state(&mut |name, m1, m2| {
            arrays.push((format!("adamg.m1.{name}"), m1.clone()));
            arrays.push((format!("adamg.m2.{name}"), m2.clone()));
        });
        self.adam_d.visit_state(&mut |name, m1, m2| {
            arrays.push((format!("adamd.m1.{name}"), m1.clone()));
            arrays.push((format!("adamd.m2.{name}"), m2.clone()));
        });
        if let Some(ema) = &self.ema {
            ema.visit_params(&mut |name, t| arrays.push((format!("ema.{name}"), t.clone())));
            ema.visit_buffers(&mut |name, t| arrays.push((format!("emabuf.{name}"), t.clone())));
        }
        let refs: Vec<(String, &Tensor)> =
            arrays.iter().map(|(n, t)| (n.clone(), t)).collect();
        write_checkpoint(path, &self.meta(), &refs)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (meta, arrays) = read_checkpoint(path)?;
        let run = RunConfig::from_toml(&meta.run_config_toml)?;
        if run.digest() != meta.config_digest {
            return Err(Error::format(format!(
                "checkpoint config digest {:#x} does not match parsed config {:#x}",
                meta.config_digest,
                run.digest()
            )));
        }
        let by_name: BTreeMap<String, Tensor> = arrays.into_iter().collect();
        let mut trainer = Trainer::new(run)?;

        let restore = |prefix: &str,
                       target: &mut dyn FnMut(&mut dyn FnMut(&str, &mut Tensor))|
         -> Result<()> {
            let mut err: Option<Error> = None;
            target(&mut |name, t| {
                if err.is_some() {
                    return;
                }
                match by_name.get(&format!("{prefix}.{name}")) {
                    Some(stored) if stored.shape() == t.shape() => {
                        *t = stored.clone();
                    }
                    Some(stored) => {
                        err = Some(Error::format(format!(
                            "checkpoint array {prefix}.{name} has shape {:?}, expected {:?}",
                            stored.shape(),
                            t.shape()
                        )));
                    }
                    None => {
                        err = Some(Error::format(format!(
                            "checkpoint missing array {prefix}.{name}"
                        )));
                    }
                }
            });
            err.map_or(Ok(()), Err)
        };

        restore("gen", &mut |f| trainer.gen.visit_params_mut(f))?;
        restore("genbuf", &mut |f| trainer.gen.visit_buffers_mut(f))?;
        restore("disc", &mut |f| trainer.heads.visit_params_mut(f))?;
        if meta.has_ema {
            let mut ema = trainer.gen.clone();
            restore("ema", &mut |f| ema.visit_params_mut(f))?;
            restore("emabuf", &mut |f| ema.visit_buffers_mut(f))?;
            trainer.ema = Some(ema);
        }

        // Optimizer moments exist only for parameters that have been bound.
        let restore_adam = |tag: &str, adam: &mut Adam, step: u64| -> Result<()> {
            adam.restore_step(step);
            for (name, tensor) in &by_name {
                if let Some(rest) = name.strip_prefix(&format!("{tag}.m1.")) {
                    let m2 = by_name
                        .get(&format!("{tag}.m2.{rest}"))
                        .ok_or_else(|| {
                            Error::format(format!("checkpoint missing {tag}.m2.{rest}"))
                        })?;
                    adam.restore_moment(rest, tensor.clone(), m2.clone());
                }
            }
            Ok(())
        };
        restore_adam("adamg", &mut trainer.adam_g, meta.adam_g_step)?;
        restore_adam("adamd", &mut trainer.adam_d, meta.adam_d_step)?;

        trainer.step = meta.step;
        trainer.samples_shown = meta.samples_shown;
        trainer.last_loss_d = meta.last_loss_d;
        trainer.last_loss_g = meta.last_loss_g;
        Ok(trainer)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct StepRecord {
    pub step: u64,
    pub loss_d: f32,
    pub loss_g: f32,
}

#[derive(Debug, Clone, Default)]
pub struct TrainReport {
    pub steps: Vec<StepRecord>,
}

/// Runs the trainer to its configured sample budget. `on_eval` fires at
/// every eval_every_kimg crossing and once more after the final step.
pub fn train_loop(
    trainer: &mut Trainer,
    dataset: &Dataset,
    mut on_eval: impl FnMut(&mut Trainer) -> Result<()>,
) -> Result<TrainReport> {
    let total_steps = trainer.total_steps();
    let batch = trainer.run.training.batch_size;
    let mut stream = dataset.batches(batch, trainer.run.training.seed, trainer.step)?;
    let eval_every = trainer.run.training.eval_every_kimg * 1000;
    let mut next_eval = (trainer.samples_shown / eval_every + 1) * eval_every;
    let mut report = TrainReport::default();
    while trainer.step < total_steps {
        let real = stream.next_batch();
        let (loss_d, loss_g) = trainer.train_step(&real)?;
        report.steps.push(StepRecord { step: trainer.step, loss_d, loss_g });
        if trainer.samples_shown >= next_eval && trainer.step < total_steps {
            on_eval(trainer)?;
            next_eval = (trainer.samples_shown / eval_every + 1) * eval_every;
        }
    }
    on_eval(trainer)?;
    Ok(report)
}

/// Generates `n` images in eval mode, chunked to keep tapes small; returns
/// [n, 3, R, R].
pub fn sample_images(
    gen: &mut GeneratorParams,
    n: usize,
    seed: u64,
    noise: bool,
) -> Result<Tensor> {
    let z_dim = gen.config.z_dim;
    let res = gen.config.out_res;
    let mut out = Vec::with_capacity(n * 3 * res * res);
    let chunk = 16usize;
    let mut produced = 0;
    let mut index = 0u64;
    while produced < n {
        let b = chunk.min(n - produced);
        let z = Tensor::randn(&[b, z_dim], 1.0, &mut stream_rng(seed, "sample.z", index));
        let mut tape = Tape::new();
        let mut binder = Binder::new(&mut tape, false);
        let zn = binder.tape.constant(&z);
        let mut noise_rng = stream_rng(seed, "sample.noise", index);
        let opts = ForwardOpts {
            trainable: false,
            training: false,
            noise,
            instance_norm_only: false,
        };
        let img = generate(&mut binder, gen, zn, &mut noise_rng, &opts)?;
        out.extend_from_slice(tape.value(img).data());
        produced += b;
        index += 1;
    }
    Tensor::new(vec![n, 3, res, res], out)
}
