use serde::{Deserialize, Serialize};
use vexel_core::codec::{denormalize_continuous, TokenMatrix};
use vexel_core::conditioning::{embed_text_stub, TextEmbedding};
use vexel_core::normalize::{normalize, NormalizeOptions};
use vexel_core::svg::Document;
use vexel_nn::{
    clip_grad_norm, AdamW, Checkpoint, FeedForward, LayerNorm, Linear, MultiHeadAttention, NnError,
    OptimizerState, ParamStore, Rng, Tape, Var, LN_EPS,
};

use crate::config::DitConfig;
use crate::data::{stage_input, Example, FeatureSource};
use crate::error::ModelError;
use crate::vae::{parse_header, VpVae};

/// Variance-preserving schedule from linearly spaced β over `t_diff`
/// steps: `alpha[t] = sqrt(ᾱ_t)`, `sigma[t] = sqrt(1 − ᾱ_t)`.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    pub alpha_bar: Vec<f64>,
    pub alpha: Vec<f64>,
    pub sigma: Vec<f64>,
}

impl NoiseSchedule {
    pub fn linear(t_diff: usize, beta_start: f64, beta_end: f64) -> Self {
        let mut alpha_bar = Vec::with_capacity(t_diff);
        let mut prod = 1.0;
        for i in 0..t_diff {
            let frac = if t_diff > 1 {
                i as f64 / (t_diff - 1) as f64
            } else {
                0.0
            };
            prod *= 1.0 - (beta_start + (beta_end - beta_start) * frac);
            alpha_bar.push(prod);
        }
        NoiseSchedule {
            alpha: alpha_bar.iter().map(|a| a.sqrt()).collect(),
            sigma: alpha_bar.iter().map(|a| (1.0 - a).sqrt()).collect(),
            alpha_bar,
        }
    }

    pub fn from_config(cfg: &DitConfig) -> Self {
        Self::linear(cfg.t_diff, cfg.beta_start, cfg.beta_end)
    }

    pub fn len(&self) -> usize {
        self.alpha.len()
    }

    pub fn is_empty(&self) -> bool {
        self.alpha.is_empty()
    }
}

/// `z_t = α_t·z + σ_t·ε`.
pub fn q_sample(z: &[f64], t: usize, eps: &[f64], schedule: &NoiseSchedule) -> Vec<f64> {
    assert_eq!(z.len(), eps.len(), "latent and noise lengths differ");
    let (a, s) = (schedule.alpha[t], schedule.sigma[t]);
    z.iter().zip(eps).map(|(z, e)| a * z + s * e).collect()
}

/// Guided noise estimate `ε_u + w·(ε_c − ε_u)`, evaluated as
/// `(1 − w)·ε_u + w·ε_c` so that `w = 0` and `w = 1` are exact.
pub fn cfg_noise(cond: &[f64], uncond: &[f64], w: f64) -> Vec<f64> {
    assert_eq!(cond.len(), uncond.len(), "guidance inputs differ in length");
    cond.iter()
        .zip(uncond)
        .map(|(c, u)| (1.0 - w) * u + w * c)
        .collect()
}

/// Sinusoidal embedding of an integer timestep: cosines then sines over
/// geometrically spaced frequencies.
pub fn timestep_embedding(t: usize, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let mut out = vec![0.0; dim];
    for i in 0..half {
        let freq = (-(10_000f64).ln() * i as f64 / half as f64).exp();
        let (s, c) = (t as f64 * freq).sin_cos();
        out[i] = c;
        out[half + i] = s;
    }
    out
}

/// Self-attention and feed-forward sublayers modulated by the time
/// condition (shift, scale, gate each), with text cross-attention between.
#[derive(Debug, Clone, Copy)]
pub struct DitBlock {
    pub ada: Linear,
    pub attn: MultiHeadAttention,
    pub cross_ln: LayerNorm,
    pub cross: MultiHeadAttention,
    pub ff: FeedForward,
}

fn modulate(tape: &mut Tape, x: Var, shift: Var, scale: Var) -> Result<Var, NnError> {
    let scaled = tape.mul_row(x, scale)?;
    let x = tape.add(x, scaled)?;
    tape.add_row(x, shift)
}

impl DitBlock {
    fn new(
        store: &mut ParamStore,
        name: &str,
        cfg: &DitConfig,
        rng: &mut Rng,
    ) -> Result<Self, NnError> {
        let d = cfg.hidden;
        Ok(DitBlock {
            ada: Linear::zeros(store, &format!("{name}.ada"), d, 6 * d),
            attn: MultiHeadAttention::new(
                store,
                &format!("{name}.attn"),
                d,
                d,
                cfg.heads,
                true,
                rng,
            )?,
            cross_ln: LayerNorm::new(store, &format!("{name}.cross_ln"), d),
            cross: MultiHeadAttention::new(
                store,
                &format!("{name}.cross"),
                d,
                cfg.d_txt,
                cfg.heads,
                false,
                rng,
            )?,
            ff: FeedForward::new(store, &format!("{name}.ff"), d, cfg.ff_ratio * d, rng),
        })
    }

    /// `cond` is the SiLU-activated time embedding (1×d), `text` the text
    /// tokens (t_txt×d_txt).
    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        x: Var,
        cond: Var,
        text: Var,
    ) -> Result<Var, NnError> {
        let d = tape.dims(x).1;
        let m = self.ada.forward(tape, store, cond)?;
        let chunk = |i: usize, tape: &mut Tape| tape.slice_cols(m, i * d, d);
        let (shift1, scale1, gate1) = (chunk(0, tape)?, chunk(1, tape)?, chunk(2, tape)?);
        let (shift2, scale2, gate2) = (chunk(3, tape)?, chunk(4, tape)?, chunk(5, tape)?);

        let n = tape.layer_norm(x, None, None, LN_EPS)?;
        let n = modulate(tape, n, shift1, scale1)?;
        let a = self.attn.forward(tape, store, n, n)?;
        let a = tape.mul_row(a, gate1)?;
        let x = tape.add(x, a)?;

        let n = self.cross_ln.forward(tape, store, x)?;
        let c = self.cross.forward(tape, store, n, text)?;
        let x = tape.add(x, c)?;

        let n = tape.layer_norm(x, None, None, LN_EPS)?;
        let n = modulate(tape, n, shift2, scale2)?;
        let f = self.ff.forward(tape, store, n)?;
        let f = tape.mul_row(f, gate2)?;
        tape.add(x, f)
    }
}

/// Noise-prediction transformer over latent sequences.
#[derive(Debug, Clone)]
pub struct VsDit {
    pub cfg: DitConfig,
    pub store: ParamStore,
    in_proj: Linear,
    t_fc1: Linear,
    t_fc2: Linear,
    pub blocks: Vec<DitBlock>,
    final_ada: Linear,
    out: Linear,
}

/// Model evaluations made by one sampling run.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct SampleTrace {
    pub cond_calls: usize,
    pub uncond_calls: usize,
}

/// Per-example random draws of one diffusion training step.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseDraw {
    pub t: usize,
    pub eps: Vec<f64>,
    pub drop_text: bool,
}

pub fn draw_noise(rng: &mut Rng, len: usize, t_diff: usize, cond_dropout: f64) -> NoiseDraw {
    let t = rng.below(t_diff);
    let eps = rng.normals(len);
    let drop_text = rng.bernoulli(cond_dropout);
    NoiseDraw { t, eps, drop_text }
}

impl VsDit {
    pub fn new(cfg: DitConfig, seed: u64) -> Result<Self, ModelError> {
        Self::build(cfg, ParamStore::new(), seed)
    }

    /// Builds into `store`, which may be a shape-only meta store.
    pub fn build(cfg: DitConfig, mut store: ParamStore, seed: u64) -> Result<Self, ModelError> {
        cfg.validate()?;
        let mut rng = Rng::new(seed, 11);
        let d = cfg.hidden;
        let s = &mut store;
        let in_proj = Linear::new(s, "dit.in_proj", cfg.d_z, d, true, &mut rng);
        let t_fc1 = Linear::new(s, "dit.time.fc1", cfg.freq_dim, d, true, &mut rng);
        let t_fc2 = Linear::new(s, "dit.time.fc2", d, d, true, &mut rng);
        let blocks = (0..cfg.blocks)
            .map(|i| DitBlock::new(s, &format!("dit.block{i}"), &cfg, &mut rng))
            .collect::<Result<_, _>>()?;
        let final_ada = Linear::zeros(s, "dit.final.ada", d, 2 * d);
        let out = Linear::zeros(s, "dit.final.out", d, cfg.d_z);
        Ok(VsDit {
            cfg,
            store,
            in_proj,
            t_fc1,
            t_fc2,
            blocks,
            final_ada,
            out,
        })
    }

    /// Shape-only model for counting parameters of large presets.
    pub fn meta(cfg: DitConfig) -> Result<Self, ModelError> {
        Self::build(cfg, ParamStore::meta(), 0)
    }

    pub fn schedule(&self) -> NoiseSchedule {
        NoiseSchedule::from_config(&self.cfg)
    }

    pub fn text_embedding(&self, prompt: &str) -> TextEmbedding {
        embed_text_stub(prompt, self.cfg.d_txt, self.cfg.t_txt)
    }

    pub fn null_text(&self) -> TextEmbedding {
        TextEmbedding::null(self.cfg.d_txt, self.cfg.t_txt)
    }

    /// ε̂(z_t, t, text) on the tape; `z_t` is N×D_z.
    pub fn predict_noise_vars(
        &self,
        tape: &mut Tape,
        z_t: Var,
        t: usize,
        text: &TextEmbedding,
    ) -> Result<Var, NnError> {
        let (n, dz) = tape.dims(z_t);
        if (n, dz) != (self.cfg.seq_len, self.cfg.d_z) {
            return Err(NnError::ShapeMismatch {
                op: "predict_noise",
                left: vec![n, dz],
                right: vec![self.cfg.seq_len, self.cfg.d_z],
            });
        }
        let tt = &text.tokens;
        if (tt.rows, tt.cols) != (self.cfg.t_txt, self.cfg.d_txt) {
            return Err(NnError::ShapeMismatch {
                op: "predict_noise text",
                left: vec![tt.rows, tt.cols],
                right: vec![self.cfg.t_txt, self.cfg.d_txt],
            });
        }
        let st = &self.store;
        let temb = tape.constant(
            1,
            self.cfg.freq_dim,
            timestep_embedding(t, self.cfg.freq_dim),
        )?;
        let c = self.t_fc1.forward(tape, st, temb)?;
        let c = tape.silu(c);
        let c = self.t_fc2.forward(tape, st, c)?;
        let cond = tape.silu(c);
        let txt = tape.constant(tt.rows, tt.cols, tt.data.clone())?;
        let mut h = self.in_proj.forward(tape, st, z_t)?;
        for b in &self.blocks {
            h = b.forward(tape, st, h, cond, txt)?;
        }
        let m = self.final_ada.forward(tape, st, cond)?;
        let d = self.cfg.hidden;
        let shift = tape.slice_cols(m, 0, d)?;
        let scale = tape.slice_cols(m, d, d)?;
        let n = tape.layer_norm(h, None, None, LN_EPS)?;
        let n = modulate(tape, n, shift, scale)?;
        self.out.forward(tape, st, n)
    }

    pub fn predict_noise(
        &self,
        z_t: &[f64],
        t: usize,
        text: &TextEmbedding,
    ) -> Result<Vec<f64>, NnError> {
        let mut tape = Tape::new();
        let z = tape.constant(self.cfg.seq_len, self.cfg.d_z, z_t.to_vec())?;
        let e = self.predict_noise_vars(&mut tape, z, t, text)?;
        Ok(tape.value(e).to_vec())
    }

    /// Mean squared noise-prediction error over a batch of scaled latents
    /// with the given draws; dropped examples see the null text.
    pub fn loss_with_draws(
        &self,
        tape: &mut Tape,
        latents: &[Vec<f64>],
        texts: &[TextEmbedding],
        draws: &[NoiseDraw],
    ) -> Result<Var, NnError> {
        let schedule = self.schedule();
        let null = self.null_text();
        let mut total: Option<Var> = None;
        for ((z, text), draw) in latents.iter().zip(texts).zip(draws) {
            let zt = q_sample(z, draw.t, &draw.eps, &schedule);
            let zt = tape.constant(self.cfg.seq_len, self.cfg.d_z, zt)?;
            let text = if draw.drop_text { &null } else { text };
            let pred = self.predict_noise_vars(tape, zt, draw.t, text)?;
            let l = tape.masked_mse(pred, &draw.eps, None)?;
            total = Some(match total {
                None => l,
                Some(acc) => tape.add(acc, l)?,
            });
        }
        let total = total.expect("non-empty batch");
        Ok(tape.scale(total, 1.0 / latents.len() as f64))
    }

    /// Diffusion loss with draws taken from `seed`: uniform timestep,
    /// standard normal noise, and text dropout at `cond_dropout`.
    pub fn dit_loss(
        &self,
        tape: &mut Tape,
        latents: &[Vec<f64>],
        texts: &[TextEmbedding],
        seed: u64,
    ) -> Result<Var, NnError> {
        let mut rng = Rng::new(seed, 12);
        let len = self.cfg.seq_len * self.cfg.d_z;
        let draws: Vec<NoiseDraw> = latents
            .iter()
            .map(|_| draw_noise(&mut rng, len, self.cfg.t_diff, self.cfg.cond_dropout))
            .collect();
        self.loss_with_draws(tape, latents, texts, &draws)
    }

    /// Deterministic DDIM over `steps` uniformly strided timesteps from a
    /// seeded Gaussian start. Guidance `w = 1` evaluates only the
    /// conditional branch. Returns the latent in VAE units.
    pub fn ddim_sample(
        &self,
        text: &TextEmbedding,
        steps: usize,
        w: f64,
        seed: u64,
    ) -> Result<(TokenMatrix, SampleTrace), ModelError> {
        let t_diff = self.cfg.t_diff;
        if steps == 0 || steps > t_diff {
            return Err(ModelError::Config(crate::config::ConfigError::Invalid(
                format!("sampling steps must be in 1..={t_diff}"),
            )));
        }
        let schedule = self.schedule();
        let null = self.null_text();
        let len = self.cfg.seq_len * self.cfg.d_z;
        let mut z = Rng::new(seed, 13).normals(len);
        let ts: Vec<usize> = (0..steps).map(|i| i * t_diff / steps).collect();
        let mut trace = SampleTrace::default();
        for k in (0..steps).rev() {
            let t = ts[k];
            let cond = self.predict_noise(&z, t, text)?;
            trace.cond_calls += 1;
            let eps = if w == 1.0 {
                cond
            } else {
                let uncond = self.predict_noise(&z, t, &null)?;
                trace.uncond_calls += 1;
                cfg_noise(&cond, &uncond, w)
            };
            let (a, s) = (schedule.alpha[t], schedule.sigma[t]);
            let (a_prev, s_prev) = if k == 0 {
                (1.0, 0.0)
            } else {
                (schedule.alpha[ts[k - 1]], schedule.sigma[ts[k - 1]])
            };
            for (zi, ei) in z.iter_mut().zip(&eps) {
                let x0 = (*zi - s * ei) / a;
                *zi = a_prev * x0 + s_prev * ei;
            }
        }
        let inv = 1.0 / self.cfg.latent_scale;
        Ok((
            TokenMatrix {
                rows: self.cfg.seq_len,
                cols: self.cfg.d_z,
                data: z.iter().map(|v| v * inv).collect(),
            },
            trace,
        ))
    }

    pub fn header(&self) -> String {
        serde_json::json!({ "kind": "dit", "config": self.cfg }).to_string()
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint::from_store(self.header(), &self.store)
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self, ModelError> {
        let cfg: DitConfig = parse_header(&ckpt.config, "dit")?;
        let mut model = VsDit::new(cfg, 0)?;
        ckpt.restore(&mut model.store)?;
        Ok(model)
    }
}

/// One row of the diffusion loss trace.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DitTraceRow {
    pub step: u64,
    pub lr: f64,
    pub loss: f64,
}

/// Posterior-mean latents of the complete documents.
pub fn encode_latents(
    vae: &VpVae,
    examples: &[Example],
    features: &mut FeatureSource,
) -> Result<Vec<TokenMatrix>, ModelError> {
    let codec = vae.codec();
    examples
        .iter()
        .map(|e| {
            let input = stage_input(&e.doc, &codec, &vae.tables, features, vae.cfg.d_p)?;
            Ok(vae.fuse_encode(&input.embedding, &input.pixels, None)?.mu)
        })
        .collect()
}

/// Trains a diffusion model on the frozen VAE's latents of `examples`,
/// conditioned on their captions. The latent shape and unit-variance
/// scale are written into the model config.
pub fn train_dit(
    examples: &[Example],
    vae: &VpVae,
    mut cfg: DitConfig,
    steps: u64,
    seed: u64,
    features: &mut FeatureSource,
    mut trace: impl FnMut(&DitTraceRow),
) -> Result<VsDit, ModelError> {
    if examples.is_empty() {
        return Err(ModelError::Manifest("no training documents".into()));
    }
    let raw = encode_latents(vae, examples, features)?;
    let values: Vec<f64> = raw.iter().flat_map(|m| m.data.iter().copied()).collect();
    let mean = values.iter().sum::<f64>() / values.len() as f64;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / values.len() as f64;
    cfg.d_z = vae.cfg.d_z;
    cfg.seq_len = vae.cfg.seq_len;
    cfg.latent_scale = if var > 0.0 { 1.0 / var.sqrt() } else { 1.0 };
    let mut model = VsDit::new(cfg, seed)?;
    let latents: Vec<Vec<f64>> = raw
        .iter()
        .map(|m| m.data.iter().map(|v| v * model.cfg.latent_scale).collect())
        .collect();
    let texts: Vec<TextEmbedding> = examples
        .iter()
        .map(|e| model.text_embedding(&e.caption))
        .collect();

    let mut rng = Rng::new(seed, 14);
    let mut state = OptimizerState::new(&model.store);
    let opt = AdamW {
        weight_decay: model.cfg.optim.weight_decay,
        ..AdamW::default()
    };
    let schedule = model.cfg.optim.schedule(steps);
    for step in 1..=steps {
        let idx: Vec<usize> = (0..model.cfg.batch_size)
            .map(|_| rng.below(latents.len()))
            .collect();
        let batch: Vec<Vec<f64>> = idx.iter().map(|&i| latents[i].clone()).collect();
        let btexts: Vec<TextEmbedding> = idx.iter().map(|&i| texts[i].clone()).collect();
        let step_seed = rng.split(step).normals(1)[0].to_bits();
        let mut tape = Tape::new();
        let loss = model.dit_loss(&mut tape, &batch, &btexts, step_seed)?;
        let value = tape.scalar(loss);
        if !value.is_finite() {
            return Err(ModelError::NonFiniteLoss {
                step,
                mse: value,
                kl: 0.0,
            });
        }
        let mut grads = tape.backward(loss, &model.store);
        clip_grad_norm(&mut grads, model.cfg.optim.max_grad_norm);
        let lr = schedule.at(step);
        opt.step(&mut model.store, &grads, &mut state, lr)?;
        trace(&DitTraceRow {
            step,
            lr,
            loss: value,
        });
    }
    Ok(model)
}

/// Checks that a diffusion model generates latents the VAE can decode.
pub fn check_compatible(vae: &VpVae, dit: &VsDit) -> Result<(), ModelError> {
    let v = (vae.cfg.seq_len, vae.cfg.d_z);
    let d = (dit.cfg.seq_len, dit.cfg.d_z);
    if v != d {
        return Err(ModelError::IncompatibleCheckpoints(format!(
            "vae latent is {}x{}, diffusion latent is {}x{}",
            v.0, v.1, d.0, d.1
        )));
    }
    Ok(())
}

/// Prompt to normalized document: guided DDIM in latent space, VAE
/// decode, nearest-token unembedding and lenient matrix decoding.
pub fn text_to_svg(
    prompt: &str,
    vae: &VpVae,
    dit: &VsDit,
    w: f64,
    steps: usize,
    seed: u64,
) -> Result<Document, ModelError> {
    check_compatible(vae, dit)?;
    let text = dit.text_embedding(prompt);
    let (z, _) = dit.ddim_sample(&text, steps, w, seed)?;
    let recon = vae.decode(&z)?;
    let codec = vae.codec();
    let m = denormalize_continuous(&vae.tables.unembed(&recon), codec.canvas);
    let doc = codec.decode_lenient(&m);
    Ok(normalize(
        &doc,
        NormalizeOptions {
            canvas: codec.canvas,
            ..NormalizeOptions::default()
        },
    ))
}
