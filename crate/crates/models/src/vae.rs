use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use vexel_core::codec::{Codec, EmbedTables, SvgEmbedding, TokenMatrix};
use vexel_core::conditioning::PixelFeatures;
use vexel_nn::{
    clip_grad_norm, AdamW, Checkpoint, FeedForward, LayerNorm, Linear, MultiHeadAttention, NnError,
    OptimizerState, ParamStore, Rng, Tape, Var,
};

use crate::config::{LossSpace, VaeConfig};
use crate::data::{build_stages, stage_input, Example, FeatureSource, StageInput};
use crate::error::ModelError;

/// Bounds applied to the predicted log-variance.
pub const LOGVAR_MIN: f64 = -20.0;
pub const LOGVAR_MAX: f64 = 4.0;

/// Pre-norm residual block: self-attention with rotary positions, then a
/// GELU feed-forward.
#[derive(Debug, Clone, Copy)]
pub struct SelfAttentionLayer {
    pub ln1: LayerNorm,
    pub attn: MultiHeadAttention,
    pub ln2: LayerNorm,
    pub ff: FeedForward,
}

impl SelfAttentionLayer {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        heads: usize,
        ff_dim: usize,
        rng: &mut Rng,
    ) -> Result<Self, NnError> {
        Ok(SelfAttentionLayer {
            ln1: LayerNorm::new(store, &format!("{name}.ln1"), dim),
            attn: MultiHeadAttention::new(
                store,
                &format!("{name}.attn"),
                dim,
                dim,
                heads,
                true,
                rng,
            )?,
            ln2: LayerNorm::new(store, &format!("{name}.ln2"), dim),
            ff: FeedForward::new(store, &format!("{name}.ff"), dim, ff_dim, rng),
        })
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var, NnError> {
        let n = self.ln1.forward(tape, store, x)?;
        let a = self.attn.forward(tape, store, n, n)?;
        let x = tape.add(x, a)?;
        let n = self.ln2.forward(tape, store, x)?;
        let f = self.ff.forward(tape, store, n)?;
        tape.add(x, f)
    }
}

#[derive(Debug, Clone)]
struct Encoder {
    svg_proj: Linear,
    pix_proj: Linear,
    ln_q: LayerNorm,
    ln_kv: LayerNorm,
    cross: MultiHeadAttention,
    layers: Vec<SelfAttentionLayer>,
    norm: LayerNorm,
    mu: Linear,
    logvar: Linear,
}

#[derive(Debug, Clone)]
struct Decoder {
    input: Linear,
    layers: Vec<SelfAttentionLayer>,
    norm: LayerNorm,
    out: Linear,
}

/// Posterior and sample for one sequence, each N×D_z.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentCode {
    pub z: TokenMatrix,
    pub mu: TokenMatrix,
    pub logvar: TokenMatrix,
}

/// Tape handles for one forward pass.
#[derive(Debug, Clone, Copy)]
pub struct Posterior {
    pub mu: Var,
    pub logvar: Var,
}

#[derive(Debug, Clone, Copy)]
pub struct LossParts {
    pub total: Var,
    pub mse: Var,
    pub kl: Var,
}

/// Loss values of one training step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub step: u64,
    pub lr: f64,
    pub mse: f64,
    pub kl: f64,
    pub total: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalReport {
    /// Mean masked reconstruction error with the latent at the posterior mean.
    pub mse: f64,
    /// Fraction of valid rows whose element and command indices survive
    /// unembedding of the reconstruction.
    pub token_accuracy: f64,
}

/// Cross-attention fusion encoder over SVG and pixel tokens, Gaussian
/// per-token latent, and a mirrored self-attention decoder.
#[derive(Debug, Clone)]
pub struct VpVae {
    pub cfg: VaeConfig,
    pub store: ParamStore,
    pub tables: EmbedTables,
    encoder: Encoder,
    decoder: Decoder,
}

fn tm_to_var(tape: &mut Tape, m: &TokenMatrix) -> Result<Var, NnError> {
    tape.constant(m.rows, m.cols, m.data.clone())
}

fn var_to_tm(tape: &Tape, v: Var) -> TokenMatrix {
    let (rows, cols) = tape.dims(v);
    TokenMatrix {
        rows,
        cols,
        data: tape.value(v).to_vec(),
    }
}

fn expect_dims(op: &'static str, m: &TokenMatrix, rows: usize, cols: usize) -> Result<(), NnError> {
    if (m.rows, m.cols) != (rows, cols) {
        return Err(NnError::ShapeMismatch {
            op,
            left: vec![m.rows, m.cols],
            right: vec![rows, cols],
        });
    }
    Ok(())
}

/// Reconstruction MSE over masked rows plus `kl_weight` times the KL
/// divergence of the posterior from N(0, I) over the same rows.
#[allow(clippy::too_many_arguments)]
pub fn vae_loss(
    tape: &mut Tape,
    recon: Var,
    target: &[f64],
    posterior: Posterior,
    kl_weight: f64,
    mask: &[bool],
) -> Result<LossParts, NnError> {
    let mse = tape.masked_mse(recon, target, Some(mask))?;
    let kl = tape.kl_standard_normal(posterior.mu, posterior.logvar, Some(mask))?;
    let weighted = tape.scale(kl, kl_weight);
    let total = tape.add(mse, weighted)?;
    Ok(LossParts { total, mse, kl })
}

impl VpVae {
    pub fn new(cfg: VaeConfig, seed: u64) -> Result<Self, ModelError> {
        cfg.validate()?;
        let tables = EmbedTables::new(cfg.embed_seed, cfg.seq_len, cfg.d_e, cfg.d_tok);
        let mut store = ParamStore::new();
        let mut rng = Rng::new(seed, 1);
        let (d, h, ff) = (cfg.d_e, cfg.heads, cfg.ff_dim);
        let s = &mut store;
        let encoder = Encoder {
            svg_proj: Linear::new(s, "encoder.svg_proj", d, d, true, &mut rng),
            pix_proj: Linear::new(s, "encoder.pix_proj", cfg.d_p, d, true, &mut rng),
            ln_q: LayerNorm::new(s, "encoder.cross.ln_q", d),
            ln_kv: LayerNorm::new(s, "encoder.cross.ln_kv", d),
            cross: MultiHeadAttention::new(s, "encoder.cross.attn", d, d, h, false, &mut rng)?,
            layers: (0..cfg.layers)
                .map(|i| {
                    SelfAttentionLayer::new(s, &format!("encoder.layer{i}"), d, h, ff, &mut rng)
                })
                .collect::<Result<_, _>>()?,
            norm: LayerNorm::new(s, "encoder.norm", d),
            mu: Linear::new(s, "encoder.mu", d, cfg.d_z, true, &mut rng),
            logvar: Linear::new(s, "encoder.logvar", d, cfg.d_z, true, &mut rng),
        };
        let decoder = Decoder {
            input: Linear::new(s, "decoder.input", cfg.d_z, d, true, &mut rng),
            layers: (0..cfg.layers)
                .map(|i| {
                    SelfAttentionLayer::new(s, &format!("decoder.layer{i}"), d, h, ff, &mut rng)
                })
                .collect::<Result<_, _>>()?,
            norm: LayerNorm::new(s, "decoder.norm", d),
            out: Linear::new(s, "decoder.out", d, d, true, &mut rng),
        };
        Ok(VpVae {
            cfg,
            store,
            tables,
            encoder,
            decoder,
        })
    }

    pub fn codec(&self) -> Codec {
        Codec::new(self.cfg.seq_len, self.cfg.canvas)
    }

    /// Encoder forward pass on the tape: projections, one cross-attention
    /// layer with SVG queries over pixel keys and values, the self-attention
    /// stack, then the mean and clamped log-variance heads.
    pub fn encode_vars(
        &self,
        tape: &mut Tape,
        emb: &SvgEmbedding,
        pix: &PixelFeatures,
    ) -> Result<Posterior, NnError> {
        let (n, c) = (self.cfg.seq_len, &self.cfg);
        expect_dims("encode svg", emb, n, c.d_e)?;
        expect_dims("encode pixels", pix, n, c.d_p)?;
        let (st, enc) = (&self.store, &self.encoder);
        let e = tm_to_var(tape, emb)?;
        let p = tm_to_var(tape, pix)?;
        let mut h = enc.svg_proj.forward(tape, st, e)?;
        let kv = enc.pix_proj.forward(tape, st, p)?;
        let q = enc.ln_q.forward(tape, st, h)?;
        let kv = enc.ln_kv.forward(tape, st, kv)?;
        let fused = enc.cross.forward(tape, st, q, kv)?;
        h = tape.add(h, fused)?;
        for layer in &enc.layers {
            h = layer.forward(tape, st, h)?;
        }
        let h = enc.norm.forward(tape, st, h)?;
        let mu = enc.mu.forward(tape, st, h)?;
        let lv = enc.logvar.forward(tape, st, h)?;
        let logvar = tape.clamp(lv, LOGVAR_MIN, LOGVAR_MAX);
        Ok(Posterior { mu, logvar })
    }

    /// `z = μ + exp(logvar/2)·ε`; `eps = None` means ε = 0.
    pub fn reparameterize(
        &self,
        tape: &mut Tape,
        posterior: Posterior,
        eps: Option<&[f64]>,
    ) -> Result<Var, NnError> {
        let Some(eps) = eps else {
            return Ok(posterior.mu);
        };
        let (r, c) = tape.dims(posterior.mu);
        let e = tape.constant(r, c, eps.to_vec())?;
        let half = tape.scale(posterior.logvar, 0.5);
        let std = tape.exp(half);
        let noise = tape.mul(std, e)?;
        tape.add(posterior.mu, noise)
    }

    /// Decoder forward pass: up-projection plus the frozen positional
    /// rows, the self-attention stack, and an output projection to D_e.
    pub fn decode_vars(&self, tape: &mut Tape, z: Var) -> Result<Var, NnError> {
        let (n, dz) = tape.dims(z);
        if (n, dz) != (self.cfg.seq_len, self.cfg.d_z) {
            return Err(NnError::ShapeMismatch {
                op: "decode",
                left: vec![n, dz],
                right: vec![self.cfg.seq_len, self.cfg.d_z],
            });
        }
        let (st, dec) = (&self.store, &self.decoder);
        let h = dec.input.forward(tape, st, z)?;
        let pos = tm_to_var(tape, &self.tables.positional)?;
        let mut h = tape.add(h, pos)?;
        for layer in &dec.layers {
            h = layer.forward(tape, st, h)?;
        }
        let h = dec.norm.forward(tape, st, h)?;
        dec.out.forward(tape, st, h)
    }

    /// Encodes one sequence. With `rng` the latent is sampled, otherwise
    /// it is the posterior mean.
    pub fn fuse_encode(
        &self,
        emb: &SvgEmbedding,
        pix: &PixelFeatures,
        rng: Option<&mut Rng>,
    ) -> Result<LatentCode, NnError> {
        let mut tape = Tape::new();
        let post = self.encode_vars(&mut tape, emb, pix)?;
        let eps = rng.map(|r| r.normals(self.cfg.seq_len * self.cfg.d_z));
        let z = self.reparameterize(&mut tape, post, eps.as_deref())?;
        Ok(LatentCode {
            z: var_to_tm(&tape, z),
            mu: var_to_tm(&tape, post.mu),
            logvar: var_to_tm(&tape, post.logvar),
        })
    }

    pub fn decode(&self, z: &TokenMatrix) -> Result<SvgEmbedding, NnError> {
        let mut tape = Tape::new();
        let zv = tm_to_var(&mut tape, z)?;
        let out = self.decode_vars(&mut tape, zv)?;
        Ok(var_to_tm(&tape, out))
    }

    /// Full loss for one stage on the tape.
    pub fn stage_loss(
        &self,
        tape: &mut Tape,
        input: &StageInput,
        eps: Option<&[f64]>,
    ) -> Result<LossParts, NnError> {
        let post = self.encode_vars(tape, &input.embedding, &input.pixels)?;
        let z = self.reparameterize(tape, post, eps)?;
        let recon = self.decode_vars(tape, z)?;
        match self.cfg.loss_space {
            LossSpace::Embedding => vae_loss(
                tape,
                recon,
                &input.embedding.data,
                post,
                self.cfg.kl_weight,
                &input.mask,
            ),
            LossSpace::Matrix => {
                let proj_t = transpose(&self.tables.projection);
                let pv = tm_to_var(tape, &proj_t)?;
                let r = tape.matmul(recon, pv)?;
                let target = matmul_const(&input.embedding, &proj_t);
                vae_loss(tape, r, &target, post, self.cfg.kl_weight, &input.mask)
            }
        }
    }

    /// Mean loss over the rendering-sequence stages of one document.
    pub fn batch_loss(
        &self,
        tape: &mut Tape,
        stages: &[StageInput],
        rng: Option<&mut Rng>,
    ) -> Result<LossParts, NnError> {
        let mut rng = rng;
        let inv = 1.0 / stages.len() as f64;
        let mut acc: Option<LossParts> = None;
        for input in stages {
            let eps = rng
                .as_deref_mut()
                .map(|r| r.normals(self.cfg.seq_len * self.cfg.d_z));
            let p = self.stage_loss(tape, input, eps.as_deref())?;
            acc = Some(match acc {
                None => p,
                Some(a) => LossParts {
                    total: tape.add(a.total, p.total)?,
                    mse: tape.add(a.mse, p.mse)?,
                    kl: tape.add(a.kl, p.kl)?,
                },
            });
        }
        let a = acc.expect("at least one stage");
        Ok(LossParts {
            total: tape.scale(a.total, inv),
            mse: tape.scale(a.mse, inv),
            kl: tape.scale(a.kl, inv),
        })
    }

    /// Inputs for every stage of `doc`.
    pub fn stage_inputs(
        &self,
        doc: &vexel_core::svg::Document,
        features: &mut FeatureSource,
    ) -> Result<Vec<StageInput>, ModelError> {
        let codec = self.codec();
        build_stages(doc, self.cfg.stages)?
            .iter()
            .map(|s| stage_input(s, &codec, &self.tables, features, self.cfg.d_p))
            .collect()
    }

    /// Reconstruction error and token recovery with ε = 0.
    pub fn evaluate(&self, inputs: &[StageInput]) -> Result<EvalReport, NnError> {
        let mut mse = 0.0;
        let (mut hit, mut total) = (0usize, 0usize);
        for input in inputs {
            let mut tape = Tape::new();
            let parts = self.stage_loss(&mut tape, input, None)?;
            mse += tape.scalar(parts.mse);
            let code = self.fuse_encode(&input.embedding, &input.pixels, None)?;
            let rec = self.tables.unembed(&self.decode(&code.z)?);
            let truth = self.tables.unembed(&input.embedding);
            for (i, valid) in input.mask.iter().enumerate() {
                if *valid {
                    total += 1;
                    hit += usize::from(rec.rows[i][..2] == truth.rows[i][..2]);
                }
            }
        }
        Ok(EvalReport {
            mse: mse / inputs.len().max(1) as f64,
            token_accuracy: if total == 0 {
                1.0
            } else {
                hit as f64 / total as f64
            },
        })
    }

    pub fn header(&self) -> String {
        serde_json::json!({ "kind": "vae", "config": self.cfg }).to_string()
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint::from_store(self.header(), &self.store)
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self, ModelError> {
        let cfg: VaeConfig = parse_header(&ckpt.config, "vae")?;
        let mut model = VpVae::new(cfg, 0)?;
        ckpt.restore(&mut model.store)?;
        Ok(model)
    }
}

/// Reads a checkpoint header `{"kind": .., "config": ..}` of the given kind.
pub fn parse_header<T: serde::de::DeserializeOwned>(
    text: &str,
    kind: &str,
) -> Result<T, ModelError> {
    #[derive(Deserialize)]
    #[serde(deny_unknown_fields)]
    struct Header {
        kind: String,
        config: serde_json::Value,
    }
    let h: Header =
        serde_json::from_str(text).map_err(|e| ModelError::BadCheckpoint(e.to_string()))?;
    if h.kind != kind {
        return Err(ModelError::BadCheckpoint(format!(
            "expected a {kind} checkpoint, found {}",
            h.kind
        )));
    }
    serde_json::from_value(h.config).map_err(|e| ModelError::BadCheckpoint(e.to_string()))
}

fn transpose(m: &TokenMatrix) -> TokenMatrix {
    let mut t = TokenMatrix::zeros(m.cols, m.rows);
    for i in 0..m.rows {
        for j in 0..m.cols {
            t.data[j * m.rows + i] = m.data[i * m.cols + j];
        }
    }
    t
}

fn matmul_const(a: &TokenMatrix, b: &TokenMatrix) -> Vec<f64> {
    let mut out = vec![0.0; a.rows * b.cols];
    for i in 0..a.rows {
        for k in 0..a.cols {
            let x = a.data[i * a.cols + k];
            for j in 0..b.cols {
                out[i * b.cols + j] += x * b.data[k * b.cols + j];
            }
        }
    }
    out
}

/// Options for [`train_vae`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainOptions {
    pub steps: u64,
    pub seed: u64,
}

/// Trains on rendering-sequence batches: each step samples one document,
/// builds its stages, and applies clipped AdamW on the mean stage loss.
/// `trace` receives one row per step.
pub fn train_vae(
    examples: &[Example],
    cfg: VaeConfig,
    opts: TrainOptions,
    features: &mut FeatureSource,
    mut trace: impl FnMut(&TraceRow),
) -> Result<VpVae, ModelError> {
    if examples.is_empty() {
        return Err(ModelError::Manifest("no training documents".into()));
    }
    let mut model = VpVae::new(cfg, opts.seed)?;
    let mut batches: HashMap<usize, Vec<StageInput>> = HashMap::new();
    let mut rng = Rng::new(opts.seed, 2);
    let mut state = OptimizerState::new(&model.store);
    let opt = AdamW {
        weight_decay: model.cfg.optim.weight_decay,
        ..AdamW::default()
    };
    let schedule = model.cfg.optim.schedule(opts.steps);
    for step in 1..=opts.steps {
        let idx = rng.below(examples.len());
        if let std::collections::hash_map::Entry::Vacant(e) = batches.entry(idx) {
            let inputs = model.stage_inputs(&examples[idx].doc, features)?;
            e.insert(inputs);
        }
        let mut tape = Tape::new();
        let parts = model.batch_loss(&mut tape, &batches[&idx], Some(&mut rng))?;
        let (mse, kl, total) = (
            tape.scalar(parts.mse),
            tape.scalar(parts.kl),
            tape.scalar(parts.total),
        );
        if !total.is_finite() {
            return Err(ModelError::NonFiniteLoss { step, mse, kl });
        }
        let mut grads = tape.backward(parts.total, &model.store);
        clip_grad_norm(&mut grads, model.cfg.optim.max_grad_norm);
        let lr = schedule.at(step);
        opt.step(&mut model.store, &grads, &mut state, lr)?;
        trace(&TraceRow {
            step,
            lr,
            mse,
            kl,
            total,
        });
    }
    Ok(model)
}

/// Writes a loss trace as CSV with a header naming the row fields.
pub fn write_trace_csv<R: Serialize>(rows: &[R]) -> Result<Vec<u8>, ModelError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r)
            .map_err(|e| ModelError::Io(std::io::Error::other(e.to_string())))?;
    }
    w.into_inner()
        .map_err(|e| ModelError::Io(std::io::Error::other(e.to_string())))
}
