use vexel_core::svg::{Color, Document, Element, PathCommand, Point, Shape};
use vexel_nn::{grad_check_with, Fault, GradCheckOptions, GradCheckReport, ParamStore, Rng, Tape};

use crate::config::{DitConfig, VaeConfig};
use crate::data::FeatureSource;
use crate::dit::VsDit;
use crate::error::ModelError;
use crate::vae::VpVae;

/// Coordinates sampled per parameter tensor by the full-model checks.
pub const CHECK_COORDS: usize = 3;

fn probe_document() -> Document {
    let path = Shape::Path(vec![
        PathCommand::Move(Point::new(20.0, 30.0)),
        PathCommand::Line(Point::new(90.0, 24.0)),
        PathCommand::Cubic(
            Point::new(110.0, 60.0),
            Point::new(70.0, 100.0),
            Point::new(30.0, 90.0),
        ),
        PathCommand::Close,
    ]);
    Document::with_elements(
        128,
        vec![
            Element::new(Shape::Circle {
                cx: 64.0,
                cy: 64.0,
                r: 20.0,
            })
            .with_fill(Color::from_rgb8(200, 40, 40)),
            Element::new(path).with_fill(Color::from_rgb8(30, 120, 200)),
        ],
    )
}

fn options(seed: u64, fault: Option<Fault>) -> GradCheckOptions {
    GradCheckOptions {
        per_tensor: Some(CHECK_COORDS),
        seed,
        fault,
        ..GradCheckOptions::default()
    }
}

/// Finite-difference check of the full VAE loss (two rendering stages of a
/// fixed document, fixed reparameterization noise).
pub fn vae_gradcheck(
    cfg: VaeConfig,
    seed: u64,
    fault: Option<Fault>,
) -> Result<GradCheckReport, ModelError> {
    let vae = VpVae::new(cfg, seed)?;
    let mut features = FeatureSource::new(None);
    let stages = vae.stage_inputs(&probe_document(), &mut features)?;
    let stages = &stages[stages.len().saturating_sub(2)..];
    let loss = |tape: &mut Tape, s: &ParamStore| {
        let mut m = vae.clone();
        m.store = s.clone();
        let mut rng = Rng::new(seed, 21);
        Ok(m.batch_loss(tape, stages, Some(&mut rng))?.total)
    };
    Ok(grad_check_with(loss, &vae.store, &options(seed, fault))?)
}

/// Finite-difference check of the full diffusion loss on random latents.
/// Parameters are perturbed first so the zero-initialized gates are active.
pub fn dit_gradcheck(
    cfg: DitConfig,
    seed: u64,
    fault: Option<Fault>,
) -> Result<GradCheckReport, ModelError> {
    let mut dit = VsDit::new(cfg, seed)?;
    let mut rng = Rng::new(seed, 22);
    let ids: Vec<_> = dit.store.ids().collect();
    for id in ids {
        for v in dit.store.get_mut(id).data_mut() {
            *v += 0.05 * rng.normal();
        }
    }
    let len = dit.cfg.seq_len * dit.cfg.d_z;
    let latents = vec![rng.normals(len), rng.normals(len)];
    let texts = vec![dit.text_embedding("probe prompt"), dit.null_text()];
    let loss = |tape: &mut Tape, s: &ParamStore| {
        let mut m = dit.clone();
        m.store = s.clone();
        m.dit_loss(tape, &latents, &texts, seed)
    };
    Ok(grad_check_with(loss, &dit.store, &options(seed, fault))?)
}
