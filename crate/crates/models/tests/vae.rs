use std::path::Path;

use vexel_core::codec::TokenMatrix;
use vexel_core::raster::rasterize;
use vexel_core::svg::{Color, Document, Element, Paint, Shape};
use vexel_models::vae::Posterior;
use vexel_models::*;
use vexel_nn::{load_checkpoint, save_checkpoint, Fault, OpKind, Rng, Tape};

fn circle(cx: f64, cy: f64, r: f64, rgb: (u8, u8, u8)) -> Element {
    Element {
        fill: Some(Paint::Color(Color::from_rgb8(rgb.0, rgb.1, rgb.2))),
        ..Element::new(Shape::Circle { cx, cy, r })
    }
}

fn sample_doc() -> Document {
    Document::with_elements(
        128,
        vec![
            circle(40.0, 60.0, 16.0, (230, 57, 70)),
            circle(82.0, 90.0, 10.0, (106, 76, 147)),
        ],
    )
}

fn model(seed: u64) -> VpVae {
    VpVae::new(VaeConfig::tiny(), seed).unwrap()
}

fn full_input(vae: &VpVae) -> StageInput {
    let mut fs = FeatureSource::new(None);
    vae.stage_inputs(&sample_doc(), &mut fs)
        .unwrap()
        .pop()
        .unwrap()
}

#[test]
fn zero_noise_latent_is_posterior_mean() {
    let vae = model(1);
    let input = full_input(&vae);
    let code = vae
        .fuse_encode(&input.embedding, &input.pixels, None)
        .unwrap();
    assert_eq!(code.z, code.mu);
    let mut rng = Rng::new(5, 0);
    let sampled = vae
        .fuse_encode(&input.embedding, &input.pixels, Some(&mut rng))
        .unwrap();
    assert_eq!(sampled.mu, code.mu);
    assert_ne!(sampled.z, code.mu);
}

#[test]
fn reparameterization_matches_closed_form() {
    let vae = model(1);
    let input = full_input(&vae);
    let eps = Rng::new(9, 0).normals(vae.cfg.seq_len * vae.cfg.d_z);
    let mut tape = Tape::new();
    let post = vae
        .encode_vars(&mut tape, &input.embedding, &input.pixels)
        .unwrap();
    let z = vae.reparameterize(&mut tape, post, Some(&eps)).unwrap();
    let (mu, lv, z) = (tape.value(post.mu), tape.value(post.logvar), tape.value(z));
    for i in 0..eps.len() {
        let expect = mu[i] + (0.5 * lv[i]).exp() * eps[i];
        assert!((z[i] - expect).abs() < 1e-12);
    }
}

#[test]
fn logvar_is_clamped() {
    let vae = model(2);
    let input = full_input(&vae);
    let code = vae
        .fuse_encode(&input.embedding, &input.pixels, None)
        .unwrap();
    assert!(code
        .logvar
        .data
        .iter()
        .all(|v| (vae::LOGVAR_MIN..=vae::LOGVAR_MAX).contains(v)));
}

#[test]
fn construction_and_encoding_are_deterministic() {
    let (a, b) = (model(3), model(3));
    let input = full_input(&a);
    let ca = a
        .fuse_encode(&input.embedding, &input.pixels, None)
        .unwrap();
    let cb = b
        .fuse_encode(&input.embedding, &input.pixels, None)
        .unwrap();
    let bits = |m: &TokenMatrix| m.data.iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&ca.mu), bits(&cb.mu));
    assert_ne!(
        bits(
            &model(4)
                .fuse_encode(&input.embedding, &input.pixels, None)
                .unwrap()
                .mu
        ),
        bits(&ca.mu)
    );
}

#[test]
fn encoder_reads_pixel_features() {
    let vae = model(1);
    let input = full_input(&vae);
    let base = vae
        .fuse_encode(&input.embedding, &input.pixels, None)
        .unwrap();
    let mut pixels = input.pixels.clone();
    for v in pixels.data.iter_mut().step_by(7) {
        *v += 0.5;
    }
    let moved = vae.fuse_encode(&input.embedding, &pixels, None).unwrap();
    let diff: f64 = base
        .mu
        .data
        .iter()
        .zip(&moved.mu.data)
        .map(|(a, b)| (a - b).abs())
        .sum();
    assert!(diff > 1e-6, "pixel change left the posterior untouched");
}

#[test]
fn decoder_has_no_pixel_pathway() {
    let vae = model(1);
    let names: Vec<&str> = vae.store.names().iter().map(String::as_str).collect();
    assert!(names
        .iter()
        .any(|n| n.starts_with("encoder.") && n.contains("cross")));
    assert!(names
        .iter()
        .filter(|n| n.starts_with("decoder."))
        .all(|n| !n.contains("cross")));
    assert!(names
        .iter()
        .all(|n| n.starts_with("encoder.") || n.starts_with("decoder.")));
}

#[test]
fn loss_is_zero_at_perfect_reconstruction_and_standard_posterior() {
    let mut tape = Tape::new();
    let target = vec![0.3, -1.0, 2.0, 0.5, 0.0, 1.0];
    let recon = tape.constant(3, 2, target.clone()).unwrap();
    let mu = tape.constant(3, 2, vec![0.0; 6]).unwrap();
    let logvar = tape.constant(3, 2, vec![0.0; 6]).unwrap();
    let p = vae_loss(
        &mut tape,
        recon,
        &target,
        Posterior { mu, logvar },
        0.5,
        &[true; 3],
    )
    .unwrap();
    assert_eq!(tape.scalar(p.total), 0.0);
}

#[test]
fn kl_matches_closed_form() {
    let mut tape = Tape::new();
    let target = vec![0.0; 4];
    let recon = tape.constant(2, 2, target.clone()).unwrap();
    let mu = tape.constant(2, 2, vec![1.0, -2.0, 0.0, 0.5]).unwrap();
    let logvar = tape.constant(2, 2, vec![0.0, 1.0, -1.0, 0.3]).unwrap();
    let p = vae_loss(
        &mut tape,
        recon,
        &target,
        Posterior { mu, logvar },
        1.0,
        &[true; 2],
    )
    .unwrap();
    let expect: f64 = [(1.0f64, 0.0f64), (-2.0, 1.0), (0.0, -1.0), (0.5, 0.3)]
        .iter()
        .map(|&(m, l)| 0.5 * (m * m + l.exp() - 1.0 - l))
        .sum::<f64>()
        / 4.0;
    assert!((tape.scalar(p.kl) - expect).abs() < 1e-12);
}

#[test]
fn padding_rows_do_not_affect_loss() {
    let mask = [true, true, false];
    let target = vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
    let run = |pad: f64| {
        let mut tape = Tape::new();
        let recon = tape
            .constant(3, 2, vec![1.5, 2.0, 2.0, 4.0, pad, -pad])
            .unwrap();
        let mu = tape
            .constant(3, 2, vec![0.1, 0.0, 0.0, 0.2, pad, pad])
            .unwrap();
        let logvar = tape
            .constant(3, 2, vec![0.0, 0.1, 0.0, 0.0, pad, -pad])
            .unwrap();
        let p = vae_loss(
            &mut tape,
            recon,
            &target,
            Posterior { mu, logvar },
            0.1,
            &mask,
        )
        .unwrap();
        tape.scalar(p.total)
    };
    assert_eq!(run(0.0), run(37.0));
}

#[test]
fn checkpoint_round_trip_preserves_outputs() {
    let vae = model(6);
    let input = full_input(&vae);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("vae.vxc");
    save_checkpoint(&path, &vae.to_checkpoint()).unwrap();
    let back = VpVae::from_checkpoint(&load_checkpoint(&path).unwrap()).unwrap();
    assert_eq!(back.cfg, vae.cfg);
    let a = vae
        .fuse_encode(&input.embedding, &input.pixels, None)
        .unwrap();
    let b = back
        .fuse_encode(&input.embedding, &input.pixels, None)
        .unwrap();
    let max =
        a.mu.data
            .iter()
            .zip(&b.mu.data)
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f64::max);
    assert!(max < 1e-4, "f32 storage drift {max}");
}

#[test]
fn dit_checkpoint_is_rejected_as_vae() {
    let header = r#"{"kind":"dit","config":{}}"#;
    assert!(matches!(
        vae::parse_header::<VaeConfig>(header, "vae"),
        Err(ModelError::BadCheckpoint(_))
    ));
}

#[test]
fn stages_are_prefixes_ending_at_the_document() {
    let doc = Document::with_elements(
        128,
        (0..5)
            .map(|i| circle(20.0 + 15.0 * i as f64, 64.0, 8.0, (10, 20, 30)))
            .collect(),
    );
    let stages = build_stages(&doc, 3).unwrap();
    assert_eq!(stages.len(), 3);
    assert_eq!(stages.last().unwrap(), &doc);
    for w in stages.windows(2) {
        assert!(w[0].elements.len() < w[1].elements.len());
        assert_eq!(w[0].elements[..], w[1].elements[..w[0].elements.len()]);
    }
}

#[test]
fn full_tiny_loss_passes_gradient_check() {
    let r = checks::vae_gradcheck(VaeConfig::tiny(), 8, None).unwrap();
    assert!(r.max_rel_error < 1e-4, "{r:?}");
    let mutant = Fault {
        op: OpKind::Attention,
        factor: 1.5,
    };
    let r = checks::vae_gradcheck(VaeConfig::tiny(), 8, Some(mutant)).unwrap();
    assert!(r.max_rel_error > 1e-2, "{r:?}");
}

#[test]
fn reparameterization_variance_matches_posterior() {
    let vae = model(1);
    let input = full_input(&vae);
    let mut tape = Tape::new();
    let post = vae
        .encode_vars(&mut tape, &input.embedding, &input.pixels)
        .unwrap();
    let (mu, lv) = (
        tape.value(post.mu).to_vec(),
        tape.value(post.logvar).to_vec(),
    );
    let dims = [0usize, 5, 17];
    let mut rng = Rng::new(31, 0);
    let n = 10_000;
    let mut sq = [0.0; 3];
    for _ in 0..n {
        let mut t = Tape::new();
        let m = t
            .constant(1, 3, dims.iter().map(|&d| mu[d]).collect())
            .unwrap();
        let l = t
            .constant(1, 3, dims.iter().map(|&d| lv[d]).collect())
            .unwrap();
        let eps = rng.normals(3);
        let z = vae
            .reparameterize(&mut t, Posterior { mu: m, logvar: l }, Some(&eps))
            .unwrap();
        for (k, &d) in dims.iter().enumerate() {
            sq[k] += (t.value(z)[k] - mu[d]).powi(2);
        }
    }
    for (k, &d) in dims.iter().enumerate() {
        let var = sq[k] / n as f64;
        let expect = lv[d].exp();
        assert!(
            (var / expect - 1.0).abs() < 0.05,
            "dim {d}: {var} vs {expect}"
        );
    }
}

#[test]
fn stage_renders_change_only_where_new_elements_paint() {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../fixtures/overfit/manifest.jsonl");
    let ex = load_examples(&read_manifest(&path).unwrap(), 128).unwrap();
    for e in &ex {
        let stages = build_stages(&e.doc, 4).unwrap();
        for w in stages.windows(2) {
            let (a, b) = (rasterize(&w[0], 128), rasterize(&w[1], 128));
            let added = Document::with_elements(128, w[1].elements[w[0].elements.len()..].to_vec());
            let mask = rasterize(&added, 128);
            let white = [1.0, 1.0, 1.0];
            for y in 0..128 {
                for x in 0..128 {
                    if a.get(x, y) != b.get(x, y) {
                        assert_ne!(
                            mask.get(x, y),
                            white,
                            "{} changed at ({x}, {y})",
                            e.path.display()
                        );
                    }
                }
            }
        }
    }
}

#[test]
fn manifest_paths_resolve_relative_to_manifest() {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../fixtures/overfit/manifest.jsonl");
    let entries = read_manifest(&path).unwrap();
    assert_eq!(entries.len(), 8);
    let ex = load_examples(&entries, 128).unwrap();
    assert!(ex.iter().all(|e| !e.doc.elements.is_empty()));
}
