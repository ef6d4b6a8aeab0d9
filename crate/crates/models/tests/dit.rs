use proptest::prelude::*;
use vexel_models::dit::{draw_noise, timestep_embedding};
use vexel_models::*;
use vexel_nn::{load_checkpoint, save_checkpoint, Fault, OpKind, ParamStore, Rng};

fn tiny() -> DitConfig {
    DitConfig::preset("tiny").unwrap()
}

fn randomize(store: &mut ParamStore, seed: u64, std: f64) {
    let mut rng = Rng::new(seed, 0);
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        for v in store.get_mut(id).data_mut() {
            *v += std * rng.normal();
        }
    }
}

fn latent(cfg: &DitConfig, seed: u64) -> Vec<f64> {
    Rng::new(seed, 1).normals(cfg.seq_len * cfg.d_z)
}

#[test]
fn schedule_is_variance_preserving() {
    let s = NoiseSchedule::linear(1000, 1e-4, 0.02);
    assert_eq!(s.len(), 1000);
    for t in 0..1000 {
        assert!((s.alpha[t].powi(2) + s.sigma[t].powi(2) - 1.0).abs() < 1e-12);
    }
    assert!(s.alpha_bar.windows(2).all(|w| w[1] < w[0]));
    assert!((s.alpha_bar[0] - (1.0 - 1e-4)).abs() < 1e-15);
    assert!(s.alpha_bar[999] < 1e-4);
}

#[test]
fn q_sample_without_noise_scales_the_latent() {
    let s = NoiseSchedule::linear(1000, 1e-4, 0.02);
    let z = vec![1.0, -2.0, 0.5];
    let zt = q_sample(&z, 0, &[0.0; 3], &s);
    for (a, b) in zt.iter().zip(&z) {
        assert!((a - s.alpha[0] * b).abs() < 1e-15);
    }
    let eps = vec![0.3, 0.1, -0.7];
    let last = q_sample(&z, 999, &eps, &s);
    let dist: f64 = last
        .iter()
        .zip(&eps)
        .map(|(a, e)| (a - e).powi(2))
        .sum::<f64>()
        .sqrt();
    assert!(dist < 0.02);
}

#[test]
fn timestep_embedding_at_zero() {
    let e = timestep_embedding(0, 8);
    assert_eq!(e, vec![1.0, 1.0, 1.0, 1.0, 0.0, 0.0, 0.0, 0.0]);
}

proptest! {
    #[test]
    fn guidance_identities(
        pairs in prop::collection::vec((-5.0f64..5.0, -5.0f64..5.0), 1..16),
        w in -2.0f64..8.0,
    ) {
        let (c, u): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
        prop_assert_eq!(cfg_noise(&c, &u, 0.0), u.clone());
        prop_assert_eq!(cfg_noise(&c, &u, 1.0), c.clone());
        let g = cfg_noise(&c, &u, w);
        for i in 0..c.len() {
            prop_assert!((g[i] - (u[i] + w * (c[i] - u[i]))).abs() < 1e-9);
        }
    }
}

#[test]
fn condition_dropout_rate() {
    let mut rng = Rng::new(2024, 0);
    let dropped = (0..10_000)
        .filter(|_| draw_noise(&mut rng, 4, 1000, 0.1).drop_text)
        .count();
    let rate = dropped as f64 / 10_000.0;
    assert!((0.09..=0.11).contains(&rate), "{rate}");
}

#[test]
fn gated_sublayers_are_inert_at_initialization() {
    let cfg = tiny();
    let mut dit = VsDit::new(cfg.clone(), 1).unwrap();
    let out_w = dit.store.id("dit.final.out.weight").unwrap();
    let ada = dit.store.id("dit.final.ada.weight").unwrap();
    for id in [out_w, ada] {
        let mut rng = Rng::new(id.index() as u64, 3);
        for v in dit.store.get_mut(id).data_mut() {
            *v = 0.1 * rng.normal();
        }
    }
    let z = latent(&cfg, 1);
    let text = dit.text_embedding("circle-class");
    let base = dit.predict_noise(&z, 500, &text).unwrap();
    assert!(base.iter().any(|v| *v != 0.0));
    let gated: Vec<_> = dit
        .store
        .names()
        .iter()
        .enumerate()
        .filter(|(_, n)| n.contains(".attn.") || n.contains(".ff."))
        .map(|(i, _)| i)
        .collect();
    assert!(!gated.is_empty());
    let ids: Vec<_> = dit
        .store
        .ids()
        .filter(|id| gated.contains(&id.index()))
        .collect();
    let mut rng = Rng::new(77, 0);
    for id in ids {
        for v in dit.store.get_mut(id).data_mut() {
            *v += rng.normal();
        }
    }
    assert_eq!(dit.predict_noise(&z, 500, &text).unwrap(), base);
}

#[test]
fn prediction_depends_on_time_and_text() {
    let cfg = tiny();
    let mut dit = VsDit::new(cfg.clone(), 2).unwrap();
    randomize(&mut dit.store, 9, 0.3);
    let z = latent(&cfg, 2);
    let a = dit.text_embedding("circle-class");
    let b = dit.text_embedding("path-class");
    let base = dit.predict_noise(&z, 100, &a).unwrap();
    assert_ne!(dit.predict_noise(&z, 700, &a).unwrap(), base);
    assert_ne!(dit.predict_noise(&z, 100, &b).unwrap(), base);
}

#[test]
fn ddim_call_audit() {
    let cfg = tiny();
    let mut dit = VsDit::new(cfg.clone(), 3).unwrap();
    randomize(&mut dit.store, 4, 0.1);
    let text = dit.text_embedding("path-class");
    let (_, t1) = dit.ddim_sample(&text, 10, 1.0, 0).unwrap();
    assert_eq!(
        t1,
        SampleTrace {
            cond_calls: 10,
            uncond_calls: 0
        }
    );
    let (_, t4) = dit.ddim_sample(&text, 10, 4.0, 0).unwrap();
    assert_eq!(
        t4,
        SampleTrace {
            cond_calls: 10,
            uncond_calls: 10
        }
    );
    assert!(dit.ddim_sample(&text, 0, 1.0, 0).is_err());
    assert!(dit.ddim_sample(&text, cfg.t_diff + 1, 1.0, 0).is_err());
}

#[test]
fn ddim_is_seed_deterministic() {
    let cfg = tiny();
    let mut dit = VsDit::new(cfg, 3).unwrap();
    randomize(&mut dit.store, 4, 0.1);
    let text = dit.text_embedding("circle-class");
    let (a, _) = dit.ddim_sample(&text, 8, 4.0, 5).unwrap();
    let (b, _) = dit.ddim_sample(&text, 8, 4.0, 5).unwrap();
    let (c, _) = dit.ddim_sample(&text, 8, 4.0, 6).unwrap();
    assert_eq!(a, b);
    assert_ne!(a, c);
}

#[test]
fn ddim_with_exact_noise_oracle_recovers_the_latent() {
    // With ε̂ equal to the true noise of a fixed z0, each step lands on the
    // same forward trajectory and the final step returns z0.
    let s = NoiseSchedule::linear(1000, 1e-4, 0.02);
    let z0 = vec![0.7, -1.2, 0.1];
    let eps = vec![0.4, 0.9, -1.5];
    let ts: Vec<usize> = (0..50).map(|i| i * 1000 / 50).collect();
    let mut z = q_sample(&z0, ts[49], &eps, &s);
    for k in (0..50).rev() {
        let t = ts[k];
        let (ap, sp) = if k == 0 {
            (1.0, 0.0)
        } else {
            (s.alpha[ts[k - 1]], s.sigma[ts[k - 1]])
        };
        for i in 0..3 {
            let x0 = (z[i] - s.sigma[t] * eps[i]) / s.alpha[t];
            z[i] = ap * x0 + sp * eps[i];
        }
    }
    for (a, b) in z.iter().zip(&z0) {
        assert!((a - b).abs() < 1e-9);
    }
}

#[test]
fn checkpoint_round_trip_and_compatibility() {
    let cfg = tiny();
    let mut dit = VsDit::new(cfg.clone(), 5).unwrap();
    randomize(&mut dit.store, 1, 0.1);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("dit.vxc");
    save_checkpoint(&path, &dit.to_checkpoint()).unwrap();
    let back = VsDit::from_checkpoint(&load_checkpoint(&path).unwrap()).unwrap();
    assert_eq!(back.cfg, dit.cfg);
    assert!(VpVae::from_checkpoint(&load_checkpoint(&path).unwrap()).is_err());

    let vae = VpVae::new(VaeConfig::tiny(), 0).unwrap();
    check_compatible(&vae, &dit).unwrap();
    let mut other = cfg;
    other.d_z = 4;
    let mismatched = VsDit::new(other, 0).unwrap();
    assert!(matches!(
        check_compatible(&vae, &mismatched),
        Err(ModelError::IncompatibleCheckpoints(_))
    ));
    assert!(text_to_svg("circle-class", &vae, &mismatched, 1.0, 2, 0).is_err());
}

#[test]
fn text_to_svg_is_total_on_untrained_models() {
    let vae = VpVae::new(VaeConfig::tiny(), 0).unwrap();
    let dit = VsDit::new(tiny(), 0).unwrap();
    let a = text_to_svg("anything", &vae, &dit, 4.0, 4, 1).unwrap();
    let b = text_to_svg("anything", &vae, &dit, 4.0, 4, 1).unwrap();
    assert_eq!(a, b);
}

#[test]
fn meta_count_matches_allocated_store() {
    let cfg = tiny();
    let real = VsDit::new(cfg.clone(), 0).unwrap();
    let meta = VsDit::meta(cfg).unwrap();
    assert_eq!(real.store.count(), meta.store.count());
    assert_eq!(real.store.names(), meta.store.names());
    assert!(meta.store.is_meta());
}

#[test]
fn full_tiny_loss_passes_gradient_check() {
    let r = checks::dit_gradcheck(tiny(), 6, None).unwrap();
    assert!(r.max_rel_error < 1e-4, "{r:?}");
    let mutant = Fault {
        op: OpKind::LayerNorm,
        factor: 1.5,
    };
    let r = checks::dit_gradcheck(tiny(), 6, Some(mutant)).unwrap();
    assert!(r.max_rel_error > 1e-2, "{r:?}");
}
