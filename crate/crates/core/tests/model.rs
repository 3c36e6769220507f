use std::collections::BTreeMap;

use adaptseg::adapters::{attach, param_report, PlacementSpec, Preset};
use adaptseg::autodiff::{CountFilter, Graph, Origin, Tensor};
use adaptseg::error::Error;
use adaptseg::mask::BinaryMask;
use adaptseg::model::{
    mask_logits, ClickPrompt, FourierFeatures, ModelConfig, SegModel, Segmenter, FOURIER_SEED,
};
use adaptseg::train::seg_loss;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_image(cfg: &ModelConfig, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = cfg.image_size * cfg.image_size * cfg.in_chans;
    Tensor::new(
        vec![cfg.image_size, cfg.image_size, cfg.in_chans],
        (0..n).map(|_| rng.gen::<f64>()).collect(),
    )
    .unwrap()
}

fn clicks() -> Vec<ClickPrompt> {
    vec![
        ClickPrompt::positive(12, 9),
        ClickPrompt::negative(3, 27),
        ClickPrompt::positive(20, 20),
    ]
}

fn zero_params(model: &mut SegModel, prefix: &str) {
    let reg = model.registry_mut();
    let ids: Vec<_> = reg
        .iter()
        .filter(|(_, e)| e.name.starts_with(prefix))
        .map(|(id, _)| id)
        .collect();
    assert!(!ids.is_empty(), "no parameter named {prefix}*");
    for id in ids {
        reg.tensor_mut(id).data_mut().fill(0.0);
    }
}

#[test]
fn patch_embed_shapes() {
    let cfg = ModelConfig {
        image_size: 32,
        patch_size: 4,
        embed_dim: 64,
        ..ModelConfig::default()
    };
    let model = SegModel::new(cfg.clone(), 0).unwrap();
    let mut g = Graph::new();
    let img = g.input(Tensor::zeros(&[32, 32, 1]));
    let tokens = model
        .encoder()
        .patch_embed(&mut g, model.registry(), img)
        .unwrap();
    assert_eq!(g.shape(tokens), &[8, 8, 64]);
}

#[test]
fn zero_image_and_projection_give_positional_embedding() {
    let cfg = ModelConfig::compact();
    let mut model = SegModel::new(cfg.clone(), 0).unwrap();
    zero_params(&mut model, "encoder.patch_embed");
    let reg = model.registry();
    let mut g = Graph::new();
    let img = g.input(Tensor::zeros(&[32, 32, 1]));
    let tokens = model.encoder().patch_embed(&mut g, reg, img).unwrap();
    let pos = reg.tensor(reg.id("encoder.pos_embed").unwrap());
    assert_eq!(g.value(tokens), pos.data());
}

#[test]
fn image_size_mismatch_is_error() {
    let model = SegModel::new(ModelConfig::compact(), 0).unwrap();
    let err = model
        .predict(&Tensor::zeros(&[16, 16, 1]), &clicks())
        .unwrap_err();
    assert!(matches!(err, Error::Shape { .. }), "{err}");
}

#[test]
fn window_equal_to_grid_matches_global_bit_for_bit() {
    // grid side 8: window 8 in every block vs every block global.
    let windowed = ModelConfig {
        window_size: 8,
        global_attn_every: 4,
        ..ModelConfig::compact()
    };
    let global = ModelConfig {
        window_size: 0,
        ..windowed.clone()
    };
    let a = SegModel::new(windowed.clone(), 4).unwrap();
    let b = SegModel::new(global, 4).unwrap();
    let img = random_image(&windowed, 1);
    assert_eq!(
        a.predict(&img, &clicks()).unwrap().prob_map,
        b.predict(&img, &clicks()).unwrap().prob_map
    );
}

#[test]
fn encoder_reports_every_block_output() {
    let cfg = ModelConfig {
        depth: 4,
        global_attn_every: 4,
        ..ModelConfig::compact()
    };
    let model = SegModel::new(cfg.clone(), 0).unwrap();
    let mut g = Graph::new();
    let out = model
        .forward(&mut g, &random_image(&cfg, 0), &clicks())
        .unwrap();
    assert_eq!(out.encoder.block_outputs.len(), 4);
    assert!((0..4)
        .map(|i| cfg.is_global_block(i))
        .eq([false, false, false, true]));
}

#[test]
fn single_token_grid_runs() {
    let cfg = ModelConfig {
        image_size: 4,
        patch_size: 4,
        embed_dim: 16,
        depth: 1,
        num_heads: 2,
        window_size: 0,
        global_attn_every: 1,
        decoder_dim: 16,
        mask_downscale: 1,
        ..ModelConfig::compact()
    };
    let model = SegModel::new(cfg.clone(), 0).unwrap();
    let p = model
        .predict(&random_image(&cfg, 0), &[ClickPrompt::positive(1, 1)])
        .unwrap();
    assert_eq!(p.prob_map.shape(), [4, 4]);
}

#[test]
fn prompt_label_difference_is_embedding_difference() {
    let model = SegModel::new(ModelConfig::compact(), 0).unwrap();
    let reg = model.registry();
    let mut g = Graph::new();
    let t = model
        .prompt_encoder()
        .encode(
            &mut g,
            reg,
            &[ClickPrompt::positive(5, 7), ClickPrompt::negative(5, 7)],
        )
        .unwrap();
    let d = model.config().decoder_dim;
    let v = g.value(t);
    let table = reg.tensor(reg.id("prompt.label_embed").unwrap()).data();
    for c in 0..d {
        let got = v[c] - v[d + c];
        let want = table[c] - table[d + c];
        assert!((got - want).abs() < 1e-12, "channel {c}: {got} vs {want}");
    }
}

#[test]
fn prompt_encoding_is_permutation_equivariant() {
    let model = SegModel::new(ModelConfig::compact(), 0).unwrap();
    let reg = model.registry();
    let c = clicks();
    let perm = [2, 0, 1];
    let permuted: Vec<_> = perm.iter().map(|&i| c[i]).collect();
    let mut g = Graph::new();
    let a = model.prompt_encoder().encode(&mut g, reg, &c).unwrap();
    let b = model
        .prompt_encoder()
        .encode(&mut g, reg, &permuted)
        .unwrap();
    let d = model.config().decoder_dim;
    for (row, &src) in perm.iter().enumerate() {
        assert_eq!(
            &g.value(b)[row * d..(row + 1) * d],
            &g.value(a)[src * d..(src + 1) * d]
        );
    }
}

#[test]
fn empty_prompt_is_error() {
    let model = SegModel::new(ModelConfig::compact(), 0).unwrap();
    assert!(model
        .predict(&random_image(model.config(), 0), &[])
        .is_err());
    assert!(model
        .predict(
            &random_image(model.config(), 0),
            &[ClickPrompt::positive(32, 0)]
        )
        .is_err());
}

#[test]
fn corner_encodings_differ() {
    let f = FourierFeatures::new(32, FOURIER_SEED);
    let size = 32.0;
    let a = f.encode(0.5 / size, 0.5 / size);
    let b = f.encode((size - 0.5) / size, (size - 0.5) / size);
    assert_eq!(a.len(), 32);
    assert!(a.iter().zip(&b).any(|(x, y)| (x - y).abs() > 1e-3));
}

#[test]
fn zero_mask_head_gives_half_probability() {
    let mut model = SegModel::new(ModelConfig::compact(), 0).unwrap();
    zero_params(&mut model, "decoder.hypernet.fc2");
    let p = model
        .predict(&random_image(model.config(), 3), &clicks())
        .unwrap();
    assert!(p.prob_map.data().iter().all(|&v| v == 0.5));
    assert!((0.0..=1.0).contains(&p.iou_estimate));
}

#[test]
fn mask_logits_are_bilinear() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let px: Vec<f64> = (0..6 * 4).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let mv: Vec<f64> = (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let mut g = Graph::new();
    let p1 = g.constant(&[6, 4], px.clone()).unwrap();
    let m1 = g.constant(&[1, 4], mv.clone()).unwrap();
    let p2 = g
        .constant(&[6, 4], px.iter().map(|v| v * 0.5).collect())
        .unwrap();
    let m2 = g
        .constant(&[1, 4], mv.iter().map(|v| v * 2.0).collect())
        .unwrap();
    let a = mask_logits(&mut g, p1, m1).unwrap();
    let b = mask_logits(&mut g, p2, m2).unwrap();
    assert_eq!(g.value(a), g.value(b));
}

#[test]
fn prediction_is_deterministic_and_well_shaped() {
    let model = SegModel::new(ModelConfig::compact(), 9).unwrap();
    let img = random_image(model.config(), 2);
    let a = model.predict(&img, &clicks()).unwrap();
    let b = model.predict(&img, &clicks()).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.prob_map.shape(), [32, 32]);
    assert_eq!(a.low_res_logits.shape(), [16, 16]);
    assert!(a.prob_map.data().iter().all(|v| (0.0..=1.0).contains(v)));
}

#[test]
fn zero_init_adapters_are_identity_for_every_spec() {
    let base = SegModel::new(ModelConfig::compact(), 5).unwrap();
    let img = random_image(base.config(), 6);
    let want = base.predict(&img, &clicks()).unwrap();
    let mut specs: Vec<PlacementSpec> = Preset::ALL.iter().map(|p| p.spec()).collect();
    specs.push(PlacementSpec {
        share_highway_weights: true,
        reduction_ratio: 8,
        ..Preset::GlmedSa.spec()
    });
    specs.push(PlacementSpec {
        mha_a: true,
        ..PlacementSpec::none()
    });
    for spec in specs {
        let mut m = base.clone();
        attach(&mut m, spec, 11).unwrap();
        assert_eq!(
            m.predict(&img, &clicks()).unwrap(),
            want,
            "{}",
            spec.variant_name()
        );
    }
}

#[test]
fn attaching_twice_is_rejected() {
    let mut m = SegModel::new(ModelConfig::compact(), 0).unwrap();
    attach(&mut m, Preset::MedSa.spec(), 0).unwrap();
    assert!(matches!(
        attach(&mut m, Preset::GmedSa.spec(), 0),
        Err(Error::AlreadyAttached)
    ));
}

#[test]
fn bad_reduction_ratio_is_rejected() {
    let mut m = SegModel::new(ModelConfig::compact(), 0).unwrap();
    let spec = PlacementSpec {
        reduction_ratio: 5,
        ..Preset::MedSa.spec()
    };
    assert!(attach(&mut m, spec, 0).is_err());
}

fn trainable_under_freeze(spec: PlacementSpec) -> usize {
    let mut m = SegModel::new(ModelConfig::default(), 0).unwrap();
    attach(&mut m, spec, 0).unwrap();
    m.registry_mut().apply_freeze_policy();
    m.registry().count(CountFilter::Trainable)
}

#[test]
fn trainable_counts_add_up() {
    let med = trainable_under_freeze(Preset::MedSa.spec());
    let gmed = trainable_under_freeze(Preset::GmedSa.spec());
    let glmed = trainable_under_freeze(Preset::GlmedSa.spec());
    let per_adapter = 64 * 16 + 16 + 16 * 64 + 64;
    assert_eq!(per_adapter, 2128);
    assert_eq!(med, 8 * 2 * per_adapter);
    assert_eq!(gmed, 8 * per_adapter);
    assert_eq!(glmed, med + gmed);
    assert_eq!(glmed, 51_072);
    assert_eq!(trainable_under_freeze(Preset::None.spec()), 0);

    let shared = trainable_under_freeze(PlacementSpec {
        share_highway_weights: true,
        ..Preset::GmedSa.spec()
    });
    assert_eq!(shared * 8, gmed);
}

#[test]
fn param_report_fraction() {
    let mut m = SegModel::new(ModelConfig::default(), 0).unwrap();
    let base_total = m.registry().count(CountFilter::All);
    attach(&mut m, Preset::GlmedSa.spec(), 0).unwrap();
    m.registry_mut().apply_freeze_policy();
    let r = param_report(m.registry(), &m.placement());
    assert_eq!(r.variant, "GLMED_SA");
    assert_eq!(r.total_params, base_total + 51_072);
    assert_eq!(r.adapter_params, 51_072);
    assert_eq!(r.trainable_fraction, 51_072.0 / r.total_params as f64);
    assert!(r.trainable_fraction < 0.10);
}

#[test]
fn frozen_base_gets_no_gradient_and_every_adapter_does() {
    let mut m = SegModel::new(ModelConfig::compact(), 1).unwrap();
    attach(&mut m, Preset::GlmedSa.spec(), 2).unwrap();
    m.registry_mut().apply_freeze_policy();
    let img = random_image(m.config(), 4);
    let gt = BinaryMask::from_fn(16, 16, |x, y| (4..11).contains(&x) && (3..12).contains(&y));
    let mut g = Graph::new();
    let out = m.forward(&mut g, &img, &clicks()).unwrap();
    let loss = seg_loss(&mut g, out.decoder.low_res_logits, &gt).unwrap();
    g.backward(loss.total).unwrap();

    let reg = m.registry();
    let mut per_adapter: BTreeMap<String, bool> = BTreeMap::new();
    for (id, e) in reg.iter() {
        if e.origin == Origin::Adapter {
            let adapter = e.name.rsplitn(3, '.').nth(2).unwrap().to_string();
            per_adapter.entry(adapter).or_insert(false);
        }
        let _ = id;
    }
    for (id, grad) in g.param_grads() {
        let e = reg.entry(id);
        assert_eq!(
            e.origin,
            Origin::Adapter,
            "base parameter {} received a gradient",
            e.name
        );
        if grad.iter().any(|&v| v != 0.0) {
            let adapter = e.name.rsplitn(3, '.').nth(2).unwrap().to_string();
            per_adapter.insert(adapter, true);
        }
    }
    assert_eq!(per_adapter.len(), 4 * 3);
    for (name, moved) in per_adapter {
        assert!(moved, "adapter {name} has an all-zero gradient");
    }
}
