mod common;

use std::collections::BTreeMap;

use mbseg::autodiff::{Graph, Tensor};
use mbseg::network::{
    batch_inputs, binarize, build_model, forward_graph, level_resolutions, model_forward, ModelConfig, Mode,
};
use mbseg::slicer::{extract_slices, SlicePlane};
use mbseg::volio::{generate_phantom, PhantomSpec};
use rand::Rng;

fn tiny() -> ModelConfig {
    ModelConfig {
        input_size: 64,
        stem_width: 4,
        width_multipliers: [1, 2, 2, 4, 4],
        bottleneck_expansion: 2,
        ..ModelConfig::default()
    }
}

fn random_inputs(cfg: &ModelConfig, n: usize, seed: u64) -> BTreeMap<String, Tensor<f32>> {
    let mut r = common::rng(seed);
    let s = cfg.input_size;
    cfg.modalities
        .iter()
        .map(|m| {
            let data = (0..n * s * s).map(|_| r.random_range(0.0..1.0)).collect();
            (m.clone(), Tensor::new(vec![n, 1, s, s], data).unwrap())
        })
        .collect()
}

#[test]
fn glorot_std_matches_formula() {
    // A 3x3 conv from 64 to 64 channels: std = sqrt(2 / 128) = 0.125.
    let cfg = ModelConfig {
        stem_width: 64,
        width_multipliers: [1, 1, 1, 1, 1],
        bottleneck_expansion: 1,
        ..ModelConfig::default()
    };
    let p = build_model(&cfg).unwrap();
    let w = p.store.get("enc.flair.s2.b0.c2.w").unwrap();
    assert_eq!(w.shape(), &[64, 64, 3, 3]);
    let n = w.len() as f64;
    let mean = w.data().iter().map(|&v| v as f64).sum::<f64>() / n;
    let std = (w.data().iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n).sqrt();
    assert!((std - 0.125).abs() < 0.125 * 0.05, "std {std}");
    assert!(p.store.get("msfu1.merge.b").unwrap().data().iter().all(|&b| b == 0.0));
    assert!(p.store.get("head.bn2.gamma").unwrap().data().iter().all(|&g| g == 1.0));
}

#[test]
fn build_is_deterministic_and_branches_are_distinct_draws() {
    let cfg = tiny();
    let a = build_model(&cfg).unwrap();
    let b = build_model(&cfg).unwrap();
    assert_eq!(a, b);
    assert_ne!(a.store.get("enc.flair.stem.w"), a.store.get("enc.t1.stem.w"));
    let c = build_model(&ModelConfig { seed: 1, ..cfg }).unwrap();
    assert_ne!(a.store.get("enc.flair.stem.w"), c.store.get("enc.flair.stem.w"));
}

#[test]
fn toy_resolution_chain_and_output() {
    let cfg = tiny();
    let p = build_model(&cfg).unwrap();
    let inputs = random_inputs(&cfg, 2, 3);
    let mut g = Graph::new();
    let ids = mbseg::network::branch_nodes(&mut g, &cfg, &inputs).unwrap();
    let pass = forward_graph(&mut g, &p, &ids, Mode::Eval).unwrap();
    for levels in &pass.levels {
        let res: Vec<usize> = levels.iter().map(|&l| g.value(l).shape()[2]).collect();
        assert_eq!(res, vec![32, 16, 8, 4, 2]);
    }
    let fused: Vec<usize> = pass.fused.iter().map(|&f| g.value(f).shape()[1]).collect();
    assert_eq!(fused, cfg.fused_widths().to_vec());
    let probs = g.value(pass.probs);
    assert_eq!(probs.shape(), &[2, 2, 64, 64]);
    let plane = 64 * 64;
    for b in 0..2 {
        for i in 0..plane {
            let s = probs.data()[b * 2 * plane + i] + probs.data()[(b * 2 + 1) * plane + i];
            assert!((s - 1.0).abs() < 1e-6);
        }
    }
}

#[test]
fn odd_input_size_has_clean_chain() {
    assert_eq!(level_resolutions(218), [109, 54, 27, 14, 7]);
    let cfg = ModelConfig {
        input_size: 50,
        ..tiny()
    };
    cfg.validate().unwrap();
    let p = build_model(&cfg).unwrap();
    let out = model_forward(&p, &random_inputs(&cfg, 1, 9)).unwrap();
    assert_eq!(out.shape(), &[1, 2, 50, 50]);
}

#[test]
fn modality_binding_is_by_name() {
    let cfg = tiny();
    let p = build_model(&cfg).unwrap();
    let inputs = random_inputs(&cfg, 1, 4);
    let a = model_forward(&p, &inputs).unwrap();
    // Rebuild the map in reverse insertion order.
    let mut rev = BTreeMap::new();
    for (k, v) in inputs.iter().rev() {
        rev.insert(k.clone(), v.clone());
    }
    let b = model_forward(&p, &rev).unwrap();
    assert_eq!(a, b);
    let mut missing = inputs.clone();
    missing.remove("t2");
    assert!(model_forward(&p, &missing).is_err());
}

#[test]
fn zero_input_gives_constant_interior() {
    let cfg = tiny();
    let p = build_model(&cfg).unwrap();
    let zeros: BTreeMap<String, Tensor<f32>> = cfg
        .modalities
        .iter()
        .map(|m| (m.clone(), Tensor::zeros(&[1, 1, 64, 64])))
        .collect();
    let out = model_forward(&p, &zeros).unwrap();
    assert!(out.data().iter().all(|v| v.is_finite()));
    // At initialization all biases and BN shifts are zero and the stems have
    // no bias, so a zero input stays zero through every layer and the logits
    // are equal everywhere.
    let lesion = &out.data()[64 * 64..];
    assert!(lesion.iter().all(|&v| v == lesion[0]));
    assert!((lesion[0] - 0.5).abs() < 1e-6);
}

#[test]
fn mutating_one_branch_leaves_others_untouched() {
    let cfg = tiny();
    let p = build_model(&cfg).unwrap();
    let inputs = random_inputs(&cfg, 1, 5);
    let run = |params: &mbseg::network::ModelParams<f32>| {
        let mut g = Graph::new();
        let ids = mbseg::network::branch_nodes(&mut g, &cfg, &inputs).unwrap();
        let pass = forward_graph(&mut g, params, &ids, Mode::Eval).unwrap();
        pass.levels.iter().map(|l| g.value(l[4]).clone()).collect::<Vec<_>>()
    };
    let before = run(&p);
    let mut q = p.clone();
    for v in q.store.get_mut("enc.t1.s3.b0.c2.w").unwrap().data_mut() {
        *v *= -3.0;
    }
    let after = run(&q);
    assert_eq!(before[0], after[0]);
    assert_ne!(before[1], after[1]);
    assert_eq!(before[2], after[2]);
}

#[test]
fn every_parameter_receives_gradient() {
    let cfg = tiny();
    let p = build_model(&cfg).unwrap();
    let case = generate_phantom(&PhantomSpec {
        seed: 11,
        ..PhantomSpec::default()
    })
    .unwrap();
    let samples = extract_slices(&case, SlicePlane::Axial, 64).unwrap();
    let batch: Vec<_> = samples.iter().filter(|s| s.has_lesion()).take(3).collect();
    assert!(!batch.is_empty());
    let xs = batch_inputs::<f32>(&cfg, &batch).unwrap();
    let mut target = Vec::new();
    for s in &batch {
        target.extend(s.target.as_ref().unwrap().iter().map(|&v| v as f32));
    }
    let mut g = Graph::new();
    let ids: Vec<_> = xs.into_iter().map(|t| g.constant(t)).collect();
    let pass = forward_graph(&mut g, &p, &ids, Mode::Train).unwrap();
    let lesion = g.select_channel(pass.probs, 1).unwrap();
    let t = Tensor::new(vec![batch.len(), 1, 64, 64], target).unwrap();
    let loss = g.dice_loss(lesion, t).unwrap();
    g.backward(loss).unwrap();
    let grads = pass.gradients(&g);
    for (e, gr) in p.store.entries().iter().zip(&grads) {
        if e.trainable {
            let gr = gr.as_ref().unwrap_or_else(|| panic!("{} unused", e.name));
            assert!(gr.norm() > 0.0, "{} has zero gradient", e.name);
        } else {
            assert!(gr.is_none() || gr.as_ref().unwrap().norm() == 0.0);
        }
    }
}

#[test]
fn stacked_variant_has_one_multichannel_stem() {
    let cfg = ModelConfig {
        stacked: true,
        ..tiny()
    };
    let p = build_model(&cfg).unwrap();
    assert_eq!(p.store.get("enc.stacked.stem.w").unwrap().shape(), &[4, 3, 7, 7]);
    assert!(p.store.get("enc.flair.stem.w").is_none());
    let out = model_forward(&p, &random_inputs(&cfg, 1, 2)).unwrap();
    assert_eq!(out.shape(), &[1, 2, 64, 64]);

    let single = ModelConfig {
        modalities: vec!["t1".into()],
        ..tiny()
    };
    let p = build_model(&single).unwrap();
    // One branch: MMFF output is half the level width.
    assert_eq!(single.fused_widths(), single.level_widths().map(|w| w / 2));
    let out = model_forward(&p, &random_inputs(&single, 1, 2)).unwrap();
    assert_eq!(out.shape(), &[1, 2, 64, 64]);
}

#[test]
fn binarize_matches_elementwise_scan() {
    let mut r = common::rng(8);
    let probs: Vec<f32> = (0..500).map(|_| r.random_range(0.0..1.0)).collect();
    let b = binarize(&probs, 0.5);
    for (p, v) in probs.iter().zip(&b) {
        assert_eq!(*v == 1, *p > 0.5);
    }
}
