use ecgqa_autodiff::{Checkpoint, ParameterSet, Tape, Tensor};
use ecgqa_core::mapper::*;
use ecgqa_core::model::layers::Train;

fn tiny(variant: MapperVariant) -> MapperConfig {
    MapperConfig {
        variant,
        d_enc: 6,
        d_model: 8,
        k_e: 3,
        m_prefix: 2,
        heads: 2,
        layers: 1,
        mlp_layers: 2,
        mlp_hidden: 5,
        dropout: 0.5,
    }
}

fn run(params: &ParameterSet, cfg: &MapperConfig, e: &Tensor, batch: usize, train: Option<Train<'_>>) -> Tensor {
    let tape = Tape::new();
    let vars = params.to_vars(&tape);
    let x = tape.constant(e.clone());
    (*map_prefix(&vars, cfg, &x, batch, train).unwrap().value()).clone()
}

#[test]
fn parameter_counts_match_schema() {
    let attention = MapperConfig::default();
    assert_eq!(attention.param_count(), 143_232);
    for variant in MapperVariant::ALL {
        for cfg in [MapperConfig { variant, ..MapperConfig::default() }, tiny(variant)] {
            assert_eq!(init_mapper(&cfg, 3).unwrap().num_values(), cfg.param_count(), "{variant}");
        }
    }
}

#[test]
fn identity_linear_mapper_passes_features_through() {
    let cfg = MapperConfig {
        variant: MapperVariant::Linear,
        d_enc: 4,
        d_model: 4,
        k_e: 3,
        m_prefix: 3,
        ..MapperConfig::default()
    };
    let mut params = init_mapper(&cfg, 0).unwrap();
    params.set("mapper.proj.w", Tensor::from_fn(&[4, 4], |i| f64::from(u8::from(i / 4 == i % 4)))).unwrap();
    params.set("mapper.proj.b", Tensor::zeros(&[1, 4])).unwrap();
    params.set("mapper.pool", Tensor::from_fn(&[3, 3], |i| f64::from(u8::from(i / 3 == i % 3)))).unwrap();
    let e = Tensor::from_fn(&[6, 4], |i| i as f64 * 0.25 - 1.0);
    assert_eq!(run(&params, &cfg, &e, 2, None).data(), e.data());
}

#[test]
fn single_token_attention_returns_the_value_row() {
    let cfg = MapperConfig { k_e: 1, ..tiny(MapperVariant::Attention) };
    let params = init_mapper(&cfg, 5).unwrap();
    let tape = Tape::new();
    let vars = params.to_vars(&tape);
    let d = cfg.d_model;
    let context = Tensor::from_fn(&[1, d], |i| (i as f64 * 0.7).sin());
    let queries = Tensor::from_fn(&[cfg.m_prefix, d], |i| (i as f64 * 1.3).cos());
    let out = cross_attend(&vars, &cfg, 0, &tape.constant(queries), &tape.constant(context.clone()), 1).unwrap();

    // With one key, every softmax weight is 1: each output row is the value
    // projection of the layer-normalised context.
    let x = context.data();
    let mean = x.iter().sum::<f64>() / d as f64;
    let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
    let normed: Vec<f64> = x.iter().map(|v| (v - mean) / (var + 1e-5).sqrt()).collect();
    let w = params.tensor("mapper.layer0.kv.w").unwrap();
    let b = params.tensor("mapper.layer0.kv.b").unwrap();
    let value: Vec<f64> = (0..d).map(|j| b.at(0, d + j) + (0..d).map(|i| normed[i] * w.at(i, d + j)).sum::<f64>()).collect();
    let got = out.value();
    for r in 0..cfg.m_prefix {
        for j in 0..d {
            assert!((got.at(r, j) - value[j]).abs() < 1e-9);
        }
    }
}

#[test]
fn gradients_match_finite_differences() {
    for variant in MapperVariant::ALL {
        for seed in 0..5 {
            let err = gradcheck_mapper(&tiny(variant), 2, seed).unwrap();
            assert!(err < 1e-4, "{variant} seed {seed}: {err}");
        }
    }
}

#[test]
fn dropout_only_in_training() {
    for variant in [MapperVariant::Attention, MapperVariant::Mlp] {
        let cfg = tiny(variant);
        let params = init_mapper(&cfg, 1).unwrap();
        let e = Tensor::from_fn(&[cfg.k_e, cfg.d_enc], |i| (i as f64).sin());
        let a = run(&params, &cfg, &e, 1, None);
        assert_eq!(a, run(&params, &cfg, &e, 1, None));
        let train = Train { seed: 9, step: 0, rate: 0.5, scope: "t" };
        let b = run(&params, &cfg, &e, 1, Some(train));
        assert_ne!(a, b);
        assert_eq!(b, run(&params, &cfg, &e, 1, Some(train)));
    }
}

#[test]
fn batch_items_are_mapped_independently() {
    for variant in MapperVariant::ALL {
        let cfg = tiny(variant);
        let params = init_mapper(&cfg, 2).unwrap();
        let e = Tensor::from_fn(&[2 * cfg.k_e, cfg.d_enc], |i| (i as f64 * 0.37).sin());
        let both = run(&params, &cfg, &e, 2, None);
        let second = Tensor::new(&[cfg.k_e, cfg.d_enc], e.data()[cfg.k_e * cfg.d_enc..].to_vec()).unwrap();
        let alone = run(&params, &cfg, &second, 1, None);
        let tail = &both.data()[cfg.m_prefix * cfg.d_model..];
        assert!(tail.iter().zip(alone.data()).all(|(a, b)| (a - b).abs() < 1e-12), "{variant}");
    }
}

#[test]
fn rejects_wrong_feature_shape() {
    let cfg = tiny(MapperVariant::Linear);
    let params = init_mapper(&cfg, 0).unwrap();
    let tape = Tape::new();
    let vars = params.to_vars(&tape);
    let e = tape.constant(Tensor::zeros(&[cfg.k_e + 1, cfg.d_enc]));
    assert!(map_prefix(&vars, &cfg, &e, 1, None).is_err());
}

#[test]
fn checkpoint_checks_variant_and_schema() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("mapper.ckpt");
    let cfg = tiny(MapperVariant::Mlp);
    let params = init_mapper(&cfg, 4).unwrap();
    mapper_checkpoint(&params, &cfg, 4).save(&path).unwrap();
    let ckpt = Checkpoint::load(&path).unwrap();
    assert_eq!(load_mapper(&ckpt, &cfg).unwrap().digest(), params.digest());
    assert!(load_mapper(&ckpt, &tiny(MapperVariant::Linear)).is_err());
    assert!(load_mapper(&ckpt, &MapperConfig { mlp_hidden: 7, ..cfg }).is_err());
}

#[test]
fn config_validation() {
    assert!(init_mapper(&MapperConfig { heads: 3, ..MapperConfig::default() }, 0).is_err());
    assert!(init_mapper(&MapperConfig { dropout: 1.0, ..MapperConfig::default() }, 0).is_err());
    assert!("conv".parse::<MapperVariant>().is_err());
    assert_eq!("mlp".parse::<MapperVariant>().unwrap(), MapperVariant::Mlp);
}
