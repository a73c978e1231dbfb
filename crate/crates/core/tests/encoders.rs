use std::io::Write;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use csen_core::checks::{tiny_batch, tiny_model_config};
use csen_core::encoders::{self, EmbeddingTable, SemanticMode};
use csen_core::gradcheck::{grad_check, GradCheckOptions};
use csen_core::model::{Batch, Model, ModelConfig};
use csen_core::nn::Graph;
use csen_core::ops::{self, Mode};
use csen_core::{Error, ParamSet, Tensor};

fn sub_batch(b: &Batch, idx: &[usize]) -> Batch {
    let per = b.images.numel() / b.len();
    let mut shape = b.images.shape().to_vec();
    shape[0] = idx.len();
    let data = idx.iter().flat_map(|&i| b.images.data()[i * per..(i + 1) * per].to_vec()).collect();
    Batch {
        images: Tensor::new(shape, data).unwrap(),
        keys: idx.iter().map(|&i| b.keys[i].clone()).collect(),
        labels: idx.iter().map(|&i| b.labels[i]).collect(),
        cameras: idx.iter().map(|&i| b.cameras[i]).collect(),
        viewpoints: idx.iter().map(|&i| b.viewpoints[i]).collect(),
    }
}

fn appearance(model: &Model, b: &Batch) -> Tensor {
    let mut g = Graph::new(&model.params, &model.buffers, Mode::Eval);
    let v = encoders::appearance_forward(&mut g, &model.config.appearance, &b.images).unwrap();
    g.value(v).clone()
}

fn semantic(model: &Model, b: &Batch, mode: Mode) -> Tensor {
    let mut g = Graph::new(&model.params, &model.buffers, mode);
    let c = &model.config;
    let v = encoders::semantic_forward(
        &mut g,
        &c.semantic,
        c.appearance.input_size,
        &b.images,
        &b.keys,
        model.embeddings.as_ref(),
    )
    .unwrap();
    g.value(v).clone()
}

fn tiny_model(seed: u64) -> Model {
    Model::new(tiny_model_config(), 4, seed).unwrap()
}

#[test]
fn appearance_shape_and_zero_images() {
    let model = tiny_model(1);
    let mut b = tiny_batch(&model.config, 2);
    let t = appearance(&model, &b);
    assert_eq!(t.shape(), &[8, model.config.appearance.d_a()]);
    b.images = Tensor::zeros(b.images.shape());
    assert!(appearance(&model, &b).data().iter().all(|&v| v == 0.0));
}

#[test]
fn wrong_spatial_size_is_rejected() {
    let model = tiny_model(1);
    let mut g = Graph::new(&model.params, &model.buffers, Mode::Eval);
    let err = encoders::appearance_forward(&mut g, &model.config.appearance, &Tensor::zeros(&[2, 3, 8, 8]));
    assert!(matches!(err, Err(Error::Shape { .. })), "{err:?}");
}

#[test]
fn encoders_are_batch_equivariant_in_eval_mode() {
    let model = tiny_model(5);
    let b = tiny_batch(&model.config, 6);
    let app = appearance(&model, &b);
    let sem = semantic(&model, &b, Mode::Eval);
    for i in 0..b.len() {
        let one = sub_batch(&b, &[i]);
        let a1 = appearance(&model, &one);
        let s1 = semantic(&model, &one, Mode::Eval);
        for (x, y) in a1.data().iter().zip(app.row(i)) {
            assert!((x - y).abs() <= 1e-6);
        }
        for (x, y) in s1.data().iter().zip(sem.row(i)) {
            assert!((x - y).abs() <= 1e-6);
        }
    }
}

#[test]
fn mini_vit_permutation_and_padding() {
    let model = tiny_model(7);
    let b = tiny_batch(&model.config, 8);
    // No batch statistics inside the transformer, so train mode must agree too.
    for mode in [Mode::Train, Mode::Eval] {
        let base = semantic(&model, &b, mode);
        let perm = [3, 0, 7, 1, 6, 2, 5, 4];
        let permuted = semantic(&model, &sub_batch(&b, &perm), mode);
        for (r, &src) in perm.iter().enumerate() {
            for (x, y) in permuted.row(r).iter().zip(base.row(src)) {
                assert!((x - y).abs() <= 1e-12);
            }
        }
        let first = sub_batch(&b, &[0, 1, 2]);
        let small = semantic(&model, &first, mode);
        for r in 0..3 {
            for (x, y) in small.row(r).iter().zip(base.row(r)) {
                assert!((x - y).abs() <= 1e-12);
            }
        }
    }
}

fn manifest_model(dir: &tempfile::TempDir, batch: &Batch, d_s: usize) -> (ModelConfig, std::path::PathBuf) {
    let path = dir.path().join("emb.jsonl");
    let mut f = std::fs::File::create(&path).unwrap();
    for (i, k) in batch.keys.iter().enumerate() {
        let v: Vec<f64> = (0..d_s).map(|j| (i * d_s + j) as f64 * 0.125 - 1.0).collect();
        writeln!(f, "{}", serde_json::json!({"key": k, "embedding": v})).unwrap();
    }
    let mut cfg = tiny_model_config();
    cfg.semantic.mode = SemanticMode::Manifest;
    cfg.semantic.manifest_path = Some(path.clone());
    (cfg, path)
}

#[test]
fn manifest_lookup_is_exact_and_constant() {
    let dir = tempfile::tempdir().unwrap();
    let cfg0 = tiny_model_config();
    let b = tiny_batch(&cfg0, 3);
    let d_s = cfg0.semantic.d_s;
    let (cfg, _) = manifest_model(&dir, &b, d_s);
    let model = Model::new(cfg, 4, 1).unwrap();
    let t = semantic(&model, &b, Mode::Train);
    for i in 0..b.len() {
        let expect: Vec<f64> = (0..d_s).map(|j| (i * d_s + j) as f64 * 0.125 - 1.0).collect();
        assert_eq!(t.row(i), &expect[..]);
    }
    assert!(model.params.names().all(|n| !n.starts_with("sem.")));
    let mut g = Graph::new(&model.params, &model.buffers, Mode::Train);
    let out = model.forward(&mut g, &b).unwrap();
    let t_s = out.features.t_s.unwrap();
    assert!(!g.tape.requires_grad(t_s));
}

#[test]
fn manifest_errors() {
    let dir = tempfile::tempdir().unwrap();
    let cfg0 = tiny_model_config();
    let b = tiny_batch(&cfg0, 3);
    let (cfg, path) = manifest_model(&dir, &b, cfg0.semantic.d_s);
    let model = Model::new(cfg.clone(), 4, 1).unwrap();
    let mut other = b.clone();
    other.keys[5] = "absent_key".into();
    let mut g = Graph::new(&model.params, &model.buffers, Mode::Eval);
    let err = model.forward(&mut g, &other).unwrap_err();
    assert!(err.to_string().contains("absent_key"), "{err}");

    let mut wrong = cfg;
    wrong.semantic.d_s = cfg0.semantic.d_s + 1;
    wrong.semantic.manifest_path = Some(path);
    assert!(matches!(Model::new(wrong, 4, 1), Err(Error::Shape { .. })));

    let dup = dir.path().join("dup.jsonl");
    std::fs::write(&dup, "{\"key\":\"a\",\"embedding\":[1]}\n{\"key\":\"a\",\"embedding\":[2]}\n").unwrap();
    let err = EmbeddingTable::load(&dup).unwrap_err().to_string();
    assert!(err.contains("`a`") && err.contains("lines 1 and 2"), "{err}");
}

#[test]
fn random_projection_is_frozen_and_deterministic() {
    let mut cfg = tiny_model_config();
    cfg.semantic.mode = SemanticMode::RandomProjection;
    let a = Model::new(cfg.clone(), 4, 1).unwrap();
    let b = Model::new(cfg, 4, 99).unwrap();
    assert!(a.buffers.contains("sem.projection"));
    assert!(a.params.names().all(|n| !n.starts_with("sem.")));
    let batch = tiny_batch(&a.config, 4);
    let x = semantic(&a, &batch, Mode::Train);
    assert_eq!(x, semantic(&a, &batch, Mode::Train));
    // The projection depends on its own seed, not on the model seed.
    assert_eq!(x, semantic(&b, &batch, Mode::Train));
}

#[test]
fn side_table_rows() {
    let model = tiny_model(2);
    let c = &model.config;
    let mut g = Graph::new(&model.params, &model.buffers, Mode::Train);
    let side = encoders::side_info_embed(&mut g, &c.side_info, c.d_f, &[0, 1, 1, 0], &[1, 0, 0, 1]).unwrap();
    assert!(g.value(side).data().iter().all(|&v| v == 0.0));

    let mut params = model.params.clone();
    let table = params.get_mut("side.table").unwrap();
    for (i, v) in table.data_mut().iter_mut().enumerate() {
        *v = i as f64;
    }
    let mut g = Graph::new(&params, &model.buffers, Mode::Train);
    let side = encoders::side_info_embed(&mut g, &c.side_info, c.d_f, &[0, 1, 1, 0], &[1, 0, 0, 1]).unwrap();
    let v = g.value(side);
    assert_eq!(v.row(1), v.row(2));
    assert_eq!(v.row(0), v.row(3));
    let d = c.d_f as f64;
    assert_eq!(v.row(0)[0], d);
    assert_eq!(v.row(1)[0], 2.0 * d);

    let mut g = Graph::new(&model.params, &model.buffers, Mode::Train);
    assert!(encoders::side_info_embed(&mut g, &c.side_info, c.d_f, &[2], &[0]).is_err());
}

#[test]
fn side_table_gradient_hits_only_looked_up_rows() {
    let model = tiny_model(2);
    let c = model.config.clone();
    let mut params = ParamSet::new();
    params.insert(
        "side.table",
        Tensor::randn(&[c.side_info.rows(), c.d_f], 1.0, &mut ChaCha8Rng::seed_from_u64(11)).into_param(),
    );
    let buffers = ParamSet::new();
    let cams = [1, 1, 0];
    let views = [0, 0, 0];
    let weights = Tensor::randn(&[c.d_f, 1], 1.0, &mut ChaCha8Rng::seed_from_u64(12));
    let objective = |p: &ParamSet, need: bool| {
        let mut g = Graph::new(p, &buffers, Mode::Train);
        let s = encoders::side_info_embed(&mut g, &c.side_info, c.d_f, &cams, &views)?;
        let w = g.constant(weights.clone());
        let y = ops::linear(&mut g.tape, s, w, None)?;
        let y = ops::reshape(&mut g.tape, y, vec![1, 3])?;
        let ones = g.constant(Tensor::full(&[3, 1], 1.0));
        let l = ops::linear(&mut g.tape, y, ones, None)?;
        let grads = if need { Some(g.tape.backward(l)?.into_params()) } else { None };
        Ok((g.tape.scalar(l), grads))
    };
    let report = grad_check(&params, &GradCheckOptions::default(), objective).unwrap();
    assert!(report.max_rel_error <= 1e-6, "{report:?}");
    let (_, grads) = objective(&params, true).unwrap();
    let g = &grads.unwrap()["side.table"];
    for row in 0..c.side_info.rows() {
        let used = match row {
            0 => 1.0,
            2 => 2.0,
            _ => 0.0,
        };
        for j in 0..c.d_f {
            assert_eq!(g[row * c.d_f + j], used * weights.data()[j]);
        }
    }
}
