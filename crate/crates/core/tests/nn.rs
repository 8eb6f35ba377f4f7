mod common;

use common::{check_layer, close, lively_captioner, random_pairs, random_tensor, token_batch, TinyNet, H};
use privcap_core::captioner::{caption_loss, CaptionPair, Captioner, CaptionerConfig};
use privcap_core::nn::{
    batch_loss_and_grad, checkpoint, gelu, gelu_backward, loss_and_grad, per_sample_grads, softmax_cross_entropy,
    Attention, Embedding, Gradients, LayerNorm, Linear, Model, ParamStore, Precision, Tensor,
};
use privcap_core::rng::{Purpose, Stream};
use privcap_core::Error;

#[test]
fn linear_gradients_match_finite_differences() {
    let mut rng = Stream::new(1, Purpose::Other(0), 0);
    let mut store = ParamStore::new();
    let lin = Linear::new(&mut store, "lin", 5, 4, true, &mut rng);
    for v in store.values_mut() {
        *v = random_tensor(v.shape(), &mut rng);
    }
    let x = random_tensor(&[3, 5], &mut rng);
    let n = check_layer(
        &mut store,
        &x,
        &|s, x| lin.forward(s, x, Precision::Double).unwrap(),
        &|s, x, g, sink| lin.backward(s, x, g, Precision::Double, sink).unwrap(),
        &mut rng,
    );
    assert_eq!(n, 5 * 4 + 4 + 15);
}

#[test]
fn layernorm_gradients_match_finite_differences() {
    let mut rng = Stream::new(2, Purpose::Other(0), 0);
    let mut store = ParamStore::new();
    let ln = LayerNorm::new(&mut store, "ln", 6);
    for v in store.values_mut() {
        *v = random_tensor(v.shape(), &mut rng);
    }
    let x = random_tensor(&[4, 6], &mut rng);
    check_layer(
        &mut store,
        &x,
        &|s, x| ln.forward(s, x, Precision::Double).unwrap().0,
        &|s, x, g, sink| {
            let (_, cache) = ln.forward(s, x, Precision::Double).unwrap();
            ln.backward(s, &cache, g, sink).unwrap()
        },
        &mut rng,
    );
}

#[test]
fn gelu_gradient_matches_finite_differences() {
    let mut rng = Stream::new(3, Purpose::Other(0), 0);
    let mut store = ParamStore::new();
    let x = random_tensor(&[3, 7], &mut rng).map(|v| 2.0 * v);
    check_layer(
        &mut store,
        &x,
        &|_, x| gelu(x, Precision::Double),
        &|_, x, g, _| gelu_backward(x, g),
        &mut rng,
    );
}

#[test]
fn attention_gradients_match_finite_differences() {
    for causal in [true, false] {
        let mut rng = Stream::new(4, Purpose::Other(0), causal as u64);
        let mut store = ParamStore::new();
        let attn = Attention::new(&mut store, "attn", 6, 2, causal, &mut rng).unwrap();
        for v in store.values_mut() {
            *v = random_tensor(v.shape(), &mut rng).map(|x| 0.7 * x);
        }
        let x = random_tensor(&[4, 6], &mut rng);
        check_layer(
            &mut store,
            &x,
            &|s, x| attn.forward(s, x, None, Precision::Double).unwrap().0,
            &|s, x, g, sink| {
                let (_, cache) = attn.forward(s, x, None, Precision::Double).unwrap();
                attn.backward(s, &cache, g, Precision::Double, sink).unwrap().0
            },
            &mut rng,
        );
    }
}

#[test]
fn cross_attention_gradients_match_finite_differences() {
    let mut rng = Stream::new(5, Purpose::Other(0), 0);
    let mut store = ParamStore::new();
    let attn = Attention::new(&mut store, "cross", 6, 3, false, &mut rng).unwrap();
    for v in store.values_mut() {
        *v = random_tensor(v.shape(), &mut rng).map(|x| 0.7 * x);
    }
    let x = random_tensor(&[3, 6], &mut rng);
    let ctx = random_tensor(&[5, 6], &mut rng);
    // gradient w.r.t. the query input
    check_layer(
        &mut store,
        &x,
        &|s, x| attn.forward(s, x, Some(&ctx), Precision::Double).unwrap().0,
        &|s, x, g, sink| {
            let (_, cache) = attn.forward(s, x, Some(&ctx), Precision::Double).unwrap();
            attn.backward(s, &cache, g, Precision::Double, sink).unwrap().0
        },
        &mut rng,
    );
    // gradient w.r.t. the context
    check_layer(
        &mut store,
        &ctx,
        &|s, c| attn.forward(s, &x, Some(c), Precision::Double).unwrap().0,
        &|s, c, g, sink| {
            let (_, cache) = attn.forward(s, &x, Some(c), Precision::Double).unwrap();
            attn.backward(s, &cache, g, Precision::Double, sink).unwrap().1.unwrap()
        },
        &mut rng,
    );
}

#[test]
fn embedding_gradient_matches_finite_differences() {
    let mut rng = Stream::new(6, Purpose::Other(0), 0);
    let mut store = ParamStore::new();
    let emb = Embedding::new(&mut store, "emb", 5, 3, &mut rng);
    let ids = [1usize, 4, 1, 0];
    let dummy = Tensor::zeros(&[0, 1]);
    check_layer(
        &mut store,
        &dummy,
        &|s, _| emb.forward(s, &ids).unwrap(),
        &|_, _, g, sink| {
            emb.backward(&ids, g, sink);
            Tensor::zeros(&[0, 1])
        },
        &mut rng,
    );
}

#[test]
fn softmax_cross_entropy_gradient_matches_finite_differences() {
    let mut rng = Stream::new(7, Purpose::Other(0), 0);
    let logits = random_tensor(&[3, 5], &mut rng);
    let targets = [4usize, 0, 2];
    let (_, grad) = softmax_cross_entropy(&logits, &targets, 1.0).unwrap();
    let mut lp = logits.clone();
    for j in 0..logits.len() {
        let o = logits.data()[j];
        lp.data_mut()[j] = o + H;
        let a = softmax_cross_entropy(&lp, &targets, 1.0).unwrap().0;
        lp.data_mut()[j] = o - H;
        let b = softmax_cross_entropy(&lp, &targets, 1.0).unwrap().0;
        lp.data_mut()[j] = o;
        assert!(close((a - b) / (2.0 * H), grad.data()[j]));
    }
}

#[test]
fn caption_loss_gradients_match_finite_differences() {
    let cfg = CaptionerConfig::tiny(7);
    let mut model = lively_captioner(cfg, 11);
    let pair = &random_pairs(&cfg, 1, 12)[0];
    let (_, g) = loss_and_grad(&model, pair, Precision::Double).unwrap();
    let mut checked = 0;
    for id in model.params().ids().collect::<Vec<_>>() {
        for j in 0..model.params().get(id).len() {
            let orig = model.params().get(id).data()[j];
            model.params_mut().get_mut(id).data_mut()[j] = orig + H;
            let lp = caption_loss(&model, pair).unwrap();
            model.params_mut().get_mut(id).data_mut()[j] = orig - H;
            let lm = caption_loss(&model, pair).unwrap();
            model.params_mut().get_mut(id).data_mut()[j] = orig;
            let fd = (lp - lm) / (2.0 * H);
            let an = g.get(id).data()[j];
            assert!(close(fd, an), "{}[{j}]: fd {fd} vs analytic {an}", model.params().name(id));
            checked += 1;
        }
    }
    assert_eq!(checked, model.params().num_elements());
}

#[test]
fn zero_weight_linear_outputs_zero() {
    let mut store = ParamStore::new();
    let mut rng = Stream::new(0, Purpose::Init, 0);
    let lin = Linear::new(&mut store, "l", 3, 2, true, &mut rng);
    *store.get_mut(lin.weight) = Tensor::zeros(&[3, 2]);
    let x = Tensor::from_vec(&[2, 3], vec![1.0, -4.0, 9.0, 0.5, 2.0, 3.0]).unwrap();
    let y = lin.forward(&store, &x, Precision::Double).unwrap();
    assert!(y.data().iter().all(|&v| v == 0.0));
}

#[test]
fn default_layernorm_keeps_standardized_input() {
    let mut store = ParamStore::new();
    let ln = LayerNorm::new(&mut store, "ln", 4);
    let x = Tensor::from_vec(&[1, 4], vec![1.0, -1.0, 1.0, -1.0]).unwrap();
    let (y, _) = ln.forward(&store, &x, Precision::Double).unwrap();
    for (a, b) in y.data().iter().zip(x.data()) {
        assert!((a - b).abs() < 1e-5);
    }
}

#[test]
fn two_layer_net_matches_naive_reference() {
    let mut rng = Stream::new(9, Purpose::Other(0), 0);
    let mut store = ParamStore::new();
    let l1 = Linear::new(&mut store, "l1", 4, 6, true, &mut rng);
    let l2 = Linear::new(&mut store, "l2", 6, 3, true, &mut rng);
    for v in store.values_mut() {
        *v = random_tensor(v.shape(), &mut rng);
    }
    let x = random_tensor(&[5, 4], &mut rng);
    let h = gelu(&l1.forward(&store, &x, Precision::Double).unwrap(), Precision::Double);
    let y = l2.forward(&store, &h, Precision::Double).unwrap();

    let naive_linear = |x: &[Vec<f64>], w: &Tensor, b: &Tensor| -> Vec<Vec<f64>> {
        let (din, dout) = (w.shape()[0], w.shape()[1]);
        x.iter()
            .map(|row| {
                (0..dout)
                    .map(|o| b.data()[o] + (0..din).map(|i| row[i] * w.data()[i * dout + o]).sum::<f64>())
                    .collect()
            })
            .collect()
    };
    let rows: Vec<Vec<f64>> = (0..5).map(|i| x.row(i).to_vec()).collect();
    let h_ref: Vec<Vec<f64>> = naive_linear(&rows, store.get(l1.weight), store.get(l1.bias.unwrap()))
        .into_iter()
        .map(|r| {
            r.into_iter()
                .map(|v| 0.5 * v * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (v + 0.044715 * v.powi(3))).tanh()))
                .collect()
        })
        .collect();
    let y_ref = naive_linear(&h_ref, store.get(l2.weight), store.get(l2.bias.unwrap()));
    for i in 0..5 {
        for j in 0..3 {
            assert!((y.row(i)[j] - y_ref[i][j]).abs() < 1e-12);
        }
    }
}

#[test]
fn gradient_of_w_times_x() {
    let mut store = ParamStore::new();
    let mut rng = Stream::new(0, Purpose::Init, 0);
    let lin = Linear::new(&mut store, "w", 1, 1, false, &mut rng);
    let x = Tensor::from_vec(&[1, 1], vec![3.0]).unwrap();
    let mut g = Gradients::zeros_like(&store);
    lin.backward(&store, &x, &Tensor::filled(&[1, 1], 1.0), Precision::Double, &mut g)
        .unwrap();
    assert_eq!(g.get(lin.weight).data(), &[3.0]);
}

#[test]
fn doubling_the_loss_doubles_gradients() {
    let cfg = CaptionerConfig::tiny(9);
    let model = Captioner::new(cfg, 3).unwrap();
    let pair = &random_pairs(&cfg, 1, 4)[0];
    let (_, cache) = model.forward(pair, Precision::Double).unwrap();
    let mut g1 = Gradients::zeros_like(model.params());
    let mut g2 = Gradients::zeros_like(model.params());
    model.backward(pair, &cache, 1.0, Precision::Double, &mut g1).unwrap();
    model.backward(pair, &cache, 2.0, Precision::Double, &mut g2).unwrap();
    for (a, b) in g1.iter_values().zip(g2.iter_values()) {
        assert_eq!(2.0 * a, b);
    }
}

#[test]
fn per_sample_gradients_sum_to_batch_gradient() {
    let cfg = CaptionerConfig::default();
    let model = Captioner::new(cfg, 5).unwrap();
    let batch = random_pairs(&cfg, 8, 6);
    let per = per_sample_grads(&model, &batch, Precision::Double).unwrap();
    let (_, total) = batch_loss_and_grad(&model, &batch, Precision::Double).unwrap();
    let mut sum = Gradients::zeros_like(model.params());
    for g in &per {
        sum.add_assign(g);
    }
    assert!(sum.rel_max_diff(&total, 1e-300) < 1e-10);

    let one = per_sample_grads(&model, &batch[..1], Precision::Double).unwrap();
    let (_, single) = batch_loss_and_grad(&model, &batch[..1], Precision::Double).unwrap();
    assert_eq!(one[0], single);
}

#[test]
fn identical_examples_have_identical_gradients() {
    let net = TinyNet::new(6, 4, 5, 2);
    let ex = token_batch(6, 5, 1, 3).remove(0);
    let batch = vec![ex.clone(), ex];
    let per = per_sample_grads(&net, &batch, Precision::Double).unwrap();
    assert_eq!(per[0], per[1]);
    let (_, total) = batch_loss_and_grad(&net, &batch, Precision::Double).unwrap();
    let mut twice = per[0].clone();
    twice.scale(2.0);
    assert!(twice.rel_max_diff(&total, 1e-300) < 1e-15);
}

#[test]
fn same_seed_is_bit_identical() {
    let cfg = CaptionerConfig::default();
    let a = Captioner::new(cfg, 17).unwrap();
    let b = Captioner::new(cfg, 17).unwrap();
    assert_eq!(a.params(), b.params());
    let pair = &random_pairs(&cfg, 1, 1)[0];
    let (la, ga) = loss_and_grad(&a, pair, Precision::Double).unwrap();
    let (lb, gb) = loss_and_grad(&b, pair, Precision::Double).unwrap();
    assert_eq!(la.to_bits(), lb.to_bits());
    assert_eq!(ga, gb);
    assert_ne!(Captioner::new(cfg, 18).unwrap().params(), a.params());
}

#[test]
fn shape_and_token_errors() {
    let cfg = CaptionerConfig::tiny(5);
    let model = Captioner::new(cfg, 0).unwrap();
    let bad_image = CaptionPair {
        image: vec![0.0; 3],
        tokens: vec![0, 1],
    };
    assert!(matches!(model.forward(&bad_image, Precision::Double), Err(Error::Shape(_))));
    let bad_token = CaptionPair {
        image: vec![0.0; cfg.image_len()],
        tokens: vec![0, 5],
    };
    assert!(matches!(
        model.forward(&bad_token, Precision::Double),
        Err(Error::TokenOutOfRange { id: 5, vocab: 5 })
    ));
}

#[test]
fn checkpoint_round_trip_and_corruption() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    let cfg = CaptionerConfig::tiny(7);
    let a = Captioner::new(cfg, 1).unwrap();
    checkpoint::save(&path, a.params(), serde_json::to_value(cfg).unwrap()).unwrap();
    let mut b = Captioner::new(cfg, 2).unwrap();
    let meta = checkpoint::load_into(&path, b.params_mut()).unwrap();
    assert_eq!(a.params(), b.params());
    let back: CaptionerConfig = serde_json::from_value(meta).unwrap();
    assert_eq!(back, cfg);

    let mut other = Captioner::new(CaptionerConfig::tiny(8), 0).unwrap();
    assert!(matches!(checkpoint::load_into(&path, other.params_mut()), Err(Error::Format(_))));

    let mut bytes = std::fs::read(&path).unwrap();
    bytes[0] ^= 0xff;
    std::fs::write(&path, bytes).unwrap();
    assert!(matches!(checkpoint::load_into(&path, b.params_mut()), Err(Error::Format(_))));
}

#[test]
fn half_precision_rounds_activations() {
    let mut t = Tensor::from_vec(&[1, 3], vec![1.0 + 1e-6, 70000.0, 0.1]).unwrap();
    Precision::Half.apply(&mut t);
    assert_eq!(t.data()[0], 1.0);
    assert!(t.data()[1].is_infinite());
    assert!((t.data()[2] - 0.1).abs() < 1e-4 && t.data()[2] != 0.1);
}
