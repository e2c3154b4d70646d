use cdformer_core::model::{CdformerModel, DrsnBlock, ModelConfig, Variant};
use cdformer_core::nn::{Forward, Mode, ParamStore};
use cdformer_core::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(shape: &[usize], rng: &mut impl Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn small(variant: Variant) -> ModelConfig {
    ModelConfig {
        input_channels: 3,
        window_len: 8,
        cnn_channels: 6,
        drsn_blocks: 1,
        d_model: 8,
        heads: 2,
        d_ff: 16,
        encoder_layers: 2,
        reg_hidden: 4,
        variant,
        ..ModelConfig::default()
    }
}

#[test]
fn every_parameter_receives_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for v in Variant::ALL {
        let model = CdformerModel::build(small(v), 3).unwrap();
        let mut f = Forward::new(model.params(), Mode::Train, true);
        let x = f.input(random(&[4, 3, 8], &mut rng));
        let r = f.input(random(&[4], &mut rng));
        let y = model.forward(&mut f, x).unwrap();
        let p = f.tape.mul(y, r).unwrap();
        let loss = f.tape.sum(p).unwrap();
        f.backward(loss).unwrap();
        for (id, g) in f.param_grads() {
            let name = &model.params().entry(id).name;
            assert!(g.iter().any(|v| *v != 0.0), "{}: no gradient reaches {name}", v.as_str());
        }
    }
}

fn swap_rows(t: &Tensor, i: usize, j: usize) -> Tensor {
    let [b, l, d] = t.shape() else { panic!("rank 3") };
    let (b, l, d) = (*b, *l, *d);
    let mut out = t.clone();
    for n in 0..b {
        for k in 0..d {
            out.data_mut()[(n * l + i) * d + k] = t.data()[(n * l + j) * d + k];
            out.data_mut()[(n * l + j) * d + k] = t.data()[(n * l + i) * d + k];
        }
    }
    out
}

fn encode(model: &CdformerModel, h: &Tensor, with_pe: bool) -> Tensor {
    let mut f = Forward::new(model.params(), Mode::Eval, false);
    let v = f.input(h.clone());
    let out = if with_pe { model.encode(&mut f, v) } else { model.encoder_stack(&mut f, v) }.unwrap();
    f.tape.value(out).clone()
}

#[test]
fn encoder_is_permutation_equivariant_without_positions() {
    let model = CdformerModel::build(small(Variant::Cdformer), 5).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let h = random(&[2, 8, 8], &mut rng);
    let base = encode(&model, &h, false);
    let permuted = encode(&model, &swap_rows(&h, 1, 6), false);
    let diff = swap_rows(&base, 1, 6).max_abs_diff(&permuted).unwrap();
    assert!(diff < 1e-12, "diff {diff}");
}

#[test]
fn positional_encoding_breaks_permutation_symmetry() {
    let model = CdformerModel::build(small(Variant::Cdformer), 5).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let h = random(&[2, 8, 8], &mut rng);
    let base = encode(&model, &h, true);
    let permuted = encode(&model, &swap_rows(&h, 1, 6), true);
    let diff = swap_rows(&base, 1, 6).max_abs_diff(&permuted).unwrap();
    assert!(diff > 1e-6, "diff {diff}");
}

#[test]
fn untrained_outputs_finite_across_seeds() {
    let cfg = ModelConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for seed in 0..100 {
        let model = CdformerModel::build(cfg.clone(), seed).unwrap();
        let x = random(&[2, cfg.input_channels, cfg.window_len], &mut rng);
        let y = model.predict(&x).unwrap();
        assert!(y.iter().all(|v| v.is_finite()), "seed {seed}: {y:?}");
    }
}

#[test]
fn all_variants_share_input_shape() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = random(&[5, 4, 16], &mut rng);
    for v in Variant::ALL {
        let model = CdformerModel::build(ModelConfig { variant: v, ..ModelConfig::default() }, 0).unwrap();
        assert_eq!(model.predict(&x).unwrap().len(), 5, "{}", v.as_str());
    }
}

#[test]
fn eval_is_pure_and_batch_rows_independent() {
    let model = CdformerModel::build(ModelConfig::default(), 9).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let one = random(&[1, 4, 16], &mut rng);
    let mut data = Vec::new();
    for _ in 0..3 {
        data.extend_from_slice(one.data());
    }
    let batch = Tensor::new(vec![3, 4, 16], data).unwrap();
    let before = model.params().to_records();
    let y = model.predict(&batch).unwrap();
    assert_eq!(y[0], y[1]);
    assert_eq!(y[1], y[2]);
    assert_eq!(model.predict(&one).unwrap()[0], y[0]);
    assert_eq!(model.params().to_records(), before);
}

// step-by-step reference for one residual shrinkage block in training mode

struct Arr {
    b: usize,
    c: usize,
    l: usize,
    v: Vec<f64>,
}

impl Arr {
    fn at(&self, n: usize, c: usize, t: usize) -> f64 {
        self.v[(n * self.c + c) * self.l + t]
    }
}

fn p(store: &ParamStore, name: &str) -> Vec<f64> {
    store.get(store.find(name).unwrap_or_else(|| panic!("{name}"))).data().to_vec()
}

fn conv(x: &Arr, w: &[f64], bias: &[f64], c_out: usize, k: usize) -> Arr {
    let pad = k / 2;
    let mut v = vec![0.0; x.b * c_out * x.l];
    for n in 0..x.b {
        for o in 0..c_out {
            for t in 0..x.l {
                let mut s = bias[o];
                for i in 0..x.c {
                    for j in 0..k {
                        let pos = t as isize + j as isize - pad as isize;
                        if pos >= 0 && (pos as usize) < x.l {
                            s += w[(o * x.c + i) * k + j] * x.at(n, i, pos as usize);
                        }
                    }
                }
                v[(n * c_out + o) * x.l + t] = s;
            }
        }
    }
    Arr { b: x.b, c: c_out, l: x.l, v }
}

fn batch_norm(x: &Arr, gamma: &[f64], beta: &[f64]) -> Arr {
    let mut out = Arr { b: x.b, c: x.c, l: x.l, v: x.v.clone() };
    let count = (x.b * x.l) as f64;
    for c in 0..x.c {
        let vals: Vec<f64> = (0..x.b).flat_map(|n| (0..x.l).map(move |t| (n, t))).map(|(n, t)| x.at(n, c, t)).collect();
        let mean = vals.iter().sum::<f64>() / count;
        let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / count;
        for n in 0..x.b {
            for t in 0..x.l {
                let i = (n * x.c + c) * x.l + t;
                out.v[i] = gamma[c] * (x.v[i] - mean) / (var + 1e-5).sqrt() + beta[c];
            }
        }
    }
    out
}

fn dense(x: &[f64], w: &[f64], b: &[f64]) -> Vec<f64> {
    (0..b.len()).map(|o| b[o] + (0..x.len()).map(|i| w[o * x.len() + i] * x[i]).sum::<f64>()).collect()
}

fn reference_drsn(store: &ParamStore, x: &Arr, c_out: usize, k: usize) -> Vec<f64> {
    let h = conv(x, &p(store, "blk.conv1.weight"), &p(store, "blk.conv1.bias"), c_out, k);
    let mut h = batch_norm(&h, &p(store, "blk.bn1.gamma"), &p(store, "blk.bn1.beta"));
    h.v.iter_mut().for_each(|v| *v = v.max(0.0));
    let h = conv(&h, &p(store, "blk.conv2.weight"), &p(store, "blk.conv2.bias"), c_out, k);
    let f2 = batch_norm(&h, &p(store, "blk.bn2.gamma"), &p(store, "blk.bn2.beta"));
    let s = conv(x, &p(store, "blk.shortcut_conv.weight"), &p(store, "blk.shortcut_conv.bias"), c_out, 1);
    let s = batch_norm(&s, &p(store, "blk.shortcut_bn.gamma"), &p(store, "blk.shortcut_bn.beta"));
    let mut out = vec![0.0; f2.v.len()];
    for n in 0..x.b {
        let pooled: Vec<f64> = (0..c_out).map(|c| (0..x.l).map(|t| f2.at(n, c, t)).sum::<f64>() / x.l as f64).collect();
        let z: Vec<f64> = dense(&pooled, &p(store, "blk.threshold.fc1.weight"), &p(store, "blk.threshold.fc1.bias"))
            .into_iter()
            .map(|v| v.max(0.0))
            .collect();
        let lam: Vec<f64> = dense(&z, &p(store, "blk.threshold.fc2.weight"), &p(store, "blk.threshold.fc2.bias"))
            .into_iter()
            .map(|v| 1.0 / (1.0 + (-v).exp()))
            .collect();
        for c in 0..c_out {
            for t in 0..x.l {
                let v = f2.at(n, c, t);
                let shrunk = v.signum() * (v.abs() - lam[c]).max(0.0);
                out[(n * c_out + c) * x.l + t] = (shrunk + s.at(n, c, t)).max(0.0);
            }
        }
    }
    out
}

#[test]
fn drsn_block_matches_scripted_reference() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let mut store = ParamStore::new();
    let block = DrsnBlock::new(&mut store, "blk", 3, 5, 3, 2, &mut rng).unwrap();
    let ids: Vec<_> = store.iter().filter(|(_, e)| e.trainable).map(|(id, _)| id).collect();
    for id in ids {
        for v in store.get_mut(id).data_mut() {
            *v += rng.random_range(-0.2..0.2);
        }
    }
    let x = random(&[2, 3, 7], &mut rng);
    let mut f = Forward::new(&store, Mode::Train, false);
    let xv = f.input(x.clone());
    let y = block.forward(&mut f, xv).unwrap();
    let got = f.tape.value(y).data().to_vec();
    let want = reference_drsn(&store, &Arr { b: 2, c: 3, l: 7, v: x.data().to_vec() }, 5, 3);
    let diff = got.iter().zip(&want).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    assert!(diff < 1e-12, "diff {diff}");
    assert!(got.iter().any(|v| *v > 0.0));
}
