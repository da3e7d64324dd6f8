use super::*;
use crate::diagnostics::{count_ops, plain_lstm_step};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn config(dims: Vec<usize>, mode: BoundaryMode) -> ModelConfig {
    ModelConfig { dims, embed_dim: 3, out_embed_dim: 4, vocab_size: 6, mode, layer_norm: false }
}

fn random_model(cfg: ModelConfig, seed: u64) -> Model {
    Model::init(cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
}

fn zero_model(cfg: ModelConfig) -> Model {
    let p = ModelParams::zeros(&cfg).unwrap();
    Model::new(cfg, p).unwrap()
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn random_window(len: usize, k: usize, seed: u64) -> Vec<usize> {
    let mut r = rng(seed);
    (0..len).map(|_| r.gen_range(0..k)).collect()
}

#[test]
fn config_validation() {
    assert!(matches!(config(vec![4], BoundaryMode::Step).validate(), Err(Error::Config(_))));
    assert!(matches!(config(vec![4, 0], BoundaryMode::Step).validate(), Err(Error::Config(_))));
    assert!(config(vec![4, 4], BoundaryMode::Step).validate().is_ok());
}

#[test]
fn parameter_names_are_unique_and_ordered() {
    let mut cfg = config(vec![4, 5, 6], BoundaryMode::Step);
    cfg.layer_norm = true;
    let p = ModelParams::zeros(&cfg).unwrap();
    let names: Vec<String> = p.named().into_iter().map(|(n, _)| n).collect();
    let mut dedup = names.clone();
    dedup.sort();
    dedup.dedup();
    assert_eq!(dedup.len(), names.len());
    assert_eq!(names[0], "embedding");
    assert!(names.contains(&"layer1.top_down".to_string()));
    assert!(!names.contains(&"layer3.top_down".to_string()));
    assert_eq!(names.last().unwrap(), "output.softmax_bias");
    assert_eq!(p.output.projections.len(), 3);
    assert_eq!(p.output.gate_weights.shape(), &[3, 15]);
}

#[test]
fn embedding_lookup() {
    let cfg = config(vec![2, 2], BoundaryMode::Step);
    let mut m = zero_model(cfg.clone());
    assert!(m.embed(4).unwrap().data().iter().all(|&v| v == 0.0));
    m.params.embedding.data_mut()[2] = 0.1; // row 0, column 2
    m.params.embedding.data_mut()[6 + 2] = -0.2;
    assert_eq!(m.embed(2).unwrap().data(), &[0.1, -0.2, 0.0]);
    assert!(matches!(m.embed(6), Err(Error::Index { index: 6, size: 6 })));

    let square = ModelConfig { embed_dim: 6, ..cfg };
    let mut m = zero_model(square);
    for j in 0..6 {
        m.params.embedding.data_mut()[j * 6 + j] = 1.0;
    }
    for j in 0..6 {
        let e = m.embed(j).unwrap();
        assert!(e.data().iter().enumerate().all(|(i, &v)| v == if i == j { 1.0 } else { 0.0 }));
    }
}

#[test]
fn zero_model_first_step() {
    let m = zero_model(config(vec![3, 3], BoundaryMode::Step));
    let s0 = NetworkState::zeros(&m.config);
    let out = m.step(1, &s0, 1.0, &mut rng(0)).unwrap();
    assert!(out.hidden[0].data().iter().all(|&v| v == 0.0));
    assert_eq!(out.boundaries, vec![0.0, 0.0]);
    assert_eq!(out.state.layers[1], s0.layers[1]);
}

fn boundary_bias(m: &mut Model, value: f64) {
    for l in 0..m.config.layers() - 1 {
        let d = m.config.dims[l];
        m.params.layers[l].bias.data_mut()[4 * d] = value;
    }
}

#[test]
fn forced_firing_flushes_every_later_step() {
    let mut m = random_model(config(vec![3, 3, 3], BoundaryMode::Step), 2);
    boundary_bias(&mut m, 50.0);
    let window = random_window(9, 6, 1);
    let r = m.sequence_nll(&window, &NetworkState::zeros(&m.config), 1.0, &mut rng(0)).unwrap();
    assert!(r.trace.boundaries.iter().flatten().all(|&z| z == 1.0));
    let c = count_ops(&r.trace).unwrap();
    for l in 0..2 {
        assert_eq!((c.layers[l].update, c.layers[l].flush, c.layers[l].copy), (1, 7, 0));
    }
    assert_eq!((c.layers[2].update, c.layers[2].copy), (8, 0));
}

#[test]
fn soft_equals_step_when_boundaries_saturate() {
    for bias in [50.0, -50.0] {
        let mut step = random_model(config(vec![3, 4, 2], BoundaryMode::Step), 3);
        boundary_bias(&mut step, bias);
        let mut soft = step.clone();
        soft.config.mode = BoundaryMode::Soft;
        let (mut a, mut b) = (NetworkState::zeros(&step.config), NetworkState::zeros(&step.config));
        for &x in &random_window(20, 6, 4) {
            a = step.step(x, &a, 1.0, &mut rng(0)).unwrap().state;
            b = soft.step(x, &b, 1.0, &mut rng(0)).unwrap().state;
            assert_eq!(a, b);
        }
    }
}

#[test]
fn output_module_examples() {
    let cfg = config(vec![4, 4], BoundaryMode::Step);
    let mut m = random_model(cfg.clone(), 5);
    m.params.output.softmax_bias.data_mut().fill(0.0);
    let zeros = vec![Tensor::zeros(&[4]), Tensor::zeros(&[4])];
    let p = m.output_distribution(&zeros).unwrap();
    assert!(p.data().iter().all(|&v| (v - 1.0 / 6.0).abs() < 1e-15));
    assert!(matches!(m.output_distribution(&zeros[..1]), Err(Error::Dimension(_))));

    // gate 1 saturated open, gate 2 shut, identity projections
    let mut m = zero_model(ModelConfig { out_embed_dim: 4, vocab_size: 4, ..cfg });
    let h1 = Tensor::vector(vec![0.5, -0.25, 1.0, -2.0]);
    let h2 = Tensor::vector(vec![0.3, 0.3, 0.3, 0.3]);
    let w = m.params.output.gate_weights.data_mut();
    w[..4].copy_from_slice(&[1000.0, 0.0, 1000.0, 0.0]);
    w[8..12].copy_from_slice(&[-1000.0, 0.0, -1000.0, 0.0]);
    for j in 0..4 {
        m.params.output.projections[0].data_mut()[j * 4 + j] = 1.0;
        m.params.output.projections[1].data_mut()[j * 4 + j] = 1.0;
        m.params.output.softmax_weight.data_mut()[j * 4 + j] = 1.0;
    }
    let logits = m.output_logits(&[h1, h2]).unwrap();
    assert_eq!(logits, vec![0.5, 0.0, 1.0, 0.0]);
}

#[test]
fn gates_are_half_with_zero_gate_weights() {
    let mut m = random_model(config(vec![2, 3], BoundaryMode::Step), 6);
    m.params.output.gate_weights.data_mut().fill(0.0);
    let h = vec![Tensor::vector(vec![0.3, -0.7]), Tensor::vector(vec![0.1, 0.2, -0.4])];
    // with zero gate weights the output equals the ungated sum at scale 0.5
    let mut pre = vec![0.0; 4];
    for (hl, w) in h.iter().zip(&m.params.output.projections) {
        for (p, v) in pre.iter_mut().zip(kernels::affine(w, hl, None).unwrap().data()) {
            *p += 0.5 * v;
        }
    }
    let he = Tensor::vector(pre.into_iter().map(|v| v.max(0.0)).collect());
    let expect = kernels::affine(&m.params.output.softmax_weight, &he, Some(&m.params.output.softmax_bias)).unwrap();
    let got = m.output_logits(&h).unwrap();
    for (a, b) in got.iter().zip(expect.data()) {
        assert!((a - b).abs() < 1e-15);
    }
}

#[test]
fn certain_model_has_zero_loss() {
    let mut m = zero_model(config(vec![2, 2], BoundaryMode::Step));
    m.params.output.softmax_bias.data_mut()[2] = 1000.0;
    let r = m.sequence_nll(&[2; 8], &NetworkState::zeros(&m.config), 1.0, &mut rng(0)).unwrap();
    assert_eq!(r.loss, 0.0);
    assert_eq!(r.bpc, 0.0);
}

#[test]
fn uniform_model_bpc() {
    let m = zero_model(ModelConfig { vocab_size: 27, ..config(vec![3, 3], BoundaryMode::Step) });
    let window = random_window(30, 27, 7);
    let r = m.sequence_nll(&window, &NetworkState::zeros(&m.config), 1.0, &mut rng(0)).unwrap();
    assert!((r.bpc - 27f64.log2()).abs() < 1e-12);
    assert!((r.bpc - 4.755).abs() < 1e-3);
}

#[test]
fn empty_window_is_refused() {
    let m = zero_model(config(vec![2, 2], BoundaryMode::Step));
    let s = NetworkState::zeros(&m.config);
    assert!(matches!(m.sequence_nll(&[], &s, 1.0, &mut rng(0)), Err(Error::Usage(_))));
    assert!(matches!(m.sequence_nll(&[1], &s, 1.0, &mut rng(0)), Err(Error::Usage(_))));
}

#[test]
fn sequence_nll_is_reproducible_and_consistent() {
    for mode in [BoundaryMode::Step, BoundaryMode::Sample, BoundaryMode::Soft] {
        let m = random_model(config(vec![4, 3, 5], mode), 8);
        let window = random_window(40, 6, 9);
        let s = NetworkState::zeros(&m.config);
        let a = m.sequence_nll(&window, &s, 1.5, &mut rng(1)).unwrap();
        let b = m.sequence_nll(&window, &s, 1.5, &mut rng(1)).unwrap();
        assert_eq!(a.loss.to_bits(), b.loss.to_bits());
        assert_eq!(a.trace, b.trace);
        assert_eq!(a.bpc, a.loss / std::f64::consts::LN_2);
        assert_eq!(a.trace.len(), 39);
    }
}

#[test]
fn tape_and_value_paths_agree() {
    for mode in [BoundaryMode::Step, BoundaryMode::Sample, BoundaryMode::Soft] {
        for layer_norm in [false, true] {
            let m = random_model(ModelConfig { layer_norm, ..config(vec![4, 3, 5], mode) }, 10);
            let window = random_window(25, 6, 11);
            let s = NetworkState::zeros(&m.config);
            let r = m.sequence_nll(&window, &s, 1.0, &mut rng(2)).unwrap();

            let mut state = s.clone();
            let mut r2 = rng(2);
            let mut total = 0.0;
            for t in 0..24 {
                let out = m.step(window[t], &state, 1.0, &mut r2).unwrap();
                let p = m.output_distribution(&out.hidden).unwrap();
                total -= p.data()[window[t + 1]].ln();
                for (l, row) in r.trace.boundaries.iter().enumerate() {
                    assert_eq!(row[t], out.boundaries[l]);
                }
                state = out.state;
            }
            assert!((total / 24.0 - r.loss).abs() < 1e-12);
            for (a, b) in state.layers.iter().zip(&r.final_state.layers) {
                assert!(a.h.data().iter().zip(b.h.data()).all(|(x, y)| (x - y).abs() < 1e-13));
                assert_eq!(a.z, b.z);
            }
        }
    }
}

#[test]
fn state_carryover_matches_one_long_window() {
    for mode in [BoundaryMode::Step, BoundaryMode::Sample] {
        let m = random_model(config(vec![5, 4, 3], mode), 12);
        let window = random_window(41, 6, 13);
        let s = NetworkState::zeros(&m.config);
        let whole = m.sequence_nll(&window, &s, 1.0, &mut rng(3)).unwrap();
        let mut r = rng(3);
        let a = m.sequence_nll(&window[..21], &s, 1.0, &mut r).unwrap();
        let b = m.sequence_nll(&window[20..], &a.final_state, 1.0, &mut r).unwrap();
        assert!(((a.loss + b.loss) / 2.0 - whole.loss).abs() <= 1e-12);
        for (x, y) in b.final_state.layers.iter().zip(&whole.final_state.layers) {
            assert_eq!(x, y);
        }
    }
}

#[test]
fn lanes_are_independent() {
    let m = random_model(config(vec![4, 3], BoundaryMode::Step), 14);
    let w1 = random_window(11, 6, 15);
    let w2 = random_window(11, 6, 16);
    let s = NetworkState::zeros(&m.config);
    let mut tape = Tape::no_grad();
    let p = m.bind(&mut tape);
    let both = m
        .forward_batch(&mut tape, &p, &[&w1[..10], &w2[..10]], &[&w1[1..], &w2[1..]], &[s.clone(), s.clone()], 1.0, &mut rng(0), true)
        .unwrap();
    let one = m.sequence_nll(&w1, &s, 1.0, &mut rng(0)).unwrap();
    let two = m.sequence_nll(&w2, &s, 1.0, &mut rng(0)).unwrap();
    assert!((tape.value(both.loss).data()[0] - (one.loss + two.loss) / 2.0).abs() < 1e-13);
    assert_eq!(both.traces[0].boundaries, one.trace.boundaries);
    assert_eq!(both.traces[1].boundaries, two.trace.boundaries);
}

#[test]
fn forced_stack_is_a_stacked_lstm() {
    let m = random_model(config(vec![5, 4, 3], BoundaryMode::Step), 17);
    let mut state = NetworkState::zeros(&m.config);
    let mut plain: Vec<(Vec<f64>, Vec<f64>)> = m.config.dims.iter().map(|&d| (vec![0.0; d], vec![0.0; d])).collect();
    let mut worst: f64 = 0.0;
    for &x in &random_window(50, 6, 18) {
        let out = m.step_with(x, &state, 1.0, &mut rng(0), true).unwrap();
        let mut below = m.embed(x).unwrap().into_data();
        for (l, (h, c)) in plain.iter_mut().enumerate() {
            (*h, *c) = plain_lstm_step(&m.params.layers[l], h, c, &below);
            below = h.clone();
            let got = &out.state.layers[l];
            for (a, b) in got.h.data().iter().zip(h.iter()).chain(got.c.data().iter().zip(c.iter())) {
                worst = worst.max((a - b).abs());
            }
        }
        state = out.state;
    }
    assert!(worst <= 1e-10, "{worst}");
}

#[test]
fn first_layer_never_copies() {
    let m = random_model(config(vec![4, 4, 4], BoundaryMode::Sample), 19);
    let r = m.sequence_nll(&random_window(60, 6, 20), &NetworkState::zeros(&m.config), 1.0, &mut rng(4)).unwrap();
    let c = count_ops(&r.trace).unwrap();
    assert_eq!(c.layers[0].copy, 0);
    assert_eq!(c.layers[0].updates(), 59);
}

#[test]
fn copy_runs_keep_norms_constant() {
    let mut m = random_model(config(vec![4, 4, 4], BoundaryMode::Step), 21);
    // layer 1 rarely fires, so upper layers copy most of the time
    m.params.layers[0].bias.data_mut()[16] = -0.3;
    let r = m.sequence_nll(&random_window(80, 6, 22), &NetworkState::zeros(&m.config), 1.0, &mut rng(0)).unwrap();
    let z1 = &r.trace.boundaries[0];
    let mut copies = 0;
    for t in 1..z1.len() {
        let own_prev = r.trace.boundaries[1][t - 1];
        if z1[t] == 0.0 && own_prev == 0.0 {
            assert_eq!(r.trace.norms[1][t].to_bits(), r.trace.norms[1][t - 1].to_bits());
            copies += 1;
        }
    }
    assert!(copies > 0);
}

#[test]
fn sampling_examples() {
    let mut m = random_model(config(vec![3, 3], BoundaryMode::Sample), 23);
    assert!(m.sample_text(&[1], 0, 1.0, 1.0, &mut rng(0)).unwrap().is_empty());
    assert!(matches!(m.sample_text(&[], 5, 1.0, 1.0, &mut rng(0)), Err(Error::Usage(_))));
    assert!(matches!(m.sample_text(&[1], 5, -1.0, 1.0, &mut rng(0)), Err(Error::Config(_))));
    let a = m.sample_text(&[1, 2], 30, 1.0, 1.0, &mut rng(5)).unwrap();
    assert_eq!(a, m.sample_text(&[1, 2], 30, 1.0, 1.0, &mut rng(5)).unwrap());
    assert_eq!(a.len(), 30);
    m.params.output.softmax_bias.data_mut()[3] = 100.0;
    assert_eq!(m.sample_text(&[0], 12, 0.0, 1.0, &mut rng(0)).unwrap(), vec![3; 12]);
}

#[test]
fn argmax_prefers_lowest_index() {
    let m = zero_model(config(vec![2, 2], BoundaryMode::Step));
    assert_eq!(m.sample_text(&[4], 3, 0.0, 1.0, &mut rng(0)).unwrap(), vec![0; 3]);
}

#[test]
fn checkpoint_round_trip_is_byte_exact() {
    let mut cfg = config(vec![4, 3], BoundaryMode::Sample);
    cfg.layer_norm = true;
    let m = random_model(cfg, 24);
    let opt = crate::trainer::OptState::new(&m.params, 0.002);
    let ck = Checkpoint {
        model: m,
        vocab: Some(crate::corpus::Vocab::from_text("abcde")),
        train: Some(crate::trainer::TrainConfig::default()),
        epoch: 3,
        slope: 1.12,
        seed: 42,
        optimizer: Some(opt),
    };
    let bytes = ck.to_bytes().unwrap();
    let back = Checkpoint::from_bytes(&bytes).unwrap();
    assert_eq!(back, ck);
    assert_eq!(back.to_bytes().unwrap(), bytes);

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    ck.save(&path).unwrap();
    assert_eq!(Checkpoint::load(&path).unwrap().to_bytes().unwrap(), bytes);

    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(matches!(Checkpoint::from_bytes(&bad), Err(Error::Format(_))));
    assert!(matches!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3]), Err(Error::Format(_))));
    let mut long = bytes.clone();
    long.push(0);
    assert!(matches!(Checkpoint::from_bytes(&long), Err(Error::Format(_))));
}

proptest! {
    #[test]
    fn output_is_a_distribution(seed in any::<u64>()) {
        let m = random_model(config(vec![3, 4], BoundaryMode::Step), seed);
        let mut r = rng(seed);
        let h = vec![
            Tensor::vector((0..3).map(|_| r.gen_range(-3.0..3.0)).collect()),
            Tensor::vector((0..4).map(|_| r.gen_range(-3.0..3.0)).collect()),
        ];
        let p = m.output_distribution(&h).unwrap();
        prop_assert!(p.data().iter().all(|&v| v >= 0.0));
        prop_assert!((p.data().iter().sum::<f64>() - 1.0).abs() <= 1e-12);
    }
}
