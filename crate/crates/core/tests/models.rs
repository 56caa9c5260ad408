use mcw2v_core::dsp::FeatureTensor;
use mcw2v_core::encoder::{EncoderConfig, MultiChannelEncoder};
use mcw2v_core::graph::Graph;
use mcw2v_core::nn::Activation;
use mcw2v_core::params::{ParamBuilder, ParamStore};
use mcw2v_core::quantizer::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const BINS: usize = 4;
const FRAMES: usize = 7;

fn small_encoder() -> EncoderConfig {
    EncoderConfig {
        layers: 2,
        heads: 2,
        head_dim: 3,
        hidden: 6,
        ffn_dim: 8,
        conv_kernel: 3,
        input_dim: 3 * BINS,
        rel_pos_dim: 4,
        dropout: 0.0,
    }
}

fn features(channels: usize, rng: &mut ChaCha8Rng) -> FeatureTensor {
    let amp = (0..channels * FRAMES * BINS).map(|_| rng.gen_range(-2.0f32..2.0)).collect();
    let phase = (0..channels * FRAMES * 2 * BINS).map(|_| rng.gen_range(-1.0f32..1.0)).collect();
    FeatureTensor::new(channels, FRAMES, BINS, amp, phase).unwrap()
}

fn scaled(f: &FeatureTensor, a: f32, other: &FeatureTensor, b: f32) -> FeatureTensor {
    let amp = f.amplitude.iter().zip(&other.amplitude).map(|(x, y)| a * x + b * y).collect();
    let phase = f.phase.iter().zip(&other.phase).map(|(x, y)| a * x + b * y).collect();
    FeatureTensor::new(f.channels, f.frames, f.bins, amp, phase).unwrap()
}

fn build(method: &str, amp: Activation, phase: Activation, channels: usize, seed: u64) -> (ParamStore<f64>, Box<dyn Quantizer>) {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = QuantizerConfig {
        method: method.into(),
        amp_activation: amp,
        phase_activation: phase,
        target_dim: 5,
        attention_dim: 3,
        share_channel_weights: true,
    };
    let q = {
        let mut pb = ParamBuilder::new(&mut store, &mut rng);
        QuantizerRegistry::default()
            .build(&cfg, QuantizerDims { channels, bins: BINS }, &mut pb)
            .unwrap()
    };
    (store, q)
}

fn run(store: &ParamStore<f64>, q: &dyn Quantizer, f: &FeatureTensor) -> (Vec<usize>, Vec<f64>) {
    let mut g = Graph::new(store);
    let v = Quantize::<f64>::quantize(q, &mut g, f).unwrap();
    (g.shape(v).to_vec(), g.value(v).data().to_vec())
}

#[test]
fn encoder_is_invariant_to_channel_order() {
    let cfg = small_encoder();
    let mut store = ParamStore::<f64>::new();
    let mut init = ChaCha8Rng::seed_from_u64(0);
    let enc = MultiChannelEncoder::new(&mut ParamBuilder::new(&mut store, &mut init), &cfg).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst = 0.0f64;
    for i in 0..10 {
        let channels = 2 + i % 3;
        let f = features(channels, &mut rng);
        let mut order: Vec<usize> = (0..channels).collect();
        order.rotate_left(1 + i % (channels - 1));
        let p = f.permute_channels(&order).unwrap();
        let mut g = Graph::new(&store);
        let a = enc.encode(&mut g, &f, None, None).unwrap().fused;
        let b = enc.encode(&mut g, &p, None, None).unwrap().fused;
        assert_eq!(g.shape(a), &[FRAMES, cfg.hidden]);
        for (x, y) in g.value(a).data().iter().zip(g.value(b).data()) {
            worst = worst.max((x - y).abs());
        }
    }
    assert!(worst <= 1e-5, "{worst}");
}

#[test]
fn every_method_emits_the_same_shape() {
    let f = features(2, &mut ChaCha8Rng::seed_from_u64(3));
    for method in QuantizerRegistry::default().names() {
        let (store, q) = build(method, Activation::Swish, Activation::None, 2, 1);
        assert_eq!(q.method(), method);
        let (shape, data) = run(&store, &*q, &f);
        assert_eq!(shape, vec![FRAMES, 5], "{method}");
        assert!(data.iter().all(|x| x.is_finite()));
    }
}

#[test]
fn zero_features_give_zero_targets() {
    let zero = FeatureTensor::new(2, FRAMES, BINS, vec![0.0; 2 * FRAMES * BINS], vec![0.0; 4 * FRAMES * BINS]).unwrap();
    for method in ["joint", "feature", "channel"] {
        for act in [Activation::Swish, Activation::Relu, Activation::None] {
            let (store, q) = build(method, act, act, 2, 2);
            let (_, data) = run(&store, &*q, &zero);
            assert!(data.iter().all(|&x| x.abs() < 1e-12), "{method} {act:?}");
        }
    }
}

#[test]
fn linear_methods_obey_superposition() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (x, y) = (features(2, &mut rng), features(2, &mut rng));
    let mix = scaled(&x, 0.7, &y, -1.3);
    for method in ["joint", "feature"] {
        let (store, q) = build(method, Activation::None, Activation::None, 2, 5);
        let (_, qx) = run(&store, &*q, &x);
        let (_, qy) = run(&store, &*q, &y);
        let (_, qm) = run(&store, &*q, &mix);
        for i in 0..qm.len() {
            assert!((qm[i] - (0.7 * qx[i] - 1.3 * qy[i])).abs() < 1e-5, "{method}");
        }
    }
}

#[test]
fn channel_attention_is_a_distribution_over_channels() {
    let mut store = ParamStore::<f64>::new();
    let mut init = ChaCha8Rng::seed_from_u64(6);
    let cfg = QuantizerConfig {
        method: "channel".into(),
        target_dim: 5,
        attention_dim: 3,
        ..Default::default()
    };
    let cq = ChannelQuantizer::new(
        &mut ParamBuilder::new(&mut store, &mut init),
        &cfg,
        QuantizerDims { channels: 3, bins: BINS },
    )
    .unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..10 {
        let f = features(3, &mut rng);
        let mut g = Graph::new(&store);
        let parts = cq.forward_parts(&mut g, &f).unwrap();
        let w = g.value(parts.weights);
        assert_eq!(w.shape(), &[FRAMES, 3]);
        for t in 0..FRAMES {
            let row = w.row(t);
            assert!(row.iter().all(|&a| a > 0.0));
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        // Scores use shared weights, so reordering channels reorders them.
        let p = f.permute_channels(&[2, 0, 1]).unwrap();
        let wp = cq.channel_attention(&mut g, &p).unwrap();
        let wp = g.value(wp).clone();
        let w = g.value(parts.weights);
        for t in 0..FRAMES {
            for (slot, &src) in [2usize, 0, 1].iter().enumerate() {
                assert!((wp.row(t)[slot] - w.row(t)[src]).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn single_channel_input_is_rejected() {
    assert!(matches!(
        QuantizerRegistry::default().names().as_slice(),
        ["joint", "feature", "channel"]
    ));
    let mut store = ParamStore::<f64>::new();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let cfg = QuantizerConfig { method: "channel".into(), ..Default::default() };
    let r = QuantizerRegistry::default().build(
        &cfg,
        QuantizerDims { channels: 1, bins: BINS },
        &mut ParamBuilder::new(&mut store, &mut rng),
    );
    assert!(r.is_err());
}

#[test]
fn unknown_method_lists_choices() {
    let mut store = ParamStore::<f64>::new();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let cfg = QuantizerConfig { method: "vq".into(), ..Default::default() };
    let err = QuantizerRegistry::default()
        .build(&cfg, QuantizerDims { channels: 2, bins: BINS }, &mut ParamBuilder::new(&mut store, &mut rng))
        .unwrap_err();
    assert!(err.to_string().contains("joint"));
}
