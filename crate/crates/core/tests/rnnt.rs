use mcw2v_core::transducer::rnnt::{loss, loss_and_grad, loss_bruteforce, LatticeView};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Case {
    data: Vec<f64>,
    frames: usize,
    labels: Vec<usize>,
    width: usize,
}

impl Case {
    fn view(&self) -> LatticeView<'_, f64> {
        LatticeView::new(&self.data, self.frames, self.labels.len() + 1, self.width).unwrap()
    }

    fn blank(&self) -> usize {
        self.width - 1
    }
}

/// Random lattice whose rows are normalized log-distributions.
fn random_case(rng: &mut ChaCha8Rng) -> Case {
    let frames = rng.gen_range(1..=4);
    let u = rng.gen_range(0..=3);
    // Up to five labels plus blank.
    let width = rng.gen_range(2..=6);
    let labels: Vec<usize> = (0..u).map(|_| rng.gen_range(0..width - 1)).collect();
    let mut data = Vec::with_capacity(frames * (u + 1) * width);
    for _ in 0..frames * (u + 1) {
        let logits: Vec<f64> = (0..width).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let lse = logits.iter().map(|x| x.exp()).sum::<f64>().ln();
        data.extend(logits.iter().map(|x| x - lse));
    }
    Case { data, frames, labels, width }
}

fn binomial(n: usize, k: usize) -> usize {
    (0..k).fold(1, |acc, i| acc * (n - i) / (i + 1))
}

#[test]
fn forward_backward_matches_enumeration() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut worst = 0.0f64;
    for _ in 0..200 {
        let c = random_case(&mut rng);
        let lat = c.view();
        let (brute, paths) = loss_bruteforce(&lat, &c.labels, c.blank()).unwrap();
        let (fb, _) = loss_and_grad(&lat, &c.labels, c.blank()).unwrap();
        assert_eq!(paths, binomial(c.frames - 1 + c.labels.len(), c.labels.len()));
        let p = (-fb).exp();
        assert!(p > 0.0 && p <= 1.0 + 1e-12, "probability {p}");
        worst = worst.max((fb - brute).abs());
    }
    assert!(worst <= 1e-8, "{worst}");
}

#[test]
fn loss_only_path_agrees_with_gradient_path() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..50 {
        let c = random_case(&mut rng);
        let a = loss(&c.view(), &c.labels, c.blank()).unwrap();
        let (b, _) = loss_and_grad(&c.view(), &c.labels, c.blank()).unwrap();
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for _ in 0..30 {
        let c = random_case(&mut rng);
        let (_, grad) = loss_and_grad(&c.view(), &c.labels, c.blank()).unwrap();
        let h = 1e-6;
        for i in 0..c.data.len() {
            let mut plus = c.data.clone();
            plus[i] += h;
            let mut minus = c.data.clone();
            minus[i] -= h;
            let u1 = c.labels.len() + 1;
            let lp = loss(&LatticeView::new(&plus, c.frames, u1, c.width).unwrap(), &c.labels, c.blank()).unwrap();
            let lm = loss(&LatticeView::new(&minus, c.frames, u1, c.width).unwrap(), &c.labels, c.blank()).unwrap();
            let fd = (lp - lm) / (2.0 * h);
            assert!((fd - grad[i]).abs() < 1e-6, "entry {i}: {fd} vs {}", grad[i]);
        }
    }
}

#[test]
fn gradient_mass_counts_transitions() {
    // Every alignment takes T blanks and U labels, so occupancies sum to T+U.
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..50 {
        let c = random_case(&mut rng);
        let (_, grad) = loss_and_grad(&c.view(), &c.labels, c.blank()).unwrap();
        let total: f64 = grad.iter().sum();
        assert!((total + (c.frames + c.labels.len()) as f64).abs() < 1e-9);
    }
}

#[test]
fn rejects_mismatched_labels() {
    let data = vec![0.0; 2 * 2 * 3];
    let lat = LatticeView::new(&data, 2, 2, 3).unwrap();
    assert!(loss(&lat, &[0, 1], 2).is_err());
    assert!(loss(&lat, &[2], 2).is_err());
    assert!(LatticeView::new(&data, 3, 2, 3).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn boosting_a_transition_never_raises_the_loss(seed in 0u64..100_000, boost in 0.0f64..2.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c = random_case(&mut rng);
        let before = loss(&c.view(), &c.labels, c.blank()).unwrap();
        let mut data = c.data.clone();
        let i = rng.gen_range(0..data.len());
        data[i] += boost;
        let lat = LatticeView::new(&data, c.frames, c.labels.len() + 1, c.width).unwrap();
        let after = loss(&lat, &c.labels, c.blank()).unwrap();
        prop_assert!(after <= before + 1e-12);
    }
}
