//! Label encoder, joint network, transducer loss and greedy decoding.

pub mod rnnt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Axis, Graph, Var};
use crate::nn::Linear;
use crate::params::{ParamBuilder, ParamId};
use crate::tensor::{Real, Tensor};

pub use rnnt::LatticeView;

/// Most symbols greedy decoding may emit while staying on one frame.
pub const MAX_SYMBOLS_PER_FRAME: usize = 10;

/// Label ids in `[0, V)`; the blank id is `V`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenSequence {
    tokens: Vec<usize>,
    vocab: usize,
}

impl TokenSequence {
    pub fn new(tokens: Vec<usize>, vocab: usize) -> Result<Self> {
        if let Some(&bad) = tokens.iter().find(|&&t| t >= vocab) {
            return Err(Error::TokenOutOfRange { token: bad, vocab });
        }
        Ok(Self { tokens, vocab })
    }

    pub fn tokens(&self) -> &[usize] {
        &self.tokens
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn vocab(&self) -> usize {
        self.vocab
    }

    pub fn blank(&self) -> usize {
        self.vocab
    }
}

/// Owned `[T, U+1, V+1]` table of log-probabilities.
#[derive(Clone, Debug, PartialEq)]
pub struct TransducerLattice {
    pub log_probs: Vec<f64>,
    pub frames: usize,
    pub label_positions: usize,
    pub width: usize,
}

impl TransducerLattice {
    pub fn view(&self) -> Result<LatticeView<'_, f64>> {
        LatticeView::new(&self.log_probs, self.frames, self.label_positions, self.width)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct JointConfig {
    /// Labels excluding blank.
    pub vocab: usize,
    pub label_hidden: usize,
    pub proj_dim: usize,
    pub joint_hidden: usize,
}

impl Default for JointConfig {
    fn default() -> Self {
        Self {
            vocab: 16,
            label_hidden: 256,
            proj_dim: 512,
            joint_hidden: 256,
        }
    }
}

impl JointConfig {
    pub fn desk(vocab: usize) -> Self {
        Self {
            vocab,
            label_hidden: 32,
            proj_dim: 64,
            joint_hidden: 32,
        }
    }

    pub fn blank(&self) -> usize {
        self.vocab
    }
}

/// Unidirectional LSTM over past labels, seeded with the blank id as the
/// start symbol.
#[derive(Clone, Debug)]
pub struct LabelEncoder {
    embedding: ParamId,
    input: Linear,
    recurrent: Linear,
    hidden: usize,
    start: usize,
}

/// Recurrent state carried between label steps.
#[derive(Clone, Copy, Debug)]
pub struct LstmState {
    pub h: Var,
    pub c: Var,
}

impl LabelEncoder {
    pub fn new<T: Real>(pb: &mut ParamBuilder<'_, T>, cfg: &JointConfig) -> Self {
        let mut sub = pb.sub("label");
        let h = cfg.label_hidden;
        let embedding = sub.uniform("embedding", &[cfg.vocab + 1, h], 1.0);
        let input = Linear::new(&mut sub, "input", h, 4 * h, false);
        let recurrent = Linear::new(&mut sub, "recurrent", h, 4 * h, true);
        Self {
            embedding,
            input,
            recurrent,
            hidden: h,
            start: cfg.blank(),
        }
    }

    pub fn initial_state<T: Real>(&self, g: &mut Graph<'_, T>) -> LstmState {
        let h = g.constant(Tensor::zeros(&[1, self.hidden]));
        let c = g.constant(Tensor::zeros(&[1, self.hidden]));
        LstmState { h, c }
    }

    /// Consumes one token; returns the new state (its `h` is the output).
    pub fn step<T: Real>(&self, g: &mut Graph<'_, T>, token: usize, state: LstmState) -> Result<LstmState> {
        let table = g.param(self.embedding);
        let x = g.embedding(table, &[token])?;
        let gx = self.input.forward(g, x)?;
        self.cell(g, gx, state)
    }

    fn cell<T: Real>(&self, g: &mut Graph<'_, T>, gx: Var, state: LstmState) -> Result<LstmState> {
        let gh = self.recurrent.forward(g, state.h)?;
        let gates = g.add(gx, gh)?;
        let hc = g.lstm_cell(gates, state.c)?;
        let h = g.slice(hc, Axis::Cols, 0, self.hidden)?;
        let c = g.slice(hc, Axis::Cols, self.hidden, self.hidden)?;
        Ok(LstmState { h, c })
    }

    /// `[(U+1), H]`: row 0 after the start symbol, row `u` after `y_1..y_u`.
    pub fn encode<T: Real>(&self, g: &mut Graph<'_, T>, labels: &[usize]) -> Result<Var> {
        let vocab = self.start;
        if let Some(&bad) = labels.iter().find(|&&t| t >= vocab) {
            return Err(Error::TokenOutOfRange { token: bad, vocab });
        }
        let ids: Vec<usize> = std::iter::once(self.start).chain(labels.iter().copied()).collect();
        let table = g.param(self.embedding);
        let x = g.embedding(table, &ids)?;
        let gx_all = self.input.forward(g, x)?;
        let mut state = self.initial_state(g);
        let mut rows = Vec::with_capacity(ids.len());
        for u in 0..ids.len() {
            let gx = g.slice(gx_all, Axis::Rows, u, 1)?;
            state = self.cell(g, gx, state)?;
            rows.push(state.h);
        }
        g.concat(&rows, Axis::Rows)
    }
}

/// `J = tanh(W [proj_e(f_t); proj_p(g_u)] + b)`, logits `= O J + c`,
/// stored log-softmaxed.
#[derive(Clone, Debug)]
pub struct JointNetwork {
    enc_proj: Linear,
    pred_proj: Linear,
    hidden_enc: Linear,
    hidden_pred: Linear,
    out: Linear,
}

impl JointNetwork {
    pub fn new<T: Real>(pb: &mut ParamBuilder<'_, T>, enc_dim: usize, cfg: &JointConfig) -> Self {
        let mut sub = pb.sub("joint");
        Self {
            enc_proj: Linear::new(&mut sub, "enc_proj", enc_dim, cfg.proj_dim, true),
            pred_proj: Linear::new(&mut sub, "pred_proj", cfg.label_hidden, cfg.proj_dim, true),
            // The [enc; pred] -> hidden layer, split by input half.
            hidden_enc: Linear::new(&mut sub, "hidden_enc", cfg.proj_dim, cfg.joint_hidden, true),
            hidden_pred: Linear::new(&mut sub, "hidden_pred", cfg.proj_dim, cfg.joint_hidden, false),
            out: Linear::new(&mut sub, "out", cfg.joint_hidden, cfg.vocab + 1, true),
        }
    }

    pub fn out_layer(&self) -> &Linear {
        &self.out
    }

    /// Encoder-side contribution `W_e proj_e(f)`, `[T, hidden]`.
    pub fn encoder_term<T: Real>(&self, g: &mut Graph<'_, T>, f: Var) -> Result<Var> {
        let e = self.enc_proj.forward(g, f)?;
        self.hidden_enc.forward(g, e)
    }

    /// Label-side contribution `W_p proj_p(g)`, `[U+1, hidden]`.
    pub fn label_term<T: Real>(&self, g: &mut Graph<'_, T>, pred: Var) -> Result<Var> {
        let p = self.pred_proj.forward(g, pred)?;
        self.hidden_pred.forward(g, p)
    }

    /// Log-probabilities for every pair of encoder and label rows:
    /// `[rows(enc_term) * rows(label_term), V+1]`.
    pub fn combine<T: Real>(&self, g: &mut Graph<'_, T>, enc_term: Var, label_term: Var) -> Result<Var> {
        let z = g.pair_add(enc_term, label_term)?;
        let j = g.tanh(z);
        let logits = self.out.forward(g, j)?;
        Ok(g.log_softmax(logits))
    }

    /// `f: [T, H]`, `pred: [U+1, H_label]` -> lattice `[T*(U+1), V+1]`.
    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, f: Var, pred: Var) -> Result<Var> {
        let e = self.encoder_term(g, f)?;
        let p = self.label_term(g, pred)?;
        self.combine(g, e, p)
    }
}

/// Label encoder plus joint network; the audio encoder lives elsewhere.
#[derive(Clone, Debug)]
pub struct TransducerHead {
    pub label: LabelEncoder,
    pub joint: JointNetwork,
    pub cfg: JointConfig,
}

impl TransducerHead {
    pub fn new<T: Real>(pb: &mut ParamBuilder<'_, T>, enc_dim: usize, cfg: &JointConfig) -> Self {
        Self {
            label: LabelEncoder::new(pb, cfg),
            joint: JointNetwork::new(pb, enc_dim, cfg),
            cfg: cfg.clone(),
        }
    }

    pub fn lattice<T: Real>(&self, g: &mut Graph<'_, T>, f: Var, labels: &[usize]) -> Result<Var> {
        let pred = self.label.encode(g, labels)?;
        self.joint.forward(g, f, pred)
    }

    pub fn loss<T: Real>(&self, g: &mut Graph<'_, T>, f: Var, labels: &[usize]) -> Result<Var> {
        let (frames, _) = g.dims(f);
        let lattice = self.lattice(g, f, labels)?;
        g.rnnt_loss(lattice, frames, labels, self.cfg.blank())
    }

    /// Standard transducer greedy search over encoder rows `f: [T, H]`.
    pub fn greedy_decode<T: Real>(&self, g: &mut Graph<'_, T>, f: Var) -> Result<Vec<usize>> {
        let (frames, _) = g.dims(f);
        let blank = self.cfg.blank();
        let enc = self.joint.encoder_term(g, f)?;
        let mut state = self.label.initial_state(g);
        state = self.label.step(g, blank, state)?;
        let mut pred = self.joint.label_term(g, state.h)?;
        let mut out = Vec::new();
        for t in 0..frames {
            let et = g.slice(enc, Axis::Rows, t, 1)?;
            for _ in 0..MAX_SYMBOLS_PER_FRAME {
                let lp = self.joint.combine(g, et, pred)?;
                let k = argmax(g.value(lp).data());
                if k == blank {
                    break;
                }
                out.push(k);
                state = self.label.step(g, k, state)?;
                pred = self.joint.label_term(g, state.h)?;
            }
        }
        Ok(out)
    }
}

/// Index of the first maximum.
pub fn argmax<T: Real>(xs: &[T]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::{seeded_rng, ParamStore};
    use rand::Rng;

    fn tiny() -> JointConfig {
        JointConfig {
            vocab: 5,
            label_hidden: 6,
            proj_dim: 7,
            joint_hidden: 4,
        }
    }

    fn build(cfg: &JointConfig, enc_dim: usize) -> (ParamStore<f64>, TransducerHead) {
        let mut store = ParamStore::new();
        let mut rng = seeded_rng(11);
        let head = TransducerHead::new(&mut ParamBuilder::new(&mut store, &mut rng), enc_dim, cfg);
        (store, head)
    }

    fn random_f(t: usize, d: usize, seed: u64) -> Tensor<f64> {
        let mut rng = seeded_rng(seed);
        Tensor::new((0..t * d).map(|_| rng.gen_range(-1.0..1.0)).collect(), vec![t, d]).unwrap()
    }

    #[test]
    fn token_sequence_validates() {
        assert!(TokenSequence::new(vec![0, 4], 5).is_ok());
        assert!(matches!(
            TokenSequence::new(vec![5], 5),
            Err(Error::TokenOutOfRange { token: 5, vocab: 5 })
        ));
    }

    #[test]
    fn label_encoder_shapes_and_prefix_property() {
        let (store, head) = build(&tiny(), 3);
        let mut g = Graph::new(&store);
        let empty = head.label.encode(&mut g, &[]).unwrap();
        assert_eq!(g.shape(empty), &[1, 6]);
        let y = [3, 1, 4, 0];
        let full = head.label.encode(&mut g, &y).unwrap();
        for u in 0..=y.len() {
            let prefix = head.label.encode(&mut g, &y[..u]).unwrap();
            let (p, f) = (g.value(prefix).data(), g.value(full).data());
            assert_eq!(p, &f[..p.len()]);
        }
        assert!(head.label.encode(&mut g, &[5]).is_err());
    }

    #[test]
    fn lattice_shape_normalization_and_row_locality() {
        let cfg = JointConfig { vocab: 5, ..tiny() };
        let (store, head) = build(&cfg, 3);
        let mut g = Graph::new(&store);
        let fv = random_f(3, 3, 1);
        let f = g.constant(fv.clone());
        let lat = head.lattice(&mut g, f, &[1, 2]).unwrap();
        assert_eq!(g.shape(lat), &[9, 6]);
        for row in g.value(lat).data().chunks(6) {
            let s: f64 = row.iter().map(|x| x.exp()).sum();
            assert!((s - 1.0).abs() < 1e-6);
        }
        // Swap frames 0 and 2: lattice rows for t=0 and t=2 swap.
        let mut swapped = fv.data().to_vec();
        let (a, b) = swapped.split_at_mut(6);
        a[..3].swap_with_slice(&mut b[..3]);
        let f2 = g.constant(Tensor::new(swapped, vec![3, 3]).unwrap());
        let lat2 = head.lattice(&mut g, f2, &[1, 2]).unwrap();
        let (l1, l2) = (g.value(lat).data(), g.value(lat2).data());
        let block = 3 * 6;
        assert_eq!(&l1[..block], &l2[2 * block..]);
        assert_eq!(&l1[block..2 * block], &l2[block..2 * block]);
    }

    #[test]
    fn greedy_decode_blank_dominant_emits_nothing() {
        let (mut store, head) = build(&tiny(), 3);
        let b = head.joint.out_layer().b.unwrap();
        store.get_mut(b).data_mut()[5] = 100.0;
        let mut g = Graph::new(&store);
        let f = g.constant(random_f(4, 3, 2));
        assert!(head.greedy_decode(&mut g, f).unwrap().is_empty());
    }

    #[test]
    fn greedy_decode_respects_emission_cap() {
        let (mut store, head) = build(&tiny(), 3);
        let b = head.joint.out_layer().b.unwrap();
        store.get_mut(b).data_mut()[2] = 100.0;
        let mut g = Graph::new(&store);
        let f = g.constant(random_f(4, 3, 3));
        let out = head.greedy_decode(&mut g, f).unwrap();
        assert_eq!(out.len(), MAX_SYMBOLS_PER_FRAME * 4);
        assert!(out.iter().all(|&k| k == 2));
    }
}
