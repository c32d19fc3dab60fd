//! Deep biaffine arc and label scoring, the training loss, and decoding.
//!
//! Arc scores are built dependent-major on the tape (`T[i][j]` = score of
//! `j` heading `i`) because that is the orientation the per-dependent softmax
//! needs; [`ScoreMatrix`] is the head-major view used by the decoder.

mod mst;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::layout::ParamLayout;
use crate::numcore::{Tape, TapeError, Tensor, Var};

pub use mst::{chu_liu_edmonds, decode_mst, tree_score};

#[derive(Debug, Error, PartialEq)]
pub enum ParserError {
    #[error("head {head} of token {token} outside 0..={n}")]
    HeadOutOfRange { token: usize, head: usize, n: usize },
    #[error("label id {label} of token {token} outside the inventory of {labels}")]
    LabelOutOfRange { token: usize, label: usize, labels: usize },
    #[error(transparent)]
    Tape(#[from] TapeError),
}

/// `S[j][i]`: score of token `j` (0 = root) heading token `i`. Column 0 and
/// the diagonal hold `-inf`.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoreMatrix {
    n: usize,
    data: Vec<f64>,
}

impl ScoreMatrix {
    fn masked(n: usize, get: impl Fn(usize, usize) -> f64) -> Self {
        let size = n + 1;
        let mut data = vec![f64::NEG_INFINITY; size * size];
        for j in 0..size {
            for i in 1..size {
                if i != j {
                    data[j * size + i] = get(j, i);
                }
            }
        }
        ScoreMatrix { n, data }
    }

    /// From rows indexed by head, columns by dependent.
    pub fn from_head_major(raw: &[Vec<f64>]) -> Self {
        let n = raw.len().saturating_sub(1);
        Self::masked(n, |j, i| raw[j][i])
    }

    /// From the dependent-major tape layout.
    pub fn from_dependent_major(t: &Tensor) -> Self {
        let n = t.rows().saturating_sub(1);
        Self::masked(n, |j, i| t.at(i, j))
    }

    /// Number of tokens (excluding the root).
    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn get(&self, head: usize, dep: usize) -> f64 {
        self.data[head * (self.n + 1) + dep]
    }

    pub fn to_nested(&self) -> Vec<Vec<f64>> {
        self.data.chunks(self.n + 1).map(<[f64]>::to_vec).collect()
    }

    /// Adds `c` to every legal arc.
    pub fn shifted(&self, c: f64) -> Self {
        Self::masked(self.n, |j, i| self.get(j, i) + c)
    }
}

/// Sizes of the biaffine scorer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BiaffineDims {
    /// Encoder width.
    pub input: usize,
    pub arc: usize,
    pub label: usize,
    /// Label inventory size.
    pub labels: usize,
}

const BIAFFINE_NAMES: [&str; 13] = [
    "arc_head.w",
    "arc_head.b",
    "arc_tail.w",
    "arc_tail.b",
    "u_arc",
    "u_arc.bias",
    "label_head.w",
    "label_head.b",
    "label_tail.w",
    "label_tail.b",
    "u_rel",
    "w_rel",
    "b_rel",
];

impl BiaffineDims {
    /// Flattening order: arc MLPs, `U_arc`, `u_arc`, label MLPs, `U_rel`,
    /// `W_rel`, `b_rel`. `U_rel` is stored as `[label, K·label]` with the
    /// matrix for label `y` in columns `y·label..(y+1)·label`.
    pub fn layout(&self) -> ParamLayout {
        let BiaffineDims {
            input: d,
            arc,
            label,
            labels: k,
        } = *self;
        let shapes: [Vec<usize>; 13] = [
            vec![d, arc],
            vec![arc],
            vec![d, arc],
            vec![arc],
            vec![arc, arc],
            vec![arc, 1],
            vec![d, label],
            vec![label],
            vec![d, label],
            vec![label],
            vec![label, k * label],
            vec![k, 2 * label],
            vec![k],
        ];
        let mut layout = ParamLayout::new();
        for (name, shape) in BIAFFINE_NAMES.iter().zip(&shapes) {
            layout.push(*name, shape);
        }
        layout
    }

    pub fn param_count(&self) -> usize {
        self.layout().total()
    }

    /// Standard deviation used to initialize each layout entry: He-style for
    /// the projection weights, zero for biases and the biaffine classifiers.
    pub fn init_stds(&self) -> Vec<f64> {
        let he = (2.0 / self.input as f64).sqrt();
        BIAFFINE_NAMES
            .iter()
            .map(|name| if name.ends_with(".w") { he } else { 0.0 })
            .collect()
    }

    pub fn init<R: Rng + ?Sized>(&self, rng: &mut R) -> Tensor {
        let layout = self.layout();
        let parts: Vec<Tensor> = layout
            .entries()
            .iter()
            .zip(self.init_stds())
            .map(|(e, std)| init_tensor(&e.shape, std, rng))
            .collect();
        layout.flatten(&parts).expect("layout shapes")
    }
}

pub(crate) fn init_tensor<R: Rng + ?Sized>(shape: &[usize], std: f64, rng: &mut R) -> Tensor {
    if std == 0.0 {
        Tensor::zeros(shape)
    } else {
        Tensor::randn(shape, std, rng)
    }
}

/// Biaffine parameters bound on a tape.
#[derive(Clone, Copy, Debug)]
pub struct BiaffineVars {
    pub arc_head: (Var, Var),
    pub arc_tail: (Var, Var),
    pub u_arc: Var,
    pub u_arc_bias: Var,
    pub label_head: (Var, Var),
    pub label_tail: (Var, Var),
    pub u_rel: Var,
    pub w_rel: Var,
    pub b_rel: Var,
    pub labels: usize,
}

impl BiaffineVars {
    /// Binds a flat parameter vector laid out by [`BiaffineDims::layout`].
    pub fn bind(tape: &mut Tape, dims: &BiaffineDims, flat: Var) -> Self {
        let v = dims.layout().bind(tape, flat);
        BiaffineVars {
            arc_head: (v[0], v[1]),
            arc_tail: (v[2], v[3]),
            u_arc: v[4],
            u_arc_bias: v[5],
            label_head: (v[6], v[7]),
            label_tail: (v[8], v[9]),
            u_rel: v[10],
            w_rel: v[11],
            b_rel: v[12],
            labels: dims.labels,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Projection {
    ArcHead,
    ArcTail,
    LabelHead,
    LabelTail,
}

/// One feedforward layer with a ReLU, applied row-wise, then dropout.
pub fn project<R: Rng + ?Sized>(
    tape: &mut Tape,
    r: Var,
    which: Projection,
    p: &BiaffineVars,
    dropout: f64,
    rng: &mut R,
) -> Var {
    let (w, b) = match which {
        Projection::ArcHead => p.arc_head,
        Projection::ArcTail => p.arc_tail,
        Projection::LabelHead => p.label_head,
        Projection::LabelTail => p.label_tail,
    };
    let h = tape.matmul(r, w);
    let h = tape.add_row(h, b);
    let h = tape.relu(h);
    tape.dropout(h, dropout, rng)
}

/// Dependent-major arc scores, `T[i][j] = h_head[j]ᵀ·U·h_tail[i] + uᵀ·h_head[j]`.
/// No masking is applied on the tape.
pub fn score_arcs(tape: &mut Tape, h_head: Var, h_tail: Var, p: &BiaffineVars) -> Var {
    let tail_u = tape.matmul_t(h_tail, p.u_arc, false, true);
    let bilinear = tape.matmul_t(tail_u, h_head, false, true);
    let head_bias = tape.matmul(h_head, p.u_arc_bias);
    tape.add_row(bilinear, head_bias)
}

/// Label scores for tokens `1..=n` attached to `heads` (`heads[i]` heads
/// token `i + 1`). Returns an `n × K` matrix.
pub fn score_labels(
    tape: &mut Tape,
    h_lhead: Var,
    h_ltail: Var,
    heads: &[usize],
    p: &BiaffineVars,
) -> Result<Var, ParserError> {
    let n = heads.len();
    let rows = tape.value(h_lhead).rows();
    assert_eq!(rows, n + 1, "label projections must include the root row");
    if let Some((i, &h)) = heads.iter().enumerate().find(|(_, &h)| h > n) {
        return Err(ParserError::HeadOutOfRange {
            token: i + 1,
            head: h,
            n,
        });
    }
    let deps: Vec<usize> = (1..=n).collect();
    let hh = tape.gather_rows(h_lhead, heads);
    let ht = tape.gather_rows(h_ltail, &deps);
    let hu = tape.matmul(hh, p.u_rel);
    let bilinear = tape.block_row_dot(hu, ht, p.labels);
    let pair = tape.concat_cols(&[hh, ht]);
    let linear = tape.matmul_t(pair, p.w_rel, false, true);
    let sum = tape.add(bilinear, linear);
    Ok(tape.add_row(sum, p.b_rel))
}

/// Label smoothing for the two loss terms.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Smoothing {
    pub arc: f64,
    pub label: f64,
}

impl Smoothing {
    pub fn both(eps: f64) -> Self {
        Smoothing { arc: eps, label: eps }
    }
}

/// Mask over the dependent rows `1..=n` of the dependent-major arc scores:
/// a token cannot head itself.
fn arc_mask(n: usize) -> Vec<bool> {
    let mut mask = vec![false; n * (n + 1)];
    for r in 0..n {
        mask[r * (n + 1) + r + 1] = true;
    }
    mask
}

/// Per-token mean of head cross-entropy plus per-token mean of label
/// cross-entropy, each against `(1-ε)·onehot + ε·uniform` targets.
///
/// `arcs` is the dependent-major score matrix from [`score_arcs`];
/// `labels` the `n × K` scores at the gold heads.
pub fn parse_loss(
    tape: &mut Tape,
    arcs: Var,
    labels: Var,
    gold_heads: &[usize],
    gold_labels: &[usize],
    smoothing: Smoothing,
) -> Result<Var, ParserError> {
    let n = gold_heads.len();
    assert_eq!(gold_labels.len(), n);
    assert!(n > 0, "loss of an empty sentence");
    let k = tape.value(labels).cols();
    for (i, (&h, &y)) in gold_heads.iter().zip(gold_labels).enumerate() {
        if h > n || h == i + 1 {
            return Err(ParserError::HeadOutOfRange { token: i + 1, head: h, n });
        }
        if y >= k {
            return Err(ParserError::LabelOutOfRange {
                token: i + 1,
                label: y,
                labels: k,
            });
        }
    }

    let deps: Vec<usize> = (1..=n).collect();
    let rows = tape.gather_rows(arcs, &deps);
    let mask = arc_mask(n);
    let mut head_target = vec![0.0; n * (n + 1)];
    for (r, &h) in gold_heads.iter().enumerate() {
        for c in 0..=n {
            if !mask[r * (n + 1) + c] {
                head_target[r * (n + 1) + c] = smoothing.arc / n as f64;
            }
        }
        head_target[r * (n + 1) + h] += 1.0 - smoothing.arc;
    }
    let logp = tape.log_softmax_rows(rows, Some(mask))?;
    let head_ce = weighted_neg_sum(tape, logp, head_target, &[n, n + 1]);

    let mut label_target = vec![smoothing.label / k as f64; n * k];
    for (r, &y) in gold_labels.iter().enumerate() {
        label_target[r * k + y] += 1.0 - smoothing.label;
    }
    let logq = tape.log_softmax_rows(labels, None)?;
    let label_ce = weighted_neg_sum(tape, logq, label_target, &[n, k]);

    let total = tape.add(head_ce, label_ce);
    Ok(tape.scale(total, 1.0 / n as f64))
}

fn weighted_neg_sum(tape: &mut Tape, x: Var, weights: Vec<f64>, shape: &[usize]) -> Var {
    let w = tape.constant(Tensor::new(shape.to_vec(), weights).expect("weight shape"));
    let prod = tape.mul(x, w);
    let s = tape.sum(prod);
    tape.scale(s, -1.0)
}

/// Highest scoring label per row; ties go to the lowest label id.
pub fn argmax_labels(scores: &Tensor) -> Vec<usize> {
    (0..scores.rows())
        .map(|r| {
            let row = scores.row(r);
            let mut best = 0;
            for (y, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = y;
                }
            }
            best
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn dims() -> BiaffineDims {
        BiaffineDims {
            input: 3,
            arc: 2,
            label: 2,
            labels: 2,
        }
    }

    fn bind(tape: &mut Tape, parts: &[Tensor]) -> BiaffineVars {
        let flat = dims().layout().flatten(parts).unwrap();
        let v = tape.param(flat);
        BiaffineVars::bind(tape, &dims(), v)
    }

    fn zero_parts() -> Vec<Tensor> {
        dims().layout().entries().iter().map(|e| Tensor::zeros(&e.shape)).collect()
    }

    fn t(rows: &[Vec<f64>]) -> Tensor {
        Tensor::from_rows(rows).unwrap()
    }

    #[test]
    fn large_scale_dims() {
        let dims = BiaffineDims {
            input: 768,
            arc: 768,
            label: 256,
            labels: 37,
        };
        let layout = dims.layout();
        assert_eq!(layout.find("arc_head.w").unwrap().shape, vec![768, 768]);
        assert_eq!(layout.find("label_tail.w").unwrap().shape, vec![768, 256]);
        assert_eq!(layout.find("w_rel").unwrap().shape, vec![37, 512]);
    }

    #[test]
    fn zero_projection_is_zero() {
        let mut tape = Tape::new();
        let p = bind(&mut tape, &zero_parts());
        let r = tape.constant(t(&[vec![1.0, -2.0, 3.0], vec![0.5, 0.5, 0.5]]));
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let h = project(&mut tape, r, Projection::ArcHead, &p, 0.0, &mut rng);
        assert!(tape.value(h).data().iter().all(|&v| v == 0.0));
        assert_eq!(tape.value(h).shape(), &[2, 2]);
    }

    #[test]
    fn projection_hand_case() {
        let mut parts = zero_parts();
        parts[6] = t(&[vec![1.0, -1.0], vec![0.5, 2.0], vec![0.0, 1.0]]);
        parts[7] = Tensor::new(vec![2], vec![0.25, -3.0]).unwrap();
        let mut tape = Tape::new();
        let p = bind(&mut tape, &parts);
        let r = tape.constant(t(&[vec![1.0, 2.0, -1.0]]));
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let h = project(&mut tape, r, Projection::LabelHead, &p, 0.0, &mut rng);
        // [1 + 1 + 0 + 0.25, -1 + 4 - 1 - 3] -> relu
        let want = [2.25, 0.0];
        for (g, w) in tape.value(h).data().iter().zip(want) {
            assert!((g - w).abs() < 1e-10);
        }
    }

    #[test]
    fn zero_biaffine_gives_zero_scores_and_masks() {
        let mut tape = Tape::new();
        let p = bind(&mut tape, &zero_parts());
        let h = tape.constant(t(&[vec![1.0, 2.0], vec![3.0, 4.0], vec![5.0, 6.0]]));
        let arcs = score_arcs(&mut tape, h, h, &p);
        let s = ScoreMatrix::from_dependent_major(tape.value(arcs));
        for j in 0..=2 {
            assert_eq!(s.get(j, 0), f64::NEG_INFINITY);
            assert_eq!(s.get(j, j), f64::NEG_INFINITY);
            for i in 1..=2 {
                if i != j {
                    assert_eq!(s.get(j, i), 0.0);
                }
            }
        }
    }

    #[test]
    fn arc_scores_hand_case() {
        let mut parts = zero_parts();
        let u = t(&[vec![1.0, 2.0], vec![0.0, -1.0]]);
        let bias = t(&[vec![0.5], vec![1.5]]);
        parts[4] = u.clone();
        parts[5] = bias.clone();
        let head = t(&[vec![1.0, 0.0], vec![2.0, 1.0], vec![-1.0, 3.0]]);
        let tail = t(&[vec![0.0, 1.0], vec![1.0, 1.0], vec![2.0, -1.0]]);
        let mut tape = Tape::new();
        let p = bind(&mut tape, &parts);
        let hh = tape.constant(head.clone());
        let ht = tape.constant(tail.clone());
        let arcs = score_arcs(&mut tape, hh, ht, &p);
        let s = ScoreMatrix::from_dependent_major(tape.value(arcs));
        for j in 0..3 {
            for i in 1..3 {
                if i == j {
                    continue;
                }
                let mut want = 0.0;
                for a in 0..2 {
                    for b in 0..2 {
                        want += head.at(j, a) * u.at(a, b) * tail.at(i, b);
                    }
                    want += bias.at(a, 0) * head.at(j, a);
                }
                assert!((s.get(j, i) - want).abs() < 1e-10, "({j},{i})");
            }
        }
    }

    #[test]
    fn label_scores_hand_case() {
        let mut parts = zero_parts();
        // U_0 = [[1,0],[0,1]], U_1 = [[0,2],[1,0]] laid out side by side.
        parts[10] = t(&[vec![1.0, 0.0, 0.0, 2.0], vec![0.0, 1.0, 1.0, 0.0]]);
        parts[11] = t(&[vec![1.0, 0.0, 0.0, -1.0], vec![0.0, 0.5, 0.5, 0.0]]);
        parts[12] = Tensor::new(vec![2], vec![0.1, -0.2]).unwrap();
        let lh = t(&[vec![1.0, 1.0], vec![2.0, 0.0], vec![0.0, 3.0]]);
        let lt = t(&[vec![9.0, 9.0], vec![1.0, 2.0], vec![-1.0, 1.0]]);
        let mut tape = Tape::new();
        let p = bind(&mut tape, &parts);
        let a = tape.constant(lh.clone());
        let b = tape.constant(lt.clone());
        let heads = [2, 0];
        let scores = score_labels(&mut tape, a, b, &heads, &p).unwrap();
        let u = [[[1.0, 0.0], [0.0, 1.0]], [[0.0, 2.0], [1.0, 0.0]]];
        let w = [[1.0, 0.0, 0.0, -1.0], [0.0, 0.5, 0.5, 0.0]];
        let bias = [0.1, -0.2];
        for (i, &h) in heads.iter().enumerate() {
            let x = lh.row(h);
            let y = lt.row(i + 1);
            for label in 0..2 {
                let mut want = bias[label];
                for pi in 0..2 {
                    for q in 0..2 {
                        want += x[pi] * u[label][pi][q] * y[q];
                    }
                }
                let cat = [x[0], x[1], y[0], y[1]];
                want += (0..4).map(|c| w[label][c] * cat[c]).sum::<f64>();
                assert!((tape.value(scores).at(i, label) - want).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn label_scores_are_local() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let dims = dims();
        let flat = dims.init(&mut rng);
        let flat = Tensor::new(
            vec![flat.len()],
            flat.data().iter().enumerate().map(|(i, v)| v + (i as f64 * 0.37).sin()).collect(),
        )
        .unwrap();
        let lh = Tensor::randn(&[4, 2], 1.0, &mut rng);
        let lt = Tensor::randn(&[4, 2], 1.0, &mut rng);
        let heads = [0, 1, 1];
        let run = |lh: &Tensor, lt: &Tensor| {
            let mut tape = Tape::new();
            let v = tape.constant(flat.clone());
            let p = BiaffineVars::bind(&mut tape, &dims, v);
            let a = tape.constant(lh.clone());
            let b = tape.constant(lt.clone());
            let s = score_labels(&mut tape, a, b, &heads, &p).unwrap();
            tape.value(s).clone()
        };
        let base = run(&lh, &lt);
        // Token 1 (row 0) depends on head row 0 and tail row 1 only; change row 3.
        let mut lh2 = lh.clone();
        let mut lt2 = lt.clone();
        lh2.data_mut()[6] += 5.0;
        lt2.data_mut()[7] -= 2.0;
        let other = run(&lh2, &lt2);
        assert_eq!(base.row(0), other.row(0));
        assert_ne!(base.row(2), other.row(2));
    }

    #[test]
    fn out_of_range_head_rejected() {
        let mut tape = Tape::new();
        let p = bind(&mut tape, &zero_parts());
        let a = tape.constant(Tensor::zeros(&[3, 2]));
        assert!(matches!(
            score_labels(&mut tape, a, a, &[0, 7], &p),
            Err(ParserError::HeadOutOfRange { token: 2, head: 7, .. })
        ));
    }

    #[test]
    fn zero_label_scores_pick_label_zero() {
        assert_eq!(argmax_labels(&Tensor::zeros(&[3, 4])), vec![0, 0, 0]);
        assert_eq!(argmax_labels(&t(&[vec![0.0, 2.0, 2.0]])), vec![1]);
    }

    fn loss_value(arcs: Tensor, labels: Tensor, heads: &[usize], gold: &[usize], eps: f64) -> f64 {
        let mut tape = Tape::new();
        let a = tape.param(arcs);
        let l = tape.param(labels);
        let loss = parse_loss(&mut tape, a, l, heads, gold, Smoothing::both(eps)).unwrap();
        tape.value(loss).data()[0]
    }

    #[test]
    fn confident_correct_model_has_zero_loss() {
        let big = 1e4;
        // Two tokens: heads [2, 0]; dependent-major rows 1 and 2.
        let arcs = t(&[
            vec![0.0, 0.0, 0.0],
            vec![0.0, 0.0, big],
            vec![big, 0.0, 0.0],
        ]);
        let labels = t(&[vec![big, 0.0], vec![0.0, big]]);
        let loss = loss_value(arcs, labels, &[2, 0], &[0, 1], 0.0);
        assert!(loss.abs() < 1e-12, "{loss}");
    }

    #[test]
    fn uniform_scores_give_log_n_head_term() {
        for n in 1..6 {
            for eps in [0.0, 0.03, 0.5] {
                let arcs = Tensor::zeros(&[n + 1, n + 1]);
                let labels = Tensor::zeros(&[n, 3]);
                let heads: Vec<usize> = (0..n).collect();
                let loss = loss_value(arcs, labels, &heads, &vec![0; n], eps);
                let want = (n as f64).ln() + 3f64.ln();
                assert!((loss - want).abs() < 1e-12, "n={n} eps={eps}");
            }
        }
    }

    #[test]
    fn smoothed_label_loss_hand_case() {
        // One token, heads [0], so the head term is ln(1) = 0.
        let scores = [0.3, -1.2, 2.0];
        let eps = 0.03;
        let lse = scores.iter().map(|s: &f64| s.exp()).sum::<f64>().ln();
        let gold = 1;
        let want: f64 = (0..3)
            .map(|y| {
                let target = eps / 3.0 + if y == gold { 1.0 - eps } else { 0.0 };
                -target * (scores[y] - lse)
            })
            .sum();
        let loss = loss_value(Tensor::zeros(&[2, 2]), t(&[scores.to_vec()]), &[0], &[gold], eps);
        assert!((loss - want).abs() < 1e-10);
    }

    #[test]
    fn loss_is_non_negative() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for n in 1..6 {
            let arcs = Tensor::randn(&[n + 1, n + 1], 3.0, &mut rng);
            let labels = Tensor::randn(&[n, 4], 3.0, &mut rng);
            let heads: Vec<usize> = (0..n).collect();
            assert!(loss_value(arcs, labels, &heads, &vec![1; n], 0.03) >= 0.0);
        }
    }
}
