//! Reverse-mode automatic differentiation over dense, row-major `f64` matrices.
//!
//! A [`Tape`] records every operation in topological order; [`Value`] is a
//! cheap copyable handle into the tape. Gradients accumulate additively into
//! each slot's `grad` buffer during [`Tape::backward`], so callers that reuse
//! parameters across steps are responsible for starting each step on a fresh
//! tape (the model re-registers its parameters as leaves every step).
//!
//! The op set is deliberately small: dense matmul, elementwise maps, row/column
//! broadcasts, indexed gathers for neighborhood aggregation, and two fused
//! distance kernels. Everything is `f64`; the models here are tiny and exact
//! finite-difference checks matter more than speed.

use std::cell::RefCell;

/// Norm products below this are treated as zero-length embeddings in the
/// cosine kernel: the distance is pinned to 1.0 and no gradient flows.
const COSINE_NORM_FLOOR: f64 = 1e-24;

/// Handle to one tensor recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Value {
    idx: usize,
    rows: usize,
    cols: usize,
}

impl Value {
    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

struct Slot {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
    grad: Option<Vec<f64>>,
    step: Step,
}

enum Step {
    Leaf { requires_grad: bool },
    Matmul(usize, usize),
    Add(usize, usize),
    AddBias(usize, usize),
    Scale(usize, f64),
    AddConst(usize),
    Mul(usize, usize),
    Tanh(usize),
    Relu(usize),
    Sqrt(usize),
    ConcatRows(usize, usize),
    MeanRows(usize),
    RowSum(usize),
    ScaleRows(usize, Vec<f64>),
    SubRowBc(usize, usize),
    DivRowBc(usize, usize),
    SubColBc(usize, usize),
    DivColBc(usize, usize),
    GatherRows(usize, Vec<u32>),
    GatherMeanRows(usize, Vec<Vec<u32>>),
    GatherSumRows(usize, Vec<Vec<u32>>),
    VCat(Vec<usize>),
    PermuteRows(usize, Vec<u32>),
    SoftmaxRows(usize),
    RowCosineDist(usize, usize),
    RowL1Dist(usize, usize),
    SoftmaxXent {
        logits: usize,
        labels: Vec<u8>,
        weights: Vec<f64>,
    },
}

/// Recording tape. One tape per forward/backward pass; drop it afterwards.
#[derive(Default)]
pub struct Tape {
    slots: RefCell<Vec<Slot>>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Number of recorded tensors.
    pub fn len(&self) -> usize {
        self.slots.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Register a gradient-tracked leaf (a parameter or input).
    pub fn leaf(&self, rows: usize, cols: usize, data: Vec<f64>) -> Value {
        assert_eq!(data.len(), rows * cols, "leaf data length mismatch");
        self.push(rows, cols, data, Step::Leaf { requires_grad: true })
    }

    /// Register a constant leaf; backward never writes a gradient for it.
    pub fn constant(&self, rows: usize, cols: usize, data: Vec<f64>) -> Value {
        assert_eq!(data.len(), rows * cols, "constant data length mismatch");
        self.push(rows, cols, data, Step::Leaf { requires_grad: false })
    }

    /// Overwrite a leaf's data in place (finite-difference probes).
    pub fn set_leaf(&self, v: Value, data: &[f64]) {
        let mut slots = self.slots.borrow_mut();
        let slot = &mut slots[v.idx];
        assert!(
            matches!(slot.step, Step::Leaf { .. }),
            "set_leaf on a non-leaf value"
        );
        assert_eq!(slot.data.len(), data.len(), "set_leaf length mismatch");
        slot.data.copy_from_slice(data);
    }

    /// Copy of a value's forward data.
    pub fn value(&self, v: Value) -> Vec<f64> {
        self.slots.borrow()[v.idx].data.clone()
    }

    /// Forward data of a 1x1 value.
    pub fn scalar(&self, v: Value) -> f64 {
        assert_eq!(v.len(), 1, "scalar() on a non-scalar value");
        self.slots.borrow()[v.idx].data[0]
    }

    /// Accumulated gradient of a value (zeros when backward never reached it).
    pub fn grad(&self, v: Value) -> Vec<f64> {
        let slots = self.slots.borrow();
        match &slots[v.idx].grad {
            Some(g) => g.clone(),
            None => vec![0.0; v.len()],
        }
    }

    fn push(&self, rows: usize, cols: usize, data: Vec<f64>, step: Step) -> Value {
        let mut slots = self.slots.borrow_mut();
        let idx = slots.len();
        slots.push(Slot {
            rows,
            cols,
            data,
            grad: None,
            step,
        });
        Value { idx, rows, cols }
    }

    fn data<R>(&self, v: Value, f: impl FnOnce(&[f64]) -> R) -> R {
        f(&self.slots.borrow()[v.idx].data)
    }

    // ---- forward ops ------------------------------------------------------

    /// Dense matrix product: (m x k) * (k x n) -> (m x n).
    pub fn matmul(&self, a: Value, b: Value) -> Value {
        assert_eq!(a.cols, b.rows, "matmul inner dimension mismatch");
        let out = {
            let slots = self.slots.borrow();
            matmul_forward(
                &slots[a.idx].data,
                &slots[b.idx].data,
                a.rows,
                a.cols,
                b.cols,
            )
        };
        assert_finite(&out, "matmul");
        self.push(a.rows, b.cols, out, Step::Matmul(a.idx, b.idx))
    }

    /// Elementwise sum of two same-shape tensors.
    pub fn add(&self, a: Value, b: Value) -> Value {
        assert_eq!((a.rows, a.cols), (b.rows, b.cols), "add shape mismatch");
        let out = {
            let slots = self.slots.borrow();
            let (x, y) = (&slots[a.idx].data, &slots[b.idx].data);
            x.iter().zip(y).map(|(u, v)| u + v).collect()
        };
        self.push(a.rows, a.cols, out, Step::Add(a.idx, b.idx))
    }

    /// Add a (1 x n) row vector to every row of an (m x n) tensor.
    pub fn add_bias(&self, x: Value, bias: Value) -> Value {
        assert_eq!(bias.rows, 1, "bias must be a row vector");
        assert_eq!(x.cols, bias.cols, "add_bias width mismatch");
        let out = {
            let slots = self.slots.borrow();
            let (xs, bs) = (&slots[x.idx].data, &slots[bias.idx].data);
            let mut out = xs.clone();
            for r in 0..x.rows {
                for c in 0..x.cols {
                    out[r * x.cols + c] += bs[c];
                }
            }
            out
        };
        self.push(x.rows, x.cols, out, Step::AddBias(x.idx, bias.idx))
    }

    /// Multiply every element by a constant.
    pub fn scale(&self, x: Value, c: f64) -> Value {
        let out = self.data(x, |d| d.iter().map(|v| v * c).collect());
        self.push(x.rows, x.cols, out, Step::Scale(x.idx, c))
    }

    /// Add a constant to every element.
    pub fn add_const(&self, x: Value, c: f64) -> Value {
        let out = self.data(x, |d| d.iter().map(|v| v + c).collect());
        self.push(x.rows, x.cols, out, Step::AddConst(x.idx))
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&self, a: Value, b: Value) -> Value {
        assert_eq!((a.rows, a.cols), (b.rows, b.cols), "mul shape mismatch");
        let out = {
            let slots = self.slots.borrow();
            let (x, y) = (&slots[a.idx].data, &slots[b.idx].data);
            x.iter().zip(y).map(|(u, v)| u * v).collect()
        };
        self.push(a.rows, a.cols, out, Step::Mul(a.idx, b.idx))
    }

    pub fn tanh(&self, x: Value) -> Value {
        let out = self.data(x, |d| d.iter().map(|v| v.tanh()).collect());
        self.push(x.rows, x.cols, out, Step::Tanh(x.idx))
    }

    /// Elementwise max(0, x). The subgradient at 0 is 0.
    pub fn relu(&self, x: Value) -> Value {
        let out = self.data(x, |d| d.iter().map(|v| v.max(0.0)).collect());
        self.push(x.rows, x.cols, out, Step::Relu(x.idx))
    }

    /// Elementwise square root. Inputs must be non-negative.
    pub fn sqrt(&self, x: Value) -> Value {
        let out: Vec<f64> = self.data(x, |d| d.iter().map(|v| v.sqrt()).collect());
        assert_finite(&out, "sqrt");
        self.push(x.rows, x.cols, out, Step::Sqrt(x.idx))
    }

    /// Concatenate corresponding rows: (m x p) and (m x q) -> (m x (p+q)).
    pub fn concat_rows(&self, a: Value, b: Value) -> Value {
        assert_eq!(a.rows, b.rows, "concat_rows row-count mismatch");
        let cols = a.cols + b.cols;
        let out = {
            let slots = self.slots.borrow();
            let (x, y) = (&slots[a.idx].data, &slots[b.idx].data);
            let mut out = Vec::with_capacity(a.rows * cols);
            for r in 0..a.rows {
                out.extend_from_slice(&x[r * a.cols..(r + 1) * a.cols]);
                out.extend_from_slice(&y[r * b.cols..(r + 1) * b.cols]);
            }
            out
        };
        self.push(a.rows, cols, out, Step::ConcatRows(a.idx, b.idx))
    }

    /// Mean over the row index: (m x d) -> (1 x d).
    pub fn mean_rows(&self, x: Value) -> Value {
        assert!(x.rows > 0, "mean_rows on an empty tensor");
        let out = self.data(x, |d| {
            let mut out = vec![0.0; x.cols];
            for r in 0..x.rows {
                for c in 0..x.cols {
                    out[c] += d[r * x.cols + c];
                }
            }
            let inv = 1.0 / x.rows as f64;
            out.iter_mut().for_each(|v| *v *= inv);
            out
        });
        self.push(1, x.cols, out, Step::MeanRows(x.idx))
    }

    /// Per-row sum: (m x d) -> (m x 1).
    pub fn row_sum(&self, x: Value) -> Value {
        let out = self.data(x, |d| {
            (0..x.rows)
                .map(|r| d[r * x.cols..(r + 1) * x.cols].iter().sum())
                .collect()
        });
        self.push(x.rows, 1, out, Step::RowSum(x.idx))
    }

    /// Multiply row j by the constant `w[j]` (weights carry no gradient).
    pub fn scale_rows(&self, x: Value, w: &[f64]) -> Value {
        assert_eq!(w.len(), x.rows, "scale_rows weight length mismatch");
        let out = self.data(x, |d| {
            let mut out = d.to_vec();
            for r in 0..x.rows {
                for c in 0..x.cols {
                    out[r * x.cols + c] *= w[r];
                }
            }
            out
        });
        self.push(x.rows, x.cols, out, Step::ScaleRows(x.idx, w.to_vec()))
    }

    /// Subtract a (1 x d) row vector from every row of an (m x d) tensor.
    pub fn sub_row_broadcast(&self, x: Value, r: Value) -> Value {
        assert_eq!(r.rows, 1, "sub_row_broadcast needs a row vector");
        assert_eq!(x.cols, r.cols, "sub_row_broadcast width mismatch");
        let out = {
            let slots = self.slots.borrow();
            let (xs, rs) = (&slots[x.idx].data, &slots[r.idx].data);
            let mut out = xs.clone();
            for i in 0..x.rows {
                for c in 0..x.cols {
                    out[i * x.cols + c] -= rs[c];
                }
            }
            out
        };
        self.push(x.rows, x.cols, out, Step::SubRowBc(x.idx, r.idx))
    }

    /// Divide every row of an (m x d) tensor by a (1 x d) row vector.
    pub fn div_row_broadcast(&self, x: Value, r: Value) -> Value {
        assert_eq!(r.rows, 1, "div_row_broadcast needs a row vector");
        assert_eq!(x.cols, r.cols, "div_row_broadcast width mismatch");
        let out = {
            let slots = self.slots.borrow();
            let (xs, rs) = (&slots[x.idx].data, &slots[r.idx].data);
            let mut out = xs.clone();
            for i in 0..x.rows {
                for c in 0..x.cols {
                    out[i * x.cols + c] /= rs[c];
                }
            }
            out
        };
        assert_finite(&out, "div_row_broadcast");
        self.push(x.rows, x.cols, out, Step::DivRowBc(x.idx, r.idx))
    }

    /// Subtract the (m x 1) column vector from every column: out[j,i] = x[j,i] - c[j].
    pub fn sub_col_broadcast(&self, x: Value, c: Value) -> Value {
        assert_eq!(c.cols, 1, "sub_col_broadcast needs a column vector");
        assert_eq!(x.rows, c.rows, "sub_col_broadcast height mismatch");
        let out = {
            let slots = self.slots.borrow();
            let (xs, cs) = (&slots[x.idx].data, &slots[c.idx].data);
            let mut out = xs.clone();
            for r in 0..x.rows {
                for i in 0..x.cols {
                    out[r * x.cols + i] -= cs[r];
                }
            }
            out
        };
        self.push(x.rows, x.cols, out, Step::SubColBc(x.idx, c.idx))
    }

    /// Divide row j by the scalar c[j]: out[j,i] = x[j,i] / c[j].
    pub fn div_col_broadcast(&self, x: Value, c: Value) -> Value {
        assert_eq!(c.cols, 1, "div_col_broadcast needs a column vector");
        assert_eq!(x.rows, c.rows, "div_col_broadcast height mismatch");
        let out = {
            let slots = self.slots.borrow();
            let (xs, cs) = (&slots[x.idx].data, &slots[c.idx].data);
            let mut out = xs.clone();
            for r in 0..x.rows {
                for i in 0..x.cols {
                    out[r * x.cols + i] /= cs[r];
                }
            }
            out
        };
        assert_finite(&out, "div_col_broadcast");
        self.push(x.rows, x.cols, out, Step::DivColBc(x.idx, c.idx))
    }

    /// Gather rows by index: out row j = x row ids[j].
    pub fn gather_rows(&self, x: Value, ids: &[u32]) -> Value {
        let out = self.data(x, |d| {
            let mut out = Vec::with_capacity(ids.len() * x.cols);
            for &id in ids {
                let id = id as usize;
                assert!(id < x.rows, "gather_rows index out of range");
                out.extend_from_slice(&d[id * x.cols..(id + 1) * x.cols]);
            }
            out
        });
        self.push(ids.len(), x.cols, out, Step::GatherRows(x.idx, ids.to_vec()))
    }

    /// Per-list mean of gathered rows; an empty list yields a zero row.
    pub fn gather_mean_rows(&self, x: Value, lists: Vec<Vec<u32>>) -> Value {
        let m = lists.len();
        let out = self.data(x, |d| gather_reduce(d, x.rows, x.cols, &lists, true));
        self.push(m, x.cols, out, Step::GatherMeanRows(x.idx, lists))
    }

    /// Per-list sum of gathered rows; an empty list yields a zero row.
    pub fn gather_sum_rows(&self, x: Value, lists: Vec<Vec<u32>>) -> Value {
        let m = lists.len();
        let out = self.data(x, |d| gather_reduce(d, x.rows, x.cols, &lists, false));
        self.push(m, x.cols, out, Step::GatherSumRows(x.idx, lists))
    }

    /// Stack tensors vertically in order. All parts must share a width.
    pub fn vcat(&self, parts: &[Value]) -> Value {
        assert!(!parts.is_empty(), "vcat of nothing");
        let cols = parts[0].cols;
        let rows: usize = parts.iter().map(|p| p.rows).sum();
        let out = {
            let slots = self.slots.borrow();
            let mut out = Vec::with_capacity(rows * cols);
            for p in parts {
                assert_eq!(p.cols, cols, "vcat width mismatch");
                out.extend_from_slice(&slots[p.idx].data);
            }
            out
        };
        self.push(rows, cols, out, Step::VCat(parts.iter().map(|p| p.idx).collect()))
    }

    /// Reorder rows: out row j = x row perm[j]. `perm` must be a permutation.
    pub fn permute_rows(&self, x: Value, perm: &[u32]) -> Value {
        assert_eq!(perm.len(), x.rows, "permute_rows length mismatch");
        let out = self.data(x, |d| {
            let mut out = Vec::with_capacity(d.len());
            for &p in perm {
                let p = p as usize;
                out.extend_from_slice(&d[p * x.cols..(p + 1) * x.cols]);
            }
            out
        });
        self.push(x.rows, x.cols, out, Step::PermuteRows(x.idx, perm.to_vec()))
    }

    /// Row-wise softmax, log-sum-exp stabilized.
    pub fn softmax_rows(&self, x: Value) -> Value {
        let out = self.data(x, |d| {
            let mut out = vec![0.0; d.len()];
            for r in 0..x.rows {
                softmax_into(&d[r * x.cols..(r + 1) * x.cols], &mut out[r * x.cols..(r + 1) * x.cols]);
            }
            out
        });
        assert_finite(&out, "softmax_rows");
        self.push(x.rows, x.cols, out, Step::SoftmaxRows(x.idx))
    }

    /// Per-row cosine distance 1 - cos(a_j, b_j) between aligned rows,
    /// producing (m x 1) in [0, 2]. Rows with a vanishing norm get distance
    /// 1.0 and a zero gradient.
    pub fn row_cosine_distance(&self, a: Value, b: Value) -> Value {
        assert_eq!((a.rows, a.cols), (b.rows, b.cols), "cosine shape mismatch");
        let out = {
            let slots = self.slots.borrow();
            let (xs, ys) = (&slots[a.idx].data, &slots[b.idx].data);
            (0..a.rows)
                .map(|r| {
                    let x = &xs[r * a.cols..(r + 1) * a.cols];
                    let y = &ys[r * a.cols..(r + 1) * a.cols];
                    cosine_distance_raw(x, y)
                })
                .collect::<Vec<f64>>()
        };
        assert_finite(&out, "row_cosine_distance");
        self.push(a.rows, 1, out, Step::RowCosineDist(a.idx, b.idx))
    }

    /// Per-row mean absolute difference between aligned rows: (m x 1) in [0, 1]
    /// when both inputs are probability rows.
    pub fn row_l1_distance(&self, a: Value, b: Value) -> Value {
        assert_eq!((a.rows, a.cols), (b.rows, b.cols), "l1 shape mismatch");
        let out = {
            let slots = self.slots.borrow();
            let (xs, ys) = (&slots[a.idx].data, &slots[b.idx].data);
            (0..a.rows)
                .map(|r| {
                    let x = &xs[r * a.cols..(r + 1) * a.cols];
                    let y = &ys[r * a.cols..(r + 1) * a.cols];
                    l1_distance_raw(x, y)
                })
                .collect::<Vec<f64>>()
        };
        self.push(a.rows, 1, out, Step::RowL1Dist(a.idx, b.idx))
    }

    /// Class-weighted softmax cross-entropy over (m x C) logits, normalized by
    /// the total weight of the batch. Returns a 1x1 loss.
    pub fn softmax_cross_entropy(&self, logits: Value, labels: &[u8], weights: &[f64]) -> Value {
        assert_eq!(labels.len(), logits.rows, "label count mismatch");
        assert!(weights.iter().all(|w| *w > 0.0), "class weights must be positive");
        let loss = {
            let slots = self.slots.borrow();
            let d = &slots[logits.idx].data;
            let c = logits.cols;
            let mut num = 0.0;
            let mut den = 0.0;
            for (r, &y) in labels.iter().enumerate() {
                let y = y as usize;
                assert!(y < c, "label out of range");
                let row = &d[r * c..(r + 1) * c];
                let nll = log_sum_exp(row) - row[y];
                num += weights[y] * nll;
                den += weights[y];
            }
            vec![num / den]
        };
        assert_finite(&loss, "softmax_cross_entropy");
        self.push(
            1,
            1,
            loss,
            Step::SoftmaxXent {
                logits: logits.idx,
                labels: labels.to_vec(),
                weights: weights.to_vec(),
            },
        )
    }

    // ---- backward ---------------------------------------------------------

    /// Reverse pass from a 1x1 loss. Gradients accumulate (sum) into every
    /// slot reached; tracked leaves keep theirs for [`Tape::grad`].
    pub fn backward(&self, loss: Value) {
        assert_eq!(loss.len(), 1, "backward requires a scalar loss");
        let mut slots = self.slots.borrow_mut();
        accumulate(&mut slots[loss.idx].grad, &[1.0]);
        for i in (0..slots.len()).rev() {
            let Some(g) = slots[i].grad.take() else { continue };
            let step = std::mem::replace(&mut slots[i].step, Step::Leaf { requires_grad: false });
            let own = std::mem::take(&mut slots[i].data);
            let (rows, cols) = (slots[i].rows, slots[i].cols);
            backprop_step(&mut slots, &step, &own, &g, rows, cols);
            let slot = &mut slots[i];
            slot.data = own;
            slot.step = step;
            if matches!(slot.step, Step::Leaf { requires_grad: true }) {
                slot.grad = Some(g);
            }
        }
    }
}

fn backprop_step(slots: &mut [Slot], step: &Step, own: &[f64], g: &[f64], rows: usize, cols: usize) {
    match step {
        Step::Leaf { .. } => {}
        Step::Matmul(a, b) => {
            let (ar, ac) = (slots[*a].rows, slots[*a].cols);
            let bc = slots[*b].cols;
            // dA = g . B^T, with B transposed up front so the inner loop
            // walks contiguous memory.
            let da = {
                let bd = &slots[*b].data;
                let mut bt = vec![0.0; ac * bc];
                for k in 0..ac {
                    for c in 0..bc {
                        bt[c * ac + k] = bd[k * bc + c];
                    }
                }
                let mut da = vec![0.0; ar * ac];
                for r in 0..ar {
                    let row = &mut da[r * ac..(r + 1) * ac];
                    for c in 0..bc {
                        let gv = g[r * bc + c];
                        if gv == 0.0 {
                            continue;
                        }
                        let brow = &bt[c * ac..(c + 1) * ac];
                        for (o, bv) in row.iter_mut().zip(brow) {
                            *o += gv * bv;
                        }
                    }
                }
                da
            };
            accumulate(&mut slots[*a].grad, &da);
            // dB = A^T . g
            let db = {
                let ad = &slots[*a].data;
                let mut db = vec![0.0; ac * bc];
                for r in 0..ar {
                    let grow = &g[r * bc..(r + 1) * bc];
                    for k in 0..ac {
                        let av = ad[r * ac + k];
                        if av == 0.0 {
                            continue;
                        }
                        let drow = &mut db[k * bc..(k + 1) * bc];
                        for (o, gv) in drow.iter_mut().zip(grow) {
                            *o += av * gv;
                        }
                    }
                }
                db
            };
            accumulate(&mut slots[*b].grad, &db);
        }
        Step::Add(a, b) => {
            accumulate(&mut slots[*a].grad, g);
            accumulate(&mut slots[*b].grad, g);
        }
        Step::AddBias(x, bias) => {
            accumulate(&mut slots[*x].grad, g);
            let mut db = vec![0.0; cols];
            for r in 0..rows {
                for c in 0..cols {
                    db[c] += g[r * cols + c];
                }
            }
            accumulate(&mut slots[*bias].grad, &db);
        }
        Step::Scale(x, c) => {
            let dx: Vec<f64> = g.iter().map(|v| v * c).collect();
            accumulate(&mut slots[*x].grad, &dx);
        }
        Step::AddConst(x) => accumulate(&mut slots[*x].grad, g),
        Step::Mul(a, b) => {
            let da: Vec<f64> = slots[*b].data.iter().zip(g).map(|(v, gg)| v * gg).collect();
            accumulate(&mut slots[*a].grad, &da);
            let db: Vec<f64> = slots[*a].data.iter().zip(g).map(|(v, gg)| v * gg).collect();
            accumulate(&mut slots[*b].grad, &db);
        }
        Step::Tanh(x) => {
            let dx: Vec<f64> = own.iter().zip(g).map(|(y, gg)| gg * (1.0 - y * y)).collect();
            accumulate(&mut slots[*x].grad, &dx);
        }
        Step::Relu(x) => {
            let dx: Vec<f64> = slots[*x]
                .data
                .iter()
                .zip(g)
                .map(|(v, gg)| if *v > 0.0 { *gg } else { 0.0 })
                .collect();
            accumulate(&mut slots[*x].grad, &dx);
        }
        Step::Sqrt(x) => {
            let dx: Vec<f64> = own.iter().zip(g).map(|(y, gg)| gg / (2.0 * y)).collect();
            accumulate(&mut slots[*x].grad, &dx);
        }
        Step::ConcatRows(a, b) => {
            let (ac, bc) = (slots[*a].cols, slots[*b].cols);
            let mut da = vec![0.0; rows * ac];
            let mut db = vec![0.0; rows * bc];
            for r in 0..rows {
                da[r * ac..(r + 1) * ac].copy_from_slice(&g[r * cols..r * cols + ac]);
                db[r * bc..(r + 1) * bc].copy_from_slice(&g[r * cols + ac..(r + 1) * cols]);
            }
            accumulate(&mut slots[*a].grad, &da);
            accumulate(&mut slots[*b].grad, &db);
        }
        Step::MeanRows(x) => {
            let m = slots[*x].rows;
            let inv = 1.0 / m as f64;
            let mut dx = vec![0.0; m * cols];
            for r in 0..m {
                for c in 0..cols {
                    dx[r * cols + c] = g[c] * inv;
                }
            }
            accumulate(&mut slots[*x].grad, &dx);
        }
        Step::RowSum(x) => {
            let xc = slots[*x].cols;
            let mut dx = vec![0.0; rows * xc];
            for r in 0..rows {
                for c in 0..xc {
                    dx[r * xc + c] = g[r];
                }
            }
            accumulate(&mut slots[*x].grad, &dx);
        }
        Step::ScaleRows(x, w) => {
            let mut dx = g.to_vec();
            for r in 0..rows {
                for c in 0..cols {
                    dx[r * cols + c] *= w[r];
                }
            }
            accumulate(&mut slots[*x].grad, &dx);
        }
        Step::SubRowBc(x, rvec) => {
            accumulate(&mut slots[*x].grad, g);
            let mut dr = vec![0.0; cols];
            for r in 0..rows {
                for c in 0..cols {
                    dr[c] -= g[r * cols + c];
                }
            }
            accumulate(&mut slots[*rvec].grad, &dr);
        }
        Step::DivRowBc(x, rvec) => {
            let rd = &slots[*rvec].data;
            let mut dx = g.to_vec();
            let mut dr = vec![0.0; cols];
            for r in 0..rows {
                for c in 0..cols {
                    dx[r * cols + c] /= rd[c];
                    dr[c] -= g[r * cols + c] * own[r * cols + c] / rd[c];
                }
            }
            accumulate(&mut slots[*x].grad, &dx);
            accumulate(&mut slots[*rvec].grad, &dr);
        }
        Step::SubColBc(x, cvec) => {
            accumulate(&mut slots[*x].grad, g);
            let mut dc = vec![0.0; rows];
            for r in 0..rows {
                for c in 0..cols {
                    dc[r] -= g[r * cols + c];
                }
            }
            accumulate(&mut slots[*cvec].grad, &dc);
        }
        Step::DivColBc(x, cvec) => {
            let cd = &slots[*cvec].data;
            let mut dx = g.to_vec();
            let mut dc = vec![0.0; rows];
            for r in 0..rows {
                for c in 0..cols {
                    dx[r * cols + c] /= cd[r];
                    dc[r] -= g[r * cols + c] * own[r * cols + c] / cd[r];
                }
            }
            accumulate(&mut slots[*x].grad, &dx);
            accumulate(&mut slots[*cvec].grad, &dc);
        }
        Step::GatherRows(x, ids) => {
            let mut dx = vec![0.0; slots[*x].rows * cols];
            for (j, &id) in ids.iter().enumerate() {
                let id = id as usize;
                for c in 0..cols {
                    dx[id * cols + c] += g[j * cols + c];
                }
            }
            accumulate(&mut slots[*x].grad, &dx);
        }
        Step::GatherMeanRows(x, lists) => {
            let mut dx = vec![0.0; slots[*x].rows * cols];
            for (j, list) in lists.iter().enumerate() {
                if list.is_empty() {
                    continue;
                }
                let inv = 1.0 / list.len() as f64;
                for &v in list {
                    let v = v as usize;
                    for c in 0..cols {
                        dx[v * cols + c] += g[j * cols + c] * inv;
                    }
                }
            }
            accumulate(&mut slots[*x].grad, &dx);
        }
        Step::GatherSumRows(x, lists) => {
            let mut dx = vec![0.0; slots[*x].rows * cols];
            for (j, list) in lists.iter().enumerate() {
                for &v in list {
                    let v = v as usize;
                    for c in 0..cols {
                        dx[v * cols + c] += g[j * cols + c];
                    }
                }
            }
            accumulate(&mut slots[*x].grad, &dx);
        }
        Step::VCat(parts) => {
            let mut offset = 0;
            for p in parts {
                let pr = slots[*p].rows;
                let part = &g[offset * cols..(offset + pr) * cols];
                accumulate(&mut slots[*p].grad, part);
                offset += pr;
            }
        }
        Step::PermuteRows(x, perm) => {
            let mut dx = vec![0.0; rows * cols];
            for (j, &p) in perm.iter().enumerate() {
                let p = p as usize;
                for c in 0..cols {
                    dx[p * cols + c] += g[j * cols + c];
                }
            }
            accumulate(&mut slots[*x].grad, &dx);
        }
        Step::SoftmaxRows(x) => {
            let mut dx = vec![0.0; rows * cols];
            for r in 0..rows {
                let y = &own[r * cols..(r + 1) * cols];
                let gr = &g[r * cols..(r + 1) * cols];
                let dot: f64 = y.iter().zip(gr).map(|(a, b)| a * b).sum();
                for c in 0..cols {
                    dx[r * cols + c] = y[c] * (gr[c] - dot);
                }
            }
            accumulate(&mut slots[*x].grad, &dx);
        }
        Step::RowCosineDist(a, b) => {
            let w = slots[*a].cols;
            let (da, db) = {
                let (ad, bd) = (&slots[*a].data, &slots[*b].data);
                let mut da = vec![0.0; rows * w];
                let mut db = vec![0.0; rows * w];
                for r in 0..rows {
                    let x = &ad[r * w..(r + 1) * w];
                    let y = &bd[r * w..(r + 1) * w];
                    let nx = norm2(x);
                    let ny = norm2(y);
                    if nx * ny < COSINE_NORM_FLOOR {
                        continue;
                    }
                    let dot: f64 = x.iter().zip(y).map(|(u, v)| u * v).sum();
                    let s = dot / (nx * ny);
                    let gr = g[r];
                    for c in 0..w {
                        // dD/dx = -(y/(|x||y|) - S x/|x|^2)
                        da[r * w + c] = -gr * (y[c] / (nx * ny) - s * x[c] / (nx * nx));
                        db[r * w + c] = -gr * (x[c] / (nx * ny) - s * y[c] / (ny * ny));
                    }
                }
                (da, db)
            };
            accumulate(&mut slots[*a].grad, &da);
            accumulate(&mut slots[*b].grad, &db);
        }
        Step::RowL1Dist(a, b) => {
            let w = slots[*a].cols;
            let (da, db) = {
                let (ad, bd) = (&slots[*a].data, &slots[*b].data);
                let mut da = vec![0.0; rows * w];
                let mut db = vec![0.0; rows * w];
                let inv = 1.0 / w as f64;
                for r in 0..rows {
                    for c in 0..w {
                        let diff = ad[r * w + c] - bd[r * w + c];
                        let s = if diff > 0.0 {
                            1.0
                        } else if diff < 0.0 {
                            -1.0
                        } else {
                            0.0
                        };
                        da[r * w + c] = g[r] * s * inv;
                        db[r * w + c] = -g[r] * s * inv;
                    }
                }
                (da, db)
            };
            accumulate(&mut slots[*a].grad, &da);
            accumulate(&mut slots[*b].grad, &db);
        }
        Step::SoftmaxXent { logits, labels, weights } => {
            let c = slots[*logits].cols;
            let total_w: f64 = labels.iter().map(|&y| weights[y as usize]).sum();
            let dl = {
                let d = &slots[*logits].data;
                let mut dl = vec![0.0; d.len()];
                let mut probs = vec![0.0; c];
                for (r, &y) in labels.iter().enumerate() {
                    let row = &d[r * c..(r + 1) * c];
                    softmax_into(row, &mut probs);
                    let wy = weights[y as usize] * g[0] / total_w;
                    for k in 0..c {
                        let ind = if k == y as usize { 1.0 } else { 0.0 };
                        dl[r * c + k] = wy * (probs[k] - ind);
                    }
                }
                dl
            };
            accumulate(&mut slots[*logits].grad, &dl);
        }
    }
}

fn accumulate(grad: &mut Option<Vec<f64>>, contrib: &[f64]) {
    match grad {
        Some(g) => {
            debug_assert_eq!(g.len(), contrib.len());
            for (gi, ci) in g.iter_mut().zip(contrib) {
                *gi += ci;
            }
        }
        None => *grad = Some(contrib.to_vec()),
    }
}

fn matmul_forward(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for (r, row) in out.chunks_mut(n).enumerate() {
        for kk in 0..k {
            let av = a[r * k + kk];
            if av == 0.0 {
                continue;
            }
            let brow = &b[kk * n..(kk + 1) * n];
            for (o, bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

fn gather_reduce(d: &[f64], rows: usize, cols: usize, lists: &[Vec<u32>], mean: bool) -> Vec<f64> {
    let mut out = vec![0.0; lists.len() * cols];
    for (j, list) in lists.iter().enumerate() {
        if list.is_empty() {
            continue;
        }
        let row = &mut out[j * cols..(j + 1) * cols];
        for &v in list {
            let v = v as usize;
            assert!(v < rows, "gather index out of range");
            for (o, x) in row.iter_mut().zip(&d[v * cols..(v + 1) * cols]) {
                *o += x;
            }
        }
        if mean {
            let inv = 1.0 / list.len() as f64;
            row.iter_mut().for_each(|o| *o *= inv);
        }
    }
    out
}

fn norm2(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>().sqrt()
}

fn log_sum_exp(row: &[f64]) -> f64 {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

fn softmax_into(row: &[f64], out: &mut [f64]) {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, v) in out.iter_mut().zip(row) {
        *o = (v - m).exp();
        sum += *o;
    }
    out.iter_mut().for_each(|o| *o /= sum);
}

fn assert_finite(data: &[f64], op: &str) {
    assert!(
        data.iter().all(|v| v.is_finite()),
        "non-finite result in {op}"
    );
}

/// Cosine distance 1 - cos(x, y) on raw slices, with the zero-norm convention
/// (either vector vanishing yields 1.0). Shared by the tape kernel and the
/// untracked selection path so both agree bit for bit.
pub fn cosine_distance_raw(x: &[f64], y: &[f64]) -> f64 {
    let nx = norm2(x);
    let ny = norm2(y);
    if nx * ny < COSINE_NORM_FLOOR {
        return 1.0;
    }
    let dot: f64 = x.iter().zip(y).map(|(u, v)| u * v).sum();
    1.0 - dot / (nx * ny)
}

/// Mean absolute difference on raw slices.
pub fn l1_distance_raw(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len().max(1);
    x.iter().zip(y).map(|(u, v)| (u - v).abs()).sum::<f64>() / n as f64
}

/// Softmax on a raw slice (untracked prediction path).
pub fn softmax_raw(row: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; row.len()];
    softmax_into(row, &mut out);
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{check_gradients, GradCheck};
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn tanh_at_zero_has_unit_gradient() {
        let t = Tape::new();
        let x = t.leaf(1, 1, vec![0.0]);
        let y = t.tanh(x);
        assert_eq!(t.scalar(y), 0.0);
        t.backward(y);
        assert_eq!(t.grad(x), vec![1.0]);
    }

    #[test]
    fn concat_rows_shape_algebra() {
        let t = Tape::new();
        let a = t.leaf(1, 3, vec![1.0, 2.0, 3.0]);
        let b = t.leaf(1, 5, vec![4.0, 5.0, 6.0, 7.0, 8.0]);
        let c = t.concat_rows(a, b);
        assert_eq!((c.rows(), c.cols()), (1, 8));
        assert_eq!(t.value(c), vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0]);
    }

    #[test]
    fn matmul_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let a: Vec<f64> = (0..16).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let b: Vec<f64> = (0..16).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let max_err = check_gradients(
            &GradCheck::default().tolerance(1e-6),
            &[(4, 4, a), (4, 4, b)],
            |t, inputs| {
                let c = t.matmul(inputs[0], inputs[1]);
                let sq = t.mul(c, c);
                let rs = t.row_sum(sq);
                t.mean_rows(rs)
            },
        );
        assert!(max_err < 1e-6, "matmul rel err {max_err}");
    }

    #[test]
    fn uniform_softmax_cross_entropy_is_ln_two() {
        let t = Tape::new();
        let logits = t.leaf(1, 2, vec![0.0, 0.0]);
        let loss = t.softmax_cross_entropy(logits, &[0], &[1.0, 1.0]);
        assert!((t.scalar(loss) - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn confident_correct_logits_give_negligible_loss() {
        let t = Tape::new();
        let logits = t.leaf(1, 2, vec![20.0, -20.0]);
        let loss = t.softmax_cross_entropy(logits, &[0], &[1.0, 1.0]);
        assert!(t.scalar(loss) < 1e-8);
    }

    #[test]
    fn cross_entropy_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20 {
            let logits: Vec<f64> = (0..12).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let labels: Vec<u8> = (0..6).map(|_| rng.gen_range(0..2) as u8).collect();
            let weights = vec![1.0, rng.gen_range(0.5..4.0)];
            let max_err = check_gradients(
                &GradCheck::default(),
                &[(6, 2, logits)],
                |t, inputs| t.softmax_cross_entropy(inputs[0], &labels, &weights),
            );
            assert!(max_err < 1e-4, "xent rel err {max_err}");
        }
    }

    #[test]
    fn backward_of_sum_equals_sum_of_backwards() {
        let data: Vec<f64> = vec![0.3, -0.7, 1.2, 0.4];

        let t = Tape::new();
        let x = t.leaf(2, 2, data.clone());
        let l1 = t.mean_rows(t.row_sum(t.mul(x, x)));
        let l2 = t.mean_rows(t.row_sum(t.tanh(x)));
        let total = t.add(l1, l2);
        t.backward(total);
        let combined = t.grad(x);

        let t1 = Tape::new();
        let x1 = t1.leaf(2, 2, data.clone());
        let a = t1.mean_rows(t1.row_sum(t1.mul(x1, x1)));
        t1.backward(a);
        let t2 = Tape::new();
        let x2 = t2.leaf(2, 2, data);
        let b = t2.mean_rows(t2.row_sum(t2.tanh(x2)));
        t2.backward(b);

        for i in 0..4 {
            let sum = t1.grad(x1)[i] + t2.grad(x2)[i];
            assert!((combined[i] - sum).abs() < 1e-15);
        }
    }

    #[test]
    fn identical_op_sequences_are_bit_identical() {
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(99);
            let t = Tape::new();
            let a = t.leaf(3, 4, (0..12).map(|_| rng.gen_range(-1.0..1.0)).collect());
            let b = t.leaf(4, 2, (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect());
            let y = t.relu(t.matmul(a, b));
            let loss = t.mean_rows(t.row_sum(y));
            t.backward(loss);
            (t.value(loss), t.grad(a))
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn gather_ops_handle_empty_lists() {
        let t = Tape::new();
        let x = t.leaf(3, 2, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let m = t.gather_mean_rows(x, vec![vec![0, 2], vec![]]);
        assert_eq!(t.value(m), vec![3.0, 4.0, 0.0, 0.0]);
        let s = t.gather_sum_rows(x, vec![vec![], vec![1]]);
        assert_eq!(t.value(s), vec![0.0, 0.0, 3.0, 4.0]);
    }

    #[test]
    fn zero_norm_row_pins_cosine_distance_to_one() {
        let t = Tape::new();
        let a = t.leaf(1, 3, vec![0.0, 0.0, 0.0]);
        let b = t.leaf(1, 3, vec![1.0, 2.0, 3.0]);
        let d = t.row_cosine_distance(a, b);
        assert_eq!(t.scalar(d), 1.0);
        t.backward(d);
        assert_eq!(t.grad(b), vec![0.0, 0.0, 0.0]);
    }

    #[test]
    #[should_panic(expected = "matmul inner dimension mismatch")]
    fn matmul_rejects_bad_shapes() {
        let t = Tape::new();
        let a = t.leaf(2, 3, vec![0.0; 6]);
        let b = t.leaf(2, 2, vec![0.0; 4]);
        t.matmul(a, b);
    }
}
