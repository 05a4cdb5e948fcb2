//! Reverse-mode autodiff over a per-forward-pass tape.
//!
//! A [`Tape`] records every operation in creation order (inputs always precede
//! the node that consumes them, so the record is already topological) and
//! replays it backwards once to accumulate gradients. Tapes and the [`Var`]s
//! pointing into them are confined to one thread; independent tapes may run in
//! parallel.

use std::cell::RefCell;
use std::rc::Rc;

use super::tensor::Tensor;
use super::{NumericError, NumericResult};

/// Attention mask shared between `masked_softmax` and `attend`.
///
/// `true` means the entry is blocked: the row may not look at that column.
/// A single-row mask broadcasts over all rows of the logits it is applied to.
#[derive(Clone, Debug)]
pub struct Mask {
    inner: Rc<MaskData>,
}

#[derive(Debug)]
struct MaskData {
    rows: usize,
    cols: usize,
    blocked: Vec<bool>,
}

impl Mask {
    pub fn new(rows: usize, cols: usize, blocked: Vec<bool>) -> NumericResult<Self> {
        if blocked.len() != rows * cols {
            return Err(NumericError::Invalid {
                op: "Mask::new",
                msg: format!("{}x{} mask needs {} bits, got {}", rows, cols, rows * cols, blocked.len()),
            });
        }
        Ok(Self { inner: Rc::new(MaskData { rows, cols, blocked }) })
    }

    pub fn row_vector(blocked: Vec<bool>) -> Self {
        let cols = blocked.len();
        Self { inner: Rc::new(MaskData { rows: 1, cols, blocked }) }
    }

    pub fn all_unmasked(rows: usize, cols: usize) -> Self {
        Self { inner: Rc::new(MaskData { rows, cols, blocked: vec![false; rows * cols] }) }
    }

    pub fn rows(&self) -> usize {
        self.inner.rows
    }

    pub fn cols(&self) -> usize {
        self.inner.cols
    }

    /// Is entry (i, j) blocked? Row-vector masks broadcast over `i`.
    pub fn blocked(&self, i: usize, j: usize) -> bool {
        let r = if self.inner.rows == 1 { 0 } else { i };
        self.inner.blocked[r * self.inner.cols + j]
    }

    fn check_against(&self, rows: usize, cols: usize, op: &'static str) -> NumericResult<()> {
        if self.inner.cols != cols || (self.inner.rows != 1 && self.inner.rows != rows) {
            return Err(NumericError::ShapeMismatch {
                op,
                left: vec![rows, cols],
                right: vec![self.inner.rows, self.inner.cols],
            });
        }
        Ok(())
    }
}

/// Gradient buffers, one slot per tape node, allocated lazily.
pub struct GradStore {
    bufs: Vec<Option<Vec<f64>>>,
}

impl GradStore {
    fn new(n: usize) -> Self {
        Self { bufs: vec![None; n] }
    }

    /// Gradient buffer for node `id`, zero-initialized on first touch.
    pub fn buf(&mut self, id: usize, numel: usize) -> &mut [f64] {
        self.bufs[id].get_or_insert_with(|| vec![0.0; numel])
    }

    pub fn get(&self, id: usize) -> Option<&[f64]> {
        self.bufs.get(id).and_then(|b| b.as_deref())
    }
}

type BackwardFn = Box<dyn Fn(usize, &[Tensor], &mut GradStore)>;

struct Node {
    requires_grad: bool,
    backward: Option<BackwardFn>,
}

struct TapeInner {
    values: Vec<Tensor>,
    nodes: Vec<Node>,
    grads: GradStore,
    ran_backward: bool,
}

/// Records a forward pass; one backward sweep per tape, then discard.
#[derive(Clone)]
pub struct Tape {
    inner: Rc<RefCell<TapeInner>>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

/// A handle to one tape node. Cheap to clone; shape cached for error messages.
#[derive(Clone)]
pub struct Var {
    tape: Tape,
    id: usize,
    shape: Vec<usize>,
    requires_grad: bool,
}

impl std::fmt::Debug for Var {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.id)
            .field("shape", &self.shape)
            .field("requires_grad", &self.requires_grad)
            .finish()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            inner: Rc::new(RefCell::new(TapeInner {
                values: Vec::new(),
                nodes: Vec::new(),
                grads: GradStore::new(0),
                ran_backward: false,
            })),
        }
    }

    fn push(&self, value: Tensor, requires_grad: bool, backward: Option<BackwardFn>) -> Var {
        let mut inner = self.inner.borrow_mut();
        let id = inner.values.len();
        let shape = value.shape().to_vec();
        inner.values.push(value);
        inner.nodes.push(Node { requires_grad, backward });
        Var { tape: self.clone(), id, shape, requires_grad }
    }

    /// Leaf that participates in gradient computation.
    pub fn var(&self, value: Tensor) -> Var {
        self.push(value, true, None)
    }

    /// Leaf excluded from gradient computation.
    pub fn constant(&self, value: Tensor) -> Var {
        self.push(value, false, None)
    }

    pub fn constant_scalar(&self, x: f64) -> Var {
        self.constant(Tensor::scalar(x))
    }

    pub fn len(&self) -> usize {
        self.inner.borrow().values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Reverse sweep from a scalar root. Visits each node exactly once, in
    /// reverse creation order (creation order is topological by construction).
    pub fn backward(&self, root: &Var) -> NumericResult<()> {
        if !Rc::ptr_eq(&self.inner, &root.tape.inner) {
            return Err(NumericError::Invalid { op: "backward", msg: "root from a different tape".into() });
        }
        {
            let inner = self.inner.borrow();
            if inner.values[root.id].numel() != 1 {
                return Err(NumericError::Invalid {
                    op: "backward",
                    msg: format!("root must be scalar, got shape {:?}", root.shape),
                });
            }
        }
        let n = self.inner.borrow().values.len();
        let mut grads = GradStore::new(n);
        grads.buf(root.id, 1)[0] = 1.0;

        {
            let inner = self.inner.borrow();
            for id in (0..=root.id).rev() {
                if grads.bufs[id].is_none() || !inner.nodes[id].requires_grad {
                    continue;
                }
                if let Some(back) = &inner.nodes[id].backward {
                    back(id, &inner.values, &mut grads);
                }
            }
        }

        let mut inner = self.inner.borrow_mut();
        inner.grads = grads;
        inner.ran_backward = true;
        Ok(())
    }

    fn value_of(&self, id: usize) -> Tensor {
        self.inner.borrow().values[id].clone()
    }

    fn with_value<R>(&self, id: usize, f: impl FnOnce(&Tensor) -> R) -> R {
        f(&self.inner.borrow().values[id])
    }
}

// Binary ops capture the operand ids plus whether each side wants gradient;
// inside the closure `g` is the upstream gradient of the output node.
macro_rules! same_tape {
    ($op:expr, $a:expr, $b:expr) => {
        if !Rc::ptr_eq(&$a.tape.inner, &$b.tape.inner) {
            return Err(NumericError::Invalid { op: $op, msg: "operands on different tapes".into() });
        }
    };
}

impl Var {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn tape(&self) -> &Tape {
        &self.tape
    }

    /// Snapshot of the node's value.
    pub fn value(&self) -> Tensor {
        self.tape.value_of(self.id)
    }

    pub fn item(&self) -> f64 {
        self.tape.with_value(self.id, Tensor::item)
    }

    /// Gradient accumulated by the last `backward` call, if any reached this node.
    pub fn grad(&self) -> Option<Tensor> {
        let inner = self.tape.inner.borrow();
        if !inner.ran_backward {
            return None;
        }
        inner
            .grads
            .get(self.id)
            .map(|g| Tensor::new(self.shape.clone(), g.to_vec()).expect("grad shape"))
    }

    fn rows(&self) -> usize {
        match self.shape.len() {
            0 | 1 => 1,
            _ => self.shape[0],
        }
    }

    fn cols(&self) -> usize {
        match self.shape.len() {
            0 => 1,
            1 => self.shape[0],
            _ => self.shape[1],
        }
    }

    // ── Elementwise binary ─────────────────────────────────────────────

    fn zip_op(
        &self,
        other: &Var,
        op: &'static str,
        f: impl Fn(f64, f64) -> f64,
        da: impl Fn(f64, f64) -> f64 + 'static,
        db: impl Fn(f64, f64) -> f64 + 'static,
    ) -> NumericResult<Var> {
        same_tape!(op, self, other);
        if self.shape != other.shape {
            return Err(NumericError::ShapeMismatch {
                op,
                left: self.shape.clone(),
                right: other.shape.clone(),
            });
        }
        let (a_id, b_id) = (self.id, other.id);
        let (a_rg, b_rg) = (self.requires_grad, other.requires_grad);
        let out = self.tape.with_value(a_id, |a| {
            self.tape.with_value(b_id, |b| {
                Tensor::new(
                    a.shape().to_vec(),
                    a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect(),
                )
                .expect("zip shape")
            })
        });
        let rg = a_rg || b_rg;
        let backward: Option<BackwardFn> = rg.then(|| {
            Box::new(move |out_id: usize, values: &[Tensor], grads: &mut GradStore| {
                let g = grads.bufs[out_id].take().expect("upstream grad");
                let n = g.len();
                if a_rg {
                    let buf = grads.buf(a_id, n);
                    for i in 0..n {
                        buf[i] += g[i] * da(values[a_id].data()[i], values[b_id].data()[i]);
                    }
                }
                if b_rg {
                    let buf = grads.buf(b_id, n);
                    for i in 0..n {
                        buf[i] += g[i] * db(values[a_id].data()[i], values[b_id].data()[i]);
                    }
                }
                grads.bufs[out_id] = Some(g);
            }) as BackwardFn
        });
        Ok(self.tape.push(out, rg, backward))
    }

    pub fn add(&self, other: &Var) -> NumericResult<Var> {
        self.zip_op(other, "add", |a, b| a + b, |_, _| 1.0, |_, _| 1.0)
    }

    pub fn sub(&self, other: &Var) -> NumericResult<Var> {
        self.zip_op(other, "sub", |a, b| a - b, |_, _| 1.0, |_, _| -1.0)
    }

    pub fn mul(&self, other: &Var) -> NumericResult<Var> {
        self.zip_op(other, "mul", |a, b| a * b, |_, b| b, |a, _| a)
    }

    /// Elementwise division; the caller is responsible for keeping the
    /// denominator away from zero (checked post hoc).
    pub fn div(&self, other: &Var) -> NumericResult<Var> {
        let out = self.zip_op(other, "div", |a, b| a / b, |_, b| 1.0 / b, |a, b| -a / (b * b))?;
        out.ensure_finite("div")?;
        Ok(out)
    }

    /// Elementwise maximum; ties route the gradient to `self`.
    pub fn max_elem(&self, other: &Var) -> NumericResult<Var> {
        self.zip_op(
            other,
            "max_elem",
            f64::max,
            |a, b| if a >= b { 1.0 } else { 0.0 },
            |a, b| if a < b { 1.0 } else { 0.0 },
        )
    }

    /// Elementwise minimum; ties route the gradient to `self`.
    pub fn min_elem(&self, other: &Var) -> NumericResult<Var> {
        self.zip_op(
            other,
            "min_elem",
            f64::min,
            |a, b| if a <= b { 1.0 } else { 0.0 },
            |a, b| if a > b { 1.0 } else { 0.0 },
        )
    }

    // ── Elementwise unary ──────────────────────────────────────────────

    fn unary_op(
        &self,
        _op: &'static str,
        f: impl Fn(f64) -> f64,
        // derivative as a function of (input, output)
        df: impl Fn(f64, f64) -> f64 + 'static,
    ) -> Var {
        let a_id = self.id;
        let a_rg = self.requires_grad;
        let out = self.tape.with_value(a_id, |a| a.map(&f));
        let backward: Option<BackwardFn> = a_rg.then(|| {
            Box::new(move |out_id: usize, values: &[Tensor], grads: &mut GradStore| {
                let g = grads.bufs[out_id].take().expect("upstream grad");
                let buf = grads.buf(a_id, g.len());
                for i in 0..g.len() {
                    buf[i] += g[i] * df(values[a_id].data()[i], values[out_id].data()[i]);
                }
                grads.bufs[out_id] = Some(g);
            }) as BackwardFn
        });
        self.tape.push(out, a_rg, backward)
    }

    pub fn neg(&self) -> Var {
        self.unary_op("neg", |x| -x, |_, _| -1.0)
    }

    pub fn scale(&self, c: f64) -> Var {
        self.unary_op("scale", |x| c * x, move |_, _| c)
    }

    pub fn add_scalar(&self, c: f64) -> Var {
        self.unary_op("add_scalar", |x| x + c, |_, _| 1.0)
    }

    pub fn exp(&self) -> NumericResult<Var> {
        let out = self.unary_op("exp", f64::exp, |_, y| y);
        out.ensure_finite("exp")?;
        Ok(out)
    }

    pub fn ln(&self) -> NumericResult<Var> {
        let out = self.unary_op("ln", f64::ln, |x, _| 1.0 / x);
        out.ensure_finite("ln")?;
        Ok(out)
    }

    /// x^p for x > 0 (or x ≥ 0 with p ≥ 1).
    pub fn powf(&self, p: f64) -> NumericResult<Var> {
        let out = self.unary_op("powf", |x| x.powf(p), move |x, _| p * x.powf(p - 1.0));
        out.ensure_finite("powf")?;
        Ok(out)
    }

    pub fn abs(&self) -> Var {
        self.unary_op("abs", f64::abs, |x, _| {
            if x > 0.0 {
                1.0
            } else if x < 0.0 {
                -1.0
            } else {
                0.0
            }
        })
    }

    pub fn relu(&self) -> Var {
        self.unary_op("relu", |x| x.max(0.0), |x, _| if x > 0.0 { 1.0 } else { 0.0 })
    }

    pub fn sigmoid(&self) -> Var {
        self.unary_op("sigmoid", sigmoid, |_, y| y * (1.0 - y))
    }

    /// Numerically stable ln(1 + e^x); derivative is the sigmoid.
    pub fn softplus(&self) -> Var {
        self.unary_op("softplus", softplus, |x, _| sigmoid(x))
    }

    pub fn tanh(&self) -> Var {
        self.unary_op("tanh", f64::tanh, |_, y| 1.0 - y * y)
    }

    /// GELU, tanh approximation.
    pub fn gelu(&self) -> Var {
        self.unary_op("gelu", gelu, |x, _| gelu_grad(x))
    }

    /// Elementwise smooth-L1 of the input (treated as a residual):
    /// 0.5x² for |x| < 1, |x| − 0.5 otherwise.
    pub fn smooth_l1(&self) -> Var {
        self.unary_op(
            "smooth_l1",
            |x| if x.abs() < 1.0 { 0.5 * x * x } else { x.abs() - 0.5 },
            |x, _| x.clamp(-1.0, 1.0),
        )
    }

    /// Clamp to [lo, hi]; gradient passes only strictly inside the range.
    pub fn clamp(&self, lo: f64, hi: f64) -> Var {
        self.unary_op(
            "clamp",
            move |x| x.clamp(lo, hi),
            move |x, _| if x > lo && x < hi { 1.0 } else { 0.0 },
        )
    }

    /// Elementwise multiply by a constant tensor (e.g. a recorded noise draw).
    pub fn mul_const(&self, t: &Tensor) -> NumericResult<Var> {
        if self.shape != t.shape() {
            return Err(NumericError::ShapeMismatch {
                op: "mul_const",
                left: self.shape.clone(),
                right: t.shape().to_vec(),
            });
        }
        let c = t.clone();
        let a_id = self.id;
        let a_rg = self.requires_grad;
        let out = self.tape.with_value(a_id, |a| {
            Tensor::new(
                a.shape().to_vec(),
                a.data().iter().zip(c.data()).map(|(&x, &k)| x * k).collect(),
            )
            .expect("mul_const shape")
        });
        let backward: Option<BackwardFn> = a_rg.then(|| {
            let c = c.clone();
            Box::new(move |out_id: usize, _values: &[Tensor], grads: &mut GradStore| {
                let g = grads.bufs[out_id].take().expect("upstream grad");
                let buf = grads.buf(a_id, g.len());
                for i in 0..g.len() {
                    buf[i] += g[i] * c.data()[i];
                }
                grads.bufs[out_id] = Some(g);
            }) as BackwardFn
        });
        Ok(self.tape.push(out, a_rg, backward))
    }

    /// Elementwise add of a constant tensor.
    pub fn add_const(&self, t: &Tensor) -> NumericResult<Var> {
        if self.shape != t.shape() {
            return Err(NumericError::ShapeMismatch {
                op: "add_const",
                left: self.shape.clone(),
                right: t.shape().to_vec(),
            });
        }
        let c = t.clone();
        let a_id = self.id;
        let a_rg = self.requires_grad;
        let out = self.tape.with_value(a_id, |a| {
            Tensor::new(
                a.shape().to_vec(),
                a.data().iter().zip(c.data()).map(|(&x, &k)| x + k).collect(),
            )
            .expect("add_const shape")
        });
        let backward: Option<BackwardFn> = a_rg.then(|| {
            Box::new(move |out_id: usize, _values: &[Tensor], grads: &mut GradStore| {
                let g = grads.bufs[out_id].take().expect("upstream grad");
                let buf = grads.buf(a_id, g.len());
                for i in 0..g.len() {
                    buf[i] += g[i];
                }
                grads.bufs[out_id] = Some(g);
            }) as BackwardFn
        });
        Ok(self.tape.push(out, a_rg, backward))
    }

    /// Inverted dropout with a recorded keep-mask (1 = keep).
    pub fn dropout(&self, keep: &Tensor, rate: f64) -> NumericResult<Var> {
        if rate <= 0.0 {
            return Ok(self.clone());
        }
        let scale = 1.0 / (1.0 - rate);
        let scaled = Tensor::new(
            keep.shape().to_vec(),
            keep.data().iter().map(|&k| k * scale).collect(),
        )?;
        self.mul_const(&scaled)
    }

    // ── Matrix ops ─────────────────────────────────────────────────────

    /// Standard matrix product a[m,k] · b[k,n].
    pub fn matmul(&self, other: &Var) -> NumericResult<Var> {
        same_tape!("matmul", self, other);
        let (m, k) = (self.rows(), self.cols());
        let (k2, n) = (other.rows(), other.cols());
        if k != k2 || self.shape.len() != 2 || other.shape.len() != 2 {
            return Err(NumericError::ShapeMismatch {
                op: "matmul",
                left: self.shape.clone(),
                right: other.shape.clone(),
            });
        }
        let (a_id, b_id) = (self.id, other.id);
        let (a_rg, b_rg) = (self.requires_grad, other.requires_grad);
        let out = {
            let inner = self.tape.inner.borrow();
            let a = inner.values[a_id].data();
            let b = inner.values[b_id].data();
            Tensor::new(vec![m, n], raw_matmul(a, b, m, k, n)).expect("matmul shape")
        };
        let rg = a_rg || b_rg;
        let backward: Option<BackwardFn> = rg.then(|| {
            Box::new(move |out_id: usize, values: &[Tensor], grads: &mut GradStore| {
                let g = grads.bufs[out_id].take().expect("upstream grad");
                if a_rg {
                    // dA += G · Bᵀ
                    let b = values[b_id].data();
                    let buf = grads.buf(a_id, m * k);
                    for i in 0..m {
                        for p in 0..k {
                            let mut s = 0.0;
                            for j in 0..n {
                                s += g[i * n + j] * b[p * n + j];
                            }
                            buf[i * k + p] += s;
                        }
                    }
                }
                if b_rg {
                    // dB += Aᵀ · G
                    let a = values[a_id].data();
                    let buf = grads.buf(b_id, k * n);
                    for p in 0..k {
                        for j in 0..n {
                            let mut s = 0.0;
                            for i in 0..m {
                                s += a[i * k + p] * g[i * n + j];
                            }
                            buf[p * n + j] += s;
                        }
                    }
                }
                grads.bufs[out_id] = Some(g);
            }) as BackwardFn
        });
        Ok(self.tape.push(out, rg, backward))
    }

    /// a[m,k] · b[n,k]ᵀ — the attention-score shape without a transpose node.
    pub fn matmul_nt(&self, other: &Var) -> NumericResult<Var> {
        same_tape!("matmul_nt", self, other);
        let (m, k) = (self.rows(), self.cols());
        let (n, k2) = (other.rows(), other.cols());
        if k != k2 || self.shape.len() != 2 || other.shape.len() != 2 {
            return Err(NumericError::ShapeMismatch {
                op: "matmul_nt",
                left: self.shape.clone(),
                right: other.shape.clone(),
            });
        }
        let (a_id, b_id) = (self.id, other.id);
        let (a_rg, b_rg) = (self.requires_grad, other.requires_grad);
        let out = {
            let inner = self.tape.inner.borrow();
            let a = inner.values[a_id].data();
            let b = inner.values[b_id].data();
            let mut c = vec![0.0; m * n];
            for i in 0..m {
                for j in 0..n {
                    let mut s = 0.0;
                    for p in 0..k {
                        s += a[i * k + p] * b[j * k + p];
                    }
                    c[i * n + j] = s;
                }
            }
            Tensor::new(vec![m, n], c).expect("matmul_nt shape")
        };
        let rg = a_rg || b_rg;
        let backward: Option<BackwardFn> = rg.then(|| {
            Box::new(move |out_id: usize, values: &[Tensor], grads: &mut GradStore| {
                let g = grads.bufs[out_id].take().expect("upstream grad");
                if a_rg {
                    // dA += G · B
                    let b = values[b_id].data();
                    let buf = grads.buf(a_id, m * k);
                    for i in 0..m {
                        for p in 0..k {
                            let mut s = 0.0;
                            for j in 0..n {
                                s += g[i * n + j] * b[j * k + p];
                            }
                            buf[i * k + p] += s;
                        }
                    }
                }
                if b_rg {
                    // dB += Gᵀ · A
                    let a = values[a_id].data();
                    let buf = grads.buf(b_id, n * k);
                    for j in 0..n {
                        for p in 0..k {
                            let mut s = 0.0;
                            for i in 0..m {
                                s += g[i * n + j] * a[i * k + p];
                            }
                            buf[j * k + p] += s;
                        }
                    }
                }
                grads.bufs[out_id] = Some(g);
            }) as BackwardFn
        });
        Ok(self.tape.push(out, rg, backward))
    }

    pub fn transpose(&self) -> NumericResult<Var> {
        if self.shape.len() != 2 {
            return Err(NumericError::Invalid {
                op: "transpose",
                msg: format!("expected matrix, got shape {:?}", self.shape),
            });
        }
        let (m, n) = (self.rows(), self.cols());
        let a_id = self.id;
        let a_rg = self.requires_grad;
        let out = self.tape.with_value(a_id, |a| {
            let mut t = vec![0.0; m * n];
            for i in 0..m {
                for j in 0..n {
                    t[j * m + i] = a.data()[i * n + j];
                }
            }
            Tensor::new(vec![n, m], t).expect("transpose shape")
        });
        let backward: Option<BackwardFn> = a_rg.then(|| {
            Box::new(move |out_id: usize, _values: &[Tensor], grads: &mut GradStore| {
                let g = grads.bufs[out_id].take().expect("upstream grad");
                let buf = grads.buf(a_id, m * n);
                for j in 0..n {
                    for i in 0..m {
                        buf[i * n + j] += g[j * m + i];
                    }
                }
                grads.bufs[out_id] = Some(g);
            }) as BackwardFn
        });
        Ok(self.tape.push(out, a_rg, backward))
    }

    /// Broadcast-add a row vector b[d] to every row of x[r,d].
    pub fn add_row(&self, bias: &Var) -> NumericResult<Var> {
        same_tape!("add_row", self, bias);
        let (r, d) = (self.rows(), self.cols());
        if bias.numel() != d {
            return Err(NumericError::ShapeMismatch {
                op: "add_row",
                left: self.shape.clone(),
                right: bias.shape.clone(),
            });
        }
        let (a_id, b_id) = (self.id, bias.id);
        let (a_rg, b_rg) = (self.requires_grad, bias.requires_grad);
        let out = {
            let inner = self.tape.inner.borrow();
            let a = inner.values[a_id].data();
            let b = inner.values[b_id].data();
            let mut o = vec![0.0; r * d];
            for i in 0..r {
                for j in 0..d {
                    o[i * d + j] = a[i * d + j] + b[j];
                }
            }
            Tensor::new(self.shape.clone(), o).expect("add_row shape")
        };
        let rg = a_rg || b_rg;
        let backward: Option<BackwardFn> = rg.then(|| {
            Box::new(move |out_id: usize, _values: &[Tensor], grads: &mut GradStore| {
                let g = grads.bufs[out_id].take().expect("upstream grad");
                if a_rg {
                    let buf = grads.buf(a_id, r * d);
                    for i in 0..r * d {
                        buf[i] += g[i];
                    }
                }
                if b_rg {
                    let buf = grads.buf(b_id, d);
                    for i in 0..r {
                        for j in 0..d {
                            buf[j] += g[i * d + j];
                        }
                    }
                }
                grads.bufs[out_id] = Some(g);
            }) as BackwardFn
        });
        Ok(self.tape.push(out, rg, backward))
    }

    // ── Reductions ─────────────────────────────────────────────────────

    pub fn sum(&self) -> Var {
        let a_id = self.id;
        let a_rg = self.requires_grad;
        let n = self.numel();
        let out = self.tape.with_value(a_id, |a| Tensor::scalar(a.data().iter().sum()));
        let backward: Option<BackwardFn> = a_rg.then(|| {
            Box::new(move |out_id: usize, _values: &[Tensor], grads: &mut GradStore| {
                let g = grads.bufs[out_id].take().expect("upstream grad");
                let buf = grads.buf(a_id, n);
                for b in buf.iter_mut() {
                    *b += g[0];
                }
                grads.bufs[out_id] = Some(g);
            }) as BackwardFn
        });
        self.tape.push(out, a_rg, backward)
    }

    pub fn mean(&self) -> Var {
        let n = self.numel() as f64;
        self.sum().scale(1.0 / n)
    }

    // ── Softmax family ─────────────────────────────────────────────────

    /// Row softmax with optional blocking mask. Masked entries get probability
    /// exactly 0; unmasked entries are max-shifted, exponentiated and summed in
    /// ascending column order so a row restricted to its unmasked columns is
    /// bit-identical to the unmasked softmax of that sub-row.
    pub fn masked_softmax(&self, mask: Option<&Mask>) -> NumericResult<Var> {
        let (r, s) = (self.rows(), self.cols());
        if let Some(m) = mask {
            m.check_against(r, s, "masked_softmax")?;
        }
        let a_id = self.id;
        let a_rg = self.requires_grad;
        let mask_cl = mask.cloned();
        let out = {
            let inner = self.tape.inner.borrow();
            let x = inner.values[a_id].data();
            let mut y = vec![0.0; r * s];
            for i in 0..r {
                let mut mx = f64::NEG_INFINITY;
                for j in 0..s {
                    if !is_blocked(&mask_cl, i, j) {
                        mx = mx.max(x[i * s + j]);
                    }
                }
                if mx == f64::NEG_INFINITY {
                    return Err(NumericError::DegenerateRow { row: i });
                }
                let mut z = 0.0;
                for j in 0..s {
                    if !is_blocked(&mask_cl, i, j) {
                        let e = (x[i * s + j] - mx).exp();
                        y[i * s + j] = e;
                        z += e;
                    }
                }
                for j in 0..s {
                    if !is_blocked(&mask_cl, i, j) {
                        y[i * s + j] /= z;
                    }
                }
            }
            Tensor::new(self.shape.clone(), y).expect("softmax shape")
        };
        let mask_for_back = mask_cl;
        let backward: Option<BackwardFn> = a_rg.then(|| {
            Box::new(move |out_id: usize, values: &[Tensor], grads: &mut GradStore| {
                let g = grads.bufs[out_id].take().expect("upstream grad");
                let y = values[out_id].data();
                let buf = grads.buf(a_id, r * s);
                for i in 0..r {
                    let mut dot = 0.0;
                    for j in 0..s {
                        if !is_blocked(&mask_for_back, i, j) {
                            dot += g[i * s + j] * y[i * s + j];
                        }
                    }
                    for j in 0..s {
                        if !is_blocked(&mask_for_back, i, j) {
                            buf[i * s + j] += y[i * s + j] * (g[i * s + j] - dot);
                        }
                    }
                }
                grads.bufs[out_id] = Some(g);
            }) as BackwardFn
        });
        Ok(self.tape.push(out, a_rg, backward))
    }

    /// Row log-softmax (numerically stable).
    pub fn log_softmax(&self) -> NumericResult<Var> {
        let (r, s) = (self.rows(), self.cols());
        let a_id = self.id;
        let a_rg = self.requires_grad;
        let out = {
            let inner = self.tape.inner.borrow();
            let x = inner.values[a_id].data();
            let mut y = vec![0.0; r * s];
            for i in 0..r {
                let mx = (0..s).map(|j| x[i * s + j]).fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = (0..s).map(|j| (x[i * s + j] - mx).exp()).sum();
                let lz = z.ln();
                for j in 0..s {
                    y[i * s + j] = x[i * s + j] - mx - lz;
                }
            }
            Tensor::new(self.shape.clone(), y).expect("log_softmax shape")
        };
        let backward: Option<BackwardFn> = a_rg.then(|| {
            Box::new(move |out_id: usize, values: &[Tensor], grads: &mut GradStore| {
                let g = grads.bufs[out_id].take().expect("upstream grad");
                let y = values[out_id].data();
                let buf = grads.buf(a_id, r * s);
                for i in 0..r {
                    let gsum: f64 = (0..s).map(|j| g[i * s + j]).sum();
                    for j in 0..s {
                        buf[i * s + j] += g[i * s + j] - y[i * s + j].exp() * gsum;
                    }
                }
                grads.bufs[out_id] = Some(g);
            }) as BackwardFn
        });
        Ok(self.tape.push(out, a_rg, backward))
    }

    /// probs[r,s] · values[s,d], skipping masked (row, col) pairs so that a
    /// blocked column can never leak into a row even via signed zeros.
    pub fn attend(&self, values: &Var, mask: Option<&Mask>) -> NumericResult<Var> {
        same_tape!("attend", self, values);
        let (r, s) = (self.rows(), self.cols());
        let (s2, d) = (values.rows(), values.cols());
        if s != s2 {
            return Err(NumericError::ShapeMismatch {
                op: "attend",
                left: self.shape.clone(),
                right: values.shape.clone(),
            });
        }
        if let Some(m) = mask {
            m.check_against(r, s, "attend")?;
        }
        let (p_id, v_id) = (self.id, values.id);
        let (p_rg, v_rg) = (self.requires_grad, values.requires_grad);
        let mask_cl = mask.cloned();
        let out = {
            let inner = self.tape.inner.borrow();
            let p = inner.values[p_id].data();
            let v = inner.values[v_id].data();
            let mut o = vec![0.0; r * d];
            for i in 0..r {
                for j in 0..s {
                    if is_blocked(&mask_cl, i, j) {
                        continue;
                    }
                    let pij = p[i * s + j];
                    for c in 0..d {
                        o[i * d + c] += pij * v[j * d + c];
                    }
                }
            }
            Tensor::new(vec![r, d], o).expect("attend shape")
        };
        let rg = p_rg || v_rg;
        let backward: Option<BackwardFn> = rg.then(|| {
            Box::new(move |out_id: usize, values_arr: &[Tensor], grads: &mut GradStore| {
                let g = grads.bufs[out_id].take().expect("upstream grad");
                if p_rg {
                    let v = values_arr[v_id].data();
                    let buf = grads.buf(p_id, r * s);
                    for i in 0..r {
                        for j in 0..s {
                            if is_blocked(&mask_cl, i, j) {
                                continue;
                            }
                            let mut sdot = 0.0;
                            for c in 0..d {
                                sdot += g[i * d + c] * v[j * d + c];
                            }
                            buf[i * s + j] += sdot;
                        }
                    }
                }
                if v_rg {
                    let p = values_arr[p_id].data();
                    let buf = grads.buf(v_id, s * d);
                    for i in 0..r {
                        for j in 0..s {
                            if is_blocked(&mask_cl, i, j) {
                                continue;
                            }
                            let pij = p[i * s + j];
                            for c in 0..d {
                                buf[j * d + c] += pij * g[i * d + c];
                            }
                        }
                    }
                }
                grads.bufs[out_id] = Some(g);
            }) as BackwardFn
        });
        Ok(self.tape.push(out, rg, backward))
    }

    // ── Normalization ──────────────────────────────────────────────────

    /// Per-row layer norm with learned gain/bias vectors of length `cols`.
    pub fn layernorm(&self, gamma: &Var, beta: &Var, eps: f64) -> NumericResult<Var> {
        same_tape!("layernorm", self, gamma);
        same_tape!("layernorm", self, beta);
        let (r, d) = (self.rows(), self.cols());
        if gamma.numel() != d || beta.numel() != d {
            return Err(NumericError::ShapeMismatch {
                op: "layernorm",
                left: self.shape.clone(),
                right: gamma.shape.clone(),
            });
        }
        let (x_id, g_id, b_id) = (self.id, gamma.id, beta.id);
        let (x_rg, g_rg, b_rg) = (self.requires_grad, gamma.requires_grad, beta.requires_grad);
        let out = {
            let inner = self.tape.inner.borrow();
            let x = inner.values[x_id].data();
            let ga = inner.values[g_id].data();
            let be = inner.values[b_id].data();
            let mut y = vec![0.0; r * d];
            for i in 0..r {
                let row = &x[i * d..(i + 1) * d];
                let mu = row.iter().sum::<f64>() / d as f64;
                let var = row.iter().map(|&v| (v - mu) * (v - mu)).sum::<f64>() / d as f64;
                let inv = 1.0 / (var + eps).sqrt();
                for j in 0..d {
                    y[i * d + j] = (row[j] - mu) * inv * ga[j] + be[j];
                }
            }
            Tensor::new(self.shape.clone(), y).expect("layernorm shape")
        };
        let rg = x_rg || g_rg || b_rg;
        let backward: Option<BackwardFn> = rg.then(|| {
            Box::new(move |out_id: usize, values: &[Tensor], grads: &mut GradStore| {
                let g = grads.bufs[out_id].take().expect("upstream grad");
                let x = values[x_id].data();
                let ga = values[g_id].data();
                // recompute per-row stats; cheaper than caching at these sizes
                for i in 0..r {
                    let row = &x[i * d..(i + 1) * d];
                    let mu = row.iter().sum::<f64>() / d as f64;
                    let var = row.iter().map(|&v| (v - mu) * (v - mu)).sum::<f64>() / d as f64;
                    let inv = 1.0 / (var + eps).sqrt();
                    let xhat: Vec<f64> = row.iter().map(|&v| (v - mu) * inv).collect();
                    let grow = &g[i * d..(i + 1) * d];
                    if g_rg {
                        let buf = grads.buf(g_id, d);
                        for j in 0..d {
                            buf[j] += grow[j] * xhat[j];
                        }
                    }
                    if b_rg {
                        let buf = grads.buf(b_id, d);
                        for j in 0..d {
                            buf[j] += grow[j];
                        }
                    }
                    if x_rg {
                        let gx: Vec<f64> = (0..d).map(|j| grow[j] * ga[j]).collect();
                        let mean_gx = gx.iter().sum::<f64>() / d as f64;
                        let mean_gx_xhat =
                            gx.iter().zip(&xhat).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                        let buf = grads.buf(x_id, r * d);
                        for j in 0..d {
                            buf[i * d + j] += inv * (gx[j] - mean_gx - xhat[j] * mean_gx_xhat);
                        }
                    }
                }
                grads.bufs[out_id] = Some(g);
            }) as BackwardFn
        });
        Ok(self.tape.push(out, rg, backward))
    }

    // ── Shape surgery ──────────────────────────────────────────────────

    /// Concatenate matrices along rows (all must share a column count).
    pub fn concat_rows(parts: &[Var]) -> NumericResult<Var> {
        let first = parts.first().ok_or(NumericError::Invalid {
            op: "concat_rows",
            msg: "empty part list".into(),
        })?;
        let tape = first.tape.clone();
        let d = first.cols();
        let mut total_rows = 0;
        for p in parts {
            same_tape!("concat_rows", first, p);
            if p.cols() != d {
                return Err(NumericError::ShapeMismatch {
                    op: "concat_rows",
                    left: first.shape.clone(),
                    right: p.shape.clone(),
                });
            }
            total_rows += p.rows();
        }
        let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
        let rgs: Vec<bool> = parts.iter().map(|p| p.requires_grad).collect();
        let row_counts: Vec<usize> = parts.iter().map(|p| p.rows()).collect();
        let out = {
            let inner = tape.inner.borrow();
            let mut data = Vec::with_capacity(total_rows * d);
            for &id in &ids {
                data.extend_from_slice(inner.values[id].data());
            }
            Tensor::new(vec![total_rows, d], data).expect("concat shape")
        };
        let rg = rgs.iter().any(|&b| b);
        let backward: Option<BackwardFn> = rg.then(|| {
            let ids = ids.clone();
            let rgs = rgs.clone();
            let row_counts = row_counts.clone();
            Box::new(move |out_id: usize, _values: &[Tensor], grads: &mut GradStore| {
                let g = grads.bufs[out_id].take().expect("upstream grad");
                let mut offset = 0;
                for (idx, &id) in ids.iter().enumerate() {
                    let len = row_counts[idx] * d;
                    if rgs[idx] {
                        let buf = grads.buf(id, len);
                        for i in 0..len {
                            buf[i] += g[offset + i];
                        }
                    }
                    offset += len;
                }
                grads.bufs[out_id] = Some(g);
            }) as BackwardFn
        });
        Ok(tape.push(out, rg, backward))
    }

    /// Split a matrix into consecutive row blocks; exact inverse of
    /// `concat_rows` for matching sizes.
    pub fn split_rows(&self, sizes: &[usize]) -> NumericResult<Vec<Var>> {
        let (r, d) = (self.rows(), self.cols());
        if sizes.iter().sum::<usize>() != r {
            return Err(NumericError::Invalid {
                op: "split_rows",
                msg: format!("sizes {:?} do not sum to {} rows", sizes, r),
            });
        }
        let a_id = self.id;
        let a_rg = self.requires_grad;
        let mut outs = Vec::with_capacity(sizes.len());
        let mut offset = 0;
        for &sz in sizes {
            let value = self.tape.with_value(a_id, |a| {
                Tensor::new(vec![sz, d], a.data()[offset * d..(offset + sz) * d].to_vec())
                    .expect("split shape")
            });
            let start = offset * d;
            let len = sz * d;
            let total = r * d;
            let backward: Option<BackwardFn> = a_rg.then(|| {
                Box::new(move |out_id: usize, _values: &[Tensor], grads: &mut GradStore| {
                    let g = grads.bufs[out_id].take().expect("upstream grad");
                    let buf = grads.buf(a_id, total);
                    for i in 0..len {
                        buf[start + i] += g[i];
                    }
                    grads.bufs[out_id] = Some(g);
                }) as BackwardFn
            });
            outs.push(self.tape.push(value, a_rg, backward));
            offset += sz;
        }
        Ok(outs)
    }

    /// Columns `[start, start+width)` of a matrix.
    pub fn slice_cols(&self, start: usize, width: usize) -> NumericResult<Var> {
        let (r, d) = (self.rows(), self.cols());
        if start + width > d {
            return Err(NumericError::Invalid {
                op: "slice_cols",
                msg: format!("slice [{}, {}) out of {} columns", start, start + width, d),
            });
        }
        let a_id = self.id;
        let a_rg = self.requires_grad;
        let out = self.tape.with_value(a_id, |a| {
            let mut data = Vec::with_capacity(r * width);
            for i in 0..r {
                data.extend_from_slice(&a.data()[i * d + start..i * d + start + width]);
            }
            Tensor::new(vec![r, width], data).expect("slice shape")
        });
        let backward: Option<BackwardFn> = a_rg.then(|| {
            Box::new(move |out_id: usize, _values: &[Tensor], grads: &mut GradStore| {
                let g = grads.bufs[out_id].take().expect("upstream grad");
                let buf = grads.buf(a_id, r * d);
                for i in 0..r {
                    for j in 0..width {
                        buf[i * d + start + j] += g[i * width + j];
                    }
                }
                grads.bufs[out_id] = Some(g);
            }) as BackwardFn
        });
        Ok(self.tape.push(out, a_rg, backward))
    }

    /// Concatenate matrices along columns (all must share a row count).
    pub fn concat_cols(parts: &[Var]) -> NumericResult<Var> {
        let first = parts.first().ok_or(NumericError::Invalid {
            op: "concat_cols",
            msg: "empty part list".into(),
        })?;
        let tape = first.tape.clone();
        let r = first.rows();
        let mut total_cols = 0;
        for p in parts {
            same_tape!("concat_cols", first, p);
            if p.rows() != r {
                return Err(NumericError::ShapeMismatch {
                    op: "concat_cols",
                    left: first.shape.clone(),
                    right: p.shape.clone(),
                });
            }
            total_cols += p.cols();
        }
        let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
        let rgs: Vec<bool> = parts.iter().map(|p| p.requires_grad).collect();
        let widths: Vec<usize> = parts.iter().map(|p| p.cols()).collect();
        let out = {
            let inner = tape.inner.borrow();
            let mut data = Vec::with_capacity(r * total_cols);
            for i in 0..r {
                for (k, &id) in ids.iter().enumerate() {
                    let w = widths[k];
                    data.extend_from_slice(&inner.values[id].data()[i * w..(i + 1) * w]);
                }
            }
            Tensor::new(vec![r, total_cols], data).expect("concat_cols shape")
        };
        let rg = rgs.iter().any(|&b| b);
        let backward: Option<BackwardFn> = rg.then(|| {
            let ids = ids.clone();
            let rgs = rgs.clone();
            let widths = widths.clone();
            Box::new(move |out_id: usize, _values: &[Tensor], grads: &mut GradStore| {
                let g = grads.bufs[out_id].take().expect("upstream grad");
                let mut col0 = 0;
                for (k, &id) in ids.iter().enumerate() {
                    let w = widths[k];
                    if rgs[k] {
                        let buf = grads.buf(id, r * w);
                        for i in 0..r {
                            for j in 0..w {
                                buf[i * w + j] += g[i * total_cols + col0 + j];
                            }
                        }
                    }
                    col0 += w;
                }
                grads.bufs[out_id] = Some(g);
            }) as BackwardFn
        });
        Ok(tape.push(out, rg, backward))
    }

    /// One element per row: out[i] = x[i, idx[i]].
    pub fn take_per_row(&self, idx: &[usize]) -> NumericResult<Var> {
        let (r, d) = (self.rows(), self.cols());
        if idx.len() != r {
            return Err(NumericError::Invalid {
                op: "take_per_row",
                msg: format!("{} indices for {} rows", idx.len(), r),
            });
        }
        if let Some(&bad) = idx.iter().find(|&&j| j >= d) {
            return Err(NumericError::Invalid {
                op: "take_per_row",
                msg: format!("column index {} out of {}", bad, d),
            });
        }
        let a_id = self.id;
        let a_rg = self.requires_grad;
        let idx_cl = idx.to_vec();
        let out = self.tape.with_value(a_id, |a| {
            Tensor::vector(idx_cl.iter().enumerate().map(|(i, &j)| a.data()[i * d + j]).collect())
        });
        let backward: Option<BackwardFn> = a_rg.then(|| {
            let idx_cl = idx_cl.clone();
            Box::new(move |out_id: usize, _values: &[Tensor], grads: &mut GradStore| {
                let g = grads.bufs[out_id].take().expect("upstream grad");
                let buf = grads.buf(a_id, r * d);
                for (i, &j) in idx_cl.iter().enumerate() {
                    buf[i * d + j] += g[i];
                }
                grads.bufs[out_id] = Some(g);
            }) as BackwardFn
        });
        Ok(self.tape.push(out, a_rg, backward))
    }

    /// Row gather: out[i,:] = self[ids[i],:] (alias of `embedding`).
    pub fn gather_rows(&self, ids: &[usize]) -> NumericResult<Var> {
        self.embedding(ids)
    }

    /// Row lookup: out[i,:] = table[ids[i],:], with scatter-add backward.
    pub fn embedding(&self, ids: &[usize]) -> NumericResult<Var> {
        let (v, d) = (self.rows(), self.cols());
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return Err(NumericError::Invalid {
                op: "embedding",
                msg: format!("row index {} out of table of {} rows", bad, v),
            });
        }
        let a_id = self.id;
        let a_rg = self.requires_grad;
        let ids_cl = ids.to_vec();
        let n = ids.len();
        let out = self.tape.with_value(a_id, |a| {
            let mut data = Vec::with_capacity(n * d);
            for &i in &ids_cl {
                data.extend_from_slice(&a.data()[i * d..(i + 1) * d]);
            }
            Tensor::new(vec![n, d], data).expect("embedding shape")
        });
        let backward: Option<BackwardFn> = a_rg.then(|| {
            let ids_cl = ids_cl.clone();
            Box::new(move |out_id: usize, _values: &[Tensor], grads: &mut GradStore| {
                let g = grads.bufs[out_id].take().expect("upstream grad");
                let buf = grads.buf(a_id, v * d);
                for (row, &i) in ids_cl.iter().enumerate() {
                    for j in 0..d {
                        buf[i * d + j] += g[row * d + j];
                    }
                }
                grads.bufs[out_id] = Some(g);
            }) as BackwardFn
        });
        Ok(self.tape.push(out, a_rg, backward))
    }

    fn ensure_finite(&self, op: &'static str) -> NumericResult<()> {
        let ok = self.tape.with_value(self.id, Tensor::all_finite);
        if ok {
            Ok(())
        } else {
            Err(NumericError::NonFinite { op })
        }
    }
}

/// z = μ + exp(log_var / 2) ⊙ ε with ε recorded as a constant, so gradients
/// flow through μ and log_var only (pathwise estimator).
pub fn reparam_sample(mu: &Var, log_var: &Var, eps: &Tensor) -> NumericResult<Var> {
    let sigma = log_var.scale(0.5).exp()?;
    mu.add(&sigma.mul_const(eps)?)
}

/// Per-row focal term on logits [r, c]: −α_t (1 − p_t)^γ ln p_t, where
/// p_t is the softmax probability of `targets[i]` and α_t = `alphas[i]`.
/// Returns the per-row loss vector [r].
pub fn focal_loss_per_row(
    logits: &Var,
    targets: &[usize],
    alphas: &[f64],
    gamma: f64,
) -> NumericResult<Var> {
    let r = logits.rows();
    if targets.len() != r || alphas.len() != r {
        return Err(NumericError::Invalid {
            op: "focal_loss_per_row",
            msg: format!("{} rows vs {} targets / {} alphas", r, targets.len(), alphas.len()),
        });
    }
    let logp = logits.log_softmax()?;
    let logp_t = logp.take_per_row(targets)?;
    let p_t = logp_t.exp()?;
    let one_minus = p_t.neg().add_scalar(1.0);
    let focus = one_minus.powf(gamma)?;
    let alpha_t = Tensor::vector(alphas.to_vec());
    focus.mul(&logp_t.neg())?.mul_const(&alpha_t)
}

fn is_blocked(mask: &Option<Mask>, i: usize, j: usize) -> bool {
    mask.as_ref().map_or(false, |m| m.blocked(i, j))
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

fn raw_matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        for p in 0..k {
            let aip = a[i * k + p];
            for j in 0..n {
                c[i * n + j] += aip * b[p * n + j];
            }
        }
    }
    c
}
