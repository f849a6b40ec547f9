//! Reverse-mode differentiation over dense row-major matrices.
//!
//! Every forward operation pushes a node holding its value and the recipe
//! needed to send adjoints back to its inputs. Rows are batch entries in
//! every op below, so a single tape carries a whole mini-batch.

use ndarray::{s, Array2, Axis, Zip};

use crate::error::{Error, Result};

pub type Mat = Array2<f64>;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Linear,
    Tanh,
    Relu,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Param(usize),
    MatMulT(Var, Var),
    AddRow(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    LinComb(Vec<(f64, Var)>),
    MulConst(Var, Mat),
    AddScalar(Var),
    Tanh(Var),
    Relu(Var),
    Sigmoid(Var),
    Softplus(Var),
    Log(Var),
    Square(Var),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols(Var, usize),
    SoftmaxRows(Var),
    LogSoftmaxRows(Var),
    Sum(Var),
    WeightedSum(Var, Mat),
    GatherSum(Var, Vec<Vec<(usize, usize)>>),
    ClampMin(Var, f64),
}

#[derive(Debug)]
struct Node {
    value: Mat,
    op: Op,
}

/// One forward pass worth of recorded operations.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn shape_err(what: &str, a: &[usize], b: &[usize]) -> Error {
    Error::Dimension(format!("{what}: {a:?} vs {b:?}"))
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Mat, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Mat {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[[0, 0]]
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.dim()
    }

    /// Constant input; receives no gradient of interest.
    pub fn constant(&mut self, value: Mat) -> Var {
        self.push(value, Op::Leaf)
    }

    /// Leaf tied to parameter slot `slot` of the gradient output.
    pub fn param(&mut self, slot: usize, value: Mat) -> Var {
        self.push(value, Op::Param(slot))
    }

    /// `x · wᵀ` where `w` is stored `out × in`.
    pub fn matmul_t(&mut self, x: Var, w: Var) -> Result<Var> {
        let (xv, wv) = (self.value(x), self.value(w));
        if xv.ncols() != wv.ncols() {
            return Err(shape_err("matmul_t", xv.shape(), wv.shape()));
        }
        let y = xv.dot(&wv.t());
        Ok(self.push(y, Op::MatMulT(x, w)))
    }

    /// Adds the `1 × n` row `b` to every row of `x`.
    pub fn add_row(&mut self, x: Var, b: Var) -> Result<Var> {
        let (xv, bv) = (self.value(x), self.value(b));
        if bv.nrows() != 1 || bv.ncols() != xv.ncols() {
            return Err(shape_err("add_row", xv.shape(), bv.shape()));
        }
        let y = xv + bv;
        Ok(self.push(y, Op::AddRow(x, b)))
    }

    fn same_shape(&self, what: &str, a: Var, b: Var) -> Result<()> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.dim() != bv.dim() {
            return Err(shape_err(what, av.shape(), bv.shape()));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let y = self.value(a) + self.value(b);
        Ok(self.push(y, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let y = self.value(a) - self.value(b);
        Ok(self.push(y, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let y = self.value(a) * self.value(b);
        Ok(self.push(y, Op::Mul(a, b)))
    }

    /// `Σ cᵢ·vᵢ` over same-shaped inputs.
    pub fn lincomb(&mut self, terms: &[(f64, Var)]) -> Result<Var> {
        let Some(&(_, first)) = terms.first() else {
            return Err(Error::Contract("lincomb of zero terms".into()));
        };
        let mut y = Mat::zeros(self.value(first).dim());
        for &(c, v) in terms {
            let vv = self.value(v);
            if vv.dim() != y.dim() {
                return Err(shape_err("lincomb", y.shape(), vv.shape()));
            }
            if c != 0.0 {
                y.scaled_add(c, vv);
            }
        }
        Ok(self.push(y, Op::LinComb(terms.to_vec())))
    }

    /// Elementwise product with a constant matrix.
    pub fn mul_const(&mut self, a: Var, c: Mat) -> Result<Var> {
        let av = self.value(a);
        if av.dim() != c.dim() {
            return Err(shape_err("mul_const", av.shape(), c.shape()));
        }
        let y = av * &c;
        Ok(self.push(y, Op::MulConst(a, c)))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let y = self.value(a) + c;
        self.push(y, Op::AddScalar(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let y = self.value(a).mapv(f64::tanh);
        self.push(y, Op::Tanh(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let y = self.value(a).mapv(|v| v.max(0.0));
        self.push(y, Op::Relu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let y = self.value(a).mapv(sigmoid);
        self.push(y, Op::Sigmoid(a))
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        let y = self.value(a).mapv(softplus);
        self.push(y, Op::Softplus(a))
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        let av = self.value(a);
        if av.iter().any(|&v| v <= 0.0) {
            return Err(Error::Domain("log of nonpositive value".into()));
        }
        let y = av.mapv(f64::ln);
        Ok(self.push(y, Op::Log(a)))
    }

    pub fn square(&mut self, a: Var) -> Var {
        let y = self.value(a).mapv(|v| v * v);
        self.push(y, Op::Square(a))
    }

    pub fn activate(&mut self, a: Var, act: Activation) -> Var {
        match act {
            Activation::Linear => a,
            Activation::Tanh => self.tanh(a),
            Activation::Relu => self.relu(a),
        }
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let y = ndarray::concatenate(Axis(1), &views)
            .map_err(|e| Error::Dimension(format!("concat_cols: {e}")))?;
        Ok(self.push(y, Op::ConcatCols(parts.to_vec())))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let y = ndarray::concatenate(Axis(0), &views)
            .map_err(|e| Error::Dimension(format!("concat_rows: {e}")))?;
        Ok(self.push(y, Op::ConcatRows(parts.to_vec())))
    }

    /// Columns `start..start + len`.
    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let av = self.value(a);
        if start + len > av.ncols() {
            return Err(Error::Dimension(format!(
                "slice_cols {start}+{len} of {} columns",
                av.ncols()
            )));
        }
        let y = av.slice(s![.., start..start + len]).to_owned();
        Ok(self.push(y, Op::SliceCols(a, start)))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let y = softmax_rows(self.value(a));
        self.push(y, Op::SoftmaxRows(a))
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Var {
        let mut y = self.value(a).clone();
        for mut row in y.rows_mut() {
            let m = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
            let lse = m + row.iter().map(|&v| (v - m).exp()).sum::<f64>().ln();
            row.mapv_inplace(|v| v - lse);
        }
        self.push(y, Op::LogSoftmaxRows(a))
    }

    /// Sum of all entries as a `1 × 1` node.
    pub fn sum(&mut self, a: Var) -> Var {
        let y = Mat::from_elem((1, 1), self.value(a).sum());
        self.push(y, Op::Sum(a))
    }

    /// `Σ cᵢⱼ·aᵢⱼ` as a `1 × 1` node.
    pub fn weighted_sum(&mut self, a: Var, c: Mat) -> Result<Var> {
        let av = self.value(a);
        if av.dim() != c.dim() {
            return Err(shape_err("weighted_sum", av.shape(), c.shape()));
        }
        let total = Zip::from(av).and(&c).fold(0.0, |acc, &x, &w| acc + x * w);
        Ok(self.push(Mat::from_elem((1, 1), total), Op::WeightedSum(a, c)))
    }

    /// Column vector whose entry `g` sums the listed `(row, col)` cells of `a`.
    /// An empty group yields 0.
    pub fn gather_sum(&mut self, a: Var, groups: Vec<Vec<(usize, usize)>>) -> Result<Var> {
        let av = self.value(a);
        let (r, c) = av.dim();
        let mut y = Mat::zeros((groups.len(), 1));
        for (g, cells) in groups.iter().enumerate() {
            for &(i, j) in cells {
                if i >= r || j >= c {
                    return Err(Error::Dimension(format!("gather ({i},{j}) outside {r}x{c}")));
                }
                y[[g, 0]] += av[[i, j]];
            }
        }
        Ok(self.push(y, Op::GatherSum(a, groups)))
    }

    pub fn clamp_min(&mut self, a: Var, lo: f64) -> Var {
        let y = self.value(a).mapv(|v| v.max(lo));
        self.push(y, Op::ClampMin(a, lo))
    }

    /// Dense layer `act(x·wᵀ + b)`.
    pub fn dense(&mut self, x: Var, w: Var, b: Var, act: Activation) -> Result<Var> {
        let lin = self.matmul_t(x, w)?;
        let pre = self.add_row(lin, b)?;
        Ok(self.activate(pre, act))
    }

    /// Adjoints of `loss` with respect to every parameter slot in `0..n_slots`.
    /// Slots the loss does not touch come back as `None`.
    pub fn backward(&self, loss: Var, n_slots: usize) -> Result<Vec<Option<Mat>>> {
        if self.value(loss).dim() != (1, 1) {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got {:?}",
                self.value(loss).shape()
            )));
        }
        let mut adj: Vec<Option<Mat>> = (0..=loss.0).map(|_| None).collect();
        adj[loss.0] = Some(Mat::ones((1, 1)));
        let mut grads: Vec<Option<Mat>> = vec![None; n_slots];

        for idx in (0..=loss.0).rev() {
            let Some(g) = adj[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Leaf => {}
                Op::Param(slot) => {
                    if *slot >= n_slots {
                        return Err(Error::Contract(format!("param slot {slot} >= {n_slots}")));
                    }
                    accumulate(&mut grads[*slot], g);
                }
                Op::MatMulT(x, w) => {
                    let gx = g.dot(self.value(*w));
                    let gw = g.t().dot(self.value(*x));
                    accumulate(&mut adj[x.0], gx);
                    accumulate(&mut adj[w.0], gw);
                }
                Op::AddRow(x, b) => {
                    let gb = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                    accumulate(&mut adj[b.0], gb);
                    accumulate(&mut adj[x.0], g);
                }
                Op::Add(a, b) => {
                    accumulate(&mut adj[b.0], g.clone());
                    accumulate(&mut adj[a.0], g);
                }
                Op::Sub(a, b) => {
                    accumulate(&mut adj[b.0], -&g);
                    accumulate(&mut adj[a.0], g);
                }
                Op::Mul(a, b) => {
                    let ga = &g * self.value(*b);
                    let gb = &g * self.value(*a);
                    accumulate(&mut adj[a.0], ga);
                    accumulate(&mut adj[b.0], gb);
                }
                Op::LinComb(terms) => {
                    for &(c, v) in terms {
                        if c != 0.0 {
                            accumulate_scaled(&mut adj[v.0], c, &g);
                        }
                    }
                }
                Op::MulConst(a, c) => accumulate(&mut adj[a.0], &g * c),
                Op::AddScalar(a) => accumulate(&mut adj[a.0], g),
                Op::Tanh(a) => {
                    let ga = Zip::from(&g)
                        .and(&node.value)
                        .map_collect(|&g, &y| g * (1.0 - y * y));
                    accumulate(&mut adj[a.0], ga);
                }
                Op::Relu(a) => {
                    let ga = Zip::from(&g)
                        .and(self.value(*a))
                        .map_collect(|&g, &x| if x > 0.0 { g } else { 0.0 });
                    accumulate(&mut adj[a.0], ga);
                }
                Op::Sigmoid(a) => {
                    let ga = Zip::from(&g)
                        .and(&node.value)
                        .map_collect(|&g, &y| g * y * (1.0 - y));
                    accumulate(&mut adj[a.0], ga);
                }
                Op::Softplus(a) => {
                    let ga = Zip::from(&g)
                        .and(self.value(*a))
                        .map_collect(|&g, &x| g * sigmoid(x));
                    accumulate(&mut adj[a.0], ga);
                }
                Op::Log(a) => {
                    let ga = Zip::from(&g).and(self.value(*a)).map_collect(|&g, &x| g / x);
                    accumulate(&mut adj[a.0], ga);
                }
                Op::Square(a) => {
                    let ga = Zip::from(&g)
                        .and(self.value(*a))
                        .map_collect(|&g, &x| 2.0 * g * x);
                    accumulate(&mut adj[a.0], ga);
                }
                Op::ConcatCols(parts) => {
                    let mut start = 0;
                    for &p in parts {
                        let w = self.value(p).ncols();
                        let gp = g.slice(s![.., start..start + w]).to_owned();
                        accumulate(&mut adj[p.0], gp);
                        start += w;
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut start = 0;
                    for &p in parts {
                        let h = self.value(p).nrows();
                        let gp = g.slice(s![start..start + h, ..]).to_owned();
                        accumulate(&mut adj[p.0], gp);
                        start += h;
                    }
                }
                Op::SliceCols(a, start) => {
                    let mut ga = Mat::zeros(self.value(*a).dim());
                    ga.slice_mut(s![.., *start..*start + g.ncols()]).assign(&g);
                    accumulate(&mut adj[a.0], ga);
                }
                Op::SoftmaxRows(a) => {
                    let y = &node.value;
                    let mut ga = Mat::zeros(y.dim());
                    for ((gr, yr), mut out) in g.rows().into_iter().zip(y.rows()).zip(ga.rows_mut()) {
                        let dot: f64 = gr.iter().zip(yr.iter()).map(|(a, b)| a * b).sum();
                        Zip::from(&mut out)
                            .and(&gr)
                            .and(&yr)
                            .for_each(|o, &gi, &yi| *o = yi * (gi - dot));
                    }
                    accumulate(&mut adj[a.0], ga);
                }
                Op::LogSoftmaxRows(a) => {
                    let y = &node.value;
                    let mut ga = Mat::zeros(y.dim());
                    for ((gr, yr), mut out) in g.rows().into_iter().zip(y.rows()).zip(ga.rows_mut()) {
                        let total: f64 = gr.sum();
                        Zip::from(&mut out)
                            .and(&gr)
                            .and(&yr)
                            .for_each(|o, &gi, &yi| *o = gi - yi.exp() * total);
                    }
                    accumulate(&mut adj[a.0], ga);
                }
                Op::Sum(a) => {
                    let ga = Mat::from_elem(self.value(*a).dim(), g[[0, 0]]);
                    accumulate(&mut adj[a.0], ga);
                }
                Op::WeightedSum(a, c) => accumulate(&mut adj[a.0], c * g[[0, 0]]),
                Op::GatherSum(a, groups) => {
                    let mut ga = Mat::zeros(self.value(*a).dim());
                    for (gi, cells) in groups.iter().enumerate() {
                        for &(i, j) in cells {
                            ga[[i, j]] += g[[gi, 0]];
                        }
                    }
                    accumulate(&mut adj[a.0], ga);
                }
                Op::ClampMin(a, lo) => {
                    let ga = Zip::from(&g)
                        .and(self.value(*a))
                        .map_collect(|&g, &x| if x > *lo { g } else { 0.0 });
                    accumulate(&mut adj[a.0], ga);
                }
            }
        }
        Ok(grads)
    }
}

fn accumulate(slot: &mut Option<Mat>, g: Mat) {
    match slot {
        Some(acc) => *acc += &g,
        None => *slot = Some(g),
    }
}

fn accumulate_scaled(slot: &mut Option<Mat>, c: f64, g: &Mat) {
    match slot {
        Some(acc) => acc.scaled_add(c, g),
        None => *slot = Some(g * c),
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Max-subtracted softmax applied to each row.
pub fn softmax_rows(x: &Mat) -> Mat {
    let mut y = x.clone();
    for mut row in y.rows_mut() {
        let m = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        row.mapv_inplace(|v| (v - m).exp());
        let z = row.sum();
        row.mapv_inplace(|v| v / z);
    }
    y
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn quadratic_gradient_is_twice_params() {
        let mut tape = Tape::new();
        let p = tape.param(0, array![[1.0, -2.0], [0.5, 3.0]]);
        let sq = tape.square(p);
        let loss = tape.sum(sq);
        let g = tape.backward(loss, 2).unwrap();
        assert_eq!(g[0].as_ref().unwrap(), &array![[2.0, -4.0], [1.0, 6.0]]);
        // slot 1 never appears on the tape
        assert!(g[1].is_none());
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut tape = Tape::new();
        let p = tape.param(0, array![[1.0, 2.0]]);
        assert!(matches!(tape.backward(p, 1), Err(Error::Contract(_))));
    }

    #[test]
    fn log_softmax_matches_log_of_softmax() {
        let x = array![[0.3, -1.2, 4.0], [50.0, -50.0, 0.0]];
        let mut tape = Tape::new();
        let v = tape.constant(x.clone());
        let ls = tape.log_softmax_rows(v);
        let sm = softmax_rows(&x);
        for (a, b) in tape.value(ls).iter().zip(sm.iter()) {
            assert!((a - b.ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn matmul_shape_mismatch() {
        let mut tape = Tape::new();
        let x = tape.constant(Mat::zeros((2, 3)));
        let w = tape.constant(Mat::zeros((4, 2)));
        assert!(matches!(tape.matmul_t(x, w), Err(Error::Dimension(_))));
    }

    #[test]
    fn softplus_is_stable() {
        assert!((softplus(0.0) - 2f64.ln()).abs() < 1e-15);
        assert_eq!(softplus(800.0), 800.0);
        assert!(softplus(-800.0) >= 0.0);
    }
}
