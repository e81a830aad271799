//! Reverse-mode differentiation over dense row-major `f64` matrices.
//!
//! A [`Tape`] records every operation of one forward pass. Calling
//! [`Tape::backward`] walks it in reverse and returns one gradient per
//! parameter in the [`ParamStore`]. Tapes are cheap and single-use: build a
//! fresh one per sequence, which also makes parallel forward passes
//! independent of each other.

use std::collections::HashMap;

use ndarray::{s, Array2, Axis};

use crate::gmm::{self, POSITIVE_EPS};

pub type Mat = Array2<f64>;

/// Index of a trainable tensor inside a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Mat>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Mat) -> ParamId {
        self.names.push(name.into());
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Mat {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Mat {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Mat)> {
        self.names.iter().map(String::as_str).zip(&self.values)
    }

    pub fn n_scalars(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }

    pub fn zeros_like(&self) -> Grads {
        Grads(self.values.iter().map(|v| Mat::zeros(v.raw_dim())).collect())
    }
}

/// Gradient buffers aligned with a [`ParamStore`].
#[derive(Debug, Clone, PartialEq)]
pub struct Grads(pub Vec<Mat>);

impl Grads {
    pub fn add_assign(&mut self, other: &Grads) {
        for (a, b) in self.0.iter_mut().zip(&other.0) {
            *a += b;
        }
    }

    pub fn get(&self, id: ParamId) -> &Mat {
        &self.0[id.0]
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|m| m.iter().all(|x| x.is_finite()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

enum Op {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    /// `a · bᵀ`
    MatMulT(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Sin(Var),
    Concat(Vec<Var>),
    Slice(Var, usize),
    Gather(Var, Vec<usize>),
    Softmax(Var),
    LayerNorm(Var, Vec<f64>),
    CrossEntropy(Var, Vec<Option<usize>>, Mat),
    GmmNll(Var, Vec<Option<f64>>),
    SquaredError(Var, Vec<Option<f64>>),
    Sum(Var),
}

struct Node {
    value: Mat,
    op: Op,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
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

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A constant input; receives no gradient.
    pub fn constant(&mut self, value: Mat) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(v) = self.params.get(&id) {
            return *v;
        }
        let v = self.push(store.get(id).clone(), Op::Param(id));
        self.params.insert(id, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).dot(self.value(b));
        self.push(v, Op::MatMul(a, b))
    }

    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).dot(&self.value(b).t());
        self.push(v, Op::MatMulT(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) + self.value(b);
        self.push(v, Op::Add(a, b))
    }

    /// Adds the `1 x n` row `b` to every row of `a`.
    pub fn add_row(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) + self.value(b);
        self.push(v, Op::AddRow(a, b))
    }

    /// Multiplies every row of `a` elementwise by the `1 x n` row `b`.
    pub fn mul_row(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) * self.value(b);
        self.push(v, Op::MulRow(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) * self.value(b);
        self.push(v, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a) * c;
        self.push(v, Op::Scale(a, c))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(|x| x.max(0.0));
        self.push(v, Op::Relu(a))
    }

    pub fn sin(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(f64::sin);
        self.push(v, Op::Sin(a))
    }

    /// Column-wise concatenation.
    pub fn concat(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|p| self.value(*p).view()).collect();
        let v = ndarray::concatenate(Axis(1), &views).expect("concat rows must agree");
        self.push(v, Op::Concat(parts.to_vec()))
    }

    /// Columns `start..start + width`.
    pub fn slice_cols(&mut self, a: Var, start: usize, width: usize) -> Var {
        let v = self.value(a).slice(s![.., start..start + width]).to_owned();
        self.push(v, Op::Slice(a, start))
    }

    /// Row lookup, as in an embedding table.
    pub fn gather(&mut self, table: Var, rows: &[usize]) -> Var {
        let v = self.value(table).select(Axis(0), rows);
        self.push(v, Op::Gather(table, rows.to_vec()))
    }

    /// Row softmax over entries where `allowed` is true; other entries get
    /// probability zero and a row with nothing allowed is all zeros.
    pub fn masked_softmax(&mut self, a: Var, allowed: &Array2<bool>) -> Var {
        let x = self.value(a);
        let mut out = Mat::zeros(x.raw_dim());
        for ((xr, mr), mut or) in x.outer_iter().zip(allowed.outer_iter()).zip(out.outer_iter_mut()) {
            let m = xr.iter().zip(mr).filter(|(_, &ok)| ok).map(|(v, _)| *v).fold(f64::NEG_INFINITY, f64::max);
            if m == f64::NEG_INFINITY {
                continue;
            }
            let mut z = 0.0;
            for ((o, &v), &ok) in or.iter_mut().zip(xr).zip(mr) {
                if ok {
                    *o = (v - m).exp();
                    z += *o;
                }
            }
            or.mapv_inplace(|o| o / z);
        }
        self.push(out, Op::Softmax(a))
    }

    /// Per-row standardization `(x - mean) / sqrt(var + eps)`, no affine part.
    pub fn layer_norm(&mut self, a: Var, eps: f64) -> Var {
        let x = self.value(a);
        let n = x.ncols() as f64;
        let mut out = x.clone();
        let mut inv = Vec::with_capacity(x.nrows());
        for mut row in out.outer_iter_mut() {
            let mean = row.sum() / n;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            let is = 1.0 / (var + eps).sqrt();
            row.mapv_inplace(|v| (v - mean) * is);
            inv.push(is);
        }
        self.push(out, Op::LayerNorm(a, inv))
    }

    /// Sum over rows of `-log softmax(logits)[target]`; `None` rows are skipped.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[Option<usize>]) -> Var {
        let x = self.value(logits);
        assert_eq!(x.nrows(), targets.len());
        let mut probs = Mat::zeros(x.raw_dim());
        let mut total = 0.0;
        for ((row, mut prow), t) in x.outer_iter().zip(probs.outer_iter_mut()).zip(targets) {
            let Some(t) = t else { continue };
            let lse = gmm::log_sum_exp(row.iter().copied());
            total -= row[*t] - lse;
            for (p, v) in prow.iter_mut().zip(row) {
                *p = (v - lse).exp();
            }
        }
        self.push(Mat::from_elem((1, 1), total), Op::CrossEntropy(logits, targets.to_vec(), probs))
    }

    /// Sum over rows of the mixture negative log-likelihood of the target,
    /// where each row of `raw` is an unconstrained `[w | mu | sigma]` block
    /// mapped through [`gmm::positive_params`].
    pub fn gmm_nll(&mut self, raw: Var, targets: &[Option<f64>]) -> Var {
        let x = self.value(raw);
        assert_eq!(x.nrows(), targets.len());
        let mut total = 0.0;
        for (row, t) in x.outer_iter().zip(targets) {
            if let Some(t) = t {
                let g = gmm::positive_params(row.as_slice().expect("row-major"));
                total -= g.log_pdf(*t);
            }
        }
        self.push(Mat::from_elem((1, 1), total), Op::GmmNll(raw, targets.to_vec()))
    }

    /// Sum of squared errors of a single-column prediction.
    pub fn squared_error(&mut self, pred: Var, targets: &[Option<f64>]) -> Var {
        let x = self.value(pred);
        assert_eq!(x.nrows(), targets.len());
        let total = x.column(0).iter().zip(targets).filter_map(|(p, t)| t.map(|t| (p - t).powi(2))).sum::<f64>();
        self.push(Mat::from_elem((1, 1), total), Op::SquaredError(pred, targets.to_vec()))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let v = Mat::from_elem((1, 1), self.value(a).sum());
        self.push(v, Op::Sum(a))
    }

    /// Back-propagates `seed * d(output)/d(param)` for every parameter used
    /// on this tape. `output` must be `1 x 1`.
    pub fn backward(&self, output: Var, seed: f64, store: &ParamStore) -> Grads {
        let mut grads: Vec<Option<Mat>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output.0] = Some(Mat::from_elem((1, 1), seed));
        let mut out = store.zeros_like();

        fn acc(grads: &mut [Option<Mat>], v: Var, g: Mat) {
            match &mut grads[v.0] {
                Some(existing) => *existing += &g,
                slot => *slot = Some(g),
            }
        }

        for idx in (0..=output.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Leaf => {}
                Op::Param(id) => out.0[id.0] += &g,
                Op::MatMul(a, b) => {
                    let da = g.dot(&self.value(*b).t());
                    let db = self.value(*a).t().dot(&g);
                    acc(&mut grads, *a, da);
                    acc(&mut grads, *b, db);
                }
                Op::MatMulT(a, b) => {
                    let da = g.dot(self.value(*b));
                    let db = g.t().dot(self.value(*a));
                    acc(&mut grads, *a, da);
                    acc(&mut grads, *b, db);
                }
                Op::Add(a, b) => {
                    acc(&mut grads, *b, g.clone());
                    acc(&mut grads, *a, g);
                }
                Op::AddRow(a, b) => {
                    acc(&mut grads, *b, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                    acc(&mut grads, *a, g);
                }
                Op::MulRow(a, b) => {
                    let db = (&g * self.value(*a)).sum_axis(Axis(0)).insert_axis(Axis(0));
                    let da = &g * self.value(*b);
                    acc(&mut grads, *a, da);
                    acc(&mut grads, *b, db);
                }
                Op::Mul(a, b) => {
                    let da = &g * self.value(*b);
                    let db = &g * self.value(*a);
                    acc(&mut grads, *a, da);
                    acc(&mut grads, *b, db);
                }
                Op::Scale(a, c) => acc(&mut grads, *a, g * *c),
                Op::Relu(a) => {
                    let mut d = g;
                    d.zip_mut_with(&node.value, |d, y| {
                        if *y <= 0.0 {
                            *d = 0.0
                        }
                    });
                    acc(&mut grads, *a, d);
                }
                Op::Sin(a) => {
                    let mut d = g;
                    d.zip_mut_with(self.value(*a), |d, x| *d *= x.cos());
                    acc(&mut grads, *a, d);
                }
                Op::Concat(parts) => {
                    let mut start = 0;
                    for p in parts {
                        let w = self.value(*p).ncols();
                        acc(&mut grads, *p, g.slice(s![.., start..start + w]).to_owned());
                        start += w;
                    }
                }
                Op::Slice(a, start) => {
                    let mut d = Mat::zeros(self.value(*a).raw_dim());
                    d.slice_mut(s![.., *start..*start + g.ncols()]).assign(&g);
                    acc(&mut grads, *a, d);
                }
                Op::Gather(table, rows) => {
                    let mut d = Mat::zeros(self.value(*table).raw_dim());
                    for (r, gr) in rows.iter().zip(g.outer_iter()) {
                        let mut target = d.row_mut(*r);
                        target += &gr;
                    }
                    acc(&mut grads, *table, d);
                }
                Op::Softmax(a) => {
                    let y = &node.value;
                    let mut d = &g * y;
                    for (mut dr, yr) in d.outer_iter_mut().zip(y.outer_iter()) {
                        let dot: f64 = dr.sum();
                        dr.zip_mut_with(&yr, |dv, yv| *dv -= yv * dot);
                    }
                    acc(&mut grads, *a, d);
                }
                Op::LayerNorm(a, inv) => {
                    let y = &node.value;
                    let n = y.ncols() as f64;
                    let mut d = g.clone();
                    for ((mut dr, yr), is) in d.outer_iter_mut().zip(y.outer_iter()).zip(inv) {
                        let mean_g = dr.sum() / n;
                        let mean_gy = dr.iter().zip(yr).map(|(a, b)| a * b).sum::<f64>() / n;
                        dr.zip_mut_with(&yr, |dv, yv| *dv = is * (*dv - mean_g - yv * mean_gy));
                    }
                    acc(&mut grads, *a, d);
                }
                Op::CrossEntropy(logits, targets, probs) => {
                    let s = g[[0, 0]];
                    let mut d = Mat::zeros(probs.raw_dim());
                    for ((mut dr, pr), t) in d.outer_iter_mut().zip(probs.outer_iter()).zip(targets) {
                        if let Some(t) = t {
                            dr.assign(&pr);
                            dr[*t] -= 1.0;
                            dr *= s;
                        }
                    }
                    acc(&mut grads, *logits, d);
                }
                Op::GmmNll(raw, targets) => {
                    let s = g[[0, 0]];
                    let x = self.value(*raw);
                    let mut d = Mat::zeros(x.raw_dim());
                    for ((row, mut dr), t) in x.outer_iter().zip(d.outer_iter_mut()).zip(targets) {
                        if let Some(t) = t {
                            gmm_nll_grad(row.as_slice().expect("row-major"), *t, dr.as_slice_mut().expect("row-major"), s);
                        }
                    }
                    acc(&mut grads, *raw, d);
                }
                Op::SquaredError(pred, targets) => {
                    let s = g[[0, 0]];
                    let x = self.value(*pred);
                    let mut d = Mat::zeros(x.raw_dim());
                    for (i, t) in targets.iter().enumerate() {
                        if let Some(t) = t {
                            d[[i, 0]] = 2.0 * (x[[i, 0]] - t) * s;
                        }
                    }
                    acc(&mut grads, *pred, d);
                }
                Op::Sum(a) => {
                    let s = g[[0, 0]];
                    acc(&mut grads, *a, Mat::from_elem(self.value(*a).raw_dim(), s));
                }
            }
        }
        out
    }
}

/// Gradient of `-log p(t)` with respect to one raw `[a | mu | c]` block,
/// scaled by `s` and written into `out`.
fn gmm_nll_grad(raw: &[f64], t: f64, out: &mut [f64], s: f64) {
    let k = raw.len() / 3;
    let u: Vec<f64> = raw[..k].iter().map(|&a| gmm::softplus(a) + POSITIVE_EPS).collect();
    let total_u: f64 = u.iter().sum();
    let sigma: Vec<f64> = raw[2 * k..].iter().map(|&c| gmm::softplus(c) + POSITIVE_EPS).collect();
    let z: Vec<f64> = (0..k).map(|j| (t - raw[k + j]) / sigma[j]).collect();
    let log_terms: Vec<f64> = (0..k)
        .map(|j| (u[j] / total_u).ln() - 0.5 * z[j] * z[j] - sigma[j].ln() - 0.5 * (2.0 * std::f64::consts::PI).ln())
        .collect();
    let lse = gmm::log_sum_exp(log_terms.iter().copied());
    for j in 0..k {
        let resp = (log_terms[j] - lse).exp();
        out[j] = s * (-resp / u[j] + 1.0 / total_u) * gmm::sigmoid(raw[j]);
        out[k + j] = s * (-resp * z[j] / sigma[j]);
        out[2 * k + j] = s * (-resp * (z[j] * z[j] - 1.0) / sigma[j]) * gmm::sigmoid(raw[2 * k + j]);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Mat {
        Mat::from_shape_fn((rows, cols), |_| rng.random_range(-1.0..1.0))
    }

    /// Compares backward() against central differences of `f` for every
    /// parameter entry.
    fn check<F>(store: &mut ParamStore, f: F)
    where
        F: Fn(&mut Tape, &ParamStore) -> Var,
    {
        let mut tape = Tape::new();
        let out = f(&mut tape, store);
        let grads = tape.backward(out, 1.0, store);
        let h = 1e-6;
        for id in store.ids().collect::<Vec<_>>() {
            for i in 0..store.get(id).len() {
                let orig = store.get(id).as_slice().unwrap()[i];
                store.get_mut(id).as_slice_mut().unwrap()[i] = orig + h;
                let mut t = Tape::new();
                let v = f(&mut t, store);
                let plus = t.scalar(v);
                store.get_mut(id).as_slice_mut().unwrap()[i] = orig - h;
                let mut t = Tape::new();
                let v = f(&mut t, store);
                let minus = t.scalar(v);
                store.get_mut(id).as_slice_mut().unwrap()[i] = orig;
                let fd = (plus - minus) / (2.0 * h);
                let an = grads.get(id).as_slice().unwrap()[i];
                let tol = 1e-6 + 1e-5 * fd.abs().max(an.abs());
                assert!((fd - an).abs() < tol, "{}[{i}]: fd {fd} vs analytic {an}", store.name(id));
            }
        }
    }

    #[test]
    fn linear_algebra_ops() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let a = store.add("a", random(3, 4, &mut rng));
        let b = store.add("b", random(4, 2, &mut rng));
        let c = store.add("c", random(5, 2, &mut rng));
        let r = store.add("r", random(1, 5, &mut rng));
        check(&mut store, |t, s| {
            let (a, b, c, r) = (t.param(s, a), t.param(s, b), t.param(s, c), t.param(s, r));
            let ab = t.matmul(a, b);
            let abc = t.matmul_t(ab, c);
            let shifted = t.add_row(abc, r);
            let scaled = t.mul_row(shifted, r);
            let sq = t.mul(scaled, scaled);
            let sc = t.scale(sq, 0.3);
            let sum = t.add(sc, abc);
            t.sum(sum)
        });
    }

    #[test]
    fn elementwise_and_structural_ops() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        let a = store.add("a", random(3, 4, &mut rng));
        let table = store.add("table", random(5, 3, &mut rng));
        let w = store.add("w", random(7, 1, &mut rng));
        check(&mut store, |t, s| {
            let a = t.param(s, a);
            let e = t.param(s, table);
            let rows = t.gather(e, &[4, 0, 4]);
            let cat = t.concat(&[a, rows]);
            let part = t.slice_cols(cat, 2, 4);
            let sn = t.sin(part);
            let rl = t.relu(cat);
            let sl = t.slice_cols(rl, 1, 3);
            let both = t.concat(&[sn, sl]);
            let w = t.param(s, w);
            let y = t.matmul(both, w);
            let y2 = t.mul(y, y);
            t.sum(y2)
        });
    }

    #[test]
    fn softmax_and_layer_norm() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::new();
        let a = store.add("a", random(4, 4, &mut rng));
        let w = store.add("w", random(4, 3, &mut rng));
        let allowed = Array2::from_shape_fn((4, 4), |(i, j)| j <= i);
        check(&mut store, |t, s| {
            let a = t.param(s, a);
            let p = t.masked_softmax(a, &allowed);
            let n = t.layer_norm(a, 1e-5);
            let m = t.matmul(p, n);
            let w = t.param(s, w);
            let y = t.matmul(m, w);
            let y = t.mul(y, y);
            t.sum(y)
        });
    }

    #[test]
    fn losses() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        let logits = store.add("logits", random(4, 5, &mut rng));
        let raw = store.add("raw", random(4, 9, &mut rng) * 2.0);
        let pred = store.add("pred", random(4, 1, &mut rng));
        check(&mut store, |t, s| {
            let l = t.param(s, logits);
            let ce = t.cross_entropy(l, &[Some(1), None, Some(4), Some(0)]);
            let r = t.param(s, raw);
            let nll = t.gmm_nll(r, &[Some(0.3), Some(-1.2), None, Some(2.5)]);
            let p = t.param(s, pred);
            let se = t.squared_error(p, &[None, Some(0.5), Some(-0.2), Some(1.0)]);
            let tot = t.add(ce, nll);
            t.add(tot, se)
        });
    }

    #[test]
    fn masked_softmax_rows() {
        let mut t = Tape::new();
        let a = t.constant(array![[1.0, 2.0], [3.0, 4.0]]);
        let allowed = array![[false, false], [true, false]];
        let p = t.masked_softmax(a, &allowed);
        assert_eq!(t.value(p), &array![[0.0, 0.0], [1.0, 0.0]]);
    }

    #[test]
    fn cross_entropy_uniform_is_log_v() {
        let mut t = Tape::new();
        let l = t.constant(Mat::zeros((1, 7)));
        let ce = t.cross_entropy(l, &[Some(3)]);
        assert!((t.scalar(ce) - 7f64.ln()).abs() < 1e-12);
    }
}
