use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{DiffError, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Index of a [`Parameter`] inside a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ParamId(pub usize);

/// A named learnable tensor with its gradient accumulator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
    #[serde(skip)]
    grad: Option<Tensor>,
}

impl Parameter {
    pub fn new(name: impl Into<String>, value: Tensor) -> Self {
        Self {
            name: name.into(),
            value,
            grad: None,
        }
    }

    /// Accumulated gradient; zeros when nothing has been accumulated yet.
    pub fn grad(&self) -> Tensor {
        self.grad
            .clone()
            .unwrap_or_else(|| Tensor::zeros(self.value.shape()))
    }

    /// Accumulated gradient without materializing zeros.
    pub fn grad_ref(&self) -> Option<&Tensor> {
        self.grad.as_ref()
    }

    fn grad_mut(&mut self) -> &mut Tensor {
        let shape = self.value.shape().to_vec();
        self.grad.get_or_insert_with(|| Tensor::zeros(&shape))
    }
}

/// Ordered collection of named parameters. Insertion order is preserved so
/// serialization and iteration are deterministic.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamStore {
    params: Vec<Parameter>,
    #[serde(skip)]
    index: BTreeMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        if let Some(&i) = self.index.get(&name) {
            self.params[i].value = value;
            self.params[i].grad = None;
            return ParamId(i);
        }
        let id = self.params.len();
        self.index.insert(name.clone(), id);
        self.params.push(Parameter::new(name, value));
        ParamId(id)
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter {
        &mut self.params[id.0]
    }

    pub fn by_name(&self, name: &str) -> Option<&Parameter> {
        self.id(name).map(|id| self.get(id))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter> {
        self.params.iter_mut()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad = None;
        }
    }

    /// Total number of scalar entries across all parameters.
    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Rebuilds the name index after deserialization.
    pub fn reindex(&mut self) {
        self.index = self
            .params
            .iter()
            .enumerate()
            .map(|(i, p)| (p.name.clone(), i))
            .collect();
    }
}

#[derive(Debug, Clone)]
enum Op {
    Constant,
    Param,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Tanh(Var),
    Sigmoid(Var),
    Square(Var),
    Sum(Var),
    Mean(Var),
    Concat { parts: Vec<Var>, axis: usize },
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    op: Op,
}

/// Records primitive operations so that gradients can be obtained by a
/// single reverse sweep.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    bound: BTreeMap<ParamId, Var>,
    consumed: bool,
    corrupt_tanh_backward: bool,
}

fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

fn broadcast_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<Vec<usize>, DiffError> {
    if a.shape() == b.shape() {
        Ok(a.shape().to_vec())
    } else if b.is_scalar() {
        Ok(a.shape().to_vec())
    } else if a.is_scalar() {
        Ok(b.shape().to_vec())
    } else {
        Err(DiffError::ShapeMismatch {
            op,
            left: a.shape().to_vec(),
            right: b.shape().to_vec(),
        })
    }
}

fn zip_broadcast(a: &Tensor, b: &Tensor, shape: Vec<usize>, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = match (a.len() == n, b.len() == n) {
        (true, true) => a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect(),
        (true, false) => {
            let y = b.item();
            a.data().iter().map(|&x| f(x, y)).collect()
        }
        (false, true) => {
            let x = a.item();
            b.data().iter().map(|&y| f(x, y)).collect()
        }
        (false, false) => {
            let (x, y) = (a.item(), b.item());
            vec![f(x, y); n]
        }
    };
    Tensor::new(shape, data).expect("broadcast shape")
}

/// Folds an upstream gradient back onto an operand that may have been
/// broadcast from a scalar.
fn reduce_to(grad: Tensor, target: &Tensor) -> Tensor {
    if grad.len() == target.len() {
        Tensor::new(target.shape().to_vec(), grad.into_data()).expect("same size")
    } else {
        let s: f64 = grad.data().iter().sum();
        Tensor::new(target.shape().to_vec(), vec![s]).expect("scalar")
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Test hook: makes the tanh backward rule wrong so gradient checks can
    /// be shown to catch a broken derivative.
    #[doc(hidden)]
    pub fn corrupt_tanh_backward(&mut self, on: bool) {
        self.corrupt_tanh_backward = on;
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn is_consumed(&self) -> bool {
        self.consumed
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Constant)
    }

    pub fn scalar(&mut self, value: f64) -> Var {
        self.constant(Tensor::scalar(value))
    }

    /// Binds a parameter to this tape. Repeated calls return the same node so
    /// that gradients from every use are accumulated together.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.bound.get(&id) {
            return v;
        }
        let v = self.push(store.get(id).value.clone(), Op::Param);
        self.bound.insert(id, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        let out = self.value(a).matmul(self.value(b))?;
        Ok(self.push(out, Op::MatMul(a, b)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        let (x, y) = (self.value(a), self.value(b));
        let shape = broadcast_shape("add", x, y)?;
        let out = zip_broadcast(x, y, shape, |p, q| p + q);
        Ok(self.push(out, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        let (x, y) = (self.value(a), self.value(b));
        let shape = broadcast_shape("sub", x, y)?;
        let out = zip_broadcast(x, y, shape, |p, q| p - q);
        Ok(self.push(out, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        let (x, y) = (self.value(a), self.value(b));
        let shape = broadcast_shape("mul", x, y)?;
        let out = zip_broadcast(x, y, shape, |p, q| p * q);
        Ok(self.push(out, Op::Mul(a, b)))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::tanh);
        self.push(out, Op::Tanh(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).map(sigmoid);
        self.push(out, Op::Sigmoid(a))
    }

    pub fn square(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|v| v * v);
        self.push(out, Op::Square(a))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s: f64 = self.value(a).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let s: f64 = x.data().iter().sum::<f64>() / x.len().max(1) as f64;
        self.push(Tensor::scalar(s), Op::Mean(a))
    }

    /// Concatenates 2-D tensors along `axis` (0 = stack rows, 1 = join columns).
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var, DiffError> {
        let first = parts.first().ok_or(DiffError::ShapeMismatch {
            op: "concat",
            left: vec![],
            right: vec![],
        })?;
        let base = self.value(*first).clone();
        let (rows0, cols0) = (base.rows(), base.cols());
        let mut total = 0;
        for &p in parts {
            let t = self.value(p);
            let ok = match axis {
                0 => t.cols() == cols0,
                1 => t.rows() == rows0,
                _ => false,
            };
            if !ok {
                return Err(DiffError::ShapeMismatch {
                    op: "concat",
                    left: base.shape().to_vec(),
                    right: t.shape().to_vec(),
                });
            }
            total += if axis == 0 { t.rows() } else { t.cols() };
        }
        let out = if axis == 0 {
            let mut data = Vec::with_capacity(total * cols0);
            for &p in parts {
                data.extend_from_slice(self.value(p).data());
            }
            Tensor::matrix(total, cols0, data)?
        } else {
            let mut data = Vec::with_capacity(rows0 * total);
            for i in 0..rows0 {
                for &p in parts {
                    data.extend_from_slice(self.value(p).row(i));
                }
            }
            Tensor::matrix(rows0, total, data)?
        };
        Ok(self.push(
            out,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
        ))
    }

    /// Raw reverse sweep. Returns the gradient of `loss` with respect to every
    /// node (None where the node does not influence the loss).
    fn sweep(&self, loss: Var) -> Result<Vec<Option<Tensor>>, DiffError> {
        if self.consumed {
            return Err(DiffError::TapeConsumed);
        }
        let lv = self.value(loss);
        if !lv.is_scalar() {
            return Err(DiffError::NotScalar(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::new(lv.shape().to_vec(), vec![1.0])?);

        fn acc(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&g),
                slot @ None => *slot = Some(g),
            }
        }

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Constant | Op::Param => {
                    grads[idx] = Some(g);
                    continue;
                }
                Op::MatMul(a, b) => {
                    let (x, y) = (self.value(*a), self.value(*b));
                    let (n, k, m) = (x.rows(), x.cols(), y.cols());
                    // dA = G * B^T, dB = A^T * G
                    let mut da = vec![0.0; n * k];
                    let mut db = vec![0.0; k * m];
                    let (gd, xd, yd) = (g.data(), x.data(), y.data());
                    for i in 0..n {
                        let g_row = &gd[i * m..(i + 1) * m];
                        for p in 0..k {
                            let y_row = &yd[p * m..(p + 1) * m];
                            let mut s = 0.0;
                            for (gv, yv) in g_row.iter().zip(y_row) {
                                s += gv * yv;
                            }
                            da[i * k + p] = s;
                            let xv = xd[i * k + p];
                            if xv != 0.0 {
                                let db_row = &mut db[p * m..(p + 1) * m];
                                for (d, gv) in db_row.iter_mut().zip(g_row) {
                                    *d += xv * gv;
                                }
                            }
                        }
                    }
                    acc(&mut grads, *a, Tensor::matrix(n, k, da)?);
                    acc(&mut grads, *b, Tensor::matrix(k, m, db)?);
                }
                Op::Add(a, b) => {
                    let ga = reduce_to(g.clone(), self.value(*a));
                    let gb = reduce_to(g, self.value(*b));
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *b, gb);
                }
                Op::Sub(a, b) => {
                    let ga = reduce_to(g.clone(), self.value(*a));
                    let gb = reduce_to(g.map(|v| -v), self.value(*b));
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *b, gb);
                }
                Op::Mul(a, b) => {
                    let (x, y) = (self.value(*a), self.value(*b));
                    let shape = g.shape().to_vec();
                    let ga = zip_broadcast(&g, y, shape.clone(), |p, q| p * q);
                    let gb = zip_broadcast(&g, x, shape, |p, q| p * q);
                    acc(&mut grads, *a, reduce_to(ga, x));
                    acc(&mut grads, *b, reduce_to(gb, y));
                }
                Op::Tanh(a) => {
                    let y = &node.value;
                    let corrupt = self.corrupt_tanh_backward;
                    let ga = zip_broadcast(&g, y, g.shape().to_vec(), |p, t| {
                        if corrupt {
                            p * (1.0 - t)
                        } else {
                            p * (1.0 - t * t)
                        }
                    });
                    acc(&mut grads, *a, ga);
                }
                Op::Sigmoid(a) => {
                    let y = &node.value;
                    let ga = zip_broadcast(&g, y, g.shape().to_vec(), |p, s| p * s * (1.0 - s));
                    acc(&mut grads, *a, ga);
                }
                Op::Square(a) => {
                    let x = self.value(*a);
                    let ga = zip_broadcast(&g, x, g.shape().to_vec(), |p, v| 2.0 * p * v);
                    acc(&mut grads, *a, ga);
                }
                Op::Sum(a) => {
                    let x = self.value(*a);
                    acc(&mut grads, *a, Tensor::full(x.shape(), g.item()));
                }
                Op::Mean(a) => {
                    let x = self.value(*a);
                    let scale = g.item() / x.len().max(1) as f64;
                    acc(&mut grads, *a, Tensor::full(x.shape(), scale));
                }
                Op::Concat { parts, axis } => {
                    let cols = g.cols();
                    let mut offset = 0;
                    for &p in parts {
                        let t = self.value(p);
                        let part = if *axis == 0 {
                            let n = t.len();
                            let d = g.data()[offset..offset + n].to_vec();
                            offset += n;
                            Tensor::new(t.shape().to_vec(), d)?
                        } else {
                            let (r, c) = (t.rows(), t.cols());
                            let mut d = Vec::with_capacity(r * c);
                            for i in 0..r {
                                d.extend_from_slice(&g.data()[i * cols + offset..i * cols + offset + c]);
                            }
                            offset += c;
                            Tensor::new(t.shape().to_vec(), d)?
                        };
                        acc(&mut grads, p, part);
                    }
                }
            }
        }
        Ok(grads)
    }

    /// Gradient of `loss` with respect to an arbitrary recorded node.
    pub fn grad_of(&self, loss: Var, wrt: Var) -> Result<Tensor, DiffError> {
        let grads = self.sweep(loss)?;
        Ok(grads
            .get(wrt.0)
            .cloned()
            .flatten()
            .unwrap_or_else(|| Tensor::zeros(self.value(wrt).shape())))
    }

    /// Reverse sweep from `loss`, accumulating `d loss / d param` into every
    /// parameter bound to this tape. Marks the tape consumed.
    pub fn backward(&mut self, loss: Var, store: &mut ParamStore) -> Result<(), DiffError> {
        self.backward_impl(loss, store, false)
    }

    /// Like [`Tape::backward`], but reports a bound parameter the loss does
    /// not depend on as [`DiffError::DisconnectedParameter`].
    pub fn backward_strict(&mut self, loss: Var, store: &mut ParamStore) -> Result<(), DiffError> {
        self.backward_impl(loss, store, true)
    }

    fn backward_impl(&mut self, loss: Var, store: &mut ParamStore, strict: bool) -> Result<(), DiffError> {
        let grads = self.sweep(loss)?;
        for (&id, &var) in &self.bound {
            match grads.get(var.0).and_then(|g| g.as_ref()) {
                Some(g) => store.get_mut(id).grad_mut().add_assign(g),
                None if strict => {
                    return Err(DiffError::DisconnectedParameter(store.get(id).name.clone()));
                }
                None => {}
            }
        }
        self.consumed = true;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(rows: usize, cols: usize, v: &[f64]) -> Tensor {
        Tensor::matrix(rows, cols, v.to_vec()).unwrap()
    }

    #[test]
    fn sigmoid_of_zero_is_half() {
        let mut tape = Tape::new();
        let x = tape.scalar(0.0);
        let y = tape.sigmoid(x);
        assert_eq!(tape.value(y).item(), 0.5);
    }

    #[test]
    fn tanh_gradient_at_zero_is_one() {
        let mut tape = Tape::new();
        let x = tape.scalar(0.0);
        let y = tape.tanh(x);
        assert_eq!(tape.grad_of(y, x).unwrap().item(), 1.0);
    }

    #[test]
    fn matmul_hand_example() {
        let mut tape = Tape::new();
        let a = tape.constant(t(2, 2, &[1.0, 2.0, 3.0, 4.0]));
        let b = tape.constant(t(2, 1, &[1.0, 1.0]));
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(c).data(), &[3.0, 7.0]);
        assert_eq!(tape.value(c).shape(), &[2, 1]);
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[2, 3]));
        assert!(matches!(tape.matmul(a, b), Err(DiffError::ShapeMismatch { .. })));
        let c = tape.constant(Tensor::zeros(&[3, 2]));
        assert!(matches!(tape.add(a, c), Err(DiffError::ShapeMismatch { .. })));
        let row = tape.constant(Tensor::zeros(&[1, 3]));
        assert!(tape.mul(a, row).is_err(), "row broadcast is not supported");
    }

    #[test]
    fn sum_gives_all_ones() {
        let mut store = ParamStore::new();
        let id = store.insert("p", t(2, 3, &[1.0, -2.0, 3.0, 0.5, 0.0, 9.0]));
        let mut tape = Tape::new();
        let p = tape.param(&store, id);
        let s = tape.sum(p);
        tape.backward(s, &mut store).unwrap();
        assert!(store.get(id).grad().data().iter().all(|&g| g == 1.0));
    }

    #[test]
    fn mse_at_target_has_zero_gradient() {
        let target = t(1, 3, &[0.3, -1.0, 2.0]);
        let mut store = ParamStore::new();
        let id = store.insert("p", target.clone());
        let mut tape = Tape::new();
        let p = tape.param(&store, id);
        let c = tape.constant(target);
        let d = tape.sub(p, c).unwrap();
        let sq = tape.square(d);
        let m = tape.mean(sq);
        tape.backward(m, &mut store).unwrap();
        assert!(store.get(id).grad().data().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn backward_requires_scalar_loss() {
        let mut store = ParamStore::new();
        let id = store.insert("p", Tensor::zeros(&[2, 2]));
        let mut tape = Tape::new();
        let p = tape.param(&store, id);
        let y = tape.tanh(p);
        assert!(matches!(tape.backward(y, &mut store), Err(DiffError::NotScalar(_))));
    }

    #[test]
    fn consumed_tape_rejects_second_backward() {
        let mut store = ParamStore::new();
        let id = store.insert("p", Tensor::scalar(1.0));
        let mut tape = Tape::new();
        let p = tape.param(&store, id);
        let y = tape.square(p);
        tape.backward(y, &mut store).unwrap();
        assert!(tape.is_consumed());
        assert!(matches!(tape.backward(y, &mut store), Err(DiffError::TapeConsumed)));
    }

    #[test]
    fn gradients_accumulate_across_tapes() {
        let mut store = ParamStore::new();
        let id = store.insert("p", Tensor::scalar(3.0));
        for _ in 0..2 {
            let mut tape = Tape::new();
            let p = tape.param(&store, id);
            let y = tape.square(p);
            tape.backward(y, &mut store).unwrap();
        }
        assert_eq!(store.get(id).grad().item(), 12.0);
        store.zero_grad();
        assert_eq!(store.get(id).grad().item(), 0.0);
    }

    #[test]
    fn strict_mode_flags_unused_parameter() {
        let mut store = ParamStore::new();
        let used = store.insert("used", Tensor::scalar(1.0));
        let unused = store.insert("unused", Tensor::scalar(1.0));
        let mut tape = Tape::new();
        let u = tape.param(&store, used);
        let _ = tape.param(&store, unused);
        let y = tape.square(u);
        let err = tape.backward_strict(y, &mut store).unwrap_err();
        assert_eq!(err, DiffError::DisconnectedParameter("unused".into()));

        // non-strict: disconnected gradient is simply zero
        let mut tape = Tape::new();
        let u = tape.param(&store, used);
        let _ = tape.param(&store, unused);
        let y = tape.square(u);
        tape.backward(y, &mut store).unwrap();
        assert_eq!(store.get(unused).grad().item(), 0.0);
    }

    #[test]
    fn scalar_broadcast_gradient_sums() {
        let mut store = ParamStore::new();
        let s = store.insert("s", Tensor::scalar(2.0));
        let mut tape = Tape::new();
        let sv = tape.param(&store, s);
        let x = tape.constant(t(2, 2, &[1.0, 2.0, 3.0, 4.0]));
        let y = tape.mul(x, sv).unwrap();
        let z = tape.sum(y);
        tape.backward(z, &mut store).unwrap();
        assert_eq!(store.get(s).grad().item(), 10.0);
    }

    #[test]
    fn concat_columns_and_rows() {
        let mut tape = Tape::new();
        let a = tape.constant(t(2, 1, &[1.0, 2.0]));
        let b = tape.constant(t(2, 2, &[3.0, 4.0, 5.0, 6.0]));
        let c = tape.concat(&[a, b], 1).unwrap();
        assert_eq!(tape.value(c).data(), &[1.0, 3.0, 4.0, 2.0, 5.0, 6.0]);
        let d = tape.concat(&[b, b], 0).unwrap();
        assert_eq!(tape.value(d).shape(), &[4, 2]);
        let s = tape.sum(c);
        assert_eq!(tape.grad_of(s, b).unwrap().data(), &[1.0; 4]);
    }
}
