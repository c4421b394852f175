//! Dense arrays and a small reverse-mode autodiff graph.
//!
//! A [`Graph`] records every operation as a node appended to an arena, so node
//! indices are already a topological order. [`Graph::backward`] marks the nodes
//! reachable from the root and visits them once each in reverse index order.
//!
//! Broadcasting is limited to scalar-with-array; row and column replication
//! are explicit operations ([`Graph::broadcast_rows`], [`Graph::broadcast_cols`]).

use std::fmt::Debug;
use std::iter::Sum;
use std::ops::AddAssign;

use num_traits::{Float, FromPrimitive, ToPrimitive};

use crate::error::{Error, Result};

/// Floating-point element type of arrays and graphs.
///
/// Production code runs on `f32`; `f64` exists so gradient checks can evaluate
/// the same forward code without single-precision rounding.
pub trait Real:
    Float + FromPrimitive + ToPrimitive + Default + Debug + Send + Sync + Sum + AddAssign + 'static
{
    /// `c = a·b (+ c)`, with `a` logically `m×k` and `b` logically `k×n`.
    /// A transposed operand is stored in the transposed (row-major) layout.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[Self],
        a_trans: bool,
        b: &[Self],
        b_trans: bool,
        c: &mut [Self],
        accumulate: bool,
    );

    fn of(x: f64) -> Self {
        Self::from_f64(x).expect("representable constant")
    }
}

fn strides(rows: usize, cols: usize, trans: bool) -> (isize, isize) {
    // logical rows×cols
    if trans {
        (1, rows as isize)
    } else {
        (cols as isize, 1)
    }
}

macro_rules! impl_real {
    ($t:ty, $gemm:path) => {
        impl Real for $t {
            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                a: &[Self],
                a_trans: bool,
                b: &[Self],
                b_trans: bool,
                c: &mut [Self],
                accumulate: bool,
            ) {
                assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
                if m == 0 || n == 0 {
                    return;
                }
                let (rsa, csa) = strides(m, k, a_trans);
                let (rsb, csb) = strides(k, n, b_trans);
                let beta = if accumulate { 1.0 } else { 0.0 };
                // SAFETY: bounds asserted above; strides describe the row-major
                // (or transposed row-major) layout of each slice.
                unsafe {
                    $gemm(
                        m,
                        k,
                        n,
                        1.0,
                        a.as_ptr(),
                        rsa,
                        csa,
                        b.as_ptr(),
                        rsb,
                        csb,
                        beta,
                        c.as_mut_ptr(),
                        n as isize,
                        1,
                    );
                }
            }
        }
    };
}

impl_real!(f32, matrixmultiply::sgemm);
impl_real!(f64, matrixmultiply::dgemm);

/// Row-major dense array.
#[derive(Clone, Debug, PartialEq)]
pub struct DenseArray<T = f32> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Real> DenseArray<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::shape("array", format!("zero-sized dimension in {shape:?}")));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::shape(
                "array",
                format!("shape {shape:?} needs {n} values, got {}", data.len()),
            ));
        }
        Ok(DenseArray { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        DenseArray { shape: shape.to_vec(), data: vec![T::zero(); n] }
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        let n = shape.iter().product();
        DenseArray { shape: shape.to_vec(), data: vec![value; n] }
    }

    pub fn scalar(value: T) -> Self {
        DenseArray { shape: vec![1], data: vec![value] }
    }

    /// 2-D array from a row-major buffer.
    pub fn matrix(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    pub fn row(data: Vec<T>) -> Self {
        DenseArray { shape: vec![1, data.len()], data }
    }

    pub fn identity(n: usize) -> Self {
        let mut a = Self::zeros(&[n, n]);
        for i in 0..n {
            a.data[i * n + i] = T::one();
        }
        a
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// Rows of a 2-D array (1 for vectors).
    pub fn rows(&self) -> usize {
        match self.shape.len() {
            2 => self.shape[0],
            _ => 1,
        }
    }

    pub fn cols(&self) -> usize {
        *self.shape.last().unwrap_or(&1)
    }

    pub fn get(&self, r: usize, c: usize) -> T {
        self.data[r * self.cols() + c]
    }

    pub fn row_slice(&self, r: usize) -> &[T] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }

    pub fn item(&self) -> T {
        self.data[0]
    }

    pub fn cast<U: Real>(&self) -> DenseArray<U> {
        DenseArray {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| U::from(x).expect("cast")).collect(),
        }
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        DenseArray { shape: self.shape.clone(), data: self.data.iter().map(|&x| f(x)).collect() }
    }

    pub fn reshaped(mut self, shape: Vec<usize>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(Error::shape("reshape", format!("{:?} -> {shape:?}", self.shape)));
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn ensure_finite(&self, what: &str) -> Result<()> {
        if self.is_finite() {
            Ok(())
        } else {
            Err(Error::NonFinite(what.to_string()))
        }
    }

    fn as_matrix_dims(&self) -> Option<(usize, usize)> {
        match self.shape.len() {
            1 => Some((1, self.shape[0])),
            2 => Some((self.shape[0], self.shape[1])),
            _ => None,
        }
    }

    /// Plain matrix product without graph bookkeeping.
    pub fn matmul(&self, other: &Self) -> Result<Self> {
        let (m, k) = self
            .as_matrix_dims()
            .ok_or_else(|| Error::shape("matmul", format!("lhs is {:?}", self.shape)))?;
        let (k2, n) = other
            .as_matrix_dims()
            .ok_or_else(|| Error::shape("matmul", format!("rhs is {:?}", other.shape)))?;
        if k != k2 {
            return Err(Error::shape(
                "matmul",
                format!("inner dimensions differ: {:?} x {:?}", self.shape, other.shape),
            ));
        }
        let mut out = vec![T::zero(); m * n];
        T::gemm(m, k, n, &self.data, false, &other.data, false, &mut out, false);
        Ok(DenseArray { shape: vec![m, n], data: out })
    }
}

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op<T> {
    Leaf,
    Matmul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Neg(Var),
    Scale(Var, T),
    AddConst(Var),
    Relu(Var),
    Exp(Var),
    Log(Var),
    Sqrt(Var),
    Square(Var),
    Sum(Var),
    Mean(Var),
    L2Norm(Var),
    RowSum(Var),
    BroadcastCols(Var),
    BroadcastRows(Var),
    SliceCols(Var, usize),
    ConcatCols(Vec<Var>),
    Reshape(Var),
    CrossRows(Var, Var),
}

#[derive(Clone, Debug)]
struct Node<T> {
    value: DenseArray<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Arena of recorded operations for one forward/backward pass.
#[derive(Clone, Debug, Default)]
pub struct Graph<T = f32> {
    nodes: Vec<Node<T>>,
}

/// Gradients of a scalar root with respect to every reachable node.
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<DenseArray<T>>>,
}

impl<T: Real> Gradients<T> {
    /// Gradient for `var`, or `None` if the root does not depend on it.
    pub fn get(&self, var: Var) -> Option<&DenseArray<T>> {
        self.grads.get(var.0).and_then(|g| g.as_ref())
    }

    /// Gradient for `var`, zero-filled when the root does not depend on it.
    pub fn wrt(&self, graph: &Graph<T>, var: Var) -> DenseArray<T> {
        self.get(var)
            .cloned()
            .unwrap_or_else(|| DenseArray::zeros(graph.value(var).shape()))
    }

    pub fn take(&mut self, var: Var) -> Option<DenseArray<T>> {
        self.grads.get_mut(var.0).and_then(|g| g.take())
    }
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Bcast {
    Same,
    LhsScalar,
    RhsScalar,
}

fn bcast_kind<T: Real>(op: &'static str, a: &DenseArray<T>, b: &DenseArray<T>) -> Result<Bcast> {
    if a.shape == b.shape {
        Ok(Bcast::Same)
    } else if a.is_scalar() {
        Ok(Bcast::LhsScalar)
    } else if b.is_scalar() {
        Ok(Bcast::RhsScalar)
    } else {
        Err(Error::shape(op, format!("{:?} vs {:?}", a.shape, b.shape)))
    }
}

fn zip_map<T: Real>(
    a: &DenseArray<T>,
    b: &DenseArray<T>,
    kind: Bcast,
    f: impl Fn(T, T) -> T,
) -> DenseArray<T> {
    match kind {
        Bcast::Same => DenseArray {
            shape: a.shape.clone(),
            data: a.data.iter().zip(&b.data).map(|(&x, &y)| f(x, y)).collect(),
        },
        Bcast::LhsScalar => {
            let x = a.data[0];
            DenseArray { shape: b.shape.clone(), data: b.data.iter().map(|&y| f(x, y)).collect() }
        }
        Bcast::RhsScalar => {
            let y = b.data[0];
            DenseArray { shape: a.shape.clone(), data: a.data.iter().map(|&x| f(x, y)).collect() }
        }
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: DenseArray<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    pub fn value(&self, v: Var) -> &DenseArray<T> {
        &self.nodes[v.0].value
    }

    pub fn scalar_value(&self, v: Var) -> T {
        self.nodes[v.0].value.data[0]
    }

    /// Trainable leaf; receives a gradient.
    pub fn param(&mut self, value: DenseArray<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Constant leaf; never receives a gradient.
    pub fn constant(&mut self, value: DenseArray<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn scalar(&mut self, value: T) -> Var {
        self.constant(DenseArray::scalar(value))
    }

    /// Stop-gradient: a constant copy of `v`'s current value.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.nodes[v.0].value.clone();
        self.constant(value)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        let g = self.any_grad(&[a, b]);
        Ok(self.push(out, Op::Matmul(a, b), g))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let kind = bcast_kind("add", self.value(a), self.value(b))?;
        let out = zip_map(self.value(a), self.value(b), kind, |x, y| x + y);
        let g = self.any_grad(&[a, b]);
        Ok(self.push(out, Op::Add(a, b), g))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let kind = bcast_kind("sub", self.value(a), self.value(b))?;
        let out = zip_map(self.value(a), self.value(b), kind, |x, y| x - y);
        let g = self.any_grad(&[a, b]);
        Ok(self.push(out, Op::Sub(a, b), g))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let kind = bcast_kind("mul", self.value(a), self.value(b))?;
        let out = zip_map(self.value(a), self.value(b), kind, |x, y| x * y);
        let g = self.any_grad(&[a, b]);
        Ok(self.push(out, Op::Mul(a, b), g))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        let kind = bcast_kind("div", self.value(a), self.value(b))?;
        if self.value(b).data.iter().any(|&y| y == T::zero()) {
            return Err(Error::domain("div", "division by zero"));
        }
        let out = zip_map(self.value(a), self.value(b), kind, |x, y| x / y);
        let g = self.any_grad(&[a, b]);
        Ok(self.push(out, Op::Div(a, b), g))
    }

    pub fn neg(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| -x);
        let g = self.any_grad(&[a]);
        self.push(out, Op::Neg(a), g)
    }

    /// `c · a` for a compile-time constant `c`.
    pub fn scale(&mut self, a: Var, c: T) -> Var {
        let out = self.value(a).map(|x| x * c);
        let g = self.any_grad(&[a]);
        self.push(out, Op::Scale(a, c), g)
    }

    pub fn add_const(&mut self, a: Var, c: T) -> Var {
        let out = self.value(a).map(|x| x + c);
        let g = self.any_grad(&[a]);
        self.push(out, Op::AddConst(a), g)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| if x > T::zero() { x } else { T::zero() });
        let g = self.any_grad(&[a]);
        self.push(out, Op::Relu(a), g)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x.exp());
        let g = self.any_grad(&[a]);
        self.push(out, Op::Exp(a), g)
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        if self.value(a).data.iter().any(|&x| !(x > T::zero())) {
            return Err(Error::domain("log", "non-positive argument"));
        }
        let out = self.value(a).map(|x| x.ln());
        let g = self.any_grad(&[a]);
        Ok(self.push(out, Op::Log(a), g))
    }

    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        if self.value(a).data.iter().any(|&x| x < T::zero()) {
            return Err(Error::domain("sqrt", "negative argument"));
        }
        let out = self.value(a).map(|x| x.sqrt());
        let g = self.any_grad(&[a]);
        Ok(self.push(out, Op::Sqrt(a), g))
    }

    pub fn square(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x * x);
        let g = self.any_grad(&[a]);
        self.push(out, Op::Square(a), g)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s: T = self.value(a).data.iter().copied().sum();
        let g = self.any_grad(&[a]);
        self.push(DenseArray::scalar(s), Op::Sum(a), g)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let s: T = v.data.iter().copied().sum::<T>() / T::of(v.numel() as f64);
        let g = self.any_grad(&[a]);
        self.push(DenseArray::scalar(s), Op::Mean(a), g)
    }

    /// Euclidean norm of the whole array.
    pub fn l2norm(&mut self, a: Var) -> Var {
        let s: T = self.value(a).data.iter().map(|&x| x * x).sum::<T>().sqrt();
        let g = self.any_grad(&[a]);
        self.push(DenseArray::scalar(s), Op::L2Norm(a), g)
    }

    /// `[m×n] -> [m×1]`.
    pub fn row_sum(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let (m, n) = (v.rows(), v.cols());
        let data = (0..m).map(|i| v.data[i * n..(i + 1) * n].iter().copied().sum()).collect();
        let g = self.any_grad(&[a]);
        self.push(DenseArray { shape: vec![m, 1], data }, Op::RowSum(a), g)
    }

    /// Replicates an `[m×1]` column `n` times.
    pub fn broadcast_cols(&mut self, a: Var, n: usize) -> Result<Var> {
        let v = self.value(a);
        if v.shape.len() != 2 || v.shape[1] != 1 {
            return Err(Error::shape("broadcast_cols", format!("expected [m,1], got {:?}", v.shape)));
        }
        let m = v.shape[0];
        let mut data = Vec::with_capacity(m * n);
        for i in 0..m {
            data.extend(std::iter::repeat_n(v.data[i], n));
        }
        let g = self.any_grad(&[a]);
        Ok(self.push(DenseArray { shape: vec![m, n], data }, Op::BroadcastCols(a), g))
    }

    /// Replicates a `[1×n]` row `m` times.
    pub fn broadcast_rows(&mut self, a: Var, m: usize) -> Result<Var> {
        let v = self.value(a);
        if v.shape.len() != 2 || v.shape[0] != 1 {
            return Err(Error::shape("broadcast_rows", format!("expected [1,n], got {:?}", v.shape)));
        }
        let n = v.shape[1];
        let mut data = Vec::with_capacity(m * n);
        for _ in 0..m {
            data.extend_from_slice(&v.data);
        }
        let g = self.any_grad(&[a]);
        Ok(self.push(DenseArray { shape: vec![m, n], data }, Op::BroadcastRows(a), g))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let v = self.value(a);
        let (m, n) = (v.rows(), v.cols());
        if v.shape.len() != 2 || start + len > n || len == 0 {
            return Err(Error::shape("slice_cols", format!("{start}..{} of {:?}", start + len, v.shape)));
        }
        let mut data = Vec::with_capacity(m * len);
        for i in 0..m {
            data.extend_from_slice(&v.data[i * n + start..i * n + start + len]);
        }
        let g = self.any_grad(&[a]);
        Ok(self.push(DenseArray { shape: vec![m, len], data }, Op::SliceCols(a, start), g))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or_else(|| Error::shape("concat_cols", "no inputs"))?;
        let m = self.value(*first).rows();
        let mut total = 0;
        for p in parts {
            let v = self.value(*p);
            if v.shape.len() != 2 || v.shape[0] != m {
                return Err(Error::shape("concat_cols", format!("row count mismatch: {:?}", v.shape)));
            }
            total += v.shape[1];
        }
        let mut data = Vec::with_capacity(m * total);
        for i in 0..m {
            for p in parts {
                data.extend_from_slice(self.value(*p).row_slice(i));
            }
        }
        let g = self.any_grad(parts);
        Ok(self.push(DenseArray { shape: vec![m, total], data }, Op::ConcatCols(parts.to_vec()), g))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).clone().reshaped(shape.to_vec())?;
        let g = self.any_grad(&[a]);
        Ok(self.push(out, Op::Reshape(a), g))
    }

    /// Row-wise cross product of two `[m×3]` arrays.
    pub fn cross_rows(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape != vb.shape || va.shape.len() != 2 || va.shape[1] != 3 {
            return Err(Error::shape("cross_rows", format!("{:?} x {:?}", va.shape, vb.shape)));
        }
        let m = va.shape[0];
        let mut data = Vec::with_capacity(m * 3);
        for i in 0..m {
            data.extend_from_slice(&cross(va.row_slice(i), vb.row_slice(i)));
        }
        let g = self.any_grad(&[a, b]);
        Ok(self.push(DenseArray { shape: vec![m, 3], data }, Op::CrossRows(a, b), g))
    }

    /// Reverse pass from a scalar root.
    pub fn backward(&self, root: Var) -> Result<Gradients<T>> {
        let root_value = self.value(root);
        if !root_value.is_scalar() {
            return Err(Error::Contract(format!(
                "backward needs a scalar root, got shape {:?}",
                root_value.shape
            )));
        }
        let n = self.nodes.len();
        let mut visited = vec![false; n];
        let mut stack = vec![root.0];
        while let Some(i) = stack.pop() {
            if visited[i] || !self.nodes[i].needs_grad {
                continue;
            }
            visited[i] = true;
            for p in parents(&self.nodes[i].op) {
                if !visited[p.0] {
                    stack.push(p.0);
                }
            }
        }

        let mut grads: Vec<Option<DenseArray<T>>> = vec![None; n];
        grads[root.0] = Some(DenseArray::full(root_value.shape(), T::one()));
        for i in (0..=root.0).rev() {
            if !visited[i] {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads)?;
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<DenseArray<T>>], v: Var, delta: DenseArray<T>) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => {
                for (x, d) in acc.data.iter_mut().zip(delta.data) {
                    *x += d;
                }
            }
            slot @ None => *slot = Some(delta),
        }
    }

    /// Reduces an upstream gradient to the shape of a broadcast operand.
    fn reduce_to(&self, v: Var, g: DenseArray<T>) -> DenseArray<T> {
        let shape = &self.nodes[v.0].value.shape;
        if &g.shape == shape {
            g
        } else {
            DenseArray { shape: shape.clone(), data: vec![g.data.iter().copied().sum()] }
        }
    }

    fn propagate(&self, i: usize, g: &DenseArray<T>, grads: &mut [Option<DenseArray<T>>]) -> Result<()> {
        let node = &self.nodes[i];
        let out = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::Matmul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let (m, k) = va.as_matrix_dims().expect("checked in forward");
                let n = vb.as_matrix_dims().expect("checked in forward").1;
                if self.nodes[a.0].needs_grad {
                    let mut da = vec![T::zero(); m * k];
                    T::gemm(m, n, k, &g.data, false, &vb.data, true, &mut da, false);
                    self.accumulate(grads, *a, DenseArray { shape: va.shape.clone(), data: da });
                }
                if self.nodes[b.0].needs_grad {
                    let mut db = vec![T::zero(); k * n];
                    T::gemm(k, m, n, &va.data, true, &g.data, false, &mut db, false);
                    self.accumulate(grads, *b, DenseArray { shape: vb.shape.clone(), data: db });
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, self.reduce_to(*a, g.clone()));
                self.accumulate(grads, *b, self.reduce_to(*b, g.clone()));
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, self.reduce_to(*a, g.clone()));
                self.accumulate(grads, *b, self.reduce_to(*b, g.map(|x| -x)));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let kind = bcast_kind("mul", va, vb)?;
                if self.nodes[a.0].needs_grad {
                    let d = grad_times(g, vb, kind, false);
                    self.accumulate(grads, *a, self.reduce_to(*a, d));
                }
                if self.nodes[b.0].needs_grad {
                    let d = grad_times(g, va, kind, true);
                    self.accumulate(grads, *b, self.reduce_to(*b, d));
                }
            }
            Op::Div(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let kind = bcast_kind("div", va, vb)?;
                if self.nodes[a.0].needs_grad {
                    let inv = vb.map(|y| T::one() / y);
                    let d = grad_times(g, &inv, kind, false);
                    self.accumulate(grads, *a, self.reduce_to(*a, d));
                }
                if self.nodes[b.0].needs_grad {
                    // d(a/b)/db = -(a/b)/b
                    let q = zip_map(out, &expand(vb, out.shape()), Bcast::Same, |o, y| -o / y);
                    let d = zip_map(g, &q, Bcast::Same, |x, y| x * y);
                    self.accumulate(grads, *b, self.reduce_to(*b, d));
                }
            }
            Op::Neg(a) => self.accumulate(grads, *a, g.map(|x| -x)),
            Op::Scale(a, c) => {
                let c = *c;
                self.accumulate(grads, *a, g.map(|x| x * c));
            }
            Op::AddConst(a) => self.accumulate(grads, *a, g.clone()),
            Op::Relu(a) => {
                let d = zip_map(g, self.value(*a), Bcast::Same, |x, y| if y > T::zero() { x } else { T::zero() });
                self.accumulate(grads, *a, d);
            }
            Op::Exp(a) => {
                let d = zip_map(g, out, Bcast::Same, |x, y| x * y);
                self.accumulate(grads, *a, d);
            }
            Op::Log(a) => {
                let d = zip_map(g, self.value(*a), Bcast::Same, |x, y| x / y);
                self.accumulate(grads, *a, d);
            }
            Op::Sqrt(a) => {
                let two = T::of(2.0);
                let d = zip_map(g, out, Bcast::Same, |x, y| {
                    if y > T::zero() {
                        x / (two * y)
                    } else {
                        T::zero()
                    }
                });
                self.accumulate(grads, *a, d);
            }
            Op::Square(a) => {
                let two = T::of(2.0);
                let d = zip_map(g, self.value(*a), Bcast::Same, |x, y| two * x * y);
                self.accumulate(grads, *a, d);
            }
            Op::Sum(a) => {
                let d = DenseArray::full(self.value(*a).shape(), g.data[0]);
                self.accumulate(grads, *a, d);
            }
            Op::Mean(a) => {
                let va = self.value(*a);
                let d = DenseArray::full(va.shape(), g.data[0] / T::of(va.numel() as f64));
                self.accumulate(grads, *a, d);
            }
            Op::L2Norm(a) => {
                let norm = out.data[0];
                let va = self.value(*a);
                let d = if norm > T::zero() {
                    let s = g.data[0] / norm;
                    va.map(|x| x * s)
                } else {
                    DenseArray::zeros(va.shape())
                };
                self.accumulate(grads, *a, d);
            }
            Op::RowSum(a) => {
                let va = self.value(*a);
                let (m, n) = (va.rows(), va.cols());
                let mut data = Vec::with_capacity(m * n);
                for r in 0..m {
                    data.extend(std::iter::repeat_n(g.data[r], n));
                }
                self.accumulate(grads, *a, DenseArray { shape: va.shape.clone(), data });
            }
            Op::BroadcastCols(a) => {
                let (m, n) = (out.shape[0], out.shape[1]);
                let data = (0..m).map(|r| g.data[r * n..(r + 1) * n].iter().copied().sum()).collect();
                self.accumulate(grads, *a, DenseArray { shape: vec![m, 1], data });
            }
            Op::BroadcastRows(a) => {
                let (m, n) = (out.shape[0], out.shape[1]);
                let mut data = vec![T::zero(); n];
                for r in 0..m {
                    for (acc, &x) in data.iter_mut().zip(&g.data[r * n..(r + 1) * n]) {
                        *acc += x;
                    }
                }
                self.accumulate(grads, *a, DenseArray { shape: vec![1, n], data });
            }
            Op::SliceCols(a, start) => {
                let va = self.value(*a);
                let (m, n) = (va.rows(), va.cols());
                let len = out.shape[1];
                let mut d = DenseArray::zeros(va.shape());
                for r in 0..m {
                    d.data[r * n + start..r * n + start + len].copy_from_slice(&g.data[r * len..(r + 1) * len]);
                }
                self.accumulate(grads, *a, d);
            }
            Op::ConcatCols(parts) => {
                let m = out.shape[0];
                let total = out.shape[1];
                let mut offset = 0;
                for p in parts {
                    let w = self.value(*p).shape[1];
                    if self.nodes[p.0].needs_grad {
                        let mut data = Vec::with_capacity(m * w);
                        for r in 0..m {
                            data.extend_from_slice(&g.data[r * total + offset..r * total + offset + w]);
                        }
                        self.accumulate(grads, *p, DenseArray { shape: vec![m, w], data });
                    }
                    offset += w;
                }
            }
            Op::Reshape(a) => {
                let d = g.clone().reshaped(self.value(*a).shape.clone())?;
                self.accumulate(grads, *a, d);
            }
            Op::CrossRows(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let m = out.shape[0];
                if self.nodes[a.0].needs_grad {
                    // d/da <a×b, g> = b×g
                    let mut data = Vec::with_capacity(m * 3);
                    for r in 0..m {
                        data.extend_from_slice(&cross(vb.row_slice(r), &g.data[r * 3..r * 3 + 3]));
                    }
                    self.accumulate(grads, *a, DenseArray { shape: vec![m, 3], data });
                }
                if self.nodes[b.0].needs_grad {
                    // d/db <a×b, g> = g×a
                    let mut data = Vec::with_capacity(m * 3);
                    for r in 0..m {
                        data.extend_from_slice(&cross(&g.data[r * 3..r * 3 + 3], va.row_slice(r)));
                    }
                    self.accumulate(grads, *b, DenseArray { shape: vec![m, 3], data });
                }
            }
        }
        Ok(())
    }
}

fn parents<T>(op: &Op<T>) -> Vec<Var> {
    match op {
        Op::Leaf => vec![],
        Op::Matmul(a, b)
        | Op::Add(a, b)
        | Op::Sub(a, b)
        | Op::Mul(a, b)
        | Op::Div(a, b)
        | Op::CrossRows(a, b) => vec![*a, *b],
        Op::Neg(a)
        | Op::Scale(a, _)
        | Op::AddConst(a)
        | Op::Relu(a)
        | Op::Exp(a)
        | Op::Log(a)
        | Op::Sqrt(a)
        | Op::Square(a)
        | Op::Sum(a)
        | Op::Mean(a)
        | Op::L2Norm(a)
        | Op::RowSum(a)
        | Op::BroadcastCols(a)
        | Op::BroadcastRows(a)
        | Op::SliceCols(a, _)
        | Op::Reshape(a) => vec![*a],
        Op::ConcatCols(parts) => parts.clone(),
    }
}

fn cross<T: Real>(a: &[T], b: &[T]) -> [T; 3] {
    [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]]
}

fn expand<T: Real>(v: &DenseArray<T>, shape: &[usize]) -> DenseArray<T> {
    if v.shape == shape {
        v.clone()
    } else {
        DenseArray::full(shape, v.data[0])
    }
}

/// Upstream gradient times the other operand of a product, honoring scalar
/// broadcast. `for_rhs` selects which operand the result is for.
fn grad_times<T: Real>(g: &DenseArray<T>, other: &DenseArray<T>, kind: Bcast, for_rhs: bool) -> DenseArray<T> {
    let other_is_scalar = matches!((kind, for_rhs), (Bcast::LhsScalar, true) | (Bcast::RhsScalar, false));
    if other_is_scalar {
        let y = other.data[0];
        g.map(|x| x * y)
    } else {
        zip_map(g, other, Bcast::Same, |x, y| x * y)
    }
}
