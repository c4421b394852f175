//! Multi-layer perceptrons on top of [`crate::tensor`], plus an Adam optimizer.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::{DenseArray, Gradients, Graph, Real, Var};

/// Dense layer `y = x·W + b` with `W: [in×out]`, `b: [1×out]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub weight: DenseArray<f32>,
    pub bias: DenseArray<f32>,
}

/// ReLU MLP; no activation after the last layer.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

impl Mlp {
    /// He-initialized weights, zero biases.
    pub fn new<R: Rng + ?Sized>(dims: &[usize], rng: &mut R) -> Self {
        let layers = dims
            .windows(2)
            .map(|w| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let normal = Normal::new(0.0f32, (2.0 / fan_in as f32).sqrt()).expect("valid std");
                let data = (0..fan_in * fan_out).map(|_| normal.sample(rng)).collect();
                Linear {
                    weight: DenseArray::matrix(fan_in, fan_out, data).expect("dims"),
                    bias: DenseArray::zeros(&[1, fan_out]),
                }
            })
            .collect();
        Mlp { layers }
    }

    pub fn zeros(dims: &[usize]) -> Self {
        let layers = dims
            .windows(2)
            .map(|w| Linear { weight: DenseArray::zeros(&[w[0], w[1]]), bias: DenseArray::zeros(&[1, w[1]]) })
            .collect();
        Mlp { layers }
    }

    pub fn dims(&self) -> Vec<usize> {
        let mut d = vec![self.in_dim()];
        d.extend(self.layers.iter().map(|l| l.weight.cols()));
        d
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].weight.rows()
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().expect("non-empty").weight.cols()
    }

    /// Scales the last layer; small output heads start training near zero.
    pub fn scale_last(&mut self, factor: f32) {
        if let Some(last) = self.layers.last_mut() {
            last.weight.data_mut().iter_mut().for_each(|w| *w *= factor);
        }
    }

    pub fn params(&self) -> Vec<&DenseArray<f32>> {
        self.layers.iter().flat_map(|l| [&l.weight, &l.bias]).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut DenseArray<f32>> {
        self.layers.iter_mut().flat_map(|l| [&mut l.weight, &mut l.bias]).collect()
    }

    pub fn is_finite(&self) -> bool {
        self.params().iter().all(|p| p.is_finite())
    }

    /// Places the weights on `graph`, trainable or frozen.
    pub fn bind<T: Real>(&self, graph: &mut Graph<T>, trainable: bool) -> BoundMlp {
        let vars = self
            .layers
            .iter()
            .map(|l| {
                let (w, b) = (l.weight.cast::<T>(), l.bias.cast::<T>());
                if trainable {
                    (graph.param(w), graph.param(b))
                } else {
                    (graph.constant(w), graph.constant(b))
                }
            })
            .collect();
        BoundMlp { vars }
    }

    /// Batched forward pass without recording a graph. `x: [batch×in]`.
    pub fn infer(&self, x: &DenseArray<f32>) -> Result<DenseArray<f32>> {
        if x.cols() != self.in_dim() {
            return Err(Error::shape("mlp", format!("input width {} != {}", x.cols(), self.in_dim())));
        }
        let rows = x.rows();
        let mut h = x.data().to_vec();
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            let (k, n) = (layer.weight.rows(), layer.weight.cols());
            let mut out = Vec::with_capacity(rows * n);
            for _ in 0..rows {
                out.extend_from_slice(layer.bias.data());
            }
            f32::gemm(rows, k, n, &h, false, layer.weight.data(), false, &mut out, true);
            if i != last {
                out.iter_mut().for_each(|v| *v = v.max(0.0));
            }
            h = out;
        }
        DenseArray::matrix(rows, self.out_dim(), h)
    }
}

/// MLP weights placed on a graph.
#[derive(Clone, Debug)]
pub struct BoundMlp {
    vars: Vec<(Var, Var)>,
}

impl BoundMlp {
    /// Places explicit trainable values, in [`Mlp::params`] order.
    pub fn from_values<T: Real>(graph: &mut Graph<T>, values: Vec<DenseArray<T>>) -> Result<BoundMlp> {
        if values.is_empty() || values.len() % 2 != 0 {
            return Err(Error::shape("mlp", format!("{} parameter arrays", values.len())));
        }
        let mut it = values.into_iter();
        let mut vars = Vec::new();
        while let (Some(w), Some(b)) = (it.next(), it.next()) {
            vars.push((graph.param(w), graph.param(b)));
        }
        Ok(BoundMlp { vars })
    }

    pub fn forward<T: Real>(&self, graph: &mut Graph<T>, x: Var) -> Result<Var> {
        let rows = graph.value(x).rows();
        let last = self.vars.len() - 1;
        let mut h = x;
        for (i, &(w, b)) in self.vars.iter().enumerate() {
            let xw = graph.matmul(h, w)?;
            let bias = graph.broadcast_rows(b, rows)?;
            h = graph.add(xw, bias)?;
            if i != last {
                h = graph.relu(h);
            }
        }
        Ok(h)
    }

    pub fn vars(&self) -> Vec<Var> {
        self.vars.iter().flat_map(|&(w, b)| [w, b]).collect()
    }

    /// Gradients in the same order as [`Mlp::params`].
    pub fn grads<T: Real>(&self, graph: &Graph<T>, grads: &Gradients<T>) -> Vec<DenseArray<f32>> {
        self.vars().into_iter().map(|v| grads.wrt(graph, v).cast::<f32>()).collect()
    }
}

/// Adam with bias correction.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    step: i32,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
}

impl Adam {
    pub fn new(lr: f32) -> Self {
        Adam { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, step: 0, m: Vec::new(), v: Vec::new() }
    }

    pub fn step(&mut self, params: Vec<&mut DenseArray<f32>>, grads: &[DenseArray<f32>]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::Contract(format!("{} params but {} grads", params.len(), grads.len())));
        }
        if self.m.is_empty() {
            self.m = params.iter().map(|p| vec![0.0; p.numel()]).collect();
            self.v = self.m.clone();
        }
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step);
        let bc2 = 1.0 - self.beta2.powi(self.step);
        for (((p, g), m), v) in params.into_iter().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            if p.numel() != g.numel() {
                return Err(Error::shape("adam", format!("{:?} vs {:?}", p.shape(), g.shape())));
            }
            for (((w, &gi), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi;
                let mhat = *mi / bc1;
                let vhat = *vi / bc2;
                *w -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

/// Sinusoidal embedding of an integer timestep into `dim` features.
pub fn timestep_embedding(t: usize, dim: usize) -> Vec<f32> {
    let half = dim / 2;
    let mut out = vec![0.0; dim];
    for i in 0..half {
        let freq = (-(10000f32.ln()) * i as f32 / half as f32).exp();
        let arg = t as f32 * freq;
        out[i] = arg.sin();
        out[half + i] = arg.cos();
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn infer_matches_graph_forward() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mlp = Mlp::new(&[5, 7, 3], &mut rng);
        let x = DenseArray::matrix(4, 5, (0..20).map(|i| (i as f32 * 0.37).sin()).collect()).unwrap();
        let fast = mlp.infer(&x).unwrap();
        let mut g = Graph::<f32>::new();
        let bound = mlp.bind(&mut g, false);
        let xv = g.constant(x);
        let y = bound.forward(&mut g, xv).unwrap();
        for (a, b) in fast.data().iter().zip(g.value(y).data()) {
            assert!((a - b).abs() < 1e-5);
        }
    }

    #[test]
    fn zero_mlp_is_constant() {
        let mlp = Mlp::zeros(&[3, 4, 2]);
        let a = mlp.infer(&DenseArray::row(vec![1.0, 2.0, 3.0])).unwrap();
        let b = mlp.infer(&DenseArray::row(vec![-5.0, 0.0, 9.0])).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn adam_descends_quadratic() {
        let mut p = DenseArray::row(vec![3.0f32, -2.0]);
        let mut opt = Adam::new(0.1);
        for _ in 0..300 {
            let g = p.map(|x| 2.0 * x);
            opt.step(vec![&mut p], &[g]).unwrap();
        }
        assert!(p.data().iter().all(|x| x.abs() < 0.05), "{:?}", p.data());
    }

    #[test]
    fn timestep_embedding_is_bounded() {
        let e = timestep_embedding(37, 32);
        assert_eq!(e.len(), 32);
        assert!(e.iter().all(|x| x.abs() <= 1.0));
        assert_ne!(timestep_embedding(1, 32), timestep_embedding(2, 32));
    }
}
