use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::rng::Stream;

/// Dense layer `z = W x + b`; `weight` is `out x in`.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub weight: DMatrix<f64>,
    pub bias: DVector<f64>,
}

/// Feed-forward stack with ReLU between layers and an identity output.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub layers: Vec<Layer>,
}

/// Per-layer activations from a batched forward pass. `acts[0]` is the
/// input and `acts[L]` the output; samples are columns.
#[derive(Debug, Clone)]
pub struct MlpCache {
    pub acts: Vec<DMatrix<f64>>,
}

impl MlpCache {
    pub fn output(&self) -> &DMatrix<f64> {
        self.acts.last().unwrap()
    }
}

impl Mlp {
    /// All-zero network with layer widths `dims[0] -> dims[1] -> ...`.
    pub fn zeros(dims: &[usize]) -> Self {
        assert!(dims.len() >= 2, "an mlp needs at least one layer");
        Mlp {
            layers: dims
                .windows(2)
                .map(|w| Layer {
                    weight: DMatrix::zeros(w[1], w[0]),
                    bias: DVector::zeros(w[1]),
                })
                .collect(),
        }
    }

    /// He-normal weights (`N(0, 2 / fan_in)`, drawn row by row) and zero biases.
    pub fn he_init(dims: &[usize], stream: &mut Stream) -> Self {
        let mut mlp = Self::zeros(dims);
        for layer in &mut mlp.layers {
            let (rows, cols) = layer.weight.shape();
            let std = (2.0 / cols as f64).sqrt();
            for r in 0..rows {
                for c in 0..cols {
                    layer.weight[(r, c)] = std * stream.next_normal();
                }
            }
        }
        mlp
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].weight.ncols()
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().unwrap().weight.nrows()
    }

    pub fn dims(&self) -> Vec<usize> {
        std::iter::once(self.in_dim())
            .chain(self.layers.iter().map(|l| l.weight.nrows()))
            .collect()
    }

    /// Single-vector forward pass.
    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.in_dim() {
            return Err(Error::dims("mlp input", self.in_dim(), x.len()));
        }
        let cache = self.forward_batch(&DMatrix::from_column_slice(x.len(), 1, x));
        Ok(cache.output().as_slice().to_vec())
    }

    /// Batched forward pass over the columns of `x`.
    pub fn forward_batch(&self, x: &DMatrix<f64>) -> MlpCache {
        assert_eq!(x.nrows(), self.in_dim(), "mlp input width");
        let last = self.layers.len() - 1;
        let mut acts = Vec::with_capacity(self.layers.len() + 1);
        acts.push(x.clone());
        for (i, layer) in self.layers.iter().enumerate() {
            let mut z = &layer.weight * acts.last().unwrap();
            for mut col in z.column_iter_mut() {
                col += &layer.bias;
            }
            if i < last {
                z.apply(|v| *v = v.max(0.0));
            }
            acts.push(z);
        }
        MlpCache { acts }
    }

    /// Backpropagates `grad_out` (d loss / d output, same shape as the
    /// output) and accumulates parameter gradients into `grads`. Returns
    /// d loss / d input.
    pub fn backward(
        &self,
        cache: &MlpCache,
        grad_out: DMatrix<f64>,
        grads: &mut Mlp,
    ) -> DMatrix<f64> {
        let mut g = grad_out;
        for (i, layer) in self.layers.iter().enumerate().rev() {
            let input = &cache.acts[i];
            grads.layers[i]
                .weight
                .gemm(1.0, &g, &input.transpose(), 1.0);
            for col in g.column_iter() {
                grads.layers[i].bias += col;
            }
            let mut gin = layer.weight.tr_mul(&g);
            if i > 0 {
                // input was a ReLU output; zero where the unit was inactive
                gin.zip_apply(input, |d, a| {
                    if a <= 0.0 {
                        *d = 0.0
                    }
                });
            }
            g = gin;
        }
        g
    }

    pub fn param_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weight.len() + l.bias.len())
            .sum()
    }
}

/// Visits trainable tensors in declaration order: for each layer, its
/// weight then its bias. The flag marks bias tensors.
pub trait Params {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&str, &'a [f64], bool));
    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut [f64], bool));
}

impl Params for Mlp {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&str, &'a [f64], bool)) {
        for (i, l) in self.layers.iter().enumerate() {
            f(&format!("layer{i}.weight"), l.weight.as_slice(), false);
            f(&format!("layer{i}.bias"), l.bias.as_slice(), true);
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut [f64], bool)) {
        for (i, l) in self.layers.iter_mut().enumerate() {
            f(&format!("layer{i}.weight"), l.weight.as_mut_slice(), false);
            f(&format!("layer{i}.bias"), l.bias.as_mut_slice(), true);
        }
    }
}
