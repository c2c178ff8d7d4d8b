//! Feed-forward building blocks with hand-written backward passes.
//!
//! All parameters of a network live in one flat `Vec<f64>`; layers keep
//! offsets into it. Gradients use a buffer of the same layout, which keeps
//! the optimizer, serialization and gradient checks trivial.

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};

pub const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TensorInfo {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

impl TensorInfo {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Named tensors packed into one buffer.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore {
    pub tensors: Vec<TensorInfo>,
    pub data: Vec<f64>,
}

impl ParamStore {
    pub fn add(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        mut init: impl FnMut() -> f64,
    ) -> usize {
        let offset = self.data.len();
        let len: usize = shape.iter().product();
        self.data.extend((0..len).map(|_| init()));
        self.tensors.push(TensorInfo {
            name: name.into(),
            shape: shape.to_vec(),
            offset,
        });
        offset
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Copies values from `other`, which must have the same tensor layout.
    pub fn load_from(&mut self, other: &ParamStore) -> Result<()> {
        if self.tensors != other.tensors {
            return Err(Error::InvalidData(
                "parameter layout does not match the model configuration".into(),
            ));
        }
        self.data.copy_from_slice(&other.data);
        Ok(())
    }
}

fn view2(data: &[f64], offset: usize, rows: usize, cols: usize) -> ArrayView2<'_, f64> {
    ArrayView2::from_shape((rows, cols), &data[offset..offset + rows * cols]).expect("layout")
}

fn view1(data: &[f64], offset: usize, n: usize) -> ArrayView1<'_, f64> {
    ArrayView1::from(&data[offset..offset + n])
}

fn add_into(grad: &mut [f64], offset: usize, g: impl IntoIterator<Item = f64>) {
    for (dst, v) in grad[offset..].iter_mut().zip(g) {
        *dst += v;
    }
}

/// `y = x W + b` with `W` stored row-major as `n_in x n_out`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Dense {
    pub w: usize,
    pub b: usize,
    pub n_in: usize,
    pub n_out: usize,
}

impl Dense {
    pub fn new(
        ps: &mut ParamStore,
        name: &str,
        n_in: usize,
        n_out: usize,
        init_sd: f64,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let w = if init_sd == 0.0 {
            ps.add(format!("{name}.weight"), &[n_in, n_out], || 0.0)
        } else {
            let normal = Normal::new(0.0, init_sd).expect("finite sd");
            ps.add(format!("{name}.weight"), &[n_in, n_out], || {
                normal.sample(rng)
            })
        };
        let b = ps.add(format!("{name}.bias"), &[n_out], || 0.0);
        Dense { w, b, n_in, n_out }
    }

    pub fn forward(&self, p: &[f64], x: &ArrayView2<f64>) -> Array2<f64> {
        let mut y = x.dot(&view2(p, self.w, self.n_in, self.n_out));
        y += &view1(p, self.b, self.n_out);
        y
    }

    /// Accumulates parameter gradients and returns `dL/dx`.
    pub fn backward(
        &self,
        p: &[f64],
        x: &ArrayView2<f64>,
        dy: &Array2<f64>,
        grad: &mut [f64],
    ) -> Array2<f64> {
        let dw = x.t().dot(dy);
        add_into(grad, self.w, dw.iter().copied());
        add_into(grad, self.b, dy.sum_axis(Axis(0)));
        dy.dot(&view2(p, self.w, self.n_in, self.n_out).t())
    }
}

/// Row-wise layer normalization with learned scale and shift.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LayerNorm {
    pub gamma: usize,
    pub beta: usize,
    pub dim: usize,
}

pub struct LayerNormCache {
    xhat: Array2<f64>,
    inv_std: Array1<f64>,
}

impl LayerNorm {
    pub fn new(ps: &mut ParamStore, name: &str, dim: usize) -> Self {
        let gamma = ps.add(format!("{name}.gamma"), &[dim], || 1.0);
        let beta = ps.add(format!("{name}.beta"), &[dim], || 0.0);
        LayerNorm { gamma, beta, dim }
    }

    pub fn forward(&self, p: &[f64], x: &Array2<f64>) -> (Array2<f64>, LayerNormCache) {
        let n = self.dim as f64;
        let mut xhat = x.clone();
        let mut inv_std = Array1::zeros(x.nrows());
        for (mut row, s) in xhat.outer_iter_mut().zip(inv_std.iter_mut()) {
            let mu = row.sum() / n;
            let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n;
            *s = 1.0 / (var + LN_EPS).sqrt();
            row.mapv_inplace(|v| (v - mu) * *s);
        }
        let mut y = &xhat * &view1(p, self.gamma, self.dim);
        y += &view1(p, self.beta, self.dim);
        (y, LayerNormCache { xhat, inv_std })
    }

    pub fn backward(
        &self,
        p: &[f64],
        c: &LayerNormCache,
        dy: &Array2<f64>,
        grad: &mut [f64],
    ) -> Array2<f64> {
        add_into(grad, self.gamma, (dy * &c.xhat).sum_axis(Axis(0)));
        add_into(grad, self.beta, dy.sum_axis(Axis(0)));
        let dxhat = dy * &view1(p, self.gamma, self.dim);
        let n = self.dim as f64;
        let mut dx = Array2::zeros(dy.raw_dim());
        for i in 0..dy.nrows() {
            let g = dxhat.row(i);
            let xh = c.xhat.row(i);
            let sum_g = g.sum();
            let sum_gx = g.dot(&xh);
            let s = c.inv_std[i];
            dx.row_mut(i)
                .iter_mut()
                .zip(g.iter().zip(xh.iter()))
                .for_each(|(d, (gj, xj))| *d = s / n * (n * gj - sum_g - xj * sum_gx));
        }
        dx
    }
}

/// Architecture of one feed-forward sub-network.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpSpec {
    pub n_layers: usize,
    pub width: usize,
    pub dropout: f64,
    pub layer_norm: bool,
    pub softplus_output: bool,
}

impl Default for MlpSpec {
    fn default() -> Self {
        MlpSpec {
            n_layers: 1,
            width: 256,
            dropout: 0.0,
            layer_norm: true,
            softplus_output: false,
        }
    }
}

impl MlpSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_layers < 1 || self.width < 1 {
            return Err(Error::InvalidArgument(
                "n_layers and width must be at least 1".into(),
            ));
        }
        if !(0.0..=0.8).contains(&self.dropout) {
            return Err(Error::InvalidArgument(format!(
                "dropout {} outside [0, 0.8]",
                self.dropout
            )));
        }
        Ok(())
    }
}

/// Hidden blocks `Dense -> LayerNorm -> ReLU -> Dropout`, then a linear output
/// layer with optional softplus.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    hidden: Vec<(Dense, Option<LayerNorm>)>,
    out: Dense,
    dropout: f64,
    softplus: bool,
}

struct HiddenCache {
    input: Array2<f64>,
    ln: Option<LayerNormCache>,
    pre_relu: Array2<f64>,
    mask: Option<Array2<f64>>,
}

pub struct MlpCache {
    hidden: Vec<HiddenCache>,
    last: Array2<f64>,
    out_pre: Array2<f64>,
}

fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

impl Mlp {
    pub fn new(
        ps: &mut ParamStore,
        name: &str,
        n_in: usize,
        n_out: usize,
        spec: &MlpSpec,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let mut hidden = Vec::with_capacity(spec.n_layers);
        let mut dim = n_in;
        for l in 0..spec.n_layers {
            let sd = (2.0 / dim as f64).sqrt();
            let dense = Dense::new(ps, &format!("{name}.hidden{l}"), dim, spec.width, sd, rng);
            let ln = spec
                .layer_norm
                .then(|| LayerNorm::new(ps, &format!("{name}.norm{l}"), spec.width));
            hidden.push((dense, ln));
            dim = spec.width;
        }
        let out = Dense::new(
            ps,
            &format!("{name}.out"),
            dim,
            n_out,
            (1.0 / dim as f64).sqrt(),
            rng,
        );
        Mlp {
            hidden,
            out,
            dropout: spec.dropout,
            softplus: spec.softplus_output,
        }
    }

    /// `rng` enables dropout (training mode).
    pub fn forward(
        &self,
        p: &[f64],
        x: &Array2<f64>,
        mut rng: Option<&mut ChaCha8Rng>,
    ) -> (Array2<f64>, MlpCache) {
        let mut h = x.clone();
        let mut caches = Vec::with_capacity(self.hidden.len());
        for (dense, ln) in &self.hidden {
            let a = dense.forward(p, &h.view());
            let (n, lnc) = match ln {
                Some(ln) => {
                    let (n, c) = ln.forward(p, &a);
                    (n, Some(c))
                }
                None => (a, None),
            };
            let mut r = n.mapv(|v| v.max(0.0));
            let mask = match rng.as_deref_mut() {
                Some(rng) if self.dropout > 0.0 => {
                    let keep = 1.0 - self.dropout;
                    let m = Array2::from_shape_fn(r.raw_dim(), |_| {
                        if rng.random::<f64>() < keep {
                            1.0 / keep
                        } else {
                            0.0
                        }
                    });
                    r *= &m;
                    Some(m)
                }
                _ => None,
            };
            caches.push(HiddenCache {
                input: std::mem::replace(&mut h, r),
                ln: lnc,
                pre_relu: n,
                mask,
            });
        }
        let out_pre = self.out.forward(p, &h.view());
        let y = if self.softplus {
            out_pre.mapv(softplus)
        } else {
            out_pre.clone()
        };
        (
            y,
            MlpCache {
                hidden: caches,
                last: h,
                out_pre,
            },
        )
    }

    pub fn backward(
        &self,
        p: &[f64],
        c: &MlpCache,
        dy: &Array2<f64>,
        grad: &mut [f64],
    ) -> Array2<f64> {
        let dpre = if self.softplus {
            let mut d = dy.clone();
            d.zip_mut_with(&c.out_pre, |g, &x| *g *= sigmoid(x));
            d
        } else {
            dy.clone()
        };
        let mut dh = self.out.backward(p, &c.last.view(), &dpre, grad);
        for ((dense, ln), hc) in self.hidden.iter().zip(&c.hidden).rev() {
            if let Some(m) = &hc.mask {
                dh *= m;
            }
            dh.zip_mut_with(&hc.pre_relu, |g, &x| {
                if x <= 0.0 {
                    *g = 0.0
                }
            });
            let da = match (ln, &hc.ln) {
                (Some(ln), Some(lc)) => ln.backward(p, lc, &dh, grad),
                _ => dh,
            };
            dh = dense.backward(p, &hc.input.view(), &da, grad);
        }
        dh
    }
}

/// Adam with decoupled weight decay.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl AdamW {
    pub fn new(n: usize, lr: f64, weight_decay: f64) -> Self {
        AdamW {
            lr,
            weight_decay,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for i in 0..params.len() {
            let g = grad[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let mhat = self.m[i] / c1;
            let vhat = self.v[i] / c2;
            params[i] -=
                self.lr * (mhat / (vhat.sqrt() + self.eps) + self.weight_decay * params[i]);
        }
    }
}

/// Stacks rows `[a | b]` column-wise.
pub fn hstack(a: &Array2<f64>, b: &Array2<f64>) -> Array2<f64> {
    let mut out = Array2::zeros((a.nrows(), a.ncols() + b.ncols()));
    out.slice_mut(s![.., ..a.ncols()]).assign(a);
    out.slice_mut(s![.., a.ncols()..]).assign(b);
    out
}
