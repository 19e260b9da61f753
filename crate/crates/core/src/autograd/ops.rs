use super::Var;
use crate::tensor::{gemm, Tensor};

fn unary(x: &Var, value: Tensor, local: impl Fn(f64, f64) -> f64 + 'static) -> Var {
    // `local(x, y)` is dy/dx evaluated at input x and output y.
    Var::from_op(
        value,
        vec![x.clone()],
        Box::new(move |g, parents, out| {
            let x = parents[0].value();
            let data = g
                .data()
                .iter()
                .zip(x.data())
                .zip(out.data())
                .map(|((&g, &x), &y)| g * local(x, y))
                .collect();
            vec![Some(Tensor::from_parts(x.shape().to_vec(), data))]
        }),
    )
}

fn strides_for(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

impl Var {
    pub fn add(&self, other: &Var) -> Var {
        assert_eq!(self.shape(), other.shape(), "add");
        let value = self.value().zip_map(other.value(), |a, b| a + b);
        Var::from_op(
            value,
            vec![self.clone(), other.clone()],
            Box::new(|g, _, _| vec![Some(g.clone()), Some(g.clone())]),
        )
    }

    pub fn sub(&self, other: &Var) -> Var {
        assert_eq!(self.shape(), other.shape(), "sub");
        let value = self.value().zip_map(other.value(), |a, b| a - b);
        Var::from_op(
            value,
            vec![self.clone(), other.clone()],
            Box::new(|g, _, _| vec![Some(g.clone()), Some(g.scale(-1.0))]),
        )
    }

    pub fn mul(&self, other: &Var) -> Var {
        assert_eq!(self.shape(), other.shape(), "mul");
        let value = self.value().zip_map(other.value(), |a, b| a * b);
        Var::from_op(
            value,
            vec![self.clone(), other.clone()],
            Box::new(|g, p, _| {
                vec![
                    Some(g.zip_map(p[1].value(), |g, b| g * b)),
                    Some(g.zip_map(p[0].value(), |g, a| g * a)),
                ]
            }),
        )
    }

    /// Elementwise product with a constant tensor.
    pub fn mul_const(&self, k: &Tensor) -> Var {
        assert_eq!(self.shape(), k.shape(), "mul_const");
        let value = self.value().zip_map(k, |a, b| a * b);
        let k = k.clone();
        Var::from_op(
            value,
            vec![self.clone()],
            Box::new(move |g, _, _| vec![Some(g.zip_map(&k, |g, b| g * b))]),
        )
    }

    pub fn add_const(&self, k: &Tensor) -> Var {
        assert_eq!(self.shape(), k.shape(), "add_const");
        let value = self.value().zip_map(k, |a, b| a + b);
        Var::from_op(value, vec![self.clone()], Box::new(|g, _, _| vec![Some(g.clone())]))
    }

    pub fn scale(&self, k: f64) -> Var {
        let value = self.value().scale(k);
        Var::from_op(value, vec![self.clone()], Box::new(move |g, _, _| vec![Some(g.scale(k))]))
    }

    pub fn add_scalar(&self, k: f64) -> Var {
        let value = self.value().map(|x| x + k);
        Var::from_op(value, vec![self.clone()], Box::new(|g, _, _| vec![Some(g.clone())]))
    }

    pub fn neg(&self) -> Var {
        self.scale(-1.0)
    }

    pub fn relu(&self) -> Var {
        self.leaky_relu(0.0)
    }

    pub fn leaky_relu(&self, slope: f64) -> Var {
        let value = self.value().map(|x| if x > 0.0 { x } else { slope * x });
        unary(self, value, move |x, _| if x > 0.0 { 1.0 } else { slope })
    }

    pub fn sigmoid(&self) -> Var {
        let value = self.value().map(sigmoid);
        unary(self, value, |_, y| y * (1.0 - y))
    }

    pub fn tanh(&self) -> Var {
        let value = self.value().map(f64::tanh);
        unary(self, value, |_, y| 1.0 - y * y)
    }

    pub fn exp(&self) -> Var {
        let value = self.value().map(f64::exp);
        unary(self, value, |_, y| y)
    }

    pub fn ln(&self) -> Var {
        let value = self.value().map(f64::ln);
        unary(self, value, |x, _| 1.0 / x)
    }

    pub fn abs(&self) -> Var {
        let value = self.value().map(f64::abs);
        unary(self, value, |x, _| {
            if x > 0.0 {
                1.0
            } else if x < 0.0 {
                -1.0
            } else {
                0.0
            }
        })
    }

    pub fn square(&self) -> Var {
        let value = self.value().map(|x| x * x);
        unary(self, value, |x, _| 2.0 * x)
    }

    /// `log(1 + e^x)`, evaluated without overflow.
    pub fn softplus(&self) -> Var {
        let value = self.value().map(softplus);
        unary(self, value, |x, _| sigmoid(x))
    }

    pub fn sum(&self) -> Var {
        let value = Tensor::scalar(self.value().sum());
        Var::from_op(
            value,
            vec![self.clone()],
            Box::new(|g, p, _| vec![Some(Tensor::full(p[0].shape(), g.item()))]),
        )
    }

    pub fn mean(&self) -> Var {
        let n = self.value().len() as f64;
        self.sum().scale(1.0 / n)
    }

    pub fn reshape(&self, shape: &[usize]) -> Var {
        let value = self.value().clone().reshape(shape).expect("reshape");
        Var::from_op(
            value,
            vec![self.clone()],
            Box::new(|g, p, _| vec![Some(g.clone().reshape(p[0].shape()).unwrap())]),
        )
    }

    /// `[m, k] x [k, n] -> [m, n]`.
    pub fn matmul(&self, other: &Var) -> Var {
        let (a, b) = (self.shape(), other.shape());
        assert!(a.len() == 2 && b.len() == 2 && a[1] == b[0], "matmul {a:?} x {b:?}");
        let (m, k, n) = (a[0], a[1], b[1]);
        let value = Tensor::from_parts(
            vec![m, n],
            gemm(self.value().data(), false, other.value().data(), false, m, k, n),
        );
        Var::from_op(
            value,
            vec![self.clone(), other.clone()],
            Box::new(move |g, p, _| {
                let ga = gemm(g.data(), false, p[1].value().data(), true, m, n, k);
                let gb = gemm(p[0].value().data(), true, g.data(), false, k, m, n);
                vec![
                    Some(Tensor::from_parts(vec![m, k], ga)),
                    Some(Tensor::from_parts(vec![k, n], gb)),
                ]
            }),
        )
    }

    pub fn transpose(&self) -> Var {
        let s = self.shape();
        assert_eq!(s.len(), 2, "transpose");
        let (r, c) = (s[0], s[1]);
        let value = Tensor::from_parts(vec![c, r], transpose2(self.value().data(), r, c));
        Var::from_op(
            value,
            vec![self.clone()],
            Box::new(move |g, _, _| vec![Some(Tensor::from_parts(vec![r, c], transpose2(g.data(), c, r)))]),
        )
    }

    /// Broadcast-add a `[n]` bias over the last axis of a `[..., n]` tensor.
    pub fn add_row_bias(&self, bias: &Var) -> Var {
        let n = *self.shape().last().expect("add_row_bias on scalar");
        assert_eq!(bias.shape(), [n], "add_row_bias");
        let mut value = self.value().clone();
        for row in value.data_mut().chunks_mut(n) {
            for (x, b) in row.iter_mut().zip(bias.value().data()) {
                *x += b;
            }
        }
        Var::from_op(
            value,
            vec![self.clone(), bias.clone()],
            Box::new(move |g, _, _| {
                let mut gb = vec![0.0; n];
                for row in g.data().chunks(n) {
                    for (acc, x) in gb.iter_mut().zip(row) {
                        *acc += x;
                    }
                }
                vec![Some(g.clone()), Some(Tensor::from_parts(vec![n], gb))]
            }),
        )
    }

    /// Multiply each row (slice along axis 0) by a constant factor.
    pub fn scale_rows(&self, factors: &[f64]) -> Var {
        let rows = self.shape()[0];
        assert_eq!(rows, factors.len(), "scale_rows");
        let width = self.value().len() / rows.max(1);
        let apply = move |t: &Tensor, f: &[f64]| {
            let mut out = t.clone();
            for (row, k) in out.data_mut().chunks_mut(width.max(1)).zip(f) {
                for x in row.iter_mut() {
                    *x *= k;
                }
            }
            out
        };
        let value = apply(self.value(), factors);
        let factors = factors.to_vec();
        Var::from_op(value, vec![self.clone()], Box::new(move |g, _, _| vec![Some(apply(g, &factors))]))
    }

    /// Gather rows (slices along axis 0).
    pub fn index_select(&self, index: &[usize]) -> Var {
        let shape = self.shape().to_vec();
        let width: usize = shape[1..].iter().product();
        let mut data = Vec::with_capacity(index.len() * width);
        for &i in index {
            data.extend_from_slice(&self.value().data()[i * width..(i + 1) * width]);
        }
        let mut out_shape = shape.clone();
        out_shape[0] = index.len();
        let index = index.to_vec();
        Var::from_op(
            Tensor::from_parts(out_shape, data),
            vec![self.clone()],
            Box::new(move |g, _, _| {
                let mut acc = Tensor::zeros(&shape);
                scatter_rows(acc.data_mut(), g.data(), &index, width);
                vec![Some(acc)]
            }),
        )
    }

    /// Sum the rows of `self` into a fresh `[rows, ...]` tensor at `index`.
    pub fn index_add(&self, index: &[usize], rows: usize) -> Var {
        let shape = self.shape().to_vec();
        assert_eq!(shape[0], index.len(), "index_add");
        let width: usize = shape[1..].iter().product();
        let mut out_shape = shape.clone();
        out_shape[0] = rows;
        let mut out = Tensor::zeros(&out_shape);
        scatter_rows(out.data_mut(), self.value().data(), index, width);
        let index = index.to_vec();
        Var::from_op(
            out,
            vec![self.clone()],
            Box::new(move |g, _, _| {
                let mut data = Vec::with_capacity(index.len() * width);
                for &i in &index {
                    data.extend_from_slice(&g.data()[i * width..(i + 1) * width]);
                }
                vec![Some(Tensor::from_parts(shape.clone(), data))]
            }),
        )
    }

    pub fn concat(vars: &[Var], axis: usize) -> Var {
        assert!(!vars.is_empty(), "concat of nothing");
        let first = vars[0].shape().to_vec();
        for v in vars {
            let s = v.shape();
            assert!(
                s.len() == first.len()
                    && s.iter().zip(&first).enumerate().all(|(i, (a, b))| i == axis || a == b),
                "concat shapes {first:?} vs {s:?}"
            );
        }
        let sizes: Vec<usize> = vars.iter().map(|v| v.shape()[axis]).collect();
        let total: usize = sizes.iter().sum();
        let (outer, _, inner) = strides_for(&first, axis);
        let mut out_shape = first.clone();
        out_shape[axis] = total;
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (v, &sz) in vars.iter().zip(&sizes) {
                let chunk = sz * inner;
                data.extend_from_slice(&v.value().data()[o * chunk..(o + 1) * chunk]);
            }
        }
        Var::from_op(
            Tensor::from_parts(out_shape, data),
            vars.to_vec(),
            Box::new(move |g, parents, _| {
                let mut outs: Vec<Vec<f64>> = sizes.iter().map(|s| Vec::with_capacity(outer * s * inner)).collect();
                let mut pos = 0;
                for _ in 0..outer {
                    for (buf, &sz) in outs.iter_mut().zip(&sizes) {
                        let chunk = sz * inner;
                        buf.extend_from_slice(&g.data()[pos..pos + chunk]);
                        pos += chunk;
                    }
                }
                outs.into_iter()
                    .zip(parents)
                    .map(|(d, p)| Some(Tensor::from_parts(p.shape().to_vec(), d)))
                    .collect()
            }),
        )
    }

    /// Slice `len` entries starting at `start` along `axis`.
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Var {
        let shape = self.shape().to_vec();
        assert!(start + len <= shape[axis], "narrow out of range");
        let (outer, size, inner) = strides_for(&shape, axis);
        let mut out_shape = shape.clone();
        out_shape[axis] = len;
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * size * inner + start * inner;
            data.extend_from_slice(&self.value().data()[base..base + len * inner]);
        }
        Var::from_op(
            Tensor::from_parts(out_shape, data),
            vec![self.clone()],
            Box::new(move |g, _, _| {
                let mut full = Tensor::zeros(&shape);
                for o in 0..outer {
                    let base = o * size * inner + start * inner;
                    full.data_mut()[base..base + len * inner]
                        .copy_from_slice(&g.data()[o * len * inner..(o + 1) * len * inner]);
                }
                vec![Some(full)]
            }),
        )
    }

    /// Mean binary cross entropy of probabilities against constant targets,
    /// with predictions clipped to `[eps, 1 - eps]`.
    pub fn bce(&self, target: &Tensor, eps: f64) -> Var {
        assert_eq!(self.shape(), target.shape(), "bce");
        let n = target.len() as f64;
        let loss: f64 = self
            .value()
            .data()
            .iter()
            .zip(target.data())
            .map(|(&p, &t)| {
                let p = p.clamp(eps, 1.0 - eps);
                -(t * p.ln() + (1.0 - t) * (1.0 - p).ln())
            })
            .sum::<f64>()
            / n;
        let target = target.clone();
        Var::from_op(
            Tensor::scalar(loss),
            vec![self.clone()],
            Box::new(move |g, p, _| {
                let g = g.item() / n;
                let grad = p[0].value().zip_map(&target, |p, t| {
                    if p < eps || p > 1.0 - eps {
                        0.0
                    } else {
                        g * (p - t) / (p * (1.0 - p))
                    }
                });
                vec![Some(grad)]
            }),
        )
    }

    /// Mean binary cross entropy of logits against constant targets.
    pub fn bce_with_logits(&self, target: &Tensor) -> Var {
        assert_eq!(self.shape(), target.shape(), "bce_with_logits");
        let n = target.len() as f64;
        let loss: f64 = self
            .value()
            .data()
            .iter()
            .zip(target.data())
            .map(|(&x, &t)| softplus(x) - t * x)
            .sum::<f64>()
            / n;
        let target = target.clone();
        Var::from_op(
            Tensor::scalar(loss),
            vec![self.clone()],
            Box::new(move |g, p, _| {
                let g = g.item() / n;
                vec![Some(p[0].value().zip_map(&target, |x, t| g * (sigmoid(x) - t)))]
            }),
        )
    }

    /// Mean softmax cross entropy of `[n, classes]` logits against labels.
    pub fn cross_entropy(&self, labels: &[usize]) -> Var {
        let s = self.shape();
        assert!(s.len() == 2 && s[0] == labels.len(), "cross_entropy");
        let (n, c) = (s[0], s[1]);
        let probs = softmax_rows(self.value().data(), c);
        let loss: f64 = labels
            .iter()
            .enumerate()
            .map(|(i, &y)| -log_softmax_at(&self.value().data()[i * c..(i + 1) * c], y))
            .sum::<f64>()
            / n as f64;
        let labels = labels.to_vec();
        Var::from_op(
            Tensor::scalar(loss),
            vec![self.clone()],
            Box::new(move |g, _, _| {
                let g = g.item() / n as f64;
                let mut grad = probs.clone();
                for (i, &y) in labels.iter().enumerate() {
                    grad[i * c + y] -= 1.0;
                }
                for x in grad.iter_mut() {
                    *x *= g;
                }
                vec![Some(Tensor::from_parts(vec![n, c], grad))]
            }),
        )
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

pub fn softmax_rows(data: &[f64], classes: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(data.len());
    for row in data.chunks(classes) {
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = row.iter().map(|x| (x - m).exp()).collect();
        let z: f64 = exps.iter().sum();
        out.extend(exps.into_iter().map(|e| e / z));
    }
    out
}

fn log_softmax_at(row: &[f64], idx: usize) -> f64 {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + row.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
    row[idx] - lse
}

fn transpose2(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut t = vec![0.0; a.len()];
    for i in 0..rows {
        for j in 0..cols {
            t[j * rows + i] = a[i * cols + j];
        }
    }
    t
}

fn scatter_rows(dst: &mut [f64], src: &[f64], index: &[usize], width: usize) {
    for (k, &i) in index.iter().enumerate() {
        for (d, s) in dst[i * width..(i + 1) * width].iter_mut().zip(&src[k * width..(k + 1) * width]) {
            *d += s;
        }
    }
}
