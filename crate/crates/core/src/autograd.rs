//! A small reverse-mode automatic differentiation tape over `f64` tensors.
//!
//! Every operation records its output value together with a closure that maps
//! the upstream gradient onto gradients of its inputs. Tensors are dynamic-rank
//! `ndarray` arrays in standard (row-major) layout; spatio-temporal feature maps
//! are channels-last `[T, H, W, C]`.

use std::cell::{Ref, RefCell};
use std::rc::Rc;

use ndarray::{concatenate, Array2, ArrayD, Axis, IxDyn, Slice, Zip};

pub type Tensor = ArrayD<f64>;

pub struct BackwardCtx<'a> {
    pub grad: &'a Tensor,
    pub inputs: Vec<&'a Tensor>,
    pub output: &'a Tensor,
    pub needs: Vec<bool>,
}

pub type BackwardFn = Box<dyn Fn(&BackwardCtx<'_>) -> Vec<Option<Tensor>>>;

struct Node {
    value: Tensor,
    parents: Vec<usize>,
    requires_grad: bool,
    backward: Option<BackwardFn>,
}

#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

pub struct Grads {
    grads: Vec<Option<Tensor>>,
}

impl Grads {
    pub fn get(&self, v: Var<'_>) -> Option<&Tensor> {
        self.grads.get(v.id).and_then(|g| g.as_ref())
    }

    /// Gradient of `v`, or zeros shaped like its value when nothing reached it.
    pub fn get_or_zeros(&self, v: Var<'_>) -> Tensor {
        match self.get(v) {
            Some(g) => g.clone(),
            None => Tensor::zeros(v.value().raw_dim()),
        }
    }
}

pub fn scalar(v: f64) -> Tensor {
    ArrayD::from_elem(IxDyn(&[]), v)
}

pub fn tensor(shape: &[usize], data: Vec<f64>) -> Tensor {
    ArrayD::from_shape_vec(IxDyn(shape), data).expect("tensor shape and data length agree")
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// A differentiable input (model parameter or probed input).
    pub fn leaf(&self, value: Tensor) -> Var<'_> {
        self.push(value, Vec::new(), true, None)
    }

    /// A constant: no gradient is accumulated for it or through it.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push(value, Vec::new(), false, None)
    }

    fn push(
        &self,
        value: Tensor,
        parents: Vec<usize>,
        requires_grad: bool,
        backward: Option<BackwardFn>,
    ) -> Var<'_> {
        let value = standard(value);
        let mut nodes = self.nodes.borrow_mut();
        let id = nodes.len();
        nodes.push(Node {
            value,
            parents,
            requires_grad,
            backward: if requires_grad { backward } else { None },
        });
        Var { tape: self, id }
    }

    /// Records an operation whose output value has already been computed.
    pub fn record(&self, inputs: &[Var<'_>], value: Tensor, backward: BackwardFn) -> Var<'_> {
        let (parents, requires_grad) = {
            let nodes = self.nodes.borrow();
            let parents: Vec<usize> = inputs.iter().map(|v| v.id).collect();
            let rg = parents.iter().any(|&p| nodes[p].requires_grad);
            (parents, rg)
        };
        self.push(value, parents, requires_grad, Some(backward))
    }

    pub fn backward(&self, root: Var<'_>) -> Grads {
        let nodes = self.nodes.borrow();
        let n = root.id + 1;
        let mut grads: Vec<Option<Tensor>> = (0..n).map(|_| None).collect();
        grads[root.id] = Some(Tensor::ones(nodes[root.id].value.raw_dim()));
        for id in (0..n).rev() {
            let node = &nodes[id];
            let Some(bw) = node.backward.as_ref() else {
                continue;
            };
            let Some(g) = grads[id].take() else {
                continue;
            };
            let ctx = BackwardCtx {
                grad: &g,
                inputs: node.parents.iter().map(|&p| &nodes[p].value).collect(),
                output: &node.value,
                needs: node.parents.iter().map(|&p| nodes[p].requires_grad).collect(),
            };
            let parent_grads = bw(&ctx);
            debug_assert_eq!(parent_grads.len(), node.parents.len());
            for (&p, pg) in node.parents.iter().zip(parent_grads) {
                let Some(pg) = pg.map(standard) else { continue };
                if !nodes[p].requires_grad {
                    continue;
                }
                debug_assert_eq!(pg.shape(), nodes[p].value.shape(), "gradient shape of node {p}");
                match &mut grads[p] {
                    Some(acc) => *acc += &pg,
                    slot @ None => *slot = Some(pg),
                }
            }
        }
        Grads { grads }
    }
}

/// Sparse linear map `out[o] = Σ w · in[i]`, stored row-compressed by output index.
#[derive(Debug, Clone)]
pub struct SparseMap {
    pub in_shape: Vec<usize>,
    pub out_shape: Vec<usize>,
    pub row_start: Vec<usize>,
    pub src: Vec<usize>,
    pub weight: Vec<f64>,
}

impl SparseMap {
    pub fn apply(&self, input: &[f64]) -> Vec<f64> {
        let n_out = self.row_start.len() - 1;
        let mut out = vec![0.0; n_out];
        for (o, slot) in out.iter_mut().enumerate() {
            let mut acc = 0.0;
            for k in self.row_start[o]..self.row_start[o + 1] {
                acc += self.weight[k] * input[self.src[k]];
            }
            *slot = acc;
        }
        out
    }

    pub fn apply_adjoint(&self, grad: &[f64]) -> Vec<f64> {
        let n_in: usize = self.in_shape.iter().product();
        let mut out = vec![0.0; n_in];
        for (o, &g) in grad.iter().enumerate() {
            for k in self.row_start[o]..self.row_start[o + 1] {
                out[self.src[k]] += self.weight[k] * g;
            }
        }
        out
    }
}

fn standard(t: Tensor) -> Tensor {
    if t.is_standard_layout() {
        t
    } else {
        t.as_standard_layout().into_owned()
    }
}

fn same_shape(a: &Tensor, b: &Tensor, op: &str) {
    assert_eq!(a.shape(), b.shape(), "{op}: operand shapes differ");
}

impl<'t> Var<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Ref<'t, Tensor> {
        Ref::map(self.tape.nodes.borrow(), |n| &n[self.id].value)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    pub fn item(&self) -> f64 {
        let v = self.value();
        assert_eq!(v.len(), 1, "item() on a non-scalar tensor");
        v.iter().copied().next().unwrap_or(0.0)
    }

    /// A constant copy of this value, cut off from the gradient graph.
    pub fn detach(&self) -> Var<'t> {
        let v = self.value().clone();
        self.tape.constant(v)
    }

    pub fn add(self, other: Var<'t>) -> Var<'t> {
        let out = {
            let (a, b) = (self.value(), other.value());
            same_shape(&a, &b, "add");
            &*a + &*b
        };
        self.tape.record(
            &[self, other],
            out,
            Box::new(|c| vec![Some(c.grad.clone()), Some(c.grad.clone())]),
        )
    }

    pub fn sub(self, other: Var<'t>) -> Var<'t> {
        let out = {
            let (a, b) = (self.value(), other.value());
            same_shape(&a, &b, "sub");
            &*a - &*b
        };
        self.tape.record(
            &[self, other],
            out,
            Box::new(|c| vec![Some(c.grad.clone()), Some(-c.grad)]),
        )
    }

    pub fn mul(self, other: Var<'t>) -> Var<'t> {
        let out = {
            let (a, b) = (self.value(), other.value());
            same_shape(&a, &b, "mul");
            &*a * &*b
        };
        self.tape.record(
            &[self, other],
            out,
            Box::new(|c| {
                vec![
                    c.needs[0].then(|| c.grad * c.inputs[1]),
                    c.needs[1].then(|| c.grad * c.inputs[0]),
                ]
            }),
        )
    }

    pub fn scale(self, k: f64) -> Var<'t> {
        let out = self.value().mapv(|v| v * k);
        self.tape
            .record(&[self], out, Box::new(move |c| vec![Some(c.grad.mapv(|g| g * k))]))
    }

    pub fn add_scalar(self, k: f64) -> Var<'t> {
        let out = self.value().mapv(|v| v + k);
        self.tape
            .record(&[self], out, Box::new(|c| vec![Some(c.grad.clone())]))
    }

    pub fn relu(self) -> Var<'t> {
        let out = self.value().mapv(|v| v.max(0.0));
        self.tape.record(
            &[self],
            out,
            Box::new(|c| {
                let g = Zip::from(c.grad)
                    .and(c.inputs[0])
                    .map_collect(|&g, &x| if x > 0.0 { g } else { 0.0 });
                vec![Some(g)]
            }),
        )
    }

    pub fn sigmoid(self) -> Var<'t> {
        let out = self.value().mapv(sigmoid);
        self.tape.record(
            &[self],
            out,
            Box::new(|c| {
                let g = Zip::from(c.grad)
                    .and(c.output)
                    .map_collect(|&g, &y| g * y * (1.0 - y));
                vec![Some(g)]
            }),
        )
    }

    pub fn square(self) -> Var<'t> {
        let out = self.value().mapv(|v| v * v);
        self.tape.record(
            &[self],
            out,
            Box::new(|c| {
                let g = Zip::from(c.grad)
                    .and(c.inputs[0])
                    .map_collect(|&g, &x| 2.0 * g * x);
                vec![Some(g)]
            }),
        )
    }

    pub fn sum(self) -> Var<'t> {
        let out = scalar(self.value().sum());
        self.tape.record(
            &[self],
            out,
            Box::new(|c| {
                let g = c.grad.iter().copied().next().unwrap_or(0.0);
                vec![Some(Tensor::from_elem(c.inputs[0].raw_dim(), g))]
            }),
        )
    }

    pub fn mean(self) -> Var<'t> {
        let n = self.value().len().max(1) as f64;
        self.sum().scale(1.0 / n)
    }

    pub fn reshape(self, shape: &[usize]) -> Var<'t> {
        let out = {
            let v = self.value();
            tensor(shape, v.iter().copied().collect())
        };
        self.tape.record(
            &[self],
            out,
            Box::new(|c| {
                let shape = c.inputs[0].shape().to_vec();
                vec![Some(tensor(&shape, c.grad.iter().copied().collect()))]
            }),
        )
    }

    /// `[m, k] x [k, n] -> [m, n]`.
    pub fn matmul(self, other: Var<'t>) -> Var<'t> {
        let out = {
            let (a, b) = (self.value(), other.value());
            let a2 = as_2d(&a);
            let b2 = as_2d(&b);
            assert_eq!(a2.ncols(), b2.nrows(), "matmul inner dimensions");
            a2.dot(&b2).into_dyn()
        };
        self.tape.record(
            &[self, other],
            out,
            Box::new(|c| {
                let g = as_2d(c.grad);
                let a = as_2d(c.inputs[0]);
                let b = as_2d(c.inputs[1]);
                vec![
                    c.needs[0].then(|| g.dot(&b.t()).into_dyn()),
                    c.needs[1].then(|| a.t().dot(&g).into_dyn()),
                ]
            }),
        )
    }

    /// Adds a `[C]` bias along the last axis.
    pub fn add_bias(self, bias: Var<'t>) -> Var<'t> {
        let out = {
            let (x, b) = (self.value(), bias.value());
            let c = *x.shape().last().expect("add_bias on a scalar");
            assert_eq!(b.shape(), [c], "bias length");
            let mut out = x.clone();
            for mut lane in out.lanes_mut(Axis(x.ndim() - 1)) {
                lane += &b.view().into_dimensionality::<ndarray::Ix1>().unwrap();
            }
            out
        };
        self.tape.record(
            &[self, bias],
            out,
            Box::new(|c| {
                let last = c.grad.ndim() - 1;
                let ch = c.grad.shape()[last];
                let db = c
                    .grad
                    .view()
                    .into_shape_with_order((c.grad.len() / ch, ch))
                    .map(|g| g.sum_axis(Axis(0)).into_dyn());
                vec![Some(c.grad.clone()), Some(db.expect("standard layout gradient"))]
            }),
        )
    }

    /// Same-padded, stride-1 3D convolution. `self: [T,H,W,Ci]`,
    /// `weight: [kt,kh,kw,Ci,Co]`, `bias: [Co]`; output `[T,H,W,Co]`.
    pub fn conv3d(self, weight: Var<'t>, bias: Var<'t>) -> Var<'t> {
        let (out, cols, geom) = {
            let (x, w, b) = (self.value(), weight.value(), bias.value());
            let geom = ConvGeom::new(x.shape(), w.shape());
            assert_eq!(b.shape(), [geom.co], "conv bias length");
            let xs = x.as_slice().expect("standard layout input");
            let cols = im2col(xs, &geom);
            let w2 = as_2d_shape(&w, geom.k_len(), geom.co);
            let mut out = cols.dot(&w2);
            out += &b.view().into_dimensionality::<ndarray::Ix1>().expect("rank-1 bias");
            let out = reshape_owned(out, &[geom.t, geom.h, geom.w, geom.co]);
            (out, cols, geom)
        };
        let needs_input = self.tape.nodes.borrow()[self.id].requires_grad;
        let cols = Rc::new(cols);
        self.tape.record(
            &[self, weight, bias],
            out,
            Box::new(move |c| {
                let g2 = as_2d_shape(c.grad, geom.rows(), geom.co);
                let dw = c.needs[1].then(|| {
                    let dw = cols.t().dot(&g2);
                    reshape_owned(dw, c.inputs[1].shape())
                });
                let db = c.needs[2].then(|| g2.sum_axis(Axis(0)).into_dyn());
                let dx = (needs_input && c.needs[0]).then(|| {
                    let w2 = as_2d_shape(c.inputs[1], geom.k_len(), geom.co);
                    let dcols = g2.dot(&w2.t());
                    let dx = col2im(&dcols, &geom);
                    tensor(c.inputs[0].shape(), dx)
                });
                vec![dx, dw, db]
            }),
        )
    }

    /// 2x2 spatial average pooling of `[T,H,W,C]` (H and W even).
    pub fn avg_pool2(self) -> Var<'t> {
        let (out, dims) = {
            let x = self.value();
            let s = x.shape();
            let dims = [s[0], s[1], s[2], s[3]];
            assert!(dims[1] % 2 == 0 && dims[2] % 2 == 0, "avg_pool2 needs even spatial size");
            let mut out = vec![0.0; x.len() / 4];
            let xs = x.as_slice().expect("standard layout input");
            for_each_pool_pair(dims, |big, small| out[small] += 0.25 * xs[big]);
            (tensor(&[dims[0], dims[1] / 2, dims[2] / 2, dims[3]], out), dims)
        };
        self.tape.record(
            &[self],
            out,
            Box::new(move |c| {
                let g = c.grad.as_slice().expect("standard layout gradient");
                let mut dx = vec![0.0; dims.iter().product()];
                for_each_pool_pair(dims, |big, small| dx[big] = 0.25 * g[small]);
                vec![Some(tensor(&dims, dx))]
            }),
        )
    }

    /// Nearest-neighbour 2x spatial upsampling of `[T,H,W,C]`.
    pub fn upsample2(self) -> Var<'t> {
        let (out, dims) = {
            let x = self.value();
            let s = x.shape();
            let dims = [s[0], 2 * s[1], 2 * s[2], s[3]];
            let xs = x.as_slice().expect("standard layout input");
            let mut out = vec![0.0; x.len() * 4];
            for_each_pool_pair(dims, |big, small| out[big] = xs[small]);
            (tensor(&dims, out), dims)
        };
        self.tape.record(
            &[self],
            out,
            Box::new(move |c| {
                let g = c.grad.as_slice().expect("standard layout gradient");
                let mut dx = vec![0.0; g.len() / 4];
                for_each_pool_pair(dims, |big, small| dx[small] += g[big]);
                vec![Some(tensor(&[dims[0], dims[1] / 2, dims[2] / 2, dims[3]], dx))]
            }),
        )
    }

    /// Bilinear spatial resize of `[T,H,W,C]` (half-pixel centres, edge clamp).
    pub fn resize_bilinear(self, out_h: usize, out_w: usize) -> Var<'t> {
        thread_local! {
            static CACHE: RefCell<Vec<(Vec<usize>, usize, usize, Rc<SparseMap>)>> = const { RefCell::new(Vec::new()) };
        }
        let s = self.value().shape().to_vec();
        let map = CACHE.with(|c| {
            let mut c = c.borrow_mut();
            if let Some((_, _, _, m)) = c.iter().find(|(k, h, w, _)| *k == s && *h == out_h && *w == out_w) {
                return m.clone();
            }
            let m = Rc::new(bilinear_resize_map(&s, out_h, out_w));
            c.push((s.clone(), out_h, out_w, m.clone()));
            m
        });
        self.sparse_map(map)
    }

    pub fn sparse_map(self, map: Rc<SparseMap>) -> Var<'t> {
        let out = {
            let x = self.value();
            assert_eq!(x.shape(), map.in_shape.as_slice(), "sparse_map input shape");
            let xs = x.as_slice().expect("standard layout");
            tensor(&map.out_shape, map.apply(xs))
        };
        self.tape.record(
            &[self],
            out,
            Box::new(move |c| {
                let g = c.grad.as_slice().expect("standard layout");
                vec![Some(tensor(&map.in_shape, map.apply_adjoint(g)))]
            }),
        )
    }

    /// Concatenates along the last (channel) axis.
    pub fn concat_last(self, other: Var<'t>) -> Var<'t> {
        let (out, split) = {
            let (a, b) = (self.value(), other.value());
            let ax = Axis(a.ndim() - 1);
            let split = a.shape()[a.ndim() - 1];
            (concatenate(ax, &[a.view(), b.view()]).expect("concat shapes"), split)
        };
        self.tape.record(
            &[self, other],
            out,
            Box::new(move |c| {
                let ax = Axis(c.grad.ndim() - 1);
                let ga = c.grad.slice_axis(ax, Slice::from(..split)).to_owned();
                let gb = c.grad.slice_axis(ax, Slice::from(split..)).to_owned();
                vec![Some(ga), Some(gb)]
            }),
        )
    }

    /// Mean over the leading axis.
    pub fn mean_axis0(self) -> Var<'t> {
        let out = self.value().mean_axis(Axis(0)).expect("non-empty leading axis");
        self.tape.record(
            &[self],
            out,
            Box::new(|c| {
                let n = c.inputs[0].shape()[0] as f64;
                let g = c.grad.mapv(|v| v / n);
                let dx = g
                    .broadcast(c.inputs[0].raw_dim())
                    .expect("broadcast over leading axis")
                    .to_owned();
                vec![Some(dx)]
            }),
        )
    }

    /// Softmax along the last axis.
    pub fn softmax_last(self) -> Var<'t> {
        let out = {
            let mut x = self.value().clone();
            let ax = Axis(x.ndim() - 1);
            for mut lane in x.lanes_mut(ax) {
                let m = lane.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
                lane.mapv_inplace(|v| (v - m).exp());
                let s = lane.sum();
                lane.mapv_inplace(|v| v / s);
            }
            x
        };
        self.tape.record(
            &[self],
            out,
            Box::new(|c| {
                let mut dx = c.grad * c.output;
                let ax = Axis(dx.ndim() - 1);
                for (mut d, y) in dx.lanes_mut(ax).into_iter().zip(c.output.lanes(ax)) {
                    let s = d.sum();
                    Zip::from(&mut d).and(&y).for_each(|d, &y| *d -= y * s);
                }
                vec![Some(dx)]
            }),
        )
    }

    /// Capsule squashing along the last axis: `v = (|s|^2 / (1 + |s|^2)) s / |s|`.
    pub fn squash(self) -> Var<'t> {
        let out = {
            let mut x = self.value().clone();
            let ax = Axis(x.ndim() - 1);
            for mut lane in x.lanes_mut(ax) {
                let n = lane.dot(&lane).sqrt();
                let f = n / (1.0 + n * n);
                lane.mapv_inplace(|v| v * f);
            }
            x
        };
        self.tape.record(
            &[self],
            out,
            Box::new(|c| {
                let mut dx = c.grad.clone();
                let ax = Axis(dx.ndim() - 1);
                for (mut d, s) in dx.lanes_mut(ax).into_iter().zip(c.inputs[0].lanes(ax)) {
                    let n = s.dot(&s).sqrt();
                    if n == 0.0 {
                        d.fill(0.0);
                        continue;
                    }
                    let f = n / (1.0 + n * n);
                    let fp = (1.0 - n * n) / ((1.0 + n * n) * (1.0 + n * n));
                    let sg = s.dot(&d);
                    let k = fp * sg / n;
                    Zip::from(&mut d).and(&s).for_each(|d, &s| *d = f * *d + k * s);
                }
                vec![Some(dx)]
            }),
        )
    }

    /// Euclidean norm along the last axis.
    pub fn norm_last(self) -> Var<'t> {
        let out = {
            let x = self.value();
            let ax = Axis(x.ndim() - 1);
            x.map_axis(ax, |lane| lane.dot(&lane).sqrt())
        };
        self.tape.record(
            &[self],
            out,
            Box::new(|c| {
                let x = c.inputs[0];
                let ax = Axis(x.ndim() - 1);
                let mut dx = x.clone();
                for ((mut d, &n), &g) in dx
                    .lanes_mut(ax)
                    .into_iter()
                    .zip(c.output.iter())
                    .zip(c.grad.iter())
                {
                    let k = if n > 0.0 { g / n } else { 0.0 };
                    d.mapv_inplace(|v| v * k);
                }
                vec![Some(dx)]
            }),
        )
    }

    /// Capsule votes `u_hat[i, j, :] = u[i, :] · W[i mod n_types, j]`.
    /// `self: [N, d_in]`, `weight: [n_types, K, d_in, d_out]` → `[N, K, d_out]`.
    pub fn capsule_votes(self, weight: Var<'t>) -> Var<'t> {
        let out = {
            let (u, w) = (self.value(), weight.value());
            let (n, din) = (u.shape()[0], u.shape()[1]);
            let ws = w.shape();
            let (nt, k, dout) = (ws[0], ws[1], ws[3]);
            assert_eq!(ws[2], din, "capsule_votes input dimension");
            let mut out = Tensor::zeros(IxDyn(&[n, k, dout]));
            for i in 0..n {
                let t = i % nt;
                for j in 0..k {
                    for a in 0..din {
                        let ua = u[[i, a]];
                        for b in 0..dout {
                            out[[i, j, b]] += ua * w[[t, j, a, b]];
                        }
                    }
                }
            }
            out
        };
        self.tape.record(
            &[self, weight],
            out,
            Box::new(|c| {
                let (u, w, g) = (c.inputs[0], c.inputs[1], c.grad);
                let (n, din) = (u.shape()[0], u.shape()[1]);
                let ws = w.shape();
                let (nt, k, dout) = (ws[0], ws[1], ws[3]);
                let mut du = Tensor::zeros(u.raw_dim());
                let mut dw = Tensor::zeros(w.raw_dim());
                for i in 0..n {
                    let t = i % nt;
                    for j in 0..k {
                        for a in 0..din {
                            let mut acc = 0.0;
                            for b in 0..dout {
                                let gb = g[[i, j, b]];
                                acc += gb * w[[t, j, a, b]];
                                dw[[t, j, a, b]] += u[[i, a]] * gb;
                            }
                            du[[i, a]] += acc;
                        }
                    }
                }
                vec![Some(du), Some(dw)]
            }),
        )
    }

    /// Coupling-weighted vote sum: `self = c [N, K]`, `votes [N, K, d]` → `[K, d]`.
    pub fn routed_sum(self, votes: Var<'t>) -> Var<'t> {
        let out = {
            let (cpl, u) = (self.value(), votes.value());
            let s = u.shape();
            let (n, k, d) = (s[0], s[1], s[2]);
            let mut out = Tensor::zeros(IxDyn(&[k, d]));
            for i in 0..n {
                for j in 0..k {
                    let cij = cpl[[i, j]];
                    for b in 0..d {
                        out[[j, b]] += cij * u[[i, j, b]];
                    }
                }
            }
            out
        };
        self.tape.record(
            &[self, votes],
            out,
            Box::new(|c| {
                let (cpl, u, g) = (c.inputs[0], c.inputs[1], c.grad);
                let s = u.shape();
                let (n, k, d) = (s[0], s[1], s[2]);
                let mut dc = Tensor::zeros(cpl.raw_dim());
                let mut du = Tensor::zeros(u.raw_dim());
                for i in 0..n {
                    for j in 0..k {
                        let mut acc = 0.0;
                        for b in 0..d {
                            acc += g[[j, b]] * u[[i, j, b]];
                            du[[i, j, b]] = cpl[[i, j]] * g[[j, b]];
                        }
                        dc[[i, j]] = acc;
                    }
                }
                vec![Some(dc), Some(du)]
            }),
        )
    }

    /// Routing agreement `a[i, j] = votes[i, j, :] · v[j, :]`; `self = votes`.
    pub fn agreement(self, v: Var<'t>) -> Var<'t> {
        let out = {
            let (u, v) = (self.value(), v.value());
            let s = u.shape();
            let (n, k, d) = (s[0], s[1], s[2]);
            let mut out = Tensor::zeros(IxDyn(&[n, k]));
            for i in 0..n {
                for j in 0..k {
                    out[[i, j]] = (0..d).map(|b| u[[i, j, b]] * v[[j, b]]).sum();
                }
            }
            out
        };
        self.tape.record(
            &[self, v],
            out,
            Box::new(|c| {
                let (u, v, g) = (c.inputs[0], c.inputs[1], c.grad);
                let s = u.shape();
                let (n, k, d) = (s[0], s[1], s[2]);
                let mut du = Tensor::zeros(u.raw_dim());
                let mut dv = Tensor::zeros(v.raw_dim());
                for i in 0..n {
                    for j in 0..k {
                        let gij = g[[i, j]];
                        for b in 0..d {
                            du[[i, j, b]] = gij * v[[j, b]];
                            dv[[j, b]] += gij * u[[i, j, b]];
                        }
                    }
                }
                vec![Some(du), Some(dv)]
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

/// Calls `f(big, small)` with flat offsets pairing every element of a
/// `[T,H,W,C]` tensor with its 2x2-pooled counterpart.
fn for_each_pool_pair(dims: [usize; 4], mut f: impl FnMut(usize, usize)) {
    let [t, h, w, ch] = dims;
    let (hs, ws) = (h / 2, w / 2);
    for ti in 0..t {
        for y in 0..h {
            let big_row = (ti * h + y) * w;
            let small_row = (ti * hs + y / 2) * ws;
            for x in 0..w {
                let big = (big_row + x) * ch;
                let small = (small_row + x / 2) * ch;
                for c in 0..ch {
                    f(big + c, small + c);
                }
            }
        }
    }
}

fn as_2d(t: &Tensor) -> ndarray::ArrayView2<'_, f64> {
    t.view().into_dimensionality::<ndarray::Ix2>().expect("rank-2 tensor")
}

fn reshape_owned(a: Array2<f64>, shape: &[usize]) -> Tensor {
    let a = if a.is_standard_layout() { a } else { a.as_standard_layout().into_owned() };
    a.into_shape_with_order(IxDyn(shape)).expect("element count matches")
}

fn as_2d_shape(t: &Tensor, rows: usize, cols: usize) -> ndarray::ArrayView2<'_, f64> {
    t.view()
        .into_shape_with_order((rows, cols))
        .expect("standard layout tensor of matching size")
}

#[derive(Debug, Clone, Copy)]
struct ConvGeom {
    t: usize,
    h: usize,
    w: usize,
    ci: usize,
    co: usize,
    kt: usize,
    kh: usize,
    kw: usize,
}

impl ConvGeom {
    fn new(x: &[usize], w: &[usize]) -> Self {
        assert_eq!(x.len(), 4, "conv3d input must be [T,H,W,C]");
        assert_eq!(w.len(), 5, "conv3d weight must be [kt,kh,kw,Ci,Co]");
        assert_eq!(x[3], w[3], "conv3d channel mismatch");
        assert!(w[0] % 2 == 1 && w[1] % 2 == 1 && w[2] % 2 == 1, "odd kernels only");
        ConvGeom {
            t: x[0],
            h: x[1],
            w: x[2],
            ci: x[3],
            co: w[4],
            kt: w[0],
            kh: w[1],
            kw: w[2],
        }
    }

    fn rows(&self) -> usize {
        self.t * self.h * self.w
    }

    fn k_len(&self) -> usize {
        self.kt * self.kh * self.kw * self.ci
    }

    /// Visits every run of patch-matrix entries as (patch offset, source offset, length).
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize, usize)) {
        let (pt, ph, pw) = (self.kt / 2, self.kh / 2, self.kw / 2);
        let kl = self.k_len();
        for t in 0..self.t {
            for y in 0..self.h {
                for x in 0..self.w {
                    let row = ((t * self.h + y) * self.w + x) * kl;
                    for dt in 0..self.kt {
                        let st = t + dt;
                        if st < pt || st - pt >= self.t {
                            continue;
                        }
                        let st = st - pt;
                        for dy in 0..self.kh {
                            let sy = y + dy;
                            if sy < ph || sy - ph >= self.h {
                                continue;
                            }
                            let sy = sy - ph;
                            // taps along x are contiguous in both buffers
                            let dx0 = pw.saturating_sub(x);
                            let dx1 = self.kw.min(self.w + pw - x);
                            if dx0 >= dx1 {
                                continue;
                            }
                            let sx = x + dx0 - pw;
                            let col = ((dt * self.kh + dy) * self.kw + dx0) * self.ci;
                            let src = ((st * self.h + sy) * self.w + sx) * self.ci;
                            f(row + col, src, (dx1 - dx0) * self.ci);
                        }
                    }
                }
            }
        }
    }
}

fn im2col(x: &[f64], g: &ConvGeom) -> Array2<f64> {
    let mut cols = vec![0.0; g.rows() * g.k_len()];
    g.for_each_tap(|dst, src, n| cols[dst..dst + n].copy_from_slice(&x[src..src + n]));
    Array2::from_shape_vec((g.rows(), g.k_len()), cols).expect("im2col shape")
}

fn col2im(cols: &Array2<f64>, g: &ConvGeom) -> Vec<f64> {
    let cols = cols.as_standard_layout();
    let c = cols.as_slice().expect("standard layout");
    let mut x = vec![0.0; g.t * g.h * g.w * g.ci];
    g.for_each_tap(|dst, src, n| {
        for k in 0..n {
            x[src + k] += c[dst + k];
        }
    });
    x
}

/// Interpolation taps along one axis for a half-pixel-centred resize.
pub(crate) fn linear_taps(in_len: usize, out_len: usize) -> Vec<(usize, usize, f64)> {
    let scale = in_len as f64 / out_len as f64;
    (0..out_len)
        .map(|o| {
            let pos = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (in_len - 1) as f64);
            let i0 = pos.floor() as usize;
            let i1 = (i0 + 1).min(in_len - 1);
            (i0, i1, pos - i0 as f64)
        })
        .collect()
}

/// Sparse map for bilinear resize of a `[T,H,W,C]` tensor to `[T,out_h,out_w,C]`.
pub fn bilinear_resize_map(in_shape: &[usize], out_h: usize, out_w: usize) -> SparseMap {
    let (t, h, w, ch) = (in_shape[0], in_shape[1], in_shape[2], in_shape[3]);
    let ty = linear_taps(h, out_h);
    let tx = linear_taps(w, out_w);
    let mut row_start = vec![0];
    let mut src = Vec::new();
    let mut weight = Vec::new();
    for ti in 0..t {
        for &(y0, y1, fy) in &ty {
            for &(x0, x1, fx) in &tx {
                for c in 0..ch {
                    let idx = |y: usize, x: usize| ((ti * h + y) * w + x) * ch + c;
                    for (s, wt) in [
                        (idx(y0, x0), (1.0 - fy) * (1.0 - fx)),
                        (idx(y0, x1), (1.0 - fy) * fx),
                        (idx(y1, x0), fy * (1.0 - fx)),
                        (idx(y1, x1), fy * fx),
                    ] {
                        if wt != 0.0 {
                            src.push(s);
                            weight.push(wt);
                        }
                    }
                    row_start.push(src.len());
                }
            }
        }
    }
    SparseMap {
        in_shape: in_shape.to_vec(),
        out_shape: vec![t, out_h, out_w, ch],
        row_start,
        src,
        weight,
    }
}
