use super::kernels::{matmul_nn, matmul_nt, matmul_tn};
use super::{numel, Tensor};
use crate::error::{shape_err, Result};

/// Named elementwise operations.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Elementwise {
    Add,
    Sub,
    Mul,
    Div,
    Exp,
    Log,
    Sigmoid,
    Silu,
    Relu,
}

pub(crate) fn sigmoid(x: f32) -> f32 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus(x: f32) -> f32 {
    if x > 20.0 {
        x
    } else if x < -20.0 {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}

/// Trailing-dimension (numpy-style) broadcast of two shapes.
pub(crate) fn broadcast_shape(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i < rank - a.len() { 1 } else { a[i - (rank - a.len())] };
        let db = if i < rank - b.len() { 1 } else { b[i - (rank - b.len())] };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return Err(shape_err!("cannot broadcast {a:?} with {b:?}")),
        };
    }
    Ok(out)
}

/// For every flat index of `out`, the flat index of the broadcast source.
fn broadcast_map(out: &[usize], src: &[usize]) -> Vec<usize> {
    let rank = out.len();
    let offset = rank - src.len();
    let mut strides = vec![0usize; rank];
    let mut s = 1;
    for i in (0..src.len()).rev() {
        strides[i + offset] = if src[i] == 1 { 0 } else { s };
        s *= src[i];
    }
    let n = numel(out);
    let mut map = Vec::with_capacity(n);
    let mut idx = vec![0usize; rank];
    let mut flat = 0usize;
    for _ in 0..n {
        map.push(flat);
        for d in (0..rank).rev() {
            idx[d] += 1;
            flat += strides[d];
            if idx[d] < out[d] {
                break;
            }
            flat -= strides[d] * out[d];
            idx[d] = 0;
        }
    }
    map
}

enum Access {
    Same,
    /// The source is one contiguous run of output axes: source index
    /// `(i / inner) % len`.
    Block { inner: usize, len: usize },
    Map(Vec<usize>),
}

impl Access {
    fn new(out: &[usize], src: &[usize]) -> Self {
        if out == src {
            return Access::Same;
        }
        let offset = out.len() - src.len();
        let dim = |d: usize| if d < offset { 1 } else { src[d - offset] };
        let kept: Vec<usize> = (0..out.len()).filter(|&d| dim(d) > 1).collect();
        let (first, last) = (kept.first().copied().unwrap_or(out.len()), kept.last().copied().unwrap_or(0));
        if kept.is_empty() || (first..=last).all(|d| dim(d) == out[d]) {
            let inner = if kept.is_empty() { numel(out) } else { numel(&out[last + 1..]) };
            return Access::Block { inner, len: numel(src) };
        }
        Access::Map(broadcast_map(out, src))
    }

    /// The source values laid out at every output index.
    fn expand<'a>(&self, src: &'a [f32], n: usize) -> std::borrow::Cow<'a, [f32]> {
        match self {
            Access::Same => std::borrow::Cow::Borrowed(src),
            Access::Block { inner, len } => {
                let mut out = Vec::with_capacity(n);
                for _ in 0..n / (inner * len) {
                    for &v in &src[..*len] {
                        out.extend(std::iter::repeat_n(v, *inner));
                    }
                }
                std::borrow::Cow::Owned(out)
            }
            Access::Map(m) => std::borrow::Cow::Owned(m.iter().map(|&i| src[i]).collect()),
        }
    }

    /// Sum a gradient over broadcast axes back to the source size.
    fn reduce(&self, g: Vec<f32>, src_len: usize) -> Vec<f32> {
        match self {
            Access::Same => g,
            Access::Block { inner, len } => {
                let mut acc = vec![0.0f64; src_len];
                for (c, chunk) in g.chunks_exact(*inner).enumerate() {
                    acc[c % len] += chunk.iter().map(|&v| v as f64).sum::<f64>();
                }
                acc.into_iter().map(|v| v as f32).collect()
            }
            Access::Map(m) => {
                let mut acc = vec![0.0f64; src_len];
                for (i, v) in g.iter().enumerate() {
                    acc[m[i]] += *v as f64;
                }
                acc.into_iter().map(|v| v as f32).collect()
            }
        }
    }
}

#[derive(Clone, Copy)]
enum BinOp {
    Add,
    Sub,
    Mul,
    Div,
    Min,
    Max,
}

fn binary(a: &Tensor, b: &Tensor, op: BinOp) -> Result<Tensor> {
    let shape = broadcast_shape(a.shape(), b.shape())?;
    let n = numel(&shape);
    let ma = Access::new(&shape, a.shape());
    let mb = Access::new(&shape, b.shape());
    let (ae, be) = (ma.expand(a.data(), n), mb.expand(b.data(), n));
    let f = |f: fn(f32, f32) -> f32| ae.iter().zip(be.iter()).map(|(&x, &y)| f(x, y)).collect::<Vec<f32>>();
    let data = match op {
        BinOp::Add => f(|x, y| x + y),
        BinOp::Sub => f(|x, y| x - y),
        BinOp::Mul => f(|x, y| x * y),
        BinOp::Div => f(|x, y| x / y),
        BinOp::Min => f(f32::min),
        BinOp::Max => f(f32::max),
    };
    drop((ae, be));
    let name = match op {
        BinOp::Add => "add",
        BinOp::Sub => "sub",
        BinOp::Mul => "mul",
        BinOp::Div => "div",
        BinOp::Min => "minimum",
        BinOp::Max => "maximum",
    };
    let (ta, tb) = (a.clone(), b.clone());
    let backward = Box::new(move |g: &[f32], need: &[bool]| {
        let n = g.len();
        let operand_a = || ma.expand(ta.data(), n);
        let operand_b = || mb.expand(tb.data(), n);
        let zip2 = |x: &[f32], f: &dyn Fn(f32, f32) -> f32| g.iter().zip(x).map(|(&g, &x)| f(g, x)).collect::<Vec<f32>>();
        let zip3 = |x: &[f32], y: &[f32], f: &dyn Fn(f32, f32, f32) -> f32| {
            g.iter().zip(x).zip(y).map(|((&g, &x), &y)| f(g, x, y)).collect::<Vec<f32>>()
        };
        let mut ga = None;
        let mut gb = None;
        if need[0] {
            let full: Vec<f32> = match op {
                BinOp::Add | BinOp::Sub => g.to_vec(),
                BinOp::Mul => zip2(&operand_b(), &|g, y| g * y),
                BinOp::Div => zip2(&operand_b(), &|g, y| g / y),
                // Ties route the gradient to the first operand.
                BinOp::Min => zip3(&operand_a(), &operand_b(), &|g, x, y| if x <= y { g } else { 0.0 }),
                BinOp::Max => zip3(&operand_a(), &operand_b(), &|g, x, y| if x >= y { g } else { 0.0 }),
            };
            ga = Some(ma.reduce(full, ta.numel()));
        }
        if need[1] {
            let full: Vec<f32> = match op {
                BinOp::Add => g.to_vec(),
                BinOp::Sub => g.iter().map(|v| -v).collect(),
                BinOp::Mul => zip2(&operand_a(), &|g, x| g * x),
                BinOp::Div => zip3(&operand_a(), &operand_b(), &|g, x, y| -g * x / (y * y)),
                BinOp::Min => zip3(&operand_a(), &operand_b(), &|g, x, y| if x <= y { 0.0 } else { g }),
                BinOp::Max => zip3(&operand_a(), &operand_b(), &|g, x, y| if x >= y { 0.0 } else { g }),
            };
            gb = Some(mb.reduce(full, tb.numel()));
        }
        vec![ga, gb]
    });
    Tensor::from_op(name, shape, data, vec![a.clone(), b.clone()], backward)
}

#[derive(Clone, Copy)]
enum UnOp {
    Exp,
    Log,
    Sigmoid,
    Silu,
    Relu,
    Softplus,
    Abs,
    Neg,
    Scale(f32),
    Shift(f32),
}

fn unary(x: &Tensor, op: UnOp) -> Result<Tensor> {
    let f = move |v: f32| match op {
        UnOp::Exp => v.exp(),
        UnOp::Log => v.ln(),
        UnOp::Sigmoid => sigmoid(v),
        UnOp::Silu => v * sigmoid(v),
        UnOp::Relu => v.max(0.0),
        UnOp::Softplus => softplus(v),
        UnOp::Abs => v.abs(),
        UnOp::Neg => -v,
        UnOp::Scale(c) => v * c,
        UnOp::Shift(c) => v + c,
    };
    // Sigmoid-based ops keep σ(x) for the backward pass.
    let sig: Option<Vec<f32>> =
        matches!(op, UnOp::Sigmoid | UnOp::Silu).then(|| x.data().iter().map(|&v| sigmoid(v)).collect());
    let data: Vec<f32> = match (&sig, op) {
        (Some(s), UnOp::Sigmoid) => s.clone(),
        (Some(s), _) => x.data().iter().zip(s).map(|(&v, &s)| v * s).collect(),
        _ => x.data().iter().map(|&v| f(v)).collect(),
    };
    let name = match op {
        UnOp::Exp => "exp",
        UnOp::Log => "log",
        UnOp::Sigmoid => "sigmoid",
        UnOp::Silu => "silu",
        UnOp::Relu => "relu",
        UnOp::Softplus => "softplus",
        UnOp::Abs => "abs",
        UnOp::Neg => "neg",
        UnOp::Scale(_) => "scale",
        UnOp::Shift(_) => "shift",
    };
    let tx = x.clone();
    let backward = Box::new(move |g: &[f32], _: &[bool]| {
        let xd = tx.data();
        if let Some(sig) = &sig {
            let gx = match op {
                UnOp::Sigmoid => g.iter().zip(sig).map(|(&g, &s)| g * s * (1.0 - s)).collect(),
                _ => g.iter().zip(sig).zip(xd).map(|((&g, &s), &v)| g * (s + v * s * (1.0 - s))).collect(),
            };
            return vec![Some(gx)];
        }
        let gx: Vec<f32> = g
            .iter()
            .zip(xd)
            .map(|(&g, &v)| {
                g * match op {
                    UnOp::Exp => v.exp(),
                    UnOp::Log => 1.0 / v,
                    UnOp::Sigmoid => {
                        let s = sigmoid(v);
                        s * (1.0 - s)
                    }
                    UnOp::Silu => {
                        let s = sigmoid(v);
                        s + v * s * (1.0 - s)
                    }
                    UnOp::Relu => {
                        if v > 0.0 {
                            1.0
                        } else {
                            0.0
                        }
                    }
                    UnOp::Softplus => sigmoid(v),
                    UnOp::Abs => {
                        if v > 0.0 {
                            1.0
                        } else if v < 0.0 {
                            -1.0
                        } else {
                            0.0
                        }
                    }
                    UnOp::Neg => -1.0,
                    UnOp::Scale(c) => c,
                    UnOp::Shift(_) => 1.0,
                }
            })
            .collect();
        vec![Some(gx)]
    });
    Tensor::from_op(name, x.shape().to_vec(), data, vec![x.clone()], backward)
}

/// Row-major matrix product `[M×K]·[K×N]`.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (&[m, k], &[k2, n]) = (a.shape(), b.shape()) else {
        return Err(shape_err!("matmul needs 2-D operands, got {:?} and {:?}", a.shape(), b.shape()));
    };
    if k != k2 {
        return Err(shape_err!("matmul inner dimensions differ: {:?} · {:?}", a.shape(), b.shape()));
    }
    let data = matmul_nn(a.data(), b.data(), m, k, n);
    let (ta, tb) = (a.clone(), b.clone());
    let backward = Box::new(move |g: &[f32], need: &[bool]| {
        // dA = dY·Bᵀ, dB = Aᵀ·dY
        let ga = need[0].then(|| matmul_nt(g, tb.data(), m, n, k));
        let gb = need[1].then(|| matmul_tn(ta.data(), g, k, m, n));
        vec![ga, gb]
    });
    Tensor::from_op("matmul", vec![m, n], data, vec![a.clone(), b.clone()], backward)
}

impl Tensor {
    pub fn elementwise(&self, op: Elementwise, other: Option<&Tensor>) -> Result<Tensor> {
        let need_other = || other.ok_or_else(|| shape_err!("{op:?} needs a second operand"));
        match op {
            Elementwise::Add => binary(self, need_other()?, BinOp::Add),
            Elementwise::Sub => binary(self, need_other()?, BinOp::Sub),
            Elementwise::Mul => binary(self, need_other()?, BinOp::Mul),
            Elementwise::Div => binary(self, need_other()?, BinOp::Div),
            Elementwise::Exp => unary(self, UnOp::Exp),
            Elementwise::Log => unary(self, UnOp::Log),
            Elementwise::Sigmoid => unary(self, UnOp::Sigmoid),
            Elementwise::Silu => unary(self, UnOp::Silu),
            Elementwise::Relu => unary(self, UnOp::Relu),
        }
    }

    pub fn add(&self, o: &Tensor) -> Result<Tensor> {
        binary(self, o, BinOp::Add)
    }
    pub fn sub(&self, o: &Tensor) -> Result<Tensor> {
        binary(self, o, BinOp::Sub)
    }
    pub fn mul(&self, o: &Tensor) -> Result<Tensor> {
        binary(self, o, BinOp::Mul)
    }
    pub fn div(&self, o: &Tensor) -> Result<Tensor> {
        binary(self, o, BinOp::Div)
    }
    pub fn minimum(&self, o: &Tensor) -> Result<Tensor> {
        binary(self, o, BinOp::Min)
    }
    pub fn maximum(&self, o: &Tensor) -> Result<Tensor> {
        binary(self, o, BinOp::Max)
    }
    pub fn exp(&self) -> Result<Tensor> {
        unary(self, UnOp::Exp)
    }
    pub fn log(&self) -> Result<Tensor> {
        unary(self, UnOp::Log)
    }
    pub fn sigmoid(&self) -> Result<Tensor> {
        unary(self, UnOp::Sigmoid)
    }
    pub fn silu(&self) -> Result<Tensor> {
        unary(self, UnOp::Silu)
    }
    pub fn relu(&self) -> Result<Tensor> {
        unary(self, UnOp::Relu)
    }
    /// `ln(1 + eˣ)`, strictly positive.
    pub fn softplus(&self) -> Result<Tensor> {
        unary(self, UnOp::Softplus)
    }
    pub fn abs(&self) -> Result<Tensor> {
        unary(self, UnOp::Abs)
    }
    pub fn neg(&self) -> Result<Tensor> {
        unary(self, UnOp::Neg)
    }
    pub fn scale(&self, c: f32) -> Result<Tensor> {
        unary(self, UnOp::Scale(c))
    }
    pub fn add_scalar(&self, c: f32) -> Result<Tensor> {
        unary(self, UnOp::Shift(c))
    }
    pub fn matmul(&self, o: &Tensor) -> Result<Tensor> {
        matmul(self, o)
    }

    /// Sum of all elements, shape `[1]`.
    pub fn sum(&self) -> Result<Tensor> {
        let s: f64 = self.data().iter().map(|&v| v as f64).sum();
        let n = self.numel();
        let backward = Box::new(move |g: &[f32], _: &[bool]| vec![Some(vec![g[0]; n])]);
        Tensor::from_op("sum", vec![1], vec![s as f32], vec![self.clone()], backward)
    }

    pub fn mean(&self) -> Result<Tensor> {
        let n = self.numel() as f32;
        self.sum()?.scale(1.0 / n)
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        if numel(shape) != self.numel() || shape.contains(&0) {
            return Err(shape_err!("cannot reshape {:?} to {shape:?}", self.shape()));
        }
        let backward = Box::new(|g: &[f32], _: &[bool]| vec![Some(g.to_vec())]);
        Tensor::from_op("reshape", shape.to_vec(), self.data().to_vec(), vec![self.clone()], backward)
    }

    /// Transpose of a 2-D tensor.
    pub fn transpose(&self) -> Result<Tensor> {
        let &[r, c] = self.shape() else {
            return Err(shape_err!("transpose needs 2-D input, got {:?}", self.shape()));
        };
        let data = super::kernels::transpose(self.data(), r, c);
        let backward = Box::new(move |g: &[f32], _: &[bool]| vec![Some(super::kernels::transpose(g, c, r))]);
        Tensor::from_op("transpose", vec![c, r], data, vec![self.clone()], backward)
    }

    /// Concatenate along the leading axis.
    pub fn concat(parts: &[Tensor]) -> Result<Tensor> {
        let first = parts.first().ok_or_else(|| shape_err!("concat of zero tensors"))?;
        let tail = &first.shape()[1..];
        let mut lead = 0;
        for p in parts {
            if &p.shape()[1..] != tail {
                return Err(shape_err!("concat trailing shapes differ: {:?} vs {:?}", first.shape(), p.shape()));
            }
            lead += p.shape()[0];
        }
        let mut shape = vec![lead];
        shape.extend_from_slice(tail);
        let mut data = Vec::with_capacity(numel(&shape));
        for p in parts {
            data.extend_from_slice(p.data());
        }
        let sizes: Vec<usize> = parts.iter().map(|p| p.numel()).collect();
        let backward = Box::new(move |g: &[f32], need: &[bool]| {
            let mut off = 0;
            sizes
                .iter()
                .zip(need)
                .map(|(&n, &nd)| {
                    let part = nd.then(|| g[off..off + n].to_vec());
                    off += n;
                    part
                })
                .collect()
        });
        Tensor::from_op("concat", shape, data, parts.to_vec(), backward)
    }

    /// Rows `start..end` along the leading axis.
    pub fn slice(&self, start: usize, end: usize) -> Result<Tensor> {
        let lead = self.shape()[0];
        if start >= end || end > lead {
            return Err(shape_err!("slice {start}..{end} out of range for {:?}", self.shape()));
        }
        let row = self.numel() / lead;
        let mut shape = self.shape().to_vec();
        shape[0] = end - start;
        let data = self.data()[start * row..end * row].to_vec();
        let total = self.numel();
        let backward = Box::new(move |g: &[f32], _: &[bool]| {
            let mut full = vec![0.0f32; total];
            full[start * row..end * row].copy_from_slice(g);
            vec![Some(full)]
        });
        Tensor::from_op("slice", shape, data, vec![self.clone()], backward)
    }

    /// Gather rows of the leading axis by index; indices may repeat.
    pub fn gather_rows(&self, idx: &[usize]) -> Result<Tensor> {
        let lead = self.shape()[0];
        if idx.is_empty() {
            return Err(shape_err!("gather_rows with no indices"));
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= lead) {
            return Err(shape_err!("gather index {bad} out of range for {:?}", self.shape()));
        }
        let row = self.numel() / lead;
        let mut shape = self.shape().to_vec();
        shape[0] = idx.len();
        let src = self.data();
        let mut data = Vec::with_capacity(idx.len() * row);
        for &i in idx {
            data.extend_from_slice(&src[i * row..(i + 1) * row]);
        }
        let idx = idx.to_vec();
        let total = self.numel();
        let backward = Box::new(move |g: &[f32], _: &[bool]| {
            let mut full = vec![0.0f32; total];
            for (k, &i) in idx.iter().enumerate() {
                for (d, s) in full[i * row..(i + 1) * row].iter_mut().zip(&g[k * row..(k + 1) * row]) {
                    *d += s;
                }
            }
            vec![Some(full)]
        });
        Tensor::from_op("gather_rows", shape, data, vec![self.clone()], backward)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: &[f32]) -> Tensor {
        Tensor::new(shape, v.to_vec()).unwrap()
    }

    #[test]
    fn add_and_activations() {
        let s = t(&[2], &[1.0, 2.0]).add(&t(&[2], &[3.0, 4.0])).unwrap();
        assert_eq!(s.data(), &[4.0, 6.0]);
        assert_eq!(t(&[1], &[0.0]).sigmoid().unwrap().data(), &[0.5]);
        let silu = t(&[1], &[1.0]).silu().unwrap().data()[0];
        assert!((silu - 0.731_058_6).abs() < 1e-6);
        let via_enum = t(&[1], &[1.0]).elementwise(Elementwise::Silu, None).unwrap();
        assert_eq!(via_enum.data()[0], silu);
    }

    #[test]
    fn division_by_zero_is_a_numerics_error() {
        let r = t(&[2], &[1.0, 1.0]).div(&t(&[2], &[1.0, 0.0]));
        assert!(matches!(r, Err(crate::Error::Numerics(_))));
    }

    #[test]
    fn block_access_agrees_with_index_map() {
        let cases: [(&[usize], &[usize]); 6] =
            [(&[3, 4, 5], &[3, 1, 1]), (&[3, 4, 5], &[1]), (&[3, 4, 5], &[5]), (&[3, 4, 5], &[4, 1]), (&[2, 3], &[2, 1]), (&[2, 3, 4], &[2, 3, 1])];
        for (out, src) in cases {
            let acc = Access::new(out, src);
            assert!(matches!(acc, Access::Block { .. }), "{src:?}");
            let n = numel(out);
            let data: Vec<f32> = (0..numel(src)).map(|v| v as f32).collect();
            let map = broadcast_map(out, src);
            let expect: Vec<f32> = map.iter().map(|&i| data[i]).collect();
            assert_eq!(&*acc.expand(&data, n), &expect[..]);
            let g: Vec<f32> = (0..n).map(|v| (v % 7) as f32).collect();
            let mut sums = vec![0.0f32; data.len()];
            map.iter().zip(&g).for_each(|(&i, &v)| sums[i] += v);
            assert_eq!(acc.reduce(g, data.len()), sums);
        }
        assert!(matches!(Access::new(&[2, 5, 3], &[2, 1, 3]), Access::Map(_)));
    }

    #[test]
    fn broadcast_rules() {
        assert_eq!(broadcast_shape(&[3, 4], &[4]).unwrap(), vec![3, 4]);
        assert_eq!(broadcast_shape(&[2, 1, 3], &[2, 5, 1]).unwrap(), vec![2, 5, 3]);
        assert!(broadcast_shape(&[3, 4], &[3]).is_err());
        assert!(t(&[2, 3], &[0.0; 6]).add(&t(&[2], &[0.0; 2])).is_err());
    }

    #[test]
    fn broadcast_add_backward_matches_tiling() {
        // [2,3] + [3]: gradient of the bias is the column sum of the upstream grad.
        let a = Tensor::param(&[2, 3], vec![0.0; 6]).unwrap();
        let b = Tensor::param(&[3], vec![1.0, 2.0, 3.0]).unwrap();
        let w = t(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        a.add(&b).unwrap().mul(&w).unwrap().sum().unwrap().backward().unwrap();
        // explicit tiling oracle
        let tiled = Tensor::param(&[2, 3], vec![1.0, 2.0, 3.0, 1.0, 2.0, 3.0]).unwrap();
        tiled.mul(&w).unwrap().sum().unwrap().backward().unwrap();
        let tg = tiled.grad().unwrap();
        let oracle: Vec<f32> = (0..3).map(|j| tg[j] + tg[3 + j]).collect();
        assert_eq!(b.grad().unwrap(), oracle);
        assert_eq!(a.grad().unwrap(), w.data());
    }

    #[test]
    fn matmul_examples() {
        let i2 = t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]);
        let m = t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(matmul(&i2, &m).unwrap().data(), m.data());
        let sel = matmul(&t(&[1, 2], &[1.0, 0.0]), &t(&[2, 1], &[2.0, 5.0])).unwrap();
        assert_eq!(sel.data(), &[2.0]);
        assert!(matmul(&t(&[1, 2], &[1.0, 0.0]), &t(&[3, 1], &[2.0, 5.0, 1.0])).is_err());
    }

    #[test]
    fn concat_slice_gather() {
        let a = t(&[1, 2], &[1.0, 2.0]);
        let b = t(&[2, 2], &[3.0, 4.0, 5.0, 6.0]);
        let c = Tensor::concat(&[a, b]).unwrap();
        assert_eq!(c.shape(), &[3, 2]);
        assert_eq!(c.slice(1, 3).unwrap().data(), &[3.0, 4.0, 5.0, 6.0]);
        assert_eq!(c.gather_rows(&[2, 0]).unwrap().data(), &[5.0, 6.0, 1.0, 2.0]);
        assert!(c.slice(2, 4).is_err());
    }

    #[test]
    fn relu_and_silu_subgradient_at_zero() {
        let x = Tensor::param(&[1], vec![0.0]).unwrap();
        x.relu().unwrap().sum().unwrap().backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![0.0]);
        let y = Tensor::param(&[1], vec![0.0]).unwrap();
        y.silu().unwrap().sum().unwrap().backward().unwrap();
        assert_eq!(y.grad().unwrap(), vec![0.5]);
    }
}
