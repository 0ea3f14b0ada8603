//! Matrix-level reverse-mode differentiation.
//!
//! A [`Graph`] records every operation of one forward pass together with
//! the values its backward rule needs. Attention, layer norm and the
//! cross-entropy are single fused nodes.

use alloc::vec::Vec;

use crate::layout::MaskKind;
use crate::tensor::{dot, Mat};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub usize);

/// Which keys each query may attend, per head.
#[derive(Debug, Clone, PartialEq)]
pub struct AttnMask {
    pub kinds: Vec<MaskKind>,
    pub key_keep: Vec<bool>,
}

impl AttnMask {
    #[inline]
    pub fn allows(&self, h: usize, i: usize, j: usize) -> bool {
        self.key_keep[j] && self.kinds[h].allows(i, j)
    }
}

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Param(usize),
    MatMul(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    Gelu(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Mat,
        rstd: Vec<f64>,
    },
    Embed {
        table: Var,
        ids: Vec<Option<usize>>,
    },
    Rope {
        x: Var,
        angles: Vec<Vec<(f64, f64)>>,
        n_heads: usize,
        head_dim: usize,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        n_heads: usize,
        scale: f64,
        probs: Vec<Mat>,
    },
    SliceRows {
        x: Var,
        start: usize,
    },
    ConcatRows(Vec<Var>),
    CrossEntropySum {
        logits: Var,
        targets: Vec<Option<usize>>,
        probs: Mat,
    },
    PickSum {
        x: Var,
        targets: Vec<Option<usize>>,
    },
    SumScalars(Vec<Var>),
}

struct Node {
    value: Mat,
    op: Op,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

fn rope_rotate(row: &mut [f64], angles: &[(f64, f64)], n_heads: usize, head_dim: usize, inverse: bool) {
    for h in 0..n_heads {
        let base = h * head_dim;
        for (t, &(c, s)) in angles.iter().enumerate() {
            let s = if inverse { -s } else { s };
            let (a, b) = (row[base + 2 * t], row[base + 2 * t + 1]);
            row[base + 2 * t] = a * c - b * s;
            row[base + 2 * t + 1] = a * s + b * c;
        }
    }
}

/// Cos/sin pairs for `rot_dims / 2` frequencies at each position.
pub fn rope_angles(positions: &[usize], rot_dims: usize, base: f64) -> Vec<Vec<(f64, f64)>> {
    let half = rot_dims / 2;
    let freqs: Vec<f64> = (0..half)
        .map(|t| libm::pow(base, -(2.0 * t as f64) / rot_dims as f64))
        .collect();
    positions
        .iter()
        .map(|&p| {
            freqs
                .iter()
                .map(|f| {
                    let a = p as f64 * f;
                    (libm::cos(a), libm::sin(a))
                })
                .collect()
        })
        .collect()
}

fn gelu(x: f64) -> f64 {
    let t = libm::tanh(GELU_C * (x + 0.044715 * x * x * x));
    0.5 * x * (1.0 + t)
}

fn gelu_grad(x: f64) -> f64 {
    let t = libm::tanh(GELU_C * (x + 0.044715 * x * x * x));
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, value: Mat, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Mat {
        &self.nodes[v.0].value
    }

    /// Attention probabilities per head, if `v` is an attention node.
    pub fn attention_probs(&self, v: Var) -> Option<&[Mat]> {
        match &self.nodes[v.0].op {
            Op::Attention { probs, .. } => Some(probs),
            _ => None,
        }
    }

    pub fn constant(&mut self, m: Mat) -> Var {
        self.push(m, Op::Leaf)
    }

    pub fn param(&mut self, id: usize, value: &Mat) -> Var {
        self.push(value.clone(), Op::Param(id))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).matmul(self.value(b));
        self.push(v, Op::MatMul(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let mut v = self.value(a).clone();
        assert!(v.same_shape(self.value(b)), "add shape mismatch");
        v.add_assign(self.value(b));
        self.push(v, Op::Add(a, b))
    }

    /// Adds the 1×m row `b` to every row of `a`.
    pub fn add_row(&mut self, a: Var, b: Var) -> Var {
        let bias = self.value(b);
        assert_eq!(bias.rows, 1);
        let mut v = self.value(a).clone();
        assert_eq!(v.cols, bias.cols, "bias width");
        for r in 0..v.rows {
            for (x, y) in v.row_mut(r).iter_mut().zip(&bias.data) {
                *x += y;
            }
        }
        self.push(v, Op::AddRow(a, b))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let v = self.value(a).scaled(s);
        self.push(v, Op::Scale(a, s))
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let v = Mat::from_vec(x.rows, x.cols, x.data.iter().map(|&z| gelu(z)).collect());
        self.push(v, Op::Gelu(a))
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let xv = self.value(x);
        let (n, d) = (xv.rows, xv.cols);
        let g = &self.value(gamma).data;
        let b = &self.value(beta).data;
        let mut xhat = Mat::zeros(n, d);
        let mut out = Mat::zeros(n, d);
        let mut rstd = Vec::with_capacity(n);
        for r in 0..n {
            let row = xv.row(r);
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|z| (z - mean) * (z - mean)).sum::<f64>() / d as f64;
            let rs = 1.0 / libm::sqrt(var + LN_EPS);
            rstd.push(rs);
            for c in 0..d {
                let h = (row[c] - mean) * rs;
                xhat.data[r * d + c] = h;
                out.data[r * d + c] = h * g[c] + b[c];
            }
        }
        self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
        )
    }

    /// Gathers rows of `table`; `None` yields a zero row with no gradient.
    pub fn embed(&mut self, table: Var, ids: Vec<Option<usize>>) -> Var {
        let t = self.value(table);
        let mut out = Mat::zeros(ids.len(), t.cols);
        for (r, id) in ids.iter().enumerate() {
            if let Some(i) = *id {
                out.row_mut(r).copy_from_slice(t.row(i));
            }
        }
        self.push(out, Op::Embed { table, ids })
    }

    /// Rotates the leading `2·angles[r].len()` dims of every head of row `r`.
    pub fn rope(&mut self, x: Var, angles: Vec<Vec<(f64, f64)>>, n_heads: usize) -> Var {
        let mut v = self.value(x).clone();
        assert_eq!(angles.len(), v.rows, "one angle set per row");
        let head_dim = v.cols / n_heads;
        for (r, a) in angles.iter().enumerate() {
            rope_rotate(v.row_mut(r), a, n_heads, head_dim, false);
        }
        self.push(
            v,
            Op::Rope {
                x,
                angles,
                n_heads,
                head_dim,
            },
        )
    }

    /// Multi-head scaled dot-product attention. Rows with no admissible key
    /// output zeros.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, n_heads: usize, mask: &AttnMask) -> Var {
        let (qm, km, vm) = (self.value(q), self.value(k), self.value(v));
        let (nq, nk, d) = (qm.rows, km.rows, qm.cols);
        assert_eq!(km.cols, d);
        assert_eq!(vm.rows, nk);
        assert_eq!(mask.kinds.len(), n_heads);
        assert_eq!(mask.key_keep.len(), nk);
        let hd = d / n_heads;
        let scale = 1.0 / libm::sqrt(hd as f64);
        let mut out = Mat::zeros(nq, d);
        let mut probs = Vec::with_capacity(n_heads);
        let mut scores = alloc::vec![0.0f64; nk];
        for h in 0..n_heads {
            let off = h * hd;
            let mut p = Mat::zeros(nq, nk);
            for i in 0..nq {
                let qi = &qm.row(i)[off..off + hd];
                let mut mx = f64::NEG_INFINITY;
                for j in 0..nk {
                    if mask.allows(h, i, j) {
                        let s = dot(qi, &km.row(j)[off..off + hd]) * scale;
                        scores[j] = s;
                        if s > mx {
                            mx = s;
                        }
                    }
                }
                if mx == f64::NEG_INFINITY {
                    continue;
                }
                let mut z = 0.0;
                let prow = p.row_mut(i);
                for j in 0..nk {
                    if mask.allows(h, i, j) {
                        let e = libm::exp(scores[j] - mx);
                        prow[j] = e;
                        z += e;
                    }
                }
                for x in prow.iter_mut() {
                    *x /= z;
                }
                let orow = &mut out.data[i * d + off..i * d + off + hd];
                for j in 0..nk {
                    let pij = prow[j];
                    if pij != 0.0 {
                        for (o, vv) in orow.iter_mut().zip(&vm.row(j)[off..off + hd]) {
                            *o += pij * vv;
                        }
                    }
                }
            }
            probs.push(p);
        }
        self.push(
            out,
            Op::Attention {
                q,
                k,
                v,
                n_heads,
                scale,
                probs,
            },
        )
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Var {
        let xv = self.value(x);
        let d = xv.cols;
        let v = Mat::from_vec(len, d, xv.data[start * d..(start + len) * d].to_vec());
        self.push(v, Op::SliceRows { x, start })
    }

    pub fn concat_rows(&mut self, parts: Vec<Var>) -> Var {
        let d = self.value(parts[0]).cols;
        let mut data = Vec::new();
        let mut rows = 0;
        for p in &parts {
            let m = self.value(*p);
            assert_eq!(m.cols, d, "concat width");
            data.extend_from_slice(&m.data);
            rows += m.rows;
        }
        self.push(Mat::from_vec(rows, d, data), Op::ConcatRows(parts))
    }

    /// Sum over rows with a target of `logsumexp(row) − row[target]`.
    pub fn cross_entropy_sum(&mut self, logits: Var, targets: Vec<Option<usize>>) -> Var {
        let l = self.value(logits);
        assert_eq!(targets.len(), l.rows);
        let mut probs = Mat::zeros(l.rows, l.cols);
        let mut total = 0.0;
        for (r, t) in targets.iter().enumerate() {
            let row = l.row(r);
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|x| libm::exp(x - mx)).sum();
            let lse = mx + libm::log(z);
            for (p, x) in probs.row_mut(r).iter_mut().zip(row) {
                *p = libm::exp(x - lse);
            }
            if let Some(t) = *t {
                total += lse - row[t];
            }
        }
        self.push(Mat::filled(1, 1, total), Op::CrossEntropySum { logits, targets, probs })
    }

    /// Sum over rows with a target of `row[target]`; linear in `x`.
    pub fn pick_sum(&mut self, x: Var, targets: Vec<Option<usize>>) -> Var {
        let m = self.value(x);
        let total = targets
            .iter()
            .enumerate()
            .filter_map(|(r, t)| t.map(|t| m.get(r, t)))
            .sum();
        self.push(Mat::filled(1, 1, total), Op::PickSum { x, targets })
    }

    pub fn sum_scalars(&mut self, xs: Vec<Var>) -> Var {
        let total = xs.iter().map(|v| self.value(*v).data[0]).sum();
        self.push(Mat::filled(1, 1, total), Op::SumScalars(xs))
    }

    /// Back-propagates from the scalar `root`; returns gradients indexed by
    /// parameter id (`None` for parameters not in the graph).
    pub fn backward(&self, root: Var, n_params: usize) -> Vec<Option<Mat>> {
        let mut grads: Vec<Option<Mat>> = alloc::vec![None; self.nodes.len()];
        grads[root.0] = Some(Mat::filled(1, 1, 1.0));
        let mut out: Vec<Option<Mat>> = alloc::vec![None; n_params];
        fn acc(grads: &mut [Option<Mat>], v: Var, g: Mat) {
            match &mut grads[v.0] {
                Some(e) => e.add_assign(&g),
                slot => *slot = Some(g),
            }
        }
        for idx in (0..=root.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Leaf => {}
                Op::Param(id) => match &mut out[*id] {
                    Some(e) => e.add_assign(&g),
                    slot => *slot = Some(g),
                },
                Op::MatMul(a, b) => {
                    let ga = g.matmul_bt(self.value(*b));
                    let gb = self.value(*a).matmul_at(&g);
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *b, gb);
                }
                Op::Add(a, b) => {
                    acc(&mut grads, *b, g.clone());
                    acc(&mut grads, *a, g);
                }
                Op::AddRow(a, b) => {
                    let mut gb = Mat::zeros(1, g.cols);
                    for r in 0..g.rows {
                        for (x, y) in gb.data.iter_mut().zip(g.row(r)) {
                            *x += y;
                        }
                    }
                    acc(&mut grads, *b, gb);
                    acc(&mut grads, *a, g);
                }
                Op::Scale(a, s) => acc(&mut grads, *a, g.scaled(*s)),
                Op::Gelu(a) => {
                    let x = self.value(*a);
                    let ga = Mat::from_vec(
                        g.rows,
                        g.cols,
                        g.data.iter().zip(&x.data).map(|(gg, xx)| gg * gelu_grad(*xx)).collect(),
                    );
                    acc(&mut grads, *a, ga);
                }
                Op::LayerNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    rstd,
                } => {
                    let (n, d) = (g.rows, g.cols);
                    let gam = &self.value(*gamma).data;
                    let mut gg = Mat::zeros(1, d);
                    let mut gb = Mat::zeros(1, d);
                    let mut gx = Mat::zeros(n, d);
                    for r in 0..n {
                        let gr = g.row(r);
                        let hr = xhat.row(r);
                        let mut m1 = 0.0;
                        let mut m2 = 0.0;
                        for c in 0..d {
                            gg.data[c] += gr[c] * hr[c];
                            gb.data[c] += gr[c];
                            let dh = gr[c] * gam[c];
                            m1 += dh;
                            m2 += dh * hr[c];
                        }
                        m1 /= d as f64;
                        m2 /= d as f64;
                        let out = gx.row_mut(r);
                        for c in 0..d {
                            let dh = gr[c] * gam[c];
                            out[c] = rstd[r] * (dh - m1 - hr[c] * m2);
                        }
                    }
                    acc(&mut grads, *gamma, gg);
                    acc(&mut grads, *beta, gb);
                    acc(&mut grads, *x, gx);
                }
                Op::Embed { table, ids } => {
                    let t = self.value(*table);
                    let mut gt = Mat::zeros(t.rows, t.cols);
                    for (r, id) in ids.iter().enumerate() {
                        if let Some(i) = *id {
                            for (x, y) in gt.row_mut(i).iter_mut().zip(g.row(r)) {
                                *x += y;
                            }
                        }
                    }
                    acc(&mut grads, *table, gt);
                }
                Op::Rope {
                    x,
                    angles,
                    n_heads,
                    head_dim,
                } => {
                    let mut gx = g;
                    for (r, a) in angles.iter().enumerate() {
                        rope_rotate(gx.row_mut(r), a, *n_heads, *head_dim, true);
                    }
                    acc(&mut grads, *x, gx);
                }
                Op::Attention {
                    q,
                    k,
                    v,
                    n_heads,
                    scale,
                    probs,
                } => {
                    let (qm, km, vm) = (self.value(*q), self.value(*k), self.value(*v));
                    let (nq, nk, d) = (qm.rows, km.rows, qm.cols);
                    let hd = d / n_heads;
                    let mut gq = Mat::zeros(nq, d);
                    let mut gk = Mat::zeros(nk, d);
                    let mut gv = Mat::zeros(nk, d);
                    let mut dp = alloc::vec![0.0f64; nk];
                    for (h, p) in probs.iter().enumerate() {
                        let off = h * hd;
                        for i in 0..nq {
                            let go = &g.row(i)[off..off + hd];
                            let prow = p.row(i);
                            let mut s = 0.0;
                            for j in 0..nk {
                                if prow[j] != 0.0 {
                                    dp[j] = dot(go, &vm.row(j)[off..off + hd]);
                                    s += dp[j] * prow[j];
                                    let gvr = &mut gv.data[j * d + off..j * d + off + hd];
                                    for (x, y) in gvr.iter_mut().zip(go) {
                                        *x += prow[j] * y;
                                    }
                                }
                            }
                            for j in 0..nk {
                                let pij = prow[j];
                                if pij == 0.0 {
                                    continue;
                                }
                                let ds = pij * (dp[j] - s) * scale;
                                let kj = &km.row(j)[off..off + hd];
                                let qi = &qm.row(i)[off..off + hd];
                                let gqr = &mut gq.data[i * d + off..i * d + off + hd];
                                for (x, y) in gqr.iter_mut().zip(kj) {
                                    *x += ds * y;
                                }
                                let gkr = &mut gk.data[j * d + off..j * d + off + hd];
                                for (x, y) in gkr.iter_mut().zip(qi) {
                                    *x += ds * y;
                                }
                            }
                        }
                    }
                    acc(&mut grads, *q, gq);
                    acc(&mut grads, *k, gk);
                    acc(&mut grads, *v, gv);
                }
                Op::SliceRows { x, start } => {
                    let xv = self.value(*x);
                    let mut gx = Mat::zeros(xv.rows, xv.cols);
                    let d = xv.cols;
                    gx.data[start * d..start * d + g.data.len()].copy_from_slice(&g.data);
                    acc(&mut grads, *x, gx);
                }
                Op::ConcatRows(parts) => {
                    let mut off = 0;
                    for p in parts {
                        let n = self.value(*p).len();
                        let m = self.value(*p);
                        acc(&mut grads, *p, Mat::from_vec(m.rows, m.cols, g.data[off..off + n].to_vec()));
                        off += n;
                    }
                }
                Op::CrossEntropySum { logits, targets, probs } => {
                    let s = g.data[0];
                    let mut gl = Mat::zeros(probs.rows, probs.cols);
                    for (r, t) in targets.iter().enumerate() {
                        if let Some(t) = *t {
                            for (x, p) in gl.row_mut(r).iter_mut().zip(probs.row(r)) {
                                *x = s * p;
                            }
                            gl.data[r * probs.cols + t] -= s;
                        }
                    }
                    acc(&mut grads, *logits, gl);
                }
                Op::PickSum { x, targets } => {
                    let s = g.data[0];
                    let xv = self.value(*x);
                    let mut gx = Mat::zeros(xv.rows, xv.cols);
                    for (r, t) in targets.iter().enumerate() {
                        if let Some(t) = *t {
                            gx.set(r, t, s);
                        }
                    }
                    acc(&mut grads, *x, gx);
                }
                Op::SumScalars(xs) => {
                    for x in xs {
                        acc(&mut grads, *x, g.clone());
                    }
                }
            }
        }
        out
    }
}
