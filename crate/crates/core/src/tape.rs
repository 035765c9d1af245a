//! Reverse-mode automatic differentiation over small dense vectors.
//!
//! A [`Tape`] records a forward pass as a Wengert list of vector-valued
//! nodes. Values are computed eagerly; [`Tape::backward`] walks the list
//! in reverse and accumulates gradients for every node flagged as a
//! parameter slot. Shapes are plain `Vec<T>`; matrices appear only as
//! leaves consumed by [`Tape::matvec`] and [`Tape::row`].
//!
//! The op set is exactly what the navigation network needs: affine maps,
//! elementwise arithmetic, tanh, masked softmax, attention-style stacked
//! dots and weighted sums. Each op's backward rule is covered by the
//! finite-difference checks in the training tests.

use crate::scalar::Scalar;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct Var(usize);

enum Op<T> {
    Leaf { slot: Option<usize> },
    MatVec { w: Var, x: Var, rows: usize, cols: usize },
    Row { table: Var, row: usize, cols: usize },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { a: Var, c: T },
    AddN { items: Vec<Var> },
    MeanN { items: Vec<Var> },
    Tanh { a: Var },
    Ln { a: Var },
    Concat { a: Var, b: Var },
    Slice { a: Var, start: usize, len: usize },
    Dot { a: Var, b: Var },
    Stack { items: Vec<Var> },
    Index { a: Var, i: usize },
    SumElems { a: Var },
    SoftmaxMasked { scores: Var, mask: Vec<bool> },
    WeightedSum { weights: Var, items: Vec<Var> },
}

struct Node<T> {
    value: Vec<T>,
    op: Op<T>,
}

pub struct Tape<T: Scalar> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &[T] {
        &self.nodes[v.0].value
    }

    /// Scalar value of a length-1 node.
    pub fn scalar(&self, v: Var) -> T {
        debug_assert_eq!(self.nodes[v.0].value.len(), 1);
        self.nodes[v.0].value[0]
    }

    fn push(&mut self, value: Vec<T>, op: Op<T>) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    /// Constant input (no gradient tracked beyond flow-through).
    pub fn leaf(&mut self, value: Vec<T>) -> Var {
        self.push(value, Op::Leaf { slot: None })
    }

    /// Parameter input; gradients are reported under `slot` by `backward`.
    pub fn param(&mut self, value: Vec<T>, slot: usize) -> Var {
        self.push(value, Op::Leaf { slot: Some(slot) })
    }

    /// y = W x with W a row-major `rows`×`cols` node.
    pub fn matvec(&mut self, w: Var, x: Var, rows: usize, cols: usize) -> Var {
        debug_assert_eq!(self.nodes[w.0].value.len(), rows * cols);
        debug_assert_eq!(self.nodes[x.0].value.len(), cols);
        let mut out = vec![T::zero(); rows];
        for r in 0..rows {
            let mut acc = T::zero();
            let wrow = &self.nodes[w.0].value[r * cols..(r + 1) * cols];
            let xv = &self.nodes[x.0].value;
            for c in 0..cols {
                acc += wrow[c] * xv[c];
            }
            out[r] = acc;
        }
        self.push(out, Op::MatVec { w, x, rows, cols })
    }

    /// Row lookup from a row-major matrix node (embedding fetch).
    pub fn row(&mut self, table: Var, row: usize, cols: usize) -> Var {
        let value = self.nodes[table.0].value[row * cols..(row + 1) * cols].to_vec();
        self.push(value, Op::Row { table, row, cols })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = self.zip(a, b, |x, y| x + y);
        self.push(value, Op::Add { a, b })
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let value = self.zip(a, b, |x, y| x - y);
        self.push(value, Op::Sub { a, b })
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let value = self.zip(a, b, |x, y| x * y);
        self.push(value, Op::Mul { a, b })
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        let value: Vec<T> = self.nodes[a.0].value.iter().map(|&x| x * c).collect();
        self.push(value, Op::Scale { a, c })
    }

    /// Elementwise sum of same-length nodes.
    pub fn add_n(&mut self, items: Vec<Var>) -> Var {
        assert!(!items.is_empty(), "add_n over empty list");
        let len = self.nodes[items[0].0].value.len();
        let mut value = vec![T::zero(); len];
        for &v in &items {
            debug_assert_eq!(self.nodes[v.0].value.len(), len);
            for (o, &x) in value.iter_mut().zip(&self.nodes[v.0].value) {
                *o += x;
            }
        }
        self.push(value, Op::AddN { items })
    }

    /// Elementwise arithmetic mean of same-length nodes.
    pub fn mean_n(&mut self, items: Vec<Var>) -> Var {
        assert!(!items.is_empty(), "mean_n over empty list");
        let n = T::from_f64_lossy(items.len() as f64);
        let len = self.nodes[items[0].0].value.len();
        let mut value = vec![T::zero(); len];
        for &v in &items {
            for (o, &x) in value.iter_mut().zip(&self.nodes[v.0].value) {
                *o += x;
            }
        }
        for o in value.iter_mut() {
            *o /= n;
        }
        self.push(value, Op::MeanN { items })
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let value: Vec<T> = self.nodes[a.0].value.iter().map(|x| x.tanh()).collect();
        self.push(value, Op::Tanh { a })
    }

    pub fn ln(&mut self, a: Var) -> Var {
        let value: Vec<T> = self.nodes[a.0].value.iter().map(|x| x.ln()).collect();
        self.push(value, Op::Ln { a })
    }

    pub fn concat(&mut self, a: Var, b: Var) -> Var {
        let mut value = self.nodes[a.0].value.clone();
        value.extend_from_slice(&self.nodes[b.0].value);
        self.push(value, Op::Concat { a, b })
    }

    pub fn slice(&mut self, a: Var, start: usize, len: usize) -> Var {
        let value = self.nodes[a.0].value[start..start + len].to_vec();
        self.push(value, Op::Slice { a, start, len })
    }

    pub fn dot(&mut self, a: Var, b: Var) -> Var {
        let av = &self.nodes[a.0].value;
        let bv = &self.nodes[b.0].value;
        debug_assert_eq!(av.len(), bv.len());
        let mut acc = T::zero();
        for (x, y) in av.iter().zip(bv) {
            acc += *x * *y;
        }
        self.push(vec![acc], Op::Dot { a, b })
    }

    /// Stack scalar nodes into one vector node.
    pub fn stack(&mut self, items: Vec<Var>) -> Var {
        let value: Vec<T> = items.iter().map(|&v| self.scalar(v)).collect();
        self.push(value, Op::Stack { items })
    }

    /// Pick element `i` as a scalar node.
    pub fn index(&mut self, a: Var, i: usize) -> Var {
        let value = vec![self.nodes[a.0].value[i]];
        self.push(value, Op::Index { a, i })
    }

    pub fn sum_elems(&mut self, a: Var) -> Var {
        let mut acc = T::zero();
        for &x in &self.nodes[a.0].value {
            acc += x;
        }
        self.push(vec![acc], Op::SumElems { a })
    }

    /// Masked softmax. Masked positions get probability exactly zero and
    /// receive no gradient. At least one position must be unmasked.
    pub fn softmax_masked(&mut self, scores: Var, mask: Vec<bool>) -> Var {
        let sv = &self.nodes[scores.0].value;
        debug_assert_eq!(sv.len(), mask.len());
        assert!(mask.iter().any(|&m| m), "softmax with all positions masked");
        let mut mx = T::neg_infinity();
        for (s, &ok) in sv.iter().zip(&mask) {
            if ok && *s > mx {
                mx = *s;
            }
        }
        let mut exps = vec![T::zero(); sv.len()];
        let mut denom = T::zero();
        for (i, (s, &ok)) in sv.iter().zip(&mask).enumerate() {
            if ok {
                let e = (*s - mx).exp();
                exps[i] = e;
                denom += e;
            }
        }
        let value: Vec<T> = exps.iter().map(|&e| e / denom).collect();
        self.push(value, Op::SoftmaxMasked { scores, mask })
    }

    /// Σᵢ wᵢ·itemᵢ with scalar weights taken from one vector node.
    pub fn weighted_sum(&mut self, weights: Var, items: Vec<Var>) -> Var {
        let wv = self.nodes[weights.0].value.clone();
        debug_assert_eq!(wv.len(), items.len());
        assert!(!items.is_empty(), "weighted_sum over empty list");
        let len = self.nodes[items[0].0].value.len();
        let mut value = vec![T::zero(); len];
        for (&w, &it) in wv.iter().zip(&items) {
            for (o, &x) in value.iter_mut().zip(&self.nodes[it.0].value) {
                *o += w * x;
            }
        }
        self.push(value, Op::WeightedSum { weights, items })
    }

    fn zip(&self, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Vec<T> {
        let av = &self.nodes[a.0].value;
        let bv = &self.nodes[b.0].value;
        debug_assert_eq!(av.len(), bv.len(), "shape mismatch in elementwise op");
        av.iter().zip(bv).map(|(&x, &y)| f(x, y)).collect()
    }

    /// Reverse pass from a scalar `loss`. Returns one gradient vector per
    /// parameter slot in `slot_lens` order; slots never touched by the
    /// forward pass come back as zeros.
    pub fn backward(&self, loss: Var, slot_lens: &[usize]) -> Vec<Vec<T>> {
        assert_eq!(self.nodes[loss.0].value.len(), 1, "loss must be scalar");
        let mut grads: Vec<Option<Vec<T>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![T::one()]);

        for idx in (0..=loss.0).rev() {
            let g = match grads[idx].take() {
                Some(g) => g,
                None => continue,
            };
            match &self.nodes[idx].op {
                Op::Leaf { .. } => {
                    grads[idx] = Some(g);
                }
                Op::MatVec { w, x, rows, cols } => {
                    let xv = self.nodes[x.0].value.clone();
                    let wv = self.nodes[w.0].value.clone();
                    {
                        let gw = Self::grad_mut(&mut grads, *w, rows * cols);
                        for r in 0..*rows {
                            for c in 0..*cols {
                                gw[r * cols + c] += g[r] * xv[c];
                            }
                        }
                    }
                    let gx = Self::grad_mut(&mut grads, *x, *cols);
                    for c in 0..*cols {
                        let mut acc = T::zero();
                        for r in 0..*rows {
                            acc += wv[r * cols + c] * g[r];
                        }
                        gx[c] += acc;
                    }
                }
                Op::Row { table, row, cols } => {
                    let total = self.nodes[table.0].value.len();
                    let gt = Self::grad_mut(&mut grads, *table, total);
                    for c in 0..*cols {
                        gt[row * cols + c] += g[c];
                    }
                }
                Op::Add { a, b } => {
                    Self::accumulate(&mut grads, *a, &g);
                    Self::accumulate(&mut grads, *b, &g);
                }
                Op::Sub { a, b } => {
                    Self::accumulate(&mut grads, *a, &g);
                    let neg: Vec<T> = g.iter().map(|&x| -x).collect();
                    Self::accumulate(&mut grads, *b, &neg);
                }
                Op::Mul { a, b } => {
                    let bv = self.nodes[b.0].value.clone();
                    let av = self.nodes[a.0].value.clone();
                    let ga: Vec<T> = g.iter().zip(&bv).map(|(&gi, &y)| gi * y).collect();
                    let gb: Vec<T> = g.iter().zip(&av).map(|(&gi, &x)| gi * x).collect();
                    Self::accumulate(&mut grads, *a, &ga);
                    Self::accumulate(&mut grads, *b, &gb);
                }
                Op::Scale { a, c } => {
                    let ga: Vec<T> = g.iter().map(|&x| x * *c).collect();
                    Self::accumulate(&mut grads, *a, &ga);
                }
                Op::AddN { items } => {
                    for &it in items {
                        Self::accumulate(&mut grads, it, &g);
                    }
                }
                Op::MeanN { items } => {
                    let inv = T::one() / T::from_f64_lossy(items.len() as f64);
                    let gi: Vec<T> = g.iter().map(|&x| x * inv).collect();
                    for &it in items {
                        Self::accumulate(&mut grads, it, &gi);
                    }
                }
                Op::Tanh { a } => {
                    let y = &self.nodes[idx].value;
                    let ga: Vec<T> = g
                        .iter()
                        .zip(y)
                        .map(|(&gi, &yi)| gi * (T::one() - yi * yi))
                        .collect();
                    Self::accumulate(&mut grads, *a, &ga);
                }
                Op::Ln { a } => {
                    let xv = &self.nodes[a.0].value;
                    let ga: Vec<T> = g.iter().zip(xv).map(|(&gi, &xi)| gi / xi).collect();
                    Self::accumulate(&mut grads, *a, &ga);
                }
                Op::Concat { a, b } => {
                    let la = self.nodes[a.0].value.len();
                    Self::accumulate(&mut grads, *a, &g[..la]);
                    Self::accumulate(&mut grads, *b, &g[la..]);
                }
                Op::Slice { a, start, len } => {
                    let total = self.nodes[a.0].value.len();
                    let ga = Self::grad_mut(&mut grads, *a, total);
                    for i in 0..*len {
                        ga[start + i] += g[i];
                    }
                }
                Op::Dot { a, b } => {
                    let av = self.nodes[a.0].value.clone();
                    let bv = self.nodes[b.0].value.clone();
                    let ga: Vec<T> = bv.iter().map(|&y| g[0] * y).collect();
                    let gb: Vec<T> = av.iter().map(|&x| g[0] * x).collect();
                    Self::accumulate(&mut grads, *a, &ga);
                    Self::accumulate(&mut grads, *b, &gb);
                }
                Op::Stack { items } => {
                    for (i, &it) in items.iter().enumerate() {
                        Self::accumulate(&mut grads, it, &[g[i]]);
                    }
                }
                Op::Index { a, i } => {
                    let total = self.nodes[a.0].value.len();
                    let ga = Self::grad_mut(&mut grads, *a, total);
                    ga[*i] += g[0];
                }
                Op::SumElems { a } => {
                    let total = self.nodes[a.0].value.len();
                    let ga: Vec<T> = vec![g[0]; total];
                    Self::accumulate(&mut grads, *a, &ga);
                }
                Op::SoftmaxMasked { scores, mask } => {
                    let p = &self.nodes[idx].value;
                    let mut gp = T::zero();
                    for (i, &pi) in p.iter().enumerate() {
                        gp += g[i] * pi;
                    }
                    let gs: Vec<T> = p
                        .iter()
                        .zip(mask)
                        .enumerate()
                        .map(|(i, (&pi, &ok))| if ok { pi * (g[i] - gp) } else { T::zero() })
                        .collect();
                    Self::accumulate(&mut grads, *scores, &gs);
                }
                Op::WeightedSum { weights, items } => {
                    let wv = self.nodes[weights.0].value.clone();
                    let mut gw = vec![T::zero(); wv.len()];
                    for (i, &it) in items.iter().enumerate() {
                        let iv = &self.nodes[it.0].value;
                        let mut acc = T::zero();
                        for (gi, &xi) in g.iter().zip(iv) {
                            acc += *gi * xi;
                        }
                        gw[i] = acc;
                        let gitem: Vec<T> = g.iter().map(|&gi| gi * wv[i]).collect();
                        Self::accumulate(&mut grads, it, &gitem);
                    }
                    Self::accumulate(&mut grads, *weights, &gw);
                }
            }
        }

        let mut out: Vec<Vec<T>> = slot_lens.iter().map(|&l| vec![T::zero(); l]).collect();
        for (idx, node) in self.nodes.iter().enumerate() {
            if let Op::Leaf { slot: Some(s) } = node.op {
                if let Some(g) = &grads[idx] {
                    debug_assert_eq!(g.len(), slot_lens[s]);
                    for (o, &x) in out[s].iter_mut().zip(g) {
                        *o += x;
                    }
                }
            }
        }
        out
    }

    fn grad_mut(grads: &mut [Option<Vec<T>>], v: Var, len: usize) -> &mut Vec<T> {
        grads[v.0].get_or_insert_with(|| vec![T::zero(); len])
    }

    fn accumulate(grads: &mut [Option<Vec<T>>], v: Var, g: &[T]) {
        let slot = grads[v.0].get_or_insert_with(|| vec![T::zero(); g.len()]);
        for (o, &x) in slot.iter_mut().zip(g) {
            *o += x;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Central-difference check of d(loss)/d(input[i]) for a scalar-loss builder.
    fn fd_check(build: impl Fn(&mut Tape<f64>, Var) -> Var, x0: Vec<f64>, tol: f64) {
        let n = x0.len();
        let mut tape = Tape::new();
        let x = tape.param(x0.clone(), 0);
        let loss = build(&mut tape, x);
        let analytic = tape.backward(loss, &[n]);

        let eps = 1e-6;
        for i in 0..n {
            let eval = |xi: f64| {
                let mut p = x0.clone();
                p[i] = xi;
                let mut t = Tape::new();
                let v = t.param(p, 0);
                let l = build(&mut t, v);
                t.scalar(l)
            };
            let fd = (eval(x0[i] + eps) - eval(x0[i] - eps)) / (2.0 * eps);
            let a = analytic[0][i];
            let denom = fd.abs().max(a.abs()).max(1e-8);
            assert!(
                (fd - a).abs() / denom < tol,
                "grad mismatch at {i}: fd={fd} analytic={a}"
            );
        }
    }

    #[test]
    fn square_gradient_at_three() {
        let mut tape: Tape<f64> = Tape::new();
        let x = tape.param(vec![3.0], 0);
        let y = tape.mul(x, x);
        let grads = tape.backward(y, &[1]);
        assert_eq!(grads[0], vec![6.0]);
    }

    #[test]
    fn matvec_values_and_gradients() {
        let mut tape: Tape<f64> = Tape::new();
        let w = tape.param(vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0], 0); // 2x3
        let x = tape.param(vec![1.0, 0.5, -1.0], 1);
        let y = tape.matvec(w, x, 2, 3);
        assert_eq!(tape.value(y), &[-1.0, 0.5]);
        let s = tape.sum_elems(y);
        let grads = tape.backward(s, &[6, 3]);
        assert_eq!(grads[0], vec![1.0, 0.5, -1.0, 1.0, 0.5, -1.0]);
        assert_eq!(grads[1], vec![5.0, 7.0, 9.0]); // column sums of W
    }

    #[test]
    fn masked_softmax_probabilities() {
        let mut tape: Tape<f64> = Tape::new();
        let s = tape.leaf(vec![1.0, 2.0, 0.0]);
        let p = tape.softmax_masked(s, vec![true, true, true]);
        let pv = tape.value(p);
        assert!((pv[0] - 0.24473).abs() < 1e-5);
        assert!((pv[1] - 0.66524).abs() < 1e-5);
        assert!((pv[2] - 0.09003).abs() < 1e-5);
        assert!((pv.iter().sum::<f64>() - 1.0).abs() < 1e-12);

        let mut tape: Tape<f64> = Tape::new();
        let s = tape.leaf(vec![5.0, 5.0, 100.0]);
        let p = tape.softmax_masked(s, vec![true, true, false]);
        let pv = tape.value(p);
        assert_eq!(pv[2], 0.0);
        assert_eq!(pv[0], 0.5);
        assert_eq!(pv[1], 0.5);
    }

    #[test]
    fn composite_ops_match_finite_differences() {
        // tanh → dot with self → ln of softmax entry, through most op kinds
        fd_check(
            |t, x| {
                let h = t.tanh(x);
                let a = t.slice(h, 0, 2);
                let b = t.slice(h, 2, 2);
                let d = t.dot(a, b);
                let m = t.mul(a, b);
                let s = t.sum_elems(m);
                let st = t.stack(vec![d, s]);
                let p = t.softmax_masked(st, vec![true, true]);
                let p0 = t.index(p, 0);
                t.ln(p0)
            },
            vec![0.3, -0.7, 1.1, 0.25],
            1e-6,
        );
        // weighted sums and means
        fd_check(
            |t, x| {
                let a = t.slice(x, 0, 2);
                let b = t.slice(x, 2, 2);
                let w = t.slice(x, 4, 2);
                let ws = t.weighted_sum(w, vec![a, b]);
                let mn = t.mean_n(vec![ws, a, b]);
                let c = t.concat(mn, ws);
                let sc = t.scale(c, 1.5);
                t.sum_elems(sc)
            },
            vec![0.2, -0.4, 0.9, 0.1, 0.6, -0.3],
            1e-6,
        );
    }

    #[test]
    fn zero_loss_zero_gradients() {
        let mut tape: Tape<f64> = Tape::new();
        let x = tape.param(vec![1.0, 2.0], 0);
        let z = tape.scale(x, 0.0);
        let l = tape.sum_elems(z);
        assert_eq!(tape.scalar(l), 0.0);
        let grads = tape.backward(l, &[2]);
        assert_eq!(grads[0], vec![0.0, 0.0]);
    }

    #[test]
    fn untouched_slots_come_back_zeroed() {
        let mut tape: Tape<f64> = Tape::new();
        let x = tape.param(vec![2.0], 0);
        let _unused = tape.param(vec![1.0, 1.0], 1);
        let y = tape.mul(x, x);
        let grads = tape.backward(y, &[1, 2]);
        assert_eq!(grads[1], vec![0.0, 0.0]);
    }
}
