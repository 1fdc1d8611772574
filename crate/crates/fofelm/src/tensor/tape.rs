//! Define-by-run computation graph over [`Tensor`] values.
//!
//! A [`Tape`] is rebuilt for every batch. Nodes are appended in execution
//! order, so the reverse of the insertion order is a valid topological order
//! for the backward sweep. Gradients are only materialized for nodes that
//! (transitively) depend on a gradient-requiring leaf.

use super::{matmul_into, matmul_nt_into, matmul_tn_into, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul { a: Var, b: Var },
    /// C = A · Bᵀ
    MatMulNT { a: Var, b: Var },
    Add { a: Var, b: Var },
    /// (r, c) + (1, c) broadcast over rows
    AddRow { x: Var, bias: Var },
    /// (r, c) scaled per-row by an (r, 1) column
    ScaleRows { x: Var, s: Var },
    /// Column slice (r, c) -> (r, 1)
    Col { x: Var, j: usize },
    Relu { x: Var },
    SoftmaxRows { x: Var },
    /// Mean negative log-likelihood of per-row target classes.
    SoftmaxXent { logits: Var, targets: Vec<usize>, probs: Option<Vec<f64>> },
    SumAll { x: Var },
    Scale { x: Var, c: f64 },
    /// Weighted sums of embedding rows: out[r] = Σ coeff · emb[token].
    EmbedBag { emb: Var, bags: Vec<Vec<(usize, f64)>> },
}

struct Node {
    op: Op,
    value: Tensor,
    requires_grad: bool,
}

/// Per-batch graph arena.
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    /// When false (inference), backward bookkeeping is skipped entirely.
    track: bool,
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new(), grads: Vec::new(), track: true }
    }

    /// Tape that records values only; `backward` is unavailable.
    pub fn inference() -> Self {
        Tape { nodes: Vec::new(), grads: Vec::new(), track: false }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        debug_assert_eq!(self.nodes[v.0].value.shape(), (1, 1));
        self.nodes[v.0].value.data()[0]
    }

    /// Gradient of the last `backward` target w.r.t. `v`, if tracked.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        let rg = requires_grad && self.track;
        self.push(value, rg, Op::Leaf)
    }

    fn push(&mut self, value: Tensor, requires_grad: bool, op: Op) -> Var {
        self.nodes.push(Node { op, value, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn check_finite(&self, v: Var, what: &str) -> Result<()> {
        if cfg!(debug_assertions) {
            self.nodes[v.0].value.validate_finite(what)?;
        }
        Ok(())
    }

    // ── Forward ops ────────────────────────────────────────────────────

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        let rg = self.needs(a) || self.needs(b);
        let v = self.push(out, rg, Op::MatMul { a, b });
        self.check_finite(v, "matmul")?;
        Ok(v)
    }

    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul_nt(self.value(b))?;
        let rg = self.needs(a) || self.needs(b);
        let v = self.push(out, rg, Op::MatMulNT { a, b });
        self.check_finite(v, "matmul_nt")?;
        Ok(v)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).add(self.value(b))?;
        let rg = self.needs(a) || self.needs(b);
        let v = self.push(out, rg, Op::Add { a, b });
        self.check_finite(v, "add")?;
        Ok(v)
    }

    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (r, c) = self.value(x).shape();
        if self.value(bias).shape() != (1, c) {
            return Err(Error::Dimension(format!(
                "add_row: bias {:?} vs row width {}",
                self.value(bias).shape(),
                c
            )));
        }
        let mut out = Tensor::zeros(r, c);
        {
            let xd = self.value(x).data();
            let bd = self.value(bias).data();
            let od = out.data_mut();
            for i in 0..r {
                for j in 0..c {
                    od[i * c + j] = xd[i * c + j] + bd[j];
                }
            }
        }
        let rg = self.needs(x) || self.needs(bias);
        let v = self.push(out, rg, Op::AddRow { x, bias });
        self.check_finite(v, "add_row")?;
        Ok(v)
    }

    pub fn scale_rows(&mut self, x: Var, s: Var) -> Result<Var> {
        let (r, c) = self.value(x).shape();
        if self.value(s).shape() != (r, 1) {
            return Err(Error::Dimension(format!(
                "scale_rows: scale {:?} vs {} rows",
                self.value(s).shape(),
                r
            )));
        }
        let mut out = Tensor::zeros(r, c);
        {
            let xd = self.value(x).data();
            let sd = self.value(s).data();
            let od = out.data_mut();
            for i in 0..r {
                let w = sd[i];
                for j in 0..c {
                    od[i * c + j] = xd[i * c + j] * w;
                }
            }
        }
        let rg = self.needs(x) || self.needs(s);
        let v = self.push(out, rg, Op::ScaleRows { x, s });
        self.check_finite(v, "scale_rows")?;
        Ok(v)
    }

    pub fn col(&mut self, x: Var, j: usize) -> Result<Var> {
        let (r, c) = self.value(x).shape();
        if j >= c {
            return Err(Error::Index(format!("col {} of {} columns", j, c)));
        }
        let mut out = Tensor::zeros(r, 1);
        {
            let xd = self.value(x).data();
            let od = out.data_mut();
            for i in 0..r {
                od[i] = xd[i * c + j];
            }
        }
        let rg = self.needs(x);
        Ok(self.push(out, rg, Op::Col { x, j }))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let src = self.value(x);
        let mut out = Tensor::zeros(src.rows(), src.cols());
        {
            let xd = src.data();
            let od = out.data_mut();
            for (o, &v) in od.iter_mut().zip(xd) {
                *o = if v > 0.0 { v } else { 0.0 };
            }
        }
        let rg = self.needs(x);
        Ok(self.push(out, rg, Op::Relu { x }))
    }

    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let src = self.value(x);
        let (r, c) = src.shape();
        let mut out = Tensor::zeros(r, c);
        {
            let xd = src.data();
            let od = out.data_mut();
            for i in 0..r {
                softmax_row(&xd[i * c..(i + 1) * c], &mut od[i * c..(i + 1) * c]);
            }
        }
        let rg = self.needs(x);
        let v = self.push(out, rg, Op::SoftmaxRows { x });
        self.check_finite(v, "softmax_rows")?;
        Ok(v)
    }

    /// Mean negative log-probability of `targets[i]` under row `i` of
    /// `logits`, stabilized by row-max subtraction. Returns a (1,1) scalar.
    pub fn softmax_xent(&mut self, logits: Var, targets: Vec<usize>) -> Result<Var> {
        let src = self.value(logits);
        let (r, c) = src.shape();
        if targets.len() != r {
            return Err(Error::Dimension(format!(
                "softmax_xent: {} targets for {} rows",
                targets.len(),
                r
            )));
        }
        if r == 0 {
            return Err(Error::Data("softmax_xent over zero rows".into()));
        }
        for &t in &targets {
            if t >= c {
                return Err(Error::Index(format!("target id {} >= {} classes", t, c)));
            }
        }
        let rg = self.needs(logits);
        let mut probs = if self.track && rg { Some(vec![0.0; r * c]) } else { None };
        let mut loss = 0.0;
        {
            let xd = src.data();
            for i in 0..r {
                let row = &xd[i * c..(i + 1) * c];
                let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for &v in row {
                    z += (v - mx).exp();
                }
                loss += z.ln() - (row[targets[i]] - mx);
                if let Some(p) = probs.as_mut() {
                    for j in 0..c {
                        p[i * c + j] = (row[j] - mx).exp() / z;
                    }
                }
            }
        }
        loss /= r as f64;
        let value = Tensor::from_vec(1, 1, vec![loss])?;
        let v = self.push(value, rg, Op::SoftmaxXent { logits, targets, probs });
        self.check_finite(v, "softmax_xent")?;
        Ok(v)
    }

    pub fn sum_all(&mut self, x: Var) -> Result<Var> {
        let s: f64 = self.value(x).data().iter().sum();
        let rg = self.needs(x);
        let value = Tensor::from_vec(1, 1, vec![s])?;
        Ok(self.push(value, rg, Op::SumAll { x }))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        let src = self.value(x);
        let data = src.data().iter().map(|v| v * c).collect();
        let value = Tensor::from_vec(src.rows(), src.cols(), data)?;
        let rg = self.needs(x);
        let v = self.push(value, rg, Op::Scale { x, c });
        self.check_finite(v, "scale")?;
        Ok(v)
    }

    pub fn embed_bag(&mut self, emb: Var, bags: Vec<Vec<(usize, f64)>>) -> Result<Var> {
        let (v_rows, d) = self.value(emb).shape();
        let r = bags.len();
        let mut out = Tensor::zeros(r, d);
        {
            let ed = self.value(emb).data();
            let od = out.data_mut();
            for (i, bag) in bags.iter().enumerate() {
                let orow = &mut od[i * d..(i + 1) * d];
                for &(tok, coeff) in bag {
                    if tok >= v_rows {
                        return Err(Error::Index(format!(
                            "token id {} >= vocabulary rows {}",
                            tok, v_rows
                        )));
                    }
                    let erow = &ed[tok * d..(tok + 1) * d];
                    for (o, &e) in orow.iter_mut().zip(erow) {
                        *o += coeff * e;
                    }
                }
            }
        }
        let rg = self.needs(emb);
        let v = self.push(out, rg, Op::EmbedBag { emb, bags });
        self.check_finite(v, "embed_bag")?;
        Ok(v)
    }

    // ── Backward ───────────────────────────────────────────────────────

    /// Reverse sweep from a scalar node. Gradients accumulate only into
    /// nodes whose `requires_grad` flag propagated true.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if !self.track {
            return Err(Error::Internal("backward on an inference tape".into()));
        }
        if self.nodes[loss.0].value.shape() != (1, 1) {
            return Err(Error::Dimension("backward requires a scalar loss".into()));
        }
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        self.grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].requires_grad {
                continue;
            }
            let Some(g) = self.grads[idx].take() else { continue };
            match &self.nodes[idx].op {
                Op::Leaf => {
                    // Keep leaf grads for harvesting.
                    self.grads[idx] = Some(g);
                    continue;
                }
                Op::MatMul { a, b } => {
                    let (a, b) = (*a, *b);
                    let (m, k) = self.nodes[a.0].value.shape();
                    let n = self.nodes[b.0].value.cols();
                    if self.needs(a) {
                        // dA = dC · Bᵀ
                        let mut da = vec![0.0; m * k];
                        matmul_nt_into(&g, self.nodes[b.0].value.data(), m, n, k, &mut da);
                        self.accumulate(a, da);
                    }
                    if self.needs(b) {
                        // dB = Aᵀ · dC
                        let mut db = vec![0.0; k * n];
                        matmul_tn_into(self.nodes[a.0].value.data(), &g, m, k, n, &mut db);
                        self.accumulate(b, db);
                    }
                }
                Op::MatMulNT { a, b } => {
                    let (a, b) = (*a, *b);
                    let (m, k) = self.nodes[a.0].value.shape();
                    let n = self.nodes[b.0].value.rows();
                    if self.needs(a) {
                        // dA = dC · B
                        let mut da = vec![0.0; m * k];
                        matmul_into(&g, self.nodes[b.0].value.data(), m, n, k, &mut da);
                        self.accumulate(a, da);
                    }
                    if self.needs(b) {
                        // dB = dCᵀ · A
                        let mut db = vec![0.0; n * k];
                        matmul_tn_into(&g, self.nodes[a.0].value.data(), m, n, k, &mut db);
                        self.accumulate(b, db);
                    }
                }
                Op::Add { a, b } => {
                    let (a, b) = (*a, *b);
                    if self.needs(a) {
                        self.accumulate(a, g.clone());
                    }
                    if self.needs(b) {
                        self.accumulate(b, g);
                    }
                }
                Op::AddRow { x, bias } => {
                    let (x, bias) = (*x, *bias);
                    let (r, c) = self.nodes[x.0].value.shape();
                    if self.needs(bias) {
                        let mut db = vec![0.0; c];
                        for i in 0..r {
                            for j in 0..c {
                                db[j] += g[i * c + j];
                            }
                        }
                        self.accumulate(bias, db);
                    }
                    if self.needs(x) {
                        self.accumulate(x, g);
                    }
                }
                Op::ScaleRows { x, s } => {
                    let (x, s) = (*x, *s);
                    let (r, c) = self.nodes[x.0].value.shape();
                    if self.needs(x) {
                        let sd = self.nodes[s.0].value.data();
                        let mut dx = vec![0.0; r * c];
                        for i in 0..r {
                            for j in 0..c {
                                dx[i * c + j] = g[i * c + j] * sd[i];
                            }
                        }
                        self.accumulate(x, dx);
                    }
                    if self.needs(s) {
                        let xd = self.nodes[x.0].value.data();
                        let mut ds = vec![0.0; r];
                        for i in 0..r {
                            let mut acc = 0.0;
                            for j in 0..c {
                                acc += g[i * c + j] * xd[i * c + j];
                            }
                            ds[i] = acc;
                        }
                        self.accumulate(s, ds);
                    }
                }
                Op::Col { x, j } => {
                    let (x, j) = (*x, *j);
                    if self.needs(x) {
                        let (r, c) = self.nodes[x.0].value.shape();
                        let mut dx = vec![0.0; r * c];
                        for i in 0..r {
                            dx[i * c + j] = g[i];
                        }
                        self.accumulate(x, dx);
                    }
                }
                Op::Relu { x } => {
                    let x = *x;
                    if self.needs(x) {
                        let xd = self.nodes[x.0].value.data();
                        let dx = g
                            .iter()
                            .zip(xd)
                            .map(|(gv, &v)| if v > 0.0 { *gv } else { 0.0 })
                            .collect();
                        self.accumulate(x, dx);
                    }
                }
                Op::SoftmaxRows { x } => {
                    let x = *x;
                    if self.needs(x) {
                        let out = self.nodes[idx].value.data();
                        let (r, c) = self.nodes[idx].value.shape();
                        let mut dx = vec![0.0; r * c];
                        for i in 0..r {
                            let row = &out[i * c..(i + 1) * c];
                            let grow = &g[i * c..(i + 1) * c];
                            let dot: f64 = row.iter().zip(grow).map(|(s, gv)| s * gv).sum();
                            for j in 0..c {
                                dx[i * c + j] = row[j] * (grow[j] - dot);
                            }
                        }
                        self.accumulate(x, dx);
                    }
                }
                Op::SoftmaxXent { logits, targets, probs } => {
                    let logits = *logits;
                    if self.needs(logits) {
                        let probs = probs
                            .as_ref()
                            .expect("probs cached when gradient is required");
                        let (r, c) = self.nodes[logits.0].value.shape();
                        let scale = g[0] / r as f64;
                        let mut dx = probs.clone();
                        for (i, &t) in targets.iter().enumerate() {
                            dx[i * c + t] -= 1.0;
                        }
                        dx.iter_mut().for_each(|v| *v *= scale);
                        self.accumulate(logits, dx);
                    }
                }
                Op::SumAll { x } => {
                    let x = *x;
                    if self.needs(x) {
                        let n = self.nodes[x.0].value.len();
                        self.accumulate(x, vec![g[0]; n]);
                    }
                }
                Op::Scale { x, c } => {
                    let (x, c) = (*x, *c);
                    if self.needs(x) {
                        self.accumulate(x, g.iter().map(|v| v * c).collect());
                    }
                }
                Op::EmbedBag { emb, bags } => {
                    let emb = *emb;
                    if self.needs(emb) {
                        let d = self.nodes[emb.0].value.cols();
                        let n = self.nodes[emb.0].value.len();
                        let mut de = vec![0.0; n];
                        for (i, bag) in bags.iter().enumerate() {
                            let grow = &g[i * d..(i + 1) * d];
                            for &(tok, coeff) in bag {
                                let erow = &mut de[tok * d..(tok + 1) * d];
                                for (e, &gv) in erow.iter_mut().zip(grow) {
                                    *e += coeff * gv;
                                }
                            }
                        }
                        self.accumulate(emb, de);
                    }
                }
            }
        }
        Ok(())
    }

    fn accumulate(&mut self, v: Var, delta: Vec<f64>) {
        match &mut self.grads[v.0] {
            Some(g) => {
                for (a, b) in g.iter_mut().zip(&delta) {
                    *a += b;
                }
            }
            slot => *slot = Some(delta),
        }
    }
}

impl Default for Tape {
    fn default() -> Self {
        Tape::new()
    }
}

fn softmax_row(row: &[f64], out: &mut [f64]) {
    let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    for (o, &v) in out.iter_mut().zip(row) {
        let e = (v - mx).exp();
        *o = e;
        z += e;
    }
    out.iter_mut().for_each(|v| *v /= z);
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::seeded_rng;

    #[test]
    fn relu_definition() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::from_vec(1, 3, vec![-1.0, 0.0, 2.0]).unwrap(), false);
        let y = tape.relu(x).unwrap();
        assert_eq!(tape.value(y).data(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn relu_all_negative_zero_grad() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::from_vec(1, 3, vec![-3.0, -1.0, -0.5]).unwrap(), true);
        let y = tape.relu(x).unwrap();
        assert!(tape.value(y).data().iter().all(|&v| v == 0.0));
        let loss = tape.sum_all(y).unwrap();
        tape.backward(loss).unwrap();
        assert!(tape.grad(x).unwrap().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn xent_uniform_is_log_v() {
        let mut tape = Tape::new();
        let v = 11;
        let logits = tape.leaf(Tensor::zeros(4, v), false);
        let loss = tape.softmax_xent(logits, vec![0, 3, 7, 10]).unwrap();
        assert!((tape.scalar(loss) - (v as f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn xent_large_logit_is_stable() {
        let mut tape = Tape::new();
        let mut t = Tensor::zeros(1, 5);
        t.set(0, 2, 1000.0);
        let logits = tape.leaf(t, false);
        let loss = tape.softmax_xent(logits, vec![2]).unwrap();
        let l = tape.scalar(loss);
        assert!(l.is_finite());
        assert!(l.abs() < 1e-9);
    }

    #[test]
    fn xent_rejects_out_of_range_target() {
        let mut tape = Tape::new();
        let logits = tape.leaf(Tensor::zeros(1, 3), false);
        assert!(matches!(
            tape.softmax_xent(logits, vec![3]),
            Err(Error::Index(_))
        ));
    }

    #[test]
    fn xent_matches_log_sum_exp_oracle() {
        // Brute-force oracle on random 3x7 logits, loss and gradient.
        let mut rng = seeded_rng(5, "xent");
        let logits_t = Tensor::randn(3, 7, 2.0, &mut rng);
        let targets = vec![4usize, 0, 6];

        let mut expected = 0.0;
        let mut dx = vec![0.0; 21];
        for i in 0..3 {
            let row = logits_t.row(i).to_vec();
            let z: f64 = row.iter().map(|v| v.exp()).sum();
            expected += z.ln() - row[targets[i]];
            for j in 0..7 {
                dx[i * 7 + j] = (row[j].exp() / z - if j == targets[i] { 1.0 } else { 0.0 }) / 3.0;
            }
        }
        expected /= 3.0;

        let mut tape = Tape::new();
        let logits = tape.leaf(logits_t, true);
        let loss = tape.softmax_xent(logits, targets).unwrap();
        assert!((tape.scalar(loss) - expected).abs() < 1e-8);
        tape.backward(loss).unwrap();
        for (a, b) in tape.grad(logits).unwrap().iter().zip(&dx) {
            assert!((a - b).abs() < 1e-8);
        }
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut rng = seeded_rng(6, "softmax");
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::randn(5, 9, 3.0, &mut rng), false);
        let s = tape.softmax_rows(x).unwrap();
        for i in 0..5 {
            let sum: f64 = tape.value(s).row(i).iter().sum();
            assert!((sum - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn embed_bag_gathers_rows() {
        let emb_t = Tensor::from_rows(&[
            vec![1.0, 0.0],
            vec![0.0, 1.0],
            vec![2.0, 3.0],
        ])
        .unwrap();
        let mut tape = Tape::new();
        let emb = tape.leaf(emb_t, true);
        let out = tape
            .embed_bag(emb, vec![vec![(2, 0.5)], vec![(0, 1.0), (1, 2.0)]])
            .unwrap();
        assert_eq!(tape.value(out).row(0), &[1.0, 1.5]);
        assert_eq!(tape.value(out).row(1), &[1.0, 2.0]);
        let loss = tape.sum_all(out).unwrap();
        tape.backward(loss).unwrap();
        // d/dE rows pick up the bag coefficients.
        assert_eq!(tape.grad(emb).unwrap(), &[1.0, 1.0, 2.0, 2.0, 0.5, 0.5]);
    }

    #[test]
    fn backward_skips_frozen_leaves() {
        let mut rng = seeded_rng(7, "frozen");
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::randn(2, 3, 1.0, &mut rng), false);
        let b = tape.leaf(Tensor::randn(3, 2, 1.0, &mut rng), true);
        let c = tape.matmul(a, b).unwrap();
        let loss = tape.sum_all(c).unwrap();
        tape.backward(loss).unwrap();
        assert!(tape.grad(a).is_none());
        assert!(tape.grad(b).is_some());
    }

    #[test]
    fn inference_tape_rejects_backward() {
        let mut tape = Tape::inference();
        let x = tape.leaf(Tensor::zeros(1, 1), true);
        assert!(tape.backward(x).is_err());
    }
}
