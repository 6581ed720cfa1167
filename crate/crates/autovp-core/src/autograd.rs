//! Minimal reverse-mode autodiff tape over `ndarray` values.
//!
//! Training touches a handful of parameter grids (the prompt perturbation,
//! the resize scale, an optional linear output layer), so the tape is a plain
//! Wengert list: every op pushes a node holding its value and one
//! vector-Jacobian closure per parent. `backward` walks the list in reverse
//! and accumulates gradients. Tapes are rebuilt per batch (define-by-run).
//!
//! Structured ops that need geometry context (the differentiable resize)
//! are assembled elsewhere through [`Tape::push_custom`].

use ndarray::{Array1, Array2, ArrayD, ArrayView1, ArrayView2, Axis, Ix1, Ix2, IxDyn};

/// Handle to a node on a [`Tape`].
pub type TensorId = usize;

/// Vector-Jacobian product: maps the output gradient to one parent's gradient.
pub type Vjp = Box<dyn Fn(&ArrayD<f64>) -> ArrayD<f64>>;

struct Node {
    value: ArrayD<f64>,
    edges: Vec<(TensorId, Vjp)>,
}

/// A single-use computation record. Nodes only reference earlier nodes, so
/// the push order is already a topological order.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Tape::backward`], indexed by `TensorId`.
pub struct Gradients(Vec<Option<ArrayD<f64>>>);

impl Gradients {
    pub fn get(&self, id: TensorId) -> Option<&ArrayD<f64>> {
        self.0.get(id).and_then(|g| g.as_ref())
    }

    /// Gradient of a node, or zeros in its shape if it never received one.
    pub fn get_or_zeros(&self, id: TensorId, shape: &[usize]) -> ArrayD<f64> {
        match self.get(id) {
            Some(g) => g.clone(),
            None => ArrayD::zeros(IxDyn(shape)),
        }
    }
}

fn as2(v: &ArrayD<f64>) -> ArrayView2<'_, f64> {
    v.view()
        .into_dimensionality::<Ix2>()
        .expect("expected a 2-d tensor")
}

fn as1(v: &ArrayD<f64>) -> ArrayView1<'_, f64> {
    v.view()
        .into_dimensionality::<Ix1>()
        .expect("expected a 1-d tensor")
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Value of a node.
    pub fn value(&self, id: TensorId) -> &ArrayD<f64> {
        &self.nodes[id].value
    }

    /// Value of a 0-d (scalar) node.
    pub fn scalar(&self, id: TensorId) -> f64 {
        let v = self.value(id);
        debug_assert_eq!(v.len(), 1, "scalar() on a non-scalar node");
        v.iter().next().copied().unwrap_or(0.0)
    }

    /// Push a node with no parents. Leaves and constants are the same thing
    /// on the tape; whether a gradient is consumed is the caller's business.
    pub fn leaf(&mut self, value: ArrayD<f64>) -> TensorId {
        self.push(value, Vec::new())
    }

    /// Push a 0-d scalar leaf.
    pub fn scalar_leaf(&mut self, value: f64) -> TensorId {
        self.leaf(ArrayD::from_elem(IxDyn(&[]), value))
    }

    /// Push a node computed outside the tape, wiring explicit VJP edges.
    pub fn push_custom(&mut self, value: ArrayD<f64>, edges: Vec<(TensorId, Vjp)>) -> TensorId {
        self.push(value, edges)
    }

    fn push(&mut self, value: ArrayD<f64>, edges: Vec<(TensorId, Vjp)>) -> TensorId {
        debug_assert!(value.iter().all(|v| v.is_finite() || v.is_nan()));
        let id = self.nodes.len();
        self.nodes.push(Node { value, edges });
        id
    }

    pub fn add(&mut self, a: TensorId, b: TensorId) -> TensorId {
        let value = &self.nodes[a].value + &self.nodes[b].value;
        self.push(
            value,
            vec![
                (a, Box::new(|g: &ArrayD<f64>| g.clone()) as Vjp),
                (b, Box::new(|g: &ArrayD<f64>| g.clone()) as Vjp),
            ],
        )
    }

    /// `batch + single`, broadcasting `single` over the leading batch axis.
    pub fn add_broadcast(&mut self, batch: TensorId, single: TensorId) -> TensorId {
        let value = &self.nodes[batch].value + &self.nodes[single].value;
        let single_shape: Vec<usize> = self.nodes[single].value.shape().to_vec();
        self.push(
            value,
            vec![
                (batch, Box::new(|g: &ArrayD<f64>| g.clone()) as Vjp),
                (
                    single,
                    Box::new(move |g: &ArrayD<f64>| {
                        let summed = g.sum_axis(Axis(0));
                        summed
                            .into_shape_with_order(IxDyn(&single_shape))
                            .expect("broadcast gradient reshape")
                    }) as Vjp,
                ),
            ],
        )
    }

    /// Elementwise product of same-shape tensors.
    pub fn mul(&mut self, a: TensorId, b: TensorId) -> TensorId {
        let av = self.nodes[a].value.clone();
        let bv = self.nodes[b].value.clone();
        let value = &av * &bv;
        self.push(
            value,
            vec![
                (a, Box::new(move |g: &ArrayD<f64>| g * &bv) as Vjp),
                (b, Box::new(move |g: &ArrayD<f64>| g * &av) as Vjp),
            ],
        )
    }

    pub fn scale_const(&mut self, a: TensorId, c: f64) -> TensorId {
        let value = &self.nodes[a].value * c;
        self.push(value, vec![(a, Box::new(move |g: &ArrayD<f64>| g * c) as Vjp)])
    }

    pub fn sigmoid(&mut self, a: TensorId) -> TensorId {
        let y = self.nodes[a].value.mapv(|x| 1.0 / (1.0 + (-x).exp()));
        let y_cap = y.clone();
        self.push(
            y,
            vec![(
                a,
                Box::new(move |g: &ArrayD<f64>| g * &(&y_cap * &y_cap.mapv(|v| 1.0 - v))) as Vjp,
            )],
        )
    }

    /// Per-channel affine `(x - mean[c]) / std[c]` on an N×C×H×W tensor.
    pub fn normalize_channels(&mut self, x: TensorId, mean: &[f64], std: &[f64]) -> TensorId {
        let xv = &self.nodes[x].value;
        assert_eq!(xv.ndim(), 4, "normalize_channels expects N,C,H,W");
        let channels = xv.shape()[1];
        assert_eq!(mean.len(), channels);
        assert_eq!(std.len(), channels);
        let mut value = xv.clone();
        for c in 0..channels {
            let (m, s) = (mean[c], std[c]);
            value
                .index_axis_mut(Axis(1), c)
                .mapv_inplace(|v| (v - m) / s);
        }
        let inv_std: Vec<f64> = std.iter().map(|s| 1.0 / s).collect();
        self.push(
            value,
            vec![(
                x,
                Box::new(move |g: &ArrayD<f64>| {
                    let mut out = g.clone();
                    for (c, inv) in inv_std.iter().enumerate() {
                        out.index_axis_mut(Axis(1), c).mapv_inplace(|v| v * inv);
                    }
                    out
                }) as Vjp,
            )],
        )
    }

    /// Reshape N×... to N×D.
    pub fn flatten_batch(&mut self, x: TensorId) -> TensorId {
        let xv = &self.nodes[x].value;
        let n = xv.shape()[0];
        let d: usize = xv.len() / n;
        let orig_shape: Vec<usize> = xv.shape().to_vec();
        let value = xv
            .clone()
            .into_shape_with_order(IxDyn(&[n, d]))
            .expect("flatten reshape");
        self.push(
            value,
            vec![(
                x,
                Box::new(move |g: &ArrayD<f64>| {
                    g.clone()
                        .into_shape_with_order(IxDyn(&orig_shape))
                        .expect("flatten gradient reshape")
                }) as Vjp,
            )],
        )
    }

    /// Affine layer `x · wᵀ + b` with `x: N×D`, `w: K×D`, `b: K`.
    pub fn linear(&mut self, x: TensorId, w: TensorId, b: TensorId) -> TensorId {
        let xv = as2(&self.nodes[x].value).to_owned();
        let wv = as2(&self.nodes[w].value).to_owned();
        let bv = as1(&self.nodes[b].value).to_owned();
        let mut value = xv.dot(&wv.t());
        value += &bv;
        let (x_cap, w_cap) = (xv.clone(), wv.clone());
        self.push(
            value.into_dyn(),
            vec![
                (
                    x,
                    Box::new(move |g: &ArrayD<f64>| as2(g).dot(&w_cap).into_dyn()) as Vjp,
                ),
                (
                    w,
                    Box::new(move |g: &ArrayD<f64>| as2(g).t().dot(&x_cap).into_dyn()) as Vjp,
                ),
                (
                    b,
                    Box::new(|g: &ArrayD<f64>| as2(g).sum_axis(Axis(0)).into_dyn()) as Vjp,
                ),
            ],
        )
    }

    /// Matrix product `a · b` with `a: N×D`, `b: D×M`.
    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> TensorId {
        let av = as2(&self.nodes[a].value).to_owned();
        let bv = as2(&self.nodes[b].value).to_owned();
        let value = av.dot(&bv);
        let (a_cap, b_cap) = (av.clone(), bv.clone());
        self.push(
            value.into_dyn(),
            vec![
                (
                    a,
                    Box::new(move |g: &ArrayD<f64>| as2(g).dot(&b_cap.t()).into_dyn()) as Vjp,
                ),
                (
                    b,
                    Box::new(move |g: &ArrayD<f64>| a_cap.t().dot(&as2(g)).into_dyn()) as Vjp,
                ),
            ],
        )
    }

    /// Row-wise L2 normalization of an N×D tensor.
    pub fn l2_normalize_rows(&mut self, x: TensorId) -> TensorId {
        let xv = as2(&self.nodes[x].value).to_owned();
        let norms: Array1<f64> = xv
            .rows()
            .into_iter()
            .map(|r| r.dot(&r).sqrt().max(1e-12))
            .collect();
        let mut value = xv.clone();
        for (mut row, &n) in value.rows_mut().into_iter().zip(norms.iter()) {
            row.mapv_inplace(|v| v / n);
        }
        let y_cap = value.clone();
        self.push(
            value.into_dyn(),
            vec![(
                x,
                Box::new(move |g: &ArrayD<f64>| {
                    let g2 = as2(g);
                    let mut out = Array2::<f64>::zeros(g2.raw_dim());
                    for i in 0..g2.nrows() {
                        let gi = g2.row(i);
                        let yi = y_cap.row(i);
                        let dot = gi.dot(&yi);
                        let n = norms[i];
                        for j in 0..g2.ncols() {
                            out[[i, j]] = (gi[j] - dot * yi[j]) / n;
                        }
                    }
                    out.into_dyn()
                }) as Vjp,
            )],
        )
    }

    /// Sum of all entries. 0-d output.
    pub fn sum_all(&mut self, x: TensorId) -> TensorId {
        let xv = &self.nodes[x].value;
        let shape: Vec<usize> = xv.shape().to_vec();
        let value = ArrayD::from_elem(IxDyn(&[]), xv.sum());
        self.push(
            value,
            vec![(
                x,
                Box::new(move |g: &ArrayD<f64>| {
                    ArrayD::from_elem(IxDyn(&shape), g.iter().next().copied().unwrap_or(0.0))
                }) as Vjp,
            )],
        )
    }

    /// Mean cross-entropy of N×K logits against integer labels. 0-d output.
    pub fn cross_entropy_mean(&mut self, logits: TensorId, labels: &[usize]) -> TensorId {
        let lv = as2(&self.nodes[logits].value).to_owned();
        let n = lv.nrows();
        assert_eq!(n, labels.len(), "logit rows vs labels");
        let mut probs = Array2::<f64>::zeros(lv.raw_dim());
        let mut loss = 0.0;
        for i in 0..n {
            let row = lv.row(i);
            let max = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
            let exps: Array1<f64> = row.mapv(|v| (v - max).exp());
            let sum = exps.sum();
            let log_z = max + sum.ln();
            loss -= row[labels[i]] - log_z;
            probs.row_mut(i).assign(&(exps / sum));
        }
        loss /= n as f64;
        let labels_cap: Vec<usize> = labels.to_vec();
        self.push(
            ArrayD::from_elem(IxDyn(&[]), loss),
            vec![(
                logits,
                Box::new(move |g: &ArrayD<f64>| {
                    let gs = g.iter().next().copied().unwrap_or(0.0);
                    let mut out = probs.clone();
                    for (i, &y) in labels_cap.iter().enumerate() {
                        out[[i, y]] -= 1.0;
                    }
                    out.mapv_inplace(|v| v * gs / n as f64);
                    out.into_dyn()
                }) as Vjp,
            )],
        )
    }

    /// Reverse pass from `root`, seeded with ones in the root's shape.
    pub fn backward(&self, root: TensorId) -> Gradients {
        let mut grads: Vec<Option<ArrayD<f64>>> = vec![None; self.nodes.len()];
        grads[root] = Some(ArrayD::from_elem(self.nodes[root].value.raw_dim(), 1.0));
        for id in (0..=root).rev() {
            let Some(g) = grads[id].take() else { continue };
            for (pid, vjp) in &self.nodes[id].edges {
                let contrib = vjp(&g);
                match &mut grads[*pid] {
                    Some(acc) => *acc += &contrib,
                    slot @ None => *slot = Some(contrib),
                }
            }
            grads[id] = Some(g);
        }
        Gradients(grads)
    }
}

/// Central-difference gradient of a scalar function, for checking the tape's
/// analytic gradients. Evaluates `f` twice per coordinate and never touches
/// the reverse pass.
pub fn numeric_gradient<F: FnMut(&[f64]) -> f64>(mut f: F, x: &[f64], step: f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    let mut grad = vec![0.0; x.len()];
    for i in 0..x.len() {
        let orig = probe[i];
        probe[i] = orig + step;
        let hi = f(&probe);
        probe[i] = orig - step;
        let lo = f(&probe);
        probe[i] = orig;
        grad[i] = (hi - lo) / (2.0 * step);
    }
    grad
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::arr2;

    fn rel_err(a: f64, b: f64) -> f64 {
        (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
    }

    fn check_grad_matches<F>(build: F, init: &[f64], tol: f64)
    where
        F: Fn(&mut Tape, &[f64]) -> (TensorId, TensorId), // (param leaf, scalar loss)
    {
        let mut tape = Tape::new();
        let (leaf, loss) = build(&mut tape, init);
        let grads = tape.backward(loss);
        let analytic: Vec<f64> = grads.get(leaf).unwrap().iter().copied().collect();
        let numeric = numeric_gradient(
            |x| {
                let mut t = Tape::new();
                let (_, l) = build(&mut t, x);
                t.scalar(l)
            },
            init,
            1e-5,
        );
        for (a, n) in analytic.iter().zip(numeric.iter()) {
            assert!(
                rel_err(*a, *n) < tol || (a.abs() < 1e-9 && n.abs() < 1e-9),
                "analytic {a} vs numeric {n}"
            );
        }
    }

    #[test]
    fn add_and_mul_backward() {
        let mut tape = Tape::new();
        let a = tape.leaf(arr2(&[[1.0, 2.0], [3.0, 4.0]]).into_dyn());
        let b = tape.leaf(arr2(&[[5.0, 6.0], [7.0, 8.0]]).into_dyn());
        let s = tape.add(a, b);
        let p = tape.mul(s, b);
        let loss = tape.cross_entropy_mean(p, &[0, 1]);
        let grads = tape.backward(loss);
        assert!(grads.get(a).is_some());
        assert!(grads.get(b).is_some());
    }

    #[test]
    fn sigmoid_gradient_matches_finite_differences() {
        check_grad_matches(
            |tape, x| {
                let leaf = tape.leaf(ArrayD::from_shape_vec(IxDyn(&[1, 4]), x.to_vec()).unwrap());
                let y = tape.sigmoid(leaf);
                let loss = tape.cross_entropy_mean(y, &[2]);
                (leaf, loss)
            },
            &[0.3, -1.2, 0.8, 2.0],
            1e-6,
        );
    }

    #[test]
    fn linear_gradients_match_finite_differences() {
        // Gradient w.r.t. the weight matrix of a small affine layer.
        check_grad_matches(
            |tape, w| {
                let x = tape.leaf(arr2(&[[0.2, -0.4, 0.9], [1.1, 0.5, -0.3]]).into_dyn());
                let wl = tape.leaf(ArrayD::from_shape_vec(IxDyn(&[2, 3]), w.to_vec()).unwrap());
                let b = tape.leaf(ArrayD::from_shape_vec(IxDyn(&[2]), vec![0.1, -0.2]).unwrap());
                let y = tape.linear(x, wl, b);
                let loss = tape.cross_entropy_mean(y, &[0, 1]);
                (wl, loss)
            },
            &[0.5, -0.1, 0.7, 0.2, 0.9, -0.6],
            1e-6,
        );
    }

    #[test]
    fn l2_normalize_gradient_matches_finite_differences() {
        check_grad_matches(
            |tape, x| {
                let leaf = tape.leaf(ArrayD::from_shape_vec(IxDyn(&[1, 3]), x.to_vec()).unwrap());
                let y = tape.l2_normalize_rows(leaf);
                let t = tape.leaf(arr2(&[[0.6, -0.8, 0.0], [0.0, 1.0, 0.0]]).t().to_owned().into_dyn());
                let sim = tape.matmul(y, t);
                let loss = tape.cross_entropy_mean(sim, &[0]);
                (leaf, loss)
            },
            &[0.9, 0.2, -0.5],
            1e-6,
        );
    }

    #[test]
    fn add_broadcast_sums_gradient_over_batch() {
        let mut tape = Tape::new();
        let batch = tape.leaf(ArrayD::zeros(IxDyn(&[3, 2, 2, 2])));
        let single = tape.leaf(ArrayD::from_elem(IxDyn(&[2, 2, 2]), 0.5));
        let out = tape.add_broadcast(batch, single);
        let flat = tape.flatten_batch(out);
        let loss = tape.cross_entropy_mean(flat, &[0, 1, 2]);
        let grads = tape.backward(loss);
        let gs = grads.get(single).unwrap();
        assert_eq!(gs.shape(), &[2, 2, 2]);
    }

    #[test]
    fn normalize_channels_scales_gradient_by_inverse_std() {
        let mut tape = Tape::new();
        let x = tape.leaf(ArrayD::from_elem(IxDyn(&[1, 2, 2, 2]), 0.5));
        let y = tape.normalize_channels(x, &[0.4, 0.6], &[0.5, 0.25]);
        assert!((tape.value(y)[[0, 0, 0, 0]] - 0.2).abs() < 1e-12);
        assert!((tape.value(y)[[0, 1, 0, 0]] - (-0.4)).abs() < 1e-12);
        let flat = tape.flatten_batch(y);
        let loss = tape.cross_entropy_mean(flat, &[0]);
        let grads = tape.backward(loss);
        assert!(grads.get(x).is_some());
    }

    #[test]
    fn cross_entropy_of_uniform_logits_is_log_k() {
        let mut tape = Tape::new();
        let logits = tape.leaf(ArrayD::zeros(IxDyn(&[4, 5])));
        let loss = tape.cross_entropy_mean(logits, &[0, 1, 2, 3]);
        assert!((tape.scalar(loss) - (5.0f64).ln()).abs() < 1e-12);
    }
}
