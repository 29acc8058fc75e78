//! Dense layers and two-layer feed-forward networks with hand-written
//! backward passes, probability helpers, a central-difference gradient
//! checker and the JSON checkpoint format.
//!
//! Everything is `f64`. Batched inputs are row-major `n × in` matrices.

use std::collections::BTreeMap;

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{MbaError, Result};
use crate::json;

#[derive(Clone, Debug, PartialEq)]
pub struct DenseLayer {
    /// `out × in`
    pub weights: Array2<f64>,
    pub bias: Array1<f64>,
}

impl DenseLayer {
    /// Uniform(-a, a) weights with `a = sqrt(6 / (fan_in + fan_out))`, zero bias.
    pub fn new<R: Rng + ?Sized>(input: usize, output: usize, rng: &mut R) -> Self {
        let a = (6.0 / (input + output) as f64).sqrt();
        let weights = Array2::from_shape_fn((output, input), |_| rng.random_range(-a..a));
        Self { weights, bias: Array1::zeros(output) }
    }

    pub fn zeros(input: usize, output: usize) -> Self {
        Self { weights: Array2::zeros((output, input)), bias: Array1::zeros(output) }
    }

    pub fn input_dim(&self) -> usize {
        self.weights.ncols()
    }

    pub fn output_dim(&self) -> usize {
        self.weights.nrows()
    }

    fn check_input(&self, x: &ArrayView2<f64>) -> Result<()> {
        if x.ncols() != self.input_dim() {
            return Err(MbaError::Configuration(format!(
                "dense layer expects {} inputs, got {}",
                self.input_dim(),
                x.ncols()
            )));
        }
        Ok(())
    }

    pub fn forward(&self, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        self.check_input(&x)?;
        let mut y = x.dot(&self.weights.t());
        y += &self.bias;
        Ok(y)
    }

    /// Accumulates parameter gradients into `grad` and returns `dL/dx`.
    pub fn backward(&self, x: ArrayView2<f64>, dy: ArrayView2<f64>, grad: &mut DenseLayer) -> Result<Array2<f64>> {
        self.check_input(&x)?;
        if dy.ncols() != self.output_dim() || dy.nrows() != x.nrows() {
            return Err(MbaError::Configuration("dense layer gradient has the wrong shape".into()));
        }
        grad.weights += &dy.t().dot(&x);
        grad.bias += &dy.sum_axis(Axis(0));
        Ok(dy.dot(&self.weights))
    }
}

/// `y = W₂ · relu(W₁ x + b₁) + b₂`
#[derive(Clone, Debug, PartialEq)]
pub struct FeedForwardNet {
    pub l1: DenseLayer,
    pub l2: DenseLayer,
}

#[derive(Clone, Debug)]
pub struct FfnCache {
    pre: Array2<f64>,
    act: Array2<f64>,
}

impl FeedForwardNet {
    pub fn new<R: Rng + ?Sized>(input: usize, hidden: usize, output: usize, rng: &mut R) -> Self {
        Self { l1: DenseLayer::new(input, hidden, rng), l2: DenseLayer::new(hidden, output, rng) }
    }

    pub fn zeros(input: usize, hidden: usize, output: usize) -> Self {
        Self { l1: DenseLayer::zeros(input, hidden), l2: DenseLayer::zeros(hidden, output) }
    }

    pub fn input_dim(&self) -> usize {
        self.l1.input_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.l2.output_dim()
    }

    pub fn forward(&self, x: ArrayView2<f64>) -> Result<(Array2<f64>, FfnCache)> {
        if self.l1.output_dim() != self.l2.input_dim() {
            return Err(MbaError::Configuration("feed-forward hidden dims disagree".into()));
        }
        let pre = self.l1.forward(x)?;
        let act = pre.mapv(|v| v.max(0.0));
        let y = self.l2.forward(act.view())?;
        Ok((y, FfnCache { pre, act }))
    }

    pub fn backward(
        &self,
        x: ArrayView2<f64>,
        cache: &FfnCache,
        dy: ArrayView2<f64>,
        grad: &mut FeedForwardNet,
    ) -> Result<Array2<f64>> {
        let mut dact = self.l2.backward(cache.act.view(), dy, &mut grad.l2)?;
        ndarray::Zip::from(&mut dact).and(&cache.pre).for_each(|d, &p| {
            if p <= 0.0 {
                *d = 0.0;
            }
        });
        self.l1.backward(x, dact.view(), &mut grad.l1)
    }
}

/// Single-vector forward pass.
pub fn ffn_forward(net: &FeedForwardNet, x: &[f64]) -> Result<Vec<f64>> {
    let x = ArrayView2::from_shape((1, x.len()), x).expect("row vector");
    Ok(net.forward(x)?.0.into_raw_vec_and_offset().0)
}

/// Single-vector backward pass: returns `dL/dx` and the parameter gradients.
pub fn ffn_backward(net: &FeedForwardNet, x: &[f64], dy: &[f64]) -> Result<(Vec<f64>, FeedForwardNet)> {
    let xv = ArrayView2::from_shape((1, x.len()), x).expect("row vector");
    let dyv = ArrayView2::from_shape((1, dy.len()), dy).expect("row vector");
    let (_, cache) = net.forward(xv)?;
    let mut grad = zeros_like(net);
    let dx = net.backward(xv, &cache, dyv, &mut grad)?;
    Ok((dx.into_raw_vec_and_offset().0, grad))
}

/// Numerically stable softmax. `-inf` logits are masked and get exactly 0.
pub fn softmax(z: &[f64]) -> Result<Vec<f64>> {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if z.is_empty() || max == f64::NEG_INFINITY {
        return Err(MbaError::DegenerateDistribution);
    }
    if !max.is_finite() {
        return Err(MbaError::Numeric("non-finite logit".into()));
    }
    let mut p: Vec<f64> = z.iter().map(|&v| if v == f64::NEG_INFINITY { 0.0 } else { (v - max).exp() }).collect();
    let s: f64 = p.iter().sum();
    p.iter_mut().for_each(|v| *v /= s);
    Ok(p)
}

/// Vector-Jacobian product of softmax: `dz_i = p_i (dp_i - Σ_j p_j dp_j)`.
pub fn softmax_backward(p: &[f64], dp: &[f64]) -> Vec<f64> {
    let dot: f64 = p.iter().zip(dp).map(|(a, b)| a * b).sum();
    p.iter().zip(dp).map(|(pi, di)| pi * (di - dot)).collect()
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `-ln p[target]`
pub fn cross_entropy(p: &[f64], target: usize) -> Result<f64> {
    p.get(target)
        .map(|&q| -q.ln())
        .ok_or_else(|| MbaError::Parameter(format!("target {target} outside a distribution of {}", p.len())))
}

fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// A named collection of parameter tensors. Visiting order is fixed, which is
/// what makes flattening, optimizer updates and gradient reduction
/// deterministic.
pub trait Parameters {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &[f64]));
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &mut [f64]));
}

impl Parameters for DenseLayer {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &[f64])) {
        f(&join(prefix, "weight"), self.weights.shape(), self.weights.as_slice().expect("standard layout"));
        f(&join(prefix, "bias"), self.bias.shape(), self.bias.as_slice().expect("standard layout"));
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &mut [f64])) {
        let shape = self.weights.shape().to_vec();
        f(&join(prefix, "weight"), &shape, self.weights.as_slice_mut().expect("standard layout"));
        let shape = self.bias.shape().to_vec();
        f(&join(prefix, "bias"), &shape, self.bias.as_slice_mut().expect("standard layout"));
    }
}

impl Parameters for FeedForwardNet {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &[f64])) {
        self.l1.visit(&join(prefix, "l1"), f);
        self.l2.visit(&join(prefix, "l2"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &mut [f64])) {
        self.l1.visit_mut(&join(prefix, "l1"), f);
        self.l2.visit_mut(&join(prefix, "l2"), f);
    }
}

pub fn param_count<M: Parameters + ?Sized>(m: &M) -> usize {
    let mut n = 0;
    m.visit("", &mut |_, _, v| n += v.len());
    n
}

pub fn flatten<M: Parameters + ?Sized>(m: &M) -> Vec<f64> {
    let mut out = Vec::with_capacity(param_count(m));
    m.visit("", &mut |_, _, v| out.extend_from_slice(v));
    out
}

pub fn unflatten<M: Parameters + ?Sized>(m: &mut M, flat: &[f64]) {
    let mut offset = 0;
    m.visit_mut("", &mut |_, _, v| {
        v.copy_from_slice(&flat[offset..offset + v.len()]);
        offset += v.len();
    });
    assert_eq!(offset, flat.len(), "flat parameter vector has the wrong length");
}

pub fn zeros_like<M: Parameters + Clone>(m: &M) -> M {
    let mut z = m.clone();
    z.visit_mut("", &mut |_, _, v| v.fill(0.0));
    z
}

/// `acc += other`, tensor by tensor.
pub fn add_assign<M: Parameters + ?Sized>(acc: &mut M, other: &M) {
    let flat = flatten(other);
    let mut offset = 0;
    acc.visit_mut("", &mut |_, _, v| {
        for (a, b) in v.iter_mut().zip(&flat[offset..]) {
            *a += b;
        }
        offset += v.len();
    });
}

pub fn scale<M: Parameters + ?Sized>(m: &mut M, s: f64) {
    m.visit_mut("", &mut |_, _, v| v.iter_mut().for_each(|x| *x *= s));
}

/// Parameters paired with same-shape gradient accumulators.
#[derive(Clone, Debug)]
pub struct ParamStore<M> {
    pub params: M,
    pub grads: M,
}

impl<M: Parameters + Clone> ParamStore<M> {
    pub fn new(params: M) -> Self {
        let grads = zeros_like(&params);
        Self { params, grads }
    }

    pub fn zero_grads(&mut self) {
        self.grads.visit_mut("", &mut |_, _, v| v.fill(0.0));
    }

    pub fn names(&self) -> Vec<String> {
        let mut names = Vec::new();
        self.params.visit("", &mut |n, _, _| names.push(n.to_string()));
        names
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TensorCheck {
    pub name: String,
    pub entries: usize,
    pub max_rel_error: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub tensors: Vec<TensorCheck>,
    pub max_rel_error: f64,
    pub tol: f64,
    pub passed: bool,
}

/// Denominator floor of the relative error, so that gradients which are zero
/// up to rounding are judged on an absolute scale.
pub const REL_ERROR_FLOOR: f64 = 1e-5;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERROR_FLOOR)
}

/// Compares `store.grads` against central differences of `loss_fn` around
/// `store.params`, entry by entry.
pub fn finite_diff_check<M, F>(store: &ParamStore<M>, mut loss_fn: F, h: f64, tol: f64) -> Result<GradCheckReport>
where
    M: Parameters + Clone,
    F: FnMut(&M) -> Result<f64>,
{
    let mut layout = Vec::new();
    store.params.visit("", &mut |n, _, v| layout.push((n.to_string(), v.len())));
    let analytic = flatten(&store.grads);
    let base = flatten(&store.params);
    let mut work = store.params.clone();
    let mut eval = |work: &mut M, idx: usize, value: f64| -> Result<f64> {
        set_entry(work, idx, value);
        let l = loss_fn(work)?;
        if !l.is_finite() {
            return Err(MbaError::Numeric(format!("loss is {l} while perturbing entry {idx}")));
        }
        Ok(l)
    };
    let mut tensors = Vec::with_capacity(layout.len());
    let mut offset = 0;
    for (name, len) in layout {
        let mut worst: f64 = 0.0;
        for idx in offset..offset + len {
            let plus = eval(&mut work, idx, base[idx] + h)?;
            let minus = eval(&mut work, idx, base[idx] - h)?;
            set_entry(&mut work, idx, base[idx]);
            let numeric = (plus - minus) / (2.0 * h);
            worst = worst.max(relative_error(analytic[idx], numeric));
        }
        tensors.push(TensorCheck { name, entries: len, max_rel_error: worst });
        offset += len;
    }
    let max_rel_error = tensors.iter().map(|t| t.max_rel_error).fold(0.0, f64::max);
    Ok(GradCheckReport { tensors, max_rel_error, tol, passed: max_rel_error < tol })
}

fn set_entry<M: Parameters + ?Sized>(m: &mut M, idx: usize, value: f64) {
    let mut offset = 0;
    m.visit_mut("", &mut |_, _, v| {
        if (offset..offset + v.len()).contains(&idx) {
            v[idx - offset] = value;
        }
        offset += v.len();
    });
}

#[derive(Serialize, Deserialize)]
struct TensorRecord {
    shape: Vec<usize>,
    #[serde(with = "json::vec17")]
    data: Vec<f64>,
}

/// JSON object mapping tensor name to shape and row-major data.
pub fn to_checkpoint<M: Parameters + ?Sized>(m: &M) -> Result<String> {
    let mut map = BTreeMap::new();
    m.visit("", &mut |name, shape, data| {
        map.insert(name.to_string(), TensorRecord { shape: shape.to_vec(), data: data.to_vec() });
    });
    Ok(serde_json::to_string_pretty(&map)?)
}

/// Loads a checkpoint into `m`. Names and shapes must match exactly.
pub fn load_checkpoint<M: Parameters + ?Sized>(m: &mut M, text: &str) -> Result<()> {
    let mut map: BTreeMap<String, TensorRecord> = serde_json::from_str(text)?;
    let mut failure = None;
    m.visit_mut("", &mut |name, shape, data| {
        if failure.is_some() {
            return;
        }
        match map.remove(name) {
            Some(rec) if rec.shape == shape && rec.data.len() == data.len() => data.copy_from_slice(&rec.data),
            Some(rec) => failure = Some(format!("tensor {name} has shape {:?}, expected {shape:?}", rec.shape)),
            None => failure = Some(format!("tensor {name} missing from checkpoint")),
        }
    });
    if let Some(msg) = failure {
        return Err(MbaError::Checkpoint(msg));
    }
    if let Some(extra) = map.keys().next() {
        return Err(MbaError::Checkpoint(format!("unexpected tensor {extra} in checkpoint")));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_net_outputs_zero() {
        let net = FeedForwardNet::zeros(3, 5, 2);
        assert_eq!(ffn_forward(&net, &[1.0, -2.0, 3.0]).unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn identity_net_passes_positive_inputs() {
        let mut net = FeedForwardNet::zeros(3, 3, 3);
        net.l1.weights = Array2::eye(3);
        net.l2.weights = Array2::eye(3);
        assert_eq!(ffn_forward(&net, &[0.5, 1.5, 2.0]).unwrap(), vec![0.5, 1.5, 2.0]);
    }

    #[test]
    fn shape_mismatch_is_a_configuration_error() {
        let net = FeedForwardNet::zeros(3, 5, 2);
        assert!(matches!(ffn_forward(&net, &[1.0]), Err(MbaError::Configuration(_))));
    }

    #[test]
    fn ffn_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for trial in 0..5 {
            let net = FeedForwardNet::new(6, 9, 4, &mut rng);
            let x: Vec<f64> = (0..6).map(|_| rng.random_range(-1.0..1.0)).collect();
            let dy: Vec<f64> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
            let (dx, grads) = ffn_backward(&net, &x, &dy).unwrap();
            let loss = |n: &FeedForwardNet, x: &[f64]| -> f64 {
                ffn_forward(n, x).unwrap().iter().zip(&dy).map(|(a, b)| a * b).sum()
            };
            let store = ParamStore { params: net.clone(), grads };
            let report = finite_diff_check(&store, |n| Ok(loss(n, &x)), 1e-5, 1e-4).unwrap();
            assert!(report.passed, "trial {trial}: {report:?}");
            for i in 0..x.len() {
                let mut xp = x.clone();
                let mut xm = x.clone();
                xp[i] += 1e-5;
                xm[i] -= 1e-5;
                let numeric = (loss(&net, &xp) - loss(&net, &xm)) / 2e-5;
                assert!(relative_error(dx[i], numeric) < 1e-4);
            }
        }
    }

    #[test]
    fn softmax_basics() {
        assert_eq!(softmax(&[0.0; 4]).unwrap(), vec![0.25; 4]);
        let p = softmax(&[1.0, f64::NEG_INFINITY, 2.0]).unwrap();
        assert_eq!(p[1], 0.0);
        assert!(((p.iter().sum::<f64>()) - 1.0).abs() < 1e-12);
        assert!(matches!(softmax(&[f64::NEG_INFINITY; 2]), Err(MbaError::DegenerateDistribution)));
        assert!(matches!(softmax(&[]), Err(MbaError::DegenerateDistribution)));
        assert_eq!(cross_entropy(&[0.0, 1.0], 1).unwrap(), 0.0);
        assert_eq!(sigmoid(0.0), 0.5);
    }

    #[test]
    fn cross_entropy_of_softmax_gradient_is_p_minus_onehot() {
        let z = [0.3, -1.2, 2.0, 0.7];
        let target = 2;
        let p = softmax(&z).unwrap();
        let mut dp = vec![0.0; 4];
        dp[target] = -1.0 / p[target];
        let dz = softmax_backward(&p, &dp);
        for i in 0..4 {
            let expected = p[i] - if i == target { 1.0 } else { 0.0 };
            assert!((dz[i] - expected).abs() < 1e-12);
            let mut zp = z;
            let mut zm = z;
            zp[i] += 1e-5;
            zm[i] -= 1e-5;
            let numeric = (cross_entropy(&softmax(&zp).unwrap(), target).unwrap()
                - cross_entropy(&softmax(&zm).unwrap(), target).unwrap())
                / 2e-5;
            assert!(relative_error(dz[i], numeric) < 1e-6);
        }
    }

    #[derive(Clone)]
    struct Theta(DenseLayer);

    impl Parameters for Theta {
        fn visit(&self, p: &str, f: &mut dyn FnMut(&str, &[usize], &[f64])) {
            self.0.visit(p, f)
        }
        fn visit_mut(&mut self, p: &str, f: &mut dyn FnMut(&str, &[usize], &mut [f64])) {
            self.0.visit_mut(p, f)
        }
    }

    fn half_norm(t: &Theta) -> Result<f64> {
        Ok(0.5 * flatten(t).iter().map(|v| v * v).sum::<f64>())
    }

    #[test]
    fn quadratic_loss_check_and_corruption() {
        let theta = Theta(DenseLayer { weights: array![[0.5, -1.5], [2.0, 0.25]], bias: array![3.0, -0.75] });
        let mut store = ParamStore::new(theta.clone());
        store.grads = theta.clone();
        let report = finite_diff_check(&store, half_norm, 1e-5, 1e-8).unwrap();
        assert!(report.passed, "{report:?}");

        store.grads.0.weights[[1, 0]] += 1.0;
        let report = finite_diff_check(&store, half_norm, 1e-5, 1e-8).unwrap();
        assert!(!report.passed);
        assert_eq!(report.tensors[0].name, "weight");
        assert!(report.tensors[0].max_rel_error > 0.1);
    }

    #[test]
    fn non_finite_loss_is_reported() {
        let store = ParamStore::new(Theta(DenseLayer::zeros(1, 1)));
        let err = finite_diff_check(&store, |_| Ok(f64::NAN), 1e-5, 1e-4).unwrap_err();
        assert!(matches!(err, MbaError::Numeric(_)));
    }

    #[test]
    fn checkpoint_round_trip_and_mismatch() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let net = FeedForwardNet::new(3, 4, 2, &mut rng);
        let text = to_checkpoint(&net).unwrap();
        let mut other = FeedForwardNet::zeros(3, 4, 2);
        load_checkpoint(&mut other, &text).unwrap();
        assert_eq!(other, net);
        let mut wrong = FeedForwardNet::zeros(3, 5, 2);
        assert!(matches!(load_checkpoint(&mut wrong, &text), Err(MbaError::Checkpoint(_))));
    }
}
