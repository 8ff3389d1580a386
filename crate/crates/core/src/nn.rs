//! Building blocks shared by the autoencoder and the probe: named parameter
//! sets, an Adam optimizer, padded sequence batches and LSTM layers.

use std::collections::HashMap;

use rand::Rng;
use rand_distr::{Distribution, Uniform};

use crate::autodiff::{Gradients, Graph, Tensor, Var};
use crate::error::{Error, Result};

/// Ordered collection of named trainable tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    names: Vec<String>,
    values: Vec<Tensor>,
    index: HashMap<String, usize>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) {
        let name = name.into();
        match self.index.get(&name) {
            Some(&i) => self.values[i] = value,
            None => {
                self.index.insert(name.clone(), self.values.len());
                self.names.push(name);
                self.values.push(value);
            }
        }
    }

    pub fn remove(&mut self, name: &str) -> Option<Tensor> {
        let i = self.index.remove(name)?;
        self.names.remove(i);
        let out = self.values.remove(i);
        for (j, n) in self.names.iter().enumerate().skip(i) {
            self.index.insert(n.clone(), j);
        }
        Some(out)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.index.get(name).map(|&i| &self.values[i])
    }

    pub fn require(&self, name: &str) -> Result<&Tensor> {
        self.get(name)
            .ok_or_else(|| Error::contract(format!("missing parameter `{name}`")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn values(&self) -> &[Tensor] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Tensor] {
        &mut self.values
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.values)
    }

    pub fn scalar_count(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }

    /// Registers every tensor as a trainable leaf of `g`.
    pub fn bind(&self, g: &mut Graph) -> Bound {
        let vars = self.values.iter().map(|t| g.param(t.clone())).collect();
        Bound {
            vars,
            index: self.index.clone(),
        }
    }

    /// Wraps leaves created elsewhere (one per parameter, in order), as in gradient checks.
    pub fn bind_existing(&self, vars: &[Var]) -> Result<Bound> {
        if vars.len() != self.len() {
            return Err(Error::contract(
                "bind_existing: one variable per parameter required",
            ));
        }
        Ok(Bound {
            vars: vars.to_vec(),
            index: self.index.clone(),
        })
    }

    /// Registers every tensor as a constant (no gradient) of `g`.
    pub fn bind_frozen(&self, g: &mut Graph) -> Bound {
        let vars = self.values.iter().map(|t| g.constant(t.clone())).collect();
        Bound {
            vars,
            index: self.index.clone(),
        }
    }
}

/// Graph handles for a bound [`ParamSet`].
#[derive(Clone, Debug)]
pub struct Bound {
    vars: Vec<Var>,
    index: HashMap<String, usize>,
}

impl Bound {
    pub fn var(&self, name: &str) -> Result<Var> {
        self.index
            .get(name)
            .map(|&i| self.vars[i])
            .ok_or_else(|| Error::contract(format!("missing parameter `{name}`")))
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    /// Gradients in parameter order.
    pub fn collect(&self, grads: &mut Gradients) -> Vec<Tensor> {
        self.vars
            .iter()
            .map(|&v| grads.take(v).expect("every parameter receives a gradient"))
            .collect()
    }
}

/// Uniform initialization in `[-bound, bound]`.
pub fn uniform_init<R: Rng + ?Sized>(rows: usize, cols: usize, bound: f64, rng: &mut R) -> Tensor {
    let dist = Uniform::new_inclusive(-bound, bound).expect("valid bound");
    Tensor::from_fn(rows, cols, |_, _| dist.sample(rng))
}

/// Adds `prefix.w` (`fan_in x fan_out`) and `prefix.b` (`1 x fan_out`).
pub fn init_linear<R: Rng + ?Sized>(
    set: &mut ParamSet,
    prefix: &str,
    fan_in: usize,
    fan_out: usize,
    rng: &mut R,
) {
    let bound = 1.0 / (fan_in as f64).sqrt();
    set.insert(
        format!("{prefix}.w"),
        uniform_init(fan_in, fan_out, bound, rng),
    );
    set.insert(format!("{prefix}.b"), Tensor::zeros(1, fan_out));
}

/// Adds the weights of one LSTM direction. The forget-gate bias starts at 1.
pub fn init_lstm<R: Rng + ?Sized>(
    set: &mut ParamSet,
    prefix: &str,
    input: usize,
    hidden: usize,
    rng: &mut R,
) {
    let bound = 1.0 / (hidden as f64).sqrt();
    set.insert(
        format!("{prefix}.w_ih"),
        uniform_init(input, 4 * hidden, bound, rng),
    );
    set.insert(
        format!("{prefix}.w_hh"),
        uniform_init(hidden, 4 * hidden, bound, rng),
    );
    let mut b = Tensor::zeros(1, 4 * hidden);
    b.data_mut()[hidden..2 * hidden].fill(1.0);
    set.insert(format!("{prefix}.b"), b);
}

pub fn linear(g: &mut Graph, p: &Bound, prefix: &str, x: Var) -> Result<Var> {
    let w = p.var(&format!("{prefix}.w"))?;
    let b = p.var(&format!("{prefix}.b"))?;
    let xw = g.matmul(x, w)?;
    g.add(xw, b)
}

/// Shape of a padded, time-major batch: row `t * batch + b` holds frame `t` of sequence `b`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SeqLayout {
    lengths: Vec<usize>,
    t_max: usize,
}

impl SeqLayout {
    pub fn new(lengths: Vec<usize>) -> Result<Self> {
        if lengths.is_empty() {
            return Err(Error::contract("empty batch"));
        }
        if lengths.contains(&0) {
            return Err(Error::contract("batch contains a zero-length sequence"));
        }
        let t_max = *lengths.iter().max().unwrap();
        Ok(SeqLayout { lengths, t_max })
    }

    pub fn batch(&self) -> usize {
        self.lengths.len()
    }

    pub fn t_max(&self) -> usize {
        self.t_max
    }

    pub fn rows(&self) -> usize {
        self.t_max * self.lengths.len()
    }

    pub fn lengths(&self) -> &[usize] {
        &self.lengths
    }

    pub fn row(&self, t: usize, b: usize) -> usize {
        t * self.batch() + b
    }

    pub fn is_valid(&self, row: usize) -> bool {
        let b = self.batch();
        row / b < self.lengths[row % b]
    }

    /// Packs per-sequence frame matrices into the padded layout (padding is zero).
    pub fn pack(&self, seqs: &[&Tensor]) -> Result<Tensor> {
        if seqs.len() != self.batch() {
            return Err(Error::contract("pack: sequence count differs from layout"));
        }
        let cols = seqs[0].cols();
        let mut out = Tensor::zeros(self.rows(), cols);
        for (b, s) in seqs.iter().enumerate() {
            if s.rows() != self.lengths[b] || s.cols() != cols {
                return Err(Error::contract("pack: sequence shape differs from layout"));
            }
            for t in 0..s.rows() {
                out.row_mut(self.row(t, b)).copy_from_slice(s.row(t));
            }
        }
        Ok(out)
    }

    /// Inverse of [`SeqLayout::pack`]: the valid frames of sequence `b`.
    pub fn unpack(&self, packed: &Tensor, b: usize) -> Tensor {
        Tensor::from_fn(self.lengths[b], packed.cols(), |t, c| {
            packed.get(self.row(t, b), c)
        })
    }

    /// Row permutation reversing every sequence within its own length; padding rows stay put.
    pub fn reversal(&self) -> Vec<usize> {
        (0..self.rows())
            .map(|row| {
                let (t, b) = (row / self.batch(), row % self.batch());
                let len = self.lengths[b];
                if t < len {
                    self.row(len - 1 - t, b)
                } else {
                    row
                }
            })
            .collect()
    }

    /// Row weights giving every sequence equal total weight `1 / batch`, spread
    /// evenly over its valid frames; padding rows get zero.
    pub fn sequence_weights(&self) -> Vec<f64> {
        let b = self.batch() as f64;
        (0..self.rows())
            .map(|row| {
                if self.is_valid(row) {
                    1.0 / (b * self.lengths[row % self.batch()] as f64)
                } else {
                    0.0
                }
            })
            .collect()
    }

    /// `batch x rows` matrix averaging each sequence's valid rows.
    pub fn averaging_matrix(&self) -> Tensor {
        let mut m = Tensor::zeros(self.batch(), self.rows());
        for (b, &len) in self.lengths.iter().enumerate() {
            for t in 0..len {
                m.set(b, self.row(t, b), 1.0 / len as f64);
            }
        }
        m
    }

    /// Sequence index of every row, for broadcasting per-sequence rows.
    pub fn sequence_of_rows(&self) -> Vec<usize> {
        (0..self.rows()).map(|row| row % self.batch()).collect()
    }
}

/// One LSTM direction over a packed batch, starting from zero state.
///
/// Returns the hidden states in the same layout (`rows x hidden`).
pub fn lstm_forward(
    g: &mut Graph,
    p: &Bound,
    prefix: &str,
    x: Var,
    layout: &SeqLayout,
) -> Result<Var> {
    let w_ih = p.var(&format!("{prefix}.w_ih"))?;
    let w_hh = p.var(&format!("{prefix}.w_hh"))?;
    let bias = p.var(&format!("{prefix}.b"))?;
    let hidden = g.value(w_hh).rows();
    let batch = layout.batch();

    let xw = g.matmul(x, w_ih)?;
    let xw = g.add(xw, bias)?;
    let mut c = g.constant(Tensor::zeros(batch, hidden));
    let mut h = None;
    let mut outs = Vec::with_capacity(layout.t_max());
    for t in 0..layout.t_max() {
        let gi = g.slice_rows(xw, t * batch, (t + 1) * batch)?;
        let gates = match h {
            Some(h) => {
                let hw = g.matmul(h, w_hh)?;
                g.add(gi, hw)?
            }
            None => gi,
        };
        let hc = g.lstm_cell(gates, c)?;
        let ht = g.slice_cols(hc, 0, hidden)?;
        c = g.slice_cols(hc, hidden, 2 * hidden)?;
        h = Some(ht);
        outs.push(ht);
    }
    g.concat_rows(&outs)
}

/// Bidirectional LSTM layer: `[forward | backward]` states, `rows x 2 hidden`.
pub fn bilstm(
    g: &mut Graph,
    p: &Bound,
    prefix: &str,
    x: Var,
    layout: &SeqLayout,
    reversal: &[usize],
) -> Result<Var> {
    let fw = lstm_forward(g, p, &format!("{prefix}.fw"), x, layout)?;
    let xr = g.gather_rows(x, reversal)?;
    let bw = lstm_forward(g, p, &format!("{prefix}.bw"), xr, layout)?;
    let bw = g.gather_rows(bw, reversal)?;
    g.concat_cols(&[fw, bw])
}

/// Adam with global gradient-norm clipping.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub clip_norm: f64,
    pub step: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl Adam {
    pub fn new(params: &ParamSet, learning_rate: f64, clip_norm: f64) -> Self {
        let zeros: Vec<Tensor> = params
            .values()
            .iter()
            .map(|t| Tensor::zeros(t.rows(), t.cols()))
            .collect();
        Adam {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            clip_norm,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// Applies one update; returns the gradient norm before clipping.
    pub fn update(&mut self, params: &mut ParamSet, grads: &[Tensor]) -> Result<f64> {
        if grads.len() != params.len() || self.m.len() != params.len() {
            return Err(Error::contract(
                "optimizer: gradient count differs from parameter count",
            ));
        }
        let norm = grads
            .iter()
            .flat_map(|g| g.data())
            .map(|x| x * x)
            .sum::<f64>()
            .sqrt();
        if !norm.is_finite() {
            return Err(Error::NonFinite {
                op: "gradient norm",
            });
        }
        let scale = if self.clip_norm > 0.0 && norm > self.clip_norm {
            self.clip_norm / norm
        } else {
            1.0
        };
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (((p, g), m), v) in params
            .values_mut()
            .iter_mut()
            .zip(grads)
            .zip(&mut self.m)
            .zip(&mut self.v)
        {
            for (((p, &g), m), v) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                let g = g * scale;
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                *p -= self.learning_rate * (*m / bc1) / ((*v / bc2).sqrt() + self.epsilon);
            }
        }
        Ok(norm)
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::autodiff::grad_check;

    #[test]
    fn reversal_is_an_involution_that_keeps_padding() {
        let layout = SeqLayout::new(vec![3, 1, 2]).unwrap();
        let rev = layout.reversal();
        for (i, &j) in rev.iter().enumerate() {
            assert_eq!(rev[j], i);
        }
        // sequence 0: rows 0,3,6 reversed
        assert_eq!(rev[0], 6);
        assert_eq!(rev[3], 3);
        // sequence 1 has length 1, its padding rows are fixed
        assert_eq!(rev[4], 4);
        assert_eq!(rev[7], 7);
    }

    #[test]
    fn pack_unpack_round_trip() {
        let a = Tensor::from_fn(3, 2, |r, c| (r * 2 + c) as f64);
        let b = Tensor::from_fn(1, 2, |_, c| 10.0 + c as f64);
        let layout = SeqLayout::new(vec![3, 1]).unwrap();
        let packed = layout.pack(&[&a, &b]).unwrap();
        assert_eq!(layout.unpack(&packed, 0), a);
        assert_eq!(layout.unpack(&packed, 1), b);
        assert_eq!(packed.row(3), &[0.0, 0.0]);
        let w = layout.sequence_weights();
        assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn padded_batch_matches_single_sequences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut set = ParamSet::new();
        init_lstm(&mut set, "l.fw", 3, 4, &mut rng);
        init_lstm(&mut set, "l.bw", 3, 4, &mut rng);
        let seqs: Vec<Tensor> = [5, 2, 4]
            .iter()
            .map(|&m| uniform_init(m, 3, 1.0, &mut rng))
            .collect();
        let run = |refs: &[&Tensor]| {
            let layout = SeqLayout::new(refs.iter().map(|t| t.rows()).collect()).unwrap();
            let mut g = Graph::new();
            let p = set.bind_frozen(&mut g);
            let x = g.constant(layout.pack(refs).unwrap());
            let out = bilstm(&mut g, &p, "l", x, &layout, &layout.reversal()).unwrap();
            let packed = g.value(out).clone();
            (0..refs.len())
                .map(|b| layout.unpack(&packed, b))
                .collect::<Vec<_>>()
        };
        let batched = run(&seqs.iter().collect::<Vec<_>>());
        for (s, b) in seqs.iter().zip(&batched) {
            let single = run(&[s]);
            assert!(single[0].max_abs_diff(b) < 1e-12);
        }
    }

    #[test]
    fn bilstm_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut set = ParamSet::new();
        init_lstm(&mut set, "l.fw", 2, 3, &mut rng);
        init_lstm(&mut set, "l.bw", 2, 3, &mut rng);
        let a = uniform_init(4, 2, 1.0, &mut rng);
        let b = uniform_init(2, 2, 1.0, &mut rng);
        let layout = SeqLayout::new(vec![4, 2]).unwrap();
        let packed = layout.pack(&[&a, &b]).unwrap();
        let weights = layout.sequence_weights();
        let report = grad_check(set.values(), 1e-5, 1e-4, |g, vars| {
            let bound = set.bind_existing(vars)?;
            let x = g.constant(packed.clone());
            let out = bilstm(g, &bound, "l", x, &layout, &layout.reversal())?;
            let sq = g.mul(out, out)?;
            g.weighted_sum(sq, &weights)
        })
        .unwrap();
        assert!(report.passed(), "{report:?}");
    }

    #[test]
    fn adam_clips_and_descends() {
        let mut set = ParamSet::new();
        set.insert("x", Tensor::row_vector(&[3.0, -4.0]));
        let mut opt = Adam::new(&set, 0.1, 1.0);
        let norm = opt
            .update(&mut set, &[Tensor::row_vector(&[30.0, -40.0])])
            .unwrap();
        assert_eq!(norm, 50.0);
        let x = set.get("x").unwrap();
        // first Adam step moves each coordinate by lr against the gradient sign
        assert!((x.get(0, 0) - 2.9).abs() < 1e-7);
        assert!((x.get(0, 1) + 3.9).abs() < 1e-7);
    }

    #[test]
    fn param_set_remove_reindexes() {
        let mut set = ParamSet::new();
        set.insert("a", Tensor::scalar(1.0));
        set.insert("b", Tensor::scalar(2.0));
        set.insert("c", Tensor::scalar(3.0));
        assert_eq!(set.remove("a").unwrap().item(), 1.0);
        assert_eq!(set.get("c").unwrap().item(), 3.0);
        assert_eq!(set.names(), &["b".to_string(), "c".to_string()]);
    }
}
