use crate::autodiff::{CustomOp, Graph, Tensor, Var};
use crate::error::{Error, Result};

/// Output index reserved for the blank symbol; phone `i` of the inventory is `i + 1`.
pub const BLANK: usize = 0;

/// `ln(e^a + e^b)` that tolerates negative infinities.
pub fn log_add(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let (hi, lo) = if a > b { (a, b) } else { (b, a) };
    hi + (lo - hi).exp().ln_1p()
}

/// Minimum number of frames needed to emit `labels`: one per label plus a
/// separating blank between equal neighbours.
pub fn min_frames(labels: &[usize]) -> usize {
    labels.len() + labels.windows(2).filter(|w| w[0] == w[1]).count()
}

fn check_inputs(log_probs: &Tensor, labels: &[usize]) -> Result<()> {
    let symbols = log_probs.cols();
    if symbols < 2 {
        return Err(Error::contract(
            "ctc needs at least one label symbol besides blank",
        ));
    }
    if let Some(&l) = labels.iter().find(|&&l| l == BLANK || l >= symbols) {
        return Err(Error::contract(format!(
            "label {l} is blank or outside 1..{symbols}"
        )));
    }
    for (t, row) in log_probs.row_iter().enumerate() {
        let total = row
            .iter()
            .fold(f64::NEG_INFINITY, |acc, &v| log_add(acc, v));
        if !(total.abs() < 1e-6) || row.iter().any(|v| v.is_nan()) {
            return Err(Error::contract(format!(
                "frame {t} of the log-probabilities is not normalized"
            )));
        }
    }
    Ok(())
}

/// Forward and backward variables of the CTC lattice over the blank-extended label sequence.
struct Lattice {
    ext: Vec<usize>,
    alpha: Vec<Vec<f64>>,
    beta: Vec<Vec<f64>>,
}

impl Lattice {
    fn new(log_probs: &Tensor, labels: &[usize]) -> Self {
        let m = log_probs.rows();
        let mut ext = vec![BLANK; 2 * labels.len() + 1];
        for (i, &l) in labels.iter().enumerate() {
            ext[2 * i + 1] = l;
        }
        let n = ext.len();
        let skip = |s: usize| s >= 2 && ext[s] != BLANK && ext[s] != ext[s - 2];

        let mut alpha = vec![vec![f64::NEG_INFINITY; n]; m];
        alpha[0][0] = log_probs.get(0, ext[0]);
        if n > 1 {
            alpha[0][1] = log_probs.get(0, ext[1]);
        }
        for t in 1..m {
            for s in 0..n {
                let mut acc = alpha[t - 1][s];
                if s >= 1 {
                    acc = log_add(acc, alpha[t - 1][s - 1]);
                }
                if skip(s) {
                    acc = log_add(acc, alpha[t - 1][s - 2]);
                }
                alpha[t][s] = acc + log_probs.get(t, ext[s]);
            }
        }

        let mut beta = vec![vec![f64::NEG_INFINITY; n]; m];
        beta[m - 1][n - 1] = log_probs.get(m - 1, ext[n - 1]);
        if n > 1 {
            beta[m - 1][n - 2] = log_probs.get(m - 1, ext[n - 2]);
        }
        for t in (0..m - 1).rev() {
            for s in 0..n {
                let mut acc = beta[t + 1][s];
                if s + 1 < n {
                    acc = log_add(acc, beta[t + 1][s + 1]);
                }
                if s + 2 < n && skip(s + 2) {
                    acc = log_add(acc, beta[t + 1][s + 2]);
                }
                beta[t][s] = acc + log_probs.get(t, ext[s]);
            }
        }
        Lattice { ext, alpha, beta }
    }

    fn log_likelihood(&self) -> f64 {
        let last = &self.alpha[self.alpha.len() - 1];
        let n = last.len();
        if n > 1 {
            log_add(last[n - 1], last[n - 2])
        } else {
            last[0]
        }
    }

    /// Gradient of the negative log-likelihood with respect to each log-probability:
    /// minus the posterior occupancy of that symbol at that frame.
    fn gradient(&self, log_probs: &Tensor) -> Tensor {
        let ll = self.log_likelihood();
        let mut grad = Tensor::zeros(log_probs.rows(), log_probs.cols());
        for t in 0..log_probs.rows() {
            let mut occ = vec![f64::NEG_INFINITY; log_probs.cols()];
            for (s, &k) in self.ext.iter().enumerate() {
                occ[k] = log_add(occ[k], self.alpha[t][s] + self.beta[t][s]);
            }
            for (k, o) in occ.into_iter().enumerate() {
                if o > f64::NEG_INFINITY {
                    grad.set(t, k, -(o - log_probs.get(t, k) - ll).exp());
                }
            }
        }
        grad
    }
}

/// Negative log-probability of `labels` under per-frame log-probabilities
/// (`m x S`, blank at index [`BLANK`]). Returns `+inf` when the labels cannot
/// fit in `m` frames.
pub fn ctc_loss(log_probs: &Tensor, labels: &[usize]) -> Result<f64> {
    check_inputs(log_probs, labels)?;
    if log_probs.rows() == 0 {
        return Ok(if labels.is_empty() {
            0.0
        } else {
            f64::INFINITY
        });
    }
    if min_frames(labels) > log_probs.rows() {
        return Ok(f64::INFINITY);
    }
    let nll = -Lattice::new(log_probs, labels).log_likelihood();
    Ok(nll.max(0.0))
}

struct CtcOp {
    grad: Tensor,
}

impl CustomOp for CtcOp {
    fn name(&self) -> &'static str {
        "ctc_loss"
    }

    fn backward(
        &self,
        _inputs: &[&Tensor],
        _output: &Tensor,
        grad_out: &Tensor,
    ) -> Vec<Option<Tensor>> {
        let s = grad_out.item();
        vec![Some(self.grad.map(|v| v * s))]
    }
}

/// CTC loss as a graph node over `log_probs`. `None` signals an infeasible
/// labeling, which callers leave out of their averages.
pub fn ctc_loss_var(g: &mut Graph, log_probs: Var, labels: &[usize]) -> Result<Option<Var>> {
    let lp = g.value(log_probs);
    check_inputs(lp, labels)?;
    if lp.rows() == 0 || min_frames(labels) > lp.rows() {
        return Ok(None);
    }
    let lattice = Lattice::new(lp, labels);
    let loss = (-lattice.log_likelihood()).max(0.0);
    let grad = lattice.gradient(lp);
    g.custom(&[log_probs], Tensor::scalar(loss), Box::new(CtcOp { grad }))
        .map(Some)
}
