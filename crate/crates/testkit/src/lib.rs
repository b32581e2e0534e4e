//! Brute-force reference computations for tests.
//!
//! Everything here works on an explicit joint table `P(y, x)` over labels
//! and complete answer tuples, with no independence assumption and no
//! dependency on the crates under test.

/// Joint distribution over a label and `arities.len()` discrete answers.
///
/// `prob[y][code]` where `code` is the mixed-radix index of the answer tuple
/// (first query least significant).
#[derive(Clone, Debug)]
pub struct JointTable {
    pub arities: Vec<usize>,
    pub prob: Vec<Vec<f64>>,
}

/// Partial assignment: `Some(a)` is an observed answer index.
pub type Evidence = [Option<usize>];

impl JointTable {
    pub fn num_labels(&self) -> usize {
        self.prob.len()
    }

    pub fn num_queries(&self) -> usize {
        self.arities.len()
    }

    pub fn num_tuples(&self) -> usize {
        self.arities.iter().product()
    }

    /// Answer indices of tuple `code`.
    pub fn decode(&self, mut code: usize) -> Vec<usize> {
        self.arities
            .iter()
            .map(|&k| {
                let a = code % k;
                code /= k;
                a
            })
            .collect()
    }

    fn consistent(&self, tuple: &[usize], evidence: &Evidence) -> bool {
        tuple.iter().zip(evidence).all(|(a, e)| e.is_none_or(|e| e == *a))
    }

    /// `P(y, evidence)` for every `y`.
    pub fn label_mass(&self, evidence: &Evidence) -> Vec<f64> {
        let mut out = vec![0.0; self.num_labels()];
        for code in 0..self.num_tuples() {
            let t = self.decode(code);
            if self.consistent(&t, evidence) {
                for (y, o) in out.iter_mut().enumerate() {
                    *o += self.prob[y][code];
                }
            }
        }
        out
    }

    /// `P(Y | evidence)`; `None` when the evidence has probability zero.
    pub fn posterior(&self, evidence: &Evidence) -> Option<Vec<f64>> {
        let mass = self.label_mass(evidence);
        let z: f64 = mass.iter().sum();
        (z > 0.0).then(|| mass.into_iter().map(|m| m / z).collect())
    }

    /// `I(q; Y | evidence)` in bits, summing `p log p(y,a|s) / (p(y|s) p(a|s))`
    /// over the joint directly.
    pub fn conditional_mi(&self, q: usize, evidence: &Evidence) -> f64 {
        let c = self.num_labels();
        let k = self.arities[q];
        let mut joint = vec![vec![0.0; k]; c];
        for code in 0..self.num_tuples() {
            let t = self.decode(code);
            if self.consistent(&t, evidence) {
                for (y, row) in joint.iter_mut().enumerate() {
                    row[t[q]] += self.prob[y][code];
                }
            }
        }
        let z: f64 = joint.iter().flatten().sum();
        if z <= 0.0 {
            return 0.0;
        }
        let py: Vec<f64> = joint.iter().map(|r| r.iter().sum::<f64>() / z).collect();
        let pa: Vec<f64> = (0..k).map(|a| joint.iter().map(|r| r[a]).sum::<f64>() / z).collect();
        let mut mi = 0.0;
        for y in 0..c {
            for a in 0..k {
                let p = joint[y][a] / z;
                if p > 0.0 {
                    mi += p * (p / (py[y] * pa[a])).log2();
                }
            }
        }
        mi
    }

    /// `E_{X | s}[ KL( P(Y | X) || P(Y | q(X), s) ) ]` in bits.
    pub fn expected_kl(&self, q: usize, evidence: &Evidence) -> f64 {
        let mut total = 0.0;
        let mut z = 0.0;
        for code in 0..self.num_tuples() {
            let t = self.decode(code);
            if !self.consistent(&t, evidence) {
                continue;
            }
            let px: f64 = (0..self.num_labels()).map(|y| self.prob[y][code]).sum();
            if px <= 0.0 {
                continue;
            }
            z += px;
            let full: Vec<Option<usize>> = t.iter().map(|&a| Some(a)).collect();
            let p_full = self.posterior(&full).expect("positive mass");
            let mut partial = evidence.to_vec();
            partial[q] = Some(t[q]);
            let p_part = self.posterior(&partial).expect("positive mass");
            let kl: f64 = p_full
                .iter()
                .zip(&p_part)
                .filter(|(p, _)| **p > 0.0)
                .map(|(p, r)| p * (p / r).log2())
                .sum();
            total += px * kl;
        }
        if z > 0.0 {
            total / z
        } else {
            0.0
        }
    }
}

/// Joint table of a conditional-independence model: `prior[y]` and
/// `cond[q][y][a] = P(answer a to q | y)`.
pub fn joint_from_ci(prior: &[f64], cond: &[Vec<Vec<f64>>]) -> JointTable {
    let arities: Vec<usize> = cond.iter().map(|t| t[0].len()).collect();
    let mut table = JointTable {
        arities,
        prob: vec![Vec::new(); prior.len()],
    };
    let n = table.num_tuples();
    for (y, &py) in prior.iter().enumerate() {
        let row = (0..n)
            .map(|code| {
                let t = table.decode(code);
                t.iter().enumerate().fold(py, |acc, (q, &a)| acc * cond[q][y][a])
            })
            .collect();
        table.prob[y] = row;
    }
    table
}

/// Dense layer with a row-major `n_in x n_out` weight matrix.
#[derive(Clone, Debug)]
pub struct PlainLayer {
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
    pub n_in: usize,
    pub n_out: usize,
}

/// ReLU MLP evaluated with explicit loops.
#[derive(Clone, Debug)]
pub struct PlainMlp {
    pub layers: Vec<PlainLayer>,
}

impl PlainMlp {
    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        let mut h = x.to_vec();
        let last = self.layers.len() - 1;
        for (l, layer) in self.layers.iter().enumerate() {
            let mut out = layer.bias.clone();
            for (i, &hi) in h.iter().enumerate() {
                for (j, o) in out.iter_mut().enumerate() {
                    *o += hi * layer.weight[i * layer.n_out + j];
                }
            }
            if l < last {
                out.iter_mut().for_each(|v| *v = v.max(0.0));
            }
            h = out;
        }
        h
    }

    pub fn num_parameters(&self) -> usize {
        self.layers.iter().map(|l| l.weight.len() + l.bias.len()).sum()
    }

    /// Parameter `k` in layer order, weights before biases.
    pub fn parameter_mut(&mut self, mut k: usize) -> &mut f64 {
        for layer in &mut self.layers {
            if k < layer.weight.len() {
                return &mut layer.weight[k];
            }
            k -= layer.weight.len();
            if k < layer.bias.len() {
                return &mut layer.bias[k];
            }
            k -= layer.bias.len();
        }
        panic!("parameter index out of range")
    }
}

/// `softmax(v / tau)`; `-inf` entries get probability zero.
pub fn softmax(v: &[f64], tau: f64) -> Vec<f64> {
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = v.iter().map(|x| if *x == f64::NEG_INFINITY { 0.0 } else { ((x - m) / tau).exp() }).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|x| x / z).collect()
}

/// `-ln softmax(logits)[label]`.
pub fn cross_entropy(logits: &[f64], label: usize) -> f64 {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + logits.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
    lse - logits[label]
}

/// One training example: full answers, label, masked history, asked flags.
#[derive(Clone, Debug)]
pub struct PlainExample {
    pub answers: Vec<f64>,
    pub label: usize,
    pub history: Vec<f64>,
    pub asked: Vec<bool>,
}

/// Mean loss where `select(i, scores)` returns the selection vector for
/// example `i`. The selected answers are added to the history before the
/// classifier runs; already-asked coordinates contribute nothing.
pub fn plain_vip_loss(
    classifier: &PlainMlp,
    querier: &PlainMlp,
    batch: &[PlainExample],
    select: &mut dyn FnMut(usize, &[f64]) -> Vec<f64>,
) -> f64 {
    let mut total = 0.0;
    for (i, ex) in batch.iter().enumerate() {
        let scores = querier.forward(&ex.history);
        let z = select(i, &scores);
        let updated: Vec<f64> = (0..ex.history.len())
            .map(|j| ex.history[j] + if ex.asked[j] { 0.0 } else { z[j] * ex.answers[j] })
            .collect();
        total += cross_entropy(&classifier.forward(&updated), ex.label);
    }
    total / batch.len() as f64
}

/// Scores with asked entries replaced by `-inf`, unless every entry is asked.
pub fn mask_scores(scores: &[f64], asked: &[bool]) -> Vec<f64> {
    if asked.iter().all(|&a| a) {
        return scores.to_vec();
    }
    scores
        .iter()
        .zip(asked)
        .map(|(&s, &a)| if a { f64::NEG_INFINITY } else { s })
        .collect()
}

/// One-hot of the first maximum.
pub fn hard_argmax(v: &[f64]) -> Vec<f64> {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    let mut out = vec![0.0; v.len()];
    out[best] = 1.0;
    out
}

/// Central difference `(f(x + h) - f(x - h)) / 2h` of `f` along
/// coordinate `i`.
pub fn central_difference(f: &mut dyn FnMut(&[f64]) -> f64, x: &[f64], i: usize, h: f64) -> f64 {
    let mut xp = x.to_vec();
    xp[i] += h;
    let mut xm = x.to_vec();
    xm[i] -= h;
    (f(&xp) - f(&xm)) / (2.0 * h)
}

/// `|a - b| / max(|a|, |b|, floor)`.
pub fn relative_error(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}
