//! Classifier and querier networks.
//!
//! Both are plain ReLU MLPs over the masked history vector. The classifier
//! ends in `C` logits; the querier ends in `|Q|` scores whose argmax is the
//! next query. During training the argmax goes through
//! [`straight_through_select`] so the classifier loss reaches the querier.

use std::io::{Read, Write};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diffcore::{Tape, Tensor, Var};
use crate::query::{History, Posterior, QuerySet};
use crate::{Error, Result};

/// Hidden widths used when a config does not override them.
pub const DEFAULT_HIDDEN: [usize; 2] = [512, 512];

#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    /// `in × out`
    pub weight: Tensor,
    /// `1 × out`
    pub bias: Tensor,
}

/// Fully connected ReLU network; no activation after the last layer.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    sizes: Vec<usize>,
    layers: Vec<Linear>,
}

impl Mlp {
    /// Uniform `±1/sqrt(fan_in)` initialization for weights and biases.
    pub fn new<R: Rng>(sizes: &[usize], rng: &mut R) -> Result<Self> {
        validate_sizes(sizes)?;
        let layers = sizes
            .windows(2)
            .map(|w| {
                let bound = 1.0 / (w[0] as f64).sqrt();
                Linear {
                    weight: Tensor::uniform(w[0], w[1], bound, rng),
                    bias: Tensor::uniform(1, w[1], bound, rng),
                }
            })
            .collect();
        Ok(Mlp {
            sizes: sizes.to_vec(),
            layers,
        })
    }

    /// Rebuilds a network from parameters in declaration order
    /// (`w0, b0, w1, b1, ...`).
    pub fn from_parameters(sizes: &[usize], mut params: impl Iterator<Item = Tensor>) -> Result<Self> {
        validate_sizes(sizes)?;
        let mut layers = Vec::new();
        for w in sizes.windows(2) {
            let weight = params.next().ok_or_else(|| Error::CorruptCheckpoint("missing weight".into()))?;
            let bias = params.next().ok_or_else(|| Error::CorruptCheckpoint("missing bias".into()))?;
            if weight.shape() != [w[0], w[1]] || bias.shape() != [1, w[1]] {
                return Err(Error::ShapeMismatch {
                    op: "from_parameters",
                    lhs: weight.shape().to_vec(),
                    rhs: vec![w[0], w[1]],
                });
            }
            layers.push(Linear { weight, bias });
        }
        Ok(Mlp {
            sizes: sizes.to_vec(),
            layers,
        })
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn input_width(&self) -> usize {
        self.sizes[0]
    }

    pub fn output_width(&self) -> usize {
        *self.sizes.last().expect("validated sizes")
    }

    pub fn num_parameters(&self) -> usize {
        self.layers.iter().map(|l| l.weight.len() + l.bias.len()).sum()
    }

    pub fn layers(&self) -> &[Linear] {
        &self.layers
    }

    pub fn parameters(&self) -> Vec<&Tensor> {
        self.layers.iter().flat_map(|l| [&l.weight, &l.bias]).collect()
    }

    pub fn parameters_mut(&mut self) -> Vec<&mut Tensor> {
        self.layers.iter_mut().flat_map(|l| [&mut l.weight, &mut l.bias]).collect()
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        if x.cols() != self.input_width() || x.shape().len() != 2 {
            return Err(Error::ShapeMismatch {
                op: "mlp_forward",
                lhs: x.shape().to_vec(),
                rhs: vec![self.input_width()],
            });
        }
        Ok(())
    }

    /// Forward pass without recording.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.check_input(x)?;
        let mut h = x.clone();
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            h = h.matmul(&layer.weight)?.add_row(&layer.bias)?;
            if i < last {
                h = h.relu();
            }
        }
        Ok(h)
    }

    /// Records the forward pass on `tape`. Returns the output and the
    /// parameter leaves in declaration order.
    pub fn forward_tape(&self, tape: &mut Tape, x: Var) -> Result<(Var, Vec<Var>)> {
        self.check_input(tape.value(x))?;
        let mut params = Vec::with_capacity(2 * self.layers.len());
        let mut h = x;
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            let w = tape.param(layer.weight.clone());
            let b = tape.param(layer.bias.clone());
            params.extend([w, b]);
            let z = tape.matmul(h, w)?;
            h = tape.add_bias(z, b)?;
            if i < last {
                h = tape.relu(h);
            }
        }
        Ok((h, params))
    }
}

fn validate_sizes(sizes: &[usize]) -> Result<()> {
    if sizes.len() < 2 || sizes.contains(&0) {
        return Err(Error::InvalidConfig(format!("invalid layer sizes {sizes:?}")));
    }
    Ok(())
}

fn layer_sizes(input: usize, hidden: &[usize], output: usize) -> Vec<usize> {
    let mut sizes = Vec::with_capacity(hidden.len() + 2);
    sizes.push(input);
    sizes.extend_from_slice(hidden);
    sizes.push(output);
    sizes
}

/// Maps a masked history to label logits.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassifierNet {
    mlp: Mlp,
}

impl ClassifierNet {
    pub fn new<R: Rng>(num_queries: usize, hidden: &[usize], num_labels: usize, rng: &mut R) -> Result<Self> {
        Ok(ClassifierNet {
            mlp: Mlp::new(&layer_sizes(num_queries, hidden, num_labels), rng)?,
        })
    }

    pub fn from_mlp(mlp: Mlp) -> Self {
        ClassifierNet { mlp }
    }

    pub fn mlp(&self) -> &Mlp {
        &self.mlp
    }

    pub fn mlp_mut(&mut self) -> &mut Mlp {
        &mut self.mlp
    }

    pub fn num_queries(&self) -> usize {
        self.mlp.input_width()
    }

    pub fn num_labels(&self) -> usize {
        self.mlp.output_width()
    }

    /// `m × |Q|` masked histories to `m × C` logits.
    pub fn logits(&self, masked: &Tensor) -> Result<Tensor> {
        self.mlp.forward(masked)
    }

    pub fn posterior(&self, history: &History) -> Result<Posterior> {
        let x = Tensor::matrix(1, history.num_queries(), history.to_masked_vector())?;
        Posterior::from_logits(self.logits(&x)?.data())
    }

    /// Posteriors for a batch of histories, one forward pass.
    pub fn posteriors(&self, histories: &[History]) -> Result<Vec<Posterior>> {
        if histories.is_empty() {
            return Ok(Vec::new());
        }
        let rows: Vec<Vec<f64>> = histories.iter().map(|h| h.to_masked_vector()).collect();
        let logits = self.logits(&Tensor::from_rows(&rows)?)?;
        (0..logits.rows()).map(|i| Posterior::from_logits(logits.row(i))).collect()
    }
}

/// Equivalent to [`ClassifierNet::logits`].
pub fn classifier_forward(net: &ClassifierNet, masked: &Tensor) -> Result<Tensor> {
    net.logits(masked)
}

/// Maps a masked history to one score per query.
#[derive(Clone, Debug, PartialEq)]
pub struct QuerierNet {
    mlp: Mlp,
}

impl QuerierNet {
    pub fn new<R: Rng>(num_queries: usize, hidden: &[usize], rng: &mut R) -> Result<Self> {
        Ok(QuerierNet {
            mlp: Mlp::new(&layer_sizes(num_queries, hidden, num_queries), rng)?,
        })
    }

    pub fn from_mlp(mlp: Mlp) -> Result<Self> {
        if mlp.input_width() != mlp.output_width() {
            return Err(Error::ShapeMismatch {
                op: "querier",
                lhs: vec![mlp.input_width()],
                rhs: vec![mlp.output_width()],
            });
        }
        Ok(QuerierNet { mlp })
    }

    pub fn mlp(&self) -> &Mlp {
        &self.mlp
    }

    pub fn mlp_mut(&mut self) -> &mut Mlp {
        &mut self.mlp
    }

    pub fn num_queries(&self) -> usize {
        self.mlp.input_width()
    }

    pub fn scores(&self, masked: &Tensor) -> Result<Tensor> {
        self.mlp.forward(masked)
    }

    pub fn history_scores(&self, history: &History) -> Result<Vec<f64>> {
        let x = Tensor::matrix(1, history.num_queries(), history.to_masked_vector())?;
        Ok(self.scores(&x)?.into_data())
    }

    /// Highest-scoring unasked query.
    pub fn choose(&self, history: &History) -> Result<usize> {
        let scores = self.history_scores(history)?;
        masked_argmax(&scores, history.mask()).ok_or(Error::QueriesExhausted)
    }

    /// [`QuerierNet::choose`] for many histories in one forward pass.
    pub fn choose_batch(&self, histories: &[&History]) -> Result<Vec<usize>> {
        if histories.is_empty() {
            return Ok(Vec::new());
        }
        let rows: Vec<Vec<f64>> = histories.iter().map(|h| h.to_masked_vector()).collect();
        let scores = self.scores(&Tensor::from_rows(&rows)?)?;
        histories
            .iter()
            .enumerate()
            .map(|(i, h)| masked_argmax(scores.row(i), h.mask()).ok_or(Error::QueriesExhausted))
            .collect()
    }
}

/// Argmax over entries whose mask is false; the lowest index wins ties.
pub fn masked_argmax(scores: &[f64], asked: &[bool]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, (&s, &masked)) in scores.iter().zip(asked).enumerate() {
        if masked {
            continue;
        }
        if best.is_none_or(|b| s > scores[b]) {
            best = Some(i);
        }
    }
    best
}

/// Exact one-hot of the row argmax going forward, gradient of
/// `softmax(scores / tau)` going back. With `already_asked` set, masked
/// entries can never be selected.
pub fn straight_through_select(tape: &mut Tape, scores: Var, tau: f64, already_asked: Option<&[bool]>) -> Result<Var> {
    tape.straight_through(scores, tau, already_asked)
}

/// `history + one_hot ⊙ answers`: appends the selected query's answer to the
/// masked history while staying differentiable in `one_hot`.
pub fn differentiable_history_update(tape: &mut Tape, history: Var, one_hot: Var, answers: Var) -> Result<Var> {
    let picked = tape.mul(one_hot, answers)?;
    tape.add(history, picked)
}

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"VIPC";
pub const CHECKPOINT_VERSION: u32 = 1;

/// A trained classifier/querier pair with the metadata needed to serve it.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub queries: QuerySet,
    pub labels: Vec<String>,
    pub classifier: ClassifierNet,
    pub querier: QuerierNet,
    pub config_fingerprint: String,
}

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    queries: QuerySet,
    labels: Vec<String>,
    classifier_sizes: Vec<usize>,
    querier_sizes: Vec<usize>,
    config_fingerprint: String,
    num_parameters: usize,
}

impl Checkpoint {
    pub fn new(
        queries: QuerySet,
        labels: Vec<String>,
        classifier: ClassifierNet,
        querier: QuerierNet,
        config_fingerprint: String,
    ) -> Result<Self> {
        let q = queries.len();
        if classifier.num_queries() != q || querier.num_queries() != q {
            return Err(Error::QuerySetMismatch(format!(
                "networks expect {} / {} queries, query set has {q}",
                classifier.num_queries(),
                querier.num_queries()
            )));
        }
        if classifier.num_labels() != labels.len() {
            return Err(Error::QuerySetMismatch(format!(
                "classifier has {} outputs for {} labels",
                classifier.num_labels(),
                labels.len()
            )));
        }
        Ok(Checkpoint {
            queries,
            labels,
            classifier,
            querier,
            config_fingerprint,
        })
    }

    /// Layout: magic `VIPC`, version (u32 LE), header length (u64 LE), JSON
    /// header, then every parameter as f64 LE, classifier first, each network
    /// in declaration order.
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = CheckpointHeader {
            queries: self.queries.clone(),
            labels: self.labels.clone(),
            classifier_sizes: self.classifier.mlp().sizes().to_vec(),
            querier_sizes: self.querier.mlp().sizes().to_vec(),
            config_fingerprint: self.config_fingerprint.clone(),
            num_parameters: self.classifier.mlp().num_parameters() + self.querier.mlp().num_parameters(),
        };
        let json = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(16 + json.len() + 8 * header.num_parameters);
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for p in self.classifier.mlp().parameters().into_iter().chain(self.querier.mlp().parameters()) {
            for v in p.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let corrupt = |msg: &str| Error::CorruptCheckpoint(msg.to_string());
        if bytes.len() < 16 {
            return Err(corrupt("file shorter than the fixed preamble"));
        }
        if &bytes[..4] != CHECKPOINT_MAGIC {
            return Err(corrupt("bad magic bytes"));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
        if version != CHECKPOINT_VERSION {
            return Err(Error::VersionMismatch {
                found: version,
                expected: CHECKPOINT_VERSION,
            });
        }
        let header_len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let body = &bytes[16..];
        if body.len() < header_len {
            return Err(corrupt("truncated header"));
        }
        let header: CheckpointHeader =
            serde_json::from_slice(&body[..header_len]).map_err(|e| Error::CorruptCheckpoint(e.to_string()))?;
        let blob = &body[header_len..];
        if blob.len() != 8 * header.num_parameters {
            return Err(corrupt("parameter blob has the wrong length"));
        }
        let mut values = blob.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")));
        let mut take = |sizes: &[usize]| -> Result<Mlp> {
            validate_sizes(sizes).map_err(|e| Error::CorruptCheckpoint(e.to_string()))?;
            let mut tensors = Vec::new();
            for w in sizes.windows(2) {
                let weight: Vec<f64> = values.by_ref().take(w[0] * w[1]).collect();
                let bias: Vec<f64> = values.by_ref().take(w[1]).collect();
                if weight.len() != w[0] * w[1] || bias.len() != w[1] {
                    return Err(Error::CorruptCheckpoint("parameter count does not match layer sizes".into()));
                }
                tensors.push(Tensor::matrix(w[0], w[1], weight)?);
                tensors.push(Tensor::matrix(1, w[1], bias)?);
            }
            Mlp::from_parameters(sizes, tensors.into_iter())
        };
        let classifier = ClassifierNet::from_mlp(take(&header.classifier_sizes)?);
        let querier = QuerierNet::from_mlp(take(&header.querier_sizes)?)?;
        if values.next().is_some() {
            return Err(corrupt("parameter count does not match layer sizes"));
        }
        Checkpoint::new(header.queries, header.labels, classifier, querier, header.config_fingerprint)
            .map_err(|e| Error::CorruptCheckpoint(e.to_string()))
    }

    pub fn save(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        let mut file = std::fs::File::create(path)?;
        file.write_all(&self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        Checkpoint::from_bytes(&bytes)
    }
}

pub fn serialize_checkpoint(ckpt: &Checkpoint) -> Result<Vec<u8>> {
    ckpt.to_bytes()
}

pub fn load_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    Checkpoint::from_bytes(bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::query::AnswerDomain;
    use crate::rng::stream_rng;
    use proptest::prelude::*;

    fn row(v: &[f64]) -> Tensor {
        Tensor::matrix(1, v.len(), v.to_vec()).unwrap()
    }

    #[test]
    fn classifier_shapes_and_purity() {
        let mut rng = stream_rng(1, 0);
        let net = ClassifierNet::new(4, &[8], 2, &mut rng).unwrap();
        let x = row(&[1.0, 0.0, -1.0, 0.0]);
        let a = classifier_forward(&net, &x).unwrap();
        assert_eq!(a.shape(), &[1, 2]);
        assert_eq!(a, net.logits(&x).unwrap());
        let p = net.posterior(&History::empty(4)).unwrap();
        assert!((p.probs().iter().sum::<f64>() - 1.0).abs() < 1e-9);
        assert!(net.logits(&row(&[1.0, 2.0])).is_err());
    }

    #[test]
    fn select_examples() {
        let mut t = Tape::new();
        let s = t.param(row(&[0.1, 2.0, 0.5]));
        let h = straight_through_select(&mut t, s, 1.0, None).unwrap();
        assert_eq!(t.value(h).data(), &[0.0, 1.0, 0.0]);
        let s = t.param(row(&[1.0, 1.0]));
        let h = straight_through_select(&mut t, s, 1.0, None).unwrap();
        assert_eq!(t.value(h).data(), &[1.0, 0.0]);
    }

    #[test]
    fn history_update_examples() {
        let mut t = Tape::new();
        let hist = t.constant(row(&[0.0, 0.0, 0.0]));
        let one_hot = t.constant(row(&[0.0, 1.0, 0.0]));
        let answers = t.constant(row(&[-1.0, 1.0, -1.0]));
        let updated = differentiable_history_update(&mut t, hist, one_hot, answers).unwrap();
        assert_eq!(t.value(updated).data(), &[0.0, 1.0, 0.0]);
        let again = differentiable_history_update(&mut t, updated, one_hot, answers).unwrap();
        assert_eq!(t.value(again).data(), &[0.0, 2.0, 0.0]);
        let zero = t.constant(row(&[0.0, 0.0, 0.0]));
        let same = differentiable_history_update(&mut t, updated, zero, answers).unwrap();
        assert_eq!(t.value(same).data(), t.value(updated).data());
    }

    #[test]
    fn querier_choice_respects_mask() {
        let scores = [5.0, 1.0, 0.0];
        assert_eq!(masked_argmax(&scores, &[false, false, false]), Some(0));
        assert_eq!(masked_argmax(&scores, &[true, false, false]), Some(1));
        assert_eq!(masked_argmax(&scores, &[true, true, true]), None);
    }

    fn checkpoint(seed: u64) -> Checkpoint {
        let mut rng = stream_rng(seed, 0);
        let queries = QuerySet::uniform(["a", "b", "c"], AnswerDomain::BinaryPM1).unwrap();
        Checkpoint::new(
            queries,
            vec!["x".into(), "y".into()],
            ClassifierNet::new(3, &[5, 4], 2, &mut rng).unwrap(),
            QuerierNet::new(3, &[6], &mut rng).unwrap(),
            "fp".into(),
        )
        .unwrap()
    }

    #[test]
    fn checkpoint_round_trip_and_errors() {
        for seed in 0..4 {
            let ckpt = checkpoint(seed);
            let bytes = serialize_checkpoint(&ckpt).unwrap();
            assert_eq!(&bytes[..4], b"VIPC");
            assert_eq!(load_checkpoint(&bytes).unwrap(), ckpt);

            let truncated = &bytes[..bytes.len() - 3];
            assert!(matches!(load_checkpoint(truncated), Err(Error::CorruptCheckpoint(_))));
            assert!(matches!(load_checkpoint(&bytes[..10]), Err(Error::CorruptCheckpoint(_))));

            let mut wrong = bytes.clone();
            wrong[4] = 9;
            assert!(matches!(load_checkpoint(&wrong), Err(Error::VersionMismatch { found: 9, .. })));
        }
    }

    #[test]
    fn checkpoint_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.vipc");
        let ckpt = checkpoint(11);
        ckpt.save(&path).unwrap();
        assert_eq!(Checkpoint::load(&path).unwrap(), ckpt);
    }

    proptest! {
        #[test]
        fn forward_is_exact_one_hot_and_scale_invariant(
            scores in prop::collection::vec(-10.0f64..10.0, 1..12),
            factor in 0.01f64..100.0,
            tau in 0.05f64..5.0,
        ) {
            let mut t = Tape::new();
            let s = t.constant(row(&scores));
            let h = straight_through_select(&mut t, s, tau, None).unwrap();
            let scaled: Vec<f64> = scores.iter().map(|v| v * factor).collect();
            let s2 = t.constant(row(&scaled));
            let h2 = straight_through_select(&mut t, s2, tau, None).unwrap();
            let out = t.value(h).data().to_vec();
            prop_assert_eq!(out.iter().filter(|&&v| v == 1.0).count(), 1);
            prop_assert_eq!(out.iter().filter(|&&v| v == 0.0).count(), scores.len() - 1);
            prop_assert_eq!(&out, &t.value(h2).data().to_vec());
        }

        #[test]
        fn masked_selection_avoids_asked(
            scores in prop::collection::vec(-10.0f64..10.0, 2..12),
            mask_bits in prop::collection::vec(prop::bool::ANY, 12),
        ) {
            let n = scores.len();
            let mut mask = mask_bits[..n].to_vec();
            if mask.iter().all(|&m| m) {
                mask[0] = false;
            }
            let mut t = Tape::new();
            let s = t.constant(row(&scores));
            let h = straight_through_select(&mut t, s, 1.0, Some(&mask)).unwrap();
            let picked = t.value(h).data().iter().position(|&v| v == 1.0).unwrap();
            prop_assert!(!mask[picked]);
        }
    }
}
