//! Frozen-feature KNN, linear probe and semi-supervised fine-tuning.

use std::cmp::Ordering;
use std::fmt;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::{encode_batch, ModelParams};
use crate::rng::{stream, DOMAIN_EVAL};
use crate::tensor::{Tape, Tensor};

pub use crate::config::ProbeConfig;

const EXTRACT_CHUNK: usize = 256;
const NORM_EPS: f64 = 1e-12;

/// Encoder outputs for a dataset, in dataset order.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureBank {
    pub features: Tensor,
    pub labels: Vec<usize>,
    pub classes: usize,
}

impl FeatureBank {
    pub fn new(features: Tensor, labels: Vec<usize>, classes: usize) -> Result<Self> {
        let (n, _) = features.dims2("FeatureBank")?;
        if n != labels.len() {
            return Err(Error::contract(format!(
                "{n} feature rows but {} labels",
                labels.len()
            )));
        }
        Ok(FeatureBank {
            features,
            labels,
            classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Rows scaled to unit L2 norm. A zero row is an error.
    pub fn normalized(&self) -> Result<Tensor> {
        let d = self.features.row_len();
        let mut out = self.features.clone();
        for (i, row) in out.data_mut().chunks_exact_mut(d.max(1)).enumerate() {
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm < NORM_EPS {
                return Err(Error::Degenerate {
                    what: "feature row",
                    index: i,
                });
            }
            row.iter_mut().for_each(|v| *v /= norm);
        }
        Ok(out)
    }

    /// CSV with a `label,f0,f1,...` header.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let io = |e| Error::io(path, e);
        let mut f = std::io::BufWriter::new(std::fs::File::create(path).map_err(io)?);
        let header: Vec<String> = (0..self.features.row_len())
            .map(|j| format!("f{j}"))
            .collect();
        writeln!(f, "label,{}", header.join(",")).map_err(io)?;
        for (i, &l) in self.labels.iter().enumerate() {
            let row: Vec<String> = self.features.row(i).iter().map(f64::to_string).collect();
            writeln!(f, "{l},{}", row.join(",")).map_err(io)?;
        }
        f.flush().map_err(io)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub protocol: String,
    pub accuracy: f64,
    pub correct: usize,
    pub n: usize,
    pub config_digest: String,
}

pub const REPORT_HEADER: &str = "protocol,accuracy,correct,n,config_digest";

impl EvalReport {
    pub fn new(protocol: impl Into<String>, predicted: &[usize], truth: &[usize]) -> Self {
        let correct = predicted.iter().zip(truth).filter(|(p, t)| p == t).count();
        let n = truth.len();
        EvalReport {
            protocol: protocol.into(),
            accuracy: if n == 0 {
                0.0
            } else {
                correct as f64 / n as f64
            },
            correct,
            n,
            config_digest: String::new(),
        }
    }

    pub fn with_digest(mut self, digest: impl Into<String>) -> Self {
        self.config_digest = digest.into();
        self
    }

    pub fn csv_line(&self) -> String {
        format!(
            "{},{},{},{},{}",
            self.protocol, self.accuracy, self.correct, self.n, self.config_digest
        )
    }

    /// Append to a CSV file, writing the header if the file is new.
    pub fn append_csv(&self, path: &Path) -> Result<()> {
        let io = |e| Error::io(path, e);
        let fresh = !path.exists();
        let mut f = std::fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(io)?;
        if fresh {
            writeln!(f, "{REPORT_HEADER}").map_err(io)?;
        }
        writeln!(f, "{}", self.csv_line()).map_err(io)
    }
}

impl fmt::Display for EvalReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}: top-1 {:.4} ({}/{})",
            self.protocol, self.accuracy, self.correct, self.n
        )?;
        if !self.config_digest.is_empty() {
            write!(f, " [config {}]", self.config_digest)?;
        }
        Ok(())
    }
}

/// Encoder-only forward (Y) over the whole dataset, no augmentation.
pub fn extract_features(params: &ModelParams, dataset: &Dataset) -> Result<FeatureBank> {
    if params.arch.input_width() != dataset.input_width() {
        return Err(Error::ArchMismatch {
            expected: format!("input width {}", dataset.input_width()),
            found: params.arch.to_string(),
        });
    }
    let flat = dataset.images.flatten_rows();
    let n = dataset.len();
    let mut data = Vec::with_capacity(n * params.arch.representation_width());
    for start in (0..n).step_by(EXTRACT_CHUNK) {
        let idx: Vec<usize> = (start..(start + EXTRACT_CHUNK).min(n)).collect();
        data.extend(encode_batch(params, &flat.select_rows(&idx))?.into_data());
    }
    FeatureBank::new(
        Tensor::new(vec![n, params.arch.representation_width()], data)?,
        dataset.labels.clone(),
        dataset.classes,
    )
}

/// Cosine KNN: majority vote among the top `k`, ties broken by summed
/// similarity, then by the smaller class id.
pub fn knn_predict(train: &FeatureBank, test: &FeatureBank, k: usize) -> Result<Vec<usize>> {
    if train.is_empty() || test.is_empty() {
        return Err(Error::contract("knn needs non-empty train and test banks"));
    }
    if k == 0 || k > train.len() {
        return Err(Error::contract(format!(
            "k = {k} must lie in [1, {}]",
            train.len()
        )));
    }
    let tr = train.normalized()?;
    let te = test.normalized()?;
    let sims = te.matmul(&tr.transpose()?)?;
    let classes = train
        .classes
        .max(train.labels.iter().max().map_or(0, |m| m + 1));
    let by_sim = |a: &(f64, usize), b: &(f64, usize)| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1));

    let mut preds = Vec::with_capacity(test.len());
    let mut cand: Vec<(f64, usize)> = Vec::with_capacity(train.len());
    for q in 0..test.len() {
        cand.clear();
        cand.extend(sims.row(q).iter().copied().zip(0..));
        if k < cand.len() {
            cand.select_nth_unstable_by(k - 1, by_sim);
        }
        let top = &mut cand[..k];
        top.sort_by(by_sim);
        let mut votes = vec![0usize; classes];
        let mut mass = vec![0.0; classes];
        for &(s, i) in top.iter() {
            votes[train.labels[i]] += 1;
            mass[train.labels[i]] += s;
        }
        let best = (0..classes)
            .max_by(|&a, &b| {
                votes[a]
                    .cmp(&votes[b])
                    .then(mass[a].partial_cmp(&mass[b]).unwrap_or(Ordering::Equal))
                    .then(b.cmp(&a))
            })
            .unwrap_or(0);
        preds.push(best);
    }
    Ok(preds)
}

pub fn knn_eval(train: &FeatureBank, test: &FeatureBank, k: usize) -> Result<EvalReport> {
    let preds = knn_predict(train, test, k)?;
    Ok(EvalReport::new(format!("knn(k={k})"), &preds, &test.labels))
}

/// SGD with momentum and coupled L2 decay.
#[derive(Debug, Clone)]
struct Sgd {
    lr: f64,
    momentum: f64,
    weight_decay: f64,
    velocity: Vec<Tensor>,
}

impl Sgd {
    fn new(cfg: &ProbeConfig, shapes: &[&[usize]]) -> Self {
        Sgd {
            lr: cfg.lr,
            momentum: cfg.momentum,
            weight_decay: cfg.weight_decay,
            velocity: shapes.iter().map(|s| Tensor::zeros(s)).collect(),
        }
    }

    fn step(&mut self, params: &mut [&mut Tensor], grads: &[Tensor]) {
        for ((p, g), vel) in params.iter_mut().zip(grads).zip(&mut self.velocity) {
            let v = vel.data_mut();
            for ((th, &gj), vj) in p.data_mut().iter_mut().zip(g.data()).zip(v.iter_mut()) {
                *vj = self.momentum * *vj + gj + self.weight_decay * *th;
                *th -= self.lr * *vj;
            }
        }
    }
}

fn epoch_batches(n: usize, batch: usize, seed: u64, tag: u64, epoch: u64) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut stream(seed, &[DOMAIN_EVAL, tag, epoch]));
    order
        .chunks_exact(batch.min(n))
        .map(<[usize]>::to_vec)
        .collect()
}

fn predict_linear(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Vec<usize>> {
    let logits = x.matmul(w)?;
    let k = b.len();
    Ok(logits
        .data()
        .chunks_exact(k)
        .map(|row| {
            let mut best = 0;
            for c in 1..k {
                if row[c] + b.data()[c] > row[best] + b.data()[best] {
                    best = c;
                }
            }
            best
        })
        .collect())
}

/// Affine + softmax classifier on frozen features. The features are never
/// differentiated, so whatever produced them is untouched.
pub fn linear_probe(
    train: &FeatureBank,
    test: &FeatureBank,
    cfg: &ProbeConfig,
    seed: u64,
) -> Result<EvalReport> {
    if train.is_empty() || test.is_empty() {
        return Err(Error::contract(
            "probe needs non-empty train and test banks",
        ));
    }
    if cfg.batch == 0 {
        return Err(Error::Config("probe.batch must be >= 1".into()));
    }
    let (n, d) = train.features.dims2("linear_probe")?;
    let first = train.features.row(0);
    if (1..n).all(|i| train.features.row(i) == first) {
        return Err(Error::Degenerate {
            what: "feature bank (constant)",
            index: 0,
        });
    }
    let k = train.classes;
    let mut w = Tensor::zeros(&[d, k]);
    let mut b = Tensor::zeros(&[k]);
    let mut opt = Sgd::new(cfg, &[&[d, k], &[k]]);
    for epoch in 0..cfg.epochs as u64 {
        for idx in epoch_batches(n, cfg.batch, seed, 0, epoch) {
            let targets: Vec<usize> = idx.iter().map(|&i| train.labels[i]).collect();
            let tape = Tape::new();
            let x = tape.leaf(train.features.select_rows(&idx));
            let (wv, bv) = (tape.leaf(w.clone()), tape.leaf(b.clone()));
            let loss = x.affine(wv, bv)?.softmax_cross_entropy(&targets)?;
            let g = tape.backward(loss)?;
            opt.step(&mut [&mut w, &mut b], &[g.wrt(wv), g.wrt(bv)]);
        }
    }
    let preds = predict_linear(&test.features, &w, &b)?;
    Ok(EvalReport::new("linear_probe", &preds, &test.labels))
}

/// `round(fraction · n_c)` indices per class, drawn with `seed`, ascending.
pub fn stratified_subset(
    labels: &[usize],
    classes: usize,
    fraction: f64,
    seed: u64,
) -> Result<Vec<usize>> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::contract(format!(
            "fraction {fraction} must lie in (0, 1]"
        )));
    }
    let mut out = Vec::new();
    for c in 0..classes {
        let mut members: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == c).collect();
        let take = (fraction * members.len() as f64).round() as usize;
        members.shuffle(&mut stream(seed, &[DOMAIN_EVAL, 1, c as u64]));
        out.extend_from_slice(&members[..take]);
    }
    out.sort_unstable();
    Ok(out)
}

/// Fine-tune encoder and a fresh head on Y using a labelled fraction of
/// `train`, then report top-1 on `test`. `params` is not modified.
///
/// The batch is `cfg.batch` capped at the largest even size the subset holds.
pub fn finetune_semi(
    params: &ModelParams,
    train: &Dataset,
    test: &Dataset,
    fraction: f64,
    epochs: usize,
    cfg: &ProbeConfig,
    seed: u64,
) -> Result<EvalReport> {
    let subset = stratified_subset(&train.labels, train.classes, fraction, seed)?;
    let batch = cfg.batch.min(subset.len() & !1);
    if batch < 2 {
        return Err(Error::contract(format!(
            "fraction {fraction} keeps {} samples, fewer than one even batch",
            subset.len()
        )));
    }
    if params.arch.input_width() != train.input_width() {
        return Err(Error::ArchMismatch {
            expected: format!("input width {}", train.input_width()),
            found: params.arch.to_string(),
        });
    }
    let flat = train.images.flatten_rows();
    let mut enc = params.clone();
    let dy = enc.arch.representation_width();
    let k = train.classes;
    let mut w = Tensor::zeros(&[dy, k]);
    let mut b = Tensor::zeros(&[k]);
    let mut shapes: Vec<Vec<usize>> = enc
        .encoder
        .iter()
        .flat_map(|l| [l.weight.shape().to_vec(), l.bias.shape().to_vec()])
        .collect();
    shapes.push(vec![dy, k]);
    shapes.push(vec![k]);
    let shape_refs: Vec<&[usize]> = shapes.iter().map(Vec::as_slice).collect();
    let mut opt = Sgd::new(cfg, &shape_refs);

    for epoch in 0..epochs as u64 {
        for local in epoch_batches(subset.len(), batch, seed, 2, epoch) {
            let idx: Vec<usize> = local.iter().map(|&i| subset[i]).collect();
            let targets: Vec<usize> = idx.iter().map(|&i| train.labels[i]).collect();
            let tape = Tape::new();
            let attached = enc.attach(&tape);
            let y = attached.encode(tape.leaf(flat.select_rows(&idx)))?;
            let (wv, bv) = (tape.leaf(w.clone()), tape.leaf(b.clone()));
            let loss = y.affine(wv, bv)?.softmax_cross_entropy(&targets)?;
            let g = tape.backward(loss)?;
            let n_enc = 2 * enc.encoder.len();
            let mut grads: Vec<Tensor> =
                attached.vars()[..n_enc].iter().map(|&v| g.wrt(v)).collect();
            grads.push(g.wrt(wv));
            grads.push(g.wrt(bv));
            if grads.iter().any(|t| !t.is_finite()) {
                return Err(Error::numeric("finetune gradient"));
            }
            let mut targets_mut: Vec<&mut Tensor> = enc
                .encoder
                .iter_mut()
                .flat_map(|l| [&mut l.weight, &mut l.bias])
                .collect();
            targets_mut.push(&mut w);
            targets_mut.push(&mut b);
            opt.step(&mut targets_mut, &grads);
        }
    }
    let y_test = extract_features(&enc, test)?;
    let preds = predict_linear(&y_test.features, &w, &b)?;
    Ok(EvalReport::new(
        format!("finetune(fraction={fraction})"),
        &preds,
        &test.labels,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Arch;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn bank(rows: &[Vec<f64>], labels: &[usize], classes: usize) -> FeatureBank {
        FeatureBank::new(Tensor::from_rows(rows).unwrap(), labels.to_vec(), classes).unwrap()
    }

    #[test]
    fn identical_point_k1() {
        let train = bank(
            &[vec![1.0, 0.0], vec![0.0, 1.0], vec![-1.0, 0.2]],
            &[0, 1, 2],
            3,
        );
        let test = bank(&[vec![0.0, 1.0]], &[1], 3);
        assert_eq!(knn_predict(&train, &test, 1).unwrap(), vec![1]);
    }

    #[test]
    fn full_k_falls_back_to_similarity_mass() {
        let train = bank(
            &[
                vec![1.0, 0.1],
                vec![1.0, -0.1],
                vec![-1.0, 0.3],
                vec![-1.0, -0.3],
            ],
            &[0, 0, 1, 1],
            2,
        );
        let test = bank(&[vec![1.0, 0.0], vec![-1.0, 0.0]], &[0, 1], 2);
        assert_eq!(knn_predict(&train, &test, 4).unwrap(), vec![0, 1]);
        // orthogonal query: equal votes and equal mass, smaller class wins
        let sym = bank(&[vec![1.0, 0.0], vec![-1.0, 0.0]], &[1, 0], 2);
        let q = bank(&[vec![0.0, 1.0]], &[0], 2);
        assert_eq!(knn_predict(&sym, &q, 2).unwrap(), vec![0]);
    }

    #[test]
    fn knn_contracts() {
        let train = bank(&[vec![1.0]], &[0], 1);
        assert!(knn_predict(&train, &train, 2).is_err());
        assert!(knn_predict(&train, &train, 0).is_err());
        let zero = bank(&[vec![0.0, 0.0]], &[0], 1);
        assert!(matches!(
            knn_predict(&zero, &train, 1),
            Err(Error::Degenerate { .. }) | Err(Error::Dimension { .. })
        ));
    }

    #[test]
    fn zero_encoder_gives_degenerate_rows() {
        let ds = crate::data::generate_synthetic(&crate::data::SyntheticSpec {
            classes: 2,
            n: 4,
            grid: 4,
            seed: 0,
        })
        .unwrap();
        let arch = Arch::new(vec![16, 4], vec![4, 2], true).unwrap();
        let bank = extract_features(&ModelParams::zeros(&arch).unwrap(), &ds).unwrap();
        assert!(matches!(
            bank.normalized(),
            Err(Error::Degenerate { index: 0, .. })
        ));
    }

    #[test]
    fn probe_separates_and_rejects_constant_bank() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut rows = Vec::new();
        let mut labels = Vec::new();
        for i in 0..200 {
            let c = i % 2;
            let s = if c == 0 { 1.0 } else { -1.0 };
            rows.push(vec![s * (1.0 + rng.gen::<f64>()), rng.gen::<f64>() - 0.5]);
            labels.push(c);
        }
        let b = bank(&rows, &labels, 2);
        let cfg = ProbeConfig {
            batch: 16,
            ..ProbeConfig::default()
        };
        let r = linear_probe(&b, &b, &cfg, 0).unwrap();
        assert_eq!(r.accuracy, 1.0);
        assert_eq!(r.correct, r.n);

        let flat = bank(&vec![vec![0.5, 0.5]; 4], &[0, 1, 0, 1], 2);
        assert!(matches!(
            linear_probe(&flat, &flat, &cfg, 0),
            Err(Error::Degenerate { .. })
        ));
    }

    #[test]
    fn stratified_counts() {
        let labels: Vec<usize> = (0..400).map(|i| i % 4).collect();
        let s = stratified_subset(&labels, 4, 0.1, 3).unwrap();
        for c in 0..4 {
            assert_eq!(s.iter().filter(|&&i| labels[i] == c).count(), 10);
        }
        assert_eq!(
            stratified_subset(&labels, 4, 1.0, 3).unwrap(),
            (0..400).collect::<Vec<_>>()
        );
    }

    #[test]
    fn report_accuracy_is_exact_ratio() {
        let r = EvalReport::new("x", &[0, 1, 1], &[0, 1, 0]);
        assert_eq!((r.correct, r.n), (2, 3));
        assert_eq!(r.accuracy, 2.0 / 3.0);
        assert_eq!(
            r.with_digest("ab").csv_line(),
            format!("x,{},2,3,ab", 2.0 / 3.0)
        );
    }
}
