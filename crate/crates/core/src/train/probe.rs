use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::loss::cross_entropy;
use super::optim::Adam;
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::metrics::{pad_errors, PadErrors};
use crate::nn::{softmax2, Builder, Node, Tensor, SPOOF_CLASS};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProbeConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub exec: Exec,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            epochs: 20,
            lr: 1e-3,
            batch_size: 32,
            seed: 0,
            exec: Exec::Sequential,
        }
    }
}

/// Shallow spoof classifier trained on frozen intermediate features.
#[derive(Debug, Clone)]
pub struct ProbeHead {
    pub in_shape: (usize, usize, usize),
    pub widths: (usize, usize),
    graph: Node,
    pub params: Vec<f64>,
}

impl ProbeHead {
    pub fn new(in_shape: (usize, usize, usize), seed: u64) -> Result<Self> {
        let mut b = Builder::seeded(seed, 11);
        let (graph, w1, w2) = b.probe_head(in_shape.0);
        graph.out_shape(in_shape)?;
        Ok(ProbeHead {
            in_shape,
            widths: (w1, w2),
            graph,
            params: b.finish(),
        })
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    pub fn spoof_probability(&self, x: &Tensor) -> f64 {
        let out = self.graph.forward(&self.params, x.clone(), false).0;
        softmax2([out.data[0], out.data[1]])[SPOOF_CLASS]
    }
}

#[derive(Debug, Clone)]
pub struct ProbeResult {
    pub head: ProbeHead,
    pub errors: PadErrors,
    pub epoch_losses: Vec<f64>,
}

fn check_features(feats: &[Tensor], labels: &[usize], what: &str) -> Result<(usize, usize, usize)> {
    if feats.is_empty() || feats.len() != labels.len() {
        return Err(Error::Shape(format!(
            "{what}: {} feature maps for {} labels",
            feats.len(),
            labels.len()
        )));
    }
    let shape = feats[0].shape();
    if feats.iter().any(|f| f.shape() != shape) {
        return Err(Error::Shape(format!("{what}: feature maps differ in shape")));
    }
    if labels.iter().any(|&l| l > 1) {
        return Err(Error::Param(format!("{what}: labels must be 0 (live) or 1 (spoof)")));
    }
    Ok(shape)
}

/// Trains a probe head on `train` features and reports error rates at a
/// 0.5 threshold on `test` features.
pub fn train_probe(
    train: &[Tensor],
    train_labels: &[usize],
    test: &[Tensor],
    test_labels: &[usize],
    cfg: &ProbeConfig,
) -> Result<ProbeResult> {
    let shape = check_features(train, train_labels, "probe train")?;
    let test_shape = check_features(test, test_labels, "probe test")?;
    if test_shape.0 != shape.0 {
        return Err(Error::Config(format!(
            "probe built for {} channels, test features have {}",
            shape.0, test_shape.0
        )));
    }
    if cfg.batch_size == 0 || !(cfg.lr > 0.0) {
        return Err(Error::Config("probe batch_size and lr must be positive".into()));
    }
    let mut head = ProbeHead::new(shape, cfg.seed)?;
    let mut opt = Adam::new(&[head.params.len()], 0.9, 0.999);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(epoch as u64 + 1);
        order.sort_unstable();
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for idx in order.chunks(cfg.batch_size) {
            let bsz = idx.len() as f64;
            let chunks: Vec<&[usize]> = idx.chunks(8).collect();
            let parts = cfg.exec.map(&chunks, |chunk| {
                let mut g = vec![0.0; head.params.len()];
                let mut loss = 0.0;
                for &i in chunk.iter() {
                    let (out, cache) = head.graph.forward(&head.params, train[i].clone(), true);
                    let l = [out.data[0], out.data[1]];
                    loss += cross_entropy(l, train_labels[i]);
                    let p = softmax2(l);
                    let gl: Vec<f64> = (0..2)
                        .map(|k| (p[k] - f64::from(u8::from(k == train_labels[i]))) / bsz)
                        .collect();
                    head.graph.backward(&head.params, &cache, Tensor::from_vec(2, 1, 1, gl), &mut g);
                }
                (loss, g)
            });
            let mut grads = vec![0.0; head.params.len()];
            for (l, g) in &parts {
                total += l;
                grads.iter_mut().zip(g).for_each(|(a, b)| *a += b);
            }
            opt.step(&mut [&mut head.params], &[&grads], cfg.lr);
        }
        let mean = total / train.len() as f64;
        if !mean.is_finite() {
            return Err(Error::NonFinite {
                epoch,
                batch: 0,
                detail: "probe loss".into(),
            });
        }
        epoch_losses.push(mean);
    }

    let probs = cfg.exec.map(test, |x| head.spoof_probability(x));
    let live: Vec<f64> = probs.iter().zip(test_labels).filter(|(_, &l)| l == 0).map(|(p, _)| *p).collect();
    let spoof: Vec<f64> = probs.iter().zip(test_labels).filter(|(_, &l)| l == 1).map(|(p, _)| *p).collect();
    let errors = pad_errors(&live, &spoof, 0.5)?;
    Ok(ProbeResult {
        head,
        errors,
        epoch_losses,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn probe_widths_follow_channel_count() {
        let h = ProbeHead::new((288, 9, 9), 0).unwrap();
        assert_eq!(h.widths, (512, 1024));
        let h = ProbeHead::new((32, 7, 7), 0).unwrap();
        assert_eq!(h.widths, (57, 114));
    }

    #[test]
    fn channel_mismatch_is_config_error() {
        let a = vec![Tensor::zeros(4, 6, 6); 2];
        let b = vec![Tensor::zeros(5, 6, 6); 2];
        let err = train_probe(&a, &[0, 1], &b, &[0, 1], &ProbeConfig::default()).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }
}
