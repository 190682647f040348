use candle_core::{DType, Tensor, D};
use candle_nn::ops::{log_softmax, softmax};

use crate::error::{Error, Result};

/// (B, L) class indices as a (B, 1, L) u32 tensor.
fn targets_tensor(targets: &[Vec<u8>], like: &Tensor) -> Result<Tensor> {
    let (b, _, l) = like.dims3()?;
    if targets.len() != b || targets.iter().any(|t| t.len() != l) {
        return Err(Error::Validation(format!(
            "targets do not match logits of shape ({b}, _, {l})"
        )));
    }
    let flat: Vec<u32> = targets.iter().flat_map(|t| t.iter().map(|&v| v as u32)).collect();
    Ok(Tensor::from_vec(flat, (b, 1, l), like.device())?)
}

/// Per-position cross-entropy of (B, C, L) logits against class indices, as (B, L).
pub fn cross_entropy_map(logits: &Tensor, targets: &[Vec<u8>]) -> Result<Tensor> {
    let idx = targets_tensor(targets, logits)?;
    let logp = log_softmax(logits, 1)?;
    Ok(logp.gather(&idx, 1)?.squeeze(1)?.neg()?)
}

/// Mean cross-entropy over every position of the batch.
pub fn supervised_loss(logits: &Tensor, targets: &[Vec<u8>]) -> Result<Tensor> {
    Ok(cross_entropy_map(logits, targets)?.mean_all()?)
}

/// Detached class probabilities, hard argmax labels and max confidences.
pub struct Pseudo {
    pub probs: Tensor,
    pub labels: Vec<Vec<u8>>,
    pub confidence: Vec<Vec<f64>>,
}

pub fn pseudo_labels(logits: &Tensor) -> Result<Pseudo> {
    let probs = softmax(&logits.detach(), 1)?;
    let labels = probs
        .argmax(1)?
        .to_dtype(DType::U32)?
        .to_vec2::<u32>()?
        .into_iter()
        .map(|r| r.into_iter().map(|v| v as u8).collect())
        .collect();
    let confidence = probs.max(1)?.to_dtype(DType::F64)?.to_vec2::<f64>()?;
    Ok(Pseudo {
        probs,
        labels,
        confidence,
    })
}

/// Mean squared difference between student probabilities and a fixed target
/// distribution, averaged over batch, classes and positions.
pub fn consistency_loss(student_logits: &Tensor, target_probs: &Tensor) -> Result<Tensor> {
    let p = softmax(student_logits, 1)?;
    Ok((p - target_probs.detach())?.sqr()?.mean_all()?)
}

/// Sum of pseudo-label cross-entropy over confident positions (≥ threshold)
/// divided by the total number of positions. Also returns the confident count.
pub fn masked_pseudo_loss(logits: &Tensor, pseudo: &Pseudo, threshold: f64) -> Result<(Tensor, usize)> {
    let ce = cross_entropy_map(logits, &pseudo.labels)?;
    let (b, l) = ce.dims2()?;
    let mut n_conf = 0;
    let mask: Vec<f64> = pseudo
        .confidence
        .iter()
        .flatten()
        .map(|&c| {
            if c >= threshold {
                n_conf += 1;
                1.0
            } else {
                0.0
            }
        })
        .collect();
    let mask = Tensor::from_vec(mask, (b, l), logits.device())?.to_dtype(ce.dtype())?;
    let loss = (ce * mask)?.sum_all()?.affine(1.0 / (b * l).max(1) as f64, 0.0)?;
    Ok((loss, n_conf))
}

/// Frame positions `(batch, frame)` assigned to prototypes and to queries, per class.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RecoPartition {
    pub prototypes: Vec<Vec<(usize, usize)>>,
    pub queries: Vec<Vec<(usize, usize)>>,
}

/// Splits frames by confidence band: `≥ hard` feeds the class prototype,
/// `[easy, hard)` becomes a query, anything lower is ignored.
pub fn reco_partition(labels: &[Vec<u8>], confidence: &[Vec<f64>], classes: usize, easy: f64, hard: f64) -> RecoPartition {
    let mut part = RecoPartition {
        prototypes: vec![Vec::new(); classes],
        queries: vec![Vec::new(); classes],
    };
    for (b, (lab, conf)) in labels.iter().zip(confidence).enumerate() {
        for (f, (&c, &p)) in lab.iter().zip(conf).enumerate() {
            if p >= hard {
                part.prototypes[c as usize].push((b, f));
            } else if p >= easy {
                part.queries[c as usize].push((b, f));
            }
        }
    }
    part
}

/// InfoNCE of unit-norm queries (Q, P) against unit-norm prototypes (K, P):
/// mean over queries of −log softmax(q·proto / τ)[target].
pub fn reco_contrast(queries: &Tensor, targets: &[usize], prototypes: &Tensor, temperature: f64) -> Result<Tensor> {
    let q = queries.dim(0)?;
    if q == 0 {
        return Ok(Tensor::zeros((), queries.dtype(), queries.device())?);
    }
    let sims = queries.matmul(&prototypes.t()?)?.affine(1.0 / temperature, 0.0)?;
    let logp = log_softmax(&sims, D::Minus1)?;
    let idx: Vec<u32> = targets.iter().map(|&t| t as u32).collect();
    let idx = Tensor::from_vec(idx, (q, 1), queries.device())?;
    Ok(logp.gather(&idx, 1)?.neg()?.mean_all()?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::Device;

    fn t3(v: Vec<f64>, shape: (usize, usize, usize)) -> Tensor {
        Tensor::from_vec(v, shape, &Device::Cpu).unwrap()
    }

    fn scalar(t: &Tensor) -> f64 {
        t.to_dtype(DType::F64).unwrap().to_scalar::<f64>().unwrap()
    }

    #[test]
    fn uniform_logits_give_ln4() {
        let logits = t3(vec![0.0; 4 * 5], (1, 4, 5));
        let loss = supervised_loss(&logits, &[vec![0, 1, 2, 3, 0]]).unwrap();
        assert!((scalar(&loss) - 4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn confident_correct_logits_give_small_loss() {
        let mask = [0u8, 2, 3];
        let mut v = vec![0.0; 4 * 3];
        for (i, &c) in mask.iter().enumerate() {
            v[c as usize * 3 + i] = 50.0;
        }
        let loss = supervised_loss(&t3(v, (1, 4, 3)), &[mask.to_vec()]).unwrap();
        assert!(scalar(&loss) < 1e-3);
    }

    #[test]
    fn hand_computed_three_positions() {
        // Position-major: logits[c][i].
        let cols = [[1.0, 0.0, 0.0, 0.0], [0.0, 2.0, 1.0, 0.0], [0.5, 0.5, 0.5, 3.0]];
        let targets = [0usize, 2, 3];
        let mut v = vec![0.0; 12];
        for (i, col) in cols.iter().enumerate() {
            for c in 0..4 {
                v[c * 3 + i] = col[c];
            }
        }
        let expected: f64 = cols
            .iter()
            .zip(targets)
            .map(|(col, t)| {
                let lse = col.iter().map(|x: &f64| x.exp()).sum::<f64>().ln();
                lse - col[t]
            })
            .sum::<f64>()
            / 3.0;
        let loss = supervised_loss(&t3(v, (1, 4, 3)), &[targets.iter().map(|&t| t as u8).collect()]).unwrap();
        assert!((scalar(&loss) - expected).abs() < 1e-12);
    }

    #[test]
    fn masked_loss_is_zero_below_threshold_and_includes_boundary() {
        let logits = t3(vec![0.3, -0.1, 0.2, 0.0, 0.1, 0.4, 0.0, 0.0], (1, 4, 2));
        let pseudo = pseudo_labels(&logits).unwrap();
        let (loss, n) = masked_pseudo_loss(&logits, &pseudo, 0.8).unwrap();
        assert_eq!((scalar(&loss), n), (0.0, 0));
        let exact = Pseudo {
            confidence: vec![vec![0.8, 0.79]],
            ..pseudo
        };
        let (_, n) = masked_pseudo_loss(&logits, &exact, 0.8).unwrap();
        assert_eq!(n, 1);
    }

    #[test]
    fn reco_closed_form() {
        let dev = Device::Cpu;
        let protos = Tensor::eye(4, DType::F64, &dev).unwrap();
        let q = Tensor::from_vec(vec![0.0, 0.0, 1.0, 0.0], (1, 4), &dev).unwrap();
        let loss = scalar(&reco_contrast(&q, &[2], &protos, 0.5).unwrap());
        let e2 = 2f64.exp();
        assert!((loss - -(e2 / (e2 + 3.0)).ln()).abs() < 1e-12);
        let empty = Tensor::zeros((0, 4), DType::F64, &dev).unwrap();
        assert_eq!(scalar(&reco_contrast(&empty, &[], &protos, 0.5).unwrap()), 0.0);
    }

    #[test]
    fn partition_bands() {
        let labels = vec![vec![0, 1, 1, 2]];
        let conf = vec![vec![0.9, 0.8, 0.7, 0.5]];
        let p = reco_partition(&labels, &conf, 4, 0.65, 0.8);
        assert_eq!(p.prototypes[0], vec![(0, 0)]);
        assert_eq!(p.prototypes[1], vec![(0, 1)]);
        assert_eq!(p.queries[1], vec![(0, 2)]);
        assert!(p.queries[2].is_empty() && p.prototypes[2].is_empty());
    }
}
