//! Training losses and momentum maintenance.
//!
//! Tape-level functions build differentiable nodes; the `*_value` variants
//! evaluate the same graph on plain inputs.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::queue::RepresentationQueue;
use crate::tensor::Mat;
use crate::vocab::PAD;

/// Loss breakdown; `total` is the unweighted sum of the components.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossValue {
    pub rg: f64,
    pub irc: f64,
    pub irm: f64,
    pub total: f64,
}

impl LossValue {
    /// Component-wise mean of several breakdowns.
    pub fn mean(values: &[LossValue]) -> LossValue {
        if values.is_empty() {
            return LossValue::default();
        }
        let n = values.len() as f64;
        let mut acc = LossValue::default();
        for v in values {
            acc.rg += v.rg / n;
            acc.irc += v.irc / n;
            acc.irm += v.irm / n;
            acc.total += v.total / n;
        }
        acc
    }
}

/// Negative log-likelihood summed over positions; `PAD` targets are skipped.
/// Row `t` of `log_probs` scores `targets[t]`.
pub fn rg_loss(t: &mut Tape, log_probs: Var, targets: &[usize]) -> Result<Var> {
    let (rows, cols) = t.shape(log_probs);
    if rows != targets.len() {
        return Err(Error::DimensionMismatch {
            expected: rows,
            got: targets.len(),
        });
    }
    if let Some(&bad) = targets.iter().find(|&&id| id >= cols) {
        return Err(Error::OutOfVocab { id: bad, vocab: cols });
    }
    let picks: Vec<Option<usize>> = targets.iter().map(|&id| (id != PAD).then_some(id)).collect();
    Ok(t.nll(log_probs, &picks))
}

pub fn rg_loss_value(log_probs: &Mat, targets: &[usize]) -> Result<f64> {
    let store = ParamStore::new();
    let mut t = Tape::new(&store);
    let lp = t.constant(log_probs.clone());
    let l = rg_loss(&mut t, lp, targets)?;
    Ok(t.value(l).scalar_value())
}

fn contrastive_direction(
    t: &mut Tape,
    query: Var,
    positive: Var,
    bank: &RepresentationQueue,
    inv_tau: Var,
) -> Var {
    let candidates = if bank.is_empty() {
        positive
    } else {
        let queued = t.constant(bank.embedding_matrix());
        t.concat_rows(&[positive, queued])
    };
    let sims = t.matmul_nt(query, candidates);
    let logits = t.mul_scalar(sims, inv_tau);
    let lp = t.log_softmax(logits);
    t.nll(lp, &[Some(0)])
}

/// Symmetric contrastive loss. Image-to-report scores the image embedding
/// against its report followed by the report queue; report-to-image scores
/// the report embedding against its image followed by the image queue. The
/// target is the positive in slot 0. Embeddings are `[1, p]` unit rows.
pub fn irc_loss(
    t: &mut Tape,
    image_emb: Var,
    report_emb: Var,
    image_queue: &RepresentationQueue,
    report_queue: &RepresentationQueue,
    inv_tau: Var,
) -> Result<Var> {
    let p = t.shape(image_emb).1;
    for q in [image_queue, report_queue] {
        if q.dim() != p {
            return Err(Error::DimensionMismatch {
                expected: p,
                got: q.dim(),
            });
        }
    }
    if t.shape(report_emb) != (1, p) || t.shape(image_emb).0 != 1 {
        return Err(Error::shape(
            "irc_loss",
            format!("image {:?}, report {:?}", t.shape(image_emb), t.shape(report_emb)),
        ));
    }
    let i2r = contrastive_direction(t, image_emb, report_emb, report_queue, inv_tau);
    let r2i = contrastive_direction(t, report_emb, image_emb, image_queue, inv_tau);
    let both = t.add(i2r, r2i);
    Ok(t.scale(both, 0.5))
}

/// [`irc_loss`] from raw `[CLS]` vectors, projection matrices and `tau`.
pub fn irc_loss_value(
    image_cls: &[f64],
    report_cls: &[f64],
    image_queue: &RepresentationQueue,
    report_queue: &RepresentationQueue,
    w_image: &Mat,
    w_report: &Mat,
    tau: f64,
) -> Result<f64> {
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(Error::NonPositiveTemperature(tau));
    }
    if image_cls.len() != w_image.rows() || report_cls.len() != w_report.rows() {
        return Err(Error::shape(
            "irc_loss",
            format!(
                "cls widths {}/{} for projections {:?}/{:?}",
                image_cls.len(),
                report_cls.len(),
                w_image.shape(),
                w_report.shape()
            ),
        ));
    }
    let store = ParamStore::new();
    let mut t = Tape::new(&store);
    let ic = t.constant(Mat::row_vector(image_cls.to_vec()));
    let rc = t.constant(Mat::row_vector(report_cls.to_vec()));
    let wi = t.constant(w_image.clone());
    let wr = t.constant(w_report.clone());
    let ip = t.matmul(ic, wi);
    let ie = t.l2_normalize(ip);
    let rp = t.matmul(rc, wr);
    let re = t.l2_normalize(rp);
    let inv = t.constant(Mat::scalar(1.0 / tau));
    let l = irc_loss(&mut t, ie, re, image_queue, report_queue, inv)?;
    Ok(t.value(l).scalar_value())
}

/// Index of the "match" class in the two-way head output.
pub const MATCH: usize = 1;

/// Two-class cross-entropy on `[1, 2]` logits.
pub fn irm_loss(t: &mut Tape, logits: Var, is_match: bool) -> Result<Var> {
    if t.shape(logits) != (1, 2) {
        return Err(Error::shape(
            "irm_loss",
            format!("expected [1, 2] logits, got {:?}", t.shape(logits)),
        ));
    }
    let lp = t.log_softmax(logits);
    let label = if is_match { MATCH } else { 1 - MATCH };
    Ok(t.nll(lp, &[Some(label)]))
}

/// [`irm_loss`] for a fused vector and a `d -> 2` head.
pub fn irm_loss_value(fused: &[f64], head_w: &Mat, head_b: &Mat, is_match: bool) -> Result<f64> {
    if head_w.shape() != (fused.len(), 2) || head_b.shape() != (1, 2) {
        return Err(Error::shape(
            "irm_loss",
            format!(
                "head {:?} + {:?} for width {}",
                head_w.shape(),
                head_b.shape(),
                fused.len()
            ),
        ));
    }
    let z = Mat::row_vector(fused.to_vec()).matmul(head_w);
    let mut logits = z;
    logits.add_assign(head_b);
    let store = ParamStore::new();
    let mut t = Tape::new(&store);
    let lv = t.constant(logits);
    let l = irm_loss(&mut t, lv, is_match)?;
    Ok(t.value(l).scalar_value())
}

/// Unweighted sum, rejecting any non-finite component by name.
pub fn total_loss(rg: f64, irc: f64, irm: f64) -> Result<LossValue> {
    for (name, value) in [("rg", rg), ("irc", irc), ("irm", irm)] {
        if !value.is_finite() {
            return Err(Error::NonFiniteLoss { name, value });
        }
    }
    Ok(LossValue {
        rg,
        irc,
        irm,
        total: rg + irc + irm,
    })
}

/// `copy <- m * copy + (1 - m) * online` for the listed parameters.
pub fn momentum_update(online: &ParamStore, copy: &mut ParamStore, ids: &[ParamId], m: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&m) {
        return Err(Error::Config(format!("momentum {m} outside [0, 1]")));
    }
    if online.len() != copy.len() {
        return Err(Error::DimensionMismatch {
            expected: online.len(),
            got: copy.len(),
        });
    }
    for &id in ids {
        let src = online.get(id);
        if src.shape() != copy.get(id).shape() {
            return Err(Error::shape(
                "momentum_update",
                format!(
                    "{}: online {:?} vs copy {:?}",
                    online.entry(id).name,
                    src.shape(),
                    copy.get(id).shape()
                ),
            ));
        }
    }
    for &id in ids {
        let src = online.get(id).data().to_vec();
        for (c, o) in copy.get_mut(id).data_mut().iter_mut().zip(src) {
            *c = m * *c + (1.0 - m) * o;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_unit(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
        let v: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.into_iter().map(|x| x / n).collect()
    }

    fn dot(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| x * y).sum()
    }

    fn normalize(v: &[f64]) -> Vec<f64> {
        let n = dot(v, v).sqrt();
        v.iter().map(|x| x / n).collect()
    }

    fn ce_first(logits: &[f64]) -> f64 {
        let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + logits.iter().map(|l| (l - m).exp()).sum::<f64>().ln();
        lse - logits[0]
    }

    #[test]
    fn rg_matches_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (n, v) = (6, 9);
        let mut lp = Mat::zeros(n, v);
        for r in 0..n {
            let row: Vec<f64> = (0..v).map(|_| rng.random_range(-2.0..2.0)).collect();
            let lse = row.iter().map(|x| x.exp()).sum::<f64>().ln();
            for (c, x) in row.iter().enumerate() {
                lp.set(r, c, x - lse);
            }
        }
        let targets = [3, 8, 0, 1, 7, 6];
        let want: f64 = targets
            .iter()
            .enumerate()
            .filter(|(_, &y)| y != PAD)
            .map(|(i, &y)| -lp.get(i, y))
            .sum();
        assert!((rg_loss_value(&lp, &targets).unwrap() - want).abs() < 1e-9);
        assert!(rg_loss_value(&lp, &targets[..4]).is_err());
    }

    #[test]
    fn irc_matches_softmax_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let (d, p) = (5, 4);
        let mut iq = RepresentationQueue::new(8, p).unwrap();
        let mut rq = RepresentationQueue::new(8, p).unwrap();
        for i in 0..4 {
            iq.enqueue(vec![(random_unit(&mut rng, p), format!("i{i}"))])
                .unwrap();
            rq.enqueue(vec![(random_unit(&mut rng, p), format!("r{i}"))])
                .unwrap();
        }
        let rand_mat = |rng: &mut ChaCha8Rng| {
            Mat::from_vec(d, p, (0..d * p).map(|_| rng.random_range(-1.0..1.0)).collect())
        };
        let (wi, wt) = (rand_mat(&mut rng), rand_mat(&mut rng));
        let ic: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let rc: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let tau = 0.3;
        let ie = normalize(Mat::row_vector(ic.clone()).matmul(&wi).data());
        let re = normalize(Mat::row_vector(rc.clone()).matmul(&wt).data());
        let mut i2r = vec![dot(&ie, &re) / tau];
        i2r.extend(rq.entries().map(|e| dot(&ie, &e.embedding) / tau));
        let mut r2i = vec![dot(&re, &ie) / tau];
        r2i.extend(iq.entries().map(|e| dot(&re, &e.embedding) / tau));
        let want = 0.5 * (ce_first(&i2r) + ce_first(&r2i));
        let got = irc_loss_value(&ic, &rc, &iq, &rq, &wi, &wt, tau).unwrap();
        assert!((got - want).abs() < 1e-9, "{got} vs {want}");
        assert!(matches!(
            irc_loss_value(&ic, &rc, &iq, &rq, &wi, &wt, 0.0),
            Err(Error::NonPositiveTemperature(_))
        ));
    }

    #[test]
    fn irc_decreases_as_positive_dominates() {
        let p = 3;
        let mut q = RepresentationQueue::new(4, p).unwrap();
        q.enqueue(vec![
            (vec![0.0, 1.0, 0.0], "a".into()),
            (vec![0.0, 0.0, 1.0], "b".into()),
        ])
        .unwrap();
        let w = Mat::identity(p);
        let mut last = f64::INFINITY;
        for s in [0.0, 0.5, 1.0, 2.0, 4.0] {
            let v = [1.0, 0.1 / (1.0 + s), 0.0];
            let l = irc_loss_value(&v, &v, &q, &q, &w, &w, 1.0 / (1.0 + s)).unwrap();
            assert!(l < last);
            last = l;
        }
    }

    #[test]
    fn irm_cross_entropy() {
        let w = Mat::zeros(3, 2);
        let b = Mat::zeros(1, 2);
        let l = irm_loss_value(&[0.3, -1.0, 2.0], &w, &b, true).unwrap();
        assert!((l - std::f64::consts::LN_2).abs() < 1e-12);
        let w = Mat::from_vec(2, 2, vec![1.0, -0.5, 0.25, 2.0]);
        let b = Mat::row_vector(vec![0.1, -0.2]);
        let f = [0.7, -0.4];
        let z0 = 0.7 - 0.1 + 0.1;
        let z1 = -0.35 - 0.8 - 0.2;
        let lse = (f64::exp(z0) + f64::exp(z1)).ln();
        let got_match = irm_loss_value(&f, &w, &b, true).unwrap();
        let got_mis = irm_loss_value(&f, &w, &b, false).unwrap();
        assert!((got_match - (lse - z1)).abs() < 1e-12);
        assert!((got_mis - (lse - z0)).abs() < 1e-12);
    }

    #[test]
    fn total_and_momentum() {
        assert_eq!(total_loss(1.0, 2.0, 3.0).unwrap().total, 6.0);
        assert_eq!(total_loss(0.0, 0.0, 0.0).unwrap().total, 0.0);
        assert!(matches!(
            total_loss(1.0, f64::NAN, 0.0),
            Err(Error::NonFiniteLoss { name: "irc", .. })
        ));
        let mut online = ParamStore::new();
        let id = online.add("x", Mat::row_vector(vec![4.0]), false);
        let mut copy = ParamStore::new();
        copy.add("x", Mat::row_vector(vec![2.0]), false);
        momentum_update(&online, &mut copy, &[id], 1.0).unwrap();
        assert_eq!(copy.get(id).data(), &[2.0]);
        momentum_update(&online, &mut copy, &[id], 0.5).unwrap();
        assert_eq!(copy.get(id).data(), &[3.0]);
        momentum_update(&online, &mut copy, &[id], 0.0).unwrap();
        assert_eq!(copy.get(id).data(), &[4.0]);
        let mut bad = ParamStore::new();
        bad.add("x", Mat::zeros(1, 2), false);
        assert!(momentum_update(&online, &mut bad, &[id], 0.5).is_err());
    }
}
