//! Training objectives and their gradients.
//!
//! Every loss returns its scalar value together with the gradient with respect
//! to its differentiable inputs (features, logits or probabilities). Pairwise
//! losses reduce by the mean over contributing pairs.

use ndarray::{Array1, Array2, ArrayView1, Zip};
use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::softmax_rows;
use crate::scalar::Real;

/// Probabilities are clamped to `[PROB_CLAMP, 1 - PROB_CLAMP]` before `log`.
pub const PROB_CLAMP: f64 = 1e-7;
/// Additive smoothing applied to probabilities inside the KL divergence.
pub const KL_SMOOTHING: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub lambda_con: f64,
    pub lambda_saa: f64,
    pub margin_source: f64,
    pub margin_target: f64,
    pub trade_target: TradeTarget,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_con: 0.01,
            lambda_saa: 0.01,
            margin_source: 10.0,
            margin_target: 10.0,
            trade_target: TradeTarget::Detached,
        }
    }
}

/// How the clean prediction enters the KL robustness term.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TradeTarget {
    /// The clean distribution is a constant target; only the adversarial
    /// branch receives gradient.
    #[default]
    Detached,
    /// Both branches receive gradient.
    Joint,
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_con >= 0.0 && self.lambda_saa >= 0.0) {
            return Err(Error::Config("loss weights must be non-negative".into()));
        }
        if !(self.margin_source > 0.0 && self.margin_target > 0.0) {
            return Err(Error::Config("margins must be strictly positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Pair {
    pub i: usize,
    pub j: usize,
    pub same_class: bool,
}

/// Unordered index pairs drawn from one mini-batch.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct PairSet {
    pairs: Vec<Pair>,
}

impl PairSet {
    /// Every unordered pair `i < j`.
    pub fn all_pairs(labels: &[usize]) -> Self {
        let n = labels.len();
        let mut pairs = Vec::with_capacity(n * n.saturating_sub(1) / 2);
        for i in 0..n {
            for j in i + 1..n {
                pairs.push(Pair {
                    i,
                    j,
                    same_class: labels[i] == labels[j],
                });
            }
        }
        Self { pairs }
    }

    /// At most `max_pairs` distinct unordered pairs chosen uniformly.
    pub fn sampled<R: Rng + ?Sized>(labels: &[usize], max_pairs: usize, rng: &mut R) -> Self {
        let all = Self::all_pairs(labels);
        if all.pairs.len() <= max_pairs {
            return all;
        }
        let mut picked: Vec<usize> = sample(rng, all.pairs.len(), max_pairs).into_vec();
        picked.sort_unstable();
        Self {
            pairs: picked.into_iter().map(|k| all.pairs[k]).collect(),
        }
    }

    /// Validates `i != j`, range and uniqueness of unordered pairs.
    pub fn from_pairs(pairs: Vec<Pair>, batch_len: usize) -> Result<Self> {
        let mut seen = std::collections::HashSet::new();
        for p in &pairs {
            if p.i == p.j {
                return Err(Error::Contract(format!("self pair ({}, {})", p.i, p.j)));
            }
            if p.i >= batch_len || p.j >= batch_len {
                return Err(Error::Contract(format!("pair ({}, {}) out of range", p.i, p.j)));
            }
            if !seen.insert((p.i.min(p.j), p.i.max(p.j))) {
                return Err(Error::Contract(format!("duplicate pair ({}, {})", p.i, p.j)));
            }
        }
        Ok(Self { pairs })
    }

    pub fn pairs(&self) -> &[Pair] {
        &self.pairs
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }
}

/// Scalar loss plus gradient with respect to one input matrix.
#[derive(Debug, Clone)]
pub struct LossGrad<T: Real> {
    pub value: T,
    pub grad: Array2<T>,
}

/// Batch-mean `-log softmax(logits)[label]`.
pub fn cross_entropy<T: Real>(logits: &Array2<T>, labels: &[usize]) -> Result<LossGrad<T>> {
    let (n, m) = logits.dim();
    if labels.len() != n {
        return Err(Error::Contract(format!("{} labels for {n} rows", labels.len())));
    }
    if let Some(bad) = labels.iter().find(|&&l| l >= m) {
        return Err(Error::Contract(format!("label {bad} outside 0..{m}")));
    }
    let probs = softmax_rows(logits);
    let scale = T::one() / T::of(n as f64);
    let mut value = T::zero();
    let mut grad = probs.clone();
    for (r, &y) in labels.iter().enumerate() {
        let row = logits.row(r);
        value = value - log_softmax_at(row, y);
        grad[[r, y]] = grad[[r, y]] - T::one();
    }
    grad.mapv_inplace(|g| g * scale);
    Ok(LossGrad {
        value: value * scale,
        grad,
    })
}

fn log_softmax_at<T: Real>(row: ArrayView1<T>, k: usize) -> T {
    let max = row.fold(T::neg_infinity(), |a, &b| a.max(b));
    let lse = row.fold(T::zero(), |acc, &v| acc + (v - max).exp()).ln() + max;
    row[k] - lse
}

/// Value and `d/du` of the margin pair term
/// `½ D²` (same class) or `½ max(0, m − D)²` (different class), `D = ‖u − v‖`.
/// The gradient with respect to `v` is the negation.
fn pair_term<T: Real>(u: ArrayView1<T>, v: ArrayView1<T>, same: bool, margin: T) -> (T, Array1<T>) {
    let diff = &u - &v;
    let d2 = diff.dot(&diff);
    let half = T::of(0.5);
    if same {
        return (half * d2, diff);
    }
    let d = d2.sqrt();
    let hinge = margin - d;
    if hinge <= T::zero() {
        return (T::zero(), Array1::zeros(u.len()));
    }
    let value = half * hinge * hinge;
    if d == T::zero() {
        // direction undefined at coincident points
        return (value, Array1::zeros(u.len()));
    }
    let coeff = -hinge / d;
    (value, diff.mapv(|x| x * coeff))
}

#[derive(Debug, Clone)]
pub struct ContrastiveOutput<T: Real> {
    pub value: T,
    pub grad: Array2<T>,
    /// Set when the pair set was empty; the loss is then defined as zero.
    pub empty: bool,
}

/// Margin contrastive loss over `pairs`, averaged over pairs.
pub fn contrastive_loss<T: Real>(
    features: &Array2<T>,
    labels: &[usize],
    margin: f64,
    pairs: &PairSet,
) -> Result<ContrastiveOutput<T>> {
    let n = features.nrows();
    if labels.len() != n {
        return Err(Error::Contract(format!("{} labels for {n} feature rows", labels.len())));
    }
    let mut grad = Array2::zeros(features.dim());
    if pairs.is_empty() {
        return Ok(ContrastiveOutput {
            value: T::zero(),
            grad,
            empty: true,
        });
    }
    let margin = T::of(margin);
    let mut total = T::zero();
    for p in pairs.pairs() {
        if p.i >= n || p.j >= n {
            return Err(Error::Contract(format!("pair ({}, {}) out of range", p.i, p.j)));
        }
        let same = labels[p.i] == labels[p.j];
        let (v, g) = pair_term(features.row(p.i), features.row(p.j), same, margin);
        total = total + v;
        grad.row_mut(p.i).zip_mut_with(&g, |a, &b| *a = *a + b);
        grad.row_mut(p.j).zip_mut_with(&g, |a, &b| *a = *a - b);
    }
    let scale = T::one() / T::of(pairs.len() as f64);
    grad.mapv_inplace(|g| g * scale);
    Ok(ContrastiveOutput {
        value: total * scale,
        grad,
        empty: false,
    })
}

/// A target row that passed the confidence threshold, with its pseudo class.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AcceptedTarget {
    pub row: usize,
    pub class: usize,
}

#[derive(Debug, Clone)]
pub struct SaaOutput<T: Real> {
    pub value: T,
    /// Mean contribution of the clean-target pairs alone.
    pub clean_term: T,
    /// Mean contribution of the adversarial-target pairs alone.
    pub adv_term: T,
    pub grad_clean: Array2<T>,
    pub grad_adv: Array2<T>,
    pub pairs: usize,
    /// No accepted targets: value is zero and the term is skipped.
    pub skipped: bool,
}

/// Source-anchored contrastive loss. Anchors are constants; only
/// anchor-to-target pairs (clean and adversarial) contribute.
pub fn saa_contrastive_loss<T: Real>(
    anchors: &Array2<T>,
    anchor_labels: &[usize],
    target_clean: &Array2<T>,
    target_adv: &Array2<T>,
    accepted: &[AcceptedTarget],
    margin: f64,
) -> Result<SaaOutput<T>> {
    if anchors.nrows() != anchor_labels.len() {
        return Err(Error::Contract("anchor label count mismatch".into()));
    }
    if target_clean.dim() != target_adv.dim() {
        return Err(Error::Contract("clean/adversarial target shapes differ".into()));
    }
    if anchors.ncols() != target_clean.ncols() {
        return Err(Error::Contract("anchor and target feature widths differ".into()));
    }
    let mut out = SaaOutput {
        value: T::zero(),
        clean_term: T::zero(),
        adv_term: T::zero(),
        grad_clean: Array2::zeros(target_clean.dim()),
        grad_adv: Array2::zeros(target_adv.dim()),
        pairs: anchors.nrows() * accepted.len(),
        skipped: false,
    };
    if out.pairs == 0 {
        out.skipped = true;
        return Ok(out);
    }
    let margin = T::of(margin);
    for t in accepted {
        if t.row >= target_clean.nrows() {
            return Err(Error::Contract(format!("target row {} out of range", t.row)));
        }
        for (a, &ya) in anchors.rows().into_iter().zip(anchor_labels) {
            let same = ya == t.class;
            let (vc, gc) = pair_term(target_clean.row(t.row), a, same, margin);
            let (va, ga) = pair_term(target_adv.row(t.row), a, same, margin);
            out.clean_term = out.clean_term + vc;
            out.adv_term = out.adv_term + va;
            out.grad_clean.row_mut(t.row).zip_mut_with(&gc, |a, &b| *a = *a + b);
            out.grad_adv.row_mut(t.row).zip_mut_with(&ga, |a, &b| *a = *a + b);
        }
    }
    let scale = T::one() / T::of(out.pairs as f64);
    out.clean_term = out.clean_term * scale;
    out.adv_term = out.adv_term * scale;
    out.value = out.clean_term + out.adv_term;
    out.grad_clean.mapv_inplace(|g| g * scale);
    out.grad_adv.mapv_inplace(|g| g * scale);
    Ok(out)
}

fn clamp_prob<T: Real>(p: T) -> (T, bool) {
    let lo = T::of(PROB_CLAMP);
    let hi = T::one() - lo;
    if p < lo {
        (lo, false)
    } else if p > hi {
        (hi, false)
    } else {
        (p, true)
    }
}

#[derive(Debug, Clone)]
pub struct DiscriminatorLoss<T: Real> {
    pub value: T,
    pub grad_source: Array1<T>,
    pub grad_target: Array1<T>,
}

/// `−mean log D(source) − mean log(1 − D(target))`, gradients w.r.t. the probabilities.
pub fn discriminator_loss<T: Real>(p_source: &Array1<T>, p_target: &Array1<T>) -> Result<DiscriminatorLoss<T>> {
    if p_source.is_empty() || p_target.is_empty() {
        return Err(Error::Contract("discriminator loss needs both domains".into()));
    }
    let ns = T::of(p_source.len() as f64);
    let nt = T::of(p_target.len() as f64);
    let mut value = T::zero();
    let grad_source = p_source.mapv(|p| {
        let (c, live) = clamp_prob(p);
        value = value - c.ln() / ns;
        if live {
            -T::one() / (c * ns)
        } else {
            T::zero()
        }
    });
    let grad_target = p_target.mapv(|p| {
        let (c, live) = clamp_prob(p);
        value = value - (T::one() - c).ln() / nt;
        if live {
            T::one() / ((T::one() - c) * nt)
        } else {
            T::zero()
        }
    });
    Ok(DiscriminatorLoss {
        value,
        grad_source,
        grad_target,
    })
}

/// `−mean log D(target)`, the inverted-label objective for the target encoder.
pub fn encoder_adversarial_loss<T: Real>(p_target: &Array1<T>) -> Result<(T, Array1<T>)> {
    if p_target.is_empty() {
        return Err(Error::Contract("empty target batch".into()));
    }
    let n = T::of(p_target.len() as f64);
    let mut value = T::zero();
    let grad = p_target.mapv(|p| {
        let (c, live) = clamp_prob(p);
        value = value - c.ln() / n;
        if live {
            -T::one() / (c * n)
        } else {
            T::zero()
        }
    });
    Ok((value, grad))
}

#[derive(Debug, Clone)]
pub struct KlOutput<T: Real> {
    pub value: T,
    pub grad_clean: Array2<T>,
    pub grad_adv: Array2<T>,
}

/// Batch-mean `KL(p_clean ‖ p_adv)` on probability rows, smoothed by
/// [`KL_SMOOTHING`]; gradients with respect to both probability matrices.
pub fn trade_kl_loss<T: Real>(p_clean: &Array2<T>, p_adv: &Array2<T>) -> Result<KlOutput<T>> {
    if p_clean.dim() != p_adv.dim() || p_clean.nrows() == 0 {
        return Err(Error::Contract("KL inputs must be equal-shaped, non-empty".into()));
    }
    let delta = T::of(KL_SMOOTHING);
    let n = T::of(p_clean.nrows() as f64);
    let mut value = T::zero();
    let mut grad_clean = Array2::zeros(p_clean.dim());
    let mut grad_adv = Array2::zeros(p_clean.dim());
    Zip::from(&mut grad_clean)
        .and(&mut grad_adv)
        .and(p_clean)
        .and(p_adv)
        .for_each(|gc, ga, &p, &q| {
            let lp = (p + delta).ln();
            let lq = (q + delta).ln();
            value = value + p * (lp - lq);
            *gc = (lp - lq + p / (p + delta)) / n;
            *ga = -p / ((q + delta) * n);
        });
    Ok(KlOutput {
        value: value / n,
        grad_clean,
        grad_adv,
    })
}

/// `KL(softmax(clean) ‖ softmax(adv))` computed from logits with exact
/// log-softmax; gradients with respect to both logit matrices.
pub fn trade_kl_from_logits<T: Real>(logits_clean: &Array2<T>, logits_adv: &Array2<T>) -> Result<KlOutput<T>> {
    if logits_clean.dim() != logits_adv.dim() || logits_clean.nrows() == 0 {
        return Err(Error::Contract("KL inputs must be equal-shaped, non-empty".into()));
    }
    let n = T::of(logits_clean.nrows() as f64);
    let log_p = log_softmax_rows(logits_clean);
    let log_q = log_softmax_rows(logits_adv);
    let p = log_p.mapv(|v| v.exp());
    let q = log_q.mapv(|v| v.exp());
    let mut value = T::zero();
    let mut grad_clean = Array2::zeros(p.dim());
    for r in 0..p.nrows() {
        let row_kl = (0..p.ncols()).fold(T::zero(), |acc, k| acc + p[[r, k]] * (log_p[[r, k]] - log_q[[r, k]]));
        value = value + row_kl;
        for k in 0..p.ncols() {
            grad_clean[[r, k]] = p[[r, k]] * (log_p[[r, k]] - log_q[[r, k]] - row_kl) / n;
        }
    }
    let grad_adv = (&q - &p).mapv(|g| g / n);
    Ok(KlOutput {
        value: value / n,
        grad_clean,
        grad_adv,
    })
}

pub fn log_softmax_rows<T: Real>(logits: &Array2<T>) -> Array2<T> {
    let mut out = logits.clone();
    for mut row in out.rows_mut() {
        let max = row.fold(T::neg_infinity(), |a, &b| a.max(b));
        let lse = row.fold(T::zero(), |acc, &v| acc + (v - max).exp()).ln() + max;
        row.mapv_inplace(|v| v - lse);
    }
    out
}

/// Source-stage objective `L_ce + λ_con · L_con`.
pub fn cortrain_total(cross_entropy: f64, contrastive: f64, lambda_con: f64) -> f64 {
    cross_entropy + lambda_con * contrastive
}

/// Adaptation-stage objective `λ_saa · L_saa + L_dis + L_trade`.
pub fn curda_total(saa: f64, dis: f64, trade: f64, lambda_saa: f64) -> f64 {
    lambda_saa * saa + dis + trade
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn cross_entropy_uniform_is_ln_m() {
        let out = cross_entropy(&Array2::<f64>::zeros((3, 10)), &[0, 4, 9]).unwrap();
        assert!((out.value - 10f64.ln()).abs() < 1e-12);
        assert!((out.value - std::f64::consts::LN_10).abs() < 1e-4);
    }

    #[test]
    fn cross_entropy_confident_correct_is_near_zero() {
        let mut logits = Array2::<f64>::zeros((1, 10));
        logits[[0, 3]] = 50.0;
        assert!(cross_entropy(&logits, &[3]).unwrap().value < 1e-15);
    }

    #[test]
    fn cross_entropy_rejects_bad_label() {
        assert!(matches!(
            cross_entropy(&Array2::<f64>::zeros((1, 3)), &[3]),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn contrastive_hand_values() {
        // same class at distance 3 -> 4.5
        let f = array![[0.0f64, 0.0], [3.0, 0.0]];
        let out = contrastive_loss(&f, &[1, 1], 10.0, &PairSet::all_pairs(&[1, 1])).unwrap();
        assert!((out.value - 4.5).abs() < 1e-12);
        // different class at distance 4 with margin 10 -> ½·36 = 18
        let f = array![[0.0f64, 0.0], [0.0, 4.0]];
        let out = contrastive_loss(&f, &[0, 1], 10.0, &PairSet::all_pairs(&[0, 1])).unwrap();
        assert!((out.value - 18.0).abs() < 1e-12);
        // hinge inactive beyond the margin
        let f = array![[0.0f64, 0.0], [0.0, 12.0]];
        let out = contrastive_loss(&f, &[0, 1], 10.0, &PairSet::all_pairs(&[0, 1])).unwrap();
        assert_eq!(out.value, 0.0);
        // identical same-class features
        let f = array![[1.0, 2.0], [1.0, 2.0]];
        let out = contrastive_loss(&f, &[5, 5], 10.0, &PairSet::all_pairs(&[5, 5])).unwrap();
        assert_eq!(out.value, 0.0);
    }

    #[test]
    fn contrastive_empty_pairs_flagged() {
        let f = array![[0.0, 0.0]];
        let out = contrastive_loss(&f, &[0], 10.0, &PairSet::all_pairs(&[0])).unwrap();
        assert!(out.empty);
        assert_eq!(out.value, 0.0);
    }

    #[test]
    fn pair_set_validation() {
        let p = |i, j| Pair {
            i,
            j,
            same_class: false,
        };
        assert!(PairSet::from_pairs(vec![p(0, 0)], 2).is_err());
        assert!(PairSet::from_pairs(vec![p(0, 1), p(1, 0)], 2).is_err());
        assert!(PairSet::from_pairs(vec![p(0, 2)], 2).is_err());
        assert_eq!(PairSet::from_pairs(vec![p(0, 1)], 2).unwrap().len(), 1);
    }

    #[test]
    fn sampled_pairs_are_distinct_and_capped() {
        use rand::SeedableRng;
        let labels: Vec<usize> = (0..30).map(|i| i % 4).collect();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let ps = PairSet::sampled(&labels, 50, &mut rng);
        assert_eq!(ps.len(), 50);
        assert!(PairSet::from_pairs(ps.pairs().to_vec(), 30).is_ok());
    }

    #[test]
    fn saa_two_dimensional_hand_values() {
        let anchors = array![[0.0f64, 0.0]];
        let clean = array![[3.0, 4.0]];
        let adv = array![[6.0, 8.0]];
        let acc = [AcceptedTarget { row: 0, class: 2 }];
        let out = saa_contrastive_loss(&anchors, &[2], &clean, &adv, &acc, 10.0).unwrap();
        assert!((out.clean_term - 12.5).abs() < 1e-12);
        assert!((out.adv_term - 50.0).abs() < 1e-12);
        assert!((out.value - 62.5).abs() < 1e-12);
    }

    #[test]
    fn saa_zero_and_inactive_pairs() {
        let anchors = array![[1.0, 1.0], [20.0, 0.0]];
        let clean = array![[1.0, 1.0]];
        let adv = array![[1.0, 1.0]];
        let acc = [AcceptedTarget { row: 0, class: 0 }];
        // same-class anchor coincides; other-class anchor is beyond the margin
        let out = saa_contrastive_loss(&anchors, &[0, 1], &clean, &adv, &acc, 10.0).unwrap();
        assert_eq!(out.value, 0.0);
    }

    #[test]
    fn saa_without_accepted_targets_is_skipped() {
        let anchors = array![[0.0, 0.0]];
        let t = array![[1.0, 1.0]];
        let out = saa_contrastive_loss(&anchors, &[0], &t, &t, &[], 10.0).unwrap();
        assert!(out.skipped);
        assert_eq!(out.value, 0.0);
    }

    #[test]
    fn discriminator_loss_at_half_is_two_ln_two() {
        let half = Array1::from_elem(4, 0.5f64);
        let out = discriminator_loss(&half, &half).unwrap();
        assert!((out.value - 2.0 * 2f64.ln()).abs() < 1e-12);
        assert!((out.value - 1.3863).abs() < 1e-4);
    }

    #[test]
    fn discriminator_loss_perfect_separation_near_zero() {
        let out = discriminator_loss(&Array1::from_elem(3, 1.0f64), &Array1::from_elem(3, 0.0)).unwrap();
        assert!(out.value < 1e-6);
        assert!(out.value.is_finite());
    }

    #[test]
    fn encoder_adversarial_loss_values() {
        let (v, _) = encoder_adversarial_loss(&Array1::from_elem(5, 0.5f64)).unwrap();
        assert!((v - 2f64.ln()).abs() < 1e-12);
        let (v, _) = encoder_adversarial_loss(&Array1::from_elem(5, 1.0f64)).unwrap();
        assert!(v < 1e-6);
    }

    #[test]
    fn kl_hand_values() {
        let p = array![[0.2f64, 0.3, 0.5]];
        assert!(trade_kl_loss(&p, &p).unwrap().value.abs() < 1e-15);
        let out = trade_kl_loss(&array![[1.0, 0.0]], &array![[0.5, 0.5]]).unwrap();
        assert!((out.value - 2f64.ln()).abs() < 1e-9);
    }

    #[test]
    fn totals() {
        assert_eq!(cortrain_total(1.7, 9.0, 0.0), 1.7);
        assert_eq!(cortrain_total(0.0, 0.0, 0.01), 0.0);
        assert!((cortrain_total(2.0, 4.5, 0.01) - 2.045).abs() < 1e-12);
        assert_eq!(curda_total(123.0, 0.7, 0.0, 0.0), 0.7);
        assert_eq!(curda_total(0.0, 0.0, 0.0, 0.01), 0.0);
        assert!((curda_total(10.0, 0.7, 0.2, 0.01) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn weights_validation() {
        assert!(LossWeights::default().validate().is_ok());
        let bad = LossWeights {
            margin_target: 0.0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }
}
