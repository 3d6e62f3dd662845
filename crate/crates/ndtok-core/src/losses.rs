//! Training objectives: classification cross-entropy, mask loss (BCE + Dice),
//! cosine feature alignment, and the two composite stage losses. All built on
//! graph ops so every loss is differentiable and gradient-checked.

use crate::error::{invalid, Result};
use crate::graph::{Graph, TensorId};

/// Composite loss weights λ1..λ4.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
    pub lambda4: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { lambda1: 1.0, lambda2: 1.0, lambda3: 1.0, lambda4: 1.0 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.lambda1, self.lambda2, self.lambda3, self.lambda4];
        if all.iter().any(|&l| l < 0.0 || !l.is_finite()) {
            return Err(invalid("loss weights must be nonnegative and finite"));
        }
        Ok(())
    }
}

/// Mean −log softmax(logits)[label] over rows.
pub fn cross_entropy_cls(g: &mut Graph, logits: TensorId, labels: &[usize]) -> Result<TensorId> {
    g.softmax_cross_entropy(logits, labels)
}

/// Mean numerically-stable logit BCE.
pub fn bce_loss(g: &mut Graph, logits: TensorId, targets: TensorId) -> Result<TensorId> {
    g.bce_with_logits(logits, targets)
}

/// 1 − (2·Σpt + 1)/(Σp + Σt + 1), p = sigmoid(logits). Lives in [0, 1).
pub fn dice_loss(g: &mut Graph, logits: TensorId, targets: TensorId) -> Result<TensorId> {
    g.dice_loss(logits, targets)
}

/// Mask loss: BCE and Dice with equal weight.
pub fn mask_loss(g: &mut Graph, logits: TensorId, targets: TensorId) -> Result<TensorId> {
    let bce = bce_loss(g, logits, targets)?;
    let dice = dice_loss(g, logits, targets)?;
    g.add(bce, dice)
}

/// Mean over rows of 1 − cos(a_i, b_i), in [0, 2].
pub fn cosine_alignment_loss(g: &mut Graph, a: TensorId, b: TensorId) -> Result<TensorId> {
    g.cosine_alignment(a, b)
}

/// Pre-training composite: classification + λ1·mask + λ2·Σ_scales alignment,
/// with the alignment term summed over (lifted reference, feature) pairs.
#[allow(clippy::too_many_arguments)]
pub fn stage1_loss(
    g: &mut Graph,
    cls_logits: TensorId,
    cls_labels: &[usize],
    mask_logits: TensorId,
    mask_targets: TensorId,
    features: &[TensorId],
    lifted: &[TensorId],
    weights: &LossWeights,
) -> Result<TensorId> {
    weights.validate()?;
    if features.len() != lifted.len() {
        return Err(invalid("one lifted reference per feature scale required"));
    }
    let cls = cross_entropy_cls(g, cls_logits, cls_labels)?;
    let mask = mask_loss(g, mask_logits, mask_targets)?;
    let mask_scaled = g.scale(mask, weights.lambda1)?;
    let mut total = g.add(cls, mask_scaled)?;
    if !features.is_empty() {
        let mut align: Option<TensorId> = None;
        for (f, fc) in features.iter().zip(lifted) {
            let term = cosine_alignment_loss(g, *fc, *f)?;
            align = Some(match align {
                Some(acc) => g.add(acc, term)?,
                None => term,
            });
        }
        let align_scaled = g.scale(align.expect("nonempty"), weights.lambda2)?;
        total = g.add(total, align_scaled)?;
    }
    Ok(total)
}

/// Instruction-tuning composite: next-token cross-entropy + λ3·mask +
/// λ4·alignment between predicted and reference hidden states.
#[allow(clippy::too_many_arguments)]
pub fn stage2_loss(
    g: &mut Graph,
    token_logits: TensorId,
    token_targets: &[usize],
    mask_logits: TensorId,
    mask_targets: TensorId,
    h_pred: TensorId,
    h_gt: TensorId,
    weights: &LossWeights,
) -> Result<TensorId> {
    weights.validate()?;
    let lt = g.softmax_cross_entropy(token_logits, token_targets)?;
    let mask = mask_loss(g, mask_logits, mask_targets)?;
    let mask_scaled = g.scale(mask, weights.lambda3)?;
    let align = cosine_alignment_loss(g, h_pred, h_gt)?;
    let align_scaled = g.scale(align, weights.lambda4)?;
    let partial = g.add(lt, mask_scaled)?;
    g.add(partial, align_scaled)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::math;
    use crate::tensor::Tensor;
    use alloc::vec;
    use alloc::vec::Vec;

    fn scalar(g: &Graph, id: TensorId) -> f64 {
        g.value(id).scalar_value().unwrap()
    }

    #[test]
    fn saturated_correct_logits_give_zero_ce() {
        let mut g = Graph::new();
        let logits = g.constant(Tensor::new(1, 3, vec![30.0, 0.0, 0.0]).unwrap()).unwrap();
        let loss = cross_entropy_cls(&mut g, logits, &[0]).unwrap();
        assert!(scalar(&g, loss) <= 1e-10);
    }

    #[test]
    fn uniform_logits_ce_is_ln_k() {
        let mut g = Graph::new();
        let logits = g.constant(Tensor::new(2, 4, vec![1.0; 8]).unwrap()).unwrap();
        let loss = cross_entropy_cls(&mut g, logits, &[0, 3]).unwrap();
        assert!((scalar(&g, loss) - math::ln(4.0)).abs() < 1e-12);
    }

    #[test]
    fn out_of_range_label_rejected() {
        let mut g = Graph::new();
        let logits = g.constant(Tensor::new(1, 3, vec![0.0; 3]).unwrap()).unwrap();
        assert!(cross_entropy_cls(&mut g, logits, &[3]).is_err());
    }

    #[test]
    fn dice_hand_fixture_is_0_4() {
        // p ≡ 0.5 uniform (zero logits), target half-ones on N = 4:
        // 1 − (2·1 + 1)/(2 + 2 + 1) = 0.4.
        let mut g = Graph::new();
        let logits = g.constant(Tensor::new(1, 4, vec![0.0; 4]).unwrap()).unwrap();
        let targets = g.constant(Tensor::new(1, 4, vec![1.0, 1.0, 0.0, 0.0]).unwrap()).unwrap();
        let loss = dice_loss(&mut g, logits, targets).unwrap();
        assert!((scalar(&g, loss) - 0.4).abs() < 1e-12);
    }

    #[test]
    fn dice_perfect_overlap_is_tiny() {
        let mut g = Graph::new();
        let logits = g.constant(Tensor::new(1, 4, vec![30.0, 30.0, -30.0, -30.0]).unwrap()).unwrap();
        let targets = g.constant(Tensor::new(1, 4, vec![1.0, 1.0, 0.0, 0.0]).unwrap()).unwrap();
        let loss = dice_loss(&mut g, logits, targets).unwrap();
        assert!(scalar(&g, loss) <= 1e-6);
    }

    #[test]
    fn dice_empty_target_saturating_negative_logits() {
        let mut g = Graph::new();
        let logits = g.constant(Tensor::new(1, 5, vec![-30.0; 5]).unwrap()).unwrap();
        let targets = g.constant(Tensor::new(1, 5, vec![0.0; 5]).unwrap()).unwrap();
        let loss = dice_loss(&mut g, logits, targets).unwrap();
        assert!(scalar(&g, loss).abs() <= 1e-6, "smoothing keeps the empty case near zero");
    }

    #[test]
    fn bce_zero_logit_vs_one_target_is_ln2() {
        let mut g = Graph::new();
        let logits = g.constant(Tensor::new(1, 2, vec![0.0, 0.0]).unwrap()).unwrap();
        let targets = g.constant(Tensor::new(1, 2, vec![1.0, 1.0]).unwrap()).unwrap();
        let loss = bce_loss(&mut g, logits, targets).unwrap();
        assert!((scalar(&g, loss) - math::ln(2.0)).abs() < 1e-12);
    }

    #[test]
    fn bce_saturated_is_near_zero() {
        let mut g = Graph::new();
        let logits = g.constant(Tensor::new(1, 2, vec![30.0, -30.0]).unwrap()).unwrap();
        let targets = g.constant(Tensor::new(1, 2, vec![1.0, 0.0]).unwrap()).unwrap();
        let loss = bce_loss(&mut g, logits, targets).unwrap();
        assert!(scalar(&g, loss) <= 1e-10);
    }

    #[test]
    fn cosine_anchors() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::new(2, 2, vec![1.0, 0.0, 0.0, 2.0]).unwrap()).unwrap();
        let same = cosine_alignment_loss(&mut g, a, a).unwrap();
        assert!(scalar(&g, same).abs() < 1e-12);

        let mut g = Graph::new();
        let a = g.constant(Tensor::new(1, 2, vec![1.0, 0.0]).unwrap()).unwrap();
        let b = g.constant(Tensor::new(1, 2, vec![0.0, 1.0]).unwrap()).unwrap();
        let orth = cosine_alignment_loss(&mut g, a, b).unwrap();
        assert!((scalar(&g, orth) - 1.0).abs() < 1e-12);

        let mut g = Graph::new();
        let a = g.constant(Tensor::new(1, 2, vec![1.0, 1.0]).unwrap()).unwrap();
        let b = g.constant(Tensor::new(1, 2, vec![-1.0, -1.0]).unwrap()).unwrap();
        let opp = cosine_alignment_loss(&mut g, a, b).unwrap();
        assert!((scalar(&g, opp) - 2.0).abs() < 1e-12);
    }

    #[test]
    fn zero_norm_rows_count_as_orthogonal() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::new(1, 2, vec![0.0, 0.0]).unwrap()).unwrap();
        let b = g.constant(Tensor::new(1, 2, vec![1.0, 1.0]).unwrap()).unwrap();
        let loss = cosine_alignment_loss(&mut g, a, b).unwrap();
        assert!((scalar(&g, loss) - 1.0).abs() < 1e-12);
    }

    fn stage1_fixture(g: &mut Graph) -> (TensorId, TensorId, TensorId, Vec<TensorId>, Vec<TensorId>) {
        let cls = g.constant(Tensor::new(2, 3, vec![2.0, -1.0, 0.5, 0.1, 0.2, 0.3]).unwrap()).unwrap();
        let mask_logits = g.constant(Tensor::new(1, 4, vec![1.5, -0.5, 2.0, -2.0]).unwrap()).unwrap();
        let mask_targets = g.constant(Tensor::new(1, 4, vec![1.0, 0.0, 1.0, 0.0]).unwrap()).unwrap();
        let f = g.constant(Tensor::new(2, 3, vec![1.0, 0.5, -0.2, 0.3, 0.9, 1.1]).unwrap()).unwrap();
        let fc = g.constant(Tensor::new(2, 3, vec![0.8, 0.4, 0.1, -0.3, 1.0, 0.9]).unwrap()).unwrap();
        (cls, mask_logits, mask_targets, vec![f], vec![fc])
    }

    #[test]
    fn stage1_zero_weights_reduces_to_ce() {
        let mut g = Graph::new();
        let (cls, ml, mt, f, fc) = stage1_fixture(&mut g);
        let w = LossWeights { lambda1: 0.0, lambda2: 0.0, ..LossWeights::default() };
        let total = stage1_loss(&mut g, cls, &[0, 2], ml, mt, &f, &fc, &w).unwrap();
        let ce_alone = {
            let mut g2 = Graph::new();
            let cls2 = g2
                .constant(Tensor::new(2, 3, vec![2.0, -1.0, 0.5, 0.1, 0.2, 0.3]).unwrap())
                .unwrap();
            let l = cross_entropy_cls(&mut g2, cls2, &[0, 2]).unwrap();
            scalar(&g2, l)
        };
        assert!((scalar(&g, total) - ce_alone).abs() < 1e-15);
    }

    #[test]
    fn stage1_matches_independently_summed_components() {
        let w = LossWeights { lambda1: 0.7, lambda2: 1.3, ..LossWeights::default() };
        let labels = [0usize, 2];

        let mut g = Graph::new();
        let (cls, ml, mt, f, fc) = stage1_fixture(&mut g);
        let total = stage1_loss(&mut g, cls, &labels, ml, mt, &f, &fc, &w).unwrap();
        let got = scalar(&g, total);

        // Recompute each component on a fresh graph and sum by hand.
        let mut g2 = Graph::new();
        let (cls, ml, mt, f, fc) = stage1_fixture(&mut g2);
        let ce = cross_entropy_cls(&mut g2, cls, &labels).unwrap();
        let bce = bce_loss(&mut g2, ml, mt).unwrap();
        let dice = dice_loss(&mut g2, ml, mt).unwrap();
        let cos = cosine_alignment_loss(&mut g2, fc[0], f[0]).unwrap();
        let expected = scalar(&g2, ce)
            + w.lambda1 * (scalar(&g2, bce) + scalar(&g2, dice))
            + w.lambda2 * scalar(&g2, cos);
        assert!((got - expected).abs() < 1e-12);
    }

    #[test]
    fn stage2_zero_weights_reduces_to_token_ce() {
        let mut g = Graph::new();
        let tl = g.constant(Tensor::new(2, 4, vec![0.5, 0.1, -0.3, 0.9, 1.0, 0.0, 0.2, -0.5]).unwrap()).unwrap();
        let ml = g.constant(Tensor::new(1, 3, vec![0.3, -0.2, 0.8]).unwrap()).unwrap();
        let mt = g.constant(Tensor::new(1, 3, vec![1.0, 0.0, 1.0]).unwrap()).unwrap();
        let hp = g.constant(Tensor::new(1, 3, vec![1.0, 0.0, 0.0]).unwrap()).unwrap();
        let hg = g.constant(Tensor::new(1, 3, vec![0.0, 1.0, 0.0]).unwrap()).unwrap();
        let w = LossWeights { lambda3: 0.0, lambda4: 0.0, ..LossWeights::default() };
        let total = stage2_loss(&mut g, tl, &[3, 0], ml, mt, hp, hg, &w).unwrap();

        let mut g2 = Graph::new();
        let tl2 = g2.constant(Tensor::new(2, 4, vec![0.5, 0.1, -0.3, 0.9, 1.0, 0.0, 0.2, -0.5]).unwrap()).unwrap();
        let ce = g2.softmax_cross_entropy(tl2, &[3, 0]).unwrap();
        assert!((scalar(&g, total) - scalar(&g2, ce)).abs() < 1e-15);
    }

    #[test]
    fn stage2_identical_hidden_states_zero_alignment() {
        let mut g = Graph::new();
        let tl = g.constant(Tensor::new(1, 2, vec![0.2, 0.8]).unwrap()).unwrap();
        let ml = g.constant(Tensor::new(1, 2, vec![5.0, -5.0]).unwrap()).unwrap();
        let mt = g.constant(Tensor::new(1, 2, vec![1.0, 0.0]).unwrap()).unwrap();
        let h = g.constant(Tensor::new(2, 3, vec![0.1, 0.9, -0.2, 1.0, 0.5, 0.3]).unwrap()).unwrap();
        let w = LossWeights::default();
        let with_align = stage2_loss(&mut g, tl, &[1], ml, mt, h, h, &w).unwrap();

        let mut g2 = Graph::new();
        let tl2 = g2.constant(Tensor::new(1, 2, vec![0.2, 0.8]).unwrap()).unwrap();
        let ml2 = g2.constant(Tensor::new(1, 2, vec![5.0, -5.0]).unwrap()).unwrap();
        let mt2 = g2.constant(Tensor::new(1, 2, vec![1.0, 0.0]).unwrap()).unwrap();
        let h2 = g2.constant(Tensor::new(2, 3, vec![0.1, 0.9, -0.2, 1.0, 0.5, 0.3]).unwrap()).unwrap();
        let w0 = LossWeights { lambda4: 0.0, ..w };
        let without = stage2_loss(&mut g2, tl2, &[1], ml2, mt2, h2, h2, &w0).unwrap();
        assert!((scalar(&g, with_align) - scalar(&g2, without)).abs() < 1e-12);
    }

    #[test]
    fn composites_are_linear_in_weights() {
        let labels = [0usize, 2];
        let eval = |l1: f64, l2: f64| {
            let mut g = Graph::new();
            let (cls, ml, mt, f, fc) = stage1_fixture(&mut g);
            let w = LossWeights { lambda1: l1, lambda2: l2, ..LossWeights::default() };
            let id = stage1_loss(&mut g, cls, &labels, ml, mt, &f, &fc, &w).unwrap();
            scalar(&g, id)
        };
        let zero = eval(0.0, 0.0);
        let one = eval(0.9, 0.4);
        let two = eval(1.8, 0.8);
        assert!(((two - zero) - 2.0 * (one - zero)).abs() < 1e-12);
    }
}
