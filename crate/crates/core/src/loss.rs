//! Attacker objectives computed from raw classifier logits.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Classifier outputs before softmax. At least two classes, all finite.
#[derive(Debug, Clone, PartialEq)]
pub struct Logits(Vec<f64>);

impl Logits {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.len() < 2 {
            return Err(Error::Domain(format!(
                "logits need at least 2 classes, got {}",
                values.len()
            )));
        }
        if let Some(v) = values.iter().find(|v| !v.is_finite()) {
            return Err(Error::Domain(format!("non-finite logit {v}")));
        }
        Ok(Logits(values))
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn num_classes(&self) -> usize {
        self.0.len()
    }

    /// Index of the largest logit; ties go to the lowest index.
    pub fn argmax(&self) -> usize {
        argmax_excluding(&self.0, None)
    }

    fn check_class(&self, class: usize) -> Result<()> {
        if class >= self.0.len() {
            return Err(Error::Index { what: "class", index: class, len: self.0.len() });
        }
        Ok(())
    }
}

fn argmax_excluding(values: &[f64], skip: Option<usize>) -> usize {
    let mut best: Option<usize> = None;
    for (k, v) in values.iter().enumerate() {
        if Some(k) == skip {
            continue;
        }
        match best {
            Some(b) if values[b] >= *v => {}
            _ => best = Some(k),
        }
    }
    best.unwrap_or(0)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum AttackObjective {
    /// Push inputs away from their true label (cross-entropy ascent).
    Untargeted,
    /// Pull inputs toward `target_class`; labels are not needed.
    Targeted { target_class: usize },
}

impl AttackObjective {
    pub fn target_class(&self) -> Option<usize> {
        match self {
            AttackObjective::Untargeted => None,
            AttackObjective::Targeted { target_class } => Some(*target_class),
        }
    }

    pub fn needs_labels(&self) -> bool {
        matches!(self, AttackObjective::Untargeted)
    }

    /// Loss of a single example. `label` is only read for untargeted attacks.
    pub fn loss(&self, logits: &Logits, label: Option<usize>) -> Result<f64> {
        match self {
            AttackObjective::Untargeted => {
                let label = label.ok_or_else(|| {
                    Error::Config("untargeted attacks need labeled images".into())
                })?;
                cross_entropy(logits, label)
            }
            AttackObjective::Targeted { target_class } => targeted_loss(logits, *target_class),
        }
    }
}

/// `log sum_k exp(z_k) - z_label`, stabilized by subtracting the max logit.
pub fn cross_entropy(logits: &Logits, label: usize) -> Result<f64> {
    logits.check_class(label)?;
    let z = logits.values();
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = z.iter().map(|v| (v - max).exp()).sum();
    let loss = max + sum.ln() - z[label];
    // rounding can produce -0.0 or a hair below zero for a dominant label
    Ok(loss.max(0.0))
}

/// `z_target - max_{k != target} z_k`; positive exactly when the target wins.
pub fn targeted_loss(logits: &Logits, target: usize) -> Result<f64> {
    logits.check_class(target)?;
    let z = logits.values();
    let competitor = argmax_excluding(z, Some(target));
    Ok(z[target] - z[competitor])
}

/// Arithmetic mean of per-example losses over a batch.
pub fn batch_loss(
    outputs: &[Logits],
    labels: &[Option<usize>],
    objective: &AttackObjective,
) -> Result<f64> {
    if outputs.is_empty() {
        return Err(Error::Domain("empty batch".into()));
    }
    if outputs.len() != labels.len() {
        return Err(Error::Shape {
            expected: format!("{} labels", outputs.len()),
            found: format!("{} labels", labels.len()),
        });
    }
    let mut total = 0.0;
    for (logits, label) in outputs.iter().zip(labels) {
        total += objective.loss(logits, *label)?;
    }
    Ok(total / outputs.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn lg(v: &[f64]) -> Logits {
        Logits::new(v.to_vec()).unwrap()
    }

    #[test]
    fn cross_entropy_examples() {
        assert!((cross_entropy(&lg(&[0.0; 4]), 2).unwrap() - 4f64.ln()).abs() < 1e-15);
        assert!((cross_entropy(&lg(&[0.0, 0.0]), 0).unwrap() - 2f64.ln()).abs() < 1e-15);
        // ln(e + e^2 + e^3) - 3, evaluated with mpmath at 50 digits:
        // 0.40760596444438030...
        let v = cross_entropy(&lg(&[1.0, 2.0, 3.0]), 2).unwrap();
        assert!((v - 0.407_605_964_444_380_3).abs() < 1e-15, "{v}");
    }

    #[test]
    fn cross_entropy_survives_huge_logits() {
        let v = cross_entropy(&lg(&[1000.0, 0.0]), 1).unwrap();
        assert!((v - 1000.0).abs() < 1e-9);
        assert_eq!(cross_entropy(&lg(&[1000.0, 0.0]), 0).unwrap(), 0.0);
    }

    #[test]
    fn targeted_examples() {
        assert_eq!(targeted_loss(&lg(&[5.0, 5.0]), 0).unwrap(), 0.0);
        assert_eq!(targeted_loss(&lg(&[1.0, 2.0, 4.0]), 0).unwrap(), -3.0);
        assert_eq!(targeted_loss(&lg(&[3.0, 1.0, 0.0]), 0).unwrap(), 2.0);
    }

    #[test]
    fn errors() {
        assert!(matches!(cross_entropy(&lg(&[0.0, 1.0]), 2), Err(Error::Index { .. })));
        assert!(matches!(targeted_loss(&lg(&[0.0, 1.0]), 5), Err(Error::Index { .. })));
        assert!(Logits::new(vec![1.0]).is_err());
        assert!(Logits::new(vec![1.0, f64::NAN]).is_err());
        assert!(batch_loss(&[], &[], &AttackObjective::Untargeted).is_err());
        assert!(batch_loss(&[lg(&[0.0, 1.0])], &[None], &AttackObjective::Untargeted).is_err());
    }

    #[test]
    fn batch_means() {
        let a = lg(&[0.0, 1.0]);
        let b = lg(&[2.0, -1.0, 0.5]);
        let obj = AttackObjective::Untargeted;
        let la = cross_entropy(&a, 0).unwrap();
        let lb = cross_entropy(&b, 2).unwrap();
        assert_eq!(batch_loss(&[a.clone()], &[Some(0)], &obj).unwrap(), la);
        assert_eq!(
            batch_loss(&[a.clone(), b.clone()], &[Some(0), Some(2)], &obj).unwrap(),
            (la + lb) / 2.0
        );
        // targeted ignores labels entirely
        let t = AttackObjective::Targeted { target_class: 1 };
        assert_eq!(
            batch_loss(&[a.clone()], &[None], &t).unwrap(),
            batch_loss(&[a], &[Some(0)], &t).unwrap()
        );
    }

    #[test]
    fn batch_matches_summation_oracle() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let mut outs = Vec::new();
        let mut labels = Vec::new();
        for _ in 0..10 {
            let v: Vec<f64> = (0..5).map(|_| rng.gen_range(-4.0..4.0)).collect();
            labels.push(Some(rng.gen_range(0..5)));
            outs.push(lg(&v));
        }
        // Oracle: direct (unstabilized) formula summed in a separate loop.
        let mut sum = 0.0;
        for (o, l) in outs.iter().zip(&labels) {
            let z = o.values();
            let lse = z.iter().map(|v| v.exp()).sum::<f64>().ln();
            sum += lse - z[l.unwrap()];
        }
        let oracle = sum / 10.0;
        let got = batch_loss(&outs, &labels, &AttackObjective::Untargeted).unwrap();
        assert!(((got - oracle) / oracle).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn shift_invariance(v in prop::collection::vec(-20.0f64..20.0, 2..12), shift in -50.0f64..50.0, k in 0usize..12) {
            let k = k % v.len();
            let shifted: Vec<f64> = v.iter().map(|x| x + shift).collect();
            let a = cross_entropy(&lg(&v), k).unwrap();
            let b = cross_entropy(&lg(&shifted), k).unwrap();
            prop_assert!((a - b).abs() <= 1e-9 * a.abs().max(1.0));
            let ta = targeted_loss(&lg(&v), k).unwrap();
            let tb = targeted_loss(&lg(&shifted), k).unwrap();
            prop_assert!((ta - tb).abs() <= 1e-9 * ta.abs().max(1.0));
        }

        #[test]
        fn cross_entropy_nonnegative(v in prop::collection::vec(-30.0f64..30.0, 2..12), k in 0usize..12) {
            let k = k % v.len();
            prop_assert!(cross_entropy(&lg(&v), k).unwrap() >= 0.0);
            let n = v.len();
            let uniform = cross_entropy(&lg(&vec![v[0]; n]), k).unwrap();
            prop_assert!((uniform - (n as f64).ln()).abs() < 1e-12);
        }

        #[test]
        fn targeted_sign_tracks_argmax(v in prop::collection::vec(-5i32..5, 2..8), k in 0usize..8) {
            let k = k % v.len();
            let v: Vec<f64> = v.into_iter().map(f64::from).collect();
            let logits = lg(&v);
            let positive = targeted_loss(&logits, k).unwrap() > 0.0;
            prop_assert_eq!(positive, logits.argmax() == k && v.iter().enumerate().all(|(j, x)| j == k || *x < v[k]));
        }
    }
}
