//! Success rates of a universal perturbation on a held-out set.
//!
//! Untargeted: among images the oracle gets right, the share it gets wrong
//! once perturbed. Targeted: among images not already assigned the target,
//! the share that become the target.

use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::loss::{AttackObjective, Logits};
use crate::oracle::{ClassifierOracle, Dataset, QueryLedger};
use crate::tensor::UniversalPerturbation;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassBreakdown {
    /// Untargeted: true label. Targeted: the clean prediction.
    pub class: usize,
    pub eligible: usize,
    pub success: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationResult {
    pub mode: AttackObjective,
    pub success_rate: f64,
    pub eligible_count: usize,
    pub success_count: usize,
    pub per_class: Vec<ClassBreakdown>,
}

/// Clean and perturbed logits for every holdout image, in dataset order.
#[derive(Debug, Clone, PartialEq)]
pub struct HoldoutLogits {
    pub clean: Vec<Logits>,
    pub perturbed: Vec<Logits>,
    pub labels: Vec<Option<usize>>,
}

pub fn collect_logits(
    oracle: &dyn ClassifierOracle,
    perturbation: &UniversalPerturbation,
    holdout: &Dataset,
) -> Result<HoldoutLogits> {
    let mut out = HoldoutLogits { clean: Vec::new(), perturbed: Vec::new(), labels: Vec::new() };
    for (_, x) in holdout.iter() {
        out.clean.push(oracle.query(x)?);
        out.perturbed.push(oracle.query(&x.perturbed(perturbation)?)?);
        out.labels.push(x.label());
    }
    Ok(out)
}

fn finish(mode: AttackObjective, classes: usize, tallies: impl Iterator<Item = (usize, bool)>) -> Result<EvaluationResult> {
    let mut per_class: Vec<ClassBreakdown> =
        (0..classes).map(|class| ClassBreakdown { class, eligible: 0, success: 0 }).collect();
    for (class, success) in tallies {
        let slot = per_class.get_mut(class).ok_or(Error::Index { what: "class", index: class, len: classes })?;
        slot.eligible += 1;
        slot.success += usize::from(success);
    }
    let eligible_count: usize = per_class.iter().map(|c| c.eligible).sum();
    let success_count: usize = per_class.iter().map(|c| c.success).sum();
    if eligible_count == 0 {
        return Err(Error::Evaluation("no eligible holdout images".into()));
    }
    Ok(EvaluationResult {
        mode,
        success_rate: success_count as f64 / eligible_count as f64,
        eligible_count,
        success_count,
        per_class,
    })
}

pub fn score_untargeted(logits: &HoldoutLogits) -> Result<EvaluationResult> {
    let classes = logits.clean.first().map_or(0, |l| l.num_classes());
    let mut tallies = Vec::new();
    for ((c, p), y) in logits.clean.iter().zip(&logits.perturbed).zip(&logits.labels) {
        let y = y.ok_or_else(|| Error::Evaluation("untargeted evaluation needs labels".into()))?;
        if c.argmax() == y {
            tallies.push((y, p.argmax() != y));
        }
    }
    finish(AttackObjective::Untargeted, classes, tallies.into_iter())
}

pub fn score_targeted(logits: &HoldoutLogits, target: usize) -> Result<EvaluationResult> {
    let classes = logits.clean.first().map_or(0, |l| l.num_classes());
    if target >= classes {
        return Err(Error::Index { what: "target class", index: target, len: classes });
    }
    let tallies = logits
        .clean
        .iter()
        .zip(&logits.perturbed)
        .filter(|(c, _)| c.argmax() != target)
        .map(|(c, p)| (c.argmax(), p.argmax() == target));
    finish(AttackObjective::Targeted { target_class: target }, classes, tallies)
}

pub fn evaluate_untargeted(
    oracle: &dyn ClassifierOracle,
    perturbation: &UniversalPerturbation,
    holdout: &Dataset,
) -> Result<EvaluationResult> {
    score_untargeted(&collect_logits(oracle, perturbation, holdout)?)
}

pub fn evaluate_targeted(
    oracle: &dyn ClassifierOracle,
    perturbation: &UniversalPerturbation,
    holdout: &Dataset,
    target: usize,
) -> Result<EvaluationResult> {
    score_targeted(&collect_logits(oracle, perturbation, holdout)?, target)
}

pub fn evaluate(
    oracle: &dyn ClassifierOracle,
    perturbation: &UniversalPerturbation,
    holdout: &Dataset,
    objective: AttackObjective,
) -> Result<EvaluationResult> {
    match objective {
        AttackObjective::Untargeted => evaluate_untargeted(oracle, perturbation, holdout),
        AttackObjective::Targeted { target_class } => evaluate_targeted(oracle, perturbation, holdout, target_class),
    }
}

/// Fails if any holdout image was queried during the attack.
pub fn check_disjoint(ledger: &QueryLedger, holdout: &Dataset) -> Result<()> {
    let queried: HashSet<u64> = ledger.base_ids().into_iter().collect();
    match holdout.ids().find(|id| queried.contains(id)) {
        Some(id) => Err(Error::Evaluation(format!("holdout image {id} was queried during the attack"))),
        None => Ok(()),
    }
}

/// Median of per-run rates; the mean of the two middle values for even counts.
pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() || values.iter().any(|v| v.is_nan()) {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    Some(if v.len() % 2 == 1 { v[m] } else { 0.5 * (v[m - 1] + v[m]) })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle::{FeedForwardModel, FeedForwardOracle};
    use crate::tensor::{ImageTensor, Shape};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn setup() -> (FeedForwardOracle, Dataset) {
        let shape = Shape::new(3, 3, 1).unwrap();
        let model = FeedForwardModel::random(shape, &[6], 4, 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let imgs: Vec<ImageTensor> = (0..200)
            .map(|_| {
                let x: Vec<f64> = (0..9).map(|_| rng.gen_range(0.0..1.0)).collect();
                let t = ImageTensor::new(shape, x, None).unwrap();
                // label half the images with the model's own answer
                let y = if rng.gen_bool(0.5) { model.forward(&t).unwrap().argmax() } else { rng.gen_range(0..4) };
                t.with_label(Some(y))
            })
            .collect();
        (FeedForwardOracle::new(model), Dataset::new(imgs, 0).unwrap())
    }

    #[test]
    fn zero_perturbation_has_zero_success() {
        let (o, d) = setup();
        let zero = UniversalPerturbation::zeros(d.shape(), 0.3).unwrap();
        let u = evaluate_untargeted(&o, &zero, &d).unwrap();
        assert_eq!(u.success_rate, 0.0);
        assert!(u.eligible_count > 50);
        for t in 0..4 {
            if let Ok(r) = evaluate_targeted(&o, &zero, &d, t) {
                assert_eq!(r.success_count, 0);
            }
        }
    }

    #[test]
    fn replay_from_saved_logits_matches_bit_for_bit() {
        let (o, d) = setup();
        let p = UniversalPerturbation::new(d.shape(), vec![0.3, -0.3, 0.3, 0.3, -0.3, 0.3, -0.3, -0.3, 0.3], 0.3).unwrap();
        let saved = collect_logits(&o, &p, &d).unwrap();
        let live = evaluate_untargeted(&o, &p, &d).unwrap();
        // single pass, no shared code with score_untargeted
        let (mut eligible, mut success) = (0u64, 0u64);
        for k in 0..saved.clean.len() {
            let am = |l: &Logits| {
                let v = l.values();
                (0..v.len()).fold(0, |b, i| if v[i] > v[b] { i } else { b })
            };
            let y = saved.labels[k].unwrap();
            if am(&saved.clean[k]) == y {
                eligible += 1;
                if am(&saved.perturbed[k]) != y {
                    success += 1;
                }
            }
        }
        assert_eq!(live.success_rate.to_bits(), (success as f64 / eligible as f64).to_bits());
    }

    #[test]
    fn targeted_breakdown_double_counts_agree() {
        let (o, d) = setup();
        let p = UniversalPerturbation::new(d.shape(), vec![0.3; 9], 0.3).unwrap();
        let saved = collect_logits(&o, &p, &d).unwrap();
        for t in 0..4 {
            let Ok(r) = score_targeted(&saved, t) else { continue };
            let by_class: usize = r.per_class.iter().map(|c| c.success).sum();
            let direct = saved
                .clean
                .iter()
                .zip(&saved.perturbed)
                .filter(|(c, p)| c.argmax() != t && p.argmax() == t)
                .count();
            assert_eq!(by_class, direct);
            assert_eq!(r.success_count, direct);
            assert_eq!(r.per_class[t].eligible, 0);
            assert!(r.success_count <= r.eligible_count);
        }
    }

    #[test]
    fn no_eligible_images_is_an_error() {
        let (o, d) = setup();
        let zero = UniversalPerturbation::zeros(d.shape(), 0.3).unwrap();
        let wrong: Vec<ImageTensor> = d
            .images()
            .into_iter()
            .map(|x| {
                let y = o.model().forward(&x).unwrap().argmax();
                x.with_label(Some((y + 1) % 4))
            })
            .collect();
        let wrong = Dataset::new(wrong, 0).unwrap();
        assert!(matches!(evaluate_untargeted(&o, &zero, &wrong), Err(Error::Evaluation(_))));
    }

    #[test]
    fn median_is_the_middle_order_statistic() {
        assert_eq!(median(&[0.4]), Some(0.4));
        let runs = [0.61, 0.58, 0.70, 0.49, 0.66];
        let mut sorted = runs.to_vec();
        sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
        assert_eq!(median(&runs), Some(sorted[2]));
        assert_eq!(median(&[]), None);
    }

    #[test]
    fn disjointness_is_checked() {
        let (_, d) = setup();
        let mut ledger = QueryLedger::new(1, 0.3).unwrap();
        let (id, x) = d.iter().nth(3).unwrap();
        ledger.record_query(id, x.data(), x.data()).unwrap();
        assert!(check_disjoint(&ledger, &d).is_err());
        assert!(check_disjoint(&ledger, &d.truncated(3)).is_ok());
    }
}
