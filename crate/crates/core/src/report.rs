//! What an attack run hands back: the perturbation, its checkpoints, the
//! ledger, and a serializable summary.

use serde::{Deserialize, Serialize};

use crate::oracle::{LedgerAudit, QueryLedger};
use crate::tensor::{PerturbationTile, UniversalPerturbation};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Algorithm {
    Yoqo,
    Yoqt,
}

impl Algorithm {
    /// Queries allowed per image.
    pub fn budget(self) -> u32 {
        match self {
            Algorithm::Yoqo => 1,
            Algorithm::Yoqt => 2,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Algorithm::Yoqo => "yoqo",
            Algorithm::Yoqt => "yoqt",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    IterationLimit,
    DatasetExhausted,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceEntry {
    pub iteration: usize,
    /// Images consumed once this iteration finished.
    pub images_consumed: usize,
    /// Attacker's loss: generation-best for CMA-ES, mean probe loss for
    /// finite differences.
    pub loss: f64,
    pub sigma: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackReport {
    pub algorithm: Algorithm,
    pub config: serde_json::Value,
    pub iterations: usize,
    pub images_consumed: usize,
    /// Oracle calls; always `budget * images_consumed`.
    pub total_queries: u64,
    pub stop_reason: StopReason,
    pub final_loss: Option<f64>,
    pub trace: Vec<TraceEntry>,
    pub audit: LedgerAudit,
    pub wall_time_secs: f64,
}

/// The reported tile as it stood once at most `images` images were used.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub images: usize,
    pub images_used: usize,
    pub tile: PerturbationTile,
}

#[derive(Debug, Clone)]
pub struct AttackOutcome {
    pub tile: PerturbationTile,
    pub perturbation: UniversalPerturbation,
    pub report: AttackReport,
    pub ledger: QueryLedger,
    pub checkpoints: Vec<Checkpoint>,
}

/// Tracks the latest tile within each requested image budget.
#[derive(Debug, Clone)]
pub(crate) struct CheckpointRecorder {
    slots: Vec<Checkpoint>,
}

impl CheckpointRecorder {
    pub(crate) fn new(limits: &[usize], initial: &PerturbationTile) -> Self {
        let mut limits = limits.to_vec();
        limits.sort_unstable();
        limits.dedup();
        let slots = limits
            .into_iter()
            .map(|images| Checkpoint { images, images_used: 0, tile: initial.clone() })
            .collect();
        CheckpointRecorder { slots }
    }

    pub(crate) fn observe(&mut self, consumed: usize, tile: &PerturbationTile) {
        for s in self.slots.iter_mut().filter(|s| consumed <= s.images) {
            s.images_used = consumed;
            s.tile = tile.clone();
        }
    }

    pub(crate) fn finish(self) -> Vec<Checkpoint> {
        self.slots
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn checkpoints_keep_the_last_tile_within_each_limit() {
        let t = |v: f64| PerturbationTile::new(1, 1, vec![v], 1.0).unwrap();
        let mut r = CheckpointRecorder::new(&[1000, 500, 500], &t(0.0));
        r.observe(450, &t(0.1));
        r.observe(900, &t(0.2));
        r.observe(1350, &t(0.3));
        let c = r.finish();
        assert_eq!(c.len(), 2);
        assert_eq!((c[0].images, c[0].images_used, c[0].tile.data()[0]), (500, 450, 0.1));
        assert_eq!((c[1].images, c[1].images_used, c[1].tile.data()[0]), (1000, 900, 0.2));
    }
}
