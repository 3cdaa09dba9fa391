//! Confidence-thresholded pseudo-labels for unlabeled target samples.

use std::io::Write;
use std::path::Path;

use ndarray::{Array2, Array4};
use serde::{Deserialize, Serialize};

use crate::data::HeldOutLabels;
use crate::error::{Error, Result};
use crate::losses::AcceptedTarget;
use crate::models::{Classifier, Encoder};
use crate::scalar::Real;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Generator {
    SourceModel,
    TargetModel,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PseudoLabel {
    pub sample_index: usize,
    pub predicted_class: usize,
    pub confidence: f64,
    pub accepted: bool,
    pub generator: Generator,
}

/// Source model labels for the first `tau` iterations, the live target model after.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LabelerSchedule {
    pub tau: usize,
    pub p_pseudo: f64,
    /// Whether `tau` counts optimizer steps or completed epochs.
    pub unit: TauUnit,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TauUnit {
    #[default]
    Steps,
    Epochs,
}

impl Default for LabelerSchedule {
    fn default() -> Self {
        Self {
            tau: 20,
            p_pseudo: 0.9,
            unit: TauUnit::Steps,
        }
    }
}

impl LabelerSchedule {
    pub fn validate(&self) -> Result<()> {
        if self.tau == 0 {
            return Err(Error::Config("tau must be positive".into()));
        }
        if !(self.p_pseudo > 0.0 && self.p_pseudo < 1.0) {
            return Err(Error::Config(format!(
                "p_pseudo must lie in (0, 1), got {}",
                self.p_pseudo
            )));
        }
        Ok(())
    }

    /// The counter compared against `tau`, given the step and epoch counters.
    pub fn counter(&self, iteration: usize, epoch: usize) -> usize {
        match self.unit {
            TauUnit::Steps => iteration,
            TauUnit::Epochs => epoch,
        }
    }

    /// `switch_encoders = false` keeps the source model for the whole run.
    pub fn generator_at(&self, iteration: usize, switch_encoders: bool) -> Generator {
        if switch_encoders && iteration >= self.tau {
            Generator::TargetModel
        } else {
            Generator::SourceModel
        }
    }
}

/// Thresholds softmax rows; argmax ties resolve to the lowest class index.
pub fn labels_from_probs<T: Real>(
    probs: &Array2<T>,
    indices: &[usize],
    p_pseudo: f64,
    generator: Generator,
) -> Vec<PseudoLabel> {
    probs
        .rows()
        .into_iter()
        .zip(indices)
        .map(|(row, &sample_index)| {
            let (class, conf) =
                row.iter().enumerate().fold(
                    (0, T::neg_infinity()),
                    |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) },
                );
            let confidence = conf.as_f64();
            PseudoLabel {
                sample_index,
                predicted_class: class,
                confidence,
                accepted: confidence >= p_pseudo,
                generator,
            }
        })
        .collect()
}

/// Labels a target batch with the model the schedule selects at `iteration`.
/// Runs inference only; nothing here feeds a gradient.
#[allow(clippy::too_many_arguments)]
pub fn generate_pseudo_labels<T: Real>(
    pixels: &Array4<T>,
    indices: &[usize],
    iteration: usize,
    schedule: &LabelerSchedule,
    switch_encoders: bool,
    source_encoder: &Encoder<T>,
    target_encoder: &Encoder<T>,
    classifier: &Classifier<T>,
) -> Result<Vec<PseudoLabel>> {
    if indices.len() != pixels.dim().0 {
        return Err(Error::Contract("index count differs from batch size".into()));
    }
    let generator = schedule.generator_at(iteration, switch_encoders);
    let encoder = match generator {
        Generator::SourceModel => source_encoder,
        Generator::TargetModel => target_encoder,
    };
    let (_, probs) = classifier.forward(&encoder.forward(pixels)?)?;
    Ok(labels_from_probs(&probs, indices, schedule.p_pseudo, generator))
}

/// Accepted labels as loss inputs, `row` being the position within the batch.
pub fn accepted_targets(labels: &[PseudoLabel]) -> Vec<AcceptedTarget> {
    labels
        .iter()
        .enumerate()
        .filter(|(_, l)| l.accepted)
        .map(|(row, l)| AcceptedTarget {
            row,
            class: l.predicted_class,
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PseudoLabelStats {
    pub coverage: f64,
    /// `None` when nothing was accepted.
    pub accuracy_on_accepted: Option<f64>,
    pub total: usize,
    pub accepted: usize,
}

/// Coverage and accepted-label accuracy against evaluation-only labels,
/// looked up by `sample_index`.
pub fn pseudo_label_stats(labels: &[PseudoLabel], ground_truth: &HeldOutLabels) -> Result<PseudoLabelStats> {
    let truth = ground_truth.for_evaluation();
    let mut accepted = 0;
    let mut correct = 0;
    for l in labels {
        let y = *truth
            .get(l.sample_index)
            .ok_or_else(|| Error::Contract(format!("no ground truth for sample {}", l.sample_index)))?;
        if l.accepted {
            accepted += 1;
            if l.predicted_class == y {
                correct += 1;
            }
        }
    }
    Ok(PseudoLabelStats {
        coverage: if labels.is_empty() {
            0.0
        } else {
            accepted as f64 / labels.len() as f64
        },
        accuracy_on_accepted: (accepted > 0).then(|| correct as f64 / accepted as f64),
        total: labels.len(),
        accepted,
    })
}

/// Audit dump: one CSV row per pseudo-label.
pub fn write_pseudo_label_csv(path: &Path, labels: &[PseudoLabel]) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut text = String::from("sample_index,predicted_class,confidence,accepted,generator\n");
    for l in labels {
        let generator = match l.generator {
            Generator::SourceModel => "source_model",
            Generator::TargetModel => "target_model",
        };
        text.push_str(&format!(
            "{},{},{},{},{}\n",
            l.sample_index, l.predicted_class, l.confidence, l.accepted, generator
        ));
    }
    f.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn label(idx: usize, class: usize, accepted: bool) -> PseudoLabel {
        PseudoLabel {
            sample_index: idx,
            predicted_class: class,
            confidence: if accepted { 0.95 } else { 0.5 },
            accepted,
            generator: Generator::SourceModel,
        }
    }

    #[test]
    fn schedule_switches_at_tau() {
        let s = LabelerSchedule::default();
        assert_eq!(s.generator_at(0, true), Generator::SourceModel);
        assert_eq!(s.generator_at(19, true), Generator::SourceModel);
        assert_eq!(s.generator_at(20, true), Generator::TargetModel);
        assert_eq!(s.generator_at(10_000, false), Generator::SourceModel);
    }

    #[test]
    fn uniform_softmax_rejected() {
        let probs = Array2::from_elem((1, 10), 0.1f64);
        let l = labels_from_probs(&probs, &[0], 0.9, Generator::SourceModel);
        assert!(!l[0].accepted);
        assert_eq!(l[0].predicted_class, 0);
    }

    #[test]
    fn threshold_is_inclusive() {
        let probs = array![[0.9f64, 0.1], [0.05, 0.95]];
        let l = labels_from_probs(&probs, &[4, 5], 0.9, Generator::TargetModel);
        assert!(l[0].accepted && l[1].accepted);
        assert_eq!(l[1].predicted_class, 1);
        assert_eq!(l[1].sample_index, 5);
    }

    #[test]
    fn stats_all_correct() {
        let gt = HeldOutLabels::new(vec![1, 2]);
        let s = pseudo_label_stats(&[label(0, 1, true), label(1, 2, true)], &gt).unwrap();
        assert_eq!((s.coverage, s.accuracy_on_accepted), (1.0, Some(1.0)));
    }

    #[test]
    fn stats_none_accepted_is_undefined() {
        let gt = HeldOutLabels::new(vec![1, 2]);
        let s = pseudo_label_stats(&[label(0, 1, false), label(1, 2, false)], &gt).unwrap();
        assert_eq!((s.coverage, s.accuracy_on_accepted), (0.0, None));
    }

    #[test]
    fn stats_mixed_four() {
        let gt = HeldOutLabels::new(vec![0, 1, 2, 3]);
        let labels = [
            label(0, 0, true),
            label(1, 9, true),
            label(2, 2, false),
            label(3, 3, false),
        ];
        let s = pseudo_label_stats(&labels, &gt).unwrap();
        assert_eq!((s.coverage, s.accuracy_on_accepted), (0.5, Some(0.5)));
    }

    #[test]
    fn accepted_rows_follow_batch_positions() {
        let labels = [label(10, 3, false), label(11, 4, true)];
        assert_eq!(accepted_targets(&labels), vec![AcceptedTarget { row: 1, class: 4 }]);
    }
}
