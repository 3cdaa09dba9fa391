//! Clean accuracy, white-box robustness, result tables, and embedding dumps.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::Write as _;
use std::path::Path;
use std::str::FromStr;

use ndarray::{s, Array2, Array4, Axis};
use serde::{Deserialize, Serialize};

use crate::attacks::{pgd_attack, AttackBudget};
use crate::config::{Arm, Method};
use crate::data::Domain;
use crate::error::{Error, Result};
use crate::models::{Classifier, Encoder};
use crate::pseudo_label::{Generator, PseudoLabelStats};
use crate::rng::rng_for;

/// Images attacked and classified per forward pass.
pub const EVAL_CHUNK: usize = 250;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    /// Percentage in `[0, 100]`.
    pub clean_acc: f64,
    /// Percentage of PGD-attacked inputs still classified correctly.
    pub adv_rob: f64,
    /// Per-class percentages; `None` for classes absent from the test set.
    pub per_class_clean: Vec<Option<f64>>,
    pub per_class_adv: Vec<Option<f64>>,
    pub samples: usize,
}

fn argmax_rows(logits: &Array2<f32>) -> Vec<usize> {
    logits
        .rows()
        .into_iter()
        .map(|r| {
            r.iter()
                .enumerate()
                .fold(
                    (0, f32::NEG_INFINITY),
                    |best, (k, &v)| if v > best.1 { (k, v) } else { best },
                )
                .0
        })
        .collect()
}

/// Predicted classes of `pixels` under `classifier ∘ encoder`.
pub fn predict(encoder: &Encoder<f32>, classifier: &Classifier<f32>, pixels: &Array4<f32>) -> Result<Vec<usize>> {
    let mut out = Vec::with_capacity(pixels.dim().0);
    for chunk in pixels.axis_chunks_iter(Axis(0), EVAL_CHUNK) {
        let (logits, _) = classifier.forward(&encoder.forward(&chunk.to_owned())?)?;
        out.extend(argmax_rows(&logits));
    }
    Ok(out)
}

/// Scores the model on clean inputs and on PGD outputs generated against
/// this exact model. Model parameters are only read.
pub fn evaluate(
    encoder: &Encoder<f32>,
    classifier: &Classifier<f32>,
    pixels: &Array4<f32>,
    labels: &[usize],
    budget: &AttackBudget,
    seed: u64,
) -> Result<Evaluation> {
    let n = pixels.dim().0;
    if n == 0 {
        return Err(Error::Contract("evaluation set is empty".into()));
    }
    if labels.len() != n {
        return Err(Error::Contract(format!("{} labels for {n} test images", labels.len())));
    }
    let k = classifier.num_classes();
    let mut clean_hits = vec![0usize; k];
    let mut adv_hits = vec![0usize; k];
    let mut counts = vec![0usize; k];
    for (c, start) in (0..n).step_by(EVAL_CHUNK).enumerate() {
        let end = (start + EVAL_CHUNK).min(n);
        let x = pixels.slice(s![start..end, .., .., ..]).to_owned();
        let y = &labels[start..end];
        let clean = predict(encoder, classifier, &x)?;
        let mut rng = rng_for(seed, "evaluate", c as u64);
        let x_adv = pgd_attack(encoder, classifier, &x, Some(y), budget, &mut rng)?;
        let adv = predict(encoder, classifier, &x_adv)?;
        for ((&t, &pc), &pa) in y.iter().zip(&clean).zip(&adv) {
            if t >= k {
                return Err(Error::Contract(format!("label {t} outside 0..{k}")));
            }
            counts[t] += 1;
            clean_hits[t] += usize::from(pc == t);
            adv_hits[t] += usize::from(pa == t);
        }
    }
    let pct = |hits: usize, total: usize| 100.0 * hits as f64 / total as f64;
    let per_class = |hits: &[usize]| {
        hits.iter()
            .zip(&counts)
            .map(|(&h, &c)| (c > 0).then(|| pct(h, c)))
            .collect()
    };
    Ok(Evaluation {
        clean_acc: pct(clean_hits.iter().sum(), n),
        adv_rob: pct(adv_hits.iter().sum(), n),
        per_class_clean: per_class(&clean_hits),
        per_class_adv: per_class(&adv_hits),
        samples: n,
    })
}

/// Pseudo-label statistics of one adaptation epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochPseudoStats {
    pub epoch: usize,
    /// Generator used for the epoch's last step.
    pub generator: Generator,
    pub stats: PseudoLabelStats,
}

/// Everything one run reports. Serialized as `result.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRecord {
    pub fingerprint: String,
    pub name: String,
    /// Table row label, e.g. `CURDA` or `w/o L_saa`.
    pub tag: String,
    pub method: Method,
    pub arm: Option<Arm>,
    pub pair_id: String,
    pub seed: u64,
    pub clean_acc: f64,
    pub adv_rob: f64,
    pub per_class_clean: Vec<Option<f64>>,
    pub per_class_adv: Vec<Option<f64>>,
    pub eval_samples: usize,
    pub eval_attack: AttackBudget,
    /// Frozen source pipeline labeling the whole target training split.
    pub source_model_pseudo: Option<PseudoLabelStats>,
    /// Final target pipeline labeling the whole target training split.
    pub target_model_pseudo: Option<PseudoLabelStats>,
    pub pseudo_history: Vec<EpochPseudoStats>,
    /// Training time; re-evaluation keeps the stored value.
    pub wall_clock_secs: f64,
    pub complete: bool,
    pub error: Option<String>,
}

impl ResultRecord {
    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::Serde(e.to_string()))?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Serde(format!("{}: {e}", path.display())))
    }
}

pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    Some(if v.len() % 2 == 1 {
        v[m]
    } else {
        0.5 * (v[m - 1] + v[m])
    })
}

/// Text and CSV renderings of a result table.
#[derive(Debug, Clone, PartialEq)]
pub struct Tables {
    pub text: String,
    pub csv: String,
}

/// Rows are tags in first-seen order, columns `(clean, adv)` per domain pair.
/// Repeated `(tag, pair)` cells (several seeds) are reduced to their median.
/// In the text form the best value of each column is wrapped in `**`.
pub fn render_tables(records: &[ResultRecord]) -> Tables {
    let mut tags: Vec<&str> = Vec::new();
    let mut pairs: Vec<&str> = Vec::new();
    let mut cells: BTreeMap<(usize, usize), (Vec<f64>, Vec<f64>)> = BTreeMap::new();
    for r in records {
        let ti = position_or_push(&mut tags, &r.tag);
        let pi = position_or_push(&mut pairs, &r.pair_id);
        let cell = cells.entry((ti, pi)).or_default();
        cell.0.push(r.clean_acc);
        cell.1.push(r.adv_rob);
    }
    let value = |ti: usize, col: usize| -> Option<f64> {
        let (clean, adv) = cells.get(&(ti, col / 2))?;
        median(if col.is_multiple_of(2) { clean } else { adv })
    };
    let ncols = pairs.len() * 2;
    let best: Vec<Option<f64>> = (0..ncols)
        .map(|c| (0..tags.len()).filter_map(|t| value(t, c)).max_by(f64::total_cmp))
        .collect();

    let mut header = vec!["method".to_string()];
    for p in &pairs {
        header.push(format!("{p} clean"));
        header.push(format!("{p} adv"));
    }
    let mut csv = header.join(",") + "\n";
    let mut rows = vec![header];
    for (ti, tag) in tags.iter().enumerate() {
        let mut text_row = vec![tag.to_string()];
        let mut csv_row = vec![csv_field(tag)];
        for (c, b) in best.iter().enumerate() {
            match value(ti, c) {
                Some(v) => {
                    let cell = format!("{v:.1}");
                    csv_row.push(cell.clone());
                    text_row.push(if Some(v) == *b { format!("**{cell}**") } else { cell });
                }
                None => {
                    csv_row.push(String::new());
                    text_row.push("-".into());
                }
            }
        }
        csv.push_str(&(csv_row.join(",") + "\n"));
        rows.push(text_row);
    }
    let widths: Vec<usize> = (0..=ncols)
        .map(|c| rows.iter().map(|r| r[c].chars().count()).max().unwrap_or(0))
        .collect();
    let mut text = String::new();
    for (i, row) in rows.iter().enumerate() {
        let line: Vec<String> = row
            .iter()
            .zip(&widths)
            .enumerate()
            .map(|(c, (cell, &w))| {
                if c == 0 {
                    format!("{cell:<w$}")
                } else {
                    format!("{cell:>w$}")
                }
            })
            .collect();
        let _ = writeln!(text, "{}", line.join(" | ").trim_end());
        if i == 0 {
            let rule: Vec<String> = widths.iter().map(|&w| "-".repeat(w)).collect();
            let _ = writeln!(text, "{}", rule.join("-|-"));
        }
    }
    Tables { text, csv }
}

fn position_or_push<'a>(list: &mut Vec<&'a str>, item: &'a str) -> usize {
    list.iter().position(|x| *x == item).unwrap_or_else(|| {
        list.push(item);
        list.len() - 1
    })
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

/// Which activation an embedding dump records.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmbeddingLayer {
    /// Encoder output.
    Encoder,
    /// Classifier input after its ReLU, the layer before the logits.
    Penultimate,
}

impl FromStr for EmbeddingLayer {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "encoder" => Ok(Self::Encoder),
            "penultimate" => Ok(Self::Penultimate),
            other => Err(Error::Config(format!(
                "unknown embedding layer {other:?}; expected encoder or penultimate"
            ))),
        }
    }
}

impl EmbeddingLayer {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Encoder => "encoder",
            Self::Penultimate => "penultimate",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Clean,
    Adv,
}

impl Variant {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Clean => "clean",
            Self::Adv => "adv",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingRow {
    pub features: Vec<f32>,
    pub domain: Domain,
    pub variant: Variant,
    pub true_class: usize,
    pub pred_class: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingDump {
    pub layer: EmbeddingLayer,
    pub feature_dim: usize,
    pub rows: Vec<EmbeddingRow>,
}

/// Labeled images from one domain, embedded with that domain's encoder.
pub struct EmbeddingSet<'a> {
    pub domain: Domain,
    pub encoder: &'a Encoder<f32>,
    pub pixels: Array4<f32>,
    pub labels: Vec<usize>,
}

/// First `per_class` positions of each requested class, in class order.
pub fn select_per_class(labels: &[usize], classes: &[usize], per_class: usize) -> Vec<usize> {
    classes
        .iter()
        .flat_map(|&c| {
            labels
                .iter()
                .enumerate()
                .filter(move |(_, &y)| y == c)
                .map(|(i, _)| i)
                .take(per_class)
        })
        .collect()
}

/// Embeds every set clean and under PGD (against the set's own encoder),
/// giving `2 × Σ |set|` rows.
pub fn export_embeddings(
    sets: &[EmbeddingSet<'_>],
    classifier: &Classifier<f32>,
    layer: EmbeddingLayer,
    budget: &AttackBudget,
    seed: u64,
) -> Result<EmbeddingDump> {
    let feature_dim = sets.first().map_or(classifier.fc.inputs(), |s| s.encoder.feature_dim());
    let mut rows = Vec::new();
    for (si, set) in sets.iter().enumerate() {
        if set.labels.len() != set.pixels.dim().0 {
            return Err(Error::Contract("embedding set label count mismatch".into()));
        }
        if set.labels.is_empty() {
            continue;
        }
        let mut rng = rng_for(seed, "embeddings", si as u64);
        let adv = pgd_attack(
            set.encoder,
            classifier,
            &set.pixels,
            Some(&set.labels),
            budget,
            &mut rng,
        )?;
        for (variant, x) in [(Variant::Clean, &set.pixels), (Variant::Adv, &adv)] {
            let features = set.encoder.forward(x)?;
            let (logits, _) = classifier.forward(&features)?;
            let emb = match layer {
                EmbeddingLayer::Encoder => features,
                EmbeddingLayer::Penultimate => classifier.penultimate(&features),
            };
            for ((row, &y), pred) in emb.rows().into_iter().zip(&set.labels).zip(argmax_rows(&logits)) {
                rows.push(EmbeddingRow {
                    features: row.to_vec(),
                    domain: set.domain,
                    variant,
                    true_class: y,
                    pred_class: pred,
                });
            }
        }
    }
    Ok(EmbeddingDump {
        layer,
        feature_dim,
        rows,
    })
}

impl EmbeddingDump {
    pub fn header(&self) -> String {
        let mut cols: Vec<String> = (0..self.feature_dim).map(|i| format!("f{i}")).collect();
        cols.extend(["domain", "variant", "true_class", "pred_class"].map(String::from));
        cols.join(",")
    }

    pub fn to_csv(&self) -> String {
        let mut out = self.header() + "\n";
        for r in &self.rows {
            for v in &r.features {
                let _ = write!(out, "{v},");
            }
            let _ = writeln!(
                out,
                "{},{},{},{}",
                r.domain.as_str(),
                r.variant.as_str(),
                r.true_class,
                r.pred_class
            );
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(self.to_csv().as_bytes()).map_err(|e| Error::io(path, e))
    }

    /// Fraction of target-adversarial rows whose nearest source-clean class
    /// centroid is their own class. `None` without such rows or centroids.
    pub fn centroid_alignment(&self) -> Option<f64> {
        let mut sums: BTreeMap<usize, (Vec<f64>, usize)> = BTreeMap::new();
        for r in self
            .rows
            .iter()
            .filter(|r| r.domain == Domain::Source && r.variant == Variant::Clean)
        {
            let e = sums
                .entry(r.true_class)
                .or_insert_with(|| (vec![0.0; r.features.len()], 0));
            e.0.iter_mut().zip(&r.features).for_each(|(a, &b)| *a += f64::from(b));
            e.1 += 1;
        }
        let centroids: Vec<(usize, Vec<f64>)> = sums
            .into_iter()
            .map(|(c, (s, n))| (c, s.into_iter().map(|v| v / n as f64).collect()))
            .collect();
        if centroids.is_empty() {
            return None;
        }
        let targets: Vec<&EmbeddingRow> = self
            .rows
            .iter()
            .filter(|r| r.domain == Domain::Target && r.variant == Variant::Adv)
            .collect();
        if targets.is_empty() {
            return None;
        }
        let hits = targets
            .iter()
            .filter(|r| {
                let nearest = centroids
                    .iter()
                    .map(|(c, m)| {
                        let d: f64 = m
                            .iter()
                            .zip(&r.features)
                            .map(|(a, &b)| (a - f64::from(b)).powi(2))
                            .sum();
                        (*c, d)
                    })
                    .min_by(|a, b| a.1.total_cmp(&b.1))
                    .map(|(c, _)| c);
                nearest == Some(r.true_class)
            })
            .count();
        Some(hits as f64 / targets.len() as f64)
    }
}
