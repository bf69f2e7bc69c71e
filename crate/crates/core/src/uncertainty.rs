//! MC-dropout soft labels, entropy scoring and per-class source-like
//! selection.
//!
//! Each unlabeled example gets a soft label averaged over two random views
//! and `n_r` dropout-active forward passes of each view. Its entropy measures
//! how far the example sits from every class prototype of the frozen
//! classifier. Per predicted class the `h` lowest-entropy examples become
//! trusted pseudo-labeled data; the rest stay in the high-uncertainty group.

use std::cmp::Ordering;

use rand::RngCore;
use serde::{Deserialize, Serialize};

use crate::data::{augment_rows, UnlabeledPool};
use crate::error::{Error, Result};
use crate::model::{argmax, Model};
use crate::tensor::{Tensor, LOG_CLAMP};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UncertaintyConfig {
    /// Dropout repetitions per view.
    #[serde(default = "default_n_r")]
    pub n_r: usize,
    /// Examples kept per predicted class. Zero disables selection.
    #[serde(default = "default_snpc")]
    pub snpc: usize,
    #[serde(default = "default_strength")]
    pub augment_strength: f64,
    /// Replace the selected soft labels by one-hot vectors.
    #[serde(default)]
    pub harden_selected: bool,
}

fn default_n_r() -> usize {
    5
}
fn default_snpc() -> usize {
    5
}
fn default_strength() -> f64 {
    0.05
}

impl Default for UncertaintyConfig {
    fn default() -> Self {
        UncertaintyConfig {
            n_r: default_n_r(),
            snpc: default_snpc(),
            augment_strength: default_strength(),
            harden_selected: false,
        }
    }
}

impl UncertaintyConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_r == 0 {
            return Err(Error::Config("uncertainty.n_r must be at least 1".into()));
        }
        if !(self.augment_strength >= 0.0 && self.augment_strength.is_finite()) {
            return Err(Error::Config("uncertainty.augment_strength must be non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct UncertaintyRecord {
    /// Position in the unlabeled pool.
    pub index: usize,
    pub soft_label: Vec<f64>,
    pub entropy: f64,
    pub predicted_class: usize,
}

/// Soft labels for every row of `x`: `1/(2·n_r) · Σ_i [p_i(x1) + p_i(x2)]`
/// where `x1`, `x2` are two augmented views and each `p_i` is a
/// dropout-active forward pass.
///
/// Random draws happen in a fixed order: all rows of view 1, all rows of
/// view 2, then for each repetition the view-1 pass followed by the view-2
/// pass.
pub fn estimate_soft_labels(
    model: &Model,
    x: &Tensor,
    cfg: &UncertaintyConfig,
    rng: &mut dyn RngCore,
) -> Result<Vec<Vec<f64>>> {
    cfg.validate()?;
    let view1 = augment_rows(x, cfg.augment_strength, rng)?;
    let view2 = augment_rows(x, cfg.augment_strength, rng)?;
    let (n, k) = (x.rows(), model.config().num_classes);
    let mut acc = vec![0.0; n * k];
    for _ in 0..cfg.n_r {
        for view in [&view1, &view2] {
            let p = model.predict_proba(view, Some(&mut *rng))?;
            acc.iter_mut().zip(p.data()).for_each(|(a, v)| *a += v);
        }
    }
    let norm = 1.0 / (2 * cfg.n_r) as f64;
    Ok(acc
        .chunks(k)
        .map(|row| row.iter().map(|v| v * norm).collect())
        .collect())
}

/// Single-example form of [`estimate_soft_labels`].
pub fn estimate_soft_label(
    model: &Model,
    x: &[f64],
    cfg: &UncertaintyConfig,
    rng: &mut dyn RngCore,
) -> Result<Vec<f64>> {
    let x = Tensor::from_rows(&[x])?;
    Ok(estimate_soft_labels(model, &x, cfg, rng)?.remove(0))
}

/// Shannon entropy `-Σ p ln p` in nats; zero entries contribute nothing.
pub fn entropy(p: &[f64]) -> f64 {
    -p.iter()
        .map(|&v| if v > 0.0 { v * v.max(LOG_CLAMP).ln() } else { 0.0 })
        .sum::<f64>()
}

pub fn score_pool(
    model: &Model,
    pool: &UnlabeledPool,
    cfg: &UncertaintyConfig,
    rng: &mut dyn RngCore,
) -> Result<Vec<UncertaintyRecord>> {
    let labels = estimate_soft_labels(model, &pool.features, cfg, rng)?;
    Ok(labels
        .into_iter()
        .enumerate()
        .map(|(index, soft_label)| UncertaintyRecord {
            index,
            entropy: entropy(&soft_label),
            predicted_class: argmax(&soft_label),
            soft_label,
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct PseudoLabeled {
    pub index: usize,
    pub label: Vec<f64>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct SelectionResult {
    /// Ordered by predicted class, then entropy, then index.
    pub selected: Vec<PseudoLabeled>,
    /// Ordered by index.
    pub rest: Vec<PseudoLabeled>,
}

fn by_entropy_then_index(a: &UncertaintyRecord, b: &UncertaintyRecord) -> Ordering {
    a.entropy
        .partial_cmp(&b.entropy)
        .unwrap_or(Ordering::Equal)
        .then(a.index.cmp(&b.index))
}

/// Keeps the `h` lowest-entropy records of every predicted class.
/// Selected examples carry their soft label, or its one-hot argmax when
/// `harden` is set; the remainder always carry the soft label.
pub fn source_like_select(records: &[UncertaintyRecord], h: usize, harden: bool) -> SelectionResult {
    let num_classes = records
        .iter()
        .map(|r| r.predicted_class + 1)
        .max()
        .unwrap_or(0);
    let mut groups: Vec<Vec<&UncertaintyRecord>> = vec![Vec::new(); num_classes];
    for r in records {
        groups[r.predicted_class].push(r);
    }
    let mut out = SelectionResult::default();
    for group in &mut groups {
        group.sort_by(|a, b| by_entropy_then_index(a, b));
        let take = h.min(group.len());
        for r in &group[..take] {
            let label = if harden {
                let mut one_hot = vec![0.0; r.soft_label.len()];
                one_hot[r.predicted_class] = 1.0;
                one_hot
            } else {
                r.soft_label.clone()
            };
            out.selected.push(PseudoLabeled { index: r.index, label });
        }
        for r in &group[take..] {
            out.rest.push(PseudoLabeled {
                index: r.index,
                label: r.soft_label.clone(),
            });
        }
    }
    out.rest.sort_by_key(|p| p.index);
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::seeded_rng;
    use rand::Rng;

    fn record(index: usize, class: usize, entropy: f64, k: usize) -> UncertaintyRecord {
        let mut soft_label = vec![0.0; k];
        soft_label[class] = 1.0;
        UncertaintyRecord {
            index,
            soft_label,
            entropy,
            predicted_class: class,
        }
    }

    #[test]
    fn entropy_reference_values() {
        assert_eq!(entropy(&[0.0, 1.0, 0.0]), 0.0);
        assert!((entropy(&[0.25; 4]) - 4f64.ln()).abs() < 1e-12);
        // -(0.7 ln 0.7 + 0.3 ln 0.3)
        assert!((entropy(&[0.7, 0.3]) - 0.610_864_302_054_893_8).abs() < 1e-12);
    }

    #[test]
    fn soft_label_without_stochasticity_equals_prediction() {
        let mut mc = ModelConfig::new(2, 3);
        mc.dropout_rate = 0.0;
        let model = Model::init(&mc, &mut seeded_rng(0)).unwrap();
        let cfg = UncertaintyConfig {
            n_r: 1,
            snpc: 1,
            augment_strength: 0.0,
            harden_selected: false,
        };
        let x = [0.4, -1.1];
        let p = estimate_soft_label(&model, &x, &cfg, &mut seeded_rng(1)).unwrap();
        let direct = model.predict_proba(&Tensor::from_rows(&[x]).unwrap(), None).unwrap();
        assert_eq!(p, direct.row(0).to_vec());
    }

    #[test]
    fn soft_label_matches_replay_oracle() {
        let model = Model::init(&ModelConfig::new(2, 3), &mut seeded_rng(3)).unwrap();
        let cfg = UncertaintyConfig {
            n_r: 5,
            snpc: 1,
            augment_strength: 0.2,
            harden_selected: false,
        };
        let x = [0.4, -1.1];
        let p = estimate_soft_label(&model, &x, &cfg, &mut seeded_rng(9)).unwrap();

        let mut rng = seeded_rng(9);
        let x1 = crate::data::augment(&x, 0.2, &mut rng);
        let x2 = crate::data::augment(&x, 0.2, &mut rng);
        let (t1, t2) = (Tensor::from_rows(&[x1]).unwrap(), Tensor::from_rows(&[x2]).unwrap());
        let mut sum = vec![0.0; 3];
        for _ in 0..5 {
            for t in [&t1, &t2] {
                let q = model.predict_proba(t, Some(&mut rng)).unwrap();
                sum.iter_mut().zip(q.row(0)).for_each(|(s, v)| *s += v);
            }
        }
        for (a, b) in p.iter().zip(&sum) {
            assert!((a - b / 10.0).abs() < 1e-12);
        }
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn selection_examples() {
        let recs = vec![
            record(0, 0, 0.5, 2),
            record(1, 1, 0.3, 2),
            record(2, 0, 0.1, 2),
            record(3, 0, 0.9, 2),
            record(4, 1, 0.2, 2),
        ];
        let sel = source_like_select(&recs, 1, false);
        let picked: Vec<usize> = sel.selected.iter().map(|p| p.index).collect();
        assert_eq!(picked, vec![2, 4]);
        let rest: Vec<usize> = sel.rest.iter().map(|p| p.index).collect();
        assert_eq!(rest, vec![0, 1, 3]);

        let all = source_like_select(&recs, 100, false);
        assert_eq!(all.selected.len(), 5);
        assert!(all.rest.is_empty());

        let none = source_like_select(&recs, 0, false);
        assert!(none.selected.is_empty());
        assert_eq!(none.rest.len(), 5);

        assert_eq!(source_like_select(&[], 3, false), SelectionResult::default());
    }

    #[test]
    fn ties_break_by_index_and_harden() {
        let mut recs = vec![record(5, 0, 0.2, 2), record(1, 0, 0.2, 2)];
        recs[0].soft_label = vec![0.6, 0.4];
        recs[1].soft_label = vec![0.6, 0.4];
        let sel = source_like_select(&recs, 1, true);
        assert_eq!(sel.selected[0].index, 1);
        assert_eq!(sel.selected[0].label, vec![1.0, 0.0]);
        assert_eq!(sel.rest[0].label, vec![0.6, 0.4]);
    }

    #[test]
    fn per_class_dominance_on_random_records() {
        let mut rng = seeded_rng(4);
        let recs: Vec<UncertaintyRecord> = (0..200)
            .map(|i| record(i, rng.random_range(0..5), rng.random_range(0.0..1.5), 5))
            .collect();
        let sel = source_like_select(&recs, 20, false);
        for k in 0..5 {
            let ent = |idx: usize| recs[idx].entropy;
            let s_max = sel.selected.iter().filter(|p| recs[p.index].predicted_class == k).map(|p| ent(p.index)).fold(f64::MIN, f64::max);
            let r_min = sel.rest.iter().filter(|p| recs[p.index].predicted_class == k).map(|p| ent(p.index)).fold(f64::MAX, f64::min);
            assert!(s_max <= r_min);
        }
        assert_eq!(sel.selected.len() + sel.rest.len(), 200);
    }
}
