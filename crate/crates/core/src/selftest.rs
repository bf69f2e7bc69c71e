//! Fast invariant checks runnable from the command line without data.

use rand::Rng;

use crate::mixup::{hybrid_mixup, MixupConfig, SoftPool};
use crate::model::{Model, ModelConfig};
use crate::tensor::Tensor;
use crate::uncertainty::{source_like_select, UncertaintyRecord};
use crate::{seeded_rng, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

fn check(name: &'static str, passed: bool, detail: String) -> Check {
    Check { name, passed, detail }
}

fn gradient_check() -> Result<Check> {
    let mut rng = seeded_rng(11);
    let data: Vec<f64> = (0..12).map(|_| rng.random_range(-1.0..1.0)).collect();
    let w = Tensor::param(data.clone(), &[3, 4])?;
    let x = Tensor::constant((0..6).map(|i| i as f64 * 0.3 - 0.7).collect(), &[2, 3])?;
    let f = |w: &Tensor| -> Result<Tensor> { Ok(x.matmul(w)?.softmax()?.log().sum()) };
    f(&w)?.backward()?;
    let grad = w.grad().unwrap_or_default();
    let h = 1e-5;
    let mut worst = 0.0f64;
    for i in 0..data.len() {
        let mut up = data.clone();
        up[i] += h;
        let mut down = data.clone();
        down[i] -= h;
        let fd = (f(&Tensor::constant(up, &[3, 4])?)?.item() - f(&Tensor::constant(down, &[3, 4])?)?.item()) / (2.0 * h);
        let rel = (fd - grad[i]).abs() / fd.abs().max(grad[i].abs()).max(1e-8);
        worst = worst.max(rel);
    }
    Ok(check("gradient", worst < 1e-4, format!("max relative error {worst:.2e}")))
}

fn simplex_check() -> Result<Check> {
    let mut rng = seeded_rng(12);
    let model = Model::init(&ModelConfig::new(3, 5), &mut rng)?;
    let x = Tensor::constant((0..150).map(|_| rng.random_range(-3.0..3.0)).collect(), &[50, 3])?;
    let p = model.predict_proba(&x, None)?;
    let worst = (0..p.rows())
        .map(|i| (p.row(i).iter().sum::<f64>() - 1.0).abs())
        .fold(0.0, f64::max);
    let non_negative = p.data().iter().all(|&v| v >= 0.0);
    Ok(check("softmax_simplex", worst <= 1e-12 && non_negative, format!("max |sum - 1| {worst:.1e}")))
}

fn mixup_check() -> Result<Check> {
    let mut rng = seeded_rng(13);
    let mut trusted = SoftPool::default();
    let mut rest = SoftPool::default();
    for i in 0..10 {
        let y = vec![0.3, 0.7];
        let x = vec![i as f64, -(i as f64)];
        if i < 4 {
            trusted.push(x, vec![1.0, 0.0]);
        } else {
            rest.push(x, y);
        }
    }
    let batch = hybrid_mixup(&trusted, &rest, 64, &MixupConfig::default(), &mut rng)?;
    let sums_ok = (0..batch.len()).all(|i| (batch.targets.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-12);
    let lam_ok = batch.lambdas.iter().all(|&l| (0.5..=1.0).contains(&l));
    Ok(check("mixup_closure", sums_ok && lam_ok, format!("{} rows", batch.len())))
}

fn selection_check() -> Check {
    let mut rng = seeded_rng(14);
    let records: Vec<UncertaintyRecord> = (0..100)
        .map(|index| {
            let c = rng.random_range(0..4);
            let mut soft_label = vec![0.0; 4];
            soft_label[c] = 1.0;
            UncertaintyRecord {
                index,
                soft_label,
                entropy: rng.random_range(0.0..1.0),
                predicted_class: c,
            }
        })
        .collect();
    let sel = source_like_select(&records, 7, false);
    let mut seen: Vec<usize> = sel.selected.iter().chain(&sel.rest).map(|p| p.index).collect();
    seen.sort_unstable();
    let partition = seen == (0..100).collect::<Vec<_>>();
    check(
        "selection_partition",
        partition && sel.selected.len() <= 28,
        format!("{} selected", sel.selected.len()),
    )
}

pub fn run_all() -> Result<Vec<Check>> {
    Ok(vec![gradient_check()?, simplex_check()?, mixup_check()?, selection_check()])
}

#[cfg(test)]
mod tests {
    #[test]
    fn all_checks_pass() {
        for c in super::run_all().unwrap() {
            assert!(c.passed, "{}: {}", c.name, c.detail);
        }
    }
}
