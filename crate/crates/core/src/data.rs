//! Synthetic domain-shift datasets, few-shot target splits and vector
//! augmentation.

use std::f64::consts::PI;
use std::fs::File;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seeded_rng;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Domain {
    Source,
    Target,
}

impl Domain {
    pub fn as_str(self) -> &'static str {
        match self {
            Domain::Source => "source",
            Domain::Target => "target",
        }
    }
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub features: Tensor,
    pub labels: Vec<usize>,
    pub num_classes: usize,
    pub domain: Domain,
    pub name: String,
}

impl Dataset {
    pub fn new(
        features: Tensor,
        labels: Vec<usize>,
        num_classes: usize,
        domain: Domain,
        name: impl Into<String>,
    ) -> Result<Dataset> {
        if features.rows() != labels.len() || features.shape().len() != 2 {
            return Err(Error::Dimension(format!(
                "{} feature rows but {} labels",
                features.rows(),
                labels.len()
            )));
        }
        if features.data().iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("dataset features must be finite".into()));
        }
        let mut seen = vec![false; num_classes];
        for &y in &labels {
            if y >= num_classes {
                return Err(Error::Config(format!("label {y} outside [0, {num_classes})")));
            }
            seen[y] = true;
        }
        if let Some(k) = seen.iter().position(|s| !s) {
            return Err(Error::Config(format!("class {k} has no examples")));
        }
        Ok(Dataset {
            features,
            labels,
            num_classes,
            domain,
            name: name.into(),
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    /// Rows with the given indices as a new dataset (the class-coverage
    /// check is skipped, subsets may miss classes).
    pub fn subset(&self, idx: &[usize]) -> Result<Dataset> {
        Ok(Dataset {
            features: self.features.gather_rows(idx)?,
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            num_classes: self.num_classes,
            domain: self.domain,
            name: self.name.clone(),
        })
    }

    /// Writes `f0,...,f{d-1},label,domain` with 17 significant digits.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = csv::Writer::from_writer(file);
        let csv_err = |e: csv::Error| Error::Format {
            what: "dataset csv",
            detail: e.to_string(),
        };
        let mut header: Vec<String> = (0..self.dim()).map(|j| format!("f{j}")).collect();
        header.push("label".into());
        header.push("domain".into());
        w.write_record(&header).map_err(csv_err)?;
        for i in 0..self.len() {
            let mut rec: Vec<String> = self.features.row(i).iter().map(|v| format!("{v:.16e}")).collect();
            rec.push(self.labels[i].to_string());
            rec.push(self.domain.as_str().to_string());
            w.write_record(&rec).map_err(csv_err)?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn read_csv(path: &Path, num_classes: usize) -> Result<Dataset> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut r = csv::Reader::from_reader(file);
        let bad = |detail: String| Error::Format {
            what: "dataset csv",
            detail,
        };
        let header = r.headers().map_err(|e| bad(e.to_string()))?.clone();
        let d = header.len().checked_sub(2).filter(|&d| d > 0).ok_or_else(|| bad("too few columns".into()))?;
        for j in 0..d {
            if header.get(j) != Some(format!("f{j}").as_str()) {
                return Err(bad(format!("column {j} should be f{j}")));
            }
        }
        if header.get(d) != Some("label") || header.get(d + 1) != Some("domain") {
            return Err(bad("last columns must be label,domain".into()));
        }
        let mut data = Vec::new();
        let mut labels = Vec::new();
        let mut domain = None;
        for (line, rec) in r.records().enumerate() {
            let rec = rec.map_err(|e| bad(e.to_string()))?;
            for j in 0..d {
                let v: f64 = rec[j]
                    .parse()
                    .map_err(|_| bad(format!("row {line}: bad float {:?}", &rec[j])))?;
                data.push(v);
            }
            labels.push(
                rec[d]
                    .parse()
                    .map_err(|_| bad(format!("row {line}: bad label {:?}", &rec[d])))?,
            );
            let dom = match &rec[d + 1] {
                "source" => Domain::Source,
                "target" => Domain::Target,
                other => return Err(bad(format!("row {line}: unknown domain {other:?}"))),
            };
            if *domain.get_or_insert(dom) != dom {
                return Err(bad("mixed domains in one file".into()));
            }
        }
        let n = labels.len();
        if n == 0 {
            return Err(bad("no rows".into()));
        }
        let name = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        Dataset::new(
            Tensor::constant(data, &[n, d])?,
            labels,
            num_classes,
            domain.expect("at least one row"),
            name,
        )
    }
}

fn rotate2(p: [f64; 2], about: [f64; 2], angle_rad: f64) -> [f64; 2] {
    if angle_rad == 0.0 {
        return p;
    }
    let (s, c) = angle_rad.sin_cos();
    let (x, y) = (p[0] - about[0], p[1] - about[1]);
    [about[0] + c * x - s * y, about[1] + s * x + c * y]
}

/// Two interleaved half circles (K = 2). The target domain reuses the
/// source points, rotated about the moons' common center (0.5, 0.25) and
/// then translated, so labels keep their meaning.
pub fn make_two_moons_shift(
    n_per_domain: usize,
    rotation_deg: f64,
    noise_sd: f64,
    translate: [f64; 2],
    seed: u64,
) -> Result<(Dataset, Dataset)> {
    if n_per_domain < 4 {
        return Err(Error::Config("two moons needs at least 4 points per domain".into()));
    }
    if !(noise_sd >= 0.0) {
        return Err(Error::Config(format!("noise_sd {noise_sd} must be non-negative")));
    }
    let mut rng = seeded_rng(seed);
    let noise = Normal::new(0.0, noise_sd).map_err(|e| Error::Config(e.to_string()))?;
    let n_outer = n_per_domain / 2;
    let n_inner = n_per_domain - n_outer;
    let mut src = Vec::with_capacity(n_per_domain * 2);
    let mut labels = Vec::with_capacity(n_per_domain);
    for i in 0..n_outer {
        let t = PI * i as f64 / (n_outer - 1).max(1) as f64;
        src.push([t.cos(), t.sin()]);
        labels.push(0);
    }
    for i in 0..n_inner {
        let t = PI * i as f64 / (n_inner - 1).max(1) as f64;
        src.push([1.0 - t.cos(), 0.5 - t.sin()]);
        labels.push(1);
    }
    for p in &mut src {
        p[0] += noise.sample(&mut rng);
        p[1] += noise.sample(&mut rng);
    }
    let angle = rotation_deg.to_radians();
    let tgt: Vec<f64> = src
        .iter()
        .flat_map(|&p| {
            let q = rotate2(p, [0.5, 0.25], angle);
            [q[0] + translate[0], q[1] + translate[1]]
        })
        .collect();
    let src: Vec<f64> = src.into_iter().flatten().collect();
    let n = n_per_domain;
    Ok((
        Dataset::new(Tensor::constant(src, &[n, 2])?, labels.clone(), 2, Domain::Source, "moons-source")?,
        Dataset::new(Tensor::constant(tgt, &[n, 2])?, labels, 2, Domain::Target, "moons-target")?,
    ))
}

/// Distance of the blob centers from the origin.
pub const BLOB_RADIUS: f64 = 2.0;

/// Degrees of target rotation per unit of `shift_scale`.
pub const BLOB_ROTATION_PER_SHIFT_DEG: f64 = 10.0;

/// `K` Gaussian blobs with centers evenly spaced on a circle of radius
/// [`BLOB_RADIUS`] in the first two coordinates. Each target class center is
/// moved by a random offset of length `shift_scale` and the whole target
/// domain is rotated by `shift_scale × BLOB_ROTATION_PER_SHIFT_DEG` degrees.
/// Source and target points are drawn independently.
pub fn make_blobs_shift(
    num_classes: usize,
    n_per_class: usize,
    dim: usize,
    shift_scale: f64,
    spread: f64,
    seed: u64,
) -> Result<(Dataset, Dataset)> {
    if num_classes < 2 || dim < 2 || n_per_class == 0 {
        return Err(Error::Config("blobs need K >= 2, d >= 2 and at least one point per class".into()));
    }
    if !(spread >= 0.0 && shift_scale >= 0.0) {
        return Err(Error::Config("blob spread and shift_scale must be non-negative".into()));
    }
    let mut rng = seeded_rng(seed);
    let centers: Vec<Vec<f64>> = (0..num_classes)
        .map(|k| {
            let a = 2.0 * PI * k as f64 / num_classes as f64;
            let mut c = vec![0.0; dim];
            c[0] = BLOB_RADIUS * a.cos();
            c[1] = BLOB_RADIUS * a.sin();
            c
        })
        .collect();
    let offsets: Vec<Vec<f64>> = (0..num_classes)
        .map(|_| {
            let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
            let n = crate::tensor::l2(&v).max(1e-12);
            v.into_iter().map(|x| x / n * shift_scale).collect()
        })
        .collect();
    let angle = (shift_scale * BLOB_ROTATION_PER_SHIFT_DEG).to_radians();

    let draw = |centers: &[Vec<f64>], rng: &mut crate::SeededRng| -> (Vec<f64>, Vec<usize>) {
        let mut data = Vec::with_capacity(num_classes * n_per_class * dim);
        let mut labels = Vec::with_capacity(num_classes * n_per_class);
        for (k, c) in centers.iter().enumerate() {
            for _ in 0..n_per_class {
                for &cj in c {
                    let z: f64 = StandardNormal.sample(rng);
                    data.push(cj + spread * z);
                }
                labels.push(k);
            }
        }
        (data, labels)
    };

    let (src, src_labels) = draw(&centers, &mut rng);
    let target_centers: Vec<Vec<f64>> = centers
        .iter()
        .zip(&offsets)
        .map(|(c, o)| c.iter().zip(o).map(|(a, b)| a + b).collect())
        .collect();
    let mut target_rng = seeded_rng(seed ^ 0x7a26_e7d1_9b3c_0f15);
    let (mut tgt, tgt_labels) = draw(&target_centers, &mut target_rng);
    if angle != 0.0 {
        for p in tgt.chunks_mut(dim) {
            let q = rotate2([p[0], p[1]], [0.0, 0.0], angle);
            p[0] = q[0];
            p[1] = q[1];
        }
    }
    let n = num_classes * n_per_class;
    Ok((
        Dataset::new(Tensor::constant(src, &[n, dim])?, src_labels, num_classes, Domain::Source, "blobs-source")?,
        Dataset::new(Tensor::constant(tgt, &[n, dim])?, tgt_labels, num_classes, Domain::Target, "blobs-target")?,
    ))
}

/// Labels of the unlabeled pool. Only evaluation code reads these.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EvalLabels(Vec<usize>);

impl EvalLabels {
    pub fn new(labels: Vec<usize>) -> Self {
        EvalLabels(labels)
    }

    pub fn as_slice(&self) -> &[usize] {
        &self.0
    }
}

#[derive(Debug, Clone)]
pub struct LabeledSet {
    pub features: Tensor,
    pub labels: Vec<usize>,
    /// Row indices into the original target dataset.
    pub indices: Vec<usize>,
}

impl LabeledSet {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

#[derive(Debug, Clone)]
pub struct UnlabeledPool {
    pub features: Tensor,
    pub indices: Vec<usize>,
}

impl UnlabeledPool {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

/// Few-shot target split: `shots` labeled examples per class, a small labeled
/// validation set, and the remaining examples as an unlabeled pool.
#[derive(Debug, Clone)]
pub struct TargetSplit {
    pub num_classes: usize,
    /// `None` for the unsupervised setting.
    pub labeled: Option<LabeledSet>,
    pub unlabeled: UnlabeledPool,
    pub unlabeled_labels: EvalLabels,
    pub validation: LabeledSet,
}

/// Per class, draws `shots` labeled and `val_per_class` validation examples
/// uniformly without replacement; everything else becomes unlabeled. Each
/// set keeps the original dataset order.
pub fn ssda_split(target: &Dataset, shots: usize, val_per_class: usize, seed: u64) -> Result<TargetSplit> {
    if shots == 0 {
        return Err(Error::Config("shots must be at least 1".into()));
    }
    let k = target.num_classes;
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); k];
    for (i, &y) in target.labels.iter().enumerate() {
        by_class[y].push(i);
    }
    let mut rng = seeded_rng(seed);
    let mut labeled = Vec::new();
    let mut validation = Vec::new();
    for (c, members) in by_class.iter_mut().enumerate() {
        if members.len() < shots + val_per_class + 1 {
            return Err(Error::Config(format!(
                "class {c} has {} examples, needs at least {}",
                members.len(),
                shots + val_per_class + 1
            )));
        }
        members.shuffle(&mut rng);
        labeled.extend_from_slice(&members[..shots]);
        validation.extend_from_slice(&members[shots..shots + val_per_class]);
    }
    labeled.sort_unstable();
    validation.sort_unstable();
    let mut taken = vec![false; target.len()];
    labeled.iter().chain(&validation).for_each(|&i| taken[i] = true);
    let unlabeled: Vec<usize> = (0..target.len()).filter(|&i| !taken[i]).collect();

    let labeled_set = |idx: Vec<usize>| -> Result<LabeledSet> {
        Ok(LabeledSet {
            features: target.features.gather_rows(&idx)?,
            labels: idx.iter().map(|&i| target.labels[i]).collect(),
            indices: idx,
        })
    };
    let validation = if validation.is_empty() {
        LabeledSet {
            features: Tensor::zeros(&[1, target.dim()])?,
            labels: Vec::new(),
            indices: Vec::new(),
        }
    } else {
        labeled_set(validation)?
    };
    Ok(TargetSplit {
        num_classes: k,
        labeled: Some(labeled_set(labeled)?),
        unlabeled: UnlabeledPool {
            features: target.features.gather_rows(&unlabeled)?,
            indices: unlabeled.clone(),
        },
        unlabeled_labels: EvalLabels::new(unlabeled.iter().map(|&i| target.labels[i]).collect()),
        validation,
    })
}

/// Gaussian jitter with standard deviation `strength` after a random
/// rotation of the first two coordinates by up to `±15·strength` degrees.
/// `strength == 0` returns the input and draws nothing.
pub fn augment<R: Rng + ?Sized>(x: &[f64], strength: f64, rng: &mut R) -> Vec<f64> {
    if strength <= 0.0 {
        return x.to_vec();
    }
    let mut out = x.to_vec();
    if out.len() >= 2 {
        let max = (15.0 * strength).to_radians();
        let angle = rng.random_range(-max..=max);
        let q = rotate2([out[0], out[1]], [0.0, 0.0], angle);
        out[0] = q[0];
        out[1] = q[1];
    }
    for v in &mut out {
        let z: f64 = StandardNormal.sample(rng);
        *v += strength * z;
    }
    out
}

/// [`augment`] applied to each row of a matrix, top to bottom.
pub fn augment_rows<R: Rng + ?Sized>(x: &Tensor, strength: f64, rng: &mut R) -> Result<Tensor> {
    if strength <= 0.0 {
        return Ok(x.detach());
    }
    let mut data = Vec::with_capacity(x.numel());
    for i in 0..x.rows() {
        data.extend(augment(x.row(i), strength, rng));
    }
    Tensor::constant(data, x.shape())
}
