//! Partial domain adaptation tasks: synthetic generation, CSV ingestion and
//! mini-batch sampling.
//!
//! Synthetic tasks place one isotropic Gaussian per source class on a circle
//! (first two input dimensions). Target examples are drawn only for the shared
//! classes, from the same class-conditional distributions, then pushed through
//! a similarity transform `x ↦ scale · R(angle) · x + translation`.

use std::collections::BTreeSet;
use std::f64::consts::PI;
use std::io::{Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::netcore::Matrix;
use crate::rng::{stream, Stream};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainShift {
    /// Rotation in the plane of the first two dimensions, radians.
    pub rotation: f64,
    pub translation: Vec<f64>,
    pub scale: f64,
}

impl DomainShift {
    pub fn identity(dim: usize) -> Self {
        Self {
            rotation: 0.0,
            translation: vec![0.0; dim],
            scale: 1.0,
        }
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        let mut y: Vec<f64> = x.to_vec();
        if y.len() >= 2 {
            let (s, c) = self.rotation.sin_cos();
            y[0] = c * x[0] - s * x[1];
            y[1] = s * x[0] + c * x[1];
        }
        for (v, t) in y.iter_mut().zip(&self.translation) {
            *v = self.scale * *v + t;
        }
        y
    }

    pub fn invert(&self, y: &[f64]) -> Vec<f64> {
        let mut x: Vec<f64> = y
            .iter()
            .zip(&self.translation)
            .map(|(v, t)| (v - t) / self.scale)
            .collect();
        if x.len() >= 2 {
            let (s, c) = self.rotation.sin_cos();
            let (a, b) = (x[0], x[1]);
            x[0] = c * a + s * b;
            x[1] = -s * a + c * b;
        }
        x
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TaskSpec {
    pub num_source_classes: usize,
    pub target_classes: Vec<usize>,
    pub source_per_class: usize,
    pub target_per_class: usize,
    pub class_mean_radius: f64,
    pub class_std: f64,
    pub domain_shift: DomainShift,
    #[serde(default = "default_input_dim")]
    pub input_dim: usize,
    #[serde(default)]
    pub seed: u64,
}

fn default_input_dim() -> usize {
    2
}

impl Default for TaskSpec {
    /// Ten source classes, the first four shared with the target.
    fn default() -> Self {
        Self {
            num_source_classes: 10,
            target_classes: (0..4).collect(),
            source_per_class: 100,
            target_per_class: 50,
            class_mean_radius: 4.0,
            class_std: 0.8,
            domain_shift: DomainShift {
                rotation: 30f64.to_radians(),
                translation: vec![1.0, 0.5],
                scale: 1.1,
            },
            input_dim: 2,
            seed: 0,
        }
    }
}

impl TaskSpec {
    /// The same spec with `Ct = {0, .., k-1}`.
    pub fn with_first_target_classes(&self, k: usize) -> Self {
        Self {
            target_classes: (0..k).collect(),
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.num_source_classes == 0 {
            problems.push("num_source_classes must be >= 1".to_owned());
        }
        if self.target_classes.is_empty() {
            problems.push("target_classes must be nonempty".to_owned());
        }
        let unique: BTreeSet<_> = self.target_classes.iter().collect();
        if unique.len() != self.target_classes.len() {
            problems.push("target_classes contains duplicates".to_owned());
        }
        let outside: Vec<String> = self
            .target_classes
            .iter()
            .filter(|&&c| c >= self.num_source_classes)
            .map(|c| c.to_string())
            .collect();
        if !outside.is_empty() {
            problems.push(format!(
                "target classes [{}] are not source classes (0..{})",
                outside.join(", "),
                self.num_source_classes
            ));
        }
        if self.source_per_class == 0 {
            problems.push("source_per_class must be >= 1".to_owned());
        }
        if self.target_per_class == 0 {
            problems.push("target_per_class must be >= 1".to_owned());
        }
        if !(self.class_std > 0.0 && self.class_std.is_finite()) {
            problems.push("class_std must be finite and > 0".to_owned());
        }
        if !self.class_mean_radius.is_finite() {
            problems.push("class_mean_radius must be finite".to_owned());
        }
        if self.input_dim < 2 {
            problems.push("input_dim must be >= 2".to_owned());
        }
        if self.domain_shift.translation.len() != self.input_dim {
            problems.push(format!(
                "translation has {} components for input_dim {}",
                self.domain_shift.translation.len(),
                self.input_dim
            ));
        }
        if !(self.domain_shift.scale != 0.0 && self.domain_shift.scale.is_finite()) {
            problems.push("domain_shift.scale must be finite and nonzero".to_owned());
        }
        if !self.domain_shift.rotation.is_finite() {
            problems.push("domain_shift.rotation must be finite".to_owned());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Validation(problems))
        }
    }

    pub fn class_mean(&self, class: usize) -> Vec<f64> {
        let angle = 2.0 * PI * class as f64 / self.num_source_classes as f64;
        let mut m = vec![0.0; self.input_dim];
        m[0] = self.class_mean_radius * angle.cos();
        m[1] = self.class_mean_radius * angle.sin();
        m
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Domain {
    Source,
    Target,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainData {
    pub features: Matrix,
    /// Class labels. For the target domain these are hidden from training and
    /// read only by evaluation.
    pub labels: Vec<usize>,
}

impl DomainData {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn label_set(&self) -> BTreeSet<usize> {
        self.labels.iter().copied().collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PdaTask {
    pub source: DomainData,
    pub target: DomainData,
    pub num_classes: usize,
    /// Generating spec, absent for loaded files.
    pub spec: Option<TaskSpec>,
    /// Target samples before the domain shift was applied (generated tasks only).
    #[serde(skip)]
    pub target_unshifted: Option<Matrix>,
}

impl PdaTask {
    pub fn input_dim(&self) -> usize {
        self.source.features.cols()
    }

    /// Classes present in the target domain (from the hidden labels).
    pub fn shared_classes(&self) -> BTreeSet<usize> {
        self.target.label_set()
    }

    /// Source examples whose label is shared with the target, as a mask.
    pub fn shared_mask(&self) -> Vec<bool> {
        let shared = self.shared_classes();
        self.source.labels.iter().map(|y| shared.contains(y)).collect()
    }
}

/// Draws a task. Deterministic in `spec.seed`.
pub fn generate(spec: &TaskSpec) -> Result<PdaTask> {
    spec.validate()?;
    let mut rng = stream(spec.seed, Stream::Data);
    let d = spec.input_dim;

    let sample = |class: usize, rng: &mut ChaCha8Rng| -> Vec<f64> {
        spec.class_mean(class)
            .into_iter()
            .map(|m| {
                let z: f64 = rng.sample(StandardNormal);
                m + spec.class_std * z
            })
            .collect()
    };

    let mut src = Vec::with_capacity(spec.num_source_classes * spec.source_per_class * d);
    let mut src_labels = Vec::new();
    for c in 0..spec.num_source_classes {
        for _ in 0..spec.source_per_class {
            src.extend(sample(c, &mut rng));
            src_labels.push(c);
        }
    }

    let mut raw = Vec::new();
    let mut shifted = Vec::new();
    let mut tgt_labels = Vec::new();
    for &c in &spec.target_classes {
        for _ in 0..spec.target_per_class {
            let x = sample(c, &mut rng);
            shifted.extend(spec.domain_shift.apply(&x));
            raw.extend(x);
            tgt_labels.push(c);
        }
    }

    let n_t = tgt_labels.len();
    Ok(PdaTask {
        source: DomainData {
            features: Matrix::from_vec(src_labels.len(), d, src)?,
            labels: src_labels,
        },
        target: DomainData {
            features: Matrix::from_vec(n_t, d, shifted)?,
            labels: tgt_labels,
        },
        num_classes: spec.num_source_classes,
        spec: Some(spec.clone()),
        target_unshifted: Some(Matrix::from_vec(n_t, d, raw)?),
    })
}

/// Reads `feature_0..feature_{d-1},label,domain` rows.
///
/// Line numbers in errors are 1-based and count the header as line 1.
pub fn read_csv<R: Read>(reader: R) -> Result<PdaTask> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    let headers = rdr
        .headers()
        .map_err(|e| Error::Parse {
            line: 1,
            message: e.to_string(),
        })?
        .clone();
    let n = headers.len();
    if n < 3 {
        return Err(Error::Parse {
            line: 1,
            message: "expected feature columns followed by label,domain".into(),
        });
    }
    let dim = n - 2;
    for (i, h) in headers.iter().take(dim).enumerate() {
        if h != format!("feature_{i}") {
            return Err(Error::Parse {
                line: 1,
                message: format!("column {i} should be `feature_{i}`, found `{h}`"),
            });
        }
    }
    if &headers[dim] != "label" || &headers[dim + 1] != "domain" {
        return Err(Error::Parse {
            line: 1,
            message: "last two columns must be `label,domain`".into(),
        });
    }

    let mut src = (Vec::new(), Vec::new());
    let mut tgt = (Vec::new(), Vec::new());
    for (i, rec) in rdr.records().enumerate() {
        let line = i + 2;
        let rec = rec.map_err(|e| Error::Parse {
            line,
            message: e.to_string(),
        })?;
        if rec.len() != n {
            return Err(Error::Parse {
                line,
                message: format!("expected {n} fields, found {}", rec.len()),
            });
        }
        let mut feats = Vec::with_capacity(dim);
        for (j, cell) in rec.iter().take(dim).enumerate() {
            let v: f64 = cell.trim().parse().map_err(|_| Error::Parse {
                line,
                message: format!("feature_{j} is not a number: `{cell}`"),
            })?;
            if !v.is_finite() {
                return Err(Error::Parse {
                    line,
                    message: format!("feature_{j} is not finite"),
                });
            }
            feats.push(v);
        }
        let label: usize = rec[dim].trim().parse().map_err(|_| Error::Parse {
            line,
            message: format!("label is not a nonnegative integer: `{}`", &rec[dim]),
        })?;
        let bucket = match rec[dim + 1].trim() {
            "source" => &mut src,
            "target" => &mut tgt,
            other => {
                return Err(Error::Parse {
                    line,
                    message: format!("domain must be `source` or `target`, found `{other}`"),
                })
            }
        };
        bucket.0.extend(feats);
        bucket.1.push(label);
    }

    let source_set: BTreeSet<usize> = src.1.iter().copied().collect();
    let unseen: Vec<String> = tgt
        .1
        .iter()
        .copied()
        .collect::<BTreeSet<_>>()
        .difference(&source_set)
        .map(|c| c.to_string())
        .collect();
    if !unseen.is_empty() {
        return Err(Error::Validation(vec![format!(
            "target labels [{}] do not occur in the source domain",
            unseen.join(", ")
        )]));
    }
    let num_classes = source_set.iter().next_back().map_or(0, |m| m + 1);
    let (ns, nt) = (src.1.len(), tgt.1.len());
    Ok(PdaTask {
        source: DomainData {
            features: Matrix::from_vec(ns, dim, src.0)?,
            labels: src.1,
        },
        target: DomainData {
            features: Matrix::from_vec(nt, dim, tgt.0)?,
            labels: tgt.1,
        },
        num_classes,
        spec: None,
        target_unshifted: None,
    })
}

pub fn load_csv(path: &Path) -> Result<PdaTask> {
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_csv(std::io::BufReader::new(f))
}

/// Writes source rows then target rows in the schema read by [`read_csv`].
pub fn write_csv<W: Write>(task: &PdaTask, writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let dim = task.input_dim();
    let mut header: Vec<String> = (0..dim).map(|i| format!("feature_{i}")).collect();
    header.push("label".into());
    header.push("domain".into());
    let csv_err = |e: csv::Error| Error::Format(e.to_string());
    w.write_record(&header).map_err(csv_err)?;
    for (data, name) in [(&task.source, "source"), (&task.target, "target")] {
        for i in 0..data.len() {
            let mut row: Vec<String> = data.features.row(i).iter().map(|v| v.to_string()).collect();
            row.push(data.labels[i].to_string());
            row.push(name.to_owned());
            w.write_record(&row).map_err(csv_err)?;
        }
    }
    w.flush().map_err(|e| Error::Format(e.to_string()))
}

pub fn export_csv(task: &PdaTask, path: &Path) -> Result<()> {
    let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write_csv(task, std::io::BufWriter::new(f))
}

/// Index stream over one domain: shuffled passes, consumed cyclically.
#[derive(Debug, Clone)]
struct Cycler {
    order: Vec<usize>,
    pos: usize,
}

impl Cycler {
    fn new(n: usize, rng: &mut ChaCha8Rng) -> Self {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(rng);
        Self { order, pos: 0 }
    }

    fn take(&mut self, b: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
        let mut out = Vec::with_capacity(b);
        while out.len() < b {
            if self.pos == self.order.len() {
                self.order.shuffle(rng);
                self.pos = 0;
            }
            let k = (b - out.len()).min(self.order.len() - self.pos);
            out.extend_from_slice(&self.order[self.pos..self.pos + k]);
            self.pos += k;
        }
        out
    }
}

/// Row indices of one training step.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BatchIndices {
    pub source: Vec<usize>,
    pub target: Vec<usize>,
}

/// Endless stream of `(source, target)` index batches of size `B` each.
#[derive(Debug, Clone)]
pub struct MiniBatches {
    batch_size: usize,
    source: Cycler,
    target: Cycler,
    rng: ChaCha8Rng,
}

impl MiniBatches {
    pub fn new(n_source: usize, n_target: usize, batch_size: usize, seed: u64) -> Result<Self> {
        if batch_size == 0 {
            return Err(Error::Usage("batch size must be >= 1".into()));
        }
        if n_source == 0 || n_target == 0 {
            return Err(Error::Usage(format!(
                "cannot draw batches from an empty domain (n_s = {n_source}, n_t = {n_target})"
            )));
        }
        let mut rng = stream(seed, Stream::Batching);
        let source = Cycler::new(n_source, &mut rng);
        let target = Cycler::new(n_target, &mut rng);
        Ok(Self {
            batch_size,
            source,
            target,
            rng,
        })
    }

    pub fn for_task(task: &PdaTask, batch_size: usize, seed: u64) -> Result<Self> {
        Self::new(task.source.len(), task.target.len(), batch_size, seed)
    }
}

impl Iterator for MiniBatches {
    type Item = BatchIndices;

    fn next(&mut self) -> Option<BatchIndices> {
        let source = self.source.take(self.batch_size, &mut self.rng);
        let target = self.target.take(self.batch_size, &mut self.rng);
        Some(BatchIndices { source, target })
    }
}

/// Convenience wrapper matching the task-level API.
pub fn minibatches(task: &PdaTask, batch_size: usize, seed: u64) -> Result<MiniBatches> {
    MiniBatches::for_task(task, batch_size, seed)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_spec() -> TaskSpec {
        TaskSpec {
            num_source_classes: 3,
            target_classes: vec![0, 1],
            source_per_class: 100,
            target_per_class: 100,
            ..TaskSpec::default()
        }
    }

    #[test]
    fn counts_follow_spec() {
        let t = generate(&small_spec()).unwrap();
        assert_eq!(t.source.len(), 300);
        assert_eq!(t.target.len(), 200);
        assert_eq!(t.source.label_set(), (0..3).collect());
        assert_eq!(t.target.label_set(), [0, 1].into_iter().collect());
    }

    #[test]
    fn vanishing_noise_puts_targets_on_means() {
        let spec = TaskSpec {
            class_std: 1e-300,
            domain_shift: DomainShift::identity(2),
            ..small_spec()
        };
        let t = generate(&spec).unwrap();
        for i in 0..t.target.len() {
            let m = spec.class_mean(t.target.labels[i]);
            for (a, b) in t.target.features.row(i).iter().zip(&m) {
                assert!((a - b).abs() < 1e-290);
            }
        }
    }

    #[test]
    fn generation_is_deterministic() {
        assert_eq!(generate(&small_spec()).unwrap(), generate(&small_spec()).unwrap());
        let other = TaskSpec {
            seed: 1,
            ..small_spec()
        };
        assert_ne!(generate(&small_spec()).unwrap(), generate(&other).unwrap());
    }

    #[test]
    fn invalid_spec_lists_every_problem() {
        let spec = TaskSpec {
            target_classes: vec![1, 7],
            class_std: 0.0,
            ..small_spec()
        };
        match generate(&spec) {
            Err(Error::Validation(v)) => {
                assert_eq!(v.len(), 2, "{v:?}");
                assert!(v[0].contains('7'));
            }
            other => panic!("{other:?}"),
        }
        let empty = TaskSpec {
            target_classes: vec![],
            ..small_spec()
        };
        assert!(generate(&empty).is_err());
    }

    #[test]
    fn inverse_shift_recovers_unshifted_samples() {
        let t = generate(&small_spec()).unwrap();
        let shift = &small_spec().domain_shift;
        let raw = t.target_unshifted.as_ref().unwrap();
        for i in 0..t.target.len() {
            let back = shift.invert(t.target.features.row(i));
            for (a, b) in back.iter().zip(raw.row(i)) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn csv_two_rows() {
        let text = "feature_0,feature_1,label,domain\n1.0,2.0,0,source\n3.0,4.0,0,target\n";
        let t = read_csv(text.as_bytes()).unwrap();
        assert_eq!((t.source.len(), t.target.len()), (1, 1));
        assert_eq!(t.target.features.row(0), &[3.0, 4.0]);
    }

    #[test]
    fn csv_bad_cell_names_line() {
        let text = "feature_0,label,domain\n1.0,0,source\nabc,0,target\n";
        match read_csv(text.as_bytes()) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn csv_unseen_target_label() {
        let text = "feature_0,label,domain\n1.0,0,source\n2.0,5,target\n";
        assert!(matches!(read_csv(text.as_bytes()), Err(Error::Validation(_))));
    }

    #[test]
    fn csv_re_export_matches_input() {
        let t = generate(&small_spec()).unwrap();
        let mut buf = Vec::new();
        write_csv(&t, &mut buf).unwrap();
        let back = read_csv(buf.as_slice()).unwrap();
        assert_eq!(back.source, t.source);
        assert_eq!(back.target, t.target);
        let mut again = Vec::new();
        write_csv(&back, &mut again).unwrap();
        assert_eq!(buf, again);
    }

    #[test]
    fn full_batch_is_a_permutation() {
        let mut mb = MiniBatches::new(7, 7, 7, 3).unwrap();
        for _ in 0..3 {
            let b = mb.next().unwrap();
            let mut s = b.source.clone();
            s.sort_unstable();
            assert_eq!(s, (0..7).collect::<Vec<_>>());
            let mut t = b.target.clone();
            t.sort_unstable();
            assert_eq!(t, (0..7).collect::<Vec<_>>());
        }
    }

    #[test]
    fn batch_streams_reproducible() {
        let a: Vec<_> = MiniBatches::new(50, 20, 8, 11).unwrap().take(20).collect();
        let b: Vec<_> = MiniBatches::new(50, 20, 8, 11).unwrap().take(20).collect();
        assert_eq!(a, b);
    }

    #[test]
    fn empty_domain_or_zero_batch_rejected() {
        assert!(MiniBatches::new(0, 5, 2, 0).is_err());
        assert!(MiniBatches::new(5, 5, 0, 0).is_err());
    }

    #[test]
    fn batch_class_histogram_matches_proportions() {
        // unbalanced source: class c has 10·(c+1) examples
        let labels: Vec<usize> = (0..4).flat_map(|c| std::iter::repeat_n(c, 10 * (c + 1))).collect();
        let n = labels.len();
        let mut counts = [0usize; 4];
        let draws = 10_000;
        let b = 10;
        let mut mb = MiniBatches::new(n, 3, b, 5).unwrap();
        for _ in 0..draws / b {
            for i in mb.next().unwrap().source {
                counts[labels[i]] += 1;
            }
        }
        for (c, &k) in counts.iter().enumerate() {
            let p = (10 * (c + 1)) as f64 / n as f64;
            let mean = draws as f64 * p;
            let sd = (draws as f64 * p * (1.0 - p)).sqrt();
            assert!((k as f64 - mean).abs() <= 3.0 * sd, "class {c}: {k} vs {mean}±{sd}");
        }
    }
}
