//! The networks of the example transfer model and the transferability weights
//! they produce.
//!
//! - `theta_f`: feature extractor `G_f`, relu MLP ending in a linear layer.
//! - `theta_y`: source classifier `G_y`, softmax head over all source classes.
//! - `theta_d`: adversarial domain discriminator `G_d`, sigmoid head (1 = source).
//! - `theta_y_tilde`: the weight quantifier. Normally the auxiliary label
//!   predictor `G̃_y` with a leaky-softmax head; the auxiliary domain score
//!   `G̃_d` is the row sum of its outputs and owns no parameters. For the
//!   "without auxiliary" ablation it is instead a plain sigmoid discriminator.
//!   Unweighted baselines carry no quantifier and leave this set empty.
//!
//! The quantifier always reads detached features, so nothing it is trained on
//! reaches `theta_f`.

use std::io::{Read, Write};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::netcore::{leaky_softmax_remainder, DenseParams, Matrix, ParamSet, Tape, Var};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Architecture {
    pub input_dim: usize,
    pub feature_dim: usize,
    pub feature_hidden: Vec<usize>,
    pub classifier_hidden: Vec<usize>,
    pub discriminator_hidden: Vec<usize>,
    pub aux_hidden: Vec<usize>,
    pub num_classes: usize,
}

impl Default for Architecture {
    fn default() -> Self {
        Self {
            input_dim: 2,
            feature_dim: 32,
            feature_hidden: vec![64, 64],
            classifier_hidden: vec![32],
            discriminator_hidden: vec![32, 32],
            aux_hidden: vec![32],
            num_classes: 10,
        }
    }
}

impl Architecture {
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.input_dim == 0 {
            problems.push("input_dim must be >= 1".to_owned());
        }
        if self.feature_dim == 0 {
            problems.push("feature_dim must be >= 1".to_owned());
        }
        if self.num_classes == 0 {
            problems.push("num_classes must be >= 1".to_owned());
        }
        for (name, widths) in [
            ("feature_hidden", &self.feature_hidden),
            ("classifier_hidden", &self.classifier_hidden),
            ("discriminator_hidden", &self.discriminator_hidden),
            ("aux_hidden", &self.aux_hidden),
        ] {
            if widths.contains(&0) {
                problems.push(format!("{name} widths must all be >= 1"));
            }
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Validation(problems))
        }
    }
}

/// What the weight quantifier network computes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Quantifier {
    /// Leaky-softmax label predictor; domain score is the sum of its outputs.
    LeakyAuxiliary,
    /// Sigmoid domain discriminator with no label information.
    SigmoidDiscriminator,
}

/// A relu MLP stored as consecutive entries `dense_0 .. dense_{n-1}` of a set.
fn build_mlp<R: Rng + ?Sized>(
    name: &str,
    input: usize,
    hidden: &[usize],
    output: usize,
    rng: &mut R,
) -> ParamSet {
    let mut set = ParamSet::new(name);
    let mut fan_in = input;
    for (i, &w) in hidden.iter().chain(std::iter::once(&output)).enumerate() {
        set.push(format!("dense_{i}"), DenseParams::glorot(fan_in, w, rng))
            .expect("generated names are unique");
        fan_in = w;
    }
    set
}

/// Affine layers with relu between them; the last layer is left linear.
fn mlp_forward(tape: &mut Tape, set: &ParamSet, x: Var) -> Result<Var> {
    let mut h = x;
    for i in 0..set.len() {
        let (w, b) = tape.dense(set, i);
        h = tape.affine(h, w, b)?;
        if i + 1 < set.len() {
            h = tape.relu(h)?;
        }
    }
    Ok(h)
}

/// Outputs of the weight quantifier on one batch.
#[derive(Debug, Clone, Copy)]
pub struct AuxOutputs {
    /// Pre-activation output of the quantifier: `(n, |Cs|)` or `(n, 1)`.
    pub logits: Var,
    /// Leaky-softmax class scores, absent for the sigmoid quantifier.
    pub scores: Option<Var>,
    /// `(n, 1)` probability of belonging to the source domain.
    pub source_prob: Var,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EtnParams {
    pub architecture: Architecture,
    pub quantifier: Option<Quantifier>,
    pub theta_f: ParamSet,
    pub theta_y: ParamSet,
    pub theta_d: ParamSet,
    pub theta_y_tilde: ParamSet,
}

impl EtnParams {
    /// Glorot-initialized parameters for every network.
    pub fn init<R: Rng + ?Sized>(
        architecture: &Architecture,
        quantifier: Option<Quantifier>,
        rng: &mut R,
    ) -> Result<Self> {
        architecture.validate()?;
        let a = architecture;
        let theta_f = build_mlp("theta_f", a.input_dim, &a.feature_hidden, a.feature_dim, rng);
        let theta_y = build_mlp(
            "theta_y",
            a.feature_dim,
            &a.classifier_hidden,
            a.num_classes,
            rng,
        );
        let theta_d = build_mlp("theta_d", a.feature_dim, &a.discriminator_hidden, 1, rng);
        let theta_y_tilde = match quantifier {
            None => ParamSet::new("theta_y_tilde"),
            Some(Quantifier::LeakyAuxiliary) => build_mlp(
                "theta_y_tilde",
                a.feature_dim,
                &a.aux_hidden,
                a.num_classes,
                rng,
            ),
            Some(Quantifier::SigmoidDiscriminator) => build_mlp(
                "theta_y_tilde",
                a.feature_dim,
                &a.discriminator_hidden,
                1,
                rng,
            ),
        };
        Ok(Self {
            architecture: a.clone(),
            quantifier,
            theta_f,
            theta_y,
            theta_d,
            theta_y_tilde,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.architecture.num_classes
    }

    pub fn sets(&self) -> [&ParamSet; 4] {
        [&self.theta_f, &self.theta_y, &self.theta_d, &self.theta_y_tilde]
    }

    pub fn sets_mut(&mut self) -> [&mut ParamSet; 4] {
        [
            &mut self.theta_f,
            &mut self.theta_y,
            &mut self.theta_d,
            &mut self.theta_y_tilde,
        ]
    }

    pub fn max_abs(&self) -> f64 {
        self.sets().iter().map(|s| s.max_abs()).fold(0.0, f64::max)
    }

    /// `G_f(x)`.
    pub fn features(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let cols = tape.value(x).cols();
        if cols != self.architecture.input_dim {
            return Err(Error::shape(format!(
                "input has {cols} columns, model expects {}",
                self.architecture.input_dim
            )));
        }
        mlp_forward(tape, &self.theta_f, x)
    }

    fn check_features(&self, tape: &Tape, f: Var) -> Result<()> {
        let cols = tape.value(f).cols();
        if cols != self.architecture.feature_dim {
            return Err(Error::shape(format!(
                "features have {cols} columns, expected {}",
                self.architecture.feature_dim
            )));
        }
        Ok(())
    }

    /// Class logits of `G_y`.
    pub fn classifier_logits(&self, tape: &mut Tape, f: Var) -> Result<Var> {
        self.check_features(tape, f)?;
        mlp_forward(tape, &self.theta_y, f)
    }

    /// Softmax class probabilities `G_y(f)`.
    pub fn classify(&self, tape: &mut Tape, f: Var) -> Result<Var> {
        let z = self.classifier_logits(tape, f)?;
        tape.softmax(z)
    }

    /// `G_d(GRL_mu(f))`, an `(n, 1)` column of source-domain probabilities.
    pub fn discriminate(&self, tape: &mut Tape, f: Var, mu: f64) -> Result<Var> {
        self.check_features(tape, f)?;
        let r = tape.grad_reverse(f, mu)?;
        let z = mlp_forward(tape, &self.theta_d, r)?;
        tape.sigmoid(z)
    }

    /// Leaky-softmax scores `G̃_y(f)`. Features are detached first.
    pub fn aux_predict(&self, tape: &mut Tape, f: Var) -> Result<Var> {
        if self.quantifier != Some(Quantifier::LeakyAuxiliary) {
            return Err(Error::NotApplicable(
                "this model has no auxiliary label predictor".into(),
            ));
        }
        self.check_features(tape, f)?;
        let fd = tape.detach(f);
        let z = mlp_forward(tape, &self.theta_y_tilde, fd)?;
        tape.leaky_softmax(z, self.architecture.num_classes)
    }

    /// `G̃_d(f) = Σ_c G̃_y^c(f)`.
    pub fn aux_discriminate(&self, tape: &mut Tape, f: Var) -> Result<Var> {
        let scores = self.aux_predict(tape, f)?;
        Ok(tape.row_sum(scores))
    }

    /// Runs whichever quantifier this model carries on detached features.
    pub fn aux_branch(&self, tape: &mut Tape, f: Var) -> Result<AuxOutputs> {
        let Some(kind) = self.quantifier else {
            return Err(Error::NotApplicable(
                "this model has no transferability quantifier".into(),
            ));
        };
        self.check_features(tape, f)?;
        let fd = tape.detach(f);
        let logits = mlp_forward(tape, &self.theta_y_tilde, fd)?;
        match kind {
            Quantifier::LeakyAuxiliary => {
                let scores = tape.leaky_softmax(logits, self.architecture.num_classes)?;
                let source_prob = tape.row_sum(scores);
                Ok(AuxOutputs {
                    logits,
                    scores: Some(scores),
                    source_prob,
                })
            }
            Quantifier::SigmoidDiscriminator => Ok(AuxOutputs {
                logits,
                scores: None,
                source_prob: tape.sigmoid(logits)?,
            }),
        }
    }

    /// Raw weights `1 - G̃_d` for the rows of an [`AuxOutputs`].
    ///
    /// Computed from the logits as the mass the leaky softmax leaves over (or
    /// `sigmoid(-z)`), which equals `1 - G̃_d` but stays positive when `G̃_d`
    /// rounds to 1.
    pub fn raw_weights(&self, tape: &Tape, aux: &AuxOutputs) -> Result<TransferWeights> {
        let z = tape.value(aux.logits);
        let values = match self.quantifier {
            Some(Quantifier::LeakyAuxiliary) => {
                leaky_softmax_remainder(z, self.architecture.num_classes)?
            }
            Some(Quantifier::SigmoidDiscriminator) => {
                crate::netcore::sigmoid(&z.map(|v| -v))?.into_values()
            }
            None => {
                return Err(Error::NotApplicable(
                    "this model has no transferability quantifier".into(),
                ))
            }
        };
        Ok(TransferWeights::raw(values))
    }

    /// Class probabilities for `x` without keeping a tape around.
    pub fn predict_proba(&self, x: &Matrix) -> Result<Matrix> {
        let mut tape = Tape::new();
        let xi = tape.input(x.clone());
        let f = self.features(&mut tape, xi)?;
        let p = self.classify(&mut tape, f)?;
        Ok(tape.value(p).clone())
    }

    pub fn predict(&self, x: &Matrix) -> Result<Vec<usize>> {
        Ok(self.predict_proba(x)?.argmax_rows())
    }

    /// Raw transferability `1 - G̃_d(G_f(x))` of each row of `x_source`.
    pub fn transferability(&self, x_source: &Matrix) -> Result<TransferWeights> {
        let mut tape = Tape::new();
        let xi = tape.input(x_source.clone());
        let f = self.features(&mut tape, xi)?;
        let aux = self.aux_branch(&mut tape, f)?;
        self.raw_weights(&tape, &aux)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        self.write_checkpoint(&mut buf)
            .map_err(|e| Error::io(path, e))?;
        std::fs::write(path, buf).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::read_checkpoint(&mut bytes.as_slice())
    }
}

/// Per-source-example weights.
///
/// Raw weights are `1 - G̃_d`, in `(0, 1)`. Normalized weights have unit mean
/// over the batch they were normalized in.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransferWeights {
    values: Vec<f64>,
    normalized: bool,
}

impl TransferWeights {
    pub fn raw(values: Vec<f64>) -> Self {
        Self {
            values,
            normalized: false,
        }
    }

    /// Complements an `(n, 1)` column of source-domain probabilities.
    pub fn from_source_prob(p: &Matrix) -> Self {
        Self::raw(p.values().iter().map(|v| 1.0 - v).collect())
    }

    /// All-ones weights, as used when a loss is left unweighted.
    pub fn uniform(n: usize) -> Self {
        Self {
            values: vec![1.0; n],
            normalized: true,
        }
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    pub fn mean(&self) -> f64 {
        self.values.iter().sum::<f64>() / self.values.len() as f64
    }

    /// Divides every weight by the batch mean.
    pub fn normalize(&self) -> Result<TransferWeights> {
        if self.values.is_empty() {
            return Err(Error::Usage("cannot normalize an empty batch".into()));
        }
        if let Some(w) = self.values.iter().find(|w| !(**w > 0.0) || !w.is_finite()) {
            return Err(Error::Numeric(format!(
                "weights must be finite and positive before normalization, got {w}"
            )));
        }
        let mean = self.mean();
        if mean < 1e-12 {
            return Err(Error::DegenerateBatch(mean));
        }
        Ok(Self {
            values: self.values.iter().map(|w| w / mean).collect(),
            normalized: true,
        })
    }
}

const CHECKPOINT_MAGIC: &[u8; 8] = b"ETNCKPT\0";
const CHECKPOINT_VERSION: u32 = 1;

// Layout (little endian): magic, u32 version, u64-length-prefixed JSON header
// holding the architecture and quantifier, then for each of the four sets:
// name, u32 entry count, and per entry its name, weight (u64 rows, u64 cols,
// f64 bits), bias (u64 len, f64 bits). Buffers are not stored.
impl EtnParams {
    fn write_checkpoint<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        #[derive(Serialize)]
        struct Header<'a> {
            architecture: &'a Architecture,
            quantifier: Option<Quantifier>,
        }
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        let header = serde_json::to_vec(&Header {
            architecture: &self.architecture,
            quantifier: self.quantifier,
        })?;
        write_bytes(w, &header)?;
        for set in self.sets() {
            write_bytes(w, set.name().as_bytes())?;
            w.write_all(&(set.len() as u32).to_le_bytes())?;
            for (name, p) in set.iter() {
                write_bytes(w, name.as_bytes())?;
                w.write_all(&(p.weight.rows() as u64).to_le_bytes())?;
                w.write_all(&(p.weight.cols() as u64).to_le_bytes())?;
                for v in p.weight.values() {
                    w.write_all(&v.to_bits().to_le_bytes())?;
                }
                w.write_all(&(p.bias.len() as u64).to_le_bytes())?;
                for v in p.bias.values() {
                    w.write_all(&v.to_bits().to_le_bytes())?;
                }
            }
        }
        Ok(())
    }

    fn read_checkpoint<R: Read>(r: &mut R) -> Result<Self> {
        #[derive(Deserialize)]
        struct Header {
            architecture: Architecture,
            quantifier: Option<Quantifier>,
        }
        let bad = |e: std::io::Error| Error::Format(format!("truncated checkpoint: {e}"));
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(bad)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(Error::Format("not a checkpoint file".into()));
        }
        let version = read_u32(r).map_err(bad)?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Format(format!(
                "unsupported checkpoint version {version}"
            )));
        }
        let header: Header = serde_json::from_slice(&read_bytes(r).map_err(bad)?)
            .map_err(|e| Error::Format(format!("checkpoint header: {e}")))?;

        let mut sets = Vec::with_capacity(4);
        for expected in ["theta_f", "theta_y", "theta_d", "theta_y_tilde"] {
            let name = read_string(r).map_err(bad)?;
            if name != expected {
                return Err(Error::Format(format!(
                    "expected set `{expected}`, found `{name}`"
                )));
            }
            let mut set = ParamSet::new(name);
            for _ in 0..read_u32(r).map_err(bad)? {
                let entry = read_string(r).map_err(bad)?;
                let rows = read_u64(r).map_err(bad)? as usize;
                let cols = read_u64(r).map_err(bad)? as usize;
                let weight = read_f64s(r, rows * cols).map_err(bad)?;
                let n_bias = read_u64(r).map_err(bad)? as usize;
                if n_bias != cols {
                    return Err(Error::Format(format!(
                        "bias of `{entry}` has {n_bias} values for {cols} outputs"
                    )));
                }
                let bias = read_f64s(r, n_bias).map_err(bad)?;
                let mut p = DenseParams::zeros(rows, cols);
                p.weight = Matrix::from_vec(rows, cols, weight)?;
                p.bias = Matrix::row_vector(bias);
                set.push(entry, p)?;
            }
            sets.push(set);
        }
        let theta_y_tilde = sets.pop().expect("four sets");
        let theta_d = sets.pop().expect("four sets");
        let theta_y = sets.pop().expect("four sets");
        let theta_f = sets.pop().expect("four sets");
        Ok(Self {
            architecture: header.architecture,
            quantifier: header.quantifier,
            theta_f,
            theta_y,
            theta_d,
            theta_y_tilde,
        })
    }
}

fn write_bytes<W: Write>(w: &mut W, bytes: &[u8]) -> std::io::Result<()> {
    w.write_all(&(bytes.len() as u64).to_le_bytes())?;
    w.write_all(bytes)
}

fn read_u32<R: Read>(r: &mut R) -> std::io::Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64<R: Read>(r: &mut R) -> std::io::Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn read_bytes<R: Read>(r: &mut R) -> std::io::Result<Vec<u8>> {
    let n = read_u64(r)? as usize;
    let mut buf = vec![0u8; n];
    r.read_exact(&mut buf)?;
    Ok(buf)
}

fn read_string<R: Read>(r: &mut R) -> std::io::Result<String> {
    String::from_utf8(read_bytes(r)?)
        .map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e))
}

fn read_f64s<R: Read>(r: &mut R, n: usize) -> std::io::Result<Vec<f64>> {
    (0..n).map(|_| read_u64(r).map(f64::from_bits)).collect()
}
