//! Parameter corruption: resolve a (fraction, direction) pair to a set of
//! encoder layers, then reinitialize everything inside it — LayerNorm
//! weights to exactly 1.0, all biases to exactly 0.0, and remaining weight
//! matrices to Kaiming-uniform draws bounded by the layer's input size.
//! Everything outside the set stays bit-identical.

use rand::distributions::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::encoder::params::{hex_string, name_stream, parse_layer_index};
use crate::encoder::EncoderModel;
use crate::error::{Error, Result};

/// He-uniform gain for the default bound `sqrt(6 / fan_in)`.
pub const DEFAULT_KAIMING_GAIN: f64 = std::f64::consts::SQRT_2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ParamKind {
    LayerNormWeight,
    LayerNormBias,
    Weight,
    Bias,
}

/// Classify a parameter purely from its structured name.
pub fn classify_parameter(name: &str) -> Result<ParamKind> {
    let mut parts = name.rsplitn(2, '.');
    let suffix = parts.next().unwrap_or_default();
    let prefix = parts
        .next()
        .ok_or_else(|| Error::Corruption(format!("unstructured parameter name {name}")))?;
    let component = prefix.rsplit('.').next().unwrap_or_default();
    let is_ln = component == "ln" || component == "ln1" || component == "ln2";
    match (suffix, is_ln) {
        ("weight", true) => Ok(ParamKind::LayerNormWeight),
        ("bias", true) => Ok(ParamKind::LayerNormBias),
        ("weight", false) => Ok(ParamKind::Weight),
        ("bias", false) => Ok(ParamKind::Bias),
        _ => Err(Error::Corruption(format!(
            "parameter name {name} does not end in .weight or .bias"
        ))),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    Bottom,
    Top,
    Full,
    None,
}

impl std::str::FromStr for Direction {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "bottom" => Ok(Direction::Bottom),
            "top" => Ok(Direction::Top),
            "full" => Ok(Direction::Full),
            "none" => Ok(Direction::None),
            other => Err(Error::Config(format!(
                "unknown direction {other}; expected bottom, top, full, or none"
            ))),
        }
    }
}

impl std::fmt::Display for Direction {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Direction::Bottom => "bottom",
            Direction::Top => "top",
            Direction::Full => "full",
            Direction::None => "none",
        };
        write!(f, "{s}")
    }
}

/// Resolve `(num_layers, fraction, direction)` to a sorted, contiguous set
/// of 1-based layer indices.
pub fn layer_range(num_layers: usize, fraction: f64, direction: Direction) -> Result<Vec<usize>> {
    if !(0.0..=1.0).contains(&fraction) {
        return Err(Error::Corruption(format!(
            "corruption fraction {fraction} outside [0, 1]"
        )));
    }
    let exact = fraction * num_layers as f64;
    let k = exact.round();
    if (exact - k).abs() > 1e-9 {
        let lo = exact.floor() as usize;
        let hi = exact.ceil() as usize;
        return Err(Error::Corruption(format!(
            "fraction {fraction} of {num_layers} layers is not integral; \
             nearest valid fractions are {lo}/{num_layers} ({:.4}) and {hi}/{num_layers} ({:.4})",
            lo as f64 / num_layers as f64,
            hi as f64 / num_layers as f64
        )));
    }
    let k = k as usize;
    match direction {
        Direction::None => {
            if k != 0 {
                return Err(Error::Corruption(format!(
                    "direction none requires fraction 0, got {fraction}"
                )));
            }
            Ok(Vec::new())
        }
        Direction::Full => {
            if k != num_layers {
                return Err(Error::Corruption(format!(
                    "direction full requires fraction 1, got {fraction}"
                )));
            }
            Ok((1..=num_layers).collect())
        }
        Direction::Bottom => Ok((1..=k).collect()),
        Direction::Top => Ok((num_layers - k + 1..=num_layers).collect()),
    }
}

/// The corruption procedure as data: what to corrupt and with which seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorruptionSpec {
    pub direction: Direction,
    pub fraction: f64,
    pub resolved_layers: Vec<usize>,
    pub seed: u64,
    #[serde(default)]
    pub include_embeddings: bool,
}

impl CorruptionSpec {
    pub fn resolve(
        num_layers: usize,
        fraction: f64,
        direction: Direction,
        seed: u64,
        include_embeddings: bool,
    ) -> Result<Self> {
        let resolved_layers = layer_range(num_layers, fraction, direction)?;
        Ok(CorruptionSpec {
            direction,
            fraction,
            resolved_layers,
            seed,
            include_embeddings,
        })
    }

    /// Does this spec touch the named parameter?
    pub fn covers(&self, name: &str) -> bool {
        match parse_layer_index(name) {
            Some(layer) => self.resolved_layers.contains(&layer),
            None => self.include_embeddings,
        }
    }

    pub fn fingerprint(&self) -> String {
        let json = serde_json::to_vec(self).expect("spec serializes");
        hex_string(&Sha256::digest(&json))
    }

    /// Annotation in the style "25% (1-3)"; "0%" when nothing is touched.
    pub fn label(&self) -> String {
        if self.resolved_layers.is_empty() {
            return "0%".to_string();
        }
        format!(
            "{}% ({}-{})",
            fraction_percent(self.fraction),
            self.resolved_layers.first().expect("nonempty"),
            self.resolved_layers.last().expect("nonempty")
        )
    }
}

pub(crate) fn fraction_percent(fraction: f64) -> String {
    let pct = fraction * 100.0;
    if (pct - pct.round()).abs() < 1e-9 {
        format!("{}", pct.round() as i64)
    } else {
        format!("{pct:.1}")
    }
}

/// Kaiming-uniform bound with the ReLU gain: `sqrt(6 / fan_in)`.
pub fn kaiming_bound(fan_in: usize) -> f64 {
    kaiming_bound_with_gain(fan_in, DEFAULT_KAIMING_GAIN)
}

/// `gain * sqrt(3 / fan_in)`.
pub fn kaiming_bound_with_gain(fan_in: usize, gain: f64) -> f64 {
    gain * (3.0 / fan_in as f64).sqrt()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorruptionAction {
    SetOne,
    SetZero,
    KaimingUniform,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub kind: ParamKind,
    pub action: CorruptionAction,
    /// Uniform bound used for Kaiming draws.
    pub bound: Option<f64>,
    pub values: usize,
}

/// Record of one corruption application.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CorruptionManifest {
    pub spec: CorruptionSpec,
    pub spec_fingerprint: String,
    pub entries: Vec<ManifestEntry>,
}

impl CorruptionManifest {
    pub fn total_values(&self) -> usize {
        self.entries.iter().map(|e| e.values).sum()
    }
}

/// Apply the corruption spec, returning the corrupted model and a manifest
/// of every touched parameter. The input model is left untouched.
pub fn corrupt(model: &EncoderModel, spec: &CorruptionSpec) -> Result<(EncoderModel, CorruptionManifest)> {
    if let Some(&bad) = spec
        .resolved_layers
        .iter()
        .find(|&&l| l == 0 || l > model.config.num_layers)
    {
        return Err(Error::Corruption(format!(
            "resolved layer {bad} outside 1..={}",
            model.config.num_layers
        )));
    }
    let mut out = model.clone();
    let mut entries = Vec::new();
    for p in out.params.iter_mut() {
        if !spec.covers(&p.name) {
            continue;
        }
        let kind = classify_parameter(&p.name)?;
        let (action, bound) = match kind {
            ParamKind::LayerNormWeight => {
                p.data.iter_mut().for_each(|v| *v = 1.0);
                (CorruptionAction::SetOne, None)
            }
            ParamKind::LayerNormBias | ParamKind::Bias => {
                p.data.iter_mut().for_each(|v| *v = 0.0);
                (CorruptionAction::SetZero, None)
            }
            ParamKind::Weight => {
                let b = kaiming_bound(p.fan_in());
                let dist = Uniform::new(-b, b);
                let mut rng = ChaCha8Rng::seed_from_u64(name_stream(spec.seed, &p.name));
                p.data
                    .iter_mut()
                    .for_each(|v| *v = dist.sample(&mut rng) as f32);
                (CorruptionAction::KaimingUniform, Some(b))
            }
        };
        entries.push(ManifestEntry {
            name: p.name.clone(),
            kind,
            action,
            bound,
            values: p.numel(),
        });
    }
    let manifest = CorruptionManifest {
        spec: spec.clone(),
        spec_fingerprint: spec.fingerprint(),
        entries,
    };
    Ok((out, manifest))
}

/// Per-kind counts of corrupted parameters.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct KindCounts {
    pub layernorm_weights: usize,
    pub layernorm_biases: usize,
    pub weights: usize,
    pub biases: usize,
}

/// Outcome of checking a (before, after) checkpoint pair against a spec.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CorruptionReport {
    pub counts: KindCounts,
    pub untouched_params: usize,
    /// Empty iff the pair satisfies every corruption post-condition.
    pub violations: Vec<String>,
}

impl CorruptionReport {
    pub fn pass(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Minimum corrupted-value count before sample-moment checks apply.
const MOMENT_CHECK_MIN: usize = 10_000;

/// Assert every corruption post-condition: exact constants inside the
/// resolved set, bounded uniform weights (with moment checks on large
/// tensors), and bit-identical parameters everywhere else.
pub fn verify_corruption(
    before: &EncoderModel,
    after: &EncoderModel,
    spec: &CorruptionSpec,
) -> Result<CorruptionReport> {
    if before.config != after.config {
        return Err(Error::Corruption(
            "verify_corruption on models with different configurations".into(),
        ));
    }
    let mut counts = KindCounts::default();
    let mut untouched = 0usize;
    let mut violations = Vec::new();

    for (pb, pa) in before.params.iter().zip(after.params.iter()) {
        if pb.name != pa.name || pb.shape != pa.shape {
            return Err(Error::Corruption(format!(
                "parameter census mismatch at {} vs {}",
                pb.name, pa.name
            )));
        }
        if !spec.covers(&pa.name) {
            untouched += 1;
            if let Some(i) = (0..pa.data.len())
                .find(|&i| pa.data[i].to_bits() != pb.data[i].to_bits())
            {
                violations.push(format!(
                    "{}[{i}]: untouched parameter changed ({} -> {})",
                    pa.name, pb.data[i], pa.data[i]
                ));
            }
            continue;
        }
        match classify_parameter(&pa.name)? {
            ParamKind::LayerNormWeight => {
                counts.layernorm_weights += 1;
                if let Some(i) = pa.data.iter().position(|&v| v != 1.0) {
                    violations.push(format!(
                        "{}[{i}]: corrupted LayerNorm weight is {} (expected exactly 1.0)",
                        pa.name, pa.data[i]
                    ));
                }
            }
            ParamKind::LayerNormBias | ParamKind::Bias => {
                if classify_parameter(&pa.name)? == ParamKind::LayerNormBias {
                    counts.layernorm_biases += 1;
                } else {
                    counts.biases += 1;
                }
                if let Some(i) = pa.data.iter().position(|&v| v != 0.0) {
                    violations.push(format!(
                        "{}[{i}]: corrupted bias is {} (expected exactly 0.0)",
                        pa.name, pa.data[i]
                    ));
                }
            }
            ParamKind::Weight => {
                counts.weights += 1;
                let bound = kaiming_bound(pa.fan_in());
                if let Some(i) = pa.data.iter().position(|&v| f64::from(v).abs() > bound) {
                    violations.push(format!(
                        "{}[{i}]: corrupted weight {} outside +/-{bound:.6}",
                        pa.name, pa.data[i]
                    ));
                }
                let n = pa.data.len();
                if n >= MOMENT_CHECK_MIN {
                    let mean = pa.data.iter().map(|&v| f64::from(v)).sum::<f64>() / n as f64;
                    let var = pa
                        .data
                        .iter()
                        .map(|&v| {
                            let c = f64::from(v) - mean;
                            c * c
                        })
                        .sum::<f64>()
                        / n as f64;
                    let target_var = bound * bound / 3.0;
                    let mean_sigma = (target_var / n as f64).sqrt();
                    if mean.abs() > 3.0 * mean_sigma {
                        violations.push(format!(
                            "{}: sample mean {mean:.3e} beyond 3 sigma ({:.3e})",
                            pa.name,
                            3.0 * mean_sigma
                        ));
                    }
                    if (var - target_var).abs() > 0.1 * target_var {
                        violations.push(format!(
                            "{}: sample variance {var:.4e} not within 10% of {target_var:.4e}",
                            pa.name
                        ));
                    }
                }
            }
        }
    }
    Ok(CorruptionReport {
        counts,
        untouched_params: untouched,
        violations,
    })
}

#[cfg(test)]
mod tests;
