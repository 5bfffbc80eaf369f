//! Manifests, embedding containers, answer files and the synthetic benchmark.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::linalg::{dot, norm};

pub const EMBEDDING_MAGIC: &[u8; 8] = b"HYEMB1\0\0";
const HEADER_LEN: usize = 16;

/// Ordered class names; position is the class index.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct LabelSpace {
    names: Vec<String>,
}

impl Default for LabelSpace {
    fn default() -> Self {
        Self {
            names: ["happy", "anger", "disgust", "sadness", "fear"]
                .map(String::from)
                .to_vec(),
        }
    }
}

impl LabelSpace {
    pub fn new(names: Vec<String>) -> Result<Self> {
        let space = Self { names };
        space.validate()?;
        Ok(space)
    }

    pub fn validate(&self) -> Result<()> {
        if self.names.is_empty() {
            return Err(Error::Config("label space is empty".into()));
        }
        let unique: BTreeSet<&String> = self.names.iter().collect();
        if unique.len() != self.names.len() {
            return Err(Error::Config(format!(
                "label space has duplicates: {:?}",
                self.names
            )));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn name(&self, index: usize) -> &str {
        &self.names[index]
    }
}

/// One manifest line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestRow {
    pub id: String,
    /// Relative to the manifest's directory.
    pub path: PathBuf,
    pub frames: u32,
    pub dim: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<String>,
    pub domain: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    pub path: PathBuf,
    pub rows: Vec<ManifestRow>,
}

impl Manifest {
    /// Parses and validates a JSON-lines manifest; every embedding header is
    /// checked against its row.
    pub fn load(path: &Path, labels: &LabelSpace) -> Result<Self> {
        let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut rows = Vec::new();
        let mut ids = BTreeSet::new();
        for (n, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let lineno = n + 1;
            let row: ManifestRow = serde_json::from_str(&line)
                .map_err(|e| Error::Data(format!("{} line {lineno}: {e}", path.display())))?;
            if let Some(label) = &row.label {
                if labels.index_of(label).is_none() {
                    return Err(Error::Data(format!(
                        "{} line {lineno} (id `{}`): label `{label}` is not in the label space {:?}",
                        path.display(),
                        row.id,
                        labels.names()
                    )));
                }
            }
            if !ids.insert(row.id.clone()) {
                return Err(Error::Data(format!(
                    "{} line {lineno}: duplicate id `{}`",
                    path.display(),
                    row.id
                )));
            }
            rows.push(row);
        }
        if rows.is_empty() {
            return Err(Error::Data(format!(
                "{}: manifest has no rows",
                path.display()
            )));
        }
        let manifest = Self {
            path: path.to_path_buf(),
            rows,
        };
        for row in &manifest.rows {
            let file = manifest.resolve(row);
            let (t, d) = read_embedding_header(&file)?;
            if (t, d) != (row.frames, row.dim) {
                return Err(Error::Data(format!(
                    "{}: row `{}` declares {}x{} but {} holds {t}x{d}",
                    path.display(),
                    row.id,
                    row.frames,
                    row.dim,
                    file.display()
                )));
            }
        }
        Ok(manifest)
    }

    pub fn resolve(&self, row: &ManifestRow) -> PathBuf {
        self.path.parent().unwrap_or(Path::new(".")).join(&row.path)
    }

    pub fn write(path: &Path, rows: &[ManifestRow]) -> Result<()> {
        let mut out = String::new();
        for row in rows {
            out.push_str(&serde_json::to_string(row).expect("manifest rows serialize"));
            out.push('\n');
        }
        fs::write(path, out).map_err(|e| Error::io(path, e))
    }
}

/// An utterance held in memory.
#[derive(Debug, Clone, PartialEq)]
pub struct Utterance {
    pub id: String,
    /// `T x D` frames.
    pub frames: Tensor,
    pub label: Option<usize>,
}

/// Reads one row's embedding, checking it against the row.
pub fn load_utterance(
    manifest: &Manifest,
    row: &ManifestRow,
    labels: &LabelSpace,
) -> Result<Utterance> {
    let path = manifest.resolve(row);
    let frames = read_embedding(&path)?;
    if frames.shape != [row.frames as usize, row.dim as usize] {
        return Err(Error::Format {
            path,
            offset: 8,
            msg: format!(
                "header {:?} disagrees with manifest {}x{}",
                frames.shape, row.frames, row.dim
            ),
        });
    }
    Ok(Utterance {
        id: row.id.clone(),
        frames,
        label: row.label.as_deref().and_then(|l| labels.index_of(l)),
    })
}

/// Loads every utterance of a manifest in file order.
pub fn load_dataset(path: &Path, labels: &LabelSpace) -> Result<Vec<Utterance>> {
    let manifest = Manifest::load(path, labels)?;
    manifest
        .rows
        .iter()
        .map(|row| load_utterance(&manifest, row, labels))
        .collect()
}

pub fn encode_embedding(frames: &Tensor) -> Result<Vec<u8>> {
    if frames.shape.len() != 2 {
        return Err(Error::InvalidInput(format!(
            "embedding must be T x D, got shape {:?}",
            frames.shape
        )));
    }
    let (t, d) = (frames.rows(), frames.cols());
    let (t32, d32) = match (u32::try_from(t), u32::try_from(d)) {
        (Ok(t), Ok(d)) => (t, d),
        _ => return Err(Error::InvalidInput(format!("embedding {t}x{d} too large"))),
    };
    let mut out = Vec::with_capacity(HEADER_LEN + 4 * frames.len());
    out.extend_from_slice(EMBEDDING_MAGIC);
    out.extend_from_slice(&t32.to_le_bytes());
    out.extend_from_slice(&d32.to_le_bytes());
    for v in &frames.data {
        out.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    Ok(out)
}

fn parse_header(bytes: &[u8], path: &Path) -> Result<(u32, u32)> {
    let fail = |offset: usize, msg: String| Error::Format {
        path: path.to_path_buf(),
        offset: offset as u64,
        msg,
    };
    if bytes.len() < 8 {
        return Err(fail(bytes.len(), "file shorter than the magic".into()));
    }
    if &bytes[..8] != EMBEDDING_MAGIC {
        return Err(fail(0, "bad magic, not an embedding file".into()));
    }
    if bytes.len() < HEADER_LEN {
        return Err(fail(bytes.len(), "truncated header".into()));
    }
    let t = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    let d = u32::from_le_bytes(bytes[12..16].try_into().expect("4 bytes"));
    if t == 0 || d == 0 {
        return Err(fail(8, format!("empty embedding {t}x{d}")));
    }
    Ok((t, d))
}

pub fn decode_embedding(bytes: &[u8], path: &Path) -> Result<Tensor> {
    let (t, d) = parse_header(bytes, path)?;
    let expected = HEADER_LEN as u64 + 4 * t as u64 * d as u64;
    if bytes.len() as u64 != expected {
        return Err(Error::Format {
            path: path.to_path_buf(),
            offset: (bytes.len() as u64).min(expected),
            msg: format!(
                "payload is {} bytes, header {t}x{d} needs {}",
                bytes.len() - HEADER_LEN,
                expected - HEADER_LEN as u64
            ),
        });
    }
    let data = bytes[HEADER_LEN..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
        .collect();
    Tensor::new(vec![t as usize, d as usize], data)
}

pub fn read_embedding(path: &Path) -> Result<Tensor> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_embedding(&bytes, path)
}

pub fn read_embedding_header(path: &Path) -> Result<(u32, u32)> {
    use std::io::Read;
    let mut head = Vec::with_capacity(HEADER_LEN);
    fs::File::open(path)
        .and_then(|f| f.take(HEADER_LEN as u64).read_to_end(&mut head))
        .map_err(|e| Error::io(path, e))?;
    parse_header(&head, path)
}

pub fn write_embedding(path: &Path, frames: &Tensor) -> Result<()> {
    let bytes = encode_embedding(frames)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnswerRow {
    pub id: String,
    pub label: String,
}

/// Reads a JSON-lines answers file into `id -> class index`.
pub fn read_answers(path: &Path, labels: &LabelSpace) -> Result<BTreeMap<String, usize>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = BTreeMap::new();
    for (n, line) in text
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
    {
        let row: AnswerRow = serde_json::from_str(line)
            .map_err(|e| Error::Data(format!("{} line {}: {e}", path.display(), n + 1)))?;
        let idx = labels.index_of(&row.label).ok_or_else(|| {
            Error::Data(format!(
                "{} line {} (id `{}`): label `{}` is not in the label space",
                path.display(),
                n + 1,
                row.id,
                row.label
            ))
        })?;
        if out.insert(row.id.clone(), idx).is_some() {
            return Err(Error::Data(format!(
                "{}: duplicate id `{}`",
                path.display(),
                row.id
            )));
        }
    }
    Ok(out)
}

pub fn write_answers(path: &Path, rows: &[AnswerRow]) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    for row in rows {
        writeln!(
            f,
            "{}",
            serde_json::to_string(row).expect("answers serialize")
        )
        .map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

/// Labels for `utterances` in order. The answer ids must match the
/// utterance ids exactly.
pub fn align_answers(
    utterances: &[Utterance],
    answers: &BTreeMap<String, usize>,
) -> Result<Vec<usize>> {
    let ids: BTreeSet<&str> = utterances.iter().map(|u| u.id.as_str()).collect();
    let missing: Vec<&str> = ids
        .iter()
        .copied()
        .filter(|id| !answers.contains_key(*id))
        .collect();
    let unknown: Vec<&str> = answers
        .keys()
        .map(String::as_str)
        .filter(|id| !ids.contains(id))
        .collect();
    if !missing.is_empty() || !unknown.is_empty() {
        return Err(Error::Data(format!(
            "answers do not match the manifest: missing ids {missing:?}, unknown ids {unknown:?}"
        )));
    }
    Ok(utterances.iter().map(|u| answers[&u.id]).collect())
}

/// Target-domain distortion applied by the synthetic generator.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainShift {
    /// Angle (radians) of the rotation applied in every one of `D/2`
    /// orthogonal planes.
    pub rotation_angle: f64,
    /// Target vectors are scaled by `1 + radial_scale`.
    pub radial_scale: f64,
    /// Extra isotropic per-frame noise on the target.
    pub noise_std: f64,
}

impl DomainShift {
    pub const NONE: DomainShift = DomainShift {
        rotation_angle: 0.0,
        radial_scale: 0.0,
        noise_std: 0.0,
    };

    /// The shift used by the desk-scale benchmark.
    pub const MODERATE: DomainShift = DomainShift {
        rotation_angle: 0.7,
        radial_scale: 0.6,
        noise_std: 0.1,
    };
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticConfig {
    pub seed: u64,
    pub n_source: usize,
    pub n_target: usize,
    pub num_classes: usize,
    pub dim: usize,
    pub frames_min: usize,
    pub frames_max: usize,
    /// Per-frame isotropic noise around the utterance mean.
    pub noise_std: f64,
    /// Distance of the two superclass centres from the origin.
    pub superclass_radius: f64,
    /// Distance of each class mean from its superclass centre.
    pub class_radius: f64,
    /// Per-utterance intensities are uniform in `[1 - spread, 1 + spread]`
    /// and scale the class mean.
    pub intensity_spread: f64,
    pub shift: DomainShift,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            n_source: 500,
            n_target: 500,
            num_classes: 5,
            dim: 32,
            frames_min: 5,
            frames_max: 20,
            noise_std: 0.5,
            superclass_radius: 3.0,
            class_radius: 2.0,
            intensity_spread: 0.3,
            shift: DomainShift::MODERATE,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("superclass_radius", self.superclass_radius),
            ("class_radius", self.class_radius),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!(
                    "synthetic {name} must be positive, got {v}"
                )));
            }
        }
        let shift = [
            ("rotation_angle", self.shift.rotation_angle),
            ("radial_scale", self.shift.radial_scale),
            ("shift noise_std", self.shift.noise_std),
            ("noise_std", self.noise_std),
            ("intensity_spread", self.intensity_spread),
        ];
        for (name, v) in shift {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!(
                    "synthetic {name} must be non-negative, got {v}"
                )));
            }
        }
        if self.intensity_spread >= 1.0 {
            return Err(Error::Config("intensity_spread must be below 1".into()));
        }
        if self.num_classes < 2 || self.dim < 2 || self.n_source == 0 || self.n_target == 0 {
            return Err(Error::Config(
                "synthetic data needs at least 2 classes, 2 dimensions and one utterance per domain".into(),
            ));
        }
        if self.frames_min == 0 || self.frames_min > self.frames_max {
            return Err(Error::Config(format!(
                "invalid frame range [{}, {}]",
                self.frames_min, self.frames_max
            )));
        }
        Ok(())
    }
}

/// Paths written by [`generate_synthetic`].
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticPaths {
    pub source_manifest: PathBuf,
    pub target_manifest: PathBuf,
    pub target_answers: PathBuf,
}

/// Class means and the target rotation drawn from a seed.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticLaw {
    pub class_means: Vec<Vec<f64>>,
    /// Row-major `D x D` orthogonal matrix.
    pub rotation: Vec<f64>,
}

fn gaussian_vec(dim: usize, rng: &mut impl Rng) -> Vec<f64> {
    (0..dim).map(|_| StandardNormal.sample(rng)).collect()
}

fn unit_vec(dim: usize, rng: &mut impl Rng) -> Vec<f64> {
    let v = gaussian_vec(dim, rng);
    let n = norm(&v);
    v.into_iter().map(|x| x / n).collect()
}

/// Random orthonormal basis by Gram-Schmidt on Gaussian vectors.
fn orthonormal_basis(dim: usize, rng: &mut impl Rng) -> Vec<Vec<f64>> {
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(dim);
    while basis.len() < dim {
        let mut v = gaussian_vec(dim, rng);
        for b in &basis {
            let p = dot(&v, b);
            v.iter_mut().zip(b).for_each(|(x, bi)| *x -= p * bi);
        }
        let n = norm(&v);
        if n > 1e-6 {
            basis.push(v.into_iter().map(|x| x / n).collect());
        }
    }
    basis
}

/// `Q diag(R(theta), ..., R(theta)) Q^T` for a random orthonormal `Q`; an odd
/// last axis is left fixed.
fn plane_rotation(dim: usize, theta: f64, rng: &mut impl Rng) -> Vec<f64> {
    let q = orthonormal_basis(dim, rng);
    let (s, c) = theta.sin_cos();
    // Image of each basis vector under the block rotation, in original coords.
    let mut images = q.clone();
    for p in 0..dim / 2 {
        let (a, b) = (&q[2 * p], &q[2 * p + 1]);
        images[2 * p] = a.iter().zip(b).map(|(x, y)| c * x + s * y).collect();
        images[2 * p + 1] = a.iter().zip(b).map(|(x, y)| -s * x + c * y).collect();
    }
    // R = sum_k image_k q_k^T
    let mut r = vec![0.0; dim * dim];
    for (img, qk) in images.iter().zip(&q) {
        for i in 0..dim {
            for j in 0..dim {
                r[i * dim + j] += img[i] * qk[j];
            }
        }
    }
    r
}

impl SyntheticLaw {
    /// Two superclasses split the classes `[0, ceil(C/2))` and the rest.
    /// Means are redrawn until every pair is at least `4 * noise_std` apart.
    pub fn draw(cfg: &SyntheticConfig, rng: &mut impl Rng) -> Result<Self> {
        const MAX_ATTEMPTS: usize = 10_000;
        let (c, d) = (cfg.num_classes, cfg.dim);
        let split = c.div_ceil(2);
        let mut attempts = 0;
        let class_means = loop {
            attempts += 1;
            if attempts > MAX_ATTEMPTS {
                return Err(Error::Config(format!(
                    "could not separate class means by 4 * noise_std = {} in {MAX_ATTEMPTS} draws; \
                     lower noise_std or raise class_radius",
                    4.0 * cfg.noise_std
                )));
            }
            let supers = [unit_vec(d, rng), unit_vec(d, rng)];
            let means: Vec<Vec<f64>> = (0..c)
                .map(|k| {
                    let centre = &supers[usize::from(k >= split)];
                    let offset = unit_vec(d, rng);
                    centre
                        .iter()
                        .zip(&offset)
                        .map(|(s, o)| cfg.superclass_radius * s + cfg.class_radius * o)
                        .collect()
                })
                .collect();
            let min_gap = (0..c)
                .flat_map(|i| (i + 1..c).map(move |j| (i, j)))
                .map(|(i, j)| {
                    let diff: Vec<f64> =
                        means[i].iter().zip(&means[j]).map(|(a, b)| a - b).collect();
                    norm(&diff)
                })
                .fold(f64::INFINITY, f64::min);
            if min_gap >= 4.0 * cfg.noise_std {
                break means;
            }
        };
        let rotation = plane_rotation(d, cfg.shift.rotation_angle, rng);
        Ok(Self {
            class_means,
            rotation,
        })
    }

    /// Applies rotation and radial scaling to one vector.
    pub fn shift_vector(&self, x: &[f64], shift: &DomainShift) -> Vec<f64> {
        let d = x.len();
        let k = 1.0 + shift.radial_scale;
        (0..d)
            .map(|i| k * dot(&self.rotation[i * d..(i + 1) * d], x))
            .collect()
    }
}

fn sample_utterance(
    cfg: &SyntheticConfig,
    law: &SyntheticLaw,
    label: usize,
    target: bool,
    rng: &mut impl Rng,
) -> Tensor {
    let t = rng.random_range(cfg.frames_min..=cfg.frames_max);
    let intensity = 1.0 + rng.random_range(-cfg.intensity_spread..=cfg.intensity_spread);
    let noise = Normal::new(0.0, cfg.noise_std).expect("positive std");
    let mean: Vec<f64> = law.class_means[label]
        .iter()
        .map(|m| intensity * m)
        .collect();
    let mut data = Vec::with_capacity(t * cfg.dim);
    for _ in 0..t {
        let frame: Vec<f64> = mean.iter().map(|m| m + noise.sample(rng)).collect();
        if target {
            let mut shifted = law.shift_vector(&frame, &cfg.shift);
            if cfg.shift.noise_std > 0.0 {
                let extra = Normal::new(0.0, cfg.shift.noise_std).expect("positive std");
                shifted.iter_mut().for_each(|v| *v += extra.sample(rng));
            }
            data.extend(shifted);
        } else {
            data.extend(frame);
        }
    }
    Tensor {
        shape: vec![t, cfg.dim],
        data,
    }
}

/// Writes a seeded source/target benchmark under `out_dir`:
/// `source.jsonl`, `target.jsonl` (unlabelled), `target_answers.jsonl` and
/// the embedding files under `source/` and `target/`.
pub fn generate_synthetic(
    cfg: &SyntheticConfig,
    labels: &LabelSpace,
    out_dir: &Path,
) -> Result<SyntheticPaths> {
    cfg.validate()?;
    if labels.len() != cfg.num_classes {
        return Err(Error::Config(format!(
            "label space has {} classes, synthetic config asks for {}",
            labels.len(),
            cfg.num_classes
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let law = SyntheticLaw::draw(cfg, &mut rng)?;
    let paths = SyntheticPaths {
        source_manifest: out_dir.join("source.jsonl"),
        target_manifest: out_dir.join("target.jsonl"),
        target_answers: out_dir.join("target_answers.jsonl"),
    };
    let mut answers = Vec::new();
    for (domain, n, target) in [
        ("source", cfg.n_source, false),
        ("target", cfg.n_target, true),
    ] {
        let dir = out_dir.join(domain);
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        // Balanced labels in shuffled order.
        let mut ys: Vec<usize> = (0..n).map(|i| i % cfg.num_classes).collect();
        ys.shuffle(&mut rng);
        let mut rows = Vec::with_capacity(n);
        for (i, &y) in ys.iter().enumerate() {
            let id = format!("{domain}-{i:05}");
            let frames = sample_utterance(cfg, &law, y, target, &mut rng);
            let rel = PathBuf::from(domain).join(format!("{id}.emb"));
            write_embedding(&out_dir.join(&rel), &frames)?;
            let label = labels.name(y).to_string();
            if target {
                answers.push(AnswerRow {
                    id: id.clone(),
                    label: label.clone(),
                });
            }
            rows.push(ManifestRow {
                id,
                path: rel,
                frames: frames.rows() as u32,
                dim: cfg.dim as u32,
                label: (!target).then_some(label),
                domain: domain.to_string(),
            });
        }
        let manifest = if target {
            &paths.target_manifest
        } else {
            &paths.source_manifest
        };
        Manifest::write(manifest, &rows)?;
    }
    write_answers(&paths.target_answers, &answers)?;
    Ok(paths)
}
