//! Seeded paired-modality regression world.
//!
//! A latent `z ~ U[-1, 1]^d` drives three views: labels
//! `y = M2·tanh(M1·z)`, a near-complete "superior" view `x̃ = A_s·z + noise`,
//! and a lossy "weak" view `x = [A_w·z, distractors] + noise` where `A_w` is
//! rank-deficient and the distractors are pure noise. The target domain
//! replaces `A_w` with `A_w + δ·Δ` and never emits the superior view.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::diffcore::Tensor;
use crate::error::{Error, Result};

pub const DATA_FORMAT: &str = "kap-data-v1";

/// Width of the hidden layer of the label map.
const LABEL_HIDDEN: usize = 32;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WorldSpec {
    pub latent_dim: usize,
    pub joints: usize,
    pub world_seed: u64,
    /// Informative weak-view dimensions (before distractors).
    pub weak_dim: usize,
    pub sup_dim: usize,
    pub weak_noise: f64,
    pub sup_noise: f64,
    pub distractor_dim: usize,
    pub target_shift: f64,
    /// Output scale of the label map, in label units ("mm").
    pub label_scale: f64,
}

impl Default for WorldSpec {
    fn default() -> Self {
        Self {
            latent_dim: 8,
            joints: 5,
            world_seed: 0,
            weak_dim: 4,
            sup_dim: 8,
            weak_noise: 0.3,
            sup_noise: 0.01,
            distractor_dim: 8,
            target_shift: 0.5,
            label_scale: 20.0,
        }
    }
}

impl WorldSpec {
    /// Rank of the weak encoder.
    pub fn weak_rank(&self) -> usize {
        (self.latent_dim / 2).max(1)
    }

    /// Width of a weak-view sample, distractors included.
    pub fn weak_input_dim(&self) -> usize {
        self.weak_dim + self.distractor_dim
    }

    pub fn label_dim(&self) -> usize {
        3 * self.joints
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.latent_dim == 0 || self.joints == 0 || self.sup_dim == 0 || self.weak_dim == 0 {
            return bad("latent_dim, joints, weak_dim and sup_dim must be positive".into());
        }
        if self.weak_dim < self.weak_rank() {
            return bad(format!(
                "weak_dim {} cannot hold a rank-{} projection",
                self.weak_dim,
                self.weak_rank()
            ));
        }
        for (name, v) in [
            ("weak_noise", self.weak_noise),
            ("sup_noise", self.sup_noise),
            ("target_shift", self.target_shift),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return bad(format!("{name} must be finite and >= 0"));
            }
        }
        if !(self.label_scale > 0.0) || !self.label_scale.is_finite() {
            return bad("label_scale must be positive".into());
        }
        Ok(())
    }
}

/// Domain a weak-view sample is drawn from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Domain {
    Source,
    Target,
}

/// Frozen random maps of a [`WorldSpec`].
#[derive(Clone, Debug, PartialEq)]
pub struct World {
    pub spec: WorldSpec,
    /// `(LABEL_HIDDEN, d)`
    pub label_in: Tensor,
    /// `(3J, LABEL_HIDDEN)`
    pub label_out: Tensor,
    /// `(sup_dim, d)`
    pub sup_encoder: Tensor,
    /// `(weak_dim, d)`, rank `weak_rank()`
    pub weak_encoder: Tensor,
    /// `(weak_dim, d)`: `weak_encoder + δ·shift_direction`
    pub target_weak_encoder: Tensor,
    /// Unit Frobenius norm.
    pub shift_direction: Tensor,
}

fn gaussian(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Vec<f64> {
    (0..rows * cols)
        .map(|_| scale * rng.sample::<f64, _>(StandardNormal))
        .collect()
}

fn matvec(m: &Tensor, v: &[f64]) -> Vec<f64> {
    let cols = m.shape()[1];
    m.data()
        .chunks(cols)
        .map(|row| row.iter().zip(v).map(|(a, b)| a * b).sum())
        .collect()
}

impl World {
    /// Builds every map from `spec.world_seed`.
    pub fn build(spec: &WorldSpec) -> Result<Self> {
        spec.validate()?;
        let d = spec.latent_dim;
        let mut rng = ChaCha8Rng::seed_from_u64(spec.world_seed);
        // z has variance 1/3 per coordinate; these scales give O(1) pre-activations.
        let unit = (3.0 / d as f64).sqrt();
        let label_in = Tensor::new(vec![LABEL_HIDDEN, d], gaussian(&mut rng, LABEL_HIDDEN, d, 1.5 * unit))?;
        let out_scale = spec.label_scale / (LABEL_HIDDEN as f64).sqrt();
        let label_out = Tensor::new(
            vec![spec.label_dim(), LABEL_HIDDEN],
            gaussian(&mut rng, spec.label_dim(), LABEL_HIDDEN, out_scale),
        )?;
        let sup_encoder = Tensor::new(vec![spec.sup_dim, d], gaussian(&mut rng, spec.sup_dim, d, unit))?;

        // rank-r projection as a product of (weak_dim x r) and (r x d) factors
        let r = spec.weak_rank();
        let left = gaussian(&mut rng, spec.weak_dim, r, 1.0);
        let right = gaussian(&mut rng, r, d, 1.0);
        let norm = (3.0 / (r * d) as f64).sqrt();
        let mut weak = vec![0.0; spec.weak_dim * d];
        for i in 0..spec.weak_dim {
            for k in 0..r {
                let l = left[i * r + k];
                for j in 0..d {
                    weak[i * d + j] += l * right[k * d + j];
                }
            }
        }
        weak.iter_mut().for_each(|v| *v *= norm);
        let weak_encoder = Tensor::new(vec![spec.weak_dim, d], weak)?;

        let mut delta = gaussian(&mut rng, spec.weak_dim, d, 1.0);
        let fro = delta.iter().map(|v| v * v).sum::<f64>().sqrt();
        delta.iter_mut().for_each(|v| *v /= fro);
        let shift_direction = Tensor::new(vec![spec.weak_dim, d], delta)?;
        let target_weak_encoder = Tensor::new(
            vec![spec.weak_dim, d],
            weak_encoder
                .data()
                .iter()
                .zip(shift_direction.data())
                .map(|(a, s)| a + spec.target_shift * s)
                .collect(),
        )?;

        Ok(Self {
            spec: spec.clone(),
            label_in,
            label_out,
            sup_encoder,
            weak_encoder,
            target_weak_encoder,
            shift_direction,
        })
    }

    pub fn label(&self, z: &[f64]) -> Vec<f64> {
        let h: Vec<f64> = matvec(&self.label_in, z).into_iter().map(f64::tanh).collect();
        matvec(&self.label_out, &h)
    }

    /// `A_s·z + σ_s·noise`; `noise` has `sup_dim` entries.
    pub fn encode_sup(&self, z: &[f64], noise: &[f64]) -> Vec<f64> {
        matvec(&self.sup_encoder, z)
            .into_iter()
            .zip(noise)
            .map(|(v, n)| v + self.spec.sup_noise * n)
            .collect()
    }

    /// `[A·z, distractors] + σ_w·noise`; `noise` has `weak_input_dim()` entries.
    pub fn encode_weak(&self, z: &[f64], domain: Domain, distractors: &[f64], noise: &[f64]) -> Vec<f64> {
        let enc = match domain {
            Domain::Source => &self.weak_encoder,
            Domain::Target => &self.target_weak_encoder,
        };
        matvec(enc, z)
            .into_iter()
            .chain(distractors.iter().copied())
            .zip(noise)
            .map(|(v, n)| v + self.spec.weak_noise * n)
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitCounts {
    pub source_train: usize,
    pub source_val: usize,
    pub target_train: usize,
    pub target_test: usize,
}

impl Default for SplitCounts {
    fn default() -> Self {
        Self {
            source_train: 2048,
            source_val: 512,
            target_train: 1024,
            target_test: 512,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    SourceTrain,
    SourceVal,
    TargetTrain,
    TargetTest,
}

impl Split {
    pub const ALL: [Split; 4] = [
        Split::SourceTrain,
        Split::SourceVal,
        Split::TargetTrain,
        Split::TargetTest,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Split::SourceTrain => "source_train",
            Split::SourceVal => "source_val",
            Split::TargetTrain => "target_train",
            Split::TargetTest => "target_test",
        }
    }

    fn stream(self) -> u64 {
        match self {
            Split::SourceTrain => 0,
            Split::SourceVal => 1,
            Split::TargetTrain => 2,
            Split::TargetTest => 3,
        }
    }

    pub fn domain(self) -> Domain {
        match self {
            Split::SourceTrain | Split::SourceVal => Domain::Source,
            Split::TargetTrain | Split::TargetTest => Domain::Target,
        }
    }

    fn count(self, c: &SplitCounts) -> usize {
        match self {
            Split::SourceTrain => c.source_train,
            Split::SourceVal => c.source_val,
            Split::TargetTrain => c.target_train,
            Split::TargetTest => c.target_test,
        }
    }
}

fn split_rng(noise_seed: u64, split: Split, purpose: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(noise_seed);
    rng.set_stream(split.stream() * 2 + purpose);
    rng
}

/// The latent draws used for `split`, reproducible from the noise seed.
pub fn latent_stream(noise_seed: u64, split: Split, n: usize, latent_dim: usize) -> Vec<Vec<f64>> {
    let mut rng = split_rng(noise_seed, split, 0);
    (0..n)
        .map(|_| (0..latent_dim).map(|_| rng.random_range(-1.0..=1.0)).collect())
        .collect()
}

/// Paired samples: weak view, superior view and labels, one row per sample.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SourceSplit {
    pub x: Tensor,
    pub x_sup: Tensor,
    pub y: Tensor,
}

/// Weak view and labels only.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TargetSplit {
    pub x: Tensor,
    pub y: Tensor,
}

impl SourceSplit {
    pub fn len(&self) -> usize {
        self.y.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// The weak view with its labels.
    pub fn weak_pairs(&self) -> TargetSplit {
        TargetSplit {
            x: self.x.clone(),
            y: self.y.clone(),
        }
    }

    /// The superior view with its labels.
    pub fn superior_pairs(&self) -> TargetSplit {
        TargetSplit {
            x: self.x_sup.clone(),
            y: self.y.clone(),
        }
    }
}

impl TargetSplit {
    pub fn len(&self) -> usize {
        self.y.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetBundle {
    pub world: WorldSpec,
    pub noise_seed: u64,
    pub counts: SplitCounts,
    pub source_train: SourceSplit,
    pub source_val: SourceSplit,
    pub target_train: TargetSplit,
    pub target_test: TargetSplit,
}

struct Rows {
    x: Vec<f64>,
    x_sup: Vec<f64>,
    y: Vec<f64>,
}

fn gen_split(world: &World, split: Split, n: usize, noise_seed: u64) -> Rows {
    let spec = &world.spec;
    let latents = latent_stream(noise_seed, split, n, spec.latent_dim);
    let mut rng = split_rng(noise_seed, split, 1);
    let mut normal = |k: usize| -> Vec<f64> { (0..k).map(|_| rng.sample::<f64, _>(StandardNormal)).collect() };
    let mut rows = Rows {
        x: Vec::with_capacity(n * spec.weak_input_dim()),
        x_sup: Vec::new(),
        y: Vec::with_capacity(n * spec.label_dim()),
    };
    for z in &latents {
        if split.domain() == Domain::Source {
            let ns = normal(spec.sup_dim);
            rows.x_sup.extend(world.encode_sup(z, &ns));
        }
        let distractors = normal(spec.distractor_dim);
        let nw = normal(spec.weak_input_dim());
        rows.x.extend(world.encode_weak(z, split.domain(), &distractors, &nw));
        rows.y.extend(world.label(z));
    }
    rows
}

/// Samples every split of a bundle; deterministic in `(world, noise_seed)`.
pub fn gen_bundle(world: &World, counts: SplitCounts, noise_seed: u64) -> Result<DatasetBundle> {
    let spec = &world.spec;
    let (wx, ws, wy) = (spec.weak_input_dim(), spec.sup_dim, spec.label_dim());
    let source = |split: Split| -> Result<SourceSplit> {
        let n = split.count(&counts);
        let r = gen_split(world, split, n, noise_seed);
        Ok(SourceSplit {
            x: Tensor::new(vec![n, wx], r.x)?,
            x_sup: Tensor::new(vec![n, ws], r.x_sup)?,
            y: Tensor::new(vec![n, wy], r.y)?,
        })
    };
    let target = |split: Split| -> Result<TargetSplit> {
        let n = split.count(&counts);
        let r = gen_split(world, split, n, noise_seed);
        Ok(TargetSplit {
            x: Tensor::new(vec![n, wx], r.x)?,
            y: Tensor::new(vec![n, wy], r.y)?,
        })
    };
    Ok(DatasetBundle {
        world: spec.clone(),
        noise_seed,
        counts,
        source_train: source(Split::SourceTrain)?,
        source_val: source(Split::SourceVal)?,
        target_train: target(Split::TargetTrain)?,
        target_test: target(Split::TargetTest)?,
    })
}

#[derive(Serialize, Deserialize)]
struct Header {
    format: String,
    world: WorldSpec,
    noise_seed: u64,
    counts: SplitCounts,
}

#[derive(Serialize, Deserialize)]
struct Section {
    section: String,
    x: Tensor,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    x_sup: Option<Tensor>,
    y: Tensor,
}

fn format_err(section: &str, detail: impl Into<String>) -> Error {
    Error::Format {
        what: DATA_FORMAT,
        section: section.to_string(),
        detail: detail.into(),
    }
}

/// Writes a bundle as JSON lines: a header followed by one line per split.
pub fn save_bundle(bundle: &DatasetBundle, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    let header = Header {
        format: DATA_FORMAT.to_string(),
        world: bundle.world.clone(),
        noise_seed: bundle.noise_seed,
        counts: bundle.counts,
    };
    serde_json::to_writer(&mut w, &header)?;
    writeln!(w)?;
    let sections = [
        (
            Split::SourceTrain,
            &bundle.source_train.x,
            Some(&bundle.source_train.x_sup),
            &bundle.source_train.y,
        ),
        (
            Split::SourceVal,
            &bundle.source_val.x,
            Some(&bundle.source_val.x_sup),
            &bundle.source_val.y,
        ),
        (Split::TargetTrain, &bundle.target_train.x, None, &bundle.target_train.y),
        (Split::TargetTest, &bundle.target_test.x, None, &bundle.target_test.y),
    ];
    for (split, x, x_sup, y) in sections {
        let s = Section {
            section: split.name().to_string(),
            x: x.clone(),
            x_sup: x_sup.cloned(),
            y: y.clone(),
        };
        serde_json::to_writer(&mut w, &s)?;
        writeln!(w)?;
    }
    w.flush()?;
    Ok(())
}

pub fn load_bundle(path: &Path) -> Result<DatasetBundle> {
    let mut lines = BufReader::new(File::open(path)?).lines();
    let mut next_line = |section: &str| -> Result<String> {
        match lines.next() {
            Some(line) => Ok(line?),
            None => Err(format_err(section, "missing (file truncated?)")),
        }
    };
    let head = next_line("header")?;
    let tag: serde_json::Value = serde_json::from_str(&head).map_err(|e| format_err("header", e.to_string()))?;
    match tag.get("format").and_then(|v| v.as_str()) {
        Some(DATA_FORMAT) => {}
        Some(other) => return Err(format_err("header", format!("unsupported format tag `{other}`"))),
        None => return Err(format_err("header", "missing format tag")),
    }
    let header: Header = serde_json::from_value(tag).map_err(|e| format_err("header", e.to_string()))?;
    header.world.validate()?;

    let mut read = |split: Split| -> Result<Section> {
        let name = split.name();
        let line = next_line(name)?;
        let s: Section = serde_json::from_str(&line).map_err(|e| format_err(name, e.to_string()))?;
        if s.section != name {
            return Err(format_err(name, format!("found section `{}`", s.section)));
        }
        let n = split.count(&header.counts);
        let w = &header.world;
        let ok = s.x.shape() == [n, w.weak_input_dim()]
            && s.y.shape() == [n, w.label_dim()]
            && match (&s.x_sup, split.domain()) {
                (Some(xs), Domain::Source) => xs.shape() == [n, w.sup_dim],
                (None, Domain::Target) => true,
                _ => false,
            };
        if !ok {
            return Err(format_err(name, "array shapes disagree with header"));
        }
        Ok(s)
    };
    let to_source = |s: Section| SourceSplit {
        x: s.x,
        x_sup: s.x_sup.expect("checked above"),
        y: s.y,
    };
    let to_target = |s: Section| TargetSplit { x: s.x, y: s.y };
    let source_train = to_source(read(Split::SourceTrain)?);
    let source_val = to_source(read(Split::SourceVal)?);
    let target_train = to_target(read(Split::TargetTrain)?);
    let target_test = to_target(read(Split::TargetTest)?);
    Ok(DatasetBundle {
        world: header.world,
        noise_seed: header.noise_seed,
        counts: header.counts,
        source_train,
        source_val,
        target_train,
        target_test,
    })
}
