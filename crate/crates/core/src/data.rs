//! Synthetic role-labelled token corpora, token-level degradation, and the
//! line-delimited corpus file format.
//!
//! Each role owns a cluster centroid in embedding space. A token's embedding
//! is its role centroid plus unit Gaussian noise, and its regression target is
//! a role-specific linear map applied to the noisy embedding before any
//! degradation is applied.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::batch::TokenBatch;
use crate::error::{Error, Result};
use crate::numeric::{DenseMatrix, ProbVector};
use crate::rng;
use crate::roles::{Role, NUM_ROLES};
use crate::routing::prior_expert;

pub const CORPUS_HEADER_PREFIX: &str = "#moce-corpus v1 D=";

/// Embedding noise added per unit of curriculum severity.
pub const NOISE_PER_SEVERITY: f64 = 1.5;
/// Token dropout rate per unit of severity.
pub const DROPOUT_PER_SEVERITY: f64 = 0.1;

/// Seed of the target maps used by [`CorpusSpec::toy`]. Toy corpora of the
/// same width share one regression task and differ only in their samples.
pub const TOY_WORLD_SEED: u64 = 0;

#[derive(Debug, Clone, PartialEq)]
pub struct TokenRecord {
    pub id: u64,
    pub embedding: Vec<f64>,
    pub role: Option<Role>,
    pub target: Vec<f64>,
    pub severity: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Corpus {
    /// Embedding width. Zero only for a corpus read from an empty file.
    pub dim: usize,
    pub records: Vec<TokenRecord>,
}

impl Corpus {
    pub fn new(dim: usize, records: Vec<TokenRecord>) -> Result<Self> {
        let c = Self { dim, records };
        c.validate()?;
        Ok(c)
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        for (i, r) in self.records.iter().enumerate() {
            if r.embedding.len() != self.dim || r.target.len() != self.dim {
                return Err(Error::Validation(format!(
                    "record {i} (id {}) has embedding/target lengths {}/{}, corpus D={}",
                    r.id,
                    r.embedding.len(),
                    r.target.len(),
                    self.dim
                )));
            }
            if !(0.0..=1.0).contains(&r.severity) {
                return Err(Error::Validation(format!(
                    "record {i} severity {} outside [0, 1]",
                    r.severity
                )));
            }
            if r.embedding.iter().chain(&r.target).any(|v| !v.is_finite()) {
                return Err(Error::Validation(format!(
                    "record {i} (id {}) holds a non-finite value",
                    r.id
                )));
            }
        }
        Ok(())
    }

    /// The records at `indices` as a single-sequence batch.
    pub fn batch(&self, indices: &[usize]) -> Result<TokenBatch> {
        let mut data = Vec::with_capacity(indices.len() * self.dim);
        for &i in indices {
            data.extend_from_slice(&self.records[i].embedding);
        }
        TokenBatch::new(1, indices.len(), self.dim, data)
    }

    pub fn targets(&self, indices: &[usize]) -> Result<DenseMatrix> {
        let mut data = Vec::with_capacity(indices.len() * self.dim);
        for &i in indices {
            data.extend_from_slice(&self.records[i].target);
        }
        DenseMatrix::new(indices.len(), self.dim, data)
    }

    /// Role indices and label mask; unlabelled tokens get index 0 and `false`.
    pub fn labels(&self, indices: &[usize]) -> (Vec<usize>, Vec<bool>) {
        indices
            .iter()
            .map(|&i| match self.records[i].role {
                Some(r) => (r.index(), true),
                None => (0, false),
            })
            .unzip()
    }

    pub fn all_indices(&self) -> Vec<usize> {
        (0..self.len()).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorpusSpec {
    pub token_count: usize,
    pub dim: usize,
    pub role_prior: ProbVector,
    pub cluster_separation: f64,
    /// One D×D map per role, in taxonomy order.
    pub target_maps: Vec<DenseMatrix>,
    pub seed: u64,
}

impl CorpusSpec {
    /// Default prior, separation 4 and the shared toy target maps.
    pub fn toy(token_count: usize, dim: usize, seed: u64) -> Result<Self> {
        let spec = Self {
            token_count,
            dim,
            role_prior: default_role_prior(),
            cluster_separation: 4.0,
            target_maps: grouped_target_maps(dim, TOY_WORLD_SEED),
            seed,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 {
            return Err(Error::Config("corpus D must be >= 1".into()));
        }
        if self.role_prior.dim() != NUM_ROLES {
            return Err(Error::Config(format!(
                "role prior has {} entries, expected {NUM_ROLES}",
                self.role_prior.dim()
            )));
        }
        if !(self.cluster_separation > 0.0 && self.cluster_separation.is_finite()) {
            return Err(Error::Config(
                "cluster separation must be finite and > 0".into(),
            ));
        }
        if self.target_maps.len() != NUM_ROLES {
            return Err(Error::Config(format!(
                "{} target maps for {NUM_ROLES} roles",
                self.target_maps.len()
            )));
        }
        for m in &self.target_maps {
            m.ensure_shape(self.dim, self.dim, "target map")?;
            m.ensure_finite("target map")?;
        }
        Ok(())
    }
}

/// Relative weights DATA 0.30, UNIT 0.20 and 0.0625 for each other role,
/// normalized to sum to one (they add up to 0.9375 as written).
pub fn default_role_prior() -> ProbVector {
    let weights: Vec<f64> = Role::ALL
        .iter()
        .map(|r| match r {
            Role::Data => 0.30,
            Role::Unit => 0.20,
            _ => 0.0625,
        })
        .collect();
    let total: f64 = weights.iter().sum();
    let p = weights.iter().map(|w| w / total).collect();
    ProbVector::new(p).expect("default prior is a distribution")
}

/// One Gaussian map (σ = 1/√D) per expert group; roles routed to the same
/// expert by the prior share a map.
pub fn grouped_target_maps(dim: usize, seed: u64) -> Vec<DenseMatrix> {
    let sigma = 1.0 / (dim.max(1) as f64).sqrt();
    let group_maps: Vec<DenseMatrix> = (0..crate::experts::NUM_EXPERTS)
        .map(|g| {
            let mut s = rng::stream(rng::derive(
                rng::derive_label(seed, "target-maps"),
                g as u64,
            ));
            DenseMatrix::gaussian(dim, dim, sigma, &mut s)
        })
        .collect();
    Role::ALL
        .iter()
        .map(|&r| group_maps[prior_expert(r).index()].clone())
        .collect()
}

/// Role centroids, one row per role.
///
/// Roles below D sit on scaled basis vectors and role D, if present, on the
/// scaled negative diagonal. Any further roles get random directions from a
/// fixed stream, so centroids depend only on D and the separation.
/// The scale √2·separation puts the basis-vector centroids 2·separation apart.
pub fn role_centroids(dim: usize, separation: f64) -> DenseMatrix {
    let scale = std::f64::consts::SQRT_2 * separation;
    let mut s = rng::stream(rng::derive_label(0, "centroids"));
    let mut out = DenseMatrix::zeros(NUM_ROLES, dim);
    for k in 0..NUM_ROLES {
        let row = out.row_mut(k);
        if k < dim {
            row[k] = scale;
        } else if k == dim {
            row.fill(-scale / (dim as f64).sqrt());
        } else {
            let mut v: Vec<f64> = (0..dim).map(|_| s.sample(StandardNormal)).collect();
            let norm = v
                .iter()
                .map(|x| x * x)
                .sum::<f64>()
                .sqrt()
                .max(f64::MIN_POSITIVE);
            v.iter_mut().for_each(|x| *x *= scale / norm);
            row.copy_from_slice(&v);
        }
    }
    out
}

pub fn gen_corpus(spec: &CorpusSpec) -> Result<Corpus> {
    spec.validate()?;
    let d = spec.dim;
    let centroids = role_centroids(d, spec.cluster_separation);
    let roles = WeightedIndex::new(spec.role_prior.as_slice())
        .map_err(|e| Error::Config(format!("role prior: {e}")))?;
    let mut s = rng::stream(rng::derive_label(spec.seed, "corpus"));

    let mut records = Vec::with_capacity(spec.token_count);
    for id in 0..spec.token_count {
        let role = Role::from_index(roles.sample(&mut s)).expect("prior index is a role");
        let embedding: Vec<f64> = centroids
            .row(role.index())
            .iter()
            .map(|&c| {
                let z: f64 = s.sample(StandardNormal);
                c + z
            })
            .collect();
        let map = &spec.target_maps[role.index()];
        let target = (0..d)
            .map(|i| map.row(i).iter().zip(&embedding).map(|(m, x)| m * x).sum())
            .collect();
        records.push(TokenRecord {
            id: id as u64,
            embedding,
            role: Some(role),
            target,
            severity: 0.0,
        });
    }
    Ok(Corpus { dim: d, records })
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct DegradationConfig {
    pub label_mask_rate: f64,
    pub embedding_noise_sigma: f64,
    pub token_dropout_rate: f64,
    pub role_label_flip_rate: f64,
    /// Stamped onto surviving records (as a running maximum).
    #[serde(default)]
    pub severity: f64,
}

impl DegradationConfig {
    /// The configuration a curriculum stage of this severity applies. Stages
    /// corrupt labels only by masking them; flips are left at zero.
    pub fn at_severity(severity: f64, label_mask_rate: f64) -> Result<Self> {
        let cfg = Self {
            label_mask_rate,
            embedding_noise_sigma: NOISE_PER_SEVERITY * severity,
            token_dropout_rate: DROPOUT_PER_SEVERITY * severity,
            role_label_flip_rate: 0.0,
            severity,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let rates = [
            ("label_mask_rate", self.label_mask_rate),
            ("token_dropout_rate", self.token_dropout_rate),
            ("role_label_flip_rate", self.role_label_flip_rate),
            ("severity", self.severity),
        ];
        for (name, v) in rates {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Config(format!("{name} = {v} outside [0, 1]")));
            }
        }
        if !(self.embedding_noise_sigma >= 0.0 && self.embedding_noise_sigma.is_finite()) {
            return Err(Error::Config(format!(
                "embedding_noise_sigma = {} must be finite and >= 0",
                self.embedding_noise_sigma
            )));
        }
        Ok(())
    }
}

/// Applies dropout, embedding noise, label masking and label flips, each
/// independently per token. Targets are left untouched.
pub fn degrade(corpus: &Corpus, cfg: &DegradationConfig, seed: u64) -> Result<Corpus> {
    cfg.validate()?;
    let mut s = rng::stream(rng::derive_label(seed, "degrade"));
    let mut records = Vec::with_capacity(corpus.len());
    for rec in &corpus.records {
        if s.random::<f64>() < cfg.token_dropout_rate {
            continue;
        }
        let mut out = rec.clone();
        if cfg.embedding_noise_sigma > 0.0 {
            for v in &mut out.embedding {
                let z: f64 = s.sample(StandardNormal);
                *v += cfg.embedding_noise_sigma * z;
            }
        }
        let mask_draw: f64 = s.random();
        let flip_draw: f64 = s.random();
        let other: usize = s.random_range(0..NUM_ROLES - 1);
        if mask_draw < cfg.label_mask_rate {
            out.role = None;
        } else if let Some(r) = out.role {
            if flip_draw < cfg.role_label_flip_rate {
                let k = if other >= r.index() { other + 1 } else { other };
                out.role = Role::from_index(k);
            }
        }
        out.severity = out.severity.max(cfg.severity);
        records.push(out);
    }
    Ok(Corpus {
        dim: corpus.dim,
        records,
    })
}

#[derive(Serialize, Deserialize)]
struct RecordLine {
    id: u64,
    embedding: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    role: Option<String>,
    target: Vec<f64>,
    severity: f64,
}

pub fn write_corpus(corpus: &Corpus, path: &Path) -> Result<()> {
    corpus.validate()?;
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io = |e| Error::io(path, e);
    writeln!(w, "{CORPUS_HEADER_PREFIX}{}", corpus.dim).map_err(io)?;
    for r in &corpus.records {
        let line = RecordLine {
            id: r.id,
            embedding: r.embedding.clone(),
            role: r.role.map(|x| x.name().to_string()),
            target: r.target.clone(),
            severity: r.severity,
        };
        let text = serde_json::to_string(&line).map_err(|e| Error::Validation(e.to_string()))?;
        writeln!(w, "{text}").map_err(io)?;
    }
    w.flush().map_err(io)
}

pub fn read_corpus(path: &Path) -> Result<Corpus> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let parse_err = |line: usize, message: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        message,
    };

    let mut dim = None;
    let mut records = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let lineno = i + 1;
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let Some(d) = dim else {
            let d = line
                .strip_prefix(CORPUS_HEADER_PREFIX)
                .and_then(|rest| rest.trim().parse::<usize>().ok())
                .ok_or_else(|| {
                    parse_err(
                        lineno,
                        format!("expected header `{CORPUS_HEADER_PREFIX}<D>`"),
                    )
                })?;
            dim = Some(d);
            continue;
        };
        let raw: RecordLine =
            serde_json::from_str(&line).map_err(|e| parse_err(lineno, e.to_string()))?;
        let role = match raw.role {
            None => None,
            Some(name) => Some(name.parse::<Role>().map_err(|_| {
                Error::Validation(format!(
                    "{}:{lineno}: unknown role name {name:?}",
                    path.display()
                ))
            })?),
        };
        if raw.embedding.len() != d || raw.target.len() != d {
            return Err(Error::Validation(format!(
                "{}:{lineno}: vectors of length {}/{} in a D={d} corpus",
                path.display(),
                raw.embedding.len(),
                raw.target.len()
            )));
        }
        if !(0.0..=1.0).contains(&raw.severity) {
            return Err(Error::Validation(format!(
                "{}:{lineno}: severity {} outside [0, 1]",
                path.display(),
                raw.severity
            )));
        }
        records.push(TokenRecord {
            id: raw.id,
            embedding: raw.embedding,
            role,
            target: raw.target,
            severity: raw.severity,
        });
    }
    Ok(Corpus {
        dim: dim.unwrap_or(0),
        records,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn uniform_spec(n: usize, d: usize, seed: u64) -> CorpusSpec {
        CorpusSpec {
            role_prior: ProbVector::uniform(NUM_ROLES),
            ..CorpusSpec::toy(n, d, seed).unwrap()
        }
    }

    #[test]
    fn default_prior_keeps_the_skew() {
        let p = default_role_prior();
        let p = p.as_slice();
        assert!((p[Role::Data.index()] - 0.32).abs() < 1e-12);
        assert!((p[Role::Unit.index()] / p[Role::Header.index()] - 3.2).abs() < 1e-12);
    }

    #[test]
    fn empty_and_deterministic() {
        let c = gen_corpus(&CorpusSpec::toy(0, 8, 1).unwrap()).unwrap();
        assert!(c.is_empty());
        let spec = CorpusSpec::toy(200, 8, 5).unwrap();
        assert_eq!(gen_corpus(&spec).unwrap(), gen_corpus(&spec).unwrap());
        let other = CorpusSpec {
            seed: 6,
            ..spec.clone()
        };
        assert_ne!(gen_corpus(&spec).unwrap(), gen_corpus(&other).unwrap());
    }

    #[test]
    fn uniform_prior_counts_within_three_sigma() {
        let c = gen_corpus(&uniform_spec(9000, 8, 42)).unwrap();
        let mut counts = [0usize; NUM_ROLES];
        for r in &c.records {
            counts[r.role.unwrap().index()] += 1;
        }
        let sigma = (9000.0f64 * (1.0 / 9.0) * (8.0 / 9.0)).sqrt();
        assert!((sigma - 29.81).abs() < 0.01);
        for (k, &n) in counts.iter().enumerate() {
            assert!((n as f64 - 1000.0).abs() <= 3.0 * sigma, "role {k}: {n}");
        }
    }

    #[test]
    fn targets_follow_the_role_map() {
        let spec = CorpusSpec::toy(50, 4, 3).unwrap();
        let c = gen_corpus(&spec).unwrap();
        for r in &c.records {
            let x = DenseMatrix::col_vector(&r.embedding);
            let y = spec.target_maps[r.role.unwrap().index()]
                .matmul(&x)
                .unwrap();
            for (a, b) in y.data().iter().zip(&r.target) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn centroids_are_two_separations_apart() {
        for d in [4usize, 8, 9, 16] {
            let c = role_centroids(d, 4.0);
            let mut min = f64::INFINITY;
            for i in 0..NUM_ROLES {
                for j in i + 1..NUM_ROLES {
                    let dist: f64 = c
                        .row(i)
                        .iter()
                        .zip(c.row(j))
                        .map(|(a, b)| (a - b).powi(2))
                        .sum::<f64>()
                        .sqrt();
                    min = min.min(dist);
                }
            }
            if d >= 8 {
                assert!((min - 8.0).abs() < 1e-9, "D={d}: {min}");
            } else {
                assert!(min > 0.0);
            }
        }
    }

    #[test]
    fn degrade_identity_and_full_dropout() {
        let c = gen_corpus(&CorpusSpec::toy(300, 8, 2).unwrap()).unwrap();
        assert_eq!(degrade(&c, &DegradationConfig::default(), 9).unwrap(), c);
        let drop_all = DegradationConfig {
            token_dropout_rate: 1.0,
            ..Default::default()
        };
        let out = degrade(&c, &drop_all, 9).unwrap();
        assert!(out.is_empty());
        assert_eq!(out.dim, 8);
    }

    #[test]
    fn noise_perturbation_matches_chi_square_mean() {
        // E‖δ‖² = D·σ²; the relative standard error over 10⁴ tokens of D=8 is
        // √(2/(8·10⁴)) ≈ 0.5%, so 5% is ten standard errors.
        let c = gen_corpus(&CorpusSpec::toy(10_000, 8, 4).unwrap()).unwrap();
        let cfg = DegradationConfig {
            embedding_noise_sigma: 0.5,
            ..Default::default()
        };
        let out = degrade(&c, &cfg, 11).unwrap();
        assert_eq!(out.len(), c.len());
        let msq: f64 = c
            .records
            .iter()
            .zip(&out.records)
            .map(|(a, b)| {
                a.embedding
                    .iter()
                    .zip(&b.embedding)
                    .map(|(x, y)| (x - y).powi(2))
                    .sum::<f64>()
            })
            .sum::<f64>()
            / c.len() as f64;
        let expected = 8.0 * 0.25;
        assert!((msq - expected).abs() <= 0.05 * expected, "{msq}");
        assert!(out
            .records
            .iter()
            .zip(&c.records)
            .all(|(a, b)| a.target == b.target));
    }

    #[test]
    fn masking_and_flipping() {
        let c = gen_corpus(&CorpusSpec::toy(2000, 8, 2).unwrap()).unwrap();
        let masked = degrade(
            &c,
            &DegradationConfig {
                label_mask_rate: 1.0,
                ..Default::default()
            },
            1,
        )
        .unwrap();
        assert!(masked.records.iter().all(|r| r.role.is_none()));
        let flipped = degrade(
            &c,
            &DegradationConfig {
                role_label_flip_rate: 1.0,
                ..Default::default()
            },
            1,
        )
        .unwrap();
        assert!(flipped
            .records
            .iter()
            .zip(&c.records)
            .all(|(a, b)| a.role.is_some() && a.role != b.role));
        let half = degrade(
            &c,
            &DegradationConfig {
                role_label_flip_rate: 0.5,
                ..Default::default()
            },
            1,
        )
        .unwrap();
        let changed = half
            .records
            .iter()
            .zip(&c.records)
            .filter(|(a, b)| a.role != b.role)
            .count();
        assert!((changed as f64 - 1000.0).abs() < 4.0 * 22.4, "{changed}");
    }

    #[test]
    fn at_severity_scales_rates() {
        let cfg = DegradationConfig::at_severity(1.0, 0.5).unwrap();
        assert_eq!(cfg.embedding_noise_sigma, NOISE_PER_SEVERITY);
        assert_eq!(cfg.label_mask_rate, 0.5);
        assert_eq!(
            DegradationConfig::at_severity(0.0, 0.0).unwrap(),
            DegradationConfig::default()
        );
        assert!(DegradationConfig::at_severity(0.5, 1.5).is_err());
    }

    #[test]
    fn file_errors() {
        let dir = tempfile::tempdir().unwrap();
        let empty = dir.path().join("empty.jsonl");
        fs::write(&empty, "").unwrap();
        assert_eq!(read_corpus(&empty).unwrap(), Corpus::default());

        let bogus = dir.path().join("bogus.jsonl");
        fs::write(
            &bogus,
            "#moce-corpus v1 D=2\n{\"id\":0,\"embedding\":[1,2],\"role\":\"DATA\",\"target\":[0,0],\"severity\":0}\n\
             {\"id\":1,\"embedding\":[1,2],\"role\":\"BOGUS\",\"target\":[0,0],\"severity\":0}\n",
        )
        .unwrap();
        match read_corpus(&bogus) {
            Err(Error::Validation(msg)) => {
                assert!(msg.contains(":3:") && msg.contains("BOGUS"), "{msg}")
            }
            other => panic!("{other:?}"),
        }

        let malformed = dir.path().join("bad.jsonl");
        fs::write(
            &malformed,
            "#moce-corpus v1 D=2\n{\"id\":0,\"embedding\":[1,2],\n",
        )
        .unwrap();
        assert!(matches!(
            read_corpus(&malformed),
            Err(Error::Parse { line: 2, .. })
        ));

        let no_header = dir.path().join("nohdr.jsonl");
        fs::write(&no_header, "{\"id\":0}\n").unwrap();
        assert!(matches!(
            read_corpus(&no_header),
            Err(Error::Parse { line: 1, .. })
        ));

        let short = dir.path().join("short.jsonl");
        fs::write(
            &short,
            "#moce-corpus v1 D=3\n{\"id\":0,\"embedding\":[1,2],\"target\":[0,0],\"severity\":0}\n",
        )
        .unwrap();
        assert!(matches!(read_corpus(&short), Err(Error::Validation(_))));

        assert!(matches!(
            read_corpus(&dir.path().join("missing")),
            Err(Error::Io { .. })
        ));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn write_read_is_identity(
            n in 0usize..40,
            d in 1usize..10,
            seed in any::<u64>(),
            mask in 0.0f64..1.0,
            sigma in 0.0f64..3.0,
        ) {
            let c = gen_corpus(&CorpusSpec::toy(n, d, seed).unwrap()).unwrap();
            let cfg = DegradationConfig { label_mask_rate: mask, embedding_noise_sigma: sigma, severity: 0.37, ..Default::default() };
            let c = degrade(&c, &cfg, seed ^ 1).unwrap();
            let dir = tempfile::tempdir().unwrap();
            let path = dir.path().join("c.jsonl");
            write_corpus(&c, &path).unwrap();
            let back = read_corpus(&path).unwrap();
            prop_assert_eq!(back.dim, c.dim);
            prop_assert_eq!(back.records.len(), c.records.len());
            for (a, b) in back.records.iter().zip(&c.records) {
                prop_assert_eq!(a.id, b.id);
                prop_assert_eq!(a.role, b.role);
                prop_assert_eq!(a.severity.to_bits(), b.severity.to_bits());
                for (x, y) in a.embedding.iter().chain(&a.target).zip(b.embedding.iter().chain(&b.target)) {
                    prop_assert_eq!(x.to_bits(), y.to_bits());
                }
            }
        }
    }
}
