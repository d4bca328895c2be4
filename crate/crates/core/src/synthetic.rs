//! Parametric stand-in for generated person data.
//!
//! Each identity gets a Gaussian prototype (its fixed appearance), each
//! sample adds pose/background noise around it, and each camera applies a
//! fixed affine style map. The generator is a plain function of its config:
//! the seed keys independent ChaCha streams for the camera styles and for
//! every data split.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::embedding::{EmbeddingMatrix, FeatureVector, ItemMeta};
use crate::error::{Error, Result};
use crate::rng;

const STYLE_STREAM: u64 = 0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneratorConfig {
    /// Number of identities (`N_p`).
    pub identities: usize,
    /// Samples per identity (`N_e`).
    pub samples_per_identity: usize,
    /// Number of cameras (`N_c`).
    pub cameras: u32,
    /// Feature dimension.
    pub dim: usize,
    /// Per-coordinate spread of identity prototypes.
    pub sigma_identity: f64,
    /// Per-coordinate pose/background noise around a prototype.
    pub sigma_pose: f64,
    /// Magnitude of the per-camera style map; 0 disables it.
    pub camera_strength: f64,
    /// Share of the style map that is a rotation rather than a shift.
    #[serde(default = "default_camera_rotation")]
    pub camera_rotation: f64,
    pub seed: u64,
}

fn default_camera_rotation() -> f64 {
    0.25
}

impl GeneratorConfig {
    pub fn validate(&self, block: &str) -> Result<()> {
        let field = |f: &str| format!("{block}.{f}");
        if self.identities == 0 {
            return Err(Error::invalid(field("identities"), "must be at least 1"));
        }
        if self.samples_per_identity == 0 {
            return Err(Error::invalid(
                field("samples_per_identity"),
                "must be at least 1",
            ));
        }
        if self.cameras == 0 {
            return Err(Error::invalid(field("cameras"), "must be at least 1"));
        }
        if self.dim == 0 {
            return Err(Error::invalid(field("dim"), "must be at least 1"));
        }
        for (name, v) in [
            ("sigma_identity", self.sigma_identity),
            ("sigma_pose", self.sigma_pose),
            ("camera_strength", self.camera_strength),
            ("camera_rotation", self.camera_rotation),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::invalid(field(name), "must be finite and >= 0"));
            }
        }
        Ok(())
    }

    pub fn total_items(&self) -> usize {
        self.identities * self.samples_per_identity
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    /// Pseudo-labeled: labels come for free with generation.
    Virtual,
    /// Unlabeled: identities are kept only for evaluation.
    Real,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticDataset {
    /// Raw, unnormalized features.
    pub embeddings: EmbeddingMatrix,
    pub role: Role,
}

impl SyntheticDataset {
    pub fn len(&self) -> usize {
        self.embeddings.len()
    }

    pub fn is_empty(&self) -> bool {
        self.embeddings.is_empty()
    }

    /// Pseudo labels in row order. `None` for real data.
    pub fn labels(&self) -> Option<Vec<usize>> {
        self.embeddings
            .meta()
            .iter()
            .map(|m| m.pseudo_label.map(|l| l as usize))
            .collect()
    }
}

/// Fixed per-camera affine maps derived from a generator config.
///
/// Camera `c > 0` maps `x` to `x + s * (r * (R_c x - x) + t_c)` where `R_c` is
/// a random orthogonal matrix, `t_c` a standard normal shift, `s` the camera
/// strength and `r` the rotation share. Camera 0 is the identity.
#[derive(Clone, Debug)]
pub struct CameraStyles {
    dim: usize,
    strength: f64,
    rotation: f64,
    rotations: Vec<Vec<f64>>,
    shifts: Vec<Vec<f64>>,
}

impl CameraStyles {
    pub fn new(cfg: &GeneratorConfig) -> Self {
        let mut r = rng::stream(cfg.seed, STYLE_STREAM);
        let d = cfg.dim;
        let mut rotations = vec![Vec::new()];
        let mut shifts = vec![vec![0.0; d]];
        for _ in 1..cfg.cameras {
            rotations.push(random_orthogonal(d, &mut r));
            shifts.push((0..d).map(|_| StandardNormal.sample(&mut r)).collect());
        }
        Self {
            dim: d,
            strength: cfg.camera_strength,
            rotation: cfg.camera_rotation,
            rotations,
            shifts,
        }
    }

    pub fn apply(&self, v: &[f64], camera: u32) -> Vec<f64> {
        let c = camera as usize;
        if c == 0 || self.strength == 0.0 {
            return v.to_vec();
        }
        let rot = &self.rotations[c];
        let shift = &self.shifts[c];
        (0..self.dim)
            .map(|i| {
                let rv: f64 = rot[i * self.dim..(i + 1) * self.dim]
                    .iter()
                    .zip(v)
                    .map(|(a, b)| a * b)
                    .sum();
                v[i] + self.strength * (self.rotation * (rv - v[i]) + shift[i])
            })
            .collect()
    }
}

/// Orthonormalized Gaussian matrix (row-major), by modified Gram-Schmidt.
fn random_orthogonal(d: usize, r: &mut impl Rng) -> Vec<f64> {
    loop {
        let mut m: Vec<f64> = (0..d * d).map(|_| StandardNormal.sample(&mut *r)).collect();
        let mut ok = true;
        for i in 0..d {
            for j in 0..i {
                let dot: f64 = (0..d).map(|t| m[i * d + t] * m[j * d + t]).sum();
                for t in 0..d {
                    m[i * d + t] -= dot * m[j * d + t];
                }
            }
            let norm = (0..d).map(|t| m[i * d + t].powi(2)).sum::<f64>().sqrt();
            if norm < 1e-8 {
                ok = false;
                break;
            }
            for t in 0..d {
                m[i * d + t] /= norm;
            }
        }
        if ok {
            return m;
        }
    }
}

/// Applies camera `camera_id`'s style map from `cfg` to `v`.
pub fn camera_transform(
    v: &FeatureVector,
    camera_id: u32,
    cfg: &GeneratorConfig,
) -> Result<FeatureVector> {
    if camera_id >= cfg.cameras {
        return Err(Error::invalid(
            "camera_id",
            format!("{camera_id} >= {} cameras", cfg.cameras),
        ));
    }
    if v.dim() != cfg.dim {
        return Err(Error::DimensionMismatch {
            expected: cfg.dim,
            got: v.dim(),
        });
    }
    FeatureVector::new(CameraStyles::new(cfg).apply(v.as_slice(), camera_id))
}

/// Generates the training split of a dataset.
pub fn generate(cfg: &GeneratorConfig, role: Role) -> Result<SyntheticDataset> {
    generate_split(cfg, role, 0)
}

/// Generates split `split` of a dataset. All splits share camera styles;
/// identities and noise come from a split-specific stream, so split 1 acts
/// as a held-out set of new identities seen through the same cameras.
pub fn generate_split(cfg: &GeneratorConfig, role: Role, split: u64) -> Result<SyntheticDataset> {
    cfg.validate("generator")?;
    let styles = CameraStyles::new(cfg);
    let mut r = rng::stream(cfg.seed, 1 + split);
    let d = cfg.dim;
    let n = cfg.total_items();
    let mut data = Vec::with_capacity(n * d);
    let mut meta = Vec::with_capacity(n);
    let mut prototype = vec![0.0; d];
    let mut sample = vec![0.0; d];
    for id in 0..cfg.identities {
        for x in prototype.iter_mut() {
            let z: f64 = StandardNormal.sample(&mut r);
            *x = cfg.sigma_identity * z;
        }
        for j in 0..cfg.samples_per_identity {
            for (s, p) in sample.iter_mut().zip(&prototype) {
                let z: f64 = StandardNormal.sample(&mut r);
                *s = p + cfg.sigma_pose * z;
            }
            // Round-robin from a per-identity offset keeps cameras balanced
            // within each identity.
            let camera = ((id + j) % cfg.cameras as usize) as u32;
            let styled = styles.apply(&sample, camera);
            // Stored at f32 precision so in-memory and on-disk data agree.
            data.extend(styled.iter().map(|&x| x as f32 as f64));
            meta.push(ItemMeta {
                item_id: meta.len() as u64,
                camera_id: camera,
                true_identity: Some(id as u64),
                pseudo_label: (role == Role::Virtual).then_some(id as u64),
            });
        }
    }
    Ok(SyntheticDataset {
        embeddings: EmbeddingMatrix::from_flat(d, data, meta, cfg.cameras)?,
        role,
    })
}
