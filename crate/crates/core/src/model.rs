//! A trained selector with its prototype base: inference, explanation
//! records and the on-disk checkpoint format.

use crate::data::Normalizer;
use crate::exec::map_ordered;
use crate::proto::{predict, NeighborRecord, Prediction, ProtoError, PrototypeBase, SortMode};
use crate::selector::{mask_tag, GatingParams, MaskTag, SelectorError, LAYER_NAMES};
use crate::tensor::Matrix;
use crate::train::{infer_masks, TrainConfig, TrainError};
use serde::{Deserialize, Serialize};
use std::path::Path;
use thiserror::Error;

pub const CHECKPOINT_MAGIC: &str = "PROTOGATE-CKPT-v1";
pub const BASE_MAGIC: &str = "PROTOGATE-BASE-v1";

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("not a {expected} file (magic `{found}`)")]
    BadMagic {
        expected: &'static str,
        found: String,
    },
    #[error("layer `{name}` has shape {rows}x{cols} with {len} values")]
    LayerShape {
        name: String,
        rows: usize,
        cols: usize,
        len: usize,
    },
    #[error("missing layer `{0}`")]
    MissingLayer(&'static str),
    #[error("checkpoint expects {expected} features, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Proto(#[from] ProtoError),
    #[error(transparent)]
    Selector(#[from] SelectorError),
    #[error(transparent)]
    Train(#[from] TrainError),
}

pub type Result<T, E = ModelError> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerRecord {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    /// Row-major values.
    pub data: Vec<f64>,
}

/// Serialised selector weights with the configuration that produced them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub magic: String,
    pub features: usize,
    pub hidden: usize,
    pub layers: Vec<LayerRecord>,
    pub config: TrainConfig,
    pub normalizer: Option<Normalizer>,
    pub feature_names: Vec<String>,
    pub label_names: Vec<String>,
}

impl Checkpoint {
    pub fn new(
        params: &GatingParams,
        config: &TrainConfig,
        normalizer: Option<Normalizer>,
        feature_names: Vec<String>,
        label_names: Vec<String>,
    ) -> Self {
        let layers = LAYER_NAMES
            .iter()
            .zip(params.tensors())
            .map(|(name, m)| LayerRecord {
                name: name.to_string(),
                rows: m.rows(),
                cols: m.cols(),
                data: m.as_slice().to_vec(),
            })
            .collect();
        Self {
            magic: CHECKPOINT_MAGIC.into(),
            features: params.features(),
            hidden: params.hidden(),
            layers,
            config: config.clone(),
            normalizer,
            feature_names,
            label_names,
        }
    }

    pub fn params(&self) -> Result<GatingParams> {
        if self.magic != CHECKPOINT_MAGIC {
            return Err(ModelError::BadMagic {
                expected: CHECKPOINT_MAGIC,
                found: self.magic.clone(),
            });
        }
        let (d, h) = (self.features, self.hidden);
        let expected = [(h, d), (1, h), (h, h), (1, h), (d, h), (1, d)];
        let mut out = GatingParams::zeros(d, h);
        for ((name, slot), (rows, cols)) in LAYER_NAMES.iter().zip(out.tensors_mut()).zip(expected)
        {
            let layer = self
                .layers
                .iter()
                .find(|l| l.name == *name)
                .ok_or(ModelError::MissingLayer(name))?;
            if (layer.rows, layer.cols) != (rows, cols) || layer.data.len() != rows * cols {
                return Err(ModelError::LayerShape {
                    name: layer.name.clone(),
                    rows: layer.rows,
                    cols: layer.cols,
                    len: layer.data.len(),
                });
            }
            *slot = Matrix::from_vec(rows, cols, layer.data.clone());
        }
        Ok(out)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let c: Checkpoint = serde_json::from_str(s)?;
        c.params()?;
        Ok(c)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

/// Serialised prototype base.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaseFile {
    pub magic: String,
    pub base: PrototypeBase,
    pub label_names: Vec<String>,
}

impl BaseFile {
    pub fn new(base: PrototypeBase, label_names: Vec<String>) -> Self {
        Self {
            magic: BASE_MAGIC.into(),
            base,
            label_names,
        }
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, serde_json::to_string(self)?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let b: BaseFile = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        if b.magic != BASE_MAGIC {
            return Err(ModelError::BadMagic {
                expected: BASE_MAGIC,
                found: b.magic,
            });
        }
        Ok(b)
    }
}

/// Masks and hard-sorted predictions for every row of `x`.
#[derive(Debug, Clone)]
pub struct Inference {
    pub s_global: Vec<f64>,
    pub s_local: Matrix,
    pub predictions: Vec<Prediction>,
}

/// Runs deterministic inference on already normalised rows of `x`.
pub fn infer(
    params: &GatingParams,
    base: &PrototypeBase,
    x: &Matrix,
    k: usize,
    delta: f64,
    eps_zero: f64,
    jobs: usize,
) -> Result<Inference> {
    if x.cols() != params.features() {
        return Err(ModelError::DimensionMismatch {
            expected: params.features(),
            got: x.cols(),
        });
    }
    let (s_global, _, s_local) = infer_masks(params, x, eps_zero)?;
    let masked = mask_rows(x, &s_local);
    let rows: Vec<usize> = (0..x.rows()).collect();
    let predictions = map_ordered(&rows, jobs, |&i| {
        predict(masked.row(i), base, k, SortMode::Hard, delta, None)
    })
    .into_iter()
    .collect::<std::result::Result<Vec<_>, _>>()?;
    Ok(Inference {
        s_global,
        s_local,
        predictions,
    })
}

/// Element-wise product of equally shaped matrices.
pub fn mask_rows(x: &Matrix, s: &Matrix) -> Matrix {
    assert_eq!(x.shape(), s.shape(), "mask shape");
    let data = x
        .as_slice()
        .iter()
        .zip(s.as_slice())
        .map(|(a, b)| a * b)
        .collect();
    Matrix::from_vec(x.rows(), x.cols(), data)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectedFeature {
    pub index: usize,
    pub name: String,
    pub mask: f64,
}

/// Full explanation of one prediction: the nearest prototypes, the selected
/// features and the behaviour tag of every feature.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExplanationRecord {
    pub query_id: usize,
    pub predicted_label: usize,
    pub predicted_name: String,
    pub neighbors: Vec<NeighborRecord>,
    pub selected: Vec<SelectedFeature>,
    pub tags: Vec<MaskTag>,
}

pub fn explanations(
    inf: &Inference,
    feature_names: &[String],
    label_names: &[String],
) -> Vec<ExplanationRecord> {
    inf.predictions
        .iter()
        .enumerate()
        .map(|(q, p)| {
            let e = p.explanation(q);
            let mask = inf.s_local.row(q);
            let name = |d: usize| {
                feature_names
                    .get(d)
                    .cloned()
                    .unwrap_or_else(|| format!("x{}", d + 1))
            };
            ExplanationRecord {
                query_id: q,
                predicted_label: p.label,
                predicted_name: label_names
                    .get(p.label)
                    .cloned()
                    .unwrap_or_else(|| p.label.to_string()),
                neighbors: e.neighbors,
                selected: mask
                    .iter()
                    .enumerate()
                    .filter(|(_, &m)| m > 0.0)
                    .map(|(d, &m)| SelectedFeature {
                        index: d,
                        name: name(d),
                        mask: m,
                    })
                    .collect(),
                tags: mask
                    .iter()
                    .zip(&inf.s_global)
                    .map(|(&l, &g)| mask_tag(g, l))
                    .collect(),
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::proto::build_base;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn params() -> GatingParams {
        GatingParams::init(4, 3, &mut ChaCha8Rng::seed_from_u64(3))
    }

    #[test]
    fn checkpoint_round_trip_is_exact() {
        let p = params();
        let c = Checkpoint::new(&p, &TrainConfig::default(), None, vec![], vec![]);
        let json = c.to_json().unwrap();
        let back = Checkpoint::from_json(&json).unwrap();
        assert_eq!(back.params().unwrap(), p);
        assert_eq!(back.to_json().unwrap(), json);
        assert!(json.contains(CHECKPOINT_MAGIC));
    }

    #[test]
    fn bad_magic_and_shapes_are_rejected() {
        let mut c = Checkpoint::new(&params(), &TrainConfig::default(), None, vec![], vec![]);
        c.layers[2].rows = 7;
        assert!(matches!(c.params(), Err(ModelError::LayerShape { .. })));
        c.magic = "nope".into();
        assert!(matches!(c.params(), Err(ModelError::BadMagic { .. })));
    }

    #[test]
    fn explanation_tags_cover_every_feature() {
        let mut p = params();
        for h in 0..3 {
            p.w1.set(h, 1, 0.0);
        }
        let x = Matrix::from_rows(&[vec![1.0, -1.0, 0.5, 0.2], vec![0.0, 2.0, -0.5, 1.0]]);
        let base = build_base(x.clone(), vec![0, 1], vec![10, 11]).unwrap();
        let inf = infer(&p, &base, &x, 1, 1e-9, 0.0, 1).unwrap();
        assert_eq!(inf.s_global, vec![1.0, 0.0, 1.0, 1.0]);
        let ex = explanations(&inf, &[], &["a".into(), "b".into()]);
        assert_eq!(ex.len(), 2);
        for e in &ex {
            assert_eq!(e.tags.len(), 4);
            assert_eq!(e.neighbors.len(), 1);
            for s in &e.selected {
                assert!(s.mask > 0.0);
            }
        }
        assert!(matches!(
            infer(&p, &base, &Matrix::zeros(1, 3), 1, 1e-9, 0.0, 1),
            Err(ModelError::DimensionMismatch { .. })
        ));
    }
}
