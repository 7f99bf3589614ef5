//! End-to-end finite-difference check of every trainable tensor through
//! encoder, tokenizer, fusion, frozen backbone and head.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{build_all_samples, generate_synthetic, GridSpec, SyntheticConfig};
use crate::numerics::{check_param_gradient, NumericsError, ParamSet, Tensor, DEFAULT_STEP};
use crate::semantic::{sample_semantics, StubEmbedder};

use super::{BackboneSpec, Model, ModelConfig, ModelError};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradcheckSetup {
    pub dim: usize,
    pub grid: GridSpec,
    pub users: u32,
    pub seed: u64,
    /// Coordinates probed per tensor: the largest-gradient ones plus as many
    /// random ones.
    pub coords_per_tensor: usize,
}

impl Default for GradcheckSetup {
    fn default() -> Self {
        Self { dim: 16, grid: GridSpec { width: 10, height: 10 }, users: 2, seed: 0, coords_per_tensor: 6 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub max_rel_err: f64,
    pub worst_tensor: String,
    pub tensors_checked: usize,
    pub coords_checked: usize,
    pub frozen_tensors: usize,
    pub frozen_checksum_unchanged: bool,
}

pub fn end_to_end_gradcheck(setup: &GradcheckSetup) -> Result<GradcheckReport, ModelError> {
    let data = generate_synthetic(&SyntheticConfig {
        users: setup.users,
        days: 8,
        noise: 0.3,
        dropout: 0.3,
        seed: setup.seed,
        grid: setup.grid,
    })?;
    let samples = build_all_samples(&data.trajectories, &setup.grid)?;
    let stub = StubEmbedder::new(setup.seed, setup.dim);
    let semantics = samples.iter().map(|s| sample_semantics(s, &setup.grid, &stub)).collect::<Result<Vec<_>, _>>()?;
    let config = ModelConfig {
        dim: setup.dim,
        grid: setup.grid,
        backbone: BackboneSpec::FrozenRandom { layers: 2, heads: 4, seed: setup.seed + 1 },
        ..ModelConfig::default()
    };
    let model = Model::new(config, setup.seed)?;
    let frozen_before = model.backbone_checksum();

    let batch = |params: &ParamSet| -> Result<(f64, Vec<Tensor>), ModelError> {
        let mut total = 0.0;
        let mut grads: Vec<Tensor> = params.tensors().iter().map(|t| Tensor::zeros(t.shape())).collect();
        for (s, sem) in samples.iter().zip(&semantics) {
            let (loss, g) = model.loss_and_gradients(params, s, sem, None)?;
            total += loss;
            for (acc, g) in grads.iter_mut().zip(g) {
                if let Some(g) = g {
                    acc.axpy(1.0, &g);
                }
            }
        }
        let n = samples.len() as f64;
        grads.iter_mut().for_each(|g| g.scale_in_place(1.0 / n));
        Ok((total / n, grads))
    };

    let (_, analytic) = batch(&model.trainable)?;
    let mut rng = ChaCha8Rng::seed_from_u64(setup.seed ^ 0x9e37);
    let mut worst = (0.0f64, String::new());
    let mut coords_checked = 0;
    for (index, g) in analytic.iter().enumerate() {
        let mut order: Vec<usize> = (0..g.len()).collect();
        order.sort_by(|&a, &b| g.data()[b].abs().total_cmp(&g.data()[a].abs()).then(a.cmp(&b)));
        let k = setup.coords_per_tensor.min(g.len());
        let mut coords: Vec<usize> = order[..k].to_vec();
        for _ in 0..k {
            coords.push(rng.random_range(0..g.len()));
        }
        coords.sort_unstable();
        coords.dedup();
        coords_checked += coords.len();
        let mut model_err: Option<ModelError> = None;
        let err = check_param_gradient(&model.trainable, index, &coords, DEFAULT_STEP, |p| match batch(p) {
            Ok((loss, mut grads)) => Ok((loss, grads.swap_remove(index))),
            Err(ModelError::Numerics(e)) => Err(e),
            Err(e) => {
                model_err = Some(e);
                Err(NumericsError::EmptyInput("gradcheck"))
            }
        });
        if let Some(e) = model_err {
            return Err(e);
        }
        let err = err?;
        if err > worst.0 || worst.1.is_empty() {
            worst = (err, model.trainable.name(index).to_owned());
        }
    }
    Ok(GradcheckReport {
        max_rel_err: worst.0,
        worst_tensor: worst.1,
        tensors_checked: analytic.len(),
        coords_checked,
        frozen_tensors: model.frozen.len(),
        frozen_checksum_unchanged: model.backbone_checksum() == frozen_before,
    })
}
