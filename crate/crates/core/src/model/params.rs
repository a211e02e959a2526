use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diff::{ParamId, ParamStore, Tensor};

use super::ModelError;

/// Which release-embedding heads the model carries.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelRole {
    /// Next-day forecaster: no release embedding at all.
    Forecaster,
    /// Main model; release embeddings come from the PP and/or SE heads.
    Main,
}

/// Shape configuration of a SAG cell.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SagConfig {
    pub hidden: usize,
    pub n_features: usize,
    pub n_meta: usize,
    /// Number of affine+sigmoid layers in each meta-feature filter.
    pub meta_layers: usize,
    pub role: ModelRole,
    /// Carry the PP projection (needed when any reservoir lacks release data).
    pub pp_head: bool,
    /// Column count of the SE projection, `None` when no reservoir uses SE.
    /// `L + 1` with the flow-average temperature, `L` without it.
    pub se_inputs: Option<usize>,
}

impl SagConfig {
    pub fn forecaster(hidden: usize, n_features: usize, n_meta: usize) -> Self {
        Self {
            hidden,
            n_features,
            n_meta,
            meta_layers: 1,
            role: ModelRole::Forecaster,
            pp_head: false,
            se_inputs: None,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.hidden == 0 || self.n_features == 0 || self.meta_layers == 0 {
            return Err(ModelError::Config("hidden, n_features and meta_layers must be positive".into()));
        }
        if self.role == ModelRole::Forecaster && (self.pp_head || self.se_inputs.is_some()) {
            return Err(ModelError::Config("forecaster carries no release heads".into()));
        }
        if self.se_inputs == Some(0) {
            return Err(ModelError::Config("SE projection needs at least one input".into()));
        }
        Ok(())
    }
}

/// Parameters of a small fully connected filter `D_m -> D_h` with sigmoid
/// activations on every layer.
#[derive(Debug, Clone, PartialEq)]
pub struct MetaFilterIds {
    pub layers: Vec<(ParamId, ParamId)>,
}

/// Parameter handles of a SAG cell. Matrices are stored `(in, out)` because
/// node states are rows: `state * W`.
#[derive(Debug, Clone, PartialEq)]
pub struct SagParamIds {
    pub w_r: ParamId,
    pub b_r: ParamId,
    pub f1: MetaFilterIds,
    pub f2: MetaFilterIds,
    pub w_c_h: ParamId,
    pub u_c_x: ParamId,
    pub b_c: ParamId,
    pub w_f_h: ParamId,
    pub u_f_x: ParamId,
    pub b_f: ParamId,
    pub w_g_h: ParamId,
    pub u_g_x: ParamId,
    pub b_g: ParamId,
    pub w_r_p: ParamId,
    pub u_r_x: ParamId,
    pub b_gr: ParamId,
    pub w_s_q: ParamId,
    pub u_s_x: ParamId,
    pub b_s: ParamId,
    pub w_o_h: ParamId,
    pub u_o_x: ParamId,
    pub b_o: ParamId,
    pub w_p: ParamId,
    pub w_p_r: ParamId,
    pub b_p: ParamId,
    pub w_q: ParamId,
    pub b_q: ParamId,
    pub v: ParamId,
    pub c: ParamId,
    pub w_pp: Option<ParamId>,
    pub b_pp: Option<ParamId>,
    pub z: Option<ParamId>,
    pub b_se: Option<ParamId>,
}

/// All learnable weights of one SAG model together with its configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct SagParams {
    pub config: SagConfig,
    pub store: ParamStore,
    pub ids: SagParamIds,
}

/// Glorot-uniform bound `sqrt(6 / (fan_in + fan_out))`.
pub fn glorot_bound(fan_in: usize, fan_out: usize) -> f64 {
    (6.0 / (fan_in + fan_out) as f64).sqrt()
}

pub(crate) struct Init<'a> {
    pub store: &'a mut ParamStore,
    pub rng: ChaCha8Rng,
}

impl Init<'_> {
    pub fn matrix(&mut self, name: &str, fan_in: usize, fan_out: usize) -> ParamId {
        let s = glorot_bound(fan_in, fan_out);
        let data = (0..fan_in * fan_out).map(|_| self.rng.random_range(-s..=s)).collect();
        self.store
            .insert(name, Tensor::matrix(fan_in, fan_out, data).expect("shape"))
    }

    pub fn bias(&mut self, name: &str, width: usize) -> ParamId {
        self.store.insert(name, Tensor::zeros(&[1, width]))
    }
}

fn meta_filter(init: &mut Init<'_>, prefix: &str, n_meta: usize, hidden: usize, layers: usize) -> MetaFilterIds {
    let mut out = Vec::with_capacity(layers);
    let mut fan_in = n_meta;
    for l in 0..layers {
        let w = init.matrix(&format!("{prefix}.{l}.w"), fan_in, hidden);
        let b = init.bias(&format!("{prefix}.{l}.b"), hidden);
        out.push((w, b));
        fan_in = hidden;
    }
    MetaFilterIds { layers: out }
}

impl SagParams {
    /// Glorot-uniform matrices and zero biases, deterministic in `seed`.
    pub fn init(config: SagConfig, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let mut store = ParamStore::new();
        let (d, dx, dm) = (config.hidden, config.n_features, config.n_meta);
        let ids = {
            let mut init = Init {
                store: &mut store,
                rng: ChaCha8Rng::seed_from_u64(seed),
            };
            let w_r = init.matrix("w_r", d, d);
            let b_r = init.bias("b_r", d);
            let f1 = meta_filter(&mut init, "f1", dm, d, config.meta_layers);
            let f2 = meta_filter(&mut init, "f2", dm, d, config.meta_layers);
            let w_c_h = init.matrix("w_c_h", d, d);
            let u_c_x = init.matrix("u_c_x", dx, d);
            let b_c = init.bias("b_c", d);
            let w_f_h = init.matrix("w_f_h", d, d);
            let u_f_x = init.matrix("u_f_x", dx, d);
            let b_f = init.bias("b_f", d);
            let w_g_h = init.matrix("w_g_h", d, d);
            let u_g_x = init.matrix("u_g_x", dx, d);
            let b_g = init.bias("b_g", d);
            let w_r_p = init.matrix("w_r_p", d, d);
            let u_r_x = init.matrix("u_r_x", dx, d);
            let b_gr = init.bias("b_gr", d);
            let w_s_q = init.matrix("w_s_q", d, d);
            let u_s_x = init.matrix("u_s_x", dx, d);
            let b_s = init.bias("b_s", d);
            let w_o_h = init.matrix("w_o_h", d, d);
            let u_o_x = init.matrix("u_o_x", dx, d);
            let b_o = init.bias("b_o", d);
            let w_p = init.matrix("w_p", d, d);
            let w_p_r = init.matrix("w_p_r", d, d);
            let b_p = init.bias("b_p", d);
            let w_q = init.matrix("w_q", d, d);
            let b_q = init.bias("b_q", d);
            let v = init.matrix("v", d, 1);
            let c = init.bias("c", 1);
            let (w_pp, b_pp) = if config.pp_head {
                (Some(init.matrix("w_pp", d, d)), Some(init.bias("b_pp", d)))
            } else {
                (None, None)
            };
            let (z, b_se) = match config.se_inputs {
                Some(cols) => (Some(init.matrix("z", cols, d)), Some(init.bias("b_se", d))),
                None => (None, None),
            };
            SagParamIds {
                w_r,
                b_r,
                f1,
                f2,
                w_c_h,
                u_c_x,
                b_c,
                w_f_h,
                u_f_x,
                b_f,
                w_g_h,
                u_g_x,
                b_g,
                w_r_p,
                u_r_x,
                b_gr,
                w_s_q,
                u_s_x,
                b_s,
                w_o_h,
                u_o_x,
                b_o,
                w_p,
                w_p_r,
                b_p,
                w_q,
                b_q,
                v,
                c,
                w_pp,
                b_pp,
                z,
                b_se,
            }
        };
        Ok(Self { config, store, ids })
    }

    /// Rebuilds handles for a store loaded from a checkpoint, verifying every
    /// expected tensor is present with the right shape.
    pub fn from_store(config: SagConfig, store: ParamStore) -> Result<Self, ModelError> {
        let reference = Self::init(config.clone(), 0)?;
        if reference.store.len() != store.len() {
            return Err(ModelError::Checkpoint(format!(
                "expected {} tensors, found {}",
                reference.store.len(),
                store.len()
            )));
        }
        for (id, p) in reference.store.iter() {
            let found = store
                .by_name(&p.name)
                .ok_or_else(|| ModelError::Checkpoint(format!("missing tensor `{}`", p.name)))?;
            if found.value.shape() != p.value.shape() {
                return Err(ModelError::Checkpoint(format!(
                    "tensor `{}` has shape {:?}, expected {:?}",
                    p.name,
                    found.value.shape(),
                    p.value.shape()
                )));
            }
            if store.id(&p.name) != Some(id) {
                return Err(ModelError::Checkpoint(format!("tensor `{}` out of order", p.name)));
            }
        }
        Ok(Self {
            config,
            store,
            ids: reference.ids,
        })
    }

    /// Parameters that the forward pass of this configuration actually uses.
    pub fn active_ids(&self) -> Vec<ParamId> {
        self.store.ids().collect()
    }

    /// Sets the output bias (the `c` in `V h + c`).
    pub fn set_output_bias(&mut self, value: f64) {
        self.store.get_mut(self.ids.c).value = Tensor::matrix(1, 1, vec![value]).expect("shape");
    }
}
