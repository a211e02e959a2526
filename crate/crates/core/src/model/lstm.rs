use std::ops::Range;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::diff::{ParamId, ParamStore, Tape, Tensor, Var};

use super::params::Init;
use super::{CarryState, ModelError, Recurrent, RouteTrace, SequenceInputs, WindowOutput};

/// Plain LSTM applied to every segment independently with shared weights.
/// It sees neither the graph nor any reservoir information.
#[derive(Debug, Clone, PartialEq)]
pub struct LstmModel {
    pub hidden: usize,
    pub n_features: usize,
    pub n_segments: usize,
    pub store: ParamStore,
    ids: LstmIds,
}

#[derive(Debug, Clone, PartialEq)]
struct LstmIds {
    gates: [(ParamId, ParamId, ParamId); 4],
    v: ParamId,
    c: ParamId,
}

const GATE_NAMES: [&str; 4] = ["input", "forget", "cell", "output"];

impl LstmModel {
    pub fn init(hidden: usize, n_features: usize, n_segments: usize, seed: u64) -> Result<Self, ModelError> {
        if hidden == 0 || n_features == 0 {
            return Err(ModelError::Config("LSTM dimensions must be positive".into()));
        }
        let mut store = ParamStore::new();
        let ids = {
            let mut init = Init {
                store: &mut store,
                rng: ChaCha8Rng::seed_from_u64(seed),
            };
            let mut gate = |name: &str| {
                (
                    init.matrix(&format!("lstm.{name}.w"), hidden, hidden),
                    init.matrix(&format!("lstm.{name}.u"), n_features, hidden),
                    init.bias(&format!("lstm.{name}.b"), hidden),
                )
            };
            let gates = GATE_NAMES.map(&mut gate);
            let v = init.matrix("lstm.v", hidden, 1);
            let c = init.bias("lstm.c", 1);
            LstmIds { gates, v, c }
        };
        Ok(Self {
            hidden,
            n_features,
            n_segments,
            store,
            ids,
        })
    }

    pub fn from_store(hidden: usize, n_features: usize, n_segments: usize, store: ParamStore) -> Result<Self, ModelError> {
        let mut model = Self::init(hidden, n_features, n_segments, 0)?;
        for (_, p) in model.store.iter() {
            let found = store
                .by_name(&p.name)
                .ok_or_else(|| ModelError::Checkpoint(format!("missing tensor `{}`", p.name)))?;
            if found.value.shape() != p.value.shape() {
                return Err(ModelError::Checkpoint(format!("tensor `{}` has wrong shape", p.name)));
            }
        }
        if store.len() != model.store.len() {
            return Err(ModelError::Checkpoint("unexpected tensors in LSTM checkpoint".into()));
        }
        model.store = store;
        Ok(model)
    }

    pub fn set_output_bias(&mut self, value: f64) {
        self.store.get_mut(self.ids.c).value = Tensor::scalar(value);
    }
}

impl Recurrent for LstmModel {
    fn store(&self) -> &ParamStore {
        &self.store
    }

    fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    fn zero_state(&self) -> CarryState {
        CarryState {
            tensors: vec![
                Tensor::zeros(&[self.n_segments, self.hidden]),
                Tensor::zeros(&[self.n_segments, self.hidden]),
            ],
        }
    }

    fn forward_window(
        &self,
        tape: &mut Tape,
        inputs: &SequenceInputs,
        range: Range<usize>,
        init: &CarryState,
    ) -> Result<WindowOutput, ModelError> {
        inputs.check(self.n_segments, self.n_features, range.clone())?;
        let bind = |tape: &mut Tape, id: ParamId| tape.param(&self.store, id);
        let gates: Vec<(Var, Var, Var)> = self
            .ids
            .gates
            .iter()
            .map(|&(w, u, b)| (bind(tape, w), bind(tape, u), bind(tape, b)))
            .collect();
        let v = bind(tape, self.ids.v);
        let cb = bind(tape, self.ids.c);
        let ones = tape.constant(Tensor::full(&[self.n_segments, 1], 1.0));
        let mut c = tape.constant(init.tensors[0].clone());
        let mut h = tape.constant(init.tensors[1].clone());
        let mut predictions = Vec::with_capacity(range.len());
        let mut hidden = Vec::with_capacity(range.len());
        for t in range {
            let x = tape.constant(inputs.drivers[t].clone());
            let mut pre = Vec::with_capacity(4);
            for &(w, u, b) in &gates {
                let hw = tape.matmul(h, w)?;
                let xu = tape.matmul(x, u)?;
                let s = tape.add(hw, xu)?;
                let bb = tape.matmul(ones, b)?;
                pre.push(tape.add(s, bb)?);
            }
            let i = tape.sigmoid(pre[0]);
            let f = tape.sigmoid(pre[1]);
            let g = tape.tanh(pre[2]);
            let o = tape.sigmoid(pre[3]);
            let fc = tape.mul(f, c)?;
            let ig = tape.mul(i, g)?;
            c = tape.add(fc, ig)?;
            let tc = tape.tanh(c);
            h = tape.mul(o, tc)?;
            let hv = tape.matmul(h, v)?;
            let bias = tape.matmul(ones, cb)?;
            predictions.push(tape.add(hv, bias)?);
            hidden.push(h);
        }
        let carry = if hidden.is_empty() { vec![] } else { vec![c, h] };
        Ok(WindowOutput {
            predictions,
            hidden,
            carry,
            trace: RouteTrace::default(),
        })
    }
}
