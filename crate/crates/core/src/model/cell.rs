use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::diff::{ParamId, ParamStore, Tape, Tensor, Var};
use crate::graph::{AdjacencyMatrix, NetworkTopology};

use super::params::{MetaFilterIds, ModelRole, SagParams};
use super::{CarryState, ModelError, Recurrent, SequenceInputs, WindowOutput};

/// How a reservoir's release embedding is produced.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReleaseRoute {
    /// Release data available (R1): simulation-based embedding.
    Se,
    /// No release data (R2): pseudo-prospective embedding from the forecaster.
    Pp,
}

/// Constant graph tensors derived once from topology, adjacency and
/// reservoir meta-features.
#[derive(Debug, Clone, PartialEq)]
pub struct GraphTensors {
    pub n_segments: usize,
    pub n_reservoirs: usize,
    /// `N x N`, row `i` = `A_ji` over `j in N(i)`.
    pub seg_agg: Tensor,
    /// `M x N`, row `k` = `A_ik` over `i in S(k)`.
    pub res_in_agg: Tensor,
    /// `N x M`, row `i` = `A_ki` over `k in M(i)`.
    pub res_out_agg: Tensor,
    /// `M x N`, row `k` = `A_ki` over `i in S_dn(k)`.
    pub res_dn_agg: Tensor,
    /// `M x D_m` reservoir meta-features (already scaled).
    pub meta: Tensor,
}

impl GraphTensors {
    pub fn new(topology: &NetworkTopology, adjacency: &AdjacencyMatrix, meta: Tensor) -> Result<Self, ModelError> {
        let m = topology.n_reservoirs();
        if meta.rows() != m && !(m == 0 && meta.is_empty()) {
            return Err(ModelError::Shape(format!(
                "meta-features have {} rows for {m} reservoirs",
                meta.rows()
            )));
        }
        let meta = if m == 0 {
            Tensor::zeros(&[0, meta.cols()])
        } else {
            meta
        };
        Ok(Self {
            n_segments: topology.n_segments(),
            n_reservoirs: m,
            seg_agg: adjacency.seg_aggregation(),
            res_in_agg: adjacency.seg_to_res_aggregation(),
            res_out_agg: adjacency.res_to_seg_aggregation(),
            res_dn_agg: adjacency.res_downstream_aggregation(),
            meta,
        })
    }
}

/// A SAG model: parameters plus the routing of each reservoir.
#[derive(Debug, Clone, PartialEq)]
pub struct SagModel {
    pub params: SagParams,
    pub graph: GraphTensors,
    /// One entry per reservoir; empty for the forecaster.
    pub routes: Vec<ReleaseRoute>,
}

/// Parameter handles bound to one tape.
pub struct Bound {
    p: Vec<Option<Var>>,
    ones_n: Var,
    ones_m: Var,
    seg_agg: Var,
    res_in_agg: Var,
    res_out_agg: Var,
    res_dn_agg: Var,
    f1: Var,
    f2: Var,
    sel_se: Option<Var>,
    sel_pp: Option<Var>,
}

impl Bound {
    fn get(&self, id: ParamId) -> Var {
        self.p[id.0].expect("parameter bound")
    }
}

/// Gate activations for one step.
#[derive(Debug, Clone, Copy)]
pub struct Gates {
    pub forget: Var,
    pub input: Var,
    pub reservoir: Var,
    pub segment: Var,
}

/// Recorded values of one step, all `rows x D_h`.
#[derive(Debug, Clone, Copy)]
pub struct StepVars {
    pub c: Var,
    pub r: Var,
    pub h: Var,
    pub a: Var,
    pub p: Var,
    pub q: Var,
    pub gates: Gates,
    pub output_gate: Var,
    pub candidate: Var,
    pub y: Var,
}

/// Which release heads fired during a forward pass.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct RouteTrace {
    pub pp_evaluations: usize,
    pub se_evaluations: usize,
}

fn diag_selector(routes: &[ReleaseRoute], want: ReleaseRoute) -> Tensor {
    let m = routes.len();
    Tensor::from_fn(m, m, |i, j| if i == j && routes[i] == want { 1.0 } else { 0.0 })
}

impl SagModel {
    pub fn new(params: SagParams, graph: GraphTensors, routes: Vec<ReleaseRoute>) -> Result<Self, ModelError> {
        let cfg = &params.config;
        if graph.meta.cols() != cfg.n_meta {
            return Err(ModelError::Shape(format!(
                "meta-features have {} columns, model expects {}",
                graph.meta.cols(),
                cfg.n_meta
            )));
        }
        match cfg.role {
            ModelRole::Forecaster => {
                if !routes.is_empty() {
                    return Err(ModelError::Config("forecaster takes no release routes".into()));
                }
            }
            ModelRole::Main => {
                if routes.len() != graph.n_reservoirs {
                    return Err(ModelError::Config(format!(
                        "{} routes for {} reservoirs",
                        routes.len(),
                        graph.n_reservoirs
                    )));
                }
                let any_pp = routes.contains(&ReleaseRoute::Pp);
                let any_se = routes.contains(&ReleaseRoute::Se);
                if any_pp && !cfg.pp_head {
                    return Err(ModelError::Config("PP route requires the PP head".into()));
                }
                if any_se && cfg.se_inputs.is_none() {
                    return Err(ModelError::Config("SE route requires the SE head".into()));
                }
            }
        }
        Ok(Self { params, graph, routes })
    }

    pub fn hidden(&self) -> usize {
        self.params.config.hidden
    }

    pub fn uses_pp(&self) -> bool {
        self.routes.contains(&ReleaseRoute::Pp)
    }

    pub fn uses_se(&self) -> bool {
        self.routes.contains(&ReleaseRoute::Se)
    }

    fn meta_filter(&self, tape: &mut Tape, p: &[Option<Var>], ids: &MetaFilterIds, ones_m: Var, meta: Var) -> Result<Var, ModelError> {
        let mut x = meta;
        for &(w, b) in &ids.layers {
            let xw = tape.matmul(x, p[w.0].expect("bound"))?;
            let bb = tape.matmul(ones_m, p[b.0].expect("bound"))?;
            let s = tape.add(xw, bb)?;
            x = tape.sigmoid(s);
        }
        Ok(x)
    }

    /// Binds every parameter and constant graph tensor to `tape`.
    pub fn bind(&self, tape: &mut Tape) -> Result<Bound, ModelError> {
        let store = &self.params.store;
        let mut p = vec![None; store.len()];
        for id in store.ids() {
            p[id.0] = Some(tape.param(store, id));
        }
        let g = &self.graph;
        let ones_n = tape.constant(Tensor::full(&[g.n_segments, 1], 1.0));
        let ones_m = tape.constant(Tensor::full(&[g.n_reservoirs, 1], 1.0));
        let seg_agg = tape.constant(g.seg_agg.clone());
        let res_in_agg = tape.constant(g.res_in_agg.clone());
        let res_out_agg = tape.constant(g.res_out_agg.clone());
        let res_dn_agg = tape.constant(g.res_dn_agg.clone());
        let meta = tape.constant(g.meta.clone());
        let ids = &self.params.ids;
        let f1 = self.meta_filter(tape, &p, &ids.f1, ones_m, meta)?;
        let f2 = self.meta_filter(tape, &p, &ids.f2, ones_m, meta)?;
        let (sel_se, sel_pp) = if self.params.config.role == ModelRole::Main && g.n_reservoirs > 0 {
            let se = self
                .uses_se()
                .then(|| tape.constant(diag_selector(&self.routes, ReleaseRoute::Se)));
            let pp = self
                .uses_pp()
                .then(|| tape.constant(diag_selector(&self.routes, ReleaseRoute::Pp)));
            (se, pp)
        } else {
            (None, None)
        };
        Ok(Bound {
            p,
            ones_n,
            ones_m,
            seg_agg,
            res_in_agg,
            res_out_agg,
            res_dn_agg,
            f1,
            f2,
            sel_se,
            sel_pp,
        })
    }

    /// `x W + 1 b`
    fn affine(&self, tape: &mut Tape, ones: Var, x: Var, w: Var, b: Var) -> Result<Var, ModelError> {
        let xw = tape.matmul(x, w)?;
        let bb = tape.matmul(ones, b)?;
        Ok(tape.add(xw, bb)?)
    }

    /// `h W + x U + 1 b`
    fn gate_pre(&self, tape: &mut Tape, bd: &Bound, h: Var, x: Var, w: ParamId, u: ParamId, b: ParamId) -> Result<Var, ModelError> {
        let hw = tape.matmul(h, bd.get(w))?;
        let xu = tape.matmul(x, bd.get(u))?;
        let s = tape.add(hw, xu)?;
        let bb = tape.matmul(bd.ones_n, bd.get(b))?;
        Ok(tape.add(s, bb)?)
    }

    /// r_k^t = tanh(W_r r_k^{t-1} + f1(l_k) ⊙ Σ_{i∈S(k)} A_ik c_i^{t-1} + b_r), all reservoirs at once.
    pub fn reservoir_state(&self, tape: &mut Tape, bd: &Bound, r_prev: Var, c_prev: Var) -> Result<Var, ModelError> {
        let ids = &self.params.ids;
        let rw = tape.matmul(r_prev, bd.get(ids.w_r))?;
        let inflow = tape.matmul(bd.res_in_agg, c_prev)?;
        let filtered = tape.mul(bd.f1, inflow)?;
        let s = tape.add(rw, filtered)?;
        let bb = tape.matmul(bd.ones_m, bd.get(ids.b_r))?;
        let pre = tape.add(s, bb)?;
        Ok(tape.tanh(pre))
    }

    /// p_i^{t-1} = tanh(W_p Σ_{k∈M(i)} A_ki f2(l_k) ⊙ (W_p^r r_k^{t-1} + a_k^{t-1}) + b_p).
    /// With `a_prev = None` this is the forecaster variant without the
    /// release term.
    pub fn transferred_from_reservoirs(&self, tape: &mut Tape, bd: &Bound, r_prev: Var, a_prev: Option<Var>) -> Result<Var, ModelError> {
        let ids = &self.params.ids;
        let mut inner = tape.matmul(r_prev, bd.get(ids.w_p_r))?;
        if let Some(a) = a_prev {
            inner = tape.add(inner, a)?;
        }
        let filtered = tape.mul(bd.f2, inner)?;
        let agg = tape.matmul(bd.res_out_agg, filtered)?;
        let pre = self.affine(tape, bd.ones_n, agg, bd.get(ids.w_p), bd.get(ids.b_p))?;
        Ok(tape.tanh(pre))
    }

    /// q_i^{t-1} = tanh(W_q Σ_{j∈N(i)} A_ji h_j^{t-1} + b_q).
    pub fn transferred_from_segments(&self, tape: &mut Tape, bd: &Bound, h_prev: Var) -> Result<Var, ModelError> {
        let ids = &self.params.ids;
        let agg = tape.matmul(bd.seg_agg, h_prev)?;
        let pre = self.affine(tape, bd.ones_n, agg, bd.get(ids.w_q), bd.get(ids.b_q))?;
        Ok(tape.tanh(pre))
    }

    pub fn compute_gates(&self, tape: &mut Tape, bd: &Bound, h_prev: Var, x: Var, p: Var, q: Var) -> Result<Gates, ModelError> {
        let ids = &self.params.ids;
        let f = self.gate_pre(tape, bd, h_prev, x, ids.w_f_h, ids.u_f_x, ids.b_f)?;
        let i = self.gate_pre(tape, bd, h_prev, x, ids.w_g_h, ids.u_g_x, ids.b_g)?;
        let r = self.gate_pre(tape, bd, p, x, ids.w_r_p, ids.u_r_x, ids.b_gr)?;
        let s = self.gate_pre(tape, bd, q, x, ids.w_s_q, ids.u_s_x, ids.b_s)?;
        Ok(Gates {
            forget: tape.sigmoid(f),
            input: tape.sigmoid(i),
            reservoir: tape.sigmoid(r),
            segment: tape.sigmoid(s),
        })
    }

    /// c̄_i^t = tanh(W_c^h h_i^{t-1} + U_c^x x_i^t + b_c).
    pub fn candidate_state(&self, tape: &mut Tape, bd: &Bound, h_prev: Var, x: Var) -> Result<Var, ModelError> {
        let ids = &self.params.ids;
        let pre = self.gate_pre(tape, bd, h_prev, x, ids.w_c_h, ids.u_c_x, ids.b_c)?;
        Ok(tape.tanh(pre))
    }

    /// c_i^t = tanh(gf ⊙ c^{t-1} + gi ⊙ c̄^t + gr ⊙ p^{t-1} + gs ⊙ q^{t-1}).
    pub fn update_stream_state(&self, tape: &mut Tape, c_prev: Var, gates: &Gates, candidate: Var, p: Var, q: Var) -> Result<Var, ModelError> {
        let a = tape.mul(gates.forget, c_prev)?;
        let b = tape.mul(gates.input, candidate)?;
        let c = tape.mul(gates.reservoir, p)?;
        let d = tape.mul(gates.segment, q)?;
        let ab = tape.add(a, b)?;
        let cd = tape.add(c, d)?;
        let s = tape.add(ab, cd)?;
        Ok(tape.tanh(s))
    }

    /// Returns `(o, h, ŷ)` with o = σ(W_o^h h^{t-1} + U_o^x x^t + b_o),
    /// h = o ⊙ tanh(c), ŷ = V h + c.
    pub fn hidden_and_predict(&self, tape: &mut Tape, bd: &Bound, c: Var, h_prev: Var, x: Var) -> Result<(Var, Var, Var), ModelError> {
        let ids = &self.params.ids;
        let pre = self.gate_pre(tape, bd, h_prev, x, ids.w_o_h, ids.u_o_x, ids.b_o)?;
        let o = tape.sigmoid(pre);
        let tc = tape.tanh(c);
        let h = tape.mul(o, tc)?;
        let y = self.affine(tape, bd.ones_n, h, bd.get(ids.v), bd.get(ids.c))?;
        Ok((o, h, y))
    }

    /// a_k^t = Σ_{i∈S_dn(k)} A_ki W_pp h̃_i^t + b_pp for every reservoir row.
    pub fn pp_release_embedding(&self, tape: &mut Tape, bd: &Bound, anticipated: Var) -> Result<Var, ModelError> {
        let ids = &self.params.ids;
        let (w, b) = ids
            .w_pp
            .zip(ids.b_pp)
            .ok_or_else(|| ModelError::Config("model has no PP head".into()))?;
        let agg = tape.matmul(bd.res_dn_agg, anticipated)?;
        self.affine(tape, bd.ones_m, agg, bd.get(w), bd.get(b))
    }

    /// a_k^t = Z [f_k^t ; u_k^t] + b_se for every reservoir row.
    pub fn se_release_embedding(&self, tape: &mut Tape, bd: &Bound, release: Var) -> Result<Var, ModelError> {
        let ids = &self.params.ids;
        let (z, b) = ids
            .z
            .zip(ids.b_se)
            .ok_or_else(|| ModelError::Config("model has no SE head".into()))?;
        let expected = self.params.config.se_inputs.unwrap_or(0);
        let got = tape.value(release).cols();
        if got != expected {
            return Err(ModelError::Shape(format!(
                "SE input has {got} columns, projection expects {expected}"
            )));
        }
        self.affine(tape, bd.ones_m, release, bd.get(z), bd.get(b))
    }

    /// One synchronous network step. Every cross-node term reads the
    /// previous step's values.
    #[allow(clippy::too_many_arguments)]
    pub fn step(
        &self,
        tape: &mut Tape,
        bd: &Bound,
        prev: [Var; 4],
        x: Var,
        release: Option<Var>,
        anticipated: Option<Var>,
        trace: &mut RouteTrace,
    ) -> Result<StepVars, ModelError> {
        let [c_prev, r_prev, h_prev, a_prev] = prev;
        let main = self.params.config.role == ModelRole::Main;
        let r = self.reservoir_state(tape, bd, r_prev, c_prev)?;
        let p = self.transferred_from_reservoirs(tape, bd, r_prev, main.then_some(a_prev))?;
        let q = self.transferred_from_segments(tape, bd, h_prev)?;
        let gates = self.compute_gates(tape, bd, h_prev, x, p, q)?;
        let candidate = self.candidate_state(tape, bd, h_prev, x)?;
        let c = self.update_stream_state(tape, c_prev, &gates, candidate, p, q)?;
        let (o, h, y) = self.hidden_and_predict(tape, bd, c, h_prev, x)?;

        let a = if main && self.graph.n_reservoirs > 0 {
            let mut a: Option<Var> = None;
            if let Some(sel) = bd.sel_se {
                let rel = release.ok_or(ModelError::MissingReleaseData)?;
                let se = self.se_release_embedding(tape, bd, rel)?;
                a = Some(tape.matmul(sel, se)?);
                trace.se_evaluations += 1;
            }
            if let Some(sel) = bd.sel_pp {
                let ant = anticipated.ok_or(ModelError::MissingCache)?;
                let pp = self.pp_release_embedding(tape, bd, ant)?;
                let routed = tape.matmul(sel, pp)?;
                a = Some(match a {
                    Some(prev) => tape.add(prev, routed)?,
                    None => routed,
                });
                trace.pp_evaluations += 1;
            }
            a.unwrap_or(a_prev)
        } else {
            a_prev
        };

        Ok(StepVars {
            c,
            r,
            h,
            a,
            p,
            q,
            gates,
            output_gate: o,
            candidate,
            y,
        })
    }

    /// Runs `range` of the sequence on `tape`, starting from `init`.
    pub fn forward_steps(
        &self,
        tape: &mut Tape,
        inputs: &SequenceInputs,
        range: Range<usize>,
        init: &CarryState,
    ) -> Result<(Vec<StepVars>, RouteTrace), ModelError> {
        inputs.check(self.graph.n_segments, self.params.config.n_features, range.clone())?;
        let bd = self.bind(tape)?;
        let mut prev = [
            tape.constant(init.tensors[0].clone()),
            tape.constant(init.tensors[1].clone()),
            tape.constant(init.tensors[2].clone()),
            tape.constant(init.tensors[3].clone()),
        ];
        let mut steps = Vec::with_capacity(range.len());
        let mut trace = RouteTrace::default();
        for t in range {
            let x = tape.constant(inputs.drivers[t].clone());
            let release = match (&inputs.release, self.uses_se()) {
                (Some(r), true) => Some(tape.constant(r[t].clone())),
                _ => None,
            };
            let anticipated = match (&inputs.anticipated, self.uses_pp()) {
                (Some(a), true) => Some(tape.constant(a[t].clone())),
                _ => None,
            };
            let s = self.step(tape, &bd, prev, x, release, anticipated, &mut trace)?;
            prev = [s.c, s.r, s.h, s.a];
            steps.push(s);
        }
        Ok((steps, trace))
    }
}

impl Recurrent for SagModel {
    fn store(&self) -> &ParamStore {
        &self.params.store
    }

    fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.params.store
    }

    fn zero_state(&self) -> CarryState {
        let d = self.hidden();
        let (n, m) = (self.graph.n_segments, self.graph.n_reservoirs);
        CarryState {
            tensors: vec![
                Tensor::zeros(&[n, d]),
                Tensor::zeros(&[m, d]),
                Tensor::zeros(&[n, d]),
                Tensor::zeros(&[m, d]),
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
        let (steps, trace) = self.forward_steps(tape, inputs, range, init)?;
        let carry = steps
            .last()
            .map(|s| vec![s.c, s.r, s.h, s.a])
            .unwrap_or_default();
        Ok(WindowOutput {
            predictions: steps.iter().map(|s| s.y).collect(),
            hidden: steps.iter().map(|s| s.h).collect(),
            carry,
            trace,
        })
    }
}
