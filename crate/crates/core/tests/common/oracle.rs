//! Straight-line loop implementation of every cell equation, written from
//! the set definitions, compared against a model step.

#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use sag_core::data::{synth_basin, SynthConfig};
use sag_core::diff::{Tape, Tensor};
use sag_core::graph::{AdjacencyMatrix, NetworkTopology, NodeId, StandardizeScope};
use sag_core::model::{GraphTensors, ModelRole, ReleaseRoute, RouteTrace, SagConfig, SagModel, SagParams};

type Mat = Vec<Vec<f64>>;

fn to_mat(t: &Tensor) -> Mat {
    (0..t.rows()).map(|r| t.row(r).to_vec()).collect()
}

/// Row vector times matrix: `x W`.
fn vecmat(x: &[f64], w: &Mat) -> Vec<f64> {
    let cols = w[0].len();
    (0..cols).map(|b| x.iter().zip(w).map(|(xa, row)| xa * row[b]).sum()).collect()
}

fn add(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x + y).collect()
}

fn hadamard(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x * y).collect()
}

fn scale(a: &[f64], s: f64) -> Vec<f64> {
    a.iter().map(|x| x * s).collect()
}

fn tanh(a: &[f64]) -> Vec<f64> {
    a.iter().map(|x| x.tanh()).collect()
}

fn sigmoid(a: &[f64]) -> Vec<f64> {
    a.iter().map(|x| 1.0 / (1.0 + (-x).exp())).collect()
}

struct P<'a>(&'a SagParams);

impl P<'_> {
    fn m(&self, name: &str) -> Mat {
        to_mat(&self.0.store.by_name(name).unwrap_or_else(|| panic!("{name}")).value)
    }

    fn b(&self, name: &str) -> Vec<f64> {
        self.m(name)[0].clone()
    }

    /// `h W + x U + b`
    fn gate(&self, h: &[f64], x: &[f64], w: &str, u: &str, b: &str) -> Vec<f64> {
        add(&add(&vecmat(h, &self.m(w)), &vecmat(x, &self.m(u))), &self.b(b))
    }

    fn filter(&self, prefix: &str, meta: &[f64]) -> Vec<f64> {
        sigmoid(&add(&vecmat(meta, &self.m(&format!("{prefix}.0.w"))), &self.b(&format!("{prefix}.0.b"))))
    }
}

/// Largest deviation seen so far and where it happened.
#[derive(Debug, Default, Clone)]
pub struct Deviation {
    pub max_abs: f64,
    pub at: String,
}

impl Deviation {
    fn record(&mut self, label: &str, case: usize, got: &Tensor, want: &Mat) {
        assert_eq!(got.rows(), want.len(), "case {case} {label} rows");
        for (r, row) in want.iter().enumerate() {
            assert_eq!(got.cols(), row.len(), "case {case} {label} cols");
            for (c, &w) in row.iter().enumerate() {
                let e = (got.get(r, c) - w).abs();
                if !(e <= self.max_abs) {
                    self.max_abs = e;
                    self.at = format!("case {case} {label}[{r},{c}]");
                }
            }
        }
    }
}

pub fn random(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    Tensor::from_fn(rows, cols, |_, _| rng.random_range(-1.5..1.5))
}

pub fn case_topology(case: usize) -> NetworkTopology {
    synth_basin(&SynthConfig {
        n_segments: 6 + case % 5,
        n_reservoirs: 2,
        n_days: 10,
        seed: case as u64,
        ..SynthConfig::default()
    })
    .unwrap()
    .topology
}

/// Runs one random case through the model step and the loop oracle.
pub fn oracle_case(case: usize) -> Deviation {
    let mut dev = Deviation::default();
    {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + case as u64);
        let topo = case_topology(case);
        let adj = AdjacencyMatrix::compute(&topo, StandardizeScope::Global);
        let (n, m) = (topo.n_segments(), topo.n_reservoirs());
        let (d, dx, dm, se_cols) = (4, 3, 2, 3);

        let meta = random(&mut rng, m, dm);
        let graph = GraphTensors::new(&topo, &adj, meta.clone()).unwrap();
        let config = SagConfig {
            hidden: d,
            n_features: dx,
            n_meta: dm,
            meta_layers: 1,
            role: ModelRole::Main,
            pp_head: true,
            se_inputs: Some(se_cols),
        };
        let mut params = SagParams::init(config, case as u64).unwrap();
        // non-zero biases so every term is exercised
        for p in params.store.iter_mut() {
            if p.name.starts_with('b') || p.name.ends_with(".b") || p.name == "c" {
                for v in p.value.data_mut() {
                    *v = rng.random_range(-0.5..0.5);
                }
            }
        }
        let routes = vec![ReleaseRoute::Se, ReleaseRoute::Pp];
        let model = SagModel::new(params, graph, routes.clone()).unwrap();

        let c_prev = random(&mut rng, n, d);
        let r_prev = random(&mut rng, m, d);
        let h_prev = random(&mut rng, n, d);
        let a_prev = random(&mut rng, m, d);
        let x = random(&mut rng, n, dx);
        let release = random(&mut rng, m, se_cols);
        let anticipated = random(&mut rng, n, d);

        let mut tape = Tape::new();
        let bd = model.bind(&mut tape).unwrap();
        let prev = [
            tape.constant(c_prev.clone()),
            tape.constant(r_prev.clone()),
            tape.constant(h_prev.clone()),
            tape.constant(a_prev.clone()),
        ];
        let xv = tape.constant(x.clone());
        let rv = tape.constant(release.clone());
        let av = tape.constant(anticipated.clone());
        let mut trace = RouteTrace::default();
        let s = model.step(&mut tape, &bd, prev, xv, Some(rv), Some(av), &mut trace).unwrap();

        let p = P(&model.params);
        let (c0, r0, h0, a0, xs) = (to_mat(&c_prev), to_mat(&r_prev), to_mat(&h_prev), to_mat(&a_prev), to_mat(&x));
        let metas = to_mat(&meta);
        let seg = NodeId::segment;
        let res = NodeId::reservoir;

        // reservoir state
        let r_want: Mat = (0..m)
            .map(|k| {
                let mut inflow = vec![0.0; d];
                for &i in topo.upstream_segments_of_reservoir(k) {
                    inflow = add(&inflow, &scale(&c0[i], adj.weight(seg(i), res(k))));
                }
                let filtered = hadamard(&p.filter("f1", &metas[k]), &inflow);
                tanh(&add(&add(&vecmat(&r0[k], &p.m("w_r")), &filtered), &p.b("b_r")))
            })
            .collect();
        dev.record("r", case, tape.value(s.r), &r_want);

        // information transferred from reservoirs
        let p_want: Mat = (0..n)
            .map(|i| {
                let mut agg = vec![0.0; d];
                for &k in topo.upstream_reservoirs_of_segment(i) {
                    let inner = add(&vecmat(&r0[k], &p.m("w_p_r")), &a0[k]);
                    let term = hadamard(&p.filter("f2", &metas[k]), &inner);
                    agg = add(&agg, &scale(&term, adj.weight(res(k), seg(i))));
                }
                tanh(&add(&vecmat(&agg, &p.m("w_p")), &p.b("b_p")))
            })
            .collect();
        dev.record("p", case, tape.value(s.p), &p_want);

        // information transferred from upstream segments
        let q_want: Mat = (0..n)
            .map(|i| {
                let mut agg = vec![0.0; d];
                for &j in topo.upstream_segments_of_segment(i) {
                    agg = add(&agg, &scale(&h0[j], adj.weight(seg(j), seg(i))));
                }
                tanh(&add(&vecmat(&agg, &p.m("w_q")), &p.b("b_q")))
            })
            .collect();
        dev.record("q", case, tape.value(s.q), &q_want);

        let mut c_want = Mat::new();
        let mut o_want = Mat::new();
        let mut h_want = Mat::new();
        let mut y_want = Mat::new();
        let mut gates_want = [Mat::new(), Mat::new(), Mat::new(), Mat::new()];
        let mut cand_want = Mat::new();
        for i in 0..n {
            let gf = sigmoid(&p.gate(&h0[i], &xs[i], "w_f_h", "u_f_x", "b_f"));
            let gi = sigmoid(&p.gate(&h0[i], &xs[i], "w_g_h", "u_g_x", "b_g"));
            let gr = sigmoid(&p.gate(&p_want[i], &xs[i], "w_r_p", "u_r_x", "b_gr"));
            let gs = sigmoid(&p.gate(&q_want[i], &xs[i], "w_s_q", "u_s_x", "b_s"));
            let cand = tanh(&p.gate(&h0[i], &xs[i], "w_c_h", "u_c_x", "b_c"));
            let c = tanh(&add(
                &add(&hadamard(&gf, &c0[i]), &hadamard(&gi, &cand)),
                &add(&hadamard(&gr, &p_want[i]), &hadamard(&gs, &q_want[i])),
            ));
            let o = sigmoid(&p.gate(&h0[i], &xs[i], "w_o_h", "u_o_x", "b_o"));
            let h = hadamard(&o, &tanh(&c));
            let y = add(&vecmat(&h, &p.m("v")), &p.b("c"));
            for (slot, g) in gates_want.iter_mut().zip([gf, gi, gr, gs]) {
                slot.push(g);
            }
            cand_want.push(cand);
            c_want.push(c);
            o_want.push(o);
            h_want.push(h);
            y_want.push(y);
        }
        dev.record("forget", case, tape.value(s.gates.forget), &gates_want[0]);
        dev.record("input", case, tape.value(s.gates.input), &gates_want[1]);
        dev.record("reservoir gate", case, tape.value(s.gates.reservoir), &gates_want[2]);
        dev.record("segment gate", case, tape.value(s.gates.segment), &gates_want[3]);
        dev.record("candidate", case, tape.value(s.candidate), &cand_want);
        dev.record("c", case, tape.value(s.c), &c_want);
        dev.record("o", case, tape.value(s.output_gate), &o_want);
        dev.record("h", case, tape.value(s.h), &h_want);
        dev.record("y", case, tape.value(s.y), &y_want);

        // release embeddings: reservoir 0 on SE, reservoir 1 on PP
        let rel = to_mat(&release);
        let ant = to_mat(&anticipated);
        let se = add(&vecmat(&rel[0], &p.m("z")), &p.b("b_se"));
        let mut agg = vec![0.0; d];
        for &i in topo.downstream_segments_of_reservoir(1) {
            agg = add(&agg, &scale(&ant[i], adj.weight(res(1), seg(i))));
        }
        let pp = add(&vecmat(&agg, &p.m("w_pp")), &p.b("b_pp"));
        dev.record("a", case, tape.value(s.a), &vec![se, pp]);
        assert_eq!(trace.se_evaluations, 1);
        assert_eq!(trace.pp_evaluations, 1);
    }
    dev
}
