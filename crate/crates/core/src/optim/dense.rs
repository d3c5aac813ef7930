//! Row-stored PGD, parallel over fixed chunks of neurons.

use super::{project_in_place, Engine, Recorder, StepView, Targets, TrainConfig, TrainTrace};
use crate::dataio::LabeledDataset;
use crate::error::{Error, Result};
use crate::linalg::{axpy, dot, Matrix};
use crate::model::{self, NetworkParams};
use crate::par::{self, CHUNK};

// Rows handled together so each sample is streamed once per block.
const BLOCK: usize = 8;

struct ChunkSummary {
    outputs: Vec<f64>,
    ref_outputs: Vec<f64>,
    flips: Vec<usize>,
    dev2: f64,
}

struct Fixed<'a> {
    n: usize,
    d: usize,
    x: &'a Matrix,
    signs: &'a [f64],
    init: &'a Matrix,
    inv_sqrt_m: f64,
    order: Vec<usize>,
    /// `W_j(0)ᵀx_i`, neuron-major.
    pre0: Option<Vec<f64>>,
    /// `W̄_jᵀx_i`, neuron-major.
    ref_pre: Option<Vec<f64>>,
    w_bar: Option<&'a Matrix>,
}

fn preactivations(w: &Matrix, x: &Matrix) -> Vec<f64> {
    let (m, n, d) = (w.rows(), x.rows(), w.cols());
    let parts = par::map_range(m.div_ceil(CHUNK), |k| {
        let r1 = ((k + 1) * CHUNK).min(m);
        let wc = &w.as_slice()[k * CHUNK * d..r1 * d];
        let mut pc = vec![0.0; (r1 - k * CHUNK) * n];
        fill_pre(&mut pc, wc, x);
        pc
    });
    parts.concat()
}

// pre rows for the weights in `wc` (row-major), blocked over samples.
fn fill_pre(pc: &mut [f64], wc: &[f64], x: &Matrix) {
    let (n, d) = (x.rows(), x.cols());
    let rows = wc.len() / d.max(1);
    for b0 in (0..rows).step_by(BLOCK) {
        let b1 = (b0 + BLOCK).min(rows);
        for (i, xi) in x.iter_rows().enumerate() {
            for j in b0..b1 {
                pc[j * n + i] = dot(&wc[j * d..(j + 1) * d], xi);
            }
        }
    }
}

impl Fixed<'_> {
    fn summarize(&self, w: &Matrix, pre: &[f64], want_flips: bool) -> ChunkSummary {
        let n = self.n;
        let m = self.signs.len();
        let chunks = m.div_ceil(CHUNK);
        let parts = par::map_range(chunks, |k| {
            let r0 = k * CHUNK;
            let r1 = (r0 + CHUNK).min(m);
            let mut s = ChunkSummary {
                outputs: vec![0.0; n],
                ref_outputs: if self.ref_pre.is_some() { vec![0.0; n] } else { Vec::new() },
                flips: if want_flips { vec![0; n] } else { Vec::new() },
                dev2: 0.0,
            };
            for &j in &self.order[r0..r1] {
                let a = self.signs[j];
                let row = &pre[j * n..(j + 1) * n];
                for (o, &z) in s.outputs.iter_mut().zip(row) {
                    if z >= 0.0 {
                        *o += a * z;
                    }
                }
                if let Some(rp) = &self.ref_pre {
                    let rrow = &rp[j * n..(j + 1) * n];
                    for ((o, &z), &r) in s.ref_outputs.iter_mut().zip(row).zip(rrow) {
                        if z >= 0.0 {
                            *o += a * r;
                        }
                    }
                }
                if want_flips {
                    let p0 = &self.pre0.as_ref().expect("initial preactivations")[j * n..(j + 1) * n];
                    for ((c, &z), &z0) in s.flips.iter_mut().zip(row).zip(p0) {
                        *c += usize::from((z > 0.0) != (z0 > 0.0));
                    }
                }
                if let Some(wb) = self.w_bar {
                    s.dev2 += w
                        .row(j)
                        .iter()
                        .zip(wb.row(j))
                        .map(|(p, q)| (p - q) * (p - q))
                        .sum::<f64>();
                }
            }
            s
        });
        let mut total = ChunkSummary {
            outputs: vec![0.0; n],
            ref_outputs: if self.ref_pre.is_some() { vec![0.0; n] } else { Vec::new() },
            flips: if want_flips { vec![0; n] } else { Vec::new() },
            dev2: 0.0,
        };
        for p in parts {
            for (a, b) in total.outputs.iter_mut().zip(&p.outputs) {
                *a += b;
            }
            for (a, b) in total.ref_outputs.iter_mut().zip(&p.ref_outputs) {
                *a += b;
            }
            for (a, b) in total.flips.iter_mut().zip(&p.flips) {
                *a += b;
            }
            total.dev2 += p.dev2;
        }
        for v in total.outputs.iter_mut().chain(total.ref_outputs.iter_mut()) {
            *v *= self.inv_sqrt_m;
        }
        total
    }
}

/// Outcome of one chunk's step.
#[derive(Default)]
struct StepStats {
    clipped: usize,
    bad: Option<(usize, usize)>,
}

#[allow(clippy::too_many_arguments)]
fn step_chunk(
    k: usize,
    wc: &mut [f64],
    pc: &mut [f64],
    coef: &[f64],
    fx: &Fixed<'_>,
    eta: f64,
    bound: f64,
) -> StepStats {
    let (n, d) = (fx.n, fx.d);
    let rows = wc.len() / d.max(1);
    let r0 = k * CHUNK;
    let mut st = StepStats::default();
    let mut grad = vec![0.0; BLOCK * d];
    for b0 in (0..rows).step_by(BLOCK) {
        let b1 = (b0 + BLOCK).min(rows);
        grad[..(b1 - b0) * d].fill(0.0);
        for (i, xi) in fx.x.iter_rows().enumerate() {
            let c = coef[i];
            if c == 0.0 {
                continue;
            }
            for j in b0..b1 {
                if pc[j * n + i] > 0.0 {
                    axpy(c, xi, &mut grad[(j - b0) * d..(j - b0 + 1) * d]);
                }
            }
        }
        for j in b0..b1 {
            let gj = &mut grad[(j - b0) * d..(j - b0 + 1) * d];
            let a = fx.signs[r0 + j] * fx.inv_sqrt_m;
            for g in gj.iter_mut() {
                *g *= a;
            }
            if st.bad.is_none() {
                if let Some(col) = gj.iter().position(|g| !g.is_finite()) {
                    st.bad = Some((r0 + j, col));
                }
            }
            let row = &mut wc[j * d..(j + 1) * d];
            axpy(-eta, gj, row);
            st.clipped += usize::from(project_in_place(row, fx.init.row(r0 + j), bound));
        }
        for (i, xi) in fx.x.iter_rows().enumerate() {
            for j in b0..b1 {
                pc[j * n + i] = dot(&wc[j * d..(j + 1) * d], xi);
            }
        }
    }
    st
}

pub(crate) fn run(
    params0: &NetworkParams,
    ds: &LabeledDataset,
    targets: Targets<'_>,
    cfg: &TrainConfig,
    observer: &mut dyn FnMut(&StepView<'_>),
) -> Result<TrainTrace> {
    let (m, n, d) = (params0.width(), ds.n(), ds.d());
    let x = &ds.inputs;
    let mut w = params0.weights.clone();
    let mut pre = preactivations(&w, x);
    let pre0 = cfg.record_flips.then(|| {
        if params0.weights == params0.init_weights {
            pre.clone()
        } else {
            preactivations(&params0.init_weights, x)
        }
    });
    let w_bar = cfg.record_reference.as_ref().map(|r| &r.w_bar);
    let fx = Fixed {
        n,
        d,
        x,
        signs: &params0.out_signs,
        init: &params0.init_weights,
        inv_sqrt_m: 1.0 / (m as f64).sqrt(),
        order: model::summation_order(&params0.out_signs),
        pre0,
        ref_pre: w_bar.map(|wb| preactivations(wb, x)),
        w_bar,
    };
    let bound = cfg.row_bound(m);
    let mut rec = Recorder::new(targets, cfg);

    for t in 0..cfg.iters {
        let s = fx.summarize(&w, &pre, cfg.record_flips);
        let ref_outputs = fx.ref_pre.as_ref().map(|_| s.ref_outputs.as_slice());
        let pushed = rec.push(
            t,
            &s.outputs,
            ref_outputs,
            w_bar.map(|_| s.dev2.sqrt()),
            cfg.record_flips.then(|| s.flips.iter().copied().max().unwrap_or(0)),
        );
        if let Err(t) = pushed {
            let partial = rec.finish(params0.with_weights(w)?, None, cfg, Engine::Dense);
            return Err(Error::NonFiniteRisk {
                t,
                partial: Box::new(partial),
            });
        }
        observer(&StepView {
            t,
            weights: &w,
            pre: &pre,
            outputs: &s.outputs,
            ref_outputs,
        });
        if rec.exhausted() {
            break;
        }

        let inv_n = 1.0 / n as f64;
        let coef: Vec<f64> = targets.output_grads(&s.outputs).into_iter().map(|g| g * inv_n).collect();
        let stats = par::map_chunks2_mut(w.as_mut_slice(), CHUNK * d, &mut pre, CHUNK * n, |k, wc, pc| {
            step_chunk(k, wc, pc, &coef, &fx, cfg.eta, bound)
        });
        if let Some((row, col)) = stats.iter().find_map(|s| s.bad) {
            return Err(Error::NonFiniteGradient { row, col });
        }
        rec.set_clipped(stats.iter().map(|s| s.clipped).sum());
    }

    let final_dev = w_bar.map(|_| fx.summarize(&w, &pre, false).dev2.sqrt());
    let final_params = params0.with_weights(w)?;
    Ok(rec.finish(final_params, final_dev, cfg, Engine::Dense))
}
