//! PGD on groups of neurons that share a displacement from initialisation.
//!
//! Two neurons with the same output sign and the same activation pattern on
//! every sample at every iterate so far receive identical gradients, so if
//! they start from the same displacement they keep sharing it. A group
//! stores the displacement `Δ`, the sums of its members' initial rows and
//! reference rows, its current and initial patterns, and per sample the
//! member preactivation `W_j(0)ᵀx_i` closest to the kink on the active (or
//! inactive) side. When `Δ` pushes a member across the kink the group is
//! split by the members' new patterns.
//!
//! Per iteration the work is `groups × n × d` rather than `m × n × d`.

use std::collections::HashMap;

use super::{Engine, Recorder, Targets, TrainConfig, TrainTrace};
use crate::dataio::LabeledDataset;
use crate::error::{Error, Result};
use crate::linalg::{dot, Matrix};
use crate::model::{summation_order, NetworkParams};

struct Group {
    sign: f64,
    members: Vec<u32>,
    delta: Vec<f64>,
    /// `Σ_j W_j(0)ᵀx_i`.
    init_dot: Vec<f64>,
    /// `Σ_j U_jᵀx_i`.
    u_dot: Vec<f64>,
    /// `Σ_j U_j`.
    u_sum: Vec<f64>,
    /// `Σ_j ‖U_j‖²`.
    u_sq: f64,
    active: Vec<bool>,
    active0: Vec<bool>,
    /// Per sample: min `W_j(0)ᵀx_i` over members if active, max if inactive.
    edge: Vec<f64>,
}

struct Shared<'a> {
    n: usize,
    d: usize,
    x: &'a Matrix,
    init: &'a Matrix,
    u: Option<&'a Matrix>,
    groups: Vec<Group>,
}

fn pattern_key(sign: f64, bits: impl Iterator<Item = bool>, n: usize) -> Vec<u64> {
    let mut key = vec![0u64; 1 + n.div_ceil(64)];
    key[0] = u64::from(sign > 0.0);
    for (i, b) in bits.enumerate() {
        if b {
            key[1 + i / 64] |= 1 << (i % 64);
        }
    }
    key
}

/// Number of (sign, initial pattern) classes; the shared engine starts from these.
pub fn count_initial_groups(params: &NetworkParams, ds: &LabeledDataset) -> usize {
    let n = ds.n();
    let mut seen: HashMap<Vec<u64>, ()> = HashMap::new();
    for (j, w0) in params.init_weights.iter_rows().enumerate() {
        let key = pattern_key(params.out_signs[j], ds.inputs.iter_rows().map(|x| dot(w0, x) >= 0.0), n);
        seen.insert(key, ());
    }
    seen.len()
}

impl<'a> Shared<'a> {
    fn new(params: &'a NetworkParams, ds: &'a LabeledDataset, u: Option<&'a Matrix>) -> Self {
        let (n, d) = (ds.n(), ds.d());
        let mut index: HashMap<Vec<u64>, usize> = HashMap::new();
        let mut buckets: Vec<(f64, Vec<bool>, Vec<u32>)> = Vec::new();
        // mirrored partners land in adjacent groups, keeping the output sum
        // at initialisation exactly zero
        for j in summation_order(&params.out_signs) {
            let w0 = params.init_weights.row(j);
            let bits: Vec<bool> = ds.inputs.iter_rows().map(|x| dot(w0, x) >= 0.0).collect();
            let sign = params.out_signs[j];
            let key = pattern_key(sign, bits.iter().copied(), n);
            let g = *index.entry(key).or_insert_with(|| {
                buckets.push((sign, bits, Vec::new()));
                buckets.len() - 1
            });
            buckets[g].2.push(j as u32);
        }
        let mut s = Shared {
            n,
            d,
            x: &ds.inputs,
            init: &params.init_weights,
            u,
            groups: Vec::with_capacity(buckets.len()),
        };
        for (sign, bits, members) in buckets {
            let g = s.make_group(sign, members, vec![0.0; d], bits.clone(), bits);
            s.groups.push(g);
        }
        s
    }

    fn make_group(&self, sign: f64, members: Vec<u32>, delta: Vec<f64>, active: Vec<bool>, active0: Vec<bool>) -> Group {
        let (n, d) = (self.n, self.d);
        let mut init_dot = vec![0.0; n];
        let mut u_dot = vec![0.0; n];
        let mut u_sum = vec![0.0; d];
        let mut u_sq = 0.0;
        let mut edge: Vec<f64> = active
            .iter()
            .map(|&a| if a { f64::INFINITY } else { f64::NEG_INFINITY })
            .collect();
        for &j in &members {
            let w0 = self.init.row(j as usize);
            for (i, x) in self.x.iter_rows().enumerate() {
                let k = dot(w0, x);
                init_dot[i] += k;
                edge[i] = if active[i] { edge[i].min(k) } else { edge[i].max(k) };
            }
            if let Some(u) = self.u {
                let uj = u.row(j as usize);
                for (s, v) in u_sum.iter_mut().zip(uj) {
                    *s += v;
                }
                u_sq += dot(uj, uj);
                for (i, x) in self.x.iter_rows().enumerate() {
                    u_dot[i] += dot(uj, x);
                }
            }
        }
        Group {
            sign,
            members,
            delta,
            init_dot,
            u_dot,
            u_sum,
            u_sq,
            active,
            active0,
            edge,
        }
    }

    /// Splits every group whose members no longer share a pattern under the
    /// current displacements; `theta[g·n + i] = Δ_gᵀx_i`.
    fn refresh(&mut self, theta: &mut Vec<f64>) {
        let n = self.n;
        let mut g = 0;
        while g < self.groups.len() {
            let consistent = {
                let gr = &self.groups[g];
                (0..n).all(|i| {
                    let th = theta[g * n + i];
                    if gr.active[i] {
                        gr.edge[i] + th >= 0.0
                    } else {
                        gr.edge[i] + th < 0.0
                    }
                })
            };
            if !consistent {
                self.split(g, theta);
            }
            g += 1;
        }
    }

    fn split(&mut self, g: usize, theta: &mut Vec<f64>) {
        let n = self.n;
        let old = std::mem::take(&mut self.groups[g].members);
        let th: Vec<f64> = theta[g * n..(g + 1) * n].to_vec();
        let mut index: HashMap<Vec<u64>, usize> = HashMap::new();
        let mut parts: Vec<(Vec<bool>, Vec<u32>)> = Vec::new();
        for j in old {
            let w0 = self.init.row(j as usize);
            let bits: Vec<bool> = self.x.iter_rows().zip(&th).map(|(x, t)| dot(w0, x) + t >= 0.0).collect();
            let key = pattern_key(1.0, bits.iter().copied(), n);
            let p = *index.entry(key).or_insert_with(|| {
                parts.push((bits, Vec::new()));
                parts.len() - 1
            });
            parts[p].1.push(j);
        }
        let (sign, delta, active0) = {
            let gr = &self.groups[g];
            (gr.sign, gr.delta.clone(), gr.active0.clone())
        };
        let mut first = true;
        for (bits, members) in parts {
            let grp = self.make_group(sign, members, delta.clone(), bits, active0.clone());
            if first {
                self.groups[g] = grp;
                first = false;
            } else {
                self.groups.push(grp);
                theta.extend_from_slice(&th);
            }
        }
    }

    fn thetas(&self) -> Vec<f64> {
        let mut theta = Vec::with_capacity(self.groups.len() * self.n);
        for gr in &self.groups {
            theta.extend(self.x.iter_rows().map(|x| dot(&gr.delta, x)));
        }
        theta
    }

    fn dev2(&self, scale: f64) -> f64 {
        self.groups
            .iter()
            .map(|gr| {
                let c = gr.members.len() as f64;
                let v = c * dot(&gr.delta, &gr.delta) - 2.0 * scale * dot(&gr.delta, &gr.u_sum) + scale * scale * gr.u_sq;
                v.max(0.0)
            })
            .sum()
    }
}

pub(crate) fn run(params0: &NetworkParams, ds: &LabeledDataset, targets: Targets<'_>, cfg: &TrainConfig) -> Result<TrainTrace> {
    if params0.weights != params0.init_weights {
        return Err(Error::InvalidArgument("the shared engine starts from W = W(0)".into()));
    }
    let (m, n, d) = (params0.width(), ds.n(), ds.d());
    let reference = cfg.record_reference.as_ref();
    let scale = reference.map_or(0.0, |r| r.scale);
    let mut st = Shared::new(params0, ds, reference.map(|r| &r.u));
    let inv_sqrt_m = 1.0 / (m as f64).sqrt();
    let bound = cfg.row_bound(m);
    let mut rec = Recorder::new(targets, cfg);
    let mut theta = st.thetas();

    for t in 0..cfg.iters {
        st.refresh(&mut theta);
        let mut fs = vec![0.0; n];
        let mut ref_fs = vec![0.0; n];
        let mut flips = vec![0usize; n];
        for (g, gr) in st.groups.iter().enumerate() {
            let c = gr.members.len() as f64;
            for i in 0..n {
                if gr.active[i] {
                    fs[i] += gr.sign * (gr.init_dot[i] + c * theta[g * n + i]);
                    ref_fs[i] += gr.sign * (gr.init_dot[i] + scale * gr.u_dot[i]);
                }
                if gr.active[i] != gr.active0[i] {
                    flips[i] += gr.members.len();
                }
            }
        }
        for v in fs.iter_mut().chain(ref_fs.iter_mut()) {
            *v *= inv_sqrt_m;
        }
        let ref_out = reference.map(|_| ref_fs.as_slice());
        let pushed = rec.push(
            t,
            &fs,
            ref_out,
            reference.map(|_| st.dev2(scale).sqrt()),
            cfg.record_flips.then(|| flips.iter().copied().max().unwrap_or(0)),
        );
        if let Err(t) = pushed {
            let partial = rec.finish(materialize(params0, &st)?, None, cfg, Engine::Shared);
            return Err(Error::NonFiniteRisk {
                t,
                partial: Box::new(partial),
            });
        }
        if rec.exhausted() {
            break;
        }

        let coef: Vec<f64> = targets.output_grads(&fs).into_iter().map(|g| g / n as f64).collect();
        let mut clipped = 0;
        for gr in st.groups.iter_mut() {
            let mut grad = vec![0.0; d];
            for (i, x) in ds.inputs.iter_rows().enumerate() {
                if gr.active[i] {
                    for (a, b) in grad.iter_mut().zip(x) {
                        *a += coef[i] * b;
                    }
                }
            }
            let a = gr.sign * inv_sqrt_m;
            if let Some(col) = grad.iter().position(|v| !(a * v).is_finite()) {
                return Err(Error::NonFiniteGradient {
                    row: gr.members[0] as usize,
                    col,
                });
            }
            for (dk, gk) in gr.delta.iter_mut().zip(&grad) {
                *dk -= cfg.eta * (a * gk);
            }
            if bound.is_finite() {
                let dn = dot(&gr.delta, &gr.delta).sqrt();
                if dn > bound {
                    let s = bound / dn;
                    for v in gr.delta.iter_mut() {
                        *v *= s;
                    }
                    clipped += gr.members.len();
                }
            }
        }
        rec.set_clipped(clipped);
        theta = st.thetas();
    }

    st.refresh(&mut theta);
    let final_dev = reference.map(|_| st.dev2(scale).sqrt());
    Ok(rec.finish(materialize(params0, &st)?, final_dev, cfg, Engine::Shared))
}

fn materialize(params0: &NetworkParams, st: &Shared<'_>) -> Result<NetworkParams> {
    let mut w = params0.init_weights.clone();
    for gr in &st.groups {
        for &j in &gr.members {
            for (wk, dk) in w.row_mut(j as usize).iter_mut().zip(&gr.delta) {
                *wk += dk;
            }
        }
    }
    params0.with_weights(w)
}
