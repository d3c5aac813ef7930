//! The two-layer ReLU student `f(x) = (1/√m) Σ_j a_j·ReLU(W_jᵀx)` with fixed
//! output signs `a`.
//!
//! Kink conventions: outputs and activation patterns count `W_jᵀx ≥ 0` as
//! active; gradients and flip sets use `W_jᵀx > 0`.

use std::io::{Read, Write};
use std::path::Path;

use rand::Rng as _;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::linalg::{dot, Matrix};
use crate::rng::{substream, Stream};

#[derive(Debug, Clone, PartialEq)]
pub struct NetworkParams {
    /// `a`, entries `±1`.
    pub out_signs: Vec<f64>,
    /// `W(t)`, `m × d`.
    pub weights: Matrix,
    /// `W(0)`, kept for projection, flip sets and reference weights.
    pub init_weights: Matrix,
}

impl NetworkParams {
    pub fn width(&self) -> usize {
        self.out_signs.len()
    }

    pub fn dim(&self) -> usize {
        self.weights.cols()
    }

    /// Checks the shape and pairing invariants of a symmetric initialisation.
    pub fn check_symmetric(&self) -> Result<()> {
        let m = self.width();
        if !m.is_multiple_of(2) {
            return Err(Error::OddWidth(m));
        }
        if self.weights.rows() != m || !self.weights.same_shape(&self.init_weights) {
            return Err(Error::Shape("weights do not match the width".into()));
        }
        let h = m / 2;
        for j in 0..h {
            if self.out_signs[j] != -self.out_signs[j + h] || self.init_weights.row(j) != self.init_weights.row(j + h) {
                return Err(Error::InvalidArgument(format!("neurons {j} and {} are not mirrored", j + h)));
            }
        }
        Ok(())
    }

    /// Same signs and initial weights, current weights replaced.
    pub fn with_weights(&self, weights: Matrix) -> Result<Self> {
        if !weights.same_shape(&self.init_weights) {
            return Err(Error::Shape("replacement weights have the wrong shape".into()));
        }
        Ok(NetworkParams {
            out_signs: self.out_signs.clone(),
            weights,
            init_weights: self.init_weights.clone(),
        })
    }
}

/// `a_j = −a_{j+m/2} ~ Unif{±1}`, `W_j(0) = W_{j+m/2}(0) ~ N(0, I_d)`, `W = W(0)`.
pub fn init_symmetric(m: usize, d: usize, seed: u64) -> Result<NetworkParams> {
    if !m.is_multiple_of(2) {
        return Err(Error::OddWidth(m));
    }
    if m == 0 || d == 0 {
        return Err(Error::InvalidArgument(format!("width {m} and dimension {d} must be positive")));
    }
    let h = m / 2;
    let mut rng = substream(seed, Stream::Init, 0);
    let mut signs = vec![0.0; m];
    let mut w0 = Matrix::zeros(m, d);
    for j in 0..h {
        let s = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
        signs[j] = s;
        signs[j + h] = -s;
        for k in 0..d {
            let g: f64 = rng.sample(StandardNormal);
            w0.row_mut(j)[k] = g;
            w0.row_mut(j + h)[k] = g;
        }
    }
    Ok(NetworkParams {
        out_signs: signs,
        weights: w0.clone(),
        init_weights: w0,
    })
}

fn check_dim(params: &NetworkParams, x: &[f64]) -> Result<()> {
    if x.len() != params.dim() {
        return Err(Error::Shape(format!("input has {} entries, network expects {}", x.len(), params.dim())));
    }
    Ok(())
}

/// Network output on one input.
pub fn forward(params: &NetworkParams, x: &[f64]) -> Result<f64> {
    check_dim(params, x)?;
    Ok(forward_weights(&params.weights, &params.out_signs, x))
}

pub(crate) fn forward_weights(w: &Matrix, signs: &[f64], x: &[f64]) -> f64 {
    let m = signs.len();
    let s: f64 = summation_order(signs)
        .into_iter()
        .map(|j| {
            let z = dot(w.row(j), x);
            if z >= 0.0 {
                signs[j] * z
            } else {
                0.0
            }
        })
        .sum();
    s / (m as f64).sqrt()
}

/// Neuron order for output sums. When neuron `j + m/2` carries the opposite
/// sign of `j`, partners are visited back to back so that a network still
/// at its symmetric initialisation sums to exactly zero.
pub(crate) fn summation_order(signs: &[f64]) -> Vec<usize> {
    let m = signs.len();
    let h = m / 2;
    let mirrored = m.is_multiple_of(2) && (0..h).all(|j| signs[j] == -signs[j + h]);
    if mirrored {
        (0..h).flat_map(|j| [j, j + h]).collect()
    } else {
        (0..m).collect()
    }
}

/// Outputs on every row of `inputs`.
pub fn forward_batch(params: &NetworkParams, inputs: &Matrix) -> Result<Vec<f64>> {
    if inputs.cols() != params.dim() {
        return Err(Error::Shape("input dimension mismatch".into()));
    }
    Ok(inputs
        .iter_rows()
        .map(|x| forward_weights(&params.weights, &params.out_signs, x))
        .collect())
}

/// Activation bits `1(W_jᵀx_i ≥ 0)`, stored sample-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ActivationPattern {
    n: usize,
    m: usize,
    bits: Vec<bool>,
}

impl ActivationPattern {
    pub fn of(weights: &Matrix, inputs: &Matrix) -> Result<Self> {
        if weights.cols() != inputs.cols() {
            return Err(Error::Shape("weights and inputs disagree on dimension".into()));
        }
        let (n, m) = (inputs.rows(), weights.rows());
        let mut bits = Vec::with_capacity(n * m);
        for x in inputs.iter_rows() {
            bits.extend(weights.iter_rows().map(|w| dot(w, x) >= 0.0));
        }
        Ok(ActivationPattern { n, m, bits })
    }

    pub fn samples(&self) -> usize {
        self.n
    }

    pub fn width(&self) -> usize {
        self.m
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> bool {
        self.bits[i * self.m + j]
    }

    pub fn row(&self, i: usize) -> &[bool] {
        &self.bits[i * self.m..(i + 1) * self.m]
    }
}

/// `(1/√m) Σ_j a_j·bit(i, j)·eval_weights_jᵀx_i`, linear in `eval_weights`.
pub fn forward_frozen(
    pattern: &ActivationPattern,
    i: usize,
    eval_weights: &Matrix,
    out_signs: &[f64],
    x_i: &[f64],
) -> Result<f64> {
    let m = out_signs.len();
    if i >= pattern.samples() || pattern.width() != m || eval_weights.rows() != m || eval_weights.cols() != x_i.len() {
        return Err(Error::Shape("frozen evaluation shape mismatch".into()));
    }
    let bits = pattern.row(i);
    let s: f64 = summation_order(out_signs)
        .into_iter()
        .map(|j| if bits[j] { out_signs[j] * dot(eval_weights.row(j), x_i) } else { 0.0 })
        .sum();
    Ok(s / (m as f64).sqrt())
}

/// `∂f/∂W`: row `j` is `(a_j/√m)·1(W_jᵀx > 0)·x`.
pub fn output_grad(params: &NetworkParams, x: &[f64]) -> Result<Matrix> {
    check_dim(params, x)?;
    let m = params.width();
    let scale = 1.0 / (m as f64).sqrt();
    let mut g = Matrix::zeros(m, params.dim());
    for j in 0..m {
        if dot(params.weights.row(j), x) > 0.0 {
            let c = params.out_signs[j] * scale;
            for (gk, xk) in g.row_mut(j).iter_mut().zip(x) {
                *gk = c * xk;
            }
        }
    }
    Ok(g)
}

/// Neurons whose indicator `1(W_jᵀx > 0)` differs between `params_t` and `params_0`.
pub fn flip_set(params_t: &NetworkParams, params_0: &NetworkParams, x: &[f64]) -> Result<Vec<usize>> {
    if !params_t.weights.same_shape(&params_0.weights) {
        return Err(Error::Shape("flip set needs equal shapes".into()));
    }
    check_dim(params_t, x)?;
    Ok(flips_between(&params_t.weights, &params_0.weights, x))
}

pub(crate) fn flips_between(w_t: &Matrix, w_0: &Matrix, x: &[f64]) -> Vec<usize> {
    w_t.iter_rows()
        .zip(w_0.iter_rows())
        .enumerate()
        .filter(|(_, (a, b))| (dot(a, x) > 0.0) != (dot(b, x) > 0.0))
        .map(|(j, _)| j)
        .collect()
}

const CHECKPOINT_MAGIC: &[u8; 4] = b"KDBW";
const CHECKPOINT_VERSION: u32 = 1;

/// Checkpoint layout (little-endian): `"KDBW"`, `u32` version, `u64 m`,
/// `u64 d`, then `m` signs, `m·d` weights and `m·d` initial weights as `f64`.
pub fn write_checkpoint<W: Write>(params: &NetworkParams, mut out: W) -> std::io::Result<()> {
    out.write_all(CHECKPOINT_MAGIC)?;
    out.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    out.write_all(&(params.width() as u64).to_le_bytes())?;
    out.write_all(&(params.dim() as u64).to_le_bytes())?;
    let values = params
        .out_signs
        .iter()
        .chain(params.weights.as_slice())
        .chain(params.init_weights.as_slice());
    for v in values {
        out.write_all(&v.to_le_bytes())?;
    }
    out.flush()
}

pub fn read_checkpoint<R: Read>(mut input: R) -> Result<NetworkParams> {
    let mut buf = Vec::new();
    input
        .read_to_end(&mut buf)
        .map_err(|e| Error::Checkpoint(e.to_string()))?;
    if buf.len() < 24 || &buf[..4] != CHECKPOINT_MAGIC {
        return Err(Error::Checkpoint("missing KDBW header".into()));
    }
    let version = u32::from_le_bytes(buf[4..8].try_into().unwrap());
    if version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let m = u64::from_le_bytes(buf[8..16].try_into().unwrap()) as usize;
    let d = u64::from_le_bytes(buf[16..24].try_into().unwrap()) as usize;
    let count = m
        .checked_mul(d)
        .and_then(|md| md.checked_mul(2))
        .and_then(|v| v.checked_add(m))
        .ok_or_else(|| Error::Checkpoint("size overflow".into()))?;
    let body = &buf[24..];
    if body.len() != count * 8 {
        return Err(Error::Checkpoint(format!("expected {} payload bytes, found {}", count * 8, body.len())));
    }
    let vals: Vec<f64> = body
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let (signs, rest) = vals.split_at(m);
    let (w, w0) = rest.split_at(m * d);
    Ok(NetworkParams {
        out_signs: signs.to_vec(),
        weights: Matrix::from_vec(m, d, w.to_vec())?,
        init_weights: Matrix::from_vec(m, d, w0.to_vec())?,
    })
}

pub fn save_checkpoint(params: &NetworkParams, path: &Path) -> Result<()> {
    let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write_checkpoint(params, std::io::BufWriter::new(f)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<NetworkParams> {
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_checkpoint(std::io::BufReader::new(f))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;

    fn random_vec(rng: &mut rand_chacha::ChaCha8Rng, d: usize) -> Vec<f64> {
        (0..d).map(|_| rng.sample(StandardNormal)).collect()
    }

    #[test]
    fn symmetric_init_outputs_are_exactly_zero() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        for m in [2, 6, 40, 600] {
            let p = init_symmetric(m, 7, m as u64).unwrap();
            for _ in 0..20 {
                let x = random_vec(&mut rng, 7);
                assert_eq!(forward(&p, &x).unwrap(), 0.0);
            }
        }
    }

    #[test]
    fn two_neuron_init_is_mirrored() {
        let p = init_symmetric(2, 3, 11).unwrap();
        assert_eq!(p.out_signs[0], -p.out_signs[1]);
        assert!(p.out_signs[0].abs() == 1.0);
        assert_eq!(p.init_weights.row(0), p.init_weights.row(1));
        assert_eq!(p.weights, p.init_weights);
        p.check_symmetric().unwrap();
    }

    #[test]
    fn odd_width_rejected() {
        assert!(matches!(init_symmetric(3, 2, 0), Err(Error::OddWidth(3))));
    }

    #[test]
    fn hand_example() {
        let p = NetworkParams {
            out_signs: vec![1.0, -1.0],
            weights: Matrix::from_rows(&[vec![2.0, 0.0], vec![-1.0, 0.0]]).unwrap(),
            init_weights: Matrix::zeros(2, 2),
        };
        let f = forward(&p, &[1.0, 0.0]).unwrap();
        // brute-force scalar oracle
        let oracle = (1.0 * f64::max(0.0, 2.0) - 1.0 * f64::max(0.0, -1.0)) / 2f64.sqrt();
        assert_eq!(f, oracle);
        assert!((f - 2f64.sqrt()).abs() < 1e-15);
        assert_eq!(forward(&p, &[0.0, 0.0]).unwrap(), 0.0);
        assert!(forward(&p, &[1.0]).is_err());
    }

    #[test]
    fn symmetric_init_outputs_zero() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        for seed in 0..20 {
            let m = 2 * rng.random_range(1..=256);
            let d = rng.random_range(2..=50);
            let p = init_symmetric(m, d, seed).unwrap();
            for _ in 0..5 {
                let x = random_vec(&mut rng, d);
                assert!(forward(&p, &x).unwrap().abs() <= 1e-9 * (m as f64).sqrt());
            }
        }
    }

    #[test]
    fn frozen_matches_forward_and_is_linear() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(2);
        let p = init_symmetric(16, 4, 3).unwrap();
        let mut w = p.weights.clone();
        for v in w.as_mut_slice() {
            *v += 0.3 * rng.sample::<f64, _>(StandardNormal);
        }
        let p = p.with_weights(w).unwrap();
        let xs = Matrix::from_rows(&(0..5).map(|_| random_vec(&mut rng, 4)).collect::<Vec<_>>()).unwrap();
        let pat = ActivationPattern::of(&p.weights, &xs).unwrap();
        let pat0 = ActivationPattern::of(&p.init_weights, &xs).unwrap();
        let a = Matrix::from_vec(16, 4, (0..64).map(|_| rng.sample(StandardNormal)).collect()).unwrap();
        let b = Matrix::from_vec(16, 4, (0..64).map(|_| rng.sample(StandardNormal)).collect()).unwrap();
        let ab = a.add(&b).unwrap();
        for i in 0..5 {
            let x = xs.row(i);
            let f = forward_frozen(&pat, i, &p.weights, &p.out_signs, x).unwrap();
            assert_eq!(f, forward(&p, x).unwrap());
            let z = forward_frozen(&pat0, i, &p.init_weights, &p.out_signs, x).unwrap();
            assert!(z.abs() < 1e-12);
            let lhs = forward_frozen(&pat, i, &ab, &p.out_signs, x).unwrap();
            let rhs = forward_frozen(&pat, i, &a, &p.out_signs, x).unwrap()
                + forward_frozen(&pat, i, &b, &p.out_signs, x).unwrap();
            assert!((lhs - rhs).abs() < 1e-12);
        }
    }

    #[test]
    fn output_grad_matches_finite_difference() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(4);
        let h = 1e-6;
        let mut checked = 0;
        while checked < 50 {
            let p = init_symmetric(8, 3, rng.random()).unwrap();
            let mut w = p.weights.clone();
            for v in w.as_mut_slice() {
                *v += 0.5 * rng.sample::<f64, _>(StandardNormal);
            }
            let p = p.with_weights(w).unwrap();
            let x = random_vec(&mut rng, 3);
            if p.weights.iter_rows().any(|r| dot(r, &x).abs() < 1e-4) {
                continue;
            }
            let g = output_grad(&p, &x).unwrap();
            for idx in 0..p.weights.as_slice().len() {
                let mut plus = p.clone();
                plus.weights.as_mut_slice()[idx] += h;
                let mut minus = p.clone();
                minus.weights.as_mut_slice()[idx] -= h;
                let fd = (forward(&plus, &x).unwrap() - forward(&minus, &x).unwrap()) / (2.0 * h);
                let an = g.as_slice()[idx];
                assert!((fd - an).abs() <= 1e-5 * an.abs().max(1e-3), "{fd} vs {an}");
            }
            checked += 1;
        }
    }

    #[test]
    fn flip_set_examples() {
        let p0 = init_symmetric(6, 3, 9).unwrap();
        let x = [0.3, -0.2, 0.5];
        assert!(flip_set(&p0, &p0, &x).unwrap().is_empty());
        let mut w = p0.weights.clone();
        for v in w.row_mut(4) {
            *v = -*v;
        }
        let pt = p0.with_weights(w).unwrap();
        assert_eq!(flip_set(&pt, &p0, &x).unwrap(), vec![4]);
    }

    #[test]
    fn checkpoint_round_trips() {
        let mut p = init_symmetric(6, 5, 1).unwrap();
        p.weights.as_mut_slice()[3] = -0.0;
        p.weights.as_mut_slice()[4] = f64::MIN_POSITIVE / 3.0;
        let mut bytes = Vec::new();
        write_checkpoint(&p, &mut bytes).unwrap();
        assert_eq!(bytes.len(), 24 + 8 * (6 + 2 * 30));
        let q = read_checkpoint(&bytes[..]).unwrap();
        assert_eq!(
            p.weights.as_slice().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            q.weights.as_slice().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
        assert_eq!(p, q);
        assert!(read_checkpoint(&bytes[..30]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(read_checkpoint(&bad[..]).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn grad_norm_bounded_by_input_norm(seed in 0u64..1000, half in 1usize..32, d in 1usize..12, t in 0.0f64..2.0) {
            let p = init_symmetric(2 * half, d, seed).unwrap();
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed ^ 0xabc);
            let mut w = p.weights.clone();
            for v in w.as_mut_slice() { *v += t * rng.sample::<f64, _>(StandardNormal); }
            let p = p.with_weights(w).unwrap();
            let x = random_vec(&mut rng, d);
            let g = output_grad(&p, &x).unwrap();
            prop_assert!(g.frobenius_norm() <= crate::linalg::norm(&x) * (1.0 + 1e-12));
        }

        #[test]
        fn positive_homogeneity(seed in 0u64..1000, alpha in 0.01f64..10.0) {
            let p = init_symmetric(10, 4, seed).unwrap();
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed + 1);
            let mut w = p.weights.clone();
            for v in w.as_mut_slice() { *v += rng.sample::<f64, _>(StandardNormal); }
            let p = p.with_weights(w).unwrap();
            let scaled = p.with_weights(p.weights.scale(alpha)).unwrap();
            let x = random_vec(&mut rng, 4);
            let f = forward(&p, &x).unwrap();
            let g = forward(&scaled, &x).unwrap();
            prop_assert!((g - alpha * f).abs() <= 1e-12 * (1.0 + (alpha * f).abs()));
        }
    }
}
